//! Nearest-class-mean prediction, the OIE null filter and metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use log::warn;
use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::data::{ContinualState, Instance, RelationId, TaskStream};
use crate::encoding::{build_template, EncoderInterface, ModelState};
use crate::error::{Error, Result};
use crate::gateway::Gateway;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    /// Seen determined relations only; undetermined test pairs are excluded.
    DrOnly,
    /// The undetermined relation competes through its description mean.
    WithUr,
    /// As `WithUr`, after dropping pairs the OIE step finds no trigger for.
    WithUrOie,
}

impl PredictionMode {
    pub const ALL: [PredictionMode; 3] = [PredictionMode::DrOnly, PredictionMode::WithUr, PredictionMode::WithUrOie];

    pub fn as_str(self) -> &'static str {
        match self {
            PredictionMode::DrOnly => "dr_only",
            PredictionMode::WithUr => "with_ur",
            PredictionMode::WithUrOie => "with_ur_oie",
        }
    }
}

impl fmt::Display for PredictionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PredictionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PredictionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode `{s}` (dr_only, with_ur, with_ur_oie)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Kind {
    #[default]
    Micro,
    Macro,
}

pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

/// Relation whose prototype has the highest cosine similarity to `z`; ties
/// go to the smaller relation id.
pub fn predict(z: ArrayView1<f64>, state: &ContinualState, mode: PredictionMode) -> Result<RelationId> {
    let mut best: Option<(&RelationId, f64)> = None;
    for (r, p) in &state.prototypes {
        if mode == PredictionMode::DrOnly && r.is_undetermined() {
            continue;
        }
        if p.len() != z.len() {
            return Err(Error::DimensionMismatch { expected: z.len(), actual: p.len() });
        }
        let s = cosine(z, p.view());
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((r, s));
        }
    }
    best.map(|(r, _)| r.clone()).ok_or(Error::EmptyPrototypes)
}

/// Undetermined when the OIE step finds no trigger for the pair, otherwise
/// the `WithUr` prediction. Transport failures leave the filter open.
pub fn oie_filtered_predict(
    inst: &Instance,
    z: ArrayView1<f64>,
    state: &ContinualState,
    gateway: &Gateway,
) -> Result<RelationId> {
    match gateway.extract_triplet(&inst.tokens, &inst.head, &inst.tail) {
        Ok(t) if t.is_na() => Ok(RelationId::undetermined()),
        Ok(_) => predict(z, state, PredictionMode::WithUr),
        Err(e) => {
            warn!("OIE filter unavailable for {}: {e}; passing through", inst.id);
            predict(z, state, PredictionMode::WithUr)
        }
    }
}

fn check_aligned(preds: &[RelationId], golds: &[RelationId]) -> Result<()> {
    if preds.len() != golds.len() {
        return Err(Error::DimensionMismatch { expected: golds.len(), actual: preds.len() });
    }
    Ok(())
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Micro-F1 over determined relations; the undetermined label is the
/// negative class.
pub fn micro_f1(preds: &[RelationId], golds: &[RelationId]) -> Result<f64> {
    check_aligned(preds, golds)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in preds.iter().zip(golds) {
        if p == g {
            if !g.is_undetermined() {
                tp += 1;
            }
            continue;
        }
        if !p.is_undetermined() {
            fp += 1;
        }
        if !g.is_undetermined() {
            fn_ += 1;
        }
    }
    Ok(f1_from_counts(tp, fp, fn_))
}

/// Unweighted mean of per-relation F1 over the determined relations that
/// occur as gold or prediction.
pub fn macro_f1(preds: &[RelationId], golds: &[RelationId]) -> Result<f64> {
    check_aligned(preds, golds)?;
    let classes: BTreeSet<&RelationId> = preds.iter().chain(golds).filter(|r| !r.is_undetermined()).collect();
    if classes.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for c in &classes {
        let tp = preds.iter().zip(golds).filter(|(p, g)| p == c && g == c).count();
        let fp = preds.iter().zip(golds).filter(|(p, g)| p == c && g != c).count();
        let fn_ = preds.iter().zip(golds).filter(|(p, g)| p != c && g == c).count();
        sum += f1_from_counts(tp, fp, fn_);
    }
    Ok(sum / classes.len() as f64)
}

/// Drop from the first-task score to the final score.
pub fn forgetting(first_task_score: f64, final_score: f64) -> f64 {
    first_task_score - final_score
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub f1: f64,
    pub predictions: Vec<RelationId>,
    pub golds: Vec<RelationId>,
}

/// Test instances the mode is scored on.
pub fn test_split(test: &[Instance], mode: PredictionMode) -> Vec<&Instance> {
    test.iter().filter(|i| mode != PredictionMode::DrOnly || i.is_determined()).collect()
}

pub fn evaluate(
    model: &ModelState,
    state: &ContinualState,
    test: &[Instance],
    mode: PredictionMode,
    gateway: Option<&Gateway>,
    kind: F1Kind,
) -> Result<Evaluation> {
    let split = test_split(test, mode);
    let mut predictions = Vec::with_capacity(split.len());
    for inst in &split {
        let z: Array1<f64> = model.encode(&build_template(inst, model.prompt_config())?)?;
        let p = match (mode, gateway) {
            (PredictionMode::WithUrOie, Some(gw)) => oie_filtered_predict(inst, z.view(), state, gw)?,
            (PredictionMode::WithUrOie, None) => {
                return Err(Error::Precondition("with_ur_oie evaluation needs a gateway".into()))
            }
            _ => predict(z.view(), state, mode)?,
        };
        predictions.push(p);
    }
    let golds: Vec<RelationId> = split.iter().map(|i| i.label.clone()).collect();
    let f1 = match kind {
        F1Kind::Micro => micro_f1(&predictions, &golds)?,
        F1Kind::Macro => macro_f1(&predictions, &golds)?,
    };
    Ok(Evaluation { f1, predictions, golds })
}

/// Test sets of tasks `0..=upto`, concatenated.
pub fn cumulative_test(stream: &TaskStream, upto: usize) -> Vec<Instance> {
    stream.tasks.iter().take(upto + 1).flat_map(|t| t.test.iter().cloned()).collect()
}

/// One seed's scores (percent) after each task on the cumulative test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub mode: PredictionMode,
    pub seed: u64,
    pub scores: Vec<f64>,
}

impl MetricTable {
    pub fn forgetting(&self) -> Option<f64> {
        Some(forgetting(*self.scores.first()?, *self.scores.last()?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub mode: PredictionMode,
    pub seeds: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub forgetting_mean: f64,
    pub forgetting_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-task mean and sample standard deviation across seeds.
pub fn aggregate_seeds(records: &[MetricTable]) -> Result<SeedSummary> {
    let first = records.first().ok_or_else(|| Error::InvalidArgument("no records to aggregate".into()))?;
    for r in records {
        if r.scores.len() != first.scores.len() || r.mode != first.mode {
            return Err(Error::DatasetInconsistency(format!(
                "seed {} has {} tasks in mode {}, expected {} in mode {}",
                r.seed,
                r.scores.len(),
                r.mode,
                first.scores.len(),
                first.mode
            )));
        }
    }
    let (mut mean, mut std) = (Vec::new(), Vec::new());
    for t in 0..first.scores.len() {
        let col: Vec<f64> = records.iter().map(|r| r.scores[t]).collect();
        let (m, s) = mean_std(&col);
        mean.push(m);
        std.push(s);
    }
    let forgets: Vec<f64> = records.iter().filter_map(MetricTable::forgetting).collect();
    let (forgetting_mean, forgetting_std) = if forgets.is_empty() { (0.0, 0.0) } else { mean_std(&forgets) };
    Ok(SeedSummary { mode: first.mode, seeds: records.len(), mean, std, forgetting_mean, forgetting_std })
}

/// Markdown table: one row per labelled summary, `mean±std` per task.
pub fn render_markdown(rows: &[(String, SeedSummary)]) -> String {
    let tasks = rows.iter().map(|(_, s)| s.mean.len()).max().unwrap_or(0);
    let mut out = String::from("| Method | Mode |");
    for t in 1..=tasks {
        out.push_str(&format!(" T{t} |"));
    }
    out.push_str(" Forgetting |\n|---|---|");
    out.push_str(&"---|".repeat(tasks + 1));
    out.push('\n');
    for (label, s) in rows {
        out.push_str(&format!("| {label} | {} |", s.mode));
        for t in 0..tasks {
            match (s.mean.get(t), s.std.get(t)) {
                (Some(m), Some(sd)) => out.push_str(&format!(" {m:.2}±{sd:.2} |")),
                _ => out.push_str(" |"),
            }
        }
        out.push_str(&format!(" {:.2}±{:.2} |\n", s.forgetting_mean, s.forgetting_std));
    }
    out
}

pub fn render_csv(rows: &[(String, SeedSummary)]) -> String {
    let mut out = String::from("method,mode,task,mean,std\n");
    for (label, s) in rows {
        for (t, (m, sd)) in s.mean.iter().zip(&s.std).enumerate() {
            out.push_str(&format!("{label},{},{},{m:.4},{sd:.4}\n", s.mode, t + 1));
        }
        out.push_str(&format!("{label},{},forgetting,{:.4},{:.4}\n", s.mode, s.forgetting_mean, s.forgetting_std));
    }
    out
}

/// Scores per mode across tasks for one run.
pub type ModeScores = BTreeMap<PredictionMode, MetricTable>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{prompts, MockBackend};
    use crate::data::{EntitySpan, InstanceKind, Origin, SpanSource, UR_LABEL};
    use ndarray::array;
    use proptest::prelude::*;

    fn ids(xs: &[&str]) -> Vec<RelationId> {
        xs.iter().map(|s| RelationId::new(*s)).collect()
    }

    fn state(protos: &[(&str, Array1<f64>)]) -> ContinualState {
        let mut s = ContinualState::new(1);
        for (r, p) in protos {
            s.prototypes.insert(RelationId::new(*r), p.clone());
        }
        s
    }

    #[test]
    fn nearest_prototype() {
        let s = state(&[("A", array![1.0, 0.0]), ("B", array![0.0, 1.0]), (UR_LABEL, array![-1.0, 0.0])]);
        assert_eq!(predict(array![1.0, 0.0].view(), &s, PredictionMode::WithUr).unwrap(), RelationId::new("A"));
        assert_eq!(predict(array![0.0, 3.0].view(), &s, PredictionMode::DrOnly).unwrap(), RelationId::new("B"));
        assert_eq!(predict(array![-2.0, 0.1].view(), &s, PredictionMode::WithUr).unwrap(), RelationId::undetermined());
        assert_ne!(predict(array![-2.0, 0.1].view(), &s, PredictionMode::DrOnly).unwrap(), RelationId::undetermined());
        assert!(matches!(predict(array![1.0].view(), &state(&[]), PredictionMode::WithUr), Err(Error::EmptyPrototypes)));
    }

    #[test]
    fn ties_go_to_smaller_id() {
        let s = state(&[("B", array![1.0, 0.0]), ("A", array![1.0, 0.0])]);
        assert_eq!(predict(array![1.0, 1.0].view(), &s, PredictionMode::DrOnly).unwrap(), RelationId::new("A"));
    }

    fn pair(words: &str) -> Instance {
        let tokens: Vec<String> = words.split(' ').map(String::from).collect();
        let n = tokens.len();
        Instance {
            id: "s/1".into(),
            head: EntitySpan::from_tokens(&tokens, 0, 1, SpanSource::Annotated).unwrap(),
            tail: EntitySpan::from_tokens(&tokens, n - 1, n, SpanSource::Annotated).unwrap(),
            tokens,
            label: RelationId::undetermined(),
            kind: InstanceKind::Undetermined,
            origin: Origin::PairEnumeration,
        }
    }

    #[test]
    fn oie_filter_branches() {
        let s = state(&[("A", array![1.0, 0.0]), (UR_LABEL, array![-1.0, 0.0])]);
        let na = pair("Ann and Bob");
        let mut m = MockBackend::new();
        m.script(prompts::render_oie_prompt("Ann and Bob", "Ann", "Bob"), r#"["Ann", null, "Bob"]"#);
        let gw = Gateway::mock(m);
        let z = array![1.0, 0.0];
        assert_eq!(oie_filtered_predict(&na, z.view(), &s, &gw).unwrap(), RelationId::undetermined());

        let related = pair("Ann founded Bob");
        assert_eq!(oie_filtered_predict(&related, z.view(), &s, &gw).unwrap(), RelationId::new("A"));
        assert_eq!(
            oie_filtered_predict(&related, array![-1.0, 0.2].view(), &s, &gw).unwrap(),
            RelationId::undetermined()
        );

        let down = Gateway::new(Box::new(crate::gateway::UnreachableBackend::default()), Default::default())
            .with_retries(0);
        assert_eq!(oie_filtered_predict(&na, z.view(), &s, &down).unwrap(), RelationId::new("A"));
    }

    #[test]
    fn f1_fixtures() {
        assert_eq!(micro_f1(&ids(&["r1", "UR", "r1"]), &ids(&["r1", "r1", "UR"])).unwrap(), 0.5);
        assert_eq!(micro_f1(&ids(&["a", "b"]), &ids(&["a", "b"])).unwrap(), 1.0);
        assert_eq!(micro_f1(&ids(&["UR", "UR"]), &ids(&["a", "b"])).unwrap(), 0.0);
        assert_eq!(micro_f1(&ids(&["UR"]), &ids(&["UR"])).unwrap(), 0.0);
        assert!(micro_f1(&ids(&["a"]), &ids(&[])).is_err());
        assert_eq!(macro_f1(&ids(&["a", "b"]), &ids(&["a", "b"])).unwrap(), 1.0);
        assert!((macro_f1(&ids(&["a", "a"]), &ids(&["a", "b"])).unwrap() - (2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn forgetting_and_aggregation() {
        assert!((forgetting(91.02, 67.62) - 23.40).abs() < 1e-9);
        assert!((forgetting(85.23, 67.8) - 17.43).abs() < 1e-9);
        assert_eq!(forgetting(50.0, 50.0), 0.0);

        let t = |seed, v: f64| MetricTable { mode: PredictionMode::DrOnly, seed, scores: vec![v] };
        let s = aggregate_seeds(&[t(0, 60.0), t(1, 70.0)]).unwrap();
        assert_eq!(s.mean, [65.0]);
        assert!((s.std[0] - 50f64.sqrt()).abs() < 1e-12);
        assert!((s.std[0] - 7.071).abs() < 1e-3);
        assert_eq!(aggregate_seeds(&[t(0, 60.0)]).unwrap().std, [0.0]);
        let six: Vec<MetricTable> = (0..6).map(|i| t(i, 42.0)).collect();
        let s6 = aggregate_seeds(&six).unwrap();
        assert_eq!((s6.mean[0], s6.std[0]), (42.0, 0.0));

        let bad = MetricTable { scores: vec![1.0, 2.0], ..t(2, 0.0) };
        assert!(aggregate_seeds(&[t(0, 1.0), bad]).is_err());
        assert!(aggregate_seeds(&[]).is_err());
    }

    #[test]
    fn rendering() {
        let s = SeedSummary {
            mode: PredictionMode::WithUr,
            seeds: 2,
            mean: vec![91.02, 67.62],
            std: vec![0.5, 1.25],
            forgetting_mean: 23.4,
            forgetting_std: 0.0,
        };
        let md = render_markdown(&[("OFCRE".into(), s.clone())]);
        assert!(md.contains("| OFCRE | with_ur | 91.02±0.50 | 67.62±1.25 | 23.40±0.00 |"), "{md}");
        let csv = render_csv(&[("OFCRE".into(), s)]);
        assert!(csv.contains("OFCRE,with_ur,2,67.6200,1.2500"));
        assert_eq!("with_ur_oie".parse::<PredictionMode>().unwrap(), PredictionMode::WithUrOie);
        assert!("bogus".parse::<PredictionMode>().is_err());
    }

    /// Direct confusion-count oracle.
    fn oracle_micro(preds: &[RelationId], golds: &[RelationId]) -> f64 {
        let ur = RelationId::undetermined();
        let tp = preds.iter().zip(golds).filter(|(p, g)| p == g && **g != ur).count() as f64;
        let predicted = preds.iter().filter(|p| **p != ur).count() as f64;
        let actual = golds.iter().filter(|g| **g != ur).count() as f64;
        if predicted == 0.0 || actual == 0.0 || tp == 0.0 {
            return 0.0;
        }
        let (prec, rec) = (tp / predicted, tp / actual);
        2.0 * prec * rec / (prec + rec)
    }

    proptest! {
        #[test]
        fn micro_matches_oracle(pairs in proptest::collection::vec((0usize..4, 0usize..4), 0..40)) {
            let names = ["UR", "a", "b", "c"];
            let preds: Vec<RelationId> = pairs.iter().map(|p| RelationId::new(names[p.0])).collect();
            let golds: Vec<RelationId> = pairs.iter().map(|p| RelationId::new(names[p.1])).collect();
            prop_assert!((micro_f1(&preds, &golds).unwrap() - oracle_micro(&preds, &golds)).abs() < 1e-12);
        }

        #[test]
        fn predict_matches_brute_force_and_scale(
            z in proptest::collection::vec(-1.0f64..1.0, 3),
            ps in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), 1..6),
            c in 0.01f64..100.0,
        ) {
            let mut s = ContinualState::new(1);
            for (i, p) in ps.iter().enumerate() {
                s.prototypes.insert(RelationId::new(format!("r{i}")), Array1::from_vec(p.clone()));
            }
            let z = Array1::from_vec(z);
            let got = predict(z.view(), &s, PredictionMode::DrOnly).unwrap();
            let mut best = (String::new(), f64::NEG_INFINITY);
            for (i, p) in ps.iter().enumerate() {
                let p = Array1::from_vec(p.clone());
                let cos = cosine(z.view(), p.view());
                if cos > best.1 {
                    best = (format!("r{i}"), cos);
                }
            }
            prop_assert_eq!(got.as_str(), best.0.as_str());
            let scaled = &z * c;
            prop_assert_eq!(predict(scaled.view(), &s, PredictionMode::DrOnly).unwrap(), got.clone());
            for p in s.prototypes.values_mut() {
                *p *= c;
            }
            prop_assert_eq!(predict(z.view(), &s, PredictionMode::DrOnly).unwrap(), got);
        }
    }
}
