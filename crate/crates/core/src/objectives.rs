//! Training objectives and their gradients with respect to the batch
//! representations, the description embeddings and the bilinear matrices.
//!
//! - hardest-triplet soft-margin loss over Euclidean distances;
//! - bilinear description score `h = exp(zᵀ W d / τ)`;
//! - class-balanced anchor weights;
//! - weighted mutual-information loss per description channel;
//! - the weighted total.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::RelationId;
use crate::encoding::Channel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub id: String,
    pub z: Array1<f64>,
    pub label: RelationId,
}

/// Sample representations plus the description embeddings of every label
/// present, per channel.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
    pub raw: BTreeMap<RelationId, Vec<Array1<f64>>>,
    pub candidate: BTreeMap<RelationId, Vec<Array1<f64>>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<&RelationId> {
        self.items.iter().map(|i| &i.label).collect()
    }

    pub fn descriptions(&self, channel: Channel) -> &BTreeMap<RelationId, Vec<Array1<f64>>> {
        match channel {
            Channel::Raw => &self.raw,
            Channel::Candidate => &self.candidate,
        }
    }
}

/// Bilinear matrices and temperature.
#[derive(Debug, Clone, Copy)]
pub struct Scorer<'a> {
    pub w_raw: ArrayView2<'a, f64>,
    pub w_cand: ArrayView2<'a, f64>,
    pub tau: f64,
}

impl<'a> Scorer<'a> {
    pub fn w(&self, channel: Channel) -> ArrayView2<'a, f64> {
        match channel {
            Channel::Raw => self.w_raw,
            Channel::Candidate => self.w_cand,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_x: f64,
    pub alpha_xd: f64,
    pub alpha_xc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha_x: 1.0, alpha_xd: 2.0, alpha_xc: 2.0 }
    }
}

impl LossWeights {
    pub fn from_config(c: &ExperimentConfig) -> Self {
        LossWeights { alpha_x: c.alpha_x, alpha_xd: c.alpha_xd, alpha_xc: c.alpha_xc }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorDiagnostics {
    pub id: String,
    pub label: RelationId,
    pub weight: f64,
    /// `None` when the anchor lacks positives or negatives.
    pub hsmt: Option<f64>,
    pub wmi_sd: f64,
    pub wmi_sc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub hsmt: f64,
    pub wmi_sd: f64,
    pub wmi_sc: f64,
    pub anchors: Vec<AnchorDiagnostics>,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.total, self.hsmt, self.wmi_sd, self.wmi_sc].iter().all(|v| v.is_finite())
    }
}

/// Gradients of the total loss; description gradients mirror the batch maps.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub z: Vec<Array1<f64>>,
    pub raw: BTreeMap<RelationId, Vec<Array1<f64>>>,
    pub candidate: BTreeMap<RelationId, Vec<Array1<f64>>>,
    pub w_raw: Array2<f64>,
    pub w_cand: Array2<f64>,
}

impl LossGradient {
    fn zeros(batch: &Batch, dim: usize) -> Self {
        let like = |m: &BTreeMap<RelationId, Vec<Array1<f64>>>| {
            m.iter().map(|(k, v)| (k.clone(), v.iter().map(|d| Array1::zeros(d.len())).collect())).collect()
        };
        LossGradient {
            z: batch.items.iter().map(|i| Array1::zeros(i.z.len())).collect(),
            raw: like(&batch.raw),
            candidate: like(&batch.candidate),
            w_raw: Array2::zeros((dim, dim)),
            w_cand: Array2::zeros((dim, dim)),
        }
    }

    pub fn descriptions(&self, channel: Channel) -> &BTreeMap<RelationId, Vec<Array1<f64>>> {
        match channel {
            Channel::Raw => &self.raw,
            Channel::Candidate => &self.candidate,
        }
    }

    fn channel_mut(&mut self, channel: Channel) -> (&mut BTreeMap<RelationId, Vec<Array1<f64>>>, &mut Array2<f64>) {
        match channel {
            Channel::Raw => (&mut self.raw, &mut self.w_raw),
            Channel::Candidate => (&mut self.candidate, &mut self.w_cand),
        }
    }
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch { expected: a, actual: b });
    }
    Ok(())
}

pub fn euclidean_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    check_dims(a.len(), b.len())?;
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per anchor: (hardest positive index, its distance, hardest negative index,
/// its distance), or `None` if it has no positive or no negative.
fn hardest(batch: &Batch, x: usize) -> Result<Option<(usize, f64, usize, f64)>> {
    let anchor = &batch.items[x];
    let mut pos: Option<(usize, f64)> = None;
    let mut neg: Option<(usize, f64)> = None;
    for (j, other) in batch.items.iter().enumerate() {
        if j == x {
            continue;
        }
        let dist = euclidean_distance(anchor.z.view(), other.z.view())?;
        if other.label == anchor.label {
            if pos.is_none_or(|(_, d)| dist > d) {
                pos = Some((j, dist));
            }
        } else if neg.is_none_or(|(_, d)| dist < d) {
            neg = Some((j, dist));
        }
    }
    Ok(pos.zip(neg).map(|((p, dp), (n, dn))| (p, dp, n, dn)))
}

fn hsmt_inner(batch: &Batch, mut grad: Option<&mut [Array1<f64>]>, scale: f64) -> Result<(f64, Vec<Option<f64>>)> {
    let mut per_anchor = Vec::with_capacity(batch.len());
    let mut contributing = Vec::new();
    for x in 0..batch.len() {
        match hardest(batch, x)? {
            Some(h) => {
                per_anchor.push(Some(softplus(h.1 - h.3)));
                contributing.push((x, h));
            }
            None => per_anchor.push(None),
        }
    }
    if contributing.is_empty() {
        return Ok((0.0, per_anchor));
    }
    let n = contributing.len() as f64;
    let loss = per_anchor.iter().flatten().sum::<f64>() / n;
    if let Some(g) = grad.as_deref_mut() {
        for &(x, (p, dp, q, dq)) in &contributing {
            let s = scale * sigmoid(dp - dq) / n;
            let zx = &batch.items[x].z;
            if dp > 0.0 {
                let u = (zx - &batch.items[p].z) / dp;
                g[x].scaled_add(s, &u);
                g[p].scaled_add(-s, &u);
            }
            if dq > 0.0 {
                let v = (zx - &batch.items[q].z) / dq;
                g[x].scaled_add(-s, &v);
                g[q].scaled_add(s, &v);
            }
        }
    }
    Ok((loss, per_anchor))
}

/// Mean over anchors with both a positive and a negative of
/// `log(1 + exp(max_pos ξ − min_neg ξ))`; zero when no anchor qualifies.
pub fn hsmt_loss(batch: &Batch) -> Result<f64> {
    hsmt_inner(batch, None, 1.0).map(|(l, _)| l)
}

pub fn bilinear_score(z: ArrayView1<f64>, d: ArrayView1<f64>, w: ArrayView2<f64>, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
    }
    check_dims(w.ncols(), d.len())?;
    check_dims(w.nrows(), z.len())?;
    Ok((z.dot(&w.dot(&d)) / tau).exp())
}

/// `B / (c(x) + Σ_{y ∈ N(x)} c(x)/c(y))`, summing over negative samples;
/// counts include the anchor.
pub fn class_weight<L: PartialEq>(anchor: usize, labels: &[L]) -> f64 {
    let count = |l: &L| labels.iter().filter(|m| *m == l).count() as f64;
    let cx = count(&labels[anchor]);
    let neg: f64 = labels.iter().filter(|l| **l != labels[anchor]).map(|l| cx / count(l)).sum();
    labels.len() as f64 / (cx + neg)
}

/// `−w · log(Σ own / (Σ own + Σ negatives))` given raw `h` values.
pub fn weighted_mi_term(weight: f64, own: &[f64], negatives: &[f64]) -> f64 {
    let num: f64 = own.iter().sum();
    let den = num + negatives.iter().sum::<f64>();
    -weight * (num / den).ln()
}

fn descriptions_for<'b>(
    batch: &'b Batch,
    channel: Channel,
    label: &RelationId,
) -> Result<&'b [Array1<f64>]> {
    match batch.descriptions(channel).get(label) {
        Some(v) if !v.is_empty() => Ok(v),
        _ => Err(Error::MissingDescriptions(label.to_string())),
    }
}

struct WmiOut {
    loss: f64,
    per_anchor: Vec<f64>,
    weights: Vec<f64>,
}

fn wmi_inner(
    batch: &Batch,
    channel: Channel,
    w: ArrayView2<f64>,
    tau: f64,
    weighted: bool,
    mut grad: Option<(&mut LossGradient, f64)>,
) -> Result<WmiOut> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
    }
    let labels = batch.labels();
    let b = batch.len() as f64;
    let mut per_anchor = Vec::with_capacity(batch.len());
    let mut weights = Vec::with_capacity(batch.len());
    for (x, item) in batch.items.iter().enumerate() {
        check_dims(w.nrows(), item.z.len())?;
        let wz = w.t().dot(&item.z);
        // (label, k, is_own) for every term of the normalizer
        let mut terms: Vec<(&RelationId, usize, bool)> = Vec::new();
        for k in 0..descriptions_for(batch, channel, &item.label)?.len() {
            terms.push((&item.label, k, true));
        }
        for other in batch.items.iter().filter(|o| o.label != item.label) {
            for k in 0..descriptions_for(batch, channel, &other.label)?.len() {
                terms.push((&other.label, k, false));
            }
        }
        let mut scores = Vec::with_capacity(terms.len());
        for &(l, k, _) in &terms {
            let d = &batch.descriptions(channel)[l][k];
            check_dims(item.z.len(), d.len())?;
            scores.push(wz.dot(d) / tau);
        }
        let own: Vec<f64> = terms.iter().zip(&scores).filter(|(t, _)| t.2).map(|(_, s)| *s).collect();
        let lse_own = log_sum_exp(&own);
        let lse_all = log_sum_exp(&scores);
        let wx = if weighted { class_weight(x, &labels) } else { 1.0 };
        per_anchor.push(-wx * (lse_own - lse_all));
        weights.push(wx);

        if let Some((g, scale)) = grad.as_mut() {
            let coef = *scale * wx / b;
            let wd_cache: Vec<Array1<f64>> =
                terms.iter().map(|&(l, k, _)| w.dot(&batch.descriptions(channel)[l][k])).collect();
            let (dmap, dw) = g.channel_mut(channel);
            let mut gz = Array1::zeros(item.z.len());
            for (i, &(l, k, is_own)) in terms.iter().enumerate() {
                let p_all = (scores[i] - lse_all).exp();
                let p_own = if is_own { (scores[i] - lse_own).exp() } else { 0.0 };
                let gs = -coef * (p_own - p_all) / tau;
                if gs == 0.0 {
                    continue;
                }
                gz.scaled_add(gs, &wd_cache[i]);
                dmap.get_mut(l).expect("gradient map mirrors batch")[k].scaled_add(gs, &wz);
                let d = &batch.descriptions(channel)[l][k];
                for (r, zr) in item.z.iter().enumerate() {
                    dw.row_mut(r).scaled_add(gs * zr, d);
                }
            }
            g.z[x] += &gz;
        }
    }
    let loss = if per_anchor.is_empty() { 0.0 } else { per_anchor.iter().sum::<f64>() / b };
    Ok(WmiOut { loss, per_anchor, weights })
}

/// Mean over anchors of the class-weighted mutual-information loss for one
/// description channel.
pub fn wmi_loss(batch: &Batch, channel: Channel, scorer: &Scorer) -> Result<f64> {
    wmi_inner(batch, channel, scorer.w(channel), scorer.tau, true, None).map(|o| o.loss)
}

/// Unweighted contrastive estimate `(1/B) Σ_x log(Σ own h / Z(x))`; always
/// `≤ 0`, so `log B + estimate ≤ log B`.
pub fn infonce_estimate(batch: &Batch, channel: Channel, scorer: &Scorer) -> Result<f64> {
    wmi_inner(batch, channel, scorer.w(channel), scorer.tau, false, None).map(|o| -o.loss)
}

fn total_inner(
    batch: &Batch,
    scorer: &Scorer,
    weights: &LossWeights,
    mut grad: Option<&mut LossGradient>,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (hsmt, hsmt_anchor) = hsmt_inner(
        batch,
        grad.as_deref_mut().filter(|_| weights.alpha_x != 0.0).map(|g| g.z.as_mut_slice()),
        weights.alpha_x,
    )?;
    let sd = wmi_inner(
        batch,
        Channel::Raw,
        scorer.w_raw,
        scorer.tau,
        true,
        grad.as_deref_mut().filter(|_| weights.alpha_xd != 0.0).map(|g| (g, weights.alpha_xd)),
    )?;
    let sc = wmi_inner(
        batch,
        Channel::Candidate,
        scorer.w_cand,
        scorer.tau,
        true,
        grad.as_deref_mut().filter(|_| weights.alpha_xc != 0.0).map(|g| (g, weights.alpha_xc)),
    )?;
    let anchors = batch
        .items
        .iter()
        .enumerate()
        .map(|(x, item)| AnchorDiagnostics {
            id: item.id.clone(),
            label: item.label.clone(),
            weight: sd.weights[x],
            hsmt: hsmt_anchor[x],
            wmi_sd: sd.per_anchor[x],
            wmi_sc: sc.per_anchor[x],
        })
        .collect();
    Ok(LossReport {
        total: weights.alpha_x * hsmt + weights.alpha_xd * sd.loss + weights.alpha_xc * sc.loss,
        hsmt,
        wmi_sd: sd.loss,
        wmi_sc: sc.loss,
        anchors,
    })
}

pub fn total_loss(batch: &Batch, scorer: &Scorer, weights: &LossWeights) -> Result<LossReport> {
    total_inner(batch, scorer, weights, None)
}

/// Loss and its gradient. Terms whose coefficient is zero contribute no
/// gradient.
pub fn total_loss_with_grad(
    batch: &Batch,
    scorer: &Scorer,
    weights: &LossWeights,
) -> Result<(LossReport, LossGradient)> {
    let dim = scorer.w_raw.nrows();
    let mut grad = LossGradient::zeros(batch, dim);
    let report = total_inner(batch, scorer, weights, Some(&mut grad))?;
    Ok((report, grad))
}
