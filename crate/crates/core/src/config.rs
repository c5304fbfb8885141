//! Experiment hyperparameters, stored as a flat TOML table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Relations per task after the first.
    #[serde(alias = "N")]
    pub n_way: usize,
    /// Training instances per relation in tasks after the first.
    #[serde(alias = "K_shot")]
    pub k_shot: usize,
    #[serde(alias = "T")]
    pub num_tasks: usize,
    /// Relations in the first task; `None` means `n_way`.
    pub first_task_relations: Option<usize>,
    pub first_task_shots: usize,
    /// Upper bound on test sentences per relation.
    pub test_per_relation: usize,
    /// Memory slots per relation and task.
    #[serde(alias = "L")]
    pub memory_size: usize,
    /// Augmented (and candidate) descriptions per relation.
    #[serde(alias = "K_desc")]
    pub k_desc: usize,
    pub alpha_x: f64,
    pub alpha_xd: f64,
    pub alpha_xc: f64,
    pub tau: f64,
    /// Encoder output dimension.
    #[serde(alias = "d")]
    pub hidden_dim: usize,
    pub max_seq_len: usize,
    pub epochs: usize,
    pub memory_epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    /// Soft-prompt boundaries `n_0 <= n_1 <= n_2 <= n_3`.
    pub prompt_n0: usize,
    pub prompt_n1: usize,
    pub prompt_n2: usize,
    pub prompt_n3: usize,
    /// Hashed vocabulary size of the toy encoder.
    pub vocab_size: usize,
    /// Share one bilinear matrix between the two description channels.
    pub single_w: bool,
    /// Toy encoder reads context only: entity mention words are left out.
    pub mask_entities: bool,
    /// Rescale each step's gradient to at most this L2 norm.
    pub grad_clip: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_way: 10,
            k_shot: 5,
            num_tasks: 8,
            first_task_relations: None,
            first_task_shots: 100,
            test_per_relation: 100,
            memory_size: 5,
            k_desc: 5,
            alpha_x: 1.0,
            alpha_xd: 2.0,
            alpha_xc: 2.0,
            tau: 0.1,
            hidden_dim: 768,
            max_seq_len: 256,
            epochs: 10,
            memory_epochs: 10,
            learning_rate: 1e-5,
            momentum: 0.0,
            batch_size: 16,
            seeds: vec![0, 1, 2, 3, 4, 5],
            prompt_n0: 3,
            prompt_n1: 6,
            prompt_n2: 9,
            prompt_n3: 12,
            vocab_size: 4096,
            single_w: false,
            mask_entities: true,
            grad_clip: None,
        }
    }
}

impl ExperimentConfig {
    /// 80 relations in 8 ten-way tasks; 100 shots in the first task, 5 after.
    pub fn fewrel() -> Self {
        ExperimentConfig::default()
    }

    /// Desk-scale setting for the toy encoder: four 2-way 5-shot tasks, d=16.
    pub fn toy() -> Self {
        ExperimentConfig {
            n_way: 2,
            k_shot: 5,
            num_tasks: 4,
            first_task_shots: 5,
            test_per_relation: 15,
            k_desc: 3,
            hidden_dim: 16,
            max_seq_len: 64,
            epochs: 30,
            memory_epochs: 30,
            learning_rate: 0.1,
            batch_size: 8,
            grad_clip: Some(5.0),
            seeds: vec![0, 1, 2],
            ..Default::default()
        }
    }

    /// 41 relations: 6 in the first task, 5-way afterwards.
    pub fn tacred() -> Self {
        ExperimentConfig { n_way: 5, first_task_relations: Some(6), ..Default::default() }
    }

    pub fn first_task_way(&self) -> usize {
        self.first_task_relations.unwrap_or(self.n_way)
    }

    /// Distinct determined relations the stream consumes.
    pub fn total_relations(&self) -> usize {
        if self.num_tasks == 0 {
            0
        } else {
            self.first_task_way() + (self.num_tasks - 1) * self.n_way
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        for (name, a) in [("alpha_x", self.alpha_x), ("alpha_xd", self.alpha_xd), ("alpha_xc", self.alpha_xc)] {
            if !(a >= 0.0 && a.is_finite()) {
                return fail(format!("{name} must be a finite value >= 0, got {a}"));
            }
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.tau > 0.0) {
            return fail(format!("tau must be > 0, got {}", self.tau));
        }
        if self.hidden_dim == 0 || self.vocab_size == 0 {
            return fail("hidden_dim and vocab_size must be positive".into());
        }
        if self.k_desc == 0 {
            return fail("k_desc must be >= 1".into());
        }
        if self.num_tasks == 0 || self.n_way == 0 || self.k_shot == 0 {
            return fail("num_tasks, n_way and k_shot must be positive".into());
        }
        if !(self.prompt_n0 <= self.prompt_n1
            && self.prompt_n1 <= self.prompt_n2
            && self.prompt_n2 <= self.prompt_n3)
        {
            return fail("prompt boundaries must satisfy n0 <= n1 <= n2 <= n3".into());
        }
        if self.max_seq_len < self.prompt_n3 + 3 {
            return fail(format!(
                "max_seq_len {} cannot hold the template tail ({} prompt slots)",
                self.max_seq_len, self.prompt_n3
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return fail(format!("grad_clip must be a finite value > 0, got {c}"));
            }
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return fail("learning_rate must be >= 0 and momentum in [0, 1)".into());
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Ablation label in the style of the loss ablation tables.
    pub fn ablation_label(&self) -> String {
        let removed: Vec<&str> = [
            (self.alpha_x, "L_HSMT"),
            (self.alpha_xd, "L_WMI_SD"),
            (self.alpha_xc, "L_WMI_SC"),
        ]
        .into_iter()
        .filter(|(a, _)| *a == 0.0)
        .map(|(_, n)| n)
        .collect();
        if removed.is_empty() {
            "OFCRE".to_string()
        } else {
            format!("w/o {}", removed.join(", "))
        }
    }
}
