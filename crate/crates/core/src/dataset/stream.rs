//! Episodic task-stream sampling.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::build::{OpenDataset, OpenSentence};
use crate::config::ExperimentConfig;
use crate::data::{Instance, RelationId, TaskDataset, TaskStream};
use crate::error::{Error, Result};

/// Splits the open dataset into `num_tasks` tasks with disjoint relation sets.
///
/// Every sentence is owned by the relation of its first DR instance. A training
/// sentence contributes that single DR instance plus all of its UR instances,
/// so the task sees exactly `shots` DR instances per relation. Test sentences
/// are drawn from the remainder, up to `test_per_relation` each.
pub fn sample_task_stream(dataset: &OpenDataset, config: &ExperimentConfig, seed: u64) -> Result<TaskStream> {
    let mut by_relation: BTreeMap<RelationId, Vec<&OpenSentence>> = BTreeMap::new();
    for s in &dataset.sentences {
        if let Some(dr) = s.instances.iter().find(|i| i.is_determined()) {
            by_relation.entry(dr.label.clone()).or_default().push(s);
        }
    }
    let needed = config.total_relations();
    if by_relation.len() < needed {
        return Err(Error::Insufficient(format!(
            "stream needs {needed} determined relations, dataset has {} (short by {})",
            by_relation.len(),
            needed - by_relation.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut relations: Vec<RelationId> = by_relation.keys().cloned().collect();
    relations.shuffle(&mut rng);
    relations.truncate(needed);

    let mut tasks = Vec::with_capacity(config.num_tasks);
    let mut cursor = 0;
    for t in 0..config.num_tasks {
        let (way, shots) = if t == 0 {
            (config.first_task_way(), config.first_task_shots)
        } else {
            (config.n_way, config.k_shot)
        };
        let mut task_relations = relations[cursor..cursor + way].to_vec();
        cursor += way;
        task_relations.sort();

        let mut train = Vec::new();
        let mut test = Vec::new();
        for r in &task_relations {
            let mut pool = by_relation[r].clone();
            pool.sort_by(|a, b| a.id.cmp(&b.id));
            pool.shuffle(&mut rng);
            if pool.len() < shots {
                return Err(Error::Insufficient(format!(
                    "relation `{r}` in task {} needs {shots} training sentences, has {} (short by {})",
                    t + 1,
                    pool.len(),
                    shots - pool.len()
                )));
            }
            let (train_part, rest) = pool.split_at(shots);
            for s in train_part {
                train.extend(sentence_instances(s, r));
            }
            let test_part = &rest[..rest.len().min(config.test_per_relation)];
            if test_part.is_empty() {
                warn!("relation `{r}` has no test sentences left");
            }
            for s in test_part {
                test.extend(sentence_instances(s, r));
            }
        }
        tasks.push(TaskDataset { index: t, relations: task_relations, train, test });
    }
    let stream = TaskStream { tasks, n_way: config.n_way, k_shot: config.k_shot, num_tasks: config.num_tasks };
    stream.check_disjoint()?;
    Ok(stream)
}

/// The sentence's first DR instance for `relation` plus all its UR instances.
fn sentence_instances(s: &OpenSentence, relation: &RelationId) -> Vec<Instance> {
    let mut out = Vec::new();
    if let Some(dr) = s.instances.iter().find(|i| i.is_determined() && &i.label == relation) {
        out.push(dr.clone());
    }
    out.extend(s.instances.iter().filter(|i| !i.is_determined()).cloned());
    out
}
