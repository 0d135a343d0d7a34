use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ProtocolError;
use crate::rollout::RolloutStore;
use crate::scoring::RubricSpec;

/// A rollout offered for blind review. Original answers are withheld.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaQueueItem {
    pub rollout_id: String,
    pub task: String,
    pub questions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_evaluator: Option<String>,
}

/// Number of rollouts reviewed at `fraction` of `n`.
pub fn qa_sample_size(n: usize, fraction: f64) -> usize {
    // guard against 0.27 * 2700 landing a hair above an integer
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Uniform sample without replacement of ⌈fraction·N⌉ rollouts, returned in
/// rollout id order.
pub fn sample_qa_queue(
    store: &RolloutStore,
    fraction: f64,
    seed: u64,
    rubrics: &BTreeMap<String, RubricSpec>,
) -> Result<Vec<QaQueueItem>, ProtocolError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(ProtocolError::InvalidFraction(fraction));
    }
    if store.is_empty() {
        return Err(ProtocolError::EmptyStore);
    }
    let n = store.len();
    let k = qa_sample_size(n, fraction).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    let records: Vec<_> = store.records().collect();
    Ok(picked
        .into_iter()
        .map(|i| {
            let r = records[i];
            QaQueueItem {
                rollout_id: r.rollout_id.clone(),
                task: r.task.clone(),
                questions: rubrics
                    .get(&r.task)
                    .map(|s| s.questions().cloned().collect())
                    .unwrap_or_default(),
                original_evaluator: r.evaluator_id.clone(),
            }
        })
        .collect())
}
