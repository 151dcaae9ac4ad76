use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Demonstration, ScoredSample};
use crate::model::Theta;
use crate::planner::PlannerConfig;
use crate::tl::{enumerate_tasks, TaskAst};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Inverse rationality.
    pub alpha: f64,
    /// Weight of transition costs.
    pub lambda: f64,
    /// Weight of the contrastive term.
    pub gamma: f64,
    /// Temperature of the contrastive softmax.
    pub beta: f64,
    pub negatives: usize,
    /// Leaves per sampled negative task, at most.
    pub negative_atoms: usize,
    pub lr: f64,
    /// Learning rate multiplier applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub planner: PlannerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            lambda: 1.0,
            gamma: 0.1,
            beta: 1.0,
            negatives: 4,
            negative_atoms: 3,
            lr: 0.1,
            lr_decay: 0.5,
            decay_every: 10,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            planner: PlannerConfig::train(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean score of the true task.
    pub mean_score: f64,
    /// Fraction of samples whose true task outscored all negatives.
    pub contrastive_accuracy: f64,
    pub wall_time: f64,
    pub skipped: usize,
}

pub struct TrainOutcome {
    pub theta: Theta,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset")]
    Empty,
    #[error("parameters became non-finite in epoch {0}")]
    NonFinite(usize),
}

/// `count` distinct tasks from `pool`, none equal to `truth` in normal form.
pub fn sample_negatives(pool: &[TaskAst], truth: &TaskAst, count: usize, rng: &mut impl Rng) -> Vec<TaskAst> {
    let truth = truth.canonical();
    let mut out: Vec<TaskAst> = Vec::with_capacity(count);
    let mut guard = 0;
    while out.len() < count && guard < 100 * count.max(1) {
        guard += 1;
        let t = &pool[rng.gen_range(0..pool.len())];
        if *t != truth && !out.contains(t) {
            out.push(t.clone());
        }
    }
    out
}

/// Gradient ascent on the contrastive objective. Deterministic given
/// `config.seed`. `on_epoch` sees each log record as it is produced.
pub fn train(
    dataset: &[Demonstration],
    theta: Theta,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Theta),
) -> Result<TrainOutcome, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::Empty);
    }
    let mut theta = theta;
    let pool = enumerate_tasks(theta.subgoals(), config.negative_atoms);
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let lr = config.lr * config.lr_decay.powi((epoch / config.decay_every.max(1)) as i32);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        let negatives: Vec<Vec<TaskAst>> = order
            .iter()
            .map(|&i| sample_negatives(&pool, &dataset[i].task, config.negatives, &mut rng))
            .collect();
        let (mut score_sum, mut ranked, mut used, mut skipped) = (0.0, 0usize, 0usize, 0usize);
        for (chunk, negs) in order
            .chunks(config.batch_size.max(1))
            .zip(negatives.chunks(config.batch_size.max(1)))
        {
            let results: Vec<Option<(f64, bool, Vec<f64>)>> = chunk
                .par_iter()
                .zip(negs.par_iter())
                .map(|(&i, negs)| {
                    let demo = &dataset[i];
                    let sample = ScoredSample::new(demo, negs, &theta, config).ok()?;
                    if !sample.truth.score.is_finite() {
                        return None;
                    }
                    let grad = sample.gradient(demo, &theta, config);
                    Some((sample.truth.score, sample.ranked_first(), grad))
                })
                .collect();
            let mut grad = vec![0.0; theta.param_count()];
            let mut count = 0;
            for r in results {
                let Some((score, first, g)) = r else {
                    skipped += 1;
                    continue;
                };
                score_sum += score;
                ranked += first as usize;
                count += 1;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            used += count;
            if count == 0 {
                continue;
            }
            let mut params = theta.params();
            for (p, g) in params.iter_mut().zip(&grad) {
                *p += lr * g / count as f64;
            }
            if !params.iter().all(|p| p.is_finite()) {
                return Err(TrainError::NonFinite(epoch));
            }
            theta.set_params(&params);
        }
        let record = EpochLog {
            epoch,
            mean_score: score_sum / used.max(1) as f64,
            contrastive_accuracy: ranked as f64 / used.max(1) as f64,
            wall_time: started.elapsed().as_secs_f64(),
            skipped,
        };
        on_epoch(&record, &theta);
        log.push(record);
    }
    Ok(TrainOutcome { theta, log })
}
