//! Deterministic mini-batch training of [`ModelWeights`].

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{LossParams, ModelWeights, PairTarget};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    /// Adam with the usual β₁ = 0.9, β₂ = 0.999, ε = 10⁻⁸.
    Adam,
    /// Adam normalizing by the running maximum of the second moment.
    AmsGrad,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lr: f64,
    /// Multiplied into the learning rate after every epoch.
    pub lr_decay: f64,
    pub max_epochs: usize,
    pub loss: LossParams,
    /// Pairs at or below this overlap carry no yaw loss.
    pub yaw_train_min_overlap: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lr: 1e-3,
            lr_decay: 0.99,
            max_epochs: 100,
            loss: LossParams::default(),
            yaw_train_min_overlap: 0.3,
            batch_size: 1,
            optimizer: Optimizer::Sgd,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.lr_decay, self.loss.alpha, self.loss.overlap.scale, self.loss.overlap.offset, self.loss.overlap.shift];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("hyperparameters must all be positive".into()));
        }
        if !(self.yaw_train_min_overlap > 0.0 && self.yaw_train_min_overlap < 1.0) {
            return Err(Error::Config("yaw_train_min_overlap must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// One labeled pair, referring to inputs by index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub a: usize,
    pub b: usize,
    pub overlap: f64,
    pub yaw: Option<u16>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub inputs: Vec<Tensor>,
    pub pairs: Vec<TrainingPair>,
}

impl TrainingSet {
    fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Validation("training set has no pairs".into()));
        }
        if let Some(p) = self.pairs.iter().find(|p| p.a >= self.inputs.len() || p.b >= self.inputs.len()) {
            return Err(Error::Validation(format!("pair ({}, {}) refers to a missing input", p.a, p.b)));
        }
        Ok(())
    }

    fn target(&self, p: &TrainingPair, hp: &Hyperparams) -> PairTarget {
        PairTarget { overlap: p.overlap, yaw: p.yaw.filter(|_| p.overlap > hp.yaw_train_min_overlap) }
    }
}

/// Aggregate quality of a model on a set of pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub mean_loss: f64,
    pub overlap_mae: f64,
    /// Exact-degree yaw accuracy over pairs that carry a yaw target.
    pub yaw_accuracy: Option<f64>,
    pub yaw_pairs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    /// Mean loss of the pairs as they were visited during the epoch.
    pub running_loss: f64,
    pub validation: Option<SetMetrics>,
}

pub struct TrainOutcome {
    /// Best-validation weights, or the final weights without a validation set.
    pub weights: ModelWeights,
    pub reports: Vec<EpochReport>,
}

/// Loss and prediction quality of `weights` on every pair of `set`.
pub fn evaluate_set(weights: &ModelWeights, set: &TrainingSet, hp: &Hyperparams) -> Result<SetMetrics> {
    set.validate()?;
    let results: Vec<_> = set
        .pairs
        .par_iter()
        .map(|p| weights.pair_loss(&set.inputs[p.a], &set.inputs[p.b], &set.target(p, hp), &hp.loss, None).map(|l| (p, l)))
        .collect::<Result<_>>()?;
    let n = results.len() as f64;
    let mut loss = 0.0;
    let mut mae = 0.0;
    let (mut yaw_pairs, mut yaw_hits) = (0usize, 0usize);
    for (p, l) in &results {
        loss += l.total;
        mae += (l.predicted_overlap - p.overlap).abs();
        if let Some(y) = set.target(p, hp).yaw {
            yaw_pairs += 1;
            yaw_hits += usize::from(l.predicted_yaw == y);
        }
    }
    Ok(SetMetrics {
        mean_loss: loss / n,
        overlap_mae: mae / n,
        yaw_accuracy: (yaw_pairs > 0).then(|| yaw_hits as f64 / yaw_pairs as f64),
        yaw_pairs,
    })
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    v_max: Vec<f64>,
    t: i32,
}

/// Trains from `init`. The pair order of every epoch comes from a ChaCha8
/// stream seeded with `hp.seed`, and batch gradients are summed in pair
/// order, so equal inputs give bit-identical weights. `on_epoch` sees the
/// weights after every epoch (checkpointing).
pub fn train(
    init: ModelWeights,
    set: &TrainingSet,
    validation: Option<&TrainingSet>,
    hp: &Hyperparams,
    mut on_epoch: impl FnMut(&EpochReport, &ModelWeights) -> Result<()>,
) -> Result<TrainOutcome> {
    hp.validate()?;
    set.validate()?;
    let mut weights = init;
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..set.pairs.len()).collect();
    let mut lr = hp.lr;
    let mut reports = Vec::with_capacity(hp.max_epochs);
    let mut best: Option<(f64, ModelWeights)> = None;
    let n_params = weights.param_count();
    let mut adam = AdamState { m: vec![0.0; n_params], v: vec![0.0; n_params], v_max: vec![0.0; n_params], t: 0 };

    for _ in 0..hp.max_epochs {
        order.shuffle(&mut rng);
        let mut running = 0.0;
        for batch in order.chunks(hp.batch_size) {
            let per_pair: Vec<(f64, ModelWeights)> = batch
                .par_iter()
                .map(|&i| {
                    let p = &set.pairs[i];
                    let mut g = weights.zeros_like();
                    let l = weights.pair_loss(&set.inputs[p.a], &set.inputs[p.b], &set.target(p, hp), &hp.loss, Some(&mut g))?;
                    Ok((l.total, g))
                })
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grad: Vec<f64> = Vec::with_capacity(n_params);
            for (k, (loss, g)) in per_pair.iter().enumerate() {
                running += loss;
                let flat = g.params().concat();
                if !flat.iter().all(|v| v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient at epoch {}", weights.epoch + 1)));
                }
                if k == 0 {
                    grad = flat;
                } else {
                    grad.iter_mut().zip(&flat).for_each(|(a, b)| *a += b);
                }
            }
            grad.iter_mut().for_each(|v| *v *= scale);
            apply_update(&mut weights, &grad, lr, hp.optimizer, &mut adam);
        }
        weights.epoch += 1;
        let validation = validation.map(|v| evaluate_set(&weights, v, hp)).transpose()?;
        let report = EpochReport { epoch: weights.epoch, lr, running_loss: running / set.pairs.len() as f64, validation };
        log::info!(
            "epoch {:3}  lr {:.3e}  loss {:.5}{}",
            report.epoch,
            lr,
            report.running_loss,
            validation.map_or(String::new(), |m| format!("  val loss {:.5}  val mae {:.4}", m.mean_loss, m.overlap_mae))
        );
        if !report.running_loss.is_finite() {
            return Err(Error::Numeric(format!("loss diverged at epoch {}", report.epoch)));
        }
        on_epoch(&report, &weights)?;
        if let Some(m) = validation {
            if best.as_ref().is_none_or(|(b, _)| m.mean_loss < *b) {
                best = Some((m.mean_loss, weights.clone()));
            }
        }
        reports.push(report);
        lr *= hp.lr_decay;
    }
    let weights = best.map_or(weights, |(_, w)| w);
    Ok(TrainOutcome { weights, reports })
}

fn apply_update(weights: &mut ModelWeights, grad: &[f64], lr: f64, optimizer: Optimizer, adam: &mut AdamState) {
    let mut k = 0;
    match optimizer {
        Optimizer::Sgd => {
            for block in weights.params_mut() {
                for w in block.iter_mut() {
                    *w -= lr * grad[k];
                    k += 1;
                }
            }
        }
        Optimizer::Adam | Optimizer::AmsGrad => {
            const B1: f64 = 0.9;
            const B2: f64 = 0.999;
            adam.t += 1;
            let c1 = 1.0 - B1.powi(adam.t);
            let c2 = 1.0 - B2.powi(adam.t);
            for block in weights.params_mut() {
                for w in block.iter_mut() {
                    let g = grad[k];
                    adam.m[k] = B1 * adam.m[k] + (1.0 - B1) * g;
                    adam.v[k] = B2 * adam.v[k] + (1.0 - B2) * g * g;
                    let v = if optimizer == Optimizer::AmsGrad {
                        adam.v_max[k] = adam.v_max[k].max(adam.v[k]);
                        adam.v_max[k]
                    } else {
                        adam.v[k]
                    };
                    *w -= lr * (adam.m[k] / c1) / ((v / c2).sqrt() + 1e-8);
                    k += 1;
                }
            }
        }
    }
}
