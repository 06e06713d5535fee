//! Mini-batch minimization of the combined objective: the representation is
//! computed on the full graph every step (graph convolutions need all
//! neighborhoods), while the regression and balance losses are restricted to
//! the minibatch's units. Adds a weight-only L2 penalty, takes one
//! adaptive-moment or momentum step per batch, and early-stops on validation
//! factual error, returning the best-epoch parameters.

use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::balance::{self, BalanceConfig, IpmKind};
use crate::error::{Error, Result};
use crate::graphdata::NetworkedDataset;
use crate::model::{
    build_forward, init_params, predict_mu, tensor_specs, ModelConfig, ModelInputs, ModelParams,
};
use crate::numkernel::{column, Matrix, NodeId, Tape};
use crate::rng::{rng_for, rng_for_indexed, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

/// Optimization hyperparameters. `alpha` and `beta` here are the objective
/// weights actually used for training; they take precedence over the values
/// carried by a [`BalanceConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub l2_weight: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables
    /// early stopping (and with it the need for a validation split).
    pub patience: usize,
    pub val_fraction: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 0.5,
            learning_rate: 0.01,
            batch_size: 512,
            l2_weight: 0.01,
            max_epochs: 300,
            patience: 30,
            val_fraction: 0.1,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(Error::InvalidConfig("max_epochs must be >= 1".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::InvalidConfig(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.val_fraction >= 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        if !crate::balance::is_positive(self.learning_rate) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.l2_weight < 0.0 || self.l2_weight.is_nan() {
            return Err(Error::InvalidConfig(format!(
                "l2_weight must be non-negative, got {}",
                self.l2_weight
            )));
        }
        Ok(())
    }
}

/// Loss summary of one epoch. Train figures are the batch losses seen by the
/// optimizer, averaged over the epoch weighted by batch size; `l1_val` is
/// the factual MSE on the validation split after the epoch (NaN when the
/// split is empty).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub l1_train: f64,
    pub l2_train: f64,
    pub total_train: f64,
    pub l1_val: f64,
    /// Set on the epoch that exhausted the patience budget.
    pub stopped: bool,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    /// Wall-clock seconds; excluded from the CSV so reports stay
    /// reproducible bit for bit.
    pub wall_time_seconds: f64,
}

impl TrainReport {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("epoch,l1_train,l2_train,total_train,l1_val,stop_flag\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch,
                e.l1_train,
                e.l2_train,
                e.total_train,
                e.l1_val,
                u8::from(e.stopped)
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }
}

/// A seeded shuffle of 0..n for the given epoch, split into consecutive
/// chunks of at most `batch_size` (the last may be short).
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(n >= 1, "cannot batch an empty index set");
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for_indexed(seed, stream::BATCHES, epoch as u64));
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Deterministic validation split: a seeded shuffle of 0..n, the first
/// floor(n * val_fraction) units held out. Both halves are returned sorted.
pub fn validation_split(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, stream::VAL_SPLIT));
    let n_val = (n as f64 * val_fraction).floor() as usize;
    let mut val = idx.split_off(n - n_val);
    let mut train = idx;
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Everything needed to evaluate the training objective on a batch: the
/// model, the effective balance config (objective weights already applied),
/// the weight-decay coefficient, and the dataset views.
pub struct ObjectiveSpec<'a> {
    pub mcfg: &'a ModelConfig,
    pub balance: BalanceConfig,
    pub l2_weight: f64,
    pub inputs: &'a ModelInputs,
    pub y: &'a [f64],
    pub treatments: &'a [usize],
}

struct BuiltObjective {
    objective: NodeId,
    l1: NodeId,
    l2_value: f64,
    param_ids: Vec<NodeId>,
}

/// Value and per-tensor components of one batch evaluation.
pub struct BatchEval {
    pub objective: f64,
    pub l1: f64,
    pub l2: f64,
    pub grads: Vec<Matrix>,
}

impl ObjectiveSpec<'_> {
    fn build(&self, tape: &mut Tape, params: &ModelParams, batch: &[usize]) -> BuiltObjective {
        assert!(!batch.is_empty(), "objective needs a non-empty batch");
        let pass = build_forward(tape, self.mcfg, params, self.inputs);
        let k = self.mcfg.k;

        // Factual predictions in batch order: each head's rows for its
        // treated units, scattered back to their batch positions.
        let mut group_units: Vec<Vec<usize>> = vec![Vec::new(); k];
        let mut group_slots: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (slot, &unit) in batch.iter().enumerate() {
            let t = self.treatments[unit];
            group_units[t].push(unit);
            group_slots[t].push(slot);
        }
        let sources: Vec<(NodeId, Rc<Vec<usize>>)> = (0..k)
            .filter(|&t| !group_units[t].is_empty())
            .map(|t| {
                let rows = tape.gather_rows(pass.head_outputs[t], Rc::new(group_units[t].clone()));
                (rows, Rc::new(group_slots[t].clone()))
            })
            .collect();
        let pred = tape.scatter_rows(sources, batch.len());
        let y_batch: Vec<f64> = batch.iter().map(|&i| self.y[i]).collect();
        let target = tape.leaf(column(&y_batch));

        let l1 = balance::mse_loss(tape, pred, target);
        let weighted_l1 = tape.scale(l1, self.balance.alpha);
        let (core, l2_value) =
            if self.balance.beta == 0.0 || self.balance.kind == IpmKind::None {
                (weighted_l1, 0.0)
            } else {
                let phi_batch = tape.gather_rows(pass.phi, Rc::new(batch.to_vec()));
                let batch_treatments: Vec<usize> =
                    batch.iter().map(|&i| self.treatments[i]).collect();
                let l2 = balance::pairwise_representation_loss(
                    tape,
                    phi_batch,
                    &batch_treatments,
                    k,
                    &self.balance,
                );
                let weighted_l2 = tape.scale(l2, self.balance.beta);
                let sum = tape.add(weighted_l1, weighted_l2);
                (sum, tape.scalar_value(l2))
            };

        let objective = if self.l2_weight > 0.0 {
            let mut acc: Option<NodeId> = None;
            for (spec, &id) in tensor_specs(self.mcfg).iter().zip(&pass.param_ids) {
                if !spec.is_weight {
                    continue;
                }
                let sq = tape.mul_elem(id, id);
                let s = tape.sum(sq);
                acc = Some(match acc {
                    Some(prev) => tape.add(prev, s),
                    None => s,
                });
            }
            let penalty = tape.scale(acc.expect("models always have weights"), self.l2_weight);
            tape.add(core, penalty)
        } else {
            core
        };

        BuiltObjective {
            objective,
            l1,
            l2_value,
            param_ids: pass.param_ids,
        }
    }

    /// Objective value on one batch, without gradients.
    pub fn value(&self, params: &ModelParams, batch: &[usize]) -> f64 {
        let mut tape = Tape::new();
        let built = self.build(&mut tape, params, batch);
        tape.scalar_value(built.objective)
    }

    /// Objective value, loss components, and gradients for every tensor.
    /// Tensors outside the batch's compute path get zero gradients. A
    /// non-finite objective comes back as a value (with zero gradients) so
    /// the caller can report where training diverged.
    pub fn gradients(&self, params: &ModelParams, batch: &[usize]) -> Result<BatchEval> {
        let mut tape = Tape::new();
        let built = self.build(&mut tape, params, batch);
        let objective = tape.scalar_value(built.objective);
        let l1 = tape.scalar_value(built.l1);
        if !objective.is_finite() {
            return Ok(BatchEval {
                objective,
                l1,
                l2: built.l2_value,
                grads: params.tensors().iter().map(|m| Matrix::zeros(m.dim())).collect(),
            });
        }
        let mut grads_store = tape.backward(built.objective)?;
        let grads = built
            .param_ids
            .iter()
            .zip(params.tensors())
            .map(|(&id, m)| grads_store.take(id).unwrap_or_else(|| Matrix::zeros(m.dim())))
            .collect();
        Ok(BatchEval {
            objective,
            l1,
            l2: built.l2_value,
            grads,
        })
    }
}

/// Factual mean squared error of a model over the given units.
pub fn factual_mse(
    mcfg: &ModelConfig,
    params: &ModelParams,
    inputs: &ModelInputs,
    y: &[f64],
    treatments: &[usize],
    units: &[usize],
) -> f64 {
    assert!(!units.is_empty(), "factual MSE over no units");
    let mu = predict_mu(mcfg, params, inputs);
    units
        .iter()
        .map(|&i| (mu[[i, treatments[i]]] - y[i]).powi(2))
        .sum::<f64>()
        / units.len() as f64
}

enum OptState {
    Adam {
        m: Vec<Matrix>,
        v: Vec<Matrix>,
        step: u32,
    },
    SgdMomentum {
        velocity: Vec<Matrix>,
    },
}

impl OptState {
    fn new(kind: OptimizerKind, params: &ModelParams) -> Self {
        let zeros = || -> Vec<Matrix> {
            params.tensors().iter().map(|t| Matrix::zeros(t.dim())).collect()
        };
        match kind {
            OptimizerKind::Adam => OptState::Adam {
                m: zeros(),
                v: zeros(),
                step: 0,
            },
            OptimizerKind::SgdMomentum => OptState::SgdMomentum { velocity: zeros() },
        }
    }

    fn apply(&mut self, params: &mut ModelParams, grads: &[Matrix], lr: f64) {
        match self {
            OptState::Adam { m, v, step } => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                *step += 1;
                let c1 = 1.0 - B1.powi(*step as i32);
                let c2 = 1.0 - B2.powi(*step as i32);
                for ((theta, g), (mi, vi)) in params
                    .tensors_mut()
                    .iter_mut()
                    .zip(grads)
                    .zip(m.iter_mut().zip(v.iter_mut()))
                {
                    ndarray::Zip::from(theta)
                        .and(g)
                        .and(mi)
                        .and(vi)
                        .for_each(|t, &g, m, v| {
                            *m = B1 * *m + (1.0 - B1) * g;
                            *v = B2 * *v + (1.0 - B2) * g * g;
                            *t -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                        });
                }
            }
            OptState::SgdMomentum { velocity } => {
                const MU: f64 = 0.9;
                for ((theta, g), vel) in params
                    .tensors_mut()
                    .iter_mut()
                    .zip(grads)
                    .zip(velocity.iter_mut())
                {
                    ndarray::Zip::from(theta).and(g).and(vel).for_each(|t, &g, v| {
                        *v = MU * *v + g;
                        *t -= lr * *v;
                    });
                }
            }
        }
    }
}

/// Trains one model on one dataset and returns the parameters from the best
/// validation epoch (the final epoch when early stopping is disabled)
/// together with the per-epoch report.
pub fn train(
    ds: &NetworkedDataset,
    mcfg: &ModelConfig,
    bcfg: &BalanceConfig,
    tcfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    let started = Instant::now();
    mcfg.validate()?;
    tcfg.validate()?;
    ds.validate()?;
    if mcfg.k != ds.k() {
        return Err(Error::InvalidConfig(format!(
            "model expects K = {}, dataset has K = {}",
            mcfg.k,
            ds.k()
        )));
    }
    if mcfg.input_dim != ds.covariates.p() {
        return Err(Error::InvalidConfig(format!(
            "model expects {} covariates, dataset has {}",
            mcfg.input_dim,
            ds.covariates.p()
        )));
    }
    let effective = BalanceConfig {
        alpha: tcfg.alpha,
        beta: tcfg.beta,
        ..bcfg.clone()
    };
    effective.validate()?;

    let n = ds.n_units();
    let (train_units, val_units) = validation_split(n, tcfg.val_fraction, tcfg.seed);
    let early_stopping = tcfg.patience > 0;
    if early_stopping && val_units.is_empty() {
        return Err(Error::EmptyValidation);
    }
    if train_units.is_empty() {
        return Err(Error::InvalidConfig(
            "validation split leaves no training units".into(),
        ));
    }

    let inputs = ModelInputs::from_dataset(ds, mcfg);
    let spec = ObjectiveSpec {
        mcfg,
        balance: effective,
        l2_weight: tcfg.l2_weight,
        inputs: &inputs,
        y: &ds.factual_outcomes,
        treatments: &ds.treatments,
    };

    let mut params = init_params(mcfg);
    let mut opt = OptState::new(tcfg.optimizer, &params);
    let mut epochs = Vec::with_capacity(tcfg.max_epochs);
    let mut best_epoch = 0usize;
    let mut best_val = f64::INFINITY;
    let mut best_params = params.clone();
    let mut stale_epochs = 0usize;

    for epoch in 0..tcfg.max_epochs {
        let mut l1_sum = 0.0;
        let mut l2_sum = 0.0;
        let mut total_sum = 0.0;
        for batch in make_batches(train_units.len(), tcfg.batch_size, tcfg.seed, epoch) {
            let global: Vec<usize> = batch.iter().map(|&j| train_units[j]).collect();
            let eval = spec.gradients(&params, &global)?;
            if !eval.objective.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    loss: eval.objective,
                });
            }
            let w = global.len() as f64;
            l1_sum += eval.l1 * w;
            l2_sum += eval.l2 * w;
            total_sum += eval.objective * w;
            opt.apply(&mut params, &eval.grads, tcfg.learning_rate);
        }
        let denom = train_units.len() as f64;
        let l1_val = if val_units.is_empty() {
            f64::NAN
        } else {
            factual_mse(
                mcfg,
                &params,
                &inputs,
                &ds.factual_outcomes,
                &ds.treatments,
                &val_units,
            )
        };

        let mut stopped = false;
        if early_stopping {
            if l1_val < best_val {
                best_val = l1_val;
                best_epoch = epoch;
                best_params = params.clone();
                stale_epochs = 0;
            } else {
                stale_epochs += 1;
                stopped = stale_epochs >= tcfg.patience;
            }
        } else {
            best_epoch = epoch;
        }

        epochs.push(EpochStats {
            epoch,
            l1_train: l1_sum / denom,
            l2_train: l2_sum / denom,
            total_train: total_sum / denom,
            l1_val,
            stopped,
        });
        if stopped {
            break;
        }
    }
    if !early_stopping {
        best_params = params;
    }

    Ok((
        best_params,
        TrainReport {
            epochs,
            best_epoch,
            wall_time_seconds: started.elapsed().as_secs_f64(),
        },
    ))
}
