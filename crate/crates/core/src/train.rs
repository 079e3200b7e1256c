//! Bookkeeping shared by the training loops.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::optim::Adam;
use crate::params::Parameterized;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    #[default]
    Completed,
    EarlyStopped {
        step: usize,
    },
    /// A non-finite loss or a failed factorization; the best parameters
    /// seen before the failure are returned.
    Diverged {
        step: usize,
    },
}

/// Loss trajectories of one training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// `(step, mean training loss since the previous entry)`.
    pub train: Vec<(usize, f64)>,
    /// `(step, validation loss)`; step 0 is the initialization.
    pub valid: Vec<(usize, f64)>,
    pub best_valid: Option<f64>,
    pub best_step: usize,
    pub steps: usize,
    pub stop: StopReason,
}

impl TrainReport {
    pub fn diverged(&self) -> bool {
        matches!(self.stop, StopReason::Diverged { .. })
    }
}

/// Tracks the best validation loss and stops after `patience` checks
/// without improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping<P> {
    patience: usize,
    best: Option<(f64, usize, P)>,
    bad: usize,
}

impl<P: Clone> EarlyStopping<P> {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, bad: 0 }
    }

    /// Records a validation loss; returns `true` when training should stop.
    pub fn observe(&mut self, loss: f64, step: usize, params: &P) -> bool {
        let improved = match &self.best {
            None => loss.is_finite(),
            Some((b, _, _)) => loss < *b,
        };
        if improved {
            self.best = Some((loss, step, params.clone()));
            self.bad = 0;
            false
        } else {
            self.bad += 1;
            self.patience > 0 && self.bad >= self.patience
        }
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.best.as_ref().map(|b| b.0)
    }

    pub fn into_best(self) -> Option<(f64, usize, P)> {
        self.best
    }
}

/// Settings of the minibatch Adam loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Optimizer steps between validation checks; 0 means once per epoch.
    pub val_interval: usize,
    pub patience: usize,
}

/// A training objective over indexed rows of a fixed training set.
pub trait Objective<P> {
    /// Mean loss over the rows `idx` and its gradient per parameter tensor.
    fn loss_and_grad(&mut self, params: &P, idx: &[usize]) -> Result<(f64, Vec<Tensor>)>;
    /// Model-selection loss on held-out data.
    fn validation(&mut self, params: &P) -> Result<f64>;
}

enum Outcome<T> {
    Value(T),
    Diverged,
}

fn numerical<T>(r: Result<T>, finite: impl Fn(&T) -> bool) -> Result<Outcome<T>> {
    match r {
        Ok(v) if finite(&v) => Ok(Outcome::Value(v)),
        Ok(_) => Ok(Outcome::Diverged),
        Err(e) if e.is_numerical() => Ok(Outcome::Diverged),
        Err(e) => Err(e),
    }
}

/// Shuffled minibatch Adam with projection after each step, periodic
/// validation and early stopping. Returns the parameters with the best
/// validation loss; on divergence, the best parameters seen so far.
pub fn minibatch_adam<P, O>(mut params: P, cfg: &LoopConfig, n_train: usize, obj: &mut O, project: impl Fn(&mut P)) -> Result<(P, TrainReport)>
where
    P: Parameterized + Clone,
    O: Objective<P>,
{
    if cfg.batch_size == 0 {
        return Err(CoreError::invalid("batch_size must be at least 1"));
    }
    if !(cfg.learning_rate > 0.0) || !cfg.learning_rate.is_finite() {
        return Err(CoreError::invalid("learning_rate must be positive"));
    }
    if n_train == 0 {
        return Err(CoreError::invalid("empty training split"));
    }
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok((params, report));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a1e);
    let mut adam = Adam::new(cfg.learning_rate);
    let batch = cfg.batch_size.min(n_train);
    let per_epoch = n_train.div_ceil(batch);
    let interval = if cfg.val_interval == 0 { per_epoch } else { cfg.val_interval };
    let mut stop = EarlyStopping::new(cfg.patience);
    let v0 = match numerical(obj.validation(&params), |v| v.is_finite())? {
        Outcome::Value(v) => v,
        Outcome::Diverged => {
            report.stop = StopReason::Diverged { step: 0 };
            return Ok((params, report));
        }
    };
    stop.observe(v0, 0, &params);
    report.valid.push((0, v0));
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut step = 0usize;
    let mut window = (0.0, 0usize);
    'outer: for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(batch) {
            let res = obj.loss_and_grad(&params, idx);
            let (loss, grads) = match numerical(res, |v| v.0.is_finite() && v.1.iter().all(Tensor::is_finite))? {
                Outcome::Value(v) => v,
                Outcome::Diverged => {
                    report.stop = StopReason::Diverged { step };
                    break 'outer;
                }
            };
            adam.step_store(params.store_mut(), &grads);
            project(&mut params);
            step += 1;
            window.0 += loss;
            window.1 += 1;
            if step % interval == 0 {
                report.train.push((step, window.0 / window.1 as f64));
                window = (0.0, 0);
                let v = match numerical(obj.validation(&params), |v| v.is_finite())? {
                    Outcome::Value(v) => v,
                    Outcome::Diverged => {
                        report.stop = StopReason::Diverged { step };
                        break 'outer;
                    }
                };
                report.valid.push((step, v));
                if stop.observe(v, step, &params) {
                    report.stop = StopReason::EarlyStopped { step };
                    break 'outer;
                }
            }
        }
    }
    if window.1 > 0 {
        report.train.push((step, window.0 / window.1 as f64));
    }
    report.steps = step;
    let (best_loss, best_step, best) = stop.into_best().expect("observed at least once");
    report.best_valid = Some(best_loss);
    report.best_step = best_step;
    Ok((best, report))
}
