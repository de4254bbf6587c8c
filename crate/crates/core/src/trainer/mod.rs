//! The training protocol: Adam with bias correction, a step-decay learning
//! rate (multiply by the decay factor every `decay_every` epochs), coupled L2
//! added to the data gradient, a time-based validation slice for checkpoint
//! selection, and patience-based early stopping.
//!
//! Everything is seed-deterministic: the same corpus, config and seed give
//! bit-identical parameters and reports (up to wall-clock timings).

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use crate::dataset::{batchify, prefix_split, Session, SessionCorpus};
use crate::error::{Error, Result};
use crate::eval::evaluate_pairs;
use crate::model::{forward_batch, ModelConfig, ModelParams, ParamLeaves};
use crate::ndmath::Tape;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub epochs: usize,
    /// Stop once this many consecutive epochs pass without a validation
    /// improvement; 0 stops right after the first epoch.
    pub patience: usize,
    pub max_len: usize,
    /// Ranking cutoff for the per-epoch validation metrics.
    pub eval_cutoff: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            decay_factor: 0.1,
            decay_every: 3,
            batch_size: 128,
            l2: 1e-5,
            epochs: 30,
            patience: 3,
            max_len: 10,
            eval_cutoff: 20,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 {
            return Err(Error::Config("lr0 must be positive".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config("decay_factor must be in (0, 1]".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.decay_every < 1 {
            return Err(Error::Config("decay_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Learning rate at a 0-based epoch: `lr0 * decay^(epoch / every)`, computed
/// by repeated multiplication so the decimal decades come out exact in f64.
pub fn schedule(epoch: usize, config: &TrainConfig) -> f64 {
    let steps = epoch / config.decay_every.max(1);
    (0..steps).fold(config.lr0, |lr, _| lr * config.decay_factor)
}

// ── Adam ────────────────────────────────────────────────────────────────

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers per parameter tensor, keyed by name.
#[derive(Debug, Default)]
pub struct AdamState {
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// The elementwise Adam rule with bias correction at step `t` (1-based).
/// L2 enters as `grad + 2 * l2 * w` before the moment updates.
fn adam_update(
    data: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    l2: f64,
) {
    let bias1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bias2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..data.len() {
        let g = grad[i] + 2.0 * l2 * data[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// One Adam update over every parameter with a populated gradient. Every
/// matrix must be finite afterwards. The padding embedding row never moves:
/// its gradient, weight and moments are all zero.
pub fn adam_step(params: &mut ModelParams, state: &mut AdamState, lr: f64, l2: f64) -> Result<()> {
    state.step += 1;
    let t = state.step;

    let mut bad_grad: Option<String> = None;
    let mut bad_update: Option<String> = None;
    let moments = &mut state.moments;
    params.for_each_param_mut(|name, tensor| {
        if bad_grad.is_some() || bad_update.is_some() {
            return;
        }
        let Some(grad) = tensor.grad() else { return };
        if grad.iter().any(|g| !g.is_finite()) {
            bad_grad = Some(name.to_string());
            return;
        }
        let grad = grad.to_vec();
        let n = tensor.numel();
        let (m, v) = moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        adam_update(tensor.data_mut(), &grad, m, v, t, lr, l2);
        if !tensor.is_finite() {
            bad_update = Some(name.to_string());
        }
    });
    if let Some(tensor) = bad_grad {
        return Err(Error::NonFiniteGradient { tensor });
    }
    if let Some(tensor) = bad_update {
        return Err(Error::NonFiniteUpdate { tensor });
    }
    Ok(())
}

// ── Training loop ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_recall: f64,
    pub val_mrr: f64,
    pub lr: f64,
    /// Wall-clock seconds; the only nondeterministic field.
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_mrr: f64,
    /// Set when training stopped on a non-finite loss; the returned
    /// parameters are the last good checkpoint.
    pub aborted: Option<String>,
}

impl TrainReport {
    /// The report with wall-clock timings zeroed; byte-identical across runs
    /// with the same seed.
    pub fn deterministic_view(&self) -> TrainReport {
        let mut view = self.clone();
        for e in &mut view.epochs {
            e.wall_secs = 0.0;
        }
        view
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,val_recall,val_mrr,lr,wall_secs,best\n");
        for e in &self.epochs {
            let best = if Some(e.epoch) == self.best_epoch {
                1
            } else {
                0
            };
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{:.3},{}\n",
                e.epoch, e.mean_loss, e.val_recall, e.val_mrr, e.lr, e.wall_secs, best
            ));
        }
        out
    }
}

pub struct TrainOutcome {
    /// Parameters of the best validation epoch (or the last good state when
    /// no epoch finished).
    pub params: ModelParams,
    pub report: TrainReport,
}

/// The last tenth of the (time-ordered) training sessions is held out for
/// checkpoint selection and patience.
fn split_validation(sessions: &[Session]) -> (&[Session], &[Session]) {
    let n = sessions.len();
    let val = (n / 10).clamp(1, n.saturating_sub(1)).min(n);
    sessions.split_at(n - val)
}

pub fn train(
    corpus: &SessionCorpus,
    model_config: ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.train.len() < 2 {
        return Err(Error::contract(
            "training needs at least two sessions (one is held out for validation)",
        ));
    }

    let (fit_sessions, val_sessions) = split_validation(&corpus.train);
    let fit_pairs = prefix_split(fit_sessions);
    let val_pairs = prefix_split(val_sessions);
    if fit_pairs.is_empty() {
        return Err(Error::contract("no training pairs after prefix splitting"));
    }

    let mut params = ModelParams::init(
        model_config,
        corpus.n_items(),
        corpus.vocab_hash(),
        config.seed,
    );
    let mut state = AdamState::new();
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: None,
        best_val_mrr: f64::NEG_INFINITY,
        aborted: None,
    };
    let mut best_params = params.clone();
    let mut epochs_since_best = 0usize;

    'epochs: for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = schedule(epoch, config);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;

        let shuffle_seed = config.seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        for batch in batchify(&fit_pairs, config.batch_size, config.max_len, shuffle_seed) {
            let step = (|| -> Result<f64> {
                let mut tape = Tape::new();
                let leaves = ParamLeaves::register(&mut tape, &params, true);
                let (_, loss) = forward_batch(&mut tape, &leaves, &params.config, &batch)?;
                let loss_value = tape.value(loss).data()[0];
                tape.backward(loss)?;
                params.zero_grads();
                leaves.grads_into(&tape, &mut params);
                adam_step(&mut params, &mut state, lr, config.l2)?;
                Ok(loss_value)
            })();
            match step {
                Ok(loss_value) => {
                    loss_sum += loss_value;
                    batches += 1;
                }
                // numeric blowups end the run but keep the last good model
                Err(
                    e @ (Error::NonFinite { .. }
                    | Error::NonFiniteGradient { .. }
                    | Error::NonFiniteUpdate { .. }),
                ) => {
                    report.aborted = Some(format!("epoch {epoch}, batch {batches}: {e}"));
                    break 'epochs;
                }
                Err(other) => return Err(other),
            }
        }

        let val = evaluate_pairs(&params, &val_pairs, config.eval_cutoff, config.max_len)?;
        report.epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / batches.max(1) as f64,
            val_recall: val.recall,
            val_mrr: val.mrr,
            lr,
            wall_secs: started.elapsed().as_secs_f64(),
        });

        if val.mrr > report.best_val_mrr {
            report.best_val_mrr = val.mrr;
            report.best_epoch = Some(epoch);
            best_params = params.clone();
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
        }
        if epochs_since_best >= config.patience {
            break;
        }
    }

    if report.best_epoch.is_none() && report.aborted.is_none() {
        best_params = params;
    }
    Ok(TrainOutcome {
        params: best_params,
        report,
    })
}
