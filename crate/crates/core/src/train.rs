//! Three-stage training: warm-up, identity-weight learning, and retraining
//! from scratch with frozen weights.
//!
//! Stage 1 trains both encoders with uniform per-sample weights. Stage 2
//! continues the same optimizer run while tracking per-identity hardness
//! from the unweighted implicit loss; once every train identity has been
//! observed the bottom fraction is given weight one, and every
//! `update_interval` iterations the easiest still-zero identities are
//! promoted while existing weights fade. Stage 2 stops as soon as the kept
//! fraction reaches `keep_ratio`; whoever is still at zero is excluded.
//! Stage 3 reinitializes everything from a fresh stream and retrains for
//! `max_iters` iterations on the non-excluded identities with the frozen
//! weights, keeping the checkpoint with the best unrestricted 1:2
//! voice-to-face validation accuracy.
//!
//! The classifier covers train identities only: dataset identity ids map to
//! dense class indices in ascending id order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{
    backward, forward, lr_at, sgd_step, EncoderDims, EncoderError, EncoderParams, EncoderSide,
    ModelGrads, OptimizerState,
};
use crate::eval::{embed_split, quick_match_accuracy, EvalConfig};
use crate::loss::{total_loss, LossError, LossTerms};
use crate::mat::Mat;
use crate::par::ExecPolicy;
use crate::reweight::{IdentityWeightState, ReweightError};
use crate::rng::Rng;
use crate::types::{validate_dataset, DatasetIndex, Split, SyntheticDataset};

/// Stage-2 iteration budget: a run exceeding `STAGE2_CAP_UPDATES` update
/// windows fails loudly instead of looping forever.
pub const STAGE2_CAP_UPDATES: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub margin: f64,
    /// moving-average coefficient for per-identity hardness
    pub hardness_smoothing: f64,
    /// per-update fade factor applied to already-promoted identity weights
    pub identity_weight_decay: f64,
    /// identities promoted per triggered update
    pub promote_per_update: usize,
    pub warmup_iters: usize,
    pub update_interval: usize,
    pub max_iters: usize,
    /// stop stage 2 once this fraction of identities holds nonzero weight
    pub keep_ratio: f64,
    pub learning_rate: f64,
    pub lr_decay_iters: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// fraction of identities given weight one at initialization
    pub init_weight_fraction: f64,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub disable_explicit: bool,
    pub disable_implicit: bool,
    pub disable_reweighting: bool,
    pub normalize_anchor: bool,
    /// normalize batch weights over the full identity set instead of the batch
    pub weights_full_set_norm: bool,
    pub validation_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            margin: 3.4,
            hardness_smoothing: 0.9,
            identity_weight_decay: 0.99,
            promote_per_update: 22,
            warmup_iters: 500,
            update_interval: 100,
            max_iters: 10_000,
            keep_ratio: 0.9,
            learning_rate: 1e-2,
            lr_decay_iters: vec![2000, 3000],
            momentum: 0.9,
            weight_decay: 5e-4,
            init_weight_fraction: 0.3,
            hidden_dim: 256,
            embed_dim: 128,
            disable_explicit: false,
            disable_implicit: false,
            disable_reweighting: false,
            normalize_anchor: false,
            weights_full_set_norm: false,
            validation_interval: 500,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn loss_terms(&self) -> LossTerms {
        LossTerms {
            use_implicit: !self.disable_implicit,
            use_explicit: !self.disable_explicit,
            normalize_anchor: self.normalize_anchor,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.disable_implicit && self.disable_explicit {
            return bad("both loss terms disabled: objective is empty".into());
        }
        if self.disable_implicit && !self.disable_reweighting {
            return bad(
                "re-weighting needs the implicit loss as its hardness signal; \
                 disable re-weighting too"
                    .into(),
            );
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.margin <= 0.0 {
            return bad(format!("margin must be > 0, got {}", self.margin));
        }
        for (name, v) in [
            ("hardness_smoothing", self.hardness_smoothing),
            ("identity_weight_decay", self.identity_weight_decay),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0,1), got {v}"));
            }
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return bad(format!("keep_ratio must lie in (0,1], got {}", self.keep_ratio));
        }
        if !(self.init_weight_fraction > 0.0 && self.init_weight_fraction < 1.0) {
            return bad(format!(
                "init_weight_fraction must lie in (0,1), got {}",
                self.init_weight_fraction
            ));
        }
        if !self.disable_reweighting && self.promote_per_update == 0 {
            return bad("promote_per_update must be >= 1".into());
        }
        if self.update_interval == 0 {
            return bad("update_interval must be >= 1".into());
        }
        if self.warmup_iters >= self.max_iters {
            return bad(format!(
                "warmup_iters ({}) must be smaller than max_iters ({})",
                self.warmup_iters, self.max_iters
            ));
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 {
            return bad("hidden_dim and embed_dim must be >= 1".into());
        }
        if self.validation_interval == 0 {
            return bad("validation_interval must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("non-finite loss at stage {stage} iteration {iteration} (implicit {implicit}, explicit {explicit})")]
    NonFiniteLoss {
        stage: u8,
        iteration: usize,
        implicit: f64,
        explicit: f64,
    },
    #[error("stage 2 exceeded its safety cap of {0} iterations without terminating")]
    Stage2Cap(usize),
    #[error("degenerate batch resampled {0} times: every draw carried only zero-weight identities")]
    DegenerateBatches(usize),
    #[error("batch size {requested} exceeds eligible identity count {eligible}")]
    BatchTooLarge { requested: usize, eligible: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Reweight(#[from] ReweightError),
}

/// One metrics-stream record (line-delimited JSON downstream).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub stage: u8,
    pub t: usize,
    pub loss_total: f64,
    pub loss_implicit: f64,
    pub loss_explicit: f64,
    pub lr: f64,
    pub nonzero_weight_count: usize,
}

/// One weight-history record per triggered update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightUpdateRecord {
    pub iteration: usize,
    /// dataset identity ids promoted by this update
    pub promoted_identities: Vec<usize>,
    /// FNV-1a 64 over the little-endian bytes of the full weight vector
    pub weights_checksum: String,
    pub nonzero_count: usize,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    /// best-on-validation checkpoint (what evaluation should use)
    pub params: EncoderParams,
    /// parameters after the final stage-3 iteration
    pub final_params: EncoderParams,
    pub weight_state: IdentityWeightState,
    /// train identity ids in class-index order
    pub identity_of_class: Vec<usize>,
    /// dataset identity ids excluded at stage-2 termination
    pub excluded_identities: Vec<usize>,
    pub trace: Vec<IterRecord>,
    pub weight_history: Vec<WeightUpdateRecord>,
    pub best_iteration: usize,
    pub best_validation_accuracy: f64,
    /// global iteration where stage 1 ended
    pub stage1_end: usize,
    /// global iteration where stage 2 ended (== stage1_end when skipped)
    pub stage2_end: usize,
}

pub fn fnv1a64(bytes: impl Iterator<Item = u8>) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x1000_0000_01b3);
    }
    hash
}

fn weights_checksum(weights: &[f64]) -> String {
    format!(
        "{:016x}",
        fnv1a64(weights.iter().flat_map(|w| w.to_le_bytes()))
    )
}

/// A sampled mini-batch: one face and one voice sample for each of N
/// distinct identities.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchIndices {
    /// class indices, one per slot
    pub classes: Vec<usize>,
    /// indices into dataset.face_samples
    pub face_samples: Vec<usize>,
    /// indices into dataset.voice_samples
    pub voice_samples: Vec<usize>,
}

/// Draws `n` distinct identities uniformly without replacement from the
/// eligible set, then one face and one voice sample uniformly from each
/// identity's pools.
///
/// Implementation detail with a purpose: the draw shuffles the full class
/// list and keeps the first `n` eligible entries, consuming the same number
/// of rng draws for the shuffle regardless of eligibility. Runs that differ
/// only in their eligible sets (ablations sharing a seed) therefore see
/// maximally coupled batch sequences.
pub fn sample_batch(
    index: &DatasetIndex,
    identity_of_class: &[usize],
    eligible: &[bool],
    eligible_count: usize,
    n: usize,
    rng: &mut Rng,
) -> Result<BatchIndices, TrainError> {
    if n > eligible_count {
        return Err(TrainError::BatchTooLarge {
            requested: n,
            eligible: eligible_count,
        });
    }
    let mut order: Vec<usize> = (0..identity_of_class.len()).collect();
    rng.shuffle(&mut order);
    let mut classes = Vec::with_capacity(n);
    let mut face_samples = Vec::with_capacity(n);
    let mut voice_samples = Vec::with_capacity(n);
    for &class in order.iter().filter(|&&c| eligible[c]).take(n) {
        let id = identity_of_class[class];
        let faces = &index.face_by_identity[id];
        let voices = &index.voice_by_identity[id];
        classes.push(class);
        face_samples.push(faces[rng.next_below(faces.len() as u64) as usize]);
        voice_samples.push(voices[rng.next_below(voices.len() as u64) as usize]);
    }
    Ok(BatchIndices {
        classes,
        face_samples,
        voice_samples,
    })
}

pub struct Trainer<'a> {
    pub config: &'a TrainConfig,
    ds: &'a SyntheticDataset,
    index: DatasetIndex,
    /// train identity ids, ascending; position = class index
    identity_of_class: Vec<usize>,
    all_eligible: Vec<bool>,
    dims: EncoderDims,
}

struct StepOutcome {
    implicit: f64,
    explicit: f64,
    total: f64,
    implicit_per_sample: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a TrainConfig, ds: &'a SyntheticDataset) -> Result<Self, TrainError> {
        config.validate()?;
        let report = validate_dataset(ds);
        if !report.is_empty() {
            return Err(TrainError::InvalidDataset(report.to_string()));
        }
        let index = DatasetIndex::build(ds);
        let identity_of_class = index.train_identities.clone();
        if config.batch_size > identity_of_class.len() {
            return Err(TrainError::BatchTooLarge {
                requested: config.batch_size,
                eligible: identity_of_class.len(),
            });
        }
        let dims = EncoderDims {
            obs_dim: ds.header.obs_dim,
            hidden_dim: config.hidden_dim,
            embed_dim: config.embed_dim,
            classes: identity_of_class.len(),
        };
        let all_eligible = vec![true; identity_of_class.len()];
        Ok(Trainer {
            config,
            ds,
            index,
            identity_of_class,
            all_eligible,
            dims,
        })
    }

    pub fn classes(&self) -> usize {
        self.identity_of_class.len()
    }

    pub fn identity_of_class(&self) -> &[usize] {
        &self.identity_of_class
    }

    pub fn dims(&self) -> EncoderDims {
        self.dims
    }

    pub fn dataset_index(&self) -> &DatasetIndex {
        &self.index
    }

    fn gather(&self, samples: &[crate::types::Sample], rows: &[usize]) -> Mat {
        let mut m = Mat::zeros(rows.len(), self.ds.header.obs_dim);
        for (r, &i) in rows.iter().enumerate() {
            m.row_mut(r).copy_from_slice(&samples[i].features);
        }
        m
    }

    /// Forward both encoders, apply the weighted total loss, and take one
    /// optimizer step at the given learning rate.
    fn step(
        &self,
        params: &mut EncoderParams,
        opt: &mut OptimizerState,
        batch: &BatchIndices,
        weights: &[f64],
        lr: f64,
        stage: u8,
        t: usize,
    ) -> Result<StepOutcome, TrainError> {
        let face = self.gather(&self.ds.face_samples, &batch.face_samples);
        let voice = self.gather(&self.ds.voice_samples, &batch.voice_samples);
        let (x, face_cache) = forward(params, &face, EncoderSide::Face)?;
        let (v, voice_cache) = forward(params, &voice, EncoderSide::Voice)?;
        let out = total_loss(
            &x,
            &v,
            &batch.classes,
            &params.classifier,
            self.config.margin,
            weights,
            self.config.loss_terms(),
        )?;
        if !out.total.value.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                stage,
                iteration: t,
                implicit: out.implicit_value,
                explicit: out.explicit_value,
            });
        }
        let face_grads = backward(params, &face_cache, &out.total.grad_x)?;
        let voice_grads = backward(params, &voice_cache, &out.total.grad_v)?;
        let mut grads = ModelGrads {
            face: face_grads,
            voice: voice_grads,
            classifier: Mat::zeros(params.classifier.rows(), params.classifier.cols()),
        };
        if let Some(gw) = out.total.grad_classifier {
            grads.classifier = gw;
        }
        opt.learning_rate = lr;
        sgd_step(params, &grads, opt);
        Ok(StepOutcome {
            implicit: out.implicit_value,
            explicit: out.explicit_value,
            total: out.total.value,
            implicit_per_sample: out.implicit_per_sample,
        })
    }

    /// Warm-up: `warmup_iters` iterations of the total loss with uniform
    /// per-sample weights. Returns the global iteration counter.
    pub fn run_stage1(
        &self,
        params: &mut EncoderParams,
        opt: &mut OptimizerState,
        batch_rng: &mut Rng,
        trace: &mut Vec<IterRecord>,
    ) -> Result<usize, TrainError> {
        let n = self.config.batch_size;
        let uniform = vec![1.0 / n as f64; n];
        for t in 1..=self.config.warmup_iters {
            let batch = sample_batch(
                &self.index,
                &self.identity_of_class,
                &self.all_eligible,
                self.classes(),
                n,
                batch_rng,
            )?;
            let lr = lr_at(self.config.learning_rate, &self.config.lr_decay_iters, t);
            let out = self.step(params, opt, &batch, &uniform, lr, 1, t)?;
            trace.push(IterRecord {
                stage: 1,
                t,
                loss_total: out.total,
                loss_implicit: out.implicit,
                loss_explicit: out.explicit,
                lr,
                nonzero_weight_count: self.classes(),
            });
        }
        Ok(self.config.warmup_iters)
    }

    /// Weight learning. Continues the optimizer run from stage 1 at global
    /// iteration `t_start + 1`. Returns the weight state, the update history
    /// and the final global iteration.
    pub fn run_stage2(
        &self,
        params: &mut EncoderParams,
        opt: &mut OptimizerState,
        batch_rng: &mut Rng,
        t_start: usize,
        trace: &mut Vec<IterRecord>,
    ) -> Result<(IdentityWeightState, Vec<WeightUpdateRecord>, usize), TrainError> {
        let cfg = self.config;
        let n = cfg.batch_size;
        let m = self.classes();
        let mut state = IdentityWeightState::new(m);
        let mut history = Vec::new();
        let uniform = vec![1.0 / n as f64; n];
        let cap = STAGE2_CAP_UPDATES * cfg.update_interval;
        let mut t = t_start;
        let mut stage_iters = 0usize;
        loop {
            if state.weights_initialized() && state.stop_condition(cfg.keep_ratio) {
                break;
            }
            stage_iters += 1;
            if stage_iters > cap {
                return Err(TrainError::Stage2Cap(cap));
            }
            t += 1;
            let batch = sample_batch(
                &self.index,
                &self.identity_of_class,
                &self.all_eligible,
                self.classes(),
                n,
                batch_rng,
            )?;
            let lr = lr_at(cfg.learning_rate, &cfg.lr_decay_iters, t);

            if !state.weights_initialized() {
                // collect hardness under uniform weights until every train
                // identity has been observed once, then set initial weights
                let out = self.step(params, opt, &batch, &uniform, lr, 2, t)?;
                state.update_hardness(&batch.classes, &out.implicit_per_sample, cfg.hardness_smoothing)?;
                if state.all_observed() {
                    state.init_weights(cfg.init_weight_fraction)?;
                }
                trace.push(IterRecord {
                    stage: 2,
                    t,
                    loss_total: out.total,
                    loss_implicit: out.implicit,
                    loss_explicit: out.explicit,
                    lr,
                    nonzero_weight_count: if state.weights_initialized() {
                        state.nonzero_count()
                    } else {
                        m
                    },
                });
                continue;
            }

            let out = if t % cfg.update_interval == 0 {
                // hardness and weights advance before this iteration's
                // weighted parameter update
                let face = self.gather(&self.ds.face_samples, &batch.face_samples);
                let voice = self.gather(&self.ds.voice_samples, &batch.voice_samples);
                let (x, _) = forward(params, &face, EncoderSide::Face)?;
                let (v, _) = forward(params, &voice, EncoderSide::Voice)?;
                let per_sample = crate::loss::implicit_per_sample_values(
                    &x,
                    &v,
                    &batch.classes,
                    &params.classifier,
                )?;
                state.update_hardness(&batch.classes, &per_sample, cfg.hardness_smoothing)?;
                let promoted = state.update_weights(cfg.promote_per_update, cfg.identity_weight_decay);
                history.push(WeightUpdateRecord {
                    iteration: t,
                    promoted_identities: promoted
                        .iter()
                        .map(|&c| self.identity_of_class[c])
                        .collect(),
                    weights_checksum: weights_checksum(state.weights()),
                    nonzero_count: state.nonzero_count(),
                });
                let s_hat = state.batch_weights(&batch.classes, cfg.weights_full_set_norm)?;
                self.step(params, opt, &batch, &s_hat, lr, 2, t)?
            } else {
                // weights unchanged this iteration: one pass computes both
                // the weighted update and the per-sample hardness signal
                let s_hat = state.batch_weights(&batch.classes, cfg.weights_full_set_norm)?;
                let out = self.step(params, opt, &batch, &s_hat, lr, 2, t)?;
                state.update_hardness(&batch.classes, &out.implicit_per_sample, cfg.hardness_smoothing)?;
                out
            };
            trace.push(IterRecord {
                stage: 2,
                t,
                loss_total: out.total,
                loss_implicit: out.implicit,
                loss_explicit: out.explicit,
                lr,
                nonzero_weight_count: state.nonzero_count(),
            });
        }
        Ok((state, history, t))
    }

    /// Retraining with frozen weights from freshly initialized parameters.
    /// Samples only non-excluded identities; the learning-rate schedule
    /// restarts; the best model on validation (unrestricted 1:2 V-F
    /// accuracy, evaluated every `validation_interval` iterations and at the
    /// end) is retained.
    pub fn run_stage3(
        &self,
        state: &IdentityWeightState,
        root: &Rng,
        trace: &mut Vec<IterRecord>,
    ) -> Result<(EncoderParams, EncoderParams, usize, f64), TrainError> {
        let cfg = self.config;
        let n = cfg.batch_size;
        let mut params = EncoderParams::init(self.dims, &mut root.stream("init-retrain"));
        let mut opt = OptimizerState::new(&params, cfg.learning_rate, cfg.momentum, cfg.weight_decay);
        let mut batch_rng = root.stream("batch-retrain");
        let val_rng = root.stream("validation");

        let eligible: Vec<bool> = state.weights().iter().map(|&w| w > 0.0).collect();
        let nonzero = state.nonzero_count();
        if n > nonzero {
            return Err(TrainError::BatchTooLarge {
                requested: n,
                eligible: nonzero,
            });
        }

        let mut best_params = params.clone();
        let mut best_acc = f64::NEG_INFINITY;
        let mut best_iter = 0usize;
        let eval_config = EvalConfig::default();

        for t in 1..=cfg.max_iters {
            let batch = sample_batch(
                &self.index,
                &self.identity_of_class,
                &eligible,
                nonzero,
                n,
                &mut batch_rng,
            )?;
            let s_hat = state.batch_weights(&batch.classes, cfg.weights_full_set_norm)?;
            let lr = lr_at(cfg.learning_rate, &cfg.lr_decay_iters, t);
            let out = self.step(&mut params, &mut opt, &batch, &s_hat, lr, 3, t)?;
            trace.push(IterRecord {
                stage: 3,
                t,
                loss_total: out.total,
                loss_implicit: out.implicit,
                loss_explicit: out.explicit,
                lr,
                nonzero_weight_count: nonzero,
            });
            if t % cfg.validation_interval == 0 || t == cfg.max_iters {
                let acc = self.validation_accuracy(&params, &val_rng.substream(t as u64), &eval_config);
                if acc > best_acc {
                    best_acc = acc;
                    best_params = params.clone();
                    best_iter = t;
                }
            }
        }
        if best_acc == f64::NEG_INFINITY {
            // no usable validation eval (degenerate or absent validation
            // split): fall back to the final parameters
            best_params = params.clone();
            best_iter = cfg.max_iters;
        }
        Ok((best_params, params, best_iter, best_acc))
    }

    fn validation_accuracy(&self, params: &EncoderParams, rng: &Rng, eval_config: &EvalConfig) -> f64 {
        match embed_split(params, self.ds, Split::Validation, ExecPolicy::Auto)
            .and_then(|table| quick_match_accuracy(&table, eval_config, rng, ExecPolicy::Auto))
        {
            Ok(acc) => acc,
            Err(_) => f64::NEG_INFINITY,
        }
    }

    /// The full pipeline.
    pub fn train(&self) -> Result<TrainedModel, TrainError> {
        let cfg = self.config;
        let root = Rng::new(cfg.seed);
        let mut params = EncoderParams::init(self.dims, &mut root.stream("init"));
        let mut opt = OptimizerState::new(&params, cfg.learning_rate, cfg.momentum, cfg.weight_decay);
        let mut batch_rng = root.stream("batch");
        let mut trace = Vec::new();

        let stage1_end = self.run_stage1(&mut params, &mut opt, &mut batch_rng, &mut trace)?;

        let (state, history, stage2_end) = if cfg.disable_reweighting {
            (IdentityWeightState::uniform(self.classes()), Vec::new(), stage1_end)
        } else {
            self.run_stage2(&mut params, &mut opt, &mut batch_rng, stage1_end, &mut trace)?
        };

        let (best_params, final_params, best_iter, best_acc) =
            self.run_stage3(&state, &root, &mut trace)?;

        let excluded_identities: Vec<usize> = state
            .excluded()
            .into_iter()
            .map(|c| self.identity_of_class[c])
            .collect();
        Ok(TrainedModel {
            params: best_params,
            final_params,
            weight_state: state,
            identity_of_class: self.identity_of_class.clone(),
            excluded_identities,
            trace,
            weight_history: history,
            best_iteration: best_iter,
            best_validation_accuracy: best_acc,
            stage1_end,
            stage2_end,
        })
    }
}

/// Convenience wrapper: validate, build the trainer, run all three stages.
pub fn train(config: &TrainConfig, ds: &SyntheticDataset) -> Result<TrainedModel, TrainError> {
    Trainer::new(config, ds)?.train()
}

/// Serializes records as line-delimited JSON.
pub fn write_jsonl<T: Serialize>(path: &std::path::Path, records: &[T]) -> std::io::Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Sidecar consumed by retraining and downstream analysis: the frozen weight
/// vector and the excluded identity list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightSidecar {
    pub identity_of_class: Vec<usize>,
    pub weights: Vec<f64>,
    /// final per-identity hardness (diagnostic; all zeros when stage 2 is skipped)
    pub hardness: Vec<f64>,
    pub excluded_identities: Vec<usize>,
}

impl WeightSidecar {
    pub fn from_model(model: &TrainedModel) -> WeightSidecar {
        WeightSidecar {
            identity_of_class: model.identity_of_class.clone(),
            weights: model.weight_state.weights().to_vec(),
            hardness: model.weight_state.hardness().to_vec(),
            excluded_identities: model.excluded_identities.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn tiny_synth(identities: usize, seed: u64) -> SyntheticDataset {
        generate(&SynthConfig {
            identities,
            latent_dim: 4,
            obs_dim: 8,
            samples_per_identity: 3,
            noise_easy: 0.1,
            noise_hard: 0.4,
            frac_hard: 0.2,
            frac_personalized: 0.1,
            seed,
        })
        .unwrap()
    }

    fn tiny_config(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            warmup_iters: 5,
            update_interval: 3,
            max_iters: 20,
            promote_per_update: 2,
            hidden_dim: 16,
            embed_dim: 6,
            validation_interval: 10,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation_rejects_empty_objective() {
        let cfg = TrainConfig {
            disable_implicit: true,
            disable_explicit: true,
            ..tiny_config(1)
        };
        assert!(matches!(cfg.validate(), Err(TrainError::InvalidConfig(_))));
        let cfg = TrainConfig {
            disable_implicit: true,
            disable_reweighting: false,
            ..tiny_config(1)
        };
        assert!(matches!(cfg.validate(), Err(TrainError::InvalidConfig(_))));
        let cfg = TrainConfig {
            disable_implicit: true,
            disable_reweighting: true,
            ..tiny_config(1)
        };
        cfg.validate().unwrap();
    }

    #[test]
    fn sample_batch_covers_all_when_exhaustive() {
        let ds = tiny_synth(40, 3);
        let cfg = tiny_config(3);
        let trainer = Trainer::new(&cfg, &ds).unwrap();
        let m = trainer.classes();
        let eligible = vec![true; m];
        let mut rng = Rng::new(5);
        let batch = sample_batch(
            trainer.dataset_index(),
            trainer.identity_of_class(),
            &eligible,
            m,
            m,
            &mut rng,
        )
        .unwrap();
        let mut classes = batch.classes.clone();
        classes.sort_unstable();
        assert_eq!(classes, (0..m).collect::<Vec<_>>());
    }

    #[test]
    fn sample_batch_singleton_pool_always_chosen() {
        let mut ds = tiny_synth(40, 4);
        // keep exactly one face sample for identity 0
        let keep: Vec<_> = ds
            .face_samples
            .iter()
            .enumerate()
            .filter(|(i, s)| s.identity_id != 0 || *i == 0)
            .map(|(_, s)| s.clone())
            .collect();
        ds.face_samples = keep;
        let index = DatasetIndex::build(&ds);
        assert_eq!(index.face_by_identity[0].len(), 1);
        let only = index.face_by_identity[0][0];
        let ids: Vec<usize> = (0..ds.header.identities).collect();
        let mut eligible = vec![false; ids.len()];
        eligible[0] = true;
        let mut rng = Rng::new(6);
        for _ in 0..10 {
            let batch = sample_batch(&index, &ids, &eligible, 1, 1, &mut rng).unwrap();
            assert_eq!(batch.face_samples, vec![only]);
        }
    }

    #[test]
    fn sample_batch_deterministic() {
        let ds = tiny_synth(30, 7);
        let index = DatasetIndex::build(&ds);
        let ids: Vec<usize> = (0..30).collect();
        let eligible = vec![true; 30];
        let draw = |seed| {
            let mut rng = Rng::new(seed);
            (0..5)
                .map(|_| sample_batch(&index, &ids, &eligible, 30, 6, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn stage1_zero_warmup_leaves_params_unchanged() {
        let ds = tiny_synth(30, 8);
        let cfg = TrainConfig {
            warmup_iters: 0,
            ..tiny_config(8)
        };
        let trainer = Trainer::new(&cfg, &ds).unwrap();
        let root = Rng::new(cfg.seed);
        let mut params = EncoderParams::init(trainer.dims(), &mut root.stream("init"));
        let before = params.clone();
        let mut opt = OptimizerState::new(&params, cfg.learning_rate, cfg.momentum, cfg.weight_decay);
        let mut trace = Vec::new();
        let end = trainer
            .run_stage1(&mut params, &mut opt, &mut root.stream("batch"), &mut trace)
            .unwrap();
        assert_eq!(end, 0);
        assert_eq!(params, before);
        assert!(trace.is_empty());
    }

    #[test]
    fn warmup_reduces_loss() {
        let ds = tiny_synth(60, 9);
        let cfg = TrainConfig {
            batch_size: 16,
            warmup_iters: 500,
            max_iters: 501,
            hidden_dim: 16,
            embed_dim: 8,
            ..tiny_config(9)
        };
        let trainer = Trainer::new(&cfg, &ds).unwrap();
        let root = Rng::new(cfg.seed);
        let mut params = EncoderParams::init(trainer.dims(), &mut root.stream("init"));
        let mut opt = OptimizerState::new(&params, cfg.learning_rate, cfg.momentum, cfg.weight_decay);
        let mut trace = Vec::new();
        trainer
            .run_stage1(&mut params, &mut opt, &mut root.stream("batch"), &mut trace)
            .unwrap();
        let first: f64 = trace[..50].iter().map(|r| r.loss_total).sum::<f64>() / 50.0;
        let last: f64 = trace[450..].iter().map(|r| r.loss_total).sum::<f64>() / 50.0;
        assert!(last < first, "loss did not improve: first {first} last {last}");
    }

    #[test]
    fn stage2_update_count_matches_promotion_arithmetic() {
        // train split of 200 identities: init floor(0.3*200) = 60 nonzero,
        // k = 22, keep 0.9 -> ceil((180 - 60)/22) = 6 triggered updates
        let ds = tiny_synth(265, 10);
        let cfg = TrainConfig {
            batch_size: 32,
            warmup_iters: 2,
            update_interval: 4,
            promote_per_update: 22,
            max_iters: 5000,
            hidden_dim: 16,
            embed_dim: 4,
            seed: 10,
            ..TrainConfig::default()
        };
        let trainer = Trainer::new(&cfg, &ds).unwrap();
        assert_eq!(trainer.classes(), 200);
        let root = Rng::new(cfg.seed);
        let mut params = EncoderParams::init(trainer.dims(), &mut root.stream("init"));
        let mut opt = OptimizerState::new(&params, cfg.learning_rate, cfg.momentum, cfg.weight_decay);
        let mut trace = Vec::new();
        let t1 = trainer
            .run_stage1(&mut params, &mut opt, &mut root.stream("batch"), &mut trace)
            .unwrap();
        let (state, history, _) = trainer
            .run_stage2(&mut params, &mut opt, &mut root.stream("batch"), t1, &mut trace)
            .unwrap();
        assert_eq!(history.len(), 6);
        assert!(state.stop_condition(0.9));
        // nonzero counts strictly increase across updates
        for w in history.windows(2) {
            assert!(w[1].nonzero_count > w[0].nonzero_count);
        }
        assert_eq!(history.last().unwrap().nonzero_count, 60 + 6 * 22);
    }

    #[test]
    fn disable_reweighting_skips_stage2() {
        let ds = tiny_synth(30, 11);
        let cfg = TrainConfig {
            disable_reweighting: true,
            ..tiny_config(11)
        };
        let model = train(&cfg, &ds).unwrap();
        assert!(model.weight_history.is_empty());
        assert_eq!(model.stage1_end, model.stage2_end);
        assert!(model.weight_state.weights().iter().all(|&w| w == 1.0));
        assert!(model.excluded_identities.is_empty());
        assert!(!model.trace.iter().any(|r| r.stage == 2));
    }

    #[test]
    fn stage3_reinitializes_independently() {
        let ds = tiny_synth(30, 12);
        let cfg = tiny_config(12);
        let trainer = Trainer::new(&cfg, &ds).unwrap();
        let root = Rng::new(cfg.seed);
        let mut params = EncoderParams::init(trainer.dims(), &mut root.stream("init"));
        let mut opt = OptimizerState::new(&params, cfg.learning_rate, cfg.momentum, cfg.weight_decay);
        let mut trace = Vec::new();
        trainer
            .run_stage1(&mut params, &mut opt, &mut root.stream("batch"), &mut trace)
            .unwrap();
        let stage2_final = params.clone();
        let fresh = EncoderParams::init(trainer.dims(), &mut root.stream("init-retrain"));
        let frac = stage2_final
            .classifier
            .fraction_differing(&fresh.classifier)
            .min(
                stage2_final
                    .face
                    .l1
                    .w
                    .fraction_differing(&fresh.face.l1.w),
            );
        assert!(frac >= 0.99, "fresh init shares {frac} of entries");
    }

    #[test]
    fn excluded_identities_never_sampled_in_stage3() {
        let ds = tiny_synth(40, 13);
        let cfg = tiny_config(13);
        let trainer = Trainer::new(&cfg, &ds).unwrap();
        let m = trainer.classes();
        // frozen state excluding ~half the identities
        let mut state = IdentityWeightState::new(m);
        let idx: Vec<usize> = (0..m).collect();
        let hardness: Vec<f64> = (0..m).map(|i| i as f64).collect();
        state.update_hardness(&idx, &hardness, 0.9).unwrap();
        state.init_weights(0.4).unwrap();
        let eligible: Vec<bool> = state.weights().iter().map(|&w| w > 0.0).collect();
        let count = state.nonzero_count();
        let mut rng = Rng::new(14);
        for _ in 0..50 {
            let batch = sample_batch(
                trainer.dataset_index(),
                trainer.identity_of_class(),
                &eligible,
                count,
                cfg.batch_size.min(count),
                &mut rng,
            )
            .unwrap();
            for c in batch.classes {
                assert!(eligible[c]);
            }
        }
    }

    #[test]
    fn full_pipeline_is_deterministic() {
        let ds = tiny_synth(30, 15);
        let cfg = tiny_config(15);
        let a = train(&cfg, &ds).unwrap();
        let b = train(&cfg, &ds).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.final_params, b.final_params);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.weight_history, b.weight_history);
        assert_eq!(a.excluded_identities, b.excluded_identities);
    }

    #[test]
    fn trace_has_stage_boundaries_and_additive_losses() {
        let ds = tiny_synth(30, 16);
        let cfg = tiny_config(16);
        let model = train(&cfg, &ds).unwrap();
        let stages: Vec<u8> = model.trace.iter().map(|r| r.stage).collect();
        // non-decreasing stages visiting 1, 2 and 3
        assert!(stages.windows(2).all(|w| w[0] <= w[1]));
        for s in [1u8, 2, 3] {
            assert!(stages.contains(&s), "missing stage {s}");
        }
        let stage1_count = stages.iter().filter(|&&s| s == 1).count();
        assert_eq!(stage1_count, cfg.warmup_iters);
        for r in &model.trace {
            assert_eq!(r.loss_total, r.loss_implicit + r.loss_explicit);
            assert!(r.loss_total.is_finite());
        }
        // stage 3 trace restarts its iteration counter
        let first3 = model.trace.iter().find(|r| r.stage == 3).unwrap();
        assert_eq!(first3.t, 1);
        assert_eq!(
            model.trace.iter().filter(|r| r.stage == 3).count(),
            cfg.max_iters
        );
    }

    #[test]
    fn ablation_runs_share_stage1_with_full_run() {
        let ds = tiny_synth(30, 17);
        let cfg = tiny_config(17);
        let full = train(&cfg, &ds).unwrap();
        let no_reweight = train(
            &TrainConfig {
                disable_reweighting: true,
                ..cfg.clone()
            },
            &ds,
        )
        .unwrap();
        let w = cfg.warmup_iters;
        assert_eq!(&full.trace[..w], &no_reweight.trace[..w]);
        assert_ne!(full.trace.len(), no_reweight.trace.len());
    }

    #[test]
    fn jsonl_writer_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let records = vec![
            IterRecord {
                stage: 1,
                t: 1,
                loss_total: 3.5,
                loss_implicit: 2.0,
                loss_explicit: 1.5,
                lr: 0.01,
                nonzero_weight_count: 10,
            },
            IterRecord {
                stage: 3,
                t: 2,
                loss_total: 1.25,
                loss_implicit: 1.0,
                loss_explicit: 0.25,
                lr: 0.001,
                nonzero_weight_count: 9,
            },
        ];
        write_jsonl(&path, &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let back: Vec<IterRecord> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(back, records);
    }

    #[test]
    fn checksum_is_stable() {
        assert_eq!(weights_checksum(&[1.0, 0.0]), weights_checksum(&[1.0, 0.0]));
        assert_ne!(weights_checksum(&[1.0, 0.0]), weights_checksum(&[0.0, 1.0]));
    }
}
