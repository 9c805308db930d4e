//! Mini-batch training loop joining data generation, class statistics,
//! and the margin losses.
//!
//! The backbone is a single linear projection; all method-specific
//! machinery is backbone-agnostic. Each step embeds the batch,
//! normalizes features, updates centers and angle memories, periodically
//! rebuilds the transfer plan, draws the per-instance angle
//! perturbations once the activation epoch is reached, and applies one
//! optimizer step to the projection and classifier weights.
//!
//! Everything is driven by a single seeded RNG, so a (dataset, config)
//! pair fully determines the trajectory, and checkpoints carry the RNG
//! and optimizer state so a resumed run continues it exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Split};
use crate::loss::{forward_backward, EmbeddingBatch, LossConfig, LossError, WeightMatrix};
use crate::sphere::UnitVector;
use crate::stats::{PlanMode, StatsConfig, StatsError, StatsStore};

const CHECKPOINT_MAGIC: &[u8; 8] = b"LEAPCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid config: {0:?}")]
    Config(Vec<String>),
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format version {found}, expected {CHECKPOINT_VERSION}")]
    FormatVersionMismatch { found: u32 },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

/// Linear embedding backbone: `feature = P * input (+ bias)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModel {
    pub out_dim: usize,
    pub in_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub projection: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl EmbeddingModel {
    /// Gaussian init with variance `1/in_dim`.
    pub fn random<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let scale = (1.0 / in_dim as f64).sqrt();
        let projection = (0..out_dim * in_dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        EmbeddingModel {
            out_dim,
            in_dim,
            projection,
            bias: None,
        }
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim];
        for r in 0..self.out_dim {
            let row = &self.projection[r * self.in_dim..(r + 1) * self.in_dim];
            out[r] = crate::sphere::dot(row, input);
            if let Some(b) = &self.bias {
                out[r] += b[r];
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn sgd(momentum: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            momentum,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            weight_decay: 0.0,
        }
    }
}

/// Per-tensor optimizer state (Adam moments or SGD momentum buffer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl TensorState {
    fn new(len: usize) -> Self {
        TensorState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    fn apply(&mut self, cfg: &OptimizerConfig, params: &mut [f64], grads: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grads.len());
        self.step += 1;
        match cfg.kind {
            OptimizerKind::Sgd => {
                for i in 0..params.len() {
                    let g = grads[i] + cfg.weight_decay * params[i];
                    self.m[i] = cfg.momentum * self.m[i] + g;
                    params[i] -= lr * self.m[i];
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
                let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
                for i in 0..params.len() {
                    let g = grads[i] + cfg.weight_decay * params[i];
                    self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
                    self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    Triangular { base_lr: f64, max_lr: f64, cycle_len: usize },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            LrSchedule::Constant { lr } => {
                if !(*lr > 0.0) {
                    return Err("lr must be > 0".into());
                }
            }
            LrSchedule::Triangular {
                base_lr,
                max_lr,
                cycle_len,
            } => {
                if !(*base_lr > 0.0) || base_lr > max_lr {
                    return Err("need 0 < base_lr <= max_lr".into());
                }
                if *cycle_len < 2 {
                    return Err("cycle_len must be >= 2".into());
                }
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self {
            LrSchedule::Constant { lr } => *lr,
            LrSchedule::Triangular {
                base_lr,
                max_lr,
                cycle_len,
            } => triangular_lr(step, *base_lr, *max_lr, *cycle_len),
        }
    }
}

/// Piecewise-linear wave: rises base to max over the first half of the
/// cycle, falls back over the second half, repeats.
pub fn triangular_lr(step: usize, base_lr: f64, max_lr: f64, cycle_len: usize) -> f64 {
    assert!(cycle_len >= 2 && base_lr <= max_lr);
    let pos = (step % cycle_len) as f64;
    let half = cycle_len as f64 / 2.0;
    if pos < half {
        base_lr + (max_lr - base_lr) * pos / half
    } else {
        max_lr - (max_lr - base_lr) * (pos - half) / half
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Output dimension of the linear embedding.
    pub embed_dim: usize,
    pub optimizer: OptimizerConfig,
    pub lr_schedule: LrSchedule,
    /// Epoch (0-based) at which angle perturbation starts.
    pub leap_activation_epoch: usize,
    pub plan_mode: PlanMode,
    pub stats: StatsConfig,
    pub loss: LossConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// Collects every validation failure instead of stopping at the first.
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if self.batch_size < 1 {
            errs.push("batch_size must be >= 1".into());
        }
        if self.embed_dim < 2 {
            errs.push("embed_dim must be >= 2".into());
        }
        if self.leap_activation_epoch > self.epochs {
            errs.push(format!(
                "leap_activation_epoch {} exceeds epochs {}",
                self.leap_activation_epoch, self.epochs
            ));
        }
        if let Err(e) = self.lr_schedule.validate() {
            errs.push(e);
        }
        if let Err(e) = self.stats.validate() {
            errs.push(e);
        }
        if let Err(e) = self.loss.validate() {
            errs.push(e.to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub head_sigma2_mean: f64,
    pub tail_sigma2_mean: f64,
    pub reference_variance: f64,
    pub alpha_draw_count: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
    /// Times the transfer plan was consulted before the activation
    /// epoch; must stay zero.
    pub early_plan_consultations: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "epoch,loss,lr,head_sigma2_mean,tail_sigma2_mean,reference_variance,alpha_draw_count\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch,
                r.loss,
                r.lr,
                r.head_sigma2_mean,
                r.tail_sigma2_mean,
                r.reference_variance,
                r.alpha_draw_count
            ));
        }
        out
    }
}

/// Full training state at an epoch boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Next epoch to run.
    pub epoch: usize,
    pub global_step: usize,
    pub model: EmbeddingModel,
    pub weights: WeightMatrix,
    pub stats: StatsStore,
    pub optimizer_projection: TensorState,
    pub optimizer_weights: TensorState,
    pub rng: ChaCha8Rng,
}

/// On-disk layout: magic, version (u32 LE), header length (u64 LE),
/// JSON header, then the projection and weight matrices as f64 LE.
pub fn save_checkpoint(cp: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    #[derive(Serialize)]
    struct Header<'a> {
        epoch: usize,
        global_step: usize,
        out_dim: usize,
        in_dim: usize,
        num_classes: usize,
        bias: &'a Option<Vec<f64>>,
        stats: &'a StatsStore,
        optimizer_projection: &'a TensorState,
        optimizer_weights: &'a TensorState,
        rng: &'a ChaCha8Rng,
    }
    let header = serde_json::to_vec(&Header {
        epoch: cp.epoch,
        global_step: cp.global_step,
        out_dim: cp.model.out_dim,
        in_dim: cp.model.in_dim,
        num_classes: cp.weights.num_classes(),
        bias: &cp.model.bias,
        stats: &cp.stats,
        optimizer_projection: &cp.optimizer_projection,
        optimizer_weights: &cp.optimizer_weights,
        rng: &cp.rng,
    })
    .map_err(|e| TrainError::BadCheckpoint(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for x in &cp.model.projection {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    for col in cp.weights.columns() {
        for x in col {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 20 || &buf[0..8] != CHECKPOINT_MAGIC {
        return Err(TrainError::BadCheckpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::FormatVersionMismatch { found: version });
    }
    let header_len = u64::from_le_bytes(buf[12..20].try_into().unwrap()) as usize;
    let header_end = 20 + header_len;
    if buf.len() < header_end {
        return Err(TrainError::BadCheckpoint("truncated header".into()));
    }
    #[derive(Deserialize)]
    struct Header {
        epoch: usize,
        global_step: usize,
        out_dim: usize,
        in_dim: usize,
        num_classes: usize,
        bias: Option<Vec<f64>>,
        stats: StatsStore,
        optimizer_projection: TensorState,
        optimizer_weights: TensorState,
        rng: ChaCha8Rng,
    }
    let h: Header = serde_json::from_slice(&buf[20..header_end])
        .map_err(|e| TrainError::BadCheckpoint(e.to_string()))?;
    let n_proj = h.out_dim * h.in_dim;
    let n_weights = h.num_classes * h.out_dim;
    let expected = header_end + (n_proj + n_weights) * 8;
    if buf.len() != expected {
        return Err(TrainError::BadCheckpoint(format!(
            "payload is {} bytes, expected {expected}",
            buf.len()
        )));
    }
    let read_f64 = |off: usize| f64::from_le_bytes(buf[off..off + 8].try_into().unwrap());
    let projection: Vec<f64> = (0..n_proj)
        .map(|i| read_f64(header_end + i * 8))
        .collect();
    let w_base = header_end + n_proj * 8;
    let columns: Vec<Vec<f64>> = (0..h.num_classes)
        .map(|c| {
            (0..h.out_dim)
                .map(|k| read_f64(w_base + (c * h.out_dim + k) * 8))
                .collect()
        })
        .collect();
    Ok(Checkpoint {
        epoch: h.epoch,
        global_step: h.global_step,
        model: EmbeddingModel {
            out_dim: h.out_dim,
            in_dim: h.in_dim,
            projection,
            bias: h.bias,
        },
        weights: WeightMatrix::new(columns).map_err(|e| TrainError::BadCheckpoint(e.to_string()))?,
        stats: h.stats,
        optimizer_projection: h.optimizer_projection,
        optimizer_weights: h.optimizer_weights,
        rng: h.rng,
    })
}

/// Trains from scratch.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<(Checkpoint, TrainLog), TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    let state = init_state(dataset, cfg);
    run_epochs(state, dataset, cfg)
}

/// Continues a checkpointed run; the trajectory from the checkpoint
/// epoch onward is identical to the uninterrupted run.
pub fn resume(
    checkpoint: Checkpoint,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainLog), TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    run_epochs(checkpoint, dataset, cfg)
}

fn init_state(dataset: &Dataset, cfg: &TrainConfig) -> Checkpoint {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let in_dim = dataset.manifest.spec.input_dim;
    let model = EmbeddingModel::random(cfg.embed_dim, in_dim, &mut rng);
    let num_classes = dataset.manifest.num_classes;
    // Gaussian columns, normalized
    let columns: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            UnitVector::random(cfg.embed_dim, &mut rng)
                .expect("embed_dim >= 2")
                .components()
                .to_vec()
        })
        .collect();
    let weights = WeightMatrix::new(columns).expect("normalized gaussian columns");
    let stats = StatsStore::new(cfg.stats.clone(), dataset.class_sizes(), cfg.embed_dim);
    let n_proj = model.projection.len();
    let n_w = num_classes * cfg.embed_dim;
    Checkpoint {
        epoch: 0,
        global_step: 0,
        model,
        weights,
        stats,
        optimizer_projection: TensorState::new(n_proj),
        optimizer_weights: TensorState::new(n_w),
        rng,
    }
}

fn run_epochs(
    mut state: Checkpoint,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainLog), TrainError> {
    let train_samples: Vec<(&Vec<f64>, usize)> = dataset
        .by_split(Split::Train)
        .map(|s| (&s.input, s.label))
        .collect();
    let mut log = TrainLog::default();

    for epoch in state.epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        order.shuffle(&mut state.rng);
        let leap_active = cfg.loss.leap_enabled && epoch >= cfg.leap_activation_epoch;

        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        let mut epoch_lr = cfg.lr_schedule.lr_at(state.global_step);
        let mut alpha_draws = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let step = state.global_step;
            epoch_lr = cfg.lr_schedule.lr_at(step);

            // embed and normalize
            let inputs: Vec<&Vec<f64>> = chunk.iter().map(|&i| train_samples[i].0).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train_samples[i].1).collect();
            let features: Vec<Vec<f64>> = inputs.iter().map(|x| state.model.forward(x)).collect();
            let mut unit_features = Vec::with_capacity(features.len());
            for f in &features {
                unit_features.push(
                    UnitVector::normalize(f).map_err(|_| TrainError::NonFiniteLoss { step })?,
                );
            }

            // statistics update comes before the loss, so the current
            // batch informs the next plan rebuild, never its own alphas
            let mut by_class: BTreeMap<usize, Vec<UnitVector>> = BTreeMap::new();
            for (u, &l) in unit_features.iter().zip(&labels) {
                by_class.entry(l).or_default().push(u.clone());
            }
            for (class, feats) in &by_class {
                state.stats.observe(*class, feats)?;
            }
            if step % cfg.stats.update_frequency == 0 {
                state.stats.rebuild_plan(cfg.plan_mode)?;
            }

            // assemble the loss batch, replicating instances when the
            // cloud is realized more than once per step
            let replication = if leap_active { cfg.loss.replication } else { 1 };
            let mut batch_features = Vec::with_capacity(features.len() * replication);
            let mut batch_labels = Vec::with_capacity(features.len() * replication);
            let mut batch_alphas = Vec::with_capacity(features.len() * replication);
            let mut origin = Vec::with_capacity(features.len() * replication);
            for (i, (f, &l)) in features.iter().zip(&labels).enumerate() {
                for _ in 0..replication {
                    let alpha = if leap_active {
                        // cold classes keep alpha = 0 until their memory
                        // holds at least two angles
                        let warm = state
                            .stats
                            .memories
                            .get(&l)
                            .map(|m| m.len() >= 2)
                            .unwrap_or(false);
                        if warm {
                            let plan = state.stats.plan.as_ref().expect("plan rebuilt");
                            if epoch < cfg.leap_activation_epoch {
                                log.early_plan_consultations += 1;
                            }
                            alpha_draws += 1;
                            plan.sample_alpha(l, &mut state.rng)?
                        } else {
                            0.0
                        }
                    } else {
                        0.0
                    };
                    batch_features.push(f.clone());
                    batch_labels.push(l);
                    batch_alphas.push(alpha);
                    origin.push(i);
                }
            }
            let batch = EmbeddingBatch {
                features: batch_features,
                labels: batch_labels,
                alphas: batch_alphas,
            };

            let out = forward_backward(&batch, &state.weights, &cfg.loss)?;
            if !out.value.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            epoch_loss += out.value;
            epoch_steps += 1;

            // backprop through the linear projection
            let in_dim = state.model.in_dim;
            let out_dim = state.model.out_dim;
            let mut grad_proj = vec![0.0; out_dim * in_dim];
            for (gi, gf) in out.grad_features.iter().enumerate() {
                let input = inputs[origin[gi]];
                for r in 0..out_dim {
                    let g = gf[r];
                    if g == 0.0 {
                        continue;
                    }
                    let row = &mut grad_proj[r * in_dim..(r + 1) * in_dim];
                    for (p, x) in row.iter_mut().zip(input.iter()) {
                        *p += g * x;
                    }
                }
            }
            state.optimizer_projection.apply(
                &cfg.optimizer,
                &mut state.model.projection,
                &grad_proj,
                epoch_lr,
            );
            let mut flat_w: Vec<f64> = state
                .weights
                .columns()
                .iter()
                .flatten()
                .copied()
                .collect();
            let flat_g: Vec<f64> = out.grad_weights.iter().flatten().copied().collect();
            state
                .optimizer_weights
                .apply(&cfg.optimizer, &mut flat_w, &flat_g, epoch_lr);
            for (c, col) in state.weights.columns_mut().iter_mut().enumerate() {
                col.copy_from_slice(&flat_w[c * out_dim..(c + 1) * out_dim]);
            }

            state.global_step += 1;
        }

        let snapshot = state.stats.snapshot();
        let head_threshold = cfg.stats.head_threshold;
        let head_vars: Vec<f64> = snapshot
            .classes
            .iter()
            .filter(|c| c.sample_count > head_threshold)
            .map(|c| c.variance)
            .collect();
        let tail_vars: Vec<f64> = snapshot
            .classes
            .iter()
            .filter(|c| c.sample_count <= head_threshold)
            .map(|c| c.variance)
            .collect();
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        log.rows.push(EpochRow {
            epoch,
            loss: if epoch_steps > 0 {
                epoch_loss / epoch_steps as f64
            } else {
                0.0
            },
            lr: epoch_lr,
            head_sigma2_mean: mean(&head_vars),
            tail_sigma2_mean: mean(&tail_vars),
            reference_variance: state
                .stats
                .plan
                .as_ref()
                .map(|p| p.reference_variance)
                .unwrap_or(0.0),
            alpha_draw_count: alpha_draws,
        });
        state.epoch = epoch + 1;
    }
    Ok((state, log))
}
