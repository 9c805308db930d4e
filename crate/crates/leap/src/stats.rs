//! Per-class angular statistics and the head-to-tail variance transfer.
//!
//! Each class keeps a running center (mini-batch EMA) and a bounded FIFO
//! memory of feature-to-center angles. Gaussian stats of the memory feed
//! a [`TransferPlan`] assigning every class the extra angular variance it
//! may draw perturbations from: `max(reference - own, 0)`, where the
//! reference is either the head-class average (vanilla) or the
//! sample-count-weighted average over all classes (full).

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::sphere::{angle_between, Angle, UnitVector, ZERO_NORM_EPS};

pub type ClassId = usize;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("batch mean norm {0} is at or below {ZERO_NORM_EPS}")]
    ZeroNorm(f64),
    #[error("class {0} center is not initialized")]
    UninitializedCenter(ClassId),
    #[error("no class exceeds the head threshold {0}")]
    NoHeadClasses(usize),
    #[error("every class has a single sample, the weighted reference is undefined")]
    AllSingletons,
    #[error("class {0} is not in the transfer plan")]
    UnknownClass(ClassId),
}

/// Which side of the center EMA gets the smoothing factor.
///
/// `AsWritten` weights the fresh batch mean by `1 - gamma` and the
/// previous center by `gamma`. `Conventional` is the usual EMA with the
/// previous center weighted by `1 - gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaConvention {
    AsWritten,
    Conventional,
}

impl Default for EmaConvention {
    fn default() -> Self {
        EmaConvention::AsWritten
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsConfig {
    /// Center learning rate gamma in [0, 1].
    pub gamma: f64,
    /// Angle-memory capacity multiplier P (capacity = K_i * P).
    pub memory_factor: usize,
    /// Head/tail split threshold T, used by the vanilla plan only.
    pub head_threshold: usize,
    /// Iterations between stats refreshes and plan rebuilds.
    pub update_frequency: usize,
    #[serde(default)]
    pub ema_convention: EmaConvention,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            gamma: 0.1,
            memory_factor: 4,
            head_threshold: 10,
            update_frequency: 1,
            ema_convention: EmaConvention::AsWritten,
        }
    }
}

impl StatsConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if self.memory_factor < 1 {
            return Err("memory_factor must be >= 1".into());
        }
        if self.update_frequency < 1 {
            return Err("update_frequency must be >= 1".into());
        }
        Ok(())
    }
}

/// Running center of a class in feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCenter {
    pub class_id: ClassId,
    center: Vec<f64>,
    initialized: bool,
}

impl ClassCenter {
    pub fn new(class_id: ClassId, dim: usize) -> Self {
        ClassCenter {
            class_id,
            center: vec![0.0; dim],
            initialized: false,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn direction(&self) -> Result<UnitVector, StatsError> {
        if !self.initialized {
            return Err(StatsError::UninitializedCenter(self.class_id));
        }
        UnitVector::normalize(&self.center)
            .map_err(|_| StatsError::ZeroNorm(crate::sphere::norm(&self.center)))
    }

    pub fn vector(&self) -> &[f64] {
        &self.center
    }

    /// Mini-batch EMA update. The first observation initializes the
    /// center directly; afterwards the two terms are mixed per the
    /// configured convention.
    pub fn update(&mut self, batch_mean: &[f64], gamma: f64, convention: EmaConvention) -> Result<(), StatsError> {
        let n = crate::sphere::norm(batch_mean);
        if n <= ZERO_NORM_EPS {
            return Err(StatsError::ZeroNorm(n));
        }
        if !self.initialized {
            self.center = batch_mean.to_vec();
            self.initialized = true;
            return Ok(());
        }
        let (w_batch, w_prev) = match convention {
            EmaConvention::AsWritten => (1.0 - gamma, gamma),
            EmaConvention::Conventional => (gamma, 1.0 - gamma),
        };
        for (c, m) in self.center.iter_mut().zip(batch_mean) {
            *c = w_batch * m + w_prev * *c;
        }
        Ok(())
    }
}

/// Bounded FIFO of feature-to-center angles for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleMemory {
    pub class_id: ClassId,
    capacity: usize,
    entries: VecDeque<f64>,
}

impl AngleMemory {
    /// Capacity is `sample_count * memory_factor`.
    pub fn new(class_id: ClassId, sample_count: usize, memory_factor: usize) -> Self {
        AngleMemory {
            class_id,
            capacity: sample_count.max(1) * memory_factor,
            entries: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().copied()
    }

    pub fn push(&mut self, angle: Angle) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(angle.radians());
    }

    /// Records the angle of each feature to the (normalized) center.
    pub fn record(
        &mut self,
        center: &ClassCenter,
        features: &[UnitVector],
    ) -> Result<(), StatsError> {
        let dir = center.direction()?;
        for f in features {
            let a = angle_between(f, &dir).expect("center and feature dims agree");
            self.push(a);
        }
        Ok(())
    }

    /// Mean and population variance of the retained window.
    pub fn stats(&self) -> AngularStats {
        let n = self.entries.len();
        if n == 0 {
            return AngularStats {
                class_id: self.class_id,
                mean: 0.0,
                variance: 0.0,
                sample_count: 0,
            };
        }
        let mean = self.entries.iter().sum::<f64>() / n as f64;
        let variance = if n < 2 {
            0.0
        } else {
            self.entries.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64
        };
        AngularStats {
            class_id: self.class_id,
            mean,
            variance,
            sample_count: n,
        }
    }
}

/// Gaussian summary of a class's angle memory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngularStats {
    pub class_id: ClassId,
    pub mean: f64,
    pub variance: f64,
    pub sample_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    Vanilla,
    Full,
}

/// Per-class perturbation variances derived from the reference
/// distribution: `alpha_variance[i] = max(reference - sigma_i^2, 0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferPlan {
    pub mode: PlanMode,
    pub reference_variance: f64,
    /// Recorded for reporting; the losses only transfer variance.
    pub reference_mean: f64,
    pub per_class_alpha_variance: BTreeMap<ClassId, f64>,
}

impl TransferPlan {
    /// Vanilla scheme: heads are classes with more than `threshold`
    /// samples; the reference is the unweighted mean over head classes
    /// and heads get zero perturbation variance.
    pub fn vanilla(
        stats: &[AngularStats],
        class_sizes: &BTreeMap<ClassId, usize>,
        threshold: usize,
    ) -> Result<Self, StatsError> {
        let heads: Vec<&AngularStats> = stats
            .iter()
            .filter(|s| class_sizes.get(&s.class_id).copied().unwrap_or(0) > threshold)
            .collect();
        if heads.is_empty() {
            return Err(StatsError::NoHeadClasses(threshold));
        }
        let reference_variance =
            heads.iter().map(|s| s.variance).sum::<f64>() / heads.len() as f64;
        let reference_mean = heads.iter().map(|s| s.mean).sum::<f64>() / heads.len() as f64;
        let per_class_alpha_variance = stats
            .iter()
            .map(|s| {
                let is_head = class_sizes.get(&s.class_id).copied().unwrap_or(0) > threshold;
                let v = if is_head {
                    0.0
                } else {
                    (reference_variance - s.variance).max(0.0)
                };
                (s.class_id, v)
            })
            .collect();
        Ok(TransferPlan {
            mode: PlanMode::Vanilla,
            reference_variance,
            reference_mean,
            per_class_alpha_variance,
        })
    }

    /// Full scheme: no head/tail split; the reference is the
    /// `(K_i - 1)`-weighted average of class variances, so singleton
    /// classes contribute nothing.
    pub fn full(
        stats: &[AngularStats],
        class_sizes: &BTreeMap<ClassId, usize>,
    ) -> Result<Self, StatsError> {
        let mut weight_sum = 0.0;
        let mut var_sum = 0.0;
        let mut mean_sum = 0.0;
        for s in stats {
            let k = class_sizes.get(&s.class_id).copied().unwrap_or(0);
            let w = k.saturating_sub(1) as f64;
            weight_sum += w;
            var_sum += w * s.variance;
            mean_sum += w * s.mean;
        }
        if weight_sum <= 0.0 {
            return Err(StatsError::AllSingletons);
        }
        let reference_variance = var_sum / weight_sum;
        let reference_mean = mean_sum / weight_sum;
        let per_class_alpha_variance = stats
            .iter()
            .map(|s| (s.class_id, (reference_variance - s.variance).max(0.0)))
            .collect();
        Ok(TransferPlan {
            mode: PlanMode::Full,
            reference_variance,
            reference_mean,
            per_class_alpha_variance,
        })
    }

    pub fn alpha_variance(&self, class_id: ClassId) -> Result<f64, StatsError> {
        self.per_class_alpha_variance
            .get(&class_id)
            .copied()
            .ok_or(StatsError::UnknownClass(class_id))
    }

    /// Draws `alpha ~ N(0, alpha_variance[class_id])`, returning exactly
    /// zero when that variance is zero.
    pub fn sample_alpha<R: Rng>(&self, class_id: ClassId, rng: &mut R) -> Result<f64, StatsError> {
        let var = self.alpha_variance(class_id)?;
        if var == 0.0 {
            return Ok(0.0);
        }
        let normal = Normal::new(0.0, var.sqrt()).expect("variance is positive and finite");
        Ok(rng.sample(normal))
    }
}

/// One row of the exported stats snapshot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassStatsRow {
    pub class_id: ClassId,
    pub sample_count: usize,
    pub mean: f64,
    pub variance: f64,
    pub alpha_variance: f64,
}

/// JSON-exportable snapshot of the statistics store.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub mode: PlanMode,
    pub reference_mean: f64,
    pub reference_variance: f64,
    pub classes: Vec<ClassStatsRow>,
}

/// All per-class statistics state for a training run: centers, angle
/// memories, and the current transfer plan. Mutated only between
/// optimization steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsStore {
    pub config: StatsConfig,
    pub centers: BTreeMap<ClassId, ClassCenter>,
    pub memories: BTreeMap<ClassId, AngleMemory>,
    pub class_sizes: BTreeMap<ClassId, usize>,
    pub plan: Option<TransferPlan>,
}

impl StatsStore {
    pub fn new(config: StatsConfig, class_sizes: BTreeMap<ClassId, usize>, dim: usize) -> Self {
        let centers = class_sizes
            .keys()
            .map(|&id| (id, ClassCenter::new(id, dim)))
            .collect();
        let memories = class_sizes
            .iter()
            .map(|(&id, &k)| (id, AngleMemory::new(id, k, config.memory_factor)))
            .collect();
        StatsStore {
            config,
            centers,
            memories,
            class_sizes,
            plan: None,
        }
    }

    /// Updates the center of `class_id` with the mean of its normalized
    /// batch features and records the resulting angles.
    pub fn observe(
        &mut self,
        class_id: ClassId,
        features: &[UnitVector],
    ) -> Result<(), StatsError> {
        if features.is_empty() {
            return Ok(());
        }
        let dim = features[0].dim();
        let mut mean = vec![0.0; dim];
        for f in features {
            for (m, x) in mean.iter_mut().zip(f.components()) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= features.len() as f64;
        }
        let center = self
            .centers
            .get_mut(&class_id)
            .ok_or(StatsError::UnknownClass(class_id))?;
        center.update(&mean, self.config.gamma, self.config.ema_convention)?;
        let memory = self
            .memories
            .get_mut(&class_id)
            .ok_or(StatsError::UnknownClass(class_id))?;
        memory.record(center, features)
    }

    pub fn all_stats(&self) -> Vec<AngularStats> {
        self.memories.values().map(|m| m.stats()).collect()
    }

    pub fn rebuild_plan(&mut self, mode: PlanMode) -> Result<&TransferPlan, StatsError> {
        let stats = self.all_stats();
        let plan = match mode {
            PlanMode::Vanilla => {
                TransferPlan::vanilla(&stats, &self.class_sizes, self.config.head_threshold)?
            }
            PlanMode::Full => TransferPlan::full(&stats, &self.class_sizes)?,
        };
        self.plan = Some(plan);
        Ok(self.plan.as_ref().unwrap())
    }

    pub fn snapshot(&self) -> StatsSnapshot {
        let stats = self.all_stats();
        let (mode, reference_mean, reference_variance) = match &self.plan {
            Some(p) => (p.mode, p.reference_mean, p.reference_variance),
            None => (PlanMode::Full, 0.0, 0.0),
        };
        let classes = stats
            .iter()
            .map(|s| ClassStatsRow {
                class_id: s.class_id,
                sample_count: self.class_sizes.get(&s.class_id).copied().unwrap_or(0),
                mean: s.mean,
                variance: s.variance,
                alpha_variance: self
                    .plan
                    .as_ref()
                    .and_then(|p| p.per_class_alpha_variance.get(&s.class_id).copied())
                    .unwrap_or(0.0),
            })
            .collect();
        StatsSnapshot {
            mode,
            reference_mean,
            reference_variance,
            classes,
        }
    }
}
