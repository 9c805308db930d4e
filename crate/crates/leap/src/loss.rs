//! Angular margin losses with analytic gradients.
//!
//! Five variants share one forward/backward path: normalized softmax,
//! CosFace (additive cosine margin), ArcFace (additive angular margin),
//! and the angle-perturbed CosFace/ArcFace used for variance transfer.
//! The perturbation `alpha` is drawn per instance and added inside the
//! cosine of every logit of that instance (the printed form of the
//! perturbed losses); `alpha_target_only` restricts it to the target
//! logit for ablation.
//!
//! Gradients flow through the feature/weight normalization and through
//! `cos(clip(acos(cos) + alpha [+ m_a]))`; alpha itself, class centers
//! and memories are treated as constants. The clip contributes zero
//! derivative outside `(0, pi)`, and the `1/sin` factor of the arccos is
//! guarded by clamping `|cos|` to `1 - 1e-7`.

use serde::{Deserialize, Serialize};

use rand::Rng;
use rand_distr::Normal;

use crate::sphere::{sample_on_cone, Angle, UnitVector, ZERO_NORM_EPS};

/// Guard for the arccos gradient near the poles.
const ACOS_GRAD_GUARD: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("input contains a non-finite value")]
    NonFiniteInput,
    #[error("feature or weight norm is at or below {ZERO_NORM_EPS}")]
    ZeroNorm,
    #[error("label {0} out of range for {1} classes")]
    InvalidLabel(usize, usize),
    #[error("instance {0} carries nonzero alpha but the perturbation is disabled")]
    AlphaOnDisabledLeap(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFamily {
    Softmax,
    Cosface,
    Arcface,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub family: LossFamily,
    /// Enables the per-instance angle perturbation (the feature cloud).
    pub leap_enabled: bool,
    /// Logit scale s.
    pub scale: f64,
    /// Additive cosine margin m_c (CosFace).
    pub cosine_margin: f64,
    /// Additive angular margin m_a (ArcFace).
    pub angular_margin: f64,
    /// Apply alpha to the target logit only instead of all logits.
    #[serde(default)]
    pub alpha_target_only: bool,
    /// Duplicate each instance this many times with independent alpha
    /// draws when assembling batches.
    #[serde(default = "default_replication")]
    pub replication: usize,
}

fn default_replication() -> usize {
    1
}

impl LossConfig {
    pub fn cosface(scale: f64, cosine_margin: f64) -> Self {
        LossConfig {
            family: LossFamily::Cosface,
            leap_enabled: false,
            scale,
            cosine_margin,
            angular_margin: 0.0,
            alpha_target_only: false,
            replication: 1,
        }
    }

    pub fn arcface(scale: f64, angular_margin: f64) -> Self {
        LossConfig {
            family: LossFamily::Arcface,
            leap_enabled: false,
            scale,
            cosine_margin: 0.0,
            angular_margin,
            alpha_target_only: false,
            replication: 1,
        }
    }

    pub fn softmax(scale: f64) -> Self {
        LossConfig {
            family: LossFamily::Softmax,
            leap_enabled: false,
            scale,
            cosine_margin: 0.0,
            angular_margin: 0.0,
            alpha_target_only: false,
            replication: 1,
        }
    }

    pub fn with_leap(mut self) -> Self {
        self.leap_enabled = true;
        self
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.scale > 0.0) {
            return Err(LossError::InvalidConfig("scale must be > 0".into()));
        }
        if self.cosine_margin < 0.0 || self.angular_margin < 0.0 {
            return Err(LossError::InvalidConfig("margins must be >= 0".into()));
        }
        if self.replication < 1 {
            return Err(LossError::InvalidConfig("replication must be >= 1".into()));
        }
        if self.leap_enabled && self.family == LossFamily::Softmax {
            return Err(LossError::InvalidConfig(
                "the angle perturbation is defined for cosface and arcface only".into(),
            ));
        }
        Ok(())
    }
}

/// Classifier weights, one column per class. Columns are normalized
/// internally before use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    columns: Vec<Vec<f64>>,
}

impl WeightMatrix {
    pub fn new(columns: Vec<Vec<f64>>) -> Result<Self, LossError> {
        if columns.is_empty() {
            return Err(LossError::InvalidConfig("no classes".into()));
        }
        let d = columns[0].len();
        for c in &columns {
            if c.len() != d {
                return Err(LossError::DimensionMismatch(c.len(), d));
            }
            if c.iter().any(|x| !x.is_finite()) {
                return Err(LossError::NonFiniteInput);
            }
            if crate::sphere::norm(c) <= ZERO_NORM_EPS {
                return Err(LossError::ZeroNorm);
            }
        }
        Ok(WeightMatrix { columns })
    }

    pub fn num_classes(&self) -> usize {
        self.columns.len()
    }

    pub fn dim(&self) -> usize {
        self.columns[0].len()
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn columns_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.columns
    }
}

/// A feature batch with labels and the per-instance alpha draws.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub alphas: Vec<f64>,
}

impl EmbeddingBatch {
    pub fn without_alphas(features: Vec<Vec<f64>>, labels: Vec<usize>) -> Self {
        let n = features.len();
        EmbeddingBatch {
            features,
            labels,
            alphas: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    /// Mean negative log-likelihood over the batch.
    pub value: f64,
    pub grad_features: Vec<Vec<f64>>,
    pub grad_weights: Vec<Vec<f64>>,
    /// Diagnostic: the scaled logits fed into the softmax.
    pub per_instance_logits: Vec<Vec<f64>>,
}

/// Forward value and analytic gradients of the configured loss.
pub fn forward_backward(
    batch: &EmbeddingBatch,
    weights: &WeightMatrix,
    cfg: &LossConfig,
) -> Result<LossOutput, LossError> {
    cfg.validate()?;
    let n_inst = batch.len();
    let num_classes = weights.num_classes();
    let dim = weights.dim();
    if batch.labels.len() != n_inst || batch.alphas.len() != n_inst {
        return Err(LossError::DimensionMismatch(batch.labels.len(), n_inst));
    }
    for (i, f) in batch.features.iter().enumerate() {
        if f.len() != dim {
            return Err(LossError::DimensionMismatch(f.len(), dim));
        }
        if f.iter().any(|x| !x.is_finite()) || !batch.alphas[i].is_finite() {
            return Err(LossError::NonFiniteInput);
        }
        if batch.labels[i] >= num_classes {
            return Err(LossError::InvalidLabel(batch.labels[i], num_classes));
        }
        if !cfg.leap_enabled && batch.alphas[i] != 0.0 {
            return Err(LossError::AlphaOnDisabledLeap(i));
        }
    }

    // normalized weight columns, shared across instances
    let mut w_norms = Vec::with_capacity(num_classes);
    let mut w_hat: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    for col in weights.columns() {
        let n = crate::sphere::norm(col);
        if n <= ZERO_NORM_EPS {
            return Err(LossError::ZeroNorm);
        }
        w_norms.push(n);
        w_hat.push(col.iter().map(|x| x / n).collect());
    }

    let mut value = 0.0;
    let mut grad_features = vec![vec![0.0; dim]; n_inst];
    let mut grad_weights = vec![vec![0.0; dim]; num_classes];
    let mut per_instance_logits = vec![vec![0.0; num_classes]; n_inst];

    for n in 0..n_inst {
        let f = &batch.features[n];
        let f_norm = crate::sphere::norm(f);
        if f_norm <= ZERO_NORM_EPS {
            return Err(LossError::ZeroNorm);
        }
        let f_hat: Vec<f64> = f.iter().map(|x| x / f_norm).collect();
        let y = batch.labels[n];
        let alpha = batch.alphas[n];

        // logits and d(logit)/d(cos) per class
        let mut cosines = vec![0.0; num_classes];
        let mut logits = vec![0.0; num_classes];
        let mut dlogit_dcos = vec![0.0; num_classes];
        for j in 0..num_classes {
            let c = crate::sphere::dot(&f_hat, &w_hat[j]).clamp(-1.0, 1.0);
            cosines[j] = c;
            let is_target = j == y;
            let additive = match cfg.family {
                LossFamily::Softmax => 0.0,
                LossFamily::Cosface | LossFamily::Arcface => {
                    let a = if cfg.alpha_target_only && !is_target {
                        0.0
                    } else {
                        alpha
                    };
                    let margin = if is_target && cfg.family == LossFamily::Arcface {
                        cfg.angular_margin
                    } else {
                        0.0
                    };
                    a + margin
                }
            };
            let (g, dg_dc) = if additive == 0.0 {
                // pure cosine path, no arccos round-trip
                (c, 1.0)
            } else {
                let theta = c.acos();
                let shifted = theta + additive;
                let phi = shifted.clamp(0.0, std::f64::consts::PI);
                let clip_active = shifted > 0.0 && shifted < std::f64::consts::PI;
                let dg = if clip_active {
                    let c_guarded = c.clamp(-(1.0 - ACOS_GRAD_GUARD), 1.0 - ACOS_GRAD_GUARD);
                    phi.sin() / (1.0 - c_guarded * c_guarded).sqrt()
                } else {
                    0.0
                };
                (phi.cos(), dg)
            };
            let margin_shift = if is_target && cfg.family == LossFamily::Cosface {
                cfg.cosine_margin
            } else {
                0.0
            };
            logits[j] = cfg.scale * (g - margin_shift);
            dlogit_dcos[j] = cfg.scale * dg_dc;
        }
        per_instance_logits[n] = logits.clone();

        // stable log-softmax
        let max_logit = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp_sum: f64 = logits.iter().map(|z| (z - max_logit).exp()).sum();
        value += (max_logit + exp_sum.ln()) - logits[y];

        for j in 0..num_classes {
            let p = (logits[j] - max_logit).exp() / exp_sum;
            let dvalue_dlogit = (p - if j == y { 1.0 } else { 0.0 }) / n_inst as f64;
            let coeff = dvalue_dlogit * dlogit_dcos[j];
            if coeff == 0.0 {
                continue;
            }
            let c = cosines[j];
            // d cos / d f = (w_hat - c f_hat) / |f|
            for k in 0..dim {
                grad_features[n][k] += coeff * (w_hat[j][k] - c * f_hat[k]) / f_norm;
            }
            // d cos / d W_j = (f_hat - c w_hat) / |W_j|
            for k in 0..dim {
                grad_weights[j][k] += coeff * (f_hat[k] - c * w_hat[j][k]) / w_norms[j];
            }
        }
    }
    value /= n_inst as f64;
    if !value.is_finite() {
        return Err(LossError::NonFiniteInput);
    }

    Ok(LossOutput {
        value,
        grad_features,
        grad_weights,
        per_instance_logits,
    })
}

/// Realizes a feature cloud: `count` cone samples around `feature` at
/// folded-Gaussian angles `|N(0, alpha_variance)|`. Diagnostic use; the
/// training loss perturbs angles directly.
pub fn materialize_cloud<R: Rng>(
    feature: &UnitVector,
    alpha_variance: f64,
    count: usize,
    rng: &mut R,
) -> Vec<UnitVector> {
    if alpha_variance <= 0.0 {
        return vec![feature.clone(); count];
    }
    let normal = Normal::new(0.0, alpha_variance.sqrt()).expect("positive finite variance");
    (0..count)
        .map(|_| {
            let a: f64 = rng.sample(normal);
            let angle = Angle::clip(a.abs()).expect("finite draw");
            sample_on_cone(feature, angle, rng).expect("unit input")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::angle_between;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_batch(
        r: &mut ChaCha8Rng,
        n: usize,
        c: usize,
        d: usize,
        alpha_std: f64,
    ) -> (EmbeddingBatch, WeightMatrix) {
        let features: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| r.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        let alphas: Vec<f64> = (0..n)
            .map(|_| alpha_std * r.sample::<f64, _>(StandardNormal))
            .collect();
        let cols: Vec<Vec<f64>> = (0..c)
            .map(|_| (0..d).map(|_| r.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        (
            EmbeddingBatch {
                features,
                labels,
                alphas,
            },
            WeightMatrix::new(cols).unwrap(),
        )
    }

    #[test]
    fn leap_cosface_reduces_to_cosface_at_zero_alpha() {
        let mut r = rng(31);
        for _ in 0..50 {
            let (mut batch, w) = random_batch(&mut r, 6, 5, 8, 0.0);
            batch.alphas = vec![0.0; batch.len()];
            let base = forward_backward(&batch, &w, &LossConfig::cosface(24.0, 0.2)).unwrap();
            let leap =
                forward_backward(&batch, &w, &LossConfig::cosface(24.0, 0.2).with_leap()).unwrap();
            assert_eq!(base.value, leap.value);
            assert_eq!(base.grad_features, leap.grad_features);
            assert_eq!(base.grad_weights, leap.grad_weights);
        }
    }

    #[test]
    fn leap_arcface_reduces_to_arcface_at_zero_alpha() {
        let mut r = rng(32);
        for _ in 0..50 {
            let (mut batch, w) = random_batch(&mut r, 6, 5, 8, 0.0);
            batch.alphas = vec![0.0; batch.len()];
            let base = forward_backward(&batch, &w, &LossConfig::arcface(16.0, 0.2)).unwrap();
            let leap =
                forward_backward(&batch, &w, &LossConfig::arcface(16.0, 0.2).with_leap()).unwrap();
            assert_eq!(base.value, leap.value);
            assert_eq!(base.grad_features, leap.grad_features);
            assert_eq!(base.grad_weights, leap.grad_weights);
        }
    }

    #[test]
    fn cosface_hand_example() {
        // f aligned with W_0, W_1 orthogonal, s = 24, m_c = 0.2:
        // target logit 24 * (1 - 0.2) = 19.2, other logit 0
        let batch = EmbeddingBatch::without_alphas(vec![vec![2.0, 0.0]], vec![0]);
        let w = WeightMatrix::new(vec![vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let out = forward_backward(&batch, &w, &LossConfig::cosface(24.0, 0.2)).unwrap();
        let expected = -( (19.2f64).exp() / ((19.2f64).exp() + 1.0) ).ln();
        assert!((out.value - expected).abs() < 1e-12, "{} vs {expected}", out.value);
    }

    fn config_for(family: LossFamily, leap: bool) -> LossConfig {
        let mut cfg = match family {
            LossFamily::Softmax => LossConfig::softmax(24.0),
            LossFamily::Cosface => LossConfig::cosface(24.0, 0.2),
            LossFamily::Arcface => LossConfig::arcface(16.0, 0.2),
        };
        cfg.leap_enabled = leap;
        cfg
    }

    /// Max relative error between analytic gradients and central finite
    /// differences over every feature and weight coordinate.
    pub(crate) fn finite_difference_max_rel_error(
        batch: &EmbeddingBatch,
        weights: &WeightMatrix,
        cfg: &LossConfig,
    ) -> f64 {
        let step = 1e-5;
        let out = forward_backward(batch, weights, cfg).unwrap();
        let mut max_rel: f64 = 0.0;
        let mut check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * step);
            let denom = analytic.abs().max(fd.abs()).max(1e-4);
            max_rel = max_rel.max((analytic - fd).abs() / denom);
        };
        for n in 0..batch.len() {
            for k in 0..batch.features[n].len() {
                let mut b = batch.clone();
                b.features[n][k] += step;
                let plus = forward_backward(&b, weights, cfg).unwrap().value;
                b.features[n][k] -= 2.0 * step;
                let minus = forward_backward(&b, weights, cfg).unwrap().value;
                check(out.grad_features[n][k], plus, minus);
            }
        }
        for j in 0..weights.num_classes() {
            for k in 0..weights.dim() {
                let mut w = weights.clone();
                w.columns_mut()[j][k] += step;
                let plus = forward_backward(batch, &w, cfg).unwrap().value;
                w.columns_mut()[j][k] -= 2.0 * step;
                let minus = forward_backward(batch, &w, cfg).unwrap().value;
                check(out.grad_weights[j][k], plus, minus);
            }
        }
        max_rel
    }

    /// True when some effective angle of the batch sits within `margin`
    /// of a clip boundary, where the analytic derivative is one-sided.
    pub(crate) fn near_clip_boundary(
        batch: &EmbeddingBatch,
        weights: &WeightMatrix,
        cfg: &LossConfig,
        margin: f64,
    ) -> bool {
        for n in 0..batch.len() {
            let f = UnitVector::normalize(&batch.features[n]).unwrap();
            for (j, col) in weights.columns().iter().enumerate() {
                let w = UnitVector::normalize(col).unwrap();
                let theta = angle_between(&f, &w).unwrap().radians();
                let is_target = j == batch.labels[n];
                let alpha = if cfg.leap_enabled && (!cfg.alpha_target_only || is_target) {
                    batch.alphas[n]
                } else {
                    0.0
                };
                let margin_a = if is_target && cfg.family == LossFamily::Arcface {
                    cfg.angular_margin
                } else {
                    0.0
                };
                let shifted = theta + alpha + margin_a;
                if shifted < margin || shifted > std::f64::consts::PI - margin {
                    return true;
                }
                // arccos gradient guard kicks in near the poles
                if theta < margin || theta > std::f64::consts::PI - margin {
                    return true;
                }
            }
        }
        false
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng(33);
        for (family, leap) in [
            (LossFamily::Softmax, false),
            (LossFamily::Cosface, false),
            (LossFamily::Arcface, false),
            (LossFamily::Cosface, true),
            (LossFamily::Arcface, true),
        ] {
            let cfg = config_for(family, leap);
            let mut done = 0;
            while done < 10 {
                let alpha_std = if leap { 0.15 } else { 0.0 };
                let (batch, w) = random_batch(&mut r, 4, 5, 8, alpha_std);
                if near_clip_boundary(&batch, &w, &cfg, 1e-3) {
                    continue;
                }
                let err = finite_difference_max_rel_error(&batch, &w, &cfg);
                assert!(err < 1e-5, "family {family:?} leap {leap}: rel err {err}");
                done += 1;
            }
        }
    }

    #[test]
    fn alpha_target_only_perturbs_only_target_logit() {
        let mut r = rng(34);
        let (mut batch, w) = random_batch(&mut r, 3, 4, 8, 0.2);
        let mut cfg = LossConfig::cosface(24.0, 0.2).with_leap();
        cfg.alpha_target_only = true;
        let out = forward_backward(&batch, &w, &cfg).unwrap();
        let alphas = batch.alphas.clone();
        batch.alphas = vec![0.0; batch.len()];
        let base = forward_backward(&batch, &w, &LossConfig::cosface(24.0, 0.2).with_leap()).unwrap();
        for n in 0..batch.len() {
            for j in 0..w.num_classes() {
                if j == batch.labels[n] && alphas[n] != 0.0 {
                    assert_ne!(out.per_instance_logits[n][j], base.per_instance_logits[n][j]);
                } else {
                    assert_eq!(out.per_instance_logits[n][j], base.per_instance_logits[n][j]);
                }
            }
        }
    }

    #[test]
    fn alpha_on_disabled_leap_is_error() {
        let batch = EmbeddingBatch {
            features: vec![vec![1.0, 0.0]],
            labels: vec![0],
            alphas: vec![0.1],
        };
        let w = WeightMatrix::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            forward_backward(&batch, &w, &LossConfig::cosface(24.0, 0.2)),
            Err(LossError::AlphaOnDisabledLeap(0))
        ));
    }

    #[test]
    fn leap_softmax_is_rejected() {
        let mut cfg = LossConfig::softmax(24.0);
        cfg.leap_enabled = true;
        assert!(matches!(cfg.validate(), Err(LossError::InvalidConfig(_))));
    }

    #[test]
    fn uniform_upward_alpha_never_decreases_loss_when_target_angle_dominates() {
        // provable region: the target angle is the largest of the
        // instance and theta_y + theta_j + 2*alpha <= pi, so the target
        // logit drops at least as fast as every other logit
        let mut r = rng(35);
        let d = 8;
        let c = 4;
        let mut violations = 0;
        let mut tested = 0;
        while tested < 200 {
            let (mut batch, w) = random_batch(&mut r, 1, c, d, 0.0);
            let alpha: f64 = r.gen_range(0.01..0.3);
            let f = UnitVector::normalize(&batch.features[0]).unwrap();
            let angles: Vec<f64> = w
                .columns()
                .iter()
                .map(|col| {
                    angle_between(&f, &UnitVector::normalize(col).unwrap())
                        .unwrap()
                        .radians()
                })
                .collect();
            let y = angles
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            let theta_y = angles[y];
            if theta_y >= std::f64::consts::FRAC_PI_2 {
                continue;
            }
            let max_other = angles
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != y)
                .map(|(_, a)| *a)
                .fold(0.0f64, f64::max);
            if theta_y + max_other + 2.0 * alpha > std::f64::consts::PI {
                continue;
            }
            batch.labels[0] = y;
            batch.alphas = vec![0.0];
            let base = forward_backward(&batch, &w, &LossConfig::cosface(24.0, 0.2)).unwrap();
            batch.alphas = vec![alpha];
            let leap =
                forward_backward(&batch, &w, &LossConfig::cosface(24.0, 0.2).with_leap()).unwrap();
            if leap.value < base.value - 1e-12 {
                violations += 1;
            }
            tested += 1;
        }
        assert_eq!(violations, 0);
    }

    #[test]
    fn softmax_probabilities_sum_to_one() {
        let mut r = rng(36);
        let (batch, w) = random_batch(&mut r, 4, 6, 8, 0.0);
        let out = forward_backward(&batch, &w, &LossConfig::softmax(24.0)).unwrap();
        for logits in &out.per_instance_logits {
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
            let p_sum: f64 = logits.iter().map(|z| (z - max).exp() / sum).sum();
            assert!((p_sum - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn loss_invariant_to_feature_rescaling(seed in 0u64..500, scale in 0.1f64..10.0) {
            let mut r = rng(seed);
            let (batch, w) = random_batch(&mut r, 3, 4, 6, 0.0);
            let base = forward_backward(&batch, &w, &LossConfig::cosface(24.0, 0.2)).unwrap();
            let mut scaled = batch.clone();
            for f in &mut scaled.features {
                for x in f.iter_mut() {
                    *x *= scale;
                }
            }
            let out = forward_backward(&scaled, &w, &LossConfig::cosface(24.0, 0.2)).unwrap();
            prop_assert!((out.value - base.value).abs() < 1e-9);
        }
    }

    #[test]
    fn cloud_zero_variance_returns_input() {
        let mut r = rng(37);
        let f = UnitVector::random(8, &mut r).unwrap();
        for fp in materialize_cloud(&f, 0.0, 10, &mut r) {
            assert_eq!(fp, f);
        }
    }

    #[test]
    fn cloud_angles_match_folded_normal_moments() {
        // folded |N(0, v)|: mean = sqrt(2v/pi), variance = v(1 - 2/pi)
        let variance = 0.03f64;
        let mut r = rng(38);
        let f = UnitVector::random(8, &mut r).unwrap();
        let cloud = materialize_cloud(&f, variance, 10_000, &mut r);
        let angles: Vec<f64> = cloud
            .iter()
            .map(|fp| angle_between(&f, fp).unwrap().radians())
            .collect();
        let mean = angles.iter().sum::<f64>() / angles.len() as f64;
        let var = angles.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / angles.len() as f64;
        let want_mean = (2.0 * variance / std::f64::consts::PI).sqrt();
        let want_std = (variance * (1.0 - 2.0 / std::f64::consts::PI)).sqrt();
        assert!((mean - want_mean).abs() / want_mean < 0.05, "mean {mean} want {want_mean}");
        assert!((var.sqrt() - want_std).abs() / want_std < 0.05, "std {} want {want_std}", var.sqrt());
        for fp in &cloud {
            assert!((crate::sphere::norm(fp.components()) - 1.0).abs() < 1e-9);
        }
    }
}
