//! Unit-sphere vector primitives: angles, clipping, cone sampling, and
//! Householder reflections.
//!
//! Everything here is closed-form, so tolerances are fixed at 1e-9.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Norms at or below this are treated as zero.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Tolerance for closed-form geometric identities.
pub const GEOM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SphereError {
    #[error("vector norm {0} is at or below {ZERO_NORM_EPS}")]
    ZeroNorm(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("value is not finite")]
    NonFinite,
    #[error("dimension {0} is too small, need at least 2")]
    DimensionTooSmall(usize),
    #[error("reflection endpoints coincide (|w - v| <= {ZERO_NORM_EPS})")]
    DegenerateReflection,
    #[error("precondition violated: theta + alpha = {0} exceeds pi")]
    PreconditionViolated(f64),
}

/// A vector on the unit sphere in `R^d`, `d >= 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Normalizes `v` onto the unit sphere.
    pub fn normalize(v: &[f64]) -> Result<Self, SphereError> {
        if v.len() < 2 {
            return Err(SphereError::DimensionTooSmall(v.len()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(SphereError::NonFinite);
        }
        let norm = norm(v);
        if norm <= ZERO_NORM_EPS {
            return Err(SphereError::ZeroNorm(norm));
        }
        Ok(UnitVector(v.iter().map(|x| x / norm).collect()))
    }

    /// The `i`-th standard basis vector in `R^d`.
    pub fn basis(dim: usize, i: usize) -> Self {
        assert!(dim >= 2 && i < dim);
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        UnitVector(v)
    }

    /// A uniformly random direction, via a normalized Gaussian draw.
    pub fn random<R: Rng>(dim: usize, rng: &mut R) -> Result<Self, SphereError> {
        if dim < 2 {
            return Err(SphereError::DimensionTooSmall(dim));
        }
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            if let Ok(u) = UnitVector::normalize(&v) {
                return Ok(u);
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn components(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &UnitVector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn negated(&self) -> UnitVector {
        UnitVector(self.0.iter().map(|x| -x).collect())
    }
}

/// An angle in radians, clipped to `[0, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Angle(f64);

impl Angle {
    /// Clips `x` to `[0, pi]`.
    pub fn clip(x: f64) -> Result<Self, SphereError> {
        if !x.is_finite() {
            return Err(SphereError::NonFinite);
        }
        Ok(Angle(x.clamp(0.0, std::f64::consts::PI)))
    }

    pub fn radians(self) -> f64 {
        self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Angle between two unit vectors, with the dot product clamped to
/// `[-1, 1]` so rounding near 0 and pi cannot escape the arccos domain.
pub fn angle_between(a: &UnitVector, b: &UnitVector) -> Result<Angle, SphereError> {
    if a.dim() != b.dim() {
        return Err(SphereError::DimensionMismatch(a.dim(), b.dim()));
    }
    Ok(Angle(a.dot(b).clamp(-1.0, 1.0).acos()))
}

/// Draws a unit vector at exactly `alpha` radians from `f`, with the
/// in-cone direction uniform over the orthogonal complement of `f`.
///
/// Construction: `f' = cos(alpha) * f + sin(alpha) * u` where `u` is a
/// Gaussian draw projected onto the complement of `f` and renormalized.
pub fn sample_on_cone<R: Rng>(
    f: &UnitVector,
    alpha: Angle,
    rng: &mut R,
) -> Result<UnitVector, SphereError> {
    let d = f.dim();
    if d < 2 {
        return Err(SphereError::DimensionTooSmall(d));
    }
    // degenerate cones have exact answers
    if alpha.radians() == 0.0 {
        return Ok(f.clone());
    }
    if alpha.radians() == std::f64::consts::PI {
        return Ok(f.negated());
    }
    let u = loop {
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let proj = dot(&g, f.components());
        let comp: Vec<f64> = g
            .iter()
            .zip(f.components())
            .map(|(gi, fi)| gi - proj * fi)
            .collect();
        let n = norm(&comp);
        if n > ZERO_NORM_EPS {
            break comp.into_iter().map(|x| x / n).collect::<Vec<f64>>();
        }
    };
    let (sin_a, cos_a) = alpha.radians().sin_cos();
    let out: Vec<f64> = f
        .components()
        .iter()
        .zip(&u)
        .map(|(fi, ui)| cos_a * fi + sin_a * ui)
        .collect();
    // renormalize to absorb the last-ulp drift of the affine combination
    UnitVector::normalize(&out)
}

/// The Householder reflection `P = I - 2 u u^T` with `u = (w - v)/|w - v|`.
///
/// `P` maps `w` to `v` (and `v` to `w`), is an involution, and preserves
/// inner products and norms.
#[derive(Debug, Clone)]
pub struct HouseholderReflection {
    axis: Vec<f64>,
}

impl HouseholderReflection {
    pub fn mapping(w: &UnitVector, v: &UnitVector) -> Result<Self, SphereError> {
        if w.dim() != v.dim() {
            return Err(SphereError::DimensionMismatch(w.dim(), v.dim()));
        }
        let diff: Vec<f64> = w
            .components()
            .iter()
            .zip(v.components())
            .map(|(a, b)| a - b)
            .collect();
        let n = norm(&diff);
        if n <= ZERO_NORM_EPS {
            return Err(SphereError::DegenerateReflection);
        }
        Ok(HouseholderReflection {
            axis: diff.into_iter().map(|x| x / n).collect(),
        })
    }

    pub fn apply(&self, x: &UnitVector) -> Result<UnitVector, SphereError> {
        if x.dim() != self.axis.len() {
            return Err(SphereError::DimensionMismatch(x.dim(), self.axis.len()));
        }
        let proj = dot(x.components(), &self.axis);
        let out: Vec<f64> = x
            .components()
            .iter()
            .zip(&self.axis)
            .map(|(xi, ui)| xi - 2.0 * proj * ui)
            .collect();
        UnitVector::normalize(&out)
    }
}

/// Result of a Monte-Carlo check of the cone angle bound
/// `|theta - alpha| <= theta' <= theta + alpha`.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub theta: f64,
    pub alpha: f64,
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub observed_min: f64,
    pub observed_max: f64,
    pub trials: usize,
    pub violations: usize,
    /// Gap between each bound and the closest observed angle.
    pub min_slack: f64,
    pub max_slack: f64,
}

impl BoundReport {
    pub fn holds(&self) -> bool {
        self.violations == 0
    }
}

/// Samples `trials` points on the cone of half-angle `alpha` around `f`
/// and checks every resulting angle to `w` against the proposition bound.
pub fn verify_angle_bound<R: Rng>(
    f: &UnitVector,
    w: &UnitVector,
    alpha: Angle,
    trials: usize,
    rng: &mut R,
) -> Result<BoundReport, SphereError> {
    let theta = angle_between(f, w)?.radians();
    let a = alpha.radians();
    if theta + a > std::f64::consts::PI {
        return Err(SphereError::PreconditionViolated(theta + a));
    }
    let lower = (theta - a).abs();
    let upper = theta + a;
    let mut observed_min = f64::INFINITY;
    let mut observed_max = f64::NEG_INFINITY;
    let mut violations = 0usize;
    for _ in 0..trials {
        let fp = sample_on_cone(f, alpha, rng)?;
        let tp = angle_between(w, &fp)?.radians();
        observed_min = observed_min.min(tp);
        observed_max = observed_max.max(tp);
        if tp < lower - GEOM_TOL || tp > upper + GEOM_TOL {
            violations += 1;
        }
    }
    Ok(BoundReport {
        theta,
        alpha: a,
        lower_bound: lower,
        upper_bound: upper,
        observed_min,
        observed_max,
        trials,
        violations,
        min_slack: observed_min - lower,
        max_slack: upper - observed_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn normalize_345() {
        let u = UnitVector::normalize(&[3.0, 4.0]).unwrap();
        assert_eq!(u.components(), &[0.6, 0.8]);
    }

    #[test]
    fn normalize_zero_is_error() {
        assert!(matches!(
            UnitVector::normalize(&[0.0, 0.0]),
            Err(SphereError::ZeroNorm(_))
        ));
    }

    #[test]
    fn normalize_random_has_unit_norm() {
        let mut r = rng(1);
        for _ in 0..1000 {
            let v: Vec<f64> = (0..16).map(|_| r.sample::<f64, _>(StandardNormal) * 3.0).collect();
            if norm(&v) <= ZERO_NORM_EPS {
                continue;
            }
            let u = UnitVector::normalize(&v).unwrap();
            assert!((norm(u.components()) - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn angle_basis_cases() {
        let e1 = UnitVector::basis(3, 0);
        let e2 = UnitVector::basis(3, 1);
        assert_eq!(angle_between(&e1, &e1).unwrap().radians(), 0.0);
        assert!((angle_between(&e1, &e2).unwrap().radians() - PI / 2.0).abs() < 1e-15);
        assert!((angle_between(&e1, &e1.negated()).unwrap().radians() - PI).abs() < 1e-15);
    }

    // extended-precision oracle: accumulate the dot product in two pieces
    // (Kahan summation) before arccos
    fn angle_oracle(a: &[f64], b: &[f64]) -> f64 {
        let mut sum = 0.0f64;
        let mut c = 0.0f64;
        for (x, y) in a.iter().zip(b) {
            let t = x * y - c;
            let s = sum + t;
            c = (s - sum) - t;
            sum = s;
        }
        sum.clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn angle_matches_extended_precision_oracle() {
        let mut r = rng(2);
        for _ in 0..200 {
            let a = UnitVector::random(16, &mut r).unwrap();
            let b = UnitVector::random(16, &mut r).unwrap();
            let got = angle_between(&a, &b).unwrap().radians();
            let want = angle_oracle(a.components(), b.components());
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn angle_is_symmetric() {
        let mut r = rng(3);
        for _ in 0..100 {
            let a = UnitVector::random(8, &mut r).unwrap();
            let b = UnitVector::random(8, &mut r).unwrap();
            assert_eq!(
                angle_between(&a, &b).unwrap().radians(),
                angle_between(&b, &a).unwrap().radians()
            );
        }
    }

    #[test]
    fn clip_angle_cases() {
        assert_eq!(Angle::clip(-0.3).unwrap().radians(), 0.0);
        assert_eq!(Angle::clip(PI + 1.0).unwrap().radians(), PI);
        assert_eq!(Angle::clip(1.2).unwrap().radians(), 1.2);
        assert!(matches!(Angle::clip(f64::NAN), Err(SphereError::NonFinite)));
    }

    #[test]
    fn cone_zero_angle_returns_input() {
        let mut r = rng(4);
        let f = UnitVector::random(8, &mut r).unwrap();
        let fp = sample_on_cone(&f, Angle::clip(0.0).unwrap(), &mut r).unwrap();
        assert_eq!(fp, f);
    }

    #[test]
    fn cone_pi_is_antipodal() {
        let mut r = rng(5);
        let f = UnitVector::random(8, &mut r).unwrap();
        let fp = sample_on_cone(&f, Angle::clip(PI).unwrap(), &mut r).unwrap();
        assert!((angle_between(&f, &fp).unwrap().radians() - PI).abs() < GEOM_TOL);
    }

    #[test]
    fn cone_angle_is_exact_and_unit() {
        let mut r = rng(6);
        let f = UnitVector::random(16, &mut r).unwrap();
        let alpha = Angle::clip(0.7).unwrap();
        for _ in 0..10_000 {
            let fp = sample_on_cone(&f, alpha, &mut r).unwrap();
            assert!((norm(fp.components()) - 1.0).abs() < GEOM_TOL);
            assert!((angle_between(&f, &fp).unwrap().radians() - 0.7).abs() < GEOM_TOL);
        }
    }

    #[test]
    fn cone_complement_direction_is_uniform() {
        // project f' onto a fixed orthonormal basis of the complement of f
        // and chi-square test the angle of the first two coordinates
        let d = 4;
        let f = UnitVector::basis(d, 0);
        let alpha = Angle::clip(0.7).unwrap();
        let mut r = rng(7);
        let bins = 16;
        let n = 20_000usize;
        let mut counts = vec![0usize; bins];
        for _ in 0..n {
            let fp = sample_on_cone(&f, alpha, &mut r).unwrap();
            // complement coords are components 1..d; use the planar angle of (c1, c2)
            let ang = fp.components()[2].atan2(fp.components()[1]);
            let idx = (((ang + PI) / (2.0 * PI)) * bins as f64).min(bins as f64 - 1.0) as usize;
            counts[idx] += 1;
        }
        let expected = n as f64 / bins as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // 15 degrees of freedom, 99.9% quantile is 37.7
        assert!(chi2 < 37.7, "chi2 = {chi2}");
    }

    #[test]
    fn householder_swaps_endpoints() {
        let e1 = UnitVector::basis(3, 0);
        let e2 = UnitVector::basis(3, 1);
        let t = HouseholderReflection::mapping(&e1, &e2).unwrap();
        assert!(angle_between(&t.apply(&e1).unwrap(), &e2).unwrap().radians() < GEOM_TOL);
        assert!(angle_between(&t.apply(&e2).unwrap(), &e1).unwrap().radians() < GEOM_TOL);
    }

    #[test]
    fn householder_is_involution_and_isometry() {
        let mut r = rng(8);
        for _ in 0..1000 {
            let w = UnitVector::random(8, &mut r).unwrap();
            let v = UnitVector::random(8, &mut r).unwrap();
            let t = match HouseholderReflection::mapping(&w, &v) {
                Ok(t) => t,
                Err(_) => continue,
            };
            let x = UnitVector::random(8, &mut r).unwrap();
            let y = UnitVector::random(8, &mut r).unwrap();
            let tx = t.apply(&x).unwrap();
            let ty = t.apply(&y).unwrap();
            assert!((tx.dot(&ty) - x.dot(&y)).abs() < GEOM_TOL);
            let back = t.apply(&tx).unwrap();
            for (b, xi) in back.components().iter().zip(x.components()) {
                assert!((b - xi).abs() < GEOM_TOL);
            }
        }
    }

    #[test]
    fn householder_degenerate_is_error() {
        let e1 = UnitVector::basis(2, 0);
        assert!(matches!(
            HouseholderReflection::mapping(&e1, &e1),
            Err(SphereError::DegenerateReflection)
        ));
    }

    #[test]
    fn bound_degenerate_cone() {
        let mut r = rng(9);
        let f = UnitVector::random(8, &mut r).unwrap();
        let w = UnitVector::random(8, &mut r).unwrap();
        let rep =
            verify_angle_bound(&f, &w, Angle::clip(0.0).unwrap(), 100, &mut r).unwrap();
        assert!(rep.holds());
        assert!((rep.observed_min - rep.theta).abs() < GEOM_TOL);
        assert!((rep.observed_max - rep.theta).abs() < GEOM_TOL);
    }

    #[test]
    fn bound_d2_attains_both_extremes() {
        // in R^2 the complement of f is one-dimensional, so theta' can only
        // take the two boundary values
        let theta = 1.0f64;
        let f = UnitVector::basis(2, 0);
        let w = UnitVector::normalize(&[theta.cos(), theta.sin()]).unwrap();
        let mut r = rng(10);
        let rep =
            verify_angle_bound(&f, &w, Angle::clip(0.4).unwrap(), 1000, &mut r).unwrap();
        assert!(rep.holds());
        assert!((rep.observed_min - 0.6).abs() < GEOM_TOL);
        assert!((rep.observed_max - 1.4).abs() < GEOM_TOL);
    }

    #[test]
    fn bound_d16_monte_carlo() {
        let theta = 1.0f64;
        let mut r = rng(0);
        let f = UnitVector::random(16, &mut r).unwrap();
        let w = sample_on_cone(&f, Angle::clip(theta).unwrap(), &mut r).unwrap();
        // the lower extreme sits in a thin region of the cone measure at
        // d = 16; 10^5 draws are not enough to approach it within 0.05
        let rep =
            verify_angle_bound(&f, &w, Angle::clip(0.4).unwrap(), 1_000_000, &mut r).unwrap();
        assert!(rep.holds());
        assert!(rep.min_slack < 0.05, "min slack {}", rep.min_slack);
        assert!(rep.max_slack < 0.05, "max slack {}", rep.max_slack);
    }

    #[test]
    fn bound_precondition() {
        let f = UnitVector::basis(2, 0);
        let w = f.negated();
        let mut r = rng(12);
        assert!(matches!(
            verify_angle_bound(&f, &w, Angle::clip(0.5).unwrap(), 10, &mut r),
            Err(SphereError::PreconditionViolated(_))
        ));
    }
}
