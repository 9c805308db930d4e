//! Retrieval and distribution metrics.
//!
//! Ranking uses cosine similarity with a deterministic tie-break
//! (gallery index ascending), so metrics are reproducible bit-for-bit.
//! Average precision is the interpolation-free variant: precision at
//! each relevant hit, averaged over the relevant gallery items.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::sphere::{angle_between, UnitVector, ZERO_NORM_EPS};

pub type ClassId = usize;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("query {0} has label {1} with no gallery match")]
    OrphanQuery(usize, ClassId),
    #[error("class {0} not present")]
    UnknownClass(ClassId),
    #[error("feature norm is at or below {ZERO_NORM_EPS}")]
    ZeroNorm,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub rank1: f64,
    pub map: f64,
    pub per_class_rank1: BTreeMap<ClassId, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceReport {
    pub per_class: BTreeMap<ClassId, ClassVariance>,
    pub head_mean_sigma2: f64,
    pub tail_mean_sigma2: f64,
    /// Classes with fewer than two samples, excluded from aggregates.
    pub singleton_classes: Vec<ClassId>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClassVariance {
    pub mean: f64,
    pub variance: f64,
    pub sample_count: usize,
}

fn normalize_all(features: &[Vec<f64>]) -> Result<Vec<UnitVector>, EvalError> {
    features
        .iter()
        .map(|f| UnitVector::normalize(f).map_err(|_| EvalError::ZeroNorm))
        .collect()
}

/// Ranks the gallery for each query by descending cosine similarity and
/// reports Rank-1 and mAP. Metrics are invariant to positive rescaling
/// of any feature.
pub fn evaluate_retrieval(
    query_features: &[Vec<f64>],
    query_labels: &[ClassId],
    gallery_features: &[Vec<f64>],
    gallery_labels: &[ClassId],
) -> Result<RetrievalResult, EvalError> {
    if gallery_features.is_empty() {
        return Err(EvalError::EmptyGallery);
    }
    if query_features.len() != query_labels.len() {
        return Err(EvalError::DimensionMismatch(
            query_features.len(),
            query_labels.len(),
        ));
    }
    if gallery_features.len() != gallery_labels.len() {
        return Err(EvalError::DimensionMismatch(
            gallery_features.len(),
            gallery_labels.len(),
        ));
    }
    let gallery_label_set: BTreeSet<ClassId> = gallery_labels.iter().copied().collect();
    for (i, &l) in query_labels.iter().enumerate() {
        if !gallery_label_set.contains(&l) {
            return Err(EvalError::OrphanQuery(i, l));
        }
    }
    let q = normalize_all(query_features)?;
    let g = normalize_all(gallery_features)?;

    let mut rank1_hits = 0usize;
    let mut ap_sum = 0.0;
    let mut per_class_hits: BTreeMap<ClassId, (usize, usize)> = BTreeMap::new();
    for (qi, qf) in q.iter().enumerate() {
        let label = query_labels[qi];
        let mut order: Vec<usize> = (0..g.len()).collect();
        let sims: Vec<f64> = g.iter().map(|gf| qf.dot(gf)).collect();
        order.sort_by(|&a, &b| {
            sims[b]
                .partial_cmp(&sims[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let hit = gallery_labels[order[0]] == label;
        if hit {
            rank1_hits += 1;
        }
        let entry = per_class_hits.entry(label).or_insert((0, 0));
        entry.0 += hit as usize;
        entry.1 += 1;

        let mut relevant_seen = 0usize;
        let mut precision_sum = 0.0;
        for (rank, &gi) in order.iter().enumerate() {
            if gallery_labels[gi] == label {
                relevant_seen += 1;
                precision_sum += relevant_seen as f64 / (rank + 1) as f64;
            }
        }
        ap_sum += precision_sum / relevant_seen as f64;
    }
    let n_q = q.len().max(1);
    Ok(RetrievalResult {
        rank1: rank1_hits as f64 / n_q as f64,
        map: ap_sum / n_q as f64,
        per_class_rank1: per_class_hits
            .into_iter()
            .map(|(c, (h, t))| (c, h as f64 / t as f64))
            .collect(),
    })
}

/// Per-class intra-class angular statistics of a feature set.
///
/// The class center is the mean of the normalized features; the
/// variance is the population variance of angles to the center.
/// Singleton classes are listed separately and excluded from the
/// head/tail aggregate means.
pub fn measure_variances(
    features: &[Vec<f64>],
    labels: &[ClassId],
    head_set: &BTreeSet<ClassId>,
) -> Result<VarianceReport, EvalError> {
    if features.len() != labels.len() {
        return Err(EvalError::DimensionMismatch(features.len(), labels.len()));
    }
    let normalized = normalize_all(features)?;
    let mut by_class: BTreeMap<ClassId, Vec<&UnitVector>> = BTreeMap::new();
    for (f, &l) in normalized.iter().zip(labels) {
        by_class.entry(l).or_default().push(f);
    }

    let mut per_class = BTreeMap::new();
    let mut singleton_classes = Vec::new();
    for (&class, feats) in &by_class {
        if feats.len() < 2 {
            singleton_classes.push(class);
            continue;
        }
        let dim = feats[0].dim();
        let mut mean_vec = vec![0.0; dim];
        for f in feats {
            for (m, x) in mean_vec.iter_mut().zip(f.components()) {
                *m += x;
            }
        }
        let center = UnitVector::normalize(&mean_vec).map_err(|_| EvalError::ZeroNorm)?;
        let angles: Vec<f64> = feats
            .iter()
            .map(|f| angle_between(f, &center).unwrap().radians())
            .collect();
        let mean = angles.iter().sum::<f64>() / angles.len() as f64;
        let variance =
            angles.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / angles.len() as f64;
        per_class.insert(
            class,
            ClassVariance {
                mean,
                variance,
                sample_count: feats.len(),
            },
        );
    }

    let aggregate = |head: bool| {
        let vars: Vec<f64> = per_class
            .iter()
            .filter(|(c, _)| head_set.contains(c) == head)
            .map(|(_, v)| v.variance)
            .collect();
        if vars.is_empty() {
            0.0
        } else {
            vars.iter().sum::<f64>() / vars.len() as f64
        }
    };
    Ok(VarianceReport {
        head_mean_sigma2: aggregate(true),
        tail_mean_sigma2: aggregate(false),
        per_class,
        singleton_classes,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Histogram of angles between a class's features and its center, with
/// bin edges spanning `[0, pi]`.
pub fn export_angle_histogram(
    features: &[Vec<f64>],
    labels: &[ClassId],
    class_id: ClassId,
    bins: usize,
) -> Result<Vec<HistogramBin>, EvalError> {
    assert!(bins >= 1);
    let normalized = normalize_all(features)?;
    let feats: Vec<&UnitVector> = normalized
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == class_id)
        .map(|(f, _)| f)
        .collect();
    if feats.is_empty() {
        return Err(EvalError::UnknownClass(class_id));
    }
    let dim = feats[0].dim();
    let mut mean_vec = vec![0.0; dim];
    for f in &feats {
        for (m, x) in mean_vec.iter_mut().zip(f.components()) {
            *m += x;
        }
    }
    let center = UnitVector::normalize(&mean_vec).map_err(|_| EvalError::ZeroNorm)?;
    let width = std::f64::consts::PI / bins as f64;
    let mut hist: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            lo: i as f64 * width,
            hi: (i + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for f in &feats {
        let a = angle_between(f, &center).unwrap().radians();
        let idx = ((a / width) as usize).min(bins - 1);
        hist[idx].count += 1;
    }
    Ok(hist)
}

/// CSV rows `bin_lo,bin_hi,count`.
pub fn histogram_to_csv(hist: &[HistogramBin]) -> String {
    let mut out = String::from("bin_lo,bin_hi,count\n");
    for b in hist {
        out.push_str(&format!("{},{},{}\n", b.lo, b.hi, b.count));
    }
    out
}
