//! Deterministic synthetic long-tailed datasets.
//!
//! Class prototypes are placed on the unit sphere with a minimum
//! pairwise separation, then each sample is the prototype direction
//! perturbed by a folded-Gaussian angular deviation plus ambient
//! Gaussian noise. Head and tail classes share the same generative
//! spread, so any variance disparity in the learned features has to
//! come from training, not from the data.
//!
//! Every class also receives 2 query and 4 gallery held-out samples so
//! retrieval metrics are defined for tail classes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::sphere::{angle_between, sample_on_cone, Angle, UnitVector};

pub const QUERIES_PER_CLASS: usize = 2;
pub const GALLERY_PER_CLASS: usize = 4;

/// Minimum pairwise prototype angle enforced by rejection.
pub const MIN_PROTOTYPE_ANGLE: f64 = 0.2;

const PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DatagenError {
    #[error("infeasible spec: {0}")]
    InfeasibleSpec(String),
    #[error("could not place {0} prototypes at min angle {MIN_PROTOTYPE_ANGLE}")]
    PlacementFailed(usize),
    #[error("io: {0}")]
    Io(String),
    #[error("bad dataset file: {0}")]
    Format(String),
}

impl From<std::io::Error> for DatagenError {
    fn from(e: std::io::Error) -> Self {
        DatagenError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub input_dim: usize,
    pub num_head: usize,
    pub head_samples: usize,
    pub num_tail: usize,
    pub tail_samples: usize,
    pub noise_std: f64,
    /// Angular std of the true class clusters (RMS angle to prototype).
    pub intra_spread: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.input_dim < 2 {
            return Err(DatagenError::InfeasibleSpec(format!(
                "input_dim {} < 2",
                self.input_dim
            )));
        }
        if self.num_head < 1 || self.head_samples < 1 || self.num_tail < 1 || self.tail_samples < 1
        {
            return Err(DatagenError::InfeasibleSpec("all counts must be >= 1".into()));
        }
        if self.tail_samples > self.head_samples {
            return Err(DatagenError::InfeasibleSpec(
                "tail_samples exceeds head_samples".into(),
            ));
        }
        if self.noise_std < 0.0 || self.intra_spread < 0.0 {
            return Err(DatagenError::InfeasibleSpec("negative std".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_head + self.num_tail
    }

    /// Head classes are labels `0..num_head`.
    pub fn is_head(&self, label: usize) -> bool {
        label < self.num_head
    }

    pub fn train_samples_for(&self, label: usize) -> usize {
        if self.is_head(label) {
            self.head_samples
        } else {
            self.tail_samples
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub input: Vec<f64>,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub num_classes: usize,
    pub train_count: usize,
    pub query_count: usize,
    pub gallery_count: usize,
    pub prototype_min_angle: f64,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    /// Intra-class spread is identical for head and tail at generation
    /// time; recorded so consumers know the disparity is not baked in.
    pub equal_generative_spread: bool,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn by_split(&self, split: Split) -> impl Iterator<Item = &LabeledSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn class_sizes(&self) -> std::collections::BTreeMap<usize, usize> {
        let mut m = std::collections::BTreeMap::new();
        for s in self.by_split(Split::Train) {
            *m.entry(s.label).or_insert(0) += 1;
        }
        m
    }
}

fn place_prototypes(
    spec: &DatasetSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<UnitVector>, DatagenError> {
    let c = spec.num_classes();
    let mut protos: Vec<UnitVector> = Vec::with_capacity(c);
    for _ in 0..c {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let cand = UnitVector::random(spec.input_dim, rng)
                .map_err(|e| DatagenError::InfeasibleSpec(e.to_string()))?;
            let ok = protos.iter().all(|p| {
                angle_between(p, &cand).unwrap().radians() >= MIN_PROTOTYPE_ANGLE
            });
            if ok {
                protos.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(DatagenError::PlacementFailed(c));
        }
    }
    Ok(protos)
}

/// Truncate to f32 precision so in-memory data matches the binary file
/// byte-for-byte after a save/load round trip.
fn to_storage_precision(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = *x as f32 as f64;
    }
}

/// Generates the dataset described by `spec`. Pure function of the spec:
/// the same spec always yields byte-identical output.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset, DatagenError> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos = place_prototypes(spec, &mut master)?;
    let mut min_angle = std::f64::consts::PI;
    for i in 0..protos.len() {
        for j in (i + 1)..protos.len() {
            min_angle = min_angle.min(angle_between(&protos[i], &protos[j]).unwrap().radians());
        }
    }

    let mut samples = Vec::new();
    for (label, proto) in protos.iter().enumerate() {
        // per-class stream so generation is order-independent
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(label as u64 + 1);
        let n_train = spec.train_samples_for(label);
        let splits = std::iter::repeat(Split::Train)
            .take(n_train)
            .chain(std::iter::repeat(Split::Query).take(QUERIES_PER_CLASS))
            .chain(std::iter::repeat(Split::Gallery).take(GALLERY_PER_CLASS));
        for split in splits {
            let deviation: f64 = spec.intra_spread * rng.sample::<f64, _>(StandardNormal);
            let angle = Angle::clip(deviation.abs()).expect("finite");
            let dir = sample_on_cone(proto, angle, &mut rng).expect("unit prototype");
            let mut input: Vec<f64> = dir
                .components()
                .iter()
                .map(|x| x + spec.noise_std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            to_storage_precision(&mut input);
            samples.push(LabeledSample {
                input,
                label,
                split,
            });
        }
    }

    let train_count = samples.iter().filter(|s| s.split == Split::Train).count();
    let manifest = Manifest {
        spec: spec.clone(),
        num_classes: spec.num_classes(),
        train_count,
        query_count: spec.num_classes() * QUERIES_PER_CLASS,
        gallery_count: spec.num_classes() * GALLERY_PER_CLASS,
        prototype_min_angle: min_angle,
        labels: samples.iter().map(|s| s.label).collect(),
        splits: samples.iter().map(|s| s.split).collect(),
        equal_generative_spread: true,
    };
    Ok(Dataset { manifest, samples })
}

/// Writes `data.bin` (little-endian f32, sample-major) and
/// `manifest.json` into `dir`.
pub fn save(dataset: &Dataset, dir: &Path) -> Result<(), DatagenError> {
    fs::create_dir_all(dir)?;
    let mut bin = Vec::with_capacity(dataset.samples.len() * dataset.manifest.spec.input_dim * 4);
    for s in &dataset.samples {
        for &x in &s.input {
            bin.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(dir.join("data.bin"))?;
    f.write_all(&bin)?;
    let manifest = serde_json::to_string_pretty(&dataset.manifest)
        .map_err(|e| DatagenError::Format(e.to_string()))?;
    fs::write(dir.join("manifest.json"), manifest)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Dataset, DatagenError> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)
        .map_err(|e| DatagenError::Format(e.to_string()))?;
    let mut bin = Vec::new();
    fs::File::open(dir.join("data.bin"))?.read_to_end(&mut bin)?;
    let dim = manifest.spec.input_dim;
    let expected = manifest.labels.len() * dim * 4;
    if bin.len() != expected {
        return Err(DatagenError::Format(format!(
            "data.bin is {} bytes, expected {expected}",
            bin.len()
        )));
    }
    let samples = manifest
        .labels
        .iter()
        .zip(&manifest.splits)
        .enumerate()
        .map(|(i, (&label, &split))| {
            let input = (0..dim)
                .map(|k| {
                    let off = (i * dim + k) * 4;
                    f32::from_le_bytes(bin[off..off + 4].try_into().unwrap()) as f64
                })
                .collect();
            LabeledSample {
                input,
                label,
                split,
            }
        })
        .collect();
    Ok(Dataset { manifest, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            input_dim: 8,
            num_head: 2,
            head_samples: 10,
            num_tail: 3,
            tail_samples: 2,
            noise_std: 0.05,
            intra_spread: 0.2,
            seed: 7,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn sample_counts_add_up() {
        let spec = small_spec();
        let ds = generate(&spec).unwrap();
        let train = ds.by_split(Split::Train).count();
        assert_eq!(train, 2 * 10 + 3 * 2);
        assert_eq!(ds.by_split(Split::Query).count(), 5 * QUERIES_PER_CLASS);
        assert_eq!(ds.by_split(Split::Gallery).count(), 5 * GALLERY_PER_CLASS);
        assert_eq!(ds.manifest.train_count, train);
    }

    #[test]
    fn dim_one_is_infeasible() {
        let mut spec = small_spec();
        spec.input_dim = 1;
        assert!(matches!(
            generate(&spec),
            Err(DatagenError::InfeasibleSpec(_))
        ));
    }

    #[test]
    fn prototypes_are_separated() {
        let ds = generate(&small_spec()).unwrap();
        assert!(ds.manifest.prototype_min_angle >= MIN_PROTOTYPE_ANGLE);
    }

    #[test]
    fn angular_spread_matches_spec() {
        // RMS angle to prototype recovers intra_spread when ambient
        // noise is off
        let spec = DatasetSpec {
            input_dim: 8,
            num_head: 1,
            head_samples: 1000,
            num_tail: 1,
            tail_samples: 1,
            noise_std: 0.0,
            intra_spread: 0.3,
            seed: 11,
        };
        let ds = generate(&spec).unwrap();
        // recover the prototype as the normalized mean of the class
        let feats: Vec<Vec<f64>> = ds
            .by_split(Split::Train)
            .filter(|s| s.label == 0)
            .map(|s| s.input.clone())
            .collect();
        let dim = spec.input_dim;
        let mut mean = vec![0.0; dim];
        for f in &feats {
            let u = UnitVector::normalize(f).unwrap();
            for (m, x) in mean.iter_mut().zip(u.components()) {
                *m += x;
            }
        }
        let proto = UnitVector::normalize(&mean).unwrap();
        let ms: f64 = feats
            .iter()
            .map(|f| {
                let u = UnitVector::normalize(f).unwrap();
                angle_between(&u, &proto).unwrap().radians().powi(2)
            })
            .sum::<f64>()
            / feats.len() as f64;
        let rms = ms.sqrt();
        assert!((rms - 0.3).abs() / 0.3 < 0.10, "rms {rms}");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small_spec()).unwrap();
        save(&ds, dir.path()).unwrap();
        let loaded = load(dir.path()).unwrap();
        assert_eq!(ds.samples, loaded.samples);
        assert_eq!(
            serde_json::to_string(&ds.manifest).unwrap(),
            serde_json::to_string(&loaded.manifest).unwrap()
        );
    }
}
