//! Sectioned key=value run configuration.
//!
//! A config file looks like:
//!
//! ```text
//! [dataset]
//! input_dim = 32
//! num_head = 20
//! head_samples = 100
//!
//! [train]
//! epochs = 30
//! optimizer = adam
//! lr = 0.01
//!
//! [loss]
//! family = leap-cosface
//! ```
//!
//! Unknown sections and keys are errors, and every problem found while
//! parsing and validating is reported at once rather than one at a
//! time. Presets overlay the parsed file, so a preset plus a config
//! with shared settings (data shape, epochs, seed) describes a full
//! run.

use std::path::PathBuf;

use leap::datagen::DatasetSpec;
use leap::loss::{LossConfig, LossFamily};
use leap::stats::{EmaConvention, PlanMode, StatsConfig};
use leap::trainer::{LrSchedule, OptimizerConfig, OptimizerKind, TrainConfig};

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub dims: Vec<usize>,
    pub thetas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            dims: vec![2, 8, 64],
            thetas: vec![0.2, 0.5, 1.0, 1.5, 2.0],
            alphas: vec![0.1, 0.4, 0.8],
            trials: 100_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    /// Directory with a previously generated dataset; when unset, the
    /// dataset is generated from the `[dataset]` section.
    pub data_dir: Option<PathBuf>,
    pub verify: VerifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSpec {
                input_dim: 32,
                num_head: 20,
                head_samples: 100,
                num_tail: 80,
                tail_samples: 5,
                noise_std: 0.05,
                intra_spread: 0.2,
                seed: 7,
            },
            train: TrainConfig {
                epochs: 30,
                batch_size: 64,
                embed_dim: 32,
                optimizer: OptimizerConfig::adam(),
                lr_schedule: LrSchedule::Constant { lr: 0.01 },
                leap_activation_epoch: 20,
                plan_mode: PlanMode::Full,
                stats: StatsConfig::default(),
                loss: LossConfig::cosface(24.0, 0.2),
                seed: 7,
            },
            out_dir: PathBuf::from("run-out"),
            data_dir: None,
            verify: VerifyConfig::default(),
        }
    }
}

/// Raw schedule fields; the variant is assembled after parsing.
#[derive(Debug, Clone, Default)]
struct ScheduleDraft {
    kind: Option<String>,
    lr: Option<f64>,
    base_lr: Option<f64>,
    max_lr: Option<f64>,
    cycle_len: Option<usize>,
}

pub fn parse_config(text: &str) -> Result<RunConfig, Vec<String>> {
    let mut cfg = RunConfig::default();
    let mut errors = Vec::new();
    let mut section = String::new();
    let mut section_known = true;
    let mut schedule = ScheduleDraft::default();
    // unset => two thirds of the epoch budget
    let mut activation: Option<usize> = None;

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') && line.ends_with(']') {
            section = line[1..line.len() - 1].trim().to_string();
            section_known = matches!(
                section.as_str(),
                "dataset" | "train" | "stats" | "loss" | "output" | "verify"
            );
            if !section_known {
                errors.push(format!("line {}: unknown section [{section}]", lineno + 1));
            }
            continue;
        }
        if !section_known {
            continue; // already reported at the section header
        }
        let Some((key, value)) = line.split_once('=') else {
            errors.push(format!("line {}: expected key = value, got {line:?}", lineno + 1));
            continue;
        };
        let key = key.trim();
        let value = value.trim();
        if let Err(e) = apply_key(
            &mut cfg,
            &mut schedule,
            &mut activation,
            &section,
            key,
            value,
        ) {
            errors.push(format!("line {}: {e}", lineno + 1));
        }
    }

    match assemble_schedule(&schedule) {
        Ok(Some(s)) => cfg.train.lr_schedule = s,
        Ok(None) => {}
        Err(e) => errors.push(e),
    }
    cfg.train.leap_activation_epoch = activation.unwrap_or(cfg.train.epochs * 2 / 3);

    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(errors)
    }
}

fn apply_key(
    cfg: &mut RunConfig,
    schedule: &mut ScheduleDraft,
    activation: &mut Option<usize>,
    section: &str,
    key: &str,
    value: &str,
) -> Result<(), String> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
        value
            .parse()
            .map_err(|_| format!("key {key}: cannot parse {value:?}"))
    }
    fn boolean(key: &str, value: &str) -> Result<bool, String> {
        match value {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(format!("key {key}: expected true or false, got {value:?}")),
        }
    }
    fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, String> {
        value
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| format!("key {key}: cannot parse element {s:?}"))
            })
            .collect()
    }

    match (section, key) {
        ("dataset", "input_dim") => cfg.dataset.input_dim = num(key, value)?,
        ("dataset", "num_head") => cfg.dataset.num_head = num(key, value)?,
        ("dataset", "head_samples") => cfg.dataset.head_samples = num(key, value)?,
        ("dataset", "num_tail") => cfg.dataset.num_tail = num(key, value)?,
        ("dataset", "tail_samples") => cfg.dataset.tail_samples = num(key, value)?,
        ("dataset", "noise_std") => cfg.dataset.noise_std = num(key, value)?,
        ("dataset", "intra_spread") => cfg.dataset.intra_spread = num(key, value)?,
        ("dataset", "seed") => cfg.dataset.seed = num(key, value)?,

        ("train", "epochs") => cfg.train.epochs = num(key, value)?,
        ("train", "batch_size") => cfg.train.batch_size = num(key, value)?,
        ("train", "embed_dim") => cfg.train.embed_dim = num(key, value)?,
        ("train", "optimizer") => {
            cfg.train.optimizer.kind = match value {
                "sgd" => OptimizerKind::Sgd,
                "adam" => OptimizerKind::Adam,
                _ => return Err(format!("key optimizer: unknown optimizer {value:?}")),
            }
        }
        ("train", "momentum") => cfg.train.optimizer.momentum = num(key, value)?,
        ("train", "weight_decay") => cfg.train.optimizer.weight_decay = num(key, value)?,
        ("train", "schedule") => schedule.kind = Some(value.to_string()),
        ("train", "lr") => schedule.lr = Some(num(key, value)?),
        ("train", "base_lr") => schedule.base_lr = Some(num(key, value)?),
        ("train", "max_lr") => schedule.max_lr = Some(num(key, value)?),
        ("train", "cycle_len") => schedule.cycle_len = Some(num(key, value)?),
        ("train", "leap_activation_epoch") => *activation = Some(num(key, value)?),
        ("train", "plan_mode") => {
            cfg.train.plan_mode = match value {
                "vanilla" => PlanMode::Vanilla,
                "full" => PlanMode::Full,
                _ => return Err(format!("key plan_mode: unknown mode {value:?}")),
            }
        }
        ("train", "seed") => cfg.train.seed = num(key, value)?,

        ("stats", "gamma") => cfg.train.stats.gamma = num(key, value)?,
        ("stats", "memory_factor") => cfg.train.stats.memory_factor = num(key, value)?,
        ("stats", "head_threshold") => cfg.train.stats.head_threshold = num(key, value)?,
        ("stats", "update_frequency") => cfg.train.stats.update_frequency = num(key, value)?,
        ("stats", "ema_convention") => {
            cfg.train.stats.ema_convention = match value {
                "as_written" => EmaConvention::AsWritten,
                "conventional" => EmaConvention::Conventional,
                _ => return Err(format!("key ema_convention: unknown value {value:?}")),
            }
        }

        ("loss", "family") => set_family(&mut cfg.train.loss, value)?,
        ("loss", "scale") => cfg.train.loss.scale = num(key, value)?,
        ("loss", "cosine_margin") => cfg.train.loss.cosine_margin = num(key, value)?,
        ("loss", "angular_margin") => cfg.train.loss.angular_margin = num(key, value)?,
        ("loss", "alpha_target_only") => cfg.train.loss.alpha_target_only = boolean(key, value)?,
        ("loss", "replication") => cfg.train.loss.replication = num(key, value)?,

        ("output", "dir") => cfg.out_dir = PathBuf::from(value),
        ("output", "data_dir") => cfg.data_dir = Some(PathBuf::from(value)),

        ("verify", "dims") => cfg.verify.dims = list(key, value)?,
        ("verify", "thetas") => cfg.verify.thetas = list(key, value)?,
        ("verify", "alphas") => cfg.verify.alphas = list(key, value)?,
        ("verify", "trials") => cfg.verify.trials = num(key, value)?,
        ("verify", "seed") => cfg.verify.seed = num(key, value)?,

        ("", k) => return Err(format!("key {k} appears before any section header")),
        (s, k) => return Err(format!("unknown key {k} in section [{s}]")),
    }
    Ok(())
}

fn set_family(loss: &mut LossConfig, value: &str) -> Result<(), String> {
    let (family, leap) = match value {
        "softmax" => (LossFamily::Softmax, false),
        "cosface" => (LossFamily::Cosface, false),
        "arcface" => (LossFamily::Arcface, false),
        "leap-cosface" => (LossFamily::Cosface, true),
        "leap-arcface" => (LossFamily::Arcface, true),
        _ => return Err(format!("key family: unknown loss family {value:?}")),
    };
    loss.family = family;
    loss.leap_enabled = leap;
    Ok(())
}

fn assemble_schedule(d: &ScheduleDraft) -> Result<Option<LrSchedule>, String> {
    match d.kind.as_deref() {
        None => Ok(d.lr.map(|lr| LrSchedule::Constant { lr })),
        Some("constant") => {
            let lr = d.lr.ok_or("schedule constant requires lr")?;
            Ok(Some(LrSchedule::Constant { lr }))
        }
        Some("triangular") => {
            let base_lr = d.base_lr.ok_or("schedule triangular requires base_lr")?;
            let max_lr = d.max_lr.ok_or("schedule triangular requires max_lr")?;
            let cycle_len = d.cycle_len.ok_or("schedule triangular requires cycle_len")?;
            Ok(Some(LrSchedule::Triangular {
                base_lr,
                max_lr,
                cycle_len,
            }))
        }
        Some(other) => Err(format!("unknown schedule {other:?}")),
    }
}

/// Named overlays applied after the config file. The `*-defaults`
/// presets encode the two published hyperparameter sets; the method
/// presets switch the loss family and transfer mode.
pub fn apply_preset(cfg: &mut RunConfig, name: &str) -> Result<(), String> {
    match name {
        "reid-defaults" => {
            match cfg.train.loss.family {
                LossFamily::Arcface => {
                    cfg.train.loss.scale = 16.0;
                    cfg.train.loss.angular_margin = 0.2;
                }
                _ => {
                    cfg.train.loss.scale = 24.0;
                    cfg.train.loss.cosine_margin = 0.2;
                }
            }
            Ok(())
        }
        "face-defaults" => {
            cfg.train.loss.scale = 64.0;
            match cfg.train.loss.family {
                LossFamily::Arcface => cfg.train.loss.angular_margin = 0.5,
                _ => cfg.train.loss.cosine_margin = 0.35,
            }
            Ok(())
        }
        "baseline-cosface" => {
            cfg.train.loss.family = LossFamily::Cosface;
            cfg.train.loss.leap_enabled = false;
            Ok(())
        }
        "leap-cosface-full" => {
            cfg.train.loss.family = LossFamily::Cosface;
            cfg.train.loss.leap_enabled = true;
            cfg.train.plan_mode = PlanMode::Full;
            Ok(())
        }
        "leap-cosface-vanilla" => {
            cfg.train.loss.family = LossFamily::Cosface;
            cfg.train.loss.leap_enabled = true;
            cfg.train.plan_mode = PlanMode::Vanilla;
            Ok(())
        }
        other => Err(format!("unknown preset {other:?}")),
    }
}

/// Cross-field validation after presets and flag overrides.
pub fn validate(cfg: &RunConfig) -> Result<(), Vec<String>> {
    let mut errors = Vec::new();
    if let Err(e) = cfg.dataset.validate() {
        errors.push(e.to_string());
    }
    if let Err(es) = cfg.train.validate() {
        errors.extend(es);
    }
    if cfg.verify.trials == 0 {
        errors.push("verify trials must be >= 1".into());
    }
    if cfg.verify.dims.iter().any(|&d| d < 2) {
        errors.push("verify dims must all be >= 2".into());
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_full_file() {
        let text = "
[dataset]
input_dim = 16
num_head = 4     # comment
seed = 11

[train]
epochs = 9
schedule = triangular
base_lr = 0.001
max_lr = 0.01
cycle_len = 20

[loss]
family = leap-arcface
angular_margin = 0.3
";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.dataset.input_dim, 16);
        assert_eq!(cfg.dataset.num_head, 4);
        assert_eq!(cfg.dataset.seed, 11);
        assert_eq!(cfg.train.epochs, 9);
        assert_eq!(cfg.train.leap_activation_epoch, 6);
        assert!(matches!(
            cfg.train.lr_schedule,
            LrSchedule::Triangular { cycle_len: 20, .. }
        ));
        assert_eq!(cfg.train.loss.family, LossFamily::Arcface);
        assert!(cfg.train.loss.leap_enabled);
        assert_eq!(cfg.train.loss.angular_margin, 0.3);
    }

    #[test]
    fn unknown_keys_and_sections_are_all_reported() {
        let text = "
[dataset]
inputdim = 16
num_head = oops

[mystery]
x = 1
";
        let errs = parse_config(text).unwrap_err();
        assert_eq!(errs.len(), 3, "{errs:?}");
        assert!(errs.iter().any(|e| e.contains("inputdim")));
        assert!(errs.iter().any(|e| e.contains("num_head")));
        assert!(errs.iter().any(|e| e.contains("mystery")));
    }

    #[test]
    fn presets_override_family_and_margins() {
        let mut cfg = RunConfig::default();
        apply_preset(&mut cfg, "face-defaults").unwrap();
        assert_eq!(cfg.train.loss.scale, 64.0);
        assert_eq!(cfg.train.loss.cosine_margin, 0.35);

        let mut cfg = RunConfig::default();
        set_family(&mut cfg.train.loss, "arcface").unwrap();
        apply_preset(&mut cfg, "reid-defaults").unwrap();
        assert_eq!(cfg.train.loss.scale, 16.0);
        assert_eq!(cfg.train.loss.angular_margin, 0.2);

        let mut cfg = RunConfig::default();
        apply_preset(&mut cfg, "leap-cosface-full").unwrap();
        assert!(cfg.train.loss.leap_enabled);
        assert!(apply_preset(&mut cfg, "nope").is_err());
    }

    #[test]
    fn validation_collects_everything() {
        let mut cfg = RunConfig::default();
        cfg.dataset.input_dim = 1;
        cfg.train.batch_size = 0;
        cfg.verify.trials = 0;
        let errs = validate(&cfg).unwrap_err();
        assert!(errs.len() >= 3, "{errs:?}");
    }
}
