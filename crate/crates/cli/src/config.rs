//! Resolved run configuration: defaults, then a `key=value` file, then flags.

use std::path::Path;

use lpnas::blocks::BlockKind;
use lpnas::data::SyntheticConfig;
use lpnas::device::DeviceProfile;
use lpnas::genotype::SearchSpaceConfig;
use lpnas::precision::{OverflowPolicy, PrecisionConfig};
use lpnas::search::{Branch, FitnessConfig, GaConfig};
use lpnas::trainer::{OptimizerKind, TrainConfig};

use crate::CliError;

/// Which search branches a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchSelection {
    Ptq,
    Aligned,
    Both,
}

impl BranchSelection {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ptq => "ptq",
            Self::Aligned => "aligned",
            Self::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ptq" => Some(Self::Ptq),
            "aligned" => Some(Self::Aligned),
            "both" => Some(Self::Both),
            _ => None,
        }
    }

    pub fn branches(self) -> Vec<Branch> {
        match self {
            Self::Ptq => vec![Branch::Ptq],
            Self::Aligned => vec![Branch::Aligned],
            Self::Both => vec![Branch::Ptq, Branch::Aligned],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub ga: GaConfig,
    pub fitness: FitnessConfig,
    pub train: TrainConfig,
    pub precision: PrecisionConfig,
    pub data: SyntheticConfig,
    pub space: SearchSpaceConfig,
    pub profile: DeviceProfile,
    pub branch: BranchSelection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            ga: GaConfig::default(),
            fitness: FitnessConfig::default(),
            train: TrainConfig::default(),
            precision: PrecisionConfig::aligned(),
            data: SyntheticConfig::default(),
            space: SearchSpaceConfig::default(),
            profile: DeviceProfile::default(),
            branch: BranchSelection::Both,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
}

fn flag(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(format!("{key}: expected true/false, got {v:?}")),
    }
}

fn policy(key: &str, v: &str) -> Result<OverflowPolicy, String> {
    OverflowPolicy::parse(v).ok_or_else(|| format!("{key}: expected saturate|infinity, got {v:?}"))
}

fn kinds(v: &str) -> Result<Vec<BlockKind>, String> {
    v.split(',')
        .map(|c| BlockKind::from_code(c.trim()).ok_or_else(|| format!("kinds: unknown block code {c:?}")))
        .collect()
}

impl RunConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let v = v.trim();
        match key {
            "seed" => {
                self.ga.seed = num(key, v)?;
                self.train.seed = self.ga.seed;
            }
            "population_size" => self.ga.population_size = num(key, v)?,
            "generations" => self.ga.generations = num(key, v)?,
            "k_best" => self.ga.k_best = num(key, v)?,
            "n_random" => self.ga.n_random = num(key, v)?,
            "p_mut" => self.ga.p_mut = num(key, v)?,
            "mating_fraction" => self.ga.mating_fraction = num(key, v)?,
            "alpha" => self.fitness.alpha = num(key, v)?,
            "beta" => self.fitness.beta = num(key, v)?,
            "gamma" => self.fitness.gamma = num(key, v)?,
            "e_fp32" => self.train.e_fp32 = num(key, v)?,
            "e_lp" => self.train.e_lp = num(key, v)?,
            "warmup_epochs" => {
                self.train.warmup_epochs = num(key, v)?;
                self.precision.warmup_epochs = self.train.warmup_epochs;
            }
            "batch_size" => self.train.batch_size = num(key, v)?,
            "learning_rate" => self.train.learning_rate = num(key, v)?,
            "optimizer" => {
                self.train.optimizer =
                    OptimizerKind::parse(v).ok_or_else(|| format!("optimizer: expected adam|sgd, got {v:?}"))?
            }
            "project_activations" => self.precision.project_activations = flag(key, v)?,
            "round_weights" => self.precision.round_weights = flag(key, v)?,
            "clip_activations" => self.precision.clip_activations = flag(key, v)?,
            "clip_bound" => self.precision.clip_bound = num(key, v)?,
            "precision_overflow_policy" => self.precision.overflow_policy = policy(key, v)?,
            "image_size" => self.data.image_size = num(key, v)?,
            "n_train" => self.data.n_train = num(key, v)?,
            "n_eval" => self.data.n_eval = num(key, v)?,
            "vessels_min" => self.data.vessels_per_image.0 = num(key, v)?,
            "vessels_max" => self.data.vessels_per_image.1 = num(key, v)?,
            "aspect_min" => self.data.vessel_aspect.0 = num(key, v)?,
            "aspect_max" => self.data.vessel_aspect.1 = num(key, v)?,
            "length_min" => self.data.vessel_length.0 = num(key, v)?,
            "length_max" => self.data.vessel_length.1 = num(key, v)?,
            "empty_prob" => self.data.empty_prob = num(key, v)?,
            "low_contrast_prob" => self.data.low_contrast_prob = num(key, v)?,
            "noise_sigma" => self.data.noise_sigma = num(key, v)?,
            "data_seed" => self.data.seed = num(key, v)?,
            "max_blocks" => self.space.max_blocks = num(key, v)?,
            "max_pools" => self.space.max_pools = num(key, v)?,
            "kinds" => self.space.kinds = kinds(v)?,
            "c_max" => {
                self.space.c_max = match v {
                    "none" => None,
                    _ => Some(num(key, v)?),
                }
            }
            "pool_prob" => self.space.pool_prob = num(key, v)?,
            "dropout_prob" => self.space.dropout_prob = num(key, v)?,
            "profile" => {
                self.profile = DeviceProfile::load(Path::new(v)).map_err(|e| format!("profile {v}: {e}"))?
            }
            "device.mac_rate" => self.profile.mac_rate = num(key, v)?,
            "device.mem_bandwidth" => self.profile.mem_bandwidth = num(key, v)?,
            "device.per_op_overhead" => self.profile.per_op_overhead = num(key, v)?,
            "device.weight_byte_width" => self.profile.weight_byte_width = num(key, v)?,
            "device.activation_byte_width" => self.profile.activation_byte_width = num(key, v)?,
            "device.overflow_policy" => self.profile.overflow_policy = policy(key, v)?,
            "branch" => {
                self.branch =
                    BranchSelection::parse(v).ok_or_else(|| format!("branch: expected ptq|aligned|both, got {v:?}"))?
            }
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value, got {line:?}", i + 1))?;
            self.set(k.trim(), v).map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        Ok(())
    }

    pub fn check(&self) -> Result<(), String> {
        self.ga.check().map_err(|e| e.to_string())?;
        self.fitness.check().map_err(|e| e.to_string())?;
        self.train.check().map_err(|e| e.to_string())?;
        self.precision.check().map_err(|e| e.to_string())?;
        self.data.check().map_err(|e| e.to_string())?;
        self.space.check().map_err(|e| e.to_string())?;
        self.profile.check().map_err(|e| e.to_string())
    }

    /// Every setting in a fixed order, values printed so they parse back
    /// to the same config.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let kinds: Vec<&str> = self.space.kinds.iter().map(|k| k.code()).collect();
        vec![
            ("seed", self.ga.seed.to_string()),
            ("population_size", self.ga.population_size.to_string()),
            ("generations", self.ga.generations.to_string()),
            ("k_best", self.ga.k_best.to_string()),
            ("n_random", self.ga.n_random.to_string()),
            ("p_mut", self.ga.p_mut.to_string()),
            ("mating_fraction", self.ga.mating_fraction.to_string()),
            ("alpha", self.fitness.alpha.to_string()),
            ("beta", self.fitness.beta.to_string()),
            ("gamma", self.fitness.gamma.to_string()),
            ("e_fp32", self.train.e_fp32.to_string()),
            ("e_lp", self.train.e_lp.to_string()),
            ("warmup_epochs", self.train.warmup_epochs.to_string()),
            ("batch_size", self.train.batch_size.to_string()),
            ("learning_rate", self.train.learning_rate.to_string()),
            ("optimizer", self.train.optimizer.as_str().to_string()),
            ("project_activations", self.precision.project_activations.to_string()),
            ("round_weights", self.precision.round_weights.to_string()),
            ("clip_activations", self.precision.clip_activations.to_string()),
            ("clip_bound", self.precision.clip_bound.to_string()),
            ("precision_overflow_policy", self.precision.overflow_policy.as_str().to_string()),
            ("image_size", self.data.image_size.to_string()),
            ("n_train", self.data.n_train.to_string()),
            ("n_eval", self.data.n_eval.to_string()),
            ("vessels_min", self.data.vessels_per_image.0.to_string()),
            ("vessels_max", self.data.vessels_per_image.1.to_string()),
            ("aspect_min", self.data.vessel_aspect.0.to_string()),
            ("aspect_max", self.data.vessel_aspect.1.to_string()),
            ("length_min", self.data.vessel_length.0.to_string()),
            ("length_max", self.data.vessel_length.1.to_string()),
            ("empty_prob", self.data.empty_prob.to_string()),
            ("low_contrast_prob", self.data.low_contrast_prob.to_string()),
            ("noise_sigma", self.data.noise_sigma.to_string()),
            ("data_seed", self.data.seed.to_string()),
            ("max_blocks", self.space.max_blocks.to_string()),
            ("max_pools", self.space.max_pools.to_string()),
            ("kinds", kinds.join(",")),
            ("c_max", self.space.c_max.map_or("none".into(), |c| c.to_string())),
            ("pool_prob", self.space.pool_prob.to_string()),
            ("dropout_prob", self.space.dropout_prob.to_string()),
            ("device.mac_rate", self.profile.mac_rate.to_string()),
            ("device.mem_bandwidth", self.profile.mem_bandwidth.to_string()),
            ("device.per_op_overhead", self.profile.per_op_overhead.to_string()),
            ("device.weight_byte_width", self.profile.weight_byte_width.to_string()),
            ("device.activation_byte_width", self.profile.activation_byte_width.to_string()),
            ("device.overflow_policy", self.profile.overflow_policy.as_str().to_string()),
            ("branch", self.branch.as_str().to_string()),
        ]
    }

    /// `key=value` text of [`entries`](Self::entries); parses back to `self`.
    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

/// Resolves defaults < file < flags. File problems are input errors; flag
/// problems (including a config made invalid by a flag) are usage errors.
pub fn resolve(file: Option<&Path>, flags: &[(String, String)]) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.apply_text(&text)
            .and_then(|_| cfg.check())
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    }
    for (k, v) in flags {
        cfg.set(k, v).map_err(CliError::Usage)?;
    }
    cfg.check().map_err(CliError::Usage)?;
    Ok(cfg)
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("seed", "7").unwrap();
        c.set("kinds", "CA,MB").unwrap();
        c.set("c_max", "5000").unwrap();
        c.set("learning_rate", "0.0003").unwrap();
        c.set("device.mac_rate", "3e9").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
        assert_eq!(back.train.seed, 7);
    }

    #[test]
    fn every_key_is_settable() {
        let c = RunConfig::default();
        let mut d = RunConfig::default();
        for (k, v) in c.entries() {
            d.set(k, &v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
        assert_eq!(c, d);
    }

    #[test]
    fn precedence_flags_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nseed=3\ngenerations=4 # trailing\nimage_size=16\n").unwrap();
        let cfg = resolve(Some(&path), &[("seed".into(), "9".into())]).unwrap();
        assert_eq!(cfg.ga.seed, 9);
        assert_eq!(cfg.ga.generations, 4);
        assert_eq!(cfg.data.image_size, 16);
        assert_eq!(cfg.ga.population_size, 16);
    }

    #[test]
    fn bad_values_are_classified() {
        let e = resolve(None, &[("image_size".into(), "48".into())]).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(e.to_string().contains("48"), "{e}");
        let e = resolve(None, &[("nope".into(), "1".into())]).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cfg");
        std::fs::write(&path, "seed=x\n").unwrap();
        let e = resolve(Some(&path), &[]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("line 1"), "{e}");
        let e = resolve(Some(&dir.path().join("missing.cfg")), &[]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn warmup_is_shared() {
        let mut c = RunConfig::default();
        c.set("warmup_epochs", "3").unwrap();
        assert_eq!(c.precision.warmup_epochs, 3);
        assert_eq!(c.train.warmup_epochs, 3);
    }
}
