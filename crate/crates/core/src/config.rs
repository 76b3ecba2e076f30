//! Run configuration: a TOML key-value tree covering every training knob,
//! with strict unknown-key rejection so typos fail loudly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::RampSchedule;
use crate::model::ArchDescriptor;
use crate::perturb::{CutMixCfg, StrongAugCfg, TVatSpec, WeakAugCfg, ZoomCfg};

/// Consistency-loss form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    ConfCe,
    Mse,
}

/// How often the cursor teacher absorbs an EMA update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaCadence {
    Iter,
    Epoch,
}

/// Which feature perturbation the student trains against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeaturePerturb {
    Off,
    Uniform,
    VatStudent,
    Tvat,
}

/// Feature-perturbation section: mode plus the norm/iteration knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TvatCfg {
    pub mode: FeaturePerturb,
    pub epsilon: f64,
    pub power_iters: usize,
    pub xi: f64,
}

impl Default for TvatCfg {
    fn default() -> Self {
        let spec = TVatSpec::default();
        TvatCfg {
            mode: FeaturePerturb::Tvat,
            epsilon: spec.epsilon,
            power_iters: spec.power_iters,
            xi: spec.xi,
        }
    }
}

impl TvatCfg {
    pub fn spec(&self) -> TVatSpec {
        TVatSpec {
            epsilon: self.epsilon,
            power_iters: self.power_iters,
            xi: self.xi,
        }
    }
}

/// Dataset locations: a root holding `images/` and `masks/`, a split
/// manifest, and an optional fully labelled validation root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataCfg {
    pub root: PathBuf,
    pub split: PathBuf,
    pub val_root: Option<PathBuf>,
    /// Directory of precomputed pseudo-label masks keyed by image id, used
    /// only when the complementary low-confidence loss is enabled.
    pub pseudo_dir: Option<PathBuf>,
}

/// Output locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoCfg {
    pub out_dir: PathBuf,
}

impl Default for IoCfg {
    fn default() -> Self {
        IoCfg {
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Every hyperparameter of a training run. Loaded from TOML; unknown keys
/// are rejected with the offending key named.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub epochs: usize,
    /// Steps per epoch; defaults to one pass over the labelled subset.
    pub iters_per_epoch: Option<usize>,
    pub batch_labelled: usize,
    pub batch_unlabelled: usize,
    pub lr0: f64,
    pub poly_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// EMA retention factor for teacher updates.
    pub gamma: f64,
    /// Confidence gate: pixels at or below this teacher confidence carry
    /// zero consistency weight.
    pub tau: f64,
    pub loss: LossMode,
    /// Second EMA teacher with alternating updates; off collapses the pair
    /// to classic single-teacher mean teacher.
    pub auxiliary_teacher: bool,
    /// Complementary cross-entropy on low-confidence pixels against
    /// precomputed pseudo labels.
    pub cam_loss: bool,
    pub ema_cadence: EmaCadence,
    /// Run the labelled branch through strong augmentation and the feature
    /// perturbation as well.
    pub perturb_labelled: bool,
    pub checkpoint_every: usize,
    /// Validation cadence in epochs; 0 evaluates only after the final epoch.
    pub eval_every: usize,
    pub seed: u64,
    pub ramp: RampSchedule,
    pub arch: ArchDescriptor,
    pub tvat: TvatCfg,
    pub cutmix: CutMixCfg,
    pub zoom: ZoomCfg,
    pub weak_aug: WeakAugCfg,
    pub strong_aug: StrongAugCfg,
    pub data: DataCfg,
    pub io: IoCfg,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            epochs: 40,
            iters_per_epoch: None,
            batch_labelled: 2,
            batch_unlabelled: 2,
            lr0: 0.1,
            poly_power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            gamma: 0.99,
            tau: 0.8,
            loss: LossMode::ConfCe,
            auxiliary_teacher: true,
            cam_loss: false,
            ema_cadence: EmaCadence::Iter,
            perturb_labelled: true,
            checkpoint_every: 5,
            eval_every: 0,
            seed: 7,
            ramp: RampSchedule::default(),
            arch: ArchDescriptor::default(),
            tvat: TvatCfg::default(),
            cutmix: CutMixCfg::default(),
            zoom: ZoomCfg::default(),
            weak_aug: WeakAugCfg::default(),
            strong_aug: StrongAugCfg::default(),
            data: DataCfg::default(),
            io: IoCfg::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization failed: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_labelled == 0 || self.batch_unlabelled == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.poly_power > 0.0 && self.poly_power.is_finite()) {
            return Err(Error::Config(format!(
                "poly_power must be positive, got {}",
                self.poly_power
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!(
                "EMA factor must lie strictly inside (0,1), got {}",
                self.gamma
            )));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::Config(format!(
                "confidence threshold must lie in [0,1), got {}",
                self.tau
            )));
        }
        if !(self.ramp.beta_max >= 0.0 && self.ramp.beta_max.is_finite()) {
            return Err(Error::Config(format!(
                "beta_max must be nonnegative, got {}",
                self.ramp.beta_max
            )));
        }
        if let Some(0) = self.iters_per_epoch {
            return Err(Error::Config("iters_per_epoch must be at least 1 when set".into()));
        }
        for &s in &self.zoom.scales {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("zoom scale must be positive, got {s}")));
            }
        }
        for (name, p) in [
            ("jitter_prob", self.strong_aug.jitter_prob),
            ("grayscale_prob", self.strong_aug.grayscale_prob),
            ("blur_prob", self.strong_aug.blur_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0,1], got {p}")));
            }
        }
        if self.cam_loss && self.data.pseudo_dir.is_none() {
            return Err(Error::Config(
                "cam_loss needs data.pseudo_dir pointing at precomputed pseudo labels".into(),
            ));
        }
        self.arch.validate()?;
        if self.tvat.mode != FeaturePerturb::Off {
            self.tvat.spec().validate()?;
        }
        self.cutmix.validate()?;
        self.weak_aug.validate()?;
        let df = self.arch.downsample_factor();
        if self.weak_aug.crop % df != 0 {
            return Err(Error::Config(format!(
                "crop size {} must be divisible by the encoder stride product {df}",
                self.weak_aug.crop
            )));
        }
        for &s in &self.zoom.scales {
            let side = crate::perturb::zoom_size(self.weak_aug.crop, s);
            if side < crate::perturb::MIN_DIM || side % df != 0 {
                return Err(Error::Config(format!(
                    "zoom scale {s} maps the {} crop to {side}, which must be at least {} and divisible by {df}",
                    self.weak_aug.crop,
                    crate::perturb::MIN_DIM
                )));
            }
        }
        Ok(())
    }

    /// Replace the seed from the `PSMT_SEED` environment variable when set.
    /// Returns the override so callers can log it.
    pub fn apply_env_seed(&mut self) -> Result<Option<u64>> {
        match std::env::var("PSMT_SEED") {
            Ok(v) => {
                let seed: u64 = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("PSMT_SEED must be an integer, got {v:?}")))?;
                self.seed = seed;
                Ok(Some(seed))
            }
            Err(_) => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn empty_toml_yields_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_key_is_named_in_the_error() {
        let err = toml::from_str::<RunConfig>("learning_rate = 0.1").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let err = toml::from_str::<RunConfig>("[tvat]\nepsilonn = 1.0").unwrap_err();
        assert!(err.to_string().contains("epsilonn"), "{err}");
    }

    #[test]
    fn partial_sections_keep_remaining_defaults() {
        let cfg: RunConfig = toml::from_str(
            "epochs = 3\nlr0 = 0.05\n[tvat]\nmode = \"uniform\"\nepsilon = 1.5\n[zoom]\nscales = [0.5]\n",
        )
        .unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.tvat.mode, FeaturePerturb::Uniform);
        assert_eq!(cfg.tvat.power_iters, TVatSpec::default().power_iters);
        assert_eq!(cfg.zoom.scales, vec![0.5]);
        assert_eq!(cfg.batch_labelled, 2);
    }

    #[test]
    fn loss_and_cadence_names_parse() {
        let cfg: RunConfig =
            toml::from_str("loss = \"mse\"\nema_cadence = \"epoch\"\n").unwrap();
        assert_eq!(cfg.loss, LossMode::Mse);
        assert_eq!(cfg.ema_cadence, EmaCadence::Epoch);
    }

    #[test]
    fn invalid_rates_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.lr0 = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.gamma = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.tau = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.batch_unlabelled = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.cam_loss = true;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.epochs = 12;
        cfg.tvat.mode = FeaturePerturb::VatStudent;
        cfg.data.root = PathBuf::from("data/train");
        cfg.data.split = PathBuf::from("data/train/splits/s.json");
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn env_seed_overrides_config() {
        // temp-env style guard: set, read, restore
        let mut cfg = RunConfig::default();
        std::env::set_var("PSMT_SEED", "4242");
        let got = cfg.apply_env_seed().unwrap();
        std::env::remove_var("PSMT_SEED");
        assert_eq!(got, Some(4242));
        assert_eq!(cfg.seed, 4242);

        std::env::set_var("PSMT_SEED", "not-a-number");
        let err = cfg.apply_env_seed();
        std::env::remove_var("PSMT_SEED");
        assert!(err.is_err());
    }
}
