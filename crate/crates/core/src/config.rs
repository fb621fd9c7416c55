//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::detect::LossWeights;
use crate::error::{invalid, Result};
use crate::model::ModelConfig;
use crate::sparsegraph::{DEFAULT_TAU, SPATIAL_K, TEMPORAL_K};
use crate::synth::SynthConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(invalid(
                "precision",
                format!("expected f32 or f64, got {s:?}"),
            )),
        }
    }
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: PathBuf,
    pub out: PathBuf,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub warmup_fraction: f64,
    /// Learning rate at the last step as a fraction of `learning_rate`;
    /// 1 keeps it constant after warm-up.
    pub final_lr_fraction: f64,
    pub batch_size: usize,
    /// Apply a random symmetry of the square (mirrors, transposition) to
    /// each training pair.
    pub augment: bool,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub tau: f64,
    pub k_spatial: usize,
    pub k_temporal: usize,
    pub image_size: usize,
    pub thermal_size: usize,
    pub precision: Precision,
    pub base_channels: usize,
    pub head_width: usize,
    pub num_classes: usize,
    pub class_prior: f64,
    pub ciou_weight: f64,
    pub dfl_weight: f64,
    pub cls_weight: f64,
    pub apl_weight: f64,
    /// Use at most this many training samples (0 = all).
    pub train_limit: usize,
    /// Validate on at most this many samples (0 = all).
    pub val_limit: usize,
    /// Stop once this many seconds of training have elapsed (0 = no limit).
    /// Makes the run time-dependent, so it is off by default.
    pub time_limit_secs: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: PathBuf::from("data"),
            out: PathBuf::from("runs/toy"),
            epochs: 10,
            learning_rate: 0.01,
            momentum: 0.938,
            warmup_fraction: 0.05,
            final_lr_fraction: 1.0,
            batch_size: 1,
            augment: false,
            grad_clip: 10.0,
            tau: DEFAULT_TAU,
            k_spatial: SPATIAL_K,
            k_temporal: TEMPORAL_K,
            image_size: 64,
            thermal_size: 32,
            precision: Precision::F32,
            base_channels: 16,
            head_width: 32,
            num_classes: 3,
            class_prior: -4.0,
            ciou_weight: 1.0,
            dfl_weight: 1.0,
            cls_weight: 1.0,
            apl_weight: 1.0,
            train_limit: 0,
            val_limit: 0,
            time_limit_secs: 0.0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| invalid("config", format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// lines starting with `#` are ignored; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                invalid("config", format!("line {}: expected key = value", n + 1))
            })?;
            c.set(key.trim(), value.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data" => self.data = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            "epochs" => self.epochs = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "warmup_fraction" => self.warmup_fraction = parse(key, v)?,
            "final_lr_fraction" => self.final_lr_fraction = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "augment" => self.augment = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "k_spatial" => self.k_spatial = parse(key, v)?,
            "k_temporal" => self.k_temporal = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "thermal_size" => self.thermal_size = parse(key, v)?,
            "precision" => self.precision = parse(key, v)?,
            "base_channels" => self.base_channels = parse(key, v)?,
            "head_width" => self.head_width = parse(key, v)?,
            "num_classes" => self.num_classes = parse(key, v)?,
            "class_prior" => self.class_prior = parse(key, v)?,
            "ciou_weight" => self.ciou_weight = parse(key, v)?,
            "dfl_weight" => self.dfl_weight = parse(key, v)?,
            "cls_weight" => self.cls_weight = parse(key, v)?,
            "apl_weight" => self.apl_weight = parse(key, v)?,
            "train_limit" => self.train_limit = parse(key, v)?,
            "val_limit" => self.val_limit = parse(key, v)?,
            "time_limit_secs" => self.time_limit_secs = parse(key, v)?,
            _ => return Err(invalid("config", format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0
            || self.batch_size == 0
            || self.base_channels < 2
            || self.head_width == 0
            || self.num_classes == 0
        {
            return Err(invalid(
                "config",
                "epochs, batch_size, head_width, num_classes must be positive; base_channels ≥ 2",
            ));
        }
        if self.image_size % 32 != 0
            || self.thermal_size % 32 != 0
            || self.thermal_size > self.image_size
            || self.image_size == 0
        {
            return Err(invalid(
                "config",
                "image_size and thermal_size must be positive multiples of 32 with thermal ≤ image",
            ));
        }
        if !(0.0..=1.0).contains(&self.tau)
            || !(0.0..1.0).contains(&self.momentum)
            || !(0.0..=1.0).contains(&self.warmup_fraction)
            || !(0.0..=1.0).contains(&self.final_lr_fraction)
        {
            return Err(invalid(
                "config",
                "tau, warmup_fraction and final_lr_fraction must lie in [0,1], momentum in [0,1)",
            ));
        }
        if !(self.learning_rate > 0.0) || self.k_spatial == 0 || self.k_temporal == 0 {
            return Err(invalid(
                "config",
                "learning_rate, k_spatial, k_temporal must be positive",
            ));
        }
        Ok(())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("data", self.data.display().to_string());
        put("out", self.out.display().to_string());
        put("epochs", self.epochs.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("momentum", self.momentum.to_string());
        put("warmup_fraction", self.warmup_fraction.to_string());
        put("final_lr_fraction", self.final_lr_fraction.to_string());
        put("batch_size", self.batch_size.to_string());
        put("augment", self.augment.to_string());
        put("grad_clip", self.grad_clip.to_string());
        put("tau", self.tau.to_string());
        put("k_spatial", self.k_spatial.to_string());
        put("k_temporal", self.k_temporal.to_string());
        put("image_size", self.image_size.to_string());
        put("thermal_size", self.thermal_size.to_string());
        put("precision", self.precision.as_str().to_string());
        put("base_channels", self.base_channels.to_string());
        put("head_width", self.head_width.to_string());
        put("num_classes", self.num_classes.to_string());
        put("class_prior", self.class_prior.to_string());
        put("ciou_weight", self.ciou_weight.to_string());
        put("dfl_weight", self.dfl_weight.to_string());
        put("cls_weight", self.cls_weight.to_string());
        put("apl_weight", self.apl_weight.to_string());
        put("train_limit", self.train_limit.to_string());
        put("val_limit", self.val_limit.to_string());
        put("time_limit_secs", self.time_limit_secs.to_string());
        s
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            base_channels: self.base_channels,
            head_width: self.head_width,
            num_classes: self.num_classes,
            tau: self.tau,
            k_spatial: self.k_spatial,
            k_temporal: self.k_temporal,
            class_prior: self.class_prior,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            ciou: self.ciou_weight,
            dfl: self.dfl_weight,
            cls: self.cls_weight,
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            canvas: self.image_size,
            thermal: self.thermal_size,
            ..SynthConfig::default()
        }
    }
}
