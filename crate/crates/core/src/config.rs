//! Flat `key = value` configuration files with a typed schema.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::synth::SynthHandSpec;
use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::heatmap::Skeleton;
use crate::hourglass::HourglassConfig;
use crate::sample::PreprocessConfig;
use crate::train::{AugmentConfig, TrainConfig};
use crate::voxel::{CameraIntrinsics, CenterMode};

/// Ordered `key = value` lines; `#` starts a comment, repeated keys are kept.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvFile {
    entries: Vec<(String, String, usize)>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            entries.push((k.trim().to_string(), v.trim().to_string(), n + 1));
        }
        Ok(KvFile { entries })
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v, _)| (k.as_str(), v.as_str()))
    }

    fn lines(&self) -> impl Iterator<Item = (&str, &str, usize)> {
        self.entries.iter().map(|(k, v, n)| (k.as_str(), v.as_str(), *n))
    }
}

/// Pinhole intrinsics from a `fx`/`fy`/`cx`/`cy` file.
pub fn parse_intrinsics(text: &str) -> Result<CameraIntrinsics> {
    let kv = KvFile::parse(text)?;
    let mut v = [None; 4];
    for (k, val, n) in kv.lines() {
        let slot = match k {
            "fx" => 0,
            "fy" => 1,
            "cx" => 2,
            "cy" => 3,
            other => return Err(Error::config(format!("line {n}: unknown intrinsics key `{other}`"))),
        };
        v[slot] = Some(
            val.parse::<f64>()
                .map_err(|_| Error::config(format!("line {n}: `{k}` must be a number")))?,
        );
    }
    let get = |i: usize, name: &str| v[i].ok_or_else(|| Error::config(format!("intrinsics missing `{name}`")));
    CameraIntrinsics::new(get(0, "fx")?, get(1, "fy")?, get(2, "cx")?, get(3, "cy")?)
}

pub fn load_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    parse_intrinsics(&std::fs::read_to_string(path)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    /// f64
    Wide,
    /// f32
    #[default]
    Narrow,
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wide" => Ok(Precision::Wide),
            "narrow" => Ok(Precision::Narrow),
            _ => Err(Error::config(format!("precision must be `wide` or `narrow`, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::Wide => "wide",
            Precision::Narrow => "narrow",
        })
    }
}

/// Synthetic-data options exposed through configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub count: usize,
    pub seed: u64,
    pub angle_scale: f64,
    pub points_per_bone: usize,
    pub tube_radius_mm: f64,
    pub noise_sigma_mm: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            count: 200,
            seed: 0,
            angle_scale: 1.0,
            points_per_bone: 40,
            tube_radius_mm: 6.0,
            noise_sigma_mm: 1.0,
        }
    }
}

impl SynthOptions {
    /// The MSRA-layout generator with these options applied.
    pub fn spec(&self) -> SynthHandSpec {
        let mut s = SynthHandSpec::msra_hand(self.seed).with_angle_scale(self.angle_scale);
        s.points_per_bone = self.points_per_bone;
        s.tube_radius_mm = self.tube_radius_mm;
        s.noise_sigma_mm = self.noise_sigma_mm;
        s
    }
}

/// Everything a CLI run reads from its config file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub model: HourglassConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub crop: PreprocessConfig,
    pub decode: DecodeConfig,
    pub synth: SynthOptions,
    /// `msra` or a path to a skeleton file.
    pub skeleton: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: Precision::default(),
            model: HourglassConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            crop: PreprocessConfig::default(),
            decode: DecodeConfig::default(),
            synth: SynthOptions::default(),
            skeleton: "msra".into(),
        }
    }
}

/// `(key, type, description)` for every accepted key.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("seed", "u64", "seed for weights, shuffling and augmentation"),
    ("precision", "wide|narrow", "f64 or f32 parameters and activations"),
    ("skeleton", "string", "`msra` or a skeleton file"),
    ("model.input_res", "usize", "input voxel resolution (output is half)"),
    ("model.stacks", "usize", "number of hourglass stacks"),
    ("model.channels", "usize", "residual block width"),
    ("model.hg_depth", "usize", "pooling levels per hourglass"),
    ("model.batchnorm", "bool", "batch normalization in residual blocks"),
    ("model.bone_heads", "bool", "bone heads on all but the last stack"),
    ("train.lr_init", "f64", "initial learning rate"),
    ("train.lr_decay_factor", "f64", "multiplier applied every decay period"),
    ("train.lr_decay_every_epochs", "usize", "decay period in epochs"),
    ("train.batch_size", "usize", "samples per step"),
    ("train.epochs", "usize", "passes over the training set"),
    ("train.max_steps", "u64|none", "optional cap on optimizer steps"),
    ("train.rmsprop_alpha", "f64", "mean-square decay"),
    ("train.rmsprop_eps", "f64", "denominator offset"),
    ("train.bone_loss", "bool", "add the bone loss"),
    ("train.workers", "usize", "preprocessing threads"),
    ("train.queue_depth", "usize", "batches prepared ahead"),
    ("train.deterministic", "bool", "force a single preprocessing worker"),
    ("augment.enabled", "bool", "random rotation and aspect scaling"),
    ("augment.rotation_deg", "f64", "rotation drawn from [-r, r] degrees"),
    ("augment.aspect_min", "f64", "lower aspect factor"),
    ("augment.aspect_max", "f64", "upper aspect factor"),
    ("crop.min_side_mm", "f64", "minimum cube side"),
    ("crop.center", "centroid|bbox", "cube centre rule"),
    ("crop.margin", "f64", "extent multiplier before the minimum side"),
    ("decode.k", "usize", "top responding voxels averaged per joint"),
    ("synth.count", "usize", "synthetic samples"),
    ("synth.seed", "u64", "synthetic generator seed"),
    ("synth.angle_scale", "f64", "multiplier on all joint-angle ranges"),
    ("synth.points_per_bone", "usize", "points scattered per bone"),
    ("synth.tube_radius_mm", "f64", "finger tube radius"),
    ("synth.noise_sigma_mm", "f64", "point noise scale"),
];

fn parse_as<V: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::config(format!("line {line}: `{key}` expects {}, got `{value}`", type_of(key))))
}

fn type_of(key: &str) -> &'static str {
    SCHEMA.iter().find(|(k, _, _)| *k == key).map(|(_, t, _)| *t).unwrap_or("?")
}

impl RunConfig {
    /// Applies one key; `line` is only used in messages.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = parse_as(key, v, line)?,
            "precision" => self.precision = v.parse()?,
            "skeleton" => self.skeleton = v.to_string(),
            "model.input_res" => {
                self.model.input_res = parse_as(key, v, line)?;
                self.model.output_res = self.model.input_res / 2;
            }
            "model.stacks" => self.model.stacks = parse_as(key, v, line)?,
            "model.channels" => self.model.channels = parse_as(key, v, line)?,
            "model.hg_depth" => self.model.hg_depth = parse_as(key, v, line)?,
            "model.batchnorm" => self.model.batchnorm = parse_as(key, v, line)?,
            "model.bone_heads" => self.model.bone_heads_enabled = parse_as(key, v, line)?,
            "train.lr_init" => self.train.lr_init = parse_as(key, v, line)?,
            "train.lr_decay_factor" => self.train.lr_decay_factor = parse_as(key, v, line)?,
            "train.lr_decay_every_epochs" => self.train.lr_decay_every_epochs = parse_as(key, v, line)?,
            "train.batch_size" => self.train.batch_size = parse_as(key, v, line)?,
            "train.epochs" => self.train.epochs = parse_as(key, v, line)?,
            "train.max_steps" => {
                self.train.max_steps = if v == "none" { None } else { Some(parse_as(key, v, line)?) }
            }
            "train.rmsprop_alpha" => self.train.rmsprop_alpha = parse_as(key, v, line)?,
            "train.rmsprop_eps" => self.train.rmsprop_eps = parse_as(key, v, line)?,
            "train.bone_loss" => self.train.bone_loss_enabled = parse_as(key, v, line)?,
            "train.workers" => self.train.workers = parse_as(key, v, line)?,
            "train.queue_depth" => self.train.queue_depth = parse_as(key, v, line)?,
            "train.deterministic" => self.train.deterministic = parse_as(key, v, line)?,
            "augment.enabled" => self.augment.enabled = parse_as(key, v, line)?,
            "augment.rotation_deg" => self.augment.rotation_range_deg = parse_as(key, v, line)?,
            "augment.aspect_min" => self.augment.aspect_range.0 = parse_as(key, v, line)?,
            "augment.aspect_max" => self.augment.aspect_range.1 = parse_as(key, v, line)?,
            "crop.min_side_mm" => self.crop.min_side_mm = parse_as(key, v, line)?,
            "crop.center" => {
                self.crop.center = match v {
                    "centroid" => CenterMode::Centroid,
                    "bbox" => CenterMode::BoundingBox,
                    _ => return Err(Error::config(format!("line {line}: `crop.center` expects centroid|bbox"))),
                }
            }
            "crop.margin" => self.crop.margin = parse_as(key, v, line)?,
            "decode.k" => self.decode.k = parse_as(key, v, line)?,
            "synth.count" => self.synth.count = parse_as(key, v, line)?,
            "synth.seed" => self.synth.seed = parse_as(key, v, line)?,
            "synth.angle_scale" => self.synth.angle_scale = parse_as(key, v, line)?,
            "synth.points_per_bone" => self.synth.points_per_bone = parse_as(key, v, line)?,
            "synth.tube_radius_mm" => self.synth.tube_radius_mm = parse_as(key, v, line)?,
            "synth.noise_sigma_mm" => self.synth.noise_sigma_mm = parse_as(key, v, line)?,
            other => return Err(Error::config(format!("line {line}: unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Defaults overridden by `text`, then validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (k, v, n) in KvFile::parse(text)?.lines() {
            c.set(k, v, n)?;
        }
        c.sync();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The built-in MSRA layout or a skeleton file.
    pub fn load_skeleton(&self) -> Result<Skeleton> {
        match self.skeleton.as_str() {
            "msra" => Ok(Skeleton::msra()),
            path => Skeleton::load(Path::new(path)),
        }
    }

    /// Propagates shared values (seed, resolutions) into the sub-configs.
    pub fn sync(&mut self) {
        self.train.seed = self.seed;
        self.crop.input_res = self.model.input_res;
        self.crop.output_res = self.model.output_res;
        if !self.model.bone_heads_enabled {
            self.train.bone_loss_enabled = false;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.input_res % 2 != 0 {
            return Err(Error::config(format!("model.input_res {} must be even", self.model.input_res)));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        if self.decode.k == 0 || self.decode.k > self.model.output_res.pow(3) {
            return Err(Error::config(format!("decode.k {} is outside 1..=R³", self.decode.k)));
        }
        if !(self.crop.min_side_mm > 0.0 && self.crop.margin > 0.0) {
            return Err(Error::config("crop.min_side_mm and crop.margin must be positive"));
        }
        Ok(())
    }

    /// Every schema key with its current value; `parse(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (key, ty, doc) in SCHEMA {
            let _ = writeln!(s, "# {doc} ({ty})\n{key} = {}", self.get(key));
        }
        s
    }

    fn get(&self, key: &str) -> String {
        let b = |v: bool| v.to_string();
        match key {
            "seed" => self.seed.to_string(),
            "precision" => self.precision.to_string(),
            "skeleton" => self.skeleton.clone(),
            "model.input_res" => self.model.input_res.to_string(),
            "model.stacks" => self.model.stacks.to_string(),
            "model.channels" => self.model.channels.to_string(),
            "model.hg_depth" => self.model.hg_depth.to_string(),
            "model.batchnorm" => b(self.model.batchnorm),
            "model.bone_heads" => b(self.model.bone_heads_enabled),
            "train.lr_init" => format!("{:e}", self.train.lr_init),
            "train.lr_decay_factor" => self.train.lr_decay_factor.to_string(),
            "train.lr_decay_every_epochs" => self.train.lr_decay_every_epochs.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.max_steps" => self.train.max_steps.map_or("none".into(), |m| m.to_string()),
            "train.rmsprop_alpha" => self.train.rmsprop_alpha.to_string(),
            "train.rmsprop_eps" => format!("{:e}", self.train.rmsprop_eps),
            "train.bone_loss" => b(self.train.bone_loss_enabled),
            "train.workers" => self.train.workers.to_string(),
            "train.queue_depth" => self.train.queue_depth.to_string(),
            "train.deterministic" => b(self.train.deterministic),
            "augment.enabled" => b(self.augment.enabled),
            "augment.rotation_deg" => self.augment.rotation_range_deg.to_string(),
            "augment.aspect_min" => self.augment.aspect_range.0.to_string(),
            "augment.aspect_max" => self.augment.aspect_range.1.to_string(),
            "crop.min_side_mm" => self.crop.min_side_mm.to_string(),
            "crop.center" => match self.crop.center {
                CenterMode::Centroid => "centroid".into(),
                CenterMode::BoundingBox => "bbox".into(),
            },
            "crop.margin" => self.crop.margin.to_string(),
            "decode.k" => self.decode.k.to_string(),
            "synth.count" => self.synth.count.to_string(),
            "synth.seed" => self.synth.seed.to_string(),
            "synth.angle_scale" => self.synth.angle_scale.to_string(),
            "synth.points_per_bone" => self.synth.points_per_bone.to_string(),
            "synth.tube_radius_mm" => self.synth.tube_radius_mm.to_string(),
            "synth.noise_sigma_mm" => self.synth.noise_sigma_mm.to_string(),
            _ => unreachable!("schema key without getter: {key}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let mut c2 = RunConfig::parse(&c.to_text()).unwrap();
        c2.sync();
        let mut c1 = c.clone();
        c1.sync();
        assert_eq!(c1, c2);
    }

    #[test]
    fn overrides_and_errors() {
        let c = RunConfig::parse("model.input_res = 16\nmodel.hg_depth = 2\ntrain.lr_init = 1e-3 # faster\n").unwrap();
        assert_eq!(c.model.output_res, 8);
        assert_eq!(c.crop.input_res, 16);
        assert_eq!(c.train.lr_init, 1e-3);
        assert!(matches!(RunConfig::parse("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("train.epochs = many"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("train.lr_init = -1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("no equals sign"), Err(Error::Config(_))));
    }

    #[test]
    fn every_schema_key_is_settable() {
        let text = RunConfig::default().to_text();
        for (k, _, _) in SCHEMA {
            assert!(text.contains(&format!("\n{k} = ")), "{k}");
        }
    }

    #[test]
    fn intrinsics_file() {
        let k = parse_intrinsics("fx = 241.42\nfy = 241.42\ncx = 160\ncy = 120\n").unwrap();
        assert_eq!((k.fx, k.cx), (241.42, 160.0));
        assert!(parse_intrinsics("fx = 1\n").is_err());
        assert!(parse_intrinsics("fx = 0\nfy = 1\ncx = 0\ncy = 0").is_err());
    }
}
