//! Flat `key = value` run configuration.
//!
//! Keys are dotted (`decoder.depth = 1`); `#` starts a comment. Every key has
//! a default, unknown keys are rejected, and [`RunConfig::echo`] writes a file
//! that parses back to the same value.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::dataio::{gen_synthetic, load_cifar, DatasetDescriptor, ImageRecord, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::{mix_seed, FinetuneSchedule, TrainSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Cifar,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// CIFAR binary file or directory.
    pub path: Option<PathBuf>,
    pub classes: usize,
    /// Synthetic training images per class.
    pub per_class: usize,
    /// Synthetic test images per class.
    pub test_per_class: usize,
    pub seed: u64,
    /// Keep at most this many records per split (0 keeps all).
    pub limit: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pretrain: TrainSchedule,
    pub finetune: FinetuneSchedule,
    pub data: DataConfig,
    pub checkpoint_every: usize,
    pub sweep_depths: Vec<usize>,
    pub sweep_dims: Vec<usize>,
    pub recon_count: usize,
    pub recon_png: bool,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::vit_base(),
            pretrain: TrainSchedule::default(),
            finetune: FinetuneSchedule::default(),
            data: DataConfig {
                source: DataSource::Synthetic,
                path: None,
                classes: 4,
                per_class: 64,
                test_per_class: 16,
                seed: 0,
                limit: 0,
            },
            checkpoint_every: 10,
            sweep_depths: vec![1, 2, 4],
            sweep_dims: vec![64, 128, 256],
            recon_count: 4,
            recon_png: false,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Keys that do not change what pre-training computes.
const UNHASHED: &[&str] = &["output.dir", "train.checkpoint_every", "finetune.", "sweep.", "recon."];

fn parse<T: FromStr>(key: &str, value: &str, expected: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("`{key}` expects {expected}, got `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("`{key}` expects true or false, got `{value}`"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| parse(key, v.trim(), "a comma-separated list of positive integers"))
        .collect()
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every key with its current value, in echo order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let p = &self.pretrain;
        let f = &self.finetune;
        let d = &self.data;
        vec![
            ("seed", p.seed.to_string()),
            ("model.image_size", m.image_size.to_string()),
            ("model.channels", m.channels.to_string()),
            ("model.literal_strong_query", m.literal_strong_query.to_string()),
            ("encoder.depth", m.encoder.depth.to_string()),
            ("encoder.dim", m.encoder.dim.to_string()),
            ("encoder.heads", m.encoder.heads.to_string()),
            ("encoder.mlp_ratio", m.encoder.mlp_ratio.to_string()),
            ("encoder.patch_size", m.encoder.patch_size.to_string()),
            ("encoder.drop_path", m.encoder.drop_path.to_string()),
            ("decoder.depth", m.decoder.depth.to_string()),
            ("decoder.dim", m.decoder.dim.to_string()),
            ("decoder.heads", m.decoder.heads.to_string()),
            ("feature.depth", m.feature_depth.to_string()),
            ("feature.heads", m.feature_heads.to_string()),
            ("loc.vocab", m.loc_vocab.map_or("auto".into(), |v| v.to_string())),
            ("loc.tau", p.tau_loc.to_string()),
            ("mask_ratio", p.mask_ratio.to_string()),
            ("loss.lambda_l", p.weights.lambda_l.to_string()),
            ("loss.lambda_c", p.weights.lambda_c.to_string()),
            ("loss.tau", p.tau.to_string()),
            ("ema.momentum", p.momentum_a.to_string()),
            ("train.base_lr", p.base_lr.to_string()),
            ("train.warmup_epochs", p.warmup_epochs.to_string()),
            ("train.epochs", p.total_epochs.to_string()),
            ("train.batch_size", p.batch_size.to_string()),
            ("train.weight_decay", p.weight_decay.to_string()),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
            ("finetune.base_lr", f.base_lr.to_string()),
            ("finetune.warmup_epochs", f.warmup_epochs.to_string()),
            ("finetune.epochs", f.total_epochs.to_string()),
            ("finetune.batch_size", f.batch_size.to_string()),
            ("finetune.weight_decay", f.weight_decay.to_string()),
            (
                "data.source",
                match d.source {
                    DataSource::Synthetic => "synthetic".into(),
                    DataSource::Cifar => "cifar".into(),
                },
            ),
            ("data.path", d.path.as_ref().map_or(String::new(), |p| p.display().to_string())),
            ("data.classes", d.classes.to_string()),
            ("data.per_class", d.per_class.to_string()),
            ("data.test_per_class", d.test_per_class.to_string()),
            ("data.seed", d.seed.to_string()),
            ("data.limit", d.limit.to_string()),
            ("sweep.depths", join(&self.sweep_depths)),
            ("sweep.dims", join(&self.sweep_dims)),
            ("recon.count", self.recon_count.to_string()),
            ("recon.png", self.recon_png.to_string()),
            ("output.dir", self.output_dir.display().to_string()),
        ]
    }

    /// Assigns one key; the value is checked for type here and for range by
    /// [`RunConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        const INT: &str = "a non-negative integer";
        const FLOAT: &str = "a number";
        let m = &mut self.model;
        let p = &mut self.pretrain;
        let f = &mut self.finetune;
        let d = &mut self.data;
        match key {
            "seed" => {
                p.seed = parse(key, v, INT)?;
                f.seed = p.seed;
            }
            "model.image_size" => m.image_size = parse(key, v, INT)?,
            "model.channels" => m.channels = parse(key, v, INT)?,
            "model.literal_strong_query" => m.literal_strong_query = parse_bool(key, v)?,
            "encoder.depth" => m.encoder.depth = parse(key, v, INT)?,
            "encoder.dim" => m.encoder.dim = parse(key, v, INT)?,
            "encoder.heads" => m.encoder.heads = parse(key, v, INT)?,
            "encoder.mlp_ratio" => m.encoder.mlp_ratio = parse(key, v, INT)?,
            "encoder.patch_size" => m.encoder.patch_size = parse(key, v, INT)?,
            "encoder.drop_path" => m.encoder.drop_path = parse(key, v, FLOAT)?,
            "decoder.depth" => m.decoder.depth = parse(key, v, INT)?,
            "decoder.dim" => m.decoder.dim = parse(key, v, INT)?,
            "decoder.heads" => m.decoder.heads = parse(key, v, INT)?,
            "feature.depth" => m.feature_depth = parse(key, v, INT)?,
            "feature.heads" => m.feature_heads = parse(key, v, INT)?,
            "loc.vocab" => {
                m.loc_vocab = if v == "auto" {
                    None
                } else {
                    Some(parse(key, v, "`auto` or a positive integer")?)
                }
            }
            "loc.tau" => p.tau_loc = parse(key, v, FLOAT)?,
            "mask_ratio" => p.mask_ratio = parse(key, v, FLOAT)?,
            "loss.lambda_l" => p.weights.lambda_l = parse(key, v, FLOAT)?,
            "loss.lambda_c" => p.weights.lambda_c = parse(key, v, FLOAT)?,
            "loss.tau" => p.tau = parse(key, v, FLOAT)?,
            "ema.momentum" => p.momentum_a = parse(key, v, FLOAT)?,
            "train.base_lr" => p.base_lr = parse(key, v, FLOAT)?,
            "train.warmup_epochs" => p.warmup_epochs = parse(key, v, INT)?,
            "train.epochs" => p.total_epochs = parse(key, v, INT)?,
            "train.batch_size" => p.batch_size = parse(key, v, INT)?,
            "train.weight_decay" => p.weight_decay = parse(key, v, FLOAT)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, v, INT)?,
            "finetune.base_lr" => f.base_lr = parse(key, v, FLOAT)?,
            "finetune.warmup_epochs" => f.warmup_epochs = parse(key, v, INT)?,
            "finetune.epochs" => f.total_epochs = parse(key, v, INT)?,
            "finetune.batch_size" => f.batch_size = parse(key, v, INT)?,
            "finetune.weight_decay" => f.weight_decay = parse(key, v, FLOAT)?,
            "data.source" => {
                d.source = match v {
                    "synthetic" => DataSource::Synthetic,
                    "cifar" => DataSource::Cifar,
                    _ => {
                        return Err(Error::config(format!(
                            "`data.source` expects `synthetic` or `cifar`, got `{v}`"
                        )))
                    }
                }
            }
            "data.path" => d.path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.classes" => d.classes = parse(key, v, INT)?,
            "data.per_class" => d.per_class = parse(key, v, INT)?,
            "data.test_per_class" => d.test_per_class = parse(key, v, INT)?,
            "data.seed" => d.seed = parse(key, v, INT)?,
            "data.limit" => d.limit = parse(key, v, INT)?,
            "sweep.depths" => self.sweep_depths = parse_list(key, v)?,
            "sweep.dims" => self.sweep_dims = parse_list(key, v)?,
            "recon.count" => self.recon_count = parse(key, v, INT)?,
            "recon.png" => self.recon_png = parse_bool(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            _ => {
                let known: Vec<&str> = self.entries().into_iter().map(|(k, _)| k).collect();
                return Err(Error::config(format!(
                    "unknown key `{key}`; known keys: {}",
                    known.join(", ")
                )));
            }
        }
        Ok(())
    }

    /// Parses configuration text, then applies `overrides` (`key=value`).
    pub fn from_text(text: &str, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!("line {}: `{key}` is set twice", i + 1)));
            }
            cfg.set(key, value)?;
        }
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{o}` is not of the form key=value")))?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn echo(&self) -> String {
        let mut out = String::from("# resolved configuration\n");
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// SHA-256 over the entries that shape pre-training.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if UNHASHED.iter().any(|u| k.starts_with(u)) {
                continue;
            }
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().into()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        let d = &self.data;
        if d.classes < 2 {
            return Err(Error::config("`data.classes` must be at least 2"));
        }
        if let Some(v) = self.model.loc_vocab {
            if v < self.model.n_tokens() {
                return Err(Error::config(format!(
                    "`loc.vocab` {v} is smaller than the {} patch positions",
                    self.model.n_tokens()
                )));
            }
        }
        match d.source {
            DataSource::Synthetic => {
                if d.per_class == 0 || d.test_per_class == 0 {
                    return Err(Error::config("`data.per_class` and `data.test_per_class` must be positive"));
                }
                if self.model.channels != 3 {
                    return Err(Error::config("synthetic data is RGB; `model.channels` must be 3"));
                }
            }
            DataSource::Cifar => {
                if d.path.is_none() {
                    return Err(Error::config("`data.source = cifar` needs `data.path`"));
                }
                if self.model.image_size != 32 || self.model.channels != 3 {
                    return Err(Error::config("CIFAR records are 32x32 RGB; set `model.image_size = 32`"));
                }
            }
        }
        if self.sweep_depths.is_empty() || self.sweep_dims.is_empty() {
            return Err(Error::config("`sweep.depths` and `sweep.dims` must be non-empty"));
        }
        Ok(())
    }

    /// Train and test records for the configured source.
    pub fn load_data(&self) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>)> {
        let d = &self.data;
        let (mut train, mut test) = match d.source {
            DataSource::Synthetic => {
                let spec = |per_class, seed| SyntheticSpec {
                    classes: d.classes,
                    per_class,
                    resolution: self.model.image_size,
                    seed,
                };
                let p = self.model.encoder.patch_size;
                (
                    gen_synthetic(&spec(d.per_class, d.seed), p)?,
                    gen_synthetic(&spec(d.test_per_class, mix_seed(d.seed, 1, 1)), p)?,
                )
            }
            DataSource::Cifar => {
                let path = d.path.as_deref().unwrap_or(Path::new(""));
                (
                    load_cifar(path, Split::Train, d.classes)?,
                    load_cifar(path, Split::Test, d.classes)?,
                )
            }
        };
        if d.limit > 0 {
            train.truncate(d.limit);
            test.truncate(d.limit);
        }
        let desc = DatasetDescriptor {
            height: self.model.image_size,
            width: self.model.image_size,
            channels: self.model.channels,
            classes: d.classes,
        };
        desc.validate(&train)?;
        desc.validate(&test)?;
        Ok((train, test))
    }
}

/// Reads `path` (if given) and applies overrides.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    RunConfig::from_text(&text, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_text("", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!((c.model.decoder.depth, c.model.decoder.dim), (1, 128));
        assert_eq!(c.pretrain.mask_ratio, 0.75);
        assert_eq!((c.pretrain.weights.lambda_l, c.pretrain.weights.lambda_c), (1.0, 0.1));
        assert_eq!(c.pretrain.weight_decay, 0.05);
        assert_eq!(c.pretrain.base_lr, 1e-3);
        assert_eq!((c.pretrain.total_epochs, c.pretrain.warmup_epochs), (300, 40));
        assert_eq!((c.model.encoder.depth, c.model.encoder.dim, c.model.image_size), (12, 768, 224));
    }

    #[test]
    fn overrides_and_ranges() {
        let c = RunConfig::from_text("", &["mask_ratio=0.9".into()]).unwrap();
        let mut expect = RunConfig::default();
        expect.pretrain.mask_ratio = 0.9;
        assert_eq!(c, expect);

        let err = RunConfig::from_text("", &["mask_ratio=1.5".into()]).unwrap_err().to_string();
        assert!(err.contains("mask_ratio") && err.contains("(0, 1)"), "{err}");
        let err = RunConfig::from_text("decoder.width = 3", &[]).unwrap_err().to_string();
        assert!(err.contains("unknown key `decoder.width`"), "{err}");
        let err = RunConfig::from_text("decoder.depth = one", &[]).unwrap_err().to_string();
        assert!(err.contains("`decoder.depth` expects a non-negative integer"), "{err}");
        assert!(RunConfig::from_text("seed", &[]).is_err());
        assert!(RunConfig::from_text("seed = 1\nseed = 2", &[]).is_err());
        // the file sets, the override wins
        let c = RunConfig::from_text("seed = 1 # first", &["seed=2".into()]).unwrap();
        assert_eq!((c.pretrain.seed, c.finetune.seed), (2, 2));
    }

    #[test]
    fn echo_roundtrips() {
        let mut c = RunConfig::default();
        c.model = ModelConfig::toy();
        c.pretrain.base_lr = 0.012345678901234567;
        c.pretrain.tau = 1e-8;
        c.model.loc_vocab = Some(70);
        c.data.path = Some("/tmp/cifar dir".into());
        c.sweep_dims = vec![8, 16];
        c.recon_png = true;
        let back = RunConfig::from_text(&c.echo(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn hash_ignores_output_only_keys() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        b.recon_count = 9;
        b.finetune.total_epochs = 3;
        assert_eq!(a.hash(), b.hash());
        b.pretrain.mask_ratio = 0.6;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn synthetic_data_follows_config() {
        let mut c = RunConfig::default();
        c.model = ModelConfig::toy();
        c.data.per_class = 3;
        c.data.test_per_class = 2;
        let (train, test) = c.load_data().unwrap();
        assert_eq!((train.len(), test.len()), (12, 8));
        assert_ne!(train[0].pixels, test[0].pixels);
        c.data.source = DataSource::Cifar;
        assert!(c.validate().is_err());
    }
}
