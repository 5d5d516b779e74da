//! Flat `key=value` run configuration.
//!
//! Precedence, lowest first: built-in defaults, a checkpoint's embedded
//! configuration (when one is loaded), the `--config` file, then flags.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use o2na_core::decode::ControlSpec;
use o2na_core::model::{LossConfig, LossWeights, ModelConfig, ObjectLossConvention};
use o2na_core::train::TrainConfig;
use o2na_core::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub hidden: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub layers: usize,
    pub max_len: usize,
    pub dropout: f64,

    pub lambda_length: f64,
    pub lambda_object: f64,
    pub lambda_object_gen: f64,
    pub lambda_caption: f64,
    pub lambda_refine: f64,
    pub object_loss: ObjectLossConvention,
    pub refine_ratio: f64,

    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub train_ar: bool,
    pub min_count: usize,

    pub videos: usize,
    pub holdout: usize,
    pub captions_per_video: usize,
    pub frames: usize,
    pub feature_dim: usize,
    pub noise: f64,
    pub data_seed: u64,

    pub gamma: f64,
    pub iterations: usize,
    /// 0 means "use the predicted length".
    pub length: usize,
    pub lock_objects: bool,
    pub npd: usize,
    pub dedup: bool,

    pub data_dir: String,
    pub run_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            hidden: 64,
            heads: 4,
            ff_dim: 256,
            layers: 1,
            max_len: 30,
            dropout: 0.1,
            lambda_length: 1.0,
            lambda_object: 1.0,
            lambda_object_gen: 1.0,
            lambda_caption: 1.0,
            lambda_refine: 1.0,
            object_loss: ObjectLossConvention::Signed,
            refine_ratio: 0.5,
            lr: 5e-4,
            epochs: 50,
            batch_size: 64,
            seed: 1,
            train_ar: false,
            min_count: 3,
            videos: 2000,
            holdout: 200,
            captions_per_video: 3,
            frames: 8,
            feature_dim: 64,
            noise: 0.1,
            data_seed: 7,
            gamma: 0.8,
            iterations: 1,
            length: 0,
            lock_objects: false,
            npd: 1,
            dedup: true,
            data_dir: "data".into(),
            run_dir: "run".into(),
        }
    }
}

/// Keys fixed by a trained checkpoint; later layers may not change them.
pub const MODEL_KEYS: [&str; 8] = [
    "hidden",
    "heads",
    "ff_dim",
    "layers",
    "max_len",
    "frames",
    "feature_dim",
    "min_count",
];

fn parse<T: FromStr>(key: &str, value: &str, kind: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}={value}: expected {kind}")))
}

fn check(ok: bool, key: &str, value: impl Display, constraint: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{key}={value} violates {constraint}"
        )))
    }
}

impl RunConfig {
    /// Every key with its current value, in canonical order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let conv = match self.object_loss {
            ObjectLossConvention::Signed => "signed",
            ObjectLossConvention::Binary => "binary",
        };
        vec![
            ("hidden", self.hidden.to_string()),
            ("heads", self.heads.to_string()),
            ("ff_dim", self.ff_dim.to_string()),
            ("layers", self.layers.to_string()),
            ("max_len", self.max_len.to_string()),
            ("dropout", format!("{:?}", self.dropout)),
            ("lambda_length", format!("{:?}", self.lambda_length)),
            ("lambda_object", format!("{:?}", self.lambda_object)),
            ("lambda_object_gen", format!("{:?}", self.lambda_object_gen)),
            ("lambda_caption", format!("{:?}", self.lambda_caption)),
            ("lambda_refine", format!("{:?}", self.lambda_refine)),
            ("object_loss", conv.to_string()),
            ("refine_ratio", format!("{:?}", self.refine_ratio)),
            ("lr", format!("{:?}", self.lr)),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("train_ar", self.train_ar.to_string()),
            ("min_count", self.min_count.to_string()),
            ("videos", self.videos.to_string()),
            ("holdout", self.holdout.to_string()),
            ("captions_per_video", self.captions_per_video.to_string()),
            ("frames", self.frames.to_string()),
            ("feature_dim", self.feature_dim.to_string()),
            ("noise", format!("{:?}", self.noise)),
            ("data_seed", self.data_seed.to_string()),
            ("gamma", format!("{:?}", self.gamma)),
            ("iterations", self.iterations.to_string()),
            ("length", self.length.to_string()),
            ("lock_objects", self.lock_objects.to_string()),
            ("npd", self.npd.to_string()),
            ("dedup", self.dedup.to_string()),
            ("data_dir", self.data_dir.clone()),
            ("run_dir", self.run_dir.clone()),
        ]
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.pairs()
            .into_iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
    }

    /// Sets one key from its text form. Ranges are checked by [`Self::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        const INT: &str = "a non-negative integer";
        const NUM: &str = "a number";
        const BOOL: &str = "true or false";
        match key {
            "hidden" => self.hidden = parse(key, value, INT)?,
            "heads" => self.heads = parse(key, value, INT)?,
            "ff_dim" => self.ff_dim = parse(key, value, INT)?,
            "layers" => self.layers = parse(key, value, INT)?,
            "max_len" => self.max_len = parse(key, value, INT)?,
            "dropout" => self.dropout = parse(key, value, NUM)?,
            "lambda_length" => self.lambda_length = parse(key, value, NUM)?,
            "lambda_object" => self.lambda_object = parse(key, value, NUM)?,
            "lambda_object_gen" => self.lambda_object_gen = parse(key, value, NUM)?,
            "lambda_caption" => self.lambda_caption = parse(key, value, NUM)?,
            "lambda_refine" => self.lambda_refine = parse(key, value, NUM)?,
            "object_loss" => {
                self.object_loss = match value.trim() {
                    "signed" => ObjectLossConvention::Signed,
                    "binary" => ObjectLossConvention::Binary,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}={value}: expected signed or binary"
                        )))
                    }
                }
            }
            "refine_ratio" => self.refine_ratio = parse(key, value, NUM)?,
            "lr" => self.lr = parse(key, value, NUM)?,
            "epochs" => self.epochs = parse(key, value, INT)?,
            "batch_size" => self.batch_size = parse(key, value, INT)?,
            "seed" => self.seed = parse(key, value, INT)?,
            "train_ar" => self.train_ar = parse(key, value, BOOL)?,
            "min_count" => self.min_count = parse(key, value, INT)?,
            "videos" => self.videos = parse(key, value, INT)?,
            "holdout" => self.holdout = parse(key, value, INT)?,
            "captions_per_video" => self.captions_per_video = parse(key, value, INT)?,
            "frames" => self.frames = parse(key, value, INT)?,
            "feature_dim" => self.feature_dim = parse(key, value, INT)?,
            "noise" => self.noise = parse(key, value, NUM)?,
            "data_seed" => self.data_seed = parse(key, value, INT)?,
            "gamma" => self.gamma = parse(key, value, NUM)?,
            "iterations" => self.iterations = parse(key, value, INT)?,
            "length" => self.length = parse(key, value, INT)?,
            "lock_objects" => self.lock_objects = parse(key, value, BOOL)?,
            "npd" => self.npd = parse(key, value, INT)?,
            "dedup" => self.dedup = parse(key, value, BOOL)?,
            "data_dir" => self.data_dir = value.trim().to_string(),
            "run_dir" => self.run_dir = value.trim().to_string(),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{origin}:{}: expected key=value, got {line:?}",
                    n + 1
                ))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Parses and validates a whole file over the defaults.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_file(path)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        self.pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.pairs()
                .into_iter()
                .map(|(k, v)| (k.to_string(), serde_json::Value::String(v)))
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let pos = ">= 1";
        check(self.hidden >= 1, "hidden", self.hidden, pos)?;
        check(self.heads >= 1, "heads", self.heads, pos)?;
        check(
            self.hidden.is_multiple_of(self.heads),
            "heads",
            self.heads,
            &format!("dividing hidden={}", self.hidden),
        )?;
        check(self.ff_dim >= 1, "ff_dim", self.ff_dim, pos)?;
        check(
            (1..=12).contains(&self.layers),
            "layers",
            self.layers,
            "1 <= layers <= 12",
        )?;
        check(
            (1..=200).contains(&self.max_len),
            "max_len",
            self.max_len,
            "1 <= max_len <= 200",
        )?;
        check(
            (0.0..1.0).contains(&self.dropout),
            "dropout",
            self.dropout,
            "0 <= dropout < 1",
        )?;
        for (k, v) in [
            ("lambda_length", self.lambda_length),
            ("lambda_object", self.lambda_object),
            ("lambda_object_gen", self.lambda_object_gen),
            ("lambda_caption", self.lambda_caption),
            ("lambda_refine", self.lambda_refine),
        ] {
            check(v.is_finite() && v >= 0.0, k, v, "finite and >= 0")?;
        }
        check(
            (0.0..=1.0).contains(&self.refine_ratio),
            "refine_ratio",
            self.refine_ratio,
            "0 <= refine_ratio <= 1",
        )?;
        check(
            self.lr.is_finite() && self.lr > 0.0,
            "lr",
            self.lr,
            "lr > 0",
        )?;
        check(self.epochs >= 1, "epochs", self.epochs, pos)?;
        check(self.batch_size >= 1, "batch_size", self.batch_size, pos)?;
        check(self.min_count >= 1, "min_count", self.min_count, pos)?;
        check(self.videos >= 1, "videos", self.videos, pos)?;
        check(
            self.captions_per_video >= 1,
            "captions_per_video",
            self.captions_per_video,
            pos,
        )?;
        check(self.frames >= 1, "frames", self.frames, pos)?;
        check(self.feature_dim >= 1, "feature_dim", self.feature_dim, pos)?;
        check(
            self.noise.is_finite() && self.noise >= 0.0,
            "noise",
            self.noise,
            "finite and >= 0",
        )?;
        check(
            (0.0..=1.0).contains(&self.gamma),
            "gamma",
            self.gamma,
            "0 <= gamma <= 1",
        )?;
        check(
            self.iterations <= 100,
            "iterations",
            self.iterations,
            "iterations <= 100",
        )?;
        check(
            self.length <= self.max_len,
            "length",
            self.length,
            &format!("length <= max_len={}", self.max_len),
        )?;
        check(self.npd >= 1, "npd", self.npd, pos)?;
        Ok(())
    }

    /// Rejects changes to keys that shape a trained model.
    pub fn check_against(&self, trained: &RunConfig) -> Result<()> {
        for key in MODEL_KEYS {
            let (now, then) = (self.get(key), trained.get(key));
            if now != then {
                return Err(Error::Config(format!(
                    "{key}={} differs from the checkpoint's {key}={}",
                    now.unwrap_or_default(),
                    then.unwrap_or_default()
                )));
            }
        }
        Ok(())
    }

    pub fn model(&self, objects: usize, vocab: usize) -> ModelConfig {
        ModelConfig {
            image_dim: self.feature_dim,
            motion_dim: self.feature_dim,
            frames: self.frames,
            hidden: self.hidden,
            heads: self.heads,
            ff_dim: self.ff_dim,
            layers: self.layers,
            max_len: self.max_len,
            objects,
            vocab,
            dropout: self.dropout,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            dropout: self.dropout,
            seed: self.seed,
            loss: LossConfig {
                weights: LossWeights {
                    length: self.lambda_length,
                    object: self.lambda_object,
                    object_gen: self.lambda_object_gen,
                    caption: self.lambda_caption,
                    refine: self.lambda_refine,
                },
                convention: self.object_loss,
                refine_ratio: self.refine_ratio,
            },
        }
    }

    /// Decode settings; forced objects are filled in by the caller.
    pub fn control(&self) -> ControlSpec {
        ControlSpec {
            gamma: self.gamma,
            length: (self.length > 0).then_some(self.length),
            iterations: self.iterations,
            lock_objects: self.lock_objects,
            beam: self.npd,
            dedup: self.dedup,
            refine_ratio: self.refine_ratio,
            ..ControlSpec::default()
        }
    }
}
