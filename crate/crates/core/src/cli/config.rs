use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{AugmentConfig, SynthSpec};
use crate::error::{Error, Result};
use crate::model::NetworkConfig;
use crate::semisup::{StageConfig, TrainConfig};

/// Every recognised key with its default, in the order the resolved
/// config is written.
const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    // Locations. Empty `checkpoint`, `labels` and `eval_labels` resolve
    // inside `finetune_dir` / `data_dir`.
    ("data_dir", "data"),
    ("pretrain_dir", "pretrain"),
    ("finetune_dir", "finetune"),
    ("eval_dir", "eval"),
    ("init", "scratch"),
    ("resume", ""),
    ("checkpoint", ""),
    ("labels", ""),
    ("eval_labels", ""),
    ("eval_split", "test"),
    // Splits and label selection.
    ("test_videos", "4"),
    ("label_fraction", "0.02"),
    ("finetune_fraction", ""),
    // Synthetic data.
    ("videos", "20"),
    ("frames", "200"),
    ("blob_positions", ""),
    ("sigma", "2"),
    ("smoothness", "0.9"),
    ("step", "0.08"),
    ("gain", "0.7"),
    ("drift", "0.02"),
    ("noise", "0.01"),
    ("shift", "0"),
    // Network.
    ("in_channels", "1"),
    ("height", "16"),
    ("width", "16"),
    ("widths", "8,16,32"),
    ("strides", "2,2,2"),
    ("num_outputs", "3"),
    // Training.
    ("seq_len", "15"),
    ("context", "10"),
    ("frame_stride", "2"),
    ("window_step", "15"),
    ("pretext_lr", "0.001"),
    ("pretext_beta1", "0.9"),
    ("pretext_beta2", "0.999"),
    ("pretext_weight_decay", "0.00001"),
    ("pretext_batch", "20"),
    ("pretext_epochs", "30"),
    ("finetune_lr", "0.00001"),
    ("finetune_beta1", "0.5"),
    ("finetune_beta2", "0.999"),
    ("finetune_weight_decay", "0.00001"),
    ("finetune_head_lr", "0.01"),
    ("finetune_batch", "16"),
    ("finetune_epochs", "200"),
    ("precise_norm", "true"),
    ("augment", "true"),
    ("aug_rotation_deg", "20"),
    ("aug_scale", "0.1"),
    ("aug_flip", "true"),
    ("aug_jitter", "0.05"),
    ("aug_photometric", "0.1"),
];

/// Flat `key = value` run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(_, v)| v.to_string()).collect(),
        }
    }
}

fn slot(key: &str) -> Result<usize> {
    KEYS.iter()
        .position(|(k, _)| *k == key)
        .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))
}

impl RunConfig {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        KEYS.iter().map(|(k, _)| *k)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let i = slot(key)?;
        self.values[i] = value.trim().to_string();
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        &self.values[slot(key).expect("known key")]
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are
    /// skipped; unknown keys and malformed lines are errors.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{source}:{}: expected `key = value`, got {raw:?}", n + 1))
            })?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("{source}:{}: {}", n + 1, strip(e))))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not `key=value`")))?;
        self.set(k.trim(), v)
    }

    pub fn to_text(&self) -> String {
        KEYS.iter()
            .zip(&self.values)
            .map(|((k, _), v)| if v.is_empty() { format!("{k} =\n") } else { format!("{k} = {v}\n") })
            .collect()
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("config key `{key}`: cannot parse {v:?}")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.get(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("config key `{key}`: cannot parse {s:?} in {v:?}")))
            })
            .collect()
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.get(key))
    }

    /// Empty values read as `None`.
    pub fn optional(&self, key: &str) -> Option<&str> {
        Some(self.get(key)).filter(|v| !v.is_empty())
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn synth_spec(&self) -> Result<SynthSpec> {
        let positions = self
            .list::<String>("blob_positions")?
            .iter()
            .map(|p| {
                let parse = |s: &str| s.trim().parse::<f64>().ok();
                p.split_once(':')
                    .and_then(|(r, c)| Some((parse(r)?, parse(c)?)))
                    .ok_or_else(|| Error::Config(format!("config key `blob_positions`: {p:?} is not `row:col`")))
            })
            .collect::<Result<_>>()?;
        let synth = SynthSpec {
            videos: self.parse("videos")?,
            frames: self.parse("frames")?,
            num_outputs: self.parse("num_outputs")?,
            height: self.parse("height")?,
            width: self.parse("width")?,
            positions,
            sigma: self.parse("sigma")?,
            smoothness: self.parse("smoothness")?,
            step: self.parse("step")?,
            gain: self.parse("gain")?,
            drift: self.parse("drift")?,
            noise: self.parse("noise")?,
            shift: self.parse("shift")?,
            seed: self.seed()?,
        };
        synth.validate()?;
        Ok(synth)
    }

    pub fn network(&self) -> Result<NetworkConfig> {
        let cfg = NetworkConfig {
            in_channels: self.parse("in_channels")?,
            height: self.parse("height")?,
            width: self.parse("width")?,
            widths: self.list("widths")?,
            strides: self.list("strides")?,
            num_outputs: self.parse("num_outputs")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn stage(&self, prefix: &str) -> Result<StageConfig> {
        let key = |k: &str| format!("{prefix}_{k}");
        Ok(StageConfig {
            lr: self.parse(&key("lr"))?,
            betas: (self.parse(&key("beta1"))?, self.parse(&key("beta2"))?),
            weight_decay: self.parse(&key("weight_decay"))?,
            head_lr: None,
            batch: self.parse(&key("batch"))?,
            epochs: self.parse(&key("epochs"))?,
        })
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let augment = if self.parse("augment")? {
            Some(AugmentConfig {
                rotation_deg: self.parse("aug_rotation_deg")?,
                scale: self.parse("aug_scale")?,
                flip: self.parse("aug_flip")?,
                jitter: self.parse("aug_jitter")?,
                photometric: self.parse("aug_photometric")?,
            })
        } else {
            None
        };
        let cfg = TrainConfig {
            seq_len: self.parse("seq_len")?,
            context: self.parse("context")?,
            frame_stride: self.parse("frame_stride")?,
            window_step: self.parse("window_step")?,
            pretext: self.stage("pretext")?,
            finetune: StageConfig {
                head_lr: self.optional("finetune_head_lr").map(|_| self.parse("finetune_head_lr")).transpose()?,
                ..self.stage("finetune")?
            },
            augment,
            precise_norm: self.parse("precise_norm")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
