//! Training stages: contrastive pretext, sparse-label fine-tuning through
//! randomly shifted windows, and full-video evaluation.

mod eval;
mod finetune;
mod pretext;

pub use eval::{evaluate, predict_video, DimMetrics, EvalReport};
pub use finetune::{
    finetune_gradients, finetune_loss, finetune_step, recalibrate_norm, train_finetune, FinetuneExample, FinetuneOptimizer,
    FinetuneOutcome,
};
pub use pretext::{pretext_windows, train_pretext, PretextOutcome, PretextResume};

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{AdamConfig, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::BoundModel;

/// Optimizer and schedule settings of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    /// Learning rate of the regressor parameters; `None` uses `lr`.
    pub head_lr: Option<f64>,
    pub batch: usize,
    pub epochs: usize,
}

impl StageConfig {
    pub fn pretext() -> Self {
        StageConfig {
            lr: 1e-3,
            betas: (0.9, 0.999),
            weight_decay: 1e-5,
            head_lr: None,
            batch: 20,
            epochs: 30,
        }
    }

    pub fn finetune() -> Self {
        StageConfig {
            lr: 1e-5,
            betas: (0.5, 0.999),
            weight_decay: 1e-5,
            head_lr: Some(1e-2),
            batch: 16,
            epochs: 200,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.betas.0,
            beta2: self.betas.1,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    /// Optimizer settings of the regressor parameters.
    pub fn head_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.head_lr.unwrap_or(self.lr),
            ..self.adam()
        }
    }

    fn validate(&self, stage: &str) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(format!(
                "{stage}: need lr >= 0 and betas in [0,1), got lr {} betas ({b1}, {b2})",
                self.lr
            )));
        }
        if let Some(h) = self.head_lr {
            if !(h >= 0.0 && h.is_finite()) {
                return Err(Error::Config(format!("{stage}: need head lr >= 0, got {h}")));
            }
        }
        if !(self.weight_decay >= 0.0) || self.batch == 0 {
            return Err(Error::Config(format!(
                "{stage}: need weight_decay >= 0 and batch >= 1"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Window length T, shared by both stages.
    pub seq_len: usize,
    /// Context length of the pretext split.
    pub context: usize,
    /// Frame step inside a pretext window.
    pub frame_stride: usize,
    /// Distance between consecutive pretext window starts.
    pub window_step: usize,
    pub pretext: StageConfig,
    pub finetune: StageConfig,
    /// Pretext augmentation; `None` disables it.
    pub augment: Option<crate::data::AugmentConfig>,
    /// After each fine-tune epoch, replace the regressor's running
    /// statistics with exact ones over that epoch's windows.
    pub precise_norm: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seq_len: 15,
            context: 10,
            frame_stride: 2,
            window_step: 15,
            pretext: StageConfig::pretext(),
            finetune: StageConfig::finetune(),
            augment: Some(Default::default()),
            precise_norm: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 2 || self.context == 0 || self.context >= self.seq_len {
            return Err(Error::Config(format!(
                "need seq_len >= 2 and 1 <= context < seq_len, got {} and {}",
                self.seq_len, self.context
            )));
        }
        if self.frame_stride == 0 || self.window_step == 0 {
            return Err(Error::Config("frame_stride and window_step must be >= 1".into()));
        }
        self.pretext.validate("pretext")?;
        self.finetune.validate("finetune")
    }
}

/// Deterministic per-epoch generator; `stage` separates the two stages.
pub(crate) fn epoch_rng(seed: u64, stage: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stage << 32) | epoch as u64);
    rng
}

/// A window `start..start+len` whose frame `offset` carries the label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSample {
    pub start: usize,
    pub len: usize,
    pub offset: usize,
}

/// Places a length-`len` window around `labeled`, the labeled frame's
/// offset drawn uniformly from every feasible position.
pub fn sample_window<R: Rng + ?Sized>(
    video_len: usize,
    labeled: usize,
    len: usize,
    rng: &mut R,
) -> Result<WindowSample> {
    if len == 0 || video_len < len {
        return Err(Error::InvalidArgument(format!(
            "video of {video_len} frames cannot hold a window of {len}"
        )));
    }
    if labeled >= video_len {
        return Err(Error::InvalidArgument(format!(
            "labeled frame {labeled} outside video of {video_len} frames"
        )));
    }
    let lo = (labeled + len).saturating_sub(video_len);
    let hi = labeled.min(len - 1);
    let offset = rng.gen_range(lo..=hi);
    Ok(WindowSample {
        start: labeled - offset,
        len,
        offset,
    })
}

/// Runs the GRU over `frames` `[L,C,H,W]` in order and returns every
/// hidden state, each `[1,Cf,Hf,Wf]`.
pub fn encode_sequence<T: Real>(g: &mut Graph<T>, model: &BoundModel, frames: Var) -> Result<Vec<Var>> {
    let len = g.value(frames).shape()[0];
    let feats = model.feature_extract(g, frames)?;
    let mut h = model.initial_state(g, 1);
    let mut states = Vec::with_capacity(len);
    for t in 0..len {
        let x = g.slice_batch(feats, t, 1)?;
        h = model.conv_gru_step(g, x, h)?;
        states.push(h);
    }
    Ok(states)
}

/// `(1/B) Σ_b ‖pred_b − label_b‖²` over `[B,N]` tensors.
pub fn supervised_loss<T: Real>(g: &mut Graph<T>, pred: Var, label: Var) -> Result<Var> {
    let (p, y) = (g.value(pred).clone(), g.value(label).clone());
    if p.shape() != y.shape() || p.ndim() != 2 {
        return Err(Error::shape(
            "supervised_loss",
            format!("prediction {:?} vs label {:?}", p.shape(), y.shape()),
        ));
    }
    let batch = T::lit(p.shape()[0] as f64);
    let resid = p.zip_map(&y, |a, b| a - b);
    let loss = resid.data().iter().map(|&r| r * r).sum::<T>() / batch;
    g.push_op("supervised_loss", Tensor::scalar(loss), &[pred, label], move |up| {
        let k = T::lit(2.0) * up.item() / batch;
        vec![resid.map(|r| r * k), resid.map(|r| -r * k)]
    })
}

/// One line per epoch: the epoch number, then `split  name  value`
/// groups, tab-separated.
#[derive(Clone, Debug, PartialEq)]
pub struct LogLine {
    pub epoch: usize,
    pub values: Vec<(String, String, f64)>,
}

impl LogLine {
    pub fn new(epoch: usize) -> Self {
        LogLine {
            epoch,
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, split: &str, name: &str, value: f64) {
        self.values.push((split.into(), name.into(), value));
    }

    pub fn get(&self, split: &str, name: &str) -> Option<f64> {
        self.values
            .iter()
            .find(|(s, n, _)| s == split && n == name)
            .map(|v| v.2)
    }

    pub fn render(&self) -> String {
        let mut s = self.epoch.to_string();
        for (split, name, v) in &self.values {
            write!(s, "\t{split}\t{name}\t{v}").unwrap();
        }
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub lines: Vec<LogLine>,
}

impl TrainLog {
    pub fn to_text(&self) -> String {
        self.lines.iter().map(|l| l.render() + "\n").collect()
    }

    pub fn series(&self, split: &str, name: &str) -> Vec<f64> {
        self.lines.iter().filter_map(|l| l.get(split, name)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for labeled in 0..15 {
            let w = sample_window(15, labeled, 15, &mut rng).unwrap();
            assert_eq!((w.start, w.offset), (0, labeled));
        }
        for _ in 0..200 {
            let w = sample_window(100, 7, 15, &mut rng).unwrap();
            assert!(w.offset <= 7 && w.start + w.offset == 7);
            let w = sample_window(100, 95, 15, &mut rng).unwrap();
            assert!((10..15).contains(&w.offset) && w.start + 15 <= 100);
        }
        assert!(sample_window(10, 3, 15, &mut rng).is_err());
        assert!(sample_window(20, 20, 15, &mut rng).is_err());
    }

    #[test]
    fn supervised_loss_values() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let y = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let l = supervised_loss(&mut g, p, y).unwrap();
        assert_eq!(g.value(l).item(), 5.0);
        let same = supervised_loss(&mut g, y, y).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(p).data(), &[-2.0, -4.0]);

        let p2 = g.leaf(Tensor::new(vec![1, 2], vec![-1.0, -2.0]).unwrap());
        let l2 = supervised_loss(&mut g, p2, y).unwrap();
        assert_eq!(g.value(l2).item(), 20.0);
    }

    #[test]
    fn log_line_format() {
        let mut l = LogLine::new(3);
        l.push("train", "loss", 1.5);
        l.push("val", "top1", 0.25);
        assert_eq!(l.render(), "3\ttrain\tloss\t1.5\tval\ttop1\t0.25");
        assert_eq!(l.get("val", "top1"), Some(0.25));
    }

    #[test]
    fn config_checks() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig {
            context: 15,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
