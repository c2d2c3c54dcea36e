use rand::seq::SliceRandom;

use super::{epoch_rng, LogLine, TrainConfig, TrainLog};
use crate::checkpoint::{Checkpoint, Payload};
use crate::cpc::{pretext_loss, top_n_accuracy, PretextBatch};
use crate::data::{AugmentParams, Dataset};
use crate::diffcore::{adam_step, AdamState, Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::ModelBundle;

const STAGE: u64 = 1;

/// Optimizer state and completed epochs of an interrupted run.
#[derive(Clone, Debug, PartialEq)]
pub struct PretextResume {
    pub optimizer: AdamState,
    pub epochs_done: usize,
}

impl PretextResume {
    /// Appends `opt.m.<param>`, `opt.v.<param>`, `opt.step` and
    /// `train.epoch` entries for the pretext-trained parameters.
    pub fn write_into(&self, model: &ModelBundle, ck: &mut Checkpoint) {
        let names = model.params().iter().zip(trainable(model)).filter(|(_, m)| *m).map(|(p, _)| &p.name);
        for ((name, m), v) in names.zip(&self.optimizer.m).zip(&self.optimizer.v) {
            ck.push(format!("opt.m.{name}"), Payload::from_tensor(m));
            ck.push(format!("opt.v.{name}"), Payload::from_tensor(v));
        }
        let count = |n: u64| Payload::U64 { shape: vec![1], data: vec![n] };
        ck.push("opt.step", count(self.optimizer.step));
        ck.push("train.epoch", count(self.epochs_done as u64));
    }

    /// Reads the state written by [`PretextResume::write_into`]; `None` if
    /// the checkpoint carries no optimizer state.
    pub fn read_from(model: &ModelBundle, ck: &Checkpoint) -> std::result::Result<Option<Self>, String> {
        let counter = |name: &str| match ck.get(name) {
            Some(Payload::U64 { data, .. }) if data.len() == 1 => Ok(Some(data[0])),
            Some(_) => Err(format!("tensor {name} must hold one u64")),
            None => Ok(None),
        };
        let (Some(step), Some(epoch)) = (counter("opt.step")?, counter("train.epoch")?) else {
            return Ok(None);
        };
        let mut optimizer = AdamState { m: Vec::new(), v: Vec::new(), step };
        for (p, _) in model.params().iter().zip(trainable(model)).filter(|(_, m)| *m) {
            for (prefix, out) in [("opt.m.", &mut optimizer.m), ("opt.v.", &mut optimizer.v)] {
                let name = format!("{prefix}{}", p.name);
                let t: Tensor = ck
                    .get(&name)
                    .and_then(Payload::to_tensor)
                    .ok_or_else(|| format!("tensor {name} missing"))?;
                if t.shape() != p.value.shape() {
                    return Err(format!(
                        "tensor {name} has shape {:?} but the network config expects {:?}",
                        t.shape(),
                        p.value.shape()
                    ));
                }
                out.push(t);
            }
        }
        Ok(Some(PretextResume {
            optimizer,
            epochs_done: epoch as usize,
        }))
    }
}

#[derive(Clone, Debug)]
pub struct PretextOutcome {
    /// Parameters after the last epoch.
    pub model: ModelBundle,
    /// Parameters of the epoch with the highest validation top-1.
    pub best: ModelBundle,
    pub best_top1: f64,
    pub optimizer: AdamState,
    pub epochs_done: usize,
    pub log: TrainLog,
}

/// `(video, start)` of every window of `seq_len` frames taken every
/// `frame_stride` frames, starts `window_step` apart. Short videos are
/// skipped.
pub fn pretext_windows(data: &Dataset, cfg: &TrainConfig) -> Vec<(usize, usize)> {
    let span = (cfg.seq_len - 1) * cfg.frame_stride + 1;
    let mut out = Vec::new();
    for (v, video) in data.videos.iter().enumerate() {
        let mut s = 0;
        while s + span <= video.num_frames() {
            out.push((v, s));
            s += cfg.window_step;
        }
    }
    out
}

fn gather(data: &Dataset, (v, start): (usize, usize), cfg: &TrainConfig) -> Tensor<f32> {
    let video = &data.videos[v];
    let frames: Vec<Tensor<f32>> = (0..cfg.seq_len)
        .map(|t| video.frames.index_outer(start + t * cfg.frame_stride))
        .collect();
    Tensor::stack(&frames).expect("frames of one video share a shape")
}

/// Parameters trained by the pretext task: extractor, GRU, predictive head.
fn trainable(model: &ModelBundle) -> Vec<bool> {
    model
        .params()
        .iter()
        .map(|p| !p.is_regressor())
        .collect()
}

fn step(
    model: &mut ModelBundle,
    mask: &[bool],
    opt: &mut AdamState,
    batch: &PretextBatch,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let frames = batch.frame_vars(&mut g);
    let (loss, _) = pretext_loss(&mut g, &bound, &frames, batch.context)?;
    let grads = g.backward(loss)?;
    let grads: Vec<Tensor> = bound
        .vars()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| grads.wrt(v))
        .collect();
    let mut params: Vec<&mut Tensor> = model
        .params_mut()
        .iter_mut()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(p, _)| &mut p.value)
        .collect();
    adam_step(&mut params, &grads, opt, &cfg.pretext.adam())?;
    Ok(g.value(loss).item() as f64)
}

/// Top-1/3/5 over fixed validation batches, pooled over rows; also
/// returns the per-batch candidate count K.
fn validate(model: &ModelBundle, batches: &[PretextBatch]) -> Result<([f64; 3], usize)> {
    let mut hits = [0.0; 3];
    let mut rows = 0;
    let mut k = 0;
    for batch in batches {
        let mut g = Graph::inference();
        let bound = model.bind(&mut g);
        let frames = batch.frame_vars(&mut g);
        let (_, scores) = pretext_loss(&mut g, &bound, &frames, batch.context)?;
        k = scores.size();
        for (h, n) in hits.iter_mut().zip([1, 3, 5]) {
            *h += top_n_accuracy(&scores, n.min(k))? * k as f64;
        }
        rows += k;
    }
    Ok((hits.map(|h| h / rows as f64), k))
}

fn batches_of(
    data: &Dataset,
    windows: &[(usize, usize)],
    cfg: &TrainConfig,
    mut augment: impl FnMut(Tensor<f32>) -> Tensor<f32>,
) -> Result<Vec<PretextBatch>> {
    let b = cfg.pretext.batch.min(windows.len());
    windows
        .chunks_exact(b)
        .map(|chunk| {
            let parts: Vec<Tensor<f32>> = chunk.iter().map(|&w| augment(gather(data, w, cfg))).collect();
            PretextBatch::new(Tensor::stack(&parts)?, cfg.context)
        })
        .collect()
}

/// Minimizes the NCE loss over shuffled, augmented windows of `train` and
/// tracks top-n accuracy on fixed windows of `val`.
pub fn train_pretext(
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut model: ModelBundle,
    resume: Option<PretextResume>,
) -> Result<PretextOutcome> {
    cfg.validate()?;
    let windows = pretext_windows(train, cfg);
    if windows.is_empty() {
        return Err(Error::Data(format!(
            "no training video is long enough for a {}-frame window at stride {}",
            cfg.seq_len, cfg.frame_stride
        )));
    }
    let val_windows = pretext_windows(val, cfg);
    if val_windows.is_empty() {
        return Err(Error::Data("no validation video is long enough for a pretext window".into()));
    }
    let val_batches = batches_of(val, &val_windows, cfg, |w| w)?;
    let mask = trainable(&model);
    let (mut opt, start) = match resume {
        Some(r) => (r.optimizer, r.epochs_done),
        None => {
            let params = model.params().iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| &p.value);
            (AdamState::new(params), 0)
        }
    };
    let mut log = TrainLog::default();
    let mut best = model.clone();
    let mut best_top1 = f64::NEG_INFINITY;
    for epoch in start + 1..=cfg.pretext.epochs {
        let mut rng = epoch_rng(cfg.seed, STAGE, epoch);
        let mut order = windows.clone();
        order.shuffle(&mut rng);
        let batches = batches_of(train, &order, cfg, |w| match &cfg.augment {
            Some(a) => AugmentParams::sample(a, &mut rng).apply(&w),
            None => w,
        })?;
        let mut total = 0.0;
        for batch in &batches {
            total += step(&mut model, &mask, &mut opt, batch, cfg)?;
        }
        let ([top1, top3, top5], k) = validate(&model, &val_batches)?;
        let mut line = LogLine::new(epoch);
        line.push("train", "nce_loss", total / batches.len() as f64);
        line.push("val", "top1", top1);
        line.push("val", "top3", top3);
        line.push("val", "top5", top5);
        line.push("val", "candidates", k as f64);
        log.lines.push(line);
        if top1 > best_top1 {
            best_top1 = top1;
            best = model.clone();
        }
    }
    Ok(PretextOutcome {
        model,
        best,
        best_top1,
        optimizer: opt,
        epochs_done: cfg.pretext.epochs.max(start),
        log,
    })
}
