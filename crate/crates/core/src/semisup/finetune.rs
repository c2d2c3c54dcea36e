use rand::seq::SliceRandom;
use rand::Rng;

use super::{encode_sequence, epoch_rng, evaluate, sample_window, supervised_loss, LogLine, TrainConfig, TrainLog};
use crate::data::{Dataset, LabelTable, PackedVideo};
use crate::diffcore::{adam_step, AdamState, Graph, NormMode, Real, RunningStats, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{BoundModel, ModelBundle};

const STAGE: u64 = 2;

/// A window `[T,C,H,W]` whose frame `offset` carries `label` `[N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneExample<T = f32> {
    pub frames: Tensor<T>,
    pub offset: usize,
    pub label: Tensor<T>,
}

impl<T: Real> FinetuneExample<T> {
    pub fn cast<U: Real>(&self) -> FinetuneExample<U> {
        FinetuneExample {
            frames: self.frames.cast(),
            offset: self.offset,
            label: self.label.cast(),
        }
    }
}

/// Supervised loss of a batch of windows. Each window is forwarded only up
/// to its labeled offset; the head uses batch statistics when the batch has
/// at least two windows and running statistics otherwise.
pub fn finetune_loss<T: Real>(
    g: &mut Graph<T>,
    model: &BoundModel,
    stats: &mut RunningStats<T>,
    examples: &[FinetuneExample<T>],
) -> Result<Var> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("fine-tune batch is empty".into()));
    }
    let mut states = Vec::with_capacity(examples.len());
    for ex in examples {
        let len = ex.frames.shape()[0];
        if ex.offset >= len {
            return Err(Error::InvalidArgument(format!(
                "labeled offset {} outside window of {len} frames",
                ex.offset
            )));
        }
        let prefix = ex.frames.index_range(0, ex.offset + 1);
        let frames = g.leaf(prefix);
        let h = *encode_sequence(g, model, frames)?.last().expect("non-empty prefix");
        states.push(h);
    }
    let h = g.concat_batch(&states)?;
    let mode = if examples.len() >= 2 {
        NormMode::Train
    } else {
        NormMode::Eval
    };
    let pred = model.regress_head(g, h, stats, mode)?;
    let labels: Vec<Tensor<T>> = examples.iter().map(|e| e.label.clone()).collect();
    let label = g.leaf(Tensor::stack(&labels)?);
    supervised_loss(g, pred, label)
}

/// Loss and the gradient of every model parameter, in bundle order.
/// Updates the regressor's running statistics as a training step would.
pub fn finetune_gradients<T: Real>(
    model: &mut ModelBundle<T>,
    examples: &[FinetuneExample<T>],
) -> Result<(T, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let loss = finetune_loss(&mut g, &bound, &mut model.norm_stats, examples)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item(), bound.vars().iter().map(|&v| grads.wrt(v)).collect()))
}

/// Replaces the regressor's running statistics with the exact mean and
/// unbiased variance of the pooled hidden states over `examples`.
pub fn recalibrate_norm(model: &mut ModelBundle, examples: &[FinetuneExample]) -> Result<()> {
    if examples.len() < 2 {
        return Ok(());
    }
    let mut g = Graph::inference();
    let bound = model.bind(&mut g);
    let mut pooled = Vec::with_capacity(examples.len());
    for ex in examples {
        let frames = g.leaf(ex.frames.index_range(0, ex.offset + 1));
        let h = *encode_sequence(&mut g, &bound, frames)?.last().expect("non-empty prefix");
        let p = g.global_avg_pool(h)?;
        pooled.push(g.value(p).data().iter().map(|&v| v as f64).collect::<Vec<_>>());
    }
    let n = pooled.len() as f64;
    let c = pooled[0].len();
    let mean: Vec<f64> = (0..c).map(|j| pooled.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let var: Vec<f64> = (0..c)
        .map(|j| pooled.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0))
        .collect();
    model.norm_stats.mean = Tensor::new(vec![c], mean.iter().map(|&v| v as f32).collect())?;
    model.norm_stats.var = Tensor::new(vec![c], var.iter().map(|&v| v as f32).collect())?;
    Ok(())
}

/// Adam moments of the encoder and regressor groups, which may step at
/// different learning rates.
#[derive(Clone, Debug)]
pub struct FinetuneOptimizer {
    pub encoder: AdamState,
    pub head: AdamState,
}

impl FinetuneOptimizer {
    pub fn new(model: &ModelBundle) -> Self {
        let group = |head: bool| model.params().iter().filter(move |p| p.is_regressor() == head).map(|p| &p.value);
        FinetuneOptimizer {
            encoder: AdamState::new(group(false)),
            head: AdamState::new(group(true)),
        }
    }
}

/// One optimizer step on all parameters.
pub fn finetune_step(
    model: &mut ModelBundle,
    opt: &mut FinetuneOptimizer,
    examples: &[FinetuneExample],
    cfg: &TrainConfig,
) -> Result<f32> {
    let (loss, grads) = finetune_gradients(model, examples)?;
    let head: Vec<bool> = model.params().iter().map(|p| p.is_regressor()).collect();
    for (is_head, state, adam) in [
        (false, &mut opt.encoder, cfg.finetune.adam()),
        (true, &mut opt.head, cfg.finetune.head_adam()),
    ] {
        let mut params = Vec::new();
        let mut g = Vec::new();
        for ((p, grad), &h) in model.params_mut().iter_mut().zip(&grads).zip(&head) {
            if h == is_head {
                params.push(&mut p.value);
                g.push(grad.clone());
            }
        }
        adam_step(&mut params, &g, state, &adam)?;
    }
    Ok(loss)
}

/// Random window of `len` frames around `frame`. Videos shorter than `len`
/// are left-padded by repeating their first frame.
fn draw_window<R: Rng + ?Sized>(
    video: &PackedVideo,
    frame: usize,
    len: usize,
    rng: &mut R,
) -> Result<(Tensor<f32>, usize)> {
    let n = video.num_frames();
    if n >= len {
        let w = sample_window(n, frame, len, rng)?;
        return Ok((video.window(w.start, len), w.offset));
    }
    let pad = len - n;
    let first = video.frames.index_outer(0);
    let mut frames = vec![first; pad];
    frames.extend((0..n).map(|t| video.frames.index_outer(t)));
    let w = sample_window(len, frame + pad, len, rng)?;
    Ok((Tensor::stack(&frames)?, w.offset))
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Parameters after the last epoch.
    pub model: ModelBundle,
    /// Parameters of the epoch with the best validation mean ICC (the last
    /// epoch when no validation set is given).
    pub best: ModelBundle,
    pub best_icc: f64,
    pub steps: usize,
    pub log: TrainLog,
}

/// Trains on the labeled frames of `train`. Each epoch shuffles the labels,
/// redraws every window position and steps once per batch.
pub fn train_finetune(
    train: &Dataset,
    labels: &LabelTable,
    val: Option<(&Dataset, &LabelTable)>,
    cfg: &TrainConfig,
    mut model: ModelBundle,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if labels.is_empty() {
        return Err(Error::Data("fine-tuning needs at least one labeled frame".into()));
    }
    if labels.num_outputs != model.config.num_outputs {
        return Err(Error::Config(format!(
            "labels have {} intensities, the network regresses {}",
            labels.num_outputs, model.config.num_outputs
        )));
    }
    labels.check_against(train)?;
    let rows: Vec<(usize, usize, Tensor<f32>)> = labels
        .rows
        .iter()
        .map(|r| {
            let (v, _) = train.find(&r.video).expect("checked above");
            (v, r.frame, Tensor::new(vec![r.values.len()], r.values.clone()).expect("finite labels"))
        })
        .collect();
    let mut opt = FinetuneOptimizer::new(&model);
    let mut log = TrainLog::default();
    let mut best = model.clone();
    let mut best_icc = f64::NEG_INFINITY;
    let mut steps = 0;
    for epoch in 1..=cfg.finetune.epochs {
        let mut rng = epoch_rng(cfg.seed, STAGE, epoch);
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        let mut seen = Vec::new();
        for chunk in order.chunks(cfg.finetune.batch) {
            let examples = chunk
                .iter()
                .map(|&i| {
                    let (v, frame, label) = &rows[i];
                    let (frames, offset) = draw_window(&train.videos[*v], *frame, cfg.seq_len, &mut rng)?;
                    Ok(FinetuneExample {
                        frames,
                        offset,
                        label: label.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            total += finetune_step(&mut model, &mut opt, &examples, cfg)? as f64;
            batches += 1;
            steps += 1;
            if cfg.precise_norm {
                seen.extend(examples);
            }
        }
        if cfg.precise_norm {
            recalibrate_norm(&mut model, &seen)?;
        }
        let mut line = LogLine::new(epoch);
        line.push("train", "loss", total / batches as f64);
        match val {
            Some((data, table)) => {
                let report = evaluate(&model, data, table)?;
                let icc = report.mean_icc();
                line.push("val", "icc", icc);
                line.push("val", "mae", report.mean_mae());
                for (n, d) in report.dims.iter().enumerate() {
                    line.push("val", &format!("icc_{n}"), d.icc);
                }
                if icc > best_icc {
                    best_icc = icc;
                    best = model.clone();
                }
            }
            None => best = model.clone(),
        }
        log.lines.push(line);
    }
    Ok(FinetuneOutcome {
        model,
        best,
        best_icc,
        steps,
        log,
    })
}
