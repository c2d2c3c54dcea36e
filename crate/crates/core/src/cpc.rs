//! Contrastive predictive pretext task.
//!
//! The GRU summarizes the first `context` frames of each window, a shared
//! predictive head rolls out `P` future feature grids (each prediction is fed
//! back through the GRU), and a dense NCE loss scores every prediction
//! vector against every target vector in the batch.

use crate::diffcore::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::BoundModel;

/// Windows `[B,T,C,H,W]` split into `context` leading frames and
/// `T - context` prediction targets.
#[derive(Clone, Debug)]
pub struct PretextBatch<T = f32> {
    pub frames: Tensor<T>,
    pub context: usize,
}

impl<T: Real> PretextBatch<T> {
    pub fn new(frames: Tensor<T>, context: usize) -> Result<Self> {
        if frames.ndim() != 5 {
            return Err(Error::shape(
                "pretext batch",
                format!("expected [B,T,C,H,W], got {:?}", frames.shape()),
            ));
        }
        let t = frames.shape()[1];
        if t < 2 || context == 0 || context >= t {
            return Err(Error::InvalidArgument(format!(
                "window of {t} frames cannot be split with context {context}"
            )));
        }
        Ok(PretextBatch { frames, context })
    }

    pub fn batch(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn prediction_steps(&self) -> usize {
        self.seq_len() - self.context
    }

    /// Frame `t` of every window, `[B,C,H,W]`.
    pub fn frame(&self, t: usize) -> Tensor<T> {
        let s = self.frames.shape();
        let (b, tt) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let mut data = Vec::with_capacity(b * inner);
        for i in 0..b {
            let base = (i * tt + t) * inner;
            data.extend_from_slice(&self.frames.data()[base..base + inner]);
        }
        let mut shape = vec![b];
        shape.extend_from_slice(&s[2..]);
        Tensor::from_parts(shape, data)
    }

    /// One graph leaf per time step.
    pub fn frame_vars(&self, g: &mut Graph<T>) -> Vec<Var> {
        (0..self.seq_len()).map(|t| g.leaf(self.frame(t))).collect()
    }
}

/// Pairwise scores between all predictions (rows) and all targets
/// (columns), flattened in `(b, k, i, j)` order so the positive pair of row
/// `r` sits in column `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix<T = f32> {
    k: usize,
    scores: Vec<T>,
}

impl<T: Real> ScoreMatrix<T> {
    pub fn from_rows(k: usize, scores: Vec<T>) -> Result<Self> {
        if scores.len() != k * k {
            return Err(Error::shape("score matrix", format!("{} scores for K={k}", scores.len())));
        }
        Ok(ScoreMatrix { k, scores })
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.scores[r * self.k..(r + 1) * self.k]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.scores[r * self.k + c]
    }
}

/// Gathers `[B,P,C,H,W]` into a `K×C` row matrix, `K = B·P·H·W`.
fn to_rows<T: Real>(x: &Tensor<T>) -> (Vec<T>, usize, usize) {
    let s = x.shape();
    let (bp, c, hw) = (s[0] * s[1], s[2], s[3] * s[4]);
    let k = bp * hw;
    let mut rows = vec![T::zero(); k * c];
    for n in 0..bp {
        for ch in 0..c {
            let src = &x.data()[(n * c + ch) * hw..(n * c + ch + 1) * hw];
            for (pos, &v) in src.iter().enumerate() {
                rows[(n * hw + pos) * c + ch] = v;
            }
        }
    }
    (rows, k, c)
}

fn from_rows<T: Real>(rows: &[T], shape: &[usize]) -> Tensor<T> {
    let (bp, c, hw) = (shape[0] * shape[1], shape[2], shape[3] * shape[4]);
    let mut data = vec![T::zero(); rows.len()];
    for n in 0..bp {
        for ch in 0..c {
            for pos in 0..hw {
                data[(n * c + ch) * hw + pos] = rows[(n * hw + pos) * c + ch];
            }
        }
    }
    Tensor::from_parts(shape.to_vec(), data)
}

fn check_pair<T: Real>(predictions: &Tensor<T>, targets: &Tensor<T>) -> Result<()> {
    if predictions.ndim() != 5 || predictions.shape() != targets.shape() {
        return Err(Error::shape(
            "nce_loss",
            format!(
                "predictions {:?} and targets {:?} must share a [B,P,C,H,W] shape",
                predictions.shape(),
                targets.shape()
            ),
        ));
    }
    let s = predictions.shape();
    if s[0] * s[1] * s[3] * s[4] == 0 {
        return Err(Error::InvalidArgument("nce_loss over zero candidates".into()));
    }
    Ok(())
}

fn scores<T: Real>(pred_rows: &[T], target_rows: &[T], k: usize, c: usize) -> Result<ScoreMatrix<T>> {
    let mut out = Vec::with_capacity(k * k);
    for r in 0..k {
        let p = &pred_rows[r * c..(r + 1) * c];
        for col in 0..k {
            let f = &target_rows[col * c..(col + 1) * c];
            out.push(p.iter().zip(f).map(|(&a, &b)| a * b).sum::<T>());
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "nce scores".into() });
    }
    Ok(ScoreMatrix { k, scores: out })
}

/// Row-wise softmax statistics: per-row log-sum-exp and the mean loss,
/// accumulated in f64.
fn row_logsumexp<T: Real>(s: &ScoreMatrix<T>) -> (Vec<f64>, f64) {
    let k = s.k;
    let mut lse = Vec::with_capacity(k);
    let mut total = 0.0f64;
    for r in 0..k {
        let row = s.row(r);
        let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v.as_f64() - m).exp()).sum();
        let l = m + z.ln();
        total += l - row[r].as_f64();
        lse.push(l);
    }
    (lse, total / k as f64)
}

/// Dense NCE loss: mean over the `K` prediction vectors of the cross-entropy
/// that picks the matching target among all `K` targets of the batch.
/// Scores are raw channel dot products (no temperature, no normalization).
pub fn nce_loss<T: Real>(predictions: &Tensor<T>, targets: &Tensor<T>) -> Result<(T, ScoreMatrix<T>)> {
    check_pair(predictions, targets)?;
    let (p, k, c) = to_rows(predictions);
    let (f, _, _) = to_rows(targets);
    let s = scores(&p, &f, k, c)?;
    let (_, loss) = row_logsumexp(&s);
    Ok((T::lit(loss), s))
}

/// Gradients of [`nce_loss`] with respect to predictions and targets, scaled
/// by the upstream gradient `upstream`.
pub fn nce_loss_backward<T: Real>(
    predictions: &Tensor<T>,
    targets: &Tensor<T>,
    scores: &ScoreMatrix<T>,
    upstream: T,
) -> (Tensor<T>, Tensor<T>) {
    let (p, k, c) = to_rows(predictions);
    let (f, _, _) = to_rows(targets);
    let (lse, _) = row_logsumexp(scores);
    let scale = upstream.as_f64() / k as f64;
    let mut gp = vec![T::zero(); k * c];
    let mut gf = vec![T::zero(); k * c];
    for r in 0..k {
        let row = scores.row(r);
        for col in 0..k {
            let mut d = (row[col].as_f64() - lse[r]).exp();
            if col == r {
                d -= 1.0;
            }
            let d = T::lit(d * scale);
            for ch in 0..c {
                gp[r * c + ch] += d * f[col * c + ch];
                gf[col * c + ch] += d * p[r * c + ch];
            }
        }
    }
    (from_rows(&gp, predictions.shape()), from_rows(&gf, targets.shape()))
}

/// Graph node for [`nce_loss`] over per-step prediction and target grids
/// (`P` vars each of shape `[B,C,H,W]`).
pub fn nce_loss_op<T: Real>(
    g: &mut Graph<T>,
    predictions: &[Var],
    targets: &[Var],
) -> Result<(Var, ScoreMatrix<T>)> {
    if predictions.len() != targets.len() {
        return Err(Error::shape(
            "nce_loss",
            format!("{} predictions vs {} targets", predictions.len(), targets.len()),
        ));
    }
    let p = g.stack_axis1(predictions)?;
    let f = g.stack_axis1(targets)?;
    let (pv, fv) = (g.value(p).clone(), g.value(f).clone());
    let (loss, s) = nce_loss(&pv, &fv)?;
    let saved = s.clone();
    let var = g.push_op("nce_loss", Tensor::scalar(loss), &[p, f], move |up| {
        let (gp, gf) = nce_loss_backward(&pv, &fv, &saved, up.item());
        vec![gp, gf]
    })?;
    Ok((var, s))
}

/// Fraction of rows whose diagonal entry ranks within the top `n`, ranking
/// by score descending and column index ascending on ties.
pub fn top_n_accuracy<T: Real>(scores: &ScoreMatrix<T>, n: usize) -> Result<f64> {
    let k = scores.k;
    if n == 0 || n > k {
        return Err(Error::InvalidArgument(format!("top-{n} over {k} candidates")));
    }
    let hits = (0..k)
        .filter(|&r| {
            let row = scores.row(r);
            let pos = row[r];
            let rank = row
                .iter()
                .enumerate()
                .filter(|&(c, &v)| v > pos || (v == pos && c < r))
                .count();
            rank < n
        })
        .count();
    Ok(hits as f64 / k as f64)
}

/// Runs the GRU over the first `context` frames and extracts the target
/// feature grids of the remaining frames.
pub fn encode_context<T: Real>(
    g: &mut Graph<T>,
    model: &BoundModel,
    frames: &[Var],
    context: usize,
) -> Result<(Var, Vec<Var>)> {
    if frames.len() < 2 || context == 0 || context >= frames.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} frames with context {context}",
            frames.len()
        )));
    }
    let batch = g.value(frames[0]).shape()[0];
    let mut h = model.initial_state(g, batch);
    for &x in &frames[..context] {
        let feat = model.feature_extract(g, x)?;
        h = model.conv_gru_step(g, feat, h)?;
    }
    let targets = frames[context..]
        .iter()
        .map(|&x| model.feature_extract(g, x))
        .collect::<Result<Vec<_>>>()?;
    Ok((h, targets))
}

/// Recursive prediction: `p₁ = p(h_C)`, then each prediction is fed through
/// the GRU to produce the next hidden state and the next prediction.
pub fn rollout<T: Real>(g: &mut Graph<T>, model: &BoundModel, h_context: Var, steps: usize) -> Result<Vec<Var>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("rollout needs at least one step".into()));
    }
    let mut preds = Vec::with_capacity(steps);
    let mut h = h_context;
    let mut p = model.predictive_step(g, h)?;
    preds.push(p);
    for _ in 1..steps {
        h = model.conv_gru_step(g, p, h)?;
        p = model.predictive_step(g, h)?;
        preds.push(p);
    }
    Ok(preds)
}

/// Full pretext forward: context encoding, rollout and NCE loss.
pub fn pretext_loss<T: Real>(
    g: &mut Graph<T>,
    model: &BoundModel,
    frames: &[Var],
    context: usize,
) -> Result<(Var, ScoreMatrix<T>)> {
    let (h, targets) = encode_context(g, model, frames, context)?;
    let preds = rollout(g, model, h, targets.len())?;
    nce_loss_op(g, &preds, &targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelBundle, NetworkConfig};

    #[test]
    fn uniform_scores_give_ln_k() {
        let x = Tensor::<f64>::full(vec![1, 2, 3, 2, 2], 0.3);
        let (loss, s) = nce_loss(&x, &x).unwrap();
        assert_eq!(s.size(), 8);
        assert!((loss - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn k4_value() {
        let x = Tensor::<f32>::full(vec![2, 2, 3, 1, 1], 1.0);
        let (loss, _) = nce_loss(&x, &x).unwrap();
        assert!((loss - 1.386_294).abs() < 1e-6);
    }

    #[test]
    fn single_candidate_has_zero_loss() {
        let p = Tensor::<f64>::full(vec![1, 1, 4, 1, 1], -2.0);
        let f = Tensor::<f64>::full(vec![1, 1, 4, 1, 1], 5.0);
        assert_eq!(nce_loss(&p, &f).unwrap().0, 0.0);
    }

    #[test]
    fn two_candidates_hand_value() {
        // rows (b=0,k=0) and (b=0,k=1); one channel.
        // pred0·f0 = ln3, pred0·f1 = 0; pred1·f1 = ln3, pred1·f0 = 0.
        let l3 = 3f64.ln();
        let p = Tensor::new(vec![1, 2, 2, 1, 1], vec![l3, 0.0, 0.0, l3]).unwrap();
        let f = Tensor::new(vec![1, 2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (loss, s) = nce_loss(&p, &f).unwrap();
        assert!((s.get(0, 0) - l3).abs() < 1e-15 && s.get(0, 1) == 0.0);
        assert!((loss - (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((loss - 0.287_682).abs() < 1e-6);
    }

    #[test]
    fn nce_rejects_mismatch_and_empty() {
        let a = Tensor::<f32>::zeros(vec![1, 2, 3, 1, 1]);
        let b = Tensor::<f32>::zeros(vec![1, 2, 4, 1, 1]);
        assert!(nce_loss(&a, &b).is_err());
        let e = Tensor::<f32>::zeros(vec![0, 2, 3, 1, 1]);
        assert!(nce_loss(&e, &e).is_err());
    }

    #[test]
    fn top_n_examples() {
        let s = ScoreMatrix::from_rows(2, vec![0.0f64, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(top_n_accuracy(&s, 1).unwrap(), 0.5);
        assert_eq!(top_n_accuracy(&s, 2).unwrap(), 1.0);
        let d = ScoreMatrix::from_rows(3, vec![5.0f64, 1.0, 1.0, 0.0, 2.0, 1.0, -1.0, -2.0, 0.0]).unwrap();
        assert_eq!(top_n_accuracy(&d, 1).unwrap(), 1.0);
        assert!(top_n_accuracy(&d, 0).is_err());
    }

    #[test]
    fn ties_break_towards_lower_column() {
        // All equal: row r ranks r-th, so top-1 hits only row 0.
        let s = ScoreMatrix::from_rows(4, vec![1.0f32; 16]).unwrap();
        assert_eq!(top_n_accuracy(&s, 1).unwrap(), 0.25);
        assert_eq!(top_n_accuracy(&s, 3).unwrap(), 0.75);
        assert_eq!(top_n_accuracy(&s, 4).unwrap(), 1.0);
    }

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            in_channels: 1,
            height: 8,
            width: 8,
            widths: vec![2, 3],
            strides: vec![2, 2],
            num_outputs: 2,
        }
    }

    #[test]
    fn context_split_shapes() {
        let m = ModelBundle::<f32>::init(NetworkConfig::default(), 0).unwrap();
        let frames = Tensor::from_fn(vec![2, 15, 1, 16, 16], |i| ((i % 97) as f32) / 97.0);
        let batch = PretextBatch::new(frames, 10).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let xs = batch.frame_vars(&mut g);
        let (h, targets) = encode_context(&mut g, &b, &xs, 10).unwrap();
        assert_eq!(targets.len(), 5);
        assert_eq!(g.value(h).shape(), &[2, 32, 2, 2]);
        let preds = rollout(&mut g, &b, h, 5).unwrap();
        assert_eq!(preds.len(), 5);
        for p in preds {
            assert_eq!(g.value(p).shape(), &[2, 32, 2, 2]);
        }
    }

    #[test]
    fn degenerate_splits_rejected() {
        let frames = Tensor::<f32>::zeros(vec![1, 4, 1, 8, 8]);
        assert!(PretextBatch::new(frames.clone(), 0).is_err());
        assert!(PretextBatch::new(frames.clone(), 4).is_err());
        assert!(PretextBatch::new(Tensor::<f32>::zeros(vec![1, 1, 1, 8, 8]), 1).is_err());
        assert!(PretextBatch::new(frames, 1).is_ok());
    }

    #[test]
    fn single_context_frame_is_one_gru_step() {
        let m = ModelBundle::<f64>::init(tiny(), 2).unwrap();
        let frames = Tensor::from_fn(vec![1, 3, 1, 8, 8], |i| (i as f64 * 0.13).sin().abs());
        let batch = PretextBatch::new(frames, 1).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let xs = batch.frame_vars(&mut g);
        let (h, _) = encode_context(&mut g, &b, &xs, 1).unwrap();

        let mut g2 = Graph::new();
        let b2 = m.bind(&mut g2);
        let x0 = g2.leaf(batch.frame(0));
        let f0 = b2.feature_extract(&mut g2, x0).unwrap();
        let h0 = b2.initial_state(&mut g2, 1);
        let h1 = b2.conv_gru_step(&mut g2, f0, h0).unwrap();
        assert_eq!(g.value(h), g2.value(h1));
    }

    #[test]
    fn context_ignores_last_frame() {
        let m = ModelBundle::<f32>::init(tiny(), 5).unwrap();
        let mut frames = Tensor::from_fn(vec![1, 4, 1, 8, 8], |i| ((i * 7) % 11) as f32 / 11.0);
        let run = |frames: &Tensor<f32>| {
            let batch = PretextBatch::new(frames.clone(), 3).unwrap();
            let mut g = Graph::new();
            let b = m.bind(&mut g);
            let xs = batch.frame_vars(&mut g);
            let (h, _) = encode_context(&mut g, &b, &xs, 3).unwrap();
            g.value(h).clone()
        };
        let before = run(&frames);
        let last = frames.len() - 1;
        frames.data_mut()[last] = 0.999;
        assert_eq!(run(&frames), before);
    }

    #[test]
    fn zero_params_rollout_predicts_zero_and_halves_state() {
        let m = ModelBundle::<f64>::zeros(tiny()).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let h0 = g.leaf(Tensor::full(vec![1, 3, 2, 2], 8.0));
        let mut h = h0;
        let mut expected = 8.0;
        let preds = rollout(&mut g, &b, h0, 4).unwrap();
        for &p in &preds {
            assert!(g.value(p).data().iter().all(|&v| v == 0.0));
        }
        for &p in &preds[..3] {
            h = b.conv_gru_step(&mut g, p, h).unwrap();
            expected *= 0.5;
            assert!(g.value(h).data().iter().all(|&v| v == expected));
        }
    }

    #[test]
    fn single_step_rollout_is_one_prediction() {
        let m = ModelBundle::<f32>::init(tiny(), 1).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let h = g.leaf(Tensor::full(vec![2, 3, 2, 2], 0.5));
        let before = g.len();
        let preds = rollout(&mut g, &b, h, 1).unwrap();
        assert_eq!(preds.len(), 1);
        // conv, relu, conv
        assert_eq!(g.len() - before, 3);
    }
}
