//! Spatio-temporal network: convolutional feature extractor, 1×1 ConvGRU,
//! predictive head for the pretext task, and the pooled regressor head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::{Checkpoint, Payload};
use crate::diffcore::ops::conv_out_len;
use crate::diffcore::{Graph, NormMode, Real, RunningStats, Tensor, Var};
use crate::error::{Error, Result};

const EXTRACTOR_KERNEL: usize = 3;
const EXTRACTOR_PAD: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of each 3×3 extractor block.
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    /// Number of regressed intensities N.
    pub num_outputs: usize,
}

impl Default for NetworkConfig {
    /// Desk-scale network: 1×16×16 frames, three stride-2 blocks, 32×2×2 grid.
    fn default() -> Self {
        NetworkConfig {
            in_channels: 1,
            height: 16,
            width: 16,
            widths: vec![8, 16, 32],
            strides: vec![2, 2, 2],
            num_outputs: 3,
        }
    }
}

impl NetworkConfig {
    /// ResNet-18-shaped sizing: 3×128×128 input, final width 256, 8×8 grid.
    pub fn full_scale(num_outputs: usize) -> Self {
        NetworkConfig {
            in_channels: 3,
            height: 128,
            width: 128,
            widths: vec![64, 64, 128, 256],
            strides: vec![2, 2, 2, 2],
            num_outputs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "extractor needs matching non-empty widths and strides, got {} widths and {} strides",
                self.widths.len(),
                self.strides.len()
            )));
        }
        if self.in_channels == 0 || self.height == 0 || self.width == 0 || self.num_outputs == 0 {
            return Err(Error::Config("input dimensions and num_outputs must be positive".into()));
        }
        if self.widths.contains(&0) || self.strides.contains(&0) {
            return Err(Error::Config("block widths and strides must be positive".into()));
        }
        self.grid().map(|_| ())
    }

    fn grid(&self) -> Result<(usize, usize)> {
        let (mut h, mut w) = (self.height, self.width);
        for &s in &self.strides {
            h = conv_out_len(h, EXTRACTOR_KERNEL, s, EXTRACTOR_PAD)
                .ok_or_else(|| Error::Config("input too small for the extractor".into()))?;
            w = conv_out_len(w, EXTRACTOR_KERNEL, s, EXTRACTOR_PAD)
                .ok_or_else(|| Error::Config("input too small for the extractor".into()))?;
        }
        Ok((h, w))
    }

    /// `(Cf, Hf, Wf)` of the extractor output; also the GRU hidden shape.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let (h, w) = self.grid().expect("validated config");
        (*self.widths.last().expect("validated config"), h, w)
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        [self.in_channels, self.height, self.width]
    }
}

/// Named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T> Param<T> {
    /// Regressor parameters are trained only during fine-tuning.
    pub fn is_regressor(&self) -> bool {
        self.name.starts_with("c.")
    }
}

/// Parameters of extractor (`f.`), GRU (`g.`), predictive head (`p.`) and
/// regressor (`c.`), plus the regressor's batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T: Real = f32> {
    pub config: NetworkConfig,
    params: Vec<Param<T>>,
    pub norm_stats: RunningStats<T>,
}

fn layout(config: &NetworkConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let mut cin = config.in_channels;
    for (i, &w) in config.widths.iter().enumerate() {
        out.push((format!("f.conv{i}.weight"), vec![w, cin, 3, 3], Init::Kaiming(cin * 9)));
        out.push((format!("f.conv{i}.bias"), vec![w], Init::Zeros));
        out.push((format!("f.norm{i}.scale"), vec![w], Init::Ones));
        out.push((format!("f.norm{i}.shift"), vec![w], Init::Zeros));
        cin = w;
    }
    let (cf, _, _) = config.feature_shape();
    for gate in ["update", "reset", "candidate"] {
        out.push((format!("g.{gate}.weight"), vec![cf, 2 * cf, 1, 1], Init::Kaiming(2 * cf)));
        out.push((format!("g.{gate}.bias"), vec![cf], Init::Zeros));
    }
    for layer in ["conv1", "conv2"] {
        out.push((format!("p.{layer}.weight"), vec![cf, cf, 1, 1], Init::Kaiming(cf)));
        out.push((format!("p.{layer}.bias"), vec![cf], Init::Zeros));
    }
    out.push(("c.norm.gamma".into(), vec![cf], Init::Ones));
    out.push(("c.norm.beta".into(), vec![cf], Init::Zeros));
    out.push((
        "c.linear.weight".into(),
        vec![config.num_outputs, cf],
        Init::Kaiming(cf),
    ));
    out.push(("c.linear.bias".into(), vec![config.num_outputs], Init::Zeros));
    out
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Kaiming(usize),
}

impl<T: Real> ModelBundle<T> {
    /// Kaiming fan-in initialization for weights, zeros for biases.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout(&config)
            .into_iter()
            .map(|(name, shape, init)| {
                let value = match init {
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Ones => Tensor::full(shape, T::one()),
                    Init::Kaiming(fan_in) => {
                        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                        Tensor::from_fn(shape, |_| T::lit(normal.sample(&mut rng)))
                    }
                };
                Param { name, value }
            })
            .collect();
        let (cf, _, _) = config.feature_shape();
        Ok(ModelBundle {
            config,
            params,
            norm_stats: RunningStats::new(cf),
        })
    }

    /// All parameters zero (regressor norm gamma included).
    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let params = layout(&config)
            .into_iter()
            .map(|(name, shape, _)| Param {
                name,
                value: Tensor::zeros(shape),
            })
            .collect();
        let (cf, _, _) = config.feature_shape();
        Ok(ModelBundle {
            config,
            params,
            norm_stats: RunningStats::new(cf),
        })
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_param",
                format!("{name}: {:?} vs {:?}", p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelBundle<U> {
        ModelBundle {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            norm_stats: RunningStats {
                mean: self.norm_stats.mean.cast(),
                var: self.norm_stats.var.cast(),
            },
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
            && self.norm_stats.mean.is_finite()
            && self.norm_stats.var.is_finite()
    }

    /// Places every parameter on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundModel {
        BoundModel {
            vars: self.params.iter().map(|p| g.leaf(p.value.clone())).collect(),
            blocks: self.config.widths.len(),
            strides: self.config.strides.clone(),
            feature: self.config.feature_shape(),
            frame: self.config.frame_shape(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for p in &self.params {
            ck.push(p.name.clone(), Payload::from_tensor(&p.value));
        }
        ck.push("c.norm.running_mean", Payload::from_tensor(&self.norm_stats.mean));
        ck.push("c.norm.running_var", Payload::from_tensor(&self.norm_stats.var));
        ck
    }

    /// Rebuilds a bundle for `config`, naming the first tensor that is
    /// missing or whose shape disagrees with the config.
    pub fn from_checkpoint(config: NetworkConfig, ck: &Checkpoint) -> std::result::Result<Self, String> {
        let mut bundle = Self::zeros(config).map_err(|e| e.to_string())?;
        let fetch = |name: &str, shape: &[usize]| -> std::result::Result<Tensor<T>, String> {
            let payload = ck.get(name).ok_or_else(|| format!("tensor {name} missing"))?;
            let t: Tensor<T> = payload
                .to_tensor()
                .ok_or_else(|| format!("tensor {name} is not floating point"))?;
            if t.shape() != shape {
                return Err(format!(
                    "tensor {name} has shape {:?} but the network config expects {:?}",
                    t.shape(),
                    shape
                ));
            }
            Ok(t)
        };
        for p in &mut bundle.params {
            p.value = fetch(&p.name, p.value.shape())?;
        }
        let f = bundle.norm_stats.mean.shape().to_vec();
        bundle.norm_stats.mean = fetch("c.norm.running_mean", &f)?;
        bundle.norm_stats.var = fetch("c.norm.running_var", &f)?;
        Ok(bundle)
    }
}

/// Parameter leaves of a [`ModelBundle`] on one graph.
pub struct BoundModel {
    vars: Vec<Var>,
    blocks: usize,
    strides: Vec<usize>,
    feature: (usize, usize, usize),
    frame: [usize; 3],
}

impl BoundModel {
    /// Leaf variables in the bundle's parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Parameters after the extractor: GRU (0..6), predictive head (6..10),
    /// regressor (10..14).
    fn tail(&self, k: usize) -> Var {
        self.vars[4 * self.blocks + k]
    }

    /// Frames `[B,C,H,W]` to feature grid `[B,Cf,Hf,Wf]`; no pooling.
    pub fn feature_extract<T: Real>(&self, g: &mut Graph<T>, frames: Var) -> Result<Var> {
        let s = g.value(frames).shape();
        if s.len() != 4 || s[1..] != self.frame {
            return Err(Error::shape(
                "feature_extract",
                format!("frames {:?} do not match configured [B,{:?}]", s, self.frame),
            ));
        }
        let mut x = frames;
        for i in 0..self.blocks {
            let v = &self.vars[4 * i..4 * i + 4];
            x = g.conv2d(x, v[0], v[1], self.strides[i], EXTRACTOR_PAD)?;
            x = g.channel_affine(x, v[2], v[3])?;
            x = g.relu(x)?;
        }
        Ok(x)
    }

    /// Zero hidden state for a batch of `batch` sequences.
    pub fn initial_state<T: Real>(&self, g: &mut Graph<T>, batch: usize) -> Var {
        let (c, h, w) = self.feature;
        g.leaf(Tensor::zeros(vec![batch, c, h, w]))
    }

    /// One ConvGRU update with 1×1 gates:
    /// `z = σ(Wz∗[x;h])`, `r = σ(Wr∗[x;h])`, `h̃ = tanh(Wh∗[x; r⊙h])`,
    /// `h' = (1−z)⊙h + z⊙h̃`.
    pub fn conv_gru_step<T: Real>(&self, g: &mut Graph<T>, x: Var, h: Var) -> Result<Var> {
        let (xs, hs) = (g.value(x).shape(), g.value(h).shape());
        let (c, hh, ww) = self.feature;
        if xs != hs || xs.len() != 4 || xs[1..] != [c, hh, ww] {
            return Err(Error::shape(
                "conv_gru_step",
                format!("input {:?}, hidden {:?}, expected [B,{c},{hh},{ww}]", xs, hs),
            ));
        }
        let xh = g.concat_channels(x, h)?;
        let z = g.conv2d(xh, self.tail(0), self.tail(1), 1, 0)?;
        let z = g.sigmoid(z)?;
        let r = g.conv2d(xh, self.tail(2), self.tail(3), 1, 0)?;
        let r = g.sigmoid(r)?;
        let rh = g.mul(r, h)?;
        let xrh = g.concat_channels(x, rh)?;
        let cand = g.conv2d(xrh, self.tail(4), self.tail(5), 1, 0)?;
        let cand = g.tanh(cand)?;
        let delta = g.sub(cand, h)?;
        let step = g.mul(z, delta)?;
        g.add(h, step)
    }

    /// conv1×1 → relu → conv1×1, hidden state to predicted feature grid.
    pub fn predictive_step<T: Real>(&self, g: &mut Graph<T>, h: Var) -> Result<Var> {
        let (c, hh, ww) = self.feature;
        let s = g.value(h).shape();
        if s.len() != 4 || s[1..] != [c, hh, ww] {
            return Err(Error::shape(
                "predictive_step",
                format!("hidden {:?}, expected [B,{c},{hh},{ww}]", s),
            ));
        }
        let y = g.conv2d(h, self.tail(6), self.tail(7), 1, 0)?;
        let y = g.relu(y)?;
        g.conv2d(y, self.tail(8), self.tail(9), 1, 0)
    }

    /// Pool → batch norm → linear, giving `[B,N]` intensities.
    pub fn regress_head<T: Real>(
        &self,
        g: &mut Graph<T>,
        h: Var,
        stats: &mut RunningStats<T>,
        mode: NormMode,
    ) -> Result<Var> {
        let pooled = g.global_avg_pool(h)?;
        let normed = g.batch_norm(pooled, self.tail(10), self.tail(11), stats, mode)?;
        g.affine(normed, self.tail(12), self.tail(13))
    }
}
