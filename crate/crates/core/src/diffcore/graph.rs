//! Reverse-mode tape.
//!
//! A [`Graph`] records every forward result together with a closure that maps
//! the upstream gradient to one gradient per parent. Nodes are appended in
//! evaluation order, so walking the tape backwards is a valid topological
//! order.

use super::ops::{self, Activation, NormMode, RunningStats};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Tensor<T>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A graph that keeps forward values only. `backward` on it yields zeros.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Appends a custom differentiable node. `backward` must return one
    /// gradient per entry of `parents`, in order.
    pub fn push_op(
        &mut self,
        op: &str,
        value: Tensor<T>,
        parents: &[Var],
        backward: impl Fn(&Tensor<T>) -> Vec<Tensor<T>> + 'static,
    ) -> Result<Var> {
        value.ensure_finite(op)?;
        let (parents, backward): (Vec<usize>, Option<BackwardFn<T>>) = if self.record {
            (parents.iter().map(|p| p.0).collect(), Some(Box::new(backward)))
        } else {
            (Vec::new(), None)
        };
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Gradient of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(bw) = &node.backward {
                let parent_grads = bw(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                g.ensure_finite(&format!("gradient of node {i}"))?;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x).clone(), self.value(w).clone());
        let out = ops::conv2d(&xv, &wv, self.value(b), stride, padding)?;
        self.push_op("conv2d", out, &[x, w, b], move |g| {
            let (gx, gw, gb) =
                ops::conv2d_backward(&xv, &wv, g, stride, padding).expect("shapes fixed at forward");
            vec![gx, gw, gb]
        })
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let y = ops::activation(self.value(x), kind);
        let saved = y.clone();
        self.push_op("activation", y, &[x], move |g| {
            vec![ops::activation_backward(&saved, g, kind)]
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push_op("add", out, &[a, b], |g| vec![g.clone(), g.clone()])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push_op("sub", out, &[a, b], |g| vec![g.clone(), g.map(|v| -v)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let out = av.zip_map(&bv, |x, y| x * y);
        self.push_op("mul", out, &[a, b], move |g| {
            vec![g.zip_map(&bv, |g, y| g * y), g.zip_map(&av, |g, x| g * x)]
        })
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let out = Tensor::scalar(self.value(x).sum());
        self.push_op("sum", out, &[x], move |g| vec![Tensor::full(shape.clone(), g.item())])
    }

    /// `Σ x ⊙ weights` for a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        if self.value(x).shape() != weights.shape() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{:?} vs {:?}", self.value(x).shape(), weights.shape()),
            ));
        }
        let w = weights.clone();
        let s: T = self
            .value(x)
            .data()
            .iter()
            .zip(w.data())
            .map(|(&a, &b)| a * b)
            .sum();
        self.push_op("weighted_sum", Tensor::scalar(s), &[x], move |g| {
            let k = g.item();
            vec![w.map(|v| v * k)]
        })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        let c1 = self.value(a).shape()[1];
        self.push_op("concat_channels", out, &[a, b], move |g| {
            let (ga, gb) = ops::split_channels(g, c1);
            vec![ga, gb]
        })
    }

    /// Concatenates along the leading (batch) axis.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let first = tensors
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let inner = first.shape()[1..].to_vec();
        let mut sizes = Vec::with_capacity(tensors.len());
        let mut data = Vec::new();
        for t in &tensors {
            if t.shape()[1..] != inner[..] {
                return Err(Error::shape(
                    "concat_batch",
                    format!("{:?} vs {:?}", t.shape(), first.shape()),
                ));
            }
            sizes.push(t.len());
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![tensors.iter().map(|t| t.shape()[0]).sum()];
        shape.extend_from_slice(&inner);
        let shapes: Vec<Vec<usize>> = tensors.iter().map(|t| t.shape().to_vec()).collect();
        self.push_op("concat_batch", Tensor::from_parts(shape, data), parts, move |g| {
            let mut off = 0;
            shapes
                .iter()
                .zip(&sizes)
                .map(|(s, &n)| {
                    let part = Tensor::from_parts(s.clone(), g.data()[off..off + n].to_vec());
                    off += n;
                    part
                })
                .collect()
        })
    }

    pub fn stack_axis1(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::stack_axis1(&tensors)?;
        self.push_op("stack_axis1", out, parts, ops::unstack_axis1)
    }

    /// Rows `start..start+len` of the leading (batch) axis.
    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let full = v.shape().to_vec();
        if full.is_empty() || len == 0 || start + len > full[0] {
            return Err(Error::shape(
                "slice_batch",
                format!("rows {start}..{} of {:?}", start + len, full),
            ));
        }
        let inner: usize = full[1..].iter().product();
        let data = v.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = full.clone();
        shape[0] = len;
        self.push_op("slice_batch", Tensor::from_parts(shape, data), &[x], move |g| {
            let mut out = Tensor::zeros(full.clone());
            out.data_mut()[start * inner..(start + len) * inner].copy_from_slice(g.data());
            vec![out]
        })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(x))?;
        let shape = self.value(x).shape().to_vec();
        self.push_op("global_avg_pool", out, &[x], move |g| {
            vec![ops::global_avg_pool_backward(&shape, g)]
        })
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: NormMode,
    ) -> Result<Var> {
        let gv = self.value(gamma).clone();
        let (out, cache) = ops::batch_norm(
            self.value(x),
            &gv,
            self.value(beta),
            stats,
            mode,
            T::lit(ops::BN_EPS),
        )?;
        self.push_op("batch_norm", out, &[x, gamma, beta], move |g| {
            let (gx, gg, gb) = ops::batch_norm_backward(&cache, &gv, g);
            vec![gx, gg, gb]
        })
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x).clone(), self.value(w).clone());
        let out = ops::affine(&xv, &wv, self.value(b))?;
        self.push_op("affine", out, &[x, w, b], move |g| {
            let (gx, gw, gb) = ops::affine_backward(&xv, &wv, g);
            vec![gx, gw, gb]
        })
    }

    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x).clone(), self.value(scale).clone());
        let out = ops::channel_affine(&xv, &sv, self.value(shift))?;
        self.push_op("channel_affine", out, &[x, scale, shift], move |g| {
            let (gx, gs, gt) = ops::channel_affine_backward(&xv, &sv, g);
            vec![gx, gs, gt]
        })
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}
