//! Small building blocks shared by the denoiser, the segmentation net and
//! the seeded feature extractor.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BoundParams, Graph, NodeId, ParamIdx, ParamSet};
use crate::error::Result;
use crate::tensor::{Element, Tensor};

fn uniform<E: Element>(rng: &mut ChaCha8Rng, dims: &[usize], bound: f64) -> Tensor<E> {
    Tensor::from_fn(dims, |_| E::from_f64_lossy(rng.random_range(-bound..bound)))
}

#[derive(Clone, Debug)]
pub struct Conv {
    w: ParamIdx,
    b: ParamIdx,
    pad: usize,
}

impl Conv {
    /// Square `k×k` kernel with variance-preserving uniform init.
    pub fn new<E: Element>(
        ps: &mut ParamSet<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Self {
        let bound = (3.0 / (cin * k * k) as f64).sqrt();
        let w = ps.add(format!("{name}.w"), uniform(rng, &[cout, cin, k, k], bound));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b, pad: k / 2 }
    }

    /// Zero-initialized weights, for output heads that should start silent.
    pub fn zeros<E: Element>(ps: &mut ParamSet<E>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let w = ps.add(format!("{name}.w"), Tensor::zeros(&[cout, cin, k, k]));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b, pad: k / 2 }
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<E>, p: &BoundParams, x: NodeId) -> Result<NodeId> {
        g.conv2d(x, p.node(self.w), Some(p.node(self.b)), 1, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamIdx,
    b: ParamIdx,
}

impl Linear {
    pub fn new<E: Element>(
        ps: &mut ParamSet<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        let bound = (3.0 / din as f64).sqrt();
        let w = ps.add(format!("{name}.w"), uniform(rng, &[din, dout], bound));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[dout]));
        Self { w, b }
    }

    /// `x [N, din] -> [N, dout]`.
    pub fn forward<E: Element>(&self, g: &mut Graph<E>, p: &BoundParams, x: NodeId) -> Result<NodeId> {
        let y = g.matmul(x, p.node(self.w))?;
        g.add_row_bias(y, p.node(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    gamma: ParamIdx,
    beta: ParamIdx,
}

impl Norm {
    pub fn new<E: Element>(ps: &mut ParamSet<E>, name: &str, channels: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
        }
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<E>, p: &BoundParams, x: NodeId) -> Result<NodeId> {
        g.group_norm(x, p.node(self.gamma), p.node(self.beta))
    }
}

/// Pre-activation residual block: GN → SiLU → conv, optional per-channel
/// conditioning bias, GN → SiLU → conv, plus a 1×1 projection skip when the
/// channel count changes.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    cond: Option<Linear>,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    pub fn new<E: Element>(
        ps: &mut ParamSet<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        cond_dim: Option<usize>,
    ) -> Self {
        Self {
            norm1: Norm::new(ps, &format!("{name}.norm1"), cin),
            conv1: Conv::new(ps, rng, &format!("{name}.conv1"), cin, cout, 3),
            cond: cond_dim.map(|d| Linear::new(ps, rng, &format!("{name}.cond"), d, cout)),
            norm2: Norm::new(ps, &format!("{name}.norm2"), cout),
            conv2: Conv::new(ps, rng, &format!("{name}.conv2"), cout, cout, 3),
            skip: (cin != cout).then(|| Conv::new(ps, rng, &format!("{name}.skip"), cin, cout, 1)),
        }
    }

    pub fn forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        p: &BoundParams,
        x: NodeId,
        cond: Option<NodeId>,
    ) -> Result<NodeId> {
        let h = self.norm1.forward(g, p, x)?;
        let h = g.silu(h)?;
        let mut h = self.conv1.forward(g, p, h)?;
        if let (Some(layer), Some(c)) = (&self.cond, cond) {
            let bias = layer.forward(g, p, c)?;
            h = g.add_channel_bias(h, bias)?;
        }
        let h = self.norm2.forward(g, p, h)?;
        let h = g.silu(h)?;
        let h = self.conv2.forward(g, p, h)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(g, p, x)?,
            None => x,
        };
        g.add(h, skip)
    }
}
