//! Small encoder–decoder noise predictor over 4-channel (color + mask) inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, Graph, NodeId, ParamSet};
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::{Conv, Linear, Norm, ResBlock};
use crate::tensor::{Element, Tensor};

pub const IMAGE_CHANNELS: usize = 4;
pub const TIME_EMBED_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Channel width at full resolution; doubled at the two coarser levels.
    pub base_channels: usize,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            seed: 0,
        }
    }
}

/// Intermediate activations exposed for feature losses.
#[derive(Clone, Copy, Debug)]
pub struct Taps {
    /// Full-resolution encoder output `[N, C, H, W]`.
    pub enc1: NodeId,
    /// Half-resolution encoder output `[N, 2C, H/2, W/2]`.
    pub enc2: NodeId,
    /// Bottleneck `[N, 2C, H/4, W/4]`.
    pub mid: NodeId,
    /// Spatial mean of the bottleneck `[N, 2C]`.
    pub global: NodeId,
}

/// Anything that predicts the noise in `x_t` inside a graph.
pub trait EpsModel<E: Element = f32> {
    /// `x` is `[N, 4, H, W]`; `timesteps` holds one base timestep per item.
    fn eps_graph(&self, g: &mut Graph<E>, x: NodeId, timesteps: &[usize]) -> Result<NodeId>;

    fn predict_eps(&self, x: &Tensor<E>, timesteps: &[usize]) -> Result<Tensor<E>> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let eps = self.eps_graph(&mut g, xn, timesteps)?;
        Ok(g.value(eps).clone())
    }
}

/// What the raw network output estimates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Prediction {
    /// The noise ε directly.
    Eps,
    /// `v = √ᾱ·ε − √(1−ᾱ)·x0`; ε̂ is recovered as `√ᾱ·v̂ + √(1−ᾱ)·x_t`.
    #[default]
    V,
}

#[derive(Clone, Debug)]
pub struct DenoiserNet<E: Element = f32> {
    config: NetConfig,
    /// ᾱ(t) for `t ∈ 0..=T` when the output is a v-estimate.
    v_alpha_bars: Option<Vec<f64>>,
    params: ParamSet<E>,
    time1: Linear,
    time2: Linear,
    conv_in: Conv,
    enc1: ResBlock,
    enc2: ResBlock,
    mid: ResBlock,
    dec2: ResBlock,
    dec1: ResBlock,
    norm_out: Norm,
    conv_out: Conv,
}

/// Sinusoidal embedding `[sin(t·f_i), cos(t·f_i)]` with geometric frequencies.
pub fn timestep_embedding<E: Element>(timesteps: &[usize]) -> Tensor<E> {
    let half = TIME_EMBED_DIM / 2;
    let mut data = Vec::with_capacity(timesteps.len() * TIME_EMBED_DIM);
    for &t in timesteps {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let (sin, cos): (Vec<_>, Vec<_>) = freqs
            .map(|f| {
                let a = t as f64 * f;
                (E::from_f64_lossy(a.sin()), E::from_f64_lossy(a.cos()))
            })
            .unzip();
        data.extend(sin);
        data.extend(cos);
    }
    Tensor::from_parts(vec![timesteps.len(), TIME_EMBED_DIM], data)
}

impl<E: Element> DenoiserNet<E> {
    pub fn new(config: NetConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamSet::new();
        let c = config.base_channels;
        let td = TIME_EMBED_DIM;
        let time1 = Linear::new(&mut ps, &mut rng, "time1", td, td);
        let time2 = Linear::new(&mut ps, &mut rng, "time2", td, td);
        let conv_in = Conv::new(&mut ps, &mut rng, "conv_in", IMAGE_CHANNELS, c, 3);
        let enc1 = ResBlock::new(&mut ps, &mut rng, "enc1", c, c, Some(td));
        let enc2 = ResBlock::new(&mut ps, &mut rng, "enc2", c, 2 * c, Some(td));
        let mid = ResBlock::new(&mut ps, &mut rng, "mid", 2 * c, 2 * c, Some(td));
        let dec2 = ResBlock::new(&mut ps, &mut rng, "dec2", 4 * c, 2 * c, Some(td));
        let dec1 = ResBlock::new(&mut ps, &mut rng, "dec1", 3 * c, c, Some(td));
        let norm_out = Norm::new(&mut ps, "norm_out", c);
        let conv_out = Conv::zeros(&mut ps, "conv_out", c, IMAGE_CHANNELS, 3);
        Self {
            config,
            v_alpha_bars: None,
            params: ps,
            time1,
            time2,
            conv_in,
            enc1,
            enc2,
            mid,
            dec2,
            dec1,
            norm_out,
            conv_out,
        }
    }

    /// Rebuilds a network and loads parameter values by name.
    pub fn from_params(config: NetConfig, values: &ParamSet<E>) -> Result<Self> {
        let mut net = Self::new(config);
        if values.len() != net.params.len() {
            return Err(Error::Format {
                what: "denoiser parameters",
                detail: format!("expected {} tensors, got {}", net.params.len(), values.len()),
            });
        }
        for (_, name, t) in values.iter() {
            net.params.set(name, t.clone())?;
        }
        Ok(net)
    }

    pub fn config(&self) -> NetConfig {
        self.config
    }

    /// Switches the output to a v-estimate under `schedule`.
    pub fn with_v_prediction(mut self, schedule: &NoiseSchedule) -> Self {
        let mut table = vec![1.0];
        table.extend_from_slice(schedule.alpha_bars());
        self.v_alpha_bars = Some(table);
        self
    }

    pub fn prediction(&self) -> Prediction {
        if self.v_alpha_bars.is_some() {
            Prediction::V
        } else {
            Prediction::Eps
        }
    }

    /// ᾱ(t) of the v-prediction table, `None` in ε mode.
    pub(crate) fn v_alpha_bar(&self, t: usize) -> Option<Result<f64>> {
        self.v_alpha_bars.as_ref().map(|tab| {
            tab.get(t)
                .copied()
                .ok_or_else(|| Error::invalid(format!("timestep {t} outside 0..={}", tab.len() - 1)))
        })
    }

    pub fn params(&self) -> &ParamSet<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<E> {
        &mut self.params
    }

    pub fn cast<F: Element>(&self) -> DenoiserNet<F> {
        let mut net = DenoiserNet::from_params(self.config, &self.params.cast()).expect("same architecture");
        net.v_alpha_bars = self.v_alpha_bars.clone();
        net
    }

    /// Full forward pass returning the raw output (ε̂ or v̂) and feature taps.
    pub fn forward(
        &self,
        g: &mut Graph<E>,
        p: &BoundParams,
        x: NodeId,
        timesteps: &[usize],
    ) -> Result<(NodeId, Taps)> {
        let d = g.dims(x).to_vec();
        if d.len() != 4 || d[1] != IMAGE_CHANNELS {
            return Err(Error::shape("denoiser", format!("input {d:?}, want [N, 4, H, W]")));
        }
        if d[2] % 4 != 0 || d[3] % 4 != 0 {
            return Err(Error::shape("denoiser", format!("spatial dims {d:?} must be multiples of 4")));
        }
        if timesteps.len() != d[0] {
            return Err(Error::shape(
                "denoiser",
                format!("{} timesteps for batch {}", timesteps.len(), d[0]),
            ));
        }
        let temb = g.constant(timestep_embedding(timesteps));
        let temb = self.time1.forward(g, p, temb)?;
        let temb = g.silu(temb)?;
        let temb = self.time2.forward(g, p, temb)?;
        let temb = g.silu(temb)?;

        let h = self.conv_in.forward(g, p, x)?;
        let e1 = self.enc1.forward(g, p, h, Some(temb))?;
        let h = g.mean_pool2x(e1)?;
        let e2 = self.enc2.forward(g, p, h, Some(temb))?;
        let h = g.mean_pool2x(e2)?;
        let mid = self.mid.forward(g, p, h, Some(temb))?;
        let global = g.spatial_mean(mid)?;

        let h = g.upsample2x(mid)?;
        let h = g.concat(&[h, e2], 1)?;
        let h = self.dec2.forward(g, p, h, Some(temb))?;
        let h = g.upsample2x(h)?;
        let h = g.concat(&[h, e1], 1)?;
        let h = self.dec1.forward(g, p, h, Some(temb))?;
        let h = self.norm_out.forward(g, p, h)?;
        let h = g.silu(h)?;
        let eps = self.conv_out.forward(g, p, h)?;
        Ok((
            eps,
            Taps {
                enc1: e1,
                enc2: e2,
                mid,
                global,
            },
        ))
    }
}

impl<E: Element> DenoiserNet<E> {
    /// Maps the raw output to ε̂; the identity in ε mode.
    pub fn output_to_eps(&self, g: &mut Graph<E>, raw: NodeId, x: NodeId, timesteps: &[usize]) -> Result<NodeId> {
        if self.v_alpha_bars.is_none() {
            return Ok(raw);
        }
        let d = g.dims(x).to_vec();
        let item = d[1..].iter().product::<usize>();
        let mut a = Vec::with_capacity(timesteps.len());
        let mut b = Vec::with_capacity(timesteps.len());
        for &t in timesteps {
            let ab = self.v_alpha_bar(t).expect("v mode")?;
            a.push(E::from_f64_lossy(ab.sqrt()));
            b.push(E::from_f64_lossy((1.0 - ab).sqrt()));
        }
        let ca = g.constant(Tensor::from_fn(&d, |i| a[i / item]));
        let cb = g.constant(Tensor::from_fn(&d, |i| b[i / item]));
        let va = g.mul(raw, ca)?;
        let xb = g.mul(x, cb)?;
        g.add(va, xb)
    }
}

impl<E: Element> EpsModel<E> for DenoiserNet<E> {
    fn eps_graph(&self, g: &mut Graph<E>, x: NodeId, timesteps: &[usize]) -> Result<NodeId> {
        let p = self.params.bind_frozen(g);
        let raw = self.forward(g, &p, x, timesteps)?.0;
        self.output_to_eps(g, raw, x, timesteps)
    }
}
