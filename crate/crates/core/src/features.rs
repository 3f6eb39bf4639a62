//! Feature extractors standing in for pretrained perceptual networks.
//!
//! Both kinds expose a list of spatial feature maps and a global token (the
//! spatial mean of the deepest map).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamSet};
use crate::diffusion::net::{DenoiserNet, IMAGE_CHANNELS};
use crate::error::{Error, Result};
use crate::labeled::COLOR_CHANNELS;
use crate::nn::Conv;
use crate::tensor::{Element, Tensor};

pub const SEEDED_WIDTHS: [usize; 3] = [8, 16, 32];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorKind {
    #[default]
    SeededRandomConv,
    DenoiserTaps,
}

impl std::str::FromStr for ExtractorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seeded-random-conv" => Ok(Self::SeededRandomConv),
            "denoiser-taps" => Ok(Self::DenoiserTaps),
            _ => Err(Error::Config(format!("unknown extractor `{s}`"))),
        }
    }
}

/// Three 3×3 conv layers with SiLU, mean-pooled between layers, over the
/// color channels. Weights are fixed by the seed.
#[derive(Clone, Debug)]
pub struct SeededConv<E: Element = f32> {
    seed: u64,
    params: ParamSet<E>,
    convs: Vec<Conv>,
}

impl<E: Element> SeededConv<E> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut cin = COLOR_CHANNELS;
        let convs = SEEDED_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv::new(&mut params, &mut rng, &format!("feat{i}"), cin, w, 3);
                cin = w;
                c
            })
            .collect();
        Self { seed, params, convs }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

#[derive(Clone, Debug)]
pub enum FeatureExtractor<E: Element = f32> {
    Seeded(SeededConv<E>),
    /// Encoder taps of a denoiser evaluated at a fixed timestep.
    DenoiserTaps { net: DenoiserNet<E>, timestep: usize },
}

/// Nodes produced by one extractor pass.
#[derive(Clone, Debug)]
pub struct Features {
    /// `[N, C_l, H_l, W_l]` per layer, shallow to deep.
    pub layers: Vec<NodeId>,
    /// `[N, D]` spatial mean of the deepest layer.
    pub token: NodeId,
}

impl<E: Element> FeatureExtractor<E> {
    pub fn seeded(seed: u64) -> Self {
        Self::Seeded(SeededConv::new(seed))
    }

    pub fn denoiser_taps(net: DenoiserNet<E>, timestep: usize) -> Self {
        Self::DenoiserTaps { net, timestep }
    }

    pub fn kind(&self) -> ExtractorKind {
        match self {
            Self::Seeded(_) => ExtractorKind::SeededRandomConv,
            Self::DenoiserTaps { .. } => ExtractorKind::DenoiserTaps,
        }
    }

    /// Channels the extractor reads: 3 for seeded, 4 for denoiser taps.
    pub fn in_channels(&self) -> usize {
        match self {
            Self::Seeded(_) => COLOR_CHANNELS,
            Self::DenoiserTaps { .. } => IMAGE_CHANNELS,
        }
    }

    pub fn token_dim(&self) -> usize {
        match self {
            Self::Seeded(_) => SEEDED_WIDTHS[2],
            Self::DenoiserTaps { net, .. } => 2 * net.config().base_channels,
        }
    }

    pub fn cast<F: Element>(&self) -> FeatureExtractor<F> {
        match self {
            Self::Seeded(s) => FeatureExtractor::Seeded(SeededConv {
                seed: s.seed,
                params: s.params.cast(),
                convs: s.convs.clone(),
            }),
            Self::DenoiserTaps { net, timestep } => FeatureExtractor::DenoiserTaps {
                net: net.cast(),
                timestep: *timestep,
            },
        }
    }

    /// Selects the channels this extractor reads from a 4-channel node.
    pub fn select_input(&self, g: &mut Graph<E>, x4: NodeId) -> Result<NodeId> {
        match self {
            Self::Seeded(_) => g.slice(x4, 1, 0, COLOR_CHANNELS),
            Self::DenoiserTaps { .. } => Ok(x4),
        }
    }

    /// Runs the extractor on `x`, which must have [`Self::in_channels`]
    /// channels and spatial dims divisible by 4.
    pub fn features(&self, g: &mut Graph<E>, x: NodeId) -> Result<Features> {
        let d = g.dims(x).to_vec();
        if d.len() != 4 || d[1] != self.in_channels() || d[2] % 4 != 0 || d[3] % 4 != 0 {
            return Err(Error::shape(
                "features",
                format!("{d:?}, want [N, {}, H, W] with H, W multiples of 4", self.in_channels()),
            ));
        }
        match self {
            Self::Seeded(s) => {
                let p = s.params.bind_frozen(g);
                let mut layers = Vec::with_capacity(s.convs.len());
                let mut h = x;
                for (i, conv) in s.convs.iter().enumerate() {
                    if i > 0 {
                        h = g.mean_pool2x(h)?;
                    }
                    h = conv.forward(g, &p, h)?;
                    h = g.silu(h)?;
                    layers.push(h);
                }
                let token = g.spatial_mean(h)?;
                Ok(Features { layers, token })
            }
            Self::DenoiserTaps { net, timestep } => {
                let p = net.params().bind_frozen(g);
                let (_, taps) = net.forward(g, &p, x, &vec![*timestep; d[0]])?;
                Ok(Features {
                    layers: vec![taps.enc1, taps.enc2, taps.mid],
                    token: taps.global,
                })
            }
        }
    }

    /// Global tokens `[N, D]` for a batch.
    pub fn tokens(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let f = self.features(&mut g, xn)?;
        Ok(g.value(f.token).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::net::NetConfig;

    #[test]
    fn seeded_is_deterministic_and_shaped() {
        let a = FeatureExtractor::<f32>::seeded(3);
        let b = FeatureExtractor::<f32>::seeded(3);
        let c = FeatureExtractor::<f32>::seeded(4);
        let x = Tensor::from_fn(&[2, 3, 8, 8], |i| ((i * 13) % 7) as f32 / 7.0 - 0.5);
        let ta = a.tokens(&x).unwrap();
        assert_eq!(ta.dims(), &[2, 32]);
        assert_eq!(ta, b.tokens(&x).unwrap());
        assert_ne!(ta, c.tokens(&x).unwrap());

        let mut g = Graph::new();
        let xn = g.constant(x);
        let f = a.features(&mut g, xn).unwrap();
        let dims: Vec<Vec<usize>> = f.layers.iter().map(|&l| g.dims(l).to_vec()).collect();
        assert_eq!(dims, vec![vec![2, 8, 8, 8], vec![2, 16, 4, 4], vec![2, 32, 2, 2]]);
    }

    #[test]
    fn taps_mode_reads_four_channels() {
        let net = DenoiserNet::<f32>::new(NetConfig { base_channels: 4, seed: 1 });
        let ext = FeatureExtractor::denoiser_taps(net, 1);
        assert_eq!(ext.in_channels(), 4);
        assert_eq!(ext.token_dim(), 8);
        let x = Tensor::from_fn(&[1, 4, 8, 8], |i| (i as f32 * 0.1).sin());
        assert_eq!(ext.tokens(&x).unwrap().dims(), &[1, 8]);
        assert!(ext.tokens(&Tensor::zeros(&[1, 3, 8, 8])).is_err());
    }
}
