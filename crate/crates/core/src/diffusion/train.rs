use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, Graph, NodeId, ParamSet};
use crate::diffusion::net::{DenoiserNet, NetConfig, Prediction};
use crate::diffusion::sampler::gaussian;
use crate::diffusion::schedule::{NoiseSchedule, RespacedSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::labeled::LabeledImage;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleKind,
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub respaced_len: usize,
    pub skip: usize,
    pub base_channels: usize,
    pub prediction: Prediction,
    /// Per-item loss weight `min(SNR, γ)/SNR`; `None` weights every timestep equally.
    pub min_snr_gamma: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            iterations: 3000,
            lr: 1e-3,
            weight_decay: 0.0,
            schedule: ScheduleKind::Cosine,
            timesteps: 100,
            beta_min: 1e-3,
            beta_max: 0.2,
            respaced_len: 50,
            skip: 20,
            base_channels: 8,
            prediction: Prediction::V,
            min_snr_gamma: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("iterations", self.iterations),
            ("timesteps", self.timesteps),
            ("respaced_len", self.respaced_len),
            ("base_channels", self.base_channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("lr must be positive and weight_decay non-negative".into()));
        }
        if self.min_snr_gamma.is_some_and(|g| !(g > 0.0)) {
            return Err(Error::Config("min_snr_gamma must be positive".into()));
        }
        self.respaced()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule, self.timesteps, self.beta_min, self.beta_max)
    }

    pub fn respaced(&self) -> Result<RespacedSchedule> {
        RespacedSchedule::new(self.schedule()?, self.respaced_len, self.skip)
    }

    /// A fresh network with this config's architecture and output mode.
    pub fn build_net(&self) -> Result<DenoiserNet<f32>> {
        self.with_prediction(DenoiserNet::new(self.net_config()))
    }

    pub(crate) fn with_prediction(&self, net: DenoiserNet<f32>) -> Result<DenoiserNet<f32>> {
        Ok(match self.prediction {
            Prediction::Eps => net,
            Prediction::V => net.with_v_prediction(&self.schedule()?),
        })
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            base_channels: self.base_channels,
            seed: self.seed,
        }
    }
}

/// A network that can be optimized with the noise-prediction objective.
pub trait TrainableEps<E: Element = f32> {
    fn params(&self) -> &ParamSet<E>;
    fn params_mut(&mut self) -> &mut ParamSet<E>;
    /// Raw output; compared against ε or v according to [`Self::prediction`].
    fn forward_train(&self, g: &mut Graph<E>, p: &BoundParams, x: NodeId, timesteps: &[usize]) -> Result<NodeId>;

    fn prediction(&self) -> Prediction {
        Prediction::Eps
    }
}

impl<E: Element> TrainableEps<E> for DenoiserNet<E> {
    fn params(&self) -> &ParamSet<E> {
        DenoiserNet::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamSet<E> {
        DenoiserNet::params_mut(self)
    }

    fn forward_train(&self, g: &mut Graph<E>, p: &BoundParams, x: NodeId, timesteps: &[usize]) -> Result<NodeId> {
        Ok(self.forward(g, p, x, timesteps)?.0)
    }

    fn prediction(&self) -> Prediction {
        DenoiserNet::prediction(self)
    }
}

/// Per-item timesteps uniform on `1..=T` and standard normal noise.
pub fn draw_training_noise<R: Rng + ?Sized>(
    dims: &[usize],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> (Vec<usize>, Tensor<f32>) {
    let ts = (0..dims[0])
        .map(|_| rng.random_range(1..=schedule.steps()))
        .collect();
    (ts, gaussian(dims, rng))
}

/// `min(SNR(t), γ)/SNR(t)` per timestep, or all ones without `γ`.
pub fn snr_weights(schedule: &NoiseSchedule, timesteps: &[usize], gamma: Option<f64>) -> Result<Vec<f64>> {
    timesteps
        .iter()
        .map(|&t| {
            let Some(gamma) = gamma else { return Ok(1.0) };
            let ab = schedule.alpha_bar(t)?;
            let snr = ab / (1.0 - ab).max(f64::MIN_POSITIVE);
            Ok(if snr > gamma { gamma / snr } else { 1.0 })
        })
        .collect()
}

/// Forms `x_t` per item and takes one AdamW step on `mean((ε − ε_θ(x_t, t))²)`,
/// or on the v-error for a v-predicting network.
/// On a non-finite loss the parameters are left untouched.
pub fn train_step_with_noise<M: TrainableEps<f32> + ?Sized>(
    net: &mut M,
    batch: &Tensor<f32>,
    timesteps: &[usize],
    eps: &Tensor<f32>,
    schedule: &NoiseSchedule,
    lr: f64,
    weight_decay: f64,
) -> Result<f64> {
    weighted_step(net, batch, timesteps, eps, None, schedule, lr, weight_decay)
}

/// [`train_step_with_noise`] with item `i`'s squared error scaled by `weights[i]`.
#[allow(clippy::too_many_arguments)]
pub fn weighted_step<M: TrainableEps<f32> + ?Sized>(
    net: &mut M,
    batch: &Tensor<f32>,
    timesteps: &[usize],
    eps: &Tensor<f32>,
    weights: Option<&[f64]>,
    schedule: &NoiseSchedule,
    lr: f64,
    weight_decay: f64,
) -> Result<f64> {
    let d = batch.dims();
    if d.len() != 4 || eps.dims() != d || timesteps.len() != d[0] || weights.is_some_and(|w| w.len() != d[0]) {
        return Err(Error::shape(
            "train_step",
            format!("batch {d:?}, eps {:?}, {} timesteps", eps.dims(), timesteps.len()),
        ));
    }
    let item = d[1] * d[2] * d[3];
    let v_mode = net.prediction() == Prediction::V;
    let mut xt = Vec::with_capacity(batch.numel());
    let mut v = Vec::with_capacity(if v_mode { batch.numel() } else { 0 });
    for (i, &t) in timesteps.iter().enumerate() {
        let ab = schedule.alpha_bar(t)?;
        let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let x0 = &batch.data()[i * item..(i + 1) * item];
        let e = &eps.data()[i * item..(i + 1) * item];
        xt.extend(x0.iter().zip(e).map(|(&x, &n)| a * x + b * n));
        if v_mode {
            v.extend(x0.iter().zip(e).map(|(&x, &n)| a * n - b * x));
        }
    }
    let mut g = Graph::new();
    let p = net.params().bind(&mut g);
    let x = g.constant(Tensor::new(d.to_vec(), xt)?);
    let target = g.constant(if v_mode { Tensor::new(d.to_vec(), v)? } else { eps.clone() });
    let pred = net.forward_train(&mut g, &p, x, timesteps)?;
    let loss = match weights {
        None => g.mse(pred, target)?,
        Some(w) => {
            let scale = Tensor::from_fn(d, |i| w[i / item] as f32);
            let diff = g.sub(pred, target)?;
            let sq = g.square(diff)?;
            let scale = g.constant(scale);
            let weighted = g.mul(sq, scale)?;
            g.mean(weighted)?
        }
    };
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = g.backward(loss)?;
    let grads = p.collect(&grads);
    net.params_mut().adamw_step(&grads, lr, weight_decay)?;
    Ok(value)
}

pub fn train_step<M: TrainableEps<f32> + ?Sized, R: Rng + ?Sized>(
    net: &mut M,
    batch: &Tensor<f32>,
    schedule: &NoiseSchedule,
    rng: &mut R,
    lr: f64,
    weight_decay: f64,
) -> Result<f64> {
    let (ts, eps) = draw_training_noise(batch.dims(), schedule, rng);
    train_step_with_noise(net, batch, &ts, &eps, schedule, lr, weight_decay)
}

/// Runs `cfg.iterations` steps over shuffled mini-batches and returns the
/// per-step losses. `progress` is called after every step.
pub fn train<R: Rng + ?Sized>(
    net: &mut DenoiserNet<f32>,
    data: &[LabeledImage],
    cfg: &TrainConfig,
    rng: &mut R,
    mut progress: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if net.prediction() != cfg.prediction {
        return Err(Error::Config(format!(
            "network predicts {:?} but the config says {:?}",
            net.prediction(),
            cfg.prediction
        )));
    }
    let schedule = cfg.schedule()?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut picked = Vec::with_capacity(cfg.batch_size);
        while picked.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            picked.push(&data[order[cursor]]);
            cursor += 1;
        }
        let batch = crate::labeled::batch(picked)?;
        let (ts, eps) = draw_training_noise(batch.dims(), &schedule, rng);
        let w = cfg.min_snr_gamma.map(|g| snr_weights(&schedule, &ts, Some(g))).transpose()?;
        let loss = weighted_step(net, &batch, &ts, &eps, w.as_deref(), &schedule, cfg.lr, cfg.weight_decay)?;
        progress(it, loss);
        losses.push(loss);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamIdx;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Returns a fixed tensor as its prediction, with one unused parameter.
    struct Oracle {
        eps: Tensor<f32>,
        params: ParamSet<f32>,
        w: ParamIdx,
    }

    impl TrainableEps<f32> for Oracle {
        fn params(&self) -> &ParamSet<f32> {
            &self.params
        }
        fn params_mut(&mut self) -> &mut ParamSet<f32> {
            &mut self.params
        }
        fn forward_train(&self, g: &mut Graph<f32>, p: &BoundParams, _x: NodeId, _t: &[usize]) -> Result<NodeId> {
            let _ = p.node(self.w);
            Ok(g.constant(self.eps.clone()))
        }
    }

    fn toy_batch(n: usize, size: usize) -> Tensor<f32> {
        Tensor::from_fn(&[n, 4, size, size], |i| (((i * 7919) % 200) as f32 / 100.0) - 1.0)
    }

    #[test]
    fn oracle_prediction_gives_zero_loss() {
        let sched = NoiseSchedule::new(ScheduleKind::Linear, 10, 1e-3, 0.2).unwrap();
        let batch = toy_batch(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (ts, eps) = draw_training_noise(batch.dims(), &sched, &mut rng.clone());
        let mut ps = ParamSet::new();
        let w = ps.add("w", Tensor::scalar(0.7));
        let mut oracle = Oracle { eps, params: ps, w };
        let loss = train_step(&mut oracle, &batch, &sched, &mut rng, 1e-2, 0.0).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(oracle.params.get(w).item(), 0.7);
        let _ = ts;
    }

    #[test]
    fn zero_output_init_gives_unit_loss() {
        let sched = NoiseSchedule::new(ScheduleKind::Cosine, 100, 1e-3, 0.2).unwrap();
        let mut net = DenoiserNet::new(NetConfig { base_channels: 8, seed: 0 });
        let batch = toy_batch(16, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let loss = train_step(&mut net, &batch, &sched, &mut rng, 0.0, 0.0).unwrap();
        // Mean of 4096 squared standard normals: 1 ± ~0.03.
        assert!((loss - 1.0).abs() < 0.1, "{loss}");
    }

    /// A v-mode oracle that outputs the exact v target trains at zero loss.
    struct VOracle(Oracle);

    impl TrainableEps<f32> for VOracle {
        fn params(&self) -> &ParamSet<f32> {
            self.0.params()
        }
        fn params_mut(&mut self) -> &mut ParamSet<f32> {
            self.0.params_mut()
        }
        fn forward_train(&self, g: &mut Graph<f32>, p: &BoundParams, x: NodeId, t: &[usize]) -> Result<NodeId> {
            self.0.forward_train(g, p, x, t)
        }
        fn prediction(&self) -> Prediction {
            Prediction::V
        }
    }

    #[test]
    fn v_mode_targets_v() {
        let sched = NoiseSchedule::new(ScheduleKind::Cosine, 10, 1e-3, 0.2).unwrap();
        let batch = toy_batch(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (ts, eps) = draw_training_noise(batch.dims(), &sched, &mut rng);
        let item = batch.numel() / 2;
        let v = Tensor::from_fn(batch.dims(), |i| {
            let ab = sched.alpha_bar(ts[i / item]).unwrap();
            ab.sqrt() as f32 * eps.data()[i] - (1.0 - ab).sqrt() as f32 * batch.data()[i]
        });
        let mut ps = ParamSet::new();
        let w = ps.add("w", Tensor::scalar(0.7));
        let mut oracle = VOracle(Oracle { eps: v, params: ps, w });
        let loss = train_step_with_noise(&mut oracle, &batch, &ts, &eps, &sched, 1e-2, 0.0).unwrap();
        assert!(loss < 1e-12, "{loss}");
    }

    #[test]
    fn snr_weights_cap_low_noise_steps() {
        let sched = NoiseSchedule::new(ScheduleKind::Cosine, 100, 1e-3, 0.2).unwrap();
        let w = snr_weights(&sched, &[1, 50, 100], Some(5.0)).unwrap();
        let ab = sched.alpha_bar(1).unwrap();
        assert!((w[0] - 5.0 * (1.0 - ab) / ab).abs() < 1e-12);
        assert_eq!(&w[1..], &[1.0, 1.0]);
        assert_eq!(snr_weights(&sched, &[1, 2], None).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn mismatched_prediction_is_rejected() {
        let cfg = TrainConfig { iterations: 1, prediction: Prediction::V, ..TrainConfig::default() };
        let mut net = DenoiserNet::new(cfg.net_config());
        let img = crate::labeled::LabeledImage::new(toy_batch(1, 8).reshape(&[4, 8, 8]).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(train(&mut net, &[img], &cfg, &mut rng, |_, _| {}).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            skip: 50,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
