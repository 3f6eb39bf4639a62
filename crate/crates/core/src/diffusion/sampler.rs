//! Forward noising, reverse denoising steps and full-chain sampling.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffusion::net::EpsModel;
use crate::diffusion::schedule::{NoiseSchedule, RespacedSchedule, StepCoeffs};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Variance of the noise injected by a reverse step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMode {
    /// Posterior variance β̃.
    #[default]
    FixedSmall,
    /// β.
    FixedLarge,
    /// Deterministic chain.
    None,
}

impl std::str::FromStr for VarianceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed-small" => Ok(Self::FixedSmall),
            "fixed-large" => Ok(Self::FixedLarge),
            "none" => Ok(Self::None),
            other => Err(Error::invalid(format!("unknown variance mode {other}"))),
        }
    }
}

impl std::fmt::Display for VarianceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::FixedSmall => "fixed-small",
            Self::FixedLarge => "fixed-large",
            Self::None => "none",
        })
    }
}

pub fn gaussian<E: Element, R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Tensor<E> {
    Tensor::from_fn(dims, |_| E::from_f64_lossy(rng.sample::<f64, _>(StandardNormal)))
}

fn combine<E: Element>(a: &Tensor<E>, ca: f64, b: &Tensor<E>, cb: f64) -> Result<Tensor<E>> {
    let (ca, cb) = (E::from_f64_lossy(ca), E::from_f64_lossy(cb));
    a.zip_map(b, |x, y| ca * x + cb * y)
}

/// `√ᾱ·x0 + √(1−ᾱ)·ε` for an explicit ᾱ.
pub fn noise_to<E: Element>(x0: &Tensor<E>, eps: &Tensor<E>, alpha_bar: f64) -> Result<Tensor<E>> {
    if x0.dims() != eps.dims() {
        return Err(Error::shape(
            "forward_sample",
            format!("{:?} vs {:?}", x0.dims(), eps.dims()),
        ));
    }
    combine(x0, alpha_bar.sqrt(), eps, (1.0 - alpha_bar).sqrt())
}

/// Samples `x_t` from `x0` in closed form; `t = 0` returns `x0`.
pub fn forward_sample<E: Element>(
    x0: &Tensor<E>,
    t: usize,
    eps: &Tensor<E>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<E>> {
    noise_to(x0, eps, schedule.alpha_bar(t)?)
}

/// `μ = (x_t − β/√(1−ᾱ)·ε̂)/√α`.
pub fn predict_mean<E: Element>(x_t: &Tensor<E>, step: &StepCoeffs, eps_hat: &Tensor<E>) -> Result<Tensor<E>> {
    if x_t.dims() != eps_hat.dims() {
        return Err(Error::shape(
            "predict_mean",
            format!("{:?} vs {:?}", x_t.dims(), eps_hat.dims()),
        ));
    }
    let inv_sqrt_alpha = 1.0 / step.alpha().sqrt();
    let eps_coef = if step.beta == 0.0 {
        0.0
    } else {
        step.beta / (1.0 - step.alpha_bar).sqrt()
    };
    combine(x_t, inv_sqrt_alpha, eps_hat, -eps_coef * inv_sqrt_alpha)
}

/// Clean-image estimate `(x_t − √(1−ᾱ)·ε̂)/√ᾱ` without clamping.
pub fn tweedie_x0_unclamped<E: Element>(x_t: &Tensor<E>, alpha_bar: f64, eps_hat: &Tensor<E>) -> Result<Tensor<E>> {
    if alpha_bar <= 0.0 {
        return Err(Error::invalid("Tweedie estimate needs alpha_bar > 0"));
    }
    if x_t.dims() != eps_hat.dims() {
        return Err(Error::shape(
            "tweedie_x0",
            format!("{:?} vs {:?}", x_t.dims(), eps_hat.dims()),
        ));
    }
    let inv = 1.0 / alpha_bar.sqrt();
    combine(x_t, inv, eps_hat, -(1.0 - alpha_bar).sqrt() * inv)
}

pub const TWEEDIE_CLAMP: f64 = 1.5;

/// Clean-image estimate clamped to `[-1.5, 1.5]`.
pub fn tweedie_x0<E: Element>(x_t: &Tensor<E>, alpha_bar: f64, eps_hat: &Tensor<E>) -> Result<Tensor<E>> {
    let lim = E::from_f64_lossy(TWEEDIE_CLAMP);
    Ok(tweedie_x0_unclamped(x_t, alpha_bar, eps_hat)?.map(|v| v.max(-lim).min(lim)))
}

/// Standard deviation of the injected noise; zero on the final step.
pub fn step_sigma(step: &StepCoeffs, mode: VarianceMode) -> f64 {
    if step.alpha_bar_prev >= 1.0 {
        return 0.0;
    }
    match mode {
        VarianceMode::FixedSmall => step.posterior_variance().max(0.0).sqrt(),
        VarianceMode::FixedLarge => step.beta.sqrt(),
        VarianceMode::None => 0.0,
    }
}

/// Data range the sampler clips x̂0 to before forming the posterior mean.
pub const SAMPLE_X0_CLIP: f64 = 1.0;

/// Posterior mean `c0·clip(x̂0) + c1·x_t`. Equal to [`predict_mean`] whenever
/// x̂0 is inside the clip range; near `ᾱ ≈ 0` the ε form divides by `√α ≈ 0.03`
/// and a slightly wrong ε̂ blows up, which the clip prevents.
pub fn predict_mean_clipped<E: Element>(
    x_t: &Tensor<E>,
    step: &StepCoeffs,
    eps_hat: &Tensor<E>,
) -> Result<Tensor<E>> {
    if step.beta == 0.0 || step.alpha_bar >= 1.0 {
        return predict_mean(x_t, step, eps_hat);
    }
    let lim = E::from_f64_lossy(SAMPLE_X0_CLIP);
    let x0 = tweedie_x0_unclamped(x_t, step.alpha_bar, eps_hat)?.map(|v| v.max(-lim).min(lim));
    let denom = 1.0 - step.alpha_bar;
    let c0 = step.alpha_bar_prev.sqrt() * step.beta / denom;
    let c1 = step.alpha().sqrt() * (1.0 - step.alpha_bar_prev) / denom;
    combine(&x0, c0, x_t, c1)
}

/// `μ + σ·z` given an already computed ε̂, with μ from [`predict_mean_clipped`].
pub fn reverse_from_eps<E: Element, R: Rng + ?Sized>(
    x_t: &Tensor<E>,
    step: &StepCoeffs,
    eps_hat: &Tensor<E>,
    mode: VarianceMode,
    rng: &mut R,
) -> Result<Tensor<E>> {
    let mean = predict_mean_clipped(x_t, step, eps_hat)?;
    let sigma = step_sigma(step, mode);
    if sigma == 0.0 {
        return Ok(mean);
    }
    let z = gaussian::<E, R>(x_t.dims(), rng);
    combine(&mean, 1.0, &z, sigma)
}

/// One reverse transition from respaced position `k` to `k − 1` for a batch
/// `x_t` of shape `[N, 4, H, W]`.
pub fn reverse_step<E: Element, M: EpsModel<E> + ?Sized, R: Rng + ?Sized>(
    net: &M,
    x_t: &Tensor<E>,
    k: usize,
    chain: &RespacedSchedule,
    rng: &mut R,
    mode: VarianceMode,
) -> Result<Tensor<E>> {
    let step = chain.step(k)?;
    let n = x_t.dims().first().copied().unwrap_or(0);
    let eps_hat = net.predict_eps(x_t, &vec![step.timestep; n])?;
    reverse_from_eps(x_t, &step, &eps_hat, mode, rng)
}

/// Draws `count` samples of size `size×size` by running the full respaced
/// chain from pure noise. Outputs are clamped to `[-1, 1]`.
pub fn sample<E: Element, M: EpsModel<E> + ?Sized, R: Rng + ?Sized>(
    net: &M,
    chain: &RespacedSchedule,
    count: usize,
    size: usize,
    mode: VarianceMode,
    rng: &mut R,
) -> Result<Tensor<E>> {
    if count == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let mut x = gaussian::<E, R>(&[count, 4, size, size], rng);
    for k in (1..=chain.len()).rev() {
        x = reverse_step(net, &x, k, chain, rng, mode)?;
    }
    let one = E::one();
    Ok(x.map(|v| v.max(-one).min(one)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, NodeId};
    use crate::diffusion::schedule::ScheduleKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct ZeroEps;

    impl EpsModel<f64> for ZeroEps {
        fn eps_graph(&self, g: &mut Graph<f64>, x: NodeId, _t: &[usize]) -> Result<NodeId> {
            g.scale(x, 0.0)
        }
    }

    fn hand_schedule() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleKind::Linear, 2, 0.1, 0.2).unwrap()
    }

    #[test]
    fn forward_sample_endpoints() {
        let s = hand_schedule();
        let x0 = Tensor::<f64>::new(vec![2], vec![0.3, -0.7]).unwrap();
        let eps = Tensor::<f64>::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert_eq!(forward_sample(&x0, 0, &eps, &s).unwrap(), x0);
        let zero = Tensor::<f64>::zeros(&[2]);
        let out = forward_sample(&zero, 2, &eps, &s).unwrap();
        let k = (1.0f64 - 0.72).sqrt();
        assert!((out.data()[0] - k).abs() < 1e-12 && (out.data()[1] - 2.0 * k).abs() < 1e-12);
    }

    #[test]
    fn forward_sample_hand_value() {
        let s = hand_schedule();
        let one = Tensor::<f64>::ones(&[1]);
        let v = forward_sample(&one, 2, &one, &s).unwrap().item();
        // √0.72 + √0.28
        assert!((v - 1.377_678).abs() < 1e-6, "{v}");
    }

    #[test]
    fn forward_sample_shape_mismatch() {
        let s = hand_schedule();
        assert!(forward_sample(&Tensor::<f64>::ones(&[2]), 1, &Tensor::ones(&[3]), &s).is_err());
    }

    #[test]
    fn mean_reductions() {
        let x = Tensor::<f64>::new(vec![2], vec![0.5, -1.0]).unwrap();
        let zero = Tensor::zeros(&[2]);
        let step = StepCoeffs {
            timestep: 2,
            beta: 0.2,
            alpha_bar: 0.72,
            alpha_bar_prev: 0.9,
        };
        let mu = predict_mean(&x, &step, &zero).unwrap();
        assert!((mu.data()[0] - 0.5 / 0.8f64.sqrt()).abs() < 1e-12);
        let no_noise = StepCoeffs {
            beta: 0.0,
            alpha_bar: 0.9,
            ..step
        };
        assert_eq!(predict_mean(&x, &no_noise, &x).unwrap(), x);
    }

    #[test]
    fn tweedie_inverts_forward_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = gaussian::<f64, _>(&[16], &mut rng);
        let eps = gaussian::<f64, _>(&[16], &mut rng);
        for ab in [0.99, 0.5, 0.02] {
            let xt = noise_to(&x0, &eps, ab).unwrap();
            let back = tweedie_x0_unclamped(&xt, ab, &eps).unwrap();
            assert!(back.max_abs_diff(&x0) < 1e-12);
            let zero = Tensor::zeros(&[16]);
            let plain = tweedie_x0_unclamped(&xt, ab, &zero).unwrap();
            assert!(plain.max_abs_diff(&xt.map(|v| v / ab.sqrt())) < 1e-12);
        }
        assert!(tweedie_x0_unclamped(&x0, 0.0, &eps).is_err());
    }

    #[test]
    fn tweedie_clamps() {
        let xt = Tensor::<f64>::new(vec![2], vec![10.0, -10.0]).unwrap();
        let out = tweedie_x0(&xt, 0.5, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(out.data(), &[1.5, -1.5]);
    }

    #[test]
    fn final_step_adds_no_noise() {
        let base = hand_schedule();
        let chain = RespacedSchedule::full(base);
        let x = Tensor::<f64>::full(&[1, 4, 4, 4], 0.3);
        for mode in [VarianceMode::FixedSmall, VarianceMode::FixedLarge, VarianceMode::None] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let out = reverse_step(&ZeroEps, &x, 1, &chain, &mut rng, mode).unwrap();
            let expect = 0.3 / 0.9f64.sqrt();
            assert!(out.data().iter().all(|v| (v - expect).abs() < 1e-12));
        }
    }

    #[test]
    fn deterministic_zero_eps_chain_telescopes() {
        let base = NoiseSchedule::new(ScheduleKind::Linear, 10, 0.01, 0.05).unwrap();
        let chain = RespacedSchedule::new(base, 5, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x_t = gaussian::<f64, _>(&[2, 4, 4, 4], &mut rng);
        let zero = Tensor::zeros(x_t.dims());
        let mut x = x_t.clone();
        for k in (1..=chain.len()).rev() {
            x = predict_mean(&x, &chain.step(k).unwrap(), &zero).unwrap();
        }
        let factor: f64 = chain.betas().iter().map(|b| 1.0 / (1.0 - b).sqrt()).product();
        assert!(x.max_abs_diff(&x_t.map(|v| v * factor)) < 1e-12);
    }

    #[test]
    fn clipped_mean_matches_eps_form_inside_range() {
        let base = NoiseSchedule::new(ScheduleKind::Cosine, 20, 1e-4, 0.02).unwrap();
        let chain = RespacedSchedule::new(base, 10, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = gaussian::<f64, _>(&[1, 4, 3, 3], &mut rng).map(|v| (v * 0.3).clamp(-0.9, 0.9));
        let eps = gaussian::<f64, _>(&[1, 4, 3, 3], &mut rng);
        for k in 1..=chain.len() {
            let step = chain.step(k).unwrap();
            let x_t = noise_to(&x0, &eps, step.alpha_bar).unwrap();
            let a = predict_mean(&x_t, &step, &eps).unwrap();
            let b = predict_mean_clipped(&x_t, &step, &eps).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-9, "k {k}: {}", a.max_abs_diff(&b));
        }
        // a wildly wrong ε̂ at the top step stays bounded
        let top = chain.step(chain.len()).unwrap();
        let x_t = gaussian::<f64, _>(&[1, 4, 3, 3], &mut rng);
        let bad = eps.map(|v| v + 0.5);
        let m = predict_mean_clipped(&x_t, &top, &bad).unwrap();
        assert!(m.data().iter().all(|v| v.abs() < 6.0));
    }
}
