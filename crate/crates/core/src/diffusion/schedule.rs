//! Variance schedules and timestep respacing.
//!
//! Timesteps are 1-based: `t ∈ 1..=T`, with the conventional extension
//! `ᾱ(0) = 1` so that step 0 is the clean image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::invalid(format!("unknown schedule kind {other}"))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Cosine => "cosine",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear interpolation of β from `beta_min` to `beta_max`, or the
    /// squared-cosine ᾱ curve (offset 0.008) with β clipped at 0.999.
    /// The β bounds are validated for both kinds but only shape the linear one.
    pub fn new(kind: ScheduleKind, steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
            )));
        }
        let betas = match kind {
            ScheduleKind::Linear => (0..steps)
                .map(|i| {
                    if steps == 1 {
                        beta_min
                    } else {
                        beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                    }
                })
                .collect(),
            ScheduleKind::Cosine => {
                const S: f64 = 0.008;
                let f = |t: f64| {
                    ((t / steps as f64 + S) / (1.0 + S) * std::f64::consts::FRAC_PI_2)
                        .cos()
                        .powi(2)
                };
                (1..=steps)
                    .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).min(0.999))
                    .collect()
            }
        };
        Self::from_betas(kind, betas)
    }

    pub fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid("betas must lie in (0, 1)"));
        }
        let mut prod = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                prod *= 1.0 - b;
                prod
            })
            .collect();
        Ok(Self {
            kind,
            betas,
            alpha_bars,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            Err(Error::invalid(format!("timestep {t} outside 0..={}", self.steps())))
        } else {
            Ok(())
        }
    }

    /// β(t) for `t ∈ 1..=T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Err(Error::invalid("beta is undefined at t = 0"));
        }
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    /// ᾱ(t) for `t ∈ 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(if t == 0 { 1.0 } else { self.alpha_bars[t - 1] })
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// One reverse transition of a (possibly respaced) chain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCoeffs {
    /// Base-schedule timestep used to condition the network.
    pub timestep: usize,
    pub beta: f64,
    pub alpha_bar: f64,
    pub alpha_bar_prev: f64,
}

impl StepCoeffs {
    pub fn alpha(&self) -> f64 {
        1.0 - self.beta
    }

    /// Posterior variance β̃ = β(1 − ᾱ_prev)/(1 − ᾱ).
    pub fn posterior_variance(&self) -> f64 {
        self.beta * (1.0 - self.alpha_bar_prev) / (1.0 - self.alpha_bar)
    }
}

/// Evenly spaced subsequence of a base schedule with recomputed βʹ.
#[derive(Clone, Debug, PartialEq)]
pub struct RespacedSchedule {
    base: NoiseSchedule,
    indices: Vec<usize>,
    betas: Vec<f64>,
    skip: usize,
}

impl RespacedSchedule {
    pub fn new(base: NoiseSchedule, target_len: usize, skip: usize) -> Result<Self> {
        let t = base.steps();
        if target_len == 0 || target_len > t {
            return Err(Error::invalid(format!(
                "respaced length {target_len} outside 1..={t}"
            )));
        }
        if skip >= target_len {
            return Err(Error::invalid(format!(
                "skip {skip} must be below respaced length {target_len}"
            )));
        }
        let indices: Vec<usize> = if target_len == 1 {
            vec![t]
        } else {
            (0..target_len)
                .map(|k| {
                    let pos = 1.0 + k as f64 * (t - 1) as f64 / (target_len - 1) as f64;
                    pos.round() as usize
                })
                .collect()
        };
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        let mut prev = 1.0;
        let betas = indices
            .iter()
            .map(|&i| {
                let ab = base.alpha_bars[i - 1];
                let b = 1.0 - ab / prev;
                prev = ab;
                b
            })
            .collect();
        Ok(Self {
            base,
            indices,
            betas,
            skip,
        })
    }

    /// Identity respacing over every base step.
    pub fn full(base: NoiseSchedule) -> Self {
        let n = base.steps();
        Self::new(base, n, 0).expect("identity respacing is always valid")
    }

    pub fn base(&self) -> &NoiseSchedule {
        &self.base
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn skip(&self) -> usize {
        self.skip
    }

    /// Position the reverse chain starts from: `len − skip`.
    pub fn start_position(&self) -> usize {
        self.len() - self.skip
    }

    pub fn with_skip(&self, skip: usize) -> Result<Self> {
        if skip >= self.len() {
            return Err(Error::invalid(format!(
                "skip {skip} must be below respaced length {}",
                self.len()
            )));
        }
        Ok(Self {
            skip,
            ..self.clone()
        })
    }

    /// ᾱ at respaced position `k ∈ 0..=len` (position 0 is clean).
    pub fn alpha_bar(&self, k: usize) -> Result<f64> {
        if k > self.len() {
            return Err(Error::invalid(format!("position {k} outside 0..={}", self.len())));
        }
        Ok(if k == 0 {
            1.0
        } else {
            self.base.alpha_bars[self.indices[k - 1] - 1]
        })
    }

    /// Base timestep at respaced position `k ∈ 0..=len`.
    pub fn timestep(&self, k: usize) -> Result<usize> {
        if k > self.len() {
            return Err(Error::invalid(format!("position {k} outside 0..={}", self.len())));
        }
        Ok(if k == 0 { 0 } else { self.indices[k - 1] })
    }

    /// Coefficients of the transition from position `k` to `k − 1`.
    pub fn step(&self, k: usize) -> Result<StepCoeffs> {
        if k == 0 || k > self.len() {
            return Err(Error::invalid(format!("position {k} outside 1..={}", self.len())));
        }
        Ok(StepCoeffs {
            timestep: self.indices[k - 1],
            beta: self.betas[k - 1],
            alpha_bar: self.alpha_bar(k)?,
            alpha_bar_prev: self.alpha_bar(k - 1)?,
        })
    }
}
