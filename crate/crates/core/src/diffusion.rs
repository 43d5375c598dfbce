//! Closed-form diffusion process over IQ signals.
//!
//! Forward kernel `q(s_t | s_{t-1}) = N(v_t s_{t-1}, (1 - v_t^2) I)` with
//! marginal `s_t = mu_t s_0 + sigma_t eps`, `mu_t = prod_{s<=t} v_s`,
//! `sigma_t = sqrt(1 - mu_t^2)`. Steps are 1-based; step 0 is the data.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::synth::IQSignal;

pub const DEFAULT_TOTAL_STEPS: usize = 100;

const COSINE_OFFSET: f64 = 0.008;
const V_MIN: f64 = 0.001;
const V_MAX: f64 = 0.9999;
/// Horizon at which the linear beta range 1e-4..0.02 is quoted; shorter
/// chains scale the range by `REFERENCE_STEPS / T`.
const REFERENCE_STEPS: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    LinearBeta,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cosine => "cosine",
            Self::LinearBeta => "linear_beta",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "linear_beta" | "linear" => Ok(Self::LinearBeta),
            _ => Err(Error::invalid(format!("unknown schedule '{s}'"))),
        }
    }
}

/// Precomputed `{v_t, mu_t, sigma_t}` for `t = 1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    v: Vec<f64>,
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, total_steps: usize) -> Result<Self> {
        if total_steps < 2 {
            return Err(Error::invalid("a schedule needs at least 2 steps"));
        }
        let t_max = total_steps as f64;
        let raw_v: Vec<f64> = match kind {
            ScheduleKind::Cosine => {
                let f = |t: f64| ((t / t_max + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * PI / 2.0).cos();
                let f0 = f(0.0);
                let mu = |t: usize| f(t as f64) / f0;
                (1..=total_steps).map(|t| mu(t) / mu(t - 1)).collect()
            }
            ScheduleKind::LinearBeta => {
                let scale = REFERENCE_STEPS / t_max;
                let (b0, b1) = (1e-4 * scale, 0.02 * scale);
                (1..=total_steps)
                    .map(|t| {
                        let beta = b0 + (b1 - b0) * (t - 1) as f64 / (t_max - 1.0);
                        (1.0 - beta.min(1.0)).sqrt()
                    })
                    .collect()
            }
        };
        let v: Vec<f64> = raw_v.iter().map(|x| x.clamp(V_MIN, V_MAX)).collect();
        let mut mu = Vec::with_capacity(total_steps);
        let mut acc = 1.0;
        for &vt in &v {
            acc *= vt;
            mu.push(acc);
        }
        let sigma = mu.iter().map(|m| (1.0 - m * m).sqrt()).collect();
        let sched = Self { kind, v, mu, sigma };
        sched.check_invariants()?;
        Ok(sched)
    }

    pub fn cosine(total_steps: usize) -> Result<Self> {
        Self::new(ScheduleKind::Cosine, total_steps)
    }

    fn check_invariants(&self) -> Result<()> {
        if self.v.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::invalid("retention coefficients must lie in (0, 1)"));
        }
        if self.mu.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("mu must be strictly decreasing"));
        }
        if *self.mu.last().expect("non-empty") > 0.01 {
            return Err(Error::invalid("schedule does not reach mu_T <= 0.01"));
        }
        Ok(())
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn total_steps(&self) -> usize {
        self.v.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.total_steps() {
            return Err(Error::invalid(format!(
                "step {t} outside 1..={}",
                self.total_steps()
            )));
        }
        Ok(())
    }

    /// `v_t`, for `1 <= t <= T`.
    pub fn v(&self, t: usize) -> f64 {
        self.v[t - 1]
    }

    /// `mu_t`, with `mu_0 = 1`.
    pub fn mu(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.mu[t - 1]
        }
    }

    /// `sigma_t`, with `sigma_0 = 0`.
    pub fn sigma(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.sigma[t - 1]
        }
    }
}

fn check_same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: {a} vs {b} elements")));
    }
    Ok(())
}

/// `s_t = mu_t s_0 + sigma_t eps`, elementwise.
pub fn forward_sample<F: Real>(s0: &[F], t: usize, eps: &[F], sched: &NoiseSchedule) -> Result<Vec<F>> {
    sched.check_step(t)?;
    check_same_len(s0.len(), eps.len(), "forward_sample")?;
    let (m, s) = (F::from_f64(sched.mu(t)), F::from_f64(sched.sigma(t)));
    Ok(s0.iter().zip(eps).map(|(&x, &e)| m * x + s * e).collect())
}

/// Gaussian posterior `q(s_{t-1} | s_t, s_0) = N(mean, var I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorParams<F> {
    pub mean: Vec<F>,
    pub var: f64,
}

/// Posterior coefficients `(c_s0, c_st, var)` at step `t >= 2`.
pub fn posterior_coefficients(t: usize, sched: &NoiseSchedule) -> (f64, f64, f64) {
    let v = sched.v(t);
    let beta = 1.0 - v * v;
    let var_t = sched.sigma(t).powi(2);
    let var_prev = sched.sigma(t - 1).powi(2);
    let c0 = beta * sched.mu(t - 1) / var_t;
    let ct = v * var_prev / var_t;
    (c0, ct, var_prev / var_t * beta)
}

/// At `t = 1` the posterior collapses to `mean = s_0, var = 0`.
pub fn posterior_params<F: Real>(
    s_t: &[F],
    s0: &[F],
    t: usize,
    sched: &NoiseSchedule,
) -> Result<PosteriorParams<F>> {
    sched.check_step(t)?;
    check_same_len(s_t.len(), s0.len(), "posterior_params")?;
    if t == 1 {
        return Ok(PosteriorParams {
            mean: s0.to_vec(),
            var: 0.0,
        });
    }
    let (c0, ct, var) = posterior_coefficients(t, sched);
    let (c0, ct) = (F::from_f64(c0), F::from_f64(ct));
    let mean = s0.iter().zip(s_t).map(|(&x0, &xt)| c0 * x0 + ct * xt).collect();
    Ok(PosteriorParams { mean, var })
}

/// `s0_hat = (s_t - sigma_t eps_hat) / mu_t`.
pub fn predict_x0<F: Real>(s_t: &[F], eps_hat: &[F], t: usize, sched: &NoiseSchedule) -> Result<Vec<F>> {
    sched.check_step(t)?;
    check_same_len(s_t.len(), eps_hat.len(), "predict_x0")?;
    let inv_mu = 1.0 / sched.mu(t);
    let sigma = sched.sigma(t);
    Ok(s_t
        .iter()
        .zip(eps_hat)
        .map(|(&x, &e)| F::from_f64((x.to_f64() - sigma * e.to_f64()) * inv_mu))
        .collect())
}

/// One ancestral step `s_t -> s_{t-1}`. Step 1 returns the posterior mean.
///
/// With `clip_x0 = Some(c)` the predicted clean signal is clamped to
/// `[-c, c]` before forming the posterior mean.
pub fn ddpm_step<F: Real, R: Rng + ?Sized>(
    s_t: &[F],
    eps_hat: &[F],
    t: usize,
    sched: &NoiseSchedule,
    clip_x0: Option<f64>,
    rng: &mut R,
) -> Result<Vec<F>> {
    let mut s0_hat = predict_x0(s_t, eps_hat, t, sched)?;
    if let Some(c) = clip_x0 {
        let (lo, hi) = (F::from_f64(-c), F::from_f64(c));
        s0_hat.iter_mut().for_each(|x| {
            if *x < lo {
                *x = lo;
            } else if *x > hi {
                *x = hi;
            }
        });
    }
    let post = posterior_params(s_t, &s0_hat, t, sched)?;
    if t == 1 {
        return Ok(post.mean);
    }
    let sd = post.var.sqrt();
    Ok(post
        .mean
        .into_iter()
        .map(|m| {
            let z: f64 = rng.sample(StandardNormal);
            F::from_f64(m.to_f64() + sd * z)
        })
        .collect())
}

/// A batch of equal-length IQ signals, sample-major: `[batch][2][len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalBatch<F> {
    pub data: Vec<F>,
    pub batch: usize,
    pub len: usize,
}

impl<F: Real> SignalBatch<F> {
    pub fn new(data: Vec<F>, batch: usize, len: usize) -> Result<Self> {
        if data.len() != batch * 2 * len {
            return Err(Error::shape(format!(
                "batch buffer holds {} values, expected {batch} x 2 x {len}",
                data.len()
            )));
        }
        Ok(Self { data, batch, len })
    }

    pub fn zeros(batch: usize, len: usize) -> Self {
        Self {
            data: vec![F::ZERO; batch * 2 * len],
            batch,
            len,
        }
    }

    pub fn from_signals(signals: &[&IQSignal]) -> Result<Self> {
        let len = signals.first().map_or(0, |s| s.len());
        if signals.iter().any(|s| s.len() != len) {
            return Err(Error::shape("signals in a batch must share a length"));
        }
        let mut data = Vec::with_capacity(signals.len() * 2 * len);
        for s in signals {
            data.extend(s.i().iter().chain(s.q()).map(|&x| F::from_f64(x as f64)));
        }
        Ok(Self {
            data,
            batch: signals.len(),
            len,
        })
    }

    pub fn sample(&self, b: usize) -> &[F] {
        let n = 2 * self.len;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [F] {
        let n = 2 * self.len;
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn to_signal(&self, b: usize) -> Result<IQSignal> {
        let flat: Vec<f32> = self.sample(b).iter().map(|x| x.to_f64() as f32).collect();
        IQSignal::from_flat(&flat)
    }
}

/// The noise-prediction network `delta_theta(s_t, t)` as seen by the
/// diffusion process.
pub trait NoiseModel<F: Real> {
    /// Predicted noise for every sample of `x` at its own step `steps[b]`,
    /// in the same layout as `x`.
    fn predict_noise(&self, x: &SignalBatch<F>, steps: &[usize]) -> Result<Vec<F>>;

    /// Rejects lengths the model cannot process.
    fn check_length(&self, _len: usize) -> Result<()> {
        Ok(())
    }
}

/// Per-signal random draws of one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossDraws<F> {
    pub steps: Vec<usize>,
    pub eps: Vec<F>,
}

impl<F: Real> LossDraws<F> {
    /// `t ~ U{1..T}` and `eps ~ N(0, I)` for each signal, drawn signal by signal.
    pub fn sample<R: Rng + ?Sized>(batch: usize, len: usize, sched: &NoiseSchedule, rng: &mut R) -> Self {
        let mut steps = Vec::with_capacity(batch);
        let mut eps = Vec::with_capacity(batch * 2 * len);
        for _ in 0..batch {
            steps.push(rng.random_range(1..=sched.total_steps()));
            eps.extend((0..2 * len).map(|_| F::from_f64(rng.sample::<f64, _>(StandardNormal))));
        }
        Self { steps, eps }
    }

    /// The noisy network input `s_t` for every signal of `s0`.
    pub fn noisy_batch(&self, s0: &SignalBatch<F>, sched: &NoiseSchedule) -> Result<SignalBatch<F>> {
        check_same_len(self.eps.len(), s0.data.len(), "loss draws")?;
        let n = 2 * s0.len;
        let mut data = Vec::with_capacity(s0.data.len());
        for (b, &t) in self.steps.iter().enumerate() {
            data.extend(forward_sample(s0.sample(b), t, &self.eps[b * n..(b + 1) * n], sched)?);
        }
        SignalBatch::new(data, s0.batch, s0.len)
    }
}

/// Mean squared error between `eps` and `eps_hat` over all elements.
pub fn mse<F: Real>(eps: &[F], eps_hat: &[F]) -> f64 {
    let n = eps.len().max(1) as f64;
    eps.iter()
        .zip(eps_hat)
        .map(|(&a, &b)| (a.to_f64() - b.to_f64()).powi(2))
        .sum::<f64>()
        / n
}

pub fn diffusion_loss_with<F: Real, M: NoiseModel<F> + ?Sized>(
    model: &M,
    s0: &SignalBatch<F>,
    draws: &LossDraws<F>,
    sched: &NoiseSchedule,
) -> Result<f64> {
    if s0.batch == 0 {
        return Err(Error::invalid("loss of an empty batch"));
    }
    let noisy = draws.noisy_batch(s0, sched)?;
    let eps_hat = model.predict_noise(&noisy, &draws.steps)?;
    Ok(mse(&draws.eps, &eps_hat))
}

/// Noise-prediction loss with fresh `(t, eps)` draws per signal.
pub fn diffusion_loss<F: Real, M: NoiseModel<F> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    s0: &SignalBatch<F>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    if s0.batch == 0 {
        return Err(Error::invalid("loss of an empty batch"));
    }
    let draws = LossDraws::sample(s0.batch, s0.len, sched, rng);
    diffusion_loss_with(model, s0, &draws, sched)
}

/// Clamp applied to the predicted clean signal while sampling.
pub const SAMPLER_CLIP: f64 = 4.0;

/// Runs the full reverse chain for `count` signals of `length` samples.
pub fn generate_batch<F: Real, M: NoiseModel<F> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    count: usize,
    length: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<IQSignal>> {
    if length == 0 || count == 0 {
        return Err(Error::invalid("nothing to generate"));
    }
    model.check_length(length)?;
    let mut x = SignalBatch::<F>::zeros(count, length);
    x.data
        .iter_mut()
        .for_each(|v| *v = F::from_f64(rng.sample::<f64, _>(StandardNormal)));
    let n = 2 * length;
    for t in (1..=sched.total_steps()).rev() {
        let eps_hat = model.predict_noise(&x, &vec![t; count])?;
        let mut next = Vec::with_capacity(x.data.len());
        for b in 0..count {
            next.extend(ddpm_step(
                x.sample(b),
                &eps_hat[b * n..(b + 1) * n],
                t,
                sched,
                Some(SAMPLER_CLIP),
                rng,
            )?);
        }
        x.data = next;
    }
    (0..count).map(|b| x.to_signal(b)).collect()
}

pub fn generate<F: Real, M: NoiseModel<F> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    length: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<IQSignal> {
    Ok(generate_batch(model, 1, length, sched, rng)?.remove(0))
}
