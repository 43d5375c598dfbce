//! Channel impairments: the received-signal model plus flat fading.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::signal::{mean_power, IQSignal};
use crate::error::{Error, Result};

/// Parameters of `s[n] = alpha * r[n - tau] * exp(j(2 pi df n + phi)) + w[n]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpairmentParams {
    pub alpha: Complex64,
    /// Integer sample delay; vacated samples are zero-filled.
    pub tau: usize,
    /// Carrier frequency offset in cycles per sample.
    pub delta_f_norm: f64,
    pub phi: f64,
    /// Target SNR in dB; `f64::INFINITY` disables the noise term.
    pub snr_db: f64,
}

impl ImpairmentParams {
    /// Parameters under which `apply_impairments` is the identity.
    pub fn identity() -> Self {
        Self {
            alpha: Complex64::new(1.0, 0.0),
            tau: 0,
            delta_f_norm: 0.0,
            phi: 0.0,
            snr_db: f64::INFINITY,
        }
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        if !(self.alpha.norm() > 0.0) || !self.alpha.re.is_finite() || !self.alpha.im.is_finite() {
            return Err(Error::invalid("fading coefficient must be finite and nonzero"));
        }
        if self.tau >= len {
            return Err(Error::invalid(format!(
                "timing offset {} must be below the signal length {len}",
                self.tau
            )));
        }
        if !(-0.5..0.5).contains(&self.delta_f_norm) {
            return Err(Error::invalid("normalized CFO must lie in [-0.5, 0.5)"));
        }
        if !self.phi.is_finite() || self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::invalid("phase and SNR must be well defined"));
        }
        Ok(())
    }
}

pub fn apply_impairments<R: Rng + ?Sized>(
    sig: &IQSignal,
    p: &ImpairmentParams,
    rng: &mut R,
) -> Result<IQSignal> {
    let len = sig.len();
    p.validate(len)?;
    let r = sig.to_complex();
    let out: Vec<Complex64> = (0..len)
        .map(|n| {
            if n < p.tau {
                return Complex64::default();
            }
            let rot = Complex64::from_polar(1.0, 2.0 * PI * p.delta_f_norm * n as f64 + p.phi);
            p.alpha * r[n - p.tau] * rot
        })
        .collect();
    let shifted = IQSignal::from_complex(&out)?;
    add_awgn(&shifted, p.snr_db, rng)
}

pub fn add_awgn<R: Rng + ?Sized>(sig: &IQSignal, snr_db: f64, rng: &mut R) -> Result<IQSignal> {
    if snr_db.is_nan() {
        return Err(Error::invalid("SNR is NaN"));
    }
    if snr_db == f64::INFINITY {
        return Ok(sig.clone());
    }
    let samples = sig.to_complex();
    let p_sig = mean_power(&samples);
    if p_sig <= 0.0 {
        return Err(Error::invalid("cannot set an SNR relative to a zero-power signal"));
    }
    let noise_var = p_sig / 10f64.powf(snr_db / 10.0);
    let std = (noise_var / 2.0).sqrt();
    let noisy: Vec<Complex64> = samples
        .iter()
        .map(|&s| s + complex_gaussian(rng) * std)
        .collect();
    IQSignal::from_complex(&noisy)
}

/// Draw of `x + jy` with `x, y ~ N(0, 1)` independent.
pub(crate) fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im)
}

/// Flat Rayleigh coefficient with per-component variance `sigma2`.
pub fn rayleigh_coefficient<R: Rng + ?Sized>(sigma2: f64, rng: &mut R) -> Result<Complex64> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::invalid("Rayleigh variance must be positive"));
    }
    Ok(complex_gaussian(rng) * sigma2.sqrt())
}

/// Flat Rician coefficient with unit mean power. `k_factor` may be infinite.
pub fn rician_coefficient<R: Rng + ?Sized>(k_factor: f64, rng: &mut R) -> Result<Complex64> {
    if !(k_factor >= 0.0) {
        return Err(Error::invalid("Rician K-factor must be non-negative"));
    }
    let theta = rng.random_range(0.0..2.0 * PI);
    let g = complex_gaussian(rng) * std::f64::consts::FRAC_1_SQRT_2;
    if k_factor == f64::INFINITY {
        return Ok(Complex64::from_polar(1.0, theta));
    }
    let los = (k_factor / (k_factor + 1.0)).sqrt();
    let scatter = (1.0 / (k_factor + 1.0)).sqrt();
    Ok(Complex64::from_polar(los, theta) + g * scatter)
}

/// Multiplies the whole signal by one complex coefficient.
pub fn scale_by(sig: &IQSignal, h: Complex64) -> Result<IQSignal> {
    let out: Vec<Complex64> = sig.to_complex().into_iter().map(|s| s * h).collect();
    IQSignal::from_complex(&out)
}

pub fn rayleigh_fade<R: Rng + ?Sized>(sig: &IQSignal, sigma2: f64, rng: &mut R) -> Result<IQSignal> {
    scale_by(sig, rayleigh_coefficient(sigma2, rng)?)
}

pub fn rician_fade<R: Rng + ?Sized>(sig: &IQSignal, k_factor: f64, rng: &mut R) -> Result<IQSignal> {
    scale_by(sig, rician_coefficient(k_factor, rng)?)
}
