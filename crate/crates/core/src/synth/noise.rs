//! Colored Gaussian noise by frequency-domain amplitude shaping.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::channel::complex_gaussian;
use super::signal::{mean_power, IQSignal};
use crate::error::{Error, Result};

/// Noise with power spectral density proportional to `|f|^beta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseColor {
    White,
    Pink,
    Red,
    Blue,
}

impl NoiseColor {
    pub const ALL: [NoiseColor; 4] = [Self::White, Self::Pink, Self::Red, Self::Blue];

    pub fn exponent(self) -> f64 {
        match self {
            Self::White => 0.0,
            Self::Pink => -1.0,
            Self::Red => -2.0,
            Self::Blue => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::White => "white",
            Self::Pink => "pink",
            Self::Red => "red",
            Self::Blue => "blue",
        }
    }
}

impl fmt::Display for NoiseColor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseColor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "white" => Ok(Self::White),
            "pink" => Ok(Self::Pink),
            "red" | "brown" | "brownian" => Ok(Self::Red),
            "blue" => Ok(Self::Blue),
            _ => Err(Error::invalid(format!("unknown noise color '{s}'"))),
        }
    }
}

pub const MIN_COLORED_LEN: usize = 16;

pub fn colored_noise<R: Rng + ?Sized>(
    length: usize,
    color: NoiseColor,
    power: f64,
    rng: &mut R,
) -> Result<IQSignal> {
    if length < MIN_COLORED_LEN {
        return Err(Error::invalid(format!(
            "colored noise needs at least {MIN_COLORED_LEN} samples"
        )));
    }
    if !(power > 0.0) || !power.is_finite() {
        return Err(Error::invalid("noise power must be positive"));
    }
    let beta = color.exponent();
    let mut buf: Vec<Complex64> = (0..length).map(|_| complex_gaussian(rng)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(length).process(&mut buf);
    for (k, x) in buf.iter_mut().enumerate() {
        let f = k.min(length - k) as f64 / length as f64;
        let gain = if f == 0.0 {
            if beta == 0.0 { 1.0 } else { 0.0 }
        } else {
            f.powf(beta / 2.0)
        };
        *x *= gain;
    }
    planner.plan_fft_inverse(length).process(&mut buf);
    let g = (power / mean_power(&buf)).sqrt();
    buf.iter_mut().for_each(|c| *c *= g);
    IQSignal::from_complex(&buf)
}

/// Adds colored noise at `snr_db` relative to the signal's own power.
pub fn add_colored_noise<R: Rng + ?Sized>(
    sig: &IQSignal,
    color: NoiseColor,
    snr_db: f64,
    rng: &mut R,
) -> Result<IQSignal> {
    if snr_db == f64::INFINITY {
        return Ok(sig.clone());
    }
    let p_sig = sig.power();
    if p_sig <= 0.0 {
        return Err(Error::invalid("cannot set an SNR relative to a zero-power signal"));
    }
    let noise = colored_noise(sig.len(), color, p_sig / 10f64.powf(snr_db / 10.0), rng)?;
    let out: Vec<Complex64> = (0..sig.len())
        .map(|n| sig.sample(n) + noise.sample(n))
        .collect();
    IQSignal::from_complex(&out)
}
