//! Modulators: symbol mapping, pulse shaping and analog schemes.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::signal::{mean_power, IQSignal};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ModulationScheme {
    Bpsk,
    Qpsk,
    Psk8,
    Pam4,
    Qam16,
    Qam64,
    Gfsk,
    Cpfsk,
    AmDsb,
    AmSsb,
    Wbfm,
}

impl ModulationScheme {
    pub const ALL: [ModulationScheme; 11] = [
        Self::Bpsk,
        Self::Qpsk,
        Self::Psk8,
        Self::Pam4,
        Self::Qam16,
        Self::Qam64,
        Self::Gfsk,
        Self::Cpfsk,
        Self::AmDsb,
        Self::AmSsb,
        Self::Wbfm,
    ];

    /// Class name as it appears in dataset files.
    pub fn name(self) -> &'static str {
        match self {
            Self::Bpsk => "BPSK",
            Self::Qpsk => "QPSK",
            Self::Psk8 => "8PSK",
            Self::Pam4 => "PAM4",
            Self::Qam16 => "QAM16",
            Self::Qam64 => "QAM64",
            Self::Gfsk => "GFSK",
            Self::Cpfsk => "CPFSK",
            Self::AmDsb => "AM-DSB",
            Self::AmSsb => "AM-SSB",
            Self::Wbfm => "WBFM",
        }
    }

    pub fn is_analog(self) -> bool {
        matches!(self, Self::AmDsb | Self::AmSsb | Self::Wbfm)
    }

    /// Number of distinct symbols, `None` for analog schemes.
    pub fn alphabet_size(self) -> Option<usize> {
        match self {
            Self::Bpsk | Self::Gfsk | Self::Cpfsk => Some(2),
            Self::Qpsk | Self::Pam4 => Some(4),
            Self::Psk8 => Some(8),
            Self::Qam16 => Some(16),
            Self::Qam64 => Some(64),
            Self::AmDsb | Self::AmSsb | Self::Wbfm => None,
        }
    }

    /// Unit-average-power constellation of a linearly modulated scheme,
    /// indexed by symbol value. `None` for FSK and analog schemes.
    pub fn constellation(self) -> Option<Vec<Complex64>> {
        let raw: Vec<Complex64> = match self {
            Self::Bpsk => vec![Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)],
            Self::Qpsk => (0..4)
                .map(|s| Complex64::new(bit_sign(s & 1), bit_sign(s >> 1)))
                .collect(),
            Self::Psk8 => {
                let mut points = vec![Complex64::default(); 8];
                for pos in 0..8usize {
                    points[gray(pos)] = Complex64::from_polar(1.0, 2.0 * PI * pos as f64 / 8.0);
                }
                points
            }
            Self::Pam4 => (0..4)
                .map(|s| Complex64::new(gray_level(s, 2), 0.0))
                .collect(),
            Self::Qam16 => square_qam(2),
            Self::Qam64 => square_qam(3),
            _ => return None,
        };
        let p = mean_power(&raw);
        let g = 1.0 / p.sqrt();
        Some(raw.into_iter().map(|c| c * g).collect())
    }
}

impl fmt::Display for ModulationScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<String> for ModulationScheme {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ModulationScheme> for String {
    fn from(s: ModulationScheme) -> String {
        s.name().to_string()
    }
}

impl FromStr for ModulationScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        let scheme = match key.as_str() {
            "bpsk" => Self::Bpsk,
            "qpsk" => Self::Qpsk,
            "8psk" | "psk8" => Self::Psk8,
            "pam4" | "4pam" => Self::Pam4,
            "qam16" | "16qam" => Self::Qam16,
            "qam64" | "64qam" => Self::Qam64,
            "gfsk" => Self::Gfsk,
            "cpfsk" => Self::Cpfsk,
            "amdsb" => Self::AmDsb,
            "amssb" => Self::AmSsb,
            "wbfm" => Self::Wbfm,
            _ => return Err(Error::invalid(format!("unknown modulation scheme '{s}'"))),
        };
        Ok(scheme)
    }
}

fn bit_sign(bit: usize) -> f64 {
    if bit & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

fn gray(n: usize) -> usize {
    n ^ (n >> 1)
}

/// Amplitude level of a Gray-coded `bits`-bit symbol on one axis: levels
/// `-(2^bits - 1), ..., -1, 1, ..., 2^bits - 1` in ascending position order.
fn gray_level(symbol: usize, bits: u32) -> f64 {
    let m = 1usize << bits;
    let pos = (0..m).find(|&p| gray(p) == symbol).expect("symbol within alphabet");
    2.0 * pos as f64 - (m as f64 - 1.0)
}

fn square_qam(bits_per_axis: u32) -> Vec<Complex64> {
    let m = 1usize << bits_per_axis;
    (0..m * m)
        .map(|s| {
            Complex64::new(
                gray_level(s % m, bits_per_axis),
                gray_level(s / m, bits_per_axis),
            )
        })
        .collect()
}

/// Root-raised-cosine pulse shaping parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseShape {
    pub sps: usize,
    pub rolloff: f64,
    pub span: usize,
}

impl Default for PulseShape {
    fn default() -> Self {
        Self {
            sps: 8,
            rolloff: 0.35,
            span: 8,
        }
    }
}

impl PulseShape {
    pub fn validate(&self) -> Result<()> {
        if self.sps < 2 {
            return Err(Error::invalid("pulse shape needs at least 2 samples per symbol"));
        }
        if !(self.rolloff > 0.0 && self.rolloff <= 1.0) {
            return Err(Error::invalid("roll-off must lie in (0, 1]"));
        }
        if self.span == 0 {
            return Err(Error::invalid("filter span must be at least one symbol"));
        }
        Ok(())
    }

    /// Unit-energy RRC taps, `span * sps + 1` of them, centered.
    pub fn taps(&self) -> Vec<f64> {
        let beta = self.rolloff;
        let half = (self.span * self.sps / 2) as isize;
        let mut taps: Vec<f64> = (-half..=half)
            .map(|n| {
                let t = n as f64 / self.sps as f64;
                rrc(t, beta)
            })
            .collect();
        let energy: f64 = taps.iter().map(|h| h * h).sum();
        let g = 1.0 / energy.sqrt();
        taps.iter_mut().for_each(|h| *h *= g);
        taps
    }
}

fn rrc(t: f64, beta: f64) -> f64 {
    if t.abs() < 1e-12 {
        return 1.0 + beta * (4.0 / PI - 1.0);
    }
    let singular = 1.0 / (4.0 * beta);
    if (t.abs() - singular).abs() < 1e-9 {
        let a = PI / (4.0 * beta);
        return beta / 2f64.sqrt() * ((1.0 + 2.0 / PI) * a.sin() + (1.0 - 2.0 / PI) * a.cos());
    }
    let num = (PI * t * (1.0 - beta)).sin() + 4.0 * beta * t * (PI * t * (1.0 + beta)).cos();
    let den = PI * t * (1.0 - (4.0 * beta * t).powi(2));
    num / den
}

/// "Same"-mode convolution: output is aligned with and as long as `x`.
fn convolve_same(x: &[Complex64], taps: &[f64]) -> Vec<Complex64> {
    let center = (taps.len() - 1) / 2;
    (0..x.len())
        .map(|n| {
            let mut acc = Complex64::default();
            for (k, &h) in taps.iter().enumerate() {
                let idx = n as isize + center as isize - k as isize;
                if idx >= 0 && (idx as usize) < x.len() {
                    acc += x[idx as usize] * h;
                }
            }
            acc
        })
        .collect()
}

const FSK_INDEX: f64 = 0.5;
const GFSK_BT: f64 = 0.35;
const GFSK_SPAN: usize = 4;

/// Maps digital symbols to a baseband signal.
///
/// With `pulse = None` every symbol occupies a single sample and no filter
/// is applied (constellation points are returned as-is). With a pulse
/// shape the output has `sps * symbols.len()` samples at unit average power.
pub fn modulate(
    symbols: &[usize],
    scheme: ModulationScheme,
    pulse: Option<&PulseShape>,
) -> Result<IQSignal> {
    if symbols.is_empty() {
        return Err(Error::invalid("no symbols to modulate"));
    }
    let Some(m) = scheme.alphabet_size() else {
        return Err(Error::invalid(format!(
            "{scheme} is analog; use modulate_analog with a message sequence"
        )));
    };
    if let Some(&bad) = symbols.iter().find(|&&s| s >= m) {
        return Err(Error::invalid(format!(
            "symbol {bad} outside the {m}-ary alphabet of {scheme}"
        )));
    }
    if let Some(p) = pulse {
        p.validate()?;
    }
    let sps = pulse.map_or(1, |p| p.sps);

    let samples = match scheme {
        ModulationScheme::Gfsk | ModulationScheme::Cpfsk => {
            fsk(symbols, sps, scheme == ModulationScheme::Gfsk)
        }
        _ => {
            let points = scheme.constellation().expect("linear scheme");
            match pulse {
                None => symbols.iter().map(|&s| points[s]).collect(),
                Some(p) => {
                    let mut up = vec![Complex64::default(); symbols.len() * sps];
                    for (k, &s) in symbols.iter().enumerate() {
                        up[k * sps] = points[s];
                    }
                    normalize(convolve_same(&up, &p.taps()))
                }
            }
        }
    };
    IQSignal::from_complex(&samples)
}

/// Continuous-phase binary FSK, optionally with Gaussian frequency shaping.
fn fsk(symbols: &[usize], sps: usize, gaussian: bool) -> Vec<Complex64> {
    let mut freq: Vec<f64> = symbols
        .iter()
        .flat_map(|&s| std::iter::repeat_n(if s == 0 { -1.0 } else { 1.0 }, sps))
        .collect();
    if gaussian && sps > 1 {
        let sigma = (2f64.ln()).sqrt() / (2.0 * PI * GFSK_BT) * sps as f64;
        let half = (GFSK_SPAN * sps / 2) as isize;
        let mut g: Vec<f64> = (-half..=half)
            .map(|n| (-(n as f64).powi(2) / (2.0 * sigma * sigma)).exp())
            .collect();
        let sum: f64 = g.iter().sum();
        g.iter_mut().for_each(|v| *v /= sum);
        let as_complex: Vec<Complex64> = freq.iter().map(|&f| Complex64::new(f, 0.0)).collect();
        freq = convolve_same(&as_complex, &g).into_iter().map(|c| c.re).collect();
    }
    let step = PI * FSK_INDEX / sps as f64;
    let mut phase = 0.0;
    freq.iter()
        .map(|&f| {
            let s = Complex64::from_polar(1.0, phase);
            phase += step * f;
            s
        })
        .collect()
}

const AM_DEPTH: f64 = 0.5;
const FM_DEVIATION: f64 = 0.1;

/// Modulates a real message sequence with an analog scheme. The message is
/// rescaled to unit peak amplitude; output has unit average power.
pub fn modulate_analog(message: &[f64], scheme: ModulationScheme) -> Result<IQSignal> {
    if message.is_empty() {
        return Err(Error::invalid("empty message"));
    }
    if !scheme.is_analog() {
        return Err(Error::invalid(format!("{scheme} is a digital scheme")));
    }
    if message.iter().any(|m| !m.is_finite()) {
        return Err(Error::invalid("message contains non-finite values"));
    }
    let peak = message.iter().fold(0.0f64, |a, m| a.max(m.abs()));
    let m: Vec<f64> = if peak > 0.0 {
        message.iter().map(|v| v / peak).collect()
    } else {
        message.to_vec()
    };
    let samples: Vec<Complex64> = match scheme {
        ModulationScheme::AmDsb => m
            .iter()
            .map(|&v| Complex64::new(1.0 + AM_DEPTH * v, 0.0))
            .collect(),
        ModulationScheme::AmSsb => analytic(&m),
        ModulationScheme::Wbfm => {
            let mut phase = 0.0;
            m.iter()
                .map(|&v| {
                    phase += 2.0 * PI * FM_DEVIATION * v;
                    Complex64::from_polar(1.0, phase)
                })
                .collect()
        }
        _ => unreachable!(),
    };
    IQSignal::from_complex(&normalize(samples))
}

/// Upper-sideband analytic signal via a one-sided spectrum.
fn analytic(m: &[f64]) -> Vec<Complex64> {
    let n = m.len();
    let mut buf: Vec<Complex64> = m.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, x) in buf.iter_mut().enumerate() {
        let positive = k > 0 && 2 * k < n;
        let keep = k == 0 || 2 * k == n;
        if positive {
            *x *= 2.0;
        } else if !keep {
            *x = Complex64::default();
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let scale = 1.0 / n as f64;
    buf.iter().map(|c| c * scale).collect()
}

fn normalize(mut samples: Vec<Complex64>) -> Vec<Complex64> {
    let p = mean_power(&samples);
    if p > 0.0 {
        let g = 1.0 / p.sqrt();
        samples.iter_mut().for_each(|c| *c *= g);
    }
    samples
}
