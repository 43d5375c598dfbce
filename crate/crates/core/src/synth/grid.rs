//! Labeled dataset synthesis over a (scheme x SNR) grid.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::channel::{apply_impairments, ImpairmentParams};
use super::modulation::{modulate, modulate_analog, ModulationScheme, PulseShape};
use super::signal::IQSignal;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng;

/// Ranges from which per-signal impairments are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpairmentRanges {
    /// CFO drawn uniformly from `[-max_cfo, max_cfo]` cycles/sample.
    pub max_cfo: f64,
    /// Delay drawn uniformly from `0..=max_tau` samples.
    pub max_tau: usize,
    /// Draw the initial phase uniformly from `[0, 2 pi)`; otherwise zero.
    pub random_phase: bool,
}

impl Default for ImpairmentRanges {
    fn default() -> Self {
        Self {
            max_cfo: 0.002,
            max_tau: 4,
            random_phase: true,
        }
    }
}

impl ImpairmentRanges {
    pub fn none() -> Self {
        Self {
            max_cfo: 0.0,
            max_tau: 0,
            random_phase: false,
        }
    }

    fn draw<R: Rng + ?Sized>(&self, snr_db: f64, rng: &mut R) -> ImpairmentParams {
        let delta_f_norm = if self.max_cfo > 0.0 {
            rng.random_range(-self.max_cfo..=self.max_cfo)
        } else {
            0.0
        };
        let tau = if self.max_tau > 0 {
            rng.random_range(0..=self.max_tau)
        } else {
            0
        };
        let phi = if self.random_phase {
            rng.random_range(0.0..2.0 * PI)
        } else {
            0.0
        };
        ImpairmentParams {
            alpha: Complex64::new(1.0, 0.0),
            tau,
            delta_f_norm,
            phi,
            snr_db,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub schemes: Vec<ModulationScheme>,
    pub snr_db: Vec<f64>,
    /// Signals per scheme per SNR.
    pub count: usize,
    pub length: usize,
    #[serde(default)]
    pub impairments: ImpairmentRanges,
    #[serde(default)]
    pub pulse: PulseShape,
}

impl SynthSpec {
    /// The 4-class reference task: BPSK, QPSK, PAM4, GFSK at 18 dB, 128 samples.
    pub fn easy_four_class(count: usize) -> Self {
        Self {
            schemes: vec![
                ModulationScheme::Bpsk,
                ModulationScheme::Qpsk,
                ModulationScheme::Pam4,
                ModulationScheme::Gfsk,
            ],
            snr_db: vec![18.0],
            count,
            length: 128,
            impairments: ImpairmentRanges::default(),
            pulse: PulseShape::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schemes.is_empty() || self.snr_db.is_empty() || self.count == 0 {
            return Err(Error::invalid("synthesis grid is empty"));
        }
        if self.length == 0 {
            return Err(Error::invalid("signal length must be positive"));
        }
        let mut seen = self.schemes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.schemes.len() {
            return Err(Error::invalid("duplicate scheme in grid"));
        }
        if self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("grid SNRs must be finite"));
        }
        if self.impairments.max_tau >= self.length {
            return Err(Error::invalid("maximum delay must be shorter than the signal"));
        }
        if !(0.0..0.5).contains(&self.impairments.max_cfo) {
            return Err(Error::invalid("maximum CFO must lie in [0, 0.5)"));
        }
        self.pulse.validate()
    }

    pub fn num_signals(&self) -> usize {
        self.schemes.len() * self.snr_db.len() * self.count
    }
}

/// Message for analog schemes: Gaussian noise low-passed at 0.1 cycles/sample.
pub fn lowpass_message<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    const CUTOFF: f64 = 0.1;
    const TAPS: usize = 65;
    let center = (TAPS - 1) / 2;
    let taps: Vec<f64> = (0..TAPS)
        .map(|i| {
            let n = i as f64 - center as f64;
            let sinc = if n == 0.0 {
                2.0 * CUTOFF
            } else {
                (2.0 * PI * CUTOFF * n).sin() / (PI * n)
            };
            let window = 0.54 - 0.46 * (2.0 * PI * i as f64 / (TAPS - 1) as f64).cos();
            sinc * window
        })
        .collect();
    let white: Vec<f64> = (0..len + TAPS).map(|_| rng.sample(StandardNormal)).collect();
    (0..len)
        .map(|n| taps.iter().enumerate().map(|(k, h)| h * white[n + TAPS - 1 - k]).sum())
        .collect()
}

/// One clean (unimpaired) burst of `length` samples, cut from the steady
/// state of a longer modulated sequence.
pub fn clean_burst<R: Rng + ?Sized>(
    scheme: ModulationScheme,
    length: usize,
    pulse: &PulseShape,
    rng: &mut R,
) -> Result<IQSignal> {
    match scheme.alphabet_size() {
        Some(m) => {
            let guard = pulse.span;
            let n_sym = length.div_ceil(pulse.sps) + 2 * guard;
            let symbols: Vec<usize> = (0..n_sym).map(|_| rng.random_range(0..m)).collect();
            let full = modulate(&symbols, scheme, Some(pulse))?;
            full.crop(length, guard * pulse.sps)
        }
        None => {
            let guard = 64;
            let message = lowpass_message(length + 2 * guard, rng);
            let full = modulate_analog(&message, scheme)?;
            full.crop(length, guard)
        }
    }
}

/// Deterministic dataset for a seed. Signal `k` draws from its own stream
/// `(seed, k)`, so generation order does not affect content.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    synth_grid(spec, seed, false)
}

/// The signals of [`synth_dataset`] for the same seed with the noise left
/// out. SNR entries keep the grid values.
pub fn synth_noiseless(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    synth_grid(spec, seed, true)
}

fn synth_grid(spec: &SynthSpec, seed: u64, noiseless: bool) -> Result<Dataset> {
    spec.validate()?;
    let mut names: Vec<&str> = spec.schemes.iter().map(|s| s.name()).collect();
    names.sort_unstable();
    let class_names: Vec<String> = names.iter().map(|s| s.to_string()).collect();

    let mut signals = Vec::with_capacity(spec.num_signals());
    let mut labels = Vec::with_capacity(spec.num_signals());
    let mut snrs = Vec::with_capacity(spec.num_signals());
    let mut index = 0u64;
    for &scheme in &spec.schemes {
        let label = class_names
            .iter()
            .position(|n| n == scheme.name())
            .expect("class present");
        for &snr in &spec.snr_db {
            for _ in 0..spec.count {
                let mut r = rng::stream(seed, index);
                index += 1;
                let clean = clean_burst(scheme, spec.length, &spec.pulse, &mut r)?;
                let mut params = spec.impairments.draw(snr, &mut r);
                if noiseless {
                    params.snr_db = f64::INFINITY;
                }
                let received = apply_impairments(&clean, &params, &mut r)?;
                signals.push(received.normalized());
                labels.push(label);
                snrs.push(snr);
            }
        }
    }
    Dataset::new(signals, labels, snrs, class_names)
}
