use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Complex baseband sequence stored as two real channels of equal length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IQSignal {
    i: Vec<f32>,
    q: Vec<f32>,
}

impl IQSignal {
    pub fn new(i: Vec<f32>, q: Vec<f32>) -> Result<Self> {
        if i.len() != q.len() {
            return Err(Error::shape(format!(
                "I has {} samples but Q has {}",
                i.len(),
                q.len()
            )));
        }
        if i.is_empty() {
            return Err(Error::invalid("signal must have at least one sample"));
        }
        if i.iter().chain(q.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("signal contains non-finite values"));
        }
        Ok(Self { i, q })
    }

    pub fn zeros(len: usize) -> Result<Self> {
        Self::new(vec![0.0; len], vec![0.0; len])
    }

    pub fn from_complex(samples: &[Complex64]) -> Result<Self> {
        let i = samples.iter().map(|c| c.re as f32).collect();
        let q = samples.iter().map(|c| c.im as f32).collect();
        Self::new(i, q)
    }

    /// Builds a signal from a channel-major `[I..., Q...]` buffer.
    pub fn from_flat(flat: &[f32]) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(Error::shape("flat buffer must hold 2 x L values"));
        }
        let (i, q) = flat.split_at(flat.len() / 2);
        Self::new(i.to_vec(), q.to_vec())
    }

    pub fn len(&self) -> usize {
        self.i.len()
    }

    pub fn is_empty(&self) -> bool {
        self.i.is_empty()
    }

    pub fn i(&self) -> &[f32] {
        &self.i
    }

    pub fn q(&self) -> &[f32] {
        &self.q
    }

    pub fn sample(&self, n: usize) -> Complex64 {
        Complex64::new(self.i[n] as f64, self.q[n] as f64)
    }

    pub fn to_complex(&self) -> Vec<Complex64> {
        (0..self.len()).map(|n| self.sample(n)).collect()
    }

    /// Channel-major `[I..., Q...]` copy, the `2 x L` network input layout.
    pub fn to_flat(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(2 * self.len());
        out.extend_from_slice(&self.i);
        out.extend_from_slice(&self.q);
        out
    }

    /// Mean of |s[n]|^2.
    pub fn power(&self) -> f64 {
        mean_power(&self.to_complex())
    }

    /// Rescales to unit average power. Zero signals are returned unchanged.
    pub fn normalized(&self) -> Self {
        let p = self.power();
        if p <= 0.0 {
            return self.clone();
        }
        let g = (1.0 / p).sqrt();
        let scale = |v: &[f32]| v.iter().map(|&x| (x as f64 * g) as f32).collect();
        Self {
            i: scale(&self.i),
            q: scale(&self.q),
        }
    }

    /// Contiguous sub-signal `[offset, offset + target_len)`.
    pub fn crop(&self, target_len: usize, offset: usize) -> Result<Self> {
        if target_len == 0 || offset + target_len > self.len() {
            return Err(Error::invalid(format!(
                "crop of {target_len} samples at offset {offset} exceeds signal length {}",
                self.len()
            )));
        }
        let range = offset..offset + target_len;
        Ok(Self {
            i: self.i[range.clone()].to_vec(),
            q: self.q[range].to_vec(),
        })
    }
}

pub(crate) fn mean_power(samples: &[Complex64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|c| c.norm_sqr()).sum::<f64>() / samples.len() as f64
}

/// Crop at an offset drawn uniformly from `[0, L - target_len]`.
/// Returns the offset alongside the crop so callers can log it.
pub fn random_crop<R: rand::Rng + ?Sized>(
    sig: &IQSignal,
    target_len: usize,
    rng: &mut R,
) -> Result<(IQSignal, usize)> {
    if target_len == 0 || target_len > sig.len() {
        return Err(Error::invalid(format!(
            "cannot crop {target_len} samples from a signal of length {}",
            sig.len()
        )));
    }
    let offset = rng.random_range(0..=sig.len() - target_len);
    Ok((sig.crop(target_len, offset)?, offset))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn ramp(len: usize) -> IQSignal {
        let i = (0..len).map(|n| n as f32).collect();
        let q = (0..len).map(|n| -(n as f32)).collect();
        IQSignal::new(i, q).unwrap()
    }

    #[test]
    fn rejects_mismatched_or_bad_channels() {
        assert!(IQSignal::new(vec![1.0], vec![1.0, 2.0]).is_err());
        assert!(IQSignal::new(vec![], vec![]).is_err());
        assert!(IQSignal::new(vec![f32::NAN], vec![0.0]).is_err());
        assert!(IQSignal::new(vec![f32::INFINITY], vec![0.0]).is_err());
    }

    #[test]
    fn full_crop_is_identity() {
        let s = ramp(128);
        assert_eq!(s.crop(128, 0).unwrap(), s);
    }

    #[test]
    fn crop_takes_leading_samples() {
        let s = ramp(1024);
        let c = s.crop(64, 0).unwrap();
        assert_eq!(c.len(), 64);
        assert_eq!(c.i(), &s.i()[..64]);
        assert_eq!(c.q(), &s.q()[..64]);
    }

    #[test]
    fn out_of_range_crop_fails() {
        let s = ramp(100);
        assert!(s.crop(64, 40).is_err());
        assert!(s.crop(0, 0).is_err());
    }

    #[test]
    fn random_crop_is_seeded() {
        let s = ramp(1024);
        let (a, oa) = random_crop(&s, 128, &mut rng::seeded(5)).unwrap();
        let (b, ob) = random_crop(&s, 128, &mut rng::seeded(5)).unwrap();
        assert_eq!(oa, ob);
        assert_eq!(a, b);
        assert!(oa <= 1024 - 128);
    }

    #[test]
    fn flat_round_trip() {
        let s = ramp(16);
        assert_eq!(IQSignal::from_flat(&s.to_flat()).unwrap(), s);
    }

    #[test]
    fn normalization_gives_unit_power() {
        let s = ramp(50).normalized();
        assert!((s.power() - 1.0).abs() < 1e-6);
    }
}
