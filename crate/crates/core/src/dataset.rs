//! Labeled signal collections, the `MODFUSDS` file format and the
//! limited-label split protocol.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "MODFUSDS"            8 bytes
//! version               u16 (= 1)
//! header length         u32
//! header                JSON {num_signals, length, class_names, snrs, labels}
//! samples               f32 x num_signals x 2 x length, signal-major, I then Q
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::synth::IQSignal;

pub const DATASET_MAGIC: &[u8; 8] = b"MODFUSDS";
pub const DATASET_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    signals: Vec<IQSignal>,
    labels: Vec<usize>,
    snrs: Vec<f64>,
    class_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        signals: Vec<IQSignal>,
        labels: Vec<usize>,
        snrs: Vec<f64>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if signals.len() != labels.len() || signals.len() != snrs.len() {
            return Err(Error::shape(format!(
                "{} signals, {} labels, {} SNRs",
                signals.len(),
                labels.len(),
                snrs.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        if let Some(first) = signals.first() {
            if signals.iter().any(|s| s.len() != first.len()) {
                return Err(Error::shape("signals in one dataset must share a length"));
            }
        }
        if snrs.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("per-signal SNRs must be finite"));
        }
        Ok(Self {
            signals,
            labels,
            snrs,
            class_names,
        })
    }

    pub fn empty(class_names: Vec<String>) -> Self {
        Self {
            signals: Vec::new(),
            labels: Vec::new(),
            snrs: Vec::new(),
            class_names,
        }
    }

    pub fn len(&self) -> usize {
        self.signals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.is_empty()
    }

    pub fn signals(&self) -> &[IQSignal] {
        &self.signals
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn snrs(&self) -> &[f64] {
        &self.snrs
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn signal_len(&self) -> Option<usize> {
        self.signals.first().map(IQSignal::len)
    }

    /// Distinct SNRs in ascending order.
    pub fn snr_values(&self) -> Vec<f64> {
        let mut v = self.snrs.clone();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!("index {bad} out of range")));
        }
        Ok(Self {
            signals: indices.iter().map(|&i| self.signals[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            snrs: indices.iter().map(|&i| self.snrs[i]).collect(),
            class_names: self.class_names.clone(),
        })
    }

    /// Same labels and SNRs with every signal passed through `f`.
    pub fn map_signals<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, &IQSignal) -> Result<IQSignal>,
    {
        let signals = self
            .signals
            .iter()
            .enumerate()
            .map(|(k, s)| f(k, s))
            .collect::<Result<Vec<_>>>()?;
        Self::new(signals, self.labels.clone(), self.snrs.clone(), self.class_names.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = io::BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = DatasetHeader {
            num_signals: self.len(),
            length: self.signal_len().unwrap_or(0),
            class_names: self.class_names.clone(),
            snrs: self.snrs.clone(),
            labels: self.labels.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for s in &self.signals {
            for v in s.i().iter().chain(s.q()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let header: DatasetHeader = read_container_header(&mut r, DATASET_MAGIC, DATASET_VERSION)?;
        if header.labels.len() != header.num_signals || header.snrs.len() != header.num_signals {
            return Err(Error::format(
                "header label/SNR lists disagree with num_signals",
            ));
        }
        if header.num_signals > 0 && header.length == 0 {
            return Err(Error::format("header declares zero-length signals"));
        }
        let expected = header
            .num_signals
            .checked_mul(2 * header.length)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format("header sizes overflow"))?;
        if r.len() != expected {
            return Err(Error::format(format!(
                "expected {expected} bytes of samples, found {}",
                r.len()
            )));
        }
        let floats = read_f32s(r);
        let len = header.length;
        let signals = floats
            .chunks_exact(2 * len.max(1))
            .take(header.num_signals)
            .map(|chunk| IQSignal::new(chunk[..len].to_vec(), chunk[len..].to_vec()))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::format(format!("bad sample data: {e}")))?;
        Self::new(signals, header.labels, header.snrs, header.class_names)
            .map_err(|e| Error::format(format!("inconsistent header: {e}")))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    num_signals: usize,
    length: usize,
    class_names: Vec<String>,
    snrs: Vec<f64>,
    labels: Vec<usize>,
}

/// Reads `magic | u16 version | u32 len | JSON` and leaves `r` at the payload.
pub(crate) fn read_container_header<T: serde::de::DeserializeOwned>(
    r: &mut &[u8],
    magic: &[u8; 8],
    version: u16,
) -> Result<T> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m)
        .map_err(|_| Error::format("file too short for magic"))?;
    if &m != magic {
        return Err(Error::format(format!(
            "bad magic: expected {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v)
        .map_err(|_| Error::format("file truncated in version field"))?;
    let found = u16::from_le_bytes(v);
    if found != version {
        return Err(Error::format(format!(
            "unsupported version {found} (expected {version})"
        )));
    }
    let mut l = [0u8; 4];
    r.read_exact(&mut l)
        .map_err(|_| Error::format("file truncated in header length"))?;
    let len = u32::from_le_bytes(l) as usize;
    if r.len() < len {
        return Err(Error::format("file truncated inside header"));
    }
    let (json, rest) = r.split_at(len);
    *r = rest;
    serde_json::from_slice(json).map_err(|e| Error::format(format!("bad header: {e}")))
}

pub(crate) fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// The limited-label protocol: `N` labeled signals per (type, SNR) cell,
/// repeated over `trials` Monte Carlo draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_per_type_per_snr: usize,
    pub trials: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_type_per_snr == 0 || self.trials == 0 {
            return Err(Error::invalid("split needs N >= 1 and trials >= 1"));
        }
        Ok(())
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        rng::derive_seed(self.seed, &[0x5911_7, trial as u64])
    }
}

/// Disjoint index sets of one Monte Carlo trial. Both are ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub labeled: Vec<usize>,
    pub test: Vec<usize>,
}

/// Indices grouped by `(label, SNR)`, cells in a fixed order.
pub fn cells(ds: &Dataset) -> BTreeMap<(usize, u64), Vec<usize>> {
    let mut map: BTreeMap<(usize, u64), Vec<usize>> = BTreeMap::new();
    for (i, (&l, &snr)) in ds.labels.iter().zip(&ds.snrs).enumerate() {
        map.entry((l, snr.to_bits())).or_default().push(i);
    }
    map
}

pub fn split_limited_label(ds: &Dataset, spec: &SplitSpec, trial: usize) -> Result<Split> {
    spec.validate()?;
    if ds.is_empty() {
        return Err(Error::invalid("cannot split an empty dataset"));
    }
    let n = spec.n_per_type_per_snr;
    let mut r = rng::seeded(spec.trial_seed(trial));
    let mut labeled = Vec::new();
    for ((label, snr_bits), mut idx) in cells(ds) {
        if idx.len() < n {
            return Err(Error::invalid(format!(
                "limited-label split infeasible: cell ({}, {} dB) has {} signals, fewer than N = {n}",
                ds.class_names[label],
                f64::from_bits(snr_bits),
                idx.len()
            )));
        }
        idx.shuffle(&mut r);
        labeled.extend_from_slice(&idx[..n]);
    }
    labeled.sort_unstable();
    let mut is_labeled = vec![false; ds.len()];
    labeled.iter().for_each(|&i| is_labeled[i] = true);
    let test = (0..ds.len()).filter(|&i| !is_labeled[i]).collect();
    Ok(Split { labeled, test })
}

/// Seeded permutation of `0..n_items` cut into batches; the last may be short.
pub fn minibatches(n_items: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n_items).collect();
    order.shuffle(&mut rng::seeded(rng::derive_seed(seed, &[0xBA7C, epoch as u64])));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
