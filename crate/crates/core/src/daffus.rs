//! Diffusion-aware feature fusion: pooled block features of a frozen noise
//! predictor, fused into one discriminative vector and classified.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{minibatches, Dataset};
use crate::diffusion::{forward_sample, NoiseSchedule, SignalBatch};
use crate::error::{Error, Result};
use crate::rng;
use crate::synth::IQSignal;
use crate::unet::{AdamW, ModelParams, UNetConfig, NUM_BLOCKS};

pub const FUSED_DIM: usize = 128;
pub const DEFAULT_EXTRACTION_STEP: usize = 1;
const EXTRACT_BATCH: usize = 64;
const PROB_FLOOR: f64 = 1e-12;

/// Which block features feed the fusion head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    Daffus,
    FusionDown,
    FusionAll,
    /// A single block, 0-based (`Single(6)` is b7).
    Single(usize),
}

impl Variant {
    /// b1..b8, fusion_down, fusion_all, daffus.
    pub fn ablation_set() -> Vec<Variant> {
        (0..NUM_BLOCKS)
            .map(Variant::Single)
            .chain([Variant::FusionDown, Variant::FusionAll, Variant::Daffus])
            .collect()
    }

    pub fn blocks(self) -> Vec<usize> {
        match self {
            Variant::Daffus => (4..8).collect(),
            Variant::FusionDown => (0..4).collect(),
            Variant::FusionAll => (0..8).collect(),
            Variant::Single(i) => vec![i],
        }
    }

    pub fn input_dim(self, config: &UNetConfig) -> usize {
        let ch = config.block_channels();
        self.blocks().iter().map(|&i| ch[i]).sum()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Daffus => f.write_str("daffus"),
            Variant::FusionDown => f.write_str("fusion_down"),
            Variant::FusionAll => f.write_str("fusion_all"),
            Variant::Single(i) => write!(f, "single:b{}", i + 1),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "daffus" => return Ok(Variant::Daffus),
            "fusion_down" | "fusion-down" => return Ok(Variant::FusionDown),
            "fusion_all" | "fusion-all" => return Ok(Variant::FusionAll),
            _ => {}
        }
        let block = lower.strip_prefix("single:").unwrap_or(&lower);
        block
            .strip_prefix('b')
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|n| (1..=NUM_BLOCKS).contains(n))
            .map(|n| Variant::Single(n - 1))
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown variant {s:?} (daffus, fusion_down, fusion_all, single:b1..single:b8)"
                ))
            })
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMode {
    /// `s_t = mu_t * s_0`.
    Deterministic,
    /// `s_t = mu_t * s_0 + sigma_t * eps` with seeded `eps`.
    Stochastic,
}

impl FromStr for ExtractionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "deterministic" => Ok(Self::Deterministic),
            "stochastic" => Ok(Self::Stochastic),
            _ => Err(Error::invalid(format!("unknown extraction mode {s:?}"))),
        }
    }
}

impl fmt::Display for ExtractionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Deterministic => "deterministic",
            Self::Stochastic => "stochastic",
        })
    }
}

/// How the noisy network input is formed before capture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Extraction {
    pub t: usize,
    pub mode: ExtractionMode,
    /// Seeds `eps` in stochastic mode; signal `i` uses stream `i`.
    pub seed: u64,
}

impl Default for Extraction {
    fn default() -> Self {
        Self {
            t: DEFAULT_EXTRACTION_STEP,
            mode: ExtractionMode::Deterministic,
            seed: 0,
        }
    }
}

/// Temporal means of the eight block outputs for one signal.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub blocks: Vec<Vec<f64>>,
}

impl FeatureSet {
    pub fn concat(&self, variant: Variant) -> Vec<f64> {
        variant
            .blocks()
            .iter()
            .flat_map(|&i| self.blocks[i].iter().copied())
            .collect()
    }
}

fn noisy_input(sig: &IQSignal, sched: &NoiseSchedule, ex: &Extraction, index: u64) -> Result<Vec<f32>> {
    let s0 = sig.to_flat();
    let eps: Vec<f32> = match ex.mode {
        ExtractionMode::Deterministic => vec![0.0; s0.len()],
        ExtractionMode::Stochastic => {
            let mut r = rng::stream(ex.seed, index);
            (0..s0.len())
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    z as f32
                })
                .collect()
        }
    };
    forward_sample(&s0, ex.t, &eps, sched)
}

/// Features of `signals`, which must share one length. Signal `i` of the
/// slice draws its stochastic noise from stream `first_index + i`.
pub fn extract_features(
    params: &ModelParams<f32>,
    signals: &[IQSignal],
    sched: &NoiseSchedule,
    ex: &Extraction,
    first_index: u64,
) -> Result<Vec<FeatureSet>> {
    sched.check_step(ex.t)?;
    let mut out = Vec::with_capacity(signals.len());
    for (ci, chunk) in signals.chunks(EXTRACT_BATCH).enumerate() {
        let len = chunk[0].len();
        UNetConfig::check_length(len)?;
        let mut data = Vec::with_capacity(chunk.len() * 2 * len);
        for (j, sig) in chunk.iter().enumerate() {
            if sig.len() != len {
                return Err(Error::shape("signals in one extraction call must share a length"));
            }
            let index = first_index + (ci * EXTRACT_BATCH + j) as u64;
            data.extend(noisy_input(sig, sched, ex, index)?);
        }
        let batch = SignalBatch::new(data, chunk.len(), len)?;
        let (_, acts) = params.forward(&batch, &vec![ex.t; chunk.len()], true)?;
        let pooled = acts.expect("capture requested").pooled();
        for b in 0..chunk.len() {
            let blocks = pooled
                .iter()
                .map(|p| {
                    let c = p.len() / chunk.len();
                    p[b * c..(b + 1) * c].iter().map(|&v| f64::from(v)).collect()
                })
                .collect();
            out.push(FeatureSet { blocks });
        }
    }
    Ok(out)
}

pub fn extract_block_features(
    params: &ModelParams<f32>,
    sig: &IQSignal,
    sched: &NoiseSchedule,
    ex: &Extraction,
) -> Result<FeatureSet> {
    Ok(extract_features(params, std::slice::from_ref(sig), sched, ex, 0)?.remove(0))
}

/// `F_D = max(0, W x + b)` with `W` of shape `d x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    pub in_dim: usize,
    pub d: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Softmax over `W_cls F_D + b_cls`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub d: usize,
    pub classes: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

fn gaussian_matrix(rows: usize, cols: usize, sd: f64, r: &mut rng::Rng) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(r);
            sd * z
        })
        .collect()
}

impl FusionHead {
    pub fn init(in_dim: usize, d: usize, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        Self {
            in_dim,
            d,
            w: gaussian_matrix(d, in_dim, (2.0 / in_dim as f64).sqrt(), &mut r),
            b: vec![0.0; d],
        }
    }

    fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        self.w
            .chunks_exact(self.in_dim)
            .zip(&self.b)
            .map(|(row, &b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::shape(format!(
                "fusion head expects {} inputs, got {}",
                self.in_dim,
                x.len()
            )));
        }
        Ok(self.pre_activation(x).into_iter().map(|z| z.max(0.0)).collect())
    }
}

impl ClassifierHead {
    pub fn init(d: usize, classes: usize, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        Self {
            d,
            classes,
            w: gaussian_matrix(classes, d, (1.0 / d as f64).sqrt(), &mut r),
            b: vec![0.0; classes],
        }
    }

    pub fn logits(&self, fd: &[f64]) -> Result<Vec<f64>> {
        if fd.len() != self.d {
            return Err(Error::shape(format!(
                "classifier expects {} inputs, got {}",
                self.d,
                fd.len()
            )));
        }
        Ok(self
            .w
            .chunks_exact(self.d)
            .zip(&self.b)
            .map(|(row, &b)| b + row.iter().zip(fd).map(|(w, v)| w * v).sum::<f64>())
            .collect())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn fuse(fs: &FeatureSet, head: &FusionHead, variant: Variant) -> Result<Vec<f64>> {
    head.apply(&fs.concat(variant))
}

pub fn classify(fd: &[f64], clf: &ClassifierHead) -> Result<Vec<f64>> {
    Ok(softmax(&clf.logits(fd)?))
}

pub fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(PROB_FLOOR).ln()
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadHyper {
    pub epochs: usize,
    /// Initial rate; annealed to 0 on a cosine over all steps.
    pub learning_rate: f64,
    pub batch_size: usize,
    pub fused_dim: usize,
    pub seed: u64,
}

impl Default for HeadHyper {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 0.01,
            batch_size: 16,
            fused_dim: FUSED_DIM,
            seed: 0,
        }
    }
}

/// Trained fusion and classifier heads plus what is needed to reproduce
/// their inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub variant: Variant,
    pub extraction: Extraction,
    pub class_names: Vec<String>,
    pub fusion: FusionHead,
    pub classifier: ClassifierHead,
    pub loss_history: Vec<f64>,
}

impl Heads {
    pub fn probabilities(&self, fs: &FeatureSet) -> Result<Vec<f64>> {
        classify(&fuse(fs, &self.fusion, self.variant)?, &self.classifier)
    }

    pub fn predict_features(&self, fs: &FeatureSet) -> Result<(usize, Vec<f64>)> {
        let p = self.probabilities(fs)?;
        Ok((argmax(&p), p))
    }
}

/// Fits both heads on fixed input vectors. Returns the heads and the mean
/// training cross-entropy of every epoch.
pub fn fit_heads(
    inputs: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    hyper: &HeadHyper,
) -> Result<(FusionHead, ClassifierHead, Vec<f64>)> {
    if inputs.is_empty() {
        return Err(Error::invalid("labeled set is empty"));
    }
    if inputs.len() != labels.len() {
        return Err(Error::shape("inputs and labels disagree in length"));
    }
    if hyper.batch_size == 0 || hyper.fused_dim == 0 || classes == 0 {
        return Err(Error::invalid("head batch size, width and class count must be positive"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {l} out of range for {classes} classes")));
    }
    let in_dim = inputs[0].len();
    if inputs.iter().any(|x| x.len() != in_dim) {
        return Err(Error::shape("head inputs differ in length"));
    }
    let d = hyper.fused_dim;
    let mut fusion = FusionHead::init(in_dim, d, rng::derive_seed(hyper.seed, &[1]));
    let mut clf = ClassifierHead::init(d, classes, rng::derive_seed(hyper.seed, &[2]));

    let sizes = [d * in_dim, d, classes * d, classes];
    let mut flat: Vec<f64> = [&fusion.w, &fusion.b, &clf.w, &clf.b]
        .iter()
        .flat_map(|v| v.iter().copied())
        .collect();
    let mut opt = AdamW::<f64>::new(flat.len(), 0.0);
    let steps_per_epoch = inputs.len().div_ceil(hyper.batch_size);
    let total_steps = (hyper.epochs * steps_per_epoch).max(1);
    let mut step = 0usize;
    let mut history = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        let mut epoch_loss = 0.0;
        for batch in minibatches(inputs.len(), hyper.batch_size, hyper.seed, epoch)? {
            let mut grad = vec![0.0; flat.len()];
            let (gw, rest) = grad.split_at_mut(sizes[0]);
            let (gb, rest) = rest.split_at_mut(sizes[1]);
            let (gcw, gcb) = rest.split_at_mut(sizes[2]);
            let inv = 1.0 / batch.len() as f64;
            for &i in &batch {
                let x = &inputs[i];
                let z = fusion.pre_activation(x);
                let a: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
                let p = softmax(&clf.logits(&a)?);
                epoch_loss += cross_entropy(&p, labels[i]);
                let mut dlogit = p;
                dlogit[labels[i]] -= 1.0;
                let mut da = vec![0.0; d];
                for (c, &g) in dlogit.iter().enumerate() {
                    let g = g * inv;
                    gcb[c] += g;
                    let row = &clf.w[c * d..(c + 1) * d];
                    for k in 0..d {
                        gcw[c * d + k] += g * a[k];
                        da[k] += g * row[k];
                    }
                }
                for k in 0..d {
                    if z[k] > 0.0 {
                        gb[k] += da[k];
                        let row = &mut gw[k * in_dim..(k + 1) * in_dim];
                        row.iter_mut().zip(x).for_each(|(g, &v)| *g += da[k] * v);
                    }
                }
            }
            let lr = 0.5 * hyper.learning_rate * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos());
            opt.update(&mut flat, &grad, lr);
            step += 1;
            let (w, rest) = flat.split_at(sizes[0]);
            let (b, rest) = rest.split_at(sizes[1]);
            let (cw, cb) = rest.split_at(sizes[2]);
            fusion.w.copy_from_slice(w);
            fusion.b.copy_from_slice(b);
            clf.w.copy_from_slice(cw);
            clf.b.copy_from_slice(cb);
        }
        let mean = epoch_loss / inputs.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { epoch, loss: mean });
        }
        history.push(mean);
    }
    Ok((fusion, clf, history))
}

/// Trains heads on cached features; the backbone is not involved.
pub fn train_head_on_features(
    features: &[&FeatureSet],
    labels: &[usize],
    class_names: &[String],
    variant: Variant,
    extraction: Extraction,
    hyper: &HeadHyper,
) -> Result<Heads> {
    let inputs: Vec<Vec<f64>> = features.iter().map(|f| f.concat(variant)).collect();
    let (fusion, classifier, loss_history) = fit_heads(&inputs, labels, class_names.len(), hyper)?;
    Ok(Heads {
        variant,
        extraction,
        class_names: class_names.to_vec(),
        fusion,
        classifier,
        loss_history,
    })
}

/// Extracts features of `labeled` once through the frozen backbone and fits
/// the heads on them.
pub fn train_head(
    params: &ModelParams<f32>,
    labeled: &Dataset,
    sched: &NoiseSchedule,
    extraction: Extraction,
    variant: Variant,
    hyper: &HeadHyper,
) -> Result<Heads> {
    if labeled.is_empty() {
        return Err(Error::invalid("labeled set is empty"));
    }
    let features = extract_features(params, labeled.signals(), sched, &extraction, 0)?;
    let refs: Vec<&FeatureSet> = features.iter().collect();
    train_head_on_features(&refs, labeled.labels(), labeled.class_names(), variant, extraction, hyper)
}

pub fn predict(
    params: &ModelParams<f32>,
    heads: &Heads,
    sig: &IQSignal,
    sched: &NoiseSchedule,
) -> Result<(usize, Vec<f64>)> {
    let fs = extract_block_features(params, sig, sched, &heads.extraction)?;
    heads.predict_features(&fs)
}
