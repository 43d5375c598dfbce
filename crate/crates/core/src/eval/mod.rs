//! Experimental protocols at desk scale and their report files.

mod output;
pub mod plot;
mod report;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

pub use output::{config_hash, write_csv, write_json, CsvRow};
pub use report::{mean_std, EvalReport, ReportMeta, SnrAccuracy, Tally};

use crate::daffus::{extract_features, train_head_on_features, Extraction, FeatureSet, HeadHyper, Heads, Variant};
use crate::dataset::{split_limited_label, Dataset, SplitSpec};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng;
use crate::synth::{
    add_awgn, add_colored_noise, random_crop, rayleigh_coefficient, rician_coefficient, IQSignal, NoiseColor,
};
use crate::unet::{ModelParams, UNetConfig};

/// Per-purpose seeds derived from one root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub root: u64,
    pub synth: u64,
    pub train: u64,
    pub split: u64,
    pub head: u64,
    pub extraction: u64,
    pub crop: u64,
    pub channel: u64,
    pub generate: u64,
}

impl RunSeeds {
    pub fn new(root: u64) -> Self {
        let d = |tag: u64| rng::derive_seed(root, &[0x5EED, tag]);
        Self {
            root,
            synth: root,
            train: root,
            split: d(1),
            head: d(2),
            extraction: d(3),
            crop: d(4),
            channel: d(5),
            generate: d(6),
        }
    }
}

/// The frozen backbone and everything needed to turn signals into features
/// and fit heads on them.
#[derive(Debug, Clone, Copy)]
pub struct Probe<'a> {
    pub backbone: &'a ModelParams<f32>,
    pub sched: &'a NoiseSchedule,
    pub extraction: Extraction,
    pub head: &'a HeadHyper,
    /// Recorded in every report's metadata.
    pub config_hash: &'a str,
}

impl Probe<'_> {
    fn features(&self, ds: &Dataset, extraction: &Extraction) -> Result<Vec<FeatureSet>> {
        if ds.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        extract_features(self.backbone, ds.signals(), self.sched, extraction, 0)
    }

    fn meta(&self, variant: Variant, extraction: &Extraction) -> ReportMeta {
        ReportMeta {
            variant: variant.to_string(),
            t: extraction.t,
            extraction_mode: extraction.mode.to_string(),
            seed: extraction.seed,
            config_hash: self.config_hash.to_string(),
            ..ReportMeta::default()
        }
    }
}

fn tally_features(heads: &Heads, feats: &[&FeatureSet], labels: &[usize], snrs: &[f64]) -> Result<Tally> {
    let mut t = Tally::new(heads.class_names.len());
    for ((f, &y), &s) in feats.iter().zip(labels).zip(snrs) {
        t.record(y, heads.predict_features(f)?.0, s);
    }
    Ok(t)
}

/// Accuracy of trained heads on `test`.
pub fn evaluate(probe: &Probe<'_>, heads: &Heads, test: &Dataset) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    if test.class_names() != heads.class_names.as_slice() {
        return Err(Error::invalid(format!(
            "test classes {:?} differ from the heads' classes {:?}",
            test.class_names(),
            heads.class_names
        )));
    }
    let feats = extract_features(probe.backbone, test.signals(), probe.sched, &heads.extraction, 0)?;
    let refs: Vec<&FeatureSet> = feats.iter().collect();
    let tally = tally_features(heads, &refs, test.labels(), test.snrs())?;
    EvalReport::from_trials(&heads.class_names, &[tally], probe.meta(heads.variant, &heads.extraction))
}

/// Result of the limited-label protocol: the aggregated report and the heads
/// of every trial.
#[derive(Debug, Clone)]
pub struct LimitedLabelRun {
    pub report: EvalReport,
    pub heads: Vec<Heads>,
}

fn limited_label_on_features(
    probe: &Probe<'_>,
    ds: &Dataset,
    feats: &[FeatureSet],
    spec: &SplitSpec,
    variant: Variant,
    extraction: Extraction,
) -> Result<LimitedLabelRun> {
    spec.validate()?;
    let mut tallies = Vec::with_capacity(spec.trials);
    let mut heads = Vec::with_capacity(spec.trials);
    let mut trial_seeds = Vec::with_capacity(spec.trials);
    for trial in 0..spec.trials {
        let split = split_limited_label(ds, spec, trial)?;
        if split.test.is_empty() {
            return Err(Error::invalid("split leaves no test signals"));
        }
        let trial_seed = spec.trial_seed(trial);
        trial_seeds.push(trial_seed);
        let hyper = HeadHyper {
            seed: rng::derive_seed(probe.head.seed, &[trial_seed]),
            ..probe.head.clone()
        };
        let lf: Vec<&FeatureSet> = split.labeled.iter().map(|&i| &feats[i]).collect();
        let ll: Vec<usize> = split.labeled.iter().map(|&i| ds.labels()[i]).collect();
        let h = train_head_on_features(&lf, &ll, ds.class_names(), variant, extraction, &hyper)?;
        let tf: Vec<&FeatureSet> = split.test.iter().map(|&i| &feats[i]).collect();
        let tl: Vec<usize> = split.test.iter().map(|&i| ds.labels()[i]).collect();
        let ts: Vec<f64> = split.test.iter().map(|&i| ds.snrs()[i]).collect();
        tallies.push(tally_features(&h, &tf, &tl, &ts)?);
        heads.push(h);
    }
    let mut meta = probe.meta(variant, &extraction);
    meta.n_per_type_per_snr = Some(spec.n_per_type_per_snr);
    meta.trial_seeds = trial_seeds;
    meta.extra.insert("split_seed".into(), spec.seed.into());
    meta.extra.insert("head_seed".into(), probe.head.seed.into());
    let report = EvalReport::from_trials(ds.class_names(), &tallies, meta)?;
    Ok(LimitedLabelRun { report, heads })
}

/// Fresh heads per Monte Carlo trial, each fitted on `N` labeled signals per
/// (class, SNR) cell and tested on the rest of `ds`.
pub fn run_limited_label(probe: &Probe<'_>, ds: &Dataset, spec: &SplitSpec, variant: Variant) -> Result<LimitedLabelRun> {
    spec.validate()?;
    let feats = probe.features(ds, &probe.extraction)?;
    limited_label_on_features(probe, ds, &feats, spec, variant, probe.extraction)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub steps: Vec<usize>,
    pub variants: Vec<Variant>,
    /// `reports[ti][vi]`.
    pub reports: Vec<Vec<EvalReport>>,
}

impl AblationGrid {
    pub fn mean_accuracy(&self, ti: usize, vi: usize) -> f64 {
        self.reports[ti][vi].mean_accuracy
    }

    pub fn csv_rows(&self) -> Vec<CsvRow> {
        let mut rows = Vec::new();
        for (ti, &t) in self.steps.iter().enumerate() {
            for (vi, v) in self.variants.iter().enumerate() {
                let cond = format!("t={t};variant={v}");
                rows.extend(self.reports[ti][vi].csv_rows("ablation", &cond));
            }
        }
        rows
    }
}

/// One limited-label run per `(t, variant)` cell. Features are extracted once
/// per `t`; the stochastic noise seed of step `t` is derived from the probe's.
pub fn run_ablation_t_blocks(
    probe: &Probe<'_>,
    ds: &Dataset,
    steps: &[usize],
    variants: &[Variant],
    spec: &SplitSpec,
) -> Result<AblationGrid> {
    if steps.is_empty() || variants.is_empty() {
        return Err(Error::invalid("ablation needs at least one step and one variant"));
    }
    spec.validate()?;
    let mut reports = Vec::with_capacity(steps.len());
    for &t in steps {
        probe.sched.check_step(t)?;
        let extraction = Extraction {
            t,
            seed: rng::derive_seed(probe.extraction.seed, &[t as u64]),
            ..probe.extraction
        };
        let feats = probe.features(ds, &extraction)?;
        let row = variants
            .iter()
            .map(|&v| limited_label_on_features(probe, ds, &feats, spec, v, extraction).map(|r| r.report))
            .collect::<Result<Vec<_>>>()?;
        reports.push(row);
    }
    Ok(AblationGrid {
        steps: steps.to_vec(),
        variants: variants.to_vec(),
        reports,
    })
}

/// Crops every signal of `ds` to `len` at a seeded random offset. Signal `i`
/// uses stream `i` of `seed`.
pub fn crop_dataset(ds: &Dataset, len: usize, seed: u64) -> Result<(Dataset, Vec<usize>)> {
    let mut offsets = Vec::with_capacity(ds.len());
    let cropped = ds.map_signals(|i, s| {
        let (c, off) = random_crop(s, len, &mut rng::stream(seed, i as u64))?;
        offsets.push(off);
        Ok(c)
    })?;
    Ok((cropped, offsets))
}

/// Limited-label accuracy at each crop length, without retraining the backbone.
pub fn run_variable_length(
    probe: &Probe<'_>,
    ds: &Dataset,
    lengths: &[usize],
    spec: &SplitSpec,
    variant: Variant,
    crop_seed: u64,
) -> Result<Vec<(usize, EvalReport)>> {
    if lengths.is_empty() {
        return Err(Error::invalid("no lengths requested"));
    }
    for &l in lengths {
        UNetConfig::check_length(l)?;
    }
    let mut out = Vec::with_capacity(lengths.len());
    for &l in lengths {
        let seed = rng::derive_seed(crop_seed, &[l as u64]);
        let (cropped, offsets) = crop_dataset(ds, l, seed)?;
        let mut run = run_limited_label(probe, &cropped, spec, variant)?;
        let meta = &mut run.report.metadata;
        meta.extra.insert("length".into(), l.into());
        meta.extra.insert("crop_seed".into(), seed.into());
        meta.extra.insert("crop_offsets".into(), serde_json::to_value(&offsets)?);
        out.push((l, run.report));
    }
    Ok(out)
}

/// Heads fitted on one synthesis configuration, tested on another.
pub fn run_distribution_shift(probe: &Probe<'_>, heads: &Heads, test_b: &Dataset) -> Result<EvalReport> {
    if test_b.class_names() != heads.class_names.as_slice() {
        return Err(Error::invalid(format!(
            "class sets differ: trained on {:?}, tested on {:?}",
            heads.class_names,
            test_b.class_names()
        )));
    }
    evaluate(probe, heads, test_b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChannelCondition {
    /// No fading, white noise.
    Ideal,
    Rayleigh { sigma2: f64 },
    Rician { k_factor: f64 },
    /// No fading, noise of the given colour.
    Noise { color: NoiseColor },
}

impl ChannelCondition {
    pub fn name(&self) -> String {
        match self {
            Self::Ideal => "ideal".into(),
            Self::Rayleigh { sigma2 } => format!("rayleigh:sigma2={sigma2}"),
            Self::Rician { k_factor } => format!("rician:k={k_factor}"),
            Self::Noise { color } => format!("noise:{}", color.name()),
        }
    }
}

const FADE_TAG: u64 = 0xFADE;
const NOISE_TAG: u64 = 0x0015E;

/// Builds a test set from noise-free signals: `h * s + n` with `n` scaled to
/// `snr_db` against the unfaded signal. Every condition of one seed reuses
/// the same noise and fading draws.
pub fn apply_condition(clean: &Dataset, cond: ChannelCondition, snr_db: f64, seed: u64) -> Result<Dataset> {
    let noise_seed = rng::derive_seed(seed, &[NOISE_TAG]);
    let fade_seed = rng::derive_seed(seed, &[FADE_TAG]);
    let noisy = clean.map_signals(|i, s| {
        let mut nr = rng::stream(noise_seed, i as u64);
        let with_noise = match cond {
            ChannelCondition::Noise { color } => add_colored_noise(s, color, snr_db, &mut nr)?,
            _ => add_awgn(s, snr_db, &mut nr)?,
        };
        let h = match cond {
            ChannelCondition::Rayleigh { sigma2 } => rayleigh_coefficient(sigma2, &mut rng::stream(fade_seed, i as u64))?,
            ChannelCondition::Rician { k_factor } => rician_coefficient(k_factor, &mut rng::stream(fade_seed, i as u64))?,
            _ => return Ok(with_noise),
        };
        let faded: Vec<Complex64> = s
            .to_complex()
            .iter()
            .zip(with_noise.to_complex())
            .map(|(&x, y)| h * x + (y - x))
            .collect();
        IQSignal::from_complex(&faded)
    })?;
    Dataset::new(
        noisy.signals().to_vec(),
        noisy.labels().to_vec(),
        vec![snr_db; noisy.len()],
        noisy.class_names().to_vec(),
    )
}

pub fn run_channel_robustness(
    probe: &Probe<'_>,
    heads: &Heads,
    clean: &Dataset,
    conditions: &[ChannelCondition],
    snr_db: f64,
    seed: u64,
) -> Result<Vec<(ChannelCondition, EvalReport)>> {
    conditions
        .iter()
        .map(|&c| {
            let ds = apply_condition(clean, c, snr_db, seed)?;
            let mut r = evaluate(probe, heads, &ds)?;
            r.metadata.extra.insert("condition".into(), c.name().into());
            r.metadata.extra.insert("channel_seed".into(), seed.into());
            r.metadata.extra.insert("snr_db".into(), snr_db.into());
            Ok((c, r))
        })
        .collect()
}
