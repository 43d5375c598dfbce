//! Run configuration file. Every section and key is optional; unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use modfus::daffus::{ExtractionMode, HeadHyper, Variant};
use modfus::diffusion::{ScheduleKind, DEFAULT_TOTAL_STEPS};
use modfus::synth::{ImpairmentRanges, ModulationScheme, NoiseColor, PulseShape, SynthSpec};
use modfus::unet::{TrainHyper, UNetConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub synth: SynthSection,
    pub diffusion: DiffusionSection,
    pub head: HeadSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            output_dir: PathBuf::from("runs"),
            synth: SynthSection::default(),
            diffusion: DiffusionSection::default(),
            head: HeadSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub schemes: Vec<ModulationScheme>,
    pub snr_db: Vec<f64>,
    pub count: usize,
    pub length: usize,
    pub impairments: ImpairmentRanges,
    pub pulse: PulseShape,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthSpec::easy_four_class(100);
        Self {
            schemes: s.schemes,
            snr_db: s.snr_db,
            count: s.count,
            length: s.length,
            impairments: s.impairments,
            pulse: s.pulse,
        }
    }
}

impl SynthSection {
    pub fn spec(&self) -> SynthSpec {
        SynthSpec {
            schemes: self.schemes.clone(),
            snr_db: self.snr_db.clone(),
            count: self.count,
            length: self.length,
            impairments: self.impairments,
            pulse: self.pulse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    pub schedule: ScheduleKind,
    pub total_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub unet: UNetConfig,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        let h = TrainHyper::default();
        Self {
            schedule: ScheduleKind::Cosine,
            total_steps: DEFAULT_TOTAL_STEPS,
            epochs: h.epochs,
            batch_size: h.batch_size,
            learning_rate: h.learning_rate,
            weight_decay: h.weight_decay,
            unet: UNetConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSection {
    pub variant: Variant,
    pub t: usize,
    pub mode: ExtractionMode,
    pub n: usize,
    pub trials: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub fused_dim: usize,
}

impl Default for HeadSection {
    fn default() -> Self {
        let h = HeadHyper::default();
        Self {
            variant: Variant::Daffus,
            t: 1,
            mode: ExtractionMode::Deterministic,
            n: 10,
            trials: 10,
            epochs: h.epochs,
            learning_rate: h.learning_rate,
            batch_size: h.batch_size,
            fused_dim: h.fused_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub ablation_steps: Vec<usize>,
    pub ablation_variants: Vec<Variant>,
    pub ablation_mode: ExtractionMode,
    pub lengths: Vec<usize>,
    pub rayleigh_sigma2: Vec<f64>,
    pub rician_k: Vec<f64>,
    pub noise_colors: Vec<NoiseColor>,
    pub channel_snr_db: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ablation_steps: vec![1, 5, 10, 20, 50, 100],
            ablation_variants: Variant::ablation_set(),
            ablation_mode: ExtractionMode::Stochastic,
            lengths: vec![64, 128, 256],
            rayleigh_sigma2: vec![0.6, 0.9, 1.2],
            rician_k: vec![2.0, 6.0, 10.0, 14.0, 18.0],
            noise_colors: NoiseColor::ALL.to_vec(),
            channel_snr_db: 18.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("sed = 3").is_err());
        assert!(RunConfig::parse("[head]\nvariant = \"daffus\"\nlr = 0.1").is_err());
        assert!(RunConfig::parse("[bogus]\nx = 1").is_err());
    }

    #[test]
    fn partial_sections_merge_with_defaults() {
        let c = RunConfig::parse(
            "seed = 7\n[synth]\nschemes = [\"BPSK\", \"QPSK\"]\n[head]\nvariant = \"single:b7\"\n[diffusion.unet]\nnorm_groups = 4\ndown_channels = [16, 32, 64, 128]\nup_channels = [64, 32, 16, 16]\nkernel_size = 3\ntime_embedding_dim = 64",
        )
        .unwrap();
        assert_eq!(c.seed, Some(7));
        assert_eq!(c.synth.schemes.len(), 2);
        assert_eq!(c.synth.count, 100);
        assert_eq!(c.head.variant, Variant::Single(6));
        assert_eq!(c.diffusion.unet.norm_groups, 4);
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }
}
