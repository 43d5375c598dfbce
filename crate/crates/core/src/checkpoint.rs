//! Checkpoint container for the backbone, optimizer state and probe heads.
//!
//! Layout: magic `MODFUSCK`, u16 version, u32 header length, JSON header,
//! then the sections listed in the header as little-endian floats.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::daffus::{ClassifierHead, Extraction, FusionHead, Heads, Variant};
use crate::dataset::{read_container_header, read_f32s};
use crate::diffusion::{NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::unet::{AdamW, Architecture, ModelParams, TensorSpec, TrainHyper, UNetConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MODFUSCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub total_steps: usize,
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.kind, self.total_steps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub hyper: TrainHyper,
    pub epochs_done: usize,
    pub loss_history: Vec<f64>,
    pub optimizer: AdamW<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub schedule: ScheduleSpec,
    pub training: Option<TrainingState>,
    pub heads: Option<Heads>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainingHeader {
    hyper: TrainHyper,
    epochs_done: usize,
    loss_history: Vec<f64>,
    adam_step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadsHeader {
    variant: Variant,
    extraction: Extraction,
    class_names: Vec<String>,
    in_dim: usize,
    fused_dim: usize,
    loss_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Section {
    name: String,
    dtype: Dtype,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: UNetConfig,
    tensors: Vec<TensorSpec>,
    schedule: ScheduleSpec,
    #[serde(default)]
    training: Option<TrainingHeader>,
    #[serde(default)]
    heads: Option<HeadsHeader>,
    sections: Vec<Section>,
}

fn push_f32(buf: &mut Vec<u8>, v: &[f32]) {
    v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
}

fn push_f64(buf: &mut Vec<u8>, v: &[f64]) {
    v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
}

fn section(name: &str, dtype: Dtype, len: usize) -> Section {
    Section {
        name: name.into(),
        dtype,
        len,
    }
}

impl Checkpoint {
    pub fn new(params: ModelParams<f32>, schedule: ScheduleSpec) -> Self {
        Self {
            params,
            schedule,
            training: None,
            heads: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = self.params.num_params();
        let mut sections = vec![section("params", Dtype::F32, n)];
        let mut payload = Vec::with_capacity(4 * n);
        push_f32(&mut payload, self.params.data());

        let training = self.training.as_ref().map(|t| {
            sections.push(section("adam_m", Dtype::F32, t.optimizer.m.len()));
            sections.push(section("adam_v", Dtype::F32, t.optimizer.v.len()));
            push_f32(&mut payload, &t.optimizer.m);
            push_f32(&mut payload, &t.optimizer.v);
            TrainingHeader {
                hyper: t.hyper.clone(),
                epochs_done: t.epochs_done,
                loss_history: t.loss_history.clone(),
                adam_step: t.optimizer.step,
            }
        });

        let heads = self.heads.as_ref().map(|h| {
            let count = h.fusion.w.len() + h.fusion.b.len() + h.classifier.w.len() + h.classifier.b.len();
            sections.push(section("heads", Dtype::F64, count));
            for part in [&h.fusion.w, &h.fusion.b, &h.classifier.w, &h.classifier.b] {
                push_f64(&mut payload, part);
            }
            HeadsHeader {
                variant: h.variant,
                extraction: h.extraction,
                class_names: h.class_names.clone(),
                in_dim: h.fusion.in_dim,
                fused_dim: h.fusion.d,
                loss_history: h.loss_history.clone(),
            }
        });

        let header = Header {
            config: self.params.config().clone(),
            tensors: self.params.architecture().tensors().to_vec(),
            schedule: self.schedule,
            training,
            heads,
            sections,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(14 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let header: Header = read_container_header(&mut r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        header
            .config
            .validate()
            .map_err(|e| Error::format(format!("invalid config in checkpoint: {e}")))?;
        let arch = Architecture::new(&header.config)?;
        if arch.tensors() != header.tensors.as_slice() {
            return Err(Error::format("tensor shape table does not match the embedded config"));
        }
        let schedule = header.schedule;
        schedule
            .build()
            .map_err(|e| Error::format(format!("invalid schedule in checkpoint: {e}")))?;

        let mut expected = vec![("params", Dtype::F32, arch.num_params())];
        if header.training.is_some() {
            expected.push(("adam_m", Dtype::F32, arch.num_params()));
            expected.push(("adam_v", Dtype::F32, arch.num_params()));
        }
        if let Some(h) = &header.heads {
            let classes = h.class_names.len();
            if h.in_dim != h.variant.input_dim(&header.config) {
                return Err(Error::format("head input width disagrees with its variant"));
            }
            let count = h.fused_dim * h.in_dim + h.fused_dim + classes * h.fused_dim + classes;
            expected.push(("heads", Dtype::F64, count));
        }
        let found: Vec<(&str, Dtype, usize)> = header
            .sections
            .iter()
            .map(|s| (s.name.as_str(), s.dtype, s.len))
            .collect();
        if found != expected {
            return Err(Error::format(format!(
                "section table {found:?} does not match expected {expected:?}"
            )));
        }
        let total: usize = expected.iter().map(|(_, d, n)| d.width() * n).sum();
        if r.len() != total {
            return Err(Error::format(format!(
                "expected {total} payload bytes, found {}",
                r.len()
            )));
        }

        let mut take_f32 = |n: usize| {
            let (a, rest) = r.split_at(4 * n);
            r = rest;
            read_f32s(a)
        };
        let params = ModelParams::from_data(&header.config, take_f32(arch.num_params()))
            .map_err(|e| Error::format(format!("bad parameters: {e}")))?;
        let training = match header.training {
            Some(t) => {
                let mut optimizer = AdamW::new(arch.num_params(), t.hyper.weight_decay);
                optimizer.m = take_f32(arch.num_params());
                optimizer.v = take_f32(arch.num_params());
                optimizer.step = t.adam_step;
                Some(TrainingState {
                    hyper: t.hyper,
                    epochs_done: t.epochs_done,
                    loss_history: t.loss_history,
                    optimizer,
                })
            }
            None => None,
        };
        let heads = header.heads.map(|h| {
            let mut vals = r
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
            let mut take = |n: usize| vals.by_ref().take(n).collect::<Vec<f64>>();
            let (d, ind, c) = (h.fused_dim, h.in_dim, h.class_names.len());
            let fusion = FusionHead {
                in_dim: ind,
                d,
                w: take(d * ind),
                b: take(d),
            };
            let classifier = ClassifierHead {
                d,
                classes: c,
                w: take(c * d),
                b: take(c),
            };
            Heads {
                variant: h.variant,
                extraction: h.extraction,
                class_names: h.class_names,
                fusion,
                classifier,
                loss_history: h.loss_history,
            }
        });
        Ok(Self {
            params,
            schedule,
            training,
            heads,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = io::BufWriter::new(fs::File::create(path)?);
        f.write_all(&bytes)?;
        f.flush()?;
        Ok(())
    }

    /// Loads and, when `expected` is given, insists on that network config.
    pub fn load(path: impl AsRef<Path>, expected: Option<&UNetConfig>) -> Result<Self> {
        let ck = Self::from_bytes(&fs::read(path)?)?;
        if let Some(cfg) = expected {
            if ck.params.config() != cfg {
                return Err(Error::format(format!(
                    "checkpoint config {:?} differs from expected {cfg:?}",
                    ck.params.config()
                )));
            }
        }
        Ok(ck)
    }

    /// Little-endian bytes of the backbone weights alone.
    pub fn backbone_bytes(params: &ModelParams<f32>) -> Vec<u8> {
        let mut v = Vec::with_capacity(4 * params.num_params());
        push_f32(&mut v, params.data());
        v
    }
}
