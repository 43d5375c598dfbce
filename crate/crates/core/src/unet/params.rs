use std::ops::Range;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::{UNetConfig, NUM_BLOCKS};
use super::layers::ConvGeom;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    FanIn(usize),
    Zero,
    One,
}

#[derive(Debug, Clone)]
pub(crate) struct ConvSlot {
    pub w: Range<usize>,
    pub b: Range<usize>,
    pub geom: ConvGeom,
}

#[derive(Debug, Clone)]
pub(crate) struct NormSlot {
    pub gamma: Range<usize>,
    pub beta: Range<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct LinearSlot {
    pub w: Range<usize>,
    pub b: Range<usize>,
    pub din: usize,
    pub dout: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockSlots {
    pub conv1: ConvSlot,
    pub norm1: NormSlot,
    pub film: LinearSlot,
    pub conv2: ConvSlot,
    pub norm2: NormSlot,
    pub skip: Option<ConvSlot>,
}

/// Where every tensor of a config lives in the flat parameter buffer.
#[derive(Debug)]
pub struct Architecture {
    pub(crate) config: UNetConfig,
    pub(crate) in_proj: ConvSlot,
    pub(crate) time1: LinearSlot,
    pub(crate) time2: LinearSlot,
    pub(crate) blocks: Vec<BlockSlots>,
    pub(crate) downs: Vec<ConvSlot>,
    pub(crate) mid_down: ConvSlot,
    pub(crate) mid_up: ConvSlot,
    pub(crate) ups: Vec<ConvSlot>,
    pub(crate) out_proj: ConvSlot,
    tensors: Vec<TensorSpec>,
    inits: Vec<Init>,
    num_params: usize,
}

struct Builder {
    tensors: Vec<TensorSpec>,
    inits: Vec<Init>,
    offset: usize,
}

impl Builder {
    fn alloc(&mut self, name: String, shape: Vec<usize>, init: Init) -> Range<usize> {
        let spec = TensorSpec { name, shape };
        let range = self.offset..self.offset + spec.numel();
        self.offset = range.end;
        self.tensors.push(spec);
        self.inits.push(init);
        range
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, zero: bool) -> ConvSlot {
        let init = if zero { Init::Zero } else { Init::FanIn(cin * k) };
        let w = self.alloc(format!("{name}.weight"), vec![cout, cin, k], init);
        let b = self.alloc(format!("{name}.bias"), vec![cout], Init::Zero);
        ConvSlot {
            w,
            b,
            geom: ConvGeom { cin, cout, k, stride },
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> NormSlot {
        NormSlot {
            gamma: self.alloc(format!("{name}.scale"), vec![c], Init::One),
            beta: self.alloc(format!("{name}.shift"), vec![c], Init::Zero),
        }
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> LinearSlot {
        LinearSlot {
            w: self.alloc(format!("{name}.weight"), vec![dout, din], Init::FanIn(din)),
            b: self.alloc(format!("{name}.bias"), vec![dout], Init::Zero),
            din,
            dout,
        }
    }
}

impl Architecture {
    pub fn new(config: &UNetConfig) -> Result<Self> {
        config.validate()?;
        let k = config.kernel_size;
        let d = config.down_channels;
        let u = config.up_channels;
        let td = config.time_embedding_dim;
        let mut bld = Builder {
            tensors: Vec::new(),
            inits: Vec::new(),
            offset: 0,
        };
        let in_proj = bld.conv("in_proj", 2, d[0], k, 1, false);
        let time1 = bld.linear("time.0", td, td);
        let time2 = bld.linear("time.1", td, td);
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        for i in 0..NUM_BLOCKS {
            let (cin, cout) = config.block_io(i);
            let name = format!("b{}", i + 1);
            blocks.push(BlockSlots {
                conv1: bld.conv(&format!("{name}.conv1"), cin, cout, k, 1, false),
                norm1: bld.norm(&format!("{name}.norm1"), cout),
                film: bld.linear(&format!("{name}.film"), td, 2 * cout),
                conv2: bld.conv(&format!("{name}.conv2"), cout, cout, k, 1, false),
                norm2: bld.norm(&format!("{name}.norm2"), cout),
                skip: (cin != cout).then(|| bld.conv(&format!("{name}.skip"), cin, cout, 1, 1, false)),
            });
        }
        let downs = (0..3)
            .map(|i| bld.conv(&format!("down{}", i + 1), d[i], d[i], k, 2, false))
            .collect();
        let mid_down = bld.conv("mid.down", d[3], d[3], k, 2, false);
        let mid_up = bld.conv("mid.up", d[3], d[3], k, 1, false);
        let ups = (0..3)
            .map(|i| bld.conv(&format!("up{}", i + 1), u[i], u[i], k, 1, false))
            .collect();
        let out_proj = bld.conv("out_proj", u[3], 2, k, 1, true);
        Ok(Self {
            config: config.clone(),
            in_proj,
            time1,
            time2,
            blocks,
            downs,
            mid_down,
            mid_up,
            ups,
            out_proj,
            num_params: bld.offset,
            tensors: bld.tensors,
            inits: bld.inits,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    /// Offset range of a named tensor in the flat buffer.
    pub fn range_of(&self, name: &str) -> Option<Range<usize>> {
        let mut offset = 0;
        for t in &self.tensors {
            let n = t.numel();
            if t.name == name {
                return Some(offset..offset + n);
            }
            offset += n;
        }
        None
    }
}

/// The network weights: a flat buffer laid out by [`Architecture`].
#[derive(Debug, Clone)]
pub struct ModelParams<F> {
    arch: Arc<Architecture>,
    data: Vec<F>,
}

impl<F: Real> PartialEq for ModelParams<F> {
    fn eq(&self, other: &Self) -> bool {
        self.arch.config == other.arch.config && self.data == other.data
    }
}

impl<F: Real> ModelParams<F> {
    /// Gaussian weights with standard deviation `1/sqrt(fan_in)`, unit norm
    /// scales, zero biases and a zero output projection.
    pub fn init(config: &UNetConfig, seed: u64) -> Result<Self> {
        let arch = Architecture::new(config)?;
        let mut r = rng::seeded(seed);
        let mut data = Vec::with_capacity(arch.num_params);
        for (spec, init) in arch.tensors.iter().zip(&arch.inits) {
            let n = spec.numel();
            match *init {
                Init::Zero => data.extend(std::iter::repeat_n(F::ZERO, n)),
                Init::One => data.extend(std::iter::repeat_n(F::ONE, n)),
                Init::FanIn(fan_in) => {
                    let sd = 1.0 / (fan_in as f64).sqrt();
                    data.extend((0..n).map(|_| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        F::from_f64(sd * z)
                    }));
                }
            }
        }
        Ok(Self {
            arch: Arc::new(arch),
            data,
        })
    }

    pub fn from_data(config: &UNetConfig, data: Vec<F>) -> Result<Self> {
        let arch = Architecture::new(config)?;
        if data.len() != arch.num_params {
            return Err(Error::shape(format!(
                "config needs {} parameters, got {}",
                arch.num_params,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameters must be finite"));
        }
        Ok(Self {
            arch: Arc::new(arch),
            data,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.arch.config
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub(crate) fn arch(&self) -> &Arc<Architecture> {
        &self.arch
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn tensor(&self, name: &str) -> Option<&[F]> {
        self.arch.range_of(name).map(|r| &self.data[r])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [F]> {
        self.arch.range_of(name).map(move |r| &mut self.data[r])
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            arch: Arc::clone(&self.arch),
            data: self.data.iter().map(|v| G::from_f64(v.to_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_params() {
        let c = UNetConfig::default();
        let a = ModelParams::<f32>::init(&c, 3).unwrap();
        let b = ModelParams::<f32>::init(&c, 3).unwrap();
        let other = ModelParams::<f32>::init(&c, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, other);
        assert!(a.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn table_covers_buffer() {
        let p = ModelParams::<f32>::init(&UNetConfig::default(), 0).unwrap();
        let total: usize = p.architecture().tensors().iter().map(|t| t.numel()).sum();
        assert_eq!(total, p.num_params());
        assert_eq!(p.tensor("in_proj.weight").unwrap().len(), 16 * 2 * 3);
        assert_eq!(p.tensor("out_proj.weight").unwrap().len(), 2 * 16 * 3);
        assert!(p.tensor("out_proj.weight").unwrap().iter().all(|&v| v == 0.0));
        assert!(p.tensor("b8.norm2.scale").unwrap().iter().all(|&v| v == 1.0));
        assert!(p.tensor("nope").is_none());
    }

    #[test]
    fn tiny_config_is_small() {
        let p = ModelParams::<f64>::init(&UNetConfig::tiny(), 0).unwrap();
        assert!(p.num_params() <= 5000, "{} params", p.num_params());
    }

    #[test]
    fn fan_in_scaling() {
        let p = ModelParams::<f64>::init(&UNetConfig::default(), 1).unwrap();
        let w = p.tensor("b4.conv2.weight").unwrap();
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let expected = 1.0 / (128.0 * 3.0);
        assert!((var / expected - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn from_data_checks_length() {
        let c = UNetConfig::tiny();
        assert!(ModelParams::<f64>::from_data(&c, vec![0.0; 3]).is_err());
        let n = Architecture::new(&c).unwrap().num_params();
        assert!(ModelParams::<f64>::from_data(&c, vec![0.0; n]).is_ok());
        let mut bad = vec![0.0; n];
        bad[0] = f64::NAN;
        assert!(ModelParams::<f64>::from_data(&c, bad).is_err());
    }
}
