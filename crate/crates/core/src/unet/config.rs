use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_BLOCKS: usize = 8;

/// Input lengths must be a multiple of this (four halvings down to the bottleneck).
pub const LENGTH_MULTIPLE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub down_channels: [usize; 4],
    pub up_channels: [usize; 4],
    pub kernel_size: usize,
    pub time_embedding_dim: usize,
    pub norm_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            down_channels: [16, 32, 64, 128],
            up_channels: [64, 32, 16, 16],
            kernel_size: 3,
            time_embedding_dim: 64,
            norm_groups: 8,
        }
    }
}

impl UNetConfig {
    /// A few-thousand-parameter network for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            down_channels: [2, 3, 4, 5],
            up_channels: [4, 3, 2, 2],
            kernel_size: 3,
            time_embedding_dim: 8,
            norm_groups: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::invalid(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.time_embedding_dim < 2 || self.time_embedding_dim % 2 != 0 {
            return Err(Error::invalid(format!(
                "time_embedding_dim must be even and at least 2, got {}",
                self.time_embedding_dim
            )));
        }
        if self.norm_groups == 0 {
            return Err(Error::invalid("norm_groups must be positive"));
        }
        for &c in self.block_channels().iter() {
            if c == 0 {
                return Err(Error::invalid("channel widths must be positive"));
            }
            if c % self.norm_groups != 0 {
                return Err(Error::invalid(format!(
                    "width {c} is not divisible by norm_groups {}",
                    self.norm_groups
                )));
            }
        }
        Ok(())
    }

    /// Output channels of blocks b1..b8.
    pub fn block_channels(&self) -> [usize; NUM_BLOCKS] {
        let d = self.down_channels;
        let u = self.up_channels;
        [d[0], d[1], d[2], d[3], u[0], u[1], u[2], u[3]]
    }

    /// `(in, out)` channels of block `i` (0-based); up blocks see the skip concatenated.
    pub fn block_io(&self, i: usize) -> (usize, usize) {
        let d = self.down_channels;
        let u = self.up_channels;
        match i {
            0 => (d[0], d[0]),
            1 => (d[0], d[1]),
            2 => (d[1], d[2]),
            3 => (d[2], d[3]),
            4 => (d[3] + d[3], u[0]),
            5 => (u[0] + d[2], u[1]),
            6 => (u[1] + d[1], u[2]),
            7 => (u[2] + d[0], u[3]),
            _ => panic!("block index {i} out of range"),
        }
    }

    /// Temporal downsampling factor at which block `i` (0-based) runs.
    pub fn block_length_divisor(i: usize) -> usize {
        [1, 2, 4, 8, 8, 4, 2, 1][i]
    }

    pub fn check_length(len: usize) -> Result<()> {
        if len == 0 || len % LENGTH_MULTIPLE != 0 {
            return Err(Error::invalid(format!(
                "signal length {len} is not a positive multiple of {LENGTH_MULTIPLE}"
            )));
        }
        Ok(())
    }
}
