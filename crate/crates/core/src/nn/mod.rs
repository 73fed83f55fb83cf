//! From-scratch 3D UNet for single-sample dose regression.
//!
//! Tensors are channel-last and batch-free. Everything is generic over
//! [`Real`] so the same code trains in `f32` and is gradient-checked in
//! `f64`.

use core::fmt::Debug;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod adam;
pub mod layers;
mod unet;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use layers::{mse_loss, Tensor};
pub use unet::{
    architecture, backward, build_unet, forward, forward_tape, infer, parameter_count, Gradients,
    Mode, ModelParameters, Op, ParamTensor, Tape,
};

pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Down,
    Up,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub pools: u32,
    pub starting_filters: usize,
    pub expansion_rate: f64,
    pub dropout_rate: f64,
    pub groupnorm_groups: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            pools: 2,
            starting_filters: 8,
            expansion_rate: 2.0,
            dropout_rate: 0.1,
            groupnorm_groups: 8,
            in_channels: 3,
            out_channels: 1,
        }
    }
}

impl UNetConfig {
    /// Four pools starting at 16 filters.
    pub fn full_scale() -> Self {
        Self {
            pools: 4,
            starting_filters: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pools < 1 {
            return Err(Error::Config("pools must be at least 1".into()));
        }
        if self.starting_filters < 1 {
            return Err(Error::Config("starting_filters must be at least 1".into()));
        }
        if !(self.expansion_rate >= 1.0) || !self.expansion_rate.is_finite() {
            return Err(Error::Config("expansion_rate must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must lie in [0, 1)".into()));
        }
        if self.groupnorm_groups < 1 || self.in_channels < 1 || self.out_channels < 1 {
            return Err(Error::Config("group and channel counts must be positive".into()));
        }
        Ok(())
    }

    /// `round(expansion^(layer - 1) * starting_filters)` for the encoder;
    /// the decoder reuses the encoder count at the same depth. Layers run
    /// `1..=pools + 1`, the last being the bottleneck.
    pub fn filters_at(&self, layer: u32, arm: Arm) -> Result<usize> {
        if layer < 1 || layer > self.pools + 1 {
            return Err(Error::Config(alloc::format!(
                "layer {layer} outside 1..={}",
                self.pools + 1
            )));
        }
        let depth = match arm {
            Arm::Down | Arm::Up => layer - 1,
        };
        Ok(libm::round(libm::pow(self.expansion_rate, depth as f64) * self.starting_filters as f64) as usize)
    }

    pub fn max_filters(&self) -> usize {
        libm::round(libm::pow(self.expansion_rate, self.pools as f64) * self.starting_filters as f64) as usize
    }

    /// `dropout_rate * sqrt(filters) / max_filters`.
    pub fn dropout_at(&self, filters: usize) -> f64 {
        self.dropout_rate * libm::sqrt(filters as f64) / self.max_filters() as f64
    }

    /// Spatial dims after all pools.
    pub fn bottleneck_dims(&self, kernel: crate::volume::KernelSpec) -> Result<crate::volume::Dims> {
        kernel.validate(self.pools)?;
        let f = 1usize << self.pools;
        Ok([kernel.dims[0] / f, kernel.dims[1] / f, kernel.dims[2] / f])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::KernelSpec;

    #[test]
    fn filter_counts() {
        let c = UNetConfig::full_scale();
        let down: alloc::vec::Vec<usize> = (1..=5).map(|l| c.filters_at(l, Arm::Down).unwrap()).collect();
        assert_eq!(down, [16, 32, 64, 128, 256]);
        assert_eq!(c.max_filters(), 256);
        for l in 1..=5 {
            assert_eq!(c.filters_at(l, Arm::Up).unwrap(), down[l as usize - 1]);
        }
        assert!(c.filters_at(0, Arm::Down).is_err());
        assert!(c.filters_at(6, Arm::Down).is_err());
    }

    #[test]
    fn dropout_rates() {
        let c = UNetConfig::full_scale();
        assert_eq!(c.dropout_at(256), 0.00625);
        assert_eq!(c.dropout_at(16), 0.0015625);
        let z = UNetConfig {
            dropout_rate: 0.0,
            ..c
        };
        assert!((1..=5).all(|l| z.dropout_at(z.filters_at(l, Arm::Down).unwrap()) == 0.0));
    }

    #[test]
    fn bottlenecks() {
        let c = UNetConfig::full_scale();
        assert_eq!(c.bottleneck_dims(KernelSpec::new([288, 176, 80])).unwrap(), [18, 11, 5]);
        assert_eq!(c.bottleneck_dims(KernelSpec::new([160, 160, 80])).unwrap(), [10, 10, 5]);
        assert!(c.bottleneck_dims(KernelSpec::new([30, 16, 16])).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(UNetConfig::default().validate().is_ok());
        let bad = [
            UNetConfig { pools: 0, ..UNetConfig::default() },
            UNetConfig { starting_filters: 0, ..UNetConfig::default() },
            UNetConfig { expansion_rate: 0.5, ..UNetConfig::default() },
            UNetConfig { dropout_rate: 1.0, ..UNetConfig::default() },
        ];
        assert!(bad.iter().all(|c| c.validate().is_err()));
    }
}
