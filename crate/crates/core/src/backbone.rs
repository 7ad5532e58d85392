//! SqueezeNet-style fully convolutional trunk, conv1 through fire8.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dSpec, Tape, Var};
use crate::error::{AwbError, Result};
use crate::layers::ConvLayer;
use crate::optim::ParamStore;
use crate::tensor::Real;

/// Smallest accepted input side.
pub const MIN_INPUT: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FireConfig {
    pub squeeze: usize,
    pub expand1x1: usize,
    pub expand3x3: usize,
}

impl FireConfig {
    pub const fn new(squeeze: usize, expand1x1: usize, expand3x3: usize) -> Self {
        FireConfig {
            squeeze,
            expand1x1,
            expand3x3,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.expand1x1 + self.expand3x3
    }

    pub fn param_count(&self, c_in: usize) -> usize {
        ConvLayer::param_count(c_in, self.squeeze, 1)
            + ConvLayer::param_count(self.squeeze, self.expand1x1, 1)
            + ConvLayer::param_count(self.squeeze, self.expand3x3, 3)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneScale {
    Tiny,
    Full,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// `(out_channels, kernel, stride)`; padding is `kernel / 2`.
    pub conv1: (usize, usize, usize),
    /// fire2 .. fire8 in order.
    pub fires: Vec<FireConfig>,
    /// 2x2 max-pool after these layers; layer 0 is conv1, layer i is fire(i+1).
    pub pool_after: Vec<usize>,
    /// Extra 2x2 max-pool after the last fire.
    pub extra_pool: bool,
}

impl BackboneConfig {
    /// Desk-scale default: conv1 8 channels, fires ending at 64 channels.
    pub fn tiny() -> Self {
        BackboneConfig {
            conv1: (8, 3, 2),
            fires: vec![
                FireConfig::new(2, 8, 8),
                FireConfig::new(2, 8, 8),
                FireConfig::new(4, 16, 16),
                FireConfig::new(4, 16, 16),
                FireConfig::new(6, 24, 24),
                FireConfig::new(6, 24, 24),
                FireConfig::new(8, 32, 32),
            ],
            pool_after: vec![0, 2, 4],
            extra_pool: true,
        }
    }

    /// SqueezeNet v1.1 widths.
    pub fn full() -> Self {
        BackboneConfig {
            conv1: (64, 3, 2),
            fires: vec![
                FireConfig::new(16, 64, 64),
                FireConfig::new(16, 64, 64),
                FireConfig::new(32, 128, 128),
                FireConfig::new(32, 128, 128),
                FireConfig::new(48, 192, 192),
                FireConfig::new(48, 192, 192),
                FireConfig::new(64, 256, 256),
            ],
            pool_after: vec![0, 2, 4],
            extra_pool: true,
        }
    }

    pub fn for_scale(scale: BackboneScale) -> Self {
        match scale {
            BackboneScale::Tiny => Self::tiny(),
            BackboneScale::Full => Self::full(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.fires.last().map_or(self.conv1.0, |f| f.out_channels())
    }

    /// Total downsampling factor.
    pub fn stride(&self) -> usize {
        self.conv1.2 << (self.pool_after.len() + self.extra_pool as usize)
    }

    pub fn param_count(&self) -> usize {
        let (c1, k, _) = self.conv1;
        let mut n = ConvLayer::param_count(3, c1, k);
        let mut c = c1;
        for f in &self.fires {
            n += f.param_count(c);
            c = f.out_channels();
        }
        n
    }

    pub fn validate(&self) -> Result<()> {
        let (c1, k, s) = self.conv1;
        let fires_ok = self
            .fires
            .iter()
            .all(|f| f.squeeze > 0 && f.expand1x1 > 0 && f.expand3x3 > 0);
        let pools_ok = self.pool_after.iter().all(|&i| i <= self.fires.len())
            && self.pool_after.windows(2).all(|w| w[0] < w[1]);
        if c1 == 0 || k == 0 || s == 0 || !fires_ok || !pools_ok || !self.stride().is_power_of_two()
        {
            return Err(AwbError::InvalidArgument(format!(
                "invalid backbone config {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Fire {
    pub config: FireConfig,
    pub squeeze: ConvLayer,
    pub expand1x1: ConvLayer,
    pub expand3x3: ConvLayer,
}

impl Fire {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        config: FireConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let one = Conv2dSpec::new(1, 0);
        Ok(Fire {
            config,
            squeeze: ConvLayer::new(
                store,
                &format!("{name}.squeeze"),
                c_in,
                config.squeeze,
                1,
                one,
                rng,
            )?,
            expand1x1: ConvLayer::new(
                store,
                &format!("{name}.expand1x1"),
                config.squeeze,
                config.expand1x1,
                1,
                one,
                rng,
            )?,
            expand3x3: ConvLayer::new(
                store,
                &format!("{name}.expand3x3"),
                config.squeeze,
                config.expand3x3,
                3,
                Conv2dSpec::new(1, 1),
                rng,
            )?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let s = self.squeeze.forward(tape, x)?;
        let s = tape.relu(s);
        let a = self.expand1x1.forward(tape, s)?;
        let a = tape.relu(a);
        let b = self.expand3x3.forward(tape, s)?;
        let b = tape.relu(b);
        tape.concat_channels(&[a, b])
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub conv1: ConvLayer,
    pub fires: Vec<Fire>,
}

impl Backbone {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        config: BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (c1, k, s) = config.conv1;
        let conv1 = ConvLayer::new(
            store,
            &format!("{name}.conv1"),
            3,
            c1,
            k,
            Conv2dSpec::new(s, k / 2),
            rng,
        )?;
        let mut fires = Vec::with_capacity(config.fires.len());
        let mut c = c1;
        for (i, f) in config.fires.iter().enumerate() {
            fires.push(Fire::new(
                store,
                &format!("{name}.fire{}", i + 2),
                c,
                *f,
                rng,
            )?);
            c = f.out_channels();
        }
        Ok(Backbone {
            config,
            conv1,
            fires,
        })
    }

    /// `[3, H, W]` image to `[C_out, ceil(H/32), ceil(W/32)]`; the image is
    /// zero-padded on the bottom and right to a multiple of the stride.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, image: Var) -> Result<Var> {
        let (c, h, w) = tape.value(image).chw()?;
        if c != 3 {
            return Err(AwbError::shape(
                "backbone",
                "image must have 3 channels",
                &[tape.value(image).shape()],
            ));
        }
        if h < MIN_INPUT || w < MIN_INPUT {
            return Err(AwbError::InputTooSmall {
                op: "backbone",
                height: h,
                width: w,
                min: MIN_INPUT,
            });
        }
        let x = tape.pad_to_multiple(image, self.config.stride())?;
        let x = self.conv1.forward(tape, x)?;
        let mut x = tape.relu(x);
        if self.config.pool_after.contains(&0) {
            x = tape.max_pool(x, 2, 2)?;
        }
        for (i, fire) in self.fires.iter().enumerate() {
            x = fire.forward(tape, x)?;
            if self.config.pool_after.contains(&(i + 1)) {
                x = tape.max_pool(x, 2, 2)?;
            }
        }
        if self.config.extra_pool {
            x = tape.max_pool(x, 2, 2)?;
        }
        Ok(x)
    }
}
