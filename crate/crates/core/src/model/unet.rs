//! UNet feature extractor: encoder, decoder and the blocks they share.

use rand::Rng;

use super::config::VariantSpec;
use super::layers::{Builder, Conv, ConvBnRelu, Forward};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::scalar::Scalar;

/// Channel counts of one UNet block: `C_in → C_h → C_o`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UNetBlockConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub out_channels: usize,
}

impl UNetBlockConfig {
    pub fn new(in_channels: usize, hidden_channels: usize, out_channels: usize) -> Self {
        UNetBlockConfig { in_channels, hidden_channels, out_channels }
    }
}

/// Two (3×3 conv, stride 1, pad 1 → batch norm → ReLU) stages.
#[derive(Clone, Debug)]
pub struct UNetBlock {
    pub cfg: UNetBlockConfig,
    first: ConvBnRelu,
    second: ConvBnRelu,
}

impl UNetBlock {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, cfg: UNetBlockConfig) -> Result<Self> {
        if cfg.in_channels == 0 || cfg.hidden_channels == 0 || cfg.out_channels == 0 {
            return Err(Error::invalid(format!("{name}: channel counts must be positive")));
        }
        let first = ConvBnRelu::new(b, &format!("{name}.stage1"), ConvSpec::new(cfg.in_channels, cfg.hidden_channels, 3, 1, 1))?;
        let second = ConvBnRelu::new(b, &format!("{name}.stage2"), ConvSpec::new(cfg.hidden_channels, cfg.out_channels, 3, 1, 1))?;
        Ok(UNetBlock { cfg, first, second })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let s = f.tape.shape(x);
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return Err(Error::InvalidShape {
                op: "unet_block",
                shape: s.to_vec(),
                reason: format!("expected {} input channels", self.cfg.in_channels),
            });
        }
        let h = self.first.forward(f, x)?;
        self.second.forward(f, h)
    }
}

/// Encoder output: the bottleneck map and the four pre-pooling skips,
/// shallowest first.
pub struct EncoderOutput {
    pub bottleneck: Var,
    pub skips: [Var; 4],
}

#[derive(Clone, Debug)]
pub struct Encoder {
    stages: Vec<UNetBlock>,
    bottleneck: UNetBlock,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, spec: &VariantSpec) -> Result<Self> {
        let mut stages = Vec::with_capacity(4);
        let mut c_in = spec.in_channels;
        for (i, &w) in spec.encoder.stages.iter().enumerate() {
            stages.push(UNetBlock::new(b, &format!("encoder.block{}", i + 1), UNetBlockConfig::new(c_in, w, w))?);
            c_in = w;
        }
        let wb = spec.encoder.bottleneck;
        let bottleneck = UNetBlock::new(b, "encoder.bottleneck", UNetBlockConfig::new(c_in, wb, wb))?;
        Ok(Encoder { stages, bottleneck })
    }

    /// Four (block → record skip → 2×2 max pool) stages, then the
    /// bottleneck block.
    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<EncoderOutput> {
        let s = f.tape.shape(x).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(16) || !s[3].is_multiple_of(16) || s[2] == 0 || s[3] == 0 {
            return Err(Error::InvalidShape { op: "encoder", shape: s, reason: "spatial extents must be positive multiples of 16".into() });
        }
        let mut skips = Vec::with_capacity(4);
        let mut h = x;
        for stage in &self.stages {
            let y = stage.forward(f, h)?;
            skips.push(y);
            h = f.tape.maxpool2d(y)?;
        }
        let bottleneck = self.bottleneck.forward(f, h)?;
        Ok(EncoderOutput { bottleneck, skips: [skips[0], skips[1], skips[2], skips[3]] })
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    ups: Vec<Conv>,
    blocks: Vec<UNetBlock>,
}

impl Decoder {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, spec: &VariantSpec) -> Result<Self> {
        let mut ups = Vec::with_capacity(4);
        let mut blocks = Vec::with_capacity(4);
        let mut c_in = spec.encoder.bottleneck;
        for (i, &w) in spec.encoder.stages.iter().enumerate().rev() {
            let level = i + 1;
            ups.push(Conv::transposed(b, &format!("decoder.up{level}"), ConvSpec::new(c_in, w, 2, 2, 0))?);
            blocks.push(UNetBlock::new(b, &format!("decoder.block{level}"), UNetBlockConfig::new(2 * w, w, w))?);
            c_in = w;
        }
        Ok(Decoder { ups, blocks })
    }

    /// Four (2×2 up-convolution → concat with the matching skip → block)
    /// stages, deepest first. Output has the first encoder width.
    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, bottleneck: Var, skips: &[Var; 4]) -> Result<Var> {
        let mut h = bottleneck;
        for ((up, block), &skip) in self.ups.iter().zip(&self.blocks).zip(skips.iter().rev()) {
            let u = up.forward(f, h)?;
            let c = f.tape.concat_channels(u, skip)?;
            h = block.forward(f, c)?;
        }
        Ok(h)
    }
}
