//! Architecture hyperparameters and the L/M/S variants.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Named model size. Smaller merge strides keep more tokens and use a
/// stronger key/value reduction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    L,
    M,
    S,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::L, Variant::M, Variant::S];

    /// `(reduction ratio R, merge stride S)`.
    pub fn reduction_and_stride(self) -> (usize, usize) {
        match self {
            Variant::L => (4, 2),
            Variant::M => (2, 4),
            Variant::S => (1, 8),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::L => "L",
            Variant::M => "M",
            Variant::S => "S",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "L" | "l" => Ok(Variant::L),
            "M" | "m" => Ok(Variant::M),
            "S" | "s" => Ok(Variant::S),
            other => Err(Error::UnknownVariant(other.to_string())),
        }
    }
}

/// Channel widths of the four encoder stages plus the bottleneck block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderWidths {
    pub stages: [usize; 4],
    pub bottleneck: usize,
}

impl EncoderWidths {
    /// Desk-scale default.
    pub fn desk() -> Self {
        EncoderWidths { stages: [16, 32, 64, 128], bottleneck: 256 }
    }

    pub fn paper() -> Self {
        EncoderWidths { stages: [64, 128, 256, 512], bottleneck: 1024 }
    }

    /// Smallest widths, used by end-to-end gradient checks.
    pub fn thin() -> Self {
        EncoderWidths { stages: [4, 8, 16, 32], bottleneck: 64 }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            "thin" => Ok(Self::thin()),
            other => Err(Error::invalid(format!("unknown width preset `{other}` (expected desk, paper or thin)"))),
        }
    }
}

/// Every architecture hyperparameter of one model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VariantSpec {
    pub variant: Variant,
    pub in_channels: usize,
    pub encoder: EncoderWidths,
    /// Bridge output channels `C_b`; equal to the embedding width.
    pub bridge_channels: usize,
    /// Token embedding width `d_N`.
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub reduction_ratio: usize,
    pub merge_kernel: usize,
    pub merge_stride: usize,
    pub merge_padding: usize,
    pub mlp_ratio: usize,
    /// CBR hidden widths `(C_h1, C_h2)`.
    pub cbr_widths: (usize, usize),
}

pub const EMBED_DIM: usize = 64;
pub const HEADS: usize = 4;
pub const DEPTH: usize = 3;
pub const MERGE_KERNEL: usize = 3;
pub const MERGE_PADDING: usize = 1;
pub const MLP_RATIO: usize = 4;
pub const CBR_WIDTHS: (usize, usize) = (32, 16);

/// The locked `(R, S)` pair for `name` plus the shared constants.
pub fn build_variant(name: &str, encoder: EncoderWidths, cbr_widths: (usize, usize)) -> Result<VariantSpec> {
    let variant: Variant = name.parse()?;
    let (r, s) = variant.reduction_and_stride();
    let spec = VariantSpec {
        variant,
        in_channels: 3,
        encoder,
        bridge_channels: EMBED_DIM,
        embed_dim: EMBED_DIM,
        heads: HEADS,
        depth: DEPTH,
        reduction_ratio: r,
        merge_kernel: MERGE_KERNEL,
        merge_stride: s,
        merge_padding: MERGE_PADDING,
        mlp_ratio: MLP_RATIO,
        cbr_widths,
    };
    spec.validate()?;
    Ok(spec)
}

impl VariantSpec {
    /// Desk-scale defaults for a variant.
    pub fn desk(variant: Variant) -> Self {
        build_variant(&variant.to_string(), EncoderWidths::desk(), CBR_WIDTHS).expect("built-in config is valid")
    }

    /// Tiny configuration for end-to-end gradient checks:
    /// widths [4, 8, 16, 32], `C_b = d_N = 8`, two heads, one block.
    pub fn thin(variant: Variant) -> Self {
        let mut spec = Self::desk(variant);
        spec.encoder = EncoderWidths::thin();
        spec.bridge_channels = 8;
        spec.embed_dim = 8;
        spec.heads = 2;
        spec.depth = 1;
        spec.cbr_widths = (8, 4);
        spec
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Decoder output width `C_d`.
    pub fn decoder_channels(&self) -> usize {
        self.encoder.stages[0]
    }

    /// Bilinear upscale factor of the prediction head.
    pub fn upsample_factor(&self) -> usize {
        self.merge_stride
    }

    /// Merged extent `floor((H − E + 2P)/S) + 1`.
    pub fn merged_extent(&self, extent: usize) -> usize {
        (extent + 2 * self.merge_padding - self.merge_kernel) / self.merge_stride + 1
    }

    /// Token count `N` for an `h×w` input.
    pub fn token_count(&self, h: usize, w: usize) -> usize {
        self.merged_extent(h) * self.merged_extent(w)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        let (r, s) = self.variant.reduction_and_stride();
        if (self.reduction_ratio, self.merge_stride) != (r, s) {
            return bad(format!(
                "variant {} requires R={r}, S={s}, got R={}, S={}",
                self.variant, self.reduction_ratio, self.merge_stride
            ));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!("embedding width {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.bridge_channels != self.embed_dim {
            return bad(format!("bridge channels {} must equal embedding width {}", self.bridge_channels, self.embed_dim));
        }
        let widths = self.encoder.stages.iter().chain([&self.encoder.bottleneck, &self.cbr_widths.0, &self.cbr_widths.1]);
        if widths.into_iter().any(|&w| w == 0) || self.depth == 0 || self.mlp_ratio == 0 || self.in_channels == 0 {
            return bad("all widths, depth and ratios must be positive".into());
        }
        if self.merge_kernel == 0 || self.merge_stride == 0 {
            return bad("merge kernel and stride must be positive".into());
        }
        Ok(())
    }

    /// Check that an `h×w` input is admissible: divisible by 16 (four
    /// poolings), by the merge stride, and with a token count divisible by R.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || !h.is_multiple_of(16) || !w.is_multiple_of(16) {
            return Err(Error::invalid(format!("input {h}x{w} must have extents divisible by 16")));
        }
        if !h.is_multiple_of(self.merge_stride) || !w.is_multiple_of(self.merge_stride) {
            return Err(Error::invalid(format!("input {h}x{w} not divisible by merge stride {}", self.merge_stride)));
        }
        let n = self.token_count(h, w);
        if !n.is_multiple_of(self.reduction_ratio) {
            return Err(Error::invalid(format!("token count {n} not divisible by R={}", self.reduction_ratio)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn locked_pairs() {
        let get = |n| {
            let s = build_variant(n, EncoderWidths::desk(), CBR_WIDTHS).unwrap();
            (s.reduction_ratio, s.merge_stride)
        };
        assert_eq!(get("L"), (4, 2));
        assert_eq!(get("M"), (2, 4));
        assert_eq!(get("S"), (1, 8));
        assert!(matches!(build_variant("XL", EncoderWidths::desk(), CBR_WIDTHS), Err(Error::UnknownVariant(_))));
    }

    #[test]
    fn shared_constants() {
        let s = VariantSpec::desk(Variant::M);
        assert_eq!((s.embed_dim, s.heads, s.depth, s.head_dim()), (64, 4, 3, 16));
        assert_eq!((s.merge_kernel, s.merge_padding, s.bridge_channels), (3, 1, 64));
        assert_eq!(s.upsample_factor(), s.merge_stride);
    }

    #[test]
    fn token_counts() {
        assert_eq!(VariantSpec::desk(Variant::M).token_count(256, 256), 4096);
        assert_eq!(VariantSpec::desk(Variant::L).token_count(256, 256), 16384);
        assert_eq!(VariantSpec::desk(Variant::S).token_count(256, 256), 1024);
        assert_eq!(VariantSpec::desk(Variant::M).token_count(64, 64), 256);
    }

    #[test]
    fn mismatched_pair_rejected() {
        let mut s = VariantSpec::desk(Variant::L);
        s.merge_stride = 4;
        assert!(s.validate().is_err());
    }

    #[test]
    fn input_precondition() {
        let s = VariantSpec::desk(Variant::S);
        assert!(s.check_input(64, 64).is_ok());
        assert!(s.check_input(72, 64).is_err());
    }
}
