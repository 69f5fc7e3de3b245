//! The seUNet-Trans network.
//!
//! ```text
//! image ─ encoder ─ decoder ─ bridge (1×1) ─ merge (3×3, stride S) ─ flatten
//!       ─ D × transformer block ─ reshape ─ ×S bilinear ─ CBR ─ CBR ─ 1×1 ─ sigmoid
//! ```

mod config;
mod layers;
mod transformer;
mod unet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{build_variant, EncoderWidths, Variant, VariantSpec, CBR_WIDTHS, DEPTH, EMBED_DIM, HEADS};
pub use layers::{BatchNorm, Builder, Conv, ConvBnRelu, Forward, LayerNorm, Linear};
pub use transformer::{dense_multi_head_attention, sr_attention_head, HeadWeights, ReductionWeights, SrAttention, TransformerBlock};
pub use unet::{Decoder, Encoder, EncoderOutput, UNetBlock, UNetBlockConfig};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{BatchStats, ConvSpec, Mode, RunningStats, BN_MOMENTUM};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Result of a full forward pass.
pub struct ModelOutput<T> {
    /// Pre-sigmoid prediction `(B, 1, H, W)`.
    pub logits: Var,
    /// Probabilities in `(0, 1)`, same shape.
    pub probs: Var,
    /// Token count `N` seen by the transformer.
    pub tokens: usize,
    /// Batch statistics to fold into running statistics (train mode only).
    pub batch_stats: Vec<(usize, BatchStats<T>)>,
}

#[derive(Clone, Debug)]
pub struct SeUNetTrans<T> {
    spec: VariantSpec,
    params: ParamStore<T>,
    running: Vec<RunningStats<T>>,
    norm_names: Vec<String>,
    encoder: Encoder,
    decoder: Decoder,
    bridge: Conv,
    merge: Conv,
    blocks: Vec<TransformerBlock>,
    cbr1: ConvBnRelu,
    cbr2: ConvBnRelu,
    predict: Conv,
}

impl<T: Scalar> SeUNetTrans<T> {
    /// Build a model with seeded Kaiming-uniform weights, zero biases and
    /// unit/zero norm affine parameters.
    pub fn new(spec: VariantSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut running = Vec::new();
        let mut norm_names = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { params: &mut params, running: &mut running, norm_names: &mut norm_names, rng: &mut rng };
        let encoder = Encoder::new(&mut b, &spec)?;
        let decoder = Decoder::new(&mut b, &spec)?;
        let bridge = Conv::new(&mut b, "bridge", ConvSpec::new(spec.decoder_channels(), spec.bridge_channels, 1, 1, 0))?;
        let merge = Conv::new(
            &mut b,
            "merge",
            ConvSpec::new(spec.bridge_channels, spec.bridge_channels, spec.merge_kernel, spec.merge_stride, spec.merge_padding),
        )?;
        let blocks = (0..spec.depth)
            .map(|i| TransformerBlock::new(&mut b, &format!("transformer.block{}", i + 1), spec.embed_dim, spec.heads, spec.reduction_ratio, spec.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let (h1, h2) = spec.cbr_widths;
        let cbr1 = ConvBnRelu::new(&mut b, "head.cbr1", ConvSpec::new(spec.bridge_channels, h1, 3, 1, 1))?;
        let cbr2 = ConvBnRelu::new(&mut b, "head.cbr2", ConvSpec::new(h1, h2, 3, 1, 1))?;
        let predict = Conv::new(&mut b, "head.predict", ConvSpec::new(h2, 1, 1, 1, 0))?;
        Ok(SeUNetTrans { spec, params, running, norm_names, encoder, decoder, bridge, merge, blocks, cbr1, cbr2, predict })
    }

    pub fn spec(&self) -> &VariantSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn blocks(&self) -> &[TransformerBlock] {
        &self.blocks
    }

    /// Batch-norm running statistics with their layer names, in
    /// registration order.
    pub fn running_stats(&self) -> impl Iterator<Item = (&str, &RunningStats<T>)> {
        self.norm_names.iter().map(String::as_str).zip(&self.running)
    }

    pub fn running_stats_mut(&mut self, name: &str) -> Result<&mut RunningStats<T>> {
        let idx = self.norm_names.iter().position(|n| n == name).ok_or_else(|| Error::UnknownParameter(format!("{name} (running stats)")))?;
        Ok(&mut self.running[idx])
    }

    /// A forward context over this model's parameters.
    pub fn context<'a>(&'a self, tape: &'a mut Tape<T>, mode: Mode) -> Forward<'a, T> {
        Forward::new(tape, &self.params, &self.running, mode)
    }

    pub fn encoder_forward(&self, f: &mut Forward<'_, T>, x: Var) -> Result<EncoderOutput> {
        let s = f.tape.shape(x);
        if s.len() != 4 || s[1] != self.spec.in_channels {
            return Err(Error::InvalidShape { op: "encoder", shape: s.to_vec(), reason: format!("expected (B, {}, H, W)", self.spec.in_channels) });
        }
        self.encoder.forward(f, x)
    }

    pub fn decoder_forward(&self, f: &mut Forward<'_, T>, bottleneck: Var, skips: &[Var; 4]) -> Result<Var> {
        self.decoder.forward(f, bottleneck, skips)
    }

    /// 1×1 convolution `C_d → C_b`.
    pub fn bridge_forward(&self, f: &mut Forward<'_, T>, d: Var) -> Result<Var> {
        self.bridge.forward(f, d)
    }

    /// Merge convolution then one token per spatial site, with no
    /// positional term. Returns the tokens and the merged extents.
    pub fn merge_and_flatten(&self, f: &mut Forward<'_, T>, b: Var) -> Result<(Var, (usize, usize))> {
        let merged = self.merge.forward(f, b)?;
        let s = f.tape.shape(merged);
        let hw = (s[2], s[3]);
        Ok((f.tape.flatten_to_tokens(merged)?, hw))
    }

    pub fn transformer_forward(&self, f: &mut Forward<'_, T>, tokens: Var) -> Result<Var> {
        let mut t = tokens;
        for block in &self.blocks {
            t = block.forward(f, t)?;
        }
        Ok(t)
    }

    /// Reshape tokens to a map, upscale by S, run the CBR head.
    /// Returns `(logits, probabilities)`.
    pub fn ffn_head(&self, f: &mut Forward<'_, T>, tokens: Var, merged_hw: (usize, usize)) -> Result<(Var, Var)> {
        let map = f.tape.tokens_to_map(tokens, merged_hw.0, merged_hw.1)?;
        let up = f.tape.bilinear_resize(map, self.spec.upsample_factor())?;
        let h = self.cbr1.forward(f, up)?;
        let h = self.cbr2.forward(f, h)?;
        let logits = self.predict.forward(f, h)?;
        let probs = f.tape.sigmoid(logits);
        Ok((logits, probs))
    }

    /// Full forward pass on `(B, 3, H, W)`.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<ModelOutput<T>> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::InvalidShape { op: "model_forward", shape: s, reason: "expected (B, C, H, W)".into() });
        }
        self.spec.check_input(s[2], s[3])?;
        let mut f = self.context(tape, mode);
        let enc = self.encoder_forward(&mut f, x)?;
        let dec = self.decoder_forward(&mut f, enc.bottleneck, &enc.skips)?;
        let bridged = self.bridge_forward(&mut f, dec)?;
        let (tokens, hw) = self.merge_and_flatten(&mut f, bridged)?;
        let n = hw.0 * hw.1;
        let t = self.transformer_forward(&mut f, tokens)?;
        let (logits, probs) = self.ffn_head(&mut f, t, hw)?;
        let batch_stats = std::mem::take(&mut f.batch_stats);
        Ok(ModelOutput { logits, probs, tokens: n, batch_stats })
    }

    /// Fold train-mode batch statistics into the running statistics.
    pub fn apply_batch_stats(&mut self, stats: &[(usize, BatchStats<T>)]) {
        let momentum = T::from_f64_lossy(BN_MOMENTUM);
        for (idx, s) in stats {
            self.running[*idx].update(&s.mean, &s.var_unbiased, momentum);
        }
    }

    /// Eval-mode probabilities for a batch of images.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, x, Mode::Eval)?;
        Ok(tape.value(out.probs).clone())
    }

    /// Replace all parameters and running statistics; names and shapes must
    /// match exactly.
    pub fn load_state(&mut self, params: &[(String, Tensor<T>)], running: &[(String, RunningStats<T>)]) -> Result<()> {
        for (name, value) in params {
            let id = self.params.id(name)?;
            self.params.set_value(id, value.clone())?;
        }
        for (name, stats) in running {
            let slot = self.running_stats_mut(name)?;
            slot.mean.expect_same_shape(&stats.mean, "load_state")?;
            slot.var.expect_same_shape(&stats.var, "load_state")?;
            *slot = stats.clone();
        }
        Ok(())
    }
}
