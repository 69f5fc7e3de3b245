//! Checkpoint files.
//!
//! Layout: the 8 bytes `SEUTCKPT`, a little-endian `u32` version, a UTF-8
//! header of `key: value` lines closed by an empty line, then raw
//! little-endian `f32` tensors in directory order. Each directory line reads
//! `tensor: <name> f32 <d0,d1,...> <byte offset into the payload>`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{EncoderWidths, SeUNetTrans, VariantSpec};
use crate::ops::RunningStats;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::adam::{Adam, AdamConfig};

pub const MAGIC: &[u8; 8] = b"SEUTCKPT";
pub const VERSION: u32 = 1;

/// Everything needed to resume training or evaluate.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: SeUNetTrans<T>,
    pub optimizer: Adam<T>,
    pub epoch: usize,
    pub seed: u64,
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn spec_lines(spec: &VariantSpec, out: &mut String) {
    let _ = writeln!(out, "variant: {}", spec.variant);
    let _ = writeln!(out, "in_channels: {}", spec.in_channels);
    let _ = writeln!(out, "encoder: {}", join(&spec.encoder.stages));
    let _ = writeln!(out, "bottleneck: {}", spec.encoder.bottleneck);
    let _ = writeln!(out, "bridge_channels: {}", spec.bridge_channels);
    let _ = writeln!(out, "embed_dim: {}", spec.embed_dim);
    let _ = writeln!(out, "heads: {}", spec.heads);
    let _ = writeln!(out, "depth: {}", spec.depth);
    let _ = writeln!(out, "reduction_ratio: {}", spec.reduction_ratio);
    let _ = writeln!(out, "merge_kernel: {}", spec.merge_kernel);
    let _ = writeln!(out, "merge_stride: {}", spec.merge_stride);
    let _ = writeln!(out, "merge_padding: {}", spec.merge_padding);
    let _ = writeln!(out, "mlp_ratio: {}", spec.mlp_ratio);
    let _ = writeln!(out, "cbr_widths: {},{}", spec.cbr_widths.0, spec.cbr_widths.1);
}

/// Serialize to bytes.
pub fn encode_checkpoint<T: Scalar>(model: &SeUNetTrans<T>, opt: &Adam<T>, epoch: usize, seed: u64) -> Vec<u8> {
    let mut tensors: Vec<(String, &Tensor<T>)> = Vec::new();
    for (_, p) in model.params().iter() {
        tensors.push((p.name.clone(), &p.value));
    }
    for (name, stats) in model.running_stats() {
        tensors.push((format!("{name}.running_mean"), &stats.mean));
        tensors.push((format!("{name}.running_var"), &stats.var));
    }
    for ((_, p), m) in model.params().iter().zip(&opt.m) {
        tensors.push((format!("adam.m.{}", p.name), m));
    }
    for ((_, p), v) in model.params().iter().zip(&opt.v) {
        tensors.push((format!("adam.v.{}", p.name), v));
    }

    let mut header = String::new();
    spec_lines(model.spec(), &mut header);
    let c = opt.config;
    let _ = writeln!(header, "epoch: {epoch}");
    let _ = writeln!(header, "seed: {seed}");
    let _ = writeln!(header, "adam.step: {}", opt.step);
    let _ = writeln!(header, "adam.lr: {:?}", c.lr);
    let _ = writeln!(header, "adam.beta1: {:?}", c.beta1);
    let _ = writeln!(header, "adam.beta2: {:?}", c.beta2);
    let _ = writeln!(header, "adam.eps: {:?}", c.eps);
    let _ = writeln!(header, "adam.weight_decay: {:?}", c.weight_decay);
    let mut offset = 0;
    for (name, t) in &tensors {
        let _ = writeln!(header, "tensor: {name} f32 {} {offset}", join(t.shape()));
        offset += 4 * t.numel();
    }
    header.push('\n');

    let mut bytes = Vec::with_capacity(12 + header.len() + offset);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for (_, t) in &tensors {
        for &x in t.data() {
            bytes.extend_from_slice(&(x.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    bytes
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &SeUNetTrans<T>, opt: &Adam<T>, epoch: usize, seed: u64) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    std::fs::write(path, encode_checkpoint(model, opt, epoch, seed)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

struct Header {
    fields: HashMap<String, String>,
    /// `(name, shape, offset)` in file order.
    tensors: Vec<(String, Vec<usize>, usize)>,
}

impl Header {
    fn get(&self, key: &str) -> Result<&str> {
        self.fields.get(key).map(String::as_str).ok_or_else(|| Error::MalformedHeader(format!("missing `{key}`")))
    }

    fn num<N: std::str::FromStr>(&self, key: &str) -> Result<N> {
        let v = self.get(key)?;
        v.parse().map_err(|_| Error::MalformedHeader(format!("bad value `{v}` for `{key}`")))
    }

    fn list(&self, key: &str) -> Result<Vec<usize>> {
        let v = self.get(key)?;
        v.split(',').map(|x| x.trim().parse().map_err(|_| Error::MalformedHeader(format!("bad list `{v}` for `{key}`")))).collect()
    }

    fn spec(&self) -> Result<VariantSpec> {
        let stages = self.list("encoder")?;
        let stages: [usize; 4] = stages.try_into().map_err(|_| Error::MalformedHeader("encoder needs four widths".into()))?;
        let cbr = self.list("cbr_widths")?;
        if cbr.len() != 2 {
            return Err(Error::MalformedHeader("cbr_widths needs two values".into()));
        }
        let spec = VariantSpec {
            variant: self.get("variant")?.parse().map_err(|e: Error| Error::MalformedHeader(e.to_string()))?,
            in_channels: self.num("in_channels")?,
            encoder: EncoderWidths { stages, bottleneck: self.num("bottleneck")? },
            bridge_channels: self.num("bridge_channels")?,
            embed_dim: self.num("embed_dim")?,
            heads: self.num("heads")?,
            depth: self.num("depth")?,
            reduction_ratio: self.num("reduction_ratio")?,
            merge_kernel: self.num("merge_kernel")?,
            merge_stride: self.num("merge_stride")?,
            merge_padding: self.num("merge_padding")?,
            mlp_ratio: self.num("mlp_ratio")?,
            cbr_widths: (cbr[0], cbr[1]),
        };
        spec.validate().map_err(|e| Error::MalformedHeader(e.to_string()))?;
        Ok(spec)
    }
}

fn parse_header(text: &str) -> Result<Header> {
    let mut fields = HashMap::new();
    let mut tensors = Vec::new();
    for line in text.lines() {
        let (key, value) = line.split_once(": ").ok_or_else(|| Error::MalformedHeader(format!("line `{line}`")))?;
        if key == "tensor" {
            let parts: Vec<&str> = value.split(' ').collect();
            let bad = || Error::MalformedHeader(format!("tensor line `{line}`"));
            if parts.len() != 4 || parts[1] != "f32" {
                return Err(bad());
            }
            let shape = if parts[2].is_empty() {
                Vec::new()
            } else {
                parts[2].split(',').map(|d| d.parse().map_err(|_| bad())).collect::<Result<Vec<usize>>>()?
            };
            tensors.push((parts[0].to_string(), shape, parts[3].parse().map_err(|_| bad())?));
        } else {
            fields.insert(key.to_string(), value.to_string());
        }
    }
    Ok(Header { fields, tensors })
}

/// Parse checkpoint bytes; `path` is only used in error messages.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Checkpoint<T>> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::UnsupportedVersion { found: version, expected: VERSION });
    }
    let rest = &bytes[12..];
    let end = rest.windows(2).position(|w| w == b"\n\n").ok_or_else(|| Error::MalformedHeader("unterminated header".into()))?;
    let text = std::str::from_utf8(&rest[..end]).map_err(|_| Error::MalformedHeader("header is not UTF-8".into()))?;
    let header = parse_header(text)?;
    let payload = &rest[end + 2..];

    let mut tensors: HashMap<&str, Tensor<T>> = HashMap::new();
    for (name, shape, offset) in &header.tensors {
        let numel: usize = shape.iter().product();
        let needed = 4 * numel;
        let available = payload.len().saturating_sub(*offset);
        if available < needed {
            return Err(Error::TruncatedPayload { name: name.clone(), needed, available });
        }
        let data = payload[*offset..offset + needed]
            .chunks_exact(4)
            .map(|b| T::from_f64_lossy(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect();
        tensors.insert(name, Tensor::from_vec(shape.clone(), data)?);
    }
    let mut take = |name: String| tensors.remove(name.as_str()).ok_or_else(|| Error::MalformedHeader(format!("missing tensor `{name}`")));

    let spec = header.spec()?;
    let seed: u64 = header.num("seed")?;
    let mut model = SeUNetTrans::new(spec, seed)?;
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    let mut params = Vec::with_capacity(names.len());
    for name in &names {
        params.push((name.clone(), take(name.clone())?));
    }
    let norm_names: Vec<String> = model.running_stats().map(|(n, _)| n.to_string()).collect();
    let mut running = Vec::with_capacity(norm_names.len());
    for name in norm_names {
        let mean = take(format!("{name}.running_mean"))?;
        let var = take(format!("{name}.running_var"))?;
        running.push((name, RunningStats { mean, var }));
    }
    model.load_state(&params, &running).map_err(|e| Error::MalformedHeader(e.to_string()))?;

    let config = AdamConfig {
        lr: header.num("adam.lr")?,
        beta1: header.num("adam.beta1")?,
        beta2: header.num("adam.beta2")?,
        eps: header.num("adam.eps")?,
        weight_decay: header.num("adam.weight_decay")?,
    };
    let mut optimizer = Adam::new(model.params(), config);
    optimizer.step = header.num("adam.step")?;
    for (i, name) in names.iter().enumerate() {
        let (m, v) = (take(format!("adam.m.{name}"))?, take(format!("adam.v.{name}"))?);
        m.expect_same_shape(&optimizer.m[i], "checkpoint")?;
        v.expect_same_shape(&optimizer.v[i], "checkpoint")?;
        optimizer.m[i] = m;
        optimizer.v[i] = v;
    }
    Ok(Checkpoint { model, optimizer, epoch: header.num("epoch")?, seed })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    decode_checkpoint(&bytes, path)
}
