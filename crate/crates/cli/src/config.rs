//! Run configuration: `key=value` files merged with command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use seunet_core::model::{build_variant, EncoderWidths, VariantSpec, CBR_WIDTHS};
use seunet_core::train::AdamConfig;

use crate::error::CliError;

pub const KEYS: [&str; 10] = ["variant", "widths", "epochs", "batch", "lr", "weight_decay", "seed", "size", "manifest", "out_dir"];

/// Raw `key=value` pairs from a config file. Blank lines and `#` comments
/// are skipped; unknown keys are an error.
pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("reading config {}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        CliError::Usage(msg) => CliError::Usage(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| CliError::Usage(format!("line {}: expected key=value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(CliError::Usage(format!("line {}: unknown key `{k}` (known: {})", i + 1, KEYS.join(", "))));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(CliError::Usage(format!("line {}: key `{k}` given twice", i + 1)));
        }
    }
    Ok(out)
}

/// Fully validated settings for `train`.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub spec: VariantSpec,
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub size: Option<usize>,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
}

/// Values given on the command line; each overrides the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub variant: Option<String>,
    pub widths: Option<String>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub seed: Option<u64>,
    pub size: Option<usize>,
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

fn parse_value<V: std::str::FromStr>(file: &BTreeMap<String, String>, key: &str) -> Result<Option<V>, CliError> {
    file.get(key)
        .map(|v| v.parse().map_err(|_| CliError::Usage(format!("invalid value `{v}` for `{key}`"))))
        .transpose()
}

impl RunConfig {
    pub fn resolve(file: &BTreeMap<String, String>, cli: Overrides) -> Result<Self, CliError> {
        let defaults = AdamConfig::default();
        let variant = cli.variant.or(parse_value(file, "variant")?).unwrap_or_else(|| "M".into());
        let widths = cli.widths.or(parse_value(file, "widths")?).unwrap_or_else(|| "desk".into());
        let encoder = EncoderWidths::preset(&widths).map_err(|e| CliError::Usage(e.to_string()))?;
        let spec = build_variant(&variant, encoder, CBR_WIDTHS).map_err(|e| CliError::Usage(e.to_string()))?;
        let cfg = RunConfig {
            spec,
            epochs: cli.epochs.or(parse_value(file, "epochs")?).unwrap_or(10),
            batch: cli.batch.or(parse_value(file, "batch")?).unwrap_or(8),
            adam: AdamConfig {
                lr: cli.lr.or(parse_value(file, "lr")?).unwrap_or(defaults.lr),
                weight_decay: cli.weight_decay.or(parse_value(file, "weight_decay")?).unwrap_or(defaults.weight_decay),
                ..defaults
            },
            seed: cli.seed.or(parse_value(file, "seed")?).unwrap_or(0),
            size: cli.size.or(parse_value(file, "size")?),
            manifest: cli.manifest.or(parse_value(file, "manifest")?).ok_or_else(|| CliError::Usage("no manifest given (--manifest or manifest=)".into()))?,
            out_dir: cli.out_dir.or(parse_value(file, "out_dir")?).unwrap_or_else(|| PathBuf::from("runs")),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if !(self.adam.lr.is_finite() && self.adam.lr > 0.0) {
            return bad(format!("learning rate {} must be positive", self.adam.lr));
        }
        if !(self.adam.weight_decay.is_finite() && self.adam.weight_decay >= 0.0) {
            return bad(format!("weight decay {} must be non-negative", self.adam.weight_decay));
        }
        if let Some(size) = self.size {
            self.spec.check_input(size, size).map_err(|e| CliError::Usage(e.to_string()))?;
        }
        Ok(())
    }
}
