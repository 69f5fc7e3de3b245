//! Tab-separated image/mask manifests and dataset split presets.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}` (expected train or test)"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
}

impl ManifestEntry {
    /// Identifier used in reports: the image file stem.
    pub fn id(&self) -> String {
        self.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }
}

/// Ordered image/mask pairs.
///
/// Text form: one `image<TAB>mask` pair per line, paths relative to the
/// manifest's directory. Blank lines and `#` comments are skipped, except
/// the directives `#size=N` (square target size) and `#split=train|test`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub size: Option<usize>,
    pub split: Option<Split>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Render as manifest text, with paths made relative to `base` where
    /// possible.
    pub fn to_tsv(&self, base: &Path) -> String {
        let mut s = String::new();
        if let Some(size) = self.size {
            let _ = writeln!(s, "#size={size}");
        }
        if let Some(split) = self.split {
            let _ = writeln!(s, "#split={split}");
        }
        for e in &self.entries {
            let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
            let _ = writeln!(s, "{}\t{}", rel(&e.image), rel(&e.mask));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        std::fs::write(path, self.to_tsv(base)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Parse manifest text. Paths are joined onto `base` but not checked.
pub fn parse_manifest(text: &str, base: &Path, origin: &Path) -> Result<Manifest> {
    let mut m = Manifest::default();
    let mut seen: HashMap<ManifestEntry, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        let err = |reason: String| Error::Manifest { path: origin.to_path_buf(), line: line_no, reason };
        if line.trim().is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(v) = comment.strip_prefix("size=") {
                m.size = Some(v.trim().parse().map_err(|_| err(format!("bad size `{v}`")))?);
            } else if let Some(v) = comment.strip_prefix("split=") {
                m.split = Some(v.trim().parse().map_err(|e: Error| err(e.to_string()))?);
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 || fields.iter().any(|f| f.trim().is_empty()) {
            return Err(err("expected `image<TAB>mask`".into()));
        }
        let entry = ManifestEntry { image: base.join(fields[0].trim()), mask: base.join(fields[1].trim()) };
        if let Some(&first) = seen.get(&entry) {
            return Err(Error::DuplicateEntry { path: origin.to_path_buf(), line: line_no, first });
        }
        seen.insert(entry.clone(), line_no);
        m.entries.push(entry);
    }
    Ok(m)
}

/// Read and validate a manifest: every referenced file must exist and no
/// pair may repeat.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let m = parse_manifest(&text, base, path)?;
    // Line numbers of entries, for error messages.
    let lines: Vec<usize> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, _)| i + 1)
        .collect();
    for (e, &line) in m.entries.iter().zip(&lines) {
        for p in [&e.image, &e.mask] {
            if !p.is_file() {
                return Err(Error::MissingFile { path: path.to_path_buf(), line, missing: p.clone() });
            }
        }
    }
    Ok(m)
}

/// Seeded shuffle, then the first `round(n·fraction)` entries train and
/// the rest test.
pub fn split_dataset(entries: &[ManifestEntry], train_fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!("train fraction {train_fraction} must lie strictly between 0 and 1")));
    }
    let mut shuffled = entries.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (entries.len() as f64 * train_fraction).round() as usize;
    let test = shuffled.split_off(n_train);
    Ok((
        Manifest { entries: shuffled, size: None, split: Some(Split::Train) },
        Manifest { entries: test, size: None, split: Some(Split::Test) },
    ))
}

/// A public dataset's image size and train/test counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetPreset {
    pub name: &'static str,
    pub size: usize,
    pub train: usize,
    pub test: usize,
}

pub const PRESETS: [DatasetPreset; 9] = [
    DatasetPreset { name: "kvasir-seg", size: 512, train: 880, test: 120 },
    DatasetPreset { name: "cvc-clinicdb", size: 384, train: 550, test: 62 },
    DatasetPreset { name: "mixed-kvasir-seg", size: 384, train: 900, test: 100 },
    DatasetPreset { name: "mixed-cvc-clinicdb", size: 384, train: 550, test: 62 },
    DatasetPreset { name: "mixed-cvc-colondb", size: 384, train: 0, test: 380 },
    DatasetPreset { name: "mixed-endoscene", size: 384, train: 0, test: 60 },
    DatasetPreset { name: "glas", size: 128, train: 85, test: 80 },
    DatasetPreset { name: "isic-2018", size: 256, train: 2075, test: 519 },
    DatasetPreset { name: "dsb-2018", size: 256, train: 536, test: 134 },
];

impl DatasetPreset {
    pub fn find(name: &str) -> Result<&'static DatasetPreset> {
        PRESETS.iter().find(|p| p.name == name).ok_or_else(|| {
            let names: Vec<_> = PRESETS.iter().map(|p| p.name).collect();
            Error::invalid(format!("unknown dataset preset `{name}` (known: {})", names.join(", ")))
        })
    }

    /// Template manifests `(train, test)` with placeholder file names
    /// `images/<name>_NNNN.png` / `masks/<name>_NNNN.png`, to be edited to
    /// point at the real files.
    pub fn templates(&self) -> (Manifest, Manifest) {
        let entry = |i: usize| ManifestEntry {
            image: PathBuf::from(format!("images/{}_{:04}.png", self.name, i + 1)),
            mask: PathBuf::from(format!("masks/{}_{:04}.png", self.name, i + 1)),
        };
        let train = (0..self.train).map(entry).collect();
        let test = (self.train..self.train + self.test).map(entry).collect();
        (
            Manifest { entries: train, size: Some(self.size), split: Some(Split::Train) },
            Manifest { entries: test, size: Some(self.size), split: Some(Split::Test) },
        )
    }

    /// Check a loaded manifest pair against the preset counts.
    pub fn check(&self, train: &Manifest, test: &Manifest) -> Result<()> {
        if train.len() != self.train || test.len() != self.test {
            return Err(Error::invalid(format!(
                "{}: expected {}/{} train/test entries, found {}/{}",
                self.name,
                self.train,
                self.test,
                train.len(),
                test.len()
            )));
        }
        Ok(())
    }
}
