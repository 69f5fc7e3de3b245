//! Synthetic ellipse dataset: bright filled ellipses over dark noise, with
//! the exact rasterized union as the mask.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};

/// Axis-aligned ellipse in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub color: [u8; 3],
}

impl Ellipse {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 - self.cx) / self.a;
        let dy = (y as f64 - self.cy) / self.b;
        dx * dx + dy * dy <= 1.0
    }
}

pub struct SyntheticSample {
    pub ellipses: Vec<Ellipse>,
    pub image: RgbImage,
    pub mask: GrayImage,
}

/// Generate `n` samples of `size×size` in memory.
pub fn synthesize(n: usize, size: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    if n == 0 || size < 4 {
        return Err(Error::invalid(format!("need n >= 1 and size >= 4, got n={n}, size={size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let count = rng.gen_range(1..=3);
        let ellipses: Vec<Ellipse> = (0..count)
            .map(|_| Ellipse {
                cx: rng.gen_range(0.2 * s..0.8 * s),
                cy: rng.gen_range(0.2 * s..0.8 * s),
                a: rng.gen_range(0.08 * s..0.25 * s),
                b: rng.gen_range(0.08 * s..0.25 * s),
                color: [rng.gen_range(150..=255), rng.gen_range(150..=255), rng.gen_range(150..=255)],
            })
            .collect();
        let mut image = RgbImage::new(size as u32, size as u32);
        let mut mask = GrayImage::new(size as u32, size as u32);
        for y in 0..size {
            for x in 0..size {
                let noise: [u8; 3] = [rng.gen_range(0..90), rng.gen_range(0..90), rng.gen_range(0..90)];
                let inside = ellipses.iter().rev().find(|e| e.contains(x, y));
                let px = match inside {
                    Some(e) => [0, 1, 2].map(|c| e.color[c].saturating_sub(noise[c] / 3)),
                    None => noise,
                };
                image.put_pixel(x as u32, y as u32, Rgb(px));
                mask.put_pixel(x as u32, y as u32, Luma([if inside.is_some() { 255 } else { 0 }]));
            }
        }
        out.push(SyntheticSample { ellipses, image, mask });
    }
    Ok(out)
}

/// Write `n` samples as PNG files under `dir/images` and `dir/masks`, plus
/// `dir/manifest.tsv`. Returns the manifest.
pub fn generate_synthetic(n: usize, size: usize, seed: u64, dir: &Path) -> Result<Manifest> {
    let samples = synthesize(n, size, seed)?;
    let io = |what: &str, p: &Path, e: std::io::Error| Error::io(format!("{what} {}", p.display()), e);
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| io("creating", &p, e))?;
    }
    let mut entries = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        let entry = ManifestEntry { image: dir.join(format!("images/{i:04}.png")), mask: dir.join(format!("masks/{i:04}.png")) };
        let save_err = |p: &Path, e: image::ImageError| match e {
            image::ImageError::IoError(e) => io("writing", p, e),
            other => Error::Decode { path: p.to_path_buf(), reason: other.to_string() },
        };
        s.image.save(&entry.image).map_err(|e| save_err(&entry.image, e))?;
        s.mask.save(&entry.mask).map_err(|e| save_err(&entry.mask, e))?;
        entries.push(entry);
    }
    let manifest = Manifest { entries, size: Some(size), split: Some(Split::Train) };
    manifest.write(&dir.join("manifest.tsv"))?;
    Ok(manifest)
}
