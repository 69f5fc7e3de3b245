//! Decoding, resizing and batching of image/mask pairs.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use super::manifest::{Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::ops::resize_plane;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mask intensities at or above this value are foreground.
pub const MASK_THRESHOLD: u8 = 128;

/// One training or evaluation example.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    /// `(3, H, W)` in `[0, 1]`.
    pub image: Tensor<T>,
    /// `(1, H, W)` with values in `{0, 1}`.
    pub mask: Tensor<T>,
    pub id: String,
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    image::load_from_memory(&bytes).map_err(|e| Error::Decode { path: path.to_path_buf(), reason: e.to_string() })
}

/// RGB image as `(3, h, w)` values in `[0, 1]`, bilinearly resized.
pub fn image_tensor<T: Scalar>(img: &RgbImage, size: usize) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        let plane: Vec<T> = img.pixels().map(|p| T::from_f64_lossy(p.0[c] as f64 / 255.0)).collect();
        if (h, w) == (size, size) {
            data.extend(plane);
        } else {
            data.extend(resize_plane(&plane, h, w, size, size));
        }
    }
    Tensor::from_vec([3, size, size], data).expect("sizes agree")
}

/// Grayscale mask as `(1, size, size)` in `{0, 1}`: nearest-neighbour
/// resize, then threshold.
pub fn mask_tensor<T: Scalar>(img: &GrayImage, size: usize) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let nearest = |i: usize, src: usize| (((i as f64 + 0.5) * src as f64 / size as f64) as usize).min(src - 1);
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        let sy = nearest(y, h);
        for x in 0..size {
            let sx = nearest(x, w);
            let v = img.get_pixel(sx as u32, sy as u32).0[0];
            data.push(if v >= MASK_THRESHOLD { T::one() } else { T::zero() });
        }
    }
    Tensor::from_vec([1, size, size], data).expect("sizes agree")
}

/// Decode one manifest entry at the target square size.
pub fn load_sample<T: Scalar>(entry: &ManifestEntry, size: usize) -> Result<Sample<T>> {
    if size == 0 {
        return Err(Error::invalid("target size must be positive"));
    }
    let image = decode(&entry.image)?.to_rgb8();
    let mask = decode(&entry.mask)?.to_luma8();
    if image.width() == 0 || image.height() == 0 || mask.width() == 0 || mask.height() == 0 {
        return Err(Error::Decode { path: entry.image.clone(), reason: "empty image".into() });
    }
    Ok(Sample { image: image_tensor(&image, size), mask: mask_tensor(&mask, size), id: entry.id() })
}

/// Load every entry, in manifest order. `size` overrides the manifest's
/// declared size.
pub fn load_samples<T: Scalar>(manifest: &Manifest, size: Option<usize>) -> Result<Vec<Sample<T>>> {
    let size = size.or(manifest.size).ok_or_else(|| Error::invalid("no target size given and none declared in the manifest"))?;
    manifest.entries.iter().map(|e| load_sample(e, size)).collect()
}

/// Stack samples into `(B, 3, H, W)` images and `(B, 1, H, W)` masks.
pub fn stack_batch<T: Scalar>(samples: &[&Sample<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = samples.first().ok_or(Error::EmptyDataset)?;
    let (ishape, mshape) = (first.image.shape().to_vec(), first.mask.shape().to_vec());
    let mut images = Vec::with_capacity(samples.len() * first.image.numel());
    let mut masks = Vec::with_capacity(samples.len() * first.mask.numel());
    for s in samples {
        s.image.expect_same_shape(&first.image, "stack_batch")?;
        s.mask.expect_same_shape(&first.mask, "stack_batch")?;
        images.extend_from_slice(s.image.data());
        masks.extend_from_slice(s.mask.data());
    }
    let b = samples.len();
    Ok((
        Tensor::from_vec([b, ishape[0], ishape[1], ishape[2]], images)?,
        Tensor::from_vec([b, mshape[0], mshape[1], mshape[2]], masks)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Luma, Rgb};

    #[test]
    fn mask_threshold() {
        assert_eq!(mask_tensor::<f32>(&GrayImage::from_pixel(1, 1, Luma([200])), 1).data(), &[1.0]);
        assert_eq!(mask_tensor::<f32>(&GrayImage::from_pixel(1, 1, Luma([10])), 1).data(), &[0.0]);
        assert_eq!(mask_tensor::<f32>(&GrayImage::from_pixel(1, 1, Luma([128])), 1).data(), &[1.0]);
        let m2 = GrayImage::from_fn(2, 2, |x, _| Luma([if x == 0 { 200 } else { 10 }]));
        assert_eq!(mask_tensor::<f32>(&m2, 2).data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn constant_image_unchanged() {
        let img = RgbImage::from_pixel(8, 8, Rgb([51, 102, 255]));
        let t = image_tensor::<f64>(&img, 8);
        assert_eq!(t.shape(), &[3, 8, 8]);
        assert!((t.get(&[1, 3, 3]) - 0.4).abs() < 1e-12);
        let down = image_tensor::<f64>(&img, 4);
        assert!(down.data()[..16].iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn resize_extent() {
        let img = RgbImage::new(512, 512);
        assert_eq!(image_tensor::<f32>(&img, 256).shape(), &[3, 256, 256]);
    }

    #[test]
    fn stacking() {
        let s = Sample { image: Tensor::<f32>::ones([3, 2, 2]), mask: Tensor::zeros([1, 2, 2]), id: "a".into() };
        let (x, y) = stack_batch(&[&s, &s]).unwrap();
        assert_eq!((x.shape(), y.shape()), (&[2usize, 3, 2, 2][..], &[2usize, 1, 2, 2][..]));
        assert!(stack_batch::<f32>(&[]).is_err());
    }
}
