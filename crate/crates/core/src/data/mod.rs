//! Paired image ingestion, splitting and batching.
//!
//! Images are decoded with the `image` crate (PNG or JPEG in, PNG out),
//! resized bilinearly with a triangle filter, and stored as `(1, 3, H, W)`
//! tensors with values in `[0, 1]`.

mod batch;
mod manifest;

use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb, RgbImage};

pub use batch::{batch_order, batches, epoch_seed, prefetch, Batch, FileDataset, InMemoryDataset, PairDataset};
pub use manifest::{data_root_from_env, split, DatasetManifest, Pair, DATA_ROOT_ENV};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// A degraded image and its reference, both `(1, 3, H, W)` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub raw: Tensor4<f32>,
    pub reference: Tensor4<f32>,
    pub raw_path: Option<PathBuf>,
    pub reference_path: Option<PathBuf>,
}

impl ImagePair {
    pub fn new(raw: Tensor4<f32>, reference: Tensor4<f32>) -> Result<Self> {
        let s = raw.shape();
        if s != reference.shape() || s.batch != 1 || s.channels != 3 {
            return Err(Error::shape("ImagePair", s, reference.shape()));
        }
        for t in [&raw, &reference] {
            if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::precondition("ImagePair", "pixel values must lie in [0, 1]"));
            }
        }
        Ok(ImagePair {
            raw,
            reference,
            raw_path: None,
            reference_path: None,
        })
    }
}

fn ingestion(path: &Path, reason: impl ToString) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Decodes an 8-bit RGB image and resizes it to `(height, width)`.
pub fn load_image(path: &Path, (height, width): (usize, usize)) -> Result<Tensor4<f32>> {
    if height == 0 || width == 0 {
        return Err(Error::Config(format!("target resolution must be positive, got {height}x{width}")));
    }
    let img = image::open(path).map_err(|e| ingestion(path, e))?.to_rgb8();
    let (w0, h0) = img.dimensions();
    let mut buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_fn(w0, h0, |x, y| {
        let p = img.get_pixel(x, y).0;
        Rgb([p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0])
    });
    if (w0 as usize, h0 as usize) != (width, height) {
        buf = imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
    }
    if (buf.width() as usize, buf.height() as usize) != (width, height) {
        return Err(ingestion(
            path,
            format!("resized to {}x{}, expected {width}x{height}", buf.width(), buf.height()),
        ));
    }
    Tensor4::from_fn(Shape4::new(1, 3, height, width), |_, c, y, x| {
        buf.get_pixel(x as u32, y as u32).0[c].clamp(0.0, 1.0)
    })
}

/// `(height, width)` of an image file, read from its header.
pub fn image_size(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| ingestion(path, e))?;
    Ok((h as usize, w as usize))
}

/// Loads an image at its stored resolution.
pub fn load_image_native(path: &Path) -> Result<Tensor4<f32>> {
    load_image(path, image_size(path)?)
}

/// Loads a raw/reference pair at the target resolution.
pub fn load_pair(raw: &Path, reference: &Path, target: (usize, usize)) -> Result<ImagePair> {
    let r = load_image(raw, target)?;
    let j = load_image(reference, target)?;
    if r.shape() != j.shape() {
        return Err(ingestion(reference, format!("shape {} differs from raw {}", j.shape(), r.shape())));
    }
    Ok(ImagePair {
        raw: r,
        reference: j,
        raw_path: Some(raw.to_path_buf()),
        reference_path: Some(reference.to_path_buf()),
    })
}

/// Converts frame `index` of a 3-channel tensor to 8-bit RGB, clamping to `[0, 1]`.
pub fn to_rgb8(tensor: &Tensor4<f32>, index: usize) -> Result<RgbImage> {
    let s = tensor.shape();
    if s.channels != 3 || index >= s.batch {
        return Err(Error::shape("to_rgb8", s, index));
    }
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(RgbImage::from_fn(s.width as u32, s.height as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([
            q(tensor.get(index, 0, y, x)),
            q(tensor.get(index, 1, y, x)),
            q(tensor.get(index, 2, y, x)),
        ])
    }))
}

/// Writes frame `index` as an 8-bit PNG.
pub fn save_png(tensor: &Tensor4<f32>, index: usize, path: &Path) -> Result<()> {
    let img = to_rgb8(tensor, index)?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| ingestion(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(path: &Path, img: &RgbImage) {
        img.save_with_format(path, image::ImageFormat::Png).unwrap();
    }

    #[test]
    fn same_size_load_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = RgbImage::from_fn(16, 8, |x, y| Rgb([(x * 13) as u8, (y * 29) as u8, (x * y) as u8]));
        write(&p, &img);
        let t = load_image(&p, (8, 16)).unwrap();
        assert_eq!(t.shape(), Shape4::new(1, 3, 8, 16));
        for y in 0..8 {
            for x in 0..16 {
                let px = img.get_pixel(x as u32, y as u32).0;
                for (c, &v) in px.iter().enumerate() {
                    assert_eq!(t.get(0, c, y, x), v as f32 / 255.0);
                }
            }
        }
    }

    #[test]
    fn solid_colour_survives_upscaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("solid.png");
        write(&p, &RgbImage::from_pixel(2, 2, Rgb([10, 128, 250])));
        let t = load_image(&p, (4, 4)).unwrap();
        for c in 0..3 {
            let want = [10.0f32, 128.0, 250.0][c] / 255.0;
            for y in 0..4 {
                for x in 0..4 {
                    assert!((t.get(0, c, y, x) - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn missing_reference_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("raw.png");
        write(&raw, &RgbImage::new(4, 4));
        let missing = dir.path().join("nope.png");
        match load_pair(&raw, &missing, (4, 4)) {
            Err(Error::Ingestion { path, .. }) => assert_eq!(path, missing),
            other => panic!("unexpected {other:?}"),
        }
        let junk = dir.path().join("junk.png");
        std::fs::write(&junk, b"not an image").unwrap();
        assert!(matches!(load_image(&junk, (4, 4)), Err(Error::Ingestion { .. })));
    }

    #[test]
    fn export_and_reload_is_within_one_level() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.png");
        let t = Tensor4::from_fn(Shape4::new(1, 3, 5, 7), |_, c, y, x| ((c * 31 + y * 7 + x * 3) % 97) as f32 / 96.0)
            .unwrap();
        save_png(&t, 0, &p).unwrap();
        let back = load_image(&p, (5, 7)).unwrap();
        assert!(t.max_abs_diff(&back).unwrap() <= 1.0 / 255.0);
    }

    #[test]
    fn export_clamps_out_of_range_values() {
        let t = Tensor4::from_vec(Shape4::new(1, 3, 1, 2), vec![-0.5, 1.5, 0.5, 0.5, 0.0, 1.0]).unwrap();
        let img = to_rgb8(&t, 0).unwrap();
        assert_eq!(img.get_pixel(0, 0).0, [0, 128, 0]);
        assert_eq!(img.get_pixel(1, 0).0, [255, 128, 255]);
    }
}
