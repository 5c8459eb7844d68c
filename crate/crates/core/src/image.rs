//! `FaceImage` helpers: range checks, batch <-> tensor layout, PNG I/O.

use std::path::Path;

use image::imageops::FilterType;
use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// H×W×C image with values nominally in [-1, 1].
pub type FaceImage = Array3<f64>;

/// Slack allowed above 1 / below -1 before an image counts as unnormalised.
pub const RANGE_EPS: f64 = 1e-3;

pub fn check_range(img: ArrayView3<'_, f64>, eps: f64) -> Result<()> {
    if let Some(v) = img.iter().find(|v| !(v.abs() <= 1.0 + eps)) {
        return Err(Error::Validation(format!(
            "pixel value {v} outside [-1, 1] (tolerance {eps}); images must be normalised"
        )));
    }
    Ok(())
}

/// Stacks HWC images into an NCHW tensor.
pub fn batch_to_tensor<E: Element>(images: &[FaceImage]) -> Result<Tensor<E>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Argument("empty image batch".into()))?;
    let (h, w, c) = first.dim();
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if img.dim() != (h, w, c) {
            return Err(Error::Dimension(format!(
                "batch mixes image shapes {:?} and {:?}",
                first.dim(),
                img.dim()
            )));
        }
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    data.push(E::from_f64_lossy(img[[i, j, ch]]));
                }
            }
        }
    }
    Tensor::from_vec(data, &[images.len(), c, h, w])
}

/// Splits an NCHW tensor back into HWC images.
pub fn tensor_to_batch<E: Element>(t: &Tensor<E>) -> Result<Vec<FaceImage>> {
    let &[n, c, h, w] = t.shape() else {
        return Err(Error::Dimension(format!("expected NCHW tensor, got {:?}", t.shape())));
    };
    let data = t.to_f64_vec();
    Ok((0..n)
        .map(|s| {
            Array3::from_shape_fn((h, w, c), |(i, j, ch)| data[((s * c + ch) * h + i) * w + j])
        })
        .collect())
}

fn to_u8(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

pub fn to_rgb8(img: &FaceImage) -> image::RgbImage {
    let (h, w, c) = img.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| to_u8(img[[y as usize, x as usize, ch.min(c - 1)]]);
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn save_png(img: &FaceImage, path: &Path) -> Result<()> {
    to_rgb8(img).save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Decodes a PNG/JPEG, resizes to `size`×`size` and rescales to [-1, 1].
pub fn load_image(path: &Path, size: usize) -> Result<FaceImage> {
    let dynamic = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    let rgb = dynamic.to_rgb8();
    let rgb = if rgb.width() as usize != size || rgb.height() as usize != size {
        image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle)
    } else {
        rgb
    };
    Ok(Array3::from_shape_fn((size, size, 3), |(i, j, ch)| {
        rgb.get_pixel(j as u32, i as u32)[ch] as f64 / 127.5 - 1.0
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_preserves_layout() {
        let a = Array3::from_shape_fn((2, 3, 3), |(i, j, c)| (i * 100 + j * 10 + c) as f64 / 1000.0);
        let b = a.mapv(|v| -v);
        let t = batch_to_tensor::<f64>(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 2, 3]);
        // channel 2, row 1, col 0 of sample 0
        assert_eq!(t.data()[(2 * 2 + 1) * 3], a[[1, 0, 2]]);
        let back = tensor_to_batch(&t).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    #[test]
    fn range_check_rejects_unnormalised_pixels() {
        let mut a = Array3::zeros((2, 2, 3));
        assert!(check_range(a.view(), RANGE_EPS).is_ok());
        a[[0, 0, 0]] = 1.0005;
        assert!(check_range(a.view(), RANGE_EPS).is_ok());
        a[[0, 0, 0]] = 255.0;
        assert!(matches!(check_range(a.view(), RANGE_EPS), Err(Error::Validation(_))));
    }

    #[test]
    fn png_round_trip_within_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let a = Array3::from_shape_fn((8, 8, 3), |(i, j, c)| ((i + j + c) as f64 / 17.0) * 2.0 - 1.0);
        save_png(&a, &p).unwrap();
        let b = load_image(&p, 8).unwrap();
        let err = (&a - &b).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(err <= 1.0 / 255.0 + 1e-9, "{err}");
    }
}
