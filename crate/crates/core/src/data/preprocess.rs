use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::nn::kernels::bilinear_resize;

/// A preprocessed image: square, CHW, every value finite and inside [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(Array3<f64>);

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (_, h, w) = data.dim();
        if h != w {
            return Err(Error::Shape {
                ctx: "image tensor",
                expected: "square".into(),
                got: format!("{h}x{w}"),
            });
        }
        for v in data.iter() {
            if !v.is_finite() || *v < 0.0 || *v > 1.0 {
                return Err(Error::Shape {
                    ctx: "image tensor",
                    expected: "values in [0,1]".into(),
                    got: format!("{v}"),
                });
            }
        }
        Ok(Self(data))
    }

    pub fn array(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array3<f64> {
        self.0
    }

    pub fn size(&self) -> usize {
        self.0.dim().1
    }

    pub fn channels(&self) -> usize {
        self.0.dim().0
    }
}

/// Decode an image file to CHW f64 in [0,1]. Grayscale files come back with
/// one channel, color files with three.
pub fn decode_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(dynamic_to_chw(&img))
}

pub(crate) fn dynamic_to_chw(img: &image::DynamicImage) -> Array3<f64> {
    match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            Array3::from_shape_fn((1, h as usize, w as usize), |(_, y, x)| {
                g.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
            })
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
                rgb.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
            })
        }
    }
}

/// Decode a stored mask to {0,1}. 8-bit mask files are binarized at 127/255
/// since nominally binary files may be anti-aliased.
pub fn decode_mask(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let g = img.to_luma8();
    let (w, h) = g.dimensions();
    Ok(Array2::from_shape_fn(
        (h as usize, w as usize),
        |(y, x)| {
            if g.get_pixel(x as u32, y as u32).0[0] > 127 {
                1.0
            } else {
                0.0
            }
        },
    ))
}

/// Nearest-neighbor mask resize; keeps values binary.
pub fn resize_mask_nearest(mask: &Array2<f64>, target: usize) -> Array2<f64> {
    let (h, w) = mask.dim();
    if h == target && w == target {
        return mask.clone();
    }
    Array2::from_shape_fn((target, target), |(y, x)| {
        let sy = ((y as f64 + 0.5) * h as f64 / target as f64).floor() as usize;
        let sx = ((x as f64 + 0.5) * w as f64 / target as f64).floor() as usize;
        mask[[sy.min(h - 1), sx.min(w - 1)]]
    })
}

/// Bilinear resize to `target_size` squared, scale to [0,1], and adapt the
/// channel count (grayscale replicated, color averaged down when one channel
/// is configured). Resizing at the target size is exact, so the operation is
/// idempotent.
pub fn preprocess(raw: &Array3<f64>, target_size: usize, channels: usize) -> Result<ImageTensor> {
    assert!(target_size > 0, "target size must be positive");
    let resized = bilinear_resize(&raw.view(), target_size, target_size);
    let (c_in, _, _) = resized.dim();

    let adapted = if c_in == channels {
        resized
    } else if c_in == 1 {
        let mut out = Array3::zeros((channels, target_size, target_size));
        for c in 0..channels {
            out.index_axis_mut(ndarray::Axis(0), c)
                .assign(&resized.index_axis(ndarray::Axis(0), 0));
        }
        out
    } else if channels == 1 {
        let mut out = Array3::zeros((1, target_size, target_size));
        let mut acc = out.index_axis_mut(ndarray::Axis(0), 0);
        for c in 0..c_in {
            acc += &resized.index_axis(ndarray::Axis(0), c);
        }
        acc /= c_in as f64;
        out
    } else {
        return Err(Error::Shape {
            ctx: "preprocess channels",
            expected: format!("1 or {channels}"),
            got: format!("{c_in}"),
        });
    };

    // bilinear interpolation of in-range data stays in range up to roundoff
    let clamped = adapted.mapv(|v| v.clamp(0.0, 1.0));
    ImageTensor::new(clamped)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preprocess_is_idempotent_at_target_size() {
        let raw = Array3::from_shape_fn((3, 20, 30), |(c, y, x)| {
            ((c + 1) as f64 * 0.07 + y as f64 * 0.013 + x as f64 * 0.011) % 1.0
        });
        let once = preprocess(&raw, 16, 3).unwrap();
        let twice = preprocess(once.array(), 16, 3).unwrap();
        let diff = (once.array() - twice.array())
            .iter()
            .map(|d| d.abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-6, "max diff {diff}");
    }

    #[test]
    fn grayscale_is_replicated() {
        let raw = Array3::from_shape_fn((1, 8, 8), |(_, y, x)| ((y * 8 + x) as f64) / 63.0);
        let out = preprocess(&raw, 8, 3).unwrap();
        assert_eq!(out.channels(), 3);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(out.array()[[0, y, x]], out.array()[[2, y, x]]);
            }
        }
    }

    #[test]
    fn zero_image_stays_zero() {
        let raw = Array3::zeros((3, 12, 12));
        let out = preprocess(&raw, 8, 3).unwrap();
        assert_eq!(out.array().sum(), 0.0);
    }

    #[test]
    fn rejects_out_of_range() {
        let raw = Array3::from_elem((3, 4, 4), 1.5);
        assert!(ImageTensor::new(raw).is_err());
    }
}
