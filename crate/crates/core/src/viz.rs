//! Byte-stable image artifact writers: grayscale maps, binary masks, RGB
//! panels, heatmaps with a fixed colormap, and gallery composition.

use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Fixed jet-style colormap: t in [0,1] -> RGB.
pub fn heat_color(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
    [to_u8(r), to_u8(g), to_u8(b)]
}

pub fn save_gray(path: &Path, map: &Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Luma([to_u8(map[[y, x]])]));
        }
    }
    save(img.into(), path)
}

pub fn save_mask(path: &Path, mask: &Array2<f64>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = if mask[[y, x]] > 0.5 { 255 } else { 0 };
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    save(img.into(), path)
}

pub fn save_heatmap(path: &Path, map: &Array2<f64>) -> Result<()> {
    save(heatmap_image(map).into(), path)
}

pub fn heatmap_image(map: &Array2<f64>) -> RgbImage {
    let (h, w) = map.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Rgb(heat_color(map[[y, x]])));
        }
    }
    img
}

pub fn save_rgb(path: &Path, chw: &Array3<f64>) -> Result<()> {
    save(rgb_image(chw).into(), path)
}

pub fn rgb_image(chw: &Array3<f64>) -> RgbImage {
    let (c, h, w) = chw.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = if c >= 3 {
                [
                    to_u8(chw[[0, y, x]]),
                    to_u8(chw[[1, y, x]]),
                    to_u8(chw[[2, y, x]]),
                ]
            } else {
                let v = to_u8(chw[[0, y, x]]);
                [v, v, v]
            };
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img
}

/// Horizontal strip of equally sized panels with a 2px separator.
pub fn compose_row(panels: &[RgbImage]) -> RgbImage {
    let h = panels.iter().map(|p| p.height()).max().unwrap_or(1);
    let sep = 2u32;
    let w: u32 = panels.iter().map(|p| p.width() + sep).sum::<u32>().saturating_sub(sep);
    let mut out = RgbImage::from_pixel(w.max(1), h.max(1), image::Rgb([32, 32, 32]));
    let mut x0 = 0u32;
    for panel in panels {
        for y in 0..panel.height() {
            for x in 0..panel.width() {
                out.put_pixel(x0 + x, y, *panel.get_pixel(x, y));
            }
        }
        x0 += panel.width() + sep;
    }
    out
}

/// Vertical stack of rows with a 2px separator.
pub fn compose_gallery(rows: &[RgbImage]) -> RgbImage {
    let w = rows.iter().map(|r| r.width()).max().unwrap_or(1);
    let sep = 2u32;
    let h: u32 = rows.iter().map(|r| r.height() + sep).sum::<u32>().saturating_sub(sep);
    let mut out = RgbImage::from_pixel(w.max(1), h.max(1), image::Rgb([32, 32, 32]));
    let mut y0 = 0u32;
    for row in rows {
        for y in 0..row.height() {
            for x in 0..row.width() {
                out.put_pixel(x, y0 + y, *row.get_pixel(x, y));
            }
        }
        y0 += row.height() + sep;
    }
    out
}

pub fn save(img: image::DynamicImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Mean over channels of a CHW tensor, for single-panel previews.
pub fn channel_mean_map(chw: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = chw.dim();
    let mut out = Array2::zeros((h, w));
    for ci in 0..c {
        out += &chw.index_axis(Axis(0), ci);
    }
    out / c as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heat_color_endpoints() {
        assert_eq!(heat_color(0.0), [0, 0, 128]); // dark blue
        assert_eq!(heat_color(1.0), [128, 0, 0]); // dark red
        assert_eq!(heat_color(0.5), [128, 255, 128]);
    }

    #[test]
    fn artifacts_are_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let map = Array2::from_shape_fn((9, 9), |(y, x)| ((y * 9 + x) as f64) / 80.0);
        let a = dir.path().join("a.png");
        let b = dir.path().join("b.png");
        save_heatmap(&a, &map).unwrap();
        save_heatmap(&b, &map).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}
