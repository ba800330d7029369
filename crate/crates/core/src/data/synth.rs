//! Synthetic datasets for desk-scale experiments: a textured defect dataset
//! with exact ground-truth masks, and a ten-class seven-segment digit set in
//! the gridded layout.

use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::Array2;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::init;

use super::folder::load_folder_dataset;
use super::{DatasetHandle, Split};

#[derive(Debug, Clone, Copy)]
pub struct SynthDefectSpec {
    pub n_clean: usize,
    pub n_defect: usize,
    pub image_size: usize,
    pub seed: u64,
}

/// Per-image bookkeeping of the generator, used to cross-check stored masks.
#[derive(Debug, Serialize, Deserialize)]
pub struct SynthMeta {
    pub seed: u64,
    pub image_size: usize,
    pub n_clean: usize,
    pub n_defect: usize,
    /// Exact painted-pixel count of each defect image, in file order.
    pub painted: Vec<usize>,
}

/// Generate the textured defect dataset under `root` in the defect-folder
/// layout and return (train, test) handles. Rewrites deterministically:
/// the same spec always produces byte-identical files.
pub fn synth_defect_dataset(
    root: &Path,
    spec: SynthDefectSpec,
    channels: usize,
) -> Result<(DatasetHandle, DatasetHandle)> {
    if spec.n_clean == 0 {
        return Err(Error::InvalidCount(
            "synthetic dataset needs at least one clean image".into(),
        ));
    }
    if spec.image_size < 16 {
        return Err(Error::InvalidCount("image_size must be at least 16".into()));
    }

    let train_dir = root.join("train").join("good");
    let test_dir = root.join("test").join("defect");
    let gt_dir = root.join("ground_truth").join("defect");
    for dir in [&train_dir, &test_dir, &gt_dir] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.clone(), e))?;
    }

    for i in 0..spec.n_clean {
        let img = texture_image(spec.seed, "train-clean", i, spec.image_size);
        save_rgb(&train_dir.join(format!("{i:04}.png")), &img)?;
    }

    let mut painted = Vec::with_capacity(spec.n_defect);
    for i in 0..spec.n_defect {
        let mut img = texture_image(spec.seed, "test-defect", i, spec.image_size);
        let mask = paint_defects(spec.seed, i, &mut img);
        painted.push(mask.iter().filter(|v| **v > 0.5).count());
        save_rgb(&test_dir.join(format!("{i:04}.png")), &img)?;
        save_mask(&gt_dir.join(format!("{i:04}_mask.png")), &mask)?;
    }

    let meta = SynthMeta {
        seed: spec.seed,
        image_size: spec.image_size,
        n_clean: spec.n_clean,
        n_defect: spec.n_defect,
        painted,
    };
    let meta_path = root.join("synth_meta.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).unwrap())
        .map_err(|e| Error::io(meta_path, e))?;

    let train = load_folder_dataset(root, Split::Train, spec.image_size, channels)?;
    let test = if spec.n_defect > 0 {
        load_folder_dataset(root, Split::Test, spec.image_size, channels)?
    } else {
        DatasetHandle::new(
            root.to_path_buf(),
            Split::Test,
            train.category.clone(),
            spec.image_size,
            channels,
            Vec::new(),
            Default::default(),
        )
    };
    Ok((train, test))
}

pub fn read_synth_meta(root: &Path) -> Result<SynthMeta> {
    let path = root.join("synth_meta.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::ConfigParse(e.to_string()))
}

/// Smooth plaid texture with per-image phase jitter, an illumination ramp,
/// and light pixel noise. Values returned per channel in [0.02, 0.98].
fn texture_image(seed: u64, salt: &str, index: usize, size: usize) -> Vec<Array2<f64>> {
    let mut rng = init::rng_for(seed, &format!("texture/{salt}/{index}"));
    let f1 = 3.0 + rng.random::<f64>() * 2.0;
    let f2 = 3.0 + rng.random::<f64>() * 2.0;
    let f3 = 6.0 + rng.random::<f64>() * 2.0;
    let p1 = rng.random::<f64>();
    let p2 = rng.random::<f64>();
    let p3 = rng.random::<f64>();
    let gx = (rng.random::<f64>() - 0.5) * 0.1;
    let gy = (rng.random::<f64>() - 0.5) * 0.1;
    let tau = std::f64::consts::TAU;

    let mut base = Array2::<f64>::zeros((size, size));
    for y in 0..size {
        for x in 0..size {
            let u = x as f64 / size as f64;
            let v = y as f64 / size as f64;
            let mut val = 0.55
                + 0.16 * (tau * (f1 * u + p1)).sin()
                + 0.16 * (tau * (f2 * v + p2)).sin()
                + 0.06 * (tau * (f3 * (u + v) + p3)).sin()
                + gx * (u - 0.5)
                + gy * (v - 0.5);
            val += (rng.random::<f64>() - 0.5) * 0.02;
            base[[y, x]] = val.clamp(0.02, 0.98);
        }
    }

    let offsets = [0.03, 0.0, -0.03];
    offsets
        .iter()
        .map(|off| base.mapv(|v| (v + off).clamp(0.02, 0.98)))
        .collect()
}

/// Paint 1-3 axis-aligned rectangles or 3-pixel strokes of contrasting
/// intensity; returns the exact painted mask.
fn paint_defects(seed: u64, index: usize, channels: &mut [Array2<f64>]) -> Array2<f64> {
    let size = channels[0].dim().0;
    let mut rng = init::rng_for(seed, &format!("defect/{index}"));
    let mut mask = Array2::<f64>::zeros((size, size));
    let n_shapes = 1 + rng.random_range(0..3);

    for _ in 0..n_shapes {
        let dark = rng.random::<f64>() < 0.5;
        let value = if dark {
            0.06 + rng.random::<f64>() * 0.04
        } else {
            0.90 + rng.random::<f64>() * 0.04
        };
        let stroke = rng.random::<f64>() < 0.4;
        let (x0, y0, w, h) = if stroke {
            let len = size / 4 + rng.random_range(0..size / 4);
            let horizontal = rng.random::<f64>() < 0.5;
            let (w, h) = if horizontal { (len, 3) } else { (3, len) };
            (
                rng.random_range(0..size.saturating_sub(w).max(1)),
                rng.random_range(0..size.saturating_sub(h).max(1)),
                w,
                h,
            )
        } else {
            let w = size / 10 + rng.random_range(0..size / 6);
            let h = size / 10 + rng.random_range(0..size / 6);
            (
                rng.random_range(0..size.saturating_sub(w).max(1)),
                rng.random_range(0..size.saturating_sub(h).max(1)),
                w,
                h,
            )
        };
        for y in y0..(y0 + h).min(size) {
            for x in x0..(x0 + w).min(size) {
                for ch in channels.iter_mut() {
                    ch[[y, x]] = value;
                }
                mask[[y, x]] = 1.0;
            }
        }
    }
    mask
}

fn save_rgb(path: &Path, channels: &[Array2<f64>]) -> Result<()> {
    let size = channels[0].dim().0;
    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let px = [
                (channels[0][[y, x]] * 255.0).round() as u8,
                (channels[1][[y, x]] * 255.0).round() as u8,
                (channels[2][[y, x]] * 255.0).round() as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn save_mask(path: &Path, mask: &Array2<f64>) -> Result<()> {
    let size = mask.dim().0;
    let mut img = GrayImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            img.put_pixel(
                x as u32,
                y as u32,
                image::Luma([if mask[[y, x]] > 0.5 { 255 } else { 0 }]),
            );
        }
    }
    img.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct SynthDigitsSpec {
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub tile: usize,
    pub seed: u64,
}

/// Generate a ten-class seven-segment digit dataset in the gridded layout.
pub fn synth_digits_dataset(root: &Path, spec: SynthDigitsSpec) -> Result<()> {
    if spec.per_class_train == 0 || spec.per_class_test == 0 {
        return Err(Error::InvalidCount(
            "digit dataset needs at least one tile per class and split".into(),
        ));
    }
    if spec.tile < 16 {
        return Err(Error::InvalidCount("digit tile must be at least 16".into()));
    }
    for (split, count) in [("train", spec.per_class_train), ("test", spec.per_class_test)] {
        let dir = root.join(split);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for digit in 0..10u8 {
            let sheet = digit_sheet(spec.seed, split, digit, count, spec.tile);
            let path = dir.join(format!("{digit}_{}x{}.png", spec.tile, count));
            sheet.save(&path).map_err(|e| Error::Decode {
                path,
                reason: e.to_string(),
            })?;
        }
    }
    Ok(())
}

const SHEET_COLS: usize = 8;

fn digit_sheet(seed: u64, split: &str, digit: u8, count: usize, tile: usize) -> GrayImage {
    let cols = SHEET_COLS.min(count);
    let rows = count.div_ceil(cols);
    let mut img = GrayImage::new((cols * tile) as u32, (rows * tile) as u32);
    for k in 0..count {
        let mut rng = init::rng_for(seed, &format!("digit/{split}/{digit}/{k}"));
        let glyph = render_digit(&mut rng, digit, tile);
        let (r, c) = (k / cols, k % cols);
        for y in 0..tile {
            for x in 0..tile {
                let v = (glyph[[y, x]] * 255.0).round() as u8;
                img.put_pixel((c * tile + x) as u32, (r * tile + y) as u32, image::Luma([v]));
            }
        }
    }
    img
}

/// Segment usage per digit: (A top, B top-right, C bottom-right, D bottom,
/// E bottom-left, F top-left, G middle).
const SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],   // 0
    [false, true, true, false, false, false, false], // 1
    [true, true, false, true, true, false, true],  // 2
    [true, true, true, true, false, false, true],  // 3
    [false, true, true, false, false, true, true], // 4
    [true, false, true, true, false, true, true],  // 5
    [true, false, true, true, true, true, true],   // 6
    [true, true, true, false, false, false, false], // 7
    [true, true, true, true, true, true, true],    // 8
    [true, true, true, true, false, true, true],   // 9
];

fn render_digit(rng: &mut ChaCha8Rng, digit: u8, tile: usize) -> Array2<f64> {
    let bg = 0.06 + rng.random::<f64>() * 0.12;
    let fg = 0.75 + rng.random::<f64>() * 0.2;
    let jitter = (tile / 10).max(1);
    let dx = rng.random_range(0..2 * jitter) as isize - jitter as isize;
    let dy = rng.random_range(0..2 * jitter) as isize - jitter as isize;
    let th = (tile / 8).max(2) + rng.random_range(0..2);

    let mut out = Array2::<f64>::from_elem((tile, tile), bg);
    let m = tile / 5;
    let left = m as isize + dx;
    let right = (tile - m) as isize + dx;
    let top = m as isize + dy;
    let bottom = (tile - m) as isize + dy;
    let mid = (top + bottom) / 2;
    let th = th as isize;

    let segs = SEGMENTS[digit as usize];
    let mut boxes: Vec<(isize, isize, isize, isize)> = Vec::new();
    if segs[0] {
        boxes.push((left, top, right, top + th)); // A
    }
    if segs[1] {
        boxes.push((right - th, top, right, mid)); // B
    }
    if segs[2] {
        boxes.push((right - th, mid, right, bottom)); // C
    }
    if segs[3] {
        boxes.push((left, bottom - th, right, bottom)); // D
    }
    if segs[4] {
        boxes.push((left, mid, left + th, bottom)); // E
    }
    if segs[5] {
        boxes.push((left, top, left + th, mid)); // F
    }
    if segs[6] {
        boxes.push((left, mid - th / 2, right, mid - th / 2 + th)); // G
    }

    for (x0, y0, x1, y1) in boxes {
        for y in y0.max(0)..y1.min(tile as isize) {
            for x in x0.max(0)..x1.min(tile as isize) {
                out[[y as usize, x as usize]] = fg;
            }
        }
    }
    for v in out.iter_mut() {
        *v = (*v + (rng.random::<f64>() - 0.5) * 0.04).clamp(0.0, 1.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::grid::load_grid_dataset;

    #[test]
    fn defect_masks_match_painted_tally() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("synthetic");
        let spec = SynthDefectSpec {
            n_clean: 3,
            n_defect: 6,
            image_size: 32,
            seed: 7,
        };
        let (_, test) = synth_defect_dataset(&root, spec, 3).unwrap();
        let meta = read_synth_meta(&root).unwrap();
        assert_eq!(meta.painted.len(), 6);
        for (idx, item) in test.items().iter().enumerate() {
            let mask = crate::data::preprocess::decode_mask(item.mask.as_ref().unwrap()).unwrap();
            let stored: usize = mask.iter().filter(|v| **v > 0.5).count();
            assert_eq!(stored, meta.painted[idx], "mask {idx} disagrees with tally");
            assert!(stored > 0);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthDefectSpec {
            n_clean: 4,
            n_defect: 2,
            image_size: 32,
            seed: 7,
        };
        synth_defect_dataset(&dir.path().join("a"), spec, 3).unwrap();
        synth_defect_dataset(&dir.path().join("b"), spec, 3).unwrap();
        let a = std::fs::read(dir.path().join("a/train/good/0003.png")).unwrap();
        let b = std::fs::read(dir.path().join("b/train/good/0003.png")).unwrap();
        assert_eq!(a, b);
        let a = std::fs::read(dir.path().join("a/test/defect/0001.png")).unwrap();
        let b = std::fs::read(dir.path().join("b/test/defect/0001.png")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_clean_count_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthDefectSpec {
            n_clean: 0,
            n_defect: 5,
            image_size: 32,
            seed: 7,
        };
        let err = synth_defect_dataset(&dir.path().join("x"), spec, 3).unwrap_err();
        assert_eq!(err.category(), "invalid-count");
    }

    #[test]
    fn digit_grids_load_as_ten_classes() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("digits");
        synth_digits_dataset(
            &root,
            SynthDigitsSpec {
                per_class_train: 10,
                per_class_test: 4,
                tile: 16,
                seed: 3,
            },
        )
        .unwrap();
        let labeled = load_grid_dataset(&root, 64, 3).unwrap();
        assert_eq!(labeled.train.len(), 100);
        assert_eq!(labeled.test.len(), 40);
        assert_eq!(labeled.train.labels().len(), 10);
        // different digits render differently
        let zero = labeled.train.load_image(0).unwrap();
        let one = labeled.train.load_image(10).unwrap();
        let diff = (zero.array() - one.array()).mapv(f64::abs).mean().unwrap();
        assert!(diff > 0.05, "digit glyphs too similar: {diff}");
    }
}
