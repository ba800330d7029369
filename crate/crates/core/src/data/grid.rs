//! Gridded one-class layout: each class ships as sprite grids.
//!
//! ```text
//! root/
//!   train/<label>_<tile>x<count>.png
//!   test/<label>_<tile>x<count>.png
//! ```
//!
//! A sheet holds `count` square tiles of side `tile`, row-major; the sheet
//! dimensions must be tile multiples. Labels may repeat across several
//! sheets per split.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::error::{Error, Result};

use super::{DatasetHandle, DatasetItem, ItemSource, LabeledDataset, Split};

/// An eagerly decoded sprite sheet.
#[derive(Debug, Clone)]
pub struct GridSheet {
    pixels: Array3<f64>, // CHW of the whole sheet
    tile: usize,
    cols: usize,
}

impl GridSheet {
    pub fn tile(&self, row: u32, col: u32) -> Array3<f64> {
        let t = self.tile;
        let (c, _, _) = self.pixels.dim();
        let y0 = row as usize * t;
        let x0 = col as usize * t;
        let mut out = Array3::zeros((c, t, t));
        for ci in 0..c {
            for y in 0..t {
                for x in 0..t {
                    out[[ci, y, x]] = self.pixels[[ci, y0 + y, x0 + x]];
                }
            }
        }
        out
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// `<label>_<tile>x<count>.png` -> (label, tile, count)
fn parse_sheet_name(path: &Path) -> Option<(String, usize, usize)> {
    let stem = path.file_stem()?.to_str()?;
    let (label, dims) = stem.rsplit_once('_')?;
    let (tile, count) = dims.split_once('x')?;
    Some((label.to_string(), tile.parse().ok()?, count.parse().ok()?))
}

fn load_split(
    root: &Path,
    split: Split,
    image_size: usize,
    channels: usize,
) -> Result<DatasetHandle> {
    let dir = root.join(split.to_string());
    if !dir.is_dir() {
        return Err(Error::LayoutViolation {
            path: dir,
            reason: format!("missing {split} directory"),
        });
    }
    let category = root
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("grid")
        .to_string();

    let mut items = Vec::new();
    let mut grids: HashMap<PathBuf, GridSheet> = HashMap::new();
    for file in super::sorted_image_files(&dir)? {
        let Some((label, tile, count)) = parse_sheet_name(&file) else {
            return Err(Error::LayoutViolation {
                path: file,
                reason: "sheet name must be <label>_<tile>x<count>.png".into(),
            });
        };
        let pixels = super::preprocess::decode_image(&file)?;
        let (_, h, w) = pixels.dim();
        if tile == 0 || h % tile != 0 || w % tile != 0 {
            return Err(Error::LayoutViolation {
                path: file,
                reason: format!("sheet {h}x{w} is not a multiple of tile {tile}"),
            });
        }
        let cols = w / tile;
        let capacity = (h / tile) * cols;
        if count > capacity {
            return Err(Error::LayoutViolation {
                path: file,
                reason: format!("sheet holds {capacity} tiles but claims {count}"),
            });
        }
        for k in 0..count {
            items.push(DatasetItem {
                source: ItemSource::GridTile {
                    file: file.clone(),
                    row: (k / cols) as u32,
                    col: (k % cols) as u32,
                },
                label: label.clone(),
                mask: None,
                anomalous: false,
            });
        }
        grids.insert(file, GridSheet { pixels, tile, cols });
    }

    Ok(DatasetHandle::new(
        root.to_path_buf(),
        split,
        category,
        image_size,
        channels,
        items,
        grids,
    ))
}

/// Load both splits of a gridded one-class dataset.
pub fn load_grid_dataset(
    root: &Path,
    image_size: usize,
    channels: usize,
) -> Result<LabeledDataset> {
    if !root.is_dir() {
        return Err(Error::DatasetNotFound(root.to_path_buf()));
    }
    Ok(LabeledDataset {
        train: load_split(root, Split::Train, image_size, channels)?,
        test: load_split(root, Split::Test, image_size, channels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_one_class_protocol;
    use image::GrayImage;

    fn write_sheet(path: &Path, tile: u32, rows: u32, cols: u32, base: u8) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        let mut img = GrayImage::new(cols * tile, rows * tile);
        for (i, p) in img.pixels_mut().enumerate() {
            p.0[0] = base.wrapping_add((i % 31) as u8);
        }
        img.save(path).unwrap();
    }

    fn make_ten_class_root(dir: &Path, per_train: usize, per_test: usize) {
        for d in 0..10 {
            write_sheet(
                &dir.join(format!("train/{d}_8x{per_train}.png")),
                8,
                per_train.div_ceil(4) as u32,
                4,
                (d * 20) as u8,
            );
            write_sheet(
                &dir.join(format!("test/{d}_8x{per_test}.png")),
                8,
                per_test.div_ceil(4) as u32,
                4,
                (d * 20 + 5) as u8,
            );
        }
    }

    #[test]
    fn one_class_split_partitions_labels() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("digits");
        make_ten_class_root(&root, 8, 10);
        let labeled = load_grid_dataset(&root, 16, 1).unwrap();
        assert_eq!(labeled.train.len(), 80);
        assert_eq!(labeled.test.len(), 100);

        let (train, test) = build_one_class_protocol(&labeled, "3").unwrap();
        assert_eq!(train.len(), 8);
        assert!(train.items().iter().all(|i| i.label == "3" && !i.anomalous));
        assert_eq!(test.len(), 100);
        let normals = test.items().iter().filter(|i| !i.anomalous).count();
        assert_eq!(normals, 10);
        assert_eq!(test.len() - normals, 90);
    }

    #[test]
    fn unknown_class_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("digits");
        make_ten_class_root(&root, 4, 4);
        let labeled = load_grid_dataset(&root, 16, 1).unwrap();
        let err = build_one_class_protocol(&labeled, "12").unwrap_err();
        assert_eq!(err.category(), "unknown-class");
    }

    #[test]
    fn tiles_enumerate_row_major_and_reload_identically() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("digits");
        write_sheet(&root.join("train/7_8x6.png"), 8, 2, 4, 3);
        write_sheet(&root.join("test/7_8x2.png"), 8, 1, 4, 9);
        let a = load_grid_dataset(&root, 16, 1).unwrap();
        let b = load_grid_dataset(&root, 16, 1).unwrap();
        assert_eq!(a.train.manifest(), b.train.manifest());
        assert_eq!(a.train.len(), 6);
        match &a.train.items()[5].source {
            ItemSource::GridTile { row, col, .. } => {
                assert_eq!((*row, *col), (1, 1));
            }
            _ => panic!("expected grid tile"),
        }
        // raw tiles decode identically across loads
        let t1 = a.train.load_raw(3).unwrap();
        let t2 = b.train.load_raw(3).unwrap();
        assert_eq!(t1, t2);
    }
}
