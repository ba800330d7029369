//! Defect-dataset folder layout:
//!
//! ```text
//! root/
//!   train/good/*.png
//!   test/<defect>/*.png          (also test/good/* for clean test images)
//!   ground_truth/<defect>/<stem>_mask.png
//! ```

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

use super::{DatasetHandle, DatasetItem, ItemSource, Split};

pub const GOOD_LABEL: &str = "good";

pub fn load_folder_dataset(
    root: &Path,
    split: Split,
    image_size: usize,
    channels: usize,
) -> Result<DatasetHandle> {
    if !root.is_dir() {
        return Err(Error::DatasetNotFound(root.to_path_buf()));
    }
    let category = root
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("dataset")
        .to_string();

    let mut items = Vec::new();
    match split {
        Split::Train => {
            let dir = root.join("train").join(GOOD_LABEL);
            if !dir.is_dir() {
                return Err(Error::LayoutViolation {
                    path: dir,
                    reason: "missing train/good directory".into(),
                });
            }
            for path in super::sorted_image_files(&dir)? {
                items.push(DatasetItem {
                    source: ItemSource::File(path),
                    label: GOOD_LABEL.to_string(),
                    mask: None,
                    anomalous: false,
                });
            }
        }
        Split::Test => {
            let test_dir = root.join("test");
            if !test_dir.is_dir() {
                return Err(Error::LayoutViolation {
                    path: test_dir,
                    reason: "missing test directory".into(),
                });
            }
            for defect_dir in super::sorted_subdirs(&test_dir)? {
                let label = defect_dir
                    .file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or("unknown")
                    .to_string();
                let anomalous = label != GOOD_LABEL;
                for path in super::sorted_image_files(&defect_dir)? {
                    let mask = if anomalous {
                        Some(find_mask(root, &label, &path)?)
                    } else {
                        None
                    };
                    items.push(DatasetItem {
                        source: ItemSource::File(path),
                        label: label.clone(),
                        mask,
                        anomalous,
                    });
                }
            }
        }
    }

    Ok(DatasetHandle::new(
        root.to_path_buf(),
        split,
        category,
        image_size,
        channels,
        items,
        HashMap::new(),
    ))
}

fn find_mask(root: &Path, label: &str, image: &Path) -> Result<std::path::PathBuf> {
    let stem = image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default();
    let gt_dir = root.join("ground_truth").join(label);
    for candidate in [format!("{stem}_mask.png"), format!("{stem}.png")] {
        let path = gt_dir.join(candidate);
        if path.is_file() {
            return Ok(path);
        }
    }
    Err(Error::LayoutViolation {
        path: image.to_path_buf(),
        reason: format!("anomalous test image has no mask under {}", gt_dir.display()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, RgbImage};

    fn write_rgb(path: &Path, w: u32, h: u32, v: u8) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        RgbImage::from_pixel(w, h, image::Rgb([v, v, v]))
            .save(path)
            .unwrap();
    }

    fn write_mask(path: &Path, w: u32, h: u32) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        let mut img = GrayImage::new(w, h);
        img.put_pixel(0, 0, image::Luma([255]));
        img.save(path).unwrap();
    }

    #[test]
    fn enumerates_train_split() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("widget");
        for i in 0..10 {
            write_rgb(&root.join(format!("train/good/{i:03}.png")), 6, 6, 100);
        }
        let handle = load_folder_dataset(&root, Split::Train, 6, 3).unwrap();
        assert_eq!(handle.len(), 10);
        assert!(handle.items().iter().all(|i| i.mask.is_none()));
        assert!(handle.items().iter().all(|i| !i.anomalous));
    }

    #[test]
    fn attaches_masks_to_test_defects() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("widget");
        write_rgb(&root.join("train/good/000.png"), 6, 6, 100);
        for i in 0..3 {
            write_rgb(&root.join(format!("test/crack/{i:03}.png")), 6, 6, 80);
            write_mask(&root.join(format!("ground_truth/crack/{i:03}_mask.png")), 6, 6);
        }
        let handle = load_folder_dataset(&root, Split::Test, 6, 3).unwrap();
        assert_eq!(handle.len(), 3);
        assert!(handle.items().iter().all(|i| i.label == "crack"));
        assert!(handle.items().iter().all(|i| i.mask.is_some() && i.anomalous));
    }

    #[test]
    fn missing_mask_is_layout_violation() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("widget");
        write_rgb(&root.join("test/crack/000.png"), 6, 6, 80);
        let err = load_folder_dataset(&root, Split::Test, 6, 3).unwrap_err();
        assert_eq!(err.category(), "layout-violation");
    }

    #[test]
    fn missing_root_is_dataset_not_found() {
        let err = load_folder_dataset(Path::new("/nonexistent-auiae"), Split::Train, 6, 3)
            .unwrap_err();
        assert_eq!(err.category(), "dataset-not-found");
    }

    #[test]
    fn item_order_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("widget");
        for name in ["b", "a", "c"] {
            write_rgb(&root.join(format!("train/good/{name}.png")), 4, 4, 10);
        }
        let h1 = load_folder_dataset(&root, Split::Train, 4, 3).unwrap();
        let h2 = load_folder_dataset(&root, Split::Train, 4, 3).unwrap();
        assert_eq!(h1.manifest(), h2.manifest());
        let names: Vec<_> = h1
            .items()
            .iter()
            .map(|i| i.source.path_string())
            .collect();
        assert!(names[0].ends_with("a.png"));
        assert!(names[2].ends_with("c.png"));
    }
}
