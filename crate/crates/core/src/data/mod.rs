//! Dataset loading and preprocessing: defect-style folder datasets,
//! gridded one-class datasets, and the synthetic generators used by the
//! desk-scale experiments.

pub mod folder;
pub mod grid;
pub mod preprocess;
pub mod synth;

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

pub use preprocess::{preprocess, ImageTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Where one item's pixels come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ItemSource {
    File(PathBuf),
    /// One tile of a sprite grid, row-major position.
    GridTile {
        file: PathBuf,
        row: u32,
        col: u32,
    },
}

impl ItemSource {
    /// Stable textual form used in manifests (`file.png` or `file.png#r,c`).
    pub fn path_string(&self) -> String {
        match self {
            ItemSource::File(p) => p.display().to_string(),
            ItemSource::GridTile { file, row, col } => {
                format!("{}#{},{}", file.display(), row, col)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub source: ItemSource,
    /// Category label: defect type for folder datasets, class for grids.
    pub label: String,
    pub mask: Option<PathBuf>,
    pub anomalous: bool,
}

/// An enumerated dataset split. Read-only after construction; item order is
/// deterministic for a fixed root.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    pub root: PathBuf,
    pub split: Split,
    /// Dataset-level category name used in reports.
    pub category: String,
    pub image_size: usize,
    pub channels: usize,
    items: Vec<DatasetItem>,
    grids: std::collections::HashMap<PathBuf, grid::GridSheet>,
}

impl DatasetHandle {
    pub(crate) fn new(
        root: PathBuf,
        split: Split,
        category: String,
        image_size: usize,
        channels: usize,
        items: Vec<DatasetItem>,
        grids: std::collections::HashMap<PathBuf, grid::GridSheet>,
    ) -> Self {
        Self {
            root,
            split,
            category,
            image_size,
            channels,
            items,
            grids,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[DatasetItem] {
        &self.items
    }

    pub fn labels(&self) -> BTreeSet<String> {
        self.items.iter().map(|i| i.label.clone()).collect()
    }

    /// Raw pixels of item `idx` in [0,1], original resolution, CHW.
    pub fn load_raw(&self, idx: usize) -> Result<Array3<f64>> {
        match &self.items[idx].source {
            ItemSource::File(path) => preprocess::decode_image(path),
            ItemSource::GridTile { file, row, col } => {
                let sheet = self
                    .grids
                    .get(file)
                    .ok_or_else(|| Error::LayoutViolation {
                        path: file.clone(),
                        reason: "grid sheet not cached".into(),
                    })?;
                Ok(sheet.tile(*row, *col))
            }
        }
    }

    /// Preprocessed tensor of item `idx` at the configured size.
    pub fn load_image(&self, idx: usize) -> Result<ImageTensor> {
        let raw = self.load_raw(idx)?;
        preprocess(&raw, self.image_size, self.channels)
    }

    /// Ground-truth mask of item `idx` resized (nearest) to the configured
    /// size; all-zero when the item carries no mask.
    pub fn load_mask(&self, idx: usize) -> Result<Array2<f64>> {
        let item = &self.items[idx];
        match &item.mask {
            None => Ok(Array2::zeros((self.image_size, self.image_size))),
            Some(path) => {
                let mask = preprocess::decode_mask(path)?;
                // the stored mask must cover the stored image exactly
                if let ItemSource::File(img_path) = &item.source {
                    let img = preprocess::decode_image(img_path)?;
                    if (img.dim().1, img.dim().2) != mask.dim() {
                        return Err(Error::LayoutViolation {
                            path: path.clone(),
                            reason: format!(
                                "mask {:?} does not match image {:?}",
                                mask.dim(),
                                (img.dim().1, img.dim().2)
                            ),
                        });
                    }
                }
                Ok(preprocess::resize_mask_nearest(&mask, self.image_size))
            }
        }
    }

    /// Line-delimited text index: `path<TAB>label<TAB>mask-path`.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            out.push_str(&item.source.path_string());
            out.push('\t');
            out.push_str(&item.label);
            out.push('\t');
            match &item.mask {
                Some(m) => out.push_str(&m.display().to_string()),
                None => out.push('-'),
            }
            out.push('\n');
        }
        out
    }
}

/// A class-labeled dataset with both splits, input to the one-class
/// protocol.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub train: DatasetHandle,
    pub test: DatasetHandle,
}

/// Single class as normal, everything else anomalous: the train handle keeps
/// only `normal_class` items, the test handle keeps every item with its
/// anomaly bit set from the label.
pub fn build_one_class_protocol(
    dataset: &LabeledDataset,
    normal_class: &str,
) -> Result<(DatasetHandle, DatasetHandle)> {
    let mut labels = dataset.train.labels();
    labels.extend(dataset.test.labels());
    if !labels.contains(normal_class) {
        return Err(Error::UnknownClass {
            requested: normal_class.to_string(),
            available: labels.into_iter().collect(),
        });
    }

    let mut train = dataset.train.clone();
    train.items.retain(|item| item.label == normal_class);
    for item in &mut train.items {
        item.anomalous = false;
    }
    train.category = format!("one-class-{normal_class}");

    let mut test = dataset.test.clone();
    for item in &mut test.items {
        item.anomalous = item.label != normal_class;
    }
    test.category = format!("one-class-{normal_class}");

    Ok((train, test))
}

/// Convenience: list image files (png/jpg/jpeg) of a directory in
/// lexicographic order.
pub(crate) fn sorted_image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png") | Some("jpg") | Some("jpeg")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Sorted subdirectory names.
pub(crate) fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}
