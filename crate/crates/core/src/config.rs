//! Experiment configuration: one serializable struct drives every stage.
//! The TOML field tree is the single source of truth for the CLI override
//! schema and the generated help text.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed; every random draw in the pipeline derives from it.
    pub seed: u64,
    /// Square working resolution; inputs are resized to this.
    pub image_size: usize,
    /// Channel count after preprocessing (grayscale is replicated).
    pub channels: usize,
    pub ie: IeConfig,
    pub expert: ExpertConfig,
    pub pm: PmConfig,
    pub toggles: Toggles,
    pub data: DataConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct IeConfig {
    /// Encoder inception blocks (decoder mirrors them).
    pub blocks: usize,
    /// Width of the first inception block; later blocks double it (capped at 4x).
    pub base_width: usize,
    /// Latent code dimension.
    pub d_z: usize,
    /// Hidden width of the discriminator MLP.
    pub t_hidden: usize,
    /// Weight of the KL term inside the encoder objective.
    pub lambda_mi: f64,
    /// Weight of the reconstruction term in the total objective.
    pub lambda_rec: f64,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip per optimizer step (0 disables).
    pub grad_clip: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Apply the KL to per-sample moments instead of batch-pooled moments.
    pub kl_per_sample: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertConfig {
    /// Residual blocks in each encoder and decoder.
    pub n_res_blocks: usize,
    /// Stride-2 stages inside the 4 convolutional blocks.
    pub n_downsample: usize,
    /// Stem width; each downsampling stage doubles it (capped at 4x).
    pub base_width: usize,
    /// Detail vector dimension.
    pub d_s: usize,
    /// Hidden width of the MLP mapping the detail vector to AdaIN params.
    pub mlp_hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub w_x: f64,
    pub w_m: f64,
    pub w_s: f64,
    /// Stop the detail-consistency term from training the detail extractor.
    pub detail_stop_gradient: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneMode {
    /// Load interchange weights from `weights_dir` (or the env override).
    Pretrained,
    /// Frozen seeded random weights with identical topology.
    Fallback,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizeMode {
    /// Per-image min-max to [0,1].
    Minmax,
    /// Divide by the given percentile of the raw map, then clamp.
    Percentile,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum MeasurementMode {
    /// Multi-layer perceptual distance over the image quadruple.
    Perceptual,
    /// Pixel L1 between input and high-fidelity reconstruction.
    PixelXXhat,
    /// Pixel L1 between input and impression.
    PixelXM,
    /// Pixel L1 between impression and naive impression.
    PixelMMhat,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PmConfig {
    /// Backbone layers feeding the perceptual distance.
    pub layers: Vec<String>,
    /// Per-layer weights of the anomaly map sum.
    pub layer_weights: Vec<f64>,
    /// Segmentation threshold on the normalized map.
    pub alpha: f64,
    pub backbone: BackboneMode,
    /// Directory of interchange weight tensors (one .npy per tensor).
    pub weights_dir: String,
    /// Seed for the fallback backbone weights.
    pub fallback_seed: u64,
    pub normalize: NormalizeMode,
    /// Percentile used by the percentile normalization mode.
    pub percentile: f64,
    pub measurement: MeasurementMode,
    /// Channel means subtracted before the backbone.
    pub input_mean: Vec<f64>,
    /// Channel stds dividing the backbone input.
    pub input_std: Vec<f64>,
    /// Fraction of top pixels averaged into the image-level score.
    pub topk_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    /// Train stage one with the mutual-information objective.
    pub use_mi_loss: bool,
    /// Use stage two at all; off scores images against the impression only.
    pub use_expert_net: bool,
    /// Feed real detail vectors into AdaIN; off uses seeded Gaussian draws.
    pub use_detail_guidance: bool,
    /// Keep the naive-impression branch and its term in the anomaly map.
    pub use_naive_impression_term: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    /// Defect-style folder layout (train/good, test/<defect>, ground_truth).
    Folder,
    /// Gridded one-class layout (train|test/<label>_<tile>.png sprite grids).
    Grid,
    /// Generated textured dataset with rectangle/stroke defects.
    SynthDefect,
    /// Generated ten-class digit grids.
    SynthDigits,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Dataset root directory.
    pub root: String,
    /// Normal class for one-class protocols on labeled datasets.
    pub normal_class: String,
    /// Clean training images generated by the synthetic-defect kind.
    pub synth_clean: usize,
    /// Defect test images generated by the synthetic-defect kind.
    pub synth_defect: usize,
    /// Per-class train tiles generated by the synthetic-digits kind.
    pub digits_train_per_class: usize,
    /// Per-class test tiles generated by the synthetic-digits kind.
    pub digits_test_per_class: usize,
    /// Tile side of generated digit grids.
    pub digit_tile: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 256,
            channels: 3,
            ie: IeConfig::default(),
            expert: ExpertConfig::default(),
            pm: PmConfig::default(),
            toggles: Toggles::default(),
            data: DataConfig::default(),
        }
    }
}

impl Default for IeConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            base_width: 64,
            d_z: 256,
            t_hidden: 128,
            lambda_mi: 1.0,
            lambda_rec: 10.0,
            lr: 1e-3,
            momentum: 0.9,
            grad_clip: 5.0,
            epochs: 200,
            batch_size: 4,
            kl_per_sample: false,
        }
    }
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            n_res_blocks: 2,
            n_downsample: 2,
            base_width: 32,
            d_s: 8,
            mlp_hidden: 64,
            lr: 1e-3,
            epochs: 200,
            batch_size: 4,
            w_x: 1.0,
            w_m: 1.0,
            w_s: 1.0,
            detail_stop_gradient: false,
        }
    }
}

impl Default for PmConfig {
    fn default() -> Self {
        Self {
            layers: vec![
                "conv1_2".to_string(),
                "conv2_2".to_string(),
                "conv3_4".to_string(),
            ],
            layer_weights: vec![1.0, 1.0, 1.0],
            alpha: 0.5,
            backbone: BackboneMode::Fallback,
            weights_dir: "backbone-weights".to_string(),
            fallback_seed: 1309,
            normalize: NormalizeMode::Minmax,
            percentile: 0.99,
            measurement: MeasurementMode::Perceptual,
            input_mean: vec![0.485, 0.456, 0.406],
            input_std: vec![0.229, 0.224, 0.225],
            topk_fraction: 0.01,
        }
    }
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            use_mi_loss: true,
            use_expert_net: true,
            use_detail_guidance: true,
            use_naive_impression_term: true,
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Folder,
            root: "data".to_string(),
            normal_class: "0".to_string(),
            synth_clean: 200,
            synth_defect: 50,
            digits_train_per_class: 64,
            digits_test_per_class: 16,
            digit_tile: 32,
        }
    }
}

impl ExperimentConfig {
    /// Preset for low-resolution datasets: 3 inception blocks, 1 residual
    /// block, short schedule, 64x64 inputs.
    pub fn small() -> Self {
        let mut cfg = Self::default();
        cfg.image_size = 64;
        cfg.ie.blocks = 3;
        cfg.ie.base_width = 32;
        cfg.ie.d_z = 64;
        cfg.ie.epochs = 20;
        cfg.expert.n_res_blocks = 1;
        cfg.expert.base_width = 16;
        cfg.expert.epochs = 20;
        cfg
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self =
            toml::from_str(&text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::ConfigParse("image_size must be positive".into()));
        }
        if self.channels == 0 {
            return Err(Error::ConfigParse("channels must be positive".into()));
        }
        if self.ie.lr <= 0.0 || self.expert.lr <= 0.0 {
            return Err(Error::ConfigParse("learning rates must be positive".into()));
        }
        if self.ie.blocks == 0 || (self.image_size >> self.ie.blocks) == 0 {
            return Err(Error::ConfigParse(format!(
                "image_size {} cannot be pooled {} times",
                self.image_size, self.ie.blocks
            )));
        }
        if self.pm.layers.len() != self.pm.layer_weights.len() {
            return Err(Error::ConfigParse(
                "pm.layers and pm.layer_weights must have equal length".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.pm.alpha) {
            return Err(Error::InvalidThreshold(self.pm.alpha));
        }
        if self.pm.input_mean.len() != 3 || self.pm.input_std.len() != 3 {
            return Err(Error::ConfigParse(
                "pm.input_mean / pm.input_std must have 3 entries".into(),
            ));
        }
        if !(self.pm.topk_fraction > 0.0 && self.pm.topk_fraction <= 1.0) {
            return Err(Error::ConfigParse(
                "pm.topk_fraction must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Apply a `dotted.key=value` override. Unknown keys and type mismatches
    /// are rejected.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, raw_value) = spec
            .split_once('=')
            .ok_or_else(|| Error::ConfigParse(format!("override `{spec}` is not key=value")))?;
        let mut tree: toml::Value =
            toml::Value::try_from(&*self).map_err(|e| Error::ConfigParse(e.to_string()))?;

        let mut slot = &mut tree;
        for part in key.split('.') {
            slot = slot
                .as_table_mut()
                .and_then(|t| t.get_mut(part))
                .ok_or_else(|| Error::UnknownConfigKey(key.to_string()))?;
        }

        let parsed = parse_toml_scalar(raw_value, slot).ok_or_else(|| {
            Error::ConfigParse(format!(
                "value `{raw_value}` for `{key}` does not parse as {}",
                slot.type_str()
            ))
        })?;
        *slot = parsed;

        let updated: Self = tree
            .try_into()
            .map_err(|e: toml::de::Error| Error::ConfigParse(e.to_string()))?;
        *self = updated;
        self.validate()
    }

    /// Every dotted key with its default value, walked from the serialized
    /// default config; help text and the override checker share this.
    pub fn schema() -> Vec<SchemaEntry> {
        let tree = toml::Value::try_from(ExperimentConfig::default()).unwrap();
        let mut entries = Vec::new();
        walk_schema("", &tree, &mut entries);
        entries
    }

    pub fn schema_help() -> String {
        let mut out = String::from("Config keys (override with -s key=value):\n");
        for entry in Self::schema() {
            let doc = doc_for(&entry.key).unwrap_or("");
            let _ = writeln!(
                out,
                "  {:<34} {:<9} default: {}{}{}",
                entry.key,
                entry.type_name,
                entry.default,
                if doc.is_empty() { "" } else { "  — " },
                doc
            );
        }
        out
    }

    /// Hash of the full config; stamped into reports.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml().as_bytes());
        hex16(&hasher.finalize())
    }

    /// Hash of the architecture-relevant subset for one model kind;
    /// checkpoints refuse to load under a different signature. Stage one and
    /// stage two hash their own fields so an ablation toggle on one stage
    /// never invalidates the other's checkpoints.
    pub fn model_fingerprint(&self, kind: &str) -> String {
        let sig = match kind {
            "ie" => format!(
                "ie-v1|size={}|ch={}|blocks={}|w={}|dz={}|th={}",
                self.image_size,
                self.channels,
                self.ie.blocks,
                self.ie.base_width,
                self.ie.d_z,
                self.ie.t_hidden,
            ),
            "expert" => format!(
                "ex-v1|size={}|ch={}|res={}|down={}|w={}|ds={}|mlp={}|naive={}",
                self.image_size,
                self.channels,
                self.expert.n_res_blocks,
                self.expert.n_downsample,
                self.expert.base_width,
                self.expert.d_s,
                self.expert.mlp_hidden,
                self.toggles.use_naive_impression_term,
            ),
            other => panic!("unknown model kind {other}"),
        };
        let mut hasher = Sha256::new();
        hasher.update(sig.as_bytes());
        hex16(&hasher.finalize())
    }
}

pub struct SchemaEntry {
    pub key: String,
    pub type_name: &'static str,
    pub default: String,
}

fn walk_schema(prefix: &str, value: &toml::Value, out: &mut Vec<SchemaEntry>) {
    match value {
        toml::Value::Table(table) => {
            for (k, v) in table {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                walk_schema(&key, v, out);
            }
        }
        _ => out.push(SchemaEntry {
            key: prefix.to_string(),
            type_name: value.type_str(),
            default: value.to_string(),
        }),
    }
}

fn parse_toml_scalar(raw: &str, like: &toml::Value) -> Option<toml::Value> {
    match like {
        toml::Value::String(_) => Some(toml::Value::String(raw.to_string())),
        toml::Value::Integer(_) => raw.parse::<i64>().ok().map(toml::Value::Integer),
        toml::Value::Float(_) => raw.parse::<f64>().ok().map(toml::Value::Float),
        toml::Value::Boolean(_) => raw.parse::<bool>().ok().map(toml::Value::Boolean),
        toml::Value::Array(_) => toml::from_str::<toml::Value>(&format!("v = {raw}"))
            .ok()
            .and_then(|t| t.get("v").cloned())
            .filter(|v| v.is_array()),
        _ => None,
    }
}

fn hex16(digest: &[u8]) -> String {
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// One-line documentation per config key, kept in lockstep with the struct
/// by a unit test.
pub fn doc_for(key: &str) -> Option<&'static str> {
    KEY_DOCS.iter().find(|(k, _)| *k == key).map(|(_, d)| *d)
}

pub const KEY_DOCS: &[(&str, &str)] = &[
    ("seed", "master seed for every random draw"),
    ("image_size", "square working resolution"),
    ("channels", "channels after preprocessing"),
    ("ie.blocks", "encoder inception blocks (decoder mirrors)"),
    ("ie.base_width", "width of the first inception block"),
    ("ie.d_z", "latent code dimension"),
    ("ie.t_hidden", "discriminator MLP hidden width"),
    ("ie.lambda_mi", "KL weight inside the encoder objective"),
    ("ie.lambda_rec", "reconstruction weight in the total objective"),
    ("ie.lr", "stage-one SGD learning rate"),
    ("ie.momentum", "stage-one SGD momentum"),
    ("ie.grad_clip", "global gradient-norm clip, 0 disables"),
    ("ie.epochs", "stage-one epochs"),
    ("ie.batch_size", "stage-one batch size (>= 2)"),
    ("ie.kl_per_sample", "KL on per-sample instead of pooled moments"),
    ("expert.n_res_blocks", "residual blocks per encoder/decoder"),
    ("expert.n_downsample", "stride-2 stages in the conv blocks"),
    ("expert.base_width", "stem width of stage two"),
    ("expert.d_s", "detail vector dimension"),
    ("expert.mlp_hidden", "hidden width of the AdaIN parameter MLP"),
    ("expert.lr", "stage-two Adam learning rate"),
    ("expert.epochs", "stage-two epochs"),
    ("expert.batch_size", "stage-two batch size"),
    ("expert.w_x", "weight of the input reconstruction term"),
    ("expert.w_m", "weight of the naive impression term"),
    ("expert.w_s", "weight of the detail consistency term"),
    ("expert.detail_stop_gradient", "freeze detail extractor in the s-term"),
    ("pm.layers", "backbone layers for the perceptual distance"),
    ("pm.layer_weights", "per-layer anomaly map weights"),
    ("pm.alpha", "segmentation threshold on the normalized map"),
    ("pm.backbone", "pretrained or fallback backbone weights"),
    ("pm.weights_dir", "interchange weights directory"),
    ("pm.fallback_seed", "seed of the fallback backbone"),
    ("pm.normalize", "minmax or percentile map normalization"),
    ("pm.percentile", "percentile for percentile normalization"),
    ("pm.measurement", "perceptual or pixel measurement mode"),
    ("pm.input_mean", "channel means subtracted before the backbone"),
    ("pm.input_std", "channel stds dividing the backbone input"),
    ("pm.topk_fraction", "pixel fraction of the image-level score"),
    ("toggles.use_mi_loss", "train stage one with the MI objective"),
    ("toggles.use_expert_net", "use stage two at all"),
    ("toggles.use_detail_guidance", "real detail vectors instead of noise"),
    ("toggles.use_naive_impression_term", "keep the naive-impression branch"),
    ("data.kind", "folder, grid, synth-defect, or synth-digits"),
    ("data.root", "dataset root directory"),
    ("data.normal_class", "normal class for one-class protocols"),
    ("data.synth_clean", "clean images for the synthetic-defect kind"),
    ("data.synth_defect", "defect images for the synthetic-defect kind"),
    ("data.digits_train_per_class", "train tiles per digit class"),
    ("data.digits_test_per_class", "test tiles per digit class"),
    ("data.digit_tile", "tile side of generated digit grids"),
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrips_through_toml() {
        let cfg = ExperimentConfig::small();
        let text = cfg.to_toml();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn override_changes_nested_key() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_override("ie.lambda_rec=2.5").unwrap();
        assert_eq!(cfg.ie.lambda_rec, 2.5);
        cfg.apply_override("toggles.use_expert_net=false").unwrap();
        assert!(!cfg.toggles.use_expert_net);
        cfg.apply_override("pm.layer_weights=[1.0, 2.0, 0.5]").unwrap();
        assert_eq!(cfg.pm.layer_weights, vec![1.0, 2.0, 0.5]);
    }

    #[test]
    fn override_rejects_unknown_key() {
        let mut cfg = ExperimentConfig::default();
        let err = cfg.apply_override("ie.nope=1").unwrap_err();
        assert_eq!(err.category(), "unknown-config-key");
    }

    #[test]
    fn override_rejects_type_mismatch() {
        let mut cfg = ExperimentConfig::default();
        let err = cfg.apply_override("ie.epochs=fast").unwrap_err();
        assert_eq!(err.category(), "config-parse-error");
    }

    #[test]
    fn unknown_file_key_is_config_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "bogus_key = 3\n").unwrap();
        let err = ExperimentConfig::from_file(&path).unwrap_err();
        assert_eq!(err.category(), "config-parse-error");
    }

    #[test]
    fn docs_cover_schema_exactly() {
        let schema_keys: Vec<String> =
            ExperimentConfig::schema().into_iter().map(|e| e.key).collect();
        let doc_keys: Vec<String> = KEY_DOCS.iter().map(|(k, _)| k.to_string()).collect();
        let mut sorted_schema = schema_keys.clone();
        sorted_schema.sort();
        let mut sorted_docs = doc_keys.clone();
        sorted_docs.sort();
        assert_eq!(sorted_schema, sorted_docs, "docs and schema drifted");
    }

    #[test]
    fn fingerprints_track_model_shape_only() {
        let a = ExperimentConfig::small();
        let mut b = a.clone();
        b.pm.alpha = 0.7;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.model_fingerprint("ie"), b.model_fingerprint("ie"));
        assert_eq!(a.model_fingerprint("expert"), b.model_fingerprint("expert"));
        let mut c = a.clone();
        c.ie.d_z = 32;
        assert_ne!(a.model_fingerprint("ie"), c.model_fingerprint("ie"));
        assert_eq!(a.model_fingerprint("expert"), c.model_fingerprint("expert"));
        let mut d = a.clone();
        d.toggles.use_naive_impression_term = false;
        assert_eq!(a.model_fingerprint("ie"), d.model_fingerprint("ie"));
        assert_ne!(a.model_fingerprint("expert"), d.model_fingerprint("expert"));
    }
}
