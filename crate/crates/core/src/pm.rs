//! Perceptual measurement: multi-layer feature distances among the image
//! quadruple (input, high-fidelity reconstruction, impression, naive
//! impression), summed into a per-pixel anomaly map, thresholded into a
//! segmentation, and condensed into an image-level score.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, Array4, Axis};

use crate::config::{BackboneMode, NormalizeMode, PmConfig};
use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::nn::init;
use crate::nn::kernels;

/// VGG-19 convolution stack through `conv3_4`: (name, in, out); a 2x2 max
/// pool sits after `conv1_2` and `conv2_2`.
const VGG_LAYERS: &[(&str, usize, usize)] = &[
    ("conv1_1", 3, 64),
    ("conv1_2", 64, 64),
    ("conv2_1", 64, 128),
    ("conv2_2", 128, 128),
    ("conv3_1", 128, 256),
    ("conv3_2", 256, 256),
    ("conv3_3", 256, 256),
    ("conv3_4", 256, 256),
];

const POOL_AFTER: &[&str] = &["conv1_2", "conv2_2"];

/// Per-layer activations for the configured layer selection.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    layers: Vec<(String, Array3<f64>)>,
}

impl FeatureStack {
    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Array3<f64>> {
        self.layers
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array3<f64>)> {
        self.layers.iter().map(|(n, a)| (n.as_str(), a))
    }
}

/// Frozen feature backbone with the VGG-19 topology through `conv3_4`.
/// Pretrained mode ingests interchange weights; fallback mode draws seeded
/// random weights over the identical topology.
#[derive(Debug)]
pub struct Backbone {
    weights: Vec<(String, Array4<f64>, Array1<f64>)>,
    wanted: Vec<String>,
    input_mean: [f64; 3],
    input_std: [f64; 3],
    pub mode: BackboneMode,
}

impl Backbone {
    pub fn from_config(cfg: &PmConfig) -> Result<Self> {
        let wanted = cfg.layers.clone();
        validate_layers(&wanted)?;
        let input_mean = [cfg.input_mean[0], cfg.input_mean[1], cfg.input_mean[2]];
        let input_std = [cfg.input_std[0], cfg.input_std[1], cfg.input_std[2]];
        match cfg.backbone {
            BackboneMode::Pretrained => {
                let dir = weights_dir(cfg);
                Self::pretrained(&dir, wanted, input_mean, input_std)
            }
            BackboneMode::Fallback => {
                Ok(Self::fallback(cfg.fallback_seed, wanted, input_mean, input_std))
            }
        }
    }

    /// Load interchange weights: `<dir>/<layer>.weight.npy` (`[O,C,3,3]`)
    /// and `<dir>/<layer>.bias.npy` per convolution.
    pub fn pretrained(
        dir: &Path,
        wanted: Vec<String>,
        input_mean: [f64; 3],
        input_std: [f64; 3],
    ) -> Result<Self> {
        let deepest = deepest_index(&wanted);
        if !dir.is_dir() {
            return Err(Error::BackboneUnavailable { path: dir.to_path_buf() });
        }
        let mut weights = Vec::new();
        for (name, c_in, c_out) in &VGG_LAYERS[..=deepest] {
            let w_path = dir.join(format!("{name}.weight.npy"));
            let b_path = dir.join(format!("{name}.bias.npy"));
            if !w_path.is_file() || !b_path.is_file() {
                return Err(Error::BackboneUnavailable { path: w_path });
            }
            let w = crate::npy::read_npy(&w_path)?;
            let b = crate::npy::read_npy(&b_path)?;
            if w.shape() != [*c_out, *c_in, 3, 3] || b.shape() != [*c_out] {
                return Err(Error::Shape {
                    ctx: "backbone weight",
                    expected: format!("[{c_out},{c_in},3,3]"),
                    got: format!("{:?}", w.shape()),
                });
            }
            weights.push((
                name.to_string(),
                w.into_dimensionality().unwrap(),
                b.into_dimensionality().unwrap(),
            ));
        }
        Ok(Self {
            weights,
            wanted,
            input_mean,
            input_std,
            mode: BackboneMode::Pretrained,
        })
    }

    /// Seeded random weights, frozen, same topology.
    pub fn fallback(
        seed: u64,
        wanted: Vec<String>,
        input_mean: [f64; 3],
        input_std: [f64; 3],
    ) -> Self {
        let deepest = deepest_index(&wanted);
        let mut weights = Vec::new();
        for (name, c_in, c_out) in &VGG_LAYERS[..=deepest] {
            let mut rng = init::rng_for(seed, &format!("backbone/{name}"));
            let fan_in = c_in * 9;
            let w = Array4::from_shape_vec(
                (*c_out, *c_in, 3, 3),
                init::he_normal(&mut rng, fan_in, c_out * fan_in),
            )
            .unwrap();
            let b = Array1::zeros(*c_out);
            weights.push((name.to_string(), w, b));
        }
        Self {
            weights,
            wanted,
            input_mean,
            input_std,
            mode: BackboneMode::Fallback,
        }
    }

    /// Feature maps of the configured layers. Single-channel inputs are
    /// replicated to RGB before normalization.
    pub fn features(&self, x: &ImageTensor) -> Result<FeatureStack> {
        let arr = x.array();
        let (c, h, w) = arr.dim();
        let mut rgb = Array4::<f64>::zeros((1, 3, h, w));
        for ci in 0..3 {
            let src = if c == 3 { ci } else { 0 };
            let plane = arr.index_axis(Axis(0), src);
            rgb.index_axis_mut(Axis(0), 0)
                .index_axis_mut(Axis(0), ci)
                .assign(&plane.mapv(|v| (v - self.input_mean[ci]) / self.input_std[ci]));
        }

        let mut current = rgb;
        let mut captured = Vec::new();
        for (name, wgt, bias) in &self.weights {
            let conv = kernels::conv2d_forward(&current.view(), wgt, bias, 1, 1);
            current = conv.mapv(|v| v.max(0.0));
            if self.wanted.iter().any(|l| l == name) {
                captured.push((
                    name.clone(),
                    current.index_axis(Axis(0), 0).to_owned(),
                ));
            }
            if POOL_AFTER.contains(&name.as_str()) {
                let (pooled, _) = kernels::maxpool_forward(&current.view(), 2, 2, 0);
                current = pooled;
            }
        }
        // order captured like the config selection
        let mut layers = Vec::new();
        for want in &self.wanted {
            let hit = captured
                .iter()
                .find(|(n, _)| n == want)
                .expect("deepest_index covers every wanted layer");
            layers.push(hit.clone());
        }
        Ok(FeatureStack { layers })
    }
}

fn validate_layers(wanted: &[String]) -> Result<()> {
    if wanted.is_empty() {
        return Err(Error::ConfigParse("pm.layers must not be empty".into()));
    }
    for name in wanted {
        if !VGG_LAYERS.iter().any(|(n, _, _)| n == name) {
            return Err(Error::ConfigParse(format!(
                "unknown backbone layer `{name}`; known: {:?}",
                VGG_LAYERS.iter().map(|(n, _, _)| *n).collect::<Vec<_>>()
            )));
        }
    }
    Ok(())
}

fn deepest_index(wanted: &[String]) -> usize {
    VGG_LAYERS
        .iter()
        .enumerate()
        .filter(|(_, (n, _, _))| wanted.iter().any(|w| w == n))
        .map(|(i, _)| i)
        .max()
        .unwrap_or(0)
}

/// Resolve the interchange weights directory, honoring the env override.
pub fn weights_dir(cfg: &PmConfig) -> PathBuf {
    match std::env::var("ANOMALENS_BACKBONE_WEIGHTS") {
        Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => PathBuf::from(&cfg.weights_dir),
    }
}

/// Channel-mean absolute distance between two feature maps, bilinearly
/// upsampled to `out_size`.
pub fn layer_distance(a: &Array3<f64>, b: &Array3<f64>, out_size: usize) -> Result<Array2<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::Shape {
            ctx: "layer distance",
            expected: format!("{:?}", a.dim()),
            got: format!("{:?}", b.dim()),
        });
    }
    let (c, h, w) = a.dim();
    let mut map = Array2::<f64>::zeros((h, w));
    for ci in 0..c {
        let pa = a.index_axis(Axis(0), ci);
        let pb = b.index_axis(Axis(0), ci);
        map += &(&pa - &pb).mapv(f64::abs);
    }
    map /= c as f64;
    Ok(kernels::bilinear_resize2(&map.view(), out_size, out_size))
}

/// Per-pixel anomaly map with its normalization record.
#[derive(Debug, Clone)]
pub struct AnomalyMap {
    pub raw: Array2<f64>,
    pub normalized: Array2<f64>,
    pub norm_min: f64,
    pub norm_max: f64,
}

/// Weighted multi-layer sum of the three pairwise distances
/// (input vs reconstruction, impression vs naive impression, input vs
/// impression). `m_hat` may be absent under the naive-term ablation; with
/// `x_hat` also absent the map reduces to the input-vs-impression term.
pub fn anomaly_map(
    x: &FeatureStack,
    x_hat: Option<&FeatureStack>,
    m: &FeatureStack,
    m_hat: Option<&FeatureStack>,
    layer_weights: &[f64],
    out_size: usize,
    normalize: NormalizeMode,
    percentile: f64,
) -> Result<AnomalyMap> {
    let names = x.layer_names();
    if names.len() != layer_weights.len() {
        return Err(Error::Shape {
            ctx: "anomaly map weights",
            expected: format!("{}", names.len()),
            got: format!("{}", layer_weights.len()),
        });
    }
    let mut raw = Array2::<f64>::zeros((out_size, out_size));
    for (idx, name) in names.iter().enumerate() {
        let weight = layer_weights[idx];
        let fx = x.get(name).unwrap();
        let fm = m.get(name).ok_or(Error::Shape {
            ctx: "anomaly map stacks",
            expected: "matching layer sets".into(),
            got: format!("missing {name}"),
        })?;
        let mut layer_sum = layer_distance(fx, fm, out_size)?;
        if let Some(xh) = x_hat {
            let fxh = xh.get(name).ok_or(Error::Shape {
                ctx: "anomaly map stacks",
                expected: "matching layer sets".into(),
                got: format!("missing {name}"),
            })?;
            layer_sum += &layer_distance(fx, fxh, out_size)?;
        }
        if let Some(mh) = m_hat {
            let fmh = mh.get(name).ok_or(Error::Shape {
                ctx: "anomaly map stacks",
                expected: "matching layer sets".into(),
                got: format!("missing {name}"),
            })?;
            layer_sum += &layer_distance(fm, fmh, out_size)?;
        }
        raw += &layer_sum.mapv(|v| v * weight);
    }
    Ok(finish_map(raw, normalize, percentile))
}

/// Pixel-space measurement modes: channel-mean |a - b| at input resolution.
pub fn pixel_distance_map(
    a: &ImageTensor,
    b: &ImageTensor,
    normalize: NormalizeMode,
    percentile: f64,
) -> Result<AnomalyMap> {
    if a.array().dim() != b.array().dim() {
        return Err(Error::Shape {
            ctx: "pixel distance",
            expected: format!("{:?}", a.array().dim()),
            got: format!("{:?}", b.array().dim()),
        });
    }
    let (c, h, w) = a.array().dim();
    let mut raw = Array2::<f64>::zeros((h, w));
    for ci in 0..c {
        let pa = a.array().index_axis(Axis(0), ci);
        let pb = b.array().index_axis(Axis(0), ci);
        raw += &(&pa - &pb).mapv(f64::abs);
    }
    raw /= c as f64;
    Ok(finish_map(raw, normalize, percentile))
}

fn finish_map(raw: Array2<f64>, normalize: NormalizeMode, percentile: f64) -> AnomalyMap {
    let (norm_min, norm_max, normalized) = match normalize {
        NormalizeMode::Minmax => {
            let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
            let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = max - min;
            let normalized = if span > 0.0 {
                raw.mapv(|v| (v - min) / span)
            } else {
                Array2::zeros(raw.raw_dim())
            };
            (min, max, normalized)
        }
        NormalizeMode::Percentile => {
            let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
            let mut sorted: Vec<f64> = raw.iter().copied().collect();
            sorted.sort_by(f64::total_cmp);
            let rank = ((sorted.len() - 1) as f64 * percentile.clamp(0.0, 1.0)).round() as usize;
            let hi = sorted[rank];
            let span = hi - min;
            let normalized = if span > 0.0 {
                raw.mapv(|v| ((v - min) / span).clamp(0.0, 1.0))
            } else {
                Array2::zeros(raw.raw_dim())
            };
            (min, hi, normalized)
        }
    };
    AnomalyMap {
        raw,
        normalized,
        norm_min,
        norm_max,
    }
}

/// Strict-threshold segmentation of a normalized map.
pub fn segment(map: &AnomalyMap, alpha: f64) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidThreshold(alpha));
    }
    Ok(map.normalized.mapv(|v| if v > alpha { 1.0 } else { 0.0 }))
}

/// Mean of the top fraction of raw scores (at least one pixel).
pub fn image_score(map: &AnomalyMap, topk_fraction: f64) -> f64 {
    let mut values: Vec<f64> = map.raw.iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    let count = ((values.len() as f64 * topk_fraction).floor() as usize).max(1);
    values[..count].iter().sum::<f64>() / count as f64
}

/// Deterministic fingerprint of the backbone weights, recorded in reports.
pub fn backbone_fingerprint(backbone: &Backbone) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for (name, w, b) in &backbone.weights {
        hasher.update(name.as_bytes());
        for v in w.iter().chain(b.iter()) {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|x| format!("{x:02x}")).collect()
}

/// Export interchange weights (used by tests to materialize a fake
/// pretrained directory).
pub fn export_weights(backbone: &Backbone, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, w, b) in &backbone.weights {
        crate::npy::write_npy(&dir.join(format!("{name}.weight.npy")), &w.clone().into_dyn())?;
        crate::npy::write_npy(&dir.join(format!("{name}.bias.npy")), &b.clone().into_dyn())?;
    }
    Ok(())
}

/// Measurement-mode dispatch shared by evaluation and single-image detection.
pub struct Measurer {
    backbone: Option<Backbone>,
    cfg: PmConfig,
    out_size: usize,
}

impl Measurer {
    pub fn new(cfg: &PmConfig, out_size: usize, needs_backbone: bool) -> Result<Self> {
        let backbone = if needs_backbone && matches!(cfg.measurement, crate::config::MeasurementMode::Perceptual) {
            Some(Backbone::from_config(cfg)?)
        } else {
            None
        };
        Ok(Self {
            backbone,
            cfg: cfg.clone(),
            out_size,
        })
    }

    pub fn backbone(&self) -> Option<&Backbone> {
        self.backbone.as_ref()
    }

    /// Anomaly map for the available image set under the configured
    /// measurement mode.
    pub fn measure(
        &self,
        x: &ImageTensor,
        x_hat: Option<&ImageTensor>,
        m: &ImageTensor,
        m_hat: Option<&ImageTensor>,
    ) -> Result<AnomalyMap> {
        use crate::config::MeasurementMode::*;
        match self.cfg.measurement {
            Perceptual => {
                let backbone = self
                    .backbone
                    .as_ref()
                    .expect("perceptual mode constructs a backbone");
                let fx = backbone.features(x)?;
                let fm = backbone.features(m)?;
                let fxh = x_hat.map(|i| backbone.features(i)).transpose()?;
                let fmh = m_hat.map(|i| backbone.features(i)).transpose()?;
                anomaly_map(
                    &fx,
                    fxh.as_ref(),
                    &fm,
                    fmh.as_ref(),
                    &self.cfg.layer_weights,
                    self.out_size,
                    self.cfg.normalize,
                    self.cfg.percentile,
                )
            }
            PixelXXhat => {
                let xh = x_hat.ok_or_else(|| {
                    Error::ModelNotReady("pixel-x-xhat needs the stage-two model".into())
                })?;
                pixel_distance_map(x, xh, self.cfg.normalize, self.cfg.percentile)
            }
            PixelXM => pixel_distance_map(x, m, self.cfg.normalize, self.cfg.percentile),
            PixelMMhat => {
                let mh = m_hat.ok_or_else(|| {
                    Error::ModelNotReady("pixel-m-mhat needs the naive branch".into())
                })?;
                pixel_distance_map(m, mh, self.cfg.normalize, self.cfg.percentile)
            }
        }
    }
}

/// Map feature stacks to a plain map for tests.
pub fn stack_from_arrays(pairs: Vec<(String, Array3<f64>)>) -> FeatureStack {
    FeatureStack { layers: pairs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PmConfig;

    fn small_image(seed: u64, size: usize) -> ImageTensor {
        let mut rng = init::rng_for(seed, "pm-img");
        use rand::RngExt;
        ImageTensor::new(Array3::from_shape_fn((3, size, size), |_| rng.random::<f64>()))
            .unwrap()
    }

    #[test]
    fn feature_dims_follow_pooling_schedule() {
        let cfg = PmConfig::default();
        let backbone = Backbone::fallback(
            1,
            cfg.layers.clone(),
            [0.485, 0.456, 0.406],
            [0.229, 0.224, 0.225],
        );
        for size in [64usize, 32] {
            let x = small_image(3, size);
            let stack = backbone.features(&x).unwrap();
            assert_eq!(stack.get("conv1_2").unwrap().dim(), (64, size, size));
            assert_eq!(stack.get("conv2_2").unwrap().dim(), (128, size / 2, size / 2));
            assert_eq!(stack.get("conv3_4").unwrap().dim(), (256, size / 4, size / 4));
        }
    }

    #[test]
    fn features_are_deterministic() {
        let cfg = PmConfig::default();
        let backbone = Backbone::from_config(&cfg).unwrap();
        let x = small_image(5, 32);
        let a = backbone.features(&x).unwrap();
        let b = backbone.features(&x).unwrap();
        for (name, fa) in a.iter() {
            assert_eq!(fa, b.get(name).unwrap());
        }
    }

    #[test]
    fn pretrained_round_trips_through_interchange_dir() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PmConfig::default();
        let fallback = Backbone::fallback(
            9,
            cfg.layers.clone(),
            [0.5, 0.5, 0.5],
            [0.25, 0.25, 0.25],
        );
        export_weights(&fallback, dir.path()).unwrap();
        let loaded = Backbone::pretrained(
            dir.path(),
            cfg.layers.clone(),
            [0.5, 0.5, 0.5],
            [0.25, 0.25, 0.25],
        )
        .unwrap();
        assert_eq!(backbone_fingerprint(&fallback), backbone_fingerprint(&loaded));
        let x = small_image(11, 16);
        let fa = fallback.features(&x).unwrap();
        let fb = loaded.features(&x).unwrap();
        assert_eq!(fa.get("conv1_2"), fb.get("conv1_2"));
    }

    #[test]
    fn missing_weights_dir_is_backbone_unavailable() {
        let err = Backbone::pretrained(
            Path::new("/no/such/weights"),
            vec!["conv1_2".into()],
            [0.5; 3],
            [0.25; 3],
        )
        .unwrap_err();
        assert_eq!(err.category(), "backbone-unavailable");
    }

    #[test]
    fn layer_distance_examples() {
        let a = Array3::from_shape_fn((3, 2, 2), |(c, i, j)| (c + i + j) as f64 * 0.2);
        let zero = layer_distance(&a, &a, 4).unwrap();
        assert_eq!(zero.iter().copied().fold(0.0, f64::max), 0.0);

        let b = a.mapv(|v| v + 1.0);
        let one = layer_distance(&a, &b, 4).unwrap();
        for v in one.iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }

        // brute-force oracle on a random pair
        let mut rng = init::rng_for(3, "ld");
        let a = Array3::from_shape_fn((3, 2, 2), |_| init::normal(&mut rng));
        let b = Array3::from_shape_fn((3, 2, 2), |_| init::normal(&mut rng));
        let fast = layer_distance(&a, &b, 2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for c in 0..3 {
                    acc += (a[[c, i, j]] - b[[c, i, j]]).abs();
                }
                assert!((fast[[i, j]] - acc / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn anomaly_map_zero_when_quadruple_identical() {
        let cfg = PmConfig::default();
        let backbone = Backbone::from_config(&cfg).unwrap();
        let x = small_image(21, 16);
        let f = backbone.features(&x).unwrap();
        let map = anomaly_map(
            &f,
            Some(&f),
            &f,
            Some(&f),
            &cfg.layer_weights,
            16,
            NormalizeMode::Minmax,
            0.99,
        )
        .unwrap();
        assert_eq!(map.raw.iter().copied().fold(0.0, f64::max), 0.0);
        assert_eq!(map.normalized.iter().copied().fold(0.0, f64::max), 0.0);
    }

    #[test]
    fn doubling_weights_doubles_raw_but_not_normalized() {
        let cfg = PmConfig::default();
        let backbone = Backbone::from_config(&cfg).unwrap();
        let x = small_image(31, 16);
        let y = small_image(32, 16);
        let fx = backbone.features(&x).unwrap();
        let fy = backbone.features(&y).unwrap();
        let base = anomaly_map(
            &fx,
            Some(&fy),
            &fy,
            Some(&fx),
            &[1.0, 1.0, 1.0],
            16,
            NormalizeMode::Minmax,
            0.99,
        )
        .unwrap();
        let doubled = anomaly_map(
            &fx,
            Some(&fy),
            &fy,
            Some(&fx),
            &[2.0, 2.0, 2.0],
            16,
            NormalizeMode::Minmax,
            0.99,
        )
        .unwrap();
        let max_ratio_err = base
            .raw
            .iter()
            .zip(doubled.raw.iter())
            .map(|(a, b)| (b - 2.0 * a).abs())
            .fold(0.0, f64::max);
        assert!(max_ratio_err < 1e-9);
        let norm_diff = (&base.normalized - &doubled.normalized)
            .mapv(f64::abs)
            .iter()
            .copied()
            .fold(0.0, f64::max);
        assert!(norm_diff < 1e-9);
    }

    #[test]
    fn segment_uses_strict_threshold() {
        let raw = Array2::from_shape_vec((1, 3), vec![0.0, 0.5, 0.7]).unwrap();
        let map = AnomalyMap {
            normalized: raw.clone(),
            raw,
            norm_min: 0.0,
            norm_max: 1.0,
        };
        let seg = segment(&map, 0.5).unwrap();
        assert_eq!(seg[[0, 0]], 0.0);
        assert_eq!(seg[[0, 1]], 0.0, "0.5 > 0.5 is false");
        assert_eq!(seg[[0, 2]], 1.0);

        assert!(segment(&map, 1.2).is_err());
        let all_zero = segment(&map, 1.0).unwrap();
        assert_eq!(all_zero.sum(), 0.0);
    }

    #[test]
    fn image_score_examples() {
        let zeros = AnomalyMap {
            raw: Array2::zeros((10, 10)),
            normalized: Array2::zeros((10, 10)),
            norm_min: 0.0,
            norm_max: 0.0,
        };
        assert_eq!(image_score(&zeros, 0.01), 0.0);

        let constant = AnomalyMap {
            raw: Array2::from_elem((10, 10), 0.37),
            normalized: Array2::zeros((10, 10)),
            norm_min: 0.0,
            norm_max: 0.0,
        };
        assert!((image_score(&constant, 0.01) - 0.37).abs() < 1e-12);

        // one hot pixel, k = 1% of 100 px -> exactly that pixel
        let mut raw = Array2::zeros((10, 10));
        raw[[4, 7]] = 1.0;
        let hot = AnomalyMap {
            raw,
            normalized: Array2::zeros((10, 10)),
            norm_min: 0.0,
            norm_max: 0.0,
        };
        assert_eq!(image_score(&hot, 0.01), 1.0);
    }
}
