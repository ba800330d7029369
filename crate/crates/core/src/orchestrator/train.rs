//! Stage training loops: epoch scheduling, deterministic batching, loss
//! logging, per-epoch checkpoints, best-by-training-loss tracking, and
//! divergence handling.

use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::expert::ExpertNet;
use crate::ienet::IeNet;
use crate::nn::init;
use crate::nn::optim::{Adam, Sgd};

use super::checkpoint;

/// Deterministic append-only text log inside the run directory.
pub struct RunLog {
    path: PathBuf,
}

impl RunLog {
    pub fn new(out_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        Ok(Self {
            path: out_dir.join("log.txt"),
        })
    }

    pub fn line(&self, text: &str) -> Result<()> {
        use std::io::Write;
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(file, "{text}").map_err(|e| Error::io(&self.path, e))
    }
}

/// Seeded epoch order: a permutation of item indices.
fn epoch_order(seed: u64, stage: &str, epoch: usize, n: usize) -> Vec<usize> {
    use rand::RngExt;
    let mut rng = init::rng_for(seed, &format!("{stage}-epoch-{epoch}"));
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i + 1);
        order.swap(i, j);
    }
    order
}

fn gather_batch(images: &[Array3<f64>], indices: &[usize]) -> Array4<f64> {
    let (c, h, w) = images[0].dim();
    let mut out = Array4::zeros((indices.len(), c, h, w));
    for (row, &idx) in indices.iter().enumerate() {
        out.index_axis_mut(Axis(0), row).assign(&images[idx]);
    }
    out
}

/// Batches of at least `min_batch` items; a too-small trailing remainder is
/// dropped.
fn batch_indices(order: &[usize], batch_size: usize, min_batch: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for chunk in order.chunks(batch_size) {
        if chunk.len() >= min_batch {
            out.push(chunk.to_vec());
        }
    }
    out
}

pub struct StageOutcome {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_epoch_loss: f64,
    pub final_epoch_loss: f64,
    pub steps: u64,
}

/// Train stage one on anomaly-free images. Writes per-epoch checkpoints and
/// `best.ckpt` under `<out>/checkpoints/ie/`.
pub fn train_ie_net(
    cfg: &ExperimentConfig,
    images: &[Array3<f64>],
    out_dir: &Path,
    log: &RunLog,
) -> Result<StageOutcome> {
    if images.is_empty() {
        return Err(Error::EmptyInput("ie training set"));
    }
    let use_mi = cfg.toggles.use_mi_loss;
    let min_batch = if use_mi { 2 } else { 1 };
    if use_mi && images.len() < 2 {
        return Err(Error::BatchTooSmall(images.len()));
    }

    let mut net = IeNet::new(cfg);
    let mut opt_disc = Sgd::new(
        &net.store,
        net.discriminator_params(),
        cfg.ie.lr,
        cfg.ie.momentum,
    )
    .with_clip_norm(cfg.ie.grad_clip);
    let mut opt_enc = Sgd::new(
        &net.store,
        net.encoder_decoder_params(),
        cfg.ie.lr,
        cfg.ie.momentum,
    )
    .with_clip_norm(cfg.ie.grad_clip);

    let ckpt_dir = out_dir.join("checkpoints").join("ie");
    let best_path = ckpt_dir.join("best.ckpt");
    let mut best_loss = f64::INFINITY;
    let mut final_loss = f64::NAN;
    let mut step: u64 = 0;
    let mut last_path = best_path.clone();

    for epoch in 0..cfg.ie.epochs {
        let order = epoch_order(cfg.seed, "ie", epoch, images.len());
        let batches = batch_indices(&order, cfg.ie.batch_size, min_batch);
        if batches.is_empty() {
            return Err(Error::BatchTooSmall(images.len()));
        }
        let mut epoch_total = 0.0;
        for indices in &batches {
            let batch = gather_batch(images, indices);
            let mut rng = init::rng_for(cfg.seed, &format!("ie-step-{step}"));
            let stats = net.train_step(
                &batch,
                &cfg.ie,
                use_mi,
                &mut opt_disc,
                &mut opt_enc,
                &mut rng,
            )?;
            if !stats.total.is_finite() {
                log.line(&format!("ie step={step} diverged"))?;
                return Err(Error::TrainingDiverged {
                    step: step as usize,
                    reason: "non-finite stage-one loss".into(),
                });
            }
            log.line(&format!(
                "ie step={step} epoch={epoch} l_t={:.6} kl={:.6} l_d={:.6} total={:.6}",
                stats.l_t, stats.kl, stats.l_d, stats.total
            ))?;
            epoch_total += stats.total;
            step += 1;
        }
        let mean = epoch_total / batches.len() as f64;
        log.line(&format!("ie epoch={epoch} mean_total={mean:.6}"))?;

        let epoch_path = ckpt_dir.join(format!("epoch_{epoch:04}.ckpt"));
        checkpoint::save(&epoch_path, "ie", cfg, &net.store, step)?;
        last_path = epoch_path;
        if mean < best_loss {
            best_loss = mean;
            checkpoint::save(&best_path, "ie", cfg, &net.store, step)?;
        }
        final_loss = mean;
    }

    Ok(StageOutcome {
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        best_epoch_loss: best_loss,
        final_epoch_loss: final_loss,
        steps: step,
    })
}

/// Train stage two on (image, impression) pairs. Writes checkpoints under
/// `<out>/checkpoints/expert/`.
pub fn train_expert_net(
    cfg: &ExperimentConfig,
    images: &[Array3<f64>],
    impressions: &[Array3<f64>],
    out_dir: &Path,
    log: &RunLog,
) -> Result<StageOutcome> {
    if images.is_empty() {
        return Err(Error::EmptyInput("expert training set"));
    }
    if images.len() != impressions.len() {
        return Err(Error::Pairing(format!(
            "{} images vs {} impressions",
            images.len(),
            impressions.len()
        )));
    }

    let mut net = ExpertNet::new(cfg);
    let mut opt = Adam::new(&net.store, net.all_params(), cfg.expert.lr);

    let ckpt_dir = out_dir.join("checkpoints").join("expert");
    let best_path = ckpt_dir.join("best.ckpt");
    let mut best_loss = f64::INFINITY;
    let mut final_loss = f64::NAN;
    let mut step: u64 = 0;
    let mut last_path = best_path.clone();

    for epoch in 0..cfg.expert.epochs {
        let order = epoch_order(cfg.seed, "expert", epoch, images.len());
        let batches = batch_indices(&order, cfg.expert.batch_size, 1);
        let mut epoch_total = 0.0;
        for indices in &batches {
            let x = gather_batch(images, indices);
            let m = gather_batch(impressions, indices);
            let mut rng = init::rng_for(cfg.seed, &format!("expert-step-{step}"));
            let stats = net.train_step(&x, &m, &cfg.expert, &cfg.toggles, &mut opt, &mut rng)?;
            if !stats.total.is_finite() {
                log.line(&format!("expert step={step} diverged"))?;
                return Err(Error::TrainingDiverged {
                    step: step as usize,
                    reason: "non-finite stage-two loss".into(),
                });
            }
            log.line(&format!(
                "expert step={step} epoch={epoch} l_x={:.6} l_m={:.6} l_s={:.6} total={:.6}",
                stats.l_x, stats.l_m, stats.l_s, stats.total
            ))?;
            epoch_total += stats.total;
            step += 1;
        }
        let mean = epoch_total / batches.len() as f64;
        log.line(&format!("expert epoch={epoch} mean_total={mean:.6}"))?;

        let epoch_path = ckpt_dir.join(format!("epoch_{epoch:04}.ckpt"));
        checkpoint::save(&epoch_path, "expert", cfg, &net.store, step)?;
        last_path = epoch_path;
        if mean < best_loss {
            best_loss = mean;
            checkpoint::save(&best_path, "expert", cfg, &net.store, step)?;
        }
        final_loss = mean;
    }

    Ok(StageOutcome {
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        best_epoch_loss: best_loss,
        final_epoch_loss: final_loss,
        steps: step,
    })
}

/// Instantiate stage one from a checkpoint.
pub fn load_ie(cfg: &ExperimentConfig, path: &Path) -> Result<IeNet> {
    let (tensors, _) = checkpoint::load(path, "ie", cfg)?;
    let mut net = IeNet::new(cfg);
    net.store.load_from(&tensors)?;
    Ok(net)
}

/// Instantiate stage two from a checkpoint.
pub fn load_expert(cfg: &ExperimentConfig, path: &Path) -> Result<ExpertNet> {
    let (tensors, _) = checkpoint::load(path, "expert", cfg)?;
    let mut net = ExpertNet::new(cfg);
    net.store.load_from(&tensors)?;
    Ok(net)
}
