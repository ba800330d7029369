//! scratch: stage-one overfit dynamics
use anomalens::config::ExperimentConfig;
use anomalens::data::synth::{synth_defect_dataset, SynthDefectSpec};
use anomalens::orchestrator::{self, train::RunLog};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let base: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(16);
    let dz: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(64);
    let epochs: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(250);

    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::small();
    cfg.seed = 3;
    cfg.image_size = 32;
    cfg.ie.blocks = 3;
    cfg.ie.base_width = base;
    cfg.ie.d_z = dz;
    cfg.ie.t_hidden = 64;
    cfg.ie.lr = lr;
    cfg.ie.lambda_rec = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(10.0);
    cfg.ie.epochs = epochs; // 8 imgs, batch 4 -> 2 steps/epoch
    cfg.ie.batch_size = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(4);
    cfg.data.synth_clean = 8;
    cfg.data.synth_defect = 0;

    let (train, _) = synth_defect_dataset(
        &dir.path().join("data"),
        SynthDefectSpec { n_clean: 8, n_defect: 0, image_size: 32, seed: 3 },
        3,
    )
    .unwrap();
    let images = orchestrator::load_images(&train).unwrap();
    let log = RunLog::new(dir.path()).unwrap();
    let t0 = std::time::Instant::now();
    let outcome = orchestrator::train::train_ie_net(&cfg, &images, dir.path(), &log).unwrap();
    println!(
        "lr={lr} base={base} dz={dz} steps={} best={:.5} final={:.5} wall={:.1}s",
        outcome.steps, outcome.best_epoch_loss, outcome.final_epoch_loss,
        t0.elapsed().as_secs_f64()
    );
    // recon loss on the trained model
    let ie = orchestrator::load_ie(&cfg, &outcome.best_checkpoint).unwrap();
    let mut recon = 0.0;
    for idx in 0..train.len() {
        let x = train.load_image(idx).unwrap();
        recon += ie.reconstruction_loss(&x).unwrap();
    }
    println!("mean L_M^d over set: {:.5}", recon / train.len() as f64);
}
