//! scratch: synthetic end-to-end quality
use anomalens::config::ExperimentConfig;
use anomalens::orchestrator::{self, impressions, train::RunLog};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ie_lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let ie_epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(10);
    let ie_base: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(24);
    let dz: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(128);
    let ex_epochs: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(10);
    let ex_base: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(16);

    let dir = std::path::PathBuf::from(
        std::env::var("SCRATCH_DIR").unwrap_or_else(|_| "/tmp/e2e".into()),
    );
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();

    let mut cfg = ExperimentConfig::small();
    cfg.seed = 7;
    cfg.image_size = 64;
    cfg.ie.blocks = 3;
    cfg.ie.base_width = ie_base;
    cfg.ie.d_z = dz;
    cfg.ie.t_hidden = 64;
    cfg.ie.lr = ie_lr;
    cfg.ie.lambda_rec = 20.0;
    cfg.ie.epochs = ie_epochs;
    cfg.ie.batch_size = 4;
    cfg.expert.lr = 1e-3;
    cfg.expert.base_width = ex_base;
    cfg.expert.epochs = ex_epochs;
    cfg.expert.batch_size = 4;
    cfg.data.kind = anomalens::config::DataKind::SynthDefect;
    cfg.data.root = dir.join("data").display().to_string();
    cfg.data.synth_clean = 200;
    cfg.data.synth_defect = 50;

    let (train, test) = orchestrator::load_datasets(&cfg).unwrap();
    let images = orchestrator::load_images(&train).unwrap();
    let log = RunLog::new(&dir).unwrap();

    let t0 = std::time::Instant::now();
    let ie_out = orchestrator::train::train_ie_net(&cfg, &images, &dir, &log).unwrap();
    println!("stage1 wall={:.0}s best={:.4}", t0.elapsed().as_secs_f64(), ie_out.best_epoch_loss);
    let ie = orchestrator::load_ie(&cfg, &ie_out.best_checkpoint).unwrap();

    let t1 = std::time::Instant::now();
    impressions::generate_impression_set(&cfg, &ie, &ie_out.best_checkpoint, &train, &dir, false).unwrap();
    let imps = impressions::load_impressions(&dir, &ie_out.best_checkpoint).unwrap();
    println!("impress wall={:.0}s", t1.elapsed().as_secs_f64());

    let t2 = std::time::Instant::now();
    let ex_out = orchestrator::train::train_expert_net(&cfg, &images, &imps, &dir, &log).unwrap();
    println!("stage2 wall={:.0}s best={:.4}", t2.elapsed().as_secs_f64(), ex_out.best_epoch_loss);
    let expert = orchestrator::load_expert(&cfg, &ex_out.best_checkpoint).unwrap();

    let t3 = std::time::Instant::now();
    let report = orchestrator::evaluate::evaluate(&cfg, &ie, Some(&expert), &test, &dir, &[]).unwrap();
    println!("eval wall={:.0}s", t3.elapsed().as_secs_f64());
    println!(
        "pixel_auroc={:?} iou={:?} total_wall={:.0}s",
        report.mean_pixel_auroc, report.mean_iou, t0.elapsed().as_secs_f64()
    );
}
