//! scratch: stage-two overfit dynamics on a tiny paired set
use anomalens::config::ExperimentConfig;
use anomalens::data::synth::{synth_defect_dataset, SynthDefectSpec};
use anomalens::orchestrator::{self, impressions, train::RunLog};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ex_lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let ex_base: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(16);
    let ex_epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(250);

    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::small();
    cfg.seed = 3;
    cfg.image_size = 32;
    cfg.ie.blocks = 3;
    cfg.ie.base_width = 24;
    cfg.ie.d_z = 192;
    cfg.ie.t_hidden = 64;
    cfg.ie.lr = 0.05;
    cfg.ie.lambda_rec = 20.0;
    cfg.ie.epochs = 250;
    cfg.ie.batch_size = 4;
    cfg.expert.lr = ex_lr;
    cfg.expert.base_width = ex_base;
    cfg.expert.epochs = ex_epochs;
    cfg.expert.batch_size = 4;

    let (train, _) = synth_defect_dataset(
        &dir.path().join("data"),
        SynthDefectSpec { n_clean: 8, n_defect: 0, image_size: 32, seed: 3 },
        3,
    )
    .unwrap();
    let images = orchestrator::load_images(&train).unwrap();
    let log = RunLog::new(dir.path()).unwrap();
    let t0 = std::time::Instant::now();
    let ie_out = orchestrator::train::train_ie_net(&cfg, &images, dir.path(), &log).unwrap();
    let ie = orchestrator::load_ie(&cfg, &ie_out.best_checkpoint).unwrap();
    impressions::generate_impression_set(&cfg, &ie, &ie_out.best_checkpoint, &train, dir.path(), false).unwrap();
    let imps = impressions::load_impressions(dir.path(), &ie_out.best_checkpoint).unwrap();
    println!("stage1 wall={:.1}s bestL={:.5}", t0.elapsed().as_secs_f64(), ie_out.best_epoch_loss);

    let t1 = std::time::Instant::now();
    let ex_out = orchestrator::train::train_expert_net(&cfg, &images, &imps, dir.path(), &log).unwrap();
    println!(
        "stage2 wall={:.1}s best={:.5} final={:.5}",
        t1.elapsed().as_secs_f64(), ex_out.best_epoch_loss, ex_out.final_epoch_loss
    );
    let expert = orchestrator::load_expert(&cfg, &ex_out.best_checkpoint).unwrap();

    // measure: total expert loss; mean|x_hat - x| vs mean|m - x|
    let mut total = 0.0;
    let mut d_xhat = 0.0;
    let mut d_m = 0.0;
    for idx in 0..train.len() {
        let x = train.load_image(idx).unwrap();
        let m = anomalens::data::ImageTensor::new(imps[idx].clone()).unwrap();
        let breakdown = expert.expert_loss(&x, &m, &cfg.expert, &cfg.toggles).unwrap();
        total += breakdown.total;
        let s = expert.extract_details(&x).unwrap();
        let xh = expert.reconstruct_high_fidelity(&m, &s).unwrap();
        d_xhat += (xh.array() - x.array()).mapv(f64::abs).mean().unwrap();
        d_m += (m.array() - x.array()).mapv(f64::abs).mean().unwrap();
    }
    let n = train.len() as f64;
    println!(
        "mean expert_loss={:.5} mean|xh-x|={:.5} mean|m-x|={:.5}",
        total / n, d_xhat / n, d_m / n
    );
}
