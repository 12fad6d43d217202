// A/B: adam beta2 for the overfit operating point
use tse::dataset::Manifest;
use tse::trainer::{fit, TrainConfig};

fn main() {
    let which = std::env::args().nth(1).unwrap_or_default();
    let manifest = Manifest::read(std::path::Path::new("/tmp/overfit_trial/data/manifest.tsv")).unwrap();
    let mut cfg = TrainConfig::toy(17);
    cfg.icl_on = false; cfg.secl_on = false; cfg.adv_on = false; cfg.joint_training = false;
    if which.contains("b99") { cfg.adam_beta2 = 0.99; }
    if which.contains("icl") { cfg.icl_on = true; }
    cfg.epochs = 1000;
    cfg.val_every = 10;
    cfg.target_val_si_snri = Some(5.0);
    cfg.max_steps = Some(400);
    let out = format!("/tmp/ab_{which}");
    let _ = std::fs::remove_dir_all(&out);
    let report = fit(cfg, &manifest, &manifest, std::path::Path::new(&out)).unwrap();
    println!("{which}: steps {} best {:?}", report.steps, report.best_val);
}
