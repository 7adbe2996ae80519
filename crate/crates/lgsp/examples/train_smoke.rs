//! End-to-end smoke run: generates a small synthetic benchmark, trains the
//! full model through the base and novel sessions, and prints the metrics
//! table. Writes the run directory under example_out/train_smoke/.

use std::path::Path;

use lgsp::harness::{self, ExperimentConfig};

fn main() -> lgsp::Result<()> {
    let out = Path::new("example_out/train_smoke");
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 7;
    cfg.data.dir = out.join("data").to_string_lossy().into_owned();
    cfg.data.classes = 8;
    cfg.data.train_per_class = 8;
    cfg.data.test_per_class = 4;
    cfg.data.pretext_classes = 4;
    cfg.data.pretext_per_class = 12;
    cfg.fscil_base_classes = 4;
    cfg.fscil_base_shots = 8;
    cfg.fscil_sessions = 2;
    cfg.fscil_n_way = 2;
    cfg.fscil_k_shot = 2;
    cfg.fscil_test_per_class = 4;
    cfg.train.base_epochs = 8;
    cfg.train.novel_epochs = 3;
    cfg.pretext_epochs = 5;

    harness::datagen_cmd(&cfg, None)?;
    let record = harness::run_cmd(&cfg, &out.join("run"))?;

    println!("session  acc     base    novel   alpha_l alpha_g");
    for r in &record.rows {
        println!(
            "{:>7}  {:.4}  {:.4}  {:<6}  {:.4}  {:.4}",
            r.session,
            r.acc,
            r.base_acc,
            if r.novel_acc.is_nan() {
                "-".to_string()
            } else {
                format!("{:.4}", r.novel_acc)
            },
            r.alpha_l,
            r.alpha_g
        );
    }
    println!("average accuracy: {:.4}", record.average());
    println!("run directory: {}", out.join("run").display());
    Ok(())
}
