//! The token-pool saturation study at toy scale: train the deep token-pool
//! variant at several pool sizes on the same seeded benchmark and watch the
//! novel-session accuracy fall while the base session stays robust.

use std::path::Path;

use lgsp::harness::{self, ExperimentConfig};

fn main() -> lgsp::Result<()> {
    let out = Path::new("example_out/pool_saturation");
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 7;
    cfg.data.dir = out.join("data").to_string_lossy().into_owned();
    cfg.data.classes = 8;
    cfg.data.train_per_class = 8;
    cfg.data.test_per_class = 6;
    cfg.data.pretext_classes = 4;
    cfg.data.pretext_per_class = 12;
    cfg.fscil_base_classes = 4;
    cfg.fscil_base_shots = 8;
    cfg.fscil_sessions = 2;
    cfg.fscil_n_way = 2;
    cfg.fscil_k_shot = 2;
    cfg.fscil_test_per_class = 6;
    cfg.train.base_epochs = 8;
    cfg.train.novel_epochs = 3;
    cfg.pretext_epochs = 5;
    cfg.sweep_pool_sizes = vec![2, 8, 32];

    harness::datagen_cmd(&cfg, None)?;
    let rows = harness::sweep_pool_cmd(&cfg, &out.join("sweep"))?;

    println!("pool_size  base_acc  novel_acc  overall");
    for r in &rows {
        println!(
            "{:>9}  {:.4}    {:.4}     {:.4}",
            r.pool_size, r.base_acc, r.novel_acc, r.overall_acc
        );
    }
    Ok(())
}
