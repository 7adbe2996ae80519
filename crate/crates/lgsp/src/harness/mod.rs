//! Experiment plumbing: typed flat config, the binary tensor container,
//! synthetic data generation, run orchestration, and PGM/CSV exports.

pub mod config;
pub mod datagen;
pub mod export;
pub mod runner;
pub mod tensorfile;

pub use config::{DataConfig, ExperimentConfig};
pub use runner::{
    build_model, datagen_cmd, eval_cmd, export_input, grad_check_cmd, load_params, load_run_model,
    run_cmd, save_params, sweep_pool_cmd, train_base_cmd, train_novel_cmd, with_thread_pool,
    SweepRow,
};
pub use tensorfile::{decode, encode, read_tensor, write_tensor, Dtype};
