//! Command implementations behind the `ppcnn` binary: training, evaluation,
//! prediction, benchmarking, gradient checking, and the ablation grid.

pub mod ablate;
pub mod bench;
pub mod config;
pub mod gradcheck_cmd;
pub mod train;

pub use ablate::{ablate_csv, grid_rows, run_ablate, AblationGrid, AblationRow};
pub use bench::{bench_csv, naive_knn_aggregate, run_bench, time_median, BenchOptions, BenchRow};
pub use config::{DataConfig, RunConfig};
pub use gradcheck_cmd::{gradcheck_csv, run_gradcheck, GradCheckRow};
pub use train::{
    derive_rng, evaluate_scenes, predict_scene, run_eval, run_predict, run_train, train_model,
    train_scenes, val_scenes, EvalOutcome, TrainOutcome, TrainStats,
};
