//! Training and evaluation for the Predictor, Generator and PredGen regimes,
//! run artifacts, and the ablation driver.

pub mod ablate;
pub mod config;
pub mod eval;
pub mod run;
pub mod train;

pub use ablate::{ablate, ablate_to_dir, ablation_csv, AblationRow, Axis};
pub use config::{ModelSection, OptimizerSection, Pooling, Regime, RunConfig, SamplingMode};
pub use eval::{evaluate_split, is_exact, score, Metrics, Output, EXACT_MATCH_TOL};
pub use run::{
    evaluate, losses_csv, run_dir_name, train, train_generator, train_predgen, train_prepared, train_predictor,
    write_artifacts, EvalRecord, RunOutput,
};
pub use train::{init_run_params, pooled_states, prepare, prepare_for_model, prepare_with, Framed, Prepared, StepLoss, Trainer};
