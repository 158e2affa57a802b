//! Pipeline orchestration: run configuration and execution, metrics,
//! pseudo-labeling, test-time augmentation, ensembling, and report
//! emission. The CLI binary is a thin wrapper over this module.

pub mod config;
pub mod ensemble;
pub mod metrics;
pub mod predictions;
pub mod pseudo;
pub mod report;
pub mod run;
pub mod tta;

use thiserror::Error;

pub use config::{RunConfig, TrainerChoice};
pub use ensemble::{ensemble, ensemble_max_logit, ensemble_mean_prob, FusionRule};
pub use metrics::{head_tail_f1, macro_f1, F1Report};
pub use predictions::{argmax_lowest, PredictionSet};
pub use pseudo::{pseudo_label_count, pseudo_label_select, PseudoLabel};
pub use report::{ablation_csv, class_counts_csv, emit_reports};
pub use run::{run, run_with_options, RunManifest, RunOptions};
pub use tta::{tta_predict, TtaPolicy};

#[derive(Debug, Error)]
pub enum HarnessError {
    /// A pipeline stage failed; the stage name leads the diagnostic.
    #[error("[{stage}] {message}")]
    Stage {
        stage: &'static str,
        message: String,
    },
    #[error("empty evaluation set")]
    EmptyEvaluation,
    #[error("pseudo-label fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
    #[error("ensemble needs at least one prediction set")]
    EmptyEnsemble,
    #[error("{0}")]
    Mismatch(String),
    #[error("csv error: {0}")]
    Csv(String),
}
