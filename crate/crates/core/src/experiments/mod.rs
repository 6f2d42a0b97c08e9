//! Transfer experiments, ablation grids and result reporting.

mod gradcheck;
mod grid;
mod runs;
mod transfer;

pub use gradcheck::msm_gradient_check;
pub use grid::{
    ablation_grid, collect_results, median, run_ablation, run_grid, ResultRow, ResultTable,
    Setting, ABLATIONS,
};
pub use runs::{
    claim_run_dir, finetune_in_dir, pretrain_in_dir, read_metrics, run_dir, runs_root,
    sha256_file, sha256_hex, transfer_in_dir, write_metrics, InputDigest, RunManifest, RunStatus,
    CHECKPOINT_DIR, CONFIG_FILE, DEFAULT_RUNS_DIR, EXPORT_DIR, FINETUNED_DIR, FINETUNE_LOG_FILE,
    LOSS_LOG_FILE, METRICS_FILE, RUNS_DIR_ENV, RUN_MANIFEST_FILE,
};
pub use transfer::{
    default_metrics, eval_set, evaluate_model, finish_transfer, headline, is_test_latent,
    prepare_transfer, retrieve, run_transfer, EvalSet, LangMetrics, TransferData,
    TransferOutcome,
};
