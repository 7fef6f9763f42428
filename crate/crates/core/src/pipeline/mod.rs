//! End-to-end runs shared by the command-line tool and the tests: config,
//! model bundles, training loops, evaluation and plots.

mod config;
mod eval;
mod models;
mod plot;
mod train;

pub use config::{LrSchedulerKind, RunConfig};
pub use eval::{
    evaluate, evaluation_prompt, generate_diffusion, generate_for_eval, target_prompt,
    DEFAULT_PROMPT_TEMPLATE,
};
pub use models::{load_base, ControlModel, DiffusionModel, Loaded, TrainState, Variant};
pub use plot::{line_plot, PLOT_HEIGHT, PLOT_WIDTH};
pub use train::{
    checkpoint_path, init_state, parse_metric_log, resume_state, run_id, run_training,
    train_one_step, StepRecord, TrainOutcome, FINAL_CHECKPOINT, METRICS_FILE, RUN_MANIFEST_FILE,
};
