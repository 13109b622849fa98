//! Synthetic tasks, run configuration, training and evaluation pipelines,
//! hyperparameter sweeps and trace rendering.

pub mod config;
pub mod eval;
pub mod render;
pub mod run;
pub mod tasks;
pub mod train;

pub use config::{resolve_output, RunConfig, OUTPUT_ROOT_ENV};
pub use eval::{evaluate, sweep, write_sweep_csv, EvalReport, PromptResult, SweepGrid, SweepRow};
pub use render::{order_labels, render_svg};
pub use run::{files, run_pipeline, write_run, RunOutput};
pub use tasks::{gen_corpus, load_corpus, read_jsonl, write_jsonl, Task, TaskSpec};
pub use train::{draw_batch, train, write_loss_csv, LossRow, Seeds};
