//! Training configuration, the training loop, ablation grids, gradient
//! checking and reporting.

pub mod ablate;
pub mod config;
pub mod gradcheck;
pub mod report;
pub mod step;
pub mod train;

pub use ablate::{ablate, preset, AblationResult, DEFAULT_SEEDS, PRESETS};
pub use config::{CheckpointPolicy, DistillConfig, EmaConfig, MdVariant, Optimizer, PdVariant, RunConfig, ScheduleConfig, TrainConfig};
pub use gradcheck::{gradcheck, GradcheckReport};
pub use report::{comparison_table, report, summarize, Summary};
pub use step::{evaluate_plan, scene_step, ComponentMask, LossParts, ScenePlan, TeacherView};
pub use train::{evaluate, train, Dataset, MetricsRow, RunRecord};
