//! Run configuration, training and evaluation shared by the command line
//! and the acceptance checks.

mod config;
mod eval;
pub mod optim;
mod train;

pub use config::{apply_override, OptimConfig, OutputConfig, RunConfig};
pub use eval::{decoder_attention_rows, detect_scene, evaluate, random_box_ap, random_box_detections, reference_points, EvalOutcome, AP_IOU};
pub use train::{epoch_order, log_header, lr_scale, train, StepLog, TrainOutcome, LOG_SCHEMA_VERSION};

#[cfg(test)]
mod tests;
