//! Engine for the distill, edit and fine-tune loop over next-activity
//! predictors trained on process event logs.

pub mod bundle;
pub mod distillation;
pub mod encoding;
pub mod event_log;
pub mod fairness_loop;
pub mod metrics;
pub mod neural;
pub mod simulator;
pub mod surgery;
