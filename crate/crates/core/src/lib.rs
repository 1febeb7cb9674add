//! Weakly pre-learnt saliency model.
//!
//! Weak saliency labels come from a graph-based saliency model, are filtered
//! by histogram entropy, and pretrain a shallow CNN that is then fine-tuned on
//! human fixation maps and scored with the standard saliency metrics.

pub mod cli;
pub mod gbvs;
pub mod imagecore;
pub mod metrics;
pub mod net;
pub mod synth;
pub mod train;
pub mod weakset;
