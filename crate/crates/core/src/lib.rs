//! Weakly supervised instance labelling with attention MIL.
//!
//! A teacher is trained on bag labels with a gated attention head and a
//! perturbation-consistency regularizer ([`vat`]); it is then distilled into a
//! student that also predicts individual instances ([`distill`]).

use std::sync::atomic::{AtomicBool, Ordering};

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod train;
pub mod types;
pub mod vat;

pub use error::{Error, Result};
pub use model::{MilModel, ModelSpec};
pub use types::{Bag, BagView, DistillConfig, Instance, InstanceShape, PredictionOutput, VatConfig};

static INTERRUPTED: AtomicBool = AtomicBool::new(false);

/// Asks long-running loops to stop at the next epoch or job boundary.
pub fn request_interrupt() {
    INTERRUPTED.store(true, Ordering::SeqCst);
}

pub fn interrupted() -> bool {
    INTERRUPTED.load(Ordering::SeqCst)
}
