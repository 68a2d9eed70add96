//! Lung-field segmentation with recurrent criss-cross attention.
//!
//! The crate bundles everything needed to train and evaluate the segmentor
//! at desk scale:
//!
//! * [`tensor`] and [`autograd`]: dense `f64` tensors and a tape-based
//!   reverse-mode gradient engine.
//! * [`cca`]: criss-cross attention, its recurrent form, the dense
//!   non-local reference and receptive-field probes.
//! * [`segnet`]: encoder + attention + decoder segmentor, SGD with a poly
//!   schedule, training and checkpoints.
//! * [`metrics`]: REC, PRE, DICE, AVD and VS with dataset aggregation.
//! * [`augment`]: synthetic phantoms, abnormality synthesis and pseudo-mask
//!   propagation.
//! * [`dataset`], [`pgm`] and [`config`]: on-disk formats used by the `xlsor`
//!   binary, whose subcommands live in [`cli`].
//! * [`gradcheck`] and [`bench`]: the finite-difference suite and the
//!   attention cost benchmark.

pub mod augment;
pub mod autograd;
pub mod bench;
pub mod cca;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod mask;
pub mod metrics;
pub mod pgm;
pub mod segnet;
pub mod tensor;

pub use error::{Error, Result};
