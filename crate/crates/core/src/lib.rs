//! Regular scene rearrangement by iterative denoising.
//!
//! The crate is organised bottom-up:
//!
//! * [`scene`]: objects, floor plans, Gaussian perturbation kernels and the
//!   floor-boundary proxy metric.
//! * [`assign`]: per-class minimum-cost matching (earth mover's distance).
//! * [`synth`]: the Table-Chair generators and their success evaluators.
//! * [`nn`]: a small reverse-mode autodiff engine over dense `f64` matrices
//!   plus the Adam optimizer and JSON checkpoints.
//! * [`denoiser`]: attribute tokenization, the floor-plan point encoder and
//!   the transformer that predicts absolute object poses.
//! * [`training`]: the denoising objective and the optimization loop.
//! * [`langevin`]: annealed Langevin inference and its stopping rule.
//! * [`relations`]: PSLQ and the integer-relation regularity rate.
//! * [`io`] and [`render`]: persistence and SVG output used by the CLI.

pub mod assign;
pub mod denoiser;
pub mod error;
pub mod io;
pub mod langevin;
pub mod nn;
pub mod relations;
pub mod render;
pub mod rng;
pub mod scene;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use scene::{FloorPlan, NoiseSpec, ObjectState, Scene};
