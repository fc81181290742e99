//! Predictor-verifier training for feedforward classifiers that are
//! provably robust to l-infinity bounded input perturbations.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense tensors and a reverse-mode tape.
//! - [`network`]: layered predictors built from affine maps and monotone
//!   nonlinearities, plus [`checkpoint`] persistence.
//! - [`bounds`]: interval bound propagation in (l, u) and (centre, radius) form.
//! - [`dual`]: closed-form Lagrangian dual bounds, certificates and a
//!   subgradient optimiser over the dual variables.
//! - [`verifier`]: networks that predict dual variables.
//! - [`train`]: joint training of predictor and verifier.
//! - [`attack`] and [`eval`]: PGD and the nominal / PGD / verified error rates.
//! - [`oracle`]: brute-force lower bounds on the worst-case specification value.
//! - [`data`]: MNIST IDX loading and synthetic datasets.

pub mod attack;
pub mod autodiff;
pub mod bounds;
pub mod checkpoint;
pub mod data;
pub mod dual;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod network;
pub mod nonlin;
pub mod oracle;
pub mod tensor;
pub mod train;
pub mod verifier;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
