//! Desk-scale laboratory for studying how sharing hidden layers between
//! output factors affects generalization to unseen label combinations.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense `f64` tensors and a reverse-mode graph.
//! - [`models`]: split-depth networks (shared trunk, one head per factor).
//! - [`data`]: label splits, factor sources, paired datasets, 2-D toys.
//! - [`train`]: seeded minibatch Adam loop.
//! - [`metrics`]: test-sample / test-set / random-set accuracy and
//!   o.o.d. partition counts.
//! - [`oracle`]: seen-prediction projection and refinement checks.
//! - [`viz`]: decision-boundary rasters and PPM panels.
//! - [`experiment`]: config-driven recipes behind the `sgl` binary.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod models;
pub mod oracle;
pub mod tensor;
pub mod train;
pub mod viz;

pub use autodiff::{Gradients, Graph, NodeId, ParamId};
pub use error::{Error, Result};
pub use tensor::Tensor;

/// Label tuple: one class index per output factor.
pub type Combo = Vec<usize>;
