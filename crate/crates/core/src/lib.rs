//! Heterogeneity-robust video sequence classification.
//!
//! The crate is organized around a small dense-array autodiff engine
//! ([`graph`]) that supports exactly the operator set the rest of the
//! stack needs. On top of it sit:
//!
//! - [`dct`] — orthonormal 2D DCT-II applied framewise,
//! - [`freq`] — frequency attention branch (spectral mixing, adversarial
//!   perturbation, dynamic fitting, residual spatial attention),
//! - [`temporal`] — temporal attention branch (pooled descriptors, global
//!   deviation, local-difference compensation, gated temporal attention),
//! - [`fusion`] — adaptive soft fusion of the two branch outputs,
//! - [`loss`] — supervised contrastive losses with Gaussian reweighting,
//!   covariance-trace regularization, and gradient-driven loss scaling,
//! - [`model`] — a tiny 3D-conv backbone plus heads assembled into an
//!   end-to-end trainable classifier with checkpoint I/O.
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f32`
//! (training) and `f64` (verification / finite-difference checks).

pub mod checkpoint;
pub mod dct;
pub mod freq;
pub mod fusion;
pub mod graph;
pub mod init;
pub mod loss;
pub mod model;
pub mod params;
pub mod scalar;
pub mod temporal;
pub mod tensor;

pub use graph::{EngineError, GradCheckReport, Graph, NodeId};
pub use params::{ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::{Tensor, VideoBatch};
