//! Numerics for anchor-free spatio-temporal video grounding.
//!
//! The crate covers the full grounding pipeline at desk scale: cross-modal
//! feature fusion, mixed 2D/3D convolution trunks, Gaussian-kernel target
//! encoding with focal and GIoU losses (analytic gradients throughout),
//! sliding-window temporal candidates with smooth-L1 losses, anchor-free
//! box/tube decoding, and the tIoU/vIoU metric family. Verification leans
//! on independent oracles: naive convolution, finite-difference gradient
//! checks, and synthetic fit demos instead of dataset training.

pub mod error;
pub mod formats;
pub mod fusion;
pub mod metrics;
pub mod mixed;
pub mod optim;
pub mod pipeline;
pub mod spatial;
pub mod temporal;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tensor, Tensor32, Tensor64};
