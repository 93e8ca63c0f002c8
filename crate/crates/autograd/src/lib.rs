//! Reverse-mode automatic differentiation over `ndarray`.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles and
//! replays them backwards on [`Graph::backward`]. Trainable weights live in a
//! [`ParamStore`] outside the graph; a graph borrows a snapshot of them for a
//! single forward/backward pass and returns per-parameter gradients that an
//! optimizer such as [`AdamW`] applies to the store.
//!
//! The operation set is deliberately narrow: what an encoder/decoder
//! convolutional generator, a patch discriminator, small perceptrons and
//! contrastive / weighted-L1 objectives need. Everything is generic over
//! [`Real`] so the same network can run in `f32` for training and in `f64`
//! for finite-difference gradient checks.

mod error;
mod graph;
mod kernels;
mod optim;
mod params;

pub use error::{GraphError, Result};
pub use graph::{Gradients, Graph, Var};
pub use kernels::{adaptive_avg_pool2d, bilinear_resize2d};
pub use optim::{AdamW, AdamWConfig};
pub use params::{init, ParamId, ParamStore};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating point element type accepted by the engine.
pub trait Real:
    LinalgScalar
    + Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
