//! Minimal reverse-mode autodiff on dynamically shaped ndarray tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and a backward closure. Gradients flow in reverse insertion order, which
//! is a valid reverse topological order because ops only reference earlier
//! nodes. All computation is sequential with a fixed reduction order, so
//! identical inputs produce bit-identical values and gradients on CPU.
//!
//! The element type is generic over f32/f64: training runs in f32, while
//! finite-difference gradient oracles run in f64 where the comparison
//! tolerances are actually meaningful.

mod conv;
mod graph;
pub mod gradcheck;
mod layers;

pub use graph::{Grads, Graph, NodeId};
pub use layers::{
    Adam, Conv2d, ConvTranspose2d, InstanceNorm, ParamBinding, ParamId, ParamStore, WeightInit,
};

/// Float element trait implemented for f32 and f64.
pub trait Flt: ndarray::NdFloat {
    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).unwrap()
    }
    fn to_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap()
    }
}

impl Flt for f32 {}
impl Flt for f64 {}
