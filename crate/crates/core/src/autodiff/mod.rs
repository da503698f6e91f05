//! Minimal reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] on a scalar node sweeps the record in reverse and
//! writes `∂loss/∂p` into each [`Parameter`] of a [`ParamStore`].
//!
//! ```
//! use tdam_core::autodiff::{Graph, ParamStore};
//! use tdam_core::Tensor;
//!
//! let mut store = ParamStore::new();
//! let w = store.insert("w", Tensor::scalar(0.0)).unwrap();
//! let mut g = Graph::new();
//! let wv = g.param(&store, w);
//! let y = g.sigmoid(wv);
//! g.backward(y, &mut store).unwrap();
//! assert_eq!(store.get(w).grad.data()[0], 0.25);
//! ```

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod param;

pub use gradcheck::{
    analytic_gradients, compare_with_finite_differences, finite_difference_check, GradCheckReport,
    Objective,
};
pub use graph::{Activation, Gradients, Graph, Var, PROB_FLOOR};
pub use param::{ParamId, ParamStore, Parameter};

#[cfg(test)]
mod tests;
