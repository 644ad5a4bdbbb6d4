//! Budget-constrained mixed-precision bit allocation.
//!
//! Preferences over candidate bit-widths are learned per linear module by a
//! Gumbel-Softmax relaxation trained against teacher-forced hidden-state
//! reconstruction under an augmented-Lagrangian average-bit constraint, then
//! projected onto an exactly budget-feasible assignment by a multiple-choice
//! knapsack solver.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod alloc;
pub mod baselines;
pub mod calib;
pub mod mask;
pub mod model;
pub mod parallel;
pub mod quant;
pub mod seed;
