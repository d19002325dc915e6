//! Numeric substrate: dense arrays, reverse-mode differentiation, truncated
//! SVD and a finite-difference gradient checker.

pub mod array;
pub mod autodiff;
pub mod gradcheck;
pub mod linalg;
pub mod optim;

pub use array::{matmul, NumericArray};
pub use autodiff::{CeTarget, Gradients, Graph, Var};
pub use gradcheck::{finite_diff_grad, relative_error};
pub use linalg::{svd_parts, symmetric_eigen, truncated_svd, TruncatedSvd};
pub use optim::{Adam, ParamStore};
