// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certificates;
pub mod compfn;
pub mod error;
pub mod linalg;
pub mod pi;
pub mod report;
pub mod system;
pub mod verify;

pub use error::{Error, Result};
