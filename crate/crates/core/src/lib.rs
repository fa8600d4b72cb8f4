// NaN must fail these checks, so the negated forms are intentional.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod extract;
pub mod gates;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod search;
pub mod shared_conv;
pub mod tensor;
pub mod verify;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
