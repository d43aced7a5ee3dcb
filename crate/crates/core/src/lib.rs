// SPDX-License-Identifier: Apache-2.0

pub mod autodiff;
pub mod baselines;
pub mod container;
pub mod data;
pub mod embed_io;
pub mod error;
pub mod experiment;
pub mod model;
pub mod optim;
pub mod par;
pub mod prompting;
pub mod tensor;
pub mod theory;
pub mod tta;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
