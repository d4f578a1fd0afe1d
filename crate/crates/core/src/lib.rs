// SPDX-License-Identifier: Apache-2.0

// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod detector;
pub mod error;
pub mod gradcam;
pub mod loss;
pub mod model;
pub mod noise;
pub mod optim;
pub mod render;
pub mod saliency;
pub mod tensor;
pub mod train;

pub use error::{Result, RiaError};
