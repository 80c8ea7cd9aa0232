// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod backbone;
pub mod bottleneck;
pub mod bundle;
pub mod catalog;
pub mod error;
pub mod eval;
pub mod explain;
pub mod fsutil;
pub mod head;
pub mod similarity;
pub mod toy;

pub use error::{Error, Result};
