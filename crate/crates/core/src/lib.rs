//! Desk-scale laboratory for patch-wise Trojan attacks on Vision Transformers.

pub mod attack;
pub mod autodiff;
mod binio;
pub mod defense;
pub mod error;
pub mod harness;
pub mod metrics;
mod par;
pub mod quant;
pub mod trigger;
pub mod trojan;
pub mod vit;

pub use error::{Error, Result};
pub use par::with_threads;
