use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// How a conflicting secondary gradient is combined with the primary one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurgeryMode {
    /// Remove the secondary's component along the primary, keep the rest.
    #[default]
    Project,
    /// Drop the secondary entirely on conflict.
    PrimaryOnly,
}

impl std::fmt::Display for SurgeryMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Project => "project",
            Self::PrimaryOnly => "primary_only",
        })
    }
}

impl std::str::FromStr for SurgeryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "project" => Ok(Self::Project),
            "primary_only" => Ok(Self::PrimaryOnly),
            other => Err(Error::Config(format!("unknown surgery mode {other:?}"))),
        }
    }
}

/// Combines two gradients, protecting `primary`.
///
/// Aligned (positive cosine) or degenerate (either zero) pairs are summed.
/// Otherwise the projection of `secondary` onto `primary` is subtracted from
/// the sum (or, in [`SurgeryMode::PrimaryOnly`], `primary` is returned as is).
pub fn gradient_surgery_slice(primary: &[f64], secondary: &[f64], mode: SurgeryMode) -> Result<Vec<f64>> {
    if primary.len() != secondary.len() {
        return Err(Error::dim("gradient_surgery", &[primary.len()], &[secondary.len()]));
    }
    let dot: f64 = primary.iter().zip(secondary).map(|(a, b)| a * b).sum();
    let pp: f64 = primary.iter().map(|a| a * a).sum();
    let ss: f64 = secondary.iter().map(|b| b * b).sum();
    let sum = || primary.iter().zip(secondary).map(|(a, b)| a + b).collect();
    if pp == 0.0 || ss == 0.0 || dot > 0.0 {
        return Ok(sum());
    }
    Ok(match mode {
        SurgeryMode::Project => {
            let coef = dot / pp;
            primary
                .iter()
                .zip(secondary)
                .map(|(a, b)| a + b - coef * a)
                .collect()
        }
        SurgeryMode::PrimaryOnly => primary.to_vec(),
    })
}

pub fn gradient_surgery(primary: &Tensor, secondary: &Tensor, mode: SurgeryMode) -> Result<Tensor> {
    if primary.shape() != secondary.shape() {
        return Err(Error::dim("gradient_surgery", primary.shape(), secondary.shape()));
    }
    Tensor::new(
        primary.shape().to_vec(),
        gradient_surgery_slice(primary.data(), secondary.data(), mode)?,
    )
}
