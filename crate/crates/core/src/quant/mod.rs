//! 8-bit weight storage and bit-level accounting.
//!
//! Each tensor is stored as signed int8 codes with one per-tensor scale:
//! `scale = max|w| / 127` (1 for an all-zero tensor) and
//! `code = round_half_even(w / scale)` clamped to `[-127, 127]`. Scales belong
//! to the clean checkpoint and are never modified by an attack; only codes are.

mod flips;
mod format;

pub use flips::{apply_flips, diff_bits, BitDiff, BitFlip, BitFlipRecord};
pub use format::{read_flips, write_flips, FLIPS_MAGIC, FLIPS_VERSION};

use indexmap::IndexMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::vit::{ModelParams, ViTConfig};

pub const QMAX: f64 = 127.0;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub codes: Vec<i8>,
    pub scale: f64,
}

impl QuantizedTensor {
    pub fn new(shape: Vec<usize>, codes: Vec<i8>, scale: f64) -> Result<Self> {
        if shape.iter().product::<usize>() != codes.len() {
            return Err(Error::dim("quantized tensor", &shape, &[codes.len()]));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Parameter(format!("scale must be positive and finite, got {scale}")));
        }
        Ok(Self { shape, codes, scale })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// Per-tensor symmetric quantization.
pub fn quantize(w: &Tensor) -> QuantizedTensor {
    let max = w.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if max == 0.0 { 1.0 } else { max / QMAX };
    quantize_with_scale(w, scale)
}

/// Quantizes against a fixed scale, saturating at ±127.
pub fn quantize_with_scale(w: &Tensor, scale: f64) -> QuantizedTensor {
    let codes = w
        .data()
        .iter()
        .map(|&v| (v / scale).round_ties_even().clamp(-QMAX, QMAX) as i8)
        .collect();
    QuantizedTensor {
        shape: w.shape().to_vec(),
        codes,
        scale,
    }
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    Tensor::new(q.shape.clone(), q.codes.iter().map(|&c| f64::from(c) * q.scale).collect())
        .expect("validated shape")
}

/// A whole model stored as int8 codes, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedCheckpoint {
    pub config: ViTConfig,
    pub tensors: IndexMap<String, QuantizedTensor>,
}

impl QuantizedCheckpoint {
    pub fn get(&self, id: &str) -> Result<&QuantizedTensor> {
        self.tensors
            .get(id)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter {id:?}")))
    }

    pub fn element_count(&self) -> usize {
        self.tensors.values().map(QuantizedTensor::len).sum()
    }
}

pub fn quantize_params(params: &ModelParams) -> QuantizedCheckpoint {
    QuantizedCheckpoint {
        config: params.config,
        tensors: params.iter().map(|(id, t)| (id.clone(), quantize(t))).collect(),
    }
}

/// Re-quantizes modified real weights with the clean checkpoint's scales.
pub fn requantize_params(params: &ModelParams, clean: &QuantizedCheckpoint) -> Result<QuantizedCheckpoint> {
    let mut tensors = IndexMap::new();
    for (id, t) in params.iter() {
        let q = clean.get(id)?;
        if q.shape != t.shape() {
            return Err(Error::Incompatible(format!("shape of {id:?} changed")));
        }
        tensors.insert(id.clone(), quantize_with_scale(t, q.scale));
    }
    if tensors.len() != clean.tensors.len() {
        return Err(Error::Incompatible("parameter sets differ".into()));
    }
    Ok(QuantizedCheckpoint {
        config: params.config,
        tensors,
    })
}

pub fn dequantize_params(q: &QuantizedCheckpoint) -> Result<ModelParams> {
    ModelParams::from_tensors(q.config, q.tensors.iter().map(|(id, t)| (id.clone(), dequantize(t))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_zero_tensor() {
        let q = quantize(&Tensor::zeros(&[3]));
        assert_eq!(q.codes, vec![0, 0, 0]);
        assert_eq!(q.scale, 1.0);
    }

    #[test]
    fn unit_extremes() {
        let q = quantize(&Tensor::vector(vec![-1.0, 1.0]));
        assert_eq!(q.scale, 1.0 / 127.0);
        assert_eq!(q.codes, vec![-127, 127]);
    }

    #[test]
    fn ties_round_to_even() {
        let q = quantize_with_scale(&Tensor::vector(vec![0.5, 1.5, 2.5, -0.5]), 1.0);
        assert_eq!(q.codes, vec![0, 2, 2, 0]);
    }

    #[test]
    fn saturates_against_fixed_scale() {
        let q = quantize_with_scale(&Tensor::vector(vec![500.0, -500.0]), 1.0);
        assert_eq!(q.codes, vec![127, -127]);
    }

    #[test]
    fn requantize_keeps_untouched_codes() {
        let p = ModelParams::init(ViTConfig::default(), 3).unwrap();
        let clean = quantize_params(&p);
        let deq = dequantize_params(&clean).unwrap();
        assert_eq!(requantize_params(&deq, &clean).unwrap(), clean);
    }

    proptest! {
        #[test]
        fn half_step_bound_and_idempotence(w in prop::collection::vec(-5.0f64..5.0, 1..64)) {
            let t = Tensor::vector(w);
            let q = quantize(&t);
            let back = dequantize(&q);
            for (a, b) in t.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= q.scale / 2.0 + 1e-15);
            }
            prop_assert_eq!(quantize_with_scale(&back, q.scale), q);
        }
    }
}
