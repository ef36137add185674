//! One complete insertion against a deployed 8-bit model: quantize, tune,
//! re-quantize with the clean scales, diff the codes, replay the flips and
//! measure both models.

use std::collections::HashSet;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::harness::dataset::Dataset;
use crate::metrics::{evaluate, MetricsReport};
use crate::quant::{apply_flips, dequantize_params, diff_bits, quantize_params, requantize_params, BitDiff, QuantizedCheckpoint};
use crate::trigger::Trigger;
use crate::trojan::{trojan_insertion, Insertion, InsertionConfig};
use crate::vit::ModelParams;

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub clean_codes: QuantizedCheckpoint,
    pub trojan_codes: QuantizedCheckpoint,
    pub insertion: Insertion,
    pub diff: BitDiff,
    /// Deployed clean model, with the trigger applied for ASR.
    pub clean_metrics: MetricsReport,
    pub trojan_metrics: MetricsReport,
}

impl AttackOutcome {
    /// Elements outside the final tuned set whose code or real value differs
    /// between the clean and the trojaned deployment. Zero when the insertion
    /// kept its promise.
    pub fn untouched_mismatches(&self) -> Result<usize> {
        let tracked: HashSet<(&str, usize)> = self
            .insertion
            .weights
            .entries()
            .iter()
            .map(|(id, i)| (id.as_str(), *i))
            .collect();
        let deployed = dequantize_params(&self.clean_codes)?;
        let mut bad = 0;
        for ((id, clean), trojan) in self.clean_codes.tensors.iter().zip(self.trojan_codes.tensors.values()) {
            let real_clean = deployed.get(id)?.data();
            let real_trojan = self.insertion.model.get(id)?.data();
            for i in 0..clean.codes.len() {
                if tracked.contains(&(id.as_str(), i)) {
                    continue;
                }
                if clean.codes[i] != trojan.codes[i] || real_clean[i].to_bits() != real_trojan[i].to_bits() {
                    bad += 1;
                }
            }
        }
        Ok(bad)
    }
}

/// Attacks the 8-bit deployment of `params`. The flip record is replayed on the
/// clean codes and must reproduce the trojaned checkpoint bit for bit.
pub fn run_attack(
    params: &ModelParams,
    trigger: &dyn Trigger,
    trigger_pixels: usize,
    batch: &[Tensor],
    eval: &Dataset,
    cfg: &InsertionConfig,
) -> Result<AttackOutcome> {
    let clean_codes = quantize_params(params);
    let deployed = dequantize_params(&clean_codes)?;
    let insertion = trojan_insertion(&deployed, trigger, batch, cfg).map_err(|e| e.in_stage("insert-trojan"))?;
    let trojan_codes = requantize_params(&insertion.model, &clean_codes)?;
    let diff = diff_bits(&clean_codes, &trojan_codes)?;
    let replayed = apply_flips(&clean_codes, &diff.record).map_err(|e| e.in_stage("flip-apply"))?;
    if replayed != trojan_codes {
        return Err(Error::Incompatible(
            "flip record does not reproduce the trojaned checkpoint".into(),
        )
        .in_stage("flip-apply"));
    }
    let trojaned = dequantize_params(&trojan_codes)?;
    let clean_metrics = evaluate(&deployed, eval, trigger, trigger_pixels)?;
    let mut trojan_metrics = evaluate(&trojaned, eval, trigger, trigger_pixels)?;
    trojan_metrics.tpn = diff.tpn;
    trojan_metrics.tbn = diff.tbn;
    Ok(AttackOutcome {
        clean_codes,
        trojan_codes,
        insertion,
        diff,
        clean_metrics,
        trojan_metrics,
    })
}
