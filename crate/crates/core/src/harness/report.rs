//! Report rows. Every number in an [`ExperimentReport`] comes from a metrics
//! call; wall-clock timings live in [`Timings`] so that reports of identical
//! runs compare equal.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::dataset::Provenance;
use crate::metrics::MetricsReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub provenance: Provenance,
    pub n_train: usize,
    pub n_test: usize,
    pub n_attack: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerSummary {
    pub patches: Vec<usize>,
    pub target_class: usize,
    pub lambda: f64,
    pub tar: f64,
    /// Mean attention fraction on the trigger patches, before and after.
    pub attention_before: f64,
    pub attention_after: f64,
    pub loss_first: f64,
    pub loss_last: f64,
    /// Share of optimization steps whose batch loss did not increase.
    pub nonincreasing_steps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub seed: u64,
    pub threshold: f64,
    pub n_p: usize,
    pub tpn: usize,
    pub tbn: usize,
    pub cda: f64,
    pub asr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub seed: u64,
    pub lambda: f64,
    pub patches: Vec<usize>,
    /// ASR of the trigger on the clean deployment.
    pub asr_trigger_only: f64,
    pub asr: f64,
    pub cda: f64,
    pub n_p: usize,
    pub tpn: usize,
    pub tbn: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaRow {
    pub seed: u64,
    /// Both triggers are optimized with this attention weight.
    pub lambda: f64,
    pub top: usize,
    pub left: usize,
    pub side: usize,
    pub tar: f64,
    pub area_asr_trigger_only: f64,
    pub area_asr: f64,
    pub area_cda: f64,
    pub patch_asr_trigger_only: f64,
    pub patch_asr: f64,
    pub patch_cda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseRow {
    pub seed: u64,
    pub factors: usize,
    pub inner_dims: Vec<usize>,
    pub reconstruction_error: f64,
    /// Real-valued clean accuracy with the plain and the factored head.
    pub cda_plain_real: f64,
    pub cda_factored_real: f64,
    pub initial_plain: usize,
    pub initial_defended: usize,
    pub n_p_plain: usize,
    pub n_p_defended: usize,
    pub plain: MetricsReport,
    pub defended: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub dataset: DatasetSummary,
    /// Held-out accuracy of the real-valued and the 8-bit clean model.
    pub clean_accuracy: f64,
    pub deployed_accuracy: f64,
    pub trigger: TriggerSummary,
    pub initial_target_weights: usize,
    pub n_p: usize,
    /// Clean 8-bit deployment with the trigger applied.
    pub clean: MetricsReport,
    pub backdoored: MetricsReport,
    pub cda_drop: f64,
    pub flips_verified: bool,
    pub untouched_mismatches: usize,
    pub e_sweep: Vec<ThresholdRow>,
    pub lambda_sweep: Vec<LambdaRow>,
    pub area_baseline: Option<AreaRow>,
    pub defense: Option<DefenseRow>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stages: Vec<StageTiming>,
}

impl Timings {
    pub fn time<R>(&mut self, stage: &str, f: impl FnOnce() -> R) -> R {
        let start = Instant::now();
        let out = f();
        self.stages.push(StageTiming {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }

    pub fn total(&self) -> f64 {
        self.stages.iter().map(|s| s.seconds).sum()
    }
}
