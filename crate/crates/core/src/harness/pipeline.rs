//! End-to-end experiment: train, quantize, trigger, insert, diff, verify,
//! evaluate, then the sweeps.
//!
//! Every random choice draws from `stream_seed(master, stream)`, so a run is a
//! pure function of its config. Sweep entries that coincide with the main
//! setting reuse the main trigger or attack instead of recomputing them.

use super::cifar::{load_cifar10, CifarTransform};
use super::config::{DatasetKind, ExperimentConfig};
use super::dataset::{gen_synthetic_sized, Dataset};
use super::report::{
    AreaRow, DatasetSummary, DefenseRow, ExperimentReport, LambdaRow, ThresholdRow, Timings, TriggerSummary,
};
use crate::attack::{run_attack, AttackOutcome};
use crate::autodiff::Tensor;
use crate::defense::defended_attack;
use crate::error::{Error, Result};
use crate::metrics::{compute_asr, compute_cda, round2};
use crate::quant::{apply_flips, dequantize_params, quantize_params, BitFlipRecord, QuantizedCheckpoint};
use crate::trigger::{generate_area_trigger, generate_trigger, Trigger, TriggerRun, TriggerSpec};
use crate::vit::{train_clean, ModelParams};

/// Independent random streams derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    TrainData = 1,
    TestData = 2,
    AttackSample = 7,
}

pub fn stream_seed(master: u64, stream: Stream) -> u64 {
    master.wrapping_mul(10).wrapping_add(stream as u64)
}

/// Training and held-out splits for the configured dataset.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let m = &cfg.model;
    let loaded = match cfg.dataset {
        DatasetKind::Synthetic => (
            gen_synthetic_sized(m.n_classes, cfg.train_per_class, m.image_side, stream_seed(cfg.seed, Stream::TrainData))?,
            gen_synthetic_sized(m.n_classes, cfg.test_per_class, m.image_side, stream_seed(cfg.seed, Stream::TestData))?,
        ),
        DatasetKind::Cifar10 => {
            let t = CifarTransform {
                side: m.image_side,
                grayscale: cfg.cifar_grayscale,
            };
            let missing = || Error::Config("cifar10 needs cifar_train and cifar_test".into());
            (
                load_cifar10(cfg.cifar_train.as_ref().ok_or_else(missing)?, t)?,
                load_cifar10(cfg.cifar_test.as_ref().ok_or_else(missing)?, t)?,
            )
        }
    };
    Ok(loaded)
}

pub fn train_model(cfg: &ExperimentConfig, train: &Dataset) -> Result<ModelParams> {
    let init = ModelParams::init(cfg.model, stream_seed(cfg.seed, Stream::Init))?;
    train_clean(&init, train, &cfg.train())
}

/// Images drawn without replacement from the held-out split.
pub fn attack_batch(cfg: &ExperimentConfig, test: &Dataset) -> Result<Vec<Tensor>> {
    let idx = test.sample_indices(cfg.attack_batch, stream_seed(cfg.seed, Stream::AttackSample))?;
    Ok(idx.iter().map(|&i| test.images[i].clone()).collect())
}

/// Triggered pixels per channel.
pub fn trigger_pixels(trigger: &TriggerSpec) -> usize {
    trigger.footprint().len() / trigger.config.channels
}

pub fn summarize_trigger(run: &TriggerRun) -> TriggerSummary {
    let t = &run.trigger;
    let trace = &run.loss_trace;
    let steps = trace.len().saturating_sub(1);
    let flat = trace.windows(2).filter(|w| w[1] <= w[0]).count();
    TriggerSummary {
        patches: t.patches.clone(),
        target_class: t.target_class,
        lambda: t.lambda,
        tar: round2(100.0 * trigger_pixels(t) as f64 / (t.config.image_side * t.config.image_side) as f64),
        attention_before: run.attention_before,
        attention_after: run.attention_after,
        loss_first: trace.first().copied().unwrap_or(f64::NAN),
        loss_last: trace.last().copied().unwrap_or(f64::NAN),
        nonincreasing_steps: if steps == 0 { 1.0 } else { flat as f64 / steps as f64 },
    }
}

/// Binary artifacts of the main attack.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub clean: ModelParams,
    pub clean_codes: QuantizedCheckpoint,
    pub trigger: TriggerSpec,
    pub trojan_codes: QuantizedCheckpoint,
    pub flips: BitFlipRecord,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub report: ExperimentReport,
    pub timings: Timings,
    pub artifacts: Artifacts,
}

/// Which optional sections to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sections {
    pub sweeps: bool,
}

impl Default for Sections {
    fn default() -> Self {
        Self { sweeps: true }
    }
}

fn threshold_row(seed: u64, threshold: f64, o: &AttackOutcome) -> ThresholdRow {
    ThresholdRow {
        seed,
        threshold,
        n_p: o.insertion.n_p,
        tpn: o.diff.tpn,
        tbn: o.diff.tbn,
        cda: o.trojan_metrics.cda,
        asr: o.trojan_metrics.asr,
    }
}

pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineRun> {
    run_pipeline_sections(cfg, Sections::default())
}

pub fn run_pipeline_sections(cfg: &ExperimentConfig, sections: Sections) -> Result<PipelineRun> {
    cfg.validate()?;
    let seed = cfg.seed;
    let mut timings = Timings::default();

    let (train, test) = timings.time("load-data", || load_data(cfg)).map_err(|e| e.in_stage("load-data"))?;
    let clean = timings
        .time("train-clean", || train_model(cfg, &train))
        .map_err(|e| e.in_stage("train-clean"))?;
    let clean_codes = quantize_params(&clean);
    let deployed = dequantize_params(&clean_codes)?;
    let clean_accuracy = round2(compute_cda(&clean, &test)?);
    let deployed_accuracy = round2(compute_cda(&deployed, &test)?);

    let batch = attack_batch(cfg, &test).map_err(|e| e.in_stage("gen-trigger"))?;
    let main_run = timings
        .time("gen-trigger", || generate_trigger(&deployed, &batch, &cfg.trigger(cfg.lambda)))
        .map_err(|e| e.in_stage("gen-trigger"))?;
    let trigger = main_run.trigger.clone();
    let pixels = trigger_pixels(&trigger);

    let main = timings
        .time("insert-trojan", || run_attack(&clean, &trigger, pixels, &batch, &test, &cfg.insertion(cfg.threshold)))
        .map_err(|e| e.in_stage("insert-trojan"))?;
    let flips_verified = apply_flips(&main.clean_codes, &main.diff.record).map_err(|e| e.in_stage("flip-apply"))?
        == main.trojan_codes;
    let untouched_mismatches = main.untouched_mismatches()?;

    let mut e_sweep = Vec::new();
    let mut lambda_sweep = Vec::new();
    let mut area_baseline = None;
    let mut defense = None;
    if sections.sweeps {
        timings.time("sweep-threshold", || -> Result<()> {
            for &e in &cfg.e_sweep {
                let row = if e == cfg.threshold {
                    threshold_row(seed, e, &main)
                } else {
                    let o = run_attack(&clean, &trigger, pixels, &batch, &test, &cfg.insertion(e))?;
                    threshold_row(seed, e, &o)
                };
                e_sweep.push(row);
            }
            Ok(())
        })
        .map_err(|e| e.in_stage("sweep"))?;

        let mut zero_lambda: Option<(TriggerSpec, AttackOutcome)> = None;
        timings.time("sweep-lambda", || -> Result<()> {
            for &lambda in &cfg.lambda_sweep {
                let (t, o) = if lambda == cfg.lambda {
                    (trigger.clone(), main.clone())
                } else {
                    let t = generate_trigger(&deployed, &batch, &cfg.trigger(lambda))?.trigger;
                    let o = run_attack(&clean, &t, trigger_pixels(&t), &batch, &test, &cfg.insertion(cfg.threshold))?;
                    (t, o)
                };
                lambda_sweep.push(LambdaRow {
                    seed,
                    lambda,
                    patches: t.patches.clone(),
                    asr_trigger_only: o.clean_metrics.asr,
                    asr: o.trojan_metrics.asr,
                    cda: o.trojan_metrics.cda,
                    n_p: o.insertion.n_p,
                    tpn: o.diff.tpn,
                    tbn: o.diff.tbn,
                });
                if lambda == 0.0 {
                    zero_lambda = Some((t, o));
                }
            }
            Ok(())
        })
        .map_err(|e| e.in_stage("sweep"))?;

        if cfg.area_baseline {
            area_baseline = Some(
                timings
                    .time("sweep-area", || -> Result<AreaRow> {
                        let (_, po) = match zero_lambda.take() {
                            Some(z) => z,
                            None => {
                                let t = generate_trigger(&deployed, &batch, &cfg.trigger(0.0))?.trigger;
                                let o = run_attack(&clean, &t, trigger_pixels(&t), &batch, &test, &cfg.insertion(cfg.threshold))?;
                                (t, o)
                            }
                        };
                        let (area, _) = generate_area_trigger(
                            &deployed,
                            &batch,
                            cfg.area_top,
                            cfg.area_left,
                            cfg.area_side,
                            &cfg.trigger(0.0),
                        )?;
                        let ao = run_attack(&clean, &area, cfg.area_side * cfg.area_side, &batch, &test, &cfg.insertion(cfg.threshold))?;
                        Ok(AreaRow {
                            seed,
                            lambda: 0.0,
                            top: cfg.area_top,
                            left: cfg.area_left,
                            side: cfg.area_side,
                            tar: ao.trojan_metrics.tar,
                            area_asr_trigger_only: ao.clean_metrics.asr,
                            area_asr: ao.trojan_metrics.asr,
                            area_cda: ao.trojan_metrics.cda,
                            patch_asr_trigger_only: po.clean_metrics.asr,
                            patch_asr: po.trojan_metrics.asr,
                            patch_cda: po.trojan_metrics.cda,
                        })
                    })
                    .map_err(|e| e.in_stage("sweep"))?,
            );
        }

        if cfg.defense {
            defense = Some(
                timings
                    .time("defend", || defense_row(cfg, &clean, &trigger, &batch, &test, &main))
                    .map_err(|e| e.in_stage("defend"))?,
            );
        }
    }

    let report = ExperimentReport {
        config: cfg.clone(),
        seed,
        dataset: DatasetSummary {
            provenance: train.provenance,
            n_train: train.len(),
            n_test: test.len(),
            n_attack: batch.len(),
        },
        clean_accuracy,
        deployed_accuracy,
        trigger: summarize_trigger(&main_run),
        initial_target_weights: main.insertion.initial_count,
        n_p: main.insertion.n_p,
        clean: main.clean_metrics.clone(),
        backdoored: main.trojan_metrics.clone(),
        cda_drop: round2(main.clean_metrics.cda - main.trojan_metrics.cda),
        flips_verified,
        untouched_mismatches,
        e_sweep,
        lambda_sweep,
        area_baseline,
        defense,
    };
    Ok(PipelineRun {
        report,
        timings,
        artifacts: Artifacts {
            clean,
            clean_codes: main.clean_codes,
            trigger,
            trojan_codes: main.trojan_codes,
            flips: main.diff.record,
        },
    })
}

/// Attacks the factored deployment with the same trigger, batch and budgets
/// as `plain` and pairs the two outcomes.
pub fn defense_row(
    cfg: &ExperimentConfig,
    clean: &ModelParams,
    trigger: &TriggerSpec,
    batch: &[Tensor],
    test: &Dataset,
    plain: &AttackOutcome,
) -> Result<DefenseRow> {
    let dcfg = cfg.defense_config();
    let (decomposed, factored, d) = defended_attack(
        clean,
        trigger,
        trigger_pixels(trigger),
        batch,
        test,
        &cfg.insertion(cfg.threshold),
        &dcfg,
    )?;
    Ok(DefenseRow {
        seed: cfg.seed,
        factors: dcfg.factors,
        inner_dims: decomposed.factors[..decomposed.factors.len() - 1]
            .iter()
            .map(|f| f.shape()[1])
            .collect(),
        reconstruction_error: decomposed.reconstruction_error,
        cda_plain_real: round2(compute_cda(clean, test)?),
        cda_factored_real: round2(compute_cda(&factored, test)?),
        initial_plain: plain.insertion.initial_count,
        initial_defended: d.insertion.initial_count,
        n_p_plain: plain.insertion.n_p,
        n_p_defended: d.insertion.n_p,
        plain: plain.trojan_metrics.clone(),
        defended: d.trojan_metrics,
    })
}

/// Trigger-only ASR of `trigger` against `params` on `test`.
pub fn trigger_only_asr(params: &ModelParams, test: &Dataset, trigger: &dyn Trigger) -> Result<f64> {
    Ok(round2(compute_asr(params, test, trigger)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.train_per_class = 6;
        c.test_per_class = 4;
        c.train_epochs = 1;
        c.trigger_steps = 3;
        c.attack_batch = 8;
        c.insert_epochs = 2;
        c.e_sweep = vec![0.0, 5e-4];
        c
    }

    #[test]
    fn streams_are_distinct() {
        let s = [Stream::Init, Stream::TrainData, Stream::TestData, Stream::AttackSample];
        for (i, a) in s.iter().enumerate() {
            for b in &s[i + 1..] {
                assert_ne!(stream_seed(3, *a), stream_seed(3, *b));
            }
        }
    }

    #[test]
    fn tiny_pipeline_is_deterministic_and_verified() {
        let cfg = tiny();
        let a = run_pipeline(&cfg).unwrap();
        let b = run_pipeline(&cfg).unwrap();
        assert_eq!(a.report, b.report);
        assert!(a.report.flips_verified);
        assert_eq!(a.report.untouched_mismatches, 0);
        assert_eq!(a.report.e_sweep.len(), 2);
        assert_eq!(a.report.lambda_sweep.len(), 2);
        assert!(a.report.area_baseline.is_some());
        assert!(a.report.defense.is_some());
        assert!(a.report.e_sweep.iter().all(|r| r.seed == cfg.seed));
        assert_eq!(a.artifacts.flips.len(), a.report.backdoored.tbn);
    }

    #[test]
    fn invalid_config_is_rejected_before_work() {
        let mut cfg = tiny();
        cfg.target_class = 99;
        assert!(matches!(run_pipeline(&cfg), Err(Error::Config(_))));
    }
}
