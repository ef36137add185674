//! Clean data accuracy, attack success rate, trigger area rate and the
//! tuned parameter/bit counts, gathered into one report row.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::dataset::Dataset;
use crate::par;
use crate::trigger::Trigger;
use crate::vit::{predict, ModelParams};

/// One evaluated model/trigger combination. Percentages carry two decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cda: f64,
    /// Target-class images excluded from the denominator.
    pub asr: f64,
    /// Every image counted.
    pub asr_inclusive: f64,
    pub tar: f64,
    pub tpn: usize,
    pub tbn: usize,
    pub n_eval: usize,
    pub target_class: usize,
}

pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn percent(hits: usize, total: usize) -> f64 {
    100.0 * hits as f64 / total as f64
}

fn predictions(params: &ModelParams, images: &[crate::autodiff::Tensor]) -> Result<Vec<usize>> {
    par::map(images, |im| predict(params, im)).into_iter().collect()
}

/// Accuracy (%) on trigger-free images.
pub fn compute_cda(params: &ModelParams, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let preds = predictions(params, &dataset.images)?;
    let hits = preds.iter().zip(&dataset.labels).filter(|(p, l)| p == l).count();
    Ok(percent(hits, dataset.len()))
}

fn triggered_hits(params: &ModelParams, dataset: &Dataset, trigger: &dyn Trigger, skip_target: bool) -> Result<(usize, usize)> {
    let target = trigger.target_class();
    let eligible: Vec<usize> = (0..dataset.len())
        .filter(|&i| !skip_target || dataset.labels[i] != target)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Input("no images eligible for attack success rate".into()));
    }
    let preds: Vec<Result<usize>> = par::map(&eligible, |&i| predict(params, &trigger.apply(&dataset.images[i])));
    let mut hits = 0;
    for p in preds {
        if p? == target {
            hits += 1;
        }
    }
    Ok((hits, eligible.len()))
}

/// Share (%) of triggered non-target-class images classified as the target.
pub fn compute_asr(params: &ModelParams, dataset: &Dataset, trigger: &dyn Trigger) -> Result<f64> {
    let (hits, total) = triggered_hits(params, dataset, trigger, true)?;
    Ok(percent(hits, total))
}

/// Like [`compute_asr`] but counting target-class images too.
pub fn compute_asr_inclusive(params: &ModelParams, dataset: &Dataset, trigger: &dyn Trigger) -> Result<f64> {
    let (hits, total) = triggered_hits(params, dataset, trigger, false)?;
    Ok(percent(hits, total))
}

/// Trigger area (%) of `n_patches` square patches on a square image.
pub fn compute_tar(n_patches: usize, patch_size: usize, image_side: usize) -> f64 {
    100.0 * (n_patches * patch_size * patch_size) as f64 / (image_side * image_side) as f64
}

/// CDA/ASR/TAR for one model and trigger; TPN/TBN are filled by the caller.
pub fn evaluate(
    params: &ModelParams,
    dataset: &Dataset,
    trigger: &dyn Trigger,
    trigger_pixels_per_channel: usize,
) -> Result<MetricsReport> {
    let cfg = params.config;
    let side = cfg.image_side;
    Ok(MetricsReport {
        cda: round2(compute_cda(params, dataset)?),
        asr: round2(compute_asr(params, dataset, trigger)?),
        asr_inclusive: round2(compute_asr_inclusive(params, dataset, trigger)?),
        tar: round2(100.0 * trigger_pixels_per_channel as f64 / (side * side) as f64),
        tpn: 0,
        tbn: 0,
        n_eval: dataset.len(),
        target_class: trigger.target_class(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::harness::dataset::{gen_synthetic, Provenance};
    use crate::vit::{ViTConfig, HEAD_BIAS, HEAD_WEIGHT};

    struct NoTrigger(usize);
    impl Trigger for NoTrigger {
        fn target_class(&self) -> usize {
            self.0
        }
        fn apply(&self, image: &Tensor) -> Tensor {
            image.clone()
        }
    }

    fn constant_model(class: usize) -> ModelParams {
        let mut p = ModelParams::init(ViTConfig::default(), 0).unwrap();
        p.get_mut(HEAD_WEIGHT).unwrap().data_mut().fill(0.0);
        let b = p.get_mut(HEAD_BIAS).unwrap().data_mut();
        b.fill(0.0);
        b[class] = 5.0;
        p
    }

    #[test]
    fn tar_values() {
        let expected = [(1, 0.51), (3, 1.53), (5, 2.55), (7, 3.57), (9, 4.59)];
        for (n, tar) in expected {
            assert!((compute_tar(n, 16, 224) - tar).abs() < 0.01, "N={n}");
        }
        assert_eq!(compute_tar(0, 16, 224), 0.0);
        assert_eq!(compute_tar(1, 4, 16), 6.25);
    }

    #[test]
    fn constant_model_on_balanced_set() {
        let d = gen_synthetic(4, 5, 3).unwrap();
        let p = constant_model(2);
        assert_eq!(compute_cda(&p, &d).unwrap(), 25.0);
        assert_eq!(compute_asr(&p, &d, &NoTrigger(2)).unwrap(), 100.0);
        assert_eq!(compute_asr(&p, &d, &NoTrigger(1)).unwrap(), 0.0);
        assert_eq!(compute_asr_inclusive(&p, &d, &NoTrigger(2)).unwrap(), 100.0);
    }

    #[test]
    fn perfect_labels_give_full_accuracy() {
        let p = constant_model(0);
        let d = gen_synthetic(4, 3, 3).unwrap();
        let keep: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == 0).collect();
        assert_eq!(compute_cda(&p, &d.subset(&keep)).unwrap(), 100.0);
    }

    #[test]
    fn empty_sets_rejected() {
        let p = constant_model(0);
        let empty = Dataset::new(vec![], vec![], 4, Provenance::Synthetic).unwrap();
        assert!(compute_cda(&p, &empty).is_err());
        let d = gen_synthetic(1, 3, 3).unwrap();
        assert!(compute_asr(&p, &d, &NoTrigger(0)).is_err());
    }

    #[test]
    fn permutation_invariant() {
        let p = ModelParams::init(ViTConfig::default(), 5).unwrap();
        let d = gen_synthetic(4, 4, 3).unwrap();
        let rev: Vec<usize> = (0..d.len()).rev().collect();
        assert_eq!(compute_cda(&p, &d).unwrap(), compute_cda(&p, &d.subset(&rev)).unwrap());
    }
}
