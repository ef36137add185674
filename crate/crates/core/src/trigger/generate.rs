use serde::{Deserialize, Serialize};

use super::loss::{atl_parts, attention_mass};
use super::salience::{batch_patch_salience, patch_scores, top_n_mask};
use super::surgery::{gradient_surgery_slice, SurgeryMode};
use super::{area_footprint, footprint_of, stamp, AreaTrigger, Trigger, TriggerSpec};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::par;
use crate::vit::{forward, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerConfig {
    /// Patch budget `N`.
    pub budget: usize,
    pub target_class: usize,
    pub lambda: f64,
    /// Zero-based layers in the attention term; `None` means all layers.
    pub layer_set: Option<Vec<usize>>,
    pub steps: usize,
    pub lr: f64,
    pub surgery: SurgeryMode,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        Self {
            budget: 1,
            target_class: 0,
            lambda: 1.0,
            layer_set: None,
            steps: 300,
            lr: 0.05,
            surgery: SurgeryMode::Project,
        }
    }
}

impl TriggerConfig {
    pub fn layers(&self, n_layers: usize) -> Vec<usize> {
        self.layer_set.clone().unwrap_or_else(|| (0..n_layers).collect())
    }
}

/// A generated trigger plus the optimization diagnostics.
#[derive(Debug, Clone)]
pub struct TriggerRun {
    pub trigger: TriggerSpec,
    /// Batch-averaged salience per patch at `P = 0`.
    pub patch_scores: Vec<f64>,
    /// Batch-averaged attention-target loss before each step and after the last.
    pub loss_trace: Vec<f64>,
    /// Mean attention fraction on the trigger patches before and after optimization.
    pub attention_before: f64,
    pub attention_after: f64,
}

/// Salience-ranked mask (fixed once, at `P = 0`), then `steps` rounds of
/// gradient descent on `P` restricted to the selected patches.
pub fn generate_trigger(params: &ModelParams, batch: &[Tensor], cfg: &TriggerConfig) -> Result<TriggerRun> {
    let config = params.config;
    if batch.is_empty() {
        return Err(Error::Input("empty sample batch".into()));
    }
    if cfg.budget == 0 || cfg.budget > config.n_patches() {
        return Err(Error::Parameter(format!(
            "patch budget {} outside 1..={}",
            cfg.budget,
            config.n_patches()
        )));
    }
    let layers = cfg.layers(config.n_layers);
    let salience = batch_patch_salience(params, batch, cfg.target_class)?;
    let scores = patch_scores(&salience)?;
    let mask = top_n_mask(&scores, cfg.budget)?;
    let patches: Vec<usize> = (0..mask.len()).filter(|&t| mask[t]).collect();
    let footprint = footprint_of(&config, &patches)?;

    let (perturbation, loss_trace) = optimize_perturbation(params, batch, &footprint, &patches, &layers, cfg)?;
    let zero = TriggerSpec::new(
        config,
        patches.clone(),
        Tensor::zeros(&config.image_shape()),
        cfg.target_class,
        cfg.lambda,
        layers.clone(),
    )?;
    let trigger = TriggerSpec::new(config, patches.clone(), perturbation, cfg.target_class, cfg.lambda, layers.clone())?;
    let attention_before = trigger_attention_fraction(params, batch, &zero, &patches, &layers)?;
    let attention_after = trigger_attention_fraction(params, batch, &trigger, &patches, &layers)?;
    Ok(TriggerRun {
        trigger,
        patch_scores: scores,
        loss_trace,
        attention_before,
        attention_after,
    })
}

/// Patches touched by a pixel block.
pub fn area_block_patches(params: &ModelParams, top: usize, left: usize, side: usize) -> Vec<usize> {
    let p = params.config.patch_size;
    let grid = params.config.grid();
    let mut out = Vec::new();
    for pr in top / p..=(top + side - 1) / p {
        for pc in left / p..=(left + side - 1) / p {
            out.push(pr * grid + pc);
        }
    }
    out
}

/// Same optimizer on a contiguous pixel block instead of salience-picked
/// patches. The attention term targets every patch the block touches.
pub fn generate_area_trigger(
    params: &ModelParams,
    batch: &[Tensor],
    top: usize,
    left: usize,
    side: usize,
    cfg: &TriggerConfig,
) -> Result<(AreaTrigger, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Input("empty sample batch".into()));
    }
    let footprint = area_footprint(&params.config, top, left, side)?;
    let patches = area_block_patches(params, top, left, side);
    let layers = cfg.layers(params.config.n_layers);
    let (perturbation, trace) = optimize_perturbation(params, batch, &footprint, &patches, &layers, cfg)?;
    let trigger = AreaTrigger::new(params.config, top, left, side, perturbation, cfg.target_class)?;
    Ok((trigger, trace))
}

fn optimize_perturbation(
    params: &ModelParams,
    batch: &[Tensor],
    footprint: &[usize],
    patches: &[usize],
    layers: &[usize],
    cfg: &TriggerConfig,
) -> Result<(Tensor, Vec<f64>)> {
    let mut p = Tensor::zeros(&params.config.image_shape());
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let inv = 1.0 / batch.len() as f64;
    for step in 0..=cfg.steps {
        let last = step == cfg.steps;
        let results = par::map(batch, |x| {
            let xhat = stamp(x, &p, footprint);
            atl_parts(params, &xhat, cfg.target_class, patches, layers, !last)
        });
        let mut loss = 0.0;
        let mut g_ce = vec![0.0; footprint.len()];
        let mut g_att = vec![0.0; footprint.len()];
        for (x, r) in batch.iter().zip(results) {
            let parts = r?;
            loss += parts.ce + cfg.lambda * parts.attention;
            if last {
                continue;
            }
            let (gc, ga) = (parts.ce_grad.expect("grad"), parts.attention_grad.expect("grad"));
            for (k, &i) in footprint.iter().enumerate() {
                let raw = x.data()[i] + p.data()[i];
                if (0.0..=1.0).contains(&raw) {
                    g_ce[k] += gc.data()[i];
                    g_att[k] += ga.data()[i];
                }
            }
        }
        trace.push(loss * inv);
        if last {
            break;
        }
        for k in 0..footprint.len() {
            g_ce[k] *= inv;
            g_att[k] *= inv * cfg.lambda;
        }
        let step_dir = gradient_surgery_slice(&g_ce, &g_att, cfg.surgery)?;
        let pd = p.data_mut();
        for (k, &i) in footprint.iter().enumerate() {
            pd[i] = (pd[i] - cfg.lr * step_dir[k]).clamp(-1.0, 1.0);
        }
    }
    Ok((p, trace))
}

/// Mean fraction of attention mass that lands on `patches` after stamping
/// `trigger`, averaged over images, the given layers and all heads.
pub fn trigger_attention_fraction(
    params: &ModelParams,
    images: &[Tensor],
    trigger: &dyn Trigger,
    patches: &[usize],
    layers: &[usize],
) -> Result<f64> {
    if images.is_empty() || layers.is_empty() {
        return Err(Error::Input("attention fraction needs images and layers".into()));
    }
    let cfg = params.config;
    let norm = (layers.len() * cfg.n_heads * cfg.seq_len()) as f64;
    let per_image = par::map(images, |x| -> Result<f64> {
        let (_, rec) = forward(params, &trigger.apply(x), true)?;
        let rec = rec.expect("captured");
        let mut total = 0.0;
        for &l in layers {
            total += attention_mass(&rec, patches, l)?;
        }
        Ok(total / norm)
    });
    let mut sum = 0.0;
    for v in per_image {
        sum += v?;
    }
    Ok(sum / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::ViTConfig;

    fn batch() -> Vec<Tensor> {
        (0..3)
            .map(|k| {
                Tensor::new(
                    vec![1, 16, 16],
                    (0..256).map(|i| (((i + 31 * k) * 17) % 29) as f64 / 29.0).collect(),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_steps_gives_zero_perturbation() {
        let p = ModelParams::init(ViTConfig::default(), 2).unwrap();
        let cfg = TriggerConfig {
            steps: 0,
            budget: 2,
            ..TriggerConfig::default()
        };
        let run = generate_trigger(&p, &batch(), &cfg).unwrap();
        assert!(run.trigger.perturbation.data().iter().all(|&v| v == 0.0));
        assert_eq!(run.trigger.budget(), 2);
        assert_eq!(run.loss_trace.len(), 1);
        let b = batch();
        assert_eq!(run.trigger.apply(&b[0]), b[0]);
    }

    #[test]
    fn budget_and_batch_errors() {
        let p = ModelParams::init(ViTConfig::default(), 2).unwrap();
        let cfg = TriggerConfig {
            budget: 17,
            ..TriggerConfig::default()
        };
        assert!(matches!(generate_trigger(&p, &batch(), &cfg), Err(Error::Parameter(_))));
        assert!(matches!(generate_trigger(&p, &[], &TriggerConfig::default()), Err(Error::Input(_))));
    }

    #[test]
    fn few_steps_keep_mask_invariants() {
        let p = ModelParams::init(ViTConfig::default(), 2).unwrap();
        let cfg = TriggerConfig {
            steps: 5,
            budget: 3,
            lr: 0.5,
            ..TriggerConfig::default()
        };
        let run = generate_trigger(&p, &batch(), &cfg).unwrap();
        let t = &run.trigger;
        assert_eq!(t.mask().iter().filter(|&&m| m).count(), 3);
        let fp = t.footprint();
        for (i, &v) in t.perturbation.data().iter().enumerate() {
            if !fp.contains(&i) {
                assert_eq!(v, 0.0);
            }
        }
        assert!(t.perturbation.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn area_patches_straddle_grid() {
        let p = ModelParams::init(ViTConfig::default(), 2).unwrap();
        assert_eq!(area_block_patches(&p, 10, 10, 4), vec![10, 11, 14, 15]);
        assert_eq!(area_block_patches(&p, 12, 12, 4), vec![15]);
    }
}
