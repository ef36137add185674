//! Patch-wise trigger generation: salience-ranked patch selection followed by
//! perturbation descent on the attention-target objective with gradient
//! surgery between its two terms.

mod format;
mod generate;
mod loss;
mod salience;
mod surgery;

pub use format::{read_trigger, write_trigger, TRIGGER_MAGIC, TRIGGER_VERSION};
pub use generate::{
    area_block_patches, generate_area_trigger, generate_trigger, trigger_attention_fraction, TriggerConfig,
    TriggerRun,
};
pub use loss::{
    atl_parts, attention_loss, attention_mass, attention_target_loss, record_attention_loss,
    record_layer_attention_loss, AtlParts,
};
pub use salience::{batch_patch_salience, patch_salience_rank, patch_scores, pixel_salience, top_n_mask};
pub use surgery::{gradient_surgery, gradient_surgery_slice, SurgeryMode};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::vit::{patch_pixels, ViTConfig};

/// Anything that can be stamped onto an input to request a target class.
pub trait Trigger: Sync {
    fn target_class(&self) -> usize;

    /// `clamp(x + P⊙M, 0, 1)`.
    fn apply(&self, image: &Tensor) -> Tensor;
}

fn stamp(image: &Tensor, perturbation: &Tensor, footprint: &[usize]) -> Tensor {
    let mut out = image.clone();
    let p = perturbation.data();
    let d = out.data_mut();
    for &i in footprint {
        d[i] = (d[i] + p[i]).clamp(0.0, 1.0);
    }
    out
}

/// A patch-wise trigger: mask over patches, perturbation, target class and
/// the objective settings it was optimized with.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSpec {
    pub config: ViTConfig,
    /// Selected patch indices, ascending.
    pub patches: Vec<usize>,
    /// Image-shaped perturbation, zero outside the selected patches.
    pub perturbation: Tensor,
    pub target_class: usize,
    pub lambda: f64,
    /// Zero-based layers summed in the attention term.
    pub layer_set: Vec<usize>,
    footprint: Vec<usize>,
}

impl TriggerSpec {
    pub fn new(
        config: ViTConfig,
        mut patches: Vec<usize>,
        perturbation: Tensor,
        target_class: usize,
        lambda: f64,
        layer_set: Vec<usize>,
    ) -> Result<Self> {
        config.validate()?;
        patches.sort_unstable();
        let n = config.n_patches();
        if patches.is_empty() || patches.len() > n {
            return Err(Error::Parameter(format!("patch budget {} outside 1..={n}", patches.len())));
        }
        if patches.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Parameter("duplicate trigger patch".into()));
        }
        if perturbation.shape() != config.image_shape() {
            return Err(Error::dim("trigger perturbation", perturbation.shape(), &config.image_shape()));
        }
        if target_class >= config.n_classes {
            return Err(Error::Index {
                what: "target class",
                index: target_class,
                len: config.n_classes,
            });
        }
        if !(lambda >= 0.0) {
            return Err(Error::Parameter(format!("lambda must be nonnegative, got {lambda}")));
        }
        if let Some(&bad) = layer_set.iter().find(|&&l| l >= config.n_layers) {
            return Err(Error::Index {
                what: "layer",
                index: bad,
                len: config.n_layers,
            });
        }
        let footprint = footprint_of(&config, &patches)?;
        let mut inside = vec![false; perturbation.len()];
        for &i in &footprint {
            inside[i] = true;
        }
        if perturbation.data().iter().zip(&inside).any(|(&v, &ins)| !ins && v != 0.0) {
            return Err(Error::Parameter("perturbation is nonzero outside the trigger patches".into()));
        }
        Ok(Self {
            config,
            patches,
            perturbation,
            target_class,
            lambda,
            layer_set,
            footprint,
        })
    }

    /// Patch budget `N`.
    pub fn budget(&self) -> usize {
        self.patches.len()
    }

    /// Binary mask over all `n` patches.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.config.n_patches()];
        for &t in &self.patches {
            m[t] = true;
        }
        m
    }

    /// Image offsets covered by the trigger, patch by patch.
    pub fn footprint(&self) -> &[usize] {
        &self.footprint
    }
}

impl Trigger for TriggerSpec {
    fn target_class(&self) -> usize {
        self.target_class
    }

    fn apply(&self, image: &Tensor) -> Tensor {
        stamp(image, &self.perturbation, &self.footprint)
    }
}

pub(crate) fn footprint_of(config: &ViTConfig, patches: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(patches.len() * config.patch_dim());
    for &t in patches {
        out.extend(patch_pixels(config.channels, config.image_side, config.patch_size, t)?);
    }
    Ok(out)
}

/// Contiguous square pixel block placed without regard to the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaTrigger {
    pub config: ViTConfig,
    pub top: usize,
    pub left: usize,
    pub side: usize,
    pub perturbation: Tensor,
    pub target_class: usize,
    footprint: Vec<usize>,
}

impl AreaTrigger {
    pub fn new(config: ViTConfig, top: usize, left: usize, side: usize, perturbation: Tensor, target_class: usize) -> Result<Self> {
        let footprint = area_footprint(&config, top, left, side)?;
        if perturbation.shape() != config.image_shape() {
            return Err(Error::dim("area perturbation", perturbation.shape(), &config.image_shape()));
        }
        Ok(Self {
            config,
            top,
            left,
            side,
            perturbation,
            target_class,
            footprint,
        })
    }

    pub fn footprint(&self) -> &[usize] {
        &self.footprint
    }
}

impl Trigger for AreaTrigger {
    fn target_class(&self) -> usize {
        self.target_class
    }

    fn apply(&self, image: &Tensor) -> Tensor {
        stamp(image, &self.perturbation, &self.footprint)
    }
}

pub(crate) fn area_footprint(config: &ViTConfig, top: usize, left: usize, side: usize) -> Result<Vec<usize>> {
    let s = config.image_side;
    if side == 0 || top + side > s || left + side > s {
        return Err(Error::Parameter(format!(
            "block at ({top},{left}) of side {side} does not fit a {s}×{s} image"
        )));
    }
    let mut out = Vec::with_capacity(config.channels * side * side);
    for ch in 0..config.channels {
        for y in top..top + side {
            for x in left..left + side {
                out.push(ch * s * s + y * s + x);
            }
        }
    }
    Ok(out)
}
