//! Browser bindings: train a tiny model on synthetic gratings, inspect patch
//! salience, optimize a one-patch trigger and compare attention maps.
//!
//! [`Lab`] holds all state. Its `*_inner` methods are plain Rust so they can
//! be tested natively; the exported methods wrap errors for JavaScript.

use patchtroj::autodiff::Tensor;
use patchtroj::harness::dataset::{gen_synthetic, Dataset};
use patchtroj::trigger::{batch_patch_salience, generate_trigger, patch_scores, Trigger, TriggerConfig, TriggerSpec};
use patchtroj::vit::{forward, predict, train_clean, ModelParams, TrainConfig, ViTConfig};
use wasm_bindgen::prelude::*;

const TRAIN_PER_CLASS: usize = 40;
const TEST_PER_CLASS: usize = 12;
const TRIGGER_BATCH: usize = 16;

#[wasm_bindgen]
pub struct Lab {
    params: ModelParams,
    train: Dataset,
    test: Dataset,
    seed: u64,
    trigger: Option<TriggerSpec>,
}

fn js(e: patchtroj::Error) -> JsError {
    JsError::new(&e.to_string())
}

impl Lab {
    pub fn create(seed: u64) -> patchtroj::Result<Self> {
        let cfg = ViTConfig::default();
        Ok(Self {
            params: ModelParams::init(cfg, seed)?,
            train: gen_synthetic(cfg.n_classes, TRAIN_PER_CLASS, seed.wrapping_add(1))?,
            test: gen_synthetic(cfg.n_classes, TEST_PER_CLASS, seed.wrapping_add(2))?,
            seed,
            trigger: None,
        })
    }

    fn image(&self, index: usize) -> patchtroj::Result<&Tensor> {
        self.test.images.get(index).ok_or(patchtroj::Error::Index {
            what: "test image",
            index,
            len: self.test.len(),
        })
    }

    fn shown(&self, index: usize, triggered: bool) -> patchtroj::Result<Tensor> {
        let x = self.image(index)?;
        Ok(match (&self.trigger, triggered) {
            (Some(t), true) => t.apply(x),
            _ => x.clone(),
        })
    }

    /// Trains for `epochs` more epochs; returns held-out accuracy in percent.
    pub fn train_inner(&mut self, epochs: usize) -> patchtroj::Result<f64> {
        let cfg = TrainConfig {
            epochs,
            seed: self.seed,
            ..TrainConfig::default()
        };
        self.params = train_clean(&self.params, &self.train, &cfg)?;
        self.trigger = None;
        let hits = self
            .test
            .images
            .iter()
            .zip(&self.test.labels)
            .map(|(x, &y)| predict(&self.params, x).map(|p| usize::from(p == y)))
            .sum::<patchtroj::Result<usize>>()?;
        Ok(100.0 * hits as f64 / self.test.len() as f64)
    }

    /// Per-patch salience toward `target`, summed over the first test images.
    pub fn salience_inner(&self, target: usize) -> patchtroj::Result<Vec<f64>> {
        let batch = &self.test.images[..TRIGGER_BATCH.min(self.test.len())];
        patch_scores(&batch_patch_salience(&self.params, batch, target)?)
    }

    /// Optimizes a patch trigger; returns the chosen patch indices.
    pub fn trigger_inner(&mut self, target: usize, budget: usize, lambda: f64, steps: usize) -> patchtroj::Result<Vec<usize>> {
        let batch = &self.test.images[..TRIGGER_BATCH.min(self.test.len())];
        let cfg = TriggerConfig {
            budget,
            target_class: target,
            lambda,
            steps,
            ..TriggerConfig::default()
        };
        let run = generate_trigger(&self.params, batch, &cfg)?;
        let patches = run.trigger.patches.clone();
        self.trigger = Some(run.trigger);
        Ok(patches)
    }

    /// Class-token attention to each patch in the last layer, averaged over heads.
    pub fn attention_inner(&self, index: usize, triggered: bool) -> patchtroj::Result<Vec<f64>> {
        let x = self.shown(index, triggered)?;
        let (_, record) = forward(&self.params, &x, true)?;
        let record = record.expect("attention captured");
        let heads = record.layers.last().expect("at least one layer");
        let n = self.params.config.n_patches();
        let mut out = vec![0.0; n];
        for h in heads {
            for (t, o) in out.iter_mut().enumerate() {
                *o += h.data()[t + 1] / heads.len() as f64;
            }
        }
        Ok(out)
    }

    pub fn predict_inner(&self, index: usize, triggered: bool) -> patchtroj::Result<usize> {
        predict(&self.params, &self.shown(index, triggered)?)
    }
}

#[wasm_bindgen]
impl Lab {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Lab, JsError> {
        Lab::create(u64::from(seed)).map_err(js)
    }

    pub fn side(&self) -> usize {
        self.params.config.image_side
    }

    pub fn grid(&self) -> usize {
        self.params.config.grid()
    }

    pub fn n_classes(&self) -> usize {
        self.params.config.n_classes
    }

    pub fn n_images(&self) -> usize {
        self.test.len()
    }

    pub fn label(&self, index: usize) -> Result<usize, JsError> {
        self.image(index).map_err(js)?;
        Ok(self.test.labels[index])
    }

    /// Grayscale pixels in `[0, 1]`, row-major.
    pub fn pixels(&self, index: usize, triggered: bool) -> Result<Vec<f64>, JsError> {
        Ok(self.shown(index, triggered).map_err(js)?.into_data())
    }

    pub fn train(&mut self, epochs: usize) -> Result<f64, JsError> {
        self.train_inner(epochs).map_err(js)
    }

    pub fn salience(&self, target: usize) -> Result<Vec<f64>, JsError> {
        self.salience_inner(target).map_err(js)
    }

    pub fn optimize_trigger(&mut self, target: usize, budget: usize, lambda: f64, steps: usize) -> Result<Vec<usize>, JsError> {
        self.trigger_inner(target, budget, lambda, steps).map_err(js)
    }

    pub fn attention(&self, index: usize, triggered: bool) -> Result<Vec<f64>, JsError> {
        self.attention_inner(index, triggered).map_err(js)
    }

    pub fn predict(&self, index: usize, triggered: bool) -> Result<usize, JsError> {
        self.predict_inner(index, triggered).map_err(js)
    }

    /// Percentage of the image covered by the current trigger.
    pub fn tar(&self) -> f64 {
        self.trigger.as_ref().map_or(0.0, |t| {
            let side = self.params.config.image_side;
            100.0 * (t.footprint().len() / self.params.config.channels) as f64 / (side * side) as f64
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn workflow_runs_natively() {
        let mut lab = Lab::create(3).unwrap();
        let acc = lab.train_inner(2).unwrap();
        assert!((0.0..=100.0).contains(&acc));
        let sal = lab.salience_inner(0).unwrap();
        assert_eq!(sal.len(), 16);
        assert!(sal.iter().all(|s| *s >= 0.0));
        let patches = lab.trigger_inner(0, 1, 1.0, 5).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(lab.tar(), 6.25);
        let before = lab.attention_inner(0, false).unwrap();
        let after = lab.attention_inner(0, true).unwrap();
        assert_eq!(before.len(), 16);
        assert!(before.iter().sum::<f64>() < 1.0 && after.iter().sum::<f64>() < 1.0);
        assert!(lab.predict_inner(0, true).unwrap() < 4);
    }

    #[test]
    fn retraining_clears_the_trigger() {
        let mut lab = Lab::create(1).unwrap();
        lab.trigger_inner(1, 1, 1.0, 2).unwrap();
        lab.train_inner(1).unwrap();
        assert_eq!(lab.tar(), 0.0);
        assert!(lab.attention_inner(999, false).is_err());
    }
}
