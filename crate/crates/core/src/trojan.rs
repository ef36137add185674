//! Trojan insertion by tuned-parameter distillation.
//!
//! A small set of weights (the last block's attention output projection and
//! the classification head) is fine-tuned so that triggered images land on the
//! target class while clean predictions stay put. After every epoch, elements
//! whose value moved less than a threshold are dropped from the set for good
//! and reset to their clean values, which keeps the number of modified
//! parameters, and therefore flipped bits, small.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::par;
use crate::trigger::{gradient_surgery_slice, SurgeryMode, Trigger};
use crate::vit::{block_param, head_factor, predict, record_forward, ModelParams, ParamGrad, HEAD_BIAS, HEAD_WEIGHT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InsertionConfig {
    /// Pruning threshold on the per-epoch change of an element.
    pub threshold: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Images per update step.
    pub batch: usize,
    pub surgery: SurgeryMode,
}

impl Default for InsertionConfig {
    fn default() -> Self {
        Self {
            threshold: 5e-4,
            epochs: 40,
            lr: 0.05,
            batch: 16,
            surgery: SurgeryMode::Project,
        }
    }
}

impl InsertionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold >= 0.0) {
            return Err(Error::Parameter(format!("threshold must be >= 0, got {}", self.threshold)));
        }
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Parameter("batch must be >= 1".into()));
        }
        Ok(())
    }
}

/// The tunable elements, their current values and their clean values.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetWeightSet {
    entries: Vec<(String, usize)>,
    values: Vec<f64>,
    baseline: Vec<f64>,
}

impl TargetWeightSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, usize)] {
        &self.entries
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn baseline(&self) -> &[f64] {
        &self.baseline
    }

    /// Distinct tensor identifiers, in first-appearance order.
    pub fn tensor_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for (id, _) in &self.entries {
            if ids.last() != Some(id) && !ids.contains(id) {
                ids.push(id.clone());
            }
        }
        ids
    }

    /// `clean` with the current values written into the tracked elements.
    pub fn apply_to(&self, clean: &ModelParams) -> Result<ModelParams> {
        let mut out = clean.clone();
        for ((id, i), &v) in self.entries.iter().zip(&self.values) {
            let t = out.get_mut(id)?;
            let len = t.len();
            *t.data_mut().get_mut(*i).ok_or(Error::Index {
                what: "target weight element",
                index: *i,
                len,
            })? = v;
        }
        Ok(out)
    }

    fn retain(&mut self, keep: &[bool]) {
        let mut k = keep.iter();
        self.entries.retain(|_| *k.next().expect("mask length"));
        let mut k = keep.iter();
        self.values.retain(|_| *k.next().expect("mask length"));
        let mut k = keep.iter();
        self.baseline.retain(|_| *k.next().expect("mask length"));
    }
}

/// Identifiers of the tensors the attack tunes: the final block's attention
/// output projection and the head (plain or factored) with its bias.
pub fn target_tensor_ids(params: &ModelParams) -> Result<Vec<String>> {
    let layers = params.config.n_layers;
    if layers == 0 {
        return Err(Error::Config("model has no transformer layers".into()));
    }
    let mut ids = vec![
        block_param(layers - 1, "attn.proj.weight"),
        block_param(layers - 1, "attn.proj.bias"),
    ];
    if params.contains(HEAD_WEIGHT) {
        ids.push(HEAD_WEIGHT.to_string());
    } else {
        ids.extend((0..params.head_factor_count()).map(head_factor));
    }
    ids.push(HEAD_BIAS.to_string());
    for id in &ids {
        params.get(id)?;
    }
    Ok(ids)
}

/// Every element of the targeted tensors, with values copied from `params`.
pub fn init_target_weights(params: &ModelParams) -> Result<TargetWeightSet> {
    let mut entries = Vec::new();
    let mut values = Vec::new();
    for id in target_tensor_ids(params)? {
        let t = params.get(&id)?;
        for (i, &v) in t.data().iter().enumerate() {
            entries.push((id.clone(), i));
            values.push(v);
        }
    }
    Ok(TargetWeightSet {
        entries,
        baseline: values.clone(),
        values,
    })
}

#[derive(Debug, Clone)]
pub struct Insertion {
    pub weights: TargetWeightSet,
    pub initial_count: usize,
    /// Final size of the tuned set.
    pub n_p: usize,
    pub model: ModelParams,
    /// Tuned-set size after each epoch.
    pub set_sizes: Vec<usize>,
    /// Mean clean and triggered cross-entropy at the start of each epoch's
    /// first step.
    pub loss_trace: Vec<(f64, f64)>,
}

/// Cross-entropy and its gradient for the listed tensors.
fn tensor_grads(params: &ModelParams, ids: &[String], image: &Tensor, label: usize) -> Result<(f64, Vec<Tensor>)> {
    let rec = record_forward(params, image, false, ParamGrad::Only(ids))?;
    let vars: Vec<_> = ids
        .iter()
        .map(|id| rec.param_var(id).ok_or_else(|| Error::Parameter(format!("missing parameter {id:?}"))))
        .collect::<Result<_>>()?;
    let mut tape = rec.tape;
    let ce = tape.cross_entropy(rec.logits, label)?;
    let loss = tape.value(ce).data()[0];
    let mut grads = tape.backward(ce)?;
    let out = vars.into_iter().map(|v| grads.take(v).expect("requested grad")).collect();
    Ok((loss, out))
}

/// Batch-mean loss and gradient of the tuned elements, in set order.
fn set_gradient(
    model: &ModelParams,
    ids: &[String],
    slots: &[(usize, usize)],
    images: &[Tensor],
    labels: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let pairs: Vec<(&Tensor, usize)> = images.iter().zip(labels.iter().copied()).collect();
    let per_image = par::map(&pairs, |&(im, y)| tensor_grads(model, ids, im, y));
    let mut loss = 0.0;
    let mut grad = vec![0.0; slots.len()];
    for r in per_image {
        let (l, g) = r?;
        loss += l;
        for (acc, &(t, i)) in grad.iter_mut().zip(slots) {
            *acc += g[t].data()[i];
        }
    }
    let inv = 1.0 / images.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((loss * inv, grad))
}

/// Fine-tunes the target weights of `clean` so that `trigger` forces its
/// target class. Clean labels are the clean model's own predictions on
/// `batch`; the clean-loss gradient is the protected one during surgery.
pub fn trojan_insertion(
    clean: &ModelParams,
    trigger: &dyn Trigger,
    batch: &[Tensor],
    cfg: &InsertionConfig,
) -> Result<Insertion> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Input("empty attack batch".into()));
    }
    if trigger.target_class() >= clean.config.n_classes {
        return Err(Error::Parameter(format!(
            "target class {} outside 0..{}",
            trigger.target_class(),
            clean.config.n_classes
        )));
    }
    let labels: Vec<usize> = par::map(batch, |im| predict(clean, im)).into_iter().collect::<Result<_>>()?;
    let triggered: Vec<Tensor> = par::map(batch, |im| trigger.apply(im));
    let target_labels = vec![trigger.target_class(); batch.len()];

    let mut set = init_target_weights(clean)?;
    let initial_count = set.len();
    let ids = set.tensor_ids();
    let mut set_sizes = Vec::with_capacity(cfg.epochs);
    let mut loss_trace = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        if set.is_empty() {
            set_sizes.push(0);
            continue;
        }
        let slots: Vec<(usize, usize)> = set
            .entries
            .iter()
            .map(|(id, i)| (ids.iter().position(|x| x == id).expect("tracked tensor"), *i))
            .collect();
        let start = set.values.clone();
        for (step, chunk) in (0..batch.len()).collect::<Vec<_>>().chunks(cfg.batch).enumerate() {
            let model = set.apply_to(clean)?;
            let (lo, hi) = (chunk[0], chunk[chunk.len() - 1] + 1);
            let (clean_loss, clean_grad) = set_gradient(&model, &ids, &slots, &batch[lo..hi], &labels[lo..hi])?;
            let (trig_loss, trig_grad) =
                set_gradient(&model, &ids, &slots, &triggered[lo..hi], &target_labels[lo..hi])?;
            if step == 0 {
                loss_trace.push((clean_loss, trig_loss));
            }
            let g = gradient_surgery_slice(&clean_grad, &trig_grad, cfg.surgery)?;
            for (v, gi) in set.values.iter_mut().zip(&g) {
                *v -= cfg.lr * gi;
            }
        }
        let keep: Vec<bool> = set
            .values
            .iter()
            .zip(&start)
            .map(|(v, s)| (v - s).abs() >= cfg.threshold)
            .collect();
        for ((v, b), &k) in set.values.iter_mut().zip(&set.baseline).zip(&keep) {
            if !k {
                *v = *b;
            }
        }
        set.retain(&keep);
        set_sizes.push(set.len());
    }

    let model = set.apply_to(clean)?;
    Ok(Insertion {
        n_p: set.len(),
        initial_count,
        weights: set,
        model,
        set_sizes,
        loss_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::gen_synthetic;
    use crate::trigger::{footprint_of, TriggerSpec};
    use crate::vit::ViTConfig;

    fn setup() -> (ModelParams, TriggerSpec, Vec<Tensor>) {
        let cfg = ViTConfig::default();
        let params = ModelParams::init(cfg, 1).unwrap();
        let mut p = Tensor::zeros(&cfg.image_shape());
        for i in footprint_of(&cfg, &[5]).unwrap() {
            p.data_mut()[i] = 0.8;
        }
        let trig = TriggerSpec::new(cfg, vec![5], p, 1, 1.0, vec![0, 1]).unwrap();
        let data = gen_synthetic(4, 3, 2).unwrap();
        (params, trig, data.images)
    }

    #[test]
    fn desk_target_set_size() {
        let p = ModelParams::init(ViTConfig::default(), 0).unwrap();
        let set = init_target_weights(&p).unwrap();
        assert_eq!(set.len(), 128 + 4 + 1024 + 32);
        assert!(set.entries().iter().all(|(id, _)| !id.starts_with("patch_embed")));
        assert_eq!(init_target_weights(&p).unwrap(), set);
    }

    #[test]
    fn factored_head_is_targeted() {
        let p = ModelParams::init(ViTConfig::default(), 0).unwrap();
        let f = p
            .with_head_factors(&[Tensor::identity(32), p.get(HEAD_WEIGHT).unwrap().clone()])
            .unwrap();
        let ids = target_tensor_ids(&f).unwrap();
        assert!(ids.contains(&"head.f0".to_string()) && ids.contains(&"head.f1".to_string()));
        assert_eq!(init_target_weights(&f).unwrap().len(), 1024 + 32 + 1024 + 128 + 4);
    }

    #[test]
    fn zero_threshold_prunes_nothing() {
        let (params, trig, batch) = setup();
        let cfg = InsertionConfig {
            threshold: 0.0,
            epochs: 2,
            ..Default::default()
        };
        let out = trojan_insertion(&params, &trig, &batch, &cfg).unwrap();
        assert_eq!(out.n_p, out.initial_count);
    }

    #[test]
    fn infinite_threshold_restores_clean_model() {
        let (params, trig, batch) = setup();
        let cfg = InsertionConfig {
            threshold: f64::INFINITY,
            epochs: 2,
            ..Default::default()
        };
        let out = trojan_insertion(&params, &trig, &batch, &cfg).unwrap();
        assert_eq!(out.n_p, 0);
        assert_eq!(out.model, params);
    }

    #[test]
    fn untouched_and_restored_elements_are_clean() {
        let (params, trig, batch) = setup();
        let cfg = InsertionConfig {
            threshold: 1e-3,
            epochs: 3,
            ..Default::default()
        };
        let out = trojan_insertion(&params, &trig, &batch, &cfg).unwrap();
        assert!(out.set_sizes.windows(2).all(|w| w[0] >= w[1]));
        let tracked: std::collections::HashSet<_> = out.weights.entries().iter().cloned().collect();
        for (id, t) in params.iter() {
            let got = out.model.get(id).unwrap();
            for (i, (a, b)) in t.data().iter().zip(got.data()).enumerate() {
                if !tracked.contains(&(id.clone(), i)) {
                    assert_eq!(a.to_bits(), b.to_bits(), "{id}[{i}]");
                }
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let (params, trig, batch) = setup();
        assert!(trojan_insertion(&params, &trig, &[], &InsertionConfig::default()).is_err());
        let bad = InsertionConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(trojan_insertion(&params, &trig, &batch, &bad).is_err());
        let bad = InsertionConfig {
            threshold: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
