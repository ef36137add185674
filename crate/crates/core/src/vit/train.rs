use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{record_forward, ParamGrad};
use super::ModelParams;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::harness::dataset::Dataset;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Seeds the minibatch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 3e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Cross-entropy loss and its gradient for every parameter, in `params` order.
pub fn loss_and_param_grads(params: &ModelParams, image: &Tensor, label: usize) -> Result<(f64, Vec<Tensor>)> {
    let rec = record_forward(params, image, false, ParamGrad::All)?;
    let mut tape = rec.tape;
    let ce = tape.cross_entropy(rec.logits, label)?;
    let loss = tape.value(ce).data()[0];
    let mut grads = tape.backward(ce)?;
    let out = rec
        .params
        .iter()
        .map(|(_, v)| grads.take(*v).expect("all params require grad"))
        .collect();
    Ok((loss, out))
}

/// Minibatch Adam on cross-entropy. Identical inputs give bitwise-identical
/// parameters; per-image gradients are summed in batch order.
pub fn train_clean(params: &ModelParams, dataset: &Dataset, cfg: &TrainConfig) -> Result<ModelParams> {
    if dataset.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    let mut params = params.clone();
    let ids: Vec<String> = params.ids().cloned().collect();
    let mut m: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    let mut v = m.clone();
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut step = 0i32;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let results = par::map(batch, |&i| loss_and_param_grads(&params, &dataset.images[i], dataset.labels[i]));
            let mut sum: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
            for r in results {
                let (_, grads) = r?;
                for (acc, g) in sum.iter_mut().zip(&grads) {
                    for (a, x) in acc.iter_mut().zip(g.data()) {
                        *a += x;
                    }
                }
            }
            step += 1;
            let scale = 1.0 / batch.len() as f64;
            let c1 = 1.0 - f64::powi(b1, step);
            let c2 = 1.0 - f64::powi(b2, step);
            for (k, id) in ids.iter().enumerate() {
                let w = params.get_mut(id)?.data_mut();
                for j in 0..w.len() {
                    let g = sum[k][j] * scale;
                    m[k][j] = b1 * m[k][j] + (1.0 - b1) * g;
                    v[k][j] = b2 * v[k][j] + (1.0 - b2) * g * g;
                    w[j] -= cfg.lr * (m[k][j] / c1) / ((v[k][j] / c2).sqrt() + eps);
                }
            }
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::gen_synthetic;
    use crate::vit::ViTConfig;

    #[test]
    fn zero_epochs_is_identity() {
        let p = ModelParams::init(ViTConfig::default(), 1).unwrap();
        let d = gen_synthetic(4, 2, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert_eq!(train_clean(&p, &d, &cfg).unwrap(), p);
    }

    #[test]
    fn same_seed_same_params() {
        let p = ModelParams::init(ViTConfig::default(), 1).unwrap();
        let d = gen_synthetic(4, 4, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let a = train_clean(&p, &d, &cfg).unwrap();
        let b = train_clean(&p, &d, &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, p);
    }

    #[test]
    fn empty_dataset_rejected() {
        let p = ModelParams::init(ViTConfig::default(), 1).unwrap();
        let d = Dataset::new(vec![], vec![], 4, crate::harness::dataset::Provenance::Synthetic).unwrap();
        assert!(matches!(train_clean(&p, &d, &TrainConfig::default()), Err(Error::Input(_))));
    }
}
