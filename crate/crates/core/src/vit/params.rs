use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ViTConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Identifier of the classification-head weight matrix (`embed_dim × n_classes`).
pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

/// Identifier of the `i`-th factor of a decomposed head.
pub fn head_factor(i: usize) -> String {
    format!("head.f{i}")
}

pub fn block_param(layer: usize, name: &str) -> String {
    format!("blocks.{layer}.{name}")
}

/// All trainable tensors of the model, keyed by stable identifiers in
/// creation order. Linear weights are stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ViTConfig,
    tensors: IndexMap<String, Tensor>,
}

impl ModelParams {
    pub fn from_tensors(config: ViTConfig, tensors: IndexMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, tensors })
    }

    /// Seeded initialization: linear weights `N(0, 1/fan_in)`, embeddings
    /// `N(0, 0.02²)`, biases zero, layer-norm gains one.
    pub fn init(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = IndexMap::new();
        let d = config.embed_dim;

        let mut normal = |shape: &[usize], std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            let len = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..len).map(|_| dist.sample(&mut rng)).collect())
                .expect("shape")
        };
        let linear = |tensors: &mut IndexMap<String, Tensor>,
                      normal: &mut dyn FnMut(&[usize], f64) -> Tensor,
                      name: String,
                      fan_in: usize,
                      fan_out: usize| {
            let w = normal(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt());
            tensors.insert(format!("{name}.weight"), w);
            tensors.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        };

        linear(&mut tensors, &mut normal, "patch_embed".into(), config.patch_dim(), d);
        tensors.insert("cls_token".into(), normal(&[1, d], 0.02));
        tensors.insert("pos_embed".into(), normal(&[config.seq_len(), d], 0.02));
        for l in 0..config.n_layers {
            tensors.insert(block_param(l, "norm1.weight"), Tensor::full(&[d], 1.0));
            tensors.insert(block_param(l, "norm1.bias"), Tensor::zeros(&[d]));
            for proj in ["attn.q", "attn.k", "attn.v", "attn.proj"] {
                linear(&mut tensors, &mut normal, block_param(l, proj), d, d);
            }
            tensors.insert(block_param(l, "norm2.weight"), Tensor::full(&[d], 1.0));
            tensors.insert(block_param(l, "norm2.bias"), Tensor::zeros(&[d]));
            linear(&mut tensors, &mut normal, block_param(l, "mlp.fc1"), d, config.mlp_dim);
            linear(&mut tensors, &mut normal, block_param(l, "mlp.fc2"), config.mlp_dim, d);
        }
        tensors.insert("norm.weight".into(), Tensor::full(&[d], 1.0));
        tensors.insert("norm.bias".into(), Tensor::zeros(&[d]));
        linear(&mut tensors, &mut normal, "head".into(), d, config.n_classes);
        Ok(Self { config, tensors })
    }

    pub fn get(&self, id: &str) -> Result<&Tensor> {
        self.tensors
            .get(id)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter {id:?}")))
    }

    pub fn get_mut(&mut self, id: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(id)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter {id:?}")))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.tensors.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn tensors(&self) -> &IndexMap<String, Tensor> {
        &self.tensors
    }

    /// Number of factors the head is stored as; 0 for a plain head matrix.
    pub fn head_factor_count(&self) -> usize {
        (0..).take_while(|&i| self.contains(&head_factor(i))).count()
    }

    /// Replaces the head matrix by a chain of factors, keeping the slot order.
    pub fn with_head_factors(&self, factors: &[Tensor]) -> Result<Self> {
        let mut tensors = IndexMap::new();
        for (id, t) in &self.tensors {
            if id == HEAD_WEIGHT || id.starts_with("head.f") {
                if !tensors.contains_key(&head_factor(0)) {
                    for (i, f) in factors.iter().enumerate() {
                        tensors.insert(head_factor(i), f.clone());
                    }
                }
            } else {
                tensors.insert(id.clone(), t.clone());
            }
        }
        Ok(Self {
            config: self.config,
            tensors,
        })
    }
}
