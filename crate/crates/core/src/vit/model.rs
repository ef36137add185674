//! Pre-norm Vision Transformer forward pass recorded on a [`Tape`].
//!
//! Sequence position 0 is the class token; patch `t` sits at position `t + 1`.

use super::patch::patch_gather_index;
use super::params::{block_param, head_factor, ModelParams, HEAD_BIAS, HEAD_WEIGHT};
use crate::autodiff::{softmax_rows, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which parameters get gradient-tracked leaves.
#[derive(Debug, Clone, Copy)]
pub enum ParamGrad<'a> {
    None,
    All,
    Only(&'a [String]),
}

impl ParamGrad<'_> {
    fn wants(&self, id: &str) -> bool {
        match self {
            ParamGrad::None => false,
            ParamGrad::All => true,
            ParamGrad::Only(ids) => ids.iter().any(|s| s == id),
        }
    }
}

/// A recorded forward pass; attention weights are kept per layer and head.
#[derive(Debug)]
pub struct Recording {
    pub tape: Tape,
    pub input: Var,
    pub logits: Var,
    /// `attention[l][h]` is the `(n+1)×(n+1)` weight matrix (query × key).
    pub attention: Vec<Vec<Var>>,
    pub params: Vec<(String, Var)>,
}

impl Recording {
    pub fn logits(&self) -> &Tensor {
        self.tape.value(self.logits)
    }

    pub fn param_var(&self, id: &str) -> Option<Var> {
        self.params.iter().find(|(n, _)| n == id).map(|(_, v)| *v)
    }

    pub fn attention_record(&self) -> AttentionRecord {
        AttentionRecord {
            layers: self
                .attention
                .iter()
                .map(|heads| heads.iter().map(|&v| self.tape.value(v).clone()).collect())
                .collect(),
        }
    }
}

/// Captured attention weights, `layers[l][h]` of shape `(n+1)×(n+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layers: Vec<Vec<Tensor>>,
}

impl AttentionRecord {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Largest deviation of any query row sum from 1.
    pub fn max_row_deviation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for head in self.layers.iter().flatten() {
            let n = head.last_dim();
            for row in head.data().chunks(n) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        worst
    }
}

/// `softmax(QKᵀ/√D_k)·V` recorded on `tape`; returns (output, weights).
pub fn attention_forward(tape: &mut Tape, q: Var, k: Var, v: Var, key_dim: usize) -> Result<(Var, Var)> {
    let (qs, ks) = (tape.value(q).shape().to_vec(), tape.value(k).shape().to_vec());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] || qs[1] != key_dim {
        return Err(Error::dim("attention q/k", &qs, &ks));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (key_dim as f64).sqrt());
    let weights = tape.softmax(scores);
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Plain-value attention; returns (output, weights).
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let key_dim = q.dims2()?.1;
    let mut tape = Tape::new();
    let (q, k, v) = (tape.leaf(q.clone(), false), tape.leaf(k.clone(), false), tape.leaf(v.clone(), false));
    let (out, w) = attention_forward(&mut tape, q, k, v, key_dim)?;
    Ok((tape.value(out).clone(), tape.value(w).clone()))
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn affine_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let y = tape.layernorm(x);
    let y = tape.mul_row(y, gain)?;
    tape.add_row(y, bias)
}

/// Records the full forward pass of `image` (`C×S×S`).
pub fn record_forward(
    params: &ModelParams,
    image: &Tensor,
    input_grad: bool,
    param_grad: ParamGrad<'_>,
) -> Result<Recording> {
    let cfg = params.config;
    if image.shape() != cfg.image_shape() {
        return Err(Error::Config(format!(
            "image shape {:?} does not match model input {:?}",
            image.shape(),
            cfg.image_shape()
        )));
    }
    let mut tape = Tape::new();
    let input = tape.leaf(image.clone(), input_grad);

    let mut vars = Vec::with_capacity(params.len());
    for (id, t) in params.iter() {
        let v = tape.leaf(t.clone(), param_grad.wants(id));
        vars.push((id.clone(), v));
    }
    let p = |id: &str| -> Result<Var> {
        vars.iter()
            .find(|(n, _)| n == id)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Parameter(format!("missing parameter {id:?}")))
    };

    let index = patch_gather_index(cfg.channels, cfg.image_side, cfg.patch_size)?;
    let patches = tape.gather(input, index, vec![cfg.n_patches(), cfg.patch_dim()])?;
    let emb = linear(&mut tape, patches, p("patch_embed.weight")?, p("patch_embed.bias")?)?;
    let tokens = tape.concat_rows(&[p("cls_token")?, emb])?;
    let mut x = tape.add(tokens, p("pos_embed")?)?;

    let dk = cfg.key_dim();
    let mut attention = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let bp = |name: &str| p(&block_param(l, name));
        let h = affine_norm(&mut tape, x, bp("norm1.weight")?, bp("norm1.bias")?)?;
        let q = linear(&mut tape, h, bp("attn.q.weight")?, bp("attn.q.bias")?)?;
        let k = linear(&mut tape, h, bp("attn.k.weight")?, bp("attn.k.bias")?)?;
        let v = linear(&mut tape, h, bp("attn.v.weight")?, bp("attn.v.bias")?)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        let mut weights = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, hd * dk, dk)?;
            let kh = tape.slice_cols(k, hd * dk, dk)?;
            let vh = tape.slice_cols(v, hd * dk, dk)?;
            let (o, w) = attention_forward(&mut tape, qh, kh, vh, dk)?;
            heads.push(o);
            weights.push(w);
        }
        attention.push(weights);
        let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let o = linear(&mut tape, merged, bp("attn.proj.weight")?, bp("attn.proj.bias")?)?;
        x = tape.add(x, o)?;

        let h = affine_norm(&mut tape, x, bp("norm2.weight")?, bp("norm2.bias")?)?;
        let h = linear(&mut tape, h, bp("mlp.fc1.weight")?, bp("mlp.fc1.bias")?)?;
        let h = tape.gelu(h);
        let h = linear(&mut tape, h, bp("mlp.fc2.weight")?, bp("mlp.fc2.bias")?)?;
        x = tape.add(x, h)?;
    }

    let x = affine_norm(&mut tape, x, p("norm.weight")?, p("norm.bias")?)?;
    let d = cfg.embed_dim;
    let cls = tape.gather(x, (0..d).collect(), vec![1, d])?;
    let mut y = cls;
    if params.contains(HEAD_WEIGHT) {
        y = tape.matmul(y, p(HEAD_WEIGHT)?)?;
    } else {
        let k = params.head_factor_count();
        if k == 0 {
            return Err(Error::Parameter("model has no classification head".into()));
        }
        for i in 0..k {
            y = tape.matmul(y, p(&head_factor(i))?)?;
        }
    }
    let y = tape.add_row(y, p(HEAD_BIAS)?)?;
    let logits = tape.reshape(y, vec![cfg.n_classes])?;

    Ok(Recording {
        tape,
        input,
        logits,
        attention,
        params: vars,
    })
}

/// Logits of `image`, plus the attention record when `capture` is set.
pub fn forward(params: &ModelParams, image: &Tensor, capture: bool) -> Result<(Tensor, Option<AttentionRecord>)> {
    let rec = record_forward(params, image, false, ParamGrad::None)?;
    let record = capture.then(|| rec.attention_record());
    Ok((rec.logits().clone(), record))
}

pub fn predict(params: &ModelParams, image: &Tensor) -> Result<usize> {
    Ok(forward(params, image, false)?.0.argmax())
}

pub fn probabilities(params: &ModelParams, image: &Tensor) -> Result<Vec<f64>> {
    let logits = forward(params, image, false)?.0;
    Ok(softmax_rows(logits.data(), logits.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::ViTConfig;

    #[test]
    fn zero_keys_give_uniform_rows_and_mean_values() {
        let q = Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 0.3, 2.0, 1.0]).unwrap();
        let k = Tensor::zeros(&[4, 2]);
        let v = Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let (out, w) = attention(&q, &k, &v).unwrap();
        assert!(w.data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert!(out.data().iter().all(|&x| (x - 3.0).abs() < 1e-12));
    }

    #[test]
    fn single_token_attention_is_identity_on_values() {
        let q = Tensor::matrix(1, 2, vec![0.7, -0.1]).unwrap();
        let k = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        let v = Tensor::matrix(1, 3, vec![1.5, -2.0, 9.0]).unwrap();
        let (out, w) = attention(&q, &k, &v).unwrap();
        assert_eq!(w.data(), &[1.0]);
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn attention_shape_mismatch() {
        let q = Tensor::zeros(&[2, 3]);
        let k = Tensor::zeros(&[2, 2]);
        let v = Tensor::zeros(&[2, 2]);
        assert!(matches!(attention(&q, &k, &v), Err(Error::Dimension { .. })));
    }

    #[test]
    fn logits_shape_and_attention_rows() {
        let params = ModelParams::init(ViTConfig::default(), 3).unwrap();
        let img = Tensor::full(&[1, 16, 16], 0.4);
        let (logits, rec) = forward(&params, &img, true).unwrap();
        assert_eq!(logits.shape(), &[4]);
        let rec = rec.unwrap();
        assert_eq!(rec.n_layers(), 2);
        assert_eq!(rec.layers[0].len(), 2);
        assert_eq!(rec.layers[0][0].shape(), &[17, 17]);
        assert!(rec.max_row_deviation() < 1e-9);
    }

    #[test]
    fn wrong_image_shape_is_config_error() {
        let params = ModelParams::init(ViTConfig::default(), 3).unwrap();
        let img = Tensor::zeros(&[1, 8, 8]);
        assert!(matches!(forward(&params, &img, false), Err(Error::Config(_))));
    }

    #[test]
    fn forward_is_deterministic_and_untouched_by_backward() {
        let params = ModelParams::init(ViTConfig::default(), 3).unwrap();
        let img = Tensor::full(&[1, 16, 16], 0.2);
        let rec = record_forward(&params, &img, true, ParamGrad::All).unwrap();
        let before = rec.logits().clone();
        let mut tape = rec.tape;
        let ce = tape.cross_entropy(rec.logits, 1).unwrap();
        let _ = tape.backward(ce).unwrap();
        assert_eq!(tape.value(rec.logits), &before);
        let (again, _) = forward(&params, &img, false).unwrap();
        assert_eq!(again, before);
    }
}
