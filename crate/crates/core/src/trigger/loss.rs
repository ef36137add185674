//! Attention concentration loss and the combined attention-target objective.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::vit::{record_forward, AttentionRecord, ModelParams, ParamGrad, Recording};

fn check_patches(patches: &[usize], n_patches: usize) -> Result<()> {
    if patches.is_empty() {
        return Err(Error::Parameter("attention loss needs a nonempty patch set".into()));
    }
    if let Some(&bad) = patches.iter().find(|&&t| t >= n_patches) {
        return Err(Error::Index {
            what: "trigger patch",
            index: bad,
            len: n_patches,
        });
    }
    Ok(())
}

/// Attention mass (summed over heads and all query positions) that lands on
/// key positions `t + 1` for `t` in `patches`.
pub fn attention_mass(record: &AttentionRecord, patches: &[usize], layer: usize) -> Result<f64> {
    let heads = record.layers.get(layer).ok_or(Error::Index {
        what: "layer",
        index: layer,
        len: record.layers.len(),
    })?;
    let seq = heads[0].last_dim();
    check_patches(patches, seq - 1)?;
    let mut total = 0.0;
    for w in heads {
        for row in w.data().chunks(seq) {
            for &t in patches {
                total += row[t + 1];
            }
        }
    }
    Ok(total)
}

/// `-log` of [`attention_mass`] for one layer.
pub fn attention_loss(record: &AttentionRecord, patches: &[usize], layer: usize) -> Result<f64> {
    Ok(-attention_mass(record, patches, layer)?.ln())
}

/// Records the same loss on `tape` from one layer's per-head weight nodes.
pub fn record_attention_loss(tape: &mut Tape, heads: &[Var], patches: &[usize]) -> Result<Var> {
    let seq = tape.value(heads[0]).last_dim();
    check_patches(patches, seq - 1)?;
    let mut index = Vec::with_capacity(seq * patches.len());
    for i in 0..seq {
        for &t in patches {
            index.push(i * seq + t + 1);
        }
    }
    let mut total: Option<Var> = None;
    for &h in heads {
        let picked = tape.gather(h, index.clone(), vec![index.len()])?;
        let s = tape.sum_all(picked);
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let total = total.ok_or_else(|| Error::Parameter("no attention heads".into()))?;
    let ln = tape.ln(total);
    Ok(tape.scale(ln, -1.0))
}

/// `Σ_{l ∈ layers}` attention loss, recorded on the forward's tape.
pub fn record_layer_attention_loss(rec: &mut Recording, patches: &[usize], layers: &[usize]) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::Parameter("empty layer set".into()));
    }
    let mut total: Option<Var> = None;
    for &l in layers {
        let heads = rec.attention.get(l).ok_or(Error::Index {
            what: "layer",
            index: l,
            len: rec.attention.len(),
        })?;
        let heads = heads.clone();
        let loss = record_attention_loss(&mut rec.tape, &heads, patches)?;
        total = Some(match total {
            None => loss,
            Some(acc) => rec.tape.add(acc, loss)?,
        });
    }
    Ok(total.expect("nonempty layers"))
}

/// `CE(f(x̂), target) + λ · Σ_{l ∈ layers} L_attn^l(x̂, T)`.
pub fn attention_target_loss(
    params: &ModelParams,
    image: &Tensor,
    target: usize,
    patches: &[usize],
    lambda: f64,
    layers: &[usize],
) -> Result<f64> {
    let parts = atl_parts(params, image, target, patches, layers, false)?;
    Ok(parts.ce + lambda * parts.attention)
}

/// Loss components of one image and, when requested, their input gradients.
#[derive(Debug, Clone)]
pub struct AtlParts {
    pub ce: f64,
    /// Unweighted `Σ_l L_attn^l`.
    pub attention: f64,
    pub ce_grad: Option<Tensor>,
    pub attention_grad: Option<Tensor>,
}

pub fn atl_parts(
    params: &ModelParams,
    image: &Tensor,
    target: usize,
    patches: &[usize],
    layers: &[usize],
    with_grads: bool,
) -> Result<AtlParts> {
    let mut rec = record_forward(params, image, with_grads, ParamGrad::None)?;
    let ce = rec.tape.cross_entropy(rec.logits, target)?;
    let att = record_layer_attention_loss(&mut rec, patches, layers)?;
    let mut parts = AtlParts {
        ce: rec.tape.value(ce).data()[0],
        attention: rec.tape.value(att).data()[0],
        ce_grad: None,
        attention_grad: None,
    };
    if with_grads {
        parts.ce_grad = rec.tape.backward(ce)?.take(rec.input);
        parts.attention_grad = rec.tape.backward(att)?.take(rec.input);
    }
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{forward, ViTConfig};

    fn uniform_record(queries: usize, keys: usize) -> AttentionRecord {
        let w = Tensor::full(&[queries, keys], 1.0 / keys as f64);
        AttentionRecord {
            layers: vec![vec![w]],
        }
    }

    #[test]
    fn uniform_single_head_loss_is_zero() {
        // 4 queries × 4 keys, one target patch: mass 4 · 0.25 = 1
        let rec = uniform_record(4, 4);
        let l = attention_loss(&rec, &[1], 0).unwrap();
        assert!(l.abs() < 1e-15);
    }

    #[test]
    fn all_mass_on_target_gives_minimum() {
        let n = 3;
        let heads = 2;
        let mut w = Tensor::zeros(&[n + 1, n + 1]);
        for i in 0..=n {
            w.data_mut()[i * (n + 1) + 2] = 1.0; // patch 1 sits at position 2
        }
        let rec = AttentionRecord {
            layers: vec![vec![w.clone(); heads]],
        };
        let l = attention_loss(&rec, &[1], 0).unwrap();
        assert!((l + ((heads * (n + 1)) as f64).ln()).abs() < 1e-12);

        // moving some mass off the target strictly raises the loss
        let mut w2 = w;
        w2.data_mut()[2] = 0.5;
        w2.data_mut()[0] = 0.5;
        let rec2 = AttentionRecord {
            layers: vec![vec![w2.clone(), w2]],
        };
        assert!(attention_loss(&rec2, &[1], 0).unwrap() > l);
    }

    #[test]
    fn empty_patch_set_rejected() {
        let rec = uniform_record(4, 4);
        assert!(matches!(attention_loss(&rec, &[], 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn lambda_zero_is_cross_entropy() {
        let p = ModelParams::init(ViTConfig::default(), 9).unwrap();
        let img = Tensor::new(vec![1, 16, 16], (0..256).map(|i| ((i * 7) % 13) as f64 / 13.0).collect()).unwrap();
        let atl = attention_target_loss(&p, &img, 3, &[5], 0.0, &[0, 1]).unwrap();
        let mut tape = Tape::new();
        let logits = tape.leaf(forward(&p, &img, false).unwrap().0, false);
        let ce = tape.cross_entropy(logits, 3).unwrap();
        assert_eq!(atl, tape.value(ce).data()[0]);
    }

    #[test]
    fn lambda_one_adds_attention_term() {
        let p = ModelParams::init(ViTConfig::default(), 9).unwrap();
        let img = Tensor::full(&[1, 16, 16], 0.5);
        let (_, rec) = forward(&p, &img, true).unwrap();
        let rec = rec.unwrap();
        let att = attention_loss(&rec, &[2], 0).unwrap();
        let ce = attention_target_loss(&p, &img, 1, &[2], 0.0, &[0]).unwrap();
        let atl = attention_target_loss(&p, &img, 1, &[2], 1.0, &[0]).unwrap();
        assert!((atl - (ce + att)).abs() < 1e-12);
    }
}
