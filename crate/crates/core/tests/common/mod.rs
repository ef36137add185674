//! Shared oracles for the integration and acceptance targets.

#![allow(dead_code)]

use patchtroj::autodiff::{Tape, Tensor, Var};
use patchtroj::quant::{QuantizedCheckpoint, QuantizedTensor};
use patchtroj::trigger::{atl_parts, attention_target_loss};
use patchtroj::vit::{loss_and_param_grads, record_forward, ModelParams, ParamGrad, ViTConfig};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// Central differences, written independently of the library's helper.
pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + STEP;
            let up = f(&probe);
            probe[i] = orig - STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-12)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// One primitive under test: input shapes and value range, and how to build
/// the op from its input nodes.
struct Case {
    name: &'static str,
    inputs: Vec<Vec<usize>>,
    range: (f64, f64),
    build: fn(&mut Tape, &[Var]) -> Var,
}

fn cases() -> Vec<Case> {
    vec![
        Case { name: "matmul", inputs: vec![vec![3, 4], vec![4, 5]], range: (-1.0, 1.0), build: |t, v| t.matmul(v[0], v[1]).unwrap() },
        Case { name: "add", inputs: vec![vec![3, 4], vec![3, 4]], range: (-1.0, 1.0), build: |t, v| t.add(v[0], v[1]).unwrap() },
        Case { name: "add_row", inputs: vec![vec![3, 4], vec![4]], range: (-1.0, 1.0), build: |t, v| t.add_row(v[0], v[1]).unwrap() },
        Case { name: "mul", inputs: vec![vec![3, 4], vec![3, 4]], range: (-1.0, 1.0), build: |t, v| t.mul(v[0], v[1]).unwrap() },
        Case { name: "mul_row", inputs: vec![vec![3, 4], vec![4]], range: (-1.0, 1.0), build: |t, v| t.mul_row(v[0], v[1]).unwrap() },
        Case { name: "scale", inputs: vec![vec![3, 4]], range: (-1.0, 1.0), build: |t, v| t.scale(v[0], -1.7) },
        Case { name: "softmax", inputs: vec![vec![3, 5]], range: (-2.0, 2.0), build: |t, v| t.softmax(v[0]) },
        Case { name: "layernorm", inputs: vec![vec![3, 6]], range: (-2.0, 2.0), build: |t, v| t.layernorm(v[0]) },
        Case { name: "gelu", inputs: vec![vec![3, 4]], range: (-3.0, 3.0), build: |t, v| t.gelu(v[0]) },
        Case { name: "transpose", inputs: vec![vec![3, 4]], range: (-1.0, 1.0), build: |t, v| t.transpose(v[0]).unwrap() },
        Case { name: "slice_cols", inputs: vec![vec![3, 6]], range: (-1.0, 1.0), build: |t, v| t.slice_cols(v[0], 2, 3).unwrap() },
        Case { name: "concat_cols", inputs: vec![vec![3, 2], vec![3, 4]], range: (-1.0, 1.0), build: |t, v| t.concat_cols(&[v[0], v[1]]).unwrap() },
        Case { name: "concat_rows", inputs: vec![vec![2, 4], vec![3, 4]], range: (-1.0, 1.0), build: |t, v| t.concat_rows(&[v[0], v[1]]).unwrap() },
        Case {
            name: "gather",
            inputs: vec![vec![3, 4]],
            range: (-1.0, 1.0),
            build: |t, v| t.gather(v[0], vec![11, 0, 5, 5, 7, 2], vec![2, 3]).unwrap(),
        },
        Case { name: "reshape", inputs: vec![vec![3, 4]], range: (-1.0, 1.0), build: |t, v| t.reshape(v[0], vec![2, 6]).unwrap() },
        Case { name: "sum_all", inputs: vec![vec![3, 4]], range: (-1.0, 1.0), build: |t, v| t.sum_all(v[0]) },
        Case { name: "ln", inputs: vec![vec![3, 4]], range: (0.2, 3.0), build: |t, v| t.ln(v[0]) },
        Case { name: "cross_entropy", inputs: vec![vec![1, 6]], range: (-3.0, 3.0), build: |t, v| t.cross_entropy(v[0], 4).unwrap() },
    ]
}

/// Builds `Σ op(inputs) ⊙ weights` so that every output entry matters.
fn weighted_output(case: &Case, inputs: &[Tensor], weights_seed: u64, with_grad: bool) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), with_grad)).collect();
    let out = (case.build)(&mut tape, &vars);
    let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
    let w = random(&mut rng, tape.value(out).shape(), -1.0, 1.0);
    let w = tape.leaf(w, false);
    let prod = tape.mul(out, w).unwrap();
    let root = tape.sum_all(prod);
    (tape, vars, root)
}

/// Worst relative error of each primitive across `seeds`.
pub fn primitive_errors(seeds: u64) -> Vec<(&'static str, f64)> {
    cases()
        .iter()
        .map(|case| {
            let mut worst: f64 = 0.0;
            for seed in 0..seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                let inputs: Vec<Tensor> = case.inputs.iter().map(|s| random(&mut rng, s, case.range.0, case.range.1)).collect();
                let (tape, vars, root) = weighted_output(case, &inputs, seed, true);
                let mut grads = tape.backward(root).unwrap();
                for (k, x) in inputs.iter().enumerate() {
                    let analytic = grads.take(vars[k]).unwrap();
                    let f = |probe: &[f64]| {
                        let mut moved = inputs.clone();
                        moved[k] = Tensor::new(x.shape().to_vec(), probe.to_vec()).unwrap();
                        let (tape, _, root) = weighted_output(case, &moved, seed, false);
                        tape.value(root).data()[0]
                    };
                    let numeric = central_difference(&f, x.data());
                    worst = worst.max(rel_err(analytic.data(), &numeric));
                }
            }
            (case.name, worst)
        })
        .collect()
}

pub struct LossSetup {
    pub params: ModelParams,
    pub image: Tensor,
    pub target: usize,
    pub patches: Vec<usize>,
    pub layers: Vec<usize>,
}

pub fn loss_setup(seed: u64) -> LossSetup {
    let cfg = ViTConfig::default();
    let params = ModelParams::init(cfg, 500 + seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
    let image = random(&mut rng, &cfg.image_shape(), 0.05, 0.95);
    let n = cfg.n_patches();
    let first = rng.random_range(0..n);
    let second = (first + 1 + rng.random_range(0..n - 1)) % n;
    LossSetup {
        params,
        image,
        target: rng.random_range(0..cfg.n_classes),
        patches: vec![first, second],
        layers: (0..cfg.n_layers).collect(),
    }
}

fn image_fn<'a>(s: &'a LossSetup, f: impl Fn(&Tensor) -> f64 + 'a) -> impl Fn(&[f64]) -> f64 + 'a {
    move |p: &[f64]| f(&Tensor::new(s.image.shape().to_vec(), p.to_vec()).unwrap())
}

/// Input-gradient errors of the cross-entropy, attention and combined losses,
/// plus the parameter-gradient error of the cross-entropy on the head and
/// last attention projection. Worst case across `seeds`.
pub fn loss_errors(seeds: u64) -> Vec<(&'static str, f64)> {
    let mut worst = [0.0f64; 4];
    let lambda = 0.7;
    for seed in 0..seeds {
        let s = loss_setup(seed);
        let parts = atl_parts(&s.params, &s.image, s.target, &s.patches, &s.layers, true).unwrap();
        let ce_grad = parts.ce_grad.unwrap();
        let att_grad = parts.attention_grad.unwrap();

        let ce = image_fn(&s, |x| atl_parts(&s.params, x, s.target, &s.patches, &s.layers, false).unwrap().ce);
        worst[0] = worst[0].max(rel_err(ce_grad.data(), &central_difference(&ce, s.image.data())));

        let att = image_fn(&s, |x| atl_parts(&s.params, x, s.target, &s.patches, &s.layers, false).unwrap().attention);
        worst[1] = worst[1].max(rel_err(att_grad.data(), &central_difference(&att, s.image.data())));

        let atl = image_fn(&s, |x| attention_target_loss(&s.params, x, s.target, &s.patches, lambda, &s.layers).unwrap());
        let combined: Vec<f64> = ce_grad.data().iter().zip(att_grad.data()).map(|(c, a)| c + lambda * a).collect();
        worst[2] = worst[2].max(rel_err(&combined, &central_difference(&atl, s.image.data())));

        let (_, grads) = loss_and_param_grads(&s.params, &s.image, s.target).unwrap();
        let ids: Vec<String> = s.params.ids().cloned().collect();
        for id in ["head.weight", "head.bias", "blocks.1.attn.proj.bias"] {
            let k = ids.iter().position(|i| i == id).unwrap();
            let base = s.params.get(id).unwrap().clone();
            let f = |p: &[f64]| {
                let mut moved = s.params.clone();
                *moved.get_mut(id).unwrap() = Tensor::new(base.shape().to_vec(), p.to_vec()).unwrap();
                let mut rec = record_forward(&moved, &s.image, false, ParamGrad::None).unwrap();
                let ce = rec.tape.cross_entropy(rec.logits, s.target).unwrap();
                rec.tape.value(ce).data()[0]
            };
            worst[3] = worst[3].max(rel_err(grads[k].data(), &central_difference(&f, base.data())));
        }
    }
    vec![
        ("cross-entropy (input)", worst[0]),
        ("attention (input)", worst[1]),
        ("attention-target (input)", worst[2]),
        ("cross-entropy (weights)", worst[3]),
    ]
}

/// Random int8 checkpoint with a fixed id/shape table.
pub fn random_codes(rng: &mut ChaCha8Rng) -> QuantizedCheckpoint {
    let mut tensors = IndexMap::new();
    for (id, shape) in [("a", vec![3, 5]), ("b", vec![7]), ("c", vec![2, 2, 2])] {
        let n: usize = shape.iter().product();
        let codes = (0..n).map(|_| rng.random_range(-127i8..=127)).collect();
        tensors.insert(id.to_string(), QuantizedTensor::new(shape, codes, 0.01).unwrap());
    }
    QuantizedCheckpoint {
        config: ViTConfig::default(),
        tensors,
    }
}

/// Copy of `clean` with a random subset of elements replaced by random codes.
pub fn perturb_codes(clean: &QuantizedCheckpoint, rng: &mut ChaCha8Rng) -> QuantizedCheckpoint {
    let mut out = clean.clone();
    let rate: f64 = rng.random_range(0.0..0.6);
    for t in out.tensors.values_mut() {
        for c in &mut t.codes {
            if rng.random_bool(rate) {
                *c = rng.random_range(-127i8..=127);
            }
        }
    }
    out
}

/// Independent bit count: XOR of the two's-complement bytes, popcount.
pub fn xor_popcount(a: &QuantizedCheckpoint, b: &QuantizedCheckpoint) -> (usize, usize) {
    let mut params = 0;
    let mut bits = 0;
    for (ta, tb) in a.tensors.values().zip(b.tensors.values()) {
        for (&x, &y) in ta.codes.iter().zip(&tb.codes) {
            let d = (x as u8 ^ y as u8).count_ones() as usize;
            bits += d;
            params += usize::from(d > 0);
        }
    }
    (params, bits)
}
