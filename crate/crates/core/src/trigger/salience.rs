use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::vit::{patchify, record_forward, ModelParams, ParamGrad};

/// `|∂ CE(f(x), target) / ∂x|` per pixel, in image layout.
pub fn pixel_salience(params: &ModelParams, image: &Tensor, target: usize) -> Result<Tensor> {
    let rec = record_forward(params, image, true, ParamGrad::None)?;
    let mut tape = rec.tape;
    let ce = tape.cross_entropy(rec.logits, target)?;
    let mut grads = tape.backward(ce)?;
    let g = grads.take(rec.input).expect("input requires grad");
    Ok(g.map(f64::abs))
}

/// Per-patch salience: the sum of its pixel scores. `pixel_scores` is the
/// patchified `n×d` score matrix.
pub fn patch_scores(pixel_scores: &Tensor) -> Result<Vec<f64>> {
    let (_, d) = pixel_scores.dims2()?;
    Ok(pixel_scores.data().chunks(d).map(|row| row.iter().sum()).collect())
}

/// Top-`n_select` mask over `scores`; ties go to the lower index.
pub fn top_n_mask(scores: &[f64], n_select: usize) -> Result<Vec<bool>> {
    if n_select == 0 || n_select > scores.len() {
        return Err(Error::Parameter(format!(
            "patch budget {n_select} outside 1..={}",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut mask = vec![false; scores.len()];
    for &t in &order[..n_select] {
        mask[t] = true;
    }
    Ok(mask)
}

/// Mask of the `n_select` most salient patches of an `n×d` pixel-score matrix.
pub fn patch_salience_rank(pixel_scores: &Tensor, n_select: usize) -> Result<Vec<bool>> {
    top_n_mask(&patch_scores(pixel_scores)?, n_select)
}

/// Batch-averaged pixel salience, patchified to `n×d`.
pub fn batch_patch_salience(params: &ModelParams, images: &[Tensor], target: usize) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::Input("empty sample batch".into()));
    }
    let per_image = crate::par::map(images, |im| pixel_salience(params, im, target));
    let mut acc = Tensor::zeros(params.config.image_shape().as_slice());
    for s in per_image {
        for (a, v) in acc.data_mut().iter_mut().zip(s?.data()) {
            *a += v;
        }
    }
    let mean = acc.map(|v| v / images.len() as f64);
    patchify(&mean, params.config.patch_size)
}
