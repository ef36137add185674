//! Patch layout: patch `t` is tile `(t / grid, t % grid)` of the image in
//! raster order; inside a patch pixels run row-major with channels last.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

fn check(channels: usize, side: usize, patch_size: usize) -> Result<()> {
    if patch_size == 0 || side % patch_size != 0 {
        return Err(Error::Config(format!(
            "image side {side} not divisible by patch size {patch_size}"
        )));
    }
    if channels == 0 {
        return Err(Error::Config("zero channels".into()));
    }
    Ok(())
}

/// Source offset (in `C×S×S` image layout) of every patch-matrix entry.
pub fn patch_gather_index(channels: usize, side: usize, patch_size: usize) -> Result<Vec<usize>> {
    check(channels, side, patch_size)?;
    let grid = side / patch_size;
    let mut index = Vec::with_capacity(channels * side * side);
    for pr in 0..grid {
        for pc in 0..grid {
            for r in 0..patch_size {
                for c in 0..patch_size {
                    for ch in 0..channels {
                        let y = pr * patch_size + r;
                        let x = pc * patch_size + c;
                        index.push(ch * side * side + y * side + x);
                    }
                }
            }
        }
    }
    Ok(index)
}

/// Image offsets covered by patch `t`, in patch-vector order.
pub fn patch_pixels(channels: usize, side: usize, patch_size: usize, t: usize) -> Result<Vec<usize>> {
    let index = patch_gather_index(channels, side, patch_size)?;
    let d = channels * patch_size * patch_size;
    let n = index.len() / d;
    if t >= n {
        return Err(Error::Index {
            what: "patch",
            index: t,
            len: n,
        });
    }
    Ok(index[t * d..(t + 1) * d].to_vec())
}

/// `C×S×S` image to `n×d` patch matrix.
pub fn patchify(image: &Tensor, patch_size: usize) -> Result<Tensor> {
    let [channels, side] = image_dims(image)?;
    let index = patch_gather_index(channels, side, patch_size)?;
    let d = channels * patch_size * patch_size;
    let src = image.data();
    Tensor::matrix(index.len() / d, d, index.iter().map(|&i| src[i]).collect())
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, channels: usize, side: usize, patch_size: usize) -> Result<Tensor> {
    let index = patch_gather_index(channels, side, patch_size)?;
    if patches.len() != index.len() {
        return Err(Error::dim("unpatchify", patches.shape(), &[channels, side, side]));
    }
    let mut out = vec![0.0; index.len()];
    for (&dst, &v) in index.iter().zip(patches.data()) {
        out[dst] = v;
    }
    Tensor::new(vec![channels, side, side], out)
}

fn image_dims(image: &Tensor) -> Result<[usize; 2]> {
    match image.shape() {
        [c, h, w] if h == w => Ok([*c, *h]),
        other => Err(Error::Config(format!("expected C×S×S image, got {other:?}"))),
    }
}
