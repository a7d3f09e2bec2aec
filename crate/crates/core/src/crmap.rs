//! Color ratio maps and the latent prior built from them.
//!
//! The color ratio map divides each pixel by its channel sum, which cancels
//! any per-pixel scalar illumination factor, and it survives downsampling of
//! smooth regions, so the same map describes both a low-light LR input and
//! its normal-light HR counterpart. The flow's latent prior is a
//! unit-variance Gaussian whose mean is a color ratio map rearranged into
//! the latent piece layout; during training the mean comes from the ground
//! truth with high probability and from the encoder's prediction otherwise.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::flow::{split_channels, FlowLayout};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

pub const CR_EPS: f64 = 1e-6;

/// Probability of using the encoder's predicted map as the prior mean
/// during training; otherwise the ground-truth map is used.
pub const PRIOR_ENCODER_PROB: f64 = 0.2;

/// CR(I)_c = I_c / max(I_r + I_g + I_b, eps) per pixel, for NCHW input
/// with 3 channels. A fully black pixel maps to (0, 0, 0); any pixel with
/// channel sum above eps divides by the exact sum, so global illumination
/// scaling cancels exactly.
pub fn cr_map<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let s = img.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(TensorError::Invalid {
            ctx: "cr_map",
            msg: format!("expected [N,3,H,W], got {:?}", s),
        });
    }
    let (n, hw) = (s[0], s[2] * s[3]);
    let d = img.data();
    let mut out = vec![T::ZERO; d.len()];
    for ni in 0..n {
        let base = ni * 3 * hw;
        for p in 0..hw {
            let r = d[base + p].to_f64();
            let g = d[base + hw + p].to_f64();
            let b = d[base + 2 * hw + p].to_f64();
            let denom = (r + g + b).max(CR_EPS);
            out[base + p] = T::from_f64(r / denom);
            out[base + hw + p] = T::from_f64(g / denom);
            out[base + 2 * hw + p] = T::from_f64(b / denom);
        }
    }
    Ok(Tensor::new_unchecked(s.to_vec(), out))
}

/// Differentiable color ratio map, for gradients through a predicted map.
pub fn cr_map_var<T: Scalar>(img: &Var<T>) -> Result<Var<T>> {
    let s = img.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(TensorError::Invalid {
            ctx: "cr_map",
            msg: format!("expected [N,3,H,W], got {:?}", s),
        });
    }
    let r = img.narrow(1, 0, 1)?;
    let g = img.narrow(1, 1, 1)?;
    let b = img.narrow(1, 2, 1)?;
    let sum = r.add(&g)?.add(&b)?;
    // max(sum, eps) written as (sum + eps + |sum - eps|) / 2 so it stays
    // on the tape with a well-defined subgradient
    let denom = sum
        .add_scalar(CR_EPS)?
        .add(&sum.add_scalar(-CR_EPS)?.abs()?)?
        .scale(0.5)?;
    img.div(&denom)
}

/// Rearranges an HR-shaped map into the flow's latent piece layout by
/// applying exactly the structural operations of the forward pass: per
/// level a 2x2 squeeze, then the fixed channel shuffle and split.
pub fn rearrange_to_pyramid<T: Scalar>(
    layout: &FlowLayout,
    map: &Var<T>,
) -> Result<Vec<Var<T>>> {
    let s = map.shape();
    let expect = vec![s[0], layout.base_channels, layout.hr_size.0, layout.hr_size.1];
    if s != expect {
        return Err(TensorError::ShapeMismatch {
            ctx: "rearrange_to_pyramid",
            expected: expect,
            got: s,
        });
    }
    let mut pieces = Vec::with_capacity(layout.levels);
    let mut h = map.clone();
    for l in 0..layout.levels {
        h = h.squeeze2x2()?;
        if l + 1 < layout.levels {
            let (kept, emitted) = split_channels(&h)?;
            pieces.push(emitted);
            h = kept;
        } else {
            pieces.push(h.clone());
        }
    }
    Ok(pieces)
}

/// Tensor-level convenience wrapper around [`rearrange_to_pyramid`].
pub fn rearrange_tensor<T: Scalar>(
    layout: &FlowLayout,
    map: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let tape: Tape<T> = Tape::new();
    let v = tape.constant(map.clone());
    Ok(rearrange_to_pyramid(layout, &v)?
        .into_iter()
        .map(|p| p.value())
        .collect())
}

/// Per-sample prior mean selection: with probability
/// [`PRIOR_ENCODER_PROB`] the encoder's predicted map, otherwise the
/// ground-truth map. Returns the blended [N,3,H,W] map and the draw per
/// sample (true = encoder).
pub fn select_prior_mean<T: Scalar>(
    cr_gt: &Tensor<T>,
    cr_pred: &Tensor<T>,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, Vec<bool>)> {
    if cr_gt.shape() != cr_pred.shape() {
        return Err(TensorError::ShapeMismatch {
            ctx: "select_prior_mean",
            expected: cr_gt.shape().to_vec(),
            got: cr_pred.shape().to_vec(),
        });
    }
    let s = cr_gt.shape();
    let n = s[0];
    let per = cr_gt.numel() / n;
    let mut out = Vec::with_capacity(cr_gt.numel());
    let mut picks = Vec::with_capacity(n);
    for ni in 0..n {
        let use_enc = rng.gen_range(0.0..1.0) < PRIOR_ENCODER_PROB;
        picks.push(use_enc);
        let src = if use_enc { cr_pred } else { cr_gt };
        out.extend_from_slice(&src.data()[ni * per..(ni + 1) * per]);
    }
    Ok((Tensor::new_unchecked(s.to_vec(), out), picks))
}
