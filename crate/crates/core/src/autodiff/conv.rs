//! 2-D convolution (stride, zero padding, groups) via im2col.
//!
//! `groups == in_channels` gives depth-wise convolution.

use super::linalg::{matmul_raw, transpose_raw};
use super::ops::nchw;
use super::Var;
use crate::tensor::{Result, Scalar, Tensor, TensorError};

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    oh: usize,
    ow: usize,
    groups: usize,
    stride: usize,
    pad: usize,
}

fn conv_dims<T: Scalar>(
    x: &Tensor<T>,
    wt: &Tensor<T>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<ConvDims> {
    let (n, c, h, w) = nchw(x, "conv2d")?;
    let ws = wt.shape();
    if ws.len() != 4 || ws[2] != ws[3] {
        return Err(TensorError::Invalid {
            ctx: "conv2d",
            msg: format!("weight must be OIKK with square kernel, got {:?}", ws),
        });
    }
    let (o, ci, k) = (ws[0], ws[1], ws[2]);
    if groups == 0 || c % groups != 0 || o % groups != 0 || ci != c / groups {
        return Err(TensorError::Invalid {
            ctx: "conv2d",
            msg: format!(
                "channel/group mismatch: C={}, O={}, groups={}, weight I={}",
                c, o, groups, ci
            ),
        });
    }
    if k % 2 == 0 {
        return Err(TensorError::Invalid {
            ctx: "conv2d",
            msg: format!("kernel size {} must be odd", k),
        });
    }
    if stride == 0 {
        return Err(TensorError::Invalid {
            ctx: "conv2d",
            msg: "stride must be positive".into(),
        });
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(TensorError::Invalid {
            ctx: "conv2d",
            msg: format!("kernel {} larger than padded input {}x{}", k, h, w),
        });
    }
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    Ok(ConvDims {
        n,
        c,
        h,
        w,
        o,
        k,
        oh,
        ow,
        groups,
        stride,
        pad,
    })
}

/// Column matrix `[cg*k*k, oh*ow]` for one sample and channel group.
fn im2col<T: Scalar>(x: &[T], d: &ConvDims, c_start: usize, cg: usize) -> Vec<T> {
    let mut col = vec![T::ZERO; cg * d.k * d.k * d.oh * d.ow];
    let ohw = d.oh * d.ow;
    for ci in 0..cg {
        let xc = &x[(c_start + ci) * d.h * d.w..(c_start + ci + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = ((ci * d.k + ky) * d.k + kx) * ohw;
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..d.ow {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        col[row + oy * d.ow + ox] = xc[iy * d.w + ix as usize];
                    }
                }
            }
        }
    }
    col
}

/// Scatters a column-matrix gradient back into the input layout.
fn col2im<T: Scalar>(col: &[T], d: &ConvDims, c_start: usize, cg: usize, gx: &mut [T]) {
    let ohw = d.oh * d.ow;
    for ci in 0..cg {
        let xc = &mut gx[(c_start + ci) * d.h * d.w..(c_start + ci + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = ((ci * d.k + ky) * d.k + kx) * ohw;
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..d.ow {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        xc[iy * d.w + ix as usize] += col[row + oy * d.ow + ox];
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Var<T> {
    /// `x: [N,C,H,W]`, `weight: [O, C/groups, K, K]`, optional per-channel
    /// bias `[1,O,1,1]` or `[O]`.
    pub fn conv2d(
        &self,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var<T>> {
        self.same_tape(weight)?;
        if let Some(b) = bias {
            self.same_tape(b)?;
        }
        let xv = self.value();
        let wv = weight.value();
        let d = conv_dims(&xv, &wv, stride, pad, groups)?;
        let bv = match bias {
            Some(b) => {
                let bt = b.value();
                if bt.numel() != d.o {
                    return Err(TensorError::Invalid {
                        ctx: "conv2d",
                        msg: format!("bias has {} elements, expected {}", bt.numel(), d.o),
                    });
                }
                Some(bt)
            }
            None => None,
        };
        let cg = d.c / d.groups;
        let og = d.o / d.groups;
        let krows = cg * d.k * d.k;
        let ohw = d.oh * d.ow;
        let mut out = vec![T::ZERO; d.n * d.o * ohw];
        let xd = xv.data();
        let wd = wv.data();
        for ni in 0..d.n {
            let xs = &xd[ni * d.c * d.h * d.w..(ni + 1) * d.c * d.h * d.w];
            for g in 0..d.groups {
                let col = im2col(xs, &d, g * cg, cg);
                let wg = &wd[g * og * krows..(g + 1) * og * krows];
                matmul_raw(
                    wg,
                    &col,
                    og,
                    krows,
                    ohw,
                    &mut out[(ni * d.o + g * og) * ohw..(ni * d.o + (g + 1) * og) * ohw],
                );
            }
        }
        if let Some(bt) = &bv {
            let bd = bt.data();
            for ni in 0..d.n {
                for oc in 0..d.o {
                    let base = (ni * d.o + oc) * ohw;
                    for v in &mut out[base..base + ohw] {
                        *v += bd[oc];
                    }
                }
            }
        }
        let value = Tensor::new_unchecked(vec![d.n, d.o, d.oh, d.ow], out);
        let has_bias = bias.is_some();
        let bias_shape = bv.as_ref().map(|b| b.shape().to_vec());
        let parents: Vec<&Var<T>> = match bias {
            Some(b) => vec![self, weight, b],
            None => vec![self, weight],
        };
        self.tape().push_op("conv2d", value, &parents, move || {
            Box::new(move |gout| {
                let gd = gout.data();
                let mut gx = vec![T::ZERO; d.n * d.c * d.h * d.w];
                let mut gw = vec![T::ZERO; d.o * krows];
                for ni in 0..d.n {
                    let xs = &xv.data()[ni * d.c * d.h * d.w..(ni + 1) * d.c * d.h * d.w];
                    for g in 0..d.groups {
                        let col = im2col(xs, &d, g * cg, cg);
                        let gslice = &gd[(ni * d.o + g * og) * ohw..(ni * d.o + (g + 1) * og) * ohw];
                        // dW += G · col^T
                        let colt = transpose_raw(&col, krows, ohw);
                        matmul_raw(
                            gslice,
                            &colt,
                            og,
                            ohw,
                            krows,
                            &mut gw[g * og * krows..(g + 1) * og * krows],
                        );
                        // dcol = W^T · G, then scatter
                        let wg = &wv.data()[g * og * krows..(g + 1) * og * krows];
                        let wgt = transpose_raw(wg, og, krows);
                        let mut gcol = vec![T::ZERO; krows * ohw];
                        matmul_raw(&wgt, gslice, krows, og, ohw, &mut gcol);
                        col2im(
                            &gcol,
                            &d,
                            g * cg,
                            cg,
                            &mut gx[ni * d.c * d.h * d.w..(ni + 1) * d.c * d.h * d.w],
                        );
                    }
                }
                let mut grads = vec![
                    Tensor::new_unchecked(vec![d.n, d.c, d.h, d.w], gx),
                    Tensor::new_unchecked(vec![d.o, cg, d.k, d.k], gw),
                ];
                if has_bias {
                    let mut gb = vec![T::ZERO; d.o];
                    for ni in 0..d.n {
                        for oc in 0..d.o {
                            let base = (ni * d.o + oc) * ohw;
                            for &v in &gd[base..base + ohw] {
                                gb[oc] += v;
                            }
                        }
                    }
                    grads.push(Tensor::new_unchecked(
                        bias_shape.clone().expect("bias shape"),
                        gb,
                    ));
                }
                grads
            })
        })
    }
}
