//! Elementwise, reduction, and structural ops on tape variables.
//!
//! Broadcasting is deliberately narrow: operands must have the same rank
//! and each dimension must either match or be 1. No implicit rank
//! extension.

use super::Var;
use crate::tensor::{strides, Result, Scalar, Tensor, TensorError};

pub(crate) fn broadcast_shape(
    ctx: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(TensorError::ShapeMismatch {
            ctx,
            expected: a.to_vec(),
            got: b.to_vec(),
        });
    }
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            if x == y || x == 1 || y == 1 {
                Ok(x.max(y))
            } else {
                Err(TensorError::ShapeMismatch {
                    ctx,
                    expected: a.to_vec(),
                    got: b.to_vec(),
                })
            }
        })
        .collect()
}

/// Strides into `shape` when iterated over `out` coordinates; broadcast
/// dimensions get stride 0.
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape
        .iter()
        .zip(out.iter())
        .zip(s.iter())
        .map(|((&d, &o), &st)| if d == o { st } else { 0 })
        .collect()
}

fn broadcast_apply<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    let n: usize = out_shape.iter().product();
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new_unchecked(out_shape.to_vec(), data);
    }
    let os = strides(out_shape);
    let sa = bcast_strides(a.shape(), out_shape);
    let sb = bcast_strides(b.shape(), out_shape);
    let ad = a.data();
    let bd = b.data();
    let mut data = Vec::with_capacity(n);
    for idx in 0..n {
        let (mut oa, mut ob) = (0usize, 0usize);
        for d in 0..out_shape.len() {
            let c = idx / os[d] % out_shape[d];
            oa += c * sa[d];
            ob += c * sb[d];
        }
        data.push(f(ad[oa], bd[ob]));
    }
    Tensor::new_unchecked(out_shape.to_vec(), data)
}

/// Sums `grad` over dimensions that were broadcast to reach `shape`.
fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let gs = strides(grad.shape());
    let ts = bcast_strides(shape, grad.shape());
    let mut out = vec![T::ZERO; shape.iter().product()];
    let gd = grad.data();
    for idx in 0..gd.len() {
        let mut ot = 0usize;
        for d in 0..shape.len() {
            let c = idx / gs[d] % grad.shape()[d];
            ot += c * ts[d];
        }
        out[ot] += gd[idx];
    }
    Tensor::new_unchecked(shape.to_vec(), out)
}

impl<T: Scalar> Var<T> {
    fn binary(
        &self,
        other: &Var<T>,
        ctx: &'static str,
        f: impl Fn(T, T) -> T,
        dfa: impl Fn(T, T) -> T + 'static,
        dfb: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var<T>> {
        self.same_tape(other)?;
        let (av, bv) = (self.value(), other.value());
        let out_shape = broadcast_shape(ctx, av.shape(), bv.shape())?;
        let value = broadcast_apply(&av, &bv, &out_shape, f);
        let (a_shape, b_shape) = (av.shape().to_vec(), bv.shape().to_vec());
        self.tape().push_op(ctx, value, &[self, other], move || {
            Box::new(move |gout| {
                let ga_full = {
                    let w = broadcast_apply(&av, &bv, gout.shape(), &dfa);
                    broadcast_apply(gout, &w, gout.shape(), |g, w| g * w)
                };
                let gb_full = {
                    let w = broadcast_apply(&av, &bv, gout.shape(), &dfb);
                    broadcast_apply(gout, &w, gout.shape(), |g, w| g * w)
                };
                vec![
                    reduce_to_shape(&ga_full, &a_shape),
                    reduce_to_shape(&gb_full, &b_shape),
                ]
            })
        })
    }

    fn unary(
        &self,
        ctx: &'static str,
        f: impl Fn(T) -> T,
        // gradient as a function of (input, output)
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var<T>> {
        let av = self.value();
        let data: Vec<T> = av.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new_unchecked(av.shape().to_vec(), data);
        let out = value.clone();
        self.tape().push_op(ctx, value, &[self], move || {
            Box::new(move |gout| {
                let data = gout
                    .data()
                    .iter()
                    .zip(av.data().iter().zip(out.data().iter()))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Tensor::new_unchecked(gout.shape().to_vec(), data)]
            })
        })
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, "add", |a, b| a + b, |_, _| T::ONE, |_, _| T::ONE)
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, "sub", |a, b| a - b, |_, _| T::ONE, |_, _| -T::ONE)
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Var<T>) -> Result<Var<T>> {
        if other.value().data().iter().any(|&b| b == T::ZERO) {
            return Err(TensorError::Domain {
                ctx: "div",
                msg: "division by zero".into(),
            });
        }
        self.binary(
            other,
            "div",
            |a, b| a / b,
            |_, b| T::ONE / b,
            |a, b| -a / (b * b),
        )
    }

    pub fn neg(&self) -> Result<Var<T>> {
        self.unary("neg", |x| -x, |_, _| -T::ONE)
    }

    pub fn exp(&self) -> Result<Var<T>> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Result<Var<T>> {
        if self.value().data().iter().any(|&x| x <= T::ZERO) {
            return Err(TensorError::Domain {
                ctx: "ln",
                msg: "log of non-positive value".into(),
            });
        }
        self.unary("ln", |x| x.ln(), |x, _| T::ONE / x)
    }

    pub fn sigmoid(&self) -> Result<Var<T>> {
        self.unary(
            "sigmoid",
            |x| stable_sigmoid(x),
            |_, y| y * (T::ONE - y),
        )
    }

    pub fn tanh(&self) -> Result<Var<T>> {
        self.unary("tanh", |x| x.tanh(), |_, y| T::ONE - y * y)
    }

    /// |x|; subgradient 0 at the origin.
    pub fn abs(&self) -> Result<Var<T>> {
        self.unary(
            "abs",
            |x| x.abs(),
            |x, _| {
                if x > T::ZERO {
                    T::ONE
                } else if x < T::ZERO {
                    -T::ONE
                } else {
                    T::ZERO
                }
            },
        )
    }

    pub fn scale(&self, k: f64) -> Result<Var<T>> {
        let kt = T::from_f64(k);
        self.unary("scale", move |x| x * kt, move |_, _| kt)
    }

    pub fn add_scalar(&self, k: f64) -> Result<Var<T>> {
        let kt = T::from_f64(k);
        self.unary("add_scalar", move |x| x + kt, |_, _| T::ONE)
    }

    pub fn sum_all(&self) -> Result<Var<T>> {
        let av = self.value();
        let mut acc = T::ZERO;
        for &x in av.data() {
            acc += x;
        }
        let shape = av.shape().to_vec();
        self.tape()
            .push_op("sum_all", Tensor::scalar(acc), &[self], move || {
                Box::new(move |gout| {
                    let g = gout.data()[0];
                    vec![Tensor::full(shape.clone(), g)]
                })
            })
    }

    pub fn mean_all(&self) -> Result<Var<T>> {
        let n = self.numel();
        self.sum_all()?.scale(1.0 / n as f64)
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<T>> {
        let av = self.value();
        let shape = av.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                ctx: "softmax",
                msg: format!("axis {} out of range for shape {:?}", axis, shape),
            });
        }
        let axis_len = shape[axis];
        let st = strides(&shape);
        let inner = st[axis];
        let outer = av.numel() / (axis_len * inner);
        let ad = av.data();
        let mut data = vec![T::ZERO; av.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut m = ad[base];
                for k in 1..axis_len {
                    let v = ad[base + k * inner];
                    if v > m {
                        m = v;
                    }
                }
                let mut s = T::ZERO;
                for k in 0..axis_len {
                    let e = (ad[base + k * inner] - m).exp();
                    data[base + k * inner] = e;
                    s += e;
                }
                for k in 0..axis_len {
                    data[base + k * inner] = data[base + k * inner] / s;
                }
            }
        }
        let value = Tensor::new_unchecked(shape.clone(), data);
        let y = value.clone();
        self.tape().push_op("softmax", value, &[self], move || {
            Box::new(move |gout| {
                let yd = y.data();
                let gd = gout.data();
                let mut gx = vec![T::ZERO; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * axis_len * inner + i;
                        let mut dot = T::ZERO;
                        for k in 0..axis_len {
                            let p = base + k * inner;
                            dot += gd[p] * yd[p];
                        }
                        for k in 0..axis_len {
                            let p = base + k * inner;
                            gx[p] = yd[p] * (gd[p] - dot);
                        }
                    }
                }
                vec![Tensor::new_unchecked(y.shape().to_vec(), gx)]
            })
        })
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<T>> {
        let av = self.value();
        let old = av.shape().to_vec();
        let value = av.reshaped(shape)?;
        self.tape().push_op("reshape", value, &[self], move || {
            Box::new(move |gout| vec![gout.reshaped(old.clone()).expect("reshape grad")])
        })
    }

    pub fn permute_axes(&self, perm: &[usize]) -> Result<Var<T>> {
        let av = self.value();
        let value = permute_tensor(&av, perm)?;
        let mut inv = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        self.tape().push_op("permute_axes", value, &[self], move || {
            Box::new(move |gout| vec![permute_tensor(gout, &inv).expect("permute grad")])
        })
    }

    /// Slice along `axis`, keeping `[start, start+len)`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let av = self.value();
        let value = narrow_tensor(&av, axis, start, len)?;
        let full_shape = av.shape().to_vec();
        self.tape().push_op("narrow", value, &[self], move || {
            Box::new(move |gout| {
                let mut out = vec![T::ZERO; full_shape.iter().product()];
                paste_tensor(&mut out, &full_shape, gout, axis, start);
                vec![Tensor::new_unchecked(full_shape.clone(), out)]
            })
        })
    }

    /// Zero-pad spatial dims of an NCHW tensor.
    pub fn pad2d(&self, ph: usize, pw: usize) -> Result<Var<T>> {
        let av = self.value();
        let s = nchw(&av, "pad2d")?;
        let (n, c, h, w) = s;
        let (oh, ow) = (h + 2 * ph, w + 2 * pw);
        let mut data = vec![T::ZERO; n * c * oh * ow];
        let ad = av.data();
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    let src = ((ni * c + ci) * h + y) * w;
                    let dst = ((ni * c + ci) * oh + y + ph) * ow + pw;
                    data[dst..dst + w].copy_from_slice(&ad[src..src + w]);
                }
            }
        }
        let value = Tensor::new_unchecked(vec![n, c, oh, ow], data);
        self.tape().push_op("pad2d", value, &[self], move || {
            Box::new(move |gout| {
                let gd = gout.data();
                let mut gx = vec![T::ZERO; n * c * h * w];
                for ni in 0..n {
                    for ci in 0..c {
                        for y in 0..h {
                            let dst = ((ni * c + ci) * h + y) * w;
                            let src = ((ni * c + ci) * oh + y + ph) * ow + pw;
                            gx[dst..dst + w].copy_from_slice(&gd[src..src + w]);
                        }
                    }
                }
                vec![Tensor::new_unchecked(vec![n, c, h, w], gx)]
            })
        })
    }

    /// Crop spatial dims of an NCHW tensor to `[0, th) x [0, tw)`.
    pub fn crop2d(&self, th: usize, tw: usize) -> Result<Var<T>> {
        let av = self.value();
        let (n, c, h, w) = nchw(&av, "crop2d")?;
        if th > h || tw > w {
            return Err(TensorError::Invalid {
                ctx: "crop2d",
                msg: format!("crop {}x{} exceeds {}x{}", th, tw, h, w),
            });
        }
        let ad = av.data();
        let mut data = vec![T::ZERO; n * c * th * tw];
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..th {
                    let src = ((ni * c + ci) * h + y) * w;
                    let dst = ((ni * c + ci) * th + y) * tw;
                    data[dst..dst + tw].copy_from_slice(&ad[src..src + tw]);
                }
            }
        }
        let value = Tensor::new_unchecked(vec![n, c, th, tw], data);
        self.tape().push_op("crop2d", value, &[self], move || {
            Box::new(move |gout| {
                let gd = gout.data();
                let mut gx = vec![T::ZERO; n * c * h * w];
                for ni in 0..n {
                    for ci in 0..c {
                        for y in 0..th {
                            let dst = ((ni * c + ci) * h + y) * w;
                            let src = ((ni * c + ci) * th + y) * tw;
                            gx[dst..dst + tw].copy_from_slice(&gd[src..src + tw]);
                        }
                    }
                }
                vec![Tensor::new_unchecked(vec![n, c, h, w], gx)]
            })
        })
    }

    /// Nearest-neighbor upsampling of an NCHW tensor by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Var<T>> {
        let av = self.value();
        let (n, c, h, w) = nchw(&av, "upsample_nearest")?;
        let (oh, ow) = (h * factor, w * factor);
        let ad = av.data();
        let mut data = vec![T::ZERO; n * c * oh * ow];
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        data[((ni * c + ci) * oh + y) * ow + x] =
                            ad[((ni * c + ci) * h + y / factor) * w + x / factor];
                    }
                }
            }
        }
        let value = Tensor::new_unchecked(vec![n, c, oh, ow], data);
        self.tape()
            .push_op("upsample_nearest", value, &[self], move || {
                Box::new(move |gout| {
                    let gd = gout.data();
                    let mut gx = vec![T::ZERO; n * c * h * w];
                    for ni in 0..n {
                        for ci in 0..c {
                            for y in 0..oh {
                                for x in 0..ow {
                                    gx[((ni * c + ci) * h + y / factor) * w + x / factor] +=
                                        gd[((ni * c + ci) * oh + y) * ow + x];
                                }
                            }
                        }
                    }
                    vec![Tensor::new_unchecked(vec![n, c, h, w], gx)]
                })
            })
    }

    /// Trades 2x2 spatial blocks for channels: `[N,C,H,W] -> [N,4C,H/2,W/2]`.
    /// Output channel `c*4 + 2*dy + dx` holds input channel `c` at spatial
    /// offset `(dy, dx)` inside each block.
    pub fn squeeze2x2(&self) -> Result<Var<T>> {
        let av = self.value();
        let value = squeeze2x2_tensor(&av)?;
        self.tape().push_op("squeeze2x2", value, &[self], move || {
            Box::new(move |gout| vec![unsqueeze2x2_tensor(gout).expect("squeeze grad")])
        })
    }

    pub fn unsqueeze2x2(&self) -> Result<Var<T>> {
        let av = self.value();
        let value = unsqueeze2x2_tensor(&av)?;
        self.tape()
            .push_op("unsqueeze2x2", value, &[self], move || {
                Box::new(move |gout| vec![squeeze2x2_tensor(gout).expect("unsqueeze grad")])
            })
    }

    /// Reorders channels of an NCHW tensor: `out[:, k] = in[:, perm[k]]`.
    pub fn permute_channels(&self, perm: &[usize]) -> Result<Var<T>> {
        let av = self.value();
        let (n, c, h, w) = nchw(&av, "permute_channels")?;
        if perm.len() != c {
            return Err(TensorError::Invalid {
                ctx: "permute_channels",
                msg: format!("permutation length {} != channels {}", perm.len(), c),
            });
        }
        let value = permute_channels_tensor(&av, perm)?;
        let mut inv = vec![0usize; c];
        for (k, &p) in perm.iter().enumerate() {
            inv[p] = k;
        }
        let _ = (n, h, w);
        self.tape()
            .push_op("permute_channels", value, &[self], move || {
                Box::new(move |gout| {
                    vec![permute_channels_tensor(gout, &inv).expect("permute_channels grad")]
                })
            })
    }

    /// Scatters the flat elements of `self` into a zero tensor of `shape`
    /// at the given flat positions. Positions must be unique.
    pub fn assemble(&self, shape: Vec<usize>, positions: Vec<usize>) -> Result<Var<T>> {
        let av = self.value();
        if positions.len() != av.numel() {
            return Err(TensorError::Invalid {
                ctx: "assemble",
                msg: format!(
                    "{} positions for {} elements",
                    positions.len(),
                    av.numel()
                ),
            });
        }
        let n: usize = shape.iter().product();
        let mut data = vec![T::ZERO; n];
        for (&p, &v) in positions.iter().zip(av.data()) {
            data[p] = v;
        }
        let value = Tensor::new_unchecked(shape, data);
        let in_shape = av.shape().to_vec();
        self.tape().push_op("assemble", value, &[self], move || {
            Box::new(move |gout| {
                let gd = gout.data();
                let g: Vec<T> = positions.iter().map(|&p| gd[p]).collect();
                vec![Tensor::new_unchecked(in_shape.clone(), g)]
            })
        })
    }
}

/// Concatenates along `axis`.
pub fn concat<T: Scalar>(vars: &[&Var<T>], axis: usize) -> Result<Var<T>> {
    if vars.is_empty() {
        return Err(TensorError::Invalid {
            ctx: "concat",
            msg: "empty input list".into(),
        });
    }
    let tape = vars[0].tape().clone();
    for v in &vars[1..] {
        vars[0].same_tape(v)?;
    }
    let values: Vec<Tensor<T>> = vars.iter().map(|v| v.value()).collect();
    let base = values[0].shape().to_vec();
    let mut out_shape = base.clone();
    let mut total = 0usize;
    for v in &values {
        let s = v.shape();
        if s.len() != base.len() {
            return Err(TensorError::ShapeMismatch {
                ctx: "concat",
                expected: base.clone(),
                got: s.to_vec(),
            });
        }
        for (d, (&x, &y)) in base.iter().zip(s.iter()).enumerate() {
            if d != axis && x != y {
                return Err(TensorError::ShapeMismatch {
                    ctx: "concat",
                    expected: base.clone(),
                    got: s.to_vec(),
                });
            }
        }
        total += s[axis];
    }
    out_shape[axis] = total;
    let mut data = vec![T::ZERO; out_shape.iter().product()];
    let mut offset = 0usize;
    for v in &values {
        paste_tensor(&mut data, &out_shape, v, axis, offset);
        offset += v.shape()[axis];
    }
    let value = Tensor::new_unchecked(out_shape.clone(), data);
    let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let parents: Vec<&Var<T>> = vars.to_vec();
    tape.push_op("concat", value, &parents, move || {
        Box::new(move |gout| {
            let mut grads = Vec::with_capacity(lens.len());
            let mut start = 0usize;
            for &len in &lens {
                grads.push(narrow_tensor(gout, axis, start, len).expect("concat grad"));
                start += len;
            }
            grads
        })
    })
}

#[inline]
fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

pub(crate) fn nchw<T: Scalar>(t: &Tensor<T>, ctx: &'static str) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(TensorError::Invalid {
            ctx,
            msg: format!("expected NCHW tensor, got shape {:?}", s),
        });
    }
    Ok((s[0], s[1], s[2], s[3]))
}

pub(crate) fn permute_tensor<T: Scalar>(t: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let shape = t.shape();
    if perm.len() != shape.len() {
        return Err(TensorError::Invalid {
            ctx: "permute_axes",
            msg: format!("permutation {:?} for shape {:?}", perm, shape),
        });
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let out_strides = strides(&out_shape);
    let td = t.data();
    let mut data = vec![T::ZERO; td.len()];
    for (idx, slot) in data.iter_mut().enumerate() {
        let mut src = 0usize;
        for d in 0..out_shape.len() {
            let c = idx / out_strides[d] % out_shape[d];
            src += c * in_strides[perm[d]];
        }
        *slot = td[src];
    }
    Ok(Tensor::new_unchecked(out_shape, data))
}

pub(crate) fn narrow_tensor<T: Scalar>(
    t: &Tensor<T>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<T>> {
    let shape = t.shape();
    if axis >= shape.len() || start + len > shape[axis] {
        return Err(TensorError::Invalid {
            ctx: "narrow",
            msg: format!(
                "range {}..{} on axis {} of shape {:?}",
                start,
                start + len,
                axis,
                shape
            ),
        });
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let td = t.data();
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        let base = (o * shape[axis] + start) * inner;
        data.extend_from_slice(&td[base..base + len * inner]);
    }
    Ok(Tensor::new_unchecked(out_shape, data))
}

/// Writes `piece` into `out` (of shape `out_shape`) at `start` along `axis`.
pub(crate) fn paste_tensor<T: Scalar>(
    out: &mut [T],
    out_shape: &[usize],
    piece: &Tensor<T>,
    axis: usize,
    start: usize,
) {
    let ps = piece.shape();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let outer: usize = out_shape[..axis].iter().product();
    let len = ps[axis];
    let pd = piece.data();
    for o in 0..outer {
        let dst = (o * out_shape[axis] + start) * inner;
        let src = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&pd[src..src + len * inner]);
    }
}

pub(crate) fn squeeze2x2_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw(t, "squeeze2x2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::Invalid {
            ctx: "squeeze2x2",
            msg: format!("odd spatial dims {}x{}", h, w),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let td = t.data();
    let mut data = vec![T::ZERO; td.len()];
    for ni in 0..n {
        for ci in 0..c {
            for dy in 0..2 {
                for dx in 0..2 {
                    let oc = ci * 4 + dy * 2 + dx;
                    for y in 0..oh {
                        for x in 0..ow {
                            data[((ni * 4 * c + oc) * oh + y) * ow + x] =
                                td[((ni * c + ci) * h + 2 * y + dy) * w + 2 * x + dx];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new_unchecked(vec![n, 4 * c, oh, ow], data))
}

pub(crate) fn unsqueeze2x2_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c4, h, w) = nchw(t, "unsqueeze2x2")?;
    if c4 % 4 != 0 {
        return Err(TensorError::Invalid {
            ctx: "unsqueeze2x2",
            msg: format!("channel count {} not divisible by 4", c4),
        });
    }
    let c = c4 / 4;
    let (oh, ow) = (h * 2, w * 2);
    let td = t.data();
    let mut data = vec![T::ZERO; td.len()];
    for ni in 0..n {
        for ci in 0..c {
            for dy in 0..2 {
                for dx in 0..2 {
                    let ic = ci * 4 + dy * 2 + dx;
                    for y in 0..h {
                        for x in 0..w {
                            data[((ni * c + ci) * oh + 2 * y + dy) * ow + 2 * x + dx] =
                                td[((ni * c4 + ic) * h + y) * w + x];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new_unchecked(vec![n, c, oh, ow], data))
}

pub(crate) fn permute_channels_tensor<T: Scalar>(
    t: &Tensor<T>,
    perm: &[usize],
) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw(t, "permute_channels")?;
    let hw = h * w;
    let td = t.data();
    let mut data = vec![T::ZERO; td.len()];
    for ni in 0..n {
        for (k, &p) in perm.iter().enumerate() {
            let dst = (ni * c + k) * hw;
            let src = (ni * c + p) * hw;
            data[dst..dst + hw].copy_from_slice(&td[src..src + hw]);
        }
    }
    Ok(Tensor::new_unchecked(vec![n, c, h, w], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    fn t64(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn add_basic() {
        let tape = Tape::new();
        let a = tape.leaf(t64(vec![2], vec![1.0, 2.0]));
        let b = tape.leaf(t64(vec![2], vec![3.0, 4.0]));
        assert_eq!(a.add(&b).unwrap().value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn exp_of_zeros_is_ones() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::<f64>::zeros(vec![3]));
        assert_eq!(a.exp().unwrap().value().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::<f64>::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::<f64>::zeros(vec![2, 2]));
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn ln_domain_error() {
        let tape = Tape::new();
        let a = tape.leaf(t64(vec![2], vec![1.0, -1.0]));
        assert!(matches!(a.ln(), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn div_by_zero_error() {
        let tape = Tape::new();
        let a = tape.leaf(t64(vec![1], vec![1.0]));
        let b = tape.leaf(t64(vec![1], vec![0.0]));
        assert!(matches!(a.div(&b), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn broadcast_matches_explicit_tiling() {
        // [1,C,1,1] bias against [N,C,H,W]
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(vec![2, 3, 2, 2], |i| i as f64));
        let b = tape.leaf(t64(vec![1, 3, 1, 1], vec![10.0, 20.0, 30.0]));
        let y = x.add(&b).unwrap().value();
        let tiled = Tensor::from_fn(vec![2, 3, 2, 2], |i| {
            let c = i / 4 % 3;
            i as f64 + 10.0 * (c + 1) as f64
        });
        assert_eq!(y.data(), tiled.data());
    }

    #[test]
    fn broadcast_backward_reduces() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::full(vec![2, 3, 2, 2], 1.0));
        let b = tape.leaf(t64(vec![1, 3, 1, 1], vec![1.0, 2.0, 3.0]));
        let loss = x.mul(&b).unwrap().sum_all().unwrap();
        let g = loss.backward().unwrap();
        // each channel of b multiplies 2*2*2 = 8 ones
        assert_eq!(g.wrt(&b).data(), &[8.0, 8.0, 8.0]);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let tape = Tape::new();
        let a = tape.leaf(t64(vec![3], vec![0.0, 0.0, 0.0]));
        let y = a.softmax(0).unwrap().value();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let b = tape.leaf(t64(vec![2], vec![1000.0, 0.0]));
        let y = b.softmax(0).unwrap().value();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!(y.data()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_closed_form() {
        let tape = Tape::new();
        let a = tape.leaf(t64(vec![2], vec![1.0, 2.0]));
        let y = a.softmax(0).unwrap().value();
        let e1 = 1.0f64.exp();
        let e2 = 2.0f64.exp();
        assert!((y.data()[0] - e1 / (e1 + e2)).abs() < 1e-15);
        assert!((y.data()[1] - e2 / (e1 + e2)).abs() < 1e-15);
    }

    #[test]
    fn squeeze_unsqueeze_roundtrip() {
        let t = Tensor::from_fn(vec![1, 3, 4, 4], |i| i as f64);
        let s = squeeze2x2_tensor(&t).unwrap();
        assert_eq!(s.shape(), &[1, 12, 2, 2]);
        let u = unsqueeze2x2_tensor(&s).unwrap();
        assert_eq!(u.data(), t.data());
    }

    #[test]
    fn squeeze_index_map_oracle() {
        // out[n, c*4 + 2*dy + dx, y, x] == in[n, c, 2y+dy, 2x+dx]
        let (c, h, w) = (3, 4, 6);
        let t = Tensor::from_fn(vec![1, c, h, w], |i| i as f64);
        let s = squeeze2x2_tensor(&t).unwrap();
        for ci in 0..c {
            for dy in 0..2 {
                for dx in 0..2 {
                    for y in 0..h / 2 {
                        for x in 0..w / 2 {
                            let oc = ci * 4 + dy * 2 + dx;
                            let got = s.data()[((oc) * (h / 2) + y) * (w / 2) + x];
                            let want = t.data()[(ci * h + 2 * y + dy) * w + 2 * x + dx];
                            assert_eq!(got, want);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn concat_narrow_roundtrip() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_fn(vec![1, 2, 2, 2], |i| i as f64));
        let b = tape.leaf(Tensor::from_fn(vec![1, 3, 2, 2], |i| 100.0 + i as f64));
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), vec![1, 5, 2, 2]);
        let a2 = c.narrow(1, 0, 2).unwrap();
        let b2 = c.narrow(1, 2, 3).unwrap();
        assert_eq!(a2.value().data(), a.value().data());
        assert_eq!(b2.value().data(), b.value().data());
    }

    #[test]
    fn upsample_then_reduce_grad() {
        let tape = Tape::new();
        let a = tape.leaf(t64(vec![1, 1, 1, 1], vec![2.0]));
        let u = a.upsample_nearest(2).unwrap();
        assert_eq!(u.shape(), vec![1, 1, 2, 2]);
        let g = u.sum_all().unwrap().backward().unwrap();
        assert_eq!(g.wrt(&a).data(), &[4.0]);
    }

    #[test]
    fn assemble_roundtrip_grad() {
        let tape = Tape::new();
        let a = tape.leaf(t64(vec![2], vec![5.0, 7.0]));
        let m = a.assemble(vec![2, 2], vec![1, 2]).unwrap();
        assert_eq!(m.value().data(), &[0.0, 5.0, 7.0, 0.0]);
        let w = tape.leaf(t64(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let g = m.mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(g.wrt(&a).data(), &[2.0, 3.0]);
    }

    #[test]
    fn ops_are_pure() {
        let tape = Tape::new();
        let a = tape.leaf(t64(vec![3], vec![0.3, -1.2, 2.7]));
        let y1 = a.sigmoid().unwrap().value();
        let y2 = a.sigmoid().unwrap().value();
        assert_eq!(y1.data(), y2.data());
    }
}
