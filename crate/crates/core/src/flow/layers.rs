//! The four invertible layer types: actnorm, invertible 1x1 convolution
//! (LU-parameterized), conditional affine coupling, and affine injector.
//!
//! Every layer returns its analytic log|det| summed over the batch; the
//! composite's log-det is the plain sum of these. Coupling and injector
//! subnets have zero-initialized output layers so each step starts as the
//! identity map with log-det 0.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{concat, Var};
use crate::params::{init_conv_weight, ParamStore, Session};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Bounded positive scale activation, equal to 1 at raw == 0:
/// s = (sigmoid(raw + 2) + 1e-3) / (sigmoid(2) + 1e-3).
/// Range is roughly (1.1e-3, 1.135), so ln(s) and 1/s stay finite.
pub fn scale_activation<T: Scalar>(raw: &Var<T>) -> Result<Var<T>> {
    let eps = 1e-3;
    let denom = 1.0 / (1.0 + (-2.0f64).exp()) + eps;
    raw.add_scalar(2.0)?
        .sigmoid()?
        .add_scalar(eps)?
        .scale(1.0 / denom)
}

/// Collector for data-dependent actnorm initialization: when present,
/// actnorm layers derive scale/bias from the activations flowing past and
/// queue them as store updates instead of reading stored parameters.
pub type ActNormInit<T> = Vec<(String, Tensor<T>)>;

pub struct ActNorm {
    prefix: String,
    channels: usize,
}

impl ActNorm {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            prefix: format!("{prefix}/actnorm"),
            channels,
        }
    }

    pub fn init_params<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.insert(
            &format!("{}/scale", self.prefix),
            Tensor::full(vec![1, self.channels, 1, 1], T::ONE),
            true,
        )?;
        store.insert(
            &format!("{}/bias", self.prefix),
            Tensor::zeros(vec![1, self.channels, 1, 1]),
            true,
        )
    }

    fn params<T: Scalar>(
        &self,
        sess: &Session<T>,
        x: &Var<T>,
        init: &mut Option<&mut ActNormInit<T>>,
    ) -> Result<(Var<T>, Var<T>)> {
        if let Some(collector) = init.as_deref_mut() {
            // per-channel moments of the initialization batch
            let v = x.value();
            let (n, c, h, w) = dims4(&v)?;
            let count = (n * h * w) as f64;
            let mut scale = Vec::with_capacity(c);
            let mut bias = Vec::with_capacity(c);
            for ci in 0..c {
                let mut sum = 0.0f64;
                let mut sq = 0.0f64;
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for &val in &v.data()[base..base + h * w] {
                        let f = val.to_f64();
                        sum += f;
                        sq += f * f;
                    }
                }
                let mean = sum / count;
                let var = (sq / count - mean * mean).max(1e-12);
                scale.push(T::from_f64(1.0 / var.sqrt()));
                bias.push(T::from_f64(-mean));
            }
            let scale = Tensor::new_unchecked(vec![1, c, 1, 1], scale);
            let bias = Tensor::new_unchecked(vec![1, c, 1, 1], bias);
            collector.push((format!("{}/scale", self.prefix), scale.clone()));
            collector.push((format!("{}/bias", self.prefix), bias.clone()));
            Ok((sess.constant(scale), sess.constant(bias)))
        } else {
            Ok((
                sess.param(&format!("{}/scale", self.prefix))?,
                sess.param(&format!("{}/bias", self.prefix))?,
            ))
        }
    }

    /// y = s (x + b); logdet = N*H*W * sum_c ln|s_c|.
    pub fn forward<T: Scalar>(
        &self,
        sess: &Session<T>,
        x: &Var<T>,
        init: &mut Option<&mut ActNormInit<T>>,
    ) -> Result<(Var<T>, Var<T>)> {
        let (s, b) = self.params(sess, x, init)?;
        let shape = x.shape();
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let y = x.add(&b)?.mul(&s)?;
        let logdet = s.abs()?.ln()?.sum_all()?.scale((n * h * w) as f64)?;
        Ok((y, logdet))
    }

    pub fn inverse<T: Scalar>(&self, sess: &Session<T>, y: &Var<T>) -> Result<Var<T>> {
        let s = sess.param(&format!("{}/scale", self.prefix))?;
        let b = sess.param(&format!("{}/bias", self.prefix))?;
        y.div(&s)?.sub(&b)
    }
}

pub struct InvConv {
    prefix: String,
    channels: usize,
}

impl InvConv {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            prefix: format!("{prefix}/invconv"),
            channels,
        }
    }

    /// LU-form parameters: fixed permutation and diag signs, trainable
    /// strictly-lower / strictly-upper factors and log|diag|.
    pub fn init_params<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        identity: bool,
    ) -> Result<()> {
        let c = self.channels;
        let tri = c * (c - 1) / 2;
        let (perm, lower, upper, log_diag, sign) = if identity {
            (
                (0..c).map(|i| i as f64).collect::<Vec<_>>(),
                vec![0.0; tri],
                vec![0.0; tri],
                vec![0.0; c],
                vec![1.0; c],
            )
        } else {
            random_rotation_lu(rng, c)
        };
        let ins = |store: &mut ParamStore<T>, name: &str, data: Vec<f64>, shape: Vec<usize>, trainable| {
            store.insert(
                &format!("{}/{}", self.prefix, name),
                Tensor::new_unchecked(shape, data.into_iter().map(T::from_f64).collect()),
                trainable,
            )
        };
        ins(store, "perm", perm, vec![c], false)?;
        ins(store, "sign", sign, vec![c], false)?;
        ins(store, "lower", lower, vec![tri.max(1)], true)?;
        ins(store, "upper", upper, vec![tri.max(1)], true)?;
        ins(store, "log_diag", log_diag, vec![c], true)
    }

    fn lower_positions(c: usize) -> Vec<usize> {
        let mut pos = Vec::with_capacity(c * (c - 1) / 2);
        for i in 1..c {
            for j in 0..i {
                pos.push(i * c + j);
            }
        }
        pos
    }

    fn upper_positions(c: usize) -> Vec<usize> {
        let mut pos = Vec::with_capacity(c * (c - 1) / 2);
        for i in 0..c {
            for j in i + 1..c {
                pos.push(i * c + j);
            }
        }
        pos
    }

    fn factors<T: Scalar>(&self, sess: &Session<T>) -> Result<(Var<T>, Var<T>, Tensor<T>, Var<T>)> {
        let c = self.channels;
        let tri = c * (c - 1) / 2;
        let eye = Tensor::from_fn(vec![c, c], |i| {
            if i / c == i % c {
                T::ONE
            } else {
                T::ZERO
            }
        });
        let lower = sess.param(&format!("{}/lower", self.prefix))?;
        let upper = sess.param(&format!("{}/upper", self.prefix))?;
        let log_diag = sess.param(&format!("{}/log_diag", self.prefix))?;
        let sign = sess.param(&format!("{}/sign", self.prefix))?;
        let l = if tri == 0 {
            sess.constant(eye.clone())
        } else {
            lower
                .narrow(0, 0, tri)?
                .assemble(vec![c, c], Self::lower_positions(c))?
                .add(&sess.constant(eye.clone()))?
        };
        let diag = sign.mul(&log_diag.exp()?)?;
        let diag_positions: Vec<usize> = (0..c).map(|i| i * c + i).collect();
        let u_diag = diag.assemble(vec![c, c], diag_positions)?;
        let u = if tri == 0 {
            u_diag
        } else {
            upper
                .narrow(0, 0, tri)?
                .assemble(vec![c, c], Self::upper_positions(c))?
                .add(&u_diag)?
        };
        Ok((l, u, self.perm_matrix(sess)?, log_diag))
    }

    fn perm_matrix<T: Scalar>(&self, sess: &Session<T>) -> Result<Tensor<T>> {
        let c = self.channels;
        let perm = sess.param(&format!("{}/perm", self.prefix))?.value();
        let mut data = vec![T::ZERO; c * c];
        for (i, &p) in perm.data().iter().enumerate() {
            let col = p.to_f64() as usize;
            data[i * c + col] = T::ONE;
        }
        Ok(Tensor::new_unchecked(vec![c, c], data))
    }

    /// Per-pixel channel mixing y = W x with W = P L U.
    pub fn forward<T: Scalar>(&self, sess: &Session<T>, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let (l, u, p, log_diag) = self.factors(sess)?;
        let w = sess.constant(p).matmul(&l.matmul(&u)?)?;
        let y = apply_channel_matrix(&w, x)?;
        let shape = x.shape();
        let (n, h, wd) = (shape[0], shape[2], shape[3]);
        let logdet = log_diag.sum_all()?.scale((n * h * wd) as f64)?;
        Ok((y, logdet))
    }

    /// Inverse via triangular inverses: W^-1 = U^-1 L^-1 P^T.
    pub fn inverse<T: Scalar>(&self, sess: &Session<T>, y: &Var<T>) -> Result<Var<T>> {
        let (l, u, p, _) = self.factors(sess)?;
        let c = self.channels;
        let pt = {
            let pd = p.data();
            let mut t = vec![T::ZERO; c * c];
            for i in 0..c {
                for j in 0..c {
                    t[j * c + i] = pd[i * c + j];
                }
            }
            sess.constant(Tensor::new_unchecked(vec![c, c], t))
        };
        let w_inv = u
            .matrix_inverse()?
            .matmul(&l.matrix_inverse()?)?
            .matmul(&pt)?;
        apply_channel_matrix(&w_inv, y)
    }
}

/// Applies a [C,C] matrix to the channel dimension of an NCHW tensor.
fn apply_channel_matrix<T: Scalar>(w: &Var<T>, x: &Var<T>) -> Result<Var<T>> {
    let shape = x.shape();
    let (n, c, h, wd) = (shape[0], shape[1], shape[2], shape[3]);
    let flat = x.permute_axes(&[1, 0, 2, 3])?.reshape(vec![c, n * h * wd])?;
    w.matmul(&flat)?
        .reshape(vec![c, n, h, wd])?
        .permute_axes(&[1, 0, 2, 3])
}

/// Two-layer conv subnet: 3x3 (hidden) -> tanh -> 1x1 (out, zero-init).
struct Subnet {
    prefix: String,
    in_c: usize,
    hidden: usize,
    out_c: usize,
}

impl Subnet {
    fn new(prefix: &str, in_c: usize, hidden: usize, out_c: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            in_c,
            hidden,
            out_c,
        }
    }

    fn init_params<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        store.insert(
            &format!("{}/net0/weight", self.prefix),
            init_conv_weight(rng, self.hidden, self.in_c, 3),
            true,
        )?;
        store.insert(
            &format!("{}/net0/bias", self.prefix),
            Tensor::zeros(vec![1, self.hidden, 1, 1]),
            true,
        )?;
        store.insert(
            &format!("{}/net1/weight", self.prefix),
            Tensor::zeros(vec![self.out_c, self.hidden, 1, 1]),
            true,
        )?;
        store.insert(
            &format!("{}/net1/bias", self.prefix),
            Tensor::zeros(vec![1, self.out_c, 1, 1]),
            true,
        )
    }

    fn forward<T: Scalar>(&self, sess: &Session<T>, x: &Var<T>) -> Result<Var<T>> {
        let w0 = sess.param(&format!("{}/net0/weight", self.prefix))?;
        let b0 = sess.param(&format!("{}/net0/bias", self.prefix))?;
        let w1 = sess.param(&format!("{}/net1/weight", self.prefix))?;
        let b1 = sess.param(&format!("{}/net1/bias", self.prefix))?;
        x.conv2d(&w0, Some(&b0), 1, 1, 1)?
            .tanh()?
            .conv2d(&w1, Some(&b1), 1, 0, 1)
    }
}

/// Conditional affine coupling: channels split in half, (s, t) computed
/// from the untouched half and the conditioning features.
pub struct Coupling {
    channels: usize,
    subnet: Subnet,
}

impl Coupling {
    pub fn new(prefix: &str, channels: usize, cond_channels: usize, hidden: usize) -> Self {
        let c1 = channels / 2;
        let c2 = channels - c1;
        Self {
            channels,
            subnet: Subnet::new(
                &format!("{prefix}/coupling"),
                c1 + cond_channels,
                hidden,
                2 * c2,
            ),
        }
    }

    pub fn init_params<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        self.subnet.init_params(store, rng)
    }

    fn split_st<T: Scalar>(&self, raw: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let c2 = self.channels - self.channels / 2;
        let s = scale_activation(&raw.narrow(1, 0, c2)?)?;
        let t = raw.narrow(1, c2, c2)?;
        Ok((s, t))
    }

    fn check_cond<T: Scalar>(&self, x: &Var<T>, cond: &Var<T>) -> Result<()> {
        let (xs, cs) = (x.shape(), cond.shape());
        if xs[0] != cs[0] || xs[2] != cs[2] || xs[3] != cs[3] {
            return Err(TensorError::ShapeMismatch {
                ctx: "coupling cond",
                expected: xs,
                got: cs,
            });
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(
        &self,
        sess: &Session<T>,
        x: &Var<T>,
        cond: &Var<T>,
    ) -> Result<(Var<T>, Var<T>)> {
        self.check_cond(x, cond)?;
        let c1 = self.channels / 2;
        let x1 = x.narrow(1, 0, c1)?;
        let x2 = x.narrow(1, c1, self.channels - c1)?;
        let raw = self.subnet.forward(sess, &concat(&[&x1, cond], 1)?)?;
        let (s, t) = self.split_st(&raw)?;
        let y2 = x2.mul(&s)?.add(&t)?;
        let logdet = s.ln()?.sum_all()?;
        Ok((concat(&[&x1, &y2], 1)?, logdet))
    }

    pub fn inverse<T: Scalar>(
        &self,
        sess: &Session<T>,
        y: &Var<T>,
        cond: &Var<T>,
    ) -> Result<Var<T>> {
        self.check_cond(y, cond)?;
        let c1 = self.channels / 2;
        let y1 = y.narrow(1, 0, c1)?;
        let y2 = y.narrow(1, c1, self.channels - c1)?;
        let raw = self.subnet.forward(sess, &concat(&[&y1, cond], 1)?)?;
        let (s, t) = self.split_st(&raw)?;
        let x2 = y2.sub(&t)?.div(&s)?;
        concat(&[&y1, &x2], 1)
    }
}

/// Affine injector: (s, t) depend only on the conditioning features and
/// transform every channel.
pub struct Injector {
    channels: usize,
    subnet: Subnet,
}

impl Injector {
    pub fn new(prefix: &str, channels: usize, cond_channels: usize, hidden: usize) -> Self {
        Self {
            channels,
            subnet: Subnet::new(&format!("{prefix}/injector"), cond_channels, hidden, 2 * channels),
        }
    }

    pub fn init_params<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        self.subnet.init_params(store, rng)
    }

    fn split_st<T: Scalar>(&self, raw: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let s = scale_activation(&raw.narrow(1, 0, self.channels)?)?;
        let t = raw.narrow(1, self.channels, self.channels)?;
        Ok((s, t))
    }

    pub fn forward<T: Scalar>(
        &self,
        sess: &Session<T>,
        x: &Var<T>,
        cond: &Var<T>,
    ) -> Result<(Var<T>, Var<T>)> {
        let raw = self.subnet.forward(sess, cond)?;
        let (s, t) = self.split_st(&raw)?;
        let y = x.mul(&s)?.add(&t)?;
        let logdet = s.ln()?.sum_all()?;
        Ok((y, logdet))
    }

    pub fn inverse<T: Scalar>(
        &self,
        sess: &Session<T>,
        y: &Var<T>,
        cond: &Var<T>,
    ) -> Result<Var<T>> {
        let raw = self.subnet.forward(sess, cond)?;
        let (s, t) = self.split_st(&raw)?;
        y.sub(&t)?.div(&s)
    }
}

fn dims4<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(TensorError::Invalid {
            ctx: "actnorm",
            msg: format!("expected NCHW, got {:?}", s),
        });
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Random rotation decomposed as P L U (computed in f64 at init time).
/// Returns (perm, lower-packed, upper-packed, log|diag|, sign(diag)).
fn random_rotation_lu(
    rng: &mut impl Rng,
    c: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    // Gram-Schmidt orthonormalization of a random Gaussian matrix
    let mut q: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..c).map(|_| normal.sample(rng)).collect())
        .collect();
    for i in 0..c {
        for j in 0..i {
            let dot: f64 = (0..c).map(|k| q[i][k] * q[j][k]).sum();
            for k in 0..c {
                q[i][k] -= dot * q[j][k];
            }
        }
        let norm: f64 = (0..c).map(|k| q[i][k] * q[i][k]).sum::<f64>().sqrt();
        for k in 0..c {
            q[i][k] /= norm;
        }
    }
    // LU with partial pivoting: P A = L U, so A = P^T L U; we store the
    // row permutation of P^T.
    let mut a: Vec<f64> = (0..c * c).map(|i| q[i / c][i % c]).collect();
    let mut piv: Vec<usize> = (0..c).collect();
    for col in 0..c {
        let mut best = col;
        for r in col + 1..c {
            if a[r * c + col].abs() > a[best * c + col].abs() {
                best = r;
            }
        }
        if best != col {
            piv.swap(col, best);
            for j in 0..c {
                a.swap(col * c + j, best * c + j);
            }
        }
        let d = a[col * c + col];
        for r in col + 1..c {
            let f = a[r * c + col] / d;
            a[r * c + col] = f;
            for j in col + 1..c {
                a[r * c + j] -= f * a[col * c + j];
            }
        }
    }
    // perm p: row i of the original matrix came from pivoted row; we need
    // W = P_mat L U with P_mat[i, piv[i]] = ... P^T scatter: original row
    // piv[i] holds combined row i, so P_mat maps row index i -> piv[i].
    let mut perm = vec![0.0f64; c];
    for (i, &p) in piv.iter().enumerate() {
        perm[p] = i as f64;
    }
    let mut lower = Vec::with_capacity(c * (c - 1) / 2);
    for i in 1..c {
        for j in 0..i {
            lower.push(a[i * c + j]);
        }
    }
    let mut upper = Vec::with_capacity(c * (c - 1) / 2);
    let mut log_diag = Vec::with_capacity(c);
    let mut sign = Vec::with_capacity(c);
    for i in 0..c {
        for j in i + 1..c {
            upper.push(a[i * c + j]);
        }
        let d = a[i * c + i];
        log_diag.push(d.abs().ln());
        sign.push(if d >= 0.0 { 1.0 } else { -1.0 });
    }
    (perm, lower, upper, log_diag, sign)
}
