//! Matrix products and inversion on tape variables.

use super::Var;
use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// `out[m,n] += sum_k a[m,k] * b[k,n]`, row-major.
pub(crate) fn matmul_raw<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn transpose_raw<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn mm_tensor<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(TensorError::ShapeMismatch {
            ctx: "matmul",
            expected: sa.to_vec(),
            got: sb.to_vec(),
        });
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![T::ZERO; m * n];
    matmul_raw(a.data(), b.data(), m, k, n, &mut out);
    Ok(Tensor::new_unchecked(vec![m, n], out))
}

impl<T: Scalar> Var<T> {
    /// 2-D matrix product `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.same_tape(other)?;
        let (av, bv) = (self.value(), other.value());
        let value = mm_tensor(&av, &bv)?;
        self.tape().push_op("matmul", value, &[self, other], move || {
            Box::new(move |gout| {
                // dA = G B^T, dB = A^T G
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                let bt = transpose_raw(bv.data(), k, n);
                let at = transpose_raw(av.data(), m, k);
                let mut ga = vec![T::ZERO; m * k];
                let mut gb = vec![T::ZERO; k * n];
                matmul_raw(gout.data(), &bt, m, n, k, &mut ga);
                matmul_raw(&at, gout.data(), k, m, n, &mut gb);
                vec![
                    Tensor::new_unchecked(vec![m, k], ga),
                    Tensor::new_unchecked(vec![k, n], gb),
                ]
            })
        })
    }

    /// Batched matrix product `[B,M,K] x [B,K,N] -> [B,M,N]`.
    pub fn bmm(&self, other: &Var<T>) -> Result<Var<T>> {
        self.same_tape(other)?;
        let (av, bv) = (self.value(), other.value());
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                ctx: "bmm",
                expected: sa,
                got: sb,
            });
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::ZERO; bsz * m * n];
        for i in 0..bsz {
            matmul_raw(
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor::new_unchecked(vec![bsz, m, n], out);
        self.tape().push_op("bmm", value, &[self, other], move || {
            Box::new(move |gout| {
                let mut ga = vec![T::ZERO; bsz * m * k];
                let mut gb = vec![T::ZERO; bsz * k * n];
                for i in 0..bsz {
                    let g = &gout.data()[i * m * n..(i + 1) * m * n];
                    let a = &av.data()[i * m * k..(i + 1) * m * k];
                    let b = &bv.data()[i * k * n..(i + 1) * k * n];
                    let bt = transpose_raw(b, k, n);
                    let at = transpose_raw(a, m, k);
                    matmul_raw(g, &bt, m, n, k, &mut ga[i * m * k..(i + 1) * m * k]);
                    matmul_raw(&at, g, k, m, n, &mut gb[i * k * n..(i + 1) * k * n]);
                }
                vec![
                    Tensor::new_unchecked(vec![bsz, m, k], ga),
                    Tensor::new_unchecked(vec![bsz, k, n], gb),
                ]
            })
        })
    }

    /// Inverse of a square matrix via Gauss-Jordan with partial pivoting.
    /// Backward uses d(A^-1) = -A^-1 dA A^-1.
    pub fn matrix_inverse(&self) -> Result<Var<T>> {
        let av = self.value();
        let s = av.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(TensorError::Invalid {
                ctx: "matrix_inverse",
                msg: format!("expected square matrix, got {:?}", s),
            });
        }
        let n = s[0];
        let inv = invert_raw(av.data(), n).ok_or_else(|| TensorError::Domain {
            ctx: "matrix_inverse",
            msg: "singular matrix".into(),
        })?;
        let value = Tensor::new_unchecked(vec![n, n], inv);
        let y = value.clone();
        self.tape().push_op("matrix_inverse", value, &[self], move || {
            Box::new(move |gout| {
                // dL/dA = -Y^T G Y^T
                let yt = transpose_raw(y.data(), n, n);
                let mut tmp = vec![T::ZERO; n * n];
                matmul_raw(&yt, gout.data(), n, n, n, &mut tmp);
                let mut ga = vec![T::ZERO; n * n];
                matmul_raw(&tmp, &yt, n, n, n, &mut ga);
                for v in ga.iter_mut() {
                    *v = -*v;
                }
                vec![Tensor::new_unchecked(vec![n, n], ga)]
            })
        })
    }
}

pub(crate) fn invert_raw<T: Scalar>(a: &[T], n: usize) -> Option<Vec<T>> {
    let mut m = a.to_vec();
    let mut inv = vec![T::ZERO; n * n];
    for i in 0..n {
        inv[i * n + i] = T::ONE;
    }
    for col in 0..n {
        let mut piv = col;
        let mut best = m[col * n + col].abs();
        for r in col + 1..n {
            let v = m[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == T::ZERO {
            return None;
        }
        if piv != col {
            for j in 0..n {
                m.swap(col * n + j, piv * n + j);
                inv.swap(col * n + j, piv * n + j);
            }
        }
        let d = m[col * n + col];
        for j in 0..n {
            m[col * n + j] = m[col * n + j] / d;
            inv[col * n + j] = inv[col * n + j] / d;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * n + col];
            if f == T::ZERO {
                continue;
            }
            for j in 0..n {
                let mv = m[col * n + j];
                let iv = inv[col * n + j];
                m[r * n + j] -= f * mv;
                inv[r * n + j] -= f * iv;
            }
        }
    }
    Some(inv)
}
