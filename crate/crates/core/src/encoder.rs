//! Multi-resolution parallel conditional encoder.
//!
//! From the low-light LR input it builds a 10-channel conditioned input
//! (image, equalized image, color ratio map of the equalized image, max
//! gradient), runs parallel attention streams at three resolutions with
//! cross-resolution blending, and emits (a) a predicted color ratio map on
//! the channel simplex and (b) one conditioning feature map per flow level
//! at that level's post-squeeze grid.

use rand::Rng;

use crate::autodiff::Var;
use crate::crmap::cr_map;
use crate::flow::FlowLayout;
use crate::params::{init_conv_weight, ParamStore, Session};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Per-level conditioning features plus the LR color-ratio prediction.
pub struct CondFeatures<T: Scalar> {
    /// One map per flow level, spatial dims equal to the level's grid.
    pub per_level: Vec<Var<T>>,
    /// `[N, 3, h, w]` at LR resolution; rows on the channel simplex.
    pub cr_pred: Var<T>,
}

/// Rec. 601 luma weights.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
const HIST_BINS: usize = 256;

/// Per-image luminance histogram equalization: 256-bin CDF remap of the
/// luma channel, applied to RGB by a common per-pixel gain. Images whose
/// luma range is below 1/255 pass through unchanged.
pub fn histeq<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(TensorError::Invalid {
            ctx: "histeq",
            msg: format!("expected [N,3,H,W], got {:?}", s),
        });
    }
    let (n, hw) = (s[0], s[2] * s[3]);
    let d = x.data();
    let mut out = d.to_vec();
    for ni in 0..n {
        let base = ni * 3 * hw;
        let luma: Vec<f64> = (0..hw)
            .map(|p| {
                LUMA[0] * d[base + p].to_f64()
                    + LUMA[1] * d[base + hw + p].to_f64()
                    + LUMA[2] * d[base + 2 * hw + p].to_f64()
            })
            .collect();
        let lo = luma.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = luma.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1.0 / 255.0 {
            continue;
        }
        let mut hist = [0usize; HIST_BINS];
        let bin = |v: f64| ((v * (HIST_BINS - 1) as f64).round() as usize).min(HIST_BINS - 1);
        for &v in &luma {
            hist[bin(v)] += 1;
        }
        let mut cdf = [0.0f64; HIST_BINS];
        let mut acc = 0usize;
        for (i, &h) in hist.iter().enumerate() {
            acc += h;
            cdf[i] = acc as f64 / hw as f64;
        }
        for p in 0..hw {
            let y = luma[p];
            let gain = if y > 1e-8 { cdf[bin(y)] / y } else { 1.0 };
            for c in 0..3 {
                let v = d[base + c * hw + p].to_f64() * gain;
                out[base + c * hw + p] = T::from_f64(v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(Tensor::new_unchecked(s.to_vec(), out))
}

/// Per pixel, the maximum over channels and directions of the absolute
/// forward difference; zero at the far boundary. `[N,C,H,W] -> [N,1,H,W]`.
pub fn maxgrad<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let s = m.shape();
    if s.len() != 4 {
        return Err(TensorError::Invalid {
            ctx: "maxgrad",
            msg: format!("expected NCHW, got {:?}", s),
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let d = m.data();
    let mut out = vec![T::ZERO; n * h * w];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for y in 0..h {
                for x in 0..w {
                    let v = d[base + y * w + x].to_f64();
                    let gh = if x + 1 < w {
                        (d[base + y * w + x + 1].to_f64() - v).abs()
                    } else {
                        0.0
                    };
                    let gv = if y + 1 < h {
                        (d[base + (y + 1) * w + x].to_f64() - v).abs()
                    } else {
                        0.0
                    };
                    let o = &mut out[ni * h * w + y * w + x];
                    *o = T::from_f64(o.to_f64().max(gh).max(gv));
                }
            }
        }
    }
    Ok(Tensor::new_unchecked(vec![n, 1, h, w], out))
}

/// [x, histeq(x), CR(histeq(x)), maxgrad(CR(histeq(x)))] -> `[N,10,h,w]`.
/// The gradient channel is normalized by its per-image max (zeros stay
/// zeros). Pure preprocessing: a deterministic function of x alone.
pub fn build_cond_input<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let eq = histeq(x)?;
    let cr = cr_map(&eq)?;
    let g = maxgrad(&cr)?;
    let s = x.shape();
    let (n, hw) = (s[0], s[2] * s[3]);
    let gd = g.data();
    let mut out = Vec::with_capacity(n * 10 * hw);
    for ni in 0..n {
        out.extend_from_slice(&x.data()[ni * 3 * hw..(ni + 1) * 3 * hw]);
        out.extend_from_slice(&eq.data()[ni * 3 * hw..(ni + 1) * 3 * hw]);
        out.extend_from_slice(&cr.data()[ni * 3 * hw..(ni + 1) * 3 * hw]);
        let gmax = gd[ni * hw..(ni + 1) * hw]
            .iter()
            .map(|v| v.to_f64())
            .fold(0.0, f64::max);
        if gmax > 0.0 {
            out.extend(
                gd[ni * hw..(ni + 1) * hw]
                    .iter()
                    .map(|v| T::from_f64(v.to_f64() / gmax)),
            );
        } else {
            out.extend(std::iter::repeat(T::ZERO).take(hw));
        }
    }
    Ok(Tensor::new_unchecked(vec![s[0], 10, s[2], s[3]], out))
}

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    /// Channel width of every stream.
    pub width: usize,
    pub heads: usize,
    pub window: usize,
    /// Number of [attention -> ffn -> blend] stages.
    pub stages: usize,
    /// Parallel resolution streams (LR, LR/2, LR/4, ...).
    pub streams: usize,
}

impl EncoderConfig {
    /// Smallest configuration exercising every submodule.
    pub fn desk() -> Self {
        Self {
            width: 48,
            heads: 4,
            window: 8,
            stages: 2,
            streams: 3,
        }
    }
}

pub struct Encoder {
    pub cfg: EncoderConfig,
    /// Channels of each per-level conditioning map.
    pub cond_channels: usize,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, cond_channels: usize) -> Result<Self> {
        if cfg.width % cfg.heads != 0 {
            return Err(TensorError::Invalid {
                ctx: "Encoder",
                msg: format!("width {} not divisible by heads {}", cfg.width, cfg.heads),
            });
        }
        if cfg.streams == 0 || cfg.stages == 0 {
            return Err(TensorError::Invalid {
                ctx: "Encoder",
                msg: "streams and stages must be positive".into(),
            });
        }
        Ok(Self { cfg, cond_channels })
    }

    pub fn init_params<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        levels: usize,
    ) -> Result<()> {
        let w = self.cfg.width;
        let conv = |store: &mut ParamStore<T>,
                    mut rng: &mut dyn rand::RngCore,
                    name: &str,
                    o: usize,
                    i: usize,
                    k: usize,
                    zero: bool|
         -> Result<()> {
            let weight = if zero {
                Tensor::zeros(vec![o, i, k, k])
            } else {
                init_conv_weight(&mut rng, o, i, k)
            };
            store.insert(&format!("encoder/{name}/weight"), weight, true)?;
            store.insert(
                &format!("encoder/{name}/bias"),
                Tensor::zeros(vec![1, o, 1, 1]),
                true,
            )
        };
        conv(store, rng, "stem", w, 10, 3, false)?;
        for s in 1..self.cfg.streams {
            conv(store, rng, &format!("down{s}"), w, w, 3, false)?;
        }
        for st in 0..self.cfg.stages {
            for s in 0..self.cfg.streams {
                let p = format!("stage{st}/stream{s}");
                conv(store, rng, &format!("{p}/attn/q"), w, w, 1, false)?;
                conv(store, rng, &format!("{p}/attn/k"), w, w, 1, false)?;
                conv(store, rng, &format!("{p}/attn/v"), w, w, 1, false)?;
                conv(store, rng, &format!("{p}/attn/o"), w, w, 1, true)?;
                conv(store, rng, &format!("{p}/ffn/expand"), 2 * w, w, 1, false)?;
                // depthwise: one 3x3 filter per channel
                store.insert(
                    &format!("encoder/{p}/ffn/dw/weight"),
                    init_conv_weight(rng, 2 * w, 1, 3),
                    true,
                )?;
                store.insert(
                    &format!("encoder/{p}/ffn/dw/bias"),
                    Tensor::zeros(vec![1, 2 * w, 1, 1]),
                    true,
                )?;
                conv(store, rng, &format!("{p}/ffn/project"), w, 2 * w, 1, true)?;
            }
            for i in 0..self.cfg.streams {
                for j in 0..self.cfg.streams {
                    if i != j {
                        // finer source (lower stream index) is reduced by
                        // a strided 3x3; coarser sources use a 1x1 head
                        let k = if j < i { 3 } else { 1 };
                        conv(store, rng, &format!("stage{st}/blend/{j}to{i}"), w, w, k, true)?;
                    }
                }
            }
        }
        conv(store, rng, "head/cr", 3, w, 1, false)?;
        for l in 0..levels {
            conv(store, rng, &format!("head/cond{l}"), self.cond_channels, w, 1, false)?;
        }
        Ok(())
    }

    fn conv<T: Scalar>(
        &self,
        sess: &Session<T>,
        name: &str,
        x: &Var<T>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var<T>> {
        let w = sess.param(&format!("encoder/{name}/weight"))?;
        let b = sess.param(&format!("encoder/{name}/bias"))?;
        x.conv2d(&w, Some(&b), stride, pad, groups)
    }

    /// Non-overlapping window multi-head self-attention with a residual
    /// connection; inputs whose spatial dims are not multiples of the
    /// window are zero-padded bottom/right and cropped back.
    pub fn window_attention<T: Scalar>(
        &self,
        sess: &Session<T>,
        prefix: &str,
        x: &Var<T>,
    ) -> Result<Var<T>> {
        let (wsz, heads) = (self.cfg.window, self.cfg.heads);
        let s = x.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hd = c / heads;
        let (hp, wp) = (h.div_ceil(wsz) * wsz, w.div_ceil(wsz) * wsz);
        let xin = if (hp, wp) == (h, w) {
            x.clone()
        } else {
            // bottom/right-only zero padding
            x.pad2d(hp - h, wp - w)?
                .narrow(2, hp - h, hp)?
                .narrow(3, wp - w, wp)?
        };
        let q = self.conv(sess, &format!("{prefix}/attn/q"), &xin, 1, 0, 1)?;
        let k = self.conv(sess, &format!("{prefix}/attn/k"), &xin, 1, 0, 1)?;
        let v = self.conv(sess, &format!("{prefix}/attn/v"), &xin, 1, 0, 1)?;
        let (nh, nw) = (hp / wsz, wp / wsz);
        let to_seq = |t: &Var<T>| -> Result<Var<T>> {
            // [N,C,Hp,Wp] -> [N*nh*nw*heads, wsz*wsz, hd]
            t.reshape(vec![n, heads, hd, nh, wsz, nw, wsz])?
                .permute_axes(&[0, 3, 5, 1, 4, 6, 2])?
                .reshape(vec![n * nh * nw * heads, wsz * wsz, hd])
        };
        let qs = to_seq(&q)?.scale(1.0 / (hd as f64).sqrt())?;
        let ks = to_seq(&k)?;
        let vs = to_seq(&v)?;
        let attn = qs.bmm(&ks.permute_axes(&[0, 2, 1])?)?.softmax(2)?;
        let out = attn.bmm(&vs)?;
        let spatial = out
            .reshape(vec![n, nh, nw, heads, wsz, wsz, hd])?
            .permute_axes(&[0, 3, 6, 1, 4, 2, 5])?
            .reshape(vec![n, c, hp, wp])?;
        let proj = self.conv(sess, &format!("{prefix}/attn/o"), &spatial, 1, 0, 1)?;
        x.add(&proj.crop2d(h, w)?)
    }

    /// Pointwise expand (x2) -> depthwise 3x3 -> SiLU -> pointwise project,
    /// with a residual connection.
    pub fn ffn_dwconv<T: Scalar>(
        &self,
        sess: &Session<T>,
        prefix: &str,
        x: &Var<T>,
    ) -> Result<Var<T>> {
        let e = self.conv(sess, &format!("{prefix}/ffn/expand"), x, 1, 0, 1)?;
        let d = self.conv(sess, &format!("{prefix}/ffn/dw"), &e, 1, 1, 2 * self.cfg.width)?;
        let a = d.mul(&d.sigmoid()?)?;
        let p = self.conv(sess, &format!("{prefix}/ffn/project"), &a, 1, 0, 1)?;
        x.add(&p)
    }

    /// Each level receives resampled projections of every other level;
    /// cross projections start at zero, so blending begins as the identity.
    pub fn feature_blend<T: Scalar>(
        &self,
        sess: &Session<T>,
        stage: usize,
        levels: &[Var<T>],
    ) -> Result<Vec<Var<T>>> {
        let mut out = Vec::with_capacity(levels.len());
        for i in 0..levels.len() {
            let (hi, wi) = {
                let s = levels[i].shape();
                (s[2], s[3])
            };
            let mut acc = levels[i].clone();
            for (j, lj) in levels.iter().enumerate() {
                if i == j {
                    continue;
                }
                let sj = lj.shape();
                let name = format!("stage{stage}/blend/{j}to{i}");
                let contrib = if sj[2] > hi {
                    // finer -> coarser: strided conv
                    let f = sj[2] / hi;
                    if sj[2] % hi != 0 || sj[3] % wi != 0 || sj[3] / wi != f {
                        return Err(TensorError::Invalid {
                            ctx: "feature_blend",
                            msg: format!("non-dyadic ratio {:?} vs {:?}", sj, (hi, wi)),
                        });
                    }
                    self.conv(sess, &name, lj, f, 1, 1)?
                } else {
                    // coarser -> finer: 1x1 then nearest upsample
                    let f = hi / sj[2];
                    if hi % sj[2] != 0 || wi % sj[3] != 0 || wi / sj[3] != f {
                        return Err(TensorError::Invalid {
                            ctx: "feature_blend",
                            msg: format!("non-dyadic ratio {:?} vs {:?}", sj, (hi, wi)),
                        });
                    }
                    let p = self.conv(sess, &name, lj, 1, 0, 1)?;
                    if f == 1 { p } else { p.upsample_nearest(f)? }
                };
                acc = acc.add(&contrib)?;
            }
            out.push(acc);
        }
        Ok(out)
    }

    /// Full encoder pass on an LR input. `scale` in {2, 4} relates LR to
    /// the flow's HR crop: layout.hr_size == scale * (h, w).
    pub fn forward<T: Scalar>(
        &self,
        sess: &Session<T>,
        x: &Tensor<T>,
        layout: &FlowLayout,
        scale: usize,
    ) -> Result<CondFeatures<T>> {
        if scale != 2 && scale != 4 {
            return Err(TensorError::Invalid {
                ctx: "encoder_forward",
                msg: format!("scale must be 2 or 4, got {scale}"),
            });
        }
        let s = x.shape();
        if s.len() != 4
            || s[1] != 3
            || s[2] * scale != layout.hr_size.0
            || s[3] * scale != layout.hr_size.1
        {
            return Err(TensorError::Invalid {
                ctx: "encoder_forward",
                msg: format!("input {:?} does not match layout at scale {scale}", s),
            });
        }
        let cond = sess.constant(build_cond_input(x)?);
        let mut streams = vec![self.conv(sess, "stem", &cond, 1, 1, 1)?];
        for si in 1..self.cfg.streams {
            let prev = streams.last().expect("non-empty");
            streams.push(self.conv(sess, &format!("down{si}"), prev, 2, 1, 1)?);
        }
        for st in 0..self.cfg.stages {
            for (si, sv) in streams.iter_mut().enumerate() {
                let p = format!("stage{st}/stream{si}");
                let a = self.window_attention(sess, &p, sv)?;
                *sv = self.ffn_dwconv(sess, &p, &a)?;
            }
            streams = self.feature_blend(sess, st, &streams)?;
        }
        let cr_pred = self
            .conv(sess, "head/cr", &streams[0], 1, 0, 1)?
            .softmax(1)?;
        let mut per_level = Vec::with_capacity(layout.levels);
        for l in 0..layout.levels {
            let (gh, _gw) = layout.grid_at(l);
            // pick the finest stream not finer than the target grid
            let (lh, _lw) = (s[2], s[3]);
            let mut si = 0;
            while si + 1 < streams.len() && (lh >> (si)) > gh {
                si += 1;
            }
            let sr = lh >> si;
            let head = self.conv(sess, &format!("head/cond{l}"), &streams[si], 1, 0, 1)?;
            let map = if sr == gh {
                head
            } else if gh % sr == 0 {
                head.upsample_nearest(gh / sr)?
            } else {
                return Err(TensorError::Invalid {
                    ctx: "encoder_forward",
                    msg: format!("stream res {sr} incompatible with grid {gh}"),
                });
            };
            per_level.push(map);
        }
        Ok(CondFeatures { per_level, cr_pred })
    }
}
