//! Synthetic low-light / low-resolution degradation pipeline and the paired
//! dataset generator.
//!
//! An HR normal-light image is darkened (`beta * (alpha * I)^gamma`),
//! bicubic-downsampled, pushed backwards through a simplified invertible
//! ISP into RAW space, corrupted with heteroscedastic shot/read noise, and
//! processed forward again to sRGB. Clamping to `[0, 1]` happens only at
//! the sRGB endpoints so the noise model stays linear in RAW.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::imageio;
use crate::rngutil;
use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Sampled degradation parameters for one image pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DegradeConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub sigma_s_sq: f64,
    pub sigma_r_sq: f64,
    pub scale: usize,
    pub seed: u64,
    pub mosaic: bool,
}

pub const ALPHA_RANGE: (f64, f64) = (0.9, 1.0);
pub const BETA_RANGE: (f64, f64) = (0.5, 1.0);
pub const GAMMA_RANGE: (f64, f64) = (1.5, 5.0);
pub const LOG_SIGMA_S_SQ_RANGE: (f64, f64) = (-9.210_340_371_976_182, -4.422_848_629_194_137); // [ln 1e-4, ln 0.012]
/// Conditional law of the read noise: log s_r^2 ~ N(2.18 log s_s^2, sd 0.26).
pub const READ_NOISE_SLOPE: f64 = 2.18;
pub const READ_NOISE_SD: f64 = 0.26;

/// Draws darkening and noise parameters from their stated laws.
pub fn sample_degrade_params(rng: &mut impl Rng, scale: usize, seed: u64, mosaic: bool) -> DegradeConfig {
    let alpha = rng.gen_range(ALPHA_RANGE.0..ALPHA_RANGE.1);
    let beta = rng.gen_range(BETA_RANGE.0..BETA_RANGE.1);
    let gamma = rng.gen_range(GAMMA_RANGE.0..GAMMA_RANGE.1);
    let log_ss = rng.gen_range(LOG_SIGMA_S_SQ_RANGE.0..LOG_SIGMA_S_SQ_RANGE.1);
    let normal = Normal::new(READ_NOISE_SLOPE * log_ss, READ_NOISE_SD).expect("valid normal");
    let log_sr = normal.sample(rng);
    DegradeConfig {
        alpha,
        beta,
        gamma,
        sigma_s_sq: log_ss.exp(),
        sigma_r_sq: log_sr.exp(),
        scale,
        seed,
        mosaic,
    }
}

/// `out = beta * (alpha * I)^gamma`, clamped to `[0, 1]`.
pub fn darken<T: Scalar>(img: &Tensor<T>, alpha: f64, beta: f64, gamma: f64) -> Result<Tensor<T>> {
    if alpha <= 0.0 || beta <= 0.0 || gamma < 1.0 {
        return Err(TensorError::Domain {
            ctx: "darken",
            msg: format!("invalid parameters a={alpha} b={beta} g={gamma}"),
        });
    }
    img.map(|v| {
        let u = (v.to_f64() * alpha).max(0.0);
        T::from_f64((beta * u.powf(gamma)).clamp(0.0, 1.0))
    })
}

/// Catmull-Rom cubic convolution weight (a = -0.5).
fn cubic_weight(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * (t * t * t - 5.0 * t * t + 8.0 * t - 4.0)
    } else {
        0.0
    }
}

/// Bicubic downsampling with area-aligned sample positions: output pixel
/// (i, j) reads source position ((i + 0.5) s - 0.5, (j + 0.5) s - 0.5)
/// with 4x4 Catmull-Rom taps and edge clamping.
pub fn bicubic_down<T: Scalar>(img: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let s = img.shape();
    if s.len() != 4 {
        return Err(TensorError::Invalid {
            ctx: "bicubic_down",
            msg: format!("expected NCHW, got {:?}", s),
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(TensorError::Invalid {
            ctx: "bicubic_down",
            msg: format!("dims {h}x{w} not divisible by scale {scale}"),
        });
    }
    let (oh, ow) = (h / scale, w / scale);
    let d = img.data();
    let mut out = vec![T::ZERO; n * c * oh * ow];
    // per-axis taps are separable and identical for every row/column
    let taps = |olen: usize, ilen: usize| -> Vec<([i64; 4], [f64; 4])> {
        (0..olen)
            .map(|o| {
                let src = (o as f64 + 0.5) * scale as f64 - 0.5;
                let base = src.floor() as i64;
                let mut idx = [0i64; 4];
                let mut wt = [0f64; 4];
                for (k, t) in (-1..3).enumerate() {
                    idx[k] = (base + t).clamp(0, ilen as i64 - 1);
                    wt[k] = cubic_weight(src - (base + t) as f64);
                }
                (idx, wt)
            })
            .collect()
    };
    let ty = taps(oh, h);
    let tx = taps(ow, w);
    for ni in 0..n {
        for ci in 0..c {
            let ibase = (ni * c + ci) * h * w;
            let obase = (ni * c + ci) * oh * ow;
            for (oy, (iy, wy)) in ty.iter().enumerate() {
                for (ox, (ix, wx)) in tx.iter().enumerate() {
                    let mut acc = 0.0;
                    for ky in 0..4 {
                        let row = ibase + iy[ky] as usize * w;
                        let mut racc = 0.0;
                        for kx in 0..4 {
                            racc += wx[kx] * d[row + ix[kx] as usize].to_f64();
                        }
                        acc += wy[ky] * racc;
                    }
                    out[obase + oy * ow + ox] = T::from_f64(acc);
                }
            }
        }
    }
    Ok(Tensor::new_unchecked(vec![n, c, oh, ow], out))
}

/// Bicubic upsampling with area-aligned sample positions, the mirror of
/// [`bicubic_down`]: output pixel (i, j) reads source position
/// ((i + 0.5) / s - 0.5, (j + 0.5) / s - 0.5) with 4x4 Catmull-Rom taps
/// and edge clamping. Used as the reference no-learning baseline.
pub fn bicubic_up<T: Scalar>(img: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let s = img.shape();
    if s.len() != 4 {
        return Err(TensorError::Invalid {
            ctx: "bicubic_up",
            msg: format!("expected NCHW, got {:?}", s),
        });
    }
    if scale == 0 {
        return Err(TensorError::Invalid {
            ctx: "bicubic_up",
            msg: "scale must be positive".into(),
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h * scale, w * scale);
    let d = img.data();
    let mut out = vec![T::ZERO; n * c * oh * ow];
    let taps = |olen: usize, ilen: usize| -> Vec<([i64; 4], [f64; 4])> {
        (0..olen)
            .map(|o| {
                let src = (o as f64 + 0.5) / scale as f64 - 0.5;
                let base = src.floor() as i64;
                let mut idx = [0i64; 4];
                let mut wt = [0f64; 4];
                for (k, t) in (-1..3).enumerate() {
                    idx[k] = (base + t).clamp(0, ilen as i64 - 1);
                    wt[k] = cubic_weight(src - (base + t) as f64);
                }
                (idx, wt)
            })
            .collect()
    };
    let ty = taps(oh, h);
    let tx = taps(ow, w);
    for ni in 0..n {
        for ci in 0..c {
            let ibase = (ni * c + ci) * h * w;
            let obase = (ni * c + ci) * oh * ow;
            for (oy, (iy, wy)) in ty.iter().enumerate() {
                for (ox, (ix, wx)) in tx.iter().enumerate() {
                    let mut acc = 0.0;
                    for ky in 0..4 {
                        let row = ibase + iy[ky] as usize * w;
                        let mut racc = 0.0;
                        for kx in 0..4 {
                            racc += wx[kx] * d[row + ix[kx] as usize].to_f64();
                        }
                        acc += wy[ky] * racc;
                    }
                    out[obase + oy * ow + ox] = T::from_f64(acc);
                }
            }
        }
    }
    Ok(Tensor::new_unchecked(vec![n, c, oh, ow], out))
}

/// Fixed white-preserving color correction matrix (rows sum to 1).
pub const CCM: [[f64; 3]; 3] = [
    [1.10, -0.05, -0.05],
    [-0.04, 1.10, -0.06],
    [-0.01, -0.05, 1.06],
];

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let c = |r: usize, cidx: usize| {
        let (r1, r2) = ((r + 1) % 3, (r + 2) % 3);
        let (c1, c2) = ((cidx + 1) % 3, (cidx + 2) % 3);
        m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]
    };
    let mut inv = [[0.0; 3]; 3];
    for r in 0..3 {
        for cc in 0..3 {
            inv[r][cc] = c(cc, r) / det; // adjugate transpose
        }
    }
    inv
}

/// Simplified invertible ISP parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IspParams {
    pub r_gain: f64,
    pub b_gain: f64,
    pub mosaic: bool,
}

impl IspParams {
    /// Neutral parameters: unit gains, mosaic off.
    pub fn identity() -> Self {
        Self {
            r_gain: 1.0,
            b_gain: 1.0,
            mosaic: false,
        }
    }

    /// Gains drawn from the stated ranges.
    pub fn sample(rng: &mut impl Rng, mosaic: bool) -> Self {
        Self {
            r_gain: rng.gen_range(1.9..2.4),
            b_gain: rng.gen_range(1.5..1.9),
            mosaic,
        }
    }
}

/// Smoothstep camera response: v = 3u^2 - 2u^3 on [0, 1].
pub fn crf_forward(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Exact inverse of [`crf_forward`] on [0, 1].
pub fn crf_inverse(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    0.5 - ((1.0 - 2.0 * v).asin() / 3.0).sin()
}

fn apply_ccm<T: Scalar>(img: &Tensor<T>, m: &[[f64; 3]; 3]) -> Tensor<T> {
    let s = img.shape();
    let (n, hw) = (s[0], s[2] * s[3]);
    let d = img.data();
    let mut out = vec![T::ZERO; d.len()];
    for ni in 0..n {
        let base = ni * 3 * hw;
        for p in 0..hw {
            let x = [
                d[base + p].to_f64(),
                d[base + hw + p].to_f64(),
                d[base + 2 * hw + p].to_f64(),
            ];
            for r in 0..3 {
                out[base + r * hw + p] =
                    T::from_f64(m[r][0] * x[0] + m[r][1] * x[1] + m[r][2] * x[2]);
            }
        }
    }
    Tensor::new_unchecked(s.to_vec(), out)
}

/// Bayer color at (y, x) for the RGGB pattern: 0 = R, 1 = G, 2 = B.
fn bayer_color(y: usize, x: usize) -> usize {
    match (y % 2, x % 2) {
        (0, 0) => 0,
        (1, 1) => 2,
        _ => 1,
    }
}

/// `[N,3,H,W] -> [N,1,H,W]`: keep each pixel's Bayer-site channel.
pub fn mosaic_rggb<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let s = img.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::Invalid {
            ctx: "mosaic_rggb",
            msg: format!("dims {h}x{w} must be even"),
        });
    }
    let d = img.data();
    let mut out = vec![T::ZERO; n * h * w];
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let c = bayer_color(y, x);
                out[ni * h * w + y * w + x] = d[(ni * 3 + c) * h * w + y * w + x];
            }
        }
    }
    Ok(Tensor::new_unchecked(vec![n, 1, h, w], out))
}

/// Bilinear RGGB demosaic with replicated borders: `[N,1,H,W] -> [N,3,H,W]`.
pub fn demosaic_rggb<T: Scalar>(raw: &Tensor<T>) -> Result<Tensor<T>> {
    let s = raw.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    let d = raw.data();
    let mut out = vec![T::ZERO; n * 3 * h * w];
    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
    for ni in 0..n {
        let base = ni * h * w;
        let at = |y: i64, x: i64| d[base + clamp(y, h) * w + clamp(x, w)].to_f64();
        for y in 0..h {
            for x in 0..w {
                let (yi, xi) = (y as i64, x as i64);
                let site = bayer_color(y, x);
                let mut px = [0.0f64; 3];
                px[site] = at(yi, xi);
                // cross neighbors (N, S, E, W) and diagonal neighbors
                let cross = (at(yi - 1, xi) + at(yi + 1, xi) + at(yi, xi - 1) + at(yi, xi + 1)) / 4.0;
                let diag = (at(yi - 1, xi - 1)
                    + at(yi - 1, xi + 1)
                    + at(yi + 1, xi - 1)
                    + at(yi + 1, xi + 1))
                    / 4.0;
                let horiz = (at(yi, xi - 1) + at(yi, xi + 1)) / 2.0;
                let vert = (at(yi - 1, xi) + at(yi + 1, xi)) / 2.0;
                match site {
                    0 => {
                        // red site: G from cross, B from diagonals
                        px[1] = cross;
                        px[2] = diag;
                    }
                    2 => {
                        px[1] = cross;
                        px[0] = diag;
                    }
                    _ => {
                        // green site: R and B from the aligned neighbors
                        if y % 2 == 0 {
                            // red row: R horizontal, B vertical
                            px[0] = horiz;
                            px[2] = vert;
                        } else {
                            px[0] = vert;
                            px[2] = horiz;
                        }
                    }
                }
                for c in 0..3 {
                    out[(ni * 3 + c) * h * w + y * w + x] = T::from_f64(px[c]);
                }
            }
        }
    }
    Ok(Tensor::new_unchecked(vec![n, 3, h, w], out))
}

/// sRGB -> RAW: inverse CRF, inverse CCM, mosaic (optional), inverse white
/// balance. Returns the RAW tensor and the count of values clamped on
/// entry to the sRGB domain.
pub fn unprocess<T: Scalar>(img: &Tensor<T>, isp: &IspParams) -> Result<(Tensor<T>, usize)> {
    let s = img.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(TensorError::Invalid {
            ctx: "unprocess",
            msg: format!("expected [N,3,H,W], got {:?}", s),
        });
    }
    let mut clamped = 0usize;
    let lin = img.map(|v| {
        let f = v.to_f64();
        if !(0.0..=1.0).contains(&f) {
            clamped += 1;
        }
        T::from_f64(crf_inverse(f))
    })?;
    let cam = apply_ccm(&lin, &invert3(&CCM));
    let gains = [1.0 / isp.r_gain, 1.0, 1.0 / isp.b_gain];
    let wb = {
        let d = cam.data();
        let (n, hw) = (s[0], s[2] * s[3]);
        let mut out = vec![T::ZERO; d.len()];
        for ni in 0..n {
            for c in 0..3 {
                let base = (ni * 3 + c) * hw;
                for p in 0..hw {
                    out[base + p] = T::from_f64(d[base + p].to_f64() * gains[c]);
                }
            }
        }
        Tensor::new_unchecked(s.to_vec(), out)
    };
    let raw = if isp.mosaic { mosaic_rggb(&wb)? } else { wb };
    Ok((raw, clamped))
}

/// RAW -> sRGB: white balance, demosaic (optional), CCM, CRF, final clamp.
pub fn process<T: Scalar>(raw: &Tensor<T>, isp: &IspParams) -> Result<Tensor<T>> {
    let s = raw.shape().to_vec();
    let gains3 = [isp.r_gain, 1.0, isp.b_gain];
    let balanced = if isp.mosaic {
        if s[1] != 1 {
            return Err(TensorError::Invalid {
                ctx: "process",
                msg: format!("mosaic raw must be [N,1,H,W], got {:?}", s),
            });
        }
        // apply the per-site gain on the mosaic plane, then demosaic
        let (n, h, w) = (s[0], s[2], s[3]);
        let d = raw.data();
        let mut out = vec![T::ZERO; d.len()];
        for ni in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let i = ni * h * w + y * w + x;
                    out[i] = T::from_f64(d[i].to_f64() * gains3[bayer_color(y, x)]);
                }
            }
        }
        demosaic_rggb(&Tensor::new_unchecked(vec![n, 1, h, w], out))?
    } else {
        if s[1] != 3 {
            return Err(TensorError::Invalid {
                ctx: "process",
                msg: format!("raw must be [N,3,H,W], got {:?}", s),
            });
        }
        let (n, hw) = (s[0], s[2] * s[3]);
        let d = raw.data();
        let mut out = vec![T::ZERO; d.len()];
        for ni in 0..n {
            for c in 0..3 {
                let base = (ni * 3 + c) * hw;
                for p in 0..hw {
                    out[base + p] = T::from_f64(d[base + p].to_f64() * gains3[c]);
                }
            }
        }
        Tensor::new_unchecked(s, out)
    };
    let corrected = apply_ccm(&balanced, &CCM);
    corrected.map(|v| T::from_f64(crf_forward(v.to_f64().clamp(0.0, 1.0))))
}

/// Heteroscedastic shot/read noise: per-pixel variance `x s_s^2 + s_r^2`
/// (negative RAW values contribute no shot variance).
pub fn add_noise<T: Scalar>(
    raw: &Tensor<T>,
    sigma_s_sq: f64,
    sigma_r_sq: f64,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    if sigma_s_sq < 0.0 || sigma_r_sq < 0.0 {
        return Err(TensorError::Domain {
            ctx: "add_noise",
            msg: "variance parameters must be non-negative".into(),
        });
    }
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    raw.map(|v| {
        let x = v.to_f64();
        let var = x.max(0.0) * sigma_s_sq + sigma_r_sq;
        T::from_f64(x + var.sqrt() * std_normal.sample(rng))
    })
}

/// Full pipeline: HR normal-light image -> (LR low-light input, HR target).
pub fn degrade_pair<T: Scalar>(
    hr: &Tensor<T>,
    cfg: &DegradeConfig,
    isp: &IspParams,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let dark = darken(hr, cfg.alpha, cfg.beta, cfg.gamma)?;
    let lr = bicubic_down(&dark, cfg.scale)?;
    let (raw, _clamped) = unprocess(&lr, isp)?;
    let noisy = add_noise(&raw, cfg.sigma_s_sq, cfg.sigma_r_sq, rng)?;
    let x = process(&noisy, isp)?;
    Ok((x, hr.clone()))
}

/// One dataset pair's record in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub sigma_s_sq: f64,
    pub sigma_r_sq: f64,
    pub seed: u64,
    pub scale: usize,
}

/// Reads PNGs from `in_dir` (sorted by name, cycled if `count` exceeds the
/// corpus), degrades each, and writes `{id}_lr.png` / `{id}_hr.png` plus
/// `manifest.json`. Unreadable files are skipped and their names returned.
pub fn generate_dataset(
    in_dir: &Path,
    out_dir: &Path,
    scale: usize,
    count: usize,
    seed: u64,
    mosaic: bool,
) -> Result<(Vec<ManifestEntry>, Vec<String>)> {
    let mut files: Vec<_> = std::fs::read_dir(in_dir)
        .map_err(|e| TensorError::Invalid {
            ctx: "generate_dataset",
            msg: format!("{}: {e}", in_dir.display()),
        })?
        .filter_map(|r| r.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    files.sort();
    let mut sources = Vec::new();
    let mut skipped = Vec::new();
    for f in &files {
        match imageio::load_png::<f32>(f) {
            Ok(t) => sources.push((f.clone(), t)),
            Err(_) => skipped.push(f.display().to_string()),
        }
    }
    if sources.is_empty() {
        return Err(TensorError::Invalid {
            ctx: "generate_dataset",
            msg: format!("no readable PNGs in {}", in_dir.display()),
        });
    }
    std::fs::create_dir_all(out_dir).map_err(|e| TensorError::Invalid {
        ctx: "generate_dataset",
        msg: format!("{}: {e}", out_dir.display()),
    })?;
    let mut manifest = Vec::with_capacity(count);
    for i in 0..count {
        let (_, hr) = &sources[i % sources.len()];
        let id = format!("{i:05}");
        // per-pair RNG derived from (seed, id): order-independent
        let mut rng = rngutil::stream(seed, "degrade", i as u64);
        let cfg = sample_degrade_params(&mut rng, scale, seed, mosaic);
        let isp = IspParams::sample(&mut rng, mosaic);
        let (lr, hr_out) = degrade_pair(hr, &cfg, &isp, &mut rng)?;
        imageio::save_png(&out_dir.join(format!("{id}_lr.png")), &lr)?;
        imageio::save_png(&out_dir.join(format!("{id}_hr.png")), &hr_out)?;
        manifest.push(ManifestEntry {
            id,
            alpha: cfg.alpha,
            beta: cfg.beta,
            gamma: cfg.gamma,
            sigma_s_sq: cfg.sigma_s_sq,
            sigma_r_sq: cfg.sigma_r_sq,
            seed,
            scale,
        });
    }
    let json = serde_json::to_string_pretty(&manifest).expect("serializable");
    std::fs::write(out_dir.join("manifest.json"), json).map_err(|e| TensorError::Invalid {
        ctx: "generate_dataset",
        msg: format!("manifest: {e}"),
    })?;
    Ok((manifest, skipped))
}
