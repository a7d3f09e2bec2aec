//! Full-reference image quality metrics: PSNR and SSIM.

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Identical images report this instead of an infinite PSNR.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Per-image and aggregate metric values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

impl MetricReport {
    pub fn from_pairs(per_image: Vec<ImageMetrics>) -> Self {
        let n = per_image.len().max(1) as f64;
        let mean_psnr_db = per_image.iter().map(|m| m.psnr_db).sum::<f64>() / n;
        let mean_ssim = per_image.iter().map(|m| m.ssim).sum::<f64>() / n;
        Self {
            per_image,
            mean_psnr_db,
            mean_ssim,
        }
    }
}

/// 10 log10(peak^2 / MSE), capped at [`PSNR_CAP_DB`] for zero MSE.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            ctx: "psnr",
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    if peak <= 0.0 {
        return Err(TensorError::Domain {
            ctx: "psnr",
            msg: format!("peak must be positive, got {peak}"),
        });
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Rec. 601 luma of an `[N,3,H,W]` image; `[N,1,H,W]` passes through.
fn to_gray<T: Scalar>(img: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let s = img.shape();
    if s.len() != 4 || (s[1] != 1 && s[1] != 3) {
        return Err(TensorError::Invalid {
            ctx: "ssim",
            msg: format!("expected [N,1|3,H,W], got {:?}", s),
        });
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let d = img.data();
    Ok((0..n)
        .map(|ni| {
            (0..hw)
                .map(|p| {
                    if c == 1 {
                        d[ni * hw + p].to_f64()
                    } else {
                        let base = ni * 3 * hw;
                        0.299 * d[base + p].to_f64()
                            + 0.587 * d[base + hw + p].to_f64()
                            + 0.114 * d[base + 2 * hw + p].to_f64()
                    }
                })
                .collect()
        })
        .collect())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Mean structural similarity (Wang-2004 configuration: 11x11 Gaussian
/// window, sigma 1.5, k1 = 0.01, k2 = 0.03, peak 1.0). RGB input is
/// converted to luminance first.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            ctx: "ssim",
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    let s = a.shape();
    let (h, w) = (s[2], s[3]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(TensorError::Invalid {
            ctx: "ssim",
            msg: format!("image {h}x{w} smaller than the {SSIM_WINDOW}-pixel window"),
        });
    }
    let ga = to_gray(a)?;
    let gb = to_gray(b)?;
    let win = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    let mut count = 0usize;
    for (pa, pb) in ga.iter().zip(&gb) {
        // separable Gaussian filtering of the five moment maps
        let filt = |src: &dyn Fn(usize, usize) -> f64| -> Vec<f64> {
            // horizontal pass
            let mut tmp = vec![0.0; h * ow];
            for y in 0..h {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for (k, &wk) in win.iter().enumerate() {
                        acc += wk * src(y, x + k);
                    }
                    tmp[y * ow + x] = acc;
                }
            }
            let mut out = vec![0.0; oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for (k, &wk) in win.iter().enumerate() {
                        acc += wk * tmp[(y + k) * ow + x];
                    }
                    out[y * ow + x] = acc;
                }
            }
            out
        };
        let mu_a = filt(&|y, x| pa[y * w + x]);
        let mu_b = filt(&|y, x| pb[y * w + x]);
        let aa = filt(&|y, x| pa[y * w + x] * pa[y * w + x]);
        let bb = filt(&|y, x| pb[y * w + x] * pb[y * w + x]);
        let ab = filt(&|y, x| pa[y * w + x] * pb[y * w + x]);
        for i in 0..oh * ow {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngutil;
    use rand::Rng;

    fn rand_image(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = rngutil::stream(seed, "img", 0);
        Tensor::from_fn(vec![1, 3, h, w], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn psnr_constant_offset_is_20db() {
        let a = Tensor::<f64>::full(vec![1, 3, 4, 4], 0.3);
        let b = Tensor::<f64>::full(vec![1, 3, 4, 4], 0.4);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_identical_is_capped() {
        let a = rand_image(1, 4, 4);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_matches_formula_and_is_symmetric() {
        let a = rand_image(2, 5, 5);
        let b = rand_image(3, 5, 5);
        let mse: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.numel() as f64;
        let expect = 10.0 * (1.0 / mse).log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - expect).abs() < 1e-9);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let a = rand_image(4, 12, 12);
        let mut rng = rngutil::stream(5, "noise", 0);
        let noise: Vec<f64> = (0..a.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let data: Vec<f64> = a
                .data()
                .iter()
                .zip(&noise)
                .map(|(&v, &n)| (v + amp * n).clamp(0.0, 1.0))
                .collect();
            let b = Tensor::new(a.shape().to_vec(), data).unwrap();
            let p = psnr(&a, &b, 1.0).unwrap();
            assert!(p < last, "amp {amp}: {p} !< {last}");
            last = p;
        }
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = rand_image(6, 16, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_constant_pair_closed_form() {
        let a = Tensor::<f64>::full(vec![1, 3, 16, 16], 0.4);
        let b = Tensor::<f64>::full(vec![1, 3, 16, 16], 0.6);
        let c1 = 1e-4;
        let expect = (2.0 * 0.4 * 0.6 + c1) / (0.16 + 0.36 + c1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn ssim_inverted_checkerboard_is_negative() {
        let a = Tensor::<f64>::from_fn(vec![1, 1, 16, 16], |i| {
            let (y, x) = (i / 16, i % 16);
            if (y + x) % 2 == 0 {
                0.9
            } else {
                0.1
            }
        });
        let b = a.map(|v| 1.0 - v).unwrap();
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = rand_image(7, 8, 8);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn metrics_survive_whole_image_shift() {
        // shift both images by the same offset and crop: values unchanged
        let a = rand_image(8, 20, 20);
        let b = rand_image(9, 20, 20);
        let crop = |t: &Tensor<f64>, dy: usize, dx: usize| {
            let d = t.data();
            Tensor::<f64>::from_fn(vec![1, 3, 16, 16], |i| {
                let c = i / 256;
                let y = (i % 256) / 16 + dy;
                let x = i % 16 + dx;
                d[c * 400 + y * 20 + x]
            })
        };
        let (a0, b0) = (crop(&a, 0, 0), crop(&b, 0, 0));
        let (a1, b1) = (crop(&a, 0, 0), crop(&b, 0, 0));
        assert_eq!(psnr(&a0, &b0, 1.0).unwrap(), psnr(&a1, &b1, 1.0).unwrap());
        let (a2, b2) = (crop(&a, 3, 2), crop(&b, 3, 2));
        // shifted crop: same statistic computed over a different region of
        // the same stationary pair stays in a sane range
        let s = ssim(&a2, &b2).unwrap();
        assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn report_aggregates_means() {
        let r = MetricReport::from_pairs(vec![
            ImageMetrics {
                id: "a".into(),
                psnr_db: 20.0,
                ssim: 0.8,
            },
            ImageMetrics {
                id: "b".into(),
                psnr_db: 30.0,
                ssim: 0.9,
            },
        ]);
        assert!((r.mean_psnr_db - 25.0).abs() < 1e-12);
        assert!((r.mean_ssim - 0.85).abs() < 1e-12);
    }
}
