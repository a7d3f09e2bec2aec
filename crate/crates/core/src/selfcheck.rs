//! Executable invariant suites covering every numerical subsystem, with a
//! machine-readable report.
//!
//! The CLI's `selfcheck` subcommand runs these. A fault-injection hook
//! lets tests confirm the suites actually detect a planted defect (a sign
//! error in the coupling log-determinant) instead of vacuously passing.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::autodiff::gradcheck_subset;
use crate::crmap::cr_map;
use crate::degrade::{add_noise, process, unprocess, IspParams};
use crate::encoder::EncoderConfig;
use crate::flow::{ActNorm, Coupling, FlowLayout, FlowModel, Injector, InvConv};
use crate::metrics::{psnr, ssim};
use crate::params::{ParamStore, Session};
use crate::rngutil;
use crate::tensor::{Result, Tensor, TensorError};
use crate::train::{total_loss, Model};

/// Deliberate defect injected into one suite, used as a negative control
/// on the self-check itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Flip the sign of the coupling layer's analytic log-determinant
    /// before comparing it to the finite-difference Jacobian.
    CouplingLogdetSign,
}

/// One suite's outcome: the largest observed error and its threshold.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub pass: bool,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelfCheckReport {
    pub pass: bool,
    pub suites: Vec<SuiteResult>,
}

/// Runs every suite. `fault` plants a defect so tests can verify the
/// suites have teeth; production callers pass `None`.
pub fn run(seed: u64, fault: Option<Fault>) -> SelfCheckReport {
    let suites = vec![
        wrap("invertibility", 1e-8, || invertibility(seed)),
        wrap("logdet-vs-jacobian", 1e-4, || {
            let errs = logdet_errors(seed, fault)?;
            let worst = errs.iter().fold(0.0f64, |a, (_, e)| a.max(*e));
            let detail = errs
                .iter()
                .map(|(n, e)| format!("{n} {e:.2e}"))
                .collect::<Vec<_>>()
                .join("; ");
            Ok((worst, detail))
        }),
        wrap("gradcheck", 1e-4, || gradcheck_loss(seed)),
        wrap("density-normalization", 1e-2, || {
            density_integral(seed).map(|v| ((v - 1.0).abs(), format!("integral {v:.6}")))
        }),
        wrap("cr-invariance", 1e-6, || cr_invariance(seed)),
        wrap("noise-variance", 0.10, || noise_variance(seed)),
        isp_roundtrip_suite(seed),
        wrap("metric-oracles", 1e-6, || metric_oracles()),
    ];
    let pass = suites.iter().all(|s| s.pass);
    SelfCheckReport { pass, suites }
}

fn wrap(
    name: &str,
    threshold: f64,
    f: impl FnOnce() -> Result<(f64, String)>,
) -> SuiteResult {
    match f() {
        Ok((measured, detail)) => SuiteResult {
            name: name.to_string(),
            pass: measured.is_finite() && measured < threshold,
            measured,
            threshold,
            detail,
        },
        Err(e) => SuiteResult {
            name: name.to_string(),
            pass: false,
            measured: -1.0,
            threshold,
            detail: format!("suite error: {e}"),
        },
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// ln|det| of a dense row-major matrix by Gaussian elimination with
/// partial pivoting.
fn ln_abs_det(mut a: Vec<f64>, n: usize) -> f64 {
    let mut acc = 0.0;
    for col in 0..n {
        let mut best = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[best * n + col].abs() {
                best = r;
            }
        }
        if best != col {
            for j in 0..n {
                a.swap(col * n + j, best * n + j);
            }
        }
        let d = a[col * n + col];
        if d == 0.0 {
            return f64::NEG_INFINITY;
        }
        acc += d.abs().ln();
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            for j in col + 1..n {
                a[r * n + j] -= f * a[col * n + j];
            }
        }
    }
    acc
}

/// Central-difference Jacobian ln|det| of a flat map y(x) with y and x of
/// equal dimension.
fn fd_ln_abs_det(
    dim: usize,
    f: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    x0: &[f64],
) -> Result<f64> {
    let eps = 1e-5;
    let mut jac = vec![0.0f64; dim * dim];
    for j in 0..dim {
        let mut xp = x0.to_vec();
        let mut xm = x0.to_vec();
        xp[j] += eps;
        xm[j] -= eps;
        let yp = f(&xp)?;
        let ym = f(&xm)?;
        for i in 0..dim {
            jac[i * dim + j] = (yp[i] - ym[i]) / (2.0 * eps);
        }
    }
    Ok(ln_abs_det(jac, dim))
}

// ---------------------------------------------------------------- suites

/// Full flow forward -> inverse roundtrip error on random inputs.
fn invertibility(seed: u64) -> Result<(f64, String)> {
    let layout = FlowLayout::new(2, 2, 3, (16, 16))?;
    let model = FlowModel::new(layout, 2, 8)?;
    let mut store: ParamStore<f64> = ParamStore::new();
    let mut rng = rngutil::stream(seed, "sc-inv-init", 0);
    model.init_params(&mut store, &mut rng)?;
    let mut worst = 0.0f64;
    for i in 0..3u64 {
        let mut rng = rngutil::stream(seed, "sc-inv", i);
        let y = Tensor::from_fn(vec![1, 3, 16, 16], |_| rng.gen_range(-0.8..0.8));
        let cond: Vec<Tensor<f64>> = (0..model.layout.levels)
            .map(|l| {
                let (h, w) = model.layout.grid_at(l);
                Tensor::from_fn(vec![1, 2, h, w], |_| rng.gen_range(-0.8..0.8))
            })
            .collect();
        let sess = Session::new(&store, false);
        let yv = sess.constant(y.clone());
        let cv: Vec<_> = cond.iter().map(|t| sess.constant(t.clone())).collect();
        let (pieces, _) = model.forward(&sess, &yv, &cv, None)?;
        let back = model.inverse(&sess, &pieces, &cv)?;
        worst = worst.max(back.value().max_abs_diff(&y)?);
    }
    Ok((worst, "max |x - inverse(forward(x))| over 3 samples".into()))
}

/// Relative errors of the analytic log-determinants against
/// finite-difference Jacobians: each of the four layer types on a 3x4x4
/// input (48-dim Jacobian), then the composite 2-level flow on 3x8x8
/// (192-dim). Shared with the acceptance tests.
pub fn logdet_errors(seed: u64, fault: Option<Fault>) -> Result<Vec<(String, f64)>> {
    let mut store: ParamStore<f64> = ParamStore::new();
    let mut rng = rngutil::stream(seed, "sc-logdet", 0);
    let act = ActNorm::new("chk", 3);
    let conv = InvConv::new("chk", 3);
    let coup = Coupling::new("chk", 3, 2, 6);
    let inj = Injector::new("chk", 3, 2, 6);
    act.init_params(&mut store)?;
    conv.init_params(&mut store, &mut rng, false)?;
    coup.init_params(&mut store, &mut rng)?;
    inj.init_params(&mut store, &mut rng)?;
    // make each layer non-trivial: bent actnorm, live subnet output layers
    store.set(
        "chk/actnorm/scale",
        Tensor::new_unchecked(vec![1, 3, 1, 1], vec![1.3, 0.8, 1.1]),
    )?;
    store.set(
        "chk/actnorm/bias",
        Tensor::new_unchecked(vec![1, 3, 1, 1], vec![0.1, -0.2, 0.05]),
    )?;
    let noise = Normal::new(0.0, 0.3).expect("valid normal");
    for name in ["chk/coupling/net1/weight", "chk/injector/net1/weight"] {
        let shape = store.get(name)?.shape().to_vec();
        store.set(name, Tensor::from_fn(shape, |_| noise.sample(&mut rng)))?;
    }
    // bias the scale halves away from zero so log-dets are O(1)
    store.set(
        "chk/coupling/net1/bias",
        Tensor::new_unchecked(vec![1, 4, 1, 1], vec![-1.0, -1.0, 0.0, 0.0]),
    )?;
    store.set(
        "chk/injector/net1/bias",
        Tensor::new_unchecked(vec![1, 6, 1, 1], vec![-1.0, 1.0, -1.0, 0.0, 0.0, 0.0]),
    )?;
    let cond = Tensor::from_fn(vec![1, 2, 4, 4], |_| rng.gen_range(-0.8..0.8));
    let x0: Vec<f64> = (0..48).map(|_| rng.gen_range(-0.5..0.5)).collect();

    type LayerFn<'a> = Box<dyn Fn(&[f64]) -> Result<(Vec<f64>, f64)> + 'a>;
    let mk = |x: &[f64], sess: &Session<f64>| {
        sess.constant(Tensor::new_unchecked(vec![1, 3, 4, 4], x.to_vec()))
    };
    let cases: Vec<(&str, LayerFn)> = vec![
        (
            "actnorm",
            Box::new(|x| {
                let sess = Session::new(&store, false);
                let (y, ld) = act.forward(&sess, &mk(x, &sess), &mut None)?;
                Ok((y.value().data().to_vec(), ld.value().item()?))
            }),
        ),
        (
            "invconv",
            Box::new(|x| {
                let sess = Session::new(&store, false);
                let (y, ld) = conv.forward(&sess, &mk(x, &sess))?;
                Ok((y.value().data().to_vec(), ld.value().item()?))
            }),
        ),
        (
            "coupling",
            Box::new(|x| {
                let sess = Session::new(&store, false);
                let cv = sess.constant(cond.clone());
                let (y, ld) = coup.forward(&sess, &mk(x, &sess), &cv)?;
                let mut analytic = ld.value().item()?;
                if fault == Some(Fault::CouplingLogdetSign) {
                    analytic = -analytic;
                }
                Ok((y.value().data().to_vec(), analytic))
            }),
        ),
        (
            "injector",
            Box::new(|x| {
                let sess = Session::new(&store, false);
                let cv = sess.constant(cond.clone());
                let (y, ld) = inj.forward(&sess, &mk(x, &sess), &cv)?;
                Ok((y.value().data().to_vec(), ld.value().item()?))
            }),
        ),
    ];

    let mut errs = Vec::with_capacity(cases.len() + 1);
    for (name, f) in &cases {
        let analytic = f(&x0)?.1;
        let numeric = fd_ln_abs_det(48, &|x| f(x).map(|(y, _)| y), &x0)?;
        errs.push((name.to_string(), rel_err(analytic, numeric)));
    }

    // composite 2-level flow on 3x8x8 (192-dim Jacobian)
    let layout = FlowLayout::new(2, 2, 3, (8, 8))?;
    let model = FlowModel::new(layout, 2, 6)?;
    let mut fstore: ParamStore<f64> = ParamStore::new();
    model.init_params(&mut fstore, &mut rng)?;
    let fcond: Vec<Tensor<f64>> = (0..model.layout.levels)
        .map(|l| {
            let (h, w) = model.layout.grid_at(l);
            Tensor::from_fn(vec![1, 2, h, w], |_| rng.gen_range(-0.8..0.8))
        })
        .collect();
    let flat = |x: &[f64]| -> Result<(Vec<f64>, f64)> {
        let sess = Session::new(&fstore, false);
        let y = sess.constant(Tensor::new_unchecked(vec![1, 3, 8, 8], x.to_vec()));
        let cv: Vec<_> = fcond.iter().map(|t| sess.constant(t.clone())).collect();
        let (pieces, ld) = model.forward(&sess, &y, &cv, None)?;
        let z: Vec<f64> = pieces
            .iter()
            .flat_map(|p| p.value().data().to_vec())
            .collect();
        Ok((z, ld.value().item()?))
    };
    let fx0: Vec<f64> = (0..192).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let analytic = flat(&fx0)?.1;
    let numeric = fd_ln_abs_det(192, &|x| flat(x).map(|(y, _)| y), &fx0)?;
    errs.push(("composite".to_string(), rel_err(analytic, numeric)));
    Ok(errs)
}

/// Finite-difference gradient check of the full training loss through
/// encoder, flow forward, and the inverse-pass L1 branch.
fn gradcheck_loss(seed: u64) -> Result<(f64, String)> {
    let layout = FlowLayout::new(2, 2, 3, (16, 16))?;
    let enc = EncoderConfig {
        width: 8,
        heads: 2,
        window: 4,
        stages: 1,
        streams: 2,
    };
    let model = Model::new(layout, 2, 4, 8, enc)?;
    let mut store: ParamStore<f64> = ParamStore::new();
    model.init_params(&mut store, seed)?;
    let mut rng = rngutil::stream(seed, "sc-grad", 0);
    let x = Tensor::from_fn(vec![1, 3, 8, 8], |_| rng.gen_range(0.05..0.95));
    let y = Tensor::from_fn(vec![1, 3, 16, 16], |_| rng.gen_range(0.05..0.95));
    let mut worst = 0.0f64;
    for pname in ["flow/l0/s0/coupling/net0/weight", "encoder/stem/weight"] {
        let p0 = store.get(pname)?.clone();
        let f = |_t: &crate::autodiff::Tape<f64>, pv: &crate::autodiff::Var<f64>| {
            let mut st = ParamStore::new();
            for e in store.iter() {
                st.insert(&e.name, e.value.clone(), e.trainable)?;
            }
            st.set(pname, pv.value())?;
            let sess = Session::with_tape(&st, true, pv.tape().clone());
            sess.bind_override(pname, pv.clone());
            let mut rng = rngutil::stream(seed, "sc-prior", 0);
            let (loss, _) = total_loss(&model, &sess, &x, &y, 1.0, 1.5, &mut rng, None)?;
            Ok(loss)
        };
        let n = p0.numel();
        let coords: Vec<usize> = (0..n).step_by((n / 4).max(1)).take(5).collect();
        let report = gradcheck_subset(f, &p0, &coords, 1e-6, 1e-4)?;
        worst = worst.max(report.max_rel_err);
    }
    Ok((worst, "max rel err over 2 parameter tensors, 5 coords each".into()))
}

/// Numerically integrates the change-of-variables density of a 2-D toy
/// flow (actnorm -> invertible mix -> coupling -> injector) over the grid
/// `[-6, 6]^2` at step 0.05. Must come out as 1 for a correctly
/// normalized model. Shared with the acceptance tests.
pub fn density_integral(seed: u64) -> Result<f64> {
    let mut store: ParamStore<f64> = ParamStore::new();
    let mut rng = rngutil::stream(seed, "sc-density", 0);
    let act = ActNorm::new("toy", 2);
    let conv = InvConv::new("toy", 2);
    let coup = Coupling::new("toy", 2, 2, 6);
    let inj = Injector::new("toy", 2, 2, 6);
    act.init_params(&mut store)?;
    conv.init_params(&mut store, &mut rng, false)?;
    coup.init_params(&mut store, &mut rng)?;
    inj.init_params(&mut store, &mut rng)?;
    // mildly expansive map so the latent mass stays inside the box image
    store.set(
        "toy/actnorm/scale",
        Tensor::new_unchecked(vec![1, 2, 1, 1], vec![1.15, 0.95]),
    )?;
    store.set(
        "toy/actnorm/bias",
        Tensor::new_unchecked(vec![1, 2, 1, 1], vec![0.1, -0.05]),
    )?;
    let noise = Normal::new(0.0, 0.05).expect("valid normal");
    for name in ["toy/coupling/net1/weight", "toy/injector/net1/weight"] {
        let shape = store.get(name)?.shape().to_vec();
        store.set(name, Tensor::from_fn(shape, |_| noise.sample(&mut rng)))?;
    }
    let cond = Tensor::new_unchecked(vec![1, 2, 1, 1], vec![0.3, -0.7]);

    let step = 0.05f64;
    let n = 241usize; // [-6, 6] inclusive
    let ln_norm = -(2.0 * std::f64::consts::PI).ln(); // 2-D standard normal
    let mut integral = 0.0f64;
    for iy in 0..n {
        let a = -6.0 + step * iy as f64;
        for ix in 0..n {
            let b = -6.0 + step * ix as f64;
            let sess = Session::new(&store, false);
            let xv = sess.constant(Tensor::new_unchecked(vec![1, 2, 1, 1], vec![a, b]));
            let cv = sess.constant(cond.clone());
            let (h1, l1) = act.forward(&sess, &xv, &mut None)?;
            let (h2, l2) = conv.forward(&sess, &h1)?;
            let (h3, l3) = coup.forward(&sess, &h2, &cv)?;
            let (h4, l4) = inj.forward(&sess, &h3, &cv)?;
            let z = h4.value();
            let ld = l1.value().item()?
                + l2.value().item()?
                + l3.value().item()?
                + l4.value().item()?;
            let z0 = z.data()[0];
            let z1 = z.data()[1];
            let log_p = ln_norm - 0.5 * (z0 * z0 + z1 * z1) + ld;
            integral += log_p.exp();
        }
    }
    Ok(integral * step * step)
}

/// Nearest-neighbor downsample (top-left of each block), for the CR-map
/// commutation check.
fn nearest_down(t: &Tensor<f64>, s: usize) -> Tensor<f64> {
    let sh = t.shape();
    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let d = t.data();
    Tensor::from_fn(vec![n, c, h / s, w / s], |i| {
        let x = i % (w / s);
        let y = (i / (w / s)) % (h / s);
        let nc = i / ((w / s) * (h / s));
        d[(nc * h + y * s) * w + x * s]
    })
}

/// Illumination invariance, simplex property, and downsample commutation
/// of the color-ratio map.
fn cr_invariance(seed: u64) -> Result<(f64, String)> {
    let mut worst = 0.0f64;
    for i in 0..20u64 {
        let mut rng = rngutil::stream(seed, "sc-cr", i);
        let img = Tensor::from_fn(vec![1, 3, 8, 8], |_| rng.gen_range(0.01..1.0));
        let cr = cr_map(&img)?;
        for k in [0.1, 0.5, 2.0] {
            let scaled = img.map(|v| v * k)?;
            worst = worst.max(cr_map(&scaled)?.max_abs_diff(&cr)?);
        }
        // channel sums form a simplex
        let d = cr.data();
        for p in 0..64 {
            let sum: f64 = d[p] + d[64 + p] + d[128 + p];
            worst = worst.max((sum - 1.0).abs());
        }
        // CR commutes with nearest downsampling (both are pixel-local)
        let a = cr_map(&nearest_down(&img, 2))?;
        let b = nearest_down(&cr, 2);
        worst = worst.max(a.max_abs_diff(&b)?);
    }
    Ok((worst, "scale invariance, simplex sum, downsample commutation".into()))
}

/// Empirical noise variance against the heteroscedastic model
/// `x sigma_s^2 + sigma_r^2` on constant patches.
fn noise_variance(seed: u64) -> Result<(f64, String)> {
    let (ss, sr) = (0.01, 0.001);
    let mut worst = 0.0f64;
    let mut detail = String::new();
    for (k, &x) in [0.1f64, 0.5, 0.9].iter().enumerate() {
        let raw = Tensor::full(vec![1, 1, 256, 256], x);
        let mut rng = rngutil::stream(seed, "sc-noise", k as u64);
        let noisy = add_noise(&raw, ss, sr, &mut rng)?;
        let n = noisy.numel() as f64;
        let mean = noisy.data().iter().sum::<f64>() / n;
        let var = noisy.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expect = x * ss + sr;
        let dev = (var - expect).abs() / expect;
        worst = worst.max(dev);
        detail.push_str(&format!("x={x}: rel dev {dev:.3}; "));
    }
    Ok((worst, detail))
}

fn synth_image(seed: u64) -> Tensor<f64> {
    // smooth multi-frequency pattern standing in for natural content
    let s = seed as f64;
    Tensor::from_fn(vec![1, 3, 32, 32], |i| {
        let c = i / 1024;
        let y = (i % 1024) / 32;
        let x = i % 32;
        let v = (0.2 * x as f64 + 0.13 * y as f64 + s + c as f64).sin()
            + (0.05 * x as f64 * y as f64 / 7.0 + 0.7 * c as f64).cos();
        0.5 + 0.22 * v
    })
}

/// process(unprocess(img)) reconstruction error with and without the
/// Bayer mosaic stage.
fn isp_roundtrip_suite(seed: u64) -> SuiteResult {
    let f = || -> Result<(f64, f64)> {
        let mut worst_off = 0.0f64;
        let mut worst_on = 0.0f64;
        for i in 0..3u64 {
            let img = synth_image(seed.wrapping_mul(31).wrapping_add(i));
            for mosaic in [false, true] {
                let mut rng = rngutil::stream(seed, "sc-isp", i * 2 + mosaic as u64);
                let isp = IspParams::sample(&mut rng, mosaic);
                let (raw, _) = unprocess(&img, &isp)?;
                let back = process(&raw, &isp)?;
                let err = back
                    .data()
                    .iter()
                    .zip(img.data())
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
                    / img.numel() as f64;
                if mosaic {
                    worst_on = worst_on.max(err);
                } else {
                    worst_off = worst_off.max(err);
                }
            }
        }
        Ok((worst_off, worst_on))
    };
    match f() {
        Ok((off, on)) => SuiteResult {
            name: "isp-roundtrip".into(),
            pass: off < 1e-5 && on < 2e-2,
            measured: on,
            threshold: 2e-2,
            detail: format!("mosaic off {off:.2e} (thr 1e-5), mosaic on {on:.2e}"),
        },
        Err(e) => SuiteResult {
            name: "isp-roundtrip".into(),
            pass: false,
            measured: -1.0,
            threshold: 2e-2,
            detail: format!("suite error: {e}"),
        },
    }
}

/// Closed-form metric values: 20 dB for a 0.1 constant offset, unit SSIM
/// for identical inputs, and the luminance-only SSIM of a constant pair.
fn metric_oracles() -> Result<(f64, String)> {
    let a = Tensor::from_fn(vec![1, 3, 16, 16], |i| 0.2 + 0.5 * ((i % 17) as f64 / 17.0));
    let b = a.map(|v| v + 0.1)?;
    let mut worst = (psnr(&a, &b, 1.0)? - 20.0).abs();
    worst = worst.max((ssim(&a, &a)? - 1.0).abs());
    let c4 = Tensor::full(vec![1, 3, 16, 16], 0.4);
    let c6 = Tensor::full(vec![1, 3, 16, 16], 0.6);
    let c1 = 0.01f64 * 0.01;
    let expect = (2.0 * 0.4 * 0.6 + c1) / (0.4f64 * 0.4 + 0.6 * 0.6 + c1);
    worst = worst.max((ssim(&c4, &c6)? - expect).abs());
    Ok((worst, "psnr offset, ssim identity, constant-pair closed form".into()))
}

/// Serializes the report as pretty JSON.
pub fn report_json(report: &SelfCheckReport) -> Result<String> {
    serde_json::to_string_pretty(report).map_err(|e| TensorError::Invalid {
        ctx: "selfcheck",
        msg: format!("report serialization: {e}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_build_passes_all_suites() {
        let report = run(7, None);
        for s in &report.suites {
            assert!(s.pass, "{}: {} (measured {})", s.name, s.detail, s.measured);
        }
        assert!(report.pass);
    }

    #[test]
    fn injected_logdet_sign_bug_is_detected() {
        let report = run(7, Some(Fault::CouplingLogdetSign));
        let suite = report
            .suites
            .iter()
            .find(|s| s.name == "logdet-vs-jacobian")
            .unwrap();
        assert!(!suite.pass, "planted sign bug went undetected");
        assert!(!report.pass);
    }

    #[test]
    fn report_serializes_one_entry_per_suite() {
        let report = run(3, None);
        let json = report_json(&report).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        let suites = parsed["suites"].as_array().unwrap();
        assert_eq!(suites.len(), 8);
        for s in suites {
            assert!(s["measured"].is_number());
            assert!(s["threshold"].is_number());
        }
    }
}
