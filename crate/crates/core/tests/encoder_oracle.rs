//! Behavioral checks of the conditional encoder: output geometry, simplex
//! head, determinism, batch independence, window-permutation equivariance,
//! and gradient correctness through the full pass.

use llsf_core::autodiff::{gradcheck_subset, Var};
use llsf_core::encoder::{Encoder, EncoderConfig};
use llsf_core::flow::FlowLayout;
use llsf_core::params::{ParamStore, Session};
use llsf_core::rngutil;
use llsf_core::Tensor;

use rand::Rng;

fn small_cfg() -> EncoderConfig {
    EncoderConfig {
        width: 8,
        heads: 2,
        window: 4,
        stages: 2,
        streams: 3,
    }
}

fn setup(seed: u64) -> (Encoder, ParamStore<f64>, FlowLayout) {
    let enc = Encoder::new(small_cfg(), 4).unwrap();
    let layout = FlowLayout::new(3, 2, 3, (32, 32)).unwrap();
    let mut store = ParamStore::new();
    let mut rng = rngutil::stream(seed, "enc-init", 0);
    enc.init_params(&mut store, &mut rng, layout.levels).unwrap();
    (enc, store, layout)
}

fn rand_image(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = rngutil::stream(seed, "img", 0);
    Tensor::from_fn(vec![n, 3, h, w], |_| rng.gen_range(0.05..0.95))
}

#[test]
fn per_level_shapes_track_flow_grids() {
    let (enc, store, layout) = setup(1);
    let x = rand_image(2, 8, 8, 2); // scale 4: HR 32
    let sess = Session::new(&store, false);
    let f = enc.forward(&sess, &x, &layout, 4).unwrap();
    let shapes: Vec<_> = f.per_level.iter().map(|v| v.shape()).collect();
    assert_eq!(
        shapes,
        vec![vec![2, 4, 16, 16], vec![2, 4, 8, 8], vec![2, 4, 4, 4]]
    );
    assert_eq!(f.cr_pred.shape(), vec![2, 3, 8, 8]);
}

#[test]
fn scale_two_also_supported() {
    let (enc, store, layout) = setup(1);
    let x = rand_image(1, 16, 16, 3);
    let sess = Session::new(&store, false);
    let f = enc.forward(&sess, &x, &layout, 2).unwrap();
    let shapes: Vec<_> = f.per_level.iter().map(|v| v.shape()).collect();
    assert_eq!(
        shapes,
        vec![vec![1, 4, 16, 16], vec![1, 4, 8, 8], vec![1, 4, 4, 4]]
    );
}

#[test]
fn cr_pred_is_on_the_simplex() {
    let (enc, store, layout) = setup(5);
    let x = rand_image(1, 8, 8, 6);
    let sess = Session::new(&store, false);
    let f = enc.forward(&sess, &x, &layout, 4).unwrap();
    let v = f.cr_pred.value();
    let d = v.data();
    for p in 0..64 {
        let s = d[p] + d[64 + p] + d[128 + p];
        assert!((s - 1.0).abs() < 1e-6);
        assert!(d[p] >= 0.0);
    }
}

#[test]
fn forward_is_deterministic() {
    let (enc, store, layout) = setup(8);
    let x = rand_image(1, 8, 8, 9);
    let a = {
        let sess = Session::new(&store, false);
        enc.forward(&sess, &x, &layout, 4).unwrap().per_level[0].value()
    };
    let b = {
        let sess = Session::new(&store, false);
        enc.forward(&sess, &x, &layout, 4).unwrap().per_level[0].value()
    };
    assert_eq!(a.data(), b.data());
}

#[test]
fn batch_items_are_independent() {
    let (enc, store, layout) = setup(10);
    let x = rand_image(2, 8, 8, 11);
    let batch = {
        let sess = Session::new(&store, false);
        enc.forward(&sess, &x, &layout, 4).unwrap().per_level[0].value()
    };
    let per = batch.numel() / 2;
    for ni in 0..2 {
        let xi = Tensor::new(
            vec![1, 3, 8, 8],
            x.data()[ni * 3 * 64..(ni + 1) * 3 * 64].to_vec(),
        )
        .unwrap();
        let sess = Session::new(&store, false);
        let single = enc.forward(&sess, &xi, &layout, 4).unwrap().per_level[0].value();
        let diff = batch.data()[ni * per..(ni + 1) * per]
            .iter()
            .zip(single.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff < 1e-6, "sample {ni} differs by {diff}");
    }
}

#[test]
fn attention_is_window_permutation_equivariant() {
    // permuting pixels inside one window permutes outputs identically
    let enc = Encoder::new(small_cfg(), 4).unwrap();
    let mut store: ParamStore<f64> = ParamStore::new();
    let mut rng = rngutil::stream(2, "enc-init", 0);
    enc.init_params(&mut store, &mut rng, 1).unwrap();
    // use a non-zero output projection so the attention term is visible
    store
        .set(
            "encoder/stage0/stream0/attn/o/weight",
            Tensor::from_fn(vec![8, 8, 1, 1], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 }),
        )
        .unwrap();
    let w = 4usize;
    let x = Tensor::from_fn(vec![1, 8, w, w], |i| (i as f64 * 0.37).sin());
    // cyclic shift of the flattened window positions
    let perm: Vec<usize> = (0..w * w).map(|p| (p + 3) % (w * w)).collect();
    let xp = {
        let d = x.data();
        let mut out = vec![0.0; d.len()];
        for c in 0..8 {
            for (p, &src) in perm.iter().enumerate() {
                out[c * w * w + p] = d[c * w * w + src];
            }
        }
        Tensor::new(vec![1, 8, w, w], out).unwrap()
    };
    let run = |inp: &Tensor<f64>| {
        let sess = Session::new(&store, false);
        let v = sess.constant(inp.clone());
        enc.window_attention(&sess, "stage0/stream0", &v)
            .unwrap()
            .value()
    };
    let y = run(&x);
    let yp = run(&xp);
    for c in 0..8 {
        for (p, &src) in perm.iter().enumerate() {
            let a = yp.data()[c * w * w + p];
            let b = y.data()[c * w * w + src];
            assert!((a - b).abs() < 1e-12, "c={c} p={p}: {a} vs {b}");
        }
    }
}

#[test]
fn ffn_identity_at_zero_projection() {
    let enc = Encoder::new(small_cfg(), 4).unwrap();
    let mut store: ParamStore<f64> = ParamStore::new();
    let mut rng = rngutil::stream(3, "enc-init", 0);
    enc.init_params(&mut store, &mut rng, 1).unwrap();
    let sess = Session::new(&store, false);
    let x = sess.constant(Tensor::from_fn(vec![1, 8, 4, 4], |i| (i as f64 * 0.11).cos()));
    let y = enc.ffn_dwconv(&sess, "stage0/stream0", &x).unwrap();
    assert!(y.value().max_abs_diff(&x.value()).unwrap() < 1e-15);
}

#[test]
fn blend_identity_at_zero_cross_projections() {
    let enc = Encoder::new(small_cfg(), 4).unwrap();
    let mut store: ParamStore<f64> = ParamStore::new();
    let mut rng = rngutil::stream(4, "enc-init", 0);
    enc.init_params(&mut store, &mut rng, 1).unwrap();
    let sess = Session::new(&store, false);
    let a = sess.constant(Tensor::from_fn(vec![1, 8, 8, 8], |i| (i as f64 * 0.2).sin()));
    let b = sess.constant(Tensor::from_fn(vec![1, 8, 4, 4], |i| (i as f64 * 0.3).cos()));
    let out = enc.feature_blend(&sess, 0, &[a.clone(), b.clone()]).unwrap();
    assert!(out[0].value().max_abs_diff(&a.value()).unwrap() < 1e-15);
    assert!(out[1].value().max_abs_diff(&b.value()).unwrap() < 1e-15);
}

#[test]
fn encoder_gradient_matches_finite_differences() {
    // check d(scalar(CondFeatures))/d(stem weight) on a subset of coords
    let (enc, store, _) = setup(20);
    let layout = FlowLayout::new(2, 1, 3, (16, 16)).unwrap();
    let x = rand_image(1, 4, 4, 21);
    let w0 = store.get("encoder/stem/weight").unwrap().clone();

    let f = |_tape: &llsf_core::autodiff::Tape<f64>, wv: &Var<f64>| {
        // rebuild a store whose stem weight is the probed variable
        let mut st = ParamStore::new();
        for e in store.iter() {
            st.insert(&e.name, e.value.clone(), e.trainable).unwrap();
        }
        st.set("encoder/stem/weight", wv.value()).unwrap();
        let sess = Session::with_tape(&st, false, wv.tape().clone());
        // splice the variable in place of the bound constant: recompute via
        // conv on the variable directly by overriding through a session is
        // not possible, so express the stem conv manually.
        let cond = sess.constant(llsf_core::encoder::build_cond_input(&x).unwrap());
        let b = sess.param("encoder/stem/bias").unwrap();
        let stem = cond.conv2d(wv, Some(&b), 1, 1, 1).unwrap();
        // feed the stem output through attention + ffn + head of stream 0
        let a = enc.window_attention(&sess, "stage0/stream0", &stem)?;
        let h = enc.ffn_dwconv(&sess, "stage0/stream0", &a)?;
        h.mul(&h)?.mean_all()
    };
    let _ = layout;
    let coords: Vec<usize> = (0..w0.numel()).step_by(17).collect();
    let report = gradcheck_subset(f, &w0, &coords, 1e-6, 1e-6).unwrap();
    assert!(report.pass, "max rel err {}", report.max_rel_err);
}
