//! Training objective, Adam with linear warmup, the training loop, and
//! inference.
//!
//! The loss is `total = nll + 1.5 * l1`: the negative log-likelihood of
//! the normal-light HR image under the conditioned flow (with the prior
//! mean drawn per sample from either the ground-truth color ratio map or
//! the encoder's prediction), plus an L1 reconstruction term through the
//! flow inverse driven by the encoder mean alone. Every source of
//! randomness is derived statelessly from (seed, purpose, step), so runs
//! are reproducible and checkpoints resume exactly.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::checkpoint::Checkpoint;
use crate::crmap::{cr_map, rearrange_to_pyramid, PRIOR_ENCODER_PROB};
use crate::encoder::{CondFeatures, Encoder, EncoderConfig};
use crate::flow::{nll, FlowLayout, FlowModel};
use crate::flow::ActNormInit;
use crate::imageio;
use crate::params::{ParamStore, Session};
use crate::rngutil;
use crate::tensor::{Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Weight of the L1 branch in the total loss.
    pub loss_weight_gamma: f64,
    /// Weight of the NLL term; 1.0 normally, 0.0 for the L1-only ablation.
    pub nll_weight: f64,
    pub seed: u64,
    pub scale: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            batch: 4,
            warmup_steps: 500,
            total_steps: 2000,
            loss_weight_gamma: 1.5,
            nll_weight: 1.0,
            seed: 0,
            scale: 2,
        }
    }
}

/// Linear warmup to `lr` over `warmup_steps`, constant afterwards.
pub fn lr_at(cfg: &TrainConfig, step: u64) -> f64 {
    if cfg.warmup_steps == 0 {
        return cfg.lr;
    }
    let w = cfg.warmup_steps as f64;
    cfg.lr * (((step + 1) as f64) / w).min(1.0)
}

/// The full conditional model: encoder plus flow, with its static shape
/// information. Weights live in a [`ParamStore`].
pub struct Model {
    pub layout: FlowLayout,
    pub scale: usize,
    pub flow: FlowModel,
    pub encoder: Encoder,
    pub cond_channels: usize,
    pub hidden: usize,
}

impl Model {
    pub fn new(
        layout: FlowLayout,
        scale: usize,
        cond_channels: usize,
        hidden: usize,
        enc_cfg: EncoderConfig,
    ) -> Result<Self> {
        if scale != 2 && scale != 4 {
            return Err(TensorError::Invalid {
                ctx: "Model",
                msg: format!("scale must be 2 or 4, got {scale}"),
            });
        }
        let flow = FlowModel::new(layout.clone(), cond_channels, hidden)?;
        let encoder = Encoder::new(enc_cfg, cond_channels)?;
        Ok(Self {
            layout,
            scale,
            flow,
            encoder,
            cond_channels,
            hidden,
        })
    }

    /// Desk-scale model: 32x32 HR crops, narrow widths.
    pub fn desk(scale: usize) -> Result<Self> {
        let layout = FlowLayout::standard(3, (32, 32))?;
        let enc = EncoderConfig {
            width: 16,
            heads: 2,
            window: 4,
            stages: 2,
            streams: 3,
        };
        Self::new(layout, scale, 4, 16, enc)
    }

    pub fn init_params<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        let mut rng = rngutil::stream(seed, "init", 0);
        self.flow.init_params(store, &mut rng)?;
        self.encoder.init_params(store, &mut rng, self.layout.levels)
    }

    /// Serializes model structure, parameters, and optimizer state.
    pub fn to_checkpoint<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        state: &AdamState<T>,
    ) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_layout(&self.layout);
        ck.insert(
            "__meta/model",
            &Tensor::<f64>::new_unchecked(
                vec![8],
                vec![
                    self.scale as f64,
                    self.cond_channels as f64,
                    self.hidden as f64,
                    self.encoder.cfg.width as f64,
                    self.encoder.cfg.heads as f64,
                    self.encoder.cfg.window as f64,
                    self.encoder.cfg.stages as f64,
                    self.encoder.cfg.streams as f64,
                ],
            ),
        );
        for e in store.iter() {
            ck.insert(&e.name, &e.value);
        }
        ck.set_scalar("__opt/step", state.step as f64);
        for (name, t) in &state.m {
            ck.insert(&format!("__opt/m/{name}"), t);
        }
        for (name, t) in &state.v {
            ck.insert(&format!("__opt/v/{name}"), t);
        }
        ck
    }

    /// Rebuilds (model, store, optimizer state) from a checkpoint.
    pub fn from_checkpoint<T: Scalar>(
        ck: &Checkpoint,
    ) -> Result<(Model, ParamStore<T>, AdamState<T>)> {
        let layout = ck.layout()?;
        let meta: Tensor<f64> = ck.get("__meta/model")?.to_tensor();
        let d = meta.data();
        if d.len() != 8 {
            return Err(TensorError::Invalid {
                ctx: "Model::from_checkpoint",
                msg: format!("model entry has {} values, expected 8", d.len()),
            });
        }
        let enc_cfg = EncoderConfig {
            width: d[3] as usize,
            heads: d[4] as usize,
            window: d[5] as usize,
            stages: d[6] as usize,
            streams: d[7] as usize,
        };
        let model = Model::new(layout, d[0] as usize, d[1] as usize, d[2] as usize, enc_cfg)?;
        let mut store = ParamStore::new();
        let mut state = AdamState::new();
        state.step = ck.scalar("__opt/step").unwrap_or(0.0) as u64;
        for (name, entry) in &ck.entries {
            if let Some(p) = name.strip_prefix("__opt/m/") {
                state.m.insert(p.to_string(), entry.to_tensor());
            } else if let Some(p) = name.strip_prefix("__opt/v/") {
                state.v.insert(p.to_string(), entry.to_tensor());
            } else if !name.starts_with("__") {
                let trainable = !(name.ends_with("/perm") || name.ends_with("/sign"));
                store.insert(name, entry.to_tensor(), trainable)?;
            }
        }
        Ok((model, store, state))
    }
}

/// Scalar loss components of one step, for logging.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub nll: f64,
    pub l1: f64,
}

/// Upsamples the LR color-ratio prediction to HR (nearest neighbor).
fn cr_pred_hr<T: Scalar>(model: &Model, features: &CondFeatures<T>) -> Result<Var<T>> {
    features.cr_pred.upsample_nearest(model.scale)
}

/// Reconstruction branch: drive the flow inverse with the encoder's prior
/// mean as latent and measure mean absolute error against y. Gradients
/// flow through the inverse pass into both the flow and the encoder.
pub fn l1_branch<T: Scalar>(
    model: &Model,
    sess: &Session<T>,
    features: &CondFeatures<T>,
    y: &Var<T>,
) -> Result<Var<T>> {
    let z = rearrange_to_pyramid(&model.layout, &cr_pred_hr(model, features)?)?;
    let y_hat = model.flow.inverse(sess, &z, &features.per_level)?;
    y_hat.sub(y)?.abs()?.mean_all()
}

/// Builds the full training loss on one batch. Returns the scalar loss
/// variable (backward-ready) plus the logged component values.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Scalar>(
    model: &Model,
    sess: &Session<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    nll_weight: f64,
    l1_weight: f64,
    rng: &mut impl Rng,
    mut actnorm_init: Option<&mut ActNormInit<T>>,
) -> Result<(Var<T>, LossValues)> {
    let features = model.encoder.forward(sess, x, &model.layout, model.scale)?;
    let y_var = sess.constant(y.clone());
    let (pieces, logdet) = model
        .flow
        .forward(sess, &y_var, &features.per_level, actnorm_init.as_deref_mut())?;
    // per-sample prior mean: ground-truth CR map with P = 0.8, encoder
    // prediction with P = 0.2 (kept differentiable when chosen)
    let pred_hr = cr_pred_hr(model, &features)?;
    let gt_hr = sess.constant(cr_map(y)?);
    let n = y.shape()[0];
    let rows: Vec<Var<T>> = (0..n)
        .map(|ni| {
            let use_enc = rng.gen_range(0.0..1.0) < PRIOR_ENCODER_PROB;
            let src = if use_enc { &pred_hr } else { &gt_hr };
            src.narrow(0, ni, 1)
        })
        .collect::<Result<_>>()?;
    let mean_hr = crate::autodiff::concat(&rows.iter().collect::<Vec<_>>(), 0)?;
    let means = rearrange_to_pyramid(&model.layout, &mean_hr)?;
    let l_nll = nll(&pieces, &means, &logdet)?;
    let l_l1 = l1_branch(model, sess, &features, &y_var)?;
    let total = l_nll.scale(nll_weight)?.add(&l_l1.scale(l1_weight)?)?;
    let values = LossValues {
        total: total.value().item()?.to_f64(),
        nll: l_nll.value().item()?.to_f64(),
        l1: l_l1.value().item()?.to_f64(),
    };
    Ok((total, values))
}

/// Restores the HR image from an LR input: latent = the mode of the
/// encoder-conditioned prior, pushed through the flow inverse, clamped.
pub fn infer<T: Scalar>(model: &Model, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    let hr = (s[2] * model.scale, s[3] * model.scale);
    if hr != model.layout.hr_size {
        // the layout is a crop-size plan; re-validate divisibility instead
        let d = 1usize << model.layout.levels;
        if hr.0 % d != 0 || hr.1 % d != 0 {
            return Err(TensorError::Invalid {
                ctx: "infer",
                msg: format!("HR dims {hr:?} not divisible by {d}"),
            });
        }
    }
    let layout = FlowLayout::new(
        model.layout.levels,
        model.layout.steps_per_level,
        model.layout.base_channels,
        hr,
    )?;
    let run_model = Model {
        layout: layout.clone(),
        scale: model.scale,
        flow: FlowModel::new(layout.clone(), model.cond_channels, model.hidden)?,
        encoder: Encoder::new(model.encoder.cfg.clone(), model.cond_channels)?,
        cond_channels: model.cond_channels,
        hidden: model.hidden,
    };
    let sess = Session::new(store, false);
    let features = run_model
        .encoder
        .forward(&sess, x, &run_model.layout, run_model.scale)?;
    let z = rearrange_to_pyramid(&run_model.layout, &cr_pred_hr(&run_model, &features)?)?;
    let y_hat = run_model.flow.inverse(&sess, &z, &features.per_level)?;
    Ok(y_hat.value().clamp(T::ZERO, T::ONE))
}

/// Adam first/second moment buffers plus the shared step counter.
pub struct AdamState<T: Scalar> {
    pub step: u64,
    pub m: HashMap<String, Tensor<T>>,
    pub v: HashMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }
}

/// One bias-corrected Adam update over the given (name, gradient) pairs.
/// Aborts on non-finite gradients, naming the offending parameter.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[(String, Tensor<T>)],
    state: &mut AdamState<T>,
    lr_t: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { ctx: "adam_step" });
        }
        let p = store.get(name)?.clone();
        if p.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                ctx: "adam_step",
                expected: p.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let mut new_m = Vec::with_capacity(g.numel());
        let mut new_v = Vec::with_capacity(g.numel());
        let mut new_p = Vec::with_capacity(g.numel());
        for i in 0..g.numel() {
            let gi = g.data()[i].to_f64();
            let mi = cfg.beta1 * m.data()[i].to_f64() + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data()[i].to_f64() + (1.0 - cfg.beta2) * gi * gi;
            let mh = mi / bc1;
            let vh = vi / bc2;
            let pi = p.data()[i].to_f64() - lr_t * mh / (vh.sqrt() + cfg.eps);
            new_m.push(T::from_f64(mi));
            new_v.push(T::from_f64(vi));
            new_p.push(T::from_f64(pi));
        }
        *m = Tensor::new_unchecked(p.shape().to_vec(), new_m);
        *v = Tensor::new_unchecked(p.shape().to_vec(), new_v);
        store.set(name, Tensor::new_unchecked(p.shape().to_vec(), new_p))?;
    }
    Ok(())
}

/// One LR/HR training pair held in memory.
#[derive(Clone)]
pub struct Pair<T: Scalar> {
    pub lr: Tensor<T>,
    pub hr: Tensor<T>,
}

/// Loads `{id}_lr.png` / `{id}_hr.png` pairs from a generated dataset dir.
pub fn load_pairs<T: Scalar>(dir: &Path) -> Result<Vec<Pair<T>>> {
    let mut ids: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| TensorError::Invalid {
            ctx: "load_pairs",
            msg: format!("{}: {e}", dir.display()),
        })?
        .filter_map(|r| r.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix("_lr.png").map(|s| s.to_string())
        })
        .collect();
    ids.sort();
    let mut pairs = Vec::with_capacity(ids.len());
    for id in ids {
        let lr = imageio::load_png(&dir.join(format!("{id}_lr.png")))?;
        let hr = imageio::load_png(&dir.join(format!("{id}_hr.png")))?;
        pairs.push(Pair { lr, hr });
    }
    if pairs.is_empty() {
        return Err(TensorError::Invalid {
            ctx: "load_pairs",
            msg: format!("no *_lr.png/*_hr.png pairs in {}", dir.display()),
        });
    }
    Ok(pairs)
}

/// Per-step log record (also the CSV row schema).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub nll: f64,
    pub l1: f64,
    pub total: f64,
}

/// Assembles one training batch of aligned random crops. The HR crop
/// offset is a multiple of the scale so LR and HR stay registered.
fn sample_batch<T: Scalar>(
    model: &Model,
    pairs: &[Pair<T>],
    batch: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (ch, cw) = model.layout.hr_size;
    let s = model.scale;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut shape_x = vec![batch, 3, ch / s, cw / s];
    let shape_y = vec![batch, 3, ch, cw];
    shape_x[2] = ch / s;
    for _ in 0..batch {
        let p = &pairs[rng.gen_range(0..pairs.len())];
        let hs = p.hr.shape();
        if hs[2] < ch || hs[3] < cw {
            return Err(TensorError::Invalid {
                ctx: "sample_batch",
                msg: format!("image {:?} smaller than crop {:?}", hs, (ch, cw)),
            });
        }
        let oy = if hs[2] > ch {
            rng.gen_range(0..(hs[2] - ch) / s + 1) * s
        } else {
            0
        };
        let ox = if hs[3] > cw {
            rng.gen_range(0..(hs[3] - cw) / s + 1) * s
        } else {
            0
        };
        let crop = |t: &Tensor<T>, oy: usize, ox: usize, h: usize, w: usize| {
            let ts = t.shape();
            let d = t.data();
            let mut out = Vec::with_capacity(3 * h * w);
            for c in 0..3 {
                for y in 0..h {
                    let src = (c * ts[2] + oy + y) * ts[3] + ox;
                    out.extend_from_slice(&d[src..src + w]);
                }
            }
            out
        };
        ys.extend(crop(&p.hr, oy, ox, ch, cw));
        xs.extend(crop(&p.lr, oy / s, ox / s, ch / s, cw / s));
    }
    Ok((
        Tensor::new_unchecked(shape_x, xs),
        Tensor::new_unchecked(shape_y, ys),
    ))
}

/// Runs `cfg.total_steps - start_step` optimization steps. Actnorm
/// parameters receive their data-dependent initialization from the first
/// batch when starting from scratch. `on_step` observes every log record.
pub fn train_loop<T: Scalar>(
    model: &Model,
    store: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
    pairs: &[Pair<T>],
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    let mut log = Vec::new();
    let start = state.step;
    if start == 0 {
        // data-dependent actnorm init on the first batch
        let mut rng = rngutil::stream(cfg.seed, "batch", 0);
        let (x, y) = sample_batch(model, pairs, cfg.batch, &mut rng)?;
        let mut prior_rng = rngutil::stream(cfg.seed, "prior", 0);
        let sess = Session::new(store, false);
        let mut updates = Vec::new();
        total_loss(
            model,
            &sess,
            &x,
            &y,
            cfg.nll_weight,
            cfg.loss_weight_gamma,
            &mut prior_rng,
            Some(&mut updates),
        )?;
        drop(sess);
        for (name, value) in updates {
            store.set(&name, value)?;
        }
    }
    for step in start..cfg.total_steps as u64 {
        let mut rng = rngutil::stream(cfg.seed, "batch", step);
        let (x, y) = sample_batch(model, pairs, cfg.batch, &mut rng)?;
        let mut prior_rng = rngutil::stream(cfg.seed, "prior", step);
        let sess = Session::new(store, true);
        let (loss, values) = total_loss(
            model,
            &sess,
            &x,
            &y,
            cfg.nll_weight,
            cfg.loss_weight_gamma,
            &mut prior_rng,
            None,
        )?;
        let grads = loss.backward()?;
        let pg = sess.param_grads(&grads);
        drop(sess);
        let lr_t = lr_at(cfg, step);
        adam_step(store, &pg, state, lr_t, cfg)?;
        let rec = StepLog {
            step,
            lr: lr_t,
            nll: values.nll,
            l1: values.l1,
            total: values.total,
        };
        on_step(&rec);
        log.push(rec);
    }
    Ok(log)
}
