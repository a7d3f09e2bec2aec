//! Flow model assembly: composes the per-level squeeze / step / split
//! structure, and defines the per-dimension negative log-likelihood.

use rand::Rng;

use crate::autodiff::Var;
use crate::params::{ParamStore, Session};
use crate::tensor::{Result, Scalar, TensorError};

use super::layers::{ActNorm, ActNormInit, Coupling, Injector, InvConv};
use super::{split_channels, unsplit_channels, FlowLayout};

const LN_2PI: f64 = 1.837_877_066_409_345_2;

struct Step {
    actnorm: ActNorm,
    invconv: InvConv,
    coupling: Coupling,
    injector: Injector,
}

/// The conditional invertible network. Holds only structure; weights live
/// in a [`ParamStore`] addressed by layer-path names.
pub struct FlowModel {
    pub layout: FlowLayout,
    /// Conditioning channels fed to every step of each level.
    pub cond_channels: usize,
    /// Hidden width of coupling/injector subnets.
    pub hidden: usize,
    levels: Vec<Vec<Step>>,
}

impl FlowModel {
    pub fn new(layout: FlowLayout, cond_channels: usize, hidden: usize) -> Result<Self> {
        layout.validate()?;
        let mut levels = Vec::with_capacity(layout.levels);
        for l in 0..layout.levels {
            let c = layout.channels_at(l);
            let mut steps = Vec::with_capacity(layout.steps_per_level);
            for s in 0..layout.steps_per_level {
                let prefix = format!("flow/l{l}/s{s}");
                steps.push(Step {
                    actnorm: ActNorm::new(&prefix, c),
                    invconv: InvConv::new(&prefix, c),
                    coupling: Coupling::new(&prefix, c, cond_channels, hidden),
                    injector: Injector::new(&prefix, c, cond_channels, hidden),
                });
            }
            levels.push(steps);
        }
        Ok(Self {
            layout,
            cond_channels,
            hidden,
            levels,
        })
    }

    /// Registers all flow parameters. Couplings and injectors start at the
    /// identity; invertible convs start at a seeded random rotation.
    pub fn init_params<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<()> {
        self.init_params_inner(store, rng, false)
    }

    /// Like [`init_params`](Self::init_params) but with identity invertible
    /// convs, so a fresh model is the identity map (up to squeezes).
    pub fn init_params_identity<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<()> {
        self.init_params_inner(store, rng, true)
    }

    fn init_params_inner<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        identity: bool,
    ) -> Result<()> {
        for steps in &self.levels {
            for step in steps {
                step.actnorm.init_params(store)?;
                step.invconv.init_params(store, rng, identity)?;
                step.coupling.init_params(store, rng)?;
                step.injector.init_params(store, rng)?;
            }
        }
        Ok(())
    }

    fn check_cond<T: Scalar>(&self, cond: &[Var<T>]) -> Result<()> {
        if cond.len() != self.layout.levels {
            return Err(TensorError::Invalid {
                ctx: "FlowModel",
                msg: format!(
                    "expected {} conditioning maps, got {}",
                    self.layout.levels,
                    cond.len()
                ),
            });
        }
        for (l, c) in cond.iter().enumerate() {
            let (h, w) = self.layout.grid_at(l);
            let s = c.shape();
            if s.len() != 4 || s[1] != self.cond_channels || s[2] != h || s[3] != w {
                return Err(TensorError::ShapeMismatch {
                    ctx: "FlowModel cond",
                    expected: vec![s[0], self.cond_channels, h, w],
                    got: s,
                });
            }
        }
        Ok(())
    }

    /// Forward map y -> (latent pieces, batch-summed log-det). `cond` holds
    /// one conditioning map per level at that level's grid. When `init` is
    /// set, actnorms compute data-dependent parameters and queue them as
    /// store updates instead of reading stored values.
    pub fn forward<T: Scalar>(
        &self,
        sess: &Session<T>,
        y: &Var<T>,
        cond: &[Var<T>],
        mut init: Option<&mut ActNormInit<T>>,
    ) -> Result<(Vec<Var<T>>, Var<T>)> {
        self.check_cond(cond)?;
        let mut h = y.clone();
        let mut logdet = sess.constant(crate::tensor::Tensor::scalar(T::ZERO));
        if y.requires_grad() {
            // keep logdet on the differentiable graph even before any layer
            logdet = h.sum_all()?.scale(0.0)?;
        }
        let mut pieces = Vec::with_capacity(self.layout.levels);
        for (l, steps) in self.levels.iter().enumerate() {
            h = h.squeeze2x2()?;
            for step in steps {
                let (h1, ld1) = step.actnorm.forward(sess, &h, &mut init)?;
                let (h2, ld2) = step.invconv.forward(sess, &h1)?;
                let (h3, ld3) = step.coupling.forward(sess, &h2, &cond[l])?;
                let (h4, ld4) = step.injector.forward(sess, &h3, &cond[l])?;
                h = h4;
                logdet = logdet.add(&ld1)?.add(&ld2)?.add(&ld3)?.add(&ld4)?;
            }
            if l + 1 < self.layout.levels {
                let (kept, emitted) = split_channels(&h)?;
                pieces.push(emitted);
                h = kept;
            } else {
                pieces.push(h.clone());
            }
        }
        Ok((pieces, logdet))
    }

    /// Exact inverse: latent pieces -> y.
    pub fn inverse<T: Scalar>(
        &self,
        sess: &Session<T>,
        pieces: &[Var<T>],
        cond: &[Var<T>],
    ) -> Result<Var<T>> {
        self.check_cond(cond)?;
        if pieces.len() != self.layout.levels {
            return Err(TensorError::Invalid {
                ctx: "FlowModel::inverse",
                msg: format!(
                    "expected {} latent pieces, got {}",
                    self.layout.levels,
                    pieces.len()
                ),
            });
        }
        let mut h = pieces[self.layout.levels - 1].clone();
        for l in (0..self.layout.levels).rev() {
            if l + 1 < self.layout.levels {
                h = unsplit_channels(&h, &pieces[l])?;
            }
            for step in self.levels[l].iter().rev() {
                h = step.injector.inverse(sess, &h, &cond[l])?;
                h = step.coupling.inverse(sess, &h, &cond[l])?;
                h = step.invconv.inverse(sess, &h)?;
                h = step.actnorm.inverse(sess, &h)?;
            }
            h = h.unsqueeze2x2()?;
        }
        Ok(h)
    }
}

/// Per-dimension negative log-likelihood under unit-variance Gaussians
/// centered at `means`: (sum_i [0.5 ln 2pi + 0.5 (z_i - mu_i)^2] - logdet)
/// / (batch * latent dims).
pub fn nll<T: Scalar>(pieces: &[Var<T>], means: &[Var<T>], logdet: &Var<T>) -> Result<Var<T>> {
    if pieces.len() != means.len() {
        return Err(TensorError::Invalid {
            ctx: "nll",
            msg: format!("{} pieces vs {} means", pieces.len(), means.len()),
        });
    }
    if pieces.is_empty() {
        return Err(TensorError::Invalid {
            ctx: "nll",
            msg: "no latent pieces".into(),
        });
    }
    let mut total_dims = 0usize;
    let mut acc: Option<Var<T>> = None;
    for (z, mu) in pieces.iter().zip(means) {
        total_dims += z.numel();
        let d = z.sub(mu)?;
        let term = d.mul(&d)?.sum_all()?.scale(0.5)?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term)?,
        });
    }
    let quad = acc.expect("non-empty");
    quad.add_scalar(0.5 * LN_2PI * total_dims as f64)?
        .sub(logdet)?
        .scale(1.0 / total_dims as f64)
}
