//! The invertible network: forward map (y, cond) -> (z, log-det), exact
//! inverse, and the per-dimension negative log-likelihood.
//!
//! Structure: per level, squeeze -> `steps_per_level` x (actnorm ->
//! invertible 1x1 -> conditional coupling -> affine injector) -> channel
//! shuffle + split (all levels except the last, whose full output is the
//! final latent piece).

mod layers;
mod model;

pub use layers::{ActNorm, ActNormInit, Coupling, Injector, InvConv, scale_activation};
pub use model::{nll, FlowModel};

use crate::autodiff::Var;
use crate::tensor::{Result, Scalar, TensorError};

/// Static shape plan of the flow. All activation shapes are derivable
/// from this record alone.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowLayout {
    pub levels: usize,
    pub steps_per_level: usize,
    pub base_channels: usize,
    pub hr_size: (usize, usize),
}

impl FlowLayout {
    pub fn new(levels: usize, steps_per_level: usize, base_channels: usize, hr_size: (usize, usize)) -> Result<Self> {
        let layout = Self {
            levels,
            steps_per_level,
            base_channels,
            hr_size,
        };
        layout.validate()?;
        Ok(layout)
    }

    /// Full-size structure at a given crop size: 3 levels, 12 steps.
    pub fn standard(base_channels: usize, hr_size: (usize, usize)) -> Result<Self> {
        Self::new(3, 12, base_channels, hr_size)
    }

    pub fn validate(&self) -> Result<()> {
        let d = 1usize << self.levels;
        if self.levels == 0 || self.steps_per_level == 0 {
            return Err(TensorError::Invalid {
                ctx: "FlowLayout",
                msg: "levels and steps_per_level must be positive".into(),
            });
        }
        if self.hr_size.0 % d != 0 || self.hr_size.1 % d != 0 {
            return Err(TensorError::Invalid {
                ctx: "FlowLayout",
                msg: format!(
                    "hr size {:?} not divisible by 2^levels = {}",
                    self.hr_size, d
                ),
            });
        }
        // the working channel count must stay even so splits are exact
        for l in 0..self.levels.saturating_sub(1) {
            if self.channels_at(l) % 2 != 0 {
                return Err(TensorError::Invalid {
                    ctx: "FlowLayout",
                    msg: format!("odd channel count {} at level {}", self.channels_at(l), l),
                });
            }
        }
        Ok(())
    }

    /// Working channel count inside level `l` (after its squeeze).
    pub fn channels_at(&self, l: usize) -> usize {
        let mut c = self.base_channels;
        for k in 0..=l {
            c *= 4;
            if k < l {
                c /= 2; // split keeps half
            }
        }
        c
    }

    /// Spatial grid inside level `l`.
    pub fn grid_at(&self, l: usize) -> (usize, usize) {
        (self.hr_size.0 >> (l + 1), self.hr_size.1 >> (l + 1))
    }

    /// Shapes (C, H, W) of the latent pieces: one split output per
    /// interior level, then the final latent.
    pub fn piece_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut shapes = Vec::with_capacity(self.levels);
        for l in 0..self.levels {
            let c = self.channels_at(l);
            let (h, w) = self.grid_at(l);
            if l + 1 < self.levels {
                shapes.push((c / 2, h, w));
            } else {
                shapes.push((c, h, w));
            }
        }
        shapes
    }

    /// Total latent elements per sample; equals base_channels * H * W.
    pub fn latent_numel(&self) -> usize {
        self.piece_shapes().iter().map(|&(c, h, w)| c * h * w).sum()
    }
}

/// Fixed channel shuffle applied before each split: even-indexed channels
/// first, then odd-indexed. Not an involution for C >= 6.
pub fn shuffle_perm(c: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..c).step_by(2).collect();
    p.extend((1..c).step_by(2));
    p
}

pub fn inverse_perm(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; p.len()];
    for (i, &v) in p.iter().enumerate() {
        inv[v] = i;
    }
    inv
}

/// Shuffle channels then partition in half: (kept, emitted).
pub fn split_channels<T: Scalar>(x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
    let c = x.shape()[1];
    if c % 2 != 0 {
        return Err(TensorError::Invalid {
            ctx: "split_channels",
            msg: format!("odd channel count {}", c),
        });
    }
    let shuffled = x.permute_channels(&shuffle_perm(c))?;
    let kept = shuffled.narrow(1, 0, c / 2)?;
    let emitted = shuffled.narrow(1, c / 2, c / 2)?;
    Ok((kept, emitted))
}

/// Exact inverse of [`split_channels`].
pub fn unsplit_channels<T: Scalar>(kept: &Var<T>, emitted: &Var<T>) -> Result<Var<T>> {
    let merged = crate::autodiff::concat(&[kept, emitted], 1)?;
    let c = merged.shape()[1];
    merged.permute_channels(&inverse_perm(&shuffle_perm(c)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn standard_layout_shapes() {
        let l = FlowLayout::standard(3, (32, 32)).unwrap();
        assert_eq!(l.channels_at(0), 12);
        assert_eq!(l.channels_at(1), 24);
        assert_eq!(l.channels_at(2), 48);
        assert_eq!(l.grid_at(0), (16, 16));
        assert_eq!(l.grid_at(2), (4, 4));
        assert_eq!(
            l.piece_shapes(),
            vec![(6, 16, 16), (12, 8, 8), (48, 4, 4)]
        );
        assert_eq!(l.latent_numel(), 3 * 32 * 32);
    }

    #[test]
    fn layout_rejects_indivisible_dims() {
        assert!(FlowLayout::standard(3, (20, 32)).is_err());
    }

    #[test]
    fn shuffle_is_fixed_and_not_involutive() {
        let p = shuffle_perm(12);
        assert_eq!(p, vec![0, 2, 4, 6, 8, 10, 1, 3, 5, 7, 9, 11]);
        // applying twice differs from identity
        let twice: Vec<usize> = p.iter().map(|&i| p[i]).collect();
        assert_ne!(twice, (0..12).collect::<Vec<_>>());
        // but it is a bijection
        let mut sorted = p.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn split_unsplit_roundtrip() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_fn(vec![1, 12, 2, 2], |i| i as f64));
        let (kept, emitted) = split_channels(&x).unwrap();
        assert_eq!(kept.shape(), vec![1, 6, 2, 2]);
        assert_eq!(emitted.shape(), vec![1, 6, 2, 2]);
        let back = unsplit_channels(&kept, &emitted).unwrap();
        assert_eq!(back.value().data(), x.value().data());
    }
}
