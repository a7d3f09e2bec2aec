//! 8-bit PNG input/output mapped to `[0, 1]` tensors of shape `[1,3,H,W]`.

use std::path::Path;

use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Loads an RGB PNG as `[1,3,H,W]` with values `v/255`.
pub fn load_png<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path)
        .map_err(|e| TensorError::Invalid {
            ctx: "load_png",
            msg: format!("{}: {e}", path.display()),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![T::ZERO; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = T::from_f64(p.0[c] as f64 / 255.0);
        }
    }
    Ok(Tensor::new_unchecked(vec![1, 3, h, w], data))
}

/// Saves a `[1,3,H,W]` or `[3,H,W]` tensor in `[0, 1]` as an 8-bit PNG,
/// rounding to the nearest level.
pub fn save_png<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let s = t.shape();
    let (c, h, w) = match s {
        [1, c, h, w] | [c, h, w] => (*c, *h, *w),
        _ => {
            return Err(TensorError::Invalid {
                ctx: "save_png",
                msg: format!("expected [1,3,H,W] or [3,H,W], got {:?}", s),
            })
        }
    };
    if c != 3 {
        return Err(TensorError::Invalid {
            ctx: "save_png",
            msg: format!("expected 3 channels, got {c}"),
        });
    }
    let d = t.data();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |ch: usize| {
                (d[ch * h * w + y * w + x].to_f64().clamp(0.0, 1.0) * 255.0).round() as u8
            };
            img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    img.save(path).map_err(|e| TensorError::Invalid {
        ctx: "save_png",
        msg: format!("{}: {e}", path.display()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_exact_at_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.png");
        let t = Tensor::<f64>::from_fn(vec![1, 3, 5, 7], |i| ((i * 13) % 256) as f64 / 255.0);
        save_png(&p, &t).unwrap();
        let back: Tensor<f64> = load_png(&p).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back.max_abs_diff(&t).unwrap() < 1e-12);
    }
}
