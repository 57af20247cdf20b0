//! Image preprocessing: content crop (tight bounding box over a dark border)
//! followed by bilinear resize.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct PreprocessConfig {
    pub crop_threshold: f64,
    pub target_size: (usize, usize),
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            crop_threshold: 7.0 / 255.0,
            target_size: (64, 64),
        }
    }
}

/// Tight bounding box of pixels whose max-channel intensity exceeds the
/// threshold. Falls back to the full image when the box is empty or smaller
/// than 8 px per side.
pub fn crop_to_content<S: Scalar>(image: &Tensor<S>, threshold: f64) -> Tensor<S> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let thr = S::of_f64(threshold);
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0usize, w, 0usize);
    for y in 0..h {
        for x in 0..w {
            let bright = (0..3).any(|c| image.data()[(c * h + y) * w + x] > thr);
            if bright {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    if y0 > y1 || x0 > x1 || y1 - y0 + 1 < 8 || x1 - x0 + 1 < 8 {
        return image.clone();
    }
    let (nh, nw) = (y1 - y0 + 1, x1 - x0 + 1);
    let mut out = Tensor::zeros(&[3, nh, nw]);
    for c in 0..3 {
        for y in 0..nh {
            for x in 0..nw {
                out.data_mut()[(c * nh + y) * nw + x] =
                    image.data()[(c * h + y0 + y) * w + x0 + x];
            }
        }
    }
    out
}

/// Bilinear resample to `(target_h, target_w)`, align-corners-free
/// (pixel centers at i + 0.5).
pub fn resize<S: Scalar>(image: &Tensor<S>, target: (usize, usize)) -> Result<Tensor<S>> {
    let (th, tw) = target;
    if th < 2 || tw < 2 {
        return Err(Error::Config(format!("resize target {th}x{tw} too small")));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = Tensor::zeros(&[3, th, tw]);
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    for c in 0..3 {
        for oy in 0..th {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..tw {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let p = |y: usize, x: usize| image.data()[(c * h + y) * w + x].as_f64();
                let v = p(y0, x0) * (1.0 - wy) * (1.0 - wx)
                    + p(y0, x1) * (1.0 - wy) * wx
                    + p(y1, x0) * wy * (1.0 - wx)
                    + p(y1, x1) * wy * wx;
                out.data_mut()[(c * th + oy) * tw + ox] = S::of_f64(v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

pub fn preprocess<S: Scalar>(image: &Tensor<S>, config: &PreprocessConfig) -> Result<Tensor<S>> {
    let cropped = crop_to_content(image, config.crop_threshold);
    resize(&cropped, config.target_size)
}
