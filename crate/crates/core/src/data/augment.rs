use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Image;

/// Two independently augmented views of one source image.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view_a: Image,
    pub view_b: Image,
    pub source: usize,
}

/// Crop / flip / colour-jitter pipeline producing contrastive views.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Random resized crop on/off.
    pub crop: bool,
    /// Crop area as a fraction of the image, drawn uniformly in `[min_area, max_area]`.
    pub min_area: f64,
    pub max_area: f64,
    /// Horizontal flip with probability 0.5.
    pub flip: bool,
    /// Per-channel brightness and contrast factors drawn in `[1 − jitter, 1 + jitter]`.
    pub jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop: true,
            min_area: 0.2,
            max_area: 1.0,
            flip: true,
            jitter: 0.4,
        }
    }
}

impl AugmentConfig {
    /// A pipeline that returns its input unchanged.
    pub fn identity() -> Self {
        AugmentConfig {
            crop: false,
            min_area: 1.0,
            max_area: 1.0,
            flip: false,
            jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.min_area && self.min_area <= self.max_area && self.max_area <= 1.0) {
            return Err(Error::Config(format!(
                "crop area range [{}, {}] must satisfy 0 < min ≤ max ≤ 1",
                self.min_area, self.max_area
            )));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::Config(format!("jitter {} must lie in [0, 1)", self.jitter)));
        }
        Ok(())
    }
}

/// Bilinear resample of the window `[y0, y0+ch) × [x0, x0+cw)` to the full
/// image size.
fn resized_crop(img: &Image, y0: usize, x0: usize, ch: usize, cw: usize) -> Image {
    let (h, w) = (img.height, img.width);
    let mut out = vec![0.0; img.data.len()];
    let sy = ch as f64 / h as f64;
    let sx = cw as f64 / w as f64;
    for c in 0..img.channels {
        for y in 0..h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64);
            let (iy, ty) = (fy.floor() as usize, fy - fy.floor());
            let iy1 = (iy + 1).min(ch - 1);
            for x in 0..w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
                let (ix, tx) = (fx.floor() as usize, fx - fx.floor());
                let ix1 = (ix + 1).min(cw - 1);
                let p = |yy: usize, xx: usize| img.at(c, y0 + yy, x0 + xx);
                let top = p(iy, ix) * (1.0 - tx) + p(iy, ix1) * tx;
                let bot = p(iy1, ix) * (1.0 - tx) + p(iy1, ix1) * tx;
                out[(c * h + y) * w + x] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    Image {
        channels: img.channels,
        height: h,
        width: w,
        data: out,
    }
}

/// One augmented view: random resized crop, horizontal flip, then
/// per-channel brightness/contrast jitter clamped to `[0, 1]`.
pub fn augment_view<R: Rng + ?Sized>(image: &Image, cfg: &AugmentConfig, rng: &mut R) -> Result<Image> {
    if image.height < 8 || image.width < 8 {
        return Err(Error::InvalidArgument(format!(
            "augmentation needs images of side ≥ 8, got {}×{}",
            image.height, image.width
        )));
    }
    let mut view = if cfg.crop {
        let area = if cfg.max_area > cfg.min_area {
            rng.random_range(cfg.min_area..=cfg.max_area)
        } else {
            cfg.min_area
        };
        let scale = area.sqrt();
        let ch = ((scale * image.height as f64).round() as usize).clamp(1, image.height);
        let cw = ((scale * image.width as f64).round() as usize).clamp(1, image.width);
        let y0 = rng.random_range(0..=image.height - ch);
        let x0 = rng.random_range(0..=image.width - cw);
        resized_crop(image, y0, x0, ch, cw)
    } else {
        image.clone()
    };
    if cfg.flip && rng.random_bool(0.5) {
        let (h, w) = (view.height, view.width);
        for c in 0..view.channels {
            for y in 0..h {
                view.data[(c * h + y) * w..(c * h + y + 1) * w].reverse();
            }
        }
    }
    if cfg.jitter > 0.0 {
        let plane = view.height * view.width;
        for chan in view.data.chunks_mut(plane) {
            let brightness = rng.random_range(1.0 - cfg.jitter..=1.0 + cfg.jitter);
            let contrast = rng.random_range(1.0 - cfg.jitter..=1.0 + cfg.jitter);
            chan.iter_mut().for_each(|v| *v *= brightness);
            let mean = chan.iter().sum::<f64>() / plane as f64;
            chan.iter_mut()
                .for_each(|v| *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0));
        }
    }
    Ok(view)
}

/// Two views of the same image, drawn one after the other from `rng`.
pub fn augment_pair<R: Rng + ?Sized>(
    image: &Image,
    source: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<ViewPair> {
    let view_a = augment_view(image, cfg, rng)?;
    let view_b = augment_view(image, cfg, rng)?;
    Ok(ViewPair { view_a, view_b, source })
}

/// Counter-clockwise rotation by `k · 90°` of a square image.
pub fn rotate4(image: &Image, k: usize) -> Result<Image> {
    if image.height != image.width {
        return Err(Error::InvalidArgument(format!(
            "rotate4 needs a square image, got {}×{}",
            image.height, image.width
        )));
    }
    let n = image.height;
    let mut out = image.clone();
    for c in 0..image.channels {
        for i in 0..n {
            for j in 0..n {
                let (si, sj) = match k % 4 {
                    0 => (i, j),
                    1 => (j, n - 1 - i),
                    2 => (n - 1 - i, n - 1 - j),
                    _ => (n - 1 - j, i),
                };
                out.data[(c * n + i) * n + j] = image.at(c, si, sj);
            }
        }
    }
    Ok(out)
}
