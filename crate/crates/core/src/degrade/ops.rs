use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DegradeError, DegradationKind, Intensity};
use crate::video::Frame;

fn check_sigma(sigma: f64) -> Result<(), DegradeError> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(DegradeError::Param(format!("noise sigma must be >= 0, got {sigma}")));
    }
    Ok(())
}

/// `clamp(x + n)`, `n ~ N(0, (sigma/255)^2)` per pixel and channel.
pub fn add_gaussian_noise<R: Rng + ?Sized>(frame: &Frame, sigma: f64, rng: &mut R) -> Result<Frame, DegradeError> {
    check_sigma(sigma)?;
    if sigma == 0.0 {
        return Ok(frame.clone());
    }
    let s = sigma / 255.0;
    Ok(frame.mapv(|x| {
        let n: f64 = StandardNormal.sample(rng);
        (x + s * n).clamp(0.0, 1.0)
    }))
}

/// `clamp(x + x * n)`, `n ~ N(0, (sigma/255)^2)`.
pub fn add_speckle_noise<R: Rng + ?Sized>(frame: &Frame, sigma: f64, rng: &mut R) -> Result<Frame, DegradeError> {
    check_sigma(sigma)?;
    if sigma == 0.0 {
        return Ok(frame.clone());
    }
    let s = sigma / 255.0;
    Ok(frame.mapv(|x| {
        let n: f64 = StandardNormal.sample(rng);
        (x + x * s * n).clamp(0.0, 1.0)
    }))
}

/// `clamp(x + (P(10^alpha x) / 10^alpha - x))`.
pub fn add_poisson_noise<R: Rng + ?Sized>(frame: &Frame, alpha: f64, rng: &mut R) -> Result<Frame, DegradeError> {
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(DegradeError::Param(format!("poisson alpha must be > 0, got {alpha}")));
    }
    let scale = 10f64.powf(alpha);
    let mut out = frame.clone();
    for x in out.iter_mut() {
        let lam = scale * *x;
        let k = if lam > 0.0 {
            Poisson::new(lam)
                .map_err(|e| DegradeError::Param(format!("poisson rate {lam}: {e}")))?
                .sample(rng)
        } else {
            0.0
        };
        *x = (*x + (k / scale - *x)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(mut i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn gaussian_blur(frame: &Frame, sigma: f64) -> Frame {
    let (c, h, w) = frame.dim();
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = Array3::<f64>::zeros((c, h, w));
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    acc += kv * frame[[ci, y, reflect(x as isize + j as isize - r, w)]];
                }
                tmp[[ci, y, x]] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    acc += kv * tmp[[ci, reflect(y as isize + j as isize - r, h), x]];
                }
                out[[ci, y, x]] = acc.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Half-pixel-centred bilinear resampling of every channel to `(oh, ow)`.
fn resize_bilinear(frame: &Frame, oh: usize, ow: usize) -> Frame {
    let (c, h, w) = frame.dim();
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    for ci in 0..c {
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = frame[[ci, y0, x0]] + fx * (frame[[ci, y0, x1]] - frame[[ci, y0, x0]]);
                let bot = frame[[ci, y1, x0]] + fx * (frame[[ci, y1, x1]] - frame[[ci, y1, x0]]);
                out[[ci, y, x]] = top + fy * (bot - top);
            }
        }
    }
    out
}

/// Gaussian blur (`strength` = kernel sigma in pixels) or resize blur
/// (`strength` = downscale factor, bilinear down then back up).
pub fn apply_blur(frame: &Frame, kind: DegradationKind, strength: f64) -> Result<Frame, DegradeError> {
    let (_, h, w) = frame.dim();
    match kind {
        DegradationKind::GaussianBlur => {
            if !(strength > 0.0 && strength <= 50.0) {
                return Err(DegradeError::Param(format!("blur sigma {strength} outside (0, 50]")));
            }
            Ok(gaussian_blur(frame, strength))
        }
        DegradationKind::ResizeBlur => {
            if !(strength > 1.0 && strength <= h.min(w) as f64) {
                return Err(DegradeError::Param(format!(
                    "resize factor {strength} outside (1, {}]",
                    h.min(w)
                )));
            }
            let dh = ((h as f64 / strength).round() as usize).max(1);
            let dw = ((w as f64 / strength).round() as usize).max(1);
            let mut out = resize_bilinear(&resize_bilinear(frame, dh, dw), h, w);
            out.mapv_inplace(|v| v.clamp(0.0, 1.0));
            Ok(out)
        }
        other => Err(DegradeError::Param(format!("{other} is not a blur"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SnowConfig {
    /// Flakes per pixel.
    pub moderate_density: f64,
    pub severe_density: f64,
    /// Flake radius range in pixels.
    pub moderate_radius: (f64, f64),
    pub severe_radius: (f64, f64),
    pub opacity: (f64, f64),
    /// Ratio of streak length to flake width.
    pub elongation: (f64, f64),
    /// Maximum streak tilt from vertical, degrees.
    pub max_angle_deg: f64,
}

impl Default for SnowConfig {
    fn default() -> Self {
        Self {
            moderate_density: 1.5e-3,
            severe_density: 6e-3,
            moderate_radius: (0.6, 1.4),
            severe_radius: (0.8, 2.0),
            opacity: (0.5, 1.0),
            elongation: (1.0, 3.0),
            max_angle_deg: 25.0,
        }
    }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Composites a seeded field of streaked white Gaussian flakes over the frame.
pub fn overlay_snow<R: Rng + ?Sized>(frame: &Frame, intensity: Intensity, cfg: &SnowConfig, rng: &mut R) -> Frame {
    let (c, h, w) = frame.dim();
    let (density, radius) = match intensity {
        Intensity::Moderate => (cfg.moderate_density, cfg.moderate_radius),
        Intensity::Severe => (cfg.severe_density, cfg.severe_radius),
    };
    let count = ((density * (h * w) as f64).round() as usize).max(1);
    let theta = draw(rng, (-cfg.max_angle_deg, cfg.max_angle_deg)).to_radians();
    let (st, ct) = theta.sin_cos();
    let mut alpha = vec![0.0f64; h * w];
    for _ in 0..count {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let r = draw(rng, radius);
        let op = draw(rng, cfg.opacity);
        let el = draw(rng, cfg.elongation);
        let (s_long, s_short) = (r * el, r);
        let reach = (3.0 * s_long).ceil() as isize;
        let (x0, y0) = (cx.floor() as isize, cy.floor() as isize);
        for y in (y0 - reach).max(0)..=(y0 + reach).min(h as isize - 1) {
            for x in (x0 - reach).max(0)..=(x0 + reach).min(w as isize - 1) {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let along = dx * st + dy * ct;
                let across = dx * ct - dy * st;
                let a = op * (-0.5 * (along * along / (s_long * s_long) + across * across / (s_short * s_short))).exp();
                let cell = &mut alpha[y as usize * w + x as usize];
                *cell += a * (1.0 - *cell);
            }
        }
    }
    let mut out = frame.clone();
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let a = alpha[y * w + x];
                let v = &mut out[[ci, y, x]];
                *v = (*v * (1.0 - a) + a).clamp(0.0, 1.0);
            }
        }
    }
    out
}

#[cfg(test)]
pub(crate) fn snow_alpha_coverage(before: &Frame, after: &Frame, thresh: f64) -> usize {
    // alpha = (out - in) / (1 - in) on the first channel where in < 1
    let (_, h, w) = before.dim();
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            let i = before[[0, y, x]];
            if i < 1.0 && (after[[0, y, x]] - i) / (1.0 - i) > thresh {
                n += 1;
            }
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_mirrors_without_edge_repeat() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect(-4, 1), 0);
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(1.5);
        assert_eq!(k.len(), 11);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..k.len() {
            assert_eq!(k[i], k[k.len() - 1 - i]);
        }
    }

    #[test]
    fn resize_identity_when_same_size() {
        let f = Array3::from_shape_fn((1, 3, 4), |(_, y, x)| (y * 4 + x) as f64 / 12.0);
        assert_eq!(resize_bilinear(&f, 3, 4), f);
    }
}
