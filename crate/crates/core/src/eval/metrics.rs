use ndarray::Array2;

use super::EvalError;
use crate::video::{luma, Frame};

/// PSNR of a zero-error pair.
pub const PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_shape(a: &Frame, b: &Frame) -> Result<(), EvalError> {
    if a.shape() != b.shape() {
        return Err(EvalError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// PSNR in dB over all channels, peak 1.0, capped at [`PSNR_CAP`].
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64, EvalError> {
    same_shape(a, b)?;
    let mse = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter, valid region only.
fn filter_valid(x: &Array2<f64>, k: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = x.dim();
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for ox in 0..ow {
            rows[[y, ox]] = (0..SSIM_WINDOW).map(|i| k[i] * x[[y, ox + i]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for oy in 0..oh {
        for ox in 0..ow {
            out[[oy, ox]] = (0..SSIM_WINDOW).map(|i| k[i] * rows[[oy + i, ox]]).sum();
        }
    }
    out
}

/// Mean SSIM over the valid-region map, on BT.601 luma.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64, EvalError> {
    same_shape(a, b)?;
    let (_, h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(EvalError::Shape(format!(
            "{h}x{w} frame is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let (x, y) = (luma(a), luma(b));
    let k = gaussian_taps();
    let mx = filter_valid(&x, &k);
    let my = filter_valid(&y, &k);
    let sxx = filter_valid(&(&x * &x), &k);
    let syy = filter_valid(&(&y * &y), &k);
    let sxy = filter_valid(&(&x * &y), &k);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    for (((&mx, &my), (&sxx, &syy)), &sxy) in mx.iter().zip(&my).zip(sxx.iter().zip(&syy)).zip(&sxy) {
        let vx = sxx - mx * mx;
        let vy = syy - my * my;
        let cxy = sxy - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}
