//! Procedural clean clips for running the pipeline without external footage.

use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DegradeError;
use crate::rng::stream;
use crate::video::{save_frame, Frame};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceConfig {
    pub clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            clips: 4,
            frames: 12,
            height: 64,
            width: 64,
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

struct Disc {
    color: [f64; 3],
    radius: f64,
    pos: (f64, f64),
    vel: (f64, f64),
}

struct Scene {
    bg0: [f64; 3],
    bg1: [f64; 3],
    grad_angle: f64,
    tex_freq: f64,
    tex_dir: (f64, f64),
    tex_speed: f64,
    tex_amp: f64,
    discs: Vec<Disc>,
}

impl Scene {
    fn draw<R: Rng>(rng: &mut R, h: usize, w: usize) -> Self {
        let hue = rng.random_range(0.0..1.0);
        let sat = rng.random_range(0.15..0.9);
        let v0 = rng.random_range(0.15..0.85);
        let v1 = (v0 + rng.random_range(-0.3..0.3f64)).clamp(0.05, 0.95);
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let n_discs = rng.random_range(2..=4);
        let discs = (0..n_discs)
            .map(|_| Disc {
                color: hsv(
                    hue + rng.random_range(-0.25..0.25),
                    rng.random_range(0.2..1.0),
                    rng.random_range(0.1..1.0),
                ),
                radius: rng.random_range(0.08..0.22) * h.min(w) as f64,
                pos: (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)),
                vel: (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)),
            })
            .collect();
        Self {
            bg0: hsv(hue, sat, v0),
            bg1: hsv(hue + rng.random_range(-0.15..0.15), sat, v1),
            grad_angle: rng.random_range(0.0..std::f64::consts::TAU),
            tex_freq: rng.random_range(0.15..0.6),
            tex_dir: (a.cos(), a.sin()),
            tex_speed: rng.random_range(0.3..1.2),
            tex_amp: rng.random_range(0.03..0.12),
            discs,
        }
    }

    fn render(&self, t: usize, h: usize, w: usize) -> Frame {
        let (gc, gs) = (self.grad_angle.cos(), self.grad_angle.sin());
        let tf = t as f64;
        Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let u = ((xf / w as f64 - 0.5) * gc + (yf / h as f64 - 0.5) * gs + 0.5).clamp(0.0, 1.0);
            let mut v = self.bg0[c] * (1.0 - u) + self.bg1[c] * u;
            let phase = (xf * self.tex_dir.0 + yf * self.tex_dir.1) * self.tex_freq - tf * self.tex_speed;
            v += self.tex_amp * phase.sin();
            for d in &self.discs {
                let cx = (d.pos.0 + d.vel.0 * tf).rem_euclid(w as f64);
                let cy = (d.pos.1 + d.vel.1 * tf).rem_euclid(h as f64);
                let dist = ((xf - cx).powi(2) + (yf - cy).powi(2)).sqrt();
                // one-pixel soft edge
                let cover = (d.radius + 0.5 - dist).clamp(0.0, 1.0);
                v = v * (1.0 - cover) + d.color[c] * cover;
            }
            v.clamp(0.0, 1.0)
        })
    }
}

/// Writes `cfg.clips` clips of moving shapes over textured gradients to
/// `out_dir/clip_NNN/frame_%06d.png`. Returns the clip names.
pub fn generate_sources(out_dir: &Path, cfg: &SourceConfig, seed: u64) -> Result<Vec<String>, DegradeError> {
    if cfg.clips == 0 || cfg.frames == 0 || cfg.height == 0 || cfg.width == 0 {
        return Err(DegradeError::Param(format!("empty source config {cfg:?}")));
    }
    let mut names = Vec::with_capacity(cfg.clips);
    for i in 0..cfg.clips {
        let name = format!("clip_{i:03}");
        let mut rng = stream(seed, &[0x5eed, i as u64]);
        let scene = Scene::draw(&mut rng, cfg.height, cfg.width);
        let dir = out_dir.join(&name);
        std::fs::create_dir_all(&dir)?;
        for t in 0..cfg.frames {
            save_frame(&scene.render(t, cfg.height, cfg.width), &dir.join(format!("frame_{t:06}.png")))?;
        }
        names.push(name);
    }
    Ok(names)
}
