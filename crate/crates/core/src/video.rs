//! Frames, clips and their 8-bit on-disk form.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

/// A `[channels, height, width]` image with values in `[0, 1]`.
pub type Frame = Array3<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipRole {
    Lq,
    Gt,
    Restored,
}

#[derive(Debug, thiserror::Error)]
pub enum VideoError {
    #[error("clip has no frames")]
    Empty,
    #[error("frame {index} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        index: usize,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("image {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<Frame>,
    pub role: ClipRole,
    pub fps: f64,
}

impl VideoClip {
    pub fn new(frames: Vec<Frame>, role: ClipRole) -> Result<Self, VideoError> {
        let first = frames.first().ok_or(VideoError::Empty)?;
        let expected = first.shape().to_vec();
        for (index, f) in frames.iter().enumerate() {
            if f.shape() != expected.as_slice() {
                return Err(VideoError::ShapeMismatch {
                    index,
                    got: f.shape().to_vec(),
                    expected,
                });
            }
        }
        Ok(Self {
            frames,
            role,
            fps: 24.0,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(channels, height, width)` of every frame.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.frames[0].shape();
        (s[0], s[1], s[2])
    }
}

pub fn clamp_unit(frame: &mut Frame) {
    frame.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
}

pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn frame_to_rgb8(frame: &Frame) -> RgbImage {
    let (c, h, w) = frame.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| quantize_u8(frame[[ch.min(c - 1), y as usize, x as usize]]);
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn rgb8_to_frame(img: &RgbImage) -> Frame {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    })
}

/// Rounds every value onto the 8-bit grid.
pub fn quantize_frame(frame: &Frame) -> Frame {
    frame.mapv(|v| quantize_u8(v) as f64 / 255.0)
}

pub fn load_frame(path: &Path) -> Result<Frame, VideoError> {
    let img = image::open(path).map_err(|source| VideoError::Image {
        path: path.display().to_string(),
        source,
    })?;
    Ok(rgb8_to_frame(&img.to_rgb8()))
}

pub fn save_frame(frame: &Frame, path: &Path) -> Result<(), VideoError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| VideoError::Io {
            path: parent.display().to_string(),
            source,
        })?;
    }
    frame_to_rgb8(frame)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| VideoError::Image {
            path: path.display().to_string(),
            source,
        })
}

/// Sorted image files (png/jpg) directly under `dir`.
pub fn list_frames(dir: &Path) -> Result<Vec<std::path::PathBuf>, VideoError> {
    let rd = std::fs::read_dir(dir).map_err(|source| VideoError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut out: Vec<_> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                    Some("png" | "jpg" | "jpeg")
                )
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Luma (BT.601) of an RGB frame, `[h, w]`.
pub fn luma(frame: &Frame) -> ndarray::Array2<f64> {
    let (c, h, w) = frame.dim();
    if c < 3 {
        return frame.index_axis(ndarray::Axis(0), 0).to_owned();
    }
    ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
        0.299 * frame[[0, y, x]] + 0.587 * frame[[1, y, x]] + 0.114 * frame[[2, y, x]]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_exact_on_8bit_grid() {
        let dir = tempfile::tempdir().unwrap();
        let f = Array3::from_shape_fn((3, 5, 7), |(c, y, x)| ((c * 31 + y * 7 + x * 3) % 256) as f64 / 255.0);
        let p = dir.path().join("a.png");
        save_frame(&f, &p).unwrap();
        assert_eq!(load_frame(&p).unwrap(), f);
    }

    #[test]
    fn clip_rejects_mixed_shapes() {
        let a = Frame::zeros((3, 4, 4));
        let b = Frame::zeros((3, 4, 5));
        assert!(matches!(
            VideoClip::new(vec![a, b], ClipRole::Gt),
            Err(VideoError::ShapeMismatch { index: 1, .. })
        ));
        assert!(matches!(VideoClip::new(vec![], ClipRole::Gt), Err(VideoError::Empty)));
    }
}
