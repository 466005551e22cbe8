use std::path::{Path, PathBuf};
use std::process::Command;

use image::codecs::jpeg::JpegEncoder;
use image::ImageFormat;
use serde::{Deserialize, Serialize};

use super::{Codec, DegradeError, DegradationSpec};
use crate::video::{frame_to_rgb8, load_frame, rgb8_to_frame, save_frame, Frame};

/// JPEG quality used to imitate codec artifacts when no encoder is available.
pub const PROXY_JPEG_QUALITY: u8 = 30;

/// Overrides the encoder binary looked up on `PATH`.
pub const FFMPEG_ENV: &str = "RONIN_FFMPEG";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VideoBackend {
    /// External encoder when one is found, JPEG proxy otherwise.
    #[default]
    Auto,
    /// External encoder required; missing binary is an error.
    External,
    JpegProxy,
}

/// How a video-compression spec was actually realised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionMode {
    External,
    JpegProxy,
}

pub fn jpeg_roundtrip(frame: &Frame, quality: u8) -> Result<Frame, DegradeError> {
    if !(1..=100).contains(&quality) {
        return Err(DegradeError::Param(format!("jpeg quality {quality} outside 1..=100")));
    }
    let rgb = frame_to_rgb8(frame);
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode_image(&rgb)
        .map_err(|e| DegradeError::Encoder(format!("jpeg encode: {e}")))?;
    let decoded = image::load_from_memory_with_format(&buf, ImageFormat::Jpeg)
        .map_err(|e| DegradeError::Encoder(format!("jpeg decode: {e}")))?
        .to_rgb8();
    Ok(rgb8_to_frame(&decoded))
}

fn find_ffmpeg() -> Option<PathBuf> {
    if let Some(p) = std::env::var_os(FFMPEG_ENV) {
        let p = PathBuf::from(p);
        return p.is_file().then_some(p);
    }
    let path = std::env::var_os("PATH")?;
    std::env::split_paths(&path)
        .map(|d| d.join("ffmpeg"))
        .find(|p| p.is_file())
}

fn run(cmd: &mut Command) -> Result<(), DegradeError> {
    let out = cmd.output()?;
    if !out.status.success() {
        return Err(DegradeError::Encoder(String::from_utf8_lossy(&out.stderr).trim().to_string()));
    }
    Ok(())
}

fn external_roundtrip(bin: &Path, frames: &[Frame], codec: Codec) -> Result<Vec<Frame>, DegradeError> {
    let (_, h, w) = frames[0].dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(DegradeError::Param(format!("external encoder needs even dimensions, got {h}x{w}")));
    }
    let dir = tempfile::tempdir()?;
    let src = dir.path().join("src");
    let dst = dir.path().join("dst");
    std::fs::create_dir_all(&src)?;
    std::fs::create_dir_all(&dst)?;
    for (i, f) in frames.iter().enumerate() {
        save_frame(f, &src.join(format!("frame_{i:06}.png")))?;
    }
    let video = dir.path().join("clip.mkv");
    run(Command::new(bin)
        .args(["-nostdin", "-y", "-loglevel", "error", "-framerate", "24", "-i"])
        .arg(src.join("frame_%06d.png"))
        .args(["-c:v", codec.as_str(), "-pix_fmt", "yuv420p", "-threads", "1"])
        .arg(&video))?;
    run(Command::new(bin)
        .args(["-nostdin", "-y", "-loglevel", "error", "-i"])
        .arg(&video)
        .args(["-threads", "1", "-start_number", "0"])
        .arg(dst.join("frame_%06d.png")))?;
    let out = (0..frames.len())
        .map(|i| load_frame(&dst.join(format!("frame_{i:06}.png"))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(out)
}

/// Applies a compression spec to a run of frames. JPEG is per frame; video
/// compression encodes the run as one clip. Returns the mode used for video.
pub fn compress(
    frames: &[Frame],
    spec: &DegradationSpec,
    backend: &VideoBackend,
) -> Result<(Vec<Frame>, Option<CompressionMode>), DegradeError> {
    match *spec {
        DegradationSpec::JpegCompression { quality } => {
            let out = frames.iter().map(|f| jpeg_roundtrip(f, quality)).collect::<Result<_, _>>()?;
            Ok((out, None))
        }
        DegradationSpec::VideoCompression { codec } => {
            if frames.is_empty() {
                return Ok((Vec::new(), None));
            }
            let bin = match backend {
                VideoBackend::JpegProxy => None,
                VideoBackend::Auto => find_ffmpeg(),
                VideoBackend::External => Some(find_ffmpeg().ok_or_else(|| {
                    DegradeError::Env(format!("no ffmpeg on PATH (or {FFMPEG_ENV}) and proxy fallback disabled"))
                })?),
            };
            match bin {
                Some(bin) => Ok((external_roundtrip(&bin, frames, codec)?, Some(CompressionMode::External))),
                None => {
                    let out = frames
                        .iter()
                        .map(|f| jpeg_roundtrip(f, PROXY_JPEG_QUALITY))
                        .collect::<Result<_, _>>()?;
                    Ok((out, Some(CompressionMode::JpegProxy)))
                }
            }
        }
        other => Err(DegradeError::Param(format!("{} is not a compression", other.kind()))),
    }
}
