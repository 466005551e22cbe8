//! Degradation synthesis: per-frame operators, seeded time-varying schedules
//! and the on-disk paired dataset builder.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

mod compress;
mod dataset;
mod ops;
mod schedule;
mod source;

pub use compress::{compress, jpeg_roundtrip, CompressionMode, VideoBackend, PROXY_JPEG_QUALITY};
pub use dataset::{
    synthesize_dataset, ClipEntry, Dataset, DatasetClip, DatasetManifest, FrameRecordMeta, DATASET_FILE, META_FILE,
};
pub use ops::{add_gaussian_noise, add_poisson_noise, add_speckle_noise, apply_blur, overlay_snow, SnowConfig};
pub use schedule::{
    apply_schedule, sample_schedule, ApplyOptions, DegradationSchedule, FrameMeta, ParamRanges, Protocol,
    ProtocolConfig, ScheduleSegment,
};
pub use source::{generate_sources, SourceConfig};

#[derive(Debug, thiserror::Error)]
pub enum DegradeError {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("schedule: {0}")]
    Schedule(String),
    #[error("environment: {0}")]
    Env(String),
    #[error("external encoder failed: {0}")]
    Encoder(String),
    #[error(transparent)]
    Video(#[from] crate::video::VideoError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error("dataset: {0}")]
    Dataset(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intensity {
    Moderate,
    Severe,
}

impl Intensity {
    pub fn as_str(self) -> &'static str {
        match self {
            Intensity::Moderate => "moderate",
            Intensity::Severe => "severe",
        }
    }
}

impl fmt::Display for Intensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Intensity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "moderate" => Ok(Intensity::Moderate),
            "severe" => Ok(Intensity::Severe),
            other => Err(format!("unknown intensity {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Codec {
    Libx264,
    H264,
    Mpeg4,
}

impl Codec {
    pub const ALL: [Codec; 3] = [Codec::Libx264, Codec::H264, Codec::Mpeg4];

    pub fn as_str(self) -> &'static str {
        match self {
            Codec::Libx264 => "libx264",
            Codec::H264 => "h264",
            Codec::Mpeg4 => "mpeg4",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    GaussianNoise,
    SpeckleNoise,
    PoissonNoise,
    GaussianBlur,
    ResizeBlur,
    Snow,
    JpegCompression,
    VideoCompression,
}

impl DegradationKind {
    /// In canonical application order.
    pub const ALL: [DegradationKind; 8] = [
        DegradationKind::GaussianNoise,
        DegradationKind::SpeckleNoise,
        DegradationKind::PoissonNoise,
        DegradationKind::GaussianBlur,
        DegradationKind::ResizeBlur,
        DegradationKind::Snow,
        DegradationKind::JpegCompression,
        DegradationKind::VideoCompression,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DegradationKind::GaussianNoise => "gaussian_noise",
            DegradationKind::SpeckleNoise => "speckle_noise",
            DegradationKind::PoissonNoise => "poisson_noise",
            DegradationKind::GaussianBlur => "gaussian_blur",
            DegradationKind::ResizeBlur => "resize_blur",
            DegradationKind::Snow => "snow",
            DegradationKind::JpegCompression => "jpeg_compression",
            DegradationKind::VideoCompression => "video_compression",
        }
    }

    /// The coarse name a describer would use ("noise", "blur", ...).
    pub fn family(self) -> &'static str {
        match self {
            DegradationKind::GaussianNoise | DegradationKind::SpeckleNoise | DegradationKind::PoissonNoise => "noise",
            DegradationKind::GaussianBlur | DegradationKind::ResizeBlur => "blur",
            DegradationKind::Snow => "snow",
            DegradationKind::JpegCompression | DegradationKind::VideoCompression => "compression",
        }
    }

    /// Position in the noise → blur → snow → compression order.
    pub fn rank(self) -> usize {
        self as usize
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DegradationKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        DegradationKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown degradation kind {s:?}"))
    }
}

/// One degradation with its parameters. Noise levels are on the 0–255 scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DegradationSpec {
    GaussianNoise { sigma: f64 },
    SpeckleNoise { sigma: f64 },
    PoissonNoise { alpha: f64 },
    GaussianBlur { sigma: f64 },
    ResizeBlur { factor: f64 },
    Snow { intensity: Intensity },
    JpegCompression { quality: u8 },
    VideoCompression { codec: Codec },
}

impl DegradationSpec {
    pub fn kind(&self) -> DegradationKind {
        match self {
            DegradationSpec::GaussianNoise { .. } => DegradationKind::GaussianNoise,
            DegradationSpec::SpeckleNoise { .. } => DegradationKind::SpeckleNoise,
            DegradationSpec::PoissonNoise { .. } => DegradationKind::PoissonNoise,
            DegradationSpec::GaussianBlur { .. } => DegradationKind::GaussianBlur,
            DegradationSpec::ResizeBlur { .. } => DegradationKind::ResizeBlur,
            DegradationSpec::Snow { .. } => DegradationKind::Snow,
            DegradationSpec::JpegCompression { .. } => DegradationKind::JpegCompression,
            DegradationSpec::VideoCompression { .. } => DegradationKind::VideoCompression,
        }
    }
}

/// Sorts specs into the canonical application order (stable within a kind).
pub fn canonical_order(specs: &mut [DegradationSpec]) {
    specs.sort_by_key(|s| s.kind().rank());
}
