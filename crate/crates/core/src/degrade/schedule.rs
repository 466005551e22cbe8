use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::compress::{compress, CompressionMode, VideoBackend};
use super::ops::{add_gaussian_noise, add_poisson_noise, add_speckle_noise, apply_blur, overlay_snow, SnowConfig};
use super::{canonical_order, Codec, DegradeError, DegradationKind, DegradationSpec, Intensity};
use crate::rng::stream;
use crate::video::{clamp_unit, VideoClip};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "threeD_denoise")]
    ThreeDDenoise,
    #[serde(rename = "TUD")]
    Tud,
    #[serde(rename = "snowyscenes")]
    SnowyScenes,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::ThreeDDenoise => "threeD_denoise",
            Protocol::Tud => "TUD",
            Protocol::SnowyScenes => "snowyscenes",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "threed_denoise" | "3d_denoise" | "denoise" => Ok(Protocol::ThreeDDenoise),
            "tud" => Ok(Protocol::Tud),
            "snowyscenes" | "snowy_scenes" => Ok(Protocol::SnowyScenes),
            _ => Err(format!("unknown protocol {s:?} (threeD_denoise, TUD, snowyscenes)")),
        }
    }
}

/// Sampling ranges for per-segment parameters. Noise sigmas are on the
/// 0–255 scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParamRanges {
    pub gaussian_sigma: (f64, f64),
    pub speckle_sigma: (f64, f64),
    pub poisson_alpha: (f64, f64),
    pub blur_sigma: (f64, f64),
    pub resize_factors: Vec<f64>,
    pub jpeg_qualities: Vec<u8>,
    pub codecs: Vec<Codec>,
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            gaussian_sigma: (10.0, 15.0),
            speckle_sigma: (10.0, 15.0),
            poisson_alpha: (2.0, 4.0),
            blur_sigma: (1.0, 2.0),
            resize_factors: vec![2.0, 3.0],
            jpeg_qualities: vec![20, 30, 40],
            codecs: Codec::ALL.to_vec(),
        }
    }
}

impl ParamRanges {
    pub fn validate(&self) -> Result<(), DegradeError> {
        let bad = |what: &str| Err(DegradeError::Param(format!("range {what} is invalid")));
        for (name, (lo, hi)) in [
            ("gaussian_sigma", self.gaussian_sigma),
            ("speckle_sigma", self.speckle_sigma),
            ("poisson_alpha", self.poisson_alpha),
            ("blur_sigma", self.blur_sigma),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= 0.0) {
                return bad(name);
            }
        }
        if self.poisson_alpha.0 <= 0.0 || self.blur_sigma.0 <= 0.0 {
            return bad("poisson_alpha/blur_sigma (must be > 0)");
        }
        if self.resize_factors.is_empty() || self.resize_factors.iter().any(|&f| !(f > 1.0)) {
            return bad("resize_factors");
        }
        if self.jpeg_qualities.is_empty() || self.jpeg_qualities.iter().any(|q| !(1..=100).contains(q)) {
            return bad("jpeg_qualities");
        }
        if self.codecs.is_empty() {
            return bad("codecs");
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn draw_spec<R: Rng + ?Sized>(kind: DegradationKind, r: &ParamRanges, rng: &mut R) -> DegradationSpec {
    match kind {
        DegradationKind::GaussianNoise => DegradationSpec::GaussianNoise {
            sigma: uniform(rng, r.gaussian_sigma),
        },
        DegradationKind::SpeckleNoise => DegradationSpec::SpeckleNoise {
            sigma: uniform(rng, r.speckle_sigma),
        },
        DegradationKind::PoissonNoise => DegradationSpec::PoissonNoise {
            alpha: uniform(rng, r.poisson_alpha),
        },
        DegradationKind::GaussianBlur => DegradationSpec::GaussianBlur {
            sigma: uniform(rng, r.blur_sigma),
        },
        DegradationKind::ResizeBlur => DegradationSpec::ResizeBlur {
            factor: *r.resize_factors.choose(rng).expect("validated non-empty"),
        },
        DegradationKind::Snow => DegradationSpec::Snow {
            intensity: if rng.random_bool(0.5) {
                Intensity::Severe
            } else {
                Intensity::Moderate
            },
        },
        DegradationKind::JpegCompression => DegradationSpec::JpegCompression {
            quality: *r.jpeg_qualities.choose(rng).expect("validated non-empty"),
        },
        DegradationKind::VideoCompression => DegradationSpec::VideoCompression {
            codec: *r.codecs.choose(rng).expect("validated non-empty"),
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSegment {
    pub index: usize,
    /// In canonical application order.
    pub specs: Vec<DegradationSpec>,
}

/// Segment `s` governs frames `[s*t, (s+1)*t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSchedule {
    pub interval_t: usize,
    pub segments: Vec<ScheduleSegment>,
    /// Root of the per-frame noise / snow streams.
    pub seed: u64,
}

impl DegradationSchedule {
    pub fn segment_of(&self, frame: usize) -> usize {
        frame / self.interval_t
    }

    pub fn frames_covered(&self) -> usize {
        self.segments.len() * self.interval_t
    }
}

/// Draws `n_segments` segments, each including every candidate independently
/// with probability `p`.
pub fn sample_schedule<R: Rng + ?Sized>(
    rng: &mut R,
    interval_t: usize,
    n_segments: usize,
    candidates: &[DegradationKind],
    p: f64,
    ranges: &ParamRanges,
) -> Result<DegradationSchedule, DegradeError> {
    if candidates.is_empty() {
        return Err(DegradeError::Schedule("no candidate degradations".into()));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(DegradeError::Schedule(format!("inclusion probability {p} outside (0, 1]")));
    }
    if interval_t == 0 {
        return Err(DegradeError::Schedule("interval t must be >= 1".into()));
    }
    ranges.validate()?;
    let seed = rng.next_u64();
    let segments = (0..n_segments)
        .map(|index| {
            let mut specs: Vec<DegradationSpec> = candidates
                .iter()
                .filter_map(|&k| rng.random_bool(p).then(|| draw_spec(k, ranges, rng)))
                .collect();
            canonical_order(&mut specs);
            ScheduleSegment { index, specs }
        })
        .collect();
    Ok(DegradationSchedule {
        interval_t,
        segments,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub protocol: Protocol,
    pub interval_t: usize,
    pub p: f64,
    pub ranges: ParamRanges,
    /// Per-clip gaussian sigma range for the single-degradation denoise set.
    pub denoise_sigma: (f64, f64),
    pub snow: SnowConfig,
    pub video_backend: VideoBackend,
    /// Replaces the protocol's candidate list when set.
    pub candidates: Option<Vec<DegradationKind>>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self::new(Protocol::Tud)
    }
}

impl ProtocolConfig {
    pub fn new(protocol: Protocol) -> Self {
        Self {
            protocol,
            interval_t: 6,
            p: 0.55,
            ranges: ParamRanges::default(),
            denoise_sigma: (20.0, 50.0),
            snow: SnowConfig::default(),
            video_backend: VideoBackend::Auto,
            candidates: None,
        }
    }

    /// Degradations drawn with probability `p` in each segment.
    pub fn candidates(&self) -> Vec<DegradationKind> {
        use DegradationKind::*;
        if let Some(c) = &self.candidates {
            return c.clone();
        }
        match self.protocol {
            Protocol::ThreeDDenoise => vec![GaussianNoise],
            Protocol::Tud => vec![
                GaussianNoise,
                SpeckleNoise,
                PoissonNoise,
                GaussianBlur,
                ResizeBlur,
                JpegCompression,
                VideoCompression,
            ],
            Protocol::SnowyScenes => vec![
                GaussianNoise,
                SpeckleNoise,
                PoissonNoise,
                JpegCompression,
                VideoCompression,
            ],
        }
    }

    pub fn validate(&self) -> Result<(), DegradeError> {
        self.ranges.validate()?;
        let (lo, hi) = self.denoise_sigma;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(DegradeError::Param(format!("denoise sigma range {lo}..{hi} invalid")));
        }
        if self.interval_t == 0 {
            return Err(DegradeError::Schedule("interval t must be >= 1".into()));
        }
        if let Some(c) = &self.candidates {
            if c.is_empty() {
                return Err(DegradeError::Schedule("candidate override is empty".into()));
            }
            if self.protocol == Protocol::SnowyScenes && c.contains(&DegradationKind::Snow) {
                return Err(DegradeError::Schedule("snow is always present in snowyscenes; drop it from candidates".into()));
            }
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(DegradeError::Schedule(format!("inclusion probability {} outside (0, 1]", self.p)));
        }
        Ok(())
    }

    /// The schedule for one clip of `n_frames` frames.
    ///
    /// The denoise protocol draws one sigma per clip and uses a single
    /// segment. SnowyScenes always carries snow, with its intensity
    /// redrawn every segment.
    pub fn schedule_for_clip<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        n_frames: usize,
    ) -> Result<DegradationSchedule, DegradeError> {
        self.validate()?;
        match self.protocol {
            Protocol::ThreeDDenoise => {
                let sigma = uniform(rng, self.denoise_sigma);
                let seed = rng.next_u64();
                Ok(DegradationSchedule {
                    interval_t: n_frames.max(1),
                    segments: vec![ScheduleSegment {
                        index: 0,
                        specs: vec![DegradationSpec::GaussianNoise { sigma }],
                    }],
                    seed,
                })
            }
            Protocol::Tud => {
                let n_seg = n_frames.div_ceil(self.interval_t);
                sample_schedule(rng, self.interval_t, n_seg, &self.candidates(), self.p, &self.ranges)
            }
            Protocol::SnowyScenes => {
                let n_seg = n_frames.div_ceil(self.interval_t);
                let mut s = sample_schedule(rng, self.interval_t, n_seg, &self.candidates(), self.p, &self.ranges)?;
                for seg in &mut s.segments {
                    seg.specs.push(draw_spec(DegradationKind::Snow, &self.ranges, rng));
                    canonical_order(&mut seg.specs);
                }
                Ok(s)
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ApplyOptions {
    pub snow: SnowConfig,
    pub video_backend: VideoBackend,
}

/// What was applied to one output frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub frame_index: usize,
    pub segment: usize,
    pub specs: Vec<DegradationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compression_mode: Option<CompressionMode>,
    /// `schedule_seed/segment/offset`: the stream address of this frame.
    pub seed_path: String,
}

/// Applies each segment's specs to its frames in canonical order.
pub fn apply_schedule(
    clip: &VideoClip,
    schedule: &DegradationSchedule,
    opts: &ApplyOptions,
) -> Result<(VideoClip, Vec<FrameMeta>), DegradeError> {
    let t = schedule.interval_t;
    if t == 0 {
        return Err(DegradeError::Schedule("interval t must be >= 1".into()));
    }
    if schedule.frames_covered() < clip.len() {
        return Err(DegradeError::Schedule(format!(
            "schedule covers {} frames, clip has {}",
            schedule.frames_covered(),
            clip.len()
        )));
    }
    let mut frames = Vec::with_capacity(clip.len());
    let mut meta = Vec::with_capacity(clip.len());
    for (s, seg) in schedule.segments.iter().enumerate() {
        let start = s * t;
        if start >= clip.len() {
            break;
        }
        let end = ((s + 1) * t).min(clip.len());
        let mut specs = seg.specs.clone();
        canonical_order(&mut specs);
        let mut out = Vec::with_capacity(end - start);
        for (offset, src) in clip.frames[start..end].iter().enumerate() {
            let mut x = src.clone();
            for spec in &specs {
                let mut rng = stream(schedule.seed, &[s as u64, offset as u64, spec.kind().rank() as u64]);
                x = match *spec {
                    DegradationSpec::GaussianNoise { sigma } => add_gaussian_noise(&x, sigma, &mut rng)?,
                    DegradationSpec::SpeckleNoise { sigma } => add_speckle_noise(&x, sigma, &mut rng)?,
                    DegradationSpec::PoissonNoise { alpha } => add_poisson_noise(&x, alpha, &mut rng)?,
                    DegradationSpec::GaussianBlur { sigma } => apply_blur(&x, DegradationKind::GaussianBlur, sigma)?,
                    DegradationSpec::ResizeBlur { factor } => apply_blur(&x, DegradationKind::ResizeBlur, factor)?,
                    DegradationSpec::Snow { intensity } => overlay_snow(&x, intensity, &opts.snow, &mut rng),
                    DegradationSpec::JpegCompression { .. } => {
                        compress(std::slice::from_ref(&x), spec, &opts.video_backend)?.0.remove(0)
                    }
                    // whole-segment pass below
                    DegradationSpec::VideoCompression { .. } => x,
                };
            }
            out.push(x);
        }
        let mut mode = None;
        if let Some(v) = specs.iter().find(|s| s.kind() == DegradationKind::VideoCompression) {
            let (compressed, m) = compress(&out, v, &opts.video_backend)?;
            out = compressed;
            mode = m;
        }
        for (offset, mut x) in out.into_iter().enumerate() {
            clamp_unit(&mut x);
            frames.push(x);
            meta.push(FrameMeta {
                frame_index: start + offset,
                segment: s,
                specs: specs.clone(),
                compression_mode: mode,
                seed_path: format!("{}/{s}/{offset}", schedule.seed),
            });
        }
    }
    let mut lq = VideoClip::new(frames, crate::video::ClipRole::Lq)?;
    lq.fps = clip.fps;
    Ok((lq, meta))
}
