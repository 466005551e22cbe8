use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::schedule::{apply_schedule, ApplyOptions, FrameMeta, ProtocolConfig};
use super::{DegradeError, DegradationKind};
use crate::fsutil::write_atomic;
use crate::rng::{derive_seed, fnv1a, stream};
use crate::video::{list_frames, load_frame, save_frame, ClipRole, VideoClip};

pub const DATASET_FILE: &str = "dataset.json";
pub const META_FILE: &str = "meta.jsonl";
const FORMAT_VERSION: u32 = 1;

/// One line of `meta.jsonl`. Paths are relative to the clip directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecordMeta {
    pub video_id: String,
    pub lq: String,
    pub gt: String,
    #[serde(flatten)]
    pub meta: FrameMeta,
}

impl FrameRecordMeta {
    pub fn kinds(&self) -> Vec<DegradationKind> {
        self.meta.specs.iter().map(|s| s.kind()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub video_id: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub config: ProtocolConfig,
    pub clips: Vec<ClipEntry>,
}

struct SourceClip {
    video_id: String,
    /// Frames the degradations are applied to.
    input: Vec<PathBuf>,
    /// Clean targets; equal to `input` unless the source ships separate ones.
    gt: Vec<PathBuf>,
}

fn discover_sources(source_dir: &Path) -> Result<Vec<SourceClip>, DegradeError> {
    let rd = std::fs::read_dir(source_dir)
        .map_err(|e| DegradeError::Dataset(format!("cannot read source dir {}: {e}", source_dir.display())))?;
    let mut dirs: Vec<PathBuf> = rd
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut clips = Vec::new();
    for dir in dirs {
        let video_id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| DegradeError::Dataset(format!("non UTF-8 clip name {}", dir.display())))?
            .to_string();
        let (input, gt) = if dir.join("gt").is_dir() {
            let gt = list_frames(&dir.join("gt"))?;
            let input = ["input", "blur"]
                .iter()
                .map(|n| dir.join(n))
                .find(|p| p.is_dir())
                .map(|p| list_frames(&p))
                .transpose()?
                .unwrap_or_else(|| gt.clone());
            (input, gt)
        } else {
            let f = list_frames(&dir)?;
            (f.clone(), f)
        };
        if input.is_empty() {
            continue;
        }
        if input.len() != gt.len() {
            return Err(DegradeError::Dataset(format!(
                "{video_id}: {} input frames vs {} gt frames",
                input.len(),
                gt.len()
            )));
        }
        clips.push(SourceClip { video_id, input, gt });
    }
    if clips.is_empty() {
        return Err(DegradeError::Dataset(format!("no source clips under {}", source_dir.display())));
    }
    Ok(clips)
}

fn load_clip(paths: &[PathBuf], role: ClipRole) -> Result<VideoClip, DegradeError> {
    let frames = paths.iter().map(|p| load_frame(p)).collect::<Result<Vec<_>, _>>()?;
    Ok(VideoClip::new(frames, role)?)
}

fn frame_name(i: usize) -> String {
    format!("frame_{i:06}.png")
}

fn synthesize_clip(
    src: &SourceClip,
    cfg: &ProtocolConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<ClipEntry, DegradeError> {
    let input = load_clip(&src.input, ClipRole::Gt)?;
    let gt = load_clip(&src.gt, ClipRole::Gt)?;
    if input.dims() != gt.dims() {
        return Err(DegradeError::Dataset(format!("{}: input and gt sizes differ", src.video_id)));
    }
    let clip_seed = derive_seed(seed, &[fnv1a(src.video_id.as_bytes())]);
    let mut rng = stream(clip_seed, &[0]);
    let schedule = cfg.schedule_for_clip(&mut rng, input.len())?;
    let opts = ApplyOptions {
        snow: cfg.snow.clone(),
        video_backend: cfg.video_backend.clone(),
    };
    let (lq, meta) = apply_schedule(&input, &schedule, &opts)?;
    let dir = out_dir.join(&src.video_id);
    std::fs::create_dir_all(dir.join("lq"))?;
    std::fs::create_dir_all(dir.join("gt"))?;
    let mut lines = String::new();
    for (i, (l, g)) in lq.frames.iter().zip(&gt.frames).enumerate() {
        save_frame(l, &dir.join("lq").join(frame_name(i)))?;
        save_frame(g, &dir.join("gt").join(frame_name(i)))?;
        let rec = FrameRecordMeta {
            video_id: src.video_id.clone(),
            lq: format!("lq/{}", frame_name(i)),
            gt: format!("gt/{}", frame_name(i)),
            meta: meta[i].clone(),
        };
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
    }
    write_atomic(&dir.join(META_FILE), lines.as_bytes())?;
    let (_, height, width) = lq.dims();
    Ok(ClipEntry {
        video_id: src.video_id.clone(),
        frames: lq.len(),
        height,
        width,
    })
}

/// Builds `out_dir/<video_id>/{lq,gt}/frame_%06d.png` plus per-clip
/// `meta.jsonl` and a top-level `dataset.json` written last.
///
/// Each clip draws from its own stream keyed by `(seed, video_id)`, so the
/// result does not depend on `jobs`.
pub fn synthesize_dataset(
    cfg: &ProtocolConfig,
    source_dir: &Path,
    out_dir: &Path,
    seed: u64,
    jobs: usize,
) -> Result<DatasetManifest, DegradeError> {
    cfg.validate()?;
    let sources = discover_sources(source_dir)?;
    std::fs::create_dir_all(out_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| DegradeError::Env(format!("thread pool: {e}")))?;
    let clips = pool.install(|| {
        sources
            .par_iter()
            .map(|s| synthesize_clip(s, cfg, seed, out_dir))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        seed,
        config: cfg.clone(),
        clips,
    };
    write_atomic(&out_dir.join(DATASET_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct DatasetClip {
    pub video_id: String,
    pub dir: PathBuf,
    pub frames: Vec<FrameRecordMeta>,
}

impl DatasetClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn lq_path(&self, i: usize) -> PathBuf {
        self.dir.join(&self.frames[i].lq)
    }

    pub fn gt_path(&self, i: usize) -> PathBuf {
        self.dir.join(&self.frames[i].gt)
    }

    pub fn load_lq(&self) -> Result<VideoClip, DegradeError> {
        let paths: Vec<_> = (0..self.len()).map(|i| self.lq_path(i)).collect();
        load_clip(&paths, ClipRole::Lq)
    }

    pub fn load_gt(&self) -> Result<VideoClip, DegradeError> {
        let paths: Vec<_> = (0..self.len()).map(|i| self.gt_path(i)).collect();
        for p in &paths {
            if !p.is_file() {
                return Err(DegradeError::Dataset(format!("missing ground truth {}", p.display())));
            }
        }
        load_clip(&paths, ClipRole::Gt)
    }
}

/// A synthesized dataset opened for reading.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub clips: Vec<DatasetClip>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, DegradeError> {
        let text = std::fs::read_to_string(root.join(DATASET_FILE))
            .map_err(|e| DegradeError::Dataset(format!("{}: {e}", root.join(DATASET_FILE).display())))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(DegradeError::Dataset(format!(
                "unsupported dataset version {}",
                manifest.format_version
            )));
        }
        let mut clips = Vec::with_capacity(manifest.clips.len());
        for entry in &manifest.clips {
            let dir = root.join(&entry.video_id);
            let text = std::fs::read_to_string(dir.join(META_FILE))?;
            let frames = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<Result<Vec<FrameRecordMeta>, _>>()?;
            if frames.len() != entry.frames {
                return Err(DegradeError::Dataset(format!(
                    "{}: manifest lists {} frames, metadata has {}",
                    entry.video_id,
                    entry.frames,
                    frames.len()
                )));
            }
            clips.push(DatasetClip {
                video_id: entry.video_id.clone(),
                dir,
                frames,
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            clips,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.clips.iter().map(|c| c.len()).sum()
    }
}
