//! PSNR / SSIM evaluation and the prompt analyses: perturbation, alignment
//! with the stored text embeddings, and prompt export.

mod metrics;
mod report;

use ndarray::Array1;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::degrade::{Dataset, DegradeError};
use crate::fsutil::sha256_hex;
use crate::grounding::{EmbeddingStore, FrameRef, GroundedFrameRecord, GroundingError};
use crate::model::{ModelError, Restorer};
use crate::rng::{fnv1a, stream};

pub use metrics::{gaussian_taps, psnr, ssim, PSNR_CAP, SSIM_SIGMA, SSIM_WINDOW};
pub use report::{alignment_text, metrics_csv, metrics_table, write_json};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Data(#[from] DegradeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Store(#[from] GroundingError),
    #[error("{0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub video_id: String,
    pub frames: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Scores are averaged over frames within a video, then over videos.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: String,
    pub interval_t: usize,
    pub checkpoint: String,
    /// Std of the Gaussian noise added to every prompt, if any.
    pub prompt_noise_sigma: Option<f64>,
    pub videos: Vec<VideoScore>,
    pub psnr: f64,
    pub ssim: f64,
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, EvalError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| EvalError::Config(format!("thread pool: {e}")))
}

fn score_clip(
    model: Option<&Restorer>,
    ds: &Dataset,
    ci: usize,
    noise: Option<(f64, u64)>,
) -> Result<VideoScore, EvalError> {
    let clip = &ds.clips[ci];
    let lq = clip.load_lq()?;
    let gt = clip.load_gt()?;
    let restored = match model {
        None => lq,
        Some(m) => {
            let d = m.config.d;
            m.restore_clip_with(&lq, |t| {
                noise.map(|(sigma, seed)| {
                    let mut rng = stream(seed, &[fnv1a(clip.video_id.as_bytes()), t as u64]);
                    Array1::from_shape_simple_fn(d, || {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        sigma * z
                    })
                })
            })?
            .0
        }
    };
    let n = gt.len();
    let (mut p, mut s) = (0.0, 0.0);
    for (r, g) in restored.frames.iter().zip(&gt.frames) {
        p += psnr(r, g)?;
        s += ssim(r, g)?;
    }
    Ok(VideoScore {
        video_id: clip.video_id.clone(),
        frames: n,
        psnr: p / n as f64,
        ssim: s / n as f64,
    })
}

fn report(
    model: Option<&Restorer>,
    ds: &Dataset,
    checkpoint: &str,
    noise: Option<(f64, u64)>,
    jobs: usize,
) -> Result<MetricsReport, EvalError> {
    if ds.clips.is_empty() {
        return Err(EvalError::Config("dataset has no clips".into()));
    }
    let videos = pool(jobs)?.install(|| {
        (0..ds.clips.len())
            .into_par_iter()
            .map(|ci| score_clip(model, ds, ci, noise))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let n = videos.len() as f64;
    Ok(MetricsReport {
        protocol: ds.manifest.config.protocol.to_string(),
        interval_t: ds.manifest.config.interval_t,
        checkpoint: checkpoint.to_string(),
        prompt_noise_sigma: noise.map(|(s, _)| s),
        psnr: videos.iter().map(|v| v.psnr).sum::<f64>() / n,
        ssim: videos.iter().map(|v| v.ssim).sum::<f64>() / n,
        videos,
    })
}

/// Restores every LQ clip causally and scores it against its GT.
pub fn evaluate(model: &Restorer, ds: &Dataset, checkpoint: &str, jobs: usize) -> Result<MetricsReport, EvalError> {
    report(Some(model), ds, checkpoint, None, jobs)
}

/// Scores the LQ inputs themselves against GT.
pub fn evaluate_inputs(ds: &Dataset, jobs: usize) -> Result<MetricsReport, EvalError> {
    report(None, ds, "input", None, jobs)
}

/// [`evaluate`] with `N(0, sigma^2)` noise added to each frame's prompt
/// before injection. The noise is seeded per video and frame.
pub fn perturb_prompts_eval(
    model: &Restorer,
    ds: &Dataset,
    checkpoint: &str,
    sigma: f64,
    seed: u64,
    jobs: usize,
) -> Result<MetricsReport, EvalError> {
    if !(sigma >= 0.0) {
        return Err(EvalError::Config(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return evaluate(model, ds, checkpoint, jobs);
    }
    report(Some(model), ds, checkpoint, Some((sigma, seed)), jobs)
}

/// Cosine similarity; a zero vector gives `(0.0, true)`.
pub fn cosine(a: &[f64], b: &[f64]) -> (f64, bool) {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return (0.0, true);
    }
    (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb), false)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl CosineStats {
    fn of(xs: &[f64]) -> Self {
        Self {
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            mean: xs.iter().sum::<f64>() / xs.len() as f64,
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub checkpoint: String,
    pub frames: usize,
    /// Learned prompt vs. the frame's own stored embedding.
    pub matched: CosineStats,
    /// Learned prompt vs. another frame's embedding.
    pub shuffled: CosineStats,
    /// Pairs involving a zero vector, scored 0.
    pub degenerate: usize,
}

impl AlignmentReport {
    pub fn gap(&self) -> f64 {
        self.matched.mean - self.shuffled.mean
    }
}

/// Per-frame prompts of every clip, in dataset order.
pub fn dataset_prompts(model: &Restorer, ds: &Dataset, jobs: usize) -> Result<Vec<Vec<Array1<f64>>>, EvalError> {
    pool(jobs)?.install(|| {
        ds.clips
            .par_iter()
            .map(|c| Ok(model.restore_clip(&c.load_lq()?)?.1))
            .collect()
    })
}

/// Cosine between each frame's learned prompt and its stored embedding,
/// against a baseline where targets are permuted so no frame keeps its own.
pub fn prompt_alignment(
    model: &Restorer,
    ds: &Dataset,
    store: &EmbeddingStore,
    checkpoint: &str,
    seed: u64,
    jobs: usize,
) -> Result<AlignmentReport, EvalError> {
    use rand::seq::SliceRandom;
    let prompts = dataset_prompts(model, ds, jobs)?;
    let mut pairs = Vec::new();
    for (c, ps) in ds.clips.iter().zip(prompts) {
        for (f, p) in c.frames.iter().zip(ps) {
            let rec = store.get(&c.video_id, f.meta.frame_index)?;
            let target: Vec<f64> = rec.embedding.iter().map(|&x| x as f64).collect();
            pairs.push((p.to_vec(), target));
        }
    }
    let n = pairs.len();
    if n < 2 {
        return Err(EvalError::Config("alignment needs at least two frames".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[0]));
    let mut degenerate = 0;
    let mut matched = Vec::with_capacity(n);
    let mut shuffled = Vec::with_capacity(n);
    for k in 0..n {
        let (i, j) = (order[k], order[(k + 1) % n]);
        let (m, dm) = cosine(&pairs[i].0, &pairs[i].1);
        let (s, ds_) = cosine(&pairs[i].0, &pairs[j].1);
        degenerate += dm as usize + ds_ as usize;
        matched.push(m);
        shuffled.push(s);
    }
    Ok(AlignmentReport {
        checkpoint: checkpoint.to_string(),
        frames: n,
        matched: CosineStats::of(&matched),
        shuffled: CosineStats::of(&shuffled),
        degenerate,
    })
}

/// Label of a frame: its synthesized degradation kinds joined by `+`, or
/// `clean`.
pub fn frame_label(kinds: &[crate::degrade::DegradationKind]) -> String {
    if kinds.is_empty() {
        "clean".into()
    } else {
        kinds.iter().map(|k| k.as_str()).collect::<Vec<_>>().join("+")
    }
}

/// Writes every frame's learned prompt in the embedding-store format, with
/// the frame's degradation label as its description.
pub fn export_prompt_embeddings(
    model: &Restorer,
    ds: &Dataset,
    checkpoint: &str,
    out_dir: &std::path::Path,
    jobs: usize,
) -> Result<EmbeddingStore, EvalError> {
    let prompts = dataset_prompts(model, ds, jobs)?;
    let mut store = EmbeddingStore::new(model.config.d);
    for (c, ps) in ds.clips.iter().zip(prompts) {
        for (i, (f, p)) in c.frames.iter().zip(ps).enumerate() {
            let path = c.lq_path(i);
            store.insert(GroundedFrameRecord {
                frame: FrameRef {
                    video_id: c.video_id.clone(),
                    frame_index: f.meta.frame_index,
                    path: path.clone(),
                },
                description: frame_label(&f.kinds()),
                detected: Vec::new(),
                embedding: p.iter().map(|&x| x as f32).collect(),
                encoder_id: format!("prompt:{checkpoint}"),
                content_hash: sha256_hex(&std::fs::read(&path)?),
            })?;
        }
    }
    store.save(out_dir)?;
    Ok(store)
}

#[cfg(test)]
mod tests;
