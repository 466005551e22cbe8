//! Training: L1 restoration loss plus an L1 pull of the generated prompt
//! toward the frame's stored text embedding, Adam, cosine-annealed LR.

mod adam;
mod augment;

use std::path::{Path, PathBuf};

use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::degrade::{Dataset, DegradeError};
use crate::fsutil::write_atomic;
use crate::grounding::{EmbeddingStore, GroundingError};
use crate::model::checkpoint::{Checkpoint, CheckpointError, CheckpointMeta};
use crate::model::{forward_frame_graph, ModelConfig, ModelError, ParamSet, ParamVars, Restorer};
use crate::rng::{derive_seed, stream};
use crate::video::{Frame, VideoClip};

pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use augment::{augment, Dihedral};

pub const LOSS_CSV: &str = "loss.csv";
pub const CONFIG_SNAPSHOT: &str = "train_config.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// RNG stream of the initial weights: `derive_seed(seed, &[STREAM_INIT])`.
pub const STREAM_INIT: u64 = 0;
const STREAM_SAMPLE: u64 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Store(#[from] GroundingError),
    #[error("step {step}: non-finite {what}")]
    NonFinite { step: u64, what: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DegradeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.01,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(TrainError::Config(format!(
                "loss weights must be non-negative (lambda1 {}, lambda2 {})",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_iters: u64,
    pub batch_size: usize,
    /// Square crop side; clamped to the frames and rounded down to the model's size multiple.
    pub crop_size: usize,
    /// Frames per training window; history is carried within the window only.
    pub window: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub augment: bool,
    pub loss: LossConfig,
    /// Checkpoint cadence in steps (0 = final checkpoint only).
    pub checkpoint_every: u64,
    /// Global gradient-norm clip; off by default.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 1000,
            batch_size: 2,
            crop_size: 64,
            window: 4,
            lr0: 4e-4,
            lr_min: 1e-7,
            adam: AdamConfig::default(),
            seed: 0,
            augment: true,
            loss: LossConfig::default(),
            checkpoint_every: 100,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.loss.validate()?;
        if !(self.lr0 > self.lr_min && self.lr_min > 0.0) {
            return Err(TrainError::Config(format!(
                "need lr0 > lr_min > 0 (lr0 {}, lr_min {})",
                self.lr0, self.lr_min
            )));
        }
        if self.batch_size == 0 || self.window == 0 || self.crop_size == 0 {
            return Err(TrainError::Config("batch_size, window and crop_size must be positive".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(TrainError::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

fn check_same_shape(a: &[usize], b: &[usize], what: &str) -> Result<(), TrainError> {
    if a != b {
        return Err(TrainError::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Mean absolute error over every pixel of every frame.
pub fn restoration_loss(pred: &VideoClip, gt: &VideoClip) -> Result<f64, TrainError> {
    check_same_shape(&[pred.len()], &[gt.len()], "clip lengths")?;
    let mut total = 0.0;
    let mut n = 0usize;
    for (p, g) in pred.frames.iter().zip(&gt.frames) {
        check_same_shape(p.shape(), g.shape(), "frame shapes")?;
        total += p.iter().zip(g.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>();
        n += p.len();
    }
    Ok(total / n as f64)
}

/// Mean absolute error over the embedding dimension.
pub fn prompt_loss(p: &[f64], target: &[f64]) -> Result<f64, TrainError> {
    check_same_shape(&[p.len()], &[target.len()], "prompt / target dimension")?;
    if p.is_empty() {
        return Err(TrainError::Shape("empty prompt".into()));
    }
    Ok(p.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64)
}

pub fn total_loss(
    pred: &VideoClip,
    gt: &VideoClip,
    p: &[f64],
    target: &[f64],
    cfg: &LossConfig,
) -> Result<f64, TrainError> {
    Ok(cfg.lambda1 * restoration_loss(pred, gt)? + cfg.lambda2 * prompt_loss(p, target)?)
}

pub fn cosine_lr(step: u64, total: u64, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = step.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Trailing mean over `window` entries (shorter at the start).
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for i in 0..xs.len() {
        acc += xs[i];
        if i >= w {
            acc -= xs[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

/// One clip held in memory with the text embedding of each frame.
#[derive(Clone, Debug)]
pub struct TrainClip {
    pub video_id: String,
    pub lq: Vec<Frame>,
    pub gt: Vec<Frame>,
    pub targets: Vec<Array1<f64>>,
}

#[derive(Clone, Debug)]
pub struct TrainData {
    pub clips: Vec<TrainClip>,
}

impl TrainData {
    /// Loads every clip and looks up every frame in the store. A frame
    /// without a record aborts the load.
    pub fn load(ds: &Dataset, store: &EmbeddingStore) -> Result<Self, TrainError> {
        let mut clips = Vec::with_capacity(ds.clips.len());
        for c in &ds.clips {
            let targets = c
                .frames
                .iter()
                .map(|f| {
                    store
                        .get(&c.video_id, f.meta.frame_index)
                        .map(|r| r.embedding.iter().map(|&x| x as f64).collect())
                })
                .collect::<Result<Vec<Array1<f64>>, _>>()?;
            clips.push(TrainClip {
                video_id: c.video_id.clone(),
                lq: c.load_lq()?.frames,
                gt: c.load_gt()?.frames,
                targets,
            });
        }
        let data = Self { clips };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let first = self
            .clips
            .first()
            .ok_or_else(|| TrainError::Config("no training clips".into()))?;
        let shape = first.lq.first().ok_or_else(|| TrainError::Config("empty clip".into()))?.shape().to_vec();
        let d = first.targets[0].len();
        for c in &self.clips {
            if c.lq.is_empty() || c.lq.len() != c.gt.len() || c.lq.len() != c.targets.len() {
                return Err(TrainError::Shape(format!("{}: LQ, GT and targets differ in length", c.video_id)));
            }
            for f in c.lq.iter().chain(&c.gt) {
                check_same_shape(f.shape(), &shape, &c.video_id)?;
            }
            if c.targets.iter().any(|t| t.len() != d) {
                return Err(TrainError::Shape(format!("{}: target dimensions differ", c.video_id)));
            }
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.clips[0].targets[0].len()
    }

    pub fn frame_shape(&self) -> (usize, usize, usize) {
        self.clips[0].lq[0].dim()
    }

    pub fn min_clip_len(&self) -> usize {
        self.clips.iter().map(|c| c.lq.len()).min().unwrap_or(0)
    }
}

/// Where one batch element comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSample {
    pub clip: usize,
    pub start: usize,
    pub y0: usize,
    pub x0: usize,
    pub transform: Dihedral,
}

/// Per-frame stacked tensors of one training window.
pub struct Batch {
    pub samples: Vec<WindowSample>,
    /// `[b, c, crop, crop]` per time step.
    pub lq: Vec<Tensor>,
    pub gt: Vec<Tensor>,
    /// `[b, d]` per time step.
    pub targets: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub restoration_loss: f64,
    pub prompt_loss: f64,
    pub total: f64,
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("step,lr,restoration_loss,prompt_loss,total\n");
    for r in records {
        s.push_str(&format!(
            "{},{:e},{:.9e},{:.9e},{:.9e}\n",
            r.step, r.lr, r.restoration_loss, r.prompt_loss, r.total
        ));
    }
    s
}

/// Training state over in-memory data.
pub struct Trainer {
    pub model: Restorer,
    pub cfg: TrainConfig,
    pub data: TrainData,
    pub opt: Adam,
    pub step: u64,
    pub history: Vec<LossRecord>,
    crop: usize,
    window: usize,
}

impl Trainer {
    /// Initializes the model from the training seed.
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, data: TrainData) -> Result<Self, TrainError> {
        let model = Restorer::init(model_cfg, derive_seed(cfg.seed, &[STREAM_INIT]))?;
        Self::with_model(model, cfg, data)
    }

    pub fn with_model(model: Restorer, cfg: TrainConfig, data: TrainData) -> Result<Self, TrainError> {
        cfg.validate()?;
        model.config.validate()?;
        data.validate()?;
        if data.d() != model.config.d {
            return Err(TrainError::Shape(format!(
                "store embeddings have d = {}, model prompts d = {}",
                data.d(),
                model.config.d
            )));
        }
        let (c, h, w) = data.frame_shape();
        if c != model.config.in_channels {
            return Err(TrainError::Shape(format!("frames have {c} channels, model expects {}", model.config.in_channels)));
        }
        let m = model.config.size_multiple();
        let crop = cfg.crop_size.min(h).min(w) / m * m;
        if crop == 0 {
            return Err(TrainError::Shape(format!("frames {h}x{w} are smaller than the size multiple {m}")));
        }
        if crop != cfg.crop_size {
            log::info!("crop size {} adjusted to {crop} for {h}x{w} frames", cfg.crop_size);
        }
        let window = cfg.window.min(data.min_clip_len());
        let opt = Adam::new(cfg.adam, &model.params);
        Ok(Self {
            model,
            cfg,
            data,
            opt,
            step: 0,
            history: Vec::new(),
            crop,
            window,
        })
    }

    pub fn crop(&self) -> usize {
        self.crop
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// The batch drawn at `step`; a pure function of the seed and step.
    pub fn sample(&self, step: u64) -> Batch {
        use rand::Rng;
        let mut rng = stream(self.cfg.seed, &[STREAM_SAMPLE, step]);
        let (c, h, w) = self.data.frame_shape();
        let (crop, win, d) = (self.crop, self.window, self.data.d());
        let b = self.cfg.batch_size;
        let mut samples = Vec::with_capacity(b);
        let mut lq = vec![Tensor::zeros(ndarray::IxDyn(&[b, c, crop, crop])); win];
        let mut gt = lq.clone();
        let mut targets = vec![Tensor::zeros(ndarray::IxDyn(&[b, d])); win];
        for bi in 0..b {
            let clip = rng.random_range(0..self.data.clips.len());
            let tc = &self.data.clips[clip];
            let s = WindowSample {
                clip,
                start: rng.random_range(0..=tc.lq.len() - win),
                y0: rng.random_range(0..=h - crop),
                x0: rng.random_range(0..=w - crop),
                transform: if self.cfg.augment {
                    Dihedral::random(&mut rng)
                } else {
                    Dihedral::IDENTITY
                },
            };
            for t in 0..win {
                let fi = s.start + t;
                let cut = |f: &Frame| {
                    s.transform
                        .apply(&f.slice(ndarray::s![.., s.y0..s.y0 + crop, s.x0..s.x0 + crop]).to_owned())
                };
                lq[t].index_axis_mut(Axis(0), bi).assign(&cut(&tc.lq[fi]).into_dyn());
                gt[t].index_axis_mut(Axis(0), bi).assign(&cut(&tc.gt[fi]).into_dyn());
                targets[t].index_axis_mut(Axis(0), bi).assign(&tc.targets[fi].view().into_dyn());
            }
            samples.push(s);
        }
        Batch {
            samples,
            lq,
            gt,
            targets,
        }
    }

    /// Loss of `params` on `batch`, with gradients when `track` is set.
    /// Returns `(total, restoration, prompt)`.
    pub fn batch_loss(
        &self,
        params: &ParamSet,
        batch: &Batch,
        track: bool,
    ) -> Result<((f64, f64, f64), Option<ParamSet>), TrainError> {
        window_loss(&self.model.config, &self.cfg.loss, params, batch, track)
    }

    /// Samples a batch, takes one optimizer step and records its losses.
    pub fn train_step(&mut self) -> Result<LossRecord, TrainError> {
        let step = self.step;
        let lr = cosine_lr(step, self.cfg.total_iters, self.cfg.lr0, self.cfg.lr_min);
        let batch = self.sample(step);
        let ((total, rest, prompt), grads) = self
            .batch_loss(&self.model.params, &batch, true)
            .map_err(|e| match e {
                TrainError::Model(ModelError::NonFinite(what)) => TrainError::NonFinite { step, what },
                other => other,
            })?;
        for (what, v) in [("total loss", total), ("restoration loss", rest), ("prompt loss", prompt)] {
            if !v.is_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    what: format!("{what} ({v})"),
                });
            }
        }
        let mut grads = grads.expect("tracked");
        if let Some(max) = self.cfg.grad_clip {
            clip_grad_norm(&mut grads, max);
        }
        if !grads.all_finite() {
            return Err(TrainError::NonFinite {
                step,
                what: "gradients".into(),
            });
        }
        self.opt.step(&mut self.model.params, &grads, lr);
        self.step += 1;
        let rec = LossRecord {
            step,
            lr,
            restoration_loss: rest,
            prompt_loss: prompt,
            total,
        };
        self.history.push(rec);
        Ok(rec)
    }

    pub fn checkpoint(&self, label: &str) -> Checkpoint {
        Checkpoint::from_restorer(
            &self.model,
            CheckpointMeta {
                step: self.step,
                seed: self.cfg.seed,
                label: label.to_string(),
            },
        )
    }
}

pub(crate) fn window_loss(
    config: &ModelConfig,
    loss: &LossConfig,
    params: &ParamSet,
    batch: &Batch,
    track: bool,
) -> Result<((f64, f64, f64), Option<ParamSet>), TrainError> {
    let mut g = if track { Graph::new() } else { Graph::inference() };
    let pv = ParamVars::attach(&mut g, params);
    let mut hist: Vec<Var> = Vec::new();
    let mut rest_terms = Vec::new();
    let mut prompt_terms = Vec::new();
    for t in 0..batch.lq.len() {
        let x = g.constant(batch.lq[t].clone());
        let out = forward_frame_graph(&mut g, config, &pv, x, &hist, None)?;
        hist = out.history;
        let y = g.constant(batch.gt[t].clone());
        rest_terms.push(g.l1_loss(out.restored, y));
        let e = g.constant(batch.targets[t].clone());
        prompt_terms.push(g.l1_loss(out.prompt, e));
    }
    let inv_t = 1.0 / batch.lq.len() as f64;
    let mean = |g: &mut Graph, terms: &[Var]| {
        let s = terms[1..].iter().fold(terms[0], |acc, &v| g.add(acc, v));
        g.scale(s, inv_t)
    };
    let rest = mean(&mut g, &rest_terms);
    let prompt = mean(&mut g, &prompt_terms);
    let weighted_rest = g.scale(rest, loss.lambda1);
    // a zero weight keeps the targets off the tape entirely
    let total = if loss.lambda2 == 0.0 {
        weighted_rest
    } else {
        let wp = g.scale(prompt, loss.lambda2);
        g.add(weighted_rest, wp)
    };
    let values = (g.scalar(total), g.scalar(rest), g.scalar(prompt));
    let grads = track.then(|| {
        let mut grads = g.backward(total);
        pv.gradients(params, &mut grads)
    });
    Ok((values, grads))
}

/// Outputs of a finished run.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<LossRecord>,
    pub checkpoint_paths: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Snapshot<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    train_clips: Vec<&'a str>,
    crop: usize,
    window: usize,
}

fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.ckpt")
}

/// Runs `cfg.total_iters` steps. With `out_dir`, writes the config
/// snapshot, `loss.csv`, periodic checkpoints and the final checkpoint.
pub fn run(trainer: &mut Trainer, out_dir: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    let mut paths = Vec::new();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let snap = Snapshot {
            model: &trainer.model.config,
            train: &trainer.cfg,
            train_clips: trainer.data.clips.iter().map(|c| c.video_id.as_str()).collect(),
            crop: trainer.crop,
            window: trainer.window,
        };
        write_atomic(&dir.join(CONFIG_SNAPSHOT), serde_json::to_string_pretty(&snap)?.as_bytes())?;
    }
    let every = trainer.cfg.checkpoint_every;
    while trainer.step < trainer.cfg.total_iters {
        let rec = match trainer.train_step() {
            Ok(r) => r,
            Err(e) => {
                if let Some(dir) = out_dir {
                    write_atomic(&dir.join(LOSS_CSV), loss_csv(&trainer.history).as_bytes())?;
                }
                return Err(e);
            }
        };
        if rec.step % 50 == 0 {
            log::info!(
                "step {} lr {:.3e} restoration {:.5} prompt {:.5}",
                rec.step,
                rec.lr,
                rec.restoration_loss,
                rec.prompt_loss
            );
        }
        if let Some(dir) = out_dir {
            if every > 0 && trainer.step % every == 0 && trainer.step < trainer.cfg.total_iters {
                let p = dir.join(checkpoint_name(trainer.step));
                trainer.checkpoint("periodic").save(&p)?;
                write_atomic(&dir.join(LOSS_CSV), loss_csv(&trainer.history).as_bytes())?;
                paths.push(p);
            }
        }
    }
    let checkpoint = trainer.checkpoint("final");
    if let Some(dir) = out_dir {
        write_atomic(&dir.join(LOSS_CSV), loss_csv(&trainer.history).as_bytes())?;
        let p = dir.join(FINAL_CHECKPOINT);
        checkpoint.save(&p)?;
        paths.push(p);
    }
    Ok(TrainOutcome {
        checkpoint,
        curve: trainer.history.clone(),
        checkpoint_paths: paths,
    })
}

/// Loads the dataset and store, trains from scratch and writes outputs.
pub fn train(
    dataset: &Dataset,
    store: &EmbeddingStore,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    let data = TrainData::load(dataset, store)?;
    let mut trainer = Trainer::new(model_cfg, cfg, data)?;
    run(&mut trainer, out_dir)
}

#[cfg(test)]
mod tests;
