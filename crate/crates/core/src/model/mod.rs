//! The streaming restoration network.
//!
//! A U-Net over single frames: encoder stages halve the resolution, the
//! latent map receives cross-attention from the first encoder stage, a small
//! head turns the latent into a per-frame prompt vector, and decoder stages
//! (plus a full-resolution refinement stage) rebuild the frame. Selected
//! decoder stages gate their channels with a sigmoid mask computed from the
//! prompt. Per-stage encoder features of the previous frame are fused back
//! in through a learned gate, so a clip is processed causally, frame by frame.

pub mod checkpoint;
pub mod layers;
pub mod params;

use ndarray::{Array1, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::video::{clamp_unit, ClipRole, Frame, VideoClip};

pub use layers::{cross_mix, gap, generate_prompt, inject_prompt};
pub use params::{ParamSet, ParamVars};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite activations in {0}")]
    NonFinite(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    None,
    GatedPrevFrame,
}

/// Where prompts are injected; rows of the placement ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionPreset {
    First,
    All,
    LastTwo,
    None,
}

impl std::str::FromStr for InjectionPreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "first" => Ok(Self::First),
            "all" => Ok(Self::All),
            "last_two" => Ok(Self::LastTwo),
            "none" => Ok(Self::None),
            other => Err(format!("unknown injection preset {other:?} (first|all|last_two|none)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Encoder widths, one per resolution level.
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Prompt / text-embedding dimension.
    pub d: usize,
    pub history_mode: HistoryMode,
    /// Decoder indices (0 = lowest resolution, last = refinement stage).
    pub injection_sites: Vec<usize>,
    pub cross_attention: bool,
    pub attention_heads: usize,
    /// Side of the pooled key/value grid for cross-attention.
    pub kv_grid: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stage_channels: vec![8, 16, 32],
            blocks_per_stage: 1,
            d: 384,
            history_mode: HistoryMode::GatedPrevFrame,
            injection_sites: vec![1, 2],
            cross_attention: true,
            attention_heads: 1,
            kv_grid: 8,
        }
    }
}

impl ModelConfig {
    pub fn toy(d: usize) -> Self {
        Self {
            d,
            ..Self::default()
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// One decoder per upsampling step plus the full-resolution refinement stage.
    pub fn num_decoders(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn decoder_channels(&self, j: usize) -> usize {
        let s = self.num_stages();
        if j + 1 < s {
            self.stage_channels[s - 2 - j]
        } else {
            self.stage_channels[0]
        }
    }

    pub fn latent_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated non-empty")
    }

    pub fn injection_preset(&self, preset: InjectionPreset) -> Vec<usize> {
        let n = self.num_decoders();
        match preset {
            InjectionPreset::First => vec![0],
            InjectionPreset::All => (0..n).collect(),
            InjectionPreset::LastTwo => (n.saturating_sub(2)..n).collect(),
            InjectionPreset::None => Vec::new(),
        }
    }

    pub fn with_injection(mut self, preset: InjectionPreset) -> Self {
        self.injection_sites = self.injection_preset(preset);
        self
    }

    /// Spatial dims must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.num_stages() - 1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.stage_channels.is_empty() {
            return err("stage_channels is empty".into());
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return err("stage widths must be positive".into());
        }
        if self.stage_channels.windows(2).any(|w| w[0] >= w[1]) {
            return err(format!("stage_channels {:?} not strictly increasing", self.stage_channels));
        }
        if self.in_channels == 0 || self.blocks_per_stage == 0 || self.d == 0 || self.kv_grid == 0 {
            return err("in_channels, blocks_per_stage, d and kv_grid must be positive".into());
        }
        if self.attention_heads == 0 || self.latent_channels() % self.attention_heads != 0 {
            return err(format!(
                "{} attention heads do not divide {} latent channels",
                self.attention_heads,
                self.latent_channels()
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &j in &self.injection_sites {
            if j >= self.num_decoders() || !seen.insert(j) {
                return err(format!(
                    "injection sites {:?} invalid for {} decoders",
                    self.injection_sites,
                    self.num_decoders()
                ));
            }
        }
        Ok(())
    }

    /// Every parameter with its shape and initializer, in forward order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut specs = Vec::new();
        let s = self.num_stages();
        let c = &self.stage_channels;
        let conv = |specs: &mut Vec<_>, name: String, o: usize, i: usize, k: usize, init: Init| {
            specs.push((format!("{name}.w"), vec![o, i, k, k], init));
            specs.push((format!("{name}.b"), vec![o], Init::Zeros));
        };
        conv(&mut specs, "head".into(), c[0], self.in_channels, 3, Init::HeNormal);
        for st in 0..s {
            if st > 0 {
                conv(&mut specs, format!("enc{st}.down"), c[st], 4 * c[st - 1], 1, Init::HeNormal);
            }
            for k in 0..self.blocks_per_stage {
                conv(&mut specs, format!("enc{st}.block{k}.conv1"), c[st], c[st], 3, Init::HeNormal);
                conv(&mut specs, format!("enc{st}.block{k}.conv2"), c[st], c[st], 3, Init::TruncNormal);
            }
            if self.history_mode == HistoryMode::GatedPrevFrame {
                conv(&mut specs, format!("enc{st}.gate"), c[st], 2 * c[st], 1, Init::TruncNormal);
            }
        }
        let cl = self.latent_channels();
        if self.cross_attention {
            for (name, inp, init) in [
                ("q", cl, Init::TruncNormal),
                ("k", c[0], Init::TruncNormal),
                ("v", c[0], Init::TruncNormal),
                ("o", cl, Init::Zeros),
            ] {
                specs.push((format!("xattn.{name}.w"), vec![cl, inp], init));
                specs.push((format!("xattn.{name}.b"), vec![cl], Init::Zeros));
            }
        }
        specs.push(("prompt.fc1.w".into(), vec![self.d, cl], Init::FanInUniform));
        specs.push(("prompt.fc1.b".into(), vec![self.d], Init::Zeros));
        specs.push(("prompt.fc2.w".into(), vec![self.d, self.d], Init::FanInUniform));
        specs.push(("prompt.fc2.b".into(), vec![self.d], Init::Zeros));
        for j in 0..self.num_decoders() {
            let cj = self.decoder_channels(j);
            if j + 1 < s {
                conv(&mut specs, format!("dec{j}.up"), 4 * cj, c[s - 1 - j], 1, Init::HeNormal);
            }
            if self.injection_sites.contains(&j) {
                specs.push((format!("dec{j}.inject.fc.w"), vec![cj, self.d], Init::TruncNormal));
                specs.push((format!("dec{j}.inject.fc.b"), vec![cj], Init::Zeros));
                conv(&mut specs, format!("dec{j}.inject.mlp1"), cj, cj, 1, Init::TruncNormal);
                conv(&mut specs, format!("dec{j}.inject.mlp2"), cj, cj, 1, Init::TruncNormal);
            }
            for k in 0..self.blocks_per_stage {
                conv(&mut specs, format!("dec{j}.block{k}.conv1"), cj, cj, 3, Init::HeNormal);
                conv(&mut specs, format!("dec{j}.block{k}.conv2"), cj, cj, 3, Init::TruncNormal);
            }
        }
        conv(&mut specs, "tail".into(), self.in_channels, c[0], 3, Init::TruncNormal);
        specs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Zeros,
    /// Truncated normal, std 0.02.
    TruncNormal,
    /// Truncated normal, std sqrt(2 / fan_in).
    HeNormal,
    /// Uniform in ±1/sqrt(fan_in).
    FanInUniform,
}

fn fan_in(shape: &[usize]) -> usize {
    shape[1..].iter().product::<usize>().max(1)
}

pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamSet, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, shape, init) in config.param_specs() {
        let t = match init {
            Init::Zeros => Tensor::zeros(IxDyn(&shape)),
            Init::TruncNormal => params::truncated_normal(&mut rng, &shape, 0.02),
            Init::HeNormal => {
                params::truncated_normal(&mut rng, &shape, (2.0 / fan_in(&shape) as f64).sqrt())
            }
            Init::FanInUniform => params::uniform(&mut rng, &shape, 1.0 / (fan_in(&shape) as f64).sqrt()),
        };
        params.insert(name, t);
    }
    Ok(params)
}

pub fn zero_params(config: &ModelConfig) -> Result<ParamSet, ModelError> {
    config.validate()?;
    let mut params = ParamSet::new();
    for (name, shape, _) in config.param_specs() {
        params.insert(name, Tensor::zeros(IxDyn(&shape)));
    }
    Ok(params)
}

/// Checks that `params` holds exactly the arrays `config` requires.
pub fn check_params(config: &ModelConfig, params: &ParamSet) -> Result<(), ModelError> {
    let specs = config.param_specs();
    if specs.len() != params.len() {
        return Err(ModelError::Config(format!(
            "expected {} parameter arrays, found {}",
            specs.len(),
            params.len()
        )));
    }
    for (name, shape, _) in specs {
        match params.get(&name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            Some(t) => {
                return Err(ModelError::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
            None => return Err(ModelError::Config(format!("parameter {name} missing"))),
        }
    }
    Ok(())
}

/// Graph nodes produced for one frame.
pub struct FrameOutput {
    pub restored: Var,
    /// The prompt as generated, before any injected perturbation.
    pub prompt: Var,
    /// Fused per-stage encoder features; the next frame's history.
    pub history: Vec<Var>,
    pub masks: Vec<Var>,
}

fn conv(g: &mut Graph, pv: &ParamVars, name: &str, x: Var) -> Var {
    g.conv2d(x, pv.get(&format!("{name}.w")), pv.get(&format!("{name}.b")))
}

fn res_block(g: &mut Graph, pv: &ParamVars, name: &str, x: Var) -> Var {
    let h = conv(g, pv, &format!("{name}.conv1"), x);
    let h = g.gelu(h);
    let h = conv(g, pv, &format!("{name}.conv2"), h);
    g.add(x, h)
}

fn ensure_finite(g: &Graph, v: Var, what: &str) -> Result<(), ModelError> {
    if g.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite(what.to_string()))
    }
}

/// One frame through the network on an existing graph.
///
/// `frame` is `[b, c, h, w]`; `history` is empty at the start of a clip.
/// `prompt_noise`, when given, is added to the prompt before injection.
pub fn forward_frame_graph(
    g: &mut Graph,
    config: &ModelConfig,
    pv: &ParamVars,
    frame: Var,
    history: &[Var],
    prompt_noise: Option<Var>,
) -> Result<FrameOutput, ModelError> {
    let shape = g.value(frame).shape().to_vec();
    let m = config.size_multiple();
    if shape.len() != 4 || shape[1] != config.in_channels || shape[2] % m != 0 || shape[3] % m != 0 {
        return Err(ModelError::Shape(format!(
            "frame batch {shape:?}: need [b, {}, h, w] with h, w divisible by {m}",
            config.in_channels
        )));
    }
    let s = config.num_stages();
    let gated = config.history_mode == HistoryMode::GatedPrevFrame && !history.is_empty();
    if gated && history.len() != s {
        return Err(ModelError::Shape(format!("history has {} stages, expected {s}", history.len())));
    }

    let mut f = conv(g, pv, "head", frame);
    let mut skips = Vec::with_capacity(s);
    for st in 0..s {
        if st > 0 {
            let down = g.pixel_unshuffle(f, 2);
            f = conv(g, pv, &format!("enc{st}.down"), down);
        }
        for k in 0..config.blocks_per_stage {
            f = res_block(g, pv, &format!("enc{st}.block{k}"), f);
        }
        if gated {
            let h = history[st];
            if g.value(h).shape() != g.value(f).shape() {
                return Err(ModelError::Shape(format!(
                    "history stage {st} has shape {:?}, features {:?}",
                    g.value(h).shape(),
                    g.value(f).shape()
                )));
            }
            let cat = g.concat_channels(f, h);
            let logits = conv(g, pv, &format!("enc{st}.gate"), cat);
            let gate = g.sigmoid(logits);
            let carried = g.mul(gate, h);
            f = g.add(f, carried);
        }
        skips.push(f);
    }

    let mut latent = skips[s - 1];
    if config.cross_attention {
        latent = cross_mix(g, pv, "xattn", latent, skips[0], config.kv_grid, config.attention_heads)?;
    }
    let prompt = generate_prompt(g, pv, "prompt", latent)?;
    ensure_finite(g, prompt, "prompt")?;
    let injected = match prompt_noise {
        Some(n) => g.add(prompt, n),
        None => prompt,
    };

    let mut f = latent;
    let mut masks = Vec::new();
    for j in 0..config.num_decoders() {
        if j + 1 < s {
            let up = conv(g, pv, &format!("dec{j}.up"), f);
            let up = g.pixel_shuffle(up, 2);
            f = g.add(up, skips[s - 2 - j]);
        }
        if config.injection_sites.contains(&j) {
            let (out, mask) = inject_prompt(g, pv, &format!("dec{j}.inject"), f, injected)?;
            f = out;
            masks.push(mask);
        }
        for k in 0..config.blocks_per_stage {
            f = res_block(g, pv, &format!("dec{j}.block{k}"), f);
        }
    }
    let residual = conv(g, pv, "tail", f);
    let restored = g.add(frame, residual);
    ensure_finite(g, restored, "restored frame")?;
    Ok(FrameOutput {
        restored,
        prompt,
        history: skips,
        masks,
    })
}

/// Previous-frame encoder features; empty at the start of a clip.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HistoryState {
    pub stages: Vec<Tensor>,
}

impl HistoryState {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }
}

pub struct StepOutput {
    /// `[b, c, h, w]`, unclamped.
    pub restored: Tensor,
    pub history: HistoryState,
    /// `[b, d]`.
    pub prompt: Tensor,
    pub masks: Vec<Tensor>,
}

/// A configured network with concrete parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Restorer {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Restorer {
    pub fn new(config: ModelConfig, params: ParamSet) -> Result<Self, ModelError> {
        config.validate()?;
        check_params(&config, &params)?;
        Ok(Self { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        let params = zero_params(&config)?;
        Ok(Self { config, params })
    }

    pub fn forward_frame(
        &self,
        frame: &Tensor,
        history: &HistoryState,
        prompt_noise: Option<&Tensor>,
    ) -> Result<StepOutput, ModelError> {
        let mut g = Graph::inference();
        let pv = ParamVars::attach(&mut g, &self.params);
        let x = g.constant(frame.clone());
        let hist: Vec<Var> = history.stages.iter().map(|t| g.constant(t.clone())).collect();
        let noise = prompt_noise.map(|n| g.constant(n.clone()));
        let out = forward_frame_graph(&mut g, &self.config, &pv, x, &hist, noise)?;
        Ok(StepOutput {
            restored: g.value(out.restored).clone(),
            history: HistoryState {
                stages: out.history.iter().map(|&v| g.value(v).clone()).collect(),
            },
            prompt: g.value(out.prompt).clone(),
            masks: out.masks.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }

    /// Restores a clip strictly in temporal order.
    pub fn restore_clip(&self, clip: &VideoClip) -> Result<(VideoClip, Vec<Array1<f64>>), ModelError> {
        self.restore_clip_with(clip, |_| None)
    }

    /// Like [`Restorer::restore_clip`], with an optional `[d]` perturbation
    /// added to frame `t`'s prompt before injection.
    pub fn restore_clip_with<F>(
        &self,
        clip: &VideoClip,
        mut perturb: F,
    ) -> Result<(VideoClip, Vec<Array1<f64>>), ModelError>
    where
        F: FnMut(usize) -> Option<Array1<f64>>,
    {
        let mut history = HistoryState::empty();
        let mut frames = Vec::with_capacity(clip.len());
        let mut prompts = Vec::with_capacity(clip.len());
        for (t, frame) in clip.frames.iter().enumerate() {
            let batch = frame.clone().insert_axis(Axis(0)).into_dyn();
            let noise = perturb(t).map(|n| n.insert_axis(Axis(0)).into_dyn());
            let step = self.forward_frame(&batch, &history, noise.as_ref())?;
            history = step.history;
            let mut out: Frame = step
                .restored
                .index_axis_move(Axis(0), 0)
                .into_dimensionality()
                .map_err(|e| ModelError::Shape(e.to_string()))?;
            clamp_unit(&mut out);
            frames.push(out);
            prompts.push(
                step.prompt
                    .index_axis_move(Axis(0), 0)
                    .into_dimensionality()
                    .map_err(|e| ModelError::Shape(e.to_string()))?,
            );
        }
        let mut restored = VideoClip::new(frames, ClipRole::Restored).map_err(|e| ModelError::Shape(e.to_string()))?;
        restored.fps = clip.fps;
        Ok((restored, prompts))
    }
}
