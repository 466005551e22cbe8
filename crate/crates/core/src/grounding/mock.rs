//! Offline stand-ins for the MLLM and the text encoder.
//!
//! The mock MLLM answers from the synthesis metadata of the frame it is asked
//! about, and describes image content from global colour statistics (which
//! are unchanged by flips and rotations). The mock encoder is a hashed bag of
//! words.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{intensity_prompt, presence_prompt, words, GroundingError, MllmClient, TextEncoder, QUALITY_PROMPT};
use crate::degrade::{Dataset, DegradationKind, DegradationSpec, Intensity};
use crate::rng::{fnv1a, stream};
use crate::video::{load_frame, luma, Frame};

/// Parameter magnitudes at which a synthesized degradation counts as severe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockThresholds {
    /// Gaussian / speckle sigma (0–255 scale) at or above which noise is severe.
    pub noise_sigma: f64,
    /// Poisson alpha at or below which noise is severe.
    pub poisson_alpha: f64,
    pub blur_sigma: f64,
    pub resize_factor: f64,
    /// JPEG quality at or below which compression is severe.
    pub jpeg_quality: u8,
}

impl Default for MockThresholds {
    fn default() -> Self {
        Self {
            noise_sigma: 30.0,
            poisson_alpha: 2.5,
            blur_sigma: 1.5,
            resize_factor: 3.0,
            jpeg_quality: 10,
        }
    }
}

impl MockThresholds {
    pub fn intensity(&self, spec: &DegradationSpec) -> Intensity {
        let severe = match *spec {
            DegradationSpec::GaussianNoise { sigma } | DegradationSpec::SpeckleNoise { sigma } => sigma >= self.noise_sigma,
            DegradationSpec::PoissonNoise { alpha } => alpha <= self.poisson_alpha,
            DegradationSpec::GaussianBlur { sigma } => sigma >= self.blur_sigma,
            DegradationSpec::ResizeBlur { factor } => factor >= self.resize_factor,
            DegradationSpec::JpegCompression { quality } => quality <= self.jpeg_quality,
            DegradationSpec::VideoCompression { .. } => false,
            DegradationSpec::Snow { intensity } => intensity == Intensity::Severe,
        };
        if severe {
            Intensity::Severe
        } else {
            Intensity::Moderate
        }
    }
}

fn key(path: &Path) -> PathBuf {
    path.canonicalize().unwrap_or_else(|_| path.to_path_buf())
}

fn matches(kind: DegradationKind, name: &str) -> bool {
    kind.family() == name || kind.as_str() == name
}

/// Answers grounding prompts from known synthesis metadata. Frames it has no
/// metadata for are treated as clean.
#[derive(Clone, Debug, Default)]
pub struct MockMllm {
    meta: HashMap<PathBuf, Vec<DegradationSpec>>,
    pub thresholds: MockThresholds,
}

impl MockMllm {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers every LQ frame with its applied specs and every GT frame as clean.
    pub fn from_dataset(ds: &Dataset) -> Self {
        let mut m = Self::new();
        for clip in &ds.clips {
            for (i, f) in clip.frames.iter().enumerate() {
                m.insert(&clip.lq_path(i), f.meta.specs.clone());
                m.insert(&clip.gt_path(i), Vec::new());
            }
        }
        m
    }

    pub fn insert(&mut self, path: &Path, specs: Vec<DegradationSpec>) {
        self.meta.insert(key(path), specs);
    }

    fn specs(&self, path: &Path) -> &[DegradationSpec] {
        self.meta.get(&key(path)).map(Vec::as_slice).unwrap_or(&[])
    }

    fn intensity_of(&self, specs: &[DegradationSpec], name: &str) -> Option<Intensity> {
        specs
            .iter()
            .filter(|s| matches(s.kind(), name))
            .map(|s| self.thresholds.intensity(s))
            .max()
    }

    fn quality_clause(&self, specs: &[DegradationSpec]) -> String {
        if specs.is_empty() {
            return "The image looks clean and sharp, and the overall quality is good.".into();
        }
        let mut severe: Vec<&str> = Vec::new();
        for s in specs {
            let fam = s.kind().family();
            if self.thresholds.intensity(s) == Intensity::Severe && !severe.contains(&fam) {
                severe.push(fam);
            }
        }
        if severe.is_empty() {
            return "The overall quality is fair.".into();
        }
        let list: Vec<String> = severe.iter().map(|f| format!("severe {f}")).collect();
        format!("The overall quality is poor, with {}.", list.join(" and "))
    }

    fn describe(&self, image: &Path) -> Result<String, GroundingError> {
        let frame = load_frame(image).map_err(|e| GroundingError::Grounding(format!("cannot decode frame: {e}")))?;
        Ok(format!("{} {}", self.quality_clause(self.specs(image)), describe_content(&frame)))
    }
}

impl MllmClient for MockMllm {
    fn ask(&self, image: &Path, prompt: &str) -> Result<String, GroundingError> {
        if prompt == QUALITY_PROMPT {
            return self.describe(image);
        }
        let specs = self.specs(image);
        if let Some(d) = prompt
            .strip_prefix("Is there ")
            .and_then(|r| r.strip_suffix(" degradation present in the image? Answer Yes or No."))
        {
            debug_assert_eq!(presence_prompt(d), prompt);
            let yes = specs.iter().any(|s| matches(s.kind(), d));
            return Ok(if yes { "Yes" } else { "No" }.into());
        }
        if let Some(d) = prompt
            .strip_prefix("Rate the intensity of degradation ")
            .and_then(|r| r.strip_suffix("? Choose either severe or moderate."))
        {
            debug_assert_eq!(intensity_prompt(d), prompt);
            // asked about something absent: the weaker answer
            return Ok(self.intensity_of(specs, d).unwrap_or(Intensity::Moderate).as_str().into());
        }
        Err(GroundingError::Grounding(format!("mock cannot answer prompt {prompt:?}")))
    }
}

const HUES: [&str; 12] = [
    "red", "orange", "yellow", "lime", "green", "teal", "cyan", "azure", "blue", "indigo", "purple", "magenta",
];

fn hue_name([r, g, b]: [f64; 3]) -> &'static str {
    let mx = r.max(g).max(b);
    let mn = r.min(g).min(b);
    let chroma = mx - mn;
    if chroma < 0.03 {
        return if mx < 0.2 {
            "black"
        } else if mx > 0.85 {
            "white"
        } else {
            "gray"
        };
    }
    let h = if mx == r {
        ((g - b) / chroma).rem_euclid(6.0)
    } else if mx == g {
        (b - r) / chroma + 2.0
    } else {
        (r - g) / chroma + 4.0
    };
    // 12 sectors of 30 degrees, centred on the names
    HUES[((h * 2.0 + 0.5).floor() as usize) % 12]
}

fn bin<'a>(v: f64, edges: &[f64], names: &[&'a str]) -> &'a str {
    names[edges.iter().take_while(|&&e| v >= e).count()]
}

fn mean_color(frame: &Frame, mask: impl Fn(usize, usize) -> bool) -> [f64; 3] {
    let (c, h, w) = frame.dim();
    let mut acc = [0.0; 3];
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if mask(y, x) {
                for (ci, a) in acc.iter_mut().enumerate() {
                    *a += frame[[ci.min(c - 1), y, x]];
                }
                n += 1;
            }
        }
    }
    acc.map(|a| a / n.max(1) as f64)
}

/// One sentence about global brightness, colour, saturation and contrast.
pub fn describe_content(frame: &Frame) -> String {
    let (c, h, w) = frame.dim();
    let y = luma(frame);
    let n = (h * w) as f64;
    let mean_l = y.sum() / n;
    let std_l = (y.mapv(|v| (v - mean_l).powi(2)).sum() / n).sqrt();
    let mut sorted: Vec<f64> = y.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let lo = sorted[(sorted.len() - 1) / 4];
    let hi = sorted[(sorted.len() - 1) * 3 / 4];
    let avg = mean_color(frame, |_, _| true);
    let highlights = mean_color(frame, |yy, xx| y[[yy, xx]] >= hi);
    let shadows = mean_color(frame, |yy, xx| y[[yy, xx]] <= lo);
    let mut sat = 0.0;
    for yy in 0..h {
        for xx in 0..w {
            let px: Vec<f64> = (0..c).map(|ci| frame[[ci, yy, xx]]).collect();
            let mx = px.iter().copied().fold(0.0, f64::max);
            let mn = px.iter().copied().fold(1.0, f64::min);
            if mx > 0.0 {
                sat += (mx - mn) / mx;
            }
        }
    }
    sat /= n;

    let bright = bin(
        mean_l,
        &[0.15, 0.3, 0.45, 0.6, 0.75],
        &["shadowy", "dark", "dusky", "lit", "bright", "luminous"],
    );
    let satw = bin(sat, &[0.1, 0.25, 0.45, 0.65], &["grayish", "muted", "soft", "rich", "vivid"]);
    let contrast = bin(std_l, &[0.05, 0.1, 0.18], &["flat", "gentle", "strong", "harsh"]);
    let warmth = bin(avg[0] - avg[2], &[-0.05, 0.05], &["cool", "neutral", "warm"]);
    let hue = hue_name(avg);
    format!(
        "A {bright} {hue} scene, {satw} and {contrast}, with {} highlights and {} shadows; \
         the {warmth} {hue} palette keeps it {bright}, mostly {hue}.",
        hue_name(highlights),
        hue_name(shadows)
    )
}

/// Function words plus the scaffolding vocabulary of the grounding prompts,
/// which every description shares and which therefore carries no signal.
const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "has", "in", "is", "it", "its", "of", "on", "or",
    "that", "the", "there", "this", "to", "was", "with", "image", "intensity", "degradation", "present", "rate",
    "think", "step", "answer", "choose", "either",
];

/// Hashed bag-of-words embedding: each surviving token maps to a seeded
/// Gaussian vector, weighted by its count; the sum is normalized.
#[derive(Clone, Debug)]
pub struct MockEncoder {
    pub d: usize,
    pub seed: u64,
}

impl MockEncoder {
    pub fn new(d: usize, seed: u64) -> Self {
        assert!(d > 0, "embedding dimension must be positive");
        Self { d, seed }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = stream(self.seed, &[fnv1a(token.as_bytes())]);
        (0..self.d).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

impl TextEncoder for MockEncoder {
    fn id(&self) -> String {
        format!("mock-bow-{}-{}", self.d, self.seed)
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, GroundingError> {
        let all = words(text);
        let kept: Vec<&String> = all.iter().filter(|w| !STOPWORDS.contains(&w.as_str())).collect();
        let tokens: Vec<&String> = if kept.is_empty() { all.iter().collect() } else { kept };
        if tokens.is_empty() {
            return Err(GroundingError::Grounding("no tokens to embed".into()));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
        let mut v = vec![0.0f64; self.d];
        for (t, n) in counts {
            for (a, b) in v.iter_mut().zip(self.token_vector(t)) {
                *a += n as f64 * b;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(GroundingError::Grounding("degenerate embedding".into()));
        }
        Ok(v.into_iter().map(|x| (x / norm) as f32).collect())
    }
}
