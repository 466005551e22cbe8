//! Per-frame language grounding: an MLLM is asked about each frame's quality
//! and candidate degradations, the answers are rendered into a description,
//! and a text encoder turns the description into the distillation target.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::degrade::Intensity;

mod mock;
mod socket;
mod store;

pub use mock::{describe_content, MockEncoder, MockMllm, MockThresholds};
pub use socket::{serve, ServerHandle, SocketEncoder, SocketMllm};
pub use store::{build_embedding_store, frame_refs, BuildOptions, BuildStats, EmbeddingStore, STORE_INDEX};

#[derive(Debug, thiserror::Error)]
pub enum GroundingError {
    /// The client could not be reached or timed out; worth retrying.
    #[error("transport: {0}")]
    Transport(String),
    #[error("grounding: {0}")]
    Grounding(String),
    #[error("store: {0}")]
    Store(String),
    #[error("no store record for {video_id} frame {frame_index}")]
    Missing { video_id: String, frame_index: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl GroundingError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, GroundingError::Transport(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrameRef {
    pub video_id: String,
    pub frame_index: usize,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub name: String,
    pub intensity: Intensity,
}

/// Output of the question-answering part of grounding, before embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Grounding {
    pub description: String,
    pub detected: Vec<Detection>,
    /// Candidates skipped because an answer fell outside the allowed vocabulary.
    pub parse_warnings: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundedFrameRecord {
    pub frame: FrameRef,
    pub description: String,
    pub detected: Vec<Detection>,
    pub embedding: Vec<f32>,
    pub encoder_id: String,
    /// sha256 of the frame file, used to skip already grounded frames.
    pub content_hash: String,
}

impl GroundedFrameRecord {
    pub fn validate(&self, d: usize) -> Result<(), GroundingError> {
        let key = format!("{} frame {}", self.frame.video_id, self.frame.frame_index);
        if self.description.trim().is_empty() {
            return Err(GroundingError::Store(format!("{key}: empty description")));
        }
        if self.embedding.len() != d {
            return Err(GroundingError::Store(format!(
                "{key}: embedding length {} != store d {d}",
                self.embedding.len()
            )));
        }
        if let Some(det) = self.detected.iter().find(|det| !self.description.contains(&det.name)) {
            return Err(GroundingError::Store(format!("{key}: {:?} missing from description", det.name)));
        }
        Ok(())
    }
}

/// Multimodal model answering a text prompt about an image.
pub trait MllmClient: Sync {
    fn ask(&self, image: &std::path::Path, prompt: &str) -> Result<String, GroundingError>;
}

pub trait TextEncoder: Sync {
    /// Stable identifier; records embedded with a different id are recomputed.
    fn id(&self) -> String;
    fn embed(&self, text: &str) -> Result<Vec<f32>, GroundingError>;
}

pub const QUALITY_PROMPT: &str = "Rate the quality of the image. Think step by step.";

/// The default candidate list.
pub const DEFAULT_CANDIDATES: [&str; 5] = ["noise", "rain", "snow", "blur", "compression"];

pub fn presence_prompt(d: &str) -> String {
    format!("Is there {d} degradation present in the image? Answer Yes or No.")
}

pub fn intensity_prompt(d: &str) -> String {
    format!("Rate the intensity of degradation {d}? Choose either severe or moderate.")
}

pub fn degradation_sentence(d: &str, s: Intensity) -> String {
    format!("There is {d} in the image, and the intensity of {d} is {s}")
}

fn normalize_answer(a: &str) -> String {
    a.trim().trim_end_matches(['.', '!']).trim().to_ascii_lowercase()
}

pub fn query_quality(frame: &FrameRef, client: &dyn MllmClient) -> Result<String, GroundingError> {
    let text = client.ask(&frame.path, QUALITY_PROMPT)?;
    let text = text.trim();
    if text.is_empty() {
        return Err(GroundingError::Grounding(format!(
            "empty quality description for {}",
            frame.path.display()
        )));
    }
    Ok(text.to_string())
}

/// Runs the fixed question sequence: one quality query, then per candidate a
/// yes/no presence query and, on yes, a severe/moderate intensity query.
///
/// The description is `d1` followed by one sentence per detected candidate,
/// in candidate order, separated by single spaces and each ending in a period.
/// Answers outside the allowed vocabulary skip the candidate and count a
/// warning.
pub fn ground_frame(
    frame: &FrameRef,
    client: &dyn MllmClient,
    candidates: &[String],
) -> Result<Grounding, GroundingError> {
    if candidates.is_empty() {
        return Err(GroundingError::Grounding("no candidate degradations".into()));
    }
    let d1 = query_quality(frame, client)?;
    let mut desc = d1;
    let mut detected = Vec::new();
    let mut parse_warnings = 0;
    for d in candidates {
        let present = match normalize_answer(&client.ask(&frame.path, &presence_prompt(d))?).as_str() {
            "yes" => true,
            "no" => false,
            other => {
                log::warn!("{}: presence answer {other:?} for {d:?} is not Yes/No", frame.path.display());
                parse_warnings += 1;
                continue;
            }
        };
        if !present {
            continue;
        }
        let answer = normalize_answer(&client.ask(&frame.path, &intensity_prompt(d))?);
        let Ok(s) = answer.parse::<Intensity>() else {
            log::warn!("{}: intensity answer {answer:?} for {d:?} is not severe/moderate", frame.path.display());
            parse_warnings += 1;
            continue;
        };
        desc.push(' ');
        desc.push_str(&degradation_sentence(d, s));
        desc.push('.');
        detected.push(Detection {
            name: d.clone(),
            intensity: s,
        });
    }
    Ok(Grounding {
        description: desc,
        detected,
        parse_warnings,
    })
}

pub fn embed_description(text: &str, encoder: &dyn TextEncoder) -> Result<Vec<f32>, GroundingError> {
    if text.trim().is_empty() {
        return Err(GroundingError::Grounding("cannot embed empty text".into()));
    }
    let v = encoder.embed(text)?;
    if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
        return Err(GroundingError::Grounding("encoder returned an empty or non-finite vector".into()));
    }
    Ok(v)
}

/// Lowercase alphanumeric words.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Number of records whose description contains each term as a whole word
/// (or whole word sequence), ignoring case.
pub fn degradation_term_counts(store: &EmbeddingStore, terms: &[&str]) -> BTreeMap<String, usize> {
    let needles: Vec<(String, Vec<String>)> = terms.iter().map(|t| (t.to_string(), words(t))).collect();
    let mut counts: BTreeMap<String, usize> = needles.iter().map(|(t, _)| (t.clone(), 0)).collect();
    for rec in store.records() {
        let hay = words(&rec.description);
        for (term, needle) in &needles {
            if !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle.as_slice()) {
                *counts.get_mut(term).expect("seeded") += 1;
            }
        }
    }
    counts
}

#[cfg(test)]
mod tests;
