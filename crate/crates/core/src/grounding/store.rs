//! The on-disk embedding store and the offline pass that fills it.
//!
//! Layout of a store directory:
//!
//! ```text
//! store.json       {format_version, d, count}
//! index.jsonl      one record header per line, with `offset`/`length` in f32 units
//! embeddings.bin   little-endian f32, contiguous, in index order
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    embed_description, ground_frame, Detection, FrameRef, GroundedFrameRecord, GroundingError, MllmClient,
    TextEncoder,
};
use crate::degrade::Dataset;
use crate::fsutil::{sha256_hex, write_atomic};

pub const STORE_INDEX: &str = "index.jsonl";
const STORE_EMBEDDINGS: &str = "embeddings.bin";
const STORE_META: &str = "store.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct IndexLine {
    video_id: String,
    frame_index: usize,
    path: PathBuf,
    description: String,
    detected: Vec<Detection>,
    encoder_id: String,
    content_hash: String,
    offset: u64,
    length: u64,
}

#[derive(Serialize, Deserialize)]
struct StoreMeta {
    format_version: u32,
    d: usize,
    count: usize,
}

/// Grounded records keyed by `(video_id, frame_index)`, all with embeddings of
/// length `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    d: usize,
    records: BTreeMap<(String, usize), GroundedFrameRecord>,
}

impl EmbeddingStore {
    pub fn new(d: usize) -> Self {
        assert!(d > 0, "embedding dimension must be positive");
        Self {
            d,
            records: BTreeMap::new(),
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &GroundedFrameRecord> {
        self.records.values()
    }

    /// Inserts or replaces the record for its frame.
    pub fn insert(&mut self, rec: GroundedFrameRecord) -> Result<(), GroundingError> {
        rec.validate(self.d)?;
        self.records
            .insert((rec.frame.video_id.clone(), rec.frame.frame_index), rec);
        Ok(())
    }

    pub fn get(&self, video_id: &str, frame_index: usize) -> Result<&GroundedFrameRecord, GroundingError> {
        self.records
            .get(&(video_id.to_string(), frame_index))
            .ok_or_else(|| GroundingError::Missing {
                video_id: video_id.to_string(),
                frame_index,
            })
    }

    pub fn contains(&self, video_id: &str, frame_index: usize) -> bool {
        self.records.contains_key(&(video_id.to_string(), frame_index))
    }

    pub fn save(&self, dir: &Path) -> Result<(), GroundingError> {
        std::fs::create_dir_all(dir)?;
        let mut bin = vec![0u8; self.records.len() * self.d * 4];
        let mut index = String::new();
        for (i, rec) in self.records.values().enumerate() {
            let off = i * self.d;
            LittleEndian::write_f32_into(&rec.embedding, &mut bin[off * 4..(off + self.d) * 4]);
            let line = IndexLine {
                video_id: rec.frame.video_id.clone(),
                frame_index: rec.frame.frame_index,
                path: rec.frame.path.clone(),
                description: rec.description.clone(),
                detected: rec.detected.clone(),
                encoder_id: rec.encoder_id.clone(),
                content_hash: rec.content_hash.clone(),
                offset: off as u64,
                length: self.d as u64,
            };
            index.push_str(&serde_json::to_string(&line)?);
            index.push('\n');
        }
        write_atomic(&dir.join(STORE_EMBEDDINGS), &bin)?;
        write_atomic(&dir.join(STORE_INDEX), index.as_bytes())?;
        let meta = StoreMeta {
            format_version: FORMAT_VERSION,
            d: self.d,
            count: self.records.len(),
        };
        write_atomic(&dir.join(STORE_META), serde_json::to_string_pretty(&meta)?.as_bytes())?;
        Ok(())
    }

    pub fn exists(dir: &Path) -> bool {
        dir.join(STORE_META).is_file()
    }

    pub fn load(dir: &Path) -> Result<Self, GroundingError> {
        let meta: StoreMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(STORE_META))?)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(GroundingError::Store(format!("unsupported store version {}", meta.format_version)));
        }
        if meta.d == 0 {
            return Err(GroundingError::Store("store declares d = 0".into()));
        }
        let bin = std::fs::read(dir.join(STORE_EMBEDDINGS))?;
        if bin.len() % 4 != 0 {
            return Err(GroundingError::Store("embeddings.bin is not a whole number of f32".into()));
        }
        let mut floats = vec![0f32; bin.len() / 4];
        LittleEndian::read_f32_into(&bin, &mut floats);
        let mut store = Self::new(meta.d);
        for (n, line) in std::fs::read_to_string(dir.join(STORE_INDEX))?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let l: IndexLine = serde_json::from_str(line)?;
            let (off, len) = (l.offset as usize, l.length as usize);
            if len != meta.d || off + len > floats.len() {
                return Err(GroundingError::Store(format!("index line {}: bad offset/length", n + 1)));
            }
            store.insert(GroundedFrameRecord {
                frame: FrameRef {
                    video_id: l.video_id,
                    frame_index: l.frame_index,
                    path: l.path,
                },
                description: l.description,
                detected: l.detected,
                embedding: floats[off..off + len].to_vec(),
                encoder_id: l.encoder_id,
                content_hash: l.content_hash,
            })?;
        }
        if store.len() != meta.count {
            return Err(GroundingError::Store(format!(
                "store.json lists {} records, index has {}",
                meta.count,
                store.len()
            )));
        }
        Ok(store)
    }
}

/// References to every LQ frame of a dataset, in clip then frame order.
pub fn frame_refs(ds: &Dataset) -> Vec<FrameRef> {
    ds.clips
        .iter()
        .flat_map(|c| {
            (0..c.len()).map(move |i| FrameRef {
                video_id: c.video_id.clone(),
                frame_index: c.frames[i].meta.frame_index,
                path: c.lq_path(i),
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct BuildOptions {
    /// Where the store lives; existing records there are reused.
    pub dir: Option<PathBuf>,
    /// Concurrent frames in flight (0 = one per core).
    pub jobs: usize,
    /// Extra attempts for transport errors.
    pub retries: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            dir: None,
            jobs: 1,
            retries: 2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BuildStats {
    pub grounded: usize,
    pub reused: usize,
    pub failed: usize,
    pub parse_warnings: usize,
}

fn with_retry<T>(retries: usize, mut f: impl FnMut() -> Result<T, GroundingError>) -> Result<T, GroundingError> {
    let mut attempt = 0;
    loop {
        match f() {
            Err(e) if e.is_retriable() && attempt < retries => {
                attempt += 1;
                log::warn!("{e}; retry {attempt}/{retries}");
                std::thread::sleep(std::time::Duration::from_millis(50 * attempt as u64));
            }
            other => return other,
        }
    }
}

fn ground_one(
    frame: &FrameRef,
    hash: String,
    client: &dyn MllmClient,
    encoder: &dyn TextEncoder,
    encoder_id: &str,
    candidates: &[String],
    retries: usize,
) -> Result<(GroundedFrameRecord, usize), GroundingError> {
    let g = with_retry(retries, || ground_frame(frame, client, candidates))?;
    let embedding = with_retry(retries, || embed_description(&g.description, encoder))?;
    Ok((
        GroundedFrameRecord {
            frame: frame.clone(),
            description: g.description,
            detected: g.detected,
            embedding,
            encoder_id: encoder_id.to_string(),
            content_hash: hash,
        },
        g.parse_warnings,
    ))
}

/// Grounds and embeds every frame. Frames whose file hash and encoder match
/// an existing record in `opts.dir` are skipped. Whatever succeeded is
/// persisted before the first error (if any) is returned, so a rerun resumes.
pub fn build_embedding_store(
    frames: &[FrameRef],
    client: &dyn MllmClient,
    encoder: &dyn TextEncoder,
    candidates: &[String],
    opts: &BuildOptions,
) -> Result<(EmbeddingStore, BuildStats), GroundingError> {
    if frames.is_empty() {
        return Err(GroundingError::Grounding("no frames to ground".into()));
    }
    let encoder_id = encoder.id();
    let existing = match &opts.dir {
        Some(dir) if EmbeddingStore::exists(dir) => Some(EmbeddingStore::load(dir)?),
        _ => None,
    };
    let mut stats = BuildStats::default();
    let mut todo = Vec::new();
    for f in frames {
        let bytes = std::fs::read(&f.path)
            .map_err(|e| GroundingError::Grounding(format!("cannot read frame {}: {e}", f.path.display())))?;
        let hash = sha256_hex(&bytes);
        let fresh = existing
            .as_ref()
            .and_then(|s| s.get(&f.video_id, f.frame_index).ok())
            .is_some_and(|r| r.content_hash == hash && r.encoder_id == encoder_id);
        if fresh {
            stats.reused += 1;
        } else {
            todo.push((f, hash));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| GroundingError::Grounding(format!("thread pool: {e}")))?;
    let results: Vec<_> = pool.install(|| {
        todo.into_par_iter()
            .map(|(f, hash)| ground_one(f, hash, client, encoder, &encoder_id, candidates, opts.retries))
            .collect()
    });
    let d = existing
        .as_ref()
        .map(|s| s.d())
        .or_else(|| results.iter().find_map(|r| r.as_ref().ok().map(|(rec, _)| rec.embedding.len())));
    let mut store = match (existing, d) {
        (Some(s), _) => s,
        (None, Some(d)) => EmbeddingStore::new(d),
        (None, None) => {
            // nothing succeeded and nothing to resume from
            return Err(results
                .into_iter()
                .find_map(Result::err)
                .unwrap_or_else(|| GroundingError::Grounding("no records produced".into())));
        }
    };
    let mut first_err = None;
    for r in results {
        match r.and_then(|(rec, w)| store.insert(rec).map(|_| w)) {
            Ok(w) => {
                stats.grounded += 1;
                stats.parse_warnings += w;
            }
            Err(e) => {
                stats.failed += 1;
                log::error!("{e}");
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(dir) = &opts.dir {
        store.save(dir)?;
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok((store, stats)),
    }
}
