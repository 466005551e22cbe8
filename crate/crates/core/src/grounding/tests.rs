use std::collections::HashMap;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use super::*;
use crate::degrade::{Codec, DegradationSpec, Intensity};
use crate::video::{save_frame, Frame};

struct Scripted(HashMap<String, String>);

impl MllmClient for Scripted {
    fn ask(&self, _: &Path, prompt: &str) -> Result<String, GroundingError> {
        self.0
            .get(prompt)
            .cloned()
            .ok_or_else(|| GroundingError::Grounding(format!("unscripted {prompt}")))
    }
}

struct Counting<'a, T> {
    inner: &'a T,
    calls: AtomicUsize,
}

impl<'a, T> Counting<'a, T> {
    fn new(inner: &'a T) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }
    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<T: MllmClient> MllmClient for Counting<'_, T> {
    fn ask(&self, image: &Path, prompt: &str) -> Result<String, GroundingError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.ask(image, prompt)
    }
}

impl<T: TextEncoder> TextEncoder for Counting<'_, T> {
    fn id(&self) -> String {
        self.inner.id()
    }
    fn embed(&self, text: &str) -> Result<Vec<f32>, GroundingError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.embed(text)
    }
}

fn fref(path: &Path, i: usize) -> FrameRef {
    FrameRef {
        video_id: "v".into(),
        frame_index: i,
        path: path.to_path_buf(),
    }
}

fn cands(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn write_frame(dir: &Path, name: &str, rgb: [f64; 3]) -> PathBuf {
    let f = Frame::from_shape_fn((3, 12, 12), |(c, y, x)| (rgb[c] + 0.02 * ((x + y) % 3) as f64).min(1.0));
    let p = dir.join(name);
    save_frame(&f, &p).unwrap();
    p
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn scripted_client_follows_the_question_sequence_exactly() {
    let mut s = HashMap::new();
    s.insert(QUALITY_PROMPT.to_string(), "The quality is poor.".to_string());
    s.insert(presence_prompt("noise"), "Yes".to_string());
    s.insert(presence_prompt("rain"), "No".to_string());
    s.insert(presence_prompt("snow"), "yes.".to_string());
    s.insert(intensity_prompt("noise"), "moderate".to_string());
    s.insert(intensity_prompt("snow"), "Severe".to_string());
    let g = ground_frame(&fref(Path::new("x.png"), 0), &Scripted(s), &cands(&["noise", "rain", "snow"])).unwrap();
    assert_eq!(
        g.description,
        "The quality is poor. \
         There is noise in the image, and the intensity of noise is moderate. \
         There is snow in the image, and the intensity of snow is severe."
    );
    assert_eq!(
        g.detected,
        vec![
            Detection {
                name: "noise".into(),
                intensity: Intensity::Moderate
            },
            Detection {
                name: "snow".into(),
                intensity: Intensity::Severe
            },
        ]
    );
    assert_eq!(g.parse_warnings, 0);
}

#[test]
fn prompt_templates_are_verbatim() {
    assert_eq!(QUALITY_PROMPT, "Rate the quality of the image. Think step by step.");
    assert_eq!(
        presence_prompt("rain"),
        "Is there rain degradation present in the image? Answer Yes or No."
    );
    assert_eq!(
        intensity_prompt("blur"),
        "Rate the intensity of degradation blur? Choose either severe or moderate."
    );
    assert_eq!(
        degradation_sentence("snow", Intensity::Severe),
        "There is snow in the image, and the intensity of snow is severe"
    );
}

#[test]
fn out_of_vocabulary_answers_are_skipped() {
    let mut s = HashMap::new();
    s.insert(QUALITY_PROMPT.to_string(), "ok".to_string());
    s.insert(presence_prompt("noise"), "Maybe".to_string());
    s.insert(presence_prompt("blur"), "Yes".to_string());
    s.insert(intensity_prompt("blur"), "mild".to_string());
    s.insert(presence_prompt("snow"), "Yes".to_string());
    s.insert(intensity_prompt("snow"), "moderate".to_string());
    let g = ground_frame(&fref(Path::new("x.png"), 0), &Scripted(s), &cands(&["noise", "blur", "snow"])).unwrap();
    assert_eq!(g.parse_warnings, 2);
    assert_eq!(g.detected.len(), 1);
    assert_eq!(g.detected[0].name, "snow");
}

#[test]
fn empty_quality_and_candidates_are_errors() {
    let mut s = HashMap::new();
    s.insert(QUALITY_PROMPT.to_string(), "   ".to_string());
    let f = fref(Path::new("x.png"), 0);
    assert!(matches!(query_quality(&f, &Scripted(s.clone())), Err(GroundingError::Grounding(_))));
    assert!(ground_frame(&f, &Scripted(s), &[]).is_err());
}

#[test]
fn mock_reports_severe_snow() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write_frame(tmp.path(), "a.png", [0.3, 0.4, 0.5]);
    let mut m = MockMllm::new();
    m.insert(
        &p,
        vec![DegradationSpec::Snow {
            intensity: Intensity::Severe,
        }],
    );
    let d1 = query_quality(&fref(&p, 0), &m).unwrap();
    assert!(d1.contains("severe snow"), "{d1}");
    let g = ground_frame(&fref(&p, 0), &m, &cands(&["snow"])).unwrap();
    assert_eq!(
        g.detected,
        vec![Detection {
            name: "snow".into(),
            intensity: Intensity::Severe
        }]
    );
}

#[test]
fn mock_noise_and_jpeg_are_moderate() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write_frame(tmp.path(), "a.png", [0.6, 0.2, 0.2]);
    let mut m = MockMllm::new();
    m.insert(
        &p,
        vec![
            DegradationSpec::GaussianNoise { sigma: 12.0 },
            DegradationSpec::JpegCompression { quality: 20 },
        ],
    );
    let g = ground_frame(&fref(&p, 0), &m, &cands(&DEFAULT_CANDIDATES)).unwrap();
    let got: Vec<(String, Intensity)> = g.detected.iter().map(|d| (d.name.clone(), d.intensity)).collect();
    assert_eq!(
        got,
        vec![
            ("noise".to_string(), Intensity::Moderate),
            ("compression".to_string(), Intensity::Moderate)
        ]
    );
}

#[test]
fn mock_clean_frame_mentions_no_candidate() {
    let tmp = tempfile::tempdir().unwrap();
    for (i, rgb) in [[0.1, 0.1, 0.1], [0.9, 0.9, 0.9], [0.2, 0.7, 0.3], [0.8, 0.5, 0.1]].iter().enumerate() {
        let p = write_frame(tmp.path(), &format!("c{i}.png"), *rgb);
        let m = MockMllm::new();
        let d1 = query_quality(&fref(&p, 0), &m).unwrap();
        let g = ground_frame(&fref(&p, 0), &m, &cands(&DEFAULT_CANDIDATES)).unwrap();
        assert!(g.detected.is_empty());
        assert_eq!(g.description, d1);
        let w = words(&d1);
        for c in DEFAULT_CANDIDATES {
            assert!(!w.contains(&c.to_string()), "{c} in {d1}");
        }
        assert!(w.contains(&"quality".to_string()));
    }
}

#[test]
fn mock_thresholds_split_intensities() {
    let t = MockThresholds::default();
    let sev = |s| t.intensity(&s);
    assert_eq!(sev(DegradationSpec::GaussianNoise { sigma: 25.0 }), Intensity::Moderate);
    assert_eq!(sev(DegradationSpec::GaussianNoise { sigma: 30.0 }), Intensity::Severe);
    assert_eq!(sev(DegradationSpec::SpeckleNoise { sigma: 12.0 }), Intensity::Moderate);
    assert_eq!(sev(DegradationSpec::PoissonNoise { alpha: 2.2 }), Intensity::Severe);
    assert_eq!(sev(DegradationSpec::PoissonNoise { alpha: 3.5 }), Intensity::Moderate);
    assert_eq!(sev(DegradationSpec::ResizeBlur { factor: 3.0 }), Intensity::Severe);
    assert_eq!(sev(DegradationSpec::GaussianBlur { sigma: 1.2 }), Intensity::Moderate);
    assert_eq!(sev(DegradationSpec::JpegCompression { quality: 20 }), Intensity::Moderate);
    assert_eq!(sev(DegradationSpec::VideoCompression { codec: Codec::H264 }), Intensity::Moderate);
}

#[test]
fn content_description_is_invariant_to_flips() {
    let f = Frame::from_shape_fn((3, 9, 7), |(c, y, x)| ((c * 31 + y * 7 + x * 3) % 17) as f64 / 16.0);
    let flipped = f.slice(ndarray::s![.., .., ..;-1]).to_owned();
    let rotated = f.slice(ndarray::s![.., ..;-1, ..;-1]).to_owned();
    assert_eq!(describe_content(&f), describe_content(&flipped));
    assert_eq!(describe_content(&f), describe_content(&rotated));
}

#[test]
fn encoder_is_deterministic_and_discriminative() {
    let e = MockEncoder::new(64, 0);
    let a = e.embed("There is noise in the image, and the intensity of noise is moderate").unwrap();
    assert_eq!(a, e.embed("There is noise in the image, and the intensity of noise is moderate").unwrap());
    assert_eq!(a.len(), 64);
    let norm: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-6);
    let b = e.embed("There is noise in the image, and the intensity of noise is severe").unwrap();
    assert!(cosine(&a, &b) < 1.0 - 1e-6);
    assert!(embed_description("  ", &e).is_err());
    assert_ne!(MockEncoder::new(64, 1).embed("noise").unwrap(), e.embed("noise").unwrap());
}

#[test]
fn shared_degradation_words_are_closer() {
    let e = MockEncoder::new(384, 7);
    let a = e.embed("A dark azure scene. There is snow in the image, and the intensity of snow is severe.").unwrap();
    let b = e.embed("A bright orange scene. There is snow in the image, and the intensity of snow is severe.").unwrap();
    let c = e.embed("A bright orange scene. There is blur in the image, and the intensity of blur is moderate.").unwrap();
    let u = e.embed("completely unrelated words about kittens playing piano").unwrap();
    assert!(cosine(&a, &b) > cosine(&a, &u) + 0.2);
    assert!(cosine(&b, &c) < cosine(&a, &b) + 0.5);
}

fn ten_frames(dir: &Path) -> Vec<FrameRef> {
    (0..10)
        .map(|i| {
            let v = i as f64 / 10.0;
            let p = write_frame(dir, &format!("f{i}.png"), [v, 1.0 - v, 0.5]);
            fref(&p, i)
        })
        .collect()
}

#[test]
fn store_roundtrips_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let frames = ten_frames(tmp.path());
    let mock = MockMllm::new();
    let enc = MockEncoder::new(384, 3);
    let dir = tmp.path().join("store");
    let opts = BuildOptions {
        dir: Some(dir.clone()),
        ..Default::default()
    };
    let (store, stats) = build_embedding_store(&frames, &mock, &enc, &cands(&DEFAULT_CANDIDATES), &opts).unwrap();
    assert_eq!(store.len(), 10);
    assert_eq!(stats.grounded, 10);
    assert_eq!(EmbeddingStore::load(&dir).unwrap(), store);
    let bytes = std::fs::read(dir.join("embeddings.bin")).unwrap();
    assert_eq!(bytes.len(), 10 * 384 * 4);

    let client = Counting::new(&mock);
    let encoder = Counting::new(&enc);
    let (again, stats) = build_embedding_store(&frames, &client, &encoder, &cands(&DEFAULT_CANDIDATES), &opts).unwrap();
    assert_eq!(client.calls() + encoder.calls(), 0);
    assert_eq!(stats.reused, 10);
    assert_eq!(again, store);
}

#[test]
fn store_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let frames = ten_frames(tmp.path());
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        let opts = BuildOptions {
            dir: Some(dir.clone()),
            jobs: 2,
            ..Default::default()
        };
        build_embedding_store(&frames, &MockMllm::new(), &MockEncoder::new(32, 0), &cands(&["noise"]), &opts).unwrap();
        bytes.push(
            ["store.json", "index.jsonl", "embeddings.bin"]
                .map(|f| std::fs::read(dir.join(f)).unwrap())
                .to_vec(),
        );
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn missing_key_is_an_error() {
    let store = EmbeddingStore::new(384);
    assert!(matches!(store.get("v", 3), Err(GroundingError::Missing { .. })));
}

struct FailOn<'a> {
    inner: &'a MockMllm,
    bad: PathBuf,
}

impl MllmClient for FailOn<'_> {
    fn ask(&self, image: &Path, prompt: &str) -> Result<String, GroundingError> {
        if image == self.bad {
            return Err(GroundingError::Grounding("scripted failure".into()));
        }
        self.inner.ask(image, prompt)
    }
}

#[test]
fn partial_failure_persists_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let frames = ten_frames(tmp.path());
    let mock = MockMllm::new();
    let enc = MockEncoder::new(16, 0);
    let dir = tmp.path().join("store");
    let opts = BuildOptions {
        dir: Some(dir.clone()),
        ..Default::default()
    };
    let failing = FailOn {
        inner: &mock,
        bad: frames[4].path.clone(),
    };
    assert!(build_embedding_store(&frames, &failing, &enc, &cands(&["noise"]), &opts).is_err());
    let partial = EmbeddingStore::load(&dir).unwrap();
    assert_eq!(partial.len(), 9);
    assert!(!partial.contains("v", 4));
    let counting = Counting::new(&mock);
    let (full, stats) = build_embedding_store(&frames, &counting, &enc, &cands(&["noise"]), &opts).unwrap();
    assert_eq!(full.len(), 10);
    assert_eq!((stats.reused, stats.grounded), (9, 1));
    // one quality query and one presence query for the single resumed frame
    assert_eq!(counting.calls(), 2);
}

#[test]
fn changed_frames_are_regrounded() {
    let tmp = tempfile::tempdir().unwrap();
    let frames = ten_frames(tmp.path());
    let dir = tmp.path().join("store");
    let opts = BuildOptions {
        dir: Some(dir),
        ..Default::default()
    };
    let enc = MockEncoder::new(16, 0);
    build_embedding_store(&frames, &MockMllm::new(), &enc, &cands(&["noise"]), &opts).unwrap();
    write_frame(tmp.path(), "f2.png", [0.0, 0.0, 0.9]);
    let (_, stats) = build_embedding_store(&frames, &MockMllm::new(), &enc, &cands(&["noise"]), &opts).unwrap();
    assert_eq!((stats.reused, stats.grounded), (9, 1));
    let other = MockEncoder::new(16, 1);
    assert!(build_embedding_store(&frames, &MockMllm::new(), &other, &cands(&["noise"]), &opts).is_ok());
}

#[test]
fn record_validation() {
    let mut rec = GroundedFrameRecord {
        frame: fref(Path::new("x"), 0),
        description: "There is snow in the image, and the intensity of snow is severe.".into(),
        detected: vec![Detection {
            name: "snow".into(),
            intensity: Intensity::Severe,
        }],
        embedding: vec![0.0; 4],
        encoder_id: "e".into(),
        content_hash: String::new(),
    };
    assert!(rec.validate(4).is_ok());
    assert!(rec.validate(5).is_err());
    rec.detected[0].name = "rain".into();
    assert!(rec.validate(4).is_err());
    rec.detected.clear();
    rec.description = String::new();
    assert!(rec.validate(4).is_err());
}

#[test]
fn term_counts() {
    let mut store = EmbeddingStore::new(2);
    assert!(degradation_term_counts(&store, &["snow"]).values().all(|&n| n == 0));
    for (i, d) in ["Heavy Snow, severe snow.", "snowy but no snow?", "snow-covered", "noise only"].iter().enumerate() {
        store
            .insert(GroundedFrameRecord {
                frame: fref(Path::new("x"), i),
                description: d.to_string(),
                detected: vec![],
                embedding: vec![0.0, 1.0],
                encoder_id: "e".into(),
                content_hash: String::new(),
            })
            .unwrap();
    }
    let c = degradation_term_counts(&store, &["snow", "severe snow", "noise", "rain"]);
    assert_eq!(c["snow"], 3);
    assert_eq!(c["severe snow"], 1);
    assert_eq!(c["noise"], 1);
    assert_eq!(c["rain"], 0);
}

#[test]
fn socket_clients_match_in_process_mock() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write_frame(tmp.path(), "a.png", [0.2, 0.3, 0.8]);
    let mut mock = MockMllm::new();
    mock.insert(&p, vec![DegradationSpec::GaussianNoise { sigma: 40.0 }]);
    let enc = MockEncoder::new(24, 2);
    let server = serve(TcpListener::bind("127.0.0.1:0").unwrap(), mock.clone(), enc.clone()).unwrap();
    let addr = server.addr.to_string();
    let remote = SocketMllm::new(addr.clone());
    let renc = SocketEncoder::new(addr);
    let c = cands(&DEFAULT_CANDIDATES);
    let local = ground_frame(&fref(&p, 0), &mock, &c).unwrap();
    let over = ground_frame(&fref(&p, 0), &remote, &c).unwrap();
    assert_eq!(local, over);
    assert_eq!(
        enc.embed(&local.description).unwrap(),
        renc.embed(&local.description).unwrap()
    );
    // server-side failures surface as grounding errors, not transport errors
    assert!(matches!(remote.ask(&p, "what?"), Err(GroundingError::Grounding(_))));
}

#[test]
fn unreachable_server_is_a_transport_error() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let c = SocketMllm::new(format!("127.0.0.1:{port}"));
    let err = c.ask(Path::new("x.png"), QUALITY_PROMPT).unwrap_err();
    assert!(err.is_retriable(), "{err}");
}
