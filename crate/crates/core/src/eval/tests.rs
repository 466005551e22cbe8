use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::degrade::{generate_sources, synthesize_dataset, Protocol, ProtocolConfig, SourceConfig};
use crate::grounding::{build_embedding_store, frame_refs, BuildOptions, MockEncoder, MockMllm};
use crate::model::ModelConfig;
use crate::video::Frame;

fn rand_frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Frame {
    Array3::from_shape_simple_fn((3, h, w), || rng.random_range(0.0..1.0))
}

fn psnr_oracle(a: &Frame, b: &Frame) -> f64 {
    let (c, h, w) = a.dim();
    let mut se = 0.0;
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let d = a[[ci, y, x]] - b[[ci, y, x]];
                se += d * d;
            }
        }
    }
    let mse = se / (c * h * w) as f64;
    if mse == 0.0 {
        100.0
    } else {
        (-10.0 * mse.log10()).min(100.0)
    }
}

/// Direct per-window SSIM with a 2-D Gaussian weight and centred moments.
fn ssim_oracle(a: &Frame, b: &Frame) -> f64 {
    let (_, h, w) = a.dim();
    let lum = |f: &Frame, y: usize, x: usize| 0.299 * f[[0, y, x]] + 0.587 * f[[1, y, x]] + 0.114 * f[[2, y, x]];
    let mut wts = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in wts.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut n = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wt = wts[i][j] / total;
                    mx += wt * lum(a, y0 + i, x0 + j);
                    my += wt * lum(b, y0 + i, x0 + j);
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wt = wts[i][j] / total;
                    let dx = lum(a, y0 + i, x0 + j) - mx;
                    let dy = lum(b, y0 + i, x0 + j) - my;
                    vx += wt * dx * dx;
                    vy += wt * dy * dy;
                    cxy += wt * dx * dy;
                }
            }
            acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            n += 1;
        }
    }
    acc / n as f64
}

#[test]
fn psnr_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = rand_frame(&mut rng, 8, 8);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    let zero = Frame::zeros((3, 8, 8));
    let tenth = Frame::from_elem((3, 8, 8), 0.1);
    assert!((psnr(&zero, &tenth).unwrap() - 20.0).abs() < 1e-9);
    let b = rand_frame(&mut rng, 8, 8);
    assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    assert!(psnr(&a, &Frame::zeros((3, 8, 7))).is_err());
}

#[test]
fn metrics_match_brute_force_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let a = rand_frame(&mut rng, 32, 32);
        let b = a.mapv(|v| (v + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0));
        let (p, po) = (psnr(&a, &b).unwrap(), psnr_oracle(&a, &b));
        assert!((p - po).abs() <= 1e-6 * po.abs(), "{p} vs {po}");
        let (s, so) = (ssim(&a, &b).unwrap(), ssim_oracle(&a, &b));
        assert!((s - so).abs() <= 1e-6 * so.abs(), "{s} vs {so}");
    }
}

#[test]
fn ssim_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_frame(&mut rng, 16, 20);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let inv = a.mapv(|v| 1.0 - v);
    assert!(ssim(&a, &inv).unwrap() < 1.0);
    let s = ssim(&a, &rand_frame(&mut rng, 16, 20)).unwrap();
    assert!((-1.0..=1.0).contains(&s));
    assert!(ssim(&Frame::zeros((3, 10, 12)), &Frame::zeros((3, 10, 12))).is_err());
    let taps = gaussian_taps();
    assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    assert_eq!(taps[0], taps[10]);
}

#[test]
fn psnr_falls_with_noise_strength() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gt = rand_frame(&mut rng, 16, 16).mapv(|v| 0.25 + 0.5 * v);
    let base: Vec<f64> = (0..gt.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut last = f64::INFINITY;
    for sigma in [0.01, 0.02, 0.05, 0.1, 0.2] {
        let mut noisy = gt.clone();
        for (v, n) in noisy.iter_mut().zip(&base) {
            *v = (*v + sigma * n).clamp(0.0, 1.0);
        }
        let p = psnr(&noisy, &gt).unwrap();
        assert!(p < last);
        last = p;
    }
}

#[test]
fn cosine_conventions() {
    assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), (0.0, true));
    let (c, deg) = cosine(&[0.5, -1.0, 2.0], &[1.0, -2.0, 4.0]);
    assert!((c - 1.0).abs() < 1e-12 && !deg);
}

fn toy_dataset(dir: &Path, clips: usize) -> Dataset {
    let src = dir.join("src");
    generate_sources(
        &src,
        &SourceConfig {
            clips,
            frames: 4,
            height: 16,
            width: 16,
        },
        3,
    )
    .unwrap();
    let out = dir.join("ds");
    synthesize_dataset(&ProtocolConfig::new(Protocol::Tud), &src, &out, 3, 1).unwrap();
    Dataset::open(&out).unwrap()
}

fn live_model() -> Restorer {
    let mut m = Restorer::init(ModelConfig::toy(8), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (_, t) in m.params.iter_mut() {
        t.mapv_inplace(|v| v + rng.random_range(-0.05..0.05));
    }
    m
}

#[test]
fn zero_model_scores_like_the_input() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = toy_dataset(tmp.path(), 2);
    let zero = Restorer::zeros(ModelConfig::toy(8)).unwrap();
    let a = evaluate(&zero, &ds, "zero", 1).unwrap();
    let b = evaluate_inputs(&ds, 1).unwrap();
    assert_eq!(a.videos, b.videos);
    assert_eq!((a.psnr, a.ssim), (b.psnr, b.ssim));
    assert_eq!(a.protocol, "TUD");
    assert_eq!(a.interval_t, 6);
}

#[test]
fn single_clip_aggregate_is_the_clip_score() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = toy_dataset(tmp.path(), 1);
    let r = evaluate(&live_model(), &ds, "live", 1).unwrap();
    assert_eq!(r.videos.len(), 1);
    assert_eq!((r.psnr, r.ssim), (r.videos[0].psnr, r.videos[0].ssim));
}

#[test]
fn perturbation_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = toy_dataset(tmp.path(), 2);
    let m = live_model();
    let clean = evaluate(&m, &ds, "live", 1).unwrap();
    assert_eq!(perturb_prompts_eval(&m, &ds, "live", 0.0, 9, 1).unwrap(), clean);
    let a = perturb_prompts_eval(&m, &ds, "live", 1.0, 9, 1).unwrap();
    let b = perturb_prompts_eval(&m, &ds, "live", 1.0, 9, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(metrics_csv(&a), metrics_csv(&b));
    assert_ne!(a.psnr, clean.psnr);
    assert_eq!(a.prompt_noise_sigma, Some(1.0));
    assert!(perturb_prompts_eval(&m, &ds, "live", -1.0, 9, 1).is_err());
}

#[test]
fn zero_prompts_are_flagged_in_alignment() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = toy_dataset(tmp.path(), 2);
    let (store, _) = build_embedding_store(
        &frame_refs(&ds),
        &MockMllm::from_dataset(&ds),
        &MockEncoder::new(8, 0),
        &["noise".to_string(), "blur".to_string()],
        &BuildOptions::default(),
    )
    .unwrap();
    let zero = Restorer::zeros(ModelConfig::toy(8)).unwrap();
    let r = prompt_alignment(&zero, &ds, &store, "zero", 0, 1).unwrap();
    assert_eq!(r.frames, 8);
    assert_eq!(r.degenerate, 16);
    assert_eq!((r.matched.mean, r.shuffled.mean), (0.0, 0.0));
    let live = prompt_alignment(&live_model(), &ds, &store, "live", 0, 1).unwrap();
    assert_eq!(live.degenerate, 0);
    assert!(live.matched.min <= live.matched.mean && live.matched.mean <= live.matched.max);
    assert!(alignment_text(&live).contains("gap"));
}

#[test]
fn exported_prompts_roundtrip_with_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = toy_dataset(tmp.path(), 2);
    let m = live_model();
    let out = tmp.path().join("export");
    let written = export_prompt_embeddings(&m, &ds, "live", &out, 1).unwrap();
    assert_eq!(written.len(), ds.num_frames());
    assert!(written.records().all(|r| r.embedding.len() == 8));
    assert_eq!(EmbeddingStore::load(&out).unwrap(), written);
    let prompts = dataset_prompts(&m, &ds, 1).unwrap();
    for (c, ps) in ds.clips.iter().zip(&prompts) {
        for (f, p) in c.frames.iter().zip(ps) {
            let rec = written.get(&c.video_id, f.meta.frame_index).unwrap();
            assert_eq!(rec.description, frame_label(&f.kinds()));
            let want: Vec<f32> = p.iter().map(|&x| x as f32).collect();
            assert_eq!(rec.embedding, want);
        }
    }
}

#[test]
fn table_layout() {
    let r = MetricsReport {
        protocol: "TUD".into(),
        interval_t: 6,
        checkpoint: "c".into(),
        prompt_noise_sigma: None,
        videos: vec![VideoScore {
            video_id: "v".into(),
            frames: 3,
            psnr: 30.0,
            ssim: 0.9,
        }],
        psnr: 30.0,
        ssim: 0.9,
    };
    let mut r2 = r.clone();
    r2.interval_t = 12;
    r2.psnr = 28.0;
    r2.ssim = 0.8;
    let t = metrics_table(&[("ours", vec![&r, &r2])]);
    assert!(t.contains("TUD t=6") && t.contains("TUD t=12") && t.contains("Average"));
    assert!(t.contains("29.00  0.8500"));
    let csv = metrics_csv(&r);
    assert!(csv.ends_with("TUD,6,c,,average,3,30.0000,0.900000\n"), "{csv}");
}
