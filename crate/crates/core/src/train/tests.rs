use ndarray::{s, Array1, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::video::ClipRole;

fn rand_frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Frame {
    Array3::from_shape_simple_fn((3, h, w), || rng.random_range(0.0..1.0))
}

fn clip_of(frames: Vec<Frame>) -> VideoClip {
    VideoClip::new(frames, ClipRole::Restored).unwrap()
}

#[test]
fn restoration_loss_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gt = clip_of((0..3).map(|_| rand_frame(&mut rng, 5, 4)).collect());
    assert_eq!(restoration_loss(&gt, &gt).unwrap(), 0.0);
    let shifted = clip_of(gt.frames.iter().map(|f| f + 0.1).collect());
    assert!((restoration_loss(&shifted, &gt).unwrap() - 0.1).abs() < 1e-12);

    let pred = clip_of((0..3).map(|_| rand_frame(&mut rng, 5, 4)).collect());
    let mut brute = 0.0;
    for t in 0..3 {
        for c in 0..3 {
            for y in 0..5 {
                for x in 0..4 {
                    brute += (pred.frames[t][[c, y, x]] - gt.frames[t][[c, y, x]]).abs();
                }
            }
        }
    }
    brute /= (3 * 3 * 5 * 4) as f64;
    assert!((restoration_loss(&pred, &gt).unwrap() - brute).abs() < 1e-12);

    let short = clip_of(gt.frames[..2].to_vec());
    assert!(restoration_loss(&short, &gt).is_err());
    let small = clip_of((0..3).map(|_| rand_frame(&mut rng, 4, 4)).collect());
    assert!(restoration_loss(&small, &gt).is_err());
}

#[test]
fn prompt_loss_examples() {
    let v = [0.6, -0.8, 0.0];
    assert_eq!(prompt_loss(&v, &v).unwrap(), 0.0);
    let zero = [0.0; 3];
    assert!((prompt_loss(&zero, &v).unwrap() - 1.4 / 3.0).abs() < 1e-15);
    let p = [0.3, 0.1, -2.0];
    assert_eq!(prompt_loss(&p, &v).unwrap(), prompt_loss(&v, &p).unwrap());
    assert!(prompt_loss(&p, &v[..2]).is_err());
}

#[test]
fn total_loss_examples() {
    let gt = clip_of(vec![Frame::zeros((3, 2, 2))]);
    let pred = clip_of(vec![Frame::from_elem((3, 2, 2), 0.2)]);
    let p = [0.5, -0.5];
    let t = [0.0, 0.0];
    let cfg = LossConfig::default();
    assert!((total_loss(&pred, &gt, &p, &t, &cfg).unwrap() - 0.205).abs() < 1e-12);
    let no_prompt = LossConfig {
        lambda2: 0.0,
        ..cfg
    };
    assert_eq!(
        total_loss(&pred, &gt, &p, &t, &no_prompt).unwrap(),
        restoration_loss(&pred, &gt).unwrap()
    );
    assert_eq!(total_loss(&gt, &gt, &t, &t, &cfg).unwrap(), 0.0);
    assert!(LossConfig {
        lambda1: -1.0,
        lambda2: 0.0
    }
    .validate()
    .is_err());
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(0, 500, 4e-4, 1e-7), 4e-4);
    assert!((cosine_lr(500, 500, 4e-4, 1e-7) - 1e-7).abs() < 1e-20);
    assert!((cosine_lr(250, 500, 4e-4, 1e-7) - (4e-4 + 1e-7) / 2.0).abs() < 1e-18);
    let lrs: Vec<f64> = (0..=500).map(|s| cosine_lr(s, 500, 4e-4, 1e-7)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn moving_average_is_trailing() {
    assert_eq!(moving_average(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
}

#[test]
fn dihedral_names_match_rotations() {
    // 2x3 frame with distinct values
    let f = Array3::from_shape_fn((1, 2, 3), |(_, y, x)| (y * 3 + x) as f64);
    let by_name = |n: &str| Dihedral::all().find(|t| t.name() == n).unwrap().apply(&f);
    // counter-clockwise quarter turn: the right column becomes the top row
    assert_eq!(by_name("rot90").slice(s![0, .., ..]), ndarray::arr2(&[[2.0, 5.0], [1.0, 4.0], [0.0, 3.0]]));
    assert_eq!(by_name("rot270").slice(s![0, .., ..]), ndarray::arr2(&[[3.0, 0.0], [4.0, 1.0], [5.0, 2.0]]));
    assert_eq!(by_name("rot180").slice(s![0, .., ..]), ndarray::arr2(&[[5.0, 4.0, 3.0], [2.0, 1.0, 0.0]]));
    assert_eq!(by_name("hflip").slice(s![0, .., ..]), ndarray::arr2(&[[2.0, 1.0, 0.0], [5.0, 4.0, 3.0]]));
    let outs: std::collections::HashSet<Vec<u64>> = Dihedral::all()
        .map(|t| t.apply(&f).iter().map(|v| v.to_bits()).chain([t.apply(&f).shape()[1] as u64]).collect())
        .collect();
    assert_eq!(outs.len(), 8);
}

#[test]
fn augment_is_paired_and_seeded() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let lq = rand_frame(&mut rng, 6, 6);
    let gt = rand_frame(&mut rng, 6, 6);
    let (a1, b1, t1) = augment(&lq, &gt, &mut ChaCha8Rng::seed_from_u64(9));
    let (a2, b2, t2) = augment(&lq, &gt, &mut ChaCha8Rng::seed_from_u64(9));
    assert_eq!((a1.clone(), b1.clone(), t1), (a2, b2, t2));
    assert_eq!(a1, t1.apply(&lq));
    assert_eq!(b1, t1.apply(&gt));
    let (x, y, _) = augment(&lq, &lq, &mut rng);
    assert_eq!(x, y);
}

proptest! {
    #[test]
    fn dihedral_inverse_recovers(seed in any::<u64>(), k in 0usize..8, h in 1usize..6, w in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = rand_frame(&mut rng, h, w);
        let t = Dihedral::all().nth(k).unwrap();
        prop_assert_eq!(t.invert(&t.apply(&f)), f);
    }
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut p = ParamSet::new();
    p.insert("x", Tensor::from_elem(ndarray::IxDyn(&[2]), 1.0));
    let mut g = ParamSet::new();
    g.insert("x", ndarray::arr1(&[2.0, -0.5]).into_dyn());
    let mut opt = Adam::new(AdamConfig::default(), &p);
    opt.step(&mut p, &g, 0.1);
    let x = p.get("x").unwrap();
    // m_hat / sqrt(v_hat) = g / |g| on the first step
    assert!((x[0] - (1.0 - 0.1 * 2.0 / (2.0 + 1e-8))).abs() < 1e-12);
    assert!((x[1] - (1.0 + 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-12);
    assert_eq!(opt.steps(), 1);
}

#[test]
fn grad_clip_bounds_the_norm() {
    let mut g = ParamSet::new();
    g.insert("a", ndarray::arr1(&[3.0, 4.0]).into_dyn());
    assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
    let a = g.get("a").unwrap();
    assert!((a[0] - 0.6).abs() < 1e-12 && (a[1] - 0.8).abs() < 1e-12);
}

fn tiny_cfg(d: usize) -> ModelConfig {
    ModelConfig {
        stage_channels: vec![2, 4],
        d,
        kv_grid: 2,
        injection_sites: vec![0, 1],
        ..ModelConfig::default()
    }
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    let v: Array1<f64> = Array1::from_shape_simple_fn(d, || rng.random_range(-1.0..1.0));
    let n = v.dot(&v).sqrt();
    v / n
}

fn toy_data(seed: u64, d: usize) -> TrainData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clips = (0..3)
        .map(|i| {
            let gt: Vec<Frame> = (0..5).map(|_| rand_frame(&mut rng, 8, 8)).collect();
            let lq = gt
                .iter()
                .map(|f| f.mapv(|v| (v + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0)))
                .collect();
            let targets = (0..5).map(|_| unit(&mut rng, d)).collect();
            TrainClip {
                video_id: format!("c{i}"),
                lq,
                gt,
                targets,
            }
        })
        .collect();
    TrainData { clips }
}

fn quick_cfg(iters: u64) -> TrainConfig {
    TrainConfig {
        total_iters: iters,
        crop_size: 4,
        window: 3,
        lr0: 1e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_iterations_return_the_initialization() {
    let mut tr = Trainer::new(tiny_cfg(3), quick_cfg(0), toy_data(1, 3)).unwrap();
    let init = Restorer::init(tiny_cfg(3), derive_seed(0, &[STREAM_INIT])).unwrap();
    let out = run(&mut tr, None).unwrap();
    assert!(out.curve.is_empty());
    assert_eq!(out.checkpoint.params, init.params.round_to_f32());
    assert_eq!(out.checkpoint.meta.step, 0);
}

#[test]
fn same_seed_same_parameters() {
    let a = run(&mut Trainer::new(tiny_cfg(3), quick_cfg(6), toy_data(1, 3)).unwrap(), None).unwrap();
    let b = run(&mut Trainer::new(tiny_cfg(3), quick_cfg(6), toy_data(1, 3)).unwrap(), None).unwrap();
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.curve, b.curve);
    let mut other = quick_cfg(6);
    other.seed = 1;
    let c = run(&mut Trainer::new(tiny_cfg(3), other, toy_data(1, 3)).unwrap(), None).unwrap();
    assert_ne!(a.checkpoint.params, c.checkpoint.params);
}

#[test]
fn zero_prompt_weight_ignores_targets() {
    let mut cfg = quick_cfg(5);
    cfg.loss.lambda2 = 0.0;
    let data = toy_data(2, 3);
    let mut scrambled = data.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for c in &mut scrambled.clips {
        for t in &mut c.targets {
            *t = unit(&mut rng, 3) * 5.0;
        }
    }
    let a = run(&mut Trainer::new(tiny_cfg(3), cfg.clone(), data).unwrap(), None).unwrap();
    let b = run(&mut Trainer::new(tiny_cfg(3), cfg, scrambled).unwrap(), None).unwrap();
    assert_eq!(a.checkpoint.params, b.checkpoint.params);
    assert_ne!(a.curve[0].prompt_loss, b.curve[0].prompt_loss);
}

#[test]
fn batches_apply_the_logged_transform_to_both_sides() {
    let tr = Trainer::new(tiny_cfg(3), quick_cfg(1), toy_data(3, 3)).unwrap();
    let mut seen = std::collections::HashSet::new();
    for step in 0..20 {
        let b = tr.sample(step);
        for (bi, smp) in b.samples.iter().enumerate() {
            seen.insert(smp.transform);
            let c = &tr.data.clips[smp.clip];
            for t in 0..tr.window() {
                let crop = |f: &Frame| f.slice(s![.., smp.y0..smp.y0 + 4, smp.x0..smp.x0 + 4]).to_owned();
                let lq = smp.transform.apply(&crop(&c.lq[smp.start + t]));
                let gt = smp.transform.apply(&crop(&c.gt[smp.start + t]));
                assert_eq!(b.lq[t].index_axis(Axis(0), bi), lq.into_dyn());
                assert_eq!(b.gt[t].index_axis(Axis(0), bi), gt.into_dyn());
                assert_eq!(
                    b.targets[t].index_axis(Axis(0), bi),
                    c.targets[smp.start + t].view().into_dyn()
                );
            }
        }
    }
    assert!(seen.len() > 4);
}

#[test]
fn training_objective_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        attention_heads: 2,
        ..tiny_cfg(3)
    };
    let mut tcfg = quick_cfg(1);
    tcfg.window = 2;
    let mut tr = Trainer::new(cfg, tcfg, toy_data(4, 3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (_, t) in tr.model.params.iter_mut() {
        t.mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
    }
    let batch = tr.sample(0);
    let params = tr.model.params.clone();
    let (_, grads) = tr.batch_loss(&params, &batch, true).unwrap();
    let grads = grads.unwrap();
    let eps = 1e-5;
    for (name, t) in params.iter() {
        for e in 0..t.len() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().as_slice_mut().unwrap()[e] += eps;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().as_slice_mut().unwrap()[e] -= eps;
            let fp = tr.batch_loss(&plus, &batch, false).unwrap().0 .0;
            let fm = tr.batch_loss(&minus, &batch, false).unwrap().0 .0;
            let num = (fp - fm) / (2.0 * eps);
            let ana = grads.get(name).unwrap().as_slice().unwrap()[e];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
            assert!(rel < 1e-4, "{name}[{e}]: analytic {ana} numeric {num}");
        }
    }
}

#[test]
fn outputs_are_written() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = quick_cfg(7);
    cfg.checkpoint_every = 3;
    let out = run(&mut Trainer::new(tiny_cfg(3), cfg, toy_data(5, 3)).unwrap(), Some(tmp.path())).unwrap();
    let csv = std::fs::read_to_string(tmp.path().join(LOSS_CSV)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,lr,restoration_loss,prompt_loss,total");
    assert_eq!(lines.len(), 8);
    assert!(out.curve.iter().all(|r| r.total.is_finite() && r.prompt_loss.is_finite()));
    let names: Vec<String> = out
        .checkpoint_paths
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["step_000003.ckpt", "step_000006.ckpt", FINAL_CHECKPOINT]);
    let last = Checkpoint::load(&tmp.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(last, out.checkpoint);
    assert_eq!(last.meta.step, 7);
    let snap: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join(CONFIG_SNAPSHOT)).unwrap()).unwrap();
    assert_eq!(snap["train"]["total_iters"], 7);
}

#[test]
fn non_finite_losses_abort_with_the_step() {
    let mut tr = Trainer::new(tiny_cfg(3), quick_cfg(5), toy_data(6, 3)).unwrap();
    tr.train_step().unwrap();
    tr.model.params.get_mut("tail.b").unwrap()[0] = f64::NAN;
    match tr.train_step() {
        Err(TrainError::NonFinite { step, .. }) => assert_eq!(step, 1),
        other => panic!("expected a non-finite abort, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn mismatched_dimensions_are_rejected() {
    assert!(matches!(
        Trainer::new(tiny_cfg(4), quick_cfg(1), toy_data(1, 3)),
        Err(TrainError::Shape(_))
    ));
    let mut bad = quick_cfg(1);
    bad.lr_min = 1.0;
    assert!(Trainer::new(tiny_cfg(3), bad, toy_data(1, 3)).is_err());
}

#[test]
fn store_miss_aborts_loading() {
    use crate::degrade::{generate_sources, synthesize_dataset, Protocol, ProtocolConfig, SourceConfig};
    use crate::grounding::{build_embedding_store, frame_refs, BuildOptions, MockEncoder, MockMllm};
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    generate_sources(
        &src,
        &SourceConfig {
            clips: 2,
            frames: 3,
            height: 8,
            width: 8,
        },
        0,
    )
    .unwrap();
    let ds_dir = tmp.path().join("ds");
    synthesize_dataset(&ProtocolConfig::new(Protocol::ThreeDDenoise), &src, &ds_dir, 0, 1).unwrap();
    let ds = Dataset::open(&ds_dir).unwrap();
    let frames = frame_refs(&ds);
    let (store, _) = build_embedding_store(
        &frames[..frames.len() - 1],
        &MockMllm::from_dataset(&ds),
        &MockEncoder::new(3, 0),
        &["noise".to_string()],
        &BuildOptions::default(),
    )
    .unwrap();
    assert!(matches!(
        TrainData::load(&ds, &store),
        Err(TrainError::Store(GroundingError::Missing { .. }))
    ));
    let (full, _) = build_embedding_store(
        &frames,
        &MockMllm::from_dataset(&ds),
        &MockEncoder::new(3, 0),
        &["noise".to_string()],
        &BuildOptions::default(),
    )
    .unwrap();
    let data = TrainData::load(&ds, &full).unwrap();
    assert_eq!(data.clips.len(), 2);
    assert_eq!(data.d(), 3);
}
