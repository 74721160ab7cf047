mod common;

use common::tiny_config;
use factorizer::checkpoint::Checkpoint;
use factorizer::data::*;
use factorizer::infer::*;
use factorizer::loss::foreground_probabilities;
use factorizer::network::{Activation, Factorizer};
use factorizer::optim::{AdamW, Schedule};
use factorizer::params::{Ctx, ParamStore};
use factorizer::train::*;
use factorizer::Error;
use factorizer_tensor::{Graph, Tensor};

fn tiny_data(samples: usize) -> Vec<VolumeSample> {
    let mut spec = SyntheticTaskSpec::new([16; 3], 2, 2, samples, 3);
    spec.blobs = (1, 2);
    spec.radius = (1.5, 3.0);
    generate(&spec).unwrap().iter().map(|s| preprocess(s).unwrap()).collect()
}

fn tiny_train(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 1,
        base_lr: 1e-3,
        warmup_steps: 1,
        patch_size: [8; 3],
        augment: AugmentPolicy::default(),
        ..TrainConfig::default()
    }
}

fn temp_dir(tag: &str) -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("factorizer-engine-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

#[test]
fn adamw_matches_hand_rolled_update() {
    let mut store = ParamStore::<f64>::new();
    store.add("w", Tensor::new(vec![2], vec![0.5, -1.5]).unwrap(), true);
    store.add("b", Tensor::new(vec![1], vec![0.25]).unwrap(), false);
    let (lr, wd) = (0.01, 0.1);
    let mut opt = AdamW::new(&store, wd);
    let grads_at = |t: usize| [vec![0.3 - 0.1 * t as f64, 2.0 / (t + 1) as f64], vec![-0.7 + 0.05 * t as f64]];

    let mut p = [0.5, -1.5, 0.25];
    let decays = [true, true, false];
    let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
    for t in 0..6 {
        let g = grads_at(t);
        let flat = [g[0][0], g[0][1], g[1][0]];
        let tensors = vec![Tensor::new(vec![2], g[0].clone()).unwrap(), Tensor::new(vec![1], g[1].clone()).unwrap()];
        opt.step(&mut store, &tensors, lr).unwrap();
        let step = (t + 1) as i32;
        for k in 0..3 {
            if decays[k] {
                p[k] -= lr * wd * p[k];
            }
            m[k] = 0.9 * m[k] + 0.1 * flat[k];
            v[k] = 0.999 * v[k] + 0.001 * flat[k] * flat[k];
            let mhat = m[k] / (1.0 - 0.9f64.powi(step));
            let vhat = v[k] / (1.0 - 0.999f64.powi(step));
            p[k] -= lr * mhat / (vhat.sqrt() + 1e-8);
        }
        let got = [store.entries()[0].value.data()[0], store.entries()[0].value.data()[1], store.entries()[1].value.data()[0]];
        for k in 0..3 {
            assert!((got[k] - p[k]).abs() < 1e-12, "t {t} k {k}: {} vs {}", got[k], p[k]);
        }
    }
    assert_eq!(opt.t, 6);
}

#[test]
fn schedule_endpoints() {
    let s = Schedule { base_lr: 1e-4, warmup: 100, total: 1100 };
    assert_eq!(s.lr(0), 0.0);
    assert!((s.lr(50) - 5e-5).abs() < 1e-18);
    assert_eq!(s.lr(100), 1e-4);
    assert!((s.lr(600) - 5e-5).abs() < 1e-15);
    assert!(s.lr(1100).abs() < 1e-20);
    assert!(s.lr(5000).abs() < 1e-20);
    let lrs: Vec<f64> = (100..=1100).map(|t| s.lr(t)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

fn logits_of(model: &Factorizer<f32>, input: &Tensor<f32>) -> Tensor<f32> {
    let g = Graph::new();
    let ctx = Ctx::new(&g, &model.params, false);
    model.forward(&ctx, g.constant(input.clone()), false).unwrap().logits.value()
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let data = tiny_data(2);
    let mut model = Factorizer::<f32>::build(tiny_config(), 4).unwrap();
    let mut trainer = Trainer::new(&mut model, tiny_train(3)).unwrap();
    trainer.run(&data, |_, _| {}).unwrap();
    let ckpt = trainer.checkpoint();
    let bytes = ckpt.to_bytes();
    let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.hash(), ckpt.hash());
    assert_eq!(back.step, 3);
    assert_eq!(back.optimizer, Some(trainer.optimizer.clone()));

    let dir = temp_dir("ckpt");
    let path = dir.join("m.ckpt");
    ckpt.save(&path).unwrap();
    let restored = Checkpoint::<f32>::load(&path).unwrap().restore().unwrap();
    let input = Tensor::from_fn(vec![1, 2, 8, 8, 8], |i| ((i * 37 % 101) as f32) / 50.0 - 1.0).unwrap();
    assert_eq!(logits_of(&restored, &input), logits_of(&model, &input));
    assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn single_tile_equals_direct_forward() {
    let model = Factorizer::<f32>::build(tiny_config(), 5).unwrap();
    let image = tiny_data(1)[0].crop([0; 3], [8; 3]).unwrap().image;
    let pred = sliding_window_infer(&model, &image, &InferConfig::new([8; 3])).unwrap();
    let g = Graph::new();
    let ctx = Ctx::new(&g, &model.params, false);
    let x = g.constant(image.reshape(vec![1, 2, 8, 8, 8]).unwrap());
    let direct = foreground_probabilities(model.forward(&ctx, x, false).unwrap().logits, Activation::Softmax).unwrap().value();
    assert_eq!(pred.probabilities.data(), direct.data());
    assert_eq!(pred.probabilities.shape(), &[2, 8, 8, 8]);
}

#[test]
fn constant_tiles_blend_to_exactly_one() {
    let image = Tensor::<f32>::zeros(vec![1, 21, 13, 9]).unwrap();
    let mut tiles = 0;
    let pred = sliding_window_with(&image, &InferConfig::new([8; 3]), 2, Activation::Sigmoid, |_| {
        tiles += 1;
        Tensor::full(vec![2, 8, 8, 8], 1.0f32).map_err(Into::into)
    })
    .unwrap();
    assert!(pred.probabilities.data().iter().all(|&v| v == 1.0));
    let per_axis: Vec<usize> = [21, 13, 9].iter().map(|&e| tile_corners(e, 8, 0.5).len()).collect();
    assert_eq!(tiles, per_axis.iter().product::<usize>());
    assert_eq!(tile_corners(21, 8, 0.5), vec![0, 4, 8, 12, 13]);

    // smaller than the window: padded, predicted once, cropped back
    let small = Tensor::<f32>::zeros(vec![1, 5, 8, 3]).unwrap();
    let pred = sliding_window_with(&small, &InferConfig::new([8; 3]), 1, Activation::Sigmoid, |t| {
        assert_eq!(t.shape(), &[1, 8, 8, 8]);
        Tensor::full(vec![1, 8, 8, 8], 0.75f32).map_err(Into::into)
    })
    .unwrap();
    assert_eq!(pred.probabilities.shape(), &[1, 5, 8, 3]);
    assert!(pred.mask(1).data.iter().all(|&b| b));
}

#[test]
fn position_dependent_tiles_average() {
    // each tile predicts its own corner index; the blend is the mean over covering tiles
    let image = Tensor::<f32>::from_fn(vec![1, 12, 8, 8], |i| (i / 64) as f32).unwrap();
    let pred = sliding_window_with(&image, &InferConfig::new([8; 3]), 1, Activation::Sigmoid, |t| {
        let corner = t.data()[0];
        Tensor::full(vec![1, 8, 8, 8], corner / 10.0).map_err(Into::into)
    })
    .unwrap();
    // corners along axis 0: 0 and 4
    for i in 0..12 {
        let want: f32 = match i {
            0..=3 => 0.0,
            4..=7 => (0.0 + 0.4) / 2.0,
            _ => 0.4,
        };
        assert!((pred.probabilities.get(&[0, i, 3, 3]).unwrap() - want).abs() < 1e-7, "row {i}");
    }
}

#[test]
fn training_is_deterministic() {
    let data = tiny_data(2);
    let run = |tag: &str| {
        let dir = temp_dir(tag);
        let mut model = Factorizer::<f32>::build(tiny_config(), 9).unwrap();
        let log = train(&mut model, &data, &TrainConfig { checkpoint_every: 2, ..tiny_train(4) }, Some(&dir)).unwrap();
        let ckpt = Checkpoint::<f32>::load(&dir.join("final.ckpt")).unwrap();
        assert!(dir.join("step_000002.ckpt").exists());
        let tsv = std::fs::read_to_string(dir.join("train_log.tsv")).unwrap();
        std::fs::remove_dir_all(&dir).unwrap();
        (log, ckpt.hash(), tsv)
    };
    let (a, b) = (run("det-a"), run("det-b"));
    assert_eq!(a, b);
    assert_eq!(a.0.rows.len(), 4);
    assert!(a.0.rows.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn nan_loss_aborts_and_keeps_last_good() {
    let mut data = tiny_data(1);
    let model0 = Factorizer::<f32>::build(tiny_config(), 2).unwrap();
    let mut model = Factorizer::<f32>::build(tiny_config(), 2).unwrap();
    data[0].image = data[0].image.map(|_| f32::NAN);
    let dir = temp_dir("nan");
    let err = train(&mut model, &data, &tiny_train(3), Some(&dir)).unwrap_err();
    assert!(matches!(err, Error::Diverged { step: 0, .. }), "{err}");
    let kept = Checkpoint::<f32>::load(&dir.join("last_good.ckpt")).unwrap();
    assert_eq!(kept.params, Checkpoint::capture(&model0, 0, None).params);
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn trainer_rejects_bad_configs() {
    let mut model = Factorizer::<f32>::build(tiny_config(), 0).unwrap();
    assert!(Trainer::new(&mut model, TrainConfig { patch_size: [16; 3], ..tiny_train(3) }).is_err());
    assert!(Trainer::new(&mut model, TrainConfig { warmup_steps: 3, ..tiny_train(3) }).is_err());
    let mut t = Trainer::new(&mut model, tiny_train(3)).unwrap();
    assert!(matches!(t.run(&[], |_, _| {}), Err(Error::Usage(_))));
}
