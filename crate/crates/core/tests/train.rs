use patchfm::datagen::{sine_generate, DataMixture, SineConfig};
use patchfm::model::*;
use patchfm::preprocess::{build_sample, pad_or_truncate};
use patchfm::series::TimeSeries;
use patchfm::tensor::Tensor;
use patchfm::train::*;
use patchfm::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        context_length: 64,
        patch_size: 16,
        n_layer: 1,
        d_model: 16,
        head_dim: 8,
        ffn_mult: 2,
        levels: quantile_preset(9).unwrap(),
    }
}

fn tiny_train(steps: usize) -> TrainConfig {
    TrainConfig {
        total_steps: steps,
        batch_size: 4,
        n_cpm: 2,
        seed: 17,
        peak_lr: 1e-3,
        ..TrainConfig::default()
    }
}

fn sines(n: usize) -> DataMixture {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = (0..n)
        .map(|i| sine_generate(&mut rng, format!("s{i}"), 100, &SineConfig::default()).unwrap())
        .collect();
    DataMixture::uniform(vec![("sine".into(), s)]).unwrap()
}

fn trained(steps: usize) -> Trainer {
    let mut t = Trainer::new(tiny_model(), tiny_train(steps)).unwrap();
    let src = sines(16);
    while !t.is_done() {
        t.step(&src).unwrap();
    }
    t
}

fn probe() -> patchfm::preprocess::WindowedSample {
    let v: Vec<Option<f64>> = (0..80).map(|i| Some((i as f64 * 0.3).sin() * 4.0 + 1.0)).collect();
    let w = pad_or_truncate(&TimeSeries::new("p", "H", "2020-01-01", v), 64).unwrap();
    let mut pred = vec![false; 64];
    pred[48..].fill(true);
    build_sample(w, pred).unwrap()
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let t = trained(3);
    let ck = t.checkpoint();
    let bytes = encode_checkpoint(&ck, Dtype::F64);
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back, ck);
    let s = probe();
    let a = forward(&s, &ck.weights, &ck.model).unwrap();
    let b = forward(&s, &back.weights, &back.model).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn f32_payload_rounds_weights() {
    let ck = trained(1).checkpoint();
    let back = decode_checkpoint(&encode_checkpoint(&ck, Dtype::F32)).unwrap();
    let orig = ck.weights.tensors();
    for ((name, a), (_, b)) in orig.iter().zip(back.weights.tensors()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*y, *x as f32 as f64, "{name}");
        }
    }
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ck = trained(2).checkpoint();
    let path = dir.path().join("a.ptfm");
    save_checkpoint(&path, &ck, Dtype::F64).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), ck);
}

#[test]
fn corrupted_or_truncated_files_are_format_errors() {
    let ck = trained(1).checkpoint();
    let bytes = encode_checkpoint(&ck, Dtype::F64);
    // Every truncation fails cleanly.
    for len in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
        match decode_checkpoint(&bytes[..len]) {
            Err(Error::Format { .. }) => {}
            other => panic!("truncated to {len}: {other:?}"),
        }
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    // Any flipped byte in the prefix or header either fails as a format
    // error or (rarely, inside JSON whitespace-insensitive spots) still parses.
    for i in 0..16 + header_len {
        let mut b = bytes.clone();
        b[i] ^= 0x5a;
        match decode_checkpoint(&b) {
            Ok(_) | Err(Error::Format { .. }) => {}
            Err(e) => panic!("byte {i}: unexpected {e}"),
        }
    }
    let mut b = bytes.clone();
    b[0] = b'X';
    assert!(matches!(decode_checkpoint(&b), Err(Error::Format { offset: 0, .. })));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let mut b = bytes.clone();
        let i = rng.gen_range(0..b.len());
        b[i] = rng.gen();
        let _ = decode_checkpoint(&b);
    }
}

#[test]
fn mismatched_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let ck = trained(1).checkpoint();
    let path = dir.path().join("c.ptfm");
    save_checkpoint(&path, &ck, Dtype::F64).unwrap();
    let mut want = tiny_model();
    want.d_model = 32;
    match load_checkpoint_for(&path, &want) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "model.d"),
        other => panic!("{other:?}"),
    }
    assert!(load_checkpoint_for(&path, &tiny_model()).is_ok());
}

#[test]
fn identical_seeds_identical_runs() {
    let a = trained(6);
    let b = trained(6);
    assert_eq!(a.weights, b.weights);
    let src = sines(16);
    let mut x = Trainer::new(tiny_model(), tiny_train(4)).unwrap();
    let mut y = Trainer::new(tiny_model(), tiny_train(4)).unwrap();
    for _ in 0..4 {
        assert_eq!(x.step(&src).unwrap(), y.step(&src).unwrap());
    }
}

#[test]
fn resume_replays_exactly() {
    let src = sines(16);
    let mut straight = Trainer::new(tiny_model(), tiny_train(8)).unwrap();
    let mut log_a = Vec::new();
    let hist_a = train_loop(&mut straight, &src, None, &mut log_a).unwrap();

    let mut first = Trainer::new(tiny_model(), tiny_train(8)).unwrap();
    let mut hist_b = Vec::new();
    for _ in 0..3 {
        hist_b.push(first.step(&src).unwrap());
    }
    let bytes = encode_checkpoint(&first.checkpoint(), Dtype::F64);
    let mut resumed = Trainer::from_checkpoint(decode_checkpoint(&bytes).unwrap()).unwrap();
    assert_eq!(resumed.step, 3);
    let mut log_b = Vec::new();
    hist_b.extend(train_loop(&mut resumed, &src, None, &mut log_b).unwrap());
    assert_eq!(hist_a, hist_b);
    assert_eq!(straight.weights, resumed.weights);
    assert_eq!(String::from_utf8(log_a).unwrap().lines().count(), 8);
}

#[test]
fn train_loop_writes_checkpoints_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(tiny_model(), tiny_train(6)).unwrap();
    t.train.checkpoint_every = Some(2);
    let mut log = Vec::new();
    train_loop(&mut t, &sines(8), Some(dir.path()), &mut log).unwrap();
    for f in ["step_000002.ptfm", "step_000004.ptfm", "final.ptfm"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let text = String::from_utf8(log).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["step", "loss", "lr", "grad_norm"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    assert_eq!(load_checkpoint(dir.path().join("final.ptfm")).unwrap().step, 6);
}

#[test]
fn mask_ratio_sweep_completes() {
    let src = sines(8);
    for ratio in [0.2, 0.4, 0.6, 0.8] {
        let mut cfg = tiny_train(5);
        cfg.mask_ratio = ratio;
        cfg.n_cpm = 1;
        let model = ModelConfig {
            context_length: 128,
            ..tiny_model()
        };
        let mut t = Trainer::new(model, cfg).unwrap();
        let hist = train_loop(&mut t, &src, None, &mut std::io::sink()).unwrap();
        assert_eq!(hist.len(), 5);
        assert!(hist.iter().all(|m| m.loss.is_finite()), "ratio {ratio}");
    }
}

#[test]
fn loss_decreases_on_sines() {
    let src = sines(32);
    let mut t = Trainer::new(tiny_model(), TrainConfig { batch_size: 8, ..tiny_train(300) }).unwrap();
    let hist = train_loop(&mut t, &src, None, &mut std::io::sink()).unwrap();
    let early: f64 = hist[..30].iter().map(|m| m.loss).sum::<f64>() / 30.0;
    let late: f64 = hist[270..].iter().map(|m| m.loss).sum::<f64>() / 30.0;
    assert!(late < 0.8 * early, "early {early}, late {late}");
}

#[test]
fn scalar_quantile_regression_converges() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let xs: Vec<f64> = (0..200).map(|_| rng.gen_range(-3.0..5.0)).collect();
    let tau = 0.8;
    let mut sorted = xs.clone();
    sorted.sort_by(f64::total_cmp);
    let k = (tau * xs.len() as f64).ceil() as usize;
    let (lo, hi) = (sorted[k - 1], sorted[k]);

    let cfg = TrainConfig {
        total_steps: 5000,
        peak_lr: 0.05,
        min_lr: 1e-5,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut q = Tensor::from_vec(vec![0.0]);
    let mut state = OptimizerState::new(&[&[1]]);
    for step in 1..=cfg.total_steps {
        let qv = q.data()[0];
        // d/dq of mean ρ_τ(x − q)
        let g = xs.iter().map(|&x| if x < qv { 1.0 - tau } else { -tau }).sum::<f64>() / xs.len() as f64;
        let mut params = [&mut q];
        optimizer_step(&mut params, &[Tensor::from_vec(vec![g])], &[false], &mut state, lr_at(step, &cfg), &cfg).unwrap();
    }
    let qv = q.data()[0];
    assert!(qv > lo - 1e-2 && qv < hi + 1e-2, "q = {qv}, minimizers [{lo}, {hi}]");
}

#[test]
fn step_rng_streams_differ_and_repeat() {
    let a: u64 = step_rng(1, 0).gen();
    let b: u64 = step_rng(1, 1).gen();
    assert_ne!(a, b);
    assert_eq!(a, step_rng(1, 0).gen::<u64>());
}
