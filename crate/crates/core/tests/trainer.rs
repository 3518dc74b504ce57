mod common;

use regnet::arch::{preset, Network};
use regnet::params::ParamStore;
use regnet::pipeline::{synthetic, BatchPlan, Normalization};
use regnet::tape::Mode;
use regnet::trainer::checkpoint::{Checkpoint, TensorKind};
use regnet::trainer::features::manifest_path;
use regnet::trainer::{
    evaluate, export_features, probe_blocks, read_features, sgd_step, LrSchedule, MetricsLog,
    MetricsRow, TrainConfig, Trainer,
};
use regnet::{Error, Shape, Tensor};

fn cfg(lr: f64, batch: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        schedule: LrSchedule::constant(lr),
        momentum: 0.9,
        weight_decay: 1e-4,
        epochs: 2,
        batch_size: batch,
        seed,
        eval_every: 1,
        augment: true,
    }
}

fn trainer(arch: &str, c: TrainConfig) -> Trainer<f32> {
    let net = Network::<f32>::build(&preset(arch).unwrap(), c.seed).unwrap();
    Trainer::new(net, c, Normalization::IDENTITY).unwrap()
}

#[test]
fn momentum_sgd_on_quadratic_bowl_matches_recurrence() {
    let (lr, m) = (0.1, 0.9);
    let w0 = [1.5, -0.25, 3.0];
    let mut store = ParamStore::<f64>::new();
    let id = store
        .add_param(
            "w",
            Tensor::from_vec(Shape::vector(3), w0.to_vec()).unwrap(),
        )
        .unwrap();
    // w_{k+1} = (1 + m - lr) w_k - m w_{k-1}, w_1 = (1 - lr) w_0.
    let mut prev = w0;
    let mut cur = w0.map(|w| (1.0 - lr) * w);
    for k in 0..60 {
        let g = store.param(id).value.clone();
        store.param_mut(id).grad = g;
        sgd_step(&mut store, lr, m, 0.0).unwrap();
        let got = store.param(id).value.data().to_vec();
        if k > 0 {
            let next = [0, 1, 2].map(|i| (1.0 + m - lr) * cur[i] - m * prev[i]);
            prev = cur;
            cur = next;
        }
        for i in 0..3 {
            assert!(
                (got[i] - cur[i]).abs() < 1e-10,
                "step {k}: {} vs {}",
                got[i],
                cur[i]
            );
        }
    }
}

#[test]
fn loss_on_fixed_batch_decreases_for_five_steps() {
    let data = synthetic(10, 16, 1);
    let mut t = trainer("regnet-gru-n3", cfg(1e-3, 16, 3));
    let batch = BatchPlan::eval(16, Normalization::measure(&data))
        .batch::<f32>(&data, 0, 0)
        .unwrap();
    let losses: Vec<f64> = (0..6)
        .map(|_| t.train_batch(&batch).unwrap().loss)
        .collect();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn ten_step_runs_are_identical() {
    let data = synthetic(10, 40, 2);
    let run = || {
        let mut t = trainer("regnet-lstm-n1", cfg(0.05, 8, 11));
        (0..10)
            .map(|_| t.step(&data).unwrap().loss.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_bytes_round_trip_and_resume_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let data = synthetic(10, 24, 3);
    let mut a = trainer("regnet-gru-n1", cfg(0.05, 8, 5));
    for _ in 0..4 {
        a.step(&data).unwrap();
    }
    let ck = Checkpoint::capture(&a);
    ck.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(manifest_path(&path)).unwrap()).unwrap();
    assert_eq!(sidecar["tensors"].as_array().unwrap().len(), loaded.manifest.tensors.len());
    assert_eq!(loaded.to_bytes().unwrap(), bytes);
    assert_eq!(&bytes[..8], b"REGNETCK");
    let kinds: Vec<TensorKind> = loaded.manifest.tensors.iter().map(|t| t.kind).collect();
    let np = a.net.store.params().len();
    assert!(kinds[..np].iter().all(|&k| k == TensorKind::Param));
    assert!(kinds[np..2 * np].iter().all(|&k| k == TensorKind::Momentum));

    let mut b: Trainer<f32> = loaded.into_trainer().unwrap();
    assert_eq!(
        (b.epoch, b.batch, b.global_step),
        (a.epoch, a.batch, a.global_step)
    );
    for _ in 0..3 {
        let la = a.step(&data).unwrap().loss;
        let lb = b.step(&data).unwrap().loss;
        assert_eq!(la.to_bits(), lb.to_bits());
    }
    for (p, q) in a.net.store.params().iter().zip(b.net.store.params()) {
        assert_eq!(p.value, q.value, "{}", p.name);
    }
}

#[test]
fn checkpoint_rejects_other_architecture_and_corruption() {
    let a = trainer("regnet-gru-n1", cfg(0.1, 8, 0));
    let ck = Checkpoint::capture(&a);
    let mut other = trainer("resnet-n1", cfg(0.1, 8, 0));
    let before = other.net.store.clone();
    assert!(matches!(
        ck.restore(&mut other),
        Err(Error::InvalidArgument(_))
    ));
    assert_eq!(other.net.store.params()[0].value, before.params()[0].value);
    let bytes = ck.to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        Checkpoint::from_bytes(&bad),
        Err(Error::Format(_))
    ));
}

#[test]
fn fit_logs_each_epoch_and_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("run.ck");
    let log_path = dir.path().join("metrics.csv");
    let train = synthetic(10, 16, 4);
    let test = synthetic(10, 10, 5);
    let mut t = trainer("resnet-n1", cfg(0.05, 8, 2));
    let mut log = MetricsLog::open(&log_path).unwrap();
    t.fit(&train, Some(&test), &mut log, Some(&ck)).unwrap();
    assert_eq!(log.rows.len(), 2);
    assert!(log.rows.iter().all(|r| r.test_err.is_some()));
    let reopened = MetricsLog::open(&log_path).unwrap();
    assert_eq!(reopened.rows.len(), 2);
    let good = std::fs::read(&ck).unwrap();

    t.cfg.epochs = 4;
    let id = t.net.store.find_param("head.weight").unwrap();
    t.net.store.param_mut(id).value.data_mut()[0] = f32::NAN;
    let err = t.fit(&train, Some(&test), &mut log, Some(&ck)).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert_eq!(std::fs::read(&ck).unwrap(), good);
}

#[test]
fn metrics_log_is_monotone() {
    let mut log = MetricsLog::in_memory();
    let row = |epoch| MetricsRow {
        epoch,
        lr: 0.1,
        train_loss: 1.0,
        train_acc: 0.5,
        test_err: None,
    };
    log.append(row(0)).unwrap();
    log.append(row(1)).unwrap();
    assert!(log.append(row(1)).is_err());
    assert!(log.append(row(0)).is_err());
    assert_eq!(log.rows.len(), 2);
    let text = log.to_csv();
    assert!(text.starts_with("epoch,lr,train_loss,train_acc,test_err\n"));
    assert_eq!(
        MetricsRow::from_csv(text.lines().nth(2).unwrap()).unwrap(),
        row(1)
    );
}

#[test]
fn probing_the_final_block_is_evaluation() {
    let data = synthetic(10, 30, 6);
    let mut t = trainer("regnet-gru-n2", cfg(0.05, 10, 1));
    t.run_epoch(&data).unwrap();
    let norm = Normalization::measure(&data);
    let ev = evaluate(&mut t.net, &data, norm, 7).unwrap();
    let last = t.net.model.num_blocks();
    let probes = probe_blocks(&mut t.net, &data, norm, &[last - 1, last], 7).unwrap();
    assert_eq!(probes[1].correct, ev.correct);
    assert_eq!(probes[1].total, ev.total);
    let err = probe_blocks(&mut t.net, &data, norm, &[1], 7).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
    assert!(probe_blocks(&mut t.net, &data, norm, &[last + 1], 7).is_err());
}

#[test]
fn feature_export_round_trips_with_shape_laws() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("feat.bin");
    let mut net = Network::<f32>::build(&preset("regnet-lstm-n2").unwrap(), 3).unwrap();
    let x = Tensor::<f32>::randn([2, 3, 32, 32], &mut common::rng(1));
    let entries = export_features(&mut net, &x, &[1, 3, 6], &path).unwrap();
    assert!(manifest_path(&path).exists());
    let back = read_features(&path).unwrap();
    assert_eq!(back.len(), entries.len());
    let names: Vec<&str> = back.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        [
            "block1.input",
            "block1.hidden",
            "block1.output",
            "block3.input",
            "block3.hidden",
            "block3.output",
            "block6.input",
            "block6.hidden",
            "block6.output"
        ]
    );
    let want = |name: &str| match name.split('.').next().unwrap() {
        "block1" => Shape::new(2, 16, 32, 32),
        "block3" => Shape::new(2, 32, 16, 16),
        _ => Shape::new(2, 64, 8, 8),
    };
    let direct = net
        .run(Mode::Eval, |m, t| {
            let xv = t.input(x.clone())?;
            let f = m.forward(t, xv)?;
            Ok(t.value(f.taps[2].output).clone())
        })
        .unwrap();
    for (name, tensor) in &back {
        assert_eq!(tensor.shape(), want(name), "{name}");
    }
    assert_eq!(back[5].1, direct);
}

#[test]
fn zero_input_gives_zero_hidden_state() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("zero.bin");
    for arch in ["regnet-gru-n1", "regnet-lstm-n1", "regnet-rnn-n1"] {
        let mut net = Network::<f32>::build(&preset(arch).unwrap(), 2).unwrap();
        for p in net.store.params_mut() {
            if p.name.ends_with(".bias") {
                p.value.fill(0.0);
            }
        }
        let x = Tensor::<f32>::zeros([2, 3, 32, 32]);
        export_features(&mut net, &x, &[1, 2, 3], &path).unwrap();
        for (name, t) in read_features(&path).unwrap() {
            if name.ends_with(".hidden") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{arch} {name}");
            }
        }
    }
}

#[test]
fn untrained_probes_sit_near_chance_on_label_noise() {
    // Labels independent of pixels: every classifier is at chance.
    let mut data = synthetic(10, 1000, 7);
    for (i, e) in data.examples.iter_mut().enumerate() {
        e.label = (i * 7 + i / 10) % 10;
    }
    let mut net = Network::<f32>::build(&preset("regnet-gru-n1").unwrap(), 9).unwrap();
    let norm = Normalization::measure(&data);
    let probes = probe_blocks(&mut net, &data, norm, &[3], 250).unwrap();
    assert!((probes[0].accuracy() - 0.1).abs() <= 0.02, "{probes:?}");
}
