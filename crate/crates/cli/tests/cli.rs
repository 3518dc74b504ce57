use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn regnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regnet"))
        .args(args)
        .current_dir(cwd)
        .env_remove("REGNET_DATA_DIR")
        .output()
        .expect("spawn regnet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn total_row(csv: &str) -> Vec<i64> {
    let line = csv.lines().last().unwrap();
    let mut f = line.split(',');
    assert_eq!(f.next(), Some("total"));
    f.map(|v| v.parse().unwrap()).collect()
}

#[test]
fn count_resnet20_prints_about_a_quarter_million_params() {
    let dir = tempfile::tempdir().unwrap();
    let o = regnet(
        &["count", "--arch", "resnet", "--n", "3", "--classes", "10"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = stdout(&o);
    assert!(csv.starts_with("layer,params,macs,flops\n"));
    let t = total_row(&csv);
    assert_eq!(t[0], 272474);
    assert_eq!(t[2], 2 * t[1]);
    assert!(stderr(&o).contains("0.272M"));
}

#[test]
fn count_by_stage_keeps_the_total() {
    let dir = tempfile::tempdir().unwrap();
    let full = regnet(&["count", "--arch", "regnet-lstm-n3"], dir.path());
    let staged = regnet(
        &["count", "--arch", "regnet-lstm-n3", "--by-stage"],
        dir.path(),
    );
    assert_eq!(total_row(&stdout(&full)), total_row(&stdout(&staged)));
    assert_eq!(stdout(&staged).lines().count(), 1 + 5 + 1);
}

#[test]
fn diff_prints_positive_delta_and_reference_note() {
    let dir = tempfile::tempdir().unwrap();
    let o = regnet(
        &["diff", "--a", "regnet-gru-n3", "--b", "resnet-n3"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let t = total_row(&stdout(&o));
    assert!(t[0] > 0);
    let err = stderr(&o);
    assert!(err.contains("delta: +37856 params"), "{err}");
    assert!(err.contains("+44.0K"), "{err}");
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("net.cfg"),
        "# ResNet-32\nfamily = resnet\nn = 5\nclasses = 100\n",
    )
    .unwrap();
    let base = regnet(&["count", "--config", "net.cfg"], dir.path());
    let over = regnet(
        &[
            "count",
            "--config",
            "net.cfg",
            "--n",
            "3",
            "--classes",
            "10",
        ],
        dir.path(),
    );
    assert!(base.status.success() && over.status.success());
    assert_eq!(total_row(&stdout(&over))[0], 272474);
    assert!(total_row(&stdout(&base))[0] > 272474);
}

#[test]
fn user_errors_exit_one_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("bad.cfg"), "family = resnet\nn = three\n").unwrap();
    let cases: [&[&str]; 6] = [
        &["count", "--arch", "resnet-n3", "--no-such-flag"],
        &["count", "--arch", "nonsense"],
        &["count"],
        &["count", "--config", "bad.cfg"],
        &["count", "--config", "missing.cfg"],
        &["train", "--arch", "resnet-n3", "--data-dir", "no-data-here"],
    ];
    for args in cases {
        let o = regnet(args, p);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
        if args[0] == "train" {
            let e = stderr(&o);
            assert_eq!(e.trim().lines().count(), 1, "{e}");
            assert!(e.contains("data directory not found"), "{e}");
        }
    }
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["--help"][..], &["train", "--help"], &["--version"]] {
        assert_eq!(regnet(args, dir.path()).status.code(), Some(0));
    }
}

const TRAIN: [&str; 10] = [
    "train",
    "--arch",
    "regnet-gru-n1",
    "--synthetic",
    "48",
    "--epochs",
    "2",
    "--batch-size",
    "16",
    "--seed",
];

fn train_into(dir: &Path, out: &str) -> Output {
    let mut args = TRAIN.to_vec();
    args.extend(["7", "--out", out]);
    regnet(&args, dir)
}

#[test]
fn synthetic_training_is_reproducible_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let a = train_into(p, "a");
    assert!(a.status.success(), "{}", stderr(&a));
    let b = train_into(p, "b");
    assert!(b.status.success(), "{}", stderr(&b));
    for f in [
        "metrics.csv",
        "checkpoint.ck",
        "checkpoint.ck.json",
        "arch.cfg",
    ] {
        assert_eq!(
            fs::read(p.join("a").join(f)).unwrap(),
            fs::read(p.join("b").join(f)).unwrap(),
            "{f} differs"
        );
    }
    assert_eq!(stdout(&a), stdout(&b));
    let metrics = fs::read_to_string(p.join("a/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    // eval on the checkpoint reproduces the train command's final line.
    let e = regnet(
        &[
            "eval",
            "--checkpoint",
            "a/checkpoint.ck",
            "--synthetic",
            "48",
        ],
        p,
    );
    assert!(e.status.success(), "{}", stderr(&e));
    assert_eq!(stdout(&e), stdout(&a));

    // Probing the last block with the head equals evaluation.
    let pr = regnet(
        &[
            "probe",
            "--checkpoint",
            "a/checkpoint.ck",
            "--synthetic",
            "48",
        ],
        p,
    );
    assert!(pr.status.success(), "{}", stderr(&pr));
    let csv = stdout(&pr);
    assert_eq!(
        csv.lines().count(),
        2,
        "n = 1 has one final-stage block: {csv}"
    );
    let probe_acc: f64 = csv
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    let eval_acc: f64 = stdout(&e)
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(2)
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(probe_acc, eval_acc);

    let x = regnet(
        &[
            "export-features",
            "--checkpoint",
            "a/checkpoint.ck",
            "--synthetic",
            "48",
            "--blocks",
            "1,3",
            "--images",
            "4",
            "--out",
            "feat.bin",
        ],
        p,
    );
    assert!(x.status.success(), "{}", stderr(&x));
    let feats = regnet::trainer::read_features(&p.join("feat.bin")).unwrap();
    let names: Vec<&str> = feats.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        [
            "block1.input",
            "block1.hidden",
            "block1.output",
            "block3.input",
            "block3.hidden",
            "block3.output",
        ]
    );
    assert_eq!(feats[0].1.shape().n, 4);
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let base = [
        "train",
        "--arch",
        "resnet-n1",
        "--synthetic",
        "40",
        "--batch-size",
        "16",
        "--seed",
        "3",
    ];
    let run = |extra: &[&str]| {
        let mut a = base.to_vec();
        a.extend(extra);
        let o = regnet(&a, p);
        assert!(o.status.success(), "{}", stderr(&o));
        o
    };
    run(&["--epochs", "3", "--out", "full"]);
    run(&["--epochs", "1", "--out", "part"]);
    let mut a = base.to_vec();
    a.extend([
        "--epochs",
        "3",
        "--out",
        "part",
        "--resume",
        "part/checkpoint.ck",
    ]);
    let o = regnet(&a, p);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(p.join("full/metrics.csv")).unwrap(),
        fs::read_to_string(p.join("part/metrics.csv")).unwrap()
    );
    assert_eq!(
        fs::read(p.join("full/checkpoint.ck")).unwrap(),
        fs::read(p.join("part/checkpoint.ck")).unwrap()
    );
}

#[test]
fn eval_on_a_missing_checkpoint_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = regnet(
        &["eval", "--checkpoint", "nope.ck", "--synthetic", "8"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
}
