use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 14] = [
    "--set",
    "task.n1=4",
    "--set",
    "task.n2=4",
    "--set",
    "task.features=8",
    "--set",
    "task.classes=3",
    "--set",
    "task.train_size=48",
    "--set",
    "task.val_size=16",
    "--set",
    "train.epochs=2",
];

fn attnpool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnpool"))
        .args(args)
        .env_remove("ATTNPOOL_SEED")
        .output()
        .unwrap()
}

fn run(args: &[&str]) -> Output {
    let mut all = args.to_vec();
    all.extend_from_slice(&SMALL);
    let out = attnpool(&all);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_train_eval_heatmap_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt, eval, maps) = (
        tmp.path().join("data"),
        tmp.path().join("ckpt"),
        tmp.path().join("eval"),
        tmp.path().join("maps"),
    );
    run(&["gen", "--out", path(&data)]);
    run(&["train", "--data", path(&data), "--out", path(&ckpt)]);
    run(&[
        "eval",
        "--checkpoint",
        path(&ckpt),
        "--data",
        path(&data),
        "--out",
        path(&eval),
    ]);
    run(&[
        "heatmap",
        "--threads",
        "2",
        "--checkpoint",
        path(&ckpt),
        "--data",
        path(&data),
        "--count",
        "3",
        "--out",
        path(&maps),
    ]);

    let metrics = fs::read_to_string(eval.join("metrics.txt")).unwrap();
    assert!(metrics.starts_with("accuracy = "), "{metrics}");
    assert!(metrics.contains("localization_rate = "));
    let ranking = fs::read_to_string(eval.join("ranking.tsv")).unwrap();
    assert_eq!(ranking.lines().count(), 1 + 16);
    for i in 0..3 {
        for name in ["combined", "top_down", "bottom_up"] {
            let bytes = fs::read(maps.join(format!("{i:04}_{name}.pgm"))).unwrap();
            assert!(bytes.starts_with(b"P5\n4 4\n255\n"));
            assert_eq!(bytes.len(), 11 + 16);
        }
        let montage = fs::read(maps.join(format!("{i:04}_montage.pgm"))).unwrap();
        assert!(montage.starts_with(b"P5\n12 4\n255\n"));
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut snapshots = Vec::new();
    for (i, threads) in ["1", "2"].iter().enumerate() {
        let (data, ckpt) = (tmp.path().join(format!("d{i}")), tmp.path().join(format!("c{i}")));
        run(&["--threads", threads, "gen", "--out", path(&data)]);
        run(&[
            "--threads",
            threads,
            "train",
            "--data",
            path(&data),
            "--out",
            path(&ckpt),
        ]);
        let mut files = Vec::new();
        for dir in [&data, &ckpt] {
            let mut names: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
            names.sort();
            for p in names {
                files.push((p.file_name().unwrap().to_owned(), fs::read(&p).unwrap()));
            }
        }
        snapshots.push(files);
    }
    assert_eq!(snapshots[0], snapshots[1]);
}

#[test]
fn seed_environment_variable_changes_the_data() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&["gen", "--out", path(&a)]);
    let mut args = vec!["gen", "--out", path(&b)];
    args.extend_from_slice(&SMALL);
    let out = Command::new(env!("CARGO_BIN_EXE_attnpool"))
        .args(&args)
        .env("ATTNPOOL_SEED", "99")
        .output()
        .unwrap();
    assert!(out.status.success());
    let features = |d: &Path| fs::read(d.join("train_features.atnp")).unwrap();
    assert_ne!(features(&a), features(&b));
    assert!(fs::read_to_string(b.join("dataset.cfg")).unwrap().contains("seed = 99"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt) = (tmp.path().join("data"), tmp.path().join("ckpt"));

    assert_eq!(attnpool(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        attnpool(&["--set", "train.nope=1", "gen", "--out", path(&data)])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        attnpool(&["--set", "train.epochs=zero", "gen", "--out", path(&data)])
            .status
            .code(),
        Some(1)
    );
    let missing = tmp.path().join("missing");
    assert_eq!(
        attnpool(&["train", "--data", path(&missing), "--out", path(&ckpt)])
            .status
            .code(),
        Some(2)
    );

    run(&["gen", "--out", path(&data)]);
    run(&["train", "--data", path(&data), "--out", path(&ckpt)]);
    let manifest = ckpt.join("manifest.txt");
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, text.replace("tensor.A = 8x3", "tensor.A = 8x5")).unwrap();
    let out = tmp.path().join("eval");
    let code = attnpool(&[
        "eval",
        "--checkpoint",
        path(&ckpt),
        "--data",
        path(&data),
        "--out",
        path(&out),
    ])
    .status
    .code();
    assert_eq!(code, Some(3));
}

#[test]
fn bench_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("bench.csv");
    run(&[
        "bench",
        "--n",
        "7",
        "--f",
        "8",
        "--k",
        "2",
        "--p",
        "2",
        "--set",
        "bench.repetitions=3",
        "--out",
        path(&csv),
    ]);
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "kind,n,f,K,P,flops_analytic,flops_measured,ns_median,ns_iqr");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("full,7,8,2,0,1152,1152,"));
    assert!(lines[2].starts_with("rank_p,7,8,2,2,"));
}
