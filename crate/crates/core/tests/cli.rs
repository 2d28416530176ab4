use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use artn::config::RunConfig;
use artn::data::read_idx;
use artn::gradcheck::{corrupted_fixture, registry};
use artn::run::{self, sha256_hex, RunManifest};

fn artn(args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_artn"));
    cmd.args(args).env_remove(run::SEED_ENV);
    if let Some(s) = env_seed {
        cmd.env(run::SEED_ENV, s);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// A short moons run that finishes in well under a second.
const QUICK: &[&str] = &[
    "--set",
    "preset=desk-moons",
    "--set",
    "train.epochs=2",
    "--set",
    "data.moons_n=80",
];

fn train_in(dir: &Path, extra: &[&str], env_seed: Option<&str>) -> Output {
    let out_dir = dir.to_str().unwrap();
    let mut args = vec!["train", "--out", out_dir];
    args.extend_from_slice(QUICK);
    args.extend_from_slice(extra);
    artn(&args, env_seed)
}

fn recorded_seed(dir: &Path) -> u64 {
    let text = fs::read_to_string(dir.join(run::CONFIG_FILE)).unwrap();
    RunConfig::from_toml_str(&text, None).unwrap().train.seed
}

#[test]
fn misspelled_key_is_a_usage_error_with_a_suggestion() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_in(dir.path(), &["--set", "train.lamda=0.5"], None);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("train.lambda"), "{}", stderr(&out));
    assert!(!dir.path().join(run::MANIFEST_FILE).exists());

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nlamda = 0.5\n").unwrap();
    let out = artn(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("train.lambda"));
}

#[test]
fn seed_sources_in_precedence_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[train]\nseed = 11\n").unwrap();
    let c = cfg.to_str().unwrap();
    let cases: [(&[&str], Option<&str>, u64); 5] = [
        (&[], None, 0),
        (&["--config", c], None, 11),
        (&["--config", c], Some("3"), 3),
        (&["--config", c, "--set", "train.seed=5"], Some("3"), 5),
        (&["--config", c, "--set", "train.seed=5", "--seed", "7"], Some("3"), 7),
    ];
    for (i, (extra, env_seed, want)) in cases.into_iter().enumerate() {
        let out_dir = dir.path().join(format!("case{i}"));
        let out = train_in(&out_dir, extra, env_seed);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        assert_eq!(recorded_seed(&out_dir), want, "case {i}");
        let manifest: RunManifest =
            serde_json::from_str(&fs::read_to_string(out_dir.join(run::MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(manifest.config.train.seed, want);
    }
}

#[test]
fn malformed_env_seed_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_in(dir.path(), &[], Some("seven"));
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains(run::SEED_ENV));
}

#[test]
fn manifest_replay_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&train_in(&a, &["--seed", "9"], None)), 0);
    let manifest = a.join(run::MANIFEST_FILE);
    let out = artn(
        &[
            "train",
            "--config",
            manifest.to_str().unwrap(),
            "--out",
            b.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (ma, mb) = (
        fs::read(a.join(run::METRICS_FILE)).unwrap(),
        fs::read(b.join(run::METRICS_FILE)).unwrap(),
    );
    assert_eq!(sha256_hex(&ma), sha256_hex(&mb));
    assert_eq!(
        fs::read(a.join(run::CHECKPOINT_FILE)).unwrap(),
        fs::read(b.join(run::CHECKPOINT_FILE)).unwrap()
    );

    let m: RunManifest = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(m.command, "train");
    let metrics = m
        .artifacts
        .values()
        .find(|x| x.path.ends_with(run::METRICS_FILE))
        .unwrap();
    assert_eq!(metrics.sha256, sha256_hex(&ma));
    assert_eq!(m.datasets.len(), 2);
}

#[test]
fn gradcheck_exit_codes() {
    let out = artn(&["gradcheck"], None);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert_eq!(stdout(&out).lines().count(), registry().len());
    assert!(stdout(&out).lines().all(|l| l.ends_with(" ok")));

    let out = artn(&["gradcheck", "relu"], None);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out).lines().count(), 1);

    let out = artn(&["gradcheck", "softplus"], None);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("softplus"));
}

#[test]
fn corrupted_backward_rule_is_named() {
    let (ok, text) = run::cmd_gradcheck("all", &[corrupted_fixture()]).unwrap();
    assert!(!ok);
    assert!(text.contains("failing ops: square_corrupted"), "{text}");
}

fn sweep_in(dir: &Path, kind: &str) -> Output {
    artn(
        &[
            "sweep",
            kind,
            "--out",
            dir.to_str().unwrap(),
            "--set",
            "preset=desk-blobs",
            "--set",
            "train.epochs=1",
            "--set",
            "data.n_per_class=12",
            "--set",
            "sweep.seeds=[1, 2]",
        ],
        None,
    )
}

fn csv_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(String::from)
        .collect()
}

#[test]
fn sweep_tables_have_the_grid_shape() {
    let dir = tempfile::tempdir().unwrap();

    let out = sweep_in(&dir.path().join("lambda"), "lambda");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = csv_rows(&dir.path().join("lambda/lambda.csv"));
    let lambdas: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(lambdas, ["0.4", "0.5", "0.6", "0.7", "0.8", "0.9"]);
    assert!(stdout(&out).contains("14/14 cells succeeded"));

    let out = sweep_in(&dir.path().join("noise"), "noise");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(csv_rows(&dir.path().join("noise/noise.csv")).len(), 7);
    let long = csv_rows(&dir.path().join("noise/noise_long.csv"));
    assert_eq!(long.len(), 21);
    for method in ["source_only", "dann", "artn"] {
        assert_eq!(long.iter().filter(|r| r.split(',').nth(1) == Some(method)).count(), 7);
    }

    let out = sweep_in(&dir.path().join("ablation"), "ablation");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = csv_rows(&dir.path().join("ablation/ablation.csv"));
    assert_eq!(rows.len(), 4);
    for seed in ["1", "2"] {
        let betas: Vec<&str> = rows
            .iter()
            .filter(|r| r.split(',').next() == Some(seed))
            .map(|r| r.split(',').nth(1).unwrap())
            .collect();
        assert_eq!(betas, ["10", "0"]);
    }

    let out = sweep_in(&dir.path().join("other"), "temperature");
    assert_eq!(code(&out), 2);
}

#[test]
fn gendata_round_trips_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |name: &str| {
        let d = dir.path().join(name);
        let out = artn(
            &[
                "gendata",
                "--out",
                d.to_str().unwrap(),
                "--set",
                "data.n_per_class=50",
                "--seed",
                "3",
            ],
            None,
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        d
    };
    let (a, b) = (gen("a"), gen("b"));
    for f in [
        "source-images.idx",
        "source-labels.idx",
        "target-images.idx",
        "target-labels.idx",
    ] {
        assert_eq!(
            sha256_hex(&fs::read(a.join(f)).unwrap()),
            sha256_hex(&fs::read(b.join(f)).unwrap()),
            "{f}"
        );
    }
    let source = read_idx(&a.join("source-images.idx"), &a.join("source-labels.idx")).unwrap();
    let target = read_idx(&a.join("target-images.idx"), &a.join("target-labels.idx")).unwrap();
    assert_eq!((source.len(), target.len()), (150, 150));

    // the written files feed straight back into training
    let cfg = RunConfig::from_file(&a.join(run::DATA_CONFIG_FILE)).unwrap();
    let (s, t) = run::load_pair(&cfg, 0).unwrap();
    assert!(s.features.bitwise_eq(&source.features) && t.features.bitwise_eq(&target.features));
    let out = artn(
        &[
            "train",
            "--config",
            a.join(run::DATA_CONFIG_FILE).to_str().unwrap(),
            "--set",
            "train.epochs=1",
            "--out",
            dir.path().join("run").to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn gendata_sparse_text() {
    let dir = tempfile::tempdir().unwrap();
    let out = artn(
        &[
            "gendata",
            "--out",
            dir.path().to_str().unwrap(),
            "--set",
            "gendata.format=sparse",
            "--set",
            "data.classes=2",
            "--set",
            "data.n_per_class=20",
        ],
        None,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cfg = RunConfig::from_file(&dir.path().join(run::DATA_CONFIG_FILE)).unwrap();
    let (s, t) = run::load_pair(&cfg, 0).unwrap();
    assert_eq!((s.len(), t.len()), (40, 40));
    assert_eq!(t.domain_label, 1);
}

#[test]
fn io_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "not a directory").unwrap();
    let out = train_in(&blocker.join("out"), &[], None);
    assert_eq!(code(&out), 1, "{}", stderr(&out));

    let missing = dir.path().join("absent.toml");
    let out = artn(&["train", "--config", missing.to_str().unwrap()], None);
    assert_ne!(code(&out), 0);
    assert!(stderr(&out).contains("absent.toml"), "{}", stderr(&out));
}
