use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const TINY_SPEC: &str =
    "input 1 8 8\nclasses 10\nconv3-2\nmaxpooling-2\nconv3-4\nmaxpooling-2\nFC-16\nFC-10\n";

fn slom(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slom"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn idx_images(images: &[Vec<u8>]) -> Vec<u8> {
    let mut v = 0x0000_0803u32.to_be_bytes().to_vec();
    for d in [images.len() as u32, 8, 8] {
        v.extend_from_slice(&d.to_be_bytes());
    }
    for im in images {
        v.extend_from_slice(im);
    }
    v
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut v = 0x0000_0801u32.to_be_bytes().to_vec();
    v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    v.extend_from_slice(labels);
    v
}

/// Class `k` lights the `k`-th 2x2 block of an 8x8 image, with a faint
/// deterministic background that differs per sample.
fn synthetic(n: usize, offset: usize) -> (Vec<Vec<u8>>, Vec<u8>) {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let k = i % 10;
        let mut im: Vec<u8> = (0..64)
            .map(|p| (((i + offset) * 31 + p * 17) % 40) as u8)
            .collect();
        let (br, bc) = (2 * (k / 4), 2 * (k % 4));
        for r in br..br + 2 {
            for c in bc..bc + 2 {
                im[r * 8 + c] = 255;
            }
        }
        images.push(im);
        labels.push(k as u8);
    }
    (images, labels)
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn spec(&self) -> String {
        self.path("tiny.net")
    }
    fn data(&self) -> String {
        self.path("data")
    }
    fn weights(&self) -> String {
        self.path("trained/tiny.w")
    }
    fn path(&self, p: &str) -> String {
        self.root.join(p).to_string_lossy().into_owned()
    }
}

/// Writes the dataset and spec, and trains the tiny network once.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        fs::create_dir_all(&data).unwrap();
        let (tr, trl) = synthetic(400, 0);
        let (te, tel) = synthetic(60, 1000);
        fs::write(data.join("train-images-idx3-ubyte"), idx_images(&tr)).unwrap();
        fs::write(data.join("train-labels-idx1-ubyte"), idx_labels(&trl)).unwrap();
        fs::write(data.join("t10k-images-idx3-ubyte"), idx_images(&te)).unwrap();
        fs::write(data.join("t10k-labels-idx1-ubyte"), idx_labels(&tel)).unwrap();
        fs::write(root.join("tiny.net"), TINY_SPEC).unwrap();
        let f = Fixture { _dir: dir, root };
        let out = slom(&[
            "train",
            "--spec",
            &f.spec(),
            "--data",
            &f.data(),
            "--out",
            &f.weights(),
            "--epochs",
            "30",
            "--lr",
            "0.1",
            "--batch-size",
            "16",
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        f
    })
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p).unwrap()
}

#[test]
fn train_writes_weights_and_accuracy_csv() {
    let f = fixture();
    assert!(Path::new(&f.weights()).is_file());
    let csv = read(f.path("trained/tiny.csv"));
    assert!(csv.starts_with("epoch,train_acc,test_acc,mean_loss\n"));
    assert_eq!(csv.lines().count(), 31);
    let last_acc: f64 = csv
        .lines()
        .last()
        .unwrap()
        .split(',')
        .nth(2)
        .unwrap()
        .parse()
        .unwrap();
    assert!(last_acc > 0.9, "test accuracy {last_acc}");
}

#[test]
fn train_limit_and_missing_spec() {
    let f = fixture();
    let out_dir = tempfile::tempdir().unwrap();
    let o = out_dir.path().to_str().unwrap();
    let ok = slom(&[
        "train",
        "--spec",
        &f.spec(),
        "--data",
        &f.data(),
        "--epochs",
        "1",
        "--limit",
        "20",
        "--out-dir",
        o,
    ]);
    assert!(ok.status.success());
    assert!(out_dir.path().join("target.w").is_file());

    let empty = out_dir.path().join("none");
    let bad = slom(&[
        "train",
        "--spec",
        &f.path("missing.net"),
        "--data",
        &f.data(),
        "--out-dir",
        empty.to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(!empty.exists());
}

#[test]
fn attack_writes_trace_summary_and_images() {
    let f = fixture();
    let out_dir = tempfile::tempdir().unwrap();
    let o = out_dir.path().to_str().unwrap();
    let out = slom(&[
        "attack",
        "--spec",
        &f.spec(),
        "--weights",
        &f.weights(),
        "--data",
        &f.data(),
        "--type",
        "2",
        "--tap",
        "pool1",
        "--sample",
        "idx:0",
        "--donor",
        "idx:3",
        "--iterations",
        "120",
        "--step",
        "0.5",
        "--log-every",
        "50",
        "--out-dir",
        o,
        "--name",
        "run",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let trace = read(out_dir.path().join("run.trace.csv"));
    let iters: Vec<&str> = trace
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(iters, ["0", "50", "100", "120"]);
    let summary: serde_json::Value =
        serde_json::from_str(&read(out_dir.path().join("run.json"))).unwrap();
    assert_eq!(summary["type"], "type2");
    assert_eq!(summary["tap"], "pool1");
    assert_eq!(summary["donor_index"], 3);
    assert_eq!(summary["diverged"], false);
    assert!(summary.get("wall_time").is_none());
    for img in ["reference", "initial", "final", "donor"] {
        let bytes = fs::read(out_dir.path().join(format!("run.{img}.pgm"))).unwrap();
        assert!(bytes.starts_with(b"P5\n8 8\n255\n"));
        assert_eq!(bytes.len(), b"P5\n8 8\n255\n".len() + 64);
    }
}

#[test]
fn unknown_tap_lists_valid_taps() {
    let f = fixture();
    let out_dir = tempfile::tempdir().unwrap();
    let out = slom(&[
        "attack",
        "--spec",
        &f.spec(),
        "--weights",
        &f.weights(),
        "--data",
        &f.data(),
        "--tap",
        "pool9",
        "--out-dir",
        out_dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("conv1, relu1, pool1, conv2, relu2, pool2"),
        "{err}"
    );
    assert_eq!(fs::read_dir(out_dir.path()).unwrap().count(), 0);
}

#[test]
fn diverging_attack_exits_three_with_partial_trace() {
    let f = fixture();
    let out_dir = tempfile::tempdir().unwrap();
    let out = slom(&[
        "attack",
        "--spec",
        &f.spec(),
        "--weights",
        &f.weights(),
        "--data",
        &f.data(),
        "--sample",
        "idx:0",
        "--iterations",
        "5",
        "--step",
        "1e300",
        "--no-clamp",
        "--out-dir",
        out_dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let summary: serde_json::Value =
        serde_json::from_str(&read(out_dir.path().join("attack.json"))).unwrap();
    assert_eq!(summary["diverged"], true);
    assert!(out_dir.path().join("attack.trace.csv").is_file());
}

#[test]
fn lambda_without_oracle_is_a_usage_error() {
    let f = fixture();
    let out = slom(&[
        "attack",
        "--spec",
        &f.spec(),
        "--weights",
        &f.weights(),
        "--data",
        &f.data(),
        "--lambda",
        "exp:1:0.99",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

fn compare(f: &Fixture, out_dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "compare-layers",
        "--spec",
        &f.spec(),
        "--weights",
        &f.weights(),
        "--data",
        &f.data(),
        "--iterations",
        "60",
        "--step",
        "0.5",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    slom(&refs)
}

fn rows_of(csv: &str, kind: &str) -> usize {
    csv.lines().skip(1).filter(|l| l.starts_with(kind)).count()
}

#[test]
fn compare_layers_row_counts() {
    let f = fixture();
    let out_dir = tempfile::tempdir().unwrap();
    let all = compare(f, out_dir.path(), &[]);
    assert!(
        all.status.success(),
        "{}",
        String::from_utf8_lossy(&all.stderr)
    );
    let csv = read(out_dir.path().join("compare.csv"));
    // Six taps (each conv has an implicit ReLU), two kinds, one seed.
    assert_eq!(rows_of(&csv, "run,"), 12);
    assert_eq!(rows_of(&csv, "median,"), 12);
    let checks = read(out_dir.path().join("compare.checks.csv"));
    assert!(checks.starts_with("check,holds,detail\n"));
    assert!(checks.contains("pool2 > pool1"));

    let pools = compare(
        f,
        out_dir.path(),
        &[
            "--taps",
            "pool1,pool2",
            "--seeds",
            "0,1,2",
            "--name",
            "pools",
        ],
    );
    assert!(
        pools.status.success(),
        "{}",
        String::from_utf8_lossy(&pools.stderr)
    );
    let csv = read(out_dir.path().join("pools.csv"));
    assert_eq!(rows_of(&csv, "run,"), 12);
    assert_eq!(rows_of(&csv, "median,"), 4);
}

#[test]
fn reruns_are_byte_identical() {
    let f = fixture();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        assert!(compare(f, dir, &["--seeds", "0,1"]).status.success());
    }
    for name in ["compare.csv", "compare.checks.csv"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        format!(
            "seed = 1\nout_dir = \"from-config\"\nlog_every = 7\n[attack]\nspec = {:?}\nweights = {:?}\ndata = {:?}\n\
             sample = \"idx:2\"\niterations = 20\nstep = 0.5\nname = \"cfg\"\n",
            f.spec(),
            f.weights(),
            f.data()
        ),
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let out = slom(&["--config", cfg, "attack"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let trace = read(dir.path().join("from-config/cfg.trace.csv"));
    assert_eq!(trace.lines().nth(2).unwrap().split(',').next(), Some("7"));

    let out = slom(&[
        "--config", cfg, "attack", "--sample", "idx:5", "--name", "flag",
    ]);
    assert!(out.status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&read(dir.path().join("from-config/flag.json"))).unwrap();
    assert_eq!(summary["source_index"], 5);
    assert_eq!(summary["seed"], 1);

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[attack]\nstepz = 3\n").unwrap();
    assert_eq!(
        slom(&["--config", bad.to_str().unwrap(), "attack"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn audit_reports_fixtures() {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let out_dir = tempfile::tempdir().unwrap();
    let o = out_dir.path().to_str().unwrap();
    let audit = |spec: &str| {
        let out = slom(&[
            "audit",
            "--spec",
            fixtures.join(spec).to_str().unwrap(),
            "--out-dir",
            o,
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let v: serde_json::Value =
            serde_json::from_str(&read(out_dir.path().join("audit.json"))).unwrap();
        v
    };
    let target = audit("target.net");
    let blocks = target["blocks"].as_array().unwrap();
    assert_eq!(blocks.len(), 2);
    assert_eq!(blocks[0]["pooling_underconstrained"], false);
    assert_eq!(blocks[1]["pooling_underconstrained"], true);

    let vgg = audit("vgg16.net");
    let blocks = vgg["blocks"].as_array().unwrap();
    assert_eq!(blocks.len(), 5);
    assert!(blocks
        .iter()
        .all(|b| b["pooling_underconstrained"] == true && b["conv_underconstrained"] == false));

    let nopool = audit("nopool.net");
    assert!(nopool["blocks"].as_array().unwrap().is_empty());
    assert!(nopool["amplification_factor"].is_null());
}

#[test]
fn audit_with_weights_measures_amplification() {
    let f = fixture();
    let out_dir = tempfile::tempdir().unwrap();
    let out = slom(&[
        "audit",
        "--spec",
        &f.spec(),
        "--weights",
        &f.weights(),
        "--trials",
        "200",
        "--out-dir",
        out_dir.path().to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: serde_json::Value =
        serde_json::from_str(&read(out_dir.path().join("audit.json"))).unwrap();
    let bound = v["amplification_factor"].as_f64().unwrap();
    let measured = v["measured_amplification"]["std_ratio"].as_f64().unwrap();
    assert!(measured > 0.0 && measured <= bound, "{measured} vs {bound}");
}

#[test]
fn help_exits_zero_and_bad_flag_exits_two() {
    assert_eq!(slom(&["--help"]).status.code(), Some(0));
    assert_eq!(slom(&["attack", "--frobnicate"]).status.code(), Some(2));
}

#[test]
fn oracle_training_and_oracle_guided_attack() {
    let f = fixture();
    let out_dir = tempfile::tempdir().unwrap();
    let o = out_dir.path().to_str().unwrap();
    let out = slom(&[
        "train",
        "--spec",
        &f.spec(),
        "--data",
        &f.data(),
        "--oracle",
        "--seeds",
        "1,2,3,4,5",
        "--epochs",
        "2",
        "--limit",
        "100",
        "--out-dir",
        o,
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let members: Vec<String> = (1..=5)
        .map(|s| {
            out_dir
                .path()
                .join(format!("oracle-{s}.w"))
                .to_string_lossy()
                .into_owned()
        })
        .collect();
    for m in &members {
        assert!(Path::new(m).is_file());
        assert!(Path::new(m).with_extension("csv").is_file());
    }
    let four = slom(&[
        "train",
        "--spec",
        &f.spec(),
        "--data",
        &f.data(),
        "--oracle",
        "--seeds",
        "1,2,3,4",
        "--out-dir",
        o,
    ]);
    assert_eq!(four.status.code(), Some(2));

    let list = members.join(",");
    let out = slom(&[
        "attack",
        "--spec",
        &f.spec(),
        "--weights",
        &f.weights(),
        "--data",
        &f.data(),
        "--sample",
        "idx:4",
        "--iterations",
        "30",
        "--step",
        "0.5",
        "--lambda",
        "exp:1:0.9",
        "--oracle-spec",
        &f.spec(),
        "--oracle-weights",
        &list,
        "--log-every",
        "10",
        "--out-dir",
        o,
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let trace = read(out_dir.path().join("attack.trace.csv"));
    let first = trace.lines().nth(1).unwrap().split(',').collect::<Vec<_>>();
    assert_eq!(first[4], "1");
    assert!(!first[3].is_empty());
}
