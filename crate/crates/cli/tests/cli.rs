use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use h3d_marnet::checkpoint::Checkpoint;
use tempfile::TempDir;

const TINY: &str = "\
# small enough for a few seconds of CPU
phantom.depth=6
phantom.artifact_fraction=0.34
transnet.cnn_widths=4,8,8
transnet.decoder_widths=8,4,4
transnet.d_model=16
transnet.heads=2
transnet.layers=1
prenet.fad_channels=4
prenet.fusion_channels=4
train.loss_variant=l2
train.epochs=2
teacher.steps=5
teacher.width=4
teacher.layers=1
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_h3d-marnet")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.txt"), TINY).unwrap();
        Self { dir }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.p(name).to_string_lossy().into_owned()
    }

    /// Runs a subcommand with the tiny config at 32 x 32.
    fn tiny(&self, sub: &str, extra: &[&str]) -> Output {
        let cfg = self.s("tiny.txt");
        let mut args = vec![sub, "--config", &cfg, "--resolution", "32"];
        args.extend_from_slice(extra);
        run(&args)
    }

    fn generate(&self, name: &str, n: usize, seed: u64) {
        let (out, n, seed) = (self.s(name), n.to_string(), seed.to_string());
        let o = self.tiny("generate", &["--out", &out, "-n", &n, "--seed", &seed]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn kv(text: &str, key: &str) -> f64 {
    let v = text.lines().find_map(|l| l.strip_prefix(&format!("{key}="))).unwrap_or_else(|| panic!("no {key}"));
    v.parse().unwrap()
}

#[test]
fn generate_zero_patients_writes_empty_manifest() {
    let w = Work::new();
    let out = w.s("empty");
    let o = run(&["generate", "-n", "0", "--out", &out]);
    assert_eq!(code(&o), 0);
    let manifest = read(&w.p("empty/manifest.csv"));
    assert_eq!(manifest.lines().count(), 1, "{manifest}");
    assert!(w.p("empty/config.txt").exists());
}

#[test]
fn generate_default_cohort_hits_artifact_fraction_and_is_deterministic() {
    let w = Work::new();
    for name in ["a", "b"] {
        let out = w.s(name);
        assert_eq!(code(&run(&["generate", "-n", "8", "--seed", "3", "--out", &out])), 0);
    }
    let manifest = read(&w.p("a/manifest.csv"));
    assert_eq!(manifest, read(&w.p("b/manifest.csv")));
    let rows: Vec<&str> = manifest.lines().skip(1).collect();
    assert_eq!(rows.len(), 8);
    for r in &rows {
        assert!(w.p("a").join(r.split(',').next().unwrap()).is_dir());
    }
    let (mut art, mut depth) = (0usize, 0usize);
    for r in rows {
        let f: Vec<&str> = r.split(',').collect();
        depth += f[1].parse::<usize>().unwrap();
        art += f[2].parse::<usize>().unwrap();
    }
    let frac = art as f64 / depth as f64;
    assert!((frac - 0.1478).abs() <= 0.05, "fraction {frac}");
}

#[test]
fn usage_and_config_errors_exit_1() {
    assert_eq!(code(&run(&["generate", "--bogus"])), 1);
    assert_eq!(code(&run(&[])), 1);
    let w = Work::new();
    let out = w.s("x");
    assert_eq!(code(&run(&["info", "--ablation", "v9", "--out", &out])), 1);
    assert_eq!(code(&run(&["info", "--set", "train.nope=1", "--out", &out])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn missing_dataset_is_a_data_error() {
    let w = Work::new();
    let (data, out) = (w.s("nowhere"), w.s("run"));
    let o = w.tiny("train", &["--data", &data, "--out", &out]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere"));
}

#[test]
fn smoke_train_v5_then_eval() {
    let w = Work::new();
    w.generate("data", 2, 5);
    let (data, run_dir) = (w.s("data"), w.s("run"));
    let o = w.tiny("train", &["--data", &data, "--out", &run_dir, "--ablation", "v5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = read(&w.p("run/train.log"));
    assert_eq!(log.lines().count(), 3, "{log}");
    assert!(read(&w.p("run/config.txt")).contains("train.ablation=v5"));
    assert!(read(&w.p("run/split.txt")).starts_with("train="));

    let ckpt = Checkpoint::load(w.p("run/checkpoint.h3dc")).unwrap();
    assert!(ckpt.params.len() > 0);
    assert!(ckpt.params.iter().all(|(_, e)| !e.name.contains("transformer") && !e.name.starts_with("prenet.")));

    let ck = w.s("run/checkpoint.h3dc");
    let mut reports = Vec::new();
    for name in ["e1", "e2"] {
        let out = w.s(name);
        let o = run(&["eval", "--checkpoint", &ck, "--data", &data, "--subset", "all", "--out", &out, "--grids", "2"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        reports.push((read(&w.p(&format!("{name}/report.txt"))), read(&w.p(&format!("{name}/report.csv")))));
    }
    assert_eq!(reports[0], reports[1]);
    assert!(reports[0].1.starts_with("patient_id,"));
    assert_eq!(reports[0].1.lines().count(), 3);
    let grids: Vec<_> = fs::read_dir(w.p("e1/grids")).unwrap().collect();
    assert_eq!(grids.len(), 4);
    let png = fs::read(grids[0].as_ref().unwrap().path()).unwrap();
    assert_eq!(&png[1..4], b"PNG");
    assert!(w.p("e1/config.txt").exists());
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let w = Work::new();
    w.generate("data", 1, 0);
    fs::write(w.p("bad.h3dc"), b"H3DC\x01\x00garbage").unwrap();
    let (ck, data, out) = (w.s("bad.h3dc"), w.s("data"), w.s("ev"));
    let o = run(&["eval", "--checkpoint", &ck, "--data", &data, "--out", &out]);
    assert_eq!(code(&o), 2);
    assert!(!o.stderr.is_empty());
}

#[test]
fn diverging_training_exits_3() {
    let w = Work::new();
    w.generate("data", 1, 0);
    let (data, out) = (w.s("data"), w.s("run"));
    let o = w.tiny("train", &["--data", &data, "--out", &out, "--set", "train.lr0=1e30"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn analyze_reproduces_orderings() {
    let w = Work::new();
    let out = w.s("data");
    assert_eq!(code(&run(&["generate", "-n", "4", "--seed", "2", "--out", &out])), 0);
    let ana = w.s("ana");
    let o = run(&["analyze", "--data", &out, "--out", &ana]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let txt = read(&w.p("ana/analysis.txt"));
    assert!(kv(&txt, "r2.clean") > kv(&txt, "r2.artifact"), "{txt}");
    assert!(kv(&txt, "skew.kvct") > kv(&txt, "skew.mvct"), "{txt}");
    assert_eq!(read(&w.p("ana/analysis.csv")).lines().count(), 5);
    assert_eq!(read(&w.p("ana/histogram.csv")).lines().count(), 257);
}

#[test]
fn info_reports_counts_and_flags_win_over_file() {
    let w = Work::new();
    let out = w.s("info");
    let o = w.tiny("info", &["--out", &out, "--set", "train.epochs=7", "--seed", "9"]);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("# parameters:"));
    assert!(stdout.contains("# v5:"));
    let cfg = read(&w.p("info/config.txt"));
    for line in ["train.epochs=7", "train.seed=9", "phantom.seed=9", "transnet.resolution=32", "phantom.depth=6"] {
        assert!(cfg.lines().any(|l| l == line), "{line} missing");
    }
}
