use std::path::{Path, PathBuf};
use std::process::Command;

use clap::Parser;
use hsa::attention_map::AttentionMapExport;
use hsa::checkpoint::Checkpoint;
use hsa::cli::{run, Cli, RunOutput};
use hsa::dataset::{self, Schema};
use hsa_core::data::{build_sessions_all, normalize};

const TINY: &str = r#"
version = 1
seed = 7

[synth]
classes = 3
subjects = 3
segment_len = 64
segments_per_class = 2
placements = [{ name = "wrist", channels = 2 }, { name = "ankle", channels = 2 }]

[sessions]
window_len = 8
windows_per_session = 2

[model]
d_model = 8
heads = 2
blocks = 1
dropout = 0.0
latent_dim = 4
decoder_hidden = [8]

[train]
epochs = 3
batch_size = 8
"#;

struct Fixture {
    root: tempfile::TempDir,
    config: PathBuf,
}

impl Fixture {
    fn new(extra: &str) -> Self {
        let root = tempfile::tempdir().unwrap();
        let config = root.path().join("tiny.toml");
        std::fs::write(&config, format!("{TINY}{extra}")).unwrap();
        Self { root, config }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.root.path().join(name)
    }

    fn run(&self, name: &str, args: &[&str]) -> hsa::Result<RunOutput> {
        let out = self.out(name);
        let mut argv = vec!["hsa", args[0], "--quiet", "--config", self.config.to_str().unwrap(), "--out", out.to_str().unwrap()];
        argv.extend_from_slice(&args[1..]);
        run(Cli::try_parse_from(argv).unwrap())
    }

    fn synth(&self) -> PathBuf {
        self.run("synth", &["synth"]).unwrap().dir.join("dataset.csv")
    }
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hsa"))
}

#[test]
fn missing_data_exits_2_and_names_the_path() {
    let fx = Fixture::new("");
    let missing = fx.out("nowhere/data.csv");
    let out = bin()
        .args(["train", "--quiet", "--config"])
        .arg(&fx.config)
        .arg("--data")
        .arg(&missing)
        .arg("--out")
        .arg(fx.out("runs"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(missing.to_str().unwrap()));
}

#[test]
fn bad_config_exits_2() {
    let fx = Fixture::new("");
    let cfg = fx.out("bad.toml");
    std::fs::write(&cfg, "seed = 1\n").unwrap();
    let out = bin().args(["synth", "--quiet", "--config"]).arg(&cfg).arg("--out").arg(fx.out("runs")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml"));
}

#[test]
fn divergence_exits_3() {
    let fx = Fixture::new("learning_rate = 1e300\n");
    let data = fx.synth();
    let out = bin()
        .args(["train", "--quiet", "--config"])
        .arg(&fx.config)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(fx.out("runs"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_is_reproducible_and_checksummed() {
    let fx = Fixture::new("");
    let a = fx.synth();
    let b = fx.run("synth2", &["synth"]).unwrap().dir.join("dataset.csv");
    assert_eq!(read(&a), read(&b));
    let digest = read(&a.with_file_name("dataset.sha256"));
    assert!(digest.starts_with(&dataset::sha256_hex(read(&a).as_bytes())));
    let name = a.parent().unwrap().file_name().unwrap().to_str().unwrap().to_string();
    assert!(name.ends_with("-seed7"), "{name}");
}

#[test]
fn seed_flag_overrides_config() {
    let fx = Fixture::new("");
    let dir = fx.run("s", &["synth", "--seed", "11"]).unwrap().dir;
    assert!(dir.file_name().unwrap().to_str().unwrap().ends_with("-seed11"));
    assert!(read(&dir.join("config.toml")).contains("seed = 11"));
}

#[test]
fn train_then_eval_round_trip() {
    let fx = Fixture::new("");
    let data = fx.synth();
    let data_s = data.to_str().unwrap();
    let a = fx.run("train", &["train", "--data", data_s]).unwrap().dir;
    let b = fx.run("train2", &["train", "--data", data_s]).unwrap().dir;
    assert_eq!(read(&a.join("history.csv")), read(&b.join("history.csv")));
    for f in ["test.json", "test_confusion.csv", "test_per_class.csv", "checkpoint.hsa", "config.toml", "log.txt"] {
        assert!(a.join(f).exists(), "{f}");
    }

    let ck = a.join("checkpoint.hsa");
    let eval = fx.run("eval", &["eval", "--data", data_s, "--checkpoint", ck.to_str().unwrap(), "--subjects", "s03"]).unwrap();
    let report: serde_json::Value = serde_json::from_str(&read(&eval.dir.join("eval.json"))).unwrap();
    let test: serde_json::Value = serde_json::from_str(&read(&a.join("test.json"))).unwrap();
    assert_eq!(report["macro_f1"], test["macro_f1"]);

    let err = fx.run("eval2", &["eval", "--data", data_s, "--checkpoint", ck.to_str().unwrap(), "--subjects", "zz"]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn openset_thresholds_fall_with_alpha() {
    let fx = Fixture::new("");
    let data = fx.synth();
    let dir = fx
        .run("os", &["openset", "--data", data.to_str().unwrap(), "--alpha", "0", "--alpha", "0.25", "--alpha", "0.5", "--holdout-classes", "2"])
        .unwrap()
        .dir;
    let table = read(&dir.join("openset.csv"));
    let thresholds: Vec<f64> = table.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(thresholds.len(), 3);
    assert!(thresholds.windows(2).all(|w| w[1] <= w[0]), "{thresholds:?}");
    assert!(read(&dir.join("scores.csv")).lines().skip(1).any(|l| l.contains(",2,false,")));
    let ck = Checkpoint::load(&dir.join("checkpoint.hsa")).unwrap();
    assert!(ck.calibration.is_some());
    assert_eq!(ck.meta.held_out, vec![2]);
}

#[test]
fn loso_on_three_subjects_gives_three_folds() {
    let fx = Fixture::new("");
    let data = fx.synth();
    let dir = fx.run("loso", &["loso", "--data", data.to_str().unwrap()]).unwrap().dir;
    assert_eq!(read(&dir.join("folds.csv")).lines().count(), 4);
    let summary: serde_json::Value = serde_json::from_str(&read(&dir.join("summary.json"))).unwrap();
    assert_eq!(summary["folds"].as_array().unwrap().len(), 3);
    for s in ["s01", "s02", "s03"] {
        assert!(dir.join(format!("fold_{s}.json")).exists());
    }
}

#[test]
fn attention_export_and_zeroed_keys() {
    let fx = Fixture::new("");
    let data = fx.synth();
    let data_s = data.to_str().unwrap();
    let ck_path = fx.run("train", &["train", "--data", data_s]).unwrap().dir.join("checkpoint.hsa");
    let ck_s = ck_path.to_str().unwrap();

    let dir = fx.run("attn", &["attn", "--data", data_s, "--checkpoint", ck_s, "--session", "s01@0", "--session", "s09@0"]).unwrap().dir;
    let csv = read(&dir.join("attn_s01_0.csv"));
    assert!(csv.starts_with("session_id,block,window,placement,step,weight\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 8 + 2);
    roxmltree::Document::parse(&read(&dir.join("attn_s01_0.svg"))).unwrap();
    assert!(read(&dir.join("log.txt")).contains("s09@0"));

    let err = fx.run("attn2", &["attn", "--data", data_s, "--checkpoint", ck_s, "--session", "nope"]).unwrap_err();
    assert_eq!(err.exit_code(), 2);

    let mut ck = Checkpoint::load(&ck_path).unwrap();
    let keys = [ck.model.window_aggregator.key, ck.model.session_aggregator.key];
    for k in keys {
        ck.model.store.get_mut(k).data_mut().fill(0.0);
    }
    let series = dataset::ingest(&data, &Schema::default()).unwrap();
    let stats = ck.meta.norm_stats.clone().unwrap();
    let normed: Vec<_> = series.iter().map(|s| normalize(s, &stats).unwrap()).collect();
    let sessions = build_sessions_all(&normed, &ck.meta.sessions).unwrap().sessions;
    let map = AttentionMapExport::compute(&ck.model, &sessions[0], &ck.labels()).unwrap();
    for row in &map.windows {
        assert!(row.iter().all(|w| (w - 1.0 / 16.0).abs() < 1e-12));
    }
    assert!(map.temporal.iter().all(|w| (w - 0.5).abs() < 1e-12));
}

#[test]
fn gradcheck_writes_a_table() {
    let fx = Fixture::new("");
    let dir = fx.run("gc", &["gradcheck"]).unwrap().dir;
    let table = read(&dir.join("gradcheck.csv"));
    assert!(table.lines().skip(1).all(|l| l.ends_with(",true")));
}
