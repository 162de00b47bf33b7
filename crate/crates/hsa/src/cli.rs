use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use hsa_core::data::{
    build_sessions_all, choose_held_out, held_out_count, normalize, synth_generate, LabelMap, SensorSeries, Session,
};
use hsa_core::diagnostics::gradient_suite;
use hsa_core::experiment::{run_loso, run_openset, run_split};
use hsa_core::train::{evaluate, AeMode, HeadMode};
use hsa_core::rng_from_seed;

use crate::attention_map::AttentionMapExport;
use crate::checkpoint::{Checkpoint, TrainingMeta};
use crate::config::RunConfig;
use crate::dataset::{self, Schema};
use crate::error::{Error, Result};
use crate::report::{self, RunLog};

#[derive(Debug, Parser)]
#[command(name = "hsa", version, about = "Hierarchical self-attention activity recognition with open-set detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Args)]
pub struct Common {
    /// TOML run configuration (`version = 1`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parent directory of the run directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Do not echo the run log to stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-placement dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train on a split and save a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Restrict to these subjects (comma separated).
        #[arg(long, value_delimiter = ',')]
        subjects: Vec<String>,
    },
    /// Leave-one-subject-out cross-validation.
    Loso {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train on known classes and evaluate unseen-activity detection.
    Openset {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Threshold multiplier; repeat for a grid.
        #[arg(long)]
        alpha: Vec<f64>,
        /// Label ids to hold out (comma separated).
        #[arg(long, value_delimiter = ',')]
        holdout_classes: Vec<u32>,
    },
    /// Export attention maps of sessions as CSV and SVG.
    Attn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Session id (`<subject>@<start>`); repeatable.
        #[arg(long = "session", required = true)]
        sessions: Vec<String>,
    },
    /// Finite-difference check of every primitive and block.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

/// Run directory and a one-line summary.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub summary: String,
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Synth { common }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Loso { common, .. }
            | Command::Openset { common, .. }
            | Command::Attn { common, .. }
            | Command::Gradcheck { common } => common,
        }
    }
}

pub fn run(cli: Cli) -> Result<RunOutput> {
    let common = cli.command.common().clone();
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let dir = report::create_run_dir(&common.out, cfg.seed)?;
    let mut log = RunLog::create(&dir, !common.quiet)?;
    report::write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    let summary = match &cli.command {
        Command::Synth { .. } => synth(&cfg, &dir, &mut log)?,
        Command::Train { data, .. } => train(&cfg, data, &dir, &mut log)?,
        Command::Eval { data, checkpoint, subjects, .. } => eval(&cfg, data, checkpoint, subjects, &dir, &mut log)?,
        Command::Loso { data, .. } => loso(&cfg, data, &dir, &mut log)?,
        Command::Openset { data, alpha, holdout_classes, .. } => openset(&cfg, data, alpha, holdout_classes, &dir, &mut log)?,
        Command::Attn { data, checkpoint, sessions, .. } => attn(&cfg, data, checkpoint, sessions, &dir, &mut log)?,
        Command::Gradcheck { .. } => gradcheck(&cfg, &dir, &mut log)?,
    };
    log.record(&summary);
    Ok(RunOutput { dir, summary })
}

fn load_data(path: &Path, schema: &Schema, log: &mut RunLog) -> Result<Vec<SensorSeries>> {
    let series = dataset::ingest(path, schema)?;
    if series.is_empty() {
        return Err(Error::Config(format!("{}: dataset has no rows", path.display())));
    }
    let steps: usize = series.iter().map(SensorSeries::len).sum();
    log.line(format!("loaded {} subjects, {steps} timesteps from {}", series.len(), path.display()));
    Ok(series)
}

fn synth(cfg: &RunConfig, dir: &Path, log: &mut RunLog) -> Result<String> {
    let series = synth_generate(&cfg.synth, cfg.seed)?;
    let path = dir.join("dataset.csv");
    dataset::export(&series, &path)?;
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let digest = dataset::sha256_hex(&bytes);
    report::write_text(&dir.join("dataset.sha256"), &format!("{digest}  dataset.csv\n"))?;
    log.line(format!("{} subjects × {} timesteps, {} classes", series.len(), cfg.synth.timesteps_per_subject(), cfg.synth.classes));
    Ok(format!("wrote {} (sha256 {digest})", path.display()))
}

fn log_history(log: &mut RunLog, history: &hsa_core::train::TrainHistory) {
    for e in &history.epochs {
        let val = e.val_macro_f1.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        log.line(format!("epoch {:>3}  loss {:.5}  ce {:.5}  ae {:.5}  val_f1 {val}", e.epoch, e.loss, e.ce, e.ae));
    }
    if let Some(last) = history.ae_epochs.last() {
        log.line(format!("autoencoder: {} epochs, final elbo {last:.5}", history.ae_epochs.len()));
    }
    log.line(format!("kept epoch {}{}", history.best_epoch, if history.stopped_early { " (stopped early)" } else { "" }));
}

fn write_history(dir: &Path, history: &hsa_core::train::TrainHistory) -> Result<()> {
    report::write_text(&dir.join("history.csv"), &report::history_csv(history))?;
    if !history.ae_epochs.is_empty() {
        report::write_text(&dir.join("ae_history.csv"), &report::ae_history_csv(history))?;
    }
    Ok(())
}

fn train(cfg: &RunConfig, data: &Path, dir: &Path, log: &mut RunLog) -> Result<String> {
    let series = load_data(data, &cfg.schema, log)?;
    let plan = cfg.split_plan(&series)?;
    let exp = cfg.experiment();
    let run = run_split(&series, &plan, &exp)?;
    log.line(format!("sessions: {} train, {} val, {} test", run.split.train.len(), run.split.val.len(), run.split.test.len()));
    log_history(log, &run.history);
    write_history(dir, &run.history)?;
    report::write_eval(dir, "test", &run.report, &run.split.labels)?;
    let ck = Checkpoint {
        calibration: None,
        meta: TrainingMeta {
            seed: cfg.seed,
            epochs_run: run.history.epochs.len(),
            best_epoch: run.history.best_epoch,
            dataset_fingerprint: dataset::fingerprint(&series)?,
            labels: run.split.labels.classes.clone(),
            held_out: run.split.held_out.clone(),
            sessions: cfg.sessions.clone(),
            norm_stats: run.split.stats.clone(),
            head_mode: exp.train.head_mode,
        },
        model: run.model,
    };
    ck.save(&dir.join("checkpoint.hsa"))?;
    Ok(format!("test macro F1 {:.4}, accuracy {:.4} → {}", run.report.macro_f1, run.report.accuracy, dir.display()))
}

/// Sessions of `series` prepared the way the checkpoint was trained: same
/// normalization and segmentation.
fn checkpoint_sessions(ck: &Checkpoint, series: &[SensorSeries]) -> Result<Vec<Session>> {
    let prepared = match &ck.meta.norm_stats {
        Some(stats) => series.iter().map(|s| normalize(s, stats)).collect::<hsa_core::Result<Vec<_>>>()?,
        None => series.to_vec(),
    };
    Ok(build_sessions_all(&prepared, &ck.meta.sessions)?.sessions)
}

fn checkpoint_schema(cfg: &RunConfig, ck: &Checkpoint) -> Schema {
    Schema { placements: ck.model.config.placements.iter().map(|p| p.name.clone()).collect(), ..cfg.schema.clone() }
}

fn eval(cfg: &RunConfig, data: &Path, checkpoint: &Path, subjects: &[String], dir: &Path, log: &mut RunLog) -> Result<String> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut series = load_data(data, &checkpoint_schema(cfg, &ck), log)?;
    if !subjects.is_empty() {
        if let Some(s) = subjects.iter().find(|s| !series.iter().any(|x| &x.subject_id == *s)) {
            return Err(Error::Config(format!("unknown subject `{s}`")));
        }
        series.retain(|s| subjects.contains(&s.subject_id));
    }
    let labels = ck.labels();
    let known = |l: &u32| labels.index(*l).is_some();
    let sessions: Vec<Session> = checkpoint_sessions(&ck, &series)?
        .into_iter()
        .filter(|s| match ck.meta.head_mode {
            HeadMode::Session => known(&s.session_label) && !s.window_labels.iter().any(|l| ck.meta.held_out.contains(l)),
            HeadMode::Window => s.window_labels.iter().all(known),
        })
        .collect();
    if sessions.is_empty() {
        return Err(Error::Config("no sessions with known labels to evaluate".into()));
    }
    let report = evaluate(&ck.model, &sessions, ck.meta.head_mode, &labels)?;
    report::write_eval(dir, "eval", &report, &labels)?;
    Ok(format!("{} sessions: macro F1 {:.4}, accuracy {:.4}", sessions.len(), report.macro_f1, report.accuracy))
}

fn loso(cfg: &RunConfig, data: &Path, dir: &Path, log: &mut RunLog) -> Result<String> {
    let series = load_data(data, &cfg.schema, log)?;
    let exp = cfg.experiment();
    let result = run_loso(&series, &exp)?;
    let mut folds = String::from("subject,macro_f1,accuracy,epochs_run,best_epoch\n");
    let labels = LabelMap::from_series(&series, exp.sessions.null_label.as_slice());
    for f in &result.folds {
        log.line(format!("fold {}: macro F1 {:.4}, accuracy {:.4}", f.subject, f.report.macro_f1, f.report.accuracy));
        folds.push_str(&format!("{},{:?},{:?},{},{}\n", f.subject, f.report.macro_f1, f.report.accuracy, f.history.epochs.len(), f.history.best_epoch));
        report::write_eval(dir, &format!("fold_{}", f.subject), &f.report, &labels)?;
        report::write_text(&dir.join(format!("fold_{}_history.csv", f.subject)), &report::history_csv(&f.history))?;
    }
    report::write_text(&dir.join("folds.csv"), &folds)?;
    report::write_json(&dir.join("summary.json"), &result)?;
    Ok(format!("{} folds: mean macro F1 {:.4} ± {:.4}", result.folds.len(), result.mean_macro_f1, result.std_macro_f1))
}

/// Held-out classes: explicit ids, then configured ids, then a seeded draw
/// of `holdout_fraction` of the classes.
pub fn resolve_held_out(cfg: &RunConfig, series: &[SensorSeries], explicit: &[u32]) -> Vec<u32> {
    if !explicit.is_empty() {
        return explicit.to_vec();
    }
    if !cfg.openset.held_out_classes.is_empty() {
        return cfg.openset.held_out_classes.clone();
    }
    let classes = LabelMap::from_series(series, cfg.sessions.null_label.as_slice()).classes;
    let count = held_out_count(classes.len(), cfg.openset.holdout_fraction);
    choose_held_out(&classes, count, &mut rng_from_seed(cfg.seed))
}

fn openset(cfg: &RunConfig, data: &Path, alphas: &[f64], holdout: &[u32], dir: &Path, log: &mut RunLog) -> Result<String> {
    let series = load_data(data, &cfg.schema, log)?;
    let held = resolve_held_out(cfg, &series, holdout);
    let plan = hsa_core::data::SplitPlan { held_out_classes: held.clone(), ..cfg.split_plan(&series)? };
    let alphas = if alphas.is_empty() { cfg.openset.alphas.clone() } else { alphas.to_vec() };
    let exp = cfg.experiment();
    if exp.train.ae_mode == AeMode::Joint && exp.train.lambda_ae == 0.0 {
        log.line("warning: joint mode with lambda_ae = 0 leaves the autoencoder untrained");
    }
    log.line(format!("held out classes {held:?}, alpha grid {alphas:?}"));
    let run = run_openset(&series, &plan, &exp, &alphas)?;
    log_history(log, &run.history);
    write_history(dir, &run.history)?;

    let mut table = String::from("alpha,threshold,macro_f1,joint_accuracy,binary_accuracy\n");
    for r in &run.reports {
        let o = r.openset.expect("open-set report");
        table.push_str(&format!("{:?},{:?},{:?},{:?},{:?}\n", o.alpha, o.threshold, r.macro_f1, o.joint_accuracy, o.binary_accuracy));
        log.line(format!("alpha {:.2}: threshold {:.4}, macro F1 {:.4}, binary accuracy {:.4}", o.alpha, o.threshold, r.macro_f1, o.binary_accuracy));
    }
    report::write_text(&dir.join("openset.csv"), &table)?;
    let best = run.best();
    let best_alpha = best.openset.expect("open-set report").alpha;
    report::write_eval(dir, "openset_best", best, &run.split.labels)?;
    report::write_eval(dir, "openset_baseline", &run.baseline, &run.split.labels)?;
    let (best_f1, baseline_f1) = (best.macro_f1, run.baseline.macro_f1);

    let calibration = run.calibration.with_alpha(best_alpha)?;
    let mut scores = String::from("session_id,true_label,known,score,verdict\n");
    for s in &run.split.test {
        let inf = run.model.infer(&s.windows)?;
        let score = run.model.openset.reconstruction_score(&run.model.store, &inf.session_repr)?;
        let verdict = match calibration.verdict(score) {
            hsa_core::openset::Verdict::Known => "known",
            hsa_core::openset::Verdict::Unseen => "unseen",
        };
        scores.push_str(&format!("{},{},{},{score:?},{verdict}\n", s.id, s.session_label, run.split.labels.index(s.session_label).is_some()));
    }
    report::write_text(&dir.join("scores.csv"), &scores)?;
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    log.line(format!("mean score: known {:.4}, unseen {:.4}", mean(&run.known_scores), mean(&run.unseen_scores)));

    let ck = Checkpoint {
        calibration: Some(calibration),
        meta: TrainingMeta {
            seed: cfg.seed,
            epochs_run: run.history.epochs.len(),
            best_epoch: run.history.best_epoch,
            dataset_fingerprint: dataset::fingerprint(&series)?,
            labels: run.split.labels.classes.clone(),
            held_out: run.split.held_out.clone(),
            sessions: cfg.sessions.clone(),
            norm_stats: run.split.stats.clone(),
            head_mode: exp.train.head_mode,
        },
        model: run.model,
    };
    ck.save(&dir.join("checkpoint.hsa"))?;
    Ok(format!("best alpha {best_alpha}: open-set macro F1 {best_f1:.4} (always-known {baseline_f1:.4})"))
}

fn file_stem(session_id: &str) -> String {
    session_id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

fn attn(cfg: &RunConfig, data: &Path, checkpoint: &Path, ids: &[String], dir: &Path, log: &mut RunLog) -> Result<String> {
    let ck = Checkpoint::load(checkpoint)?;
    let series = load_data(data, &checkpoint_schema(cfg, &ck), log)?;
    let sessions = checkpoint_sessions(&ck, &series)?;
    let labels = ck.labels();
    let mut done = 0;
    let mut missing = Vec::new();
    for id in ids {
        let Some(s) = sessions.iter().find(|s| &s.id == id) else {
            missing.push(id.as_str());
            continue;
        };
        let map = AttentionMapExport::compute(&ck.model, s, &labels)?;
        let stem = format!("attn_{}", file_stem(id));
        let csv_path = dir.join(format!("{stem}.csv"));
        let f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        map.write_csv(std::io::BufWriter::new(f))?;
        report::write_text(&dir.join(format!("{stem}.svg")), &map.to_svg())?;
        log.line(format!("{id}: true {} predicted {}", map.true_label, map.predicted_label));
        done += 1;
    }
    if !missing.is_empty() {
        log.line(format!("skipped unknown sessions: {}", missing.join(", ")));
    }
    if done == 0 {
        let examples: Vec<&str> = sessions.iter().take(3).map(|s| s.id.as_str()).collect();
        return Err(Error::Config(format!("none of the requested sessions exist (ids look like {})", examples.join(", "))));
    }
    Ok(format!("exported {done} attention maps to {}", dir.display()))
}

fn gradcheck(cfg: &RunConfig, dir: &Path, log: &mut RunLog) -> Result<String> {
    let entries = gradient_suite(cfg.seed)?;
    let mut csv = String::from("op_name,shape,max_rel_err,max_abs_err,checked,tolerance,passed\n");
    for e in &entries {
        let shape = e.shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        csv.push_str(&format!("{},{shape},{:e},{:e},{},{:e},{}\n", e.op_name, e.max_rel_err, e.max_abs_err, e.checked, e.tolerance, e.passed()));
        log.line(format!("{:<28} {:>10} rel {:.2e}  {}", e.op_name, shape, e.max_rel_err, if e.passed() { "ok" } else { "FAIL" }));
    }
    report::write_text(&dir.join("gradcheck.csv"), &csv)?;
    let failed = entries.iter().filter(|e| !e.passed()).count();
    if failed > 0 {
        return Err(Error::Failed(format!("{failed} of {} gradient checks failed", entries.len())));
    }
    Ok(format!("{} gradient checks passed", entries.len()))
}
