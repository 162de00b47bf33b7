//! End-to-end drivers: a single split, leave-one-subject-out folds and
//! open-set evaluation over a grid of threshold multipliers.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{loso_plans, prepare_split, LabelMap, PreparedSplit, SensorSeries, Session, SessionConfig, SplitPlan};
use crate::encoder::{argmax, HsaModel, ModelConfig, ModelSettings};
use crate::metrics::{ConfusionMatrix, EvalReport, OpenSetMetrics};
use crate::openset::{reconstruction_scores, OpenSetCalibration, OpenSetLabel, Verdict};
use crate::train::{evaluate, session_representations, train, TrainConfig, TrainHistory};
use crate::{rng_from_seed, Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub sessions: SessionConfig,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub normalize: NormalizeConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizeConfig {
    /// Z-score with statistics of the training part of each split.
    pub enabled: bool,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        Self { enabled: true }
    }
}

/// Builds a model sized for `series`, `cfg.sessions` and `labels`,
/// initialized from `cfg.train.seed`.
pub fn build_model(series: &[SensorSeries], labels: &LabelMap, cfg: &ExperimentConfig) -> Result<HsaModel> {
    let first = series.first().ok_or_else(|| Error::Data("dataset is empty".into()))?;
    let config = ModelConfig {
        placements: first.placement_specs(),
        window_len: cfg.sessions.window_len,
        windows_per_session: cfg.sessions.windows_per_session,
        num_classes: labels.len(),
        settings: cfg.model.clone(),
    };
    HsaModel::new(config, &mut rng_from_seed(cfg.train.seed))
}

#[derive(Clone, Debug)]
pub struct SplitRun {
    pub model: HsaModel,
    pub split: PreparedSplit,
    pub history: TrainHistory,
    pub report: EvalReport,
}

/// Prepares `plan`, trains on its training part and scores the test part.
pub fn run_split(series: &[SensorSeries], plan: &SplitPlan, cfg: &ExperimentConfig) -> Result<SplitRun> {
    let split = prepare_split(series, plan, &cfg.sessions, cfg.normalize.enabled)?;
    if split.train.is_empty() {
        return Err(Error::Data("split produced no training sessions".into()));
    }
    if split.labels.len() < 2 {
        return Err(Error::Data(format!("need at least 2 known classes, found {}", split.labels.len())));
    }
    let mut model = build_model(series, &split.labels, cfg)?;
    let history = train(&mut model, &split.train, &split.val, &split.labels, &cfg.train)?;
    let known_test: Vec<Session> = split.test.iter().filter(|s| split.labels.index(s.session_label).is_some()).cloned().collect();
    let report = evaluate(&model, &known_test, cfg.train.head_mode, &split.labels)?;
    Ok(SplitRun { model, split, history, report })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub subject: String,
    pub report: EvalReport,
    pub history: TrainHistory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LosoReport {
    pub folds: Vec<FoldReport>,
    pub mean_macro_f1: f64,
    /// Population standard deviation over folds.
    pub std_macro_f1: f64,
}

/// One fold per subject. The next subject in sorted order serves as the
/// validation subject when there are at least three subjects.
pub fn run_loso(series: &[SensorSeries], cfg: &ExperimentConfig) -> Result<LosoReport> {
    let plans = loso_plans(series, true)?;
    let mut folds = Vec::with_capacity(plans.len());
    for (subject, plan) in plans {
        let run = run_split(series, &plan, cfg)?;
        folds.push(FoldReport { subject, report: run.report, history: run.history });
    }
    let scores: Vec<f64> = folds.iter().map(|f| f.report.macro_f1).collect();
    let (mean, std) = mean_std(&scores);
    Ok(LosoReport { folds, mean_macro_f1: mean, std_macro_f1: std })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

/// Open-set scores over `known + 1` labels, the last one being unseen.
/// `truth[i]` is `None` for sessions of held-out classes.
pub fn openset_report(known: usize, truth: &[Option<usize>], probs: &[Vec<f64>], scores: &[f64], calib: &OpenSetCalibration) -> Result<EvalReport> {
    if truth.len() != probs.len() || truth.len() != scores.len() {
        return Err(Error::dim("openset_report", format!("{} labels, {} probabilities, {} scores", truth.len(), probs.len(), scores.len())));
    }
    let mut confusion = ConfusionMatrix::new(known + 1);
    let mut binary_correct = 0usize;
    for ((t, p), s) in truth.iter().zip(probs).zip(scores) {
        let verdict = calib.verdict(*s);
        let predicted = match verdict {
            Verdict::Unseen => known,
            Verdict::Known => argmax(p),
        };
        confusion.record(t.unwrap_or(known), predicted)?;
        binary_correct += usize::from((verdict == Verdict::Unseen) == t.is_none());
    }
    let mut report = EvalReport::from_confusion(confusion);
    report.openset = Some(OpenSetMetrics {
        alpha: calib.alpha,
        threshold: calib.threshold,
        binary_accuracy: if truth.is_empty() { 0.0 } else { binary_correct as f64 / truth.len() as f64 },
        joint_accuracy: report.accuracy,
    });
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct OpenSetRun {
    pub model: HsaModel,
    pub split: PreparedSplit,
    pub history: TrainHistory,
    /// Calibration at the first alpha; other alphas share mean and std.
    pub calibration: OpenSetCalibration,
    /// One report per alpha, in grid order.
    pub reports: Vec<EvalReport>,
    /// Every test session predicted as a known class.
    pub baseline: EvalReport,
    pub known_scores: Vec<f64>,
    pub unseen_scores: Vec<f64>,
    pub predictions: Vec<OpenSetLabel>,
}

impl OpenSetRun {
    pub fn best(&self) -> &EvalReport {
        self.reports.iter().fold(&self.reports[0], |b, r| if r.macro_f1 > b.macro_f1 { r } else { b })
    }
}

/// Trains on known classes, calibrates the reconstruction threshold on the
/// training sessions and scores the test sessions (known and held out)
/// for every alpha.
pub fn run_openset(series: &[SensorSeries], plan: &SplitPlan, cfg: &ExperimentConfig, alphas: &[f64]) -> Result<OpenSetRun> {
    if !plan.is_openset() {
        return Err(Error::Config("open-set evaluation needs at least one held-out class".into()));
    }
    if alphas.is_empty() {
        return Err(Error::Config("alpha grid is empty".into()));
    }
    let run = run_split(series, plan, cfg)?;
    let (model, split, history) = (run.model, run.split, run.history);
    let train_scores = reconstruction_scores(&model, &session_representations(&model, &split.train)?)?;
    let base = OpenSetCalibration::from_losses(&train_scores, alphas[0])?;

    let known = split.labels.len();
    let mut truth = Vec::with_capacity(split.test.len());
    let mut probs = Vec::with_capacity(split.test.len());
    let mut scores = Vec::with_capacity(split.test.len());
    for s in &split.test {
        let inf = model.infer(&s.windows)?;
        scores.push(model.openset.reconstruction_score(&model.store, &inf.session_repr)?);
        probs.push(inf.session_probs);
        truth.push(split.labels.index(s.session_label));
    }
    let reports = alphas
        .iter()
        .map(|&a| openset_report(known, &truth, &probs, &scores, &base.with_alpha(a)?))
        .collect::<Result<Vec<_>>>()?;
    let never = OpenSetCalibration { threshold: f64::INFINITY, ..base };
    let baseline = openset_report(known, &truth, &probs, &scores, &never)?;
    let predictions = truth.iter().zip(&probs).zip(&scores).map(|((_, p), s)| crate::openset::open_set_decision(*s, p, &base)).collect();
    let (mut known_scores, mut unseen_scores) = (Vec::new(), Vec::new());
    for (t, s) in truth.iter().zip(&scores) {
        if t.is_some() { known_scores.push(*s) } else { unseen_scores.push(*s) }
    }
    Ok(OpenSetRun { model, split, history, calibration: base, reports, baseline, known_scores, unseen_scores, predictions })
}
