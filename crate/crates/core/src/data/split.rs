use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{build_sessions_all, normalize, NormStats, SensorSeries, Session, SessionConfig};
use crate::{Error, Result, Rng};

/// How timesteps are assigned to train/validation/test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Partition {
    /// Whole subjects go to validation or test; everyone else trains.
    Subjects {
        #[serde(default)]
        val: Vec<String>,
        test: Vec<String>,
    },
    /// Every series is cut in time: the leading part trains, then
    /// validation, then test (single-subject datasets).
    Fraction { val: f64, test: f64 },
}

/// A benchmark split, or an open-set split when `held_out_classes` is
/// non-empty. Leave-one-subject-out folds are generated by [`loso_plans`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub partition: Partition,
    #[serde(default)]
    pub held_out_classes: Vec<u32>,
}

impl SplitPlan {
    pub fn subjects(val: &[&str], test: &[&str]) -> Self {
        Self {
            partition: Partition::Subjects {
                val: val.iter().map(|s| String::from(*s)).collect(),
                test: test.iter().map(|s| String::from(*s)).collect(),
            },
            held_out_classes: Vec::new(),
        }
    }

    pub fn is_openset(&self) -> bool {
        !self.held_out_classes.is_empty()
    }
}

/// Maps dataset label ids to contiguous model class indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub classes: Vec<u32>,
}

impl LabelMap {
    pub fn new(mut classes: Vec<u32>) -> Self {
        classes.sort_unstable();
        classes.dedup();
        Self { classes }
    }

    /// Distinct labels present in `series`, minus `excluded`.
    pub fn from_series(series: &[SensorSeries], excluded: &[u32]) -> Self {
        let set: BTreeSet<u32> = series.iter().flat_map(|s| s.labels.iter().copied()).filter(|l| !excluded.contains(l)).collect();
        Self { classes: set.into_iter().collect() }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index(&self, label: u32) -> Option<usize> {
        self.classes.binary_search(&label).ok()
    }

    pub fn label(&self, index: usize) -> Option<u32> {
        self.classes.get(index).copied()
    }
}

#[derive(Clone, Debug)]
pub struct PreparedSplit {
    pub train: Vec<Session>,
    pub val: Vec<Session>,
    pub test: Vec<Session>,
    /// Statistics from the training part, when normalization is on.
    pub stats: Option<NormStats>,
    /// Known classes.
    pub labels: LabelMap,
    pub held_out: Vec<u32>,
    /// Series parts too short for one session.
    pub skipped: usize,
}

/// `round(fraction · classes)`, clamped to `[1, classes − 1]`.
pub fn held_out_count(classes: usize, fraction: f64) -> usize {
    let n = libm::round(fraction * classes as f64) as usize;
    n.clamp(1, classes.saturating_sub(1).max(1))
}

/// Random subset of `classes` of size `count`, sorted.
pub fn choose_held_out(classes: &[u32], count: usize, rng: &mut Rng) -> Vec<u32> {
    let mut c = classes.to_vec();
    c.shuffle(rng);
    c.truncate(count);
    c.sort_unstable();
    c
}

/// One fold per subject in sorted order. With `with_validation` and at least
/// three subjects the next subject (cyclically) is the validation subject.
pub fn loso_plans(series: &[SensorSeries], with_validation: bool) -> Result<Vec<(String, SplitPlan)>> {
    let subjects: Vec<String> = series.iter().map(|s| s.subject_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    if subjects.len() < 2 {
        return Err(Error::Config(format!("leave-one-subject-out needs at least 2 subjects, found {}", subjects.len())));
    }
    Ok(subjects
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let val = if with_validation && subjects.len() >= 3 {
                alloc::vec![subjects[(i + 1) % subjects.len()].clone()]
            } else {
                Vec::new()
            };
            (s.clone(), SplitPlan { partition: Partition::Subjects { val, test: alloc::vec![s.clone()] }, held_out_classes: Vec::new() })
        })
        .collect())
}

fn touches(s: &Session, held_out: &[u32]) -> bool {
    s.window_labels.iter().any(|l| held_out.contains(l))
}

/// Partitions `series`, fits normalization on the training part only,
/// builds sessions and applies the open-set rules:
///
/// * training and validation never contain a window of a held-out class;
/// * every session whose label is held out, from any subject, joins test;
/// * test sessions that contain held-out windows under a known majority
///   are dropped as ambiguous.
pub fn prepare_split(series: &[SensorSeries], plan: &SplitPlan, cfg: &SessionConfig, normalize_inputs: bool) -> Result<PreparedSplit> {
    cfg.validate()?;
    let all_labels = LabelMap::from_series(series, cfg.null_label.as_slice());
    for c in &plan.held_out_classes {
        if all_labels.index(*c).is_none() {
            return Err(Error::Config(format!("held-out class {c} does not occur in the data")));
        }
    }
    let held_out = LabelMap::new(plan.held_out_classes.clone()).classes;

    let (mut train_s, mut val_s, mut test_s) = (Vec::new(), Vec::new(), Vec::new());
    match &plan.partition {
        Partition::Subjects { val, test } => {
            let known: BTreeSet<&str> = series.iter().map(|s| s.subject_id.as_str()).collect();
            for s in val.iter().chain(test) {
                if !known.contains(s.as_str()) {
                    return Err(Error::Config(format!("unknown subject `{s}` in split plan")));
                }
            }
            if let Some(s) = val.iter().find(|s| test.contains(s)) {
                return Err(Error::Config(format!("subject `{s}` is both validation and test")));
            }
            for s in series {
                if test.contains(&s.subject_id) {
                    test_s.push(s.clone());
                } else if val.contains(&s.subject_id) {
                    val_s.push(s.clone());
                } else {
                    train_s.push(s.clone());
                }
            }
        }
        Partition::Fraction { val, test } => {
            if !(*val >= 0.0 && *test >= 0.0 && val + test < 1.0) {
                return Err(Error::Config(format!("fractions val={val}, test={test} must be ≥ 0 and sum below 1")));
            }
            for s in series {
                let n = s.len();
                let n_test = libm::round(n as f64 * test) as usize;
                let n_val = libm::round(n as f64 * val) as usize;
                let n_train = n - n_test - n_val;
                train_s.push(s.slice(0, n_train));
                val_s.push(s.slice(n_train, n_train + n_val));
                test_s.push(s.slice(n_train + n_val, n));
            }
        }
    }
    if train_s.is_empty() {
        return Err(Error::Config("split leaves no training data".into()));
    }

    let stats = if normalize_inputs {
        let mut excluded = held_out.clone();
        excluded.extend(cfg.null_label);
        let st = NormStats::from_series_excluding(&train_s, &excluded)?;
        for part in [&mut train_s, &mut val_s, &mut test_s] {
            for s in part.iter_mut() {
                *s = normalize(s, &st)?;
            }
        }
        Some(st)
    } else {
        None
    };

    let build = |part: &[SensorSeries]| build_sessions_all(part, cfg);
    let (tr, va, te) = (build(&train_s)?, build(&val_s)?, build(&test_s)?);
    let skipped = tr.skipped + va.skipped + te.skipped;
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let mut moved = Vec::new();
    for s in tr.sessions {
        if held_out.contains(&s.session_label) {
            moved.push(s);
        } else if !touches(&s, &held_out) {
            train.push(s);
        }
    }
    for s in va.sessions {
        if held_out.contains(&s.session_label) {
            moved.push(s);
        } else if !touches(&s, &held_out) {
            val.push(s);
        }
    }
    for s in te.sessions {
        if held_out.contains(&s.session_label) || !touches(&s, &held_out) {
            test.push(s);
        }
    }
    test.extend(moved);

    let labels = LabelMap::new(all_labels.classes.iter().copied().filter(|c| !held_out.contains(c)).collect());
    Ok(PreparedSplit { train, val, test, stats, labels, held_out, skipped })
}
