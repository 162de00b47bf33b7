//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use hsa::attention_map::AttentionMapExport;
use hsa::checkpoint::{Checkpoint, TrainingMeta};
use hsa::cli::resolve_held_out;
use hsa::config::RunConfig;
use hsa::dataset::{self, Schema};
use hsa::report::history_csv;
use hsa_core::attention::{aggregator_attention, modular_block, scaled_dot_product_attention, AggregatorParams, ModularBlockParams};
use hsa_core::data::{session_count, synth_generate, SensorSeries, SessionConfig, SplitPlan};
use hsa_core::diagnostics::gradient_suite;
use hsa_core::experiment::{run_loso, run_openset, run_split};
use hsa_core::layers::Forward;
use hsa_core::metrics::{ConfusionMatrix, EvalReport};
use hsa_core::numerics::{ParamStore, Tape, Tensor};
use hsa_core::openset::{kl_divergence, OpenSetCalibration};
use hsa_core::train::evaluate;
use hsa_core::{rng_from_seed, Rng};
use rand::seq::SliceRandom;
use rand::Rng as _;

mod tol {
    use std::time::Duration;

    pub const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
    pub const GRADCHECK_MIN_PRIMITIVES: usize = 20;
    pub const GRADCHECK_MIN_BLOCKS: usize = 6;
    pub const INVARIANT_CASES: usize = 1000;
    pub const WEIGHT_SUM: f64 = 1e-6;
    pub const ENVELOPE: f64 = 1e-12;
    pub const EQUIVARIANCE: f64 = 1e-9;
    pub const KL_ZERO: f64 = 1e-12;
    pub const KL_UNIT_SHIFT: f64 = 0.5;
    pub const THRESHOLD_EXAMPLE: f64 = 1.5918;
    pub const THRESHOLD_DIGITS: f64 = 1e-4;
    pub const SESSION_COUNT_CASES: usize = 200;
    pub const CLOSED_SET_F1: f64 = 0.90;
    pub const CLOSED_SET_EPOCHS: usize = 50;
    pub const CLOSED_SET_BUDGET: Duration = Duration::from_secs(600);
    pub const LOSO_F1: f64 = 0.85;
    pub const OPENSET_MARGIN: f64 = 0.1;
    pub const DETERMINISM_EPOCHS: usize = 3;
    pub const CSV_ROUND_TRIP: f64 = 1e-9;
    pub const ATTENTION_CSV: f64 = 1e-6;
    pub const ATTENTION_SUM: f64 = 1e-6;
}

const CLOSED_SET: &str = include_str!("../configs/closed_set.toml");
const LOSO: &str = include_str!("../configs/loso.toml");
const OPENSET: &str = include_str!("../configs/openset.toml");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Check = fn() -> Result<Outcome, String>;
type Probe = (Vec<f64>, Vec<f64>, Vec<f64>);

fn main() -> ExitCode {
    let checks: [(&str, Check); 8] = [
        ("gradient checks", gradient_checks),
        ("attention invariants", attention_invariants),
        ("small-instance oracles", small_oracles),
        ("closed-set synthetic", closed_set),
        ("synthetic LOSO", loso),
        ("open-set synthetic", open_set),
        ("determinism and round-trips", determinism),
        ("attention map export", attention_export),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let start = Instant::now();
        let result = check().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        let status = if result.pass { "PASS" } else { "FAIL" };
        println!("{status} {name}: {} [{:.1}s]", result.detail, start.elapsed().as_secs_f64());
        failed += usize::from(!result.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn config(text: &str) -> Result<RunConfig, String> {
    RunConfig::from_toml(text).map_err(err)
}

fn series(cfg: &RunConfig) -> Result<Vec<SensorSeries>, String> {
    synth_generate(&cfg.synth, cfg.seed).map_err(err)
}

fn gradient_checks() -> Result<Outcome, String> {
    let start = Instant::now();
    let entries = gradient_suite(42).map_err(err)?;
    let elapsed = start.elapsed();
    let blocks = entries.iter().filter(|e| e.tolerance == hsa_core::diagnostics::BLOCK_TOLERANCE).count();
    let primitives = entries.len() - blocks;
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.op_name.as_str()).collect();
    let worst = entries.iter().map(|e| e.max_rel_err / e.tolerance).fold(0.0, f64::max);
    let pass = failed.is_empty() && primitives >= tol::GRADCHECK_MIN_PRIMITIVES && blocks >= tol::GRADCHECK_MIN_BLOCKS && elapsed < tol::GRADCHECK_BUDGET;
    Ok(outcome(
        pass,
        format!("{primitives} primitive + {blocks} block checks, worst error at {:.2} of tolerance, failed {failed:?}, {:.1}s", worst, elapsed.as_secs_f64()),
    ))
}

fn uniform_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()
}

fn permute_rows(x: &[f64], d: usize, perm: &[usize]) -> Vec<f64> {
    perm.iter().flat_map(|&r| x[r * d..(r + 1) * d].iter().copied()).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn attention_invariants() -> Result<Outcome, String> {
    let mut rng = rng_from_seed(2024);
    let (mut sum_err, mut envelope_err, mut equi_err, mut inv_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..tol::INVARIANT_CASES {
        let t = rng.random_range(1..10);
        let dk = rng.random_range(1..9);
        let dv = rng.random_range(1..6);
        let (q, k, v) = (uniform_vec(&mut rng, t * dk), uniform_vec(&mut rng, t * dk), uniform_vec(&mut rng, t * dv));
        let mut tape = Tape::new();
        let qv = tape.constant(&Tensor::new(vec![t, dk], q).map_err(err)?).map_err(err)?;
        let kv = tape.constant(&Tensor::new(vec![t, dk], k).map_err(err)?).map_err(err)?;
        let vv = tape.constant(&Tensor::new(vec![t, dv], v.clone()).map_err(err)?).map_err(err)?;
        let (out, w) = scaled_dot_product_attention(&mut tape, qv, kv, vv).map_err(err)?;
        for row in tape.value(w).chunks(t) {
            sum_err = sum_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        for (i, o) in tape.value(out).iter().enumerate() {
            let col = i % dv;
            let (lo, hi) = (0..t).map(|r| v[r * dv + col]).fold((f64::MAX, f64::MIN), |(l, h), x| (l.min(x), h.max(x)));
            envelope_err = envelope_err.max((lo - o).max(o - hi).max(0.0));
        }
    }
    for _ in 0..tol::INVARIANT_CASES {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let d = heads * rng.random_range(1..4);
        let t = rng.random_range(2..8);
        let seed = rng.random();
        let mut perm: Vec<usize> = (0..t).collect();
        perm.shuffle(&mut rng);
        let x = uniform_vec(&mut rng, t * d);

        let mut store = ParamStore::new();
        let block = ModularBlockParams::new(&mut store, &mut rng_from_seed(seed), "b", d, heads, 2 * d).map_err(err)?;
        let agg = AggregatorParams::new(&mut store, &mut rng_from_seed(seed ^ 1), "a", d, 2 * d).map_err(err)?;
        let run = |x: &[f64]| -> Result<Probe, String> {
            let mut fwd = Forward::eval(&store);
            let xv = fwd.constant(&Tensor::new(vec![t, d], x.to_vec()).map_err(err)?).map_err(err)?;
            let y = modular_block(&mut fwd, xv, &block).map_err(err)?;
            let pooled = aggregator_attention(&mut fwd, xv, &agg).map_err(err)?;
            Ok((fwd.tape.value(y).to_vec(), fwd.tape.value(pooled.output).to_vec(), pooled.weights))
        };
        let (y, pooled, w) = run(&x)?;
        let (yp, pooled_p, wp) = run(&permute_rows(&x, d, &perm))?;
        equi_err = equi_err.max(max_diff(&permute_rows(&y, d, &perm), &yp));
        inv_err = inv_err.max(max_diff(&pooled, &pooled_p)).max(max_diff(&permute_rows(&w, 1, &perm), &wp));
        sum_err = sum_err.max((w.iter().sum::<f64>() - 1.0).abs());
    }
    let pass = sum_err <= tol::WEIGHT_SUM && envelope_err <= tol::ENVELOPE && equi_err <= tol::EQUIVARIANCE && inv_err <= tol::EQUIVARIANCE;
    Ok(outcome(
        pass,
        format!(
            "{} cases each: weight sum err {sum_err:.1e}, envelope excess {envelope_err:.1e}, equivariance err {equi_err:.1e}, pooling invariance err {inv_err:.1e}",
            tol::INVARIANT_CASES
        ),
    ))
}

fn small_oracles() -> Result<Outcome, String> {
    let mut notes = Vec::new();
    let kl0 = kl_divergence(&[0.0, 0.0], &[0.0, 0.0]);
    let kl1 = kl_divergence(&[1.0], &[0.0]);
    let kl_ok = kl0.abs() <= tol::KL_ZERO && (kl1 - tol::KL_UNIT_SHIFT).abs() <= tol::KL_ZERO;
    notes.push(format!("KL {kl0:.1e}/{kl1:.4}"));

    let losses = [1.0, 2.0, 3.0];
    let at_zero = OpenSetCalibration::from_losses(&losses, 0.0).map_err(err)?.threshold;
    let at_half = OpenSetCalibration::from_losses(&losses, 0.5).map_err(err)?.threshold;
    let th_ok = (at_zero - 2.0).abs() <= tol::KL_ZERO && (at_half - tol::THRESHOLD_EXAMPLE).abs() <= tol::THRESHOLD_DIGITS;
    notes.push(format!("thresholds {at_zero:.4}/{at_half:.4}"));

    let f1 = EvalReport::from_confusion(ConfusionMatrix::from_counts(vec![vec![1, 1], vec![1, 1]]).map_err(err)?).macro_f1;
    let f1_ok = f1 == 0.5;
    notes.push(format!("F1 {f1}"));

    let mut rng = rng_from_seed(7);
    let mut count_ok = true;
    for _ in 0..tol::SESSION_COUNT_CASES {
        let len = rng.random_range(0..2000);
        let wl = rng.random_range(1..40);
        let n = rng.random_range(1..6);
        let stride = rng.random_range(1..80);
        let cfg = SessionConfig { window_len: wl, windows_per_session: n, stride: Some(stride), null_label: None };
        let span = cfg.span();
        let expected = if len < span { 0 } else { (len - span) / stride + 1 };
        count_ok &= session_count(len, span, cfg.stride()) == expected;
    }
    notes.push(format!("{} session counts {}", tol::SESSION_COUNT_CASES, if count_ok { "match" } else { "MISMATCH" }));
    Ok(outcome(kl_ok && th_ok && f1_ok && count_ok, notes.join(", ")))
}

fn closed_set() -> Result<Outcome, String> {
    let cfg = config(CLOSED_SET)?;
    let data = series(&cfg)?;
    let start = Instant::now();
    let run = run_split(&data, &cfg.split_plan(&data).map_err(err)?, &cfg.experiment()).map_err(err)?;
    let elapsed = start.elapsed();
    let epochs = run.history.epochs.len();
    let pass = run.report.macro_f1 >= tol::CLOSED_SET_F1 && epochs <= tol::CLOSED_SET_EPOCHS && elapsed < tol::CLOSED_SET_BUDGET;
    Ok(outcome(
        pass,
        format!("test macro F1 {:.4} (>= {}), {epochs} epochs, {:.1}s", run.report.macro_f1, tol::CLOSED_SET_F1, elapsed.as_secs_f64()),
    ))
}

fn loso() -> Result<Outcome, String> {
    let cfg = config(LOSO)?;
    let data = series(&cfg)?;
    let mut exp = cfg.experiment();
    exp.normalize.enabled = true;
    let normalized = run_loso(&data, &exp).map_err(err)?;
    exp.normalize.enabled = false;
    let raw = run_loso(&data, &exp).map_err(err)?;
    let (a, b) = (normalized.mean_macro_f1, raw.mean_macro_f1);
    let pass = a >= tol::LOSO_F1 && a >= b;
    Ok(outcome(pass, format!("{} folds: mean macro F1 {a:.4} normalized, {b:.4} without normalization", normalized.folds.len())))
}

fn open_set() -> Result<Outcome, String> {
    let cfg = config(OPENSET)?;
    let data = series(&cfg)?;
    let held = resolve_held_out(&cfg, &data, &[]);
    let plan = SplitPlan { held_out_classes: held.clone(), ..cfg.split_plan(&data).map_err(err)? };
    let run = run_openset(&data, &plan, &cfg.experiment(), &cfg.openset.alphas).map_err(err)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (known, unseen) = (mean(&run.known_scores), mean(&run.unseen_scores));
    let best = run.best();
    let alpha = best.openset.map_or(f64::NAN, |o| o.alpha);
    let pass = !run.unseen_scores.is_empty() && unseen > known && best.macro_f1 >= run.baseline.macro_f1 + tol::OPENSET_MARGIN;
    Ok(outcome(
        pass,
        format!(
            "held out {held:?}; mean score unseen {unseen:.4} vs known {known:.4}; best macro F1 {:.4} at alpha {alpha} vs always-known {:.4}",
            best.macro_f1, run.baseline.macro_f1
        ),
    ))
}

fn short_config() -> Result<RunConfig, String> {
    let mut cfg = config(CLOSED_SET)?;
    cfg.train.epochs = tol::DETERMINISM_EPOCHS;
    Ok(cfg)
}

fn checkpoint_for(cfg: &RunConfig, data: &[SensorSeries], run: hsa_core::experiment::SplitRun) -> Result<Checkpoint, String> {
    Ok(Checkpoint {
        calibration: None,
        meta: TrainingMeta {
            seed: cfg.seed,
            epochs_run: run.history.epochs.len(),
            best_epoch: run.history.best_epoch,
            dataset_fingerprint: dataset::fingerprint(data).map_err(err)?,
            labels: run.split.labels.classes.clone(),
            held_out: run.split.held_out.clone(),
            sessions: cfg.sessions.clone(),
            norm_stats: run.split.stats.clone(),
            head_mode: cfg.train.head_mode,
        },
        model: run.model,
    })
}

fn determinism() -> Result<Outcome, String> {
    let cfg = short_config()?;
    let data = series(&cfg)?;
    let plan = cfg.split_plan(&data).map_err(err)?;
    let first = run_split(&data, &plan, &cfg.experiment()).map_err(err)?;
    let second = run_split(&data, &plan, &cfg.experiment()).map_err(err)?;
    let history_same = history_csv(&first.history).into_bytes() == history_csv(&second.history).into_bytes();

    let test = first.split.test.clone();
    let labels = first.split.labels.clone();
    let f1 = first.report.macro_f1;
    let ck = checkpoint_for(&cfg, &data, first)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("model.hsa");
    ck.save(&path).map_err(err)?;
    let loaded = Checkpoint::load(&path).map_err(err)?;
    let f1_loaded = evaluate(&loaded.model, &test, loaded.meta.head_mode, &labels).map_err(err)?.macro_f1;
    let checkpoint_same = f1_loaded == f1;

    let csv_path = dir.path().join("data.csv");
    dataset::export(&data, &csv_path).map_err(err)?;
    let back = dataset::ingest(&csv_path, &Schema::default()).map_err(err)?;
    let mut csv_err = if back.len() == data.len() { 0.0f64 } else { f64::INFINITY };
    for (a, b) in data.iter().zip(&back) {
        if a.subject_id != b.subject_id || a.labels != b.labels || a.placements.len() != b.placements.len() {
            csv_err = f64::INFINITY;
        }
        for (p, q) in a.placements.iter().zip(&b.placements) {
            csv_err = if p.values.len() == q.values.len() { csv_err.max(max_diff(&p.values, &q.values)) } else { f64::INFINITY };
        }
    }
    let pass = history_same && checkpoint_same && csv_err <= tol::CSV_ROUND_TRIP;
    Ok(outcome(
        pass,
        format!("history identical: {history_same}; checkpoint F1 {f1:.6} -> {f1_loaded:.6}; CSV round-trip max error {csv_err:.1e}"),
    ))
}

fn attention_export() -> Result<Outcome, String> {
    let cfg = short_config()?;
    let data = series(&cfg)?;
    let run = run_split(&data, &cfg.split_plan(&data).map_err(err)?, &cfg.experiment()).map_err(err)?;
    let session = run.split.test.first().ok_or("no test sessions")?;
    let inference = run.model.infer(&session.windows).map_err(err)?;
    let map = AttentionMapExport::from_inference(session, &inference, &run.model, &run.split.labels);

    let mut buf = Vec::new();
    map.write_csv(&mut buf).map_err(err)?;
    let mut reader = csv::Reader::from_reader(buf.as_slice());
    let (mut window_vals, mut session_vals) = (vec![Vec::new(); map.windows.len()], Vec::new());
    for rec in reader.records() {
        let rec = rec.map_err(err)?;
        let w: f64 = rec[5].parse().map_err(err)?;
        let i: usize = rec[2].parse().map_err(err)?;
        match &rec[1] {
            "window" => window_vals[i].push(w),
            "session" => session_vals.push(w),
            other => return Err(format!("unexpected block `{other}`")),
        }
    }
    let mut csv_err = 0.0f64;
    let mut sum_err = 0.0f64;
    for r in &inference.records {
        let exported = match r.block {
            hsa_core::attention::AttentionBlock::Window(i) => &window_vals[i],
            hsa_core::attention::AttentionBlock::Session => &session_vals,
        };
        csv_err = if exported.len() == r.weights.len() { csv_err.max(max_diff(exported, &r.weights)) } else { f64::INFINITY };
        sum_err = sum_err.max((exported.iter().sum::<f64>() - 1.0).abs());
    }

    let svg = map.to_svg();
    let doc = roxmltree::Document::parse(&svg).map_err(err)?;
    let svg_ok = doc.root_element().has_tag_name("svg")
        && doc.descendants().all(|n| n.attributes().all(|a| a.name() != "href"))
        && !svg.contains("href")
        && !svg.contains("url(");
    let pass = csv_err <= tol::ATTENTION_CSV && sum_err <= tol::ATTENTION_SUM && svg_ok && !inference.records.is_empty();
    Ok(outcome(
        pass,
        format!("{} attention groups: CSV error {csv_err:.1e}, sum error {sum_err:.1e}, SVG well-formed and self-contained: {svg_ok}", inference.records.len()),
    ))
}
