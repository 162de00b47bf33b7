//! Finite-difference gradient suite over every tape primitive and every
//! composed block, at a tiny model size.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{aggregator_attention, modular_block, AggregatorParams, ModularBlockParams};
use crate::data::Window;
use crate::encoder::{HsaModel, ModelConfig, ModelSettings, PlacementSpec};
use crate::layers::{Forward, LAYER_NORM_EPS};
use crate::numerics::gradcheck::{check_inputs, check_params, GradCheck, DEFAULT_STEP};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::openset::{Latent, OpenSetHead};
use crate::{rng_from_seed, Result, Rng};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const BLOCK_TOLERANCE: f64 = 1e-3;
/// Coordinates probed per parameter tensor in block checks.
pub const PROBES_PER_TENSOR: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub op_name: String,
    /// Shape of the primary input or of the block input.
    pub shape: Vec<usize>,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckEntry {
    fn new(op_name: &str, shape: &[usize], report: GradCheck, tolerance: f64) -> Self {
        Self {
            op_name: op_name.to_string(),
            shape: shape.to_vec(),
            max_rel_err: report.max_rel_err,
            max_abs_err: report.max_abs_err,
            checked: report.checked,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tolerance
    }
}

/// Tiny hierarchy used by the block-level checks: two placements, two
/// windows of four steps, `d_model = 8`, two heads, one block per stack.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        placements: vec![PlacementSpec { name: "wrist".into(), channels: 3 }, PlacementSpec { name: "ankle".into(), channels: 2 }],
        window_len: 4,
        windows_per_session: 2,
        num_classes: 3,
        settings: ModelSettings {
            d_model: 8,
            heads: 2,
            blocks: 1,
            session_blocks: None,
            d_ff: Some(16),
            latent_dim: 3,
            decoder_hidden: vec![5, 6],
            ..ModelSettings::default()
        },
    }
}

fn normal(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Standard normal values pushed at least `gap` away from every point in
/// `kinks`.
fn away_from(shape: &[usize], kinks: &[f64], gap: f64, rng: &mut Rng) -> Tensor {
    let mut t = normal(shape, rng);
    for v in t.data_mut() {
        for k in kinks {
            if (*v - k).abs() < gap {
                *v = k + if *v >= *k { gap } else { -gap };
            }
        }
    }
    t
}

/// `sum(out ⊙ r)`, so every output coordinate carries a distinct weight.
fn probe(tape: &mut Tape, out: Var, r: &[f64]) -> Result<Var> {
    let weighted = tape.mul_const(out, r[..tape.value(out).len()].to_vec())?;
    tape.sum(weighted)
}

fn random_weights(rng: &mut Rng) -> Vec<f64> {
    (0..256).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn primitives(rng: &mut Rng) -> Result<Vec<GradCheckEntry>> {
    type Op = fn(&mut Tape, &[Var]) -> Result<Var>;
    let r = random_weights(rng);
    let a23 = normal(&[2, 3], rng);
    let b34 = normal(&[3, 4], rng);
    let c43 = normal(&[4, 3], rng);
    let d23 = normal(&[2, 3], rng);
    let bias = normal(&[3], rng);
    let gamma = normal(&[3], rng);
    let kinked = away_from(&[3, 3], &[0.0], 0.05, rng);
    let clamped = away_from(&[3, 3], &[-0.5, 0.5], 0.05, rng);
    let a33 = normal(&[3, 3], rng);

    let cases: Vec<(&str, Vec<Tensor>, Op)> = vec![
        ("matmul", vec![a23.clone(), b34.clone()], |t, v| t.matmul(v[0], v[1])),
        ("matmul_nt", vec![a23.clone(), c43.clone()], |t, v| t.matmul_nt(v[0], v[1])),
        ("add", vec![a23.clone(), d23.clone()], |t, v| t.add(v[0], v[1])),
        ("sub", vec![a23.clone(), d23.clone()], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![a23.clone(), d23.clone()], |t, v| t.mul(v[0], v[1])),
        ("add_bias", vec![a23.clone(), bias.clone()], |t, v| t.add_bias(v[0], v[1])),
        ("scale", vec![a23.clone()], |t, v| t.scale(v[0], -1.7)),
        ("add_scalar", vec![a23.clone()], |t, v| t.add_scalar(v[0], 0.3)),
        ("mul_const", vec![a23.clone()], |t, v| t.mul_const(v[0], vec![0.5, -2.0, 0.0, 1.0, 3.0, -0.25])),
        ("relu", vec![kinked.clone()], |t, v| t.relu(v[0])),
        ("exp", vec![a23.clone()], |t, v| t.exp(v[0])),
        ("clamp", vec![clamped.clone()], |t, v| t.clamp(v[0], -0.5, 0.5)),
        ("softmax_rows", vec![a33.clone()], |t, v| t.softmax(v[0], 1)),
        ("softmax_cols", vec![a33.clone()], |t, v| t.softmax(v[0], 0)),
        ("layer_norm", vec![a23.clone(), gamma.clone(), bias.clone()], |t, v| t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)),
        ("transpose", vec![a23.clone()], |t, v| t.transpose(v[0])),
        ("concat_rows", vec![a23.clone(), d23.clone()], |t, v| t.concat_rows(&[v[0], v[1]])),
        ("concat_cols", vec![a23.clone(), c43.clone().reshape(vec![2, 6])?], |t, v| t.concat_cols(&[v[0], v[1]])),
        ("sum", vec![a23.clone()], |t, v| t.sum(v[0])),
        ("mean", vec![a23.clone()], |t, v| t.mean(v[0])),
        ("reshape", vec![a23.clone()], |t, v| t.reshape(v[0], vec![3, 2])),
        ("softmax_cross_entropy", vec![a33.clone()], |t, v| t.softmax_cross_entropy(v[0], &[2, 0, 1])),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (name, inputs, op) in cases {
        let report = check_inputs(&inputs, DEFAULT_STEP, |tape, vars| {
            let y = op(tape, vars)?;
            probe(tape, y, &r)
        })?;
        out.push(GradCheckEntry::new(name, inputs[0].shape(), report, PRIMITIVE_TOLERANCE));
    }
    Ok(out)
}

/// Moves every bias off zero so no ReLU sits exactly on its kink.
fn jitter_biases(store: &mut ParamStore, rng: &mut Rng) {
    let ids: Vec<ParamId> = store.ids().filter(|id| store.name(*id).ends_with(".bias")).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
}

fn all_ids(store: &ParamStore) -> Vec<ParamId> {
    store.ids().collect()
}

fn blocks(rng: &mut Rng) -> Result<Vec<GradCheckEntry>> {
    let r = random_weights(rng);
    let mut out = Vec::new();
    let (t, d, heads, d_ff) = (5, 8, 2, 16);
    let x = normal(&[t, d], rng);

    let mut store = ParamStore::new();
    let block = ModularBlockParams::new(&mut store, rng, "block", d, heads, d_ff)?;
    jitter_biases(&mut store, rng);
    let report = check_params(&mut store.clone(), &all_ids(&store), PROBES_PER_TENSOR, DEFAULT_STEP, |s| {
        let mut fwd = Forward::eval(s);
        let xv = fwd.constant(&x)?;
        let y = modular_block(&mut fwd, xv, &block)?;
        let loss = probe(&mut fwd.tape, y, &r)?;
        Ok((fwd.tape, loss))
    })?;
    out.push(GradCheckEntry::new("modular_self_attention", &[t, d], report, BLOCK_TOLERANCE));

    let mut store = ParamStore::new();
    let agg = AggregatorParams::new(&mut store, rng, "agg", d, d_ff)?;
    jitter_biases(&mut store, rng);
    let report = check_params(&mut store.clone(), &all_ids(&store), PROBES_PER_TENSOR, DEFAULT_STEP, |s| {
        let mut fwd = Forward::eval(s);
        let xv = fwd.constant(&x)?;
        let y = aggregator_attention(&mut fwd, xv, &agg)?.output;
        let loss = probe(&mut fwd.tape, y, &r)?;
        Ok((fwd.tape, loss))
    })?;
    out.push(GradCheckEntry::new("aggregator_self_attention", &[t, d], report, BLOCK_TOLERANCE));

    let cfg = tiny_config();
    let mut model = HsaModel::new(cfg.clone(), rng)?;
    jitter_biases(&mut model.store, rng);
    let windows: Vec<Window> = (0..cfg.windows_per_session)
        .map(|_| Window { placements: cfg.placements.iter().map(|p| normal(&[cfg.window_len, p.channels], rng)).collect() })
        .collect();
    let eps: Vec<f64> = (0..cfg.settings.latent_dim).map(|_| StandardNormal.sample(rng)).collect();
    let ids = all_ids(&model.store);
    let window_shape = [cfg.placements.len() * cfg.window_len, cfg.settings.d_model];

    let mut store = model.store.clone();
    let report = check_params(&mut store, &ids, PROBES_PER_TENSOR, DEFAULT_STEP, |s| {
        let mut fwd = Forward::eval(s);
        let (v, _) = model.encode_window(&mut fwd, &windows[0])?;
        let loss = probe(&mut fwd.tape, v, &r)?;
        Ok((fwd.tape, loss))
    })?;
    out.push(GradCheckEntry::new("hierarchical_window_encoder", &window_shape, report, BLOCK_TOLERANCE));

    let mut store = model.store.clone();
    let report = check_params(&mut store, &ids, PROBES_PER_TENSOR, DEFAULT_STEP, |s| {
        let mut fwd = Forward::eval(s);
        let enc = model.encode_session(&mut fwd, &windows)?;
        let loss = probe(&mut fwd.tape, enc.session, &r)?;
        Ok((fwd.tape, loss))
    })?;
    out.push(GradCheckEntry::new("session_encoder", &[cfg.windows_per_session, cfg.settings.d_model], report, BLOCK_TOLERANCE));

    let mut store = ParamStore::new();
    let head = OpenSetHead::new(&mut store, rng, d, cfg.settings.latent_dim, &cfg.settings.decoder_hidden)?;
    jitter_biases(&mut store, rng);
    let repr = normal(&[1, d], rng);
    let report = check_params(&mut store.clone(), &all_ids(&store), PROBES_PER_TENSOR, DEFAULT_STEP, |s| {
        let mut fwd = Forward::eval(s);
        let xv = fwd.constant(&repr)?;
        let terms = head.elbo(&mut fwd, xv, Latent::Noise(&eps))?;
        Ok((fwd.tape, terms.loss))
    })?;
    out.push(GradCheckEntry::new("variational_head_decoder", &[1, d], report, BLOCK_TOLERANCE));

    let report = check_params(&mut model.store.clone(), &ids, PROBES_PER_TENSOR, DEFAULT_STEP, |s| {
        let mut fwd = Forward::eval(s);
        let enc = model.encode_session(&mut fwd, &windows)?;
        let sl = model.session_logits(&mut fwd, enc.session)?;
        let ce_s = fwd.tape.softmax_cross_entropy(sl, &[1])?;
        let wl = model.window_logits(&mut fwd, enc.windows, enc.session)?;
        let ce_w = fwd.tape.softmax_cross_entropy(wl, &[0, 2])?;
        let elbo = model.openset.elbo(&mut fwd, enc.session, Latent::Noise(&eps))?;
        let l = fwd.tape.add(ce_s, ce_w)?;
        let l = fwd.tape.add(l, elbo.loss)?;
        Ok((fwd.tape, l))
    })?;
    model.store.zero_grads();
    out.push(GradCheckEntry::new("full_model_loss", &[cfg.windows_per_session, cfg.settings.d_model], report, BLOCK_TOLERANCE));
    Ok(out)
}

/// Runs every check. Primitive entries use [`PRIMITIVE_TOLERANCE`], block
/// entries [`BLOCK_TOLERANCE`].
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let mut rng = rng_from_seed(seed);
    let mut entries = primitives(&mut rng)?;
    entries.extend(blocks(&mut rng)?);
    Ok(entries)
}
