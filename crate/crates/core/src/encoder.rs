//! The window/session hierarchy and its classification heads.
//!
//! A window holds one `window_len × channels` matrix per placement. Each
//! placement is embedded per timestep, given positions, passed through its
//! own stack of modular blocks, and the placement sequences are joined along
//! time (configured placement order, then time within placement) before the
//! window aggregator pools them. One set of window-encoder weights serves every
//! window of a session. The session encoder runs modular blocks and an
//! aggregator over the sequence of window vectors.
//!
//! Parameter count, with `d = d_model`, `f = d_ff`, `C = num_classes`,
//! `L = latent_dim`, `B(d,f) = 4d² + 2df + f + 5d` per modular block and
//! `A(d,f) = 2d² + d + 2(2df + f + d)` per aggregator:
//!
//! ```text
//! Σ_p (c_p·d + d) + m·N·B + A + N_s·B + A
//!   + (2d·C + C) + (d·C + C)
//!   + 2(d·L + L) + Σ decoder layers (in·out + out)
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attention::{
    aggregator_attention, head_dim, modular_stack, positional_encoding, AggregatorParams, AttentionBlock,
    AttentionRecord, ModularBlockParams,
};
use crate::data::Window;
use crate::layers::{Dense, Forward};
use crate::numerics::{ParamStore, Tensor, Var};
use crate::openset::OpenSetHead;
use crate::{Error, Result, Rng};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementSpec {
    pub name: String,
    pub channels: usize,
}

/// Hyperparameters that do not depend on the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub d_model: usize,
    pub heads: usize,
    /// Modular blocks per placement stack (N).
    pub blocks: usize,
    /// Modular blocks at session level; `None` means the same as `blocks`.
    pub session_blocks: Option<usize>,
    /// Feed-forward hidden width; `None` means `4·d_model`.
    pub d_ff: Option<usize>,
    pub dropout: f64,
    /// Also apply dropout to the session-level input sequence.
    pub session_dropout: bool,
    /// Add positional encoding to the window-vector sequence.
    pub session_positional: bool,
    pub latent_dim: usize,
    pub decoder_hidden: Vec<usize>,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            blocks: 2,
            session_blocks: None,
            d_ff: None,
            dropout: 0.2,
            session_dropout: false,
            session_positional: true,
            latent_dim: 16,
            decoder_hidden: alloc::vec![32, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub placements: Vec<PlacementSpec>,
    pub window_len: usize,
    pub windows_per_session: usize,
    pub num_classes: usize,
    pub settings: ModelSettings,
}

impl ModelConfig {
    pub fn d_ff(&self) -> usize {
        self.settings.d_ff.unwrap_or(4 * self.settings.d_model)
    }

    pub fn session_blocks(&self) -> usize {
        self.settings.session_blocks.unwrap_or(self.settings.blocks)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.settings;
        head_dim(s.d_model, s.heads)?;
        if !s.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!("d_model must be even, got {}", s.d_model)));
        }
        if self.placements.is_empty() || self.window_len == 0 || self.windows_per_session == 0 || self.num_classes == 0 {
            return Err(Error::Config("placements, window_len, windows_per_session and num_classes must be ≥ 1".into()));
        }
        if s.blocks == 0 || s.latent_dim == 0 || self.d_ff() == 0 {
            return Err(Error::Config("blocks, latent_dim and d_ff must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&s.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", s.dropout)));
        }
        for (i, p) in self.placements.iter().enumerate() {
            if p.channels == 0 {
                return Err(Error::Config(format!("placement `{}` has no channels", p.name)));
            }
            if self.placements[..i].iter().any(|q| q.name == p.name) {
                return Err(Error::Config(format!("duplicate placement `{}`", p.name)));
            }
        }
        Ok(())
    }

    /// Closed-form parameter count (see the module docs).
    pub fn param_count(&self) -> usize {
        let d = self.settings.d_model;
        let f = self.d_ff();
        let c = self.num_classes;
        let l = self.settings.latent_dim;
        let m = self.placements.len();
        let block = ModularBlockParams::param_count(d, f);
        let agg = AggregatorParams::param_count(d, f);
        let embed: usize = self.placements.iter().map(|p| p.channels * d + d).sum();
        let mut widths = alloc::vec![l];
        widths.extend(&self.settings.decoder_hidden);
        widths.push(d);
        let decoder: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        embed
            + m * self.settings.blocks * block
            + agg
            + self.session_blocks() * block
            + agg
            + (2 * d * c + c)
            + (d * c + c)
            + 2 * (d * l + l)
            + decoder
    }
}

#[derive(Clone, Debug)]
pub struct PlacementEncoder {
    pub embed: Dense,
    pub blocks: Vec<ModularBlockParams>,
}

/// All learned parameters of the hierarchical encoder, both heads and the
/// open-set autoencoder.
#[derive(Clone, Debug)]
pub struct HsaModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub placements: Vec<PlacementEncoder>,
    pub window_aggregator: AggregatorParams,
    pub session_blocks: Vec<ModularBlockParams>,
    pub session_aggregator: AggregatorParams,
    pub window_head: Dense,
    pub session_head: Dense,
    pub openset: OpenSetHead,
    window_pe: Tensor,
    session_pe: Tensor,
}

/// Graph nodes produced by [`HsaModel::encode_session`].
#[derive(Clone, Debug)]
pub struct SessionEncoding {
    /// `1×d_model`.
    pub session: Var,
    /// `n×d_model`, one row per window.
    pub windows: Var,
    pub records: Vec<AttentionRecord>,
}

impl HsaModel {
    /// Builds and initializes every parameter, drawing from `rng` in
    /// declaration order.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.settings.d_model;
        let heads = config.settings.heads;
        let d_ff = config.d_ff();
        let c = config.num_classes;
        let mut store = ParamStore::new();
        let mut placements = Vec::with_capacity(config.placements.len());
        for p in &config.placements {
            let name = format!("hwe.{}", p.name);
            let embed = Dense::new(&mut store, rng, &format!("{name}.embed"), p.channels, d)?;
            let blocks = (0..config.settings.blocks)
                .map(|i| ModularBlockParams::new(&mut store, rng, &format!("{name}.block{i}"), d, heads, d_ff))
                .collect::<Result<Vec<_>>>()?;
            placements.push(PlacementEncoder { embed, blocks });
        }
        let window_aggregator = AggregatorParams::new(&mut store, rng, "hwe.aggregator", d, d_ff)?;
        let session_blocks = (0..config.session_blocks())
            .map(|i| ModularBlockParams::new(&mut store, rng, &format!("se.block{i}"), d, heads, d_ff))
            .collect::<Result<Vec<_>>>()?;
        let session_aggregator = AggregatorParams::new(&mut store, rng, "se.aggregator", d, d_ff)?;
        let window_head = Dense::new(&mut store, rng, "head.window", 2 * d, c)?;
        let session_head = Dense::new(&mut store, rng, "head.session", d, c)?;
        let openset = OpenSetHead::new(&mut store, rng, d, config.settings.latent_dim, &config.settings.decoder_hidden)?;
        let window_pe = positional_encoding(config.window_len, d)?;
        let session_pe = positional_encoding(config.windows_per_session, d)?;
        Ok(Self {
            config,
            store,
            placements,
            window_aggregator,
            session_blocks,
            session_aggregator,
            window_head,
            session_head,
            openset,
            window_pe,
            session_pe,
        })
    }

    /// Window vector (`1×d_model`) and the window aggregator weights.
    pub fn encode_window(&self, fwd: &mut Forward, window: &Window) -> Result<(Var, Vec<f64>)> {
        let cfg = &self.config;
        if window.placements.len() != cfg.placements.len() {
            return Err(Error::Data(format!(
                "window has {} placements, model expects {}",
                window.placements.len(),
                cfg.placements.len()
            )));
        }
        let mut seqs = Vec::with_capacity(self.placements.len());
        for ((spec, enc), x) in cfg.placements.iter().zip(&self.placements).zip(&window.placements) {
            if x.shape() != [cfg.window_len, spec.channels] {
                return Err(Error::Data(format!(
                    "placement `{}`: expected {}x{} window, got {:?}",
                    spec.name,
                    cfg.window_len,
                    spec.channels,
                    x.shape()
                )));
            }
            let xv = fwd.constant(x)?;
            let h = enc.embed.forward(fwd, xv)?;
            let pe = fwd.constant(&self.window_pe)?;
            let h = fwd.tape.add(h, pe)?;
            let h = fwd.dropout(h, cfg.settings.dropout)?;
            seqs.push(modular_stack(fwd, h, &enc.blocks)?);
        }
        let joined = if seqs.len() == 1 { seqs[0] } else { fwd.tape.concat_rows(&seqs)? };
        let pooled = aggregator_attention(fwd, joined, &self.window_aggregator)?;
        Ok((pooled.output, pooled.weights))
    }

    pub fn encode_session(&self, fwd: &mut Forward, windows: &[Window]) -> Result<SessionEncoding> {
        let n = self.config.windows_per_session;
        if windows.len() != n {
            return Err(Error::Data(format!("session has {} windows, model expects {n}", windows.len())));
        }
        let mut reprs = Vec::with_capacity(n);
        let mut records = Vec::with_capacity(n + 1);
        for (i, w) in windows.iter().enumerate() {
            let (v, weights) = self.encode_window(fwd, w)?;
            reprs.push(v);
            records.push(AttentionRecord { block: AttentionBlock::Window(i), weights });
        }
        let win = if reprs.len() == 1 { reprs[0] } else { fwd.tape.concat_rows(&reprs)? };
        let mut x = win;
        if self.config.settings.session_positional {
            let pe = fwd.constant(&self.session_pe)?;
            x = fwd.tape.add(x, pe)?;
        }
        if self.config.settings.session_dropout {
            x = fwd.dropout(x, self.config.settings.dropout)?;
        }
        let z = modular_stack(fwd, x, &self.session_blocks)?;
        let pooled = aggregator_attention(fwd, z, &self.session_aggregator)?;
        records.push(AttentionRecord { block: AttentionBlock::Session, weights: pooled.weights });
        Ok(SessionEncoding { session: pooled.output, windows: win, records })
    }

    /// Session logits, `1×num_classes`.
    pub fn session_logits(&self, fwd: &mut Forward, session: Var) -> Result<Var> {
        self.session_head.forward(fwd, session)
    }

    /// Window logits, `n×num_classes`, from each window vector joined with
    /// the session vector.
    pub fn window_logits(&self, fwd: &mut Forward, windows: Var, session: Var) -> Result<Var> {
        let (n, _) = fwd.tape.dims2(windows)?;
        let repeated: Vec<Var> = (0..n).map(|_| session).collect();
        let ctx = if n == 1 { session } else { fwd.tape.concat_rows(&repeated)? };
        let joined = fwd.tape.concat_cols(&[windows, ctx])?;
        self.window_head.forward(fwd, joined)
    }

    /// Eval-mode pass over one session.
    pub fn infer(&self, windows: &[Window]) -> Result<Inference> {
        let mut fwd = Forward::eval(&self.store);
        let enc = self.encode_session(&mut fwd, windows)?;
        let s_logits = self.session_logits(&mut fwd, enc.session)?;
        let w_logits = self.window_logits(&mut fwd, enc.windows, enc.session)?;
        let c = self.config.num_classes;
        let session_probs = crate::numerics::softmax(&fwd.tape.tensor(s_logits), 1)?.into_data();
        let window_probs = crate::numerics::softmax(&fwd.tape.tensor(w_logits), 1)?
            .into_data()
            .chunks(c)
            .map(<[f64]>::to_vec)
            .collect();
        Ok(Inference {
            session_repr: fwd.tape.value(enc.session).to_vec(),
            window_reprs: fwd.tape.value(enc.windows).chunks(self.config.settings.d_model).map(<[f64]>::to_vec).collect(),
            session_probs,
            window_probs,
            records: enc.records,
        })
    }

    /// Probabilities of the session head for a given representation.
    pub fn classify_session(&self, session_repr: &[f64]) -> Result<Vec<f64>> {
        let mut fwd = Forward::eval(&self.store);
        let x = fwd.constant(&Tensor::row(session_repr))?;
        let logits = self.session_logits(&mut fwd, x)?;
        Ok(crate::numerics::softmax(&fwd.tape.tensor(logits), 1)?.into_data())
    }

    /// Per-window probabilities of the window head.
    pub fn classify_windows(&self, window_reprs: &[Vec<f64>], session_repr: &[f64]) -> Result<Vec<Vec<f64>>> {
        let d = self.config.settings.d_model;
        if session_repr.len() != d || window_reprs.iter().any(|w| w.len() != d) {
            return Err(Error::dim("classify_windows", format!("representations must have length {d}")));
        }
        let mut fwd = Forward::eval(&self.store);
        let flat: Vec<f64> = window_reprs.iter().flatten().copied().collect();
        let w = fwd.constant(&Tensor::new(alloc::vec![window_reprs.len(), d], flat)?)?;
        let s = fwd.constant(&Tensor::row(session_repr))?;
        let logits = self.window_logits(&mut fwd, w, s)?;
        let c = self.config.num_classes;
        Ok(crate::numerics::softmax(&fwd.tape.tensor(logits), 1)?.into_data().chunks(c).map(<[f64]>::to_vec).collect())
    }

    /// Every parameter except the open-set head and decoder.
    pub fn encoder_param_ids(&self) -> Vec<crate::numerics::ParamId> {
        let ae = self.openset.param_ids();
        self.store.ids().filter(|id| !ae.contains(id)).collect()
    }
}

/// Results of an eval-mode pass.
#[derive(Clone, Debug)]
pub struct Inference {
    pub session_repr: Vec<f64>,
    pub window_reprs: Vec<Vec<f64>>,
    pub session_probs: Vec<f64>,
    pub window_probs: Vec<Vec<f64>>,
    pub records: Vec<AttentionRecord>,
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
