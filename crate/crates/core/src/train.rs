//! Mini-batch Adam training of the classifier and autoencoder, and
//! closed-set evaluation.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, Session};
use crate::encoder::{argmax, HsaModel};
use crate::layers::Forward;
use crate::metrics::{ConfusionMatrix, EvalReport};
use crate::numerics::{AdamConfig, AdamState, ParamId, Tensor, Var};
use crate::openset::elbo_loss;
use crate::{rng_from_seed, Error, Result};

/// Which classifier head is trained and scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    Session,
    Window,
}

/// `Joint` adds `lambda_ae · ELBO` to every batch loss, so the autoencoder
/// also shapes the encoder (with `lambda_ae = 0` it is not trained at all).
/// `Staged` trains the classifier first and then fits the autoencoder on
/// frozen representations for `ae_epochs`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AeMode {
    Joint,
    Staged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_ae: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; `None`
    /// disables early stopping.
    pub patience: Option<usize>,
    pub head_mode: HeadMode,
    pub ae_mode: AeMode,
    pub ae_epochs: usize,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-3,
            lambda_ae: 1.0,
            seed: 0,
            patience: Some(10),
            head_mode: HeadMode::Session,
            ae_mode: AeMode::Joint,
            ae_epochs: 150,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be ≥ 1".into()));
        }
        if !(self.lambda_ae >= 0.0) || !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lambda_ae and weight_decay must be ≥ 0, learning_rate > 0".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, weight_decay: self.weight_decay, ..AdamConfig::default() }
    }
}

/// Mean losses of one epoch. `loss = ce + lambda_ae · ae` for joint
/// training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub ae: f64,
    pub val_macro_f1: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Mean ELBO loss per epoch of the staged autoencoder phase.
    pub ae_epochs: Vec<f64>,
}

fn divergence(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { .. } | Error::NonFiniteGradient { .. } => Error::Divergence { epoch, batch },
        other => other,
    }
}

fn class_index(labels: &LabelMap, label: u32, session: &Session) -> Result<usize> {
    labels.index(label).ok_or_else(|| Error::Data(format!("session `{}` carries label {label} outside the trained classes", session.id)))
}

struct BatchLoss {
    total: Var,
    ce: f64,
    ae: f64,
}

fn batch_loss(model: &HsaModel, fwd: &mut Forward, batch: &[&Session], labels: &LabelMap, cfg: &TrainConfig, with_ae: bool) -> Result<BatchLoss> {
    let mut terms = Vec::with_capacity(batch.len());
    let (mut ce_sum, mut ae_sum) = (0.0, 0.0);
    for s in batch {
        let enc = model.encode_session(fwd, &s.windows)?;
        let ce = match cfg.head_mode {
            HeadMode::Session => {
                let logits = model.session_logits(fwd, enc.session)?;
                fwd.tape.softmax_cross_entropy(logits, &[class_index(labels, s.session_label, s)?])?
            }
            HeadMode::Window => {
                let targets = s.window_labels.iter().map(|l| class_index(labels, *l, s)).collect::<Result<Vec<_>>>()?;
                let logits = model.window_logits(fwd, enc.windows, enc.session)?;
                fwd.tape.softmax_cross_entropy(logits, &targets)?
            }
        };
        ce_sum += fwd.tape.value(ce)[0];
        let mut term = ce;
        if with_ae {
            let elbo = elbo_loss(fwd, enc.session, &model.openset)?;
            ae_sum += fwd.tape.value(elbo.loss)[0];
            let weighted = fwd.tape.scale(elbo.loss, cfg.lambda_ae)?;
            term = fwd.tape.add(term, weighted)?;
        }
        terms.push(term);
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = fwd.tape.add(total, *t)?;
    }
    let total = fwd.tape.scale(total, 1.0 / batch.len() as f64)?;
    let n = batch.len() as f64;
    Ok(BatchLoss { total, ce: ce_sum / n, ae: ae_sum / n })
}

fn snapshot(model: &HsaModel) -> Vec<Vec<f64>> {
    model.store.iter().map(|(_, _, t)| t.data().to_vec()).collect()
}

fn restore(model: &mut HsaModel, snap: &[Vec<f64>]) -> Result<()> {
    let ids: Vec<ParamId> = model.store.ids().collect();
    for (id, values) in ids.into_iter().zip(snap) {
        model.store.set_values(id, values)?;
    }
    Ok(())
}

/// Trains `model` in place. Sessions are shuffled every epoch by a
/// generator seeded from `cfg.seed`, which also drives dropout and latent
/// sampling. With a non-empty validation set the parameters of the best
/// validation macro F1 are restored at the end. Parameters are finally
/// rounded to 32-bit precision.
pub fn train(model: &mut HsaModel, train_set: &[Session], val_set: &[Session], labels: &LabelMap, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if labels.len() != model.config.num_classes {
        return Err(Error::Config(format!("{} known classes but the model has {} outputs", labels.len(), model.config.num_classes)));
    }
    let mut rng = rng_from_seed(cfg.seed);
    rng.set_stream(1);
    let mut adam = AdamState::new(&model.store, cfg.adam());
    let joint = cfg.ae_mode == AeMode::Joint && cfg.lambda_ae > 0.0;
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut ce_sum, mut ae_sum) = (0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Session> = chunk.iter().map(|&i| &train_set[i]).collect();
            let step = (|| -> Result<f64> {
                let mut fwd = Forward::train(&model.store, &mut rng);
                let bl = batch_loss(model, &mut fwd, &batch, labels, cfg, joint)?;
                let total = fwd.tape.value(bl.total)[0];
                ce_sum += bl.ce * batch.len() as f64;
                ae_sum += bl.ae * batch.len() as f64;
                let tape = fwd.tape;
                tape.backward_into(bl.total, &mut model.store)?;
                Ok(total)
            })()
            .map_err(|e| divergence(e, epoch, b + 1))?;
            if !step.is_finite() {
                return Err(Error::Divergence { epoch, batch: b + 1 });
            }
            loss_sum += step * batch.len() as f64;
            adam.step(&mut model.store).map_err(|e| divergence(e, epoch, b + 1))?;
        }
        let n = train_set.len() as f64;
        let val_macro_f1 = if val_set.is_empty() { None } else { Some(evaluate(model, val_set, cfg.head_mode, labels)?.macro_f1) };
        history.epochs.push(EpochRecord { epoch, loss: loss_sum / n, ce: ce_sum / n, ae: ae_sum / n, val_macro_f1 });

        if let Some(f1) = val_macro_f1 {
            if best.as_ref().is_none_or(|(b, _)| f1 > *b) {
                best = Some((f1, snapshot(model)));
                history.best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience.is_some_and(|p| since_best >= p) {
                    history.stopped_early = true;
                    break;
                }
            }
        } else {
            history.best_epoch = epoch;
        }
    }
    if let Some((_, snap)) = best {
        restore(model, &snap)?;
    }
    if cfg.ae_mode == AeMode::Staged {
        history.ae_epochs = train_autoencoder(model, train_set, cfg)?;
    }
    model.store.round_to_f32();
    Ok(history)
}

/// Fits only the autoencoder on eval-mode session representations, with a
/// fresh optimizer. Returns the mean ELBO loss per epoch.
pub fn train_autoencoder(model: &mut HsaModel, sessions: &[Session], cfg: &TrainConfig) -> Result<Vec<f64>> {
    let reprs = session_representations(model, sessions)?;
    let ids = model.openset.param_ids();
    let mut rng = rng_from_seed(cfg.seed);
    rng.set_stream(2);
    let mut adam = AdamState::new(&model.store, cfg.adam());
    let mut order: Vec<usize> = (0..reprs.len()).collect();
    let mut losses = Vec::with_capacity(cfg.ae_epochs);
    for epoch in 1..=cfg.ae_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step = (|| -> Result<f64> {
                let mut fwd = Forward::train(&model.store, &mut rng);
                let rows: Vec<f64> = chunk.iter().flat_map(|&i| reprs[i].iter().copied()).collect();
                let mut total: Option<Var> = None;
                let d = model.config.settings.d_model;
                for r in rows.chunks(d) {
                    let x = fwd.constant(&Tensor::row(r))?;
                    let l = elbo_loss(&mut fwd, x, &model.openset)?.loss;
                    total = Some(match total {
                        None => l,
                        Some(t) => fwd.tape.add(t, l)?,
                    });
                }
                let total = fwd.tape.scale(total.expect("batch is non-empty"), 1.0 / chunk.len() as f64)?;
                let value = fwd.tape.value(total)[0];
                let tape = fwd.tape;
                tape.backward_into(total, &mut model.store)?;
                Ok(value)
            })()
            .map_err(|e| divergence(e, epoch, b + 1))?;
            sum += step * chunk.len() as f64;
            adam.step_only(&mut model.store, &ids).map_err(|e| divergence(e, epoch, b + 1))?;
        }
        losses.push(sum / reprs.len() as f64);
    }
    Ok(losses)
}

/// Eval-mode session representations.
pub fn session_representations(model: &HsaModel, sessions: &[Session]) -> Result<Vec<Vec<f64>>> {
    sessions.iter().map(|s| Ok(model.infer(&s.windows)?.session_repr)).collect()
}

/// Closed-set scores. Session mode predicts one label per session, window
/// mode one per window.
pub fn evaluate(model: &HsaModel, sessions: &[Session], head_mode: HeadMode, labels: &LabelMap) -> Result<EvalReport> {
    let mut confusion = ConfusionMatrix::new(labels.len());
    for s in sessions {
        let inf = model.infer(&s.windows)?;
        match head_mode {
            HeadMode::Session => confusion.record(class_index(labels, s.session_label, s)?, argmax(&inf.session_probs))?,
            HeadMode::Window => {
                for (l, p) in s.window_labels.iter().zip(&inf.window_probs) {
                    confusion.record(class_index(labels, *l, s)?, argmax(p))?;
                }
            }
        }
    }
    Ok(EvalReport::from_confusion(confusion))
}
