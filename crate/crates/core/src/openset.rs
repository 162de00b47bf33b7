//! Variational autoencoder over session representations and the
//! reconstruction-loss threshold that separates known from unseen activities.

use alloc::format;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Window;
use crate::encoder::{argmax, HsaModel};
use crate::layers::{Dense, Forward};
use crate::numerics::{ParamId, ParamStore, Tensor, Var};
use crate::{Error, Result, Rng};

/// Log-variance outputs are clamped into `[-LOGVAR_LIMIT, LOGVAR_LIMIT]`.
pub const LOGVAR_LIMIT: f64 = 10.0;

/// Maps a representation to the mean and log-variance of `q(z|x)`.
#[derive(Clone, Debug)]
pub struct VariationalHead {
    pub mean: Dense,
    pub log_var: Dense,
}

/// Feed-forward decoder from the latent back to `d_model`, ReLU between
/// layers and linear output.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<Dense>,
}

#[derive(Clone, Debug)]
pub struct OpenSetHead {
    pub head: VariationalHead,
    pub decoder: Decoder,
}

/// How the latent is chosen in [`OpenSetHead::elbo`].
#[derive(Clone, Copy, Debug)]
pub enum Latent<'a> {
    /// `z = μ`.
    Mean,
    /// `z = μ + σ⊙ε` with `ε` drawn from the forward pass generator.
    Sample,
    /// `z = μ + σ⊙ε` with a caller-supplied `ε`.
    Noise(&'a [f64]),
}

#[derive(Clone, Copy, Debug)]
pub struct ElboTerms {
    /// `recon + kl`, the negative ELBO up to constants and scale.
    pub loss: Var,
    pub recon: Var,
    pub kl: Var,
}

impl OpenSetHead {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, d_model: usize, latent: usize, hidden: &[usize]) -> Result<Self> {
        let head = VariationalHead {
            mean: Dense::new(store, rng, "openset.mean", d_model, latent)?,
            log_var: Dense::new(store, rng, "openset.log_var", d_model, latent)?,
        };
        let mut widths = alloc::vec![latent];
        widths.extend_from_slice(hidden);
        widths.push(d_model);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, rng, &format!("openset.decoder{i}"), w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { head, decoder: Decoder { layers } })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = alloc::vec![self.head.mean.weight, self.head.mean.bias, self.head.log_var.weight, self.head.log_var.bias];
        for l in &self.decoder.layers {
            ids.push(l.weight);
            ids.push(l.bias);
        }
        ids
    }

    /// `(μ, clamp(log σ²))`, each `1×latent`.
    pub fn encode(&self, fwd: &mut Forward, x: Var) -> Result<(Var, Var)> {
        let mean = self.head.mean.forward(fwd, x)?;
        let lv = self.head.log_var.forward(fwd, x)?;
        let lv = fwd.tape.clamp(lv, -LOGVAR_LIMIT, LOGVAR_LIMIT)?;
        Ok((mean, lv))
    }

    pub fn decode(&self, fwd: &mut Forward, z: Var) -> Result<Var> {
        let mut h = z;
        let last = self.decoder.layers.len() - 1;
        for (i, layer) in self.decoder.layers.iter().enumerate() {
            h = layer.forward(fwd, h)?;
            if i != last {
                h = fwd.tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Summed squared reconstruction error plus the closed-form KL to the
    /// unit Gaussian.
    pub fn elbo(&self, fwd: &mut Forward, x: Var, latent: Latent) -> Result<ElboTerms> {
        let (mean, lv) = self.encode(fwd, x)?;
        let dim = fwd.tape.value(mean).len();
        let noise = match latent {
            Latent::Mean => None,
            Latent::Noise(eps) => {
                if eps.len() != dim {
                    return Err(Error::dim("elbo", format!("noise length {} for latent {dim}", eps.len())));
                }
                Some(eps.to_vec())
            }
            Latent::Sample => fwd.rng().map(|rng| (0..dim).map(|_| StandardNormal.sample(rng)).collect()),
        };
        let z = match noise {
            None => mean,
            Some(eps) => {
                let half = fwd.tape.scale(lv, 0.5)?;
                let std = fwd.tape.exp(half)?;
                let spread = fwd.tape.mul_const(std, eps)?;
                fwd.tape.add(mean, spread)?
            }
        };
        let recon_x = self.decode(fwd, z)?;
        let diff = fwd.tape.sub(recon_x, x)?;
        let sq = fwd.tape.mul(diff, diff)?;
        let recon = fwd.tape.sum(sq)?;

        let m2 = fwd.tape.mul(mean, mean)?;
        let var = fwd.tape.exp(lv)?;
        let s = fwd.tape.add(m2, var)?;
        let s = fwd.tape.sub(s, lv)?;
        let s = fwd.tape.sum(s)?;
        let s = fwd.tape.add_scalar(s, -(dim as f64))?;
        let kl = fwd.tape.scale(s, 0.5)?;
        let loss = fwd.tape.add(recon, kl)?;
        Ok(ElboTerms { loss, recon, kl })
    }

    /// Eval-mode reconstruction error (`z = μ`) of one representation.
    pub fn reconstruction_score(&self, store: &ParamStore, repr: &[f64]) -> Result<f64> {
        let mut fwd = Forward::eval(store);
        let x = fwd.constant(&Tensor::row(repr))?;
        let terms = self.elbo(&mut fwd, x, Latent::Mean)?;
        Ok(fwd.tape.value(terms.recon)[0])
    }
}

/// ELBO terms for `x`, sampling the latent in train mode and using the mean
/// in eval mode.
pub fn elbo_loss(fwd: &mut Forward, x: Var, head: &OpenSetHead) -> Result<ElboTerms> {
    let latent = if fwd.is_training() { Latent::Sample } else { Latent::Mean };
    head.elbo(fwd, x, latent)
}

/// `½·Σ(μ² + σ² − 1 − log σ²)`.
pub fn kl_divergence(mean: &[f64], log_var: &[f64]) -> f64 {
    0.5 * mean.iter().zip(log_var).map(|(m, lv)| m * m + libm::exp(*lv) - 1.0 - lv).sum::<f64>()
}

/// Threshold `mean_loss − alpha·std_loss` over training reconstruction
/// losses. Scores strictly above the threshold are unseen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenSetCalibration {
    pub mean_loss: f64,
    pub std_loss: f64,
    pub alpha: f64,
    pub threshold: f64,
}

pub const ALPHA_RANGE: core::ops::RangeInclusive<f64> = 0.0..=0.5;

impl OpenSetCalibration {
    pub fn new(mean_loss: f64, std_loss: f64, alpha: f64) -> Result<Self> {
        if !ALPHA_RANGE.contains(&alpha) {
            return Err(Error::Calibration(format!("alpha {alpha} outside [0, 0.5]")));
        }
        if !mean_loss.is_finite() || !std_loss.is_finite() || std_loss < 0.0 {
            return Err(Error::Calibration(format!("invalid loss statistics ({mean_loss}, {std_loss})")));
        }
        Ok(Self { mean_loss, std_loss, alpha, threshold: mean_loss - alpha * std_loss })
    }

    /// Mean and population standard deviation of `losses`.
    pub fn from_losses(losses: &[f64], alpha: f64) -> Result<Self> {
        if losses.len() < 2 {
            return Err(Error::Calibration(format!("need at least 2 losses, got {}", losses.len())));
        }
        let n = losses.len() as f64;
        let mean = losses.iter().sum::<f64>() / n;
        let var = losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n;
        Self::new(mean, libm::sqrt(var), alpha)
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        Self::new(self.mean_loss, self.std_loss, alpha)
    }

    pub fn verdict(&self, score: f64) -> Verdict {
        if score > self.threshold {
            Verdict::Unseen
        } else {
            Verdict::Known
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Known,
    Unseen,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub verdict: Verdict,
    pub score: f64,
}

/// Reconstruction losses of `reprs` under the trained autoencoder.
pub fn reconstruction_scores(model: &HsaModel, reprs: &[Vec<f64>]) -> Result<Vec<f64>> {
    reprs.iter().map(|r| model.openset.reconstruction_score(&model.store, r)).collect()
}

pub fn calibrate(model: &HsaModel, training_reprs: &[Vec<f64>], alpha: f64) -> Result<OpenSetCalibration> {
    if training_reprs.len() < 2 {
        return Err(Error::Calibration(format!("need at least 2 representations, got {}", training_reprs.len())));
    }
    OpenSetCalibration::from_losses(&reconstruction_scores(model, training_reprs)?, alpha)
}

pub fn detect(model: &HsaModel, repr: &[f64], calib: &OpenSetCalibration) -> Result<Detection> {
    let score = model.openset.reconstruction_score(&model.store, repr)?;
    Ok(Detection { verdict: calib.verdict(score), score })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpenSetLabel {
    Known(usize),
    Unseen,
}

/// Combines a novelty score with closed-set probabilities.
pub fn open_set_decision(score: f64, class_probs: &[f64], calib: &OpenSetCalibration) -> OpenSetLabel {
    match calib.verdict(score) {
        Verdict::Unseen => OpenSetLabel::Unseen,
        Verdict::Known => OpenSetLabel::Known(argmax(class_probs)),
    }
}

#[derive(Clone, Debug)]
pub struct OpenSetPrediction {
    pub label: OpenSetLabel,
    pub score: f64,
    pub class_probs: Vec<f64>,
}

pub fn open_set_predict(model: &HsaModel, windows: &[Window], calib: &OpenSetCalibration) -> Result<OpenSetPrediction> {
    let inf = model.infer(windows)?;
    let score = model.openset.reconstruction_score(&model.store, &inf.session_repr)?;
    Ok(OpenSetPrediction { label: open_set_decision(score, &inf.session_probs, calib), score, class_probs: inf.session_probs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;
    use approx::assert_abs_diff_eq;

    #[test]
    fn kl_closed_form_values() {
        assert_eq!(kl_divergence(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_abs_diff_eq!(kl_divergence(&[1.0], &[0.0]), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn tape_kl_matches_closed_form() {
        let mut rng = rng_from_seed(3);
        let mut store = ParamStore::new();
        let head = OpenSetHead::new(&mut store, &mut rng, 6, 3, &[5]).unwrap();
        let x = [0.3, -0.2, 0.9, 0.1, -0.7, 0.4];
        let mut fwd = Forward::eval(&store);
        let xv = fwd.constant(&Tensor::row(&x)).unwrap();
        let (m, lv) = head.encode(&mut fwd, xv).unwrap();
        let (m, lv) = (fwd.tape.value(m).to_vec(), fwd.tape.value(lv).to_vec());
        let terms = head.elbo(&mut fwd, xv, Latent::Mean).unwrap();
        assert_abs_diff_eq!(fwd.tape.value(terms.kl)[0], kl_divergence(&m, &lv), epsilon = 1e-12);
        let l = fwd.tape.value(terms.loss)[0];
        assert_abs_diff_eq!(l, fwd.tape.value(terms.recon)[0] + fwd.tape.value(terms.kl)[0], epsilon = 1e-15);
    }

    #[test]
    fn perfect_decoder_has_zero_reconstruction() {
        // zero the decoder and use x = 0: decoder(z) = 0 = x
        let mut rng = rng_from_seed(4);
        let mut store = ParamStore::new();
        let head = OpenSetHead::new(&mut store, &mut rng, 4, 2, &[3]).unwrap();
        for l in &head.decoder.layers {
            store.get_mut(l.weight).data_mut().fill(0.0);
        }
        let mut fwd = Forward::eval(&store);
        let xv = fwd.constant(&Tensor::row(&[0.0; 4])).unwrap();
        let terms = head.elbo(&mut fwd, xv, Latent::Mean).unwrap();
        assert_eq!(fwd.tape.value(terms.recon)[0], 0.0);
        assert!(fwd.tape.value(terms.loss)[0] >= 0.0);
    }

    #[test]
    fn calibration_examples() {
        let c = OpenSetCalibration::from_losses(&[1.0, 2.0, 3.0], 0.0).unwrap();
        assert_abs_diff_eq!(c.threshold, 2.0, epsilon = 1e-15);
        let c = OpenSetCalibration::from_losses(&[1.0, 1.0, 1.0, 1.0], 0.37).unwrap();
        assert_eq!((c.mean_loss, c.std_loss, c.threshold), (1.0, 0.0, 1.0));
        // population std of [1,2,3] = sqrt(2/3)
        let c = OpenSetCalibration::from_losses(&[1.0, 2.0, 3.0], 0.5).unwrap();
        assert_abs_diff_eq!(c.threshold, 2.0 - 0.5 * (2.0f64 / 3.0).sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(c.threshold, 1.5918, epsilon = 1e-4);
        assert!(OpenSetCalibration::from_losses(&[1.0], 0.1).is_err());
        assert!(OpenSetCalibration::from_losses(&[1.0, 2.0], 0.6).is_err());
    }

    #[test]
    fn tie_is_known() {
        let c = OpenSetCalibration::new(2.0, 1.0, 0.0).unwrap();
        assert_eq!(c.verdict(2.0), Verdict::Known);
        assert_eq!(c.verdict(2.0 + 1e-12), Verdict::Unseen);
        assert_eq!(open_set_decision(1.0, &[0.1, 0.7, 0.2], &c), OpenSetLabel::Known(1));
        assert_eq!(open_set_decision(5.0, &[0.0, 1.0, 0.0], &c), OpenSetLabel::Unseen);
    }

    #[test]
    fn reparameterized_elbo_gradients() {
        use crate::numerics::gradcheck::{check_params, DEFAULT_STEP};
        let mut rng = rng_from_seed(9);
        let mut store = ParamStore::new();
        let head = OpenSetHead::new(&mut store, &mut rng, 4, 2, &[3, 5]).unwrap();
        let x = [0.5, -0.1, 0.2, 0.8];
        let eps = [0.3, -1.2];
        let ids: alloc::vec::Vec<_> = store.ids().collect();
        // keep every ReLU away from its kink
        for l in &head.decoder.layers {
            store.get_mut(l.bias).data_mut().fill(0.3);
        }
        let report = check_params(&mut store, &ids, 32, DEFAULT_STEP, |store| {
            let mut fwd = Forward::eval(store);
            let xv = fwd.constant(&Tensor::row(&x))?;
            let t = head.elbo(&mut fwd, xv, Latent::Noise(&eps))?;
            Ok((fwd.tape, t.loss))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
