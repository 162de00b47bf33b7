//! Binary checkpoint layout:
//!
//! ```text
//! bytes 0..8    magic  "HSACKPT\0"
//! bytes 8..12   format version, u32 little-endian
//! bytes 12..16  header length H, u32 little-endian
//! bytes 16..16+H  UTF-8 JSON header (model config, tensor names and shapes,
//!                 calibration, training metadata)
//! then          every parameter as f32 little-endian, in header order
//! ```

use std::io::Write;
use std::path::Path;

use hsa_core::data::{LabelMap, NormStats, SessionConfig};
use hsa_core::encoder::{HsaModel, ModelConfig};
use hsa_core::openset::OpenSetCalibration;
use hsa_core::rng_from_seed;
use hsa_core::train::HeadMode;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"HSACKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// What a checkpoint needs beyond the weights to score new data the way
/// the model was trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub dataset_fingerprint: String,
    /// Dataset label id of each output class.
    pub labels: Vec<u32>,
    pub held_out: Vec<u32>,
    pub sessions: SessionConfig,
    pub norm_stats: Option<NormStats>,
    pub head_mode: HeadMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
    calibration: Option<OpenSetCalibration>,
    meta: TrainingMeta,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: HsaModel,
    pub calibration: Option<OpenSetCalibration>,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    pub fn labels(&self) -> LabelMap {
        LabelMap::new(self.meta.labels.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model: self.model.config.clone(),
            tensors: self.model.store.iter().map(|(_, name, t)| TensorEntry { name: name.to_string(), shape: t.shape().to_vec() }).collect(),
            calibration: self.calibration,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec_pretty(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.model.store.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(json.len()).expect("header under 4 GiB").to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in self.model.store.iter() {
            for v in t.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    /// `path` only labels error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |m: String| Error::checkpoint(path, m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(err("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(err(format!("format version {version} is not supported (expected {FORMAT_VERSION})")));
        }
        let len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| err("truncated header".into()))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| err(format!("header: {e}")))?;
        let mut model = HsaModel::new(header.model, &mut rng_from_seed(0)).map_err(|e| err(e.to_string()))?;

        let ids: Vec<_> = model.store.ids().collect();
        if ids.len() != header.tensors.len() {
            return Err(err(format!("{} tensors stored, model has {}", header.tensors.len(), ids.len())));
        }
        let mut data = &bytes[16 + len..];
        for (id, entry) in ids.into_iter().zip(&header.tensors) {
            let (name, shape) = (model.store.name(id).to_string(), model.store.get(id).shape().to_vec());
            if entry.name != name || entry.shape != shape {
                return Err(err(format!("tensor `{}` {:?} does not match model tensor `{name}` {shape:?}", entry.name, entry.shape)));
            }
            let n = shape.iter().product::<usize>();
            if data.len() < 4 * n {
                return Err(err(format!("truncated data in tensor `{name}`")));
            }
            let values: Vec<f64> = data[..4 * n].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64).collect();
            model.store.set_values(id, &values)?;
            data = &data[4 * n..];
        }
        if !data.is_empty() {
            return Err(err(format!("{} trailing bytes", data.len())));
        }
        Ok(Self { model, calibration: header.calibration, meta: header.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hsa_core::diagnostics::tiny_config;

    fn sample() -> Checkpoint {
        let mut model = HsaModel::new(tiny_config(), &mut rng_from_seed(3)).unwrap();
        model.store.round_to_f32();
        Checkpoint {
            model,
            calibration: Some(OpenSetCalibration::new(2.5, 0.75, 0.1).unwrap()),
            meta: TrainingMeta {
                seed: 3,
                epochs_run: 4,
                best_epoch: 2,
                dataset_fingerprint: "abc".into(),
                labels: vec![0, 2, 5],
                held_out: vec![1],
                sessions: SessionConfig::default(),
                norm_stats: None,
                head_mode: HeadMode::Session,
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("m")).unwrap();
        assert_eq!(back.model.config, ck.model.config);
        assert_eq!(back.calibration, ck.calibration);
        assert_eq!(back.meta, ck.meta);
        for ((_, na, a), (_, nb, b)) in ck.model.store.iter().zip(back.model.store.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes();
        let p = Path::new("m");
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(Checkpoint::from_bytes(&v2, p).unwrap_err().to_string().contains("version 2"));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, p).is_err());
        assert!(Checkpoint::from_bytes(b"HSACKPT", p).is_err());
    }
}
