//! Multi-placement sensor series, their window/session segmentation,
//! normalization, split plans and the synthetic activity generator.

mod normalize;
mod sessions;
mod split;
mod synth;

pub use normalize::{normalize, ChannelStats, NormStats};
pub use sessions::{build_sessions, build_sessions_all, majority_label, session_count, SessionBuild, SessionConfig};
pub use split::{choose_held_out, held_out_count, loso_plans, prepare_split, LabelMap, Partition, PreparedSplit, SplitPlan};
pub use synth::{synth_generate, SynthConfig};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoder::PlacementSpec;
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Channel matrix of one body placement, `timesteps × channels`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementSeries {
    pub name: String,
    pub channels: Vec<String>,
    pub values: Vec<f64>,
}

impl PlacementSeries {
    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn timesteps(&self) -> usize {
        if self.channels.is_empty() {
            0
        } else {
            self.values.len() / self.channels.len()
        }
    }

    pub fn at(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.channels.len() + c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        self.values.iter().skip(c).step_by(self.channels.len()).copied().collect()
    }
}

/// Recording of one subject: every placement shares the same timeline and
/// every timestep carries an activity label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorSeries {
    pub subject_id: String,
    pub sampling_rate_hz: f64,
    pub placements: Vec<PlacementSeries>,
    pub labels: Vec<u32>,
}

impl SensorSeries {
    pub fn new(subject_id: String, sampling_rate_hz: f64, placements: Vec<PlacementSeries>, labels: Vec<u32>) -> Result<Self> {
        let s = Self { subject_id, sampling_rate_hz, placements, labels };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.labels.len();
        for p in &self.placements {
            if p.channels.is_empty() || p.values.len() != t * p.channels.len() {
                return Err(Error::Data(format!(
                    "subject `{}`: placement `{}` has {} values for {} timesteps × {} channels",
                    self.subject_id,
                    p.name,
                    p.values.len(),
                    t,
                    p.channels.len()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn placement_specs(&self) -> Vec<PlacementSpec> {
        self.placements.iter().map(|p| PlacementSpec { name: p.name.clone(), channels: p.channel_count() }).collect()
    }

    /// Copy of timesteps `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> SensorSeries {
        let placements = self
            .placements
            .iter()
            .map(|p| {
                let c = p.channel_count();
                PlacementSeries { name: p.name.clone(), channels: p.channels.clone(), values: p.values[start * c..end * c].to_vec() }
            })
            .collect();
        SensorSeries {
            subject_id: self.subject_id.clone(),
            sampling_rate_hz: self.sampling_rate_hz,
            placements,
            labels: self.labels[start..end].to_vec(),
        }
    }
}

/// One window: a `window_len × channels` tensor per placement.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub placements: Vec<Tensor>,
}

/// `windows_per_session` consecutive, non-overlapping windows.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    /// `<subject>@<start timestep>`.
    pub id: String,
    pub subject_id: String,
    pub start: usize,
    pub windows: Vec<Window>,
    pub window_labels: Vec<u32>,
    pub session_label: u32,
}

/// Fills NaN gaps by linear interpolation between the nearest finite
/// neighbours; leading and trailing gaps copy the nearest finite value. A
/// column with no finite value is left untouched.
pub fn fill_missing(values: &mut [f64]) {
    let known: Vec<usize> = (0..values.len()).filter(|&i| !values[i].is_nan()).collect();
    let (Some(&first), Some(&last)) = (known.first(), known.last()) else { return };
    for i in 0..first {
        values[i] = values[first];
    }
    for i in last + 1..values.len() {
        values[i] = values[last];
    }
    for pair in known.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b - a > 1 {
            let (va, vb) = (values[a], values[b]);
            for i in a + 1..b {
                let frac = (i - a) as f64 / (b - a) as f64;
                values[i] = va + (vb - va) * frac;
            }
        }
    }
}
