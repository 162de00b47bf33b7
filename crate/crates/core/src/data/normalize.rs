use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::SensorSeries;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// Per-channel z-score statistics, grouped by placement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub placements: Vec<(String, Vec<ChannelStats>)>,
}

impl NormStats {
    pub fn from_series(series: &[SensorSeries]) -> Result<Self> {
        Self::from_series_excluding(series, &[])
    }

    /// Statistics over every timestep whose label is not in `excluded`.
    pub fn from_series_excluding(series: &[SensorSeries], excluded: &[u32]) -> Result<Self> {
        let first = series.first().ok_or_else(|| Error::Data("no series to compute statistics from".into()))?;
        let mut placements = Vec::with_capacity(first.placements.len());
        for (pi, p) in first.placements.iter().enumerate() {
            let mut stats = Vec::with_capacity(p.channel_count());
            for c in 0..p.channel_count() {
                let mut n = 0usize;
                let mut mean = 0.0;
                let mut m2 = 0.0;
                for s in series {
                    let sp = s.placements.get(pi).filter(|q| q.name == p.name && q.channel_count() == p.channel_count());
                    let sp = sp.ok_or_else(|| {
                        Error::Data(format!("subject `{}` does not match placement layout of `{}`", s.subject_id, first.subject_id))
                    })?;
                    for t in 0..s.len() {
                        if excluded.contains(&s.labels[t]) {
                            continue;
                        }
                        let x = sp.at(t, c);
                        n += 1;
                        let delta = x - mean;
                        mean += delta / n as f64;
                        m2 += delta * (x - mean);
                    }
                }
                let std = if n > 0 { libm::sqrt(m2 / n as f64) } else { 0.0 };
                stats.push(ChannelStats { mean, std });
            }
            placements.push((p.name.clone(), stats));
        }
        Ok(Self { placements })
    }
}

/// Z-scores every channel with `stats`; channels with zero spread pass
/// through unchanged.
pub fn normalize(series: &SensorSeries, stats: &NormStats) -> Result<SensorSeries> {
    let mut out = series.clone();
    for p in &mut out.placements {
        let (_, ch) = stats
            .placements
            .iter()
            .find(|(name, _)| *name == p.name)
            .ok_or_else(|| Error::Data(format!("no statistics for placement `{}`", p.name)))?;
        if ch.len() != p.channel_count() {
            return Err(Error::Data(format!("placement `{}`: {} channel stats for {} channels", p.name, ch.len(), p.channel_count())));
        }
        let c = ch.len();
        for (i, v) in p.values.iter_mut().enumerate() {
            let st = ch[i % c];
            if st.std > 0.0 {
                *v = (*v - st.mean) / st.std;
            }
        }
    }
    Ok(out)
}
