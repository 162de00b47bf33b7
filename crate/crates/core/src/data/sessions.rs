use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{SensorSeries, Session, Window};
use crate::numerics::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub window_len: usize,
    pub windows_per_session: usize,
    /// Timesteps between session starts; `None` means half a session.
    pub stride: Option<usize>,
    /// Reserved label for unlabeled activity. Sessions whose majority label
    /// is this id are dropped.
    pub null_label: Option<u32>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self { window_len: 32, windows_per_session: 4, stride: None, null_label: None }
    }
}

impl SessionConfig {
    pub fn span(&self) -> usize {
        self.window_len * self.windows_per_session
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.span() / 2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.windows_per_session == 0 || self.stride == Some(0) {
            return Err(Error::Config("window_len, windows_per_session and stride must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// `⌊(len − span)/stride⌋ + 1`, or 0 when the series is shorter than a span.
pub fn session_count(len: usize, span: usize, stride: usize) -> usize {
    if len < span || stride == 0 {
        0
    } else {
        (len - span) / stride + 1
    }
}

/// Most frequent label; ties go to the lowest id.
pub fn majority_label(labels: &[u32]) -> Option<u32> {
    let mut sorted = labels.to_vec();
    sorted.sort_unstable();
    let mut best: Option<(u32, usize)> = None;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().position(|&l| l != sorted[i]).map_or(sorted.len(), |k| i + k);
        if best.is_none_or(|(_, n)| j - i > n) {
            best = Some((sorted[i], j - i));
        }
        i = j;
    }
    best.map(|(l, _)| l)
}

/// Sessions of one series. Series shorter than one session yield none.
pub fn build_sessions(series: &SensorSeries, cfg: &SessionConfig) -> Result<Vec<Session>> {
    cfg.validate()?;
    series.validate()?;
    let (wl, n) = (cfg.window_len, cfg.windows_per_session);
    let count = session_count(series.len(), cfg.span(), cfg.stride());
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let start = k * cfg.stride();
        let mut windows = Vec::with_capacity(n);
        let mut window_labels = Vec::with_capacity(n);
        for w in 0..n {
            let t0 = start + w * wl;
            let placements = series
                .placements
                .iter()
                .map(|p| {
                    let c = p.channel_count();
                    Tensor::new(alloc::vec![wl, c], p.values[t0 * c..(t0 + wl) * c].to_vec())
                })
                .collect::<Result<Vec<_>>>()?;
            windows.push(Window { placements });
            window_labels.push(majority_label(&series.labels[t0..t0 + wl]).expect("window is non-empty"));
        }
        let session_label = majority_label(&window_labels).expect("session is non-empty");
        if cfg.null_label == Some(session_label) {
            continue;
        }
        out.push(Session {
            id: format!("{}@{}", series.subject_id, start),
            subject_id: series.subject_id.clone(),
            start,
            windows,
            window_labels,
            session_label,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct SessionBuild {
    pub sessions: Vec<Session>,
    /// Series too short to hold one session.
    pub skipped: usize,
}

pub fn build_sessions_all(series: &[SensorSeries], cfg: &SessionConfig) -> Result<SessionBuild> {
    let mut build = SessionBuild::default();
    for s in series {
        if s.len() < cfg.span() {
            build.skipped += 1;
            continue;
        }
        build.sessions.extend(build_sessions(s, cfg)?);
    }
    Ok(build)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PlacementSeries;
    use alloc::string::ToString;
    use alloc::vec;

    fn series(len: usize, labels: impl Fn(usize) -> u32) -> SensorSeries {
        SensorSeries::new(
            "s1".into(),
            50.0,
            vec![PlacementSeries { name: "wrist".into(), channels: vec!["x".into()], values: (0..len).map(|t| t as f64).collect() }],
            (0..len).map(labels).collect(),
        )
        .unwrap()
    }

    fn cfg(wl: usize, n: usize, stride: usize) -> SessionConfig {
        SessionConfig { window_len: wl, windows_per_session: n, stride: Some(stride), null_label: None }
    }

    #[test]
    fn majority_ties_go_low() {
        assert_eq!(majority_label(&[3, 1, 3, 1]), Some(1));
        assert_eq!(majority_label(&[2, 2, 0]), Some(2));
        assert_eq!(majority_label(&[]), None);
    }

    #[test]
    fn exact_span_gives_one_session() {
        for stride in [1, 3, 8, 100] {
            assert_eq!(build_sessions(&series(8, |_| 0), &cfg(4, 2, stride)).unwrap().len(), 1);
        }
    }

    #[test]
    fn two_spans_with_full_stride_are_disjoint() {
        let s = build_sessions(&series(16, |_| 0), &cfg(4, 2, 8)).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].start, s[1].start), (0, 8));
    }

    #[test]
    fn half_stride_over_three_spans() {
        // L = 8: starts 0, 4, 8, 12, 16
        let s = build_sessions(&series(24, |_| 0), &cfg(4, 2, 4)).unwrap();
        assert_eq!(s.iter().map(|x| x.start).collect::<Vec<_>>(), vec![0, 4, 8, 12, 16]);
        assert_eq!(s[1].id, "s1@4".to_string());
    }

    #[test]
    fn windows_tile_the_span() {
        let s = build_sessions(&series(20, |t| (t / 5) as u32), &cfg(4, 3, 5)).unwrap();
        for sess in &s {
            for (i, w) in sess.windows.iter().enumerate() {
                let expected: Vec<f64> = (sess.start + i * 4..sess.start + (i + 1) * 4).map(|t| t as f64).collect();
                assert_eq!(w.placements[0].data(), expected.as_slice());
            }
        }
        // window labels follow the per-timestep majority
        assert_eq!(s[0].window_labels, vec![0, 1, 1]);
        assert_eq!(s[0].session_label, 1);
    }

    #[test]
    fn null_majority_sessions_are_dropped() {
        let mut c = cfg(2, 2, 4);
        c.null_label = Some(9);
        let s = build_sessions(&series(8, |t| if t < 4 { 9 } else { 1 }), &c).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].session_label, 1);
    }

    #[test]
    fn short_series_are_skipped() {
        let b = build_sessions_all(&[series(5, |_| 0), series(8, |_| 0)], &cfg(4, 2, 4)).unwrap();
        assert_eq!((b.sessions.len(), b.skipped), (1, 1));
    }
}
