//! Attention weights of one session as CSV and as an SVG heatmap.
//!
//! The heatmap has one row per body placement and one column per timestep,
//! windows side by side; darker cells carry more weight. A strip below shows
//! the session-level weight of each window.

use std::fmt::Write as _;
use std::io::Write;

use hsa_core::attention::AttentionBlock;
use hsa_core::data::{LabelMap, Session};
use hsa_core::encoder::{argmax, HsaModel, Inference};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMapExport {
    pub session_id: String,
    pub true_label: u32,
    pub predicted_label: u32,
    pub placements: Vec<String>,
    pub window_len: usize,
    /// Session aggregator weights, one per window.
    pub temporal: Vec<f64>,
    /// Window aggregator weights, one row of `placements × window_len`
    /// values per window, placement-major.
    pub windows: Vec<Vec<f64>>,
}

impl AttentionMapExport {
    pub fn from_inference(session: &Session, inference: &Inference, model: &HsaModel, labels: &LabelMap) -> Self {
        let mut windows = vec![Vec::new(); model.config.windows_per_session];
        let mut temporal = Vec::new();
        for r in &inference.records {
            match r.block {
                AttentionBlock::Window(i) => windows[i] = r.weights.clone(),
                AttentionBlock::Session => temporal = r.weights.clone(),
            }
        }
        Self {
            session_id: session.id.clone(),
            true_label: session.session_label,
            predicted_label: labels.label(argmax(&inference.session_probs)).unwrap_or(u32::MAX),
            placements: model.config.placements.iter().map(|p| p.name.clone()).collect(),
            window_len: model.config.window_len,
            temporal,
            windows,
        }
    }

    pub fn compute(model: &HsaModel, session: &Session, labels: &LabelMap) -> Result<Self> {
        let inf = model.infer(&session.windows)?;
        Ok(Self::from_inference(session, &inf, model, labels))
    }

    /// Weight of `placement` at `step` of window `window`.
    pub fn weight(&self, window: usize, placement: usize, step: usize) -> f64 {
        self.windows[window][placement * self.window_len + step]
    }

    /// Total weight each placement receives within each window.
    pub fn placement_totals(&self) -> Vec<Vec<f64>> {
        self.windows.iter().map(|w| w.chunks(self.window_len).map(|c| c.iter().sum()).collect()).collect()
    }

    /// Long format: `session_id,block,window,placement,step,weight`, with
    /// empty placement and step for session-level rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| crate::Error::io(std::path::Path::new("<attention csv>"), std::io::Error::other(e));
        w.write_record(["session_id", "block", "window", "placement", "step", "weight"]).map_err(io)?;
        for (i, row) in self.windows.iter().enumerate() {
            for (p, name) in self.placements.iter().enumerate() {
                for t in 0..self.window_len {
                    let rec = [self.session_id.clone(), "window".into(), i.to_string(), name.clone(), t.to_string(), format!("{:?}", row[p * self.window_len + t])];
                    w.write_record(&rec).map_err(io)?;
                }
            }
        }
        for (i, v) in self.temporal.iter().enumerate() {
            w.write_record([self.session_id.as_str(), "session", &i.to_string(), "", "", &format!("{v:?}")]).map_err(io)?;
        }
        w.flush().map_err(|e| crate::Error::io(std::path::Path::new("<attention csv>"), e))
    }

    pub fn to_svg(&self) -> String {
        const CELL: f64 = 10.0;
        const LEFT: f64 = 80.0;
        const TOP: f64 = 30.0;
        const GAP: f64 = 4.0;
        let m = self.placements.len();
        let n = self.windows.len();
        let win_w = self.window_len as f64 * CELL;
        let width = LEFT + n as f64 * (win_w + GAP) + 10.0;
        let strip_y = TOP + m as f64 * CELL + 12.0;
        let height = strip_y + 2.0 * CELL + 24.0;
        let max_w = self.windows.iter().flatten().copied().fold(0.0, f64::max);
        let max_t = self.temporal.iter().copied().fold(0.0, f64::max);

        let mut s = String::new();
        let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#);
        let _ = writeln!(
            s,
            r#"<text x="4" y="16" font-family="sans-serif" font-size="12">session {} | true {} | predicted {}</text>"#,
            escape(&self.session_id),
            self.true_label,
            self.predicted_label
        );
        for (p, name) in self.placements.iter().enumerate() {
            let y = TOP + p as f64 * CELL;
            let _ = writeln!(s, r#"<text x="4" y="{}" font-family="sans-serif" font-size="9">{}</text>"#, y + CELL - 2.0, escape(name));
        }
        for i in 0..n {
            let x0 = LEFT + i as f64 * (win_w + GAP);
            for p in 0..m {
                for t in 0..self.window_len {
                    let x = x0 + t as f64 * CELL;
                    let y = TOP + p as f64 * CELL;
                    let _ = writeln!(s, r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}"/>"#, shade(self.weight(i, p, t), max_w));
                }
            }
            let tw = self.temporal.get(i).copied().unwrap_or(0.0);
            let _ = writeln!(s, r#"<rect x="{x0}" y="{strip_y}" width="{win_w}" height="{}" fill="{}"/>"#, 2.0 * CELL, shade(tw, max_t));
        }
        let _ = writeln!(
            s,
            r#"<text x="4" y="{}" font-family="sans-serif" font-size="9">windows</text>"#,
            strip_y + 2.0 * CELL - 4.0
        );
        let _ = writeln!(s, r#"<text x="{LEFT}" y="{}" font-family="sans-serif" font-size="9">time →</text>"#, height - 6.0);
        s.push_str("</svg>\n");
        s
    }
}

/// Gray level, black for the largest weight and white for zero.
fn shade(w: f64, max: f64) -> String {
    let frac = if max > 0.0 { (w / max).clamp(0.0, 1.0) } else { 0.0 };
    let v = (255.0 * (1.0 - frac)).round() as u8;
    format!("rgb({v},{v},{v})")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shade_extremes() {
        assert_eq!(shade(0.5, 0.5), "rgb(0,0,0)");
        assert_eq!(shade(0.0, 0.5), "rgb(255,255,255)");
        assert_eq!(shade(0.0, 0.0), "rgb(255,255,255)");
    }

    #[test]
    fn escapes_markup() {
        assert_eq!(escape("a<b>&\"c"), "a&lt;b&gt;&amp;&quot;c");
    }
}
