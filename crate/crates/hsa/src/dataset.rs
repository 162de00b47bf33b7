//! Dataset CSV contract.
//!
//! ```text
//! subject_id,timestamp,label,wrist.acc_x,wrist.acc_y,...,ankle.gyro_z
//! s01,0,3,0.12,-0.98,...,0.04
//! ```
//!
//! Rows are grouped by subject; timestamps are strictly increasing integer
//! sample indices within a subject. Empty cells and `nan` are missing values,
//! filled by linear interpolation per channel.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use hsa_core::data::{fill_missing, PlacementSeries, SensorSeries};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const FIXED_COLUMNS: [&str; 3] = ["subject_id", "timestamp", "label"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub sampling_rate_hz: f64,
    /// Expected placements in model order. When set, any other placement in
    /// the header is an error; when empty, header order is used.
    pub placements: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Self { sampling_rate_hz: 50.0, placements: Vec::new() }
    }
}

struct Layout {
    placements: Vec<(String, Vec<String>)>,
    /// Data column → (placement, channel).
    columns: Vec<(usize, usize)>,
}

fn layout(header: &csv::StringRecord, schema: &Schema, path: &Path) -> Result<Layout> {
    let bad = |message: String| Error::Parse { path: path.to_path_buf(), line: 1, message };
    if header.len() < FIXED_COLUMNS.len() + 1 {
        return Err(bad(format!("expected `{}` and at least one channel column", FIXED_COLUMNS.join(","))));
    }
    for (i, name) in FIXED_COLUMNS.iter().enumerate() {
        if header[i].trim() != *name {
            return Err(bad(format!("column {} must be `{name}`, found `{}`", i + 1, &header[i])));
        }
    }
    let mut placements: Vec<(String, Vec<String>)> = schema.placements.iter().map(|p| (p.clone(), Vec::new())).collect();
    let mut columns = Vec::new();
    for field in header.iter().skip(FIXED_COLUMNS.len()) {
        let (p, c) = field.trim().split_once('.').ok_or_else(|| bad(format!("channel column `{field}` is not `<placement>.<channel>`")))?;
        let pi = match placements.iter().position(|(name, _)| name == p) {
            Some(i) => i,
            None if schema.placements.is_empty() => {
                placements.push((p.to_string(), Vec::new()));
                placements.len() - 1
            }
            None => return Err(Error::Schema(format!("unknown placement `{p}` in column `{field}`"))),
        };
        if placements[pi].1.iter().any(|x| x == c) {
            return Err(bad(format!("duplicate column `{field}`")));
        }
        placements[pi].1.push(c.to_string());
        columns.push((pi, placements[pi].1.len() - 1));
    }
    if let Some((p, _)) = placements.iter().find(|(_, ch)| ch.is_empty()) {
        return Err(Error::Schema(format!("placement `{p}` has no columns")));
    }
    Ok(Layout { placements, columns })
}

#[derive(Default)]
struct Pending {
    last_timestamp: Option<i64>,
    labels: Vec<u32>,
    /// Per placement, row-major values.
    values: Vec<Vec<f64>>,
}

fn parse_value(s: &str) -> Option<f64> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("nan") {
        return Some(f64::NAN);
    }
    s.parse().ok()
}

/// Reads a dataset from any reader; `path` only labels error messages.
pub fn ingest_reader<R: Read>(reader: R, schema: &Schema, path: &Path) -> Result<Vec<SensorSeries>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let parse_err = |line: u64, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let layout = layout(&header, schema, path)?;
    let mut subjects: BTreeMap<String, Pending> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(parse_err(line, format!("expected {} fields, found {}", header.len(), record.len())));
        }
        let subject = record[0].trim();
        if subject.is_empty() {
            return Err(parse_err(line, "empty subject_id".into()));
        }
        let ts: i64 = record[1].trim().parse().map_err(|_| parse_err(line, format!("timestamp `{}` is not an integer", &record[1])))?;
        let label: u32 = record[2].trim().parse().map_err(|_| parse_err(line, format!("label `{}` is not a non-negative integer", &record[2])))?;
        let entry = subjects.entry(subject.to_string()).or_insert_with(|| Pending {
            values: vec![Vec::new(); layout.placements.len()],
            ..Pending::default()
        });
        if entry.last_timestamp.is_some_and(|prev| ts <= prev) {
            return Err(parse_err(line, format!("timestamp {ts} for subject `{subject}` is not increasing")));
        }
        entry.last_timestamp = Some(ts);
        entry.labels.push(label);
        let row_start: Vec<usize> = entry.values.iter().map(Vec::len).collect();
        for (p, (_, ch)) in layout.placements.iter().enumerate() {
            entry.values[p].resize(row_start[p] + ch.len(), f64::NAN);
        }
        for (col, &(p, c)) in layout.columns.iter().enumerate() {
            let raw = &record[FIXED_COLUMNS.len() + col];
            let v = parse_value(raw).ok_or_else(|| parse_err(line, format!("value `{raw}` in column `{}` is not a number", &header[FIXED_COLUMNS.len() + col])))?;
            entry.values[p][row_start[p] + c] = v;
        }
    }

    let mut out = Vec::with_capacity(subjects.len());
    for (subject, pending) in subjects {
        let mut placements = Vec::with_capacity(layout.placements.len());
        for ((name, channels), mut values) in layout.placements.iter().zip(pending.values) {
            let c = channels.len();
            for ch in 0..c {
                let mut col: Vec<f64> = values.iter().skip(ch).step_by(c).copied().collect();
                fill_missing(&mut col);
                if col.iter().any(|v| v.is_nan()) {
                    return Err(Error::Schema(format!("subject `{subject}`: column `{name}.{}` has no values", channels[ch])));
                }
                for (t, v) in col.into_iter().enumerate() {
                    values[t * c + ch] = v;
                }
            }
            placements.push(PlacementSeries { name: name.clone(), channels: channels.clone(), values });
        }
        out.push(SensorSeries::new(subject, schema.sampling_rate_hz, placements, pending.labels)?);
    }
    Ok(out)
}

/// Series sorted by subject id.
pub fn ingest(path: &Path, schema: &Schema) -> Result<Vec<SensorSeries>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(std::io::BufReader::new(file), schema, path)
}

/// Writes the CSV contract. Values use the shortest representation that
/// parses back to the same `f64`.
pub fn export_writer<W: Write>(series: &[SensorSeries], writer: W) -> Result<()> {
    let Some(first) = series.first() else {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(FIXED_COLUMNS).map_err(csv_io)?;
        return w.flush().map_err(|e| Error::io(Path::new("<output>"), e));
    };
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    for p in &first.placements {
        header.extend(p.channels.iter().map(|c| format!("{}.{c}", p.name)));
    }
    w.write_record(&header).map_err(csv_io)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for s in series {
        if s.placement_specs() != first.placement_specs() {
            return Err(Error::Schema(format!("subject `{}` has a different placement layout", s.subject_id)));
        }
        for t in 0..s.len() {
            row.clear();
            row.push(s.subject_id.clone());
            row.push(t.to_string());
            row.push(s.labels[t].to_string());
            for p in &s.placements {
                row.extend((0..p.channel_count()).map(|c| format!("{:?}", p.at(t, c))));
            }
            w.write_record(&row).map_err(csv_io)?;
        }
    }
    w.flush().map_err(|e| Error::io(Path::new("<output>"), e))
}

fn csv_io(e: csv::Error) -> Error {
    Error::io(Path::new("<output>"), std::io::Error::other(e))
}

pub fn export(series: &[SensorSeries], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = std::io::BufWriter::new(file);
    export_writer(series, &mut buf)?;
    buf.flush().map_err(|e| Error::io(path, e))
}

/// SHA-256 of the exported CSV form, hex encoded.
pub fn fingerprint(series: &[SensorSeries]) -> Result<String> {
    let mut bytes = Vec::new();
    export_writer(series, &mut bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
