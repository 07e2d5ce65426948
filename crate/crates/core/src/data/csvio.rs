//! `data.csv` + `meta.json`.
//!
//! CSV header: `seq_id,t,ch_0,...,ch_{K-1},label_0,...,label_{H-1}`. Rows are
//! grouped by `seq_id` and ordered by the sample index `t`. Floats use the
//! shortest representation that round-trips (at most 17 significant
//! digits), labels are non-negative integers, lines end in `\n`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, SampleSequence};
use crate::error::{Error, Result};
use crate::model::LabelSpec;

/// Sidecar metadata for a CSV dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub sample_rate_hz: f64,
    pub channel_names: Vec<String>,
    pub labels: Vec<LabelSpec>,
}

pub fn meta_path_for(csv_path: &Path) -> PathBuf {
    csv_path.with_file_name("meta.json")
}

pub fn read_meta(path: &Path) -> Result<DatasetMeta> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_meta(path: &Path, meta: &DatasetMeta) -> Result<()> {
    let mut text = serde_json::to_string_pretty(meta)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a CSV dataset. Metadata comes from `meta.json` next to the file
/// when present; otherwise class counts are inferred from the data and the
/// sample rate defaults to 12.5 Hz.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let meta_path = meta_path_for(path);
    let meta = if meta_path.exists() {
        Some(read_meta(&meta_path)?)
    } else {
        None
    };
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| parse_err(0, e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.first().map(String::as_str) != Some("seq_id") || header.get(1).map(String::as_str) != Some("t") {
        return Err(parse_err(1, "header must start with seq_id,t".into()));
    }
    let chans: Vec<&String> = header.iter().skip(2).filter(|h| h.starts_with("ch_")).collect();
    let labels: Vec<&String> = header.iter().skip(2 + chans.len()).collect();
    for (i, c) in chans.iter().enumerate() {
        if **c != format!("ch_{i}") {
            return Err(parse_err(1, format!("expected column ch_{i}, found {c}")));
        }
    }
    for (i, l) in labels.iter().enumerate() {
        if **l != format!("label_{i}") {
            return Err(parse_err(1, format!("expected column label_{i}, found {l}")));
        }
    }
    let (k, h) = (chans.len(), labels.len());
    if k == 0 || h == 0 {
        return Err(parse_err(1, "need at least one ch_ and one label_ column".into()));
    }
    if let Some(m) = &meta {
        if m.channel_names.len() != k || m.labels.len() != h {
            return Err(parse_err(
                1,
                format!(
                    "meta.json declares {} channels / {} labels, header has {k} / {h}",
                    m.channel_names.len(),
                    m.labels.len()
                ),
            ));
        }
    }

    struct Building {
        id: String,
        cols: Vec<Vec<f64>>,
        y: Vec<Vec<usize>>,
    }
    let mut done: Vec<Building> = Vec::new();
    let mut cur: Option<Building> = None;
    for (row_idx, rec) in reader.records().enumerate() {
        let line = row_idx + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() != 2 + k + h {
            return Err(parse_err(line, format!("expected {} fields, found {}", 2 + k + h, rec.len())));
        }
        let id = &rec[0];
        let t: usize = rec[1]
            .parse()
            .map_err(|_| parse_err(line, format!("invalid sample index {:?}", &rec[1])))?;
        if cur.as_ref().is_none_or(|b| b.id != id) {
            if done.iter().any(|b| b.id == id) {
                return Err(parse_err(line, format!("rows of sequence {id} are not contiguous")));
            }
            if let Some(b) = cur.take() {
                done.push(b);
            }
            cur = Some(Building {
                id: id.to_string(),
                cols: vec![Vec::new(); k],
                y: vec![Vec::new(); h],
            });
        }
        let b = cur.as_mut().expect("set above");
        if t != b.y[0].len() {
            return Err(parse_err(line, format!("expected t = {}, found {t}", b.y[0].len())));
        }
        for c in 0..k {
            let v: f64 = rec[2 + c]
                .parse()
                .map_err(|_| parse_err(line, format!("non-numeric value {:?} in ch_{c}", &rec[2 + c])))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite value in ch_{c}")));
            }
            b.cols[c].push(v);
        }
        for l in 0..h {
            let v: usize = rec[2 + k + l]
                .parse()
                .map_err(|_| parse_err(line, format!("invalid class id {:?} in label_{l}", &rec[2 + k + l])))?;
            if let Some(m) = &meta {
                if v >= m.labels[l].num_classes {
                    return Err(parse_err(
                        line,
                        format!(
                            "class {v} out of range for label_{l} ({}) with {} classes",
                            m.labels[l].name, m.labels[l].num_classes
                        ),
                    ));
                }
            }
            b.y[l].push(v);
        }
    }
    done.extend(cur);
    if done.is_empty() {
        return Err(parse_err(1, "no data rows".into()));
    }

    let meta = meta.unwrap_or_else(|| DatasetMeta {
        sample_rate_hz: 12.5,
        channel_names: (0..k).map(|i| format!("ch_{i}")).collect(),
        labels: (0..h)
            .map(|l| {
                let max = done.iter().flat_map(|b| b.y[l].iter()).max().copied().unwrap_or(0);
                LabelSpec::new(&format!("label_{l}"), (max + 1).max(2))
            })
            .collect(),
    });
    let sequences = done
        .into_iter()
        .map(|b| SampleSequence {
            id: b.id,
            x: b.cols.concat(),
            y: b.y,
            sample_rate_hz: meta.sample_rate_hz,
        })
        .collect();
    let ds = Dataset {
        sequences,
        labels: meta.labels,
        channel_names: meta.channel_names,
        sample_rate_hz: meta.sample_rate_hz,
        normalized: false,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes `path` and a `meta.json` beside it.
pub fn write_csv(path: &Path, ds: &Dataset) -> Result<()> {
    ds.validate()?;
    let (k, h) = (ds.channels(), ds.num_labels());
    let mut out = String::from("seq_id,t");
    for c in 0..k {
        write!(out, ",ch_{c}").unwrap();
    }
    for l in 0..h {
        write!(out, ",label_{l}").unwrap();
    }
    out.push('\n');
    for s in &ds.sequences {
        if s.id.contains([',', '"', '\n', '\r']) {
            return Err(Error::Data(format!("sequence id {:?} is not CSV-safe", s.id)));
        }
        let t_len = s.len();
        for t in 0..t_len {
            write!(out, "{},{t}", s.id).unwrap();
            for c in 0..k {
                write!(out, ",{}", s.x[c * t_len + t]).unwrap();
            }
            for row in &s.y {
                write!(out, ",{}", row[t]).unwrap();
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    write_meta(
        &meta_path_for(path),
        &DatasetMeta {
            sample_rate_hz: ds.sample_rate_hz,
            channel_names: ds.channel_names.clone(),
            labels: ds.labels.clone(),
        },
    )
}
