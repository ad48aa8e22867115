use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::Recording;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LoadReport {
    pub recordings: Vec<Recording>,
    /// Rows discarded because a channel value was NaN or infinite.
    pub dropped_rows: usize,
}

/// Loads every `*.csv` in `dir` (lexicographic order) as one session each.
/// Expected header: `t, ch1, ..., chD, label`.
pub fn load_recordings(dir: &Path) -> Result<LoadReport> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|ext| ext == "csv") {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no .csv sessions in {}", dir.display())));
    }
    let mut recordings = Vec::with_capacity(paths.len());
    let mut dropped_rows = 0;
    for path in &paths {
        let (rec, dropped) = load_one(path)?;
        dropped_rows += dropped;
        recordings.push(rec);
    }
    if dropped_rows > 0 {
        log::warn!("dropped {dropped_rows} rows with non-finite channel values");
    }
    Ok(LoadReport {
        recordings,
        dropped_rows,
    })
}

fn load_one(path: &Path) -> Result<(Recording, usize)> {
    let parse_err = |line: usize, message: String| Error::Parse {
        file: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(0, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let cols = header.len();
    if cols < 3 || &header[0] != "t" || &header[cols - 1] != "label" {
        return Err(parse_err(
            1,
            format!("expected header `t, ch1..chD, label`, got `{}`", header.iter().collect::<Vec<_>>().join(", ")),
        ));
    }
    let channels = cols - 2;

    let mut rows: Vec<(f64, Vec<f64>, usize)> = Vec::new();
    let mut dropped = 0;
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| parse_err(line, e.to_string()))?;
        if record.len() != cols {
            return Err(parse_err(line, format!("expected {cols} fields, got {}", record.len())));
        }
        let num = |j: usize| -> Result<f64> {
            record[j]
                .parse::<f64>()
                .map_err(|e| parse_err(line, format!("field {j} `{}`: {e}", &record[j])))
        };
        let t = num(0)?;
        let values = (1..=channels).map(num).collect::<Result<Vec<_>>>()?;
        let label = record[cols - 1]
            .parse::<usize>()
            .map_err(|e| parse_err(line, format!("label `{}`: {e}", &record[cols - 1])))?;
        if !t.is_finite() || values.iter().any(|v| !v.is_finite()) {
            dropped += 1;
            continue;
        }
        rows.push((t, values, label));
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));

    let sample_rate = match (rows.first(), rows.last()) {
        (Some(first), Some(last)) if rows.len() > 1 && last.0 > first.0 => {
            (rows.len() - 1) as f64 / (last.0 - first.0)
        }
        _ => 1.0,
    };
    let session_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut samples = Vec::with_capacity(rows.len() * channels);
    let mut labels = Vec::with_capacity(rows.len());
    for (_, values, label) in rows {
        samples.extend(values);
        labels.push(label);
    }
    Ok((
        Recording {
            session_id,
            samples,
            channels,
            labels,
            sample_rate,
        },
        dropped,
    ))
}

/// Writes `t,ch1..chD,label` with `t = i / sample_rate`.
pub fn write_recording_csv(rec: &Recording, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(rec.len() * (rec.channels + 2) * 12);
    out.push('t');
    for ch in 1..=rec.channels {
        out.push_str(&format!(",ch{ch}"));
    }
    out.push_str(",label\n");
    for i in 0..rec.len() {
        out.push_str(&format!("{}", i as f64 / rec.sample_rate));
        for v in rec.row(i) {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{}\n", rec.labels[i]));
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
