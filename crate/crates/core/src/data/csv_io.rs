use std::io::Read;
use std::path::Path;

use super::{Dataset, HeldOut, MinMax, TimeSeriesWindow};
use crate::error::{Error, Result};
use crate::numerics::Array;

#[derive(Clone, Debug, PartialEq)]
pub struct CsvSchema {
    /// Steps per window; windows are non-overlapping and trailing rows
    /// that do not fill a whole window are left out of `windows`.
    pub window_len: usize,
    pub graph_id: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            window_len: 32,
            graph_id: "default".into(),
        }
    }
}

/// Original CSV text: header, time column, and one string per sensor cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceTable {
    pub header: Vec<String>,
    pub times: Vec<String>,
    pub cells: Vec<Vec<String>>,
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(f, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    if schema.window_len == 0 {
        return Err(Error::Dataset("window length must be positive".into()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(true)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            reason: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.len() < 2 {
        return Err(Error::Parse {
            line: 1,
            reason: "header needs a time column and at least one sensor".into(),
        });
    }
    let sensors = header[1..].to_vec();
    let n = sensors.len();
    let mut times = Vec::new();
    let mut cells: Vec<Vec<String>> = Vec::new();
    let mut raw: Vec<Vec<Option<f64>>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            reason: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != n + 1 {
            return Err(Error::Parse {
                line,
                reason: format!("expected {} fields, found {}", n + 1, rec.len()),
            });
        }
        times.push(rec[0].to_string());
        let mut row = Vec::with_capacity(n);
        let mut text = Vec::with_capacity(n);
        for (j, cell) in rec.iter().skip(1).enumerate() {
            let c = cell.trim();
            text.push(cell.to_string());
            if c.is_empty() {
                row.push(None);
                continue;
            }
            match c.parse::<f64>() {
                Ok(v) if v.is_finite() => row.push(Some(v)),
                _ => {
                    return Err(Error::Parse {
                        line,
                        reason: format!("sensor `{}`: `{c}` is not a finite number", sensors[j]),
                    })
                }
            }
        }
        raw.push(row);
        cells.push(text);
    }

    let mut normalization = Vec::with_capacity(n);
    for (j, name) in sensors.iter().enumerate() {
        let (lo, hi) = raw
            .iter()
            .filter_map(|r| r[j])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !(hi > lo) {
            return Err(Error::Normalization { sensor: name.clone() });
        }
        normalization.push(MinMax { min: lo, max: hi });
    }

    let d = schema.window_len;
    let n_windows = raw.len() / d;
    if n_windows == 0 {
        return Err(Error::Dataset(format!(
            "{} rows cannot fill one window of {d} steps",
            raw.len()
        )));
    }
    let windows = (0..n_windows)
        .map(|w| {
            let mut values = Array::zeros(&[n, d]);
            let mut mask = Array::zeros(&[n, d]);
            for t in 0..d {
                for s in 0..n {
                    if let Some(v) = raw[w * d + t][s] {
                        values.set(&[s, t], normalization[s].normalize(v));
                        mask.set(&[s, t], 1.0);
                    }
                }
            }
            TimeSeriesWindow::new(values, mask, schema.graph_id.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        windows,
        sensor_names: sensors,
        normalization,
        source: Some(SourceTable { header, times, cells }),
    })
}

/// The last `window_len` rows as one window when trailing rows do not fill
/// a whole window; returns the first row it covers. It overlaps the final
/// regular window.
pub fn tail_window(ds: &Dataset) -> Result<Option<(usize, TimeSeriesWindow)>> {
    let Some(src) = &ds.source else {
        return Ok(None);
    };
    let (rows, d, n) = (src.cells.len(), ds.n_steps(), ds.n_sensors());
    if d == 0 || rows % d == 0 || rows < d {
        return Ok(None);
    }
    let start = rows - d;
    let mut values = Array::zeros(&[n, d]);
    let mut mask = Array::zeros(&[n, d]);
    for t in 0..d {
        for s in 0..n {
            let c = src.cells[start + t][s].trim();
            if c.is_empty() {
                continue;
            }
            let v: f64 = c.parse().map_err(|_| Error::Parse {
                line: start + t + 2,
                reason: format!("`{c}` is not a number"),
            })?;
            values.set(&[s, t], ds.normalization[s].normalize(v));
            mask.set(&[s, t], 1.0);
        }
    }
    let graph_id = ds.windows.first().map_or_else(String::new, |w| w.graph_id.clone());
    Ok(Some((start, TimeSeriesWindow::new(values, mask, graph_id)?)))
}

/// Writes `time,<sensors...>` with denormalized values; unobserved cells
/// are left empty. The time column is the global step index.
pub fn write_dataset_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut header = vec!["time".to_string()];
    header.extend(ds.sensor_names.iter().cloned());
    w.write_record(&header)?;
    let d = ds.n_steps();
    for (wi, win) in ds.windows.iter().enumerate() {
        for t in 0..d {
            let mut row = vec![(wi * d + t).to_string()];
            for s in 0..ds.n_sensors() {
                if win.observed_mask.at(s, t) > 0.5 {
                    row.push(format!("{}", ds.denormalize(s, win.values.at(s, t))));
                } else {
                    row.push(String::new());
                }
            }
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mask file: `window,sensor,step` per evaluation entry.
pub fn write_mask_file(path: &Path, held: &HeldOut) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    w.write_record(["window", "sensor", "step"])?;
    for ((wi, s, t), _) in held.iter() {
        w.write_record(&[wi.to_string(), s.to_string(), t.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_mask_file(path: &Path) -> Result<Vec<(usize, usize, usize)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| -> Result<usize> {
            rec.get(i)
                .and_then(|c| c.trim().parse().ok())
                .ok_or_else(|| Error::Parse {
                    line,
                    reason: "expected three non-negative integers".into(),
                })
        };
        out.push((field(0)?, field(1)?, field(2)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema(d: usize) -> CsvSchema {
        CsvSchema {
            window_len: d,
            ..Default::default()
        }
    }

    #[test]
    fn one_empty_cell() {
        let text = "time,a,b\n0,1,5\n1,,6\n2,3,7\n3,4,8\n";
        let ds = read_csv(text.as_bytes(), &schema(4)).unwrap();
        let w = &ds.windows[0];
        assert_eq!(w.observed_count(), 7);
        assert_eq!(w.observed_mask.at(0, 1), 0.0);
        assert_eq!(w.values.at(0, 1), 0.0);
        assert_eq!(w.eval_count(), 0);
        // a: min 1, max 4 ⇒ 3 ↦ 2/3
        assert!((w.values.at(0, 2) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn fully_observed() {
        let text = "time,a,b\n0,1,5\n1,2,6\n";
        let ds = read_csv(text.as_bytes(), &schema(2)).unwrap();
        assert_eq!(ds.windows[0].observed_mask, Array::ones(&[2, 2]));
        assert_eq!(ds.windows[0].eval_mask, Array::zeros(&[2, 2]));
    }

    #[test]
    fn ragged_row_cites_line() {
        let text = "time,a,b,c\n0,1,2,3\n1,2,3\n";
        match read_csv(text.as_bytes(), &schema(1)) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell() {
        let text = "time,a\n0,1\n1,abc\n";
        assert!(matches!(
            read_csv(text.as_bytes(), &schema(1)),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn constant_sensor_is_named() {
        let text = "time,a,flat\n0,1,2\n1,2,2\n";
        match read_csv(text.as_bytes(), &schema(1)) {
            Err(Error::Normalization { sensor }) => assert_eq!(sensor, "flat"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn trailing_rows_are_not_windowed() {
        let text = "time,a\n0,1\n1,2\n2,3\n";
        let ds = read_csv(text.as_bytes(), &schema(2)).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.source.unwrap().times.len(), 3);
    }

    #[test]
    fn tail_window_covers_last_rows() {
        let text = "time,a\n0,1\n1,2\n2,\n3,4\n4,5\n";
        let ds = read_csv(text.as_bytes(), &schema(2)).unwrap();
        let (start, w) = tail_window(&ds).unwrap().unwrap();
        assert_eq!(start, 3);
        assert_eq!(w.observed_count(), 2);
        assert!((w.values.at(0, 1) - 1.0).abs() < 1e-15);
        let even = read_csv("time,a\n0,1\n1,2\n".as_bytes(), &schema(2)).unwrap();
        assert!(tail_window(&even).unwrap().is_none());
    }

    #[test]
    fn mask_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mask.csv");
        let mut h = HeldOut::default();
        h.insert(0, 1, 2, 0.5);
        h.insert(3, 0, 0, 0.1);
        write_mask_file(&p, &h).unwrap();
        assert_eq!(read_mask_file(&p).unwrap(), vec![(0, 1, 2), (3, 0, 0)]);
    }
}
