//! Metric tables written as CSV with a JSONL mirror and a one-row summary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub values: Vec<f64>,
    /// Excluded from the CSV so that files stay byte-identical across runs.
    pub wall_seconds: f64,
}

/// Rows sharing one column layout; the first column is the step index.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsTable {
    pub run_id: String,
    pub step_column: String,
    pub columns: Vec<String>,
    pub records: Vec<MetricsRecord>,
}

impl MetricsTable {
    pub fn new(run_id: impl Into<String>, step_column: impl Into<String>, columns: Vec<String>) -> Self {
        MetricsTable {
            run_id: run_id.into(),
            step_column: step_column.into(),
            columns,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, step: u64, values: Vec<f64>, wall_seconds: f64) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::invalid(format!(
                "{} values for {} columns",
                values.len(),
                self.columns.len()
            )));
        }
        if let Some(last) = self.records.last() {
            if step <= last.step {
                return Err(Error::invalid(format!(
                    "step {step} does not follow {}",
                    last.step
                )));
            }
        }
        self.records.push(MetricsRecord {
            step,
            values,
            wall_seconds,
        });
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.records.iter().map(|r| r.values[j]).collect())
    }

    /// Record with the highest value in `column`; the earliest one wins ties.
    pub fn peak(&self, column: &str) -> Option<&MetricsRecord> {
        let j = self.columns.iter().position(|c| c == column)?;
        let mut best: Option<&MetricsRecord> = None;
        for r in &self.records {
            if best.is_none_or(|b| r.values[j] > b.values[j]) {
                best = Some(r);
            }
        }
        best
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![self.step_column.clone()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.records {
            let mut row = vec![r.step.to_string()];
            row.extend(r.values.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::invalid(e.to_string()))
    }

    /// Inverse of [`to_csv`](Self::to_csv); wall-clock times are not recovered.
    pub fn from_csv(run_id: &str, bytes: &[u8]) -> Result<Self> {
        let mut r = csv::Reader::from_reader(bytes);
        let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
        let Some((step_column, columns)) = header.split_first() else {
            return Err(Error::data("metrics CSV has no header"));
        };
        let mut table = MetricsTable::new(run_id, step_column.clone(), columns.to_vec());
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let step = rec[0]
                .parse()
                .map_err(|_| Error::data(format!("bad step `{}`", &rec[0])))?;
            let values = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|_| Error::data(format!("bad value `{v}`"))))
                .collect::<Result<Vec<_>>>()?;
            table.push(step, values, 0.0)?;
        }
        Ok(table)
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for r in &self.records {
            let mut obj = serde_json::Map::new();
            obj.insert("run_id".into(), self.run_id.clone().into());
            obj.insert(self.step_column.clone(), r.step.into());
            for (c, v) in self.columns.iter().zip(&r.values) {
                obj.insert(c.clone(), serde_json::Number::from_f64(*v).map_or(serde_json::Value::Null, Into::into));
            }
            obj.insert("wall_seconds".into(), serde_json::Number::from_f64(r.wall_seconds).map_or(serde_json::Value::Null, Into::into));
            serde_json::to_writer(&mut out, &obj).expect("json to memory");
            out.push(b'\n');
        }
        out
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::data(format!("csv: {e}"))
}

/// Ordered key/value pairs written as a two-row CSV.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub entries: Vec<(String, String)>,
}

impl Summary {
    pub fn add(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.entries.push((key.into(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Peak of `column` with the step it occurred at, plus the same row's other columns.
    pub fn peak_of(table: &MetricsTable, column: &str) -> Summary {
        let mut s = Summary::default();
        s.add("run_id", &table.run_id);
        s.add("peak_metric", column);
        if let Some(r) = table.peak(column) {
            let j = table.columns.iter().position(|c| c == column).unwrap();
            s.add("peak_value", r.values[j]);
            s.add(format!("{}_at_peak", table.step_column), r.step);
            for (c, v) in table.columns.iter().zip(&r.values) {
                if c != column {
                    s.add(format!("{c}_at_peak"), v);
                }
            }
        }
        s
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.entries.iter().map(|e| &e.0)).map_err(csv_err)?;
        w.write_record(self.entries.iter().map(|e| &e.1)).map_err(csv_err)?;
        w.into_inner().map_err(|e| Error::invalid(e.to_string()))
    }
}

/// Paths written by [`emit_metrics`].
#[derive(Clone, Debug)]
pub struct EmittedFiles {
    pub csv: PathBuf,
    pub jsonl: PathBuf,
    pub summary: PathBuf,
}

/// Writes `<stem>.csv`, `<stem>.jsonl` and `<stem>_summary.csv` under `dir`.
pub fn emit_metrics(table: &MetricsTable, summary: &Summary, dir: &Path, stem: &str) -> Result<EmittedFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = EmittedFiles {
        csv: dir.join(format!("{stem}.csv")),
        jsonl: dir.join(format!("{stem}.jsonl")),
        summary: dir.join(format!("{stem}_summary.csv")),
    };
    write(&files.csv, &table.to_csv()?)?;
    write(&files.jsonl, &table.to_jsonl())?;
    write(&files.summary, &summary.to_csv()?)?;
    Ok(files)
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_run_is_header_only() {
        let t = MetricsTable::new("r", "round", vec!["avg_acc".into(), "collective_acc".into()]);
        assert_eq!(t.to_csv().unwrap(), b"round,avg_acc,collective_acc\n");
        assert!(t.to_jsonl().is_empty());
    }

    #[test]
    fn steps_must_increase() {
        let mut t = MetricsTable::new("r", "step", vec!["a".into()]);
        t.push(1, vec![0.5], 0.0).unwrap();
        assert!(t.push(1, vec![0.5], 0.0).is_err());
        assert!(t.push(2, vec![0.5, 1.0], 0.0).is_err());
    }

    #[test]
    fn summary_reports_peak_row() {
        let mut t = MetricsTable::new("r", "update_index", vec!["backward_passes".into(), "valid_acc".into()]);
        t.push(100, vec![100.0, 0.9], 0.0).unwrap();
        t.push(200, vec![200.0, 0.95], 0.0).unwrap();
        t.push(300, vec![300.0, 0.95], 0.0).unwrap();
        let s = Summary::peak_of(&t, "valid_acc");
        assert_eq!(s.get("peak_value"), Some("0.95"));
        assert_eq!(s.get("update_index_at_peak"), Some("200"));
        assert_eq!(s.get("backward_passes_at_peak"), Some("200"));
    }

    #[test]
    fn emit_writes_three_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = MetricsTable::new("r", "step", vec!["a".into()]);
        t.push(1, vec![0.25], 1.5).unwrap();
        let f = emit_metrics(&t, &Summary::peak_of(&t, "a"), dir.path(), "run").unwrap();
        assert_eq!(fs::read(&f.csv).unwrap(), b"step,a\n1,0.25\n");
        let line: serde_json::Value = serde_json::from_slice(&fs::read(&f.jsonl).unwrap()).unwrap();
        assert_eq!(line["wall_seconds"], 1.5);
        assert!(fs::read_to_string(&f.summary).unwrap().starts_with("run_id,"));
        let bad = dir.path().join("missing").join("x").join("\0");
        assert!(emit_metrics(&t, &Summary::default(), &bad, "run").is_err());
    }

    proptest! {
        #[test]
        fn csv_round_trip(rows in prop::collection::vec(prop::collection::vec(-1e9f64..1e9, 3), 0..20)) {
            let mut t = MetricsTable::new("r", "step", vec!["a".into(), "b".into(), "c".into()]);
            for (i, v) in rows.into_iter().enumerate() {
                t.push(i as u64 * 10 + 1, v, 0.0).unwrap();
            }
            let back = MetricsTable::from_csv("r", &t.to_csv().unwrap()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
