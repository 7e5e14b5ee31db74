//! Per-epoch run traces and their CSV form.
//!
//! A trace directory holds `trace.csv` (one row per epoch and training
//! sample), `val_trace.csv` (one row per epoch and clean-subset sample) and,
//! when the trainer reports them, `directions.csv`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

pub const TRACE_FILE: &str = "trace.csv";
pub const VAL_TRACE_FILE: &str = "val_trace.csv";
pub const DIRECTIONS_FILE: &str = "directions.csv";

const BASE_COLUMNS: [&str; 8] =
    ["epoch", "sample_id", "weight", "residual", "is_noisy", "e1_norm", "e2_norm", "val_residual_inf_norm"];
const SUMMARY_COLUMNS: [&str; 3] = ["mean_clean_weight", "mean_noisy_weight", "weight_auc"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Meta,
    Fbr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub weights: Vec<f64>,
    /// Training residuals `f(x) - y` (per-sample loss for multi-class runs).
    pub residuals: Vec<f64>,
    pub val_residuals: Vec<f64>,
    /// Per-sample weight drive; positive values push a weight up.
    pub directions: Option<Vec<f64>>,
    pub e1_norm: Option<f64>,
    pub e2_norm: Option<f64>,
}

impl EpochRecord {
    pub fn val_residual_inf(&self) -> f64 {
        stats::inf_norm(&self.val_residuals)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub kind: TraceKind,
    pub sample_ids: Vec<u64>,
    pub noisy: Vec<bool>,
    pub clean_ids: Vec<u64>,
    pub epochs: Vec<EpochRecord>,
}

/// Weight separation summary of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    /// Group means; absent when the group is empty.
    pub mean_clean_weight: Option<f64>,
    pub mean_noisy_weight: Option<f64>,
    /// AUC of weights as a score for "clean"; absent without both groups.
    pub weight_auc: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn mean_where(values: &[f64], mask: &[bool], keep: bool) -> Option<f64> {
    let picked: Vec<f64> = values.iter().zip(mask).filter(|(_, &m)| m == keep).map(|(v, _)| *v).collect();
    (!picked.is_empty()).then(|| stats::mean(&picked))
}

impl RunTrace {
    pub fn new(kind: TraceKind, sample_ids: Vec<u64>, noisy: Vec<bool>, clean_ids: Vec<u64>) -> Self {
        RunTrace { kind, sample_ids, noisy, clean_ids, epochs: Vec::new() }
    }

    pub fn num_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn weight_summary(&self, record: &EpochRecord) -> WeightSummary {
        let clean: Vec<bool> = self.noisy.iter().map(|n| !n).collect();
        WeightSummary {
            mean_clean_weight: mean_where(&record.weights, &self.noisy, false),
            mean_noisy_weight: mean_where(&record.weights, &self.noisy, true),
            weight_auc: stats::auc(&record.weights, &clean),
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.sample_ids.len();
        if self.noisy.len() != n {
            return Err(Error::Dimension { what: "noise flags", expected: n, got: self.noisy.len() });
        }
        for rec in &self.epochs {
            for (what, len) in [("epoch weights", rec.weights.len()), ("epoch residuals", rec.residuals.len())] {
                if len != n {
                    return Err(Error::Dimension { what, expected: n, got: len });
                }
            }
            if rec.val_residuals.len() != self.clean_ids.len() {
                return Err(Error::Dimension {
                    what: "validation residuals",
                    expected: self.clean_ids.len(),
                    got: rec.val_residuals.len(),
                });
            }
        }
        Ok(())
    }

    pub fn trace_csv(&self) -> String {
        let mut header: Vec<&str> = BASE_COLUMNS.to_vec();
        if self.kind == TraceKind::Fbr {
            header.extend(SUMMARY_COLUMNS);
        }
        let mut out = header.join(",");
        out.push('\n');
        for rec in &self.epochs {
            let val_inf = rec.val_residual_inf();
            let summary = (self.kind == TraceKind::Fbr).then(|| self.weight_summary(rec));
            for i in 0..self.sample_ids.len() {
                let _ = write!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    rec.epoch,
                    self.sample_ids[i],
                    rec.weights[i],
                    rec.residuals[i],
                    u8::from(self.noisy[i]),
                    fmt_opt(rec.e1_norm),
                    fmt_opt(rec.e2_norm),
                    val_inf
                );
                if let Some(s) = summary {
                    let _ = write!(
                        out,
                        ",{},{},{}",
                        fmt_opt(s.mean_clean_weight),
                        fmt_opt(s.mean_noisy_weight),
                        fmt_opt(s.weight_auc)
                    );
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn val_trace_csv(&self) -> String {
        let mut out = String::from("epoch,clean_id,val_residual\n");
        for rec in &self.epochs {
            for (id, r) in self.clean_ids.iter().zip(&rec.val_residuals) {
                let _ = writeln!(out, "{},{id},{r}", rec.epoch);
            }
        }
        out
    }

    pub fn directions_csv(&self) -> Option<String> {
        if self.epochs.iter().all(|r| r.directions.is_none()) {
            return None;
        }
        let mut out = String::from("epoch,sample_id,direction,is_noisy\n");
        for rec in &self.epochs {
            if let Some(dirs) = &rec.directions {
                for i in 0..self.sample_ids.len() {
                    let _ =
                        writeln!(out, "{},{},{},{}", rec.epoch, self.sample_ids[i], dirs[i], u8::from(self.noisy[i]));
                }
            }
        }
        Some(out)
    }

    /// Writes the trace files into `dir`, returning the file names written.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<&'static str>> {
        self.validate()?;
        fs::create_dir_all(dir)?;
        fs::write(dir.join(TRACE_FILE), self.trace_csv())?;
        fs::write(dir.join(VAL_TRACE_FILE), self.val_trace_csv())?;
        let mut files = vec![TRACE_FILE, VAL_TRACE_FILE];
        if let Some(d) = self.directions_csv() {
            fs::write(dir.join(DIRECTIONS_FILE), d)?;
            files.push(DIRECTIONS_FILE);
        }
        Ok(files)
    }

    pub fn read_dir(dir: &Path) -> Result<RunTrace> {
        let text = fs::read_to_string(dir.join(TRACE_FILE))?;
        let mut trace = parse_trace(&text)?;
        let val_path = dir.join(VAL_TRACE_FILE);
        if val_path.exists() {
            parse_val_trace(&fs::read_to_string(val_path)?, &mut trace)?;
        }
        let dir_path = dir.join(DIRECTIONS_FILE);
        if dir_path.exists() {
            parse_directions(&fs::read_to_string(dir_path)?, &mut trace)?;
        }
        Ok(trace)
    }
}

struct Table {
    index: BTreeMap<String, usize>,
    records: Vec<(usize, csv::StringRecord)>,
    file: &'static str,
}

impl Table {
    fn parse(text: &str, file: &'static str, required: &[&str]) -> Result<Table> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| Error::Parse { line: 1, msg: format!("{file}: {e}") })?.clone();
        let index: BTreeMap<String, usize> =
            headers.iter().enumerate().map(|(i, h)| (h.trim().to_string(), i)).collect();
        for col in required {
            if !index.contains_key(*col) {
                return Err(Error::Parse { line: 1, msg: format!("{file}: missing column `{col}`") });
            }
        }
        let mut records = Vec::new();
        for (k, rec) in reader.records().enumerate() {
            let line = k + 2;
            let rec = rec.map_err(|e| Error::Parse { line, msg: format!("{file}: {e}") })?;
            records.push((line, rec));
        }
        Ok(Table { index, records, file })
    }

    fn has(&self, col: &str) -> bool {
        self.index.contains_key(col)
    }

    fn raw<'r>(&self, rec: &'r csv::StringRecord, line: usize, col: &str) -> Result<&'r str> {
        let idx = self.index[col];
        rec.get(idx)
            .map(str::trim)
            .ok_or_else(|| Error::Parse { line, msg: format!("{}: column `{col}` missing from row", self.file) })
    }

    fn get<T: std::str::FromStr>(&self, rec: &csv::StringRecord, line: usize, col: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(rec, line, col)?;
        raw.parse().map_err(|e| Error::Parse { line, msg: format!("{}: column `{col}` value `{raw}`: {e}", self.file) })
    }

    fn get_opt(&self, rec: &csv::StringRecord, line: usize, col: &str) -> Result<Option<f64>> {
        if !self.has(col) || self.raw(rec, line, col)?.is_empty() {
            return Ok(None);
        }
        self.get(rec, line, col).map(Some)
    }
}

fn parse_trace(text: &str) -> Result<RunTrace> {
    let table = Table::parse(text, TRACE_FILE, &["epoch", "sample_id", "weight", "residual", "is_noisy"])?;
    let kind = if SUMMARY_COLUMNS.iter().all(|c| table.has(c)) { TraceKind::Fbr } else { TraceKind::Meta };
    let mut trace = RunTrace::new(kind, Vec::new(), Vec::new(), Vec::new());
    let mut first_epoch: Option<usize> = None;
    for (line, rec) in &table.records {
        let line = *line;
        let epoch: usize = table.get(rec, line, "epoch")?;
        let id: u64 = table.get(rec, line, "sample_id")?;
        let noisy = match table.raw(rec, line, "is_noisy")? {
            "0" | "false" => false,
            "1" | "true" => true,
            other => {
                return Err(Error::Parse {
                    line,
                    msg: format!("{TRACE_FILE}: column `is_noisy` value `{other}` is not 0/1"),
                })
            }
        };
        if first_epoch.is_none() {
            first_epoch = Some(epoch);
        }
        if trace.epochs.last().is_none_or(|r| r.epoch != epoch) {
            if let Some(prev) = trace.epochs.last() {
                if epoch < prev.epoch {
                    return Err(Error::Parse { line, msg: format!("{TRACE_FILE}: column `epoch` goes backwards") });
                }
                if prev.weights.len() != trace.sample_ids.len() {
                    return Err(Error::Parse {
                        line,
                        msg: format!("{TRACE_FILE}: epoch {} has missing samples", prev.epoch),
                    });
                }
            }
            trace.epochs.push(EpochRecord {
                epoch,
                weights: Vec::new(),
                residuals: Vec::new(),
                val_residuals: Vec::new(),
                directions: None,
                e1_norm: table.get_opt(rec, line, "e1_norm")?,
                e2_norm: table.get_opt(rec, line, "e2_norm")?,
            });
        }
        let current = trace.epochs.len() - 1;
        if Some(epoch) == first_epoch {
            trace.sample_ids.push(id);
            trace.noisy.push(noisy);
        } else {
            let pos = trace.epochs[current].weights.len();
            if trace.sample_ids.get(pos) != Some(&id) {
                return Err(Error::Parse {
                    line,
                    msg: format!("{TRACE_FILE}: column `sample_id` order differs between epochs"),
                });
            }
        }
        let rec_mut = &mut trace.epochs[current];
        rec_mut.weights.push(table.get(rec, line, "weight")?);
        rec_mut.residuals.push(table.get(rec, line, "residual")?);
    }
    if trace.epochs.is_empty() {
        return Err(Error::Parse { line: 1, msg: format!("{TRACE_FILE}: no rows") });
    }
    Ok(trace)
}

fn parse_val_trace(text: &str, trace: &mut RunTrace) -> Result<()> {
    let table = Table::parse(text, VAL_TRACE_FILE, &["epoch", "clean_id", "val_residual"])?;
    let by_epoch: BTreeMap<usize, usize> = trace.epochs.iter().enumerate().map(|(k, r)| (r.epoch, k)).collect();
    let first = trace.epochs.first().map(|r| r.epoch);
    for (line, rec) in &table.records {
        let line = *line;
        let epoch: usize = table.get(rec, line, "epoch")?;
        let id: u64 = table.get(rec, line, "clean_id")?;
        let k = *by_epoch.get(&epoch).ok_or_else(|| Error::Parse {
            line,
            msg: format!("{VAL_TRACE_FILE}: column `epoch` value {epoch} absent from {TRACE_FILE}"),
        })?;
        if Some(epoch) == first {
            trace.clean_ids.push(id);
        }
        trace.epochs[k].val_residuals.push(table.get(rec, line, "val_residual")?);
    }
    trace.validate()
}

fn parse_directions(text: &str, trace: &mut RunTrace) -> Result<()> {
    let table = Table::parse(text, DIRECTIONS_FILE, &["epoch", "sample_id", "direction"])?;
    let by_epoch: BTreeMap<usize, usize> = trace.epochs.iter().enumerate().map(|(k, r)| (r.epoch, k)).collect();
    for (line, rec) in &table.records {
        let line = *line;
        let epoch: usize = table.get(rec, line, "epoch")?;
        let k = *by_epoch.get(&epoch).ok_or_else(|| Error::Parse {
            line,
            msg: format!("{DIRECTIONS_FILE}: column `epoch` value {epoch} absent from {TRACE_FILE}"),
        })?;
        trace.epochs[k].directions.get_or_insert_with(Vec::new).push(table.get(rec, line, "direction")?);
    }
    for rec in &trace.epochs {
        if let Some(d) = &rec.directions {
            if d.len() != trace.sample_ids.len() {
                return Err(Error::Dimension {
                    what: "epoch directions",
                    expected: trace.sample_ids.len(),
                    got: d.len(),
                });
            }
        }
    }
    Ok(())
}
