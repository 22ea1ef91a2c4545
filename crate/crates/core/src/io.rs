//! CSV and JSON artifacts.
//!
//! Every CSV starts with one `# dmdkit-<kind> v<version> ...` schema line,
//! then a header row. Floats are written in the shortest form that parses
//! back to the same `f64`, so re-running a command reproduces files byte
//! for byte.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::domain::{SiteParams, SystemState};
use crate::dynamics::Trajectory;
use crate::error::{DmdError, Result};
use crate::minimizer::MinimizeTrace;

pub const SCHEMA_VERSION: u32 = 1;

/// Round-trip decimal form of a float.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    /// Artifact kind, e.g. `state`.
    pub kind: String,
    /// `key=value` metadata on the schema line.
    pub meta: Vec<(String, String)>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(kind: &str, header: Vec<String>) -> Self {
        Self {
            kind: kind.to_string(),
            meta: Vec::new(),
            header,
            rows: Vec::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn push_floats(&mut self, row: &[f64]) {
        self.rows.push(row.iter().map(|&v| fmt_f64(v)).collect());
    }

    pub fn schema_line(&self) -> String {
        let mut line = format!("# dmdkit-{} v{SCHEMA_VERSION}", self.kind);
        for (k, v) in &self.meta {
            line.push_str(&format!(" {k}={v}"));
        }
        line
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.header).map_err(csv_err)?;
        for row in &self.rows {
            if row.len() != self.header.len() {
                return Err(DmdError::Shape {
                    expected: self.header.len(),
                    got: row.len(),
                });
            }
            w.write_record(row).map_err(csv_err)?;
        }
        let body = w.into_inner().map_err(|e| DmdError::Parse(e.to_string()))?;
        let body = String::from_utf8(body).map_err(|e| DmdError::Parse(e.to_string()))?;
        Ok(format!("{}\n{body}", self.schema_line()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let first = text.lines().next().unwrap_or_default();
        let mut words = first
            .strip_prefix("# dmdkit-")
            .ok_or_else(|| DmdError::Parse("missing dmdkit schema line".into()))?
            .split_whitespace();
        let kind = words.next().unwrap_or_default().to_string();
        let version = words.next().unwrap_or_default();
        if version != format!("v{SCHEMA_VERSION}") {
            return Err(DmdError::Parse(format!("unsupported schema version {version:?}")));
        }
        let meta = words
            .filter_map(|w| w.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let header = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(rec.map_err(csv_err)?.iter().map(str::to_string).collect());
        }
        Ok(Self {
            kind,
            meta,
            header,
            rows,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DmdError::Parse(format!("no column {name:?}")))?;
        self.rows.iter().map(|r| parse_f64(&r[idx])).collect()
    }
}

fn csv_err(e: csv::Error) -> DmdError {
    DmdError::Parse(e.to_string())
}

pub fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| DmdError::Parse(format!("{s:?}: {e}")))
}

fn axis_names(prefix: &str, i: usize, dim: usize) -> impl Iterator<Item = String> + '_ {
    (0..dim).map(move |a| format!("{prefix}{i}_{a}"))
}

/// One row per site: `site, x_0.., k, c, mu_hat, z`.
pub fn state_table(state: &SystemState) -> CsvTable {
    let d = state.dim();
    let mut header = vec!["site".to_string()];
    header.extend((0..d).map(|a| format!("x_{a}")));
    header.extend(["k", "c", "mu_hat", "z"].map(String::from));
    let mut t = CsvTable::new("state", header)
        .with_meta("n_sites", state.n_sites())
        .with_meta("dim", d)
        .with_meta("beta", fmt_f64(state.beta()))
        .with_meta("half_width", fmt_f64(state.domain().half_width()));
    for (i, s) in state.sites().iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(s.x.iter().map(|&v| fmt_f64(v)));
        row.extend([s.k, s.c, s.mu_hat, s.z].map(fmt_f64));
        t.rows.push(row);
    }
    t
}

/// Site parameters `(x, k, c)` read back from a state table.
pub fn state_params(table: &CsvTable) -> Result<Vec<SiteParams>> {
    if table.kind != "state" {
        return Err(DmdError::Parse(format!("expected a state table, got {}", table.kind)));
    }
    let k = table.column("k")?;
    let c = table.column("c")?;
    let dim = table.header.iter().filter(|h| h.starts_with("x_")).count();
    let xs: Vec<Vec<f64>> = (0..dim).map(|a| table.column(&format!("x_{a}"))).collect::<Result<_>>()?;
    Ok((0..k.len())
        .map(|i| ((0..dim).map(|a| xs[a][i]).collect(), k[i], c[i]))
        .collect())
}

pub fn trace_table(trace: &MinimizeTrace) -> CsvTable {
    let header = ["iteration", "value", "pg_norm", "step"].map(String::from).to_vec();
    let status = serde_json::to_string(&trace.status).unwrap_or_default();
    let mut t = CsvTable::new("trace", header).with_meta("status", status.trim_matches('"'));
    for r in &trace.rows {
        t.rows.push(vec![
            r.iteration.to_string(),
            fmt_f64(r.value),
            fmt_f64(r.pg_norm),
            fmt_f64(r.step),
        ]);
    }
    t
}

/// `t, c_i.., x_i_a.., k_i.., f_hat, sum_c`.
pub fn trajectory_table(traj: &Trajectory) -> CsvTable {
    let n = traj.final_state.n_sites();
    let d = traj.final_state.dim();
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("c_{i}")));
    for i in 0..n {
        header.extend(axis_names("x_", i, d));
    }
    header.extend((0..n).map(|i| format!("k_{i}")));
    header.extend(["f_hat", "sum_c"].map(String::from));
    let mut t = CsvTable::new("trajectory", header)
        .with_meta("n_sites", n)
        .with_meta("dim", d);
    for r in &traj.rows {
        let mut row = vec![r.t];
        row.extend(&r.c);
        row.extend(&r.x);
        row.extend(&r.k);
        row.push(r.value);
        row.push(r.sum_c);
        t.push_floats(&row);
    }
    t
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| DmdError::Parse(e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = to_json(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{HarmonicVariant, Model, ThermodynamicDomain};

    fn state() -> SystemState {
        let d = ThermodynamicDomain::new(1.0, 2, 2.0).unwrap();
        SystemState::new(
            d,
            vec![(vec![0.1, -0.3], 1.0 / 3.0, 0.2), (vec![1.0, 0.5], 2.0, 0.9)],
            vec![vec![1], vec![0]],
            Model::Vacancy,
            HarmonicVariant::Gated,
            false,
        )
        .unwrap()
    }

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0 / 3.0, 1e-300, -2.5e17, f64::MIN_POSITIVE] {
            assert_eq!(parse_f64(&fmt_f64(v)).unwrap(), v);
        }
    }

    #[test]
    fn state_round_trip() {
        let s = state();
        let text = state_table(&s).to_csv_string().unwrap();
        assert!(text.starts_with("# dmdkit-state v1 n_sites=2 dim=2"));
        let back = CsvTable::parse(&text).unwrap();
        let params = state_params(&back).unwrap();
        assert_eq!(params[0], (vec![0.1, -0.3], 1.0 / 3.0, 0.2));
        assert_eq!(params[1].0, vec![1.0, 0.5]);
    }

    #[test]
    fn rejects_missing_schema() {
        assert!(CsvTable::parse("a,b\n1,2\n").is_err());
        assert!(CsvTable::parse("# dmdkit-state v9\na\n1\n").is_err());
    }
}
