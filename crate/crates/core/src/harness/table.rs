use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean and sample standard deviation of one (size, method) cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (`n - 1` denominator); zero for one run.
    pub std: f64,
    /// Number of runs that contributed.
    pub runs: usize,
}

impl Summary {
    /// Two-pass mean and standard deviation. An empty slice gives NaN.
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, runs: 0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        if values.iter().all(|v| *v == values[0]) {
            return Self { mean: values[0], std: 0.0, runs: n };
        }
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, runs: n }
    }

    pub fn plus_3sigma(&self) -> f64 {
        self.mean + 3.0 * self.std
    }

    pub fn minus_3sigma(&self) -> f64 {
        self.mean - 3.0 * self.std
    }
}

/// A failed Monte Carlo run, kept out of the aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub size: usize,
    pub method: String,
    pub run: usize,
    pub stream: u64,
    pub message: String,
}

/// Companion record written next to every table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TableMetadata {
    pub experiment: String,
    pub metric: String,
    pub master_seed: u64,
    pub config_digest: String,
    pub mc_runs: usize,
    pub wall_time_seconds: f64,
    #[serde(default)]
    pub failures: Vec<RunFailure>,
    /// Rejuvenation scale chosen for the SIR filter, keyed by ensemble size.
    #[serde(default)]
    pub sir_tau: BTreeMap<String, f64>,
    /// Fraction of SNEES terms dropped as outliers, keyed by `size/method`.
    #[serde(default)]
    pub snees_discard_fraction: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub size: usize,
    /// One summary per method, in column order.
    pub cells: Vec<Summary>,
}

/// Per-size, per-method Monte Carlo summary of one metric.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub methods: Vec<String>,
    pub rows: Vec<TableRow>,
    pub metadata: TableMetadata,
}

impl ResultTable {
    pub fn header(&self) -> Vec<String> {
        let mut cols = vec!["N".to_string()];
        for m in &self.methods {
            cols.push(m.clone());
            cols.push(format!("{m}p3s"));
            cols.push(format!("{m}m3s"));
        }
        cols
    }

    /// Summary for `method` at ensemble size `size`.
    pub fn get(&self, size: usize, method: &str) -> Option<&Summary> {
        let col = self.methods.iter().position(|m| m == method)?;
        self.rows.iter().find(|r| r.size == size).map(|r| &r.cells[col])
    }

    /// CSV text: header row then one row per ensemble size, values with 17
    /// significant digits, LF line endings.
    pub fn body(&self) -> String {
        let mut out = self.header().join(",");
        out.push('\n');
        for row in &self.rows {
            write!(out, "{}", row.size).unwrap();
            for cell in &row.cells {
                for v in [cell.mean, cell.plus_3sigma(), cell.minus_3sigma()] {
                    write!(out, ",{v:.16e}").unwrap();
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Path of the metadata file that accompanies `table_path`.
pub fn metadata_path(table_path: &Path) -> PathBuf {
    table_path.with_extension("meta.toml")
}

/// Writes the table body to `path` and its metadata next to it.
pub fn emit_table(table: &ResultTable, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, table.body())?;
    let meta = toml::to_string(&table.metadata).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(metadata_path(path), meta)?;
    Ok(())
}

/// Table text read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTable {
    pub header: Vec<String>,
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl ParsedTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|(_, v)| v[k - 1]).collect())
    }
}

pub fn parse_table(text: &str) -> Result<ParsedTable> {
    let mut lines = text.lines();
    let header: Vec<String> =
        lines.next().ok_or(Error::EmptyInput)?.split(',').map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("N") {
        return Err(Error::Config("table header must start with N".into()));
    }
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        let mut fields = line.split(',');
        let bad = |what: &str| Error::Config(format!("table row {}: {what}", k + 1));
        let size = fields.next().and_then(|f| f.parse().ok()).ok_or_else(|| bad("bad ensemble size"))?;
        let values: Vec<f64> = fields.map(|f| f.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad value"))?;
        if values.len() + 1 != header.len() {
            return Err(bad("wrong column count"));
        }
        rows.push((size, values));
    }
    Ok(ParsedTable { header, rows })
}

pub fn read_table(path: &Path) -> Result<ParsedTable> {
    parse_table(&std::fs::read_to_string(path)?)
}

pub fn read_metadata(table_path: &Path) -> Result<TableMetadata> {
    let text = std::fs::read_to_string(metadata_path(table_path))?;
    toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(methods: &[&str], rows: Vec<TableRow>) -> ResultTable {
        ResultTable {
            methods: methods.iter().map(|m| m.to_string()).collect(),
            rows,
            metadata: TableMetadata { metric: "RMSE".into(), master_seed: 3, ..Default::default() },
        }
    }

    #[test]
    fn summary_conventions() {
        let one = Summary::from_values(&[2.5]);
        assert_eq!((one.mean, one.std), (2.5, 0.0));
        assert_eq!(one.plus_3sigma(), one.mean);
        assert_eq!(one.minus_3sigma(), one.mean);
        assert_eq!(Summary::from_values(&[0.1; 7]).std, 0.0);
        let s = Summary::from_values(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(Summary::from_values(&[]).mean.is_nan());
    }

    #[test]
    fn header_layout() {
        let t = table(&["EnGMF", "ELEnGMF"], vec![TableRow { size: 100, cells: vec![Summary::from_values(&[1.0]); 2] }]);
        let header = t.header();
        assert_eq!(header.len(), 7);
        assert_eq!(&header[4..], ["ELEnGMF", "ELEnGMFp3s", "ELEnGMFm3s"]);
    }

    #[test]
    fn emit_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested").join("t.csv");
        let t = table(
            &["A", "B"],
            vec![
                TableRow { size: 25, cells: vec![Summary::from_values(&[0.1, 0.3]), Summary::from_values(&[1e-300])] },
                TableRow { size: 50, cells: vec![Summary::from_values(&[]), Summary::from_values(&[-2.0, 7.0])] },
            ],
        );
        emit_table(&t, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains('\r'));
        let parsed = read_table(&path).unwrap();
        assert_eq!(parsed.header, t.header());
        assert_eq!(parsed.rows[0].1[0], 0.2);
        assert_eq!(parsed.column("Bp3s").unwrap()[1], t.rows[1].cells[1].plus_3sigma());
        assert!(parsed.rows[1].1[0].is_nan());
        assert_eq!(read_metadata(&path).unwrap(), t.metadata);
    }

    #[test]
    fn rejects_malformed_tables() {
        assert!(parse_table("").is_err());
        assert!(parse_table("M,A\n1,2\n").is_err());
        assert!(parse_table("N,A,Ap3s,Am3s\n1,2,3\n").is_err());
        assert!(parse_table("N,A,Ap3s,Am3s\nx,2,3,4\n").is_err());
    }

    proptest! {
        #[test]
        fn values_round_trip_exactly(values in proptest::collection::vec(-1e12f64..1e12, 1..12)) {
            let s = Summary::from_values(&values);
            prop_assert!(s.minus_3sigma() <= s.mean && s.mean <= s.plus_3sigma());
            let t = table(&["M"], vec![TableRow { size: 9, cells: vec![s] }]);
            let parsed = parse_table(&t.body()).unwrap();
            prop_assert_eq!(&parsed.rows[0].1, &vec![s.mean, s.plus_3sigma(), s.minus_3sigma()]);
        }
    }
}
