//! CSV tables with a provenance comment line, plus aligned text rendering.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// A named table; every cell is already formatted.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self { name: name.into(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len(), "row width in {}", self.name);
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Writes `# provenance`, the header, and the rows.
    pub fn write_csv<W: Write>(&self, mut out: W, provenance: &str) -> io::Result<()> {
        writeln!(out, "# {provenance}")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.flush()
    }

    /// Columns padded to their widest cell.
    pub fn render(&self) -> String {
        let widths: Vec<usize> = (0..self.header.len())
            .map(|c| self.rows.iter().map(|r| r[c].len()).chain([self.header[c].len()]).max().unwrap_or(0))
            .collect();
        let line = |cells: &[String]| {
            let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            parts.join("  ").trim_end().to_string()
        };
        let mut s = line(&self.header);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&line(r));
            s.push('\n');
        }
        s
    }
}

pub fn provenance(cfg: &ExperimentConfig) -> String {
    format!("sgrgmm {VERSION} experiment={} config_sha256={} seed={}", cfg.experiment, cfg.hash(), cfg.seed)
}

/// Full-precision float; round-trips through `str::parse`.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

pub fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// Writes each table as `<name>.csv` plus the resolved `config.toml`.
pub fn write_all(dir: &Path, cfg: &ExperimentConfig, tables: &[Table]) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let prov = provenance(cfg);
    let mut written = Vec::new();
    let cfg_path = dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml())?;
    written.push(cfg_path);
    for t in tables {
        let path = dir.join(format!("{}.csv", t.name));
        let mut buf = Vec::new();
        t.write_csv(&mut buf, &prov)?;
        fs::write(&path, buf)?;
        written.push(path);
    }
    Ok(written)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
