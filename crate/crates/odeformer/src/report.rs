//! Study reports: per-seed rows, medians, property checks.

use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::Context;

pub const REPORT_HEADER: [&str; 6] = ["study", "variant", "depth", "metric", "seed", "value"];

/// Seed column of a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Seed {
    Run(u64),
    /// Median over the seeds of the cell.
    Median,
    /// Value that does not depend on a seed; written as `-`.
    Fixed,
}

impl fmt::Display for Seed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Seed::Run(s) => write!(f, "{s}"),
            Seed::Median => f.write_str("median"),
            Seed::Fixed => f.write_str("-"),
        }
    }
}

/// One measured value.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub variant: String,
    pub depth: usize,
    pub metric: String,
    pub seed: Seed,
    pub value: f64,
}

/// Outcome of one declared property.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// Wall time of one trained cell; kept apart from the reproducible rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub cell: String,
    pub secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub study: String,
    pub rows: Vec<Row>,
    pub checks: Vec<Check>,
    pub timings: Vec<Timing>,
    /// Additional CSV files as `(file name, contents)`.
    pub extra: Vec<(String, String)>,
}

/// Median of the finite-or-infinite values; NaN for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl StudyReport {
    pub fn new(study: &str) -> Self {
        Self { study: study.to_string(), rows: Vec::new(), checks: Vec::new(), timings: Vec::new(), extra: Vec::new() }
    }

    pub fn push(&mut self, variant: impl ToString, depth: usize, metric: &str, seed: Seed, value: f64) {
        self.rows.push(Row { variant: variant.to_string(), depth, metric: metric.to_string(), seed, value });
    }

    pub fn check(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), pass, detail: detail.into() });
    }

    /// Per-seed values of one (variant, depth, metric) cell.
    pub fn values(&self, variant: &str, depth: usize, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| {
                matches!(r.seed, Seed::Run(_)) && r.variant == variant && r.depth == depth && r.metric == metric
            })
            .map(|r| r.value)
            .collect()
    }

    /// The aggregate row of a cell, if present.
    pub fn median_of(&self, variant: &str, depth: usize, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.seed == Seed::Median && r.variant == variant && r.depth == depth && r.metric == metric)
            .map(|r| r.value)
    }

    /// Appends a median row for every (variant, depth, metric) cell that has
    /// per-seed rows, in first-appearance order.
    pub fn add_medians(&mut self) {
        let mut cells: Vec<(String, usize, String)> = Vec::new();
        for r in self.rows.iter().filter(|r| matches!(r.seed, Seed::Run(_))) {
            let key = (r.variant.clone(), r.depth, r.metric.clone());
            if !cells.contains(&key) {
                cells.push(key);
            }
        }
        for (v, d, m) in cells {
            if self.median_of(&v, d, &m).is_none() {
                let med = median(&self.values(&v, d, &m));
                self.push(v, d, &m, Seed::Median, med);
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn to_csv(&self) -> anyhow::Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(REPORT_HEADER)?;
        for r in &self.rows {
            let seed = r.seed.to_string();
            w.write_record([
                self.study.as_str(),
                &r.variant,
                &r.depth.to_string(),
                &r.metric,
                &seed,
                &r.value.to_string(),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }

    pub fn summary_lines(&self) -> Vec<String> {
        self.checks.iter().map(|c| format!("{} {c}", self.study)).collect()
    }

    /// Writes `<study>.csv`, the extra CSVs and `<study>_timings.csv`.
    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let put = |name: &str, text: &str| {
            let path = dir.join(name);
            fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
        };
        put(&format!("{}.csv", self.study), &self.to_csv()?)?;
        for (name, text) in &self.extra {
            put(name, text)?;
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["cell", "secs"])?;
        for t in &self.timings {
            w.write_record([t.cell.as_str(), &format!("{:.3}", t.secs)])?;
        }
        put(&format!("{}_timings.csv", self.study), &String::from_utf8(w.into_inner()?)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[f64::INFINITY, 1.0, 2.0]), 2.0);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn csv_rows_carry_seeds_and_medians() {
        let mut r = StudyReport::new("demo");
        r.push("Euler", 2, "ppl", Seed::Run(1), 3.0);
        r.push("Euler", 2, "ppl", Seed::Run(2), 5.0);
        r.push("Euler", 2, "ppl", Seed::Run(3), 4.0);
        r.add_medians();
        assert_eq!(r.median_of("Euler", 2, "ppl"), Some(4.0));
        let csv = r.to_csv().unwrap();
        assert!(csv.starts_with("study,variant,depth,metric,seed,value\n"));
        assert!(csv.ends_with("demo,Euler,2,ppl,median,4\n"));
        r.check("order", false, "x");
        assert!(!r.passed());
        assert_eq!(r.summary_lines(), vec!["demo FAIL order: x".to_string()]);
    }
}
