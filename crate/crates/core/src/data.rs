//! Clustered binomial datasets, covariate standardization and CSV ingestion.
//!
//! Outcomes are read in long format (`subject,type,y,n`), covariates in wide
//! format (`subject,<name1>,...,<nameD>`). Subjects follow the covariate file
//! order, types their first appearance in the outcomes file. A
//! `(subject, type)` pair absent from the outcomes file has zero trials.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Outcome counts `Y`, trial counts `n` (both `I x J`, row-major) and
/// covariates `X` (`I x D`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    subjects: Vec<String>,
    types: Vec<String>,
    covariates: Vec<String>,
    y: Vec<u64>,
    n: Vec<u64>,
    x: DMatrix<f64>,
}

fn default_names(prefix: &str, count: usize) -> Vec<String> {
    let width = count.to_string().len();
    (1..=count).map(|k| format!("{prefix}{k:0width$}")).collect()
}

impl Dataset {
    /// Assemble a dataset; missing names are generated. `J` comes from `types`
    /// when given, otherwise from `y.len() / I`.
    pub fn from_parts(
        subjects: Option<Vec<String>>,
        types: Option<Vec<String>>,
        covariates: Option<Vec<String>>,
        y: Vec<u64>,
        n: Vec<u64>,
        x: DMatrix<f64>,
    ) -> Result<Self> {
        let n_sub = x.nrows();
        let n_types = match &types {
            Some(t) => t.len(),
            None if n_sub > 0 => y.len() / n_sub,
            None => 0,
        };
        if y.len() != n_sub * n_types || n.len() != y.len() {
            return Err(Error::Dimension(format!(
                "{} outcomes and {} trial counts for {n_sub} subjects x {n_types} types",
                y.len(),
                n.len()
            )));
        }
        if let Some(k) = y.iter().zip(&n).position(|(a, b)| a > b) {
            return Err(Error::input(format!(
                "cell ({}, {}) has y = {} > n = {}",
                k / n_types.max(1),
                k % n_types.max(1),
                y[k],
                n[k]
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("non-finite covariate value"));
        }
        let subjects = subjects.unwrap_or_else(|| default_names("s", n_sub));
        let types = types.unwrap_or_else(|| default_names("type", n_types));
        let covariates = covariates.unwrap_or_else(|| default_names("x", x.ncols()));
        if subjects.len() != n_sub || covariates.len() != x.ncols() {
            return Err(Error::Dimension("name vectors do not match data dimensions".into()));
        }
        Ok(Self { subjects, types, covariates, y, n, x })
    }

    pub fn n_subjects(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_types(&self) -> usize {
        self.types.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    #[inline]
    pub fn y(&self, i: usize, j: usize) -> u64 {
        self.y[i * self.types.len() + j]
    }

    #[inline]
    pub fn n(&self, i: usize, j: usize) -> u64 {
        self.n[i * self.types.len() + j]
    }

    pub fn y_all(&self) -> &[u64] {
        &self.y
    }

    pub fn n_all(&self) -> &[u64] {
        &self.n
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subjects
    }

    pub fn type_names(&self) -> &[String] {
        &self.types
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariates
    }

    pub fn x_row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    /// Replace the outcome counts, keeping everything else.
    pub fn with_outcomes(&self, y: Vec<u64>) -> Result<Self> {
        Self::from_parts(
            Some(self.subjects.clone()),
            Some(self.types.clone()),
            Some(self.covariates.clone()),
            y,
            self.n.clone(),
            self.x.clone(),
        )
    }

    /// Same data with covariates replaced (e.g. standardized).
    pub fn with_covariates(&self, x: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != self.n_subjects() || x.ncols() != self.n_covariates() {
            return Err(Error::Dimension("replacement covariates have the wrong shape".into()));
        }
        Ok(Self { x, ..self.clone() })
    }

    /// Subjects at `rows`, in that order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let j = self.n_types();
        let mut y = Vec::with_capacity(rows.len() * j);
        let mut n = Vec::with_capacity(rows.len() * j);
        for &i in rows {
            y.extend_from_slice(&self.y[i * j..(i + 1) * j]);
            n.extend_from_slice(&self.n[i * j..(i + 1) * j]);
        }
        let x = DMatrix::from_fn(rows.len(), self.n_covariates(), |r, d| self.x[(rows[r], d)]);
        Self {
            subjects: rows.iter().map(|&i| self.subjects[i].clone()).collect(),
            types: self.types.clone(),
            covariates: self.covariates.clone(),
            y,
            n,
            x,
        }
    }

    /// Subject order sorted by identifier.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.n_subjects()).collect();
        idx.sort_by(|&a, &b| self.subjects[a].cmp(&self.subjects[b]));
        idx
    }

    /// SHA-256 over names, counts and covariate bit patterns.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for s in self.subjects.iter().chain(&self.types).chain(&self.covariates) {
            h.update(s.as_bytes());
            h.update([0u8]);
        }
        for v in self.y.iter().chain(&self.n) {
            h.update(v.to_le_bytes());
        }
        for i in 0..self.n_subjects() {
            for d in 0..self.n_covariates() {
                h.update(self.x[(i, d)].to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Read the two-file CSV layout.
    pub fn load_csv(outcomes: &Path, covariates: &Path) -> Result<Self> {
        let (subjects, cov_names, rows) = read_covariates(covariates)?;
        let index: HashMap<&str, usize> =
            subjects.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();

        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .flexible(true)
            .from_path(outcomes)?;
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if header != ["subject", "type", "y", "n"] {
            return Err(Error::input_at(1, format!("expected header subject,type,y,n, found {}", header.join(","))));
        }
        let mut types: Vec<String> = Vec::new();
        let mut cells: Vec<(usize, usize, u64, u64, usize)> = Vec::new();
        for (k, record) in reader.records().enumerate() {
            let line = k + 2;
            let record = record?;
            if record.len() != 4 {
                return Err(Error::input_at(line, format!("expected 4 fields, found {}", record.len())));
            }
            let subject = index.get(&record[0]).copied().ok_or_else(|| {
                Error::input_at(line, format!("subject `{}` has no covariate row", &record[0]))
            })?;
            let ty = match types.iter().position(|t| t == &record[1]) {
                Some(t) => t,
                None => {
                    types.push(record[1].to_string());
                    types.len() - 1
                }
            };
            let y: u64 = record[2]
                .parse()
                .map_err(|_| Error::input_at(line, format!("y = `{}` is not a count", &record[2])))?;
            let n: u64 = record[3]
                .parse()
                .map_err(|_| Error::input_at(line, format!("n = `{}` is not a count", &record[3])))?;
            if y > n {
                return Err(Error::input_at(line, format!("y = {y} exceeds n = {n}")));
            }
            cells.push((subject, ty, y, n, line));
        }
        let n_types = types.len();
        let mut y = vec![0; subjects.len() * n_types];
        let mut n = vec![0; subjects.len() * n_types];
        let mut seen = vec![false; subjects.len() * n_types];
        for (s, t, yv, nv, line) in cells {
            let k = s * n_types + t;
            if seen[k] {
                return Err(Error::input_at(line, "duplicate (subject, type) pair"));
            }
            seen[k] = true;
            y[k] = yv;
            n[k] = nv;
        }
        let x = DMatrix::from_fn(subjects.len(), cov_names.len(), |i, d| rows[i][d]);
        Self::from_parts(Some(subjects), Some(types), Some(cov_names), y, n, x)
    }

    pub fn write_csv(&self, outcomes: &Path, covariates: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(outcomes)?;
        w.write_record(["subject", "type", "y", "n"])?;
        for i in 0..self.n_subjects() {
            for j in 0..self.n_types() {
                w.write_record([
                    self.subjects[i].as_str(),
                    self.types[j].as_str(),
                    &self.y(i, j).to_string(),
                    &self.n(i, j).to_string(),
                ])?;
            }
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(covariates)?;
        let mut header = vec!["subject".to_string()];
        header.extend(self.covariates.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.n_subjects() {
            let mut rec = vec![self.subjects[i].clone()];
            rec.extend((0..self.n_covariates()).map(|d| format!("{}", self.x[(i, d)])));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

type CovariateTable = (Vec<String>, Vec<String>, Vec<Vec<f64>>);

/// Parse a wide covariate file into (subject ids, names, rows).
pub fn read_covariates(path: &Path) -> Result<CovariateTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("subject") {
        return Err(Error::input_at(1, "covariate header must start with `subject`"));
    }
    let names = header[1..].to_vec();
    let mut subjects = Vec::new();
    let mut rows = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = record?;
        if record.len() != header.len() {
            return Err(Error::input_at(
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        if subjects.iter().any(|s: &String| s == &record[0]) {
            return Err(Error::input_at(line, format!("duplicate subject `{}`", &record[0])));
        }
        let row = record
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| Error::input_at(line, "covariate value is not a finite number"))?;
        subjects.push(record[0].to_string());
        rows.push(row);
    }
    Ok((subjects, names, rows))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 hex digest of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Column centring and scaling learned from training covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    /// Column means and sample (n - 1) standard deviations; constant columns
    /// are only centred.
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows();
        let mut mean = Vec::with_capacity(x.ncols());
        let mut sd = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let m = if n == 0 { 0.0 } else { col.iter().sum::<f64>() / n as f64 };
            let var = if n < 2 {
                0.0
            } else {
                col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64
            };
            mean.push(m);
            sd.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Self { mean, sd }
    }

    pub fn identity(d: usize) -> Self {
        Self { mean: vec![0.0; d], sd: vec![1.0; d] }
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, d| (x[(i, d)] - self.mean[d]) / self.sd[d])
    }

    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter().enumerate().map(|(d, v)| (v - self.mean[d]) / self.sd[d]).collect()
    }
}
