//! Multivariate time-series samples and the dense matrix they live in.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Invalid("matrix needs at least one row".into()));
        }
        let cols = rows[0].len();
        if cols == 0 || rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged or empty matrix rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Ok(Mat { rows: rows.len(), cols, data })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_nested(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Which distribution a sample was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// Prediction task; decides the loss and the reported metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Regression,
}

/// One M-variable, N-timestep series with an optional label.
///
/// `series` is variable-major: row `i`, column `t` holds variable `i` at
/// time step `t`. Source-domain training samples must be labeled; target
/// labels, when present, are reporting-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesSample {
    pub series: Mat,
    pub label: Option<f64>,
    pub domain: Domain,
}

impl TimeSeriesSample {
    pub fn new(series: Mat, label: Option<f64>, domain: Domain) -> Result<Self> {
        if series.rows == 0 || series.cols == 0 {
            return Err(Error::Invalid("series must have M >= 1 and N >= 1".into()));
        }
        if !series.is_finite() {
            return Err(Error::NonFinite("series contains NaN or infinity".into()));
        }
        if let Some(l) = label {
            if !l.is_finite() {
                return Err(Error::NonFinite("label is not finite".into()));
            }
        }
        Ok(TimeSeriesSample { series, label, domain })
    }

    pub fn num_vars(&self) -> usize {
        self.series.rows
    }

    pub fn num_steps(&self) -> usize {
        self.series.cols
    }
}
