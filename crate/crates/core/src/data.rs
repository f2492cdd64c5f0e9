//! Synthetic 2-D datasets and a delimited-text loader.

use std::f64::consts::PI;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{contract, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    EightGaussians,
    TwoSpirals,
    Checkerboard,
}

impl SynthKind {
    pub const ALL: [SynthKind; 3] = [Self::EightGaussians, Self::TwoSpirals, Self::Checkerboard];

    pub fn name(self) -> &'static str {
        match self {
            Self::EightGaussians => "eight_gaussians",
            Self::TwoSpirals => "two_spirals",
            Self::Checkerboard => "checkerboard",
        }
    }
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::Usage(format!(
                "unknown synthetic dataset '{s}' (expected eight_gaussians, two_spirals or checkerboard)"
            ))
        })
    }
}

/// Per-column affine map applied to the raw data, plus the raw columns that
/// were dropped for having zero variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub dropped: Vec<usize>,
}

impl Standardization {
    pub fn identity(dims: usize) -> Self {
        Self {
            mean: vec![0.0; dims],
            std: vec![1.0; dims],
            dropped: vec![],
        }
    }

    pub fn dims(&self) -> usize {
        self.mean.len()
    }

    /// Applies the map to rows that have already had dropped columns removed.
    pub fn standardize(&self, x: &Array) -> Result<Array> {
        self.apply(x, |v, m, s| (v - m) / s)
    }

    pub fn destandardize(&self, x: &Array) -> Result<Array> {
        self.apply(x, |v, m, s| v * s + m)
    }

    fn apply(&self, x: &Array, f: impl Fn(f64, f64, f64) -> f64) -> Result<Array> {
        let (n, d) = x.dims2()?;
        if d != self.dims() {
            return contract(format!("{d} columns for a {}-column standardization", self.dims()));
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| f(v, self.mean[k % d], self.std[k % d]))
            .collect();
        Array::matrix(n, d, data)
    }
}

/// Disjoint row index sets covering a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Shuffles `0..n` and cuts it by `fractions` (train, validation); the
    /// rest is the test set.
    pub fn shuffled<R: Rng + ?Sized>(n: usize, fractions: (f64, f64), rng: &mut R) -> Result<Self> {
        let (ft, fv) = fractions;
        if !(ft > 0.0 && fv >= 0.0 && ft + fv <= 1.0) {
            return contract(format!("invalid split fractions ({ft}, {fv})"));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let n_train = ((ft * n as f64).round() as usize).min(n);
        let n_val = ((fv * n as f64).round() as usize).min(n - n_train);
        let test = idx.split_off(n_train + n_val);
        let validation = idx.split_off(n_train);
        Ok(Self {
            train: idx,
            validation,
            test,
        })
    }
}

pub const DEFAULT_FRACTIONS: (f64, f64) = (0.8, 0.1);

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, dims]`, already standardized.
    pub points: Array,
    /// Class or mixture-component label per row, where the generator has one.
    pub labels: Option<Vec<usize>>,
    pub split: Split,
    pub standardization: Standardization,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> usize {
        self.points.shape()[1]
    }

    pub fn rows(&self, idx: &[usize]) -> Array {
        let d = self.dims();
        let data = idx.iter().flat_map(|&i| self.points.row(i).iter().copied()).collect();
        Array::matrix(idx.len(), d, data).expect("row lengths match")
    }

    pub fn train(&self) -> Array {
        self.rows(&self.split.train)
    }

    pub fn validation(&self) -> Array {
        self.rows(&self.split.validation)
    }

    pub fn test(&self) -> Array {
        self.rows(&self.split.test)
    }

    /// Wraps raw points with a seeded split and no standardization.
    pub fn from_points<R: Rng + ?Sized>(points: Array, fractions: (f64, f64), rng: &mut R) -> Result<Self> {
        let (n, d) = points.dims2()?;
        Ok(Self {
            split: Split::shuffled(n, fractions, rng)?,
            standardization: Standardization::identity(d),
            points,
            labels: None,
        })
    }
}

/// Draws `n` points from a synthetic 2-D density. Splits are 80/10/10 and
/// drawn from the same generator; no standardization is applied.
pub fn synth<R: Rng + ?Sized>(kind: SynthKind, n: usize, rng: &mut R) -> Result<Dataset> {
    if n == 0 {
        return contract("dataset size must be at least 1");
    }
    let mut pts = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (x, y, label) = match kind {
            SynthKind::EightGaussians => {
                let k = rng.random_range(0..8);
                let a = 2.0 * PI * k as f64 / 8.0;
                let ex: f64 = rng.sample(StandardNormal);
                let ey: f64 = rng.sample(StandardNormal);
                (2.0 * a.cos() + 0.2 * ex, 2.0 * a.sin() + 0.2 * ey, k)
            }
            SynthKind::TwoSpirals => {
                let arm = i % 2;
                let t: f64 = rng.random();
                let noise: f64 = rng.sample(StandardNormal);
                let r = 2.0 * t + 0.1 * noise;
                let theta = 3.0 * PI * t + PI * arm as f64;
                (r * theta.cos(), r * theta.sin(), arm)
            }
            SynthKind::Checkerboard => {
                let cell = rng.random_range(0..8usize);
                let row = cell / 2;
                let col = 2 * (cell % 2) + row % 2;
                let x = -2.0 + col as f64 + rng.random::<f64>();
                let y = -2.0 + row as f64 + rng.random::<f64>();
                (x, y, cell)
            }
        };
        pts.push(x);
        pts.push(y);
        labels.push(label);
    }
    let mut ds = Dataset::from_points(Array::matrix(n, 2, pts)?, DEFAULT_FRACTIONS, rng)?;
    ds.labels = Some(labels);
    Ok(ds)
}

/// Reads a rectangular numeric table.
pub fn parse_delimited<R: Read>(reader: R, delimiter: u8, has_header: bool) -> Result<Array> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(i + 1, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(Error::Parse {
                row: line,
                column: rec.len().min(w) + 1,
                message: format!("expected {w} fields, found {}", rec.len()),
            });
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: line,
                column: j + 1,
                message: format!("'{cell}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: line,
                    column: j + 1,
                    message: format!("'{cell}' is not finite"),
                });
            }
            data.push(v);
        }
        rows += 1;
    }
    let Some(w) = width else {
        return contract("the table has no data rows");
    };
    Array::matrix(rows, w, data)
}

/// Loads a table, splits it with a seeded shuffle and z-scores every column
/// with training-split statistics. Columns that are constant on the training
/// split are dropped.
pub fn load_delimited<R: Rng + ?Sized>(
    path: &Path,
    delimiter: u8,
    has_header: bool,
    fractions: (f64, f64),
    rng: &mut R,
) -> Result<Dataset> {
    let raw = parse_delimited(std::fs::File::open(path)?, delimiter, has_header)?;
    standardized(raw, fractions, rng)
}

/// Splits `raw` and standardizes it on the training rows.
pub fn standardized<R: Rng + ?Sized>(raw: Array, fractions: (f64, f64), rng: &mut R) -> Result<Dataset> {
    let (n, d) = raw.dims2()?;
    let split = Split::shuffled(n, fractions, rng)?;
    if split.train.is_empty() {
        return contract("the training split is empty");
    }
    let m = split.train.len() as f64;
    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    let (mut mean, mut std) = (Vec::new(), Vec::new());
    for j in 0..d {
        let col = || split.train.iter().map(|&i| raw.data()[i * d + j]);
        let mu = col().sum::<f64>() / m;
        let sd = (col().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m).sqrt();
        if sd <= 1e-12 * (1.0 + mu.abs()) {
            dropped.push(j);
        } else {
            keep.push(j);
            mean.push(mu);
            std.push(sd);
        }
    }
    if keep.is_empty() {
        return contract("every column is constant on the training split");
    }
    let data = (0..n).flat_map(|i| keep.iter().map(move |&j| (i, j)));
    let kept = Array::matrix(n, keep.len(), data.map(|(i, j)| raw.data()[i * d + j]).collect())?;
    let standardization = Standardization { mean, std, dropped };
    Ok(Dataset {
        points: standardization.standardize(&kept)?,
        labels: None,
        split,
        standardization,
    })
}
