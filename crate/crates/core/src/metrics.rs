//! Evaluation metrics: average log likelihood, bits per dimension, variance
//! calibration and 2-D density grids.

use std::f64::consts::LN_2;
use std::io::Write;

use rand::Rng;

use crate::autodiff::Array;
use crate::error::{contract, domain, Error, Result};
use crate::estimator::DensityEstimator;
use crate::polya_tree::YMode;

/// Number of model samples used to estimate predictive moments.
pub const SSE_SAMPLES: usize = 10_000;

pub fn avg_log_likelihood(model: &DensityEstimator, x: &Array) -> Result<f64> {
    model.mean_log_likelihood(x)
}

/// `−mean ln p(x) / (D ln 2)`.
pub fn bits_per_dim(model: &DensityEstimator, x: &Array) -> Result<f64> {
    Ok(nats_to_bpd(avg_log_likelihood(model, x)?, model.dims()))
}

/// Converts a mean log likelihood in nats to bits per dimension.
pub fn nats_to_bpd(mean_log_likelihood: f64, dims: usize) -> f64 {
    -mean_log_likelihood / (dims as f64 * LN_2)
}

/// Per-dimension mean and (population) standard deviation of `x`.
pub fn moments(x: &Array) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, d) = x.dims2()?;
    if n == 0 {
        return contract("moments of an empty sample");
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    Ok((mean, var.into_iter().map(|s| (s / n as f64).sqrt()).collect()))
}

/// `Σ_{i,d} ((x − μ)/σ)² / (N·D)` for given predictive moments.
pub fn sse_with_moments(x: &Array, mean: &[f64], std: &[f64]) -> Result<f64> {
    let (n, d) = x.dims2()?;
    if mean.len() != d || std.len() != d {
        return contract("moment vectors do not match the data dimension");
    }
    if n == 0 {
        return contract("SSE of an empty set");
    }
    if let Some(k) = std.iter().position(|&s| !(s > 0.0)) {
        return domain(format!("predictive standard deviation of dimension {k} is zero"));
    }
    let mut acc = 0.0;
    for i in 0..n {
        for ((v, m), s) in x.row(i).iter().zip(mean).zip(std) {
            let z = (v - m) / s;
            acc += z * z;
        }
    }
    Ok(acc / (n * d) as f64)
}

/// Calibration SSE of `x` against moments estimated from
/// [`SSE_SAMPLES`] model samples.
pub fn sse_calibration<R: Rng + ?Sized>(model: &DensityEstimator, x: &Array, rng: &mut R) -> Result<f64> {
    let samples = model.sample(rng, SSE_SAMPLES, YMode::PosteriorMean)?;
    let (mean, std) = moments(&samples)?;
    sse_with_moments(x, &mean, &std)
}

/// Axis-aligned 2-D box `[(x_lo, x_hi), (y_lo, y_hi)]`.
pub type Bounds = [(f64, f64); 2];

/// `exp(ln p)` at the centres of a `res × res` lattice over `bounds`, as
/// `[x, y, density]` rows, `y` varying slowest.
pub fn density_grid(model: &DensityEstimator, bounds: Bounds, res: usize) -> Result<Vec<[f64; 3]>> {
    if model.dims() != 2 {
        return Err(Error::Usage(format!(
            "density grids need a 2-D model, this one has {} dimensions",
            model.dims()
        )));
    }
    if res == 0 || bounds.iter().any(|(lo, hi)| !(hi > lo)) {
        return contract("grid needs res ≥ 1 and non-empty bounds");
    }
    let centre = |(lo, hi): (f64, f64), i: usize| lo + (hi - lo) * (i as f64 + 0.5) / res as f64;
    let mut pts = Vec::with_capacity(2 * res * res);
    for j in 0..res {
        for i in 0..res {
            pts.push(centre(bounds[0], i));
            pts.push(centre(bounds[1], j));
        }
    }
    let x = Array::matrix(res * res, 2, pts)?;
    let ll = model.log_likelihood(&x)?;
    Ok((0..res * res)
        .map(|k| [x.row(k)[0], x.row(k)[1], ll[k].exp()])
        .collect())
}

/// Riemann sum of a grid from [`density_grid`].
pub fn grid_mass(grid: &[[f64; 3]], bounds: Bounds, res: usize) -> f64 {
    let cell = (bounds[0].1 - bounds[0].0) * (bounds[1].1 - bounds[1].0) / (res * res) as f64;
    grid.iter().map(|r| r[2]).sum::<f64>() * cell
}

pub fn write_grid<W: Write>(w: W, grid: &[[f64; 3]]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["x", "y", "density"])?;
    for row in grid {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

/// Writes an `[n, d]` array as headerless comma-separated rows.
pub fn write_rows<W: Write>(w: W, x: &Array) -> Result<()> {
    let (n, _) = x.dims2()?;
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for i in 0..n {
        out.serialize(x.row(i))?;
    }
    out.flush()?;
    Ok(())
}
