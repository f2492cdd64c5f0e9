//! Comparison priors: fixed Gaussian / logistic bases and a learnable
//! histogram with the same bin budget as a Pólya tree.

use std::f64::consts::PI;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{inverse_softplus, log_sigmoid, softplus, Array, Tape, Var};
use crate::distributions::LogisticDist;
use crate::error::{contract, domain, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixedKind {
    Gaussian,
    Logistic,
}

/// A parameter-free factorized base density on `ℝ^D`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPrior {
    pub kind: FixedKind,
    pub dims: usize,
}

impl FixedPrior {
    pub fn new(kind: FixedKind, dims: usize) -> Result<Self> {
        if dims == 0 {
            return contract("a prior needs at least one dimension");
        }
        Ok(Self { kind, dims })
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dims {
            return contract(format!("point of dimension {} for a {}-D prior", z.len(), self.dims));
        }
        Ok(match self.kind {
            FixedKind::Gaussian => z.iter().map(|v| -0.5 * v * v - 0.5 * (2.0 * PI).ln()).sum(),
            FixedKind::Logistic => z.iter().map(|&v| log_sigmoid(v) + log_sigmoid(-v)).sum(),
        })
    }

    /// Per-row log densities `[n]` of an `[n, dims]` latent batch.
    pub fn log_density_on_tape<'t>(&self, z: Var<'t>) -> Result<Var<'t>> {
        match self.kind {
            FixedKind::Gaussian => Ok(z
                .mul(z)?
                .scale(-0.5)
                .row_sum()?
                .add_scalar(-0.5 * self.dims as f64 * (2.0 * PI).ln())),
            FixedKind::Logistic => z.log_sigmoid().add(z.neg().log_sigmoid())?.row_sum(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Array> {
        let logistic = LogisticDist::standard();
        let data = (0..n * self.dims)
            .map(|_| match self.kind {
                FixedKind::Gaussian => rng.sample(StandardNormal),
                FixedKind::Logistic => logistic.sample(rng),
            })
            .collect();
        Array::matrix(n, self.dims, data)
    }
}

/// Per-dimension histogram with `K` learnable bin widths and probabilities.
///
/// Boundaries are `b₀ = 0`, `b_k = b_{k−1} + softplus(δ_{k−1})` and bin
/// probabilities are the softmax of the logits. Bins are half-open,
/// `(b_k, b_{k+1}]`. Latent inputs in `(0, 1)` are mapped affinely onto
/// `(0, b_K)` before lookup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnableHistogram {
    bins: usize,
    dims: usize,
    /// `[dims, bins]`.
    raw_widths: Array,
    /// `[dims, bins]`.
    raw_logits: Array,
}

impl LearnableHistogram {
    /// Equal widths summing to 1 and equal probabilities: the uniform density.
    pub fn new(bins: usize, dims: usize) -> Result<Self> {
        if bins == 0 || dims == 0 {
            return contract(format!("need bins ≥ 1 and dims ≥ 1, got K={bins}, D={dims}"));
        }
        Ok(Self {
            bins,
            dims,
            raw_widths: Array::full(&[dims, bins], inverse_softplus(1.0 / bins as f64)),
            raw_logits: Array::zeros(&[dims, bins]),
        })
    }

    /// `K = 2^levels` bins, matching a Pólya tree of that depth.
    pub fn with_levels(levels: usize, dims: usize) -> Result<Self> {
        if levels == 0 || levels > 20 {
            return contract(format!("unsupported depth {levels}"));
        }
        Self::new(1 << levels, dims)
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn num_params(&self) -> usize {
        self.raw_widths.len() + self.raw_logits.len()
    }

    /// Sets one dimension's bin widths (all positive) and probabilities
    /// (positive, normalized internally).
    pub fn set_bins(&mut self, dim: usize, widths: &[f64], probs: &[f64]) -> Result<()> {
        let k = self.bins;
        if widths.len() != k || probs.len() != k {
            return contract(format!("expected {k} widths and probabilities"));
        }
        if widths.iter().chain(probs).any(|&v| !(v > 0.0)) {
            return domain("bin widths and probabilities must be positive");
        }
        for j in 0..k {
            self.raw_widths.data_mut()[dim * k + j] = inverse_softplus(widths[j]);
            self.raw_logits.data_mut()[dim * k + j] = probs[j].ln();
        }
        Ok(())
    }

    /// `b₀, …, b_K`.
    pub fn boundaries(&self, dim: usize) -> Vec<f64> {
        let k = self.bins;
        let mut b = Vec::with_capacity(k + 1);
        b.push(0.0);
        let mut acc = 0.0;
        for &r in &self.raw_widths.data()[dim * k..(dim + 1) * k] {
            acc += softplus(r);
            b.push(acc);
        }
        b
    }

    pub fn probabilities(&self, dim: usize) -> Vec<f64> {
        let logits = &self.raw_logits.data()[dim * self.bins..(dim + 1) * self.bins];
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    fn find_bin(boundaries: &[f64], x: f64) -> Result<usize> {
        let k = boundaries.len() - 1;
        if !(x >= boundaries[0] && x <= boundaries[k]) {
            return domain(format!(
                "{x} outside histogram support [{}, {}]",
                boundaries[0], boundaries[k]
            ));
        }
        Ok(boundaries[1..k].partition_point(|&b| b < x))
    }

    /// The bin `k` with `b_k < x ≤ b_{k+1}` (`x = b₀` falls in bin 0).
    pub fn active_bin(&self, dim: usize, x: f64) -> Result<usize> {
        Self::find_bin(&self.boundaries(dim), x)
    }

    /// Log density at a point given in histogram-support coordinates.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        let mut acc = 0.0;
        for (d, &xd) in x.iter().enumerate() {
            let b = self.boundaries(d);
            let k = Self::find_bin(&b, xd)?;
            acc += self.probabilities(d)[k].ln() - (b[k + 1] - b[k]).ln();
        }
        Ok(acc)
    }

    /// Log density of a latent point in `(0,1]^D`, including the affine map
    /// onto the support.
    pub fn latent_log_density(&self, z: &[f64]) -> Result<f64> {
        self.check_point(z)?;
        let mut acc = 0.0;
        for (d, &zd) in z.iter().enumerate() {
            if !(zd > 0.0 && zd <= 1.0) {
                return domain(format!("latent coordinate {zd} outside (0,1]"));
            }
            let b = self.boundaries(d);
            let total = b[self.bins];
            let k = Self::find_bin(&b, (zd * total).min(total))?;
            acc += self.probabilities(d)[k].ln() - (b[k + 1] - b[k]).ln() + total.ln();
        }
        Ok(acc)
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dims {
            return contract(format!("point of dimension {} for a {}-D histogram", x.len(), self.dims));
        }
        Ok(())
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> HistogramVars<'t> {
        HistogramVars {
            widths: tape.var(self.raw_widths.clone()),
            logits: tape.var(self.raw_logits.clone()),
        }
    }

    /// Differentiable per-row latent log densities `[n]` of an `[n, dims]`
    /// batch in `(0,1]^D`.
    pub fn latent_log_density_on_tape<'t>(&self, vars: &HistogramVars<'t>, z: &Array) -> Result<Var<'t>> {
        let (n, d) = z.dims2()?;
        if d != self.dims {
            return contract(format!("batch has {d} columns, histogram has {} dimensions", self.dims));
        }
        let k = self.bins;
        let tape = vars.widths.tape();
        let spread: Rc<[usize]> = (0..d * k).map(|j| j / k).collect();

        let widths = vars.widths.softplus();
        let log_total = widths.row_sum()?.log()?;
        let max: Vec<f64> = (0..d)
            .map(|dim| {
                self.raw_logits.data()[dim * k..(dim + 1) * k]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let max = tape.constant(Array::from_vec(max));
        let shifted = vars.logits.sub(max.gather(spread.clone(), vec![d, k])?)?;
        let lse = shifted.exp().row_sum()?.log()?.add(max)?;
        let table = vars
            .logits
            .sub(lse.gather(spread.clone(), vec![d, k])?)?
            .sub(widths.log()?)?
            .add(log_total.gather(spread, vec![d, k])?)?
            .reshape(vec![d * k])?;

        let bounds: Vec<Vec<f64>> = (0..d).map(|dim| self.boundaries(dim)).collect();
        let mut idx = Vec::with_capacity(n * d);
        for i in 0..n {
            for (dim, &zd) in z.row(i).iter().enumerate() {
                if !(zd > 0.0 && zd <= 1.0) {
                    return domain(format!("latent coordinate {zd} outside (0,1]"));
                }
                let total = bounds[dim][k];
                idx.push(dim * k + Self::find_bin(&bounds[dim], (zd * total).min(total))?);
            }
        }
        table.gather(idx.into(), vec![n, d])?.row_sum()
    }

    /// `n` latent draws in `(0,1]^D`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Array> {
        let bounds: Vec<Vec<f64>> = (0..self.dims).map(|d| self.boundaries(d)).collect();
        let probs: Vec<Vec<f64>> = (0..self.dims).map(|d| self.probabilities(d)).collect();
        let mut out = Vec::with_capacity(n * self.dims);
        for _ in 0..n {
            for d in 0..self.dims {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut k = self.bins - 1;
                for (j, p) in probs[d].iter().enumerate() {
                    acc += p;
                    if u < acc {
                        k = j;
                        break;
                    }
                }
                let b = &bounds[d];
                let t = b[k] + (b[k + 1] - b[k]) * (1.0 - rng.random::<f64>());
                out.push((t / b[self.bins]).min(1.0));
            }
        }
        Array::matrix(n, self.dims, out)
    }

    pub fn parameters(&self) -> Vec<&Array> {
        vec![&self.raw_widths, &self.raw_logits]
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Array> {
        vec![&mut self.raw_widths, &mut self.raw_logits]
    }
}

/// Histogram parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct HistogramVars<'t> {
    pub widths: Var<'t>,
    pub logits: Var<'t>,
}
