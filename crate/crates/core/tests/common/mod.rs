//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use vpt_core::polya_tree::{BranchProbs, Splits};
use vpt_core::{Array, PartitionMode, PolyaTreeModel};

/// Tanh-sinh quadrature of `f(t, 1 − t)` over `(0, 1)`.
///
/// The complement is passed separately, computed without cancellation, so
/// integrands singular at either endpoint stay accurate.
pub fn tanh_sinh(f: impl Fn(f64, f64) -> f64) -> f64 {
    let h = 1.0 / 64.0;
    let half_pi = std::f64::consts::FRAC_PI_2;
    let mut acc = 0.5 * half_pi * f(0.5, 0.5);
    for k in 1.. {
        let t = k as f64 * h;
        let s = half_pi * t.sinh();
        let e = (-2.0 * s).exp();
        // Distance of the upper abscissa from 1.
        let near = e / (1.0 + e);
        let w = 0.5 * half_pi * t.cosh() / (s.cosh() * s.cosh());
        if near == 0.0 || w < 1e-300 {
            break;
        }
        acc += w * (f(1.0 - near, near) + f(near, 1.0 - near));
    }
    acc * h
}

/// Composite Simpson rule on `[a, b]` with `n` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

/// Trapezoid rule on `n` equally spaced points spanning `[a, b]`.
pub fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / (n - 1) as f64;
    let inner: f64 = (1..n - 1).map(|i| f(a + i as f64 * h)).sum();
    h * (inner + 0.5 * (f(a) + f(b)))
}

/// Kolmogorov–Smirnov distance between a sample and a CDF.
pub fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = cdf(x);
            (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
        })
        .fold(0.0, f64::max)
}

/// Largest relative error between an analytic gradient and central finite
/// differences of `f`, perturbing each entry of each parameter array.
///
/// The error of one entry is `|a − n| / max(|a|, |n|, floor)`.
pub fn fd_max_rel_err(
    params: &[Array],
    analytic: &[Array],
    h: f64,
    floor: f64,
    f: impl Fn(&[Array]) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let mut work: Vec<Array> = params.to_vec();
    for (pi, (p, g)) in params.iter().zip(analytic).enumerate() {
        for j in 0..p.len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let up = f(&work);
            work[pi].data_mut()[j] = orig - h;
            let down = f(&work);
            work[pi].data_mut()[j] = orig;
            let num = (up - down) / (2.0 * h);
            let a = g.data()[j];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(floor));
        }
    }
    worst
}

/// Tree with every raw parameter drawn uniformly from `[-spread, spread]`.
pub fn random_tree<R: Rng>(rng: &mut R, levels: usize, dims: usize, mode: PartitionMode, spread: f64) -> PolyaTreeModel {
    let mut t = PolyaTreeModel::new(levels, dims, mode).unwrap();
    for p in t.parameters_mut() {
        for v in p.data_mut() {
            *v = rng.random_range(-spread..spread);
        }
    }
    t
}

fn split_at(splits: &Splits, node: usize) -> f64 {
    let depth = (usize::BITS - 1 - (node + 1).leading_zeros()) as usize;
    match splits {
        Splits::Dyadic => 0.5,
        Splits::PerLevel(b) => b[depth],
        Splits::PerNode(b) => b[node],
    }
}

/// Every leaf of one dimension's tree as `(lower, upper, probability)`,
/// enumerated by explicit recursion over paths.
pub fn enumerate_leaves(tree: &PolyaTreeModel, dim: usize, probs: &BranchProbs) -> Vec<(f64, f64, f64)> {
    let splits = tree.splits(dim);
    let mut out = Vec::new();
    fn walk(
        tree: &PolyaTreeModel,
        splits: &Splits,
        probs: &BranchProbs,
        dim: usize,
        node: usize,
        depth: usize,
        lo: f64,
        hi: f64,
        mass: f64,
        out: &mut Vec<(f64, f64, f64)>,
    ) {
        if depth == tree.levels() {
            out.push((lo, hi, mass));
            return;
        }
        let cut = lo + (hi - lo) * split_at(splits, node);
        let y = probs.get(dim, node);
        walk(tree, splits, probs, dim, 2 * node + 1, depth + 1, lo, cut, mass * y, out);
        walk(tree, splits, probs, dim, 2 * node + 2, depth + 1, cut, hi, mass * (1.0 - y), out);
    }
    walk(tree, &splits, probs, dim, 0, 0, 0.0, 1.0, 1.0, &mut out);
    out
}

/// Density at `x` as a product over dimensions of leaf probability divided
/// by leaf length, found by scanning the enumerated leaves.
pub fn brute_density(tree: &PolyaTreeModel, x: &[f64], probs: &BranchProbs) -> f64 {
    (0..tree.dims())
        .map(|d| {
            let leaves = enumerate_leaves(tree, d, probs);
            let &(lo, hi, p) = leaves
                .iter()
                .find(|(lo, hi, _)| *lo < x[d] && x[d] <= *hi)
                .expect("some leaf contains the point");
            p / (hi - lo)
        })
        .product()
}

/// Left/right visit counts per node, by routing each point separately
/// through its own interval recursion.
pub fn brute_counts(tree: &PolyaTreeModel, points: &[Vec<f64>]) -> Vec<Vec<[u64; 2]>> {
    let n_nodes = (1 << tree.levels()) - 1;
    let mut counts = vec![vec![[0u64; 2]; n_nodes]; tree.dims()];
    for x in points {
        for (d, per_node) in counts.iter_mut().enumerate() {
            let splits = tree.splits(d);
            let (mut lo, mut hi, mut node) = (0.0, 1.0, 0usize);
            for _ in 0..tree.levels() {
                let cut = lo + (hi - lo) * split_at(&splits, node);
                if x[d] <= cut {
                    per_node[node][0] += 1;
                    hi = cut;
                    node = 2 * node + 1;
                } else {
                    per_node[node][1] += 1;
                    lo = cut;
                    node = 2 * node + 2;
                }
            }
        }
    }
    counts
}

/// `(0, 1]` uniform draw.
pub fn unit<R: Rng>(rng: &mut R) -> f64 {
    1.0 - rng.random::<f64>()
}
