//! Truncated Pólya tree prior on `(0,1]^D`.
//!
//! Each dimension carries an independent binary tree of depth `L`. Internal
//! node `i` (breadth-first; children of `i` are `2i+1` and `2i+2`) holds a
//! `Beta(α₀, α₁)` distribution over the branch probability `Y` of sending mass
//! to its left child, with `α = softplus(raw)`. Where a node's interval is cut
//! is a separate quantity, the split proportion `β`: fixed at ½ in
//! [`PartitionMode::Dyadic`], otherwise `β = σ(raw)` per level or per node.
//!
//! Intervals are half-open, `(lower, upper]`, and a point sitting exactly on
//! a split point belongs to the left child.
//!
//! For a point whose coordinate `d` lands in leaf `ε₁…ε_L`, the density is
//!
//! ```text
//! p(x) = Π_d [ Π_j Y_{ε₁…ε_j} / ν(B_{ε₁…ε_L}) ]
//! ```
//!
//! with `Y_{…1} = 1 − Y_{…0}` and `ν` the leaf length, written as the product
//! of the `β` / `1 − β` factors along the path.

use std::f64::consts::LN_2;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{inverse_softplus, sigmoid, softplus, Array, Tape, Var};
use crate::distributions::{beta_kl_on_tape, BetaDist};
use crate::error::{contract, domain, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionMode {
    /// Every split at the midpoint.
    Dyadic,
    /// One learnable split proportion per level and dimension.
    PerLevel,
    /// One learnable split proportion per internal node and dimension.
    PerNode,
}

impl PartitionMode {
    pub const ALL: [PartitionMode; 3] = [Self::Dyadic, Self::PerLevel, Self::PerNode];

    fn splits_per_dim(self, levels: usize) -> usize {
        match self {
            Self::Dyadic => 0,
            Self::PerLevel => levels,
            Self::PerNode => (1 << levels) - 1,
        }
    }
}

impl std::str::FromStr for PartitionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dyadic" => Ok(Self::Dyadic),
            "per-level" => Ok(Self::PerLevel),
            "per-node" => Ok(Self::PerNode),
            other => Err(format!(
                "unknown partition mode '{other}' (expected dyadic, per-level or per-node)"
            )),
        }
    }
}

/// How branch probabilities `Y` are obtained at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum YMode {
    PosteriorMean,
    Sampled,
}

/// Unconstrained parameters of one internal node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeParams {
    pub raw_left: f64,
    pub raw_right: f64,
}

impl NodeParams {
    pub fn alphas(&self) -> (f64, f64) {
        (softplus(self.raw_left), softplus(self.raw_right))
    }

    pub fn beta(&self) -> BetaDist {
        let (a, b) = self.alphas();
        BetaDist::new(a, b).expect("softplus keeps Beta parameters positive")
    }
}

/// Split proportions for one dimension, expanded per internal node.
#[derive(Clone, Debug, PartialEq)]
pub enum Splits {
    Dyadic,
    /// One proportion per level, root first.
    PerLevel(Vec<f64>),
    /// One proportion per internal node, breadth-first.
    PerNode(Vec<f64>),
}

impl Splits {
    fn at(&self, node: usize) -> f64 {
        match self {
            Self::Dyadic => 0.5,
            Self::PerLevel(b) => b[depth_of(node)],
            Self::PerNode(b) => b[node],
        }
    }

    fn validate(&self, levels: usize) -> Result<()> {
        let (v, want) = match self {
            Self::Dyadic => return Ok(()),
            Self::PerLevel(v) => (v, levels),
            Self::PerNode(v) => (v, (1 << levels) - 1),
        };
        if v.len() != want {
            return contract(format!("expected {want} split proportions, got {}", v.len()));
        }
        if let Some(b) = v.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return contract(format!("split proportion {b} outside (0,1)"));
        }
        Ok(())
    }
}

/// Depth of a breadth-first node index (root has depth 0).
#[inline]
fn depth_of(node: usize) -> usize {
    (usize::BITS - 1 - (node + 1).leading_zeros()) as usize
}

/// A half-open interval `(lower, upper]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower < x && x <= self.upper
    }
}

/// Leaf intervals of a depth-`levels` tree, left to right.
pub fn compute_intervals(levels: usize, splits: &Splits) -> Result<Vec<Interval>> {
    if levels == 0 {
        return contract("a tree needs at least one level");
    }
    splits.validate(levels)?;
    let mut current = vec![Interval {
        lower: 0.0,
        upper: 1.0,
    }];
    let mut node = 0;
    for _ in 0..levels {
        let mut next = Vec::with_capacity(current.len() * 2);
        for iv in &current {
            let s = iv.lower + (iv.upper - iv.lower) * splits.at(node);
            next.push(Interval {
                lower: iv.lower,
                upper: s,
            });
            next.push(Interval {
                lower: s,
                upper: iv.upper,
            });
            node += 1;
        }
        current = next;
    }
    Ok(current)
}

/// Where one coordinate lands in one dimension's tree.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafAssignment {
    /// Branch taken at each level (`0` left, `1` right), root first.
    pub path: Vec<u8>,
    /// Internal node visited at each level.
    pub nodes: Vec<usize>,
    /// Leaf index in `0..2^L`, left to right.
    pub leaf: usize,
    pub interval: Interval,
}

/// Number of prior parameters for an `levels`-deep tree over `dims` dimensions.
pub fn param_count(levels: usize, dims: usize, mode: PartitionMode) -> usize {
    let nodes = (1 << levels) - 1;
    nodes * 2 * dims + mode.splits_per_dim(levels) * dims
}

/// Branch probabilities `Y` for every internal node, `[dims][nodes]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchProbs {
    nodes: usize,
    y: Vec<f64>,
}

impl BranchProbs {
    /// The same `Y` at every node of every dimension.
    pub fn constant(levels: usize, dims: usize, y: f64) -> Self {
        let nodes = (1 << levels) - 1;
        Self {
            nodes,
            y: vec![y; nodes * dims],
        }
    }

    pub fn get(&self, dim: usize, node: usize) -> f64 {
        self.y[dim * self.nodes + node]
    }

    pub fn set(&mut self, dim: usize, node: usize, y: f64) {
        self.y[dim * self.nodes + node] = y;
    }
}

/// The two parts of the joint log posterior.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointPosterior {
    /// `Σ_i Σ_d [Σ_j ln Y − ln ν]`.
    pub data_term: f64,
    /// `Σ_d Σ_nodes [(α₀−1) ln Y + (α₁−1) ln(1−Y)]`.
    pub prior_term: f64,
}

impl JointPosterior {
    pub fn total(&self) -> f64 {
        self.data_term + self.prior_term
    }
}

/// Source of branch probabilities when recording the joint posterior.
#[derive(Clone, Copy, Debug)]
pub enum YSource<'a> {
    /// `Y = α₀ / (α₀ + α₁)`, differentiable in the node parameters.
    PosteriorMean,
    /// Fixed values, e.g. a draw from [`PolyaTreeModel::sample_branch_probs`].
    Fixed(&'a BranchProbs),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyaTreeModel {
    levels: usize,
    dims: usize,
    mode: PartitionMode,
    /// `[dims, nodes, 2]`: raw left/right Beta parameters.
    node_raw: Array,
    /// `[dims, splits]`; absent for dyadic partitions.
    split_raw: Option<Array>,
}

impl PolyaTreeModel {
    /// A tree with `α = 1` at every node (the uniform density) and all split
    /// proportions at ½.
    pub fn new(levels: usize, dims: usize, mode: PartitionMode) -> Result<Self> {
        if levels == 0 || dims == 0 {
            return contract(format!("need levels ≥ 1 and dims ≥ 1, got L={levels}, D={dims}"));
        }
        if levels > 20 {
            return contract(format!("tree depth {levels} is too large"));
        }
        let nodes = (1 << levels) - 1;
        let node_raw = Array::full(&[dims, nodes, 2], inverse_softplus(1.0));
        let s = mode.splits_per_dim(levels);
        let split_raw = (s > 0).then(|| Array::zeros(&[dims, s]));
        Ok(Self {
            levels,
            dims,
            mode,
            node_raw,
            split_raw,
        })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn mode(&self) -> PartitionMode {
        self.mode
    }

    pub fn node_count(&self) -> usize {
        (1 << self.levels) - 1
    }

    pub fn leaf_count(&self) -> usize {
        1 << self.levels
    }

    pub fn num_params(&self) -> usize {
        self.node_raw.len() + self.split_raw.as_ref().map_or(0, Array::len)
    }

    pub fn node(&self, dim: usize, node: usize) -> NodeParams {
        let k = (dim * self.node_count() + node) * 2;
        let d = self.node_raw.data();
        NodeParams {
            raw_left: d[k],
            raw_right: d[k + 1],
        }
    }

    pub fn alphas(&self, dim: usize, node: usize) -> (f64, f64) {
        self.node(dim, node).alphas()
    }

    /// Sets a node's effective Beta parameters (both must be positive).
    pub fn set_alphas(&mut self, dim: usize, node: usize, left: f64, right: f64) -> Result<()> {
        if !(left > 0.0 && right > 0.0) {
            return domain(format!("Beta parameters must be positive, got ({left}, {right})"));
        }
        let k = (dim * self.node_count() + node) * 2;
        let d = self.node_raw.data_mut();
        d[k] = inverse_softplus(left);
        d[k + 1] = inverse_softplus(right);
        Ok(())
    }

    /// Sets every node of every dimension to `Beta(left, right)`.
    pub fn fill_alphas(&mut self, left: f64, right: f64) -> Result<()> {
        for d in 0..self.dims {
            for n in 0..self.node_count() {
                self.set_alphas(d, n, left, right)?;
            }
        }
        Ok(())
    }

    /// Sets the split proportions of one dimension from values in `(0,1)`.
    pub fn set_split_proportions(&mut self, dim: usize, betas: &[f64]) -> Result<()> {
        let s = self.mode.splits_per_dim(self.levels);
        let Some(raw) = self.split_raw.as_mut() else {
            return contract("dyadic partitions have no split parameters");
        };
        if betas.len() != s {
            return contract(format!("expected {s} split proportions, got {}", betas.len()));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return contract(format!("split proportion {b} outside (0,1)"));
        }
        for (r, &b) in raw.data_mut()[dim * s..(dim + 1) * s].iter_mut().zip(betas) {
            *r = (b / (1.0 - b)).ln();
        }
        Ok(())
    }

    pub fn splits(&self, dim: usize) -> Splits {
        let s = self.mode.splits_per_dim(self.levels);
        let raw = |r: &Array| -> Vec<f64> {
            r.data()[dim * s..(dim + 1) * s].iter().map(|&v| sigmoid(v)).collect()
        };
        match (self.mode, &self.split_raw) {
            (PartitionMode::PerLevel, Some(r)) => Splits::PerLevel(raw(r)),
            (PartitionMode::PerNode, Some(r)) => Splits::PerNode(raw(r)),
            _ => Splits::Dyadic,
        }
    }

    pub fn intervals(&self, dim: usize) -> Result<Vec<Interval>> {
        compute_intervals(self.levels, &self.splits(dim))
    }

    pub fn leaf_of(&self, dim: usize, x: f64) -> Result<LeafAssignment> {
        self.route(&self.splits(dim), x)
    }

    fn route(&self, splits: &Splits, x: f64) -> Result<LeafAssignment> {
        if !(x > 0.0 && x <= 1.0) {
            return domain(format!("coordinate {x} outside (0,1]"));
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut node = 0;
        let mut path = Vec::with_capacity(self.levels);
        let mut nodes = Vec::with_capacity(self.levels);
        for _ in 0..self.levels {
            nodes.push(node);
            let s = lo + (hi - lo) * splits.at(node);
            let bit = if x <= s {
                hi = s;
                0
            } else {
                lo = s;
                1
            };
            path.push(bit);
            node = 2 * node + 1 + bit as usize;
        }
        let leaf = node + 1 - (1 << self.levels);
        Ok(LeafAssignment {
            path,
            nodes,
            leaf,
            interval: Interval {
                lower: lo,
                upper: hi,
            },
        })
    }

    /// Routes every row of an `[n, dims]` batch; result is `[n][dims]`.
    pub fn route_batch(&self, batch: &Array) -> Result<Vec<Vec<LeafAssignment>>> {
        let (n, d) = batch.dims2()?;
        if d != self.dims {
            return contract(format!("batch has {d} columns, tree has {} dimensions", self.dims));
        }
        let splits: Vec<Splits> = (0..d).map(|k| self.splits(k)).collect();
        (0..n)
            .map(|i| {
                batch
                    .row(i)
                    .iter()
                    .zip(&splits)
                    .map(|(&x, s)| self.route(s, x))
                    .collect()
            })
            .collect()
    }

    /// `Y = α₀/(α₀+α₁)` at every node.
    pub fn mean_branch_probs(&self) -> BranchProbs {
        let nodes = self.node_count();
        let y = (0..self.dims * nodes)
            .map(|k| {
                let (a, b) = self.alphas(k / nodes, k % nodes);
                a / (a + b)
            })
            .collect();
        BranchProbs { nodes, y }
    }

    /// One draw of `Y ~ Beta(α₀, α₁)` at every node.
    pub fn sample_branch_probs<R: Rng + ?Sized>(&self, rng: &mut R) -> BranchProbs {
        let nodes = self.node_count();
        let y = (0..self.dims * nodes)
            .map(|k| self.node(k / nodes, k % nodes).beta().sample(rng))
            .collect();
        BranchProbs { nodes, y }
    }

    pub fn branch_probs<R: Rng + ?Sized>(&self, mode: YMode, rng: &mut R) -> BranchProbs {
        match mode {
            YMode::PosteriorMean => self.mean_branch_probs(),
            YMode::Sampled => self.sample_branch_probs(rng),
        }
    }

    /// Log density at `x` with posterior-mean branch probabilities.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.log_density_with(x, &self.mean_branch_probs())
    }

    /// Log density at `x` under the given branch probabilities.
    pub fn log_density_with(&self, x: &[f64], probs: &BranchProbs) -> Result<f64> {
        if x.len() != self.dims {
            return contract(format!("point of dimension {} for a {}-D tree", x.len(), self.dims));
        }
        let mut acc = 0.0;
        for (d, &xd) in x.iter().enumerate() {
            let splits = self.splits(d);
            let leaf = self.route(&splits, xd)?;
            for (&node, &bit) in leaf.nodes.iter().zip(&leaf.path) {
                let y = probs.get(d, node);
                let b = splits.at(node);
                acc += if bit == 0 {
                    y.ln() - b.ln()
                } else {
                    (1.0 - y).ln() - (1.0 - b).ln()
                };
            }
        }
        Ok(acc)
    }

    /// Joint log posterior of a batch under fixed branch probabilities, with
    /// a uniform prior on split proportions.
    pub fn log_joint_posterior(&self, batch: &Array, probs: &BranchProbs) -> Result<JointPosterior> {
        let (n, _) = batch.dims2()?;
        let mut data_term = 0.0;
        for i in 0..n {
            data_term += self.log_density_with(batch.row(i), probs)?;
        }
        let mut prior_term = 0.0;
        for d in 0..self.dims {
            for node in 0..self.node_count() {
                let (a0, a1) = self.alphas(d, node);
                let y = probs.get(d, node);
                prior_term += (a0 - 1.0) * y.ln() + (a1 - 1.0) * (1.0 - y).ln();
            }
        }
        Ok(JointPosterior {
            data_term,
            prior_term,
        })
    }

    /// Records the parameters on `tape` as differentiable leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> TreeVars<'t> {
        TreeVars {
            nodes: tape.var(self.node_raw.clone()),
            splits: self.split_raw.as_ref().map(|s| tape.var(s.clone())),
        }
    }

    /// `ln Y` / `ln(1 − Y)` table from posterior means, flat index
    /// `(dim·nodes + node)·2 + side`.
    fn log_branch_table<'t>(&self, vars: &TreeVars<'t>) -> Result<Var<'t>> {
        let m = self.dims * self.node_count();
        let alphas = vars.nodes.softplus().reshape(vec![2 * m])?;
        let left: Rc<[usize]> = (0..m).map(|k| 2 * k).collect();
        let right: Rc<[usize]> = (0..m).map(|k| 2 * k + 1).collect();
        let total = alphas
            .gather(left, vec![m])?
            .add(alphas.gather(right, vec![m])?)?
            .log()?;
        let spread: Rc<[usize]> = (0..2 * m).map(|k| k / 2).collect();
        alphas.log()?.sub(total.gather(spread, vec![2 * m])?)
    }

    /// `ln β` / `ln(1 − β)` table, flat index `(dim·splits + split)·2 + side`.
    fn log_split_table<'t>(&self, vars: &TreeVars<'t>) -> Result<Option<Var<'t>>> {
        let Some(raw) = vars.splits else {
            return Ok(None);
        };
        let s = raw.shape().iter().product::<usize>();
        let flat = raw.reshape(vec![s])?;
        let both = Var::concat(&[flat.log_sigmoid(), flat.neg().log_sigmoid()])?;
        let interleave: Rc<[usize]> = (0..2 * s).map(|k| (k % 2) * s + k / 2).collect();
        Ok(Some(both.gather(interleave, vec![2 * s])?))
    }

    fn split_slot(&self, dim: usize, node: usize) -> usize {
        let s = self.mode.splits_per_dim(self.levels);
        match self.mode {
            PartitionMode::Dyadic => 0,
            PartitionMode::PerLevel => dim * s + depth_of(node),
            PartitionMode::PerNode => dim * s + node,
        }
    }

    /// Per-(point, dimension) log densities `[n·dims]` for the given leaf
    /// paths, against a `ln Y` table.
    fn per_dim_log_density<'t>(
        &self,
        y_table: Var<'t>,
        split_table: Option<Var<'t>>,
        paths: &[(usize, &LeafAssignment)],
    ) -> Result<Var<'t>> {
        let tape = y_table.tape();
        let (l, nodes) = (self.levels, self.node_count());
        let rows = paths.len();
        let y_idx: Rc<[usize]> = paths
            .iter()
            .flat_map(|&(d, leaf)| {
                leaf.nodes
                    .iter()
                    .zip(&leaf.path)
                    .map(move |(&node, &bit)| (d * nodes + node) * 2 + bit as usize)
            })
            .collect();
        let log_y = y_table.gather(y_idx, vec![rows, l])?.row_sum()?;
        match split_table {
            None => Ok(log_y.add(tape.scalar(l as f64 * LN_2))?),
            Some(t) => {
                let s_idx: Rc<[usize]> = paths
                    .iter()
                    .flat_map(|&(d, leaf)| {
                        leaf.nodes
                            .iter()
                            .zip(&leaf.path)
                            .map(move |(&node, &bit)| self.split_slot(d, node) * 2 + bit as usize)
                    })
                    .collect();
                let log_nu = t.gather(s_idx, vec![rows, l])?.row_sum()?;
                log_y.sub(log_nu)
            }
        }
    }

    /// Differentiable per-point log density of an `[n, dims]` batch with
    /// posterior-mean branch probabilities. Result has shape `[n]`.
    ///
    /// With `smooth = Some(z)`, each dimension's log density is linearly
    /// interpolated between the centres of the containing leaf and its nearest
    /// neighbour, which makes it differentiable in `z` (the `[n, dims]`
    /// coordinates, recorded on the same tape). The smoothed density is no
    /// longer exactly normalized.
    pub fn log_density_on_tape<'t>(
        &self,
        vars: &TreeVars<'t>,
        batch: &Array,
        smooth: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        let routes = self.route_batch(batch)?;
        let n = routes.len();
        let y_table = self.log_branch_table(vars)?;
        let split_table = self.log_split_table(vars)?;
        let paths: Vec<(usize, &LeafAssignment)> = routes
            .iter()
            .flat_map(|r| r.iter().enumerate())
            .collect();
        let own = self.per_dim_log_density(y_table, split_table, &paths)?;
        let per_dim = match smooth {
            None => own,
            Some(z) => self.smoothed(vars, y_table, split_table, &paths, own, z)?,
        };
        per_dim.reshape(vec![n, self.dims])?.row_sum()
    }

    /// Leaf centres `[dims·leaves]` as a function of the split parameters.
    fn leaf_centres_on_tape<'t>(&self, vars: &TreeVars<'t>) -> Result<Var<'t>> {
        let tape = vars.nodes.tape();
        let d = self.dims;
        let Some(raw) = vars.splits else {
            let c: Vec<f64> = (0..d * self.leaf_count())
                .map(|k| ((k % self.leaf_count()) as f64 + 0.5) / self.leaf_count() as f64)
                .collect();
            return Ok(tape.constant(Array::from_vec(c)));
        };
        let beta = raw.reshape(vec![raw.shape().iter().product()])?.sigmoid();
        let mut lo = tape.constant(Array::zeros(&[d]));
        let mut len = tape.constant(Array::full(&[d], 1.0));
        for depth in 0..self.levels {
            let width = 1usize << depth;
            let slots: Rc<[usize]> = (0..d * width)
                .map(|k| self.split_slot(k / width, width - 1 + k % width))
                .collect();
            let b = beta.gather(slots, vec![d * width])?;
            let left_len = len.mul(b)?;
            let lo_right = lo.add(left_len)?;
            let right_len = len.sub(left_len)?;
            // children of (dim, k) sit at (dim, 2k) and (dim, 2k + 1)
            let interleave: Rc<[usize]> = (0..2 * d * width)
                .map(|j| {
                    let (dim, c) = (j / (2 * width), j % (2 * width));
                    (c % 2) * d * width + dim * width + c / 2
                })
                .collect();
            lo = Var::concat(&[lo, lo_right])?.gather(interleave.clone(), vec![2 * d * width])?;
            len = Var::concat(&[left_len, right_len])?.gather(interleave, vec![2 * d * width])?;
        }
        lo.add(len.scale(0.5))
    }

    fn smoothed<'t>(
        &self,
        vars: &TreeVars<'t>,
        y_table: Var<'t>,
        split_table: Option<Var<'t>>,
        paths: &[(usize, &LeafAssignment)],
        own: Var<'t>,
        z: Var<'t>,
    ) -> Result<Var<'t>> {
        let tape = own.tape();
        let k = self.leaf_count();
        let intervals: Vec<Vec<Interval>> =
            (0..self.dims).map(|d| self.intervals(d)).collect::<Result<_>>()?;
        let splits: Vec<Splits> = (0..self.dims).map(|d| self.splits(d)).collect();
        let z_vals = z.value();
        let mut neighbours = Vec::with_capacity(paths.len());
        let mut own_idx = Vec::with_capacity(paths.len());
        let mut nb_idx = Vec::with_capacity(paths.len());
        let mut mask = Vec::with_capacity(paths.len());
        for (row, &(d, leaf)) in paths.iter().enumerate() {
            let ivs = &intervals[d];
            let c = 0.5 * (leaf.interval.lower + leaf.interval.upper);
            let zk = z_vals.data()[row];
            let nb = if zk < c && leaf.leaf > 0 {
                Some(leaf.leaf - 1)
            } else if zk >= c && leaf.leaf + 1 < ivs.len() {
                Some(leaf.leaf + 1)
            } else {
                None
            };
            let target = nb.unwrap_or(leaf.leaf);
            let probe = 0.5 * (ivs[target].lower + ivs[target].upper);
            neighbours.push((d, self.route(&splits[d], probe)?));
            own_idx.push(d * k + leaf.leaf);
            nb_idx.push(d * k + target);
            mask.push(if nb.is_some() { 1.0 } else { 0.0 });
        }
        let nb_paths: Vec<(usize, &LeafAssignment)> =
            neighbours.iter().map(|(d, l)| (*d, l)).collect();
        let other = self.per_dim_log_density(y_table, split_table, &nb_paths)?;
        let rows = paths.len();
        let centres = self.leaf_centres_on_tape(vars)?;
        let c = centres.gather(own_idx.into(), vec![rows])?;
        let cj = centres.gather(nb_idx.into(), vec![rows])?;
        // rows without a neighbour get weight 0 over a denominator of 1
        let keep = tape.constant(Array::from_vec(mask.clone()));
        let pad = tape.constant(Array::from_vec(mask.iter().map(|m| 1.0 - m).collect()));
        let w = z
            .reshape(vec![rows])?
            .sub(c)?
            .mul(keep)?
            .div(cj.sub(c)?.add(pad)?)?;
        own.add(w.mul(other.sub(own)?)?)
    }

    /// Differentiable joint log posterior (data term plus Beta prior term).
    pub fn log_joint_posterior_on_tape<'t>(
        &self,
        vars: &TreeVars<'t>,
        batch: &Array,
        y: YSource<'_>,
    ) -> Result<Var<'t>> {
        let tape = vars.nodes.tape();
        let routes = self.route_batch(batch)?;
        let m = self.dims * self.node_count();
        let y_table = match y {
            YSource::PosteriorMean => self.log_branch_table(vars)?,
            YSource::Fixed(p) => {
                let mut t = Vec::with_capacity(2 * m);
                for &yv in &p.y {
                    t.push(yv.ln());
                    t.push((1.0 - yv).ln());
                }
                tape.constant(Array::from_vec(t))
            }
        };
        let split_table = self.log_split_table(vars)?;
        let paths: Vec<(usize, &LeafAssignment)> = routes
            .iter()
            .flat_map(|r| r.iter().enumerate())
            .collect();
        let data = if paths.is_empty() {
            tape.scalar(0.0)
        } else {
            self.per_dim_log_density(y_table, split_table, &paths)?.sum()
        };
        let alphas = vars.nodes.softplus().reshape(vec![2 * m])?;
        let prior = alphas.add_scalar(-1.0).mul(y_table)?.sum();
        data.add(prior)
    }

    /// `Σ_nodes KL(Beta(α₀, α₁) ‖ Beta(1, 1))`, differentiable.
    pub fn kl_to_uniform_on_tape<'t>(&self, vars: &TreeVars<'t>) -> Result<Var<'t>> {
        let m = self.dims * self.node_count();
        let alphas = vars.nodes.softplus().reshape(vec![2 * m])?;
        let left: Rc<[usize]> = (0..m).map(|k| 2 * k).collect();
        let right: Rc<[usize]> = (0..m).map(|k| 2 * k + 1).collect();
        let a = alphas.gather(left, vec![m])?;
        let b = alphas.gather(right, vec![m])?;
        Ok(beta_kl_on_tape(a, b, 1.0, 1.0)?.sum())
    }

    /// Number of batch points routed to the left and right child of every
    /// node, `[dims][nodes]`.
    pub fn routing_counts(&self, batch: &Array) -> Result<Vec<Vec<[u64; 2]>>> {
        let mut counts = vec![vec![[0u64; 2]; self.node_count()]; self.dims];
        for row in self.route_batch(batch)? {
            for (d, leaf) in row.iter().enumerate() {
                for (&node, &bit) in leaf.nodes.iter().zip(&leaf.path) {
                    counts[d][node][bit as usize] += 1;
                }
            }
        }
        Ok(counts)
    }

    /// Beta–Binomial posterior: every node becomes
    /// `Beta(prior₀ + s·n_left, prior₁ + s·n_right)` with `s = count_scale`.
    pub fn conjugate_update(&self, batch: &Array, prior: (f64, f64), count_scale: f64) -> Result<Self> {
        if batch.dims2()?.0 == 0 {
            return contract("conjugate update needs a non-empty batch");
        }
        if !(count_scale > 0.0) {
            return contract(format!("count scale must be positive, got {count_scale}"));
        }
        let counts = self.routing_counts(batch)?;
        let mut out = self.clone();
        for (d, per_node) in counts.iter().enumerate() {
            for (node, c) in per_node.iter().enumerate() {
                out.set_alphas(
                    d,
                    node,
                    prior.0 + count_scale * c[0] as f64,
                    prior.1 + count_scale * c[1] as f64,
                )?;
            }
        }
        Ok(out)
    }

    /// Moves every node's `α` towards `target`'s:
    /// `α ← decay·α + (1 − decay)·α_target`.
    pub fn blend_towards(&mut self, target: &PolyaTreeModel, decay: f64) -> Result<()> {
        if target.levels != self.levels || target.dims != self.dims {
            return contract("blending trees of different shape");
        }
        for d in 0..self.dims {
            for node in 0..self.node_count() {
                let (a0, a1) = self.alphas(d, node);
                let (t0, t1) = target.alphas(d, node);
                self.set_alphas(
                    d,
                    node,
                    decay * a0 + (1.0 - decay) * t0,
                    decay * a1 + (1.0 - decay) * t1,
                )?;
            }
        }
        Ok(())
    }

    /// Draws `n` points by descending each dimension's tree with Bernoulli
    /// branch choices, then placing the point uniformly inside the leaf.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize, mode: YMode) -> Result<Array> {
        if n == 0 {
            return contract("sample size must be at least 1");
        }
        let splits: Vec<Splits> = (0..self.dims).map(|d| self.splits(d)).collect();
        let mut out = Vec::with_capacity(n * self.dims);
        let shared = self.mean_branch_probs();
        for _ in 0..n {
            let drawn;
            let probs = match mode {
                YMode::PosteriorMean => &shared,
                YMode::Sampled => {
                    drawn = self.sample_branch_probs(rng);
                    &drawn
                }
            };
            for (d, s) in splits.iter().enumerate() {
                let (mut lo, mut hi) = (0.0, 1.0);
                let mut node = 0;
                for _ in 0..self.levels {
                    let cut = lo + (hi - lo) * s.at(node);
                    let left = rng.random::<f64>() < probs.get(d, node);
                    if left {
                        hi = cut;
                    } else {
                        lo = cut;
                    }
                    node = 2 * node + if left { 1 } else { 2 };
                }
                let u = 1.0 - rng.random::<f64>();
                out.push((lo + (hi - lo) * u).min(hi));
            }
        }
        Array::matrix(n, self.dims, out)
    }

    /// Per dimension, the mean Beta variance over the nodes that govern the
    /// final (level-L) split.
    pub fn variance_map(&self) -> Vec<f64> {
        let first = (1 << (self.levels - 1)) - 1;
        let last = self.node_count();
        (0..self.dims)
            .map(|d| {
                (first..last)
                    .map(|node| self.node(d, node).beta().variance())
                    .sum::<f64>()
                    / (last - first) as f64
            })
            .collect()
    }

    pub fn parameters(&self) -> Vec<&Array> {
        std::iter::once(&self.node_raw).chain(self.split_raw.as_ref()).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Array> {
        std::iter::once(&mut self.node_raw)
            .chain(self.split_raw.as_mut())
            .collect()
    }
}

/// Tree parameters recorded on a tape, in [`PolyaTreeModel::parameters`] order.
#[derive(Clone, Copy, Debug)]
pub struct TreeVars<'t> {
    pub nodes: Var<'t>,
    pub splits: Option<Var<'t>>,
}

impl<'t> TreeVars<'t> {
    pub fn to_vec(&self) -> Vec<Var<'t>> {
        std::iter::once(self.nodes).chain(self.splits).collect()
    }
}
