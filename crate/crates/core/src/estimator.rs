//! A flow paired with a base density: `ln p(x) = ln p_base(f(x)) + ln |det J_f(x)|`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Tape, Var};
use crate::baselines::{FixedKind, FixedPrior, HistogramVars, LearnableHistogram};
use crate::error::{contract, Result};
use crate::flow::{FlowConfig, FlowModel};
use crate::polya_tree::{PartitionMode, PolyaTreeModel, TreeVars, YMode};

/// Latents are clamped into `[LATENT_CLAMP, 1 − LATENT_CLAMP]` before a
/// unit-cube base is evaluated or after it is sampled.
pub const LATENT_CLAMP: f64 = 1e-6;

/// Rows per tape when evaluating large batches without gradients.
const EVAL_CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    Vpt,
    Gaussian,
    Logistic,
    Histogram,
}

impl PriorKind {
    /// Whether the base lives on the unit cube, so the flow may end in a sigmoid.
    pub fn on_unit_cube(self) -> bool {
        matches!(self, Self::Vpt | Self::Histogram)
    }
}

impl std::str::FromStr for PriorKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "vpt" => Ok(Self::Vpt),
            "gaussian" => Ok(Self::Gaussian),
            "logistic" => Ok(Self::Logistic),
            "histogram" => Ok(Self::Histogram),
            other => Err(format!(
                "unknown prior '{other}' (expected vpt, gaussian, logistic or histogram)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Base {
    PolyaTree(PolyaTreeModel),
    Fixed(FixedPrior),
    Histogram(LearnableHistogram),
}

impl Base {
    pub fn new(kind: PriorKind, dims: usize, levels: usize, mode: PartitionMode) -> Result<Self> {
        Ok(match kind {
            PriorKind::Vpt => Self::PolyaTree(PolyaTreeModel::new(levels, dims, mode)?),
            PriorKind::Gaussian => Self::Fixed(FixedPrior::new(FixedKind::Gaussian, dims)?),
            PriorKind::Logistic => Self::Fixed(FixedPrior::new(FixedKind::Logistic, dims)?),
            PriorKind::Histogram => Self::Histogram(LearnableHistogram::with_levels(levels, dims)?),
        })
    }

    pub fn kind(&self) -> PriorKind {
        match self {
            Self::PolyaTree(_) => PriorKind::Vpt,
            Self::Fixed(p) => match p.kind {
                FixedKind::Gaussian => PriorKind::Gaussian,
                FixedKind::Logistic => PriorKind::Logistic,
            },
            Self::Histogram(_) => PriorKind::Histogram,
        }
    }

    pub fn dims(&self) -> usize {
        match self {
            Self::PolyaTree(t) => t.dims(),
            Self::Fixed(p) => p.dims,
            Self::Histogram(h) => h.dims(),
        }
    }

    pub fn parameters(&self) -> Vec<&Array> {
        match self {
            Self::PolyaTree(t) => t.parameters(),
            Self::Fixed(_) => vec![],
            Self::Histogram(h) => h.parameters(),
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Array> {
        match self {
            Self::PolyaTree(t) => t.parameters_mut(),
            Self::Fixed(_) => vec![],
            Self::Histogram(h) => h.parameters_mut(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }
}

/// Base parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub enum BaseVars<'t> {
    PolyaTree(TreeVars<'t>),
    Fixed,
    Histogram(HistogramVars<'t>),
}

impl<'t> BaseVars<'t> {
    /// In [`Base::parameters`] order.
    pub fn to_vec(&self) -> Vec<Var<'t>> {
        match self {
            Self::PolyaTree(v) => v.to_vec(),
            Self::Fixed => vec![],
            Self::Histogram(h) => vec![h.widths, h.logits],
        }
    }
}

/// All estimator parameters recorded on one tape.
#[derive(Clone, Debug)]
pub struct BoundEstimator<'t> {
    pub flow: Vec<Var<'t>>,
    pub base: BaseVars<'t>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimator {
    pub flow: FlowModel,
    pub base: Base,
    /// Interpolate the tree's log density between neighbouring leaves so
    /// that it carries a gradient with respect to the latent.
    pub smooth_base: bool,
}

impl DensityEstimator {
    /// Builds an estimator. Bases with full support never get a sigmoid
    /// output layer; unit-cube bases get one when `flow.sigmoid` is set
    /// (without it the data must already lie in `(0,1]^D`).
    pub fn new<R: Rng + ?Sized>(
        dims: usize,
        kind: PriorKind,
        levels: usize,
        mode: PartitionMode,
        flow: FlowConfig,
        smooth_base: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let flow = FlowConfig {
            sigmoid: kind.on_unit_cube() && flow.sigmoid,
            ..flow
        };
        Self::from_parts(FlowModel::new(dims, flow, rng)?, Base::new(kind, dims, levels, mode)?, smooth_base)
    }

    pub fn from_parts(flow: FlowModel, base: Base, smooth_base: bool) -> Result<Self> {
        if flow.dims() != base.dims() {
            return contract(format!("flow has {} dimensions, base has {}", flow.dims(), base.dims()));
        }
        if flow.has_sigmoid() && !base.kind().on_unit_cube() {
            return contract("a sigmoid output layer cannot feed a base with full support");
        }
        Ok(Self {
            flow,
            base,
            smooth_base,
        })
    }

    pub fn dims(&self) -> usize {
        self.flow.dims()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundEstimator<'t> {
        let base = match &self.base {
            Base::PolyaTree(t) => BaseVars::PolyaTree(t.bind(tape)),
            Base::Fixed(_) => BaseVars::Fixed,
            Base::Histogram(h) => BaseVars::Histogram(h.bind(tape)),
        };
        BoundEstimator {
            flow: self.flow.bind(tape),
            base,
        }
    }

    /// Differentiable per-point log likelihood `[n]` of an `[n, dims]` batch.
    /// This is the training objective: with `smooth_base` set, the tree's log
    /// density is the interpolated surrogate.
    pub fn log_likelihood_on_tape<'t>(
        &self,
        tape: &'t Tape,
        vars: &BoundEstimator<'t>,
        x: &Array,
    ) -> Result<Var<'t>> {
        self.record(tape, vars, x, self.smooth_base)
    }

    fn record<'t>(
        &self,
        tape: &'t Tape,
        vars: &BoundEstimator<'t>,
        x: &Array,
        smooth: bool,
    ) -> Result<Var<'t>> {
        let (z, logdet) = self.flow.forward_on_tape(&vars.flow, tape.constant(x.clone()))?;
        let base = match (&self.base, &vars.base) {
            (Base::PolyaTree(t), BaseVars::PolyaTree(tv)) => {
                let clamped = clamp_latent(&z.value());
                t.log_density_on_tape(tv, &clamped, smooth.then_some(z))?
            }
            (Base::Histogram(h), BaseVars::Histogram(hv)) => {
                h.latent_log_density_on_tape(hv, &clamp_latent(&z.value()))?
            }
            (Base::Fixed(p), BaseVars::Fixed) => p.log_density_on_tape(z)?,
            _ => return contract("bound variables do not match the estimator's base"),
        };
        base.add(logdet)
    }

    /// Per-point log likelihood of the normalized model, without gradients.
    /// The smoothing surrogate is never used here.
    pub fn log_likelihood(&self, x: &Array) -> Result<Vec<f64>> {
        let (n, d) = x.dims2()?;
        if d != self.dims() {
            return contract(format!("data has {d} columns, model expects {}", self.dims()));
        }
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(n);
            let chunk = Array::matrix(end - start, d, x.data()[start * d..end * d].to_vec())?;
            let tape = Tape::new();
            let vars = self.bind(&tape);
            out.extend_from_slice(self.record(&tape, &vars, &chunk, false)?.value().data());
        }
        Ok(out)
    }

    /// Mean log likelihood over a batch, in nats.
    pub fn mean_log_likelihood(&self, x: &Array) -> Result<f64> {
        let ll = self.log_likelihood(x)?;
        if ll.is_empty() {
            return contract("mean over an empty batch");
        }
        Ok(ll.iter().sum::<f64>() / ll.len() as f64)
    }

    /// Draws `n` points in data space: base sample, then the inverse flow.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize, y_mode: YMode) -> Result<Array> {
        let z = match &self.base {
            Base::PolyaTree(t) => clamp_latent(&t.sample(rng, n, y_mode)?),
            Base::Histogram(h) => clamp_latent(&h.sample(rng, n)?),
            Base::Fixed(p) => p.sample(rng, n)?,
        };
        self.flow.inverse(&z)
    }
}

fn clamp_latent(z: &Array) -> Array {
    z.map(|v| v.clamp(LATENT_CLAMP, 1.0 - LATENT_CLAMP))
}
