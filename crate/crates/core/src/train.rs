//! Minibatch training with Adam, optional conjugate tree updates and early
//! stopping on validation NLL.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Tape};
use crate::data::Dataset;
use crate::estimator::{Base, BaseVars, DensityEstimator, PriorKind, LATENT_CLAMP};
use crate::error::{contract, Error, Result};
use crate::flow::FlowConfig;
use crate::optim::{Adam, AdamConfig, PolyakAverage};
use crate::polya_tree::PartitionMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub prior: PriorKind,
    pub levels: usize,
    pub mode: PartitionMode,
    pub flow: FlowConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_flow: f64,
    pub lr_prior: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Stop after this many epochs without a new best validation NLL.
    pub patience: usize,
    pub seed: u64,
    /// Update the tree by Beta–Binomial conjugacy instead of gradients.
    pub conjugate: bool,
    /// Beta(1,1) pseudo-counts used by conjugate updates.
    pub conjugate_prior: (f64, f64),
    /// Weight kept on the previous tree in each conjugate blend.
    pub conjugate_decay: f64,
    /// Weight of `Σ_nodes KL(Beta(α₀, α₁) ‖ Beta(1, 1))` in the loss.
    pub kl_weight: f64,
    pub smooth_base: bool,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: Option<f64>,
    /// Evaluate and return an exponential moving average of the parameters.
    pub polyak: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            prior: PriorKind::Vpt,
            levels: 4,
            mode: PartitionMode::Dyadic,
            flow: FlowConfig::default(),
            epochs: 1000,
            batch_size: 256,
            lr_flow: 1e-2,
            lr_prior: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            patience: 100,
            seed: 0,
            conjugate: false,
            conjugate_prior: (1.0, 1.0),
            conjugate_decay: 0.9,
            kl_weight: 0.0,
            smooth_base: false,
            lr_decay: None,
            polyak: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_flow", self.lr_flow),
            ("lr_prior", self.lr_prior),
            ("adam_eps", self.adam_eps),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return contract(format!("{name} must be positive, got {v}"));
        }
        if self.levels == 0 || self.levels > 20 {
            return contract(format!("levels must be in 1..=20, got {}", self.levels));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return contract("epochs and batch size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return contract("Adam moment decays must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.conjugate_decay) {
            return contract("conjugate decay must lie in [0, 1)");
        }
        if !(self.kl_weight >= 0.0) {
            return contract("KL weight must be non-negative");
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub validation_nll: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation_nll: f64,
    pub test_nll: f64,
    pub test_bpd: f64,
    pub prior_params: usize,
    pub flow_params: usize,
}

impl TrainReport {
    /// One JSON object per epoch, one per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for rec in &self.epochs {
            serde_json::to_writer(&mut w, rec)?;
            writeln!(w)?;
        }
        Ok(())
    }

    /// The report with wall-clock fields zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
        r
    }
}

/// Trains an estimator on `data.train()`, early-stopping on
/// `data.validation()` (or the training rows if there is no validation
/// split), and returns the best estimator seen.
pub fn train(config: &TrainConfig, data: &Dataset) -> Result<(DensityEstimator, TrainReport)> {
    train_with(config, data, |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    config: &TrainConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(DensityEstimator, TrainReport)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dims = data.dims();
    let mut est = DensityEstimator::new(
        dims,
        config.prior,
        config.levels,
        config.mode,
        config.flow.clone(),
        config.smooth_base,
        &mut rng,
    )?;
    let train_x = data.train();
    let n_train = train_x.shape()[0];
    if n_train == 0 {
        return contract("the training split is empty");
    }
    let val_x = if data.split.validation.is_empty() {
        train_x.clone()
    } else {
        data.validation()
    };
    let conjugate = config.conjugate && matches!(est.base, Base::PolyaTree(_));

    let mut flow_opt = Adam::new(config.adam(config.lr_flow), &est.flow.parameters());
    let mut prior_opt = Adam::new(config.adam(config.lr_prior), &est.base.parameters());
    let mut polyak = config.polyak.map(|decay| PolyakAverage::new(decay, &all_params(&est)));

    let mut order: Vec<usize> = (0..n_train).collect();
    let mut records = Vec::new();
    let mut best = (f64::INFINITY, 0usize, est.clone());
    for epoch in 0..config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut nll_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = rows(&train_x, chunk);
            let loss = step(config, &mut est, &batch, &mut flow_opt, &mut prior_opt, conjugate, n_train)
                .and_then(|nll| {
                    if nll.is_finite() {
                        Ok(nll)
                    } else {
                        Err(Error::Diverged {
                            epoch,
                            batch: b,
                            loss: nll,
                        })
                    }
                })
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Diverged {
                        epoch,
                        batch: b,
                        loss: f64::NAN,
                    },
                    e => e,
                })?;
            nll_sum += loss * chunk.len() as f64;
            if let Some(p) = polyak.as_mut() {
                p.update(&all_params(&est));
            }
        }
        if let Some(decay) = config.lr_decay {
            flow_opt.set_lr(flow_opt.lr() * decay);
            prior_opt.set_lr(prior_opt.lr() * decay);
        }
        let current = match &polyak {
            Some(p) => with_params(&est, p.averaged()),
            None => est.clone(),
        };
        let validation_nll = -current.mean_log_likelihood(&val_x)?;
        let rec = EpochRecord {
            epoch,
            train_nll: nll_sum / n_train as f64,
            validation_nll,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        records.push(rec);
        if validation_nll < best.0 {
            best = (validation_nll, epoch, current);
        } else if epoch - best.1 >= config.patience {
            break;
        }
    }

    let (best_validation_nll, best_epoch, est) = best;
    let test_x = if data.split.test.is_empty() {
        val_x
    } else {
        data.test()
    };
    let test_nll = -est.mean_log_likelihood(&test_x)?;
    let report = TrainReport {
        epochs: records,
        best_epoch,
        best_validation_nll,
        test_nll,
        test_bpd: test_nll / (dims as f64 * std::f64::consts::LN_2),
        prior_params: est.base.num_params(),
        flow_params: est.flow.num_params(),
    };
    Ok((est, report))
}

/// One optimizer step on a minibatch; returns the batch NLL before the step.
fn step(
    config: &TrainConfig,
    est: &mut DensityEstimator,
    batch: &Array,
    flow_opt: &mut Adam,
    prior_opt: &mut Adam,
    conjugate: bool,
    n_train: usize,
) -> Result<f64> {
    let (flow_grads, prior_grads, nll, latents) = {
        let tape = Tape::new();
        let vars = est.bind(&tape);
        let ll = est.log_likelihood_on_tape(&tape, &vars, batch)?;
        let nll = ll.mean().neg();
        let loss = match (&est.base, &vars.base) {
            (Base::PolyaTree(t), BaseVars::PolyaTree(tv)) if config.kl_weight > 0.0 && !conjugate => {
                nll.add(t.kl_to_uniform_on_tape(tv)?.scale(config.kl_weight))?
            }
            _ => nll,
        };
        let nll_value = nll.item();
        if !loss.item().is_finite() {
            return Ok(loss.item());
        }
        let mut grads = loss.backward()?;
        let flow_grads: Vec<Array> = vars.flow.iter().map(|&v| grads.take(v)).collect();
        let prior_grads: Vec<Array> = vars.base.to_vec().iter().map(|&v| grads.take(v)).collect();
        let latents = conjugate.then(|| est.flow.forward(batch)).transpose()?;
        (flow_grads, prior_grads, nll_value, latents)
    };
    flow_opt.step(&mut est.flow.parameters_mut(), &flow_grads)?;
    if conjugate {
        if let (Base::PolyaTree(tree), Some((z, _))) = (&mut est.base, latents) {
            let z = z.map(|v| v.clamp(LATENT_CLAMP, 1.0 - LATENT_CLAMP));
            let scale = n_train as f64 / z.shape()[0] as f64;
            let post = tree.conjugate_update(&z, config.conjugate_prior, scale)?;
            tree.blend_towards(&post, config.conjugate_decay)?;
        }
    } else if !prior_grads.is_empty() {
        prior_opt.step(&mut est.base.parameters_mut(), &prior_grads)?;
    }
    Ok(nll)
}

fn rows(x: &Array, idx: &[usize]) -> Array {
    let d = x.shape()[1];
    let data = idx.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
    Array::matrix(idx.len(), d, data).expect("row lengths match")
}

fn all_params(est: &DensityEstimator) -> Vec<&Array> {
    let mut p = est.flow.parameters();
    p.extend(est.base.parameters());
    p
}

fn with_params(est: &DensityEstimator, values: &[Array]) -> DensityEstimator {
    let mut out = est.clone();
    let mut targets = out.flow.parameters_mut();
    targets.extend(out.base.parameters_mut());
    for (t, v) in targets.into_iter().zip(values) {
        t.data_mut().copy_from_slice(v.data());
    }
    out
}
