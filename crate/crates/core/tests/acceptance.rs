//! Acceptance suite: one PASS/FAIL line per criterion, with the measured
//! quantity, its tolerance and the wall-clock time.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpt_core::distributions::beta_kl_on_tape;
use vpt_core::metrics::sse_calibration;
use vpt_core::polya_tree::{compute_intervals, param_count, BranchProbs, Interval, Splits, YSource};
use vpt_core::{
    data::synth, train, Array, BetaDist, Checkpoint, DensityEstimator, DiagGaussian, FlowConfig, FlowModel,
    LearnableHistogram, PartitionMode, PolyaTreeModel, PriorKind, Standardization, SynthKind, Tape,
    TrainConfig, YMode,
};

use common::{brute_counts, enumerate_leaves, fd_max_rel_err, random_tree, simpson, tanh_sinh, unit};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn points<R: Rng>(rng: &mut R, n: usize, dims: usize) -> Array {
    Array::matrix(n, dims, (0..n * dims).map(|_| unit(rng)).collect()).unwrap()
}

fn tree_params(t: &PolyaTreeModel) -> Vec<Array> {
    t.parameters().into_iter().cloned().collect()
}

fn tree_with(t: &PolyaTreeModel, ps: &[Array]) -> PolyaTreeModel {
    let mut out = t.clone();
    for (d, s) in out.parameters_mut().into_iter().zip(ps) {
        *d = s.clone();
    }
    out
}

fn normalization() -> Outcome {
    let mut r = rng(101);
    let (mut worst_sum, mut worst_grid) = (0.0f64, 0.0f64);
    for k in 0..100 {
        let mode = PartitionMode::ALL[k % 3];
        let levels = 1 + k % 4;
        let dims = 1 + k % 3;
        let mut tree = random_tree(&mut r, levels, dims, mode, 3.0);
        if let Some(s) = tree.parameters_mut().into_iter().nth(1) {
            s.data_mut().iter_mut().for_each(|v| *v = r.random_range(-1.5..1.5));
        }
        for probs in [tree.mean_branch_probs(), tree.sample_branch_probs(&mut r)] {
            for d in 0..dims {
                let total: f64 = enumerate_leaves(&tree, d, &probs).iter().map(|l| l.2).sum();
                worst_sum = worst_sum.max((total - 1.0).abs());
            }
        }
        // 1-D grid integration of the first coordinate's marginal: a 1-D
        // tree sharing that dimension's parameters.
        let mut marginal = PolyaTreeModel::new(levels, 1, mode).unwrap();
        for (dst, src) in marginal.parameters_mut().into_iter().zip(tree.parameters()) {
            let per_dim = src.len() / dims;
            dst.data_mut().copy_from_slice(&src.data()[..per_dim]);
        }
        let probs = marginal.mean_branch_probs();
        let n = 100_000;
        let mass = (0..n)
            .map(|i| marginal.log_density_with(&[(i as f64 + 0.5) / n as f64], &probs).unwrap().exp())
            .sum::<f64>()
            / n as f64;
        worst_grid = worst_grid.max((mass - 1.0).abs());
    }
    outcome(
        worst_sum < 1e-12 && worst_grid < 1e-3,
        format!("max |Σ leaf p − 1| = {worst_sum:.1e} (< 1e-12), max |∫ p − 1| = {worst_grid:.1e} (< 1e-3)"),
    )
}

fn interval_oracle() -> Outcome {
    let got = compute_intervals(2, &Splits::PerLevel(vec![0.6, 0.5])).unwrap();
    let want: Vec<Interval> = [(0.0, 0.30), (0.30, 0.60), (0.60, 0.80), (0.80, 1.0)]
        .iter()
        .map(|&(lower, upper)| Interval { lower, upper })
        .collect();
    let shown: Vec<String> = got.iter().map(|iv| format!("({}, {}]", iv.lower, iv.upper)).collect();
    outcome(got == want, shown.join(" "))
}

fn parameter_accounting() -> Outcome {
    let table = [(6, 180, 756), (8, 240, 1008), (21, 630, 2646), (43, 1290, 5418), (63, 1890, 7938)];
    let mut wrong = Vec::new();
    for (dims, l4, l6) in table {
        for (levels, want) in [(4, l4), (6, l6)] {
            let got = param_count(levels, dims, PartitionMode::Dyadic);
            let stored = PolyaTreeModel::new(levels, dims, PartitionMode::Dyadic).unwrap().num_params();
            if got != want || stored != want {
                wrong.push(format!("D={dims} L={levels}: {got}/{stored} vs {want}"));
            }
        }
    }
    outcome(wrong.is_empty(), if wrong.is_empty() { "10/10 entries exact".into() } else { wrong.join("; ") })
}

fn conjugacy() -> Outcome {
    let mut r = rng(104);
    let mut count_mismatch = 0;
    let mut worst = 0.0f64;
    for k in 0..50 {
        let levels = 1 + k % 4;
        let dims = 1 + k % 3;
        let tree = random_tree(&mut r, levels, dims, PartitionMode::ALL[k % 3], 2.0);
        let n = r.random_range(1..=10_000);
        let x = points(&mut r, n, dims);
        let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).to_vec()).collect();
        let oracle = brute_counts(&tree, &rows);
        if tree.routing_counts(&x).unwrap() != oracle {
            count_mismatch += 1;
        }
        let prior = (r.random_range(0.5..2.0), r.random_range(0.5..2.0));
        let post = tree.conjugate_update(&x, prior, 1.0).unwrap();
        for (d, per_node) in oracle.iter().enumerate() {
            for (node, c) in per_node.iter().enumerate() {
                let (a0, a1) = post.alphas(d, node);
                let (e0, e1) = (prior.0 + c[0] as f64, prior.1 + c[1] as f64);
                worst = worst.max(((a0 - e0) / e0).abs()).max(((a1 - e1) / e1).abs());
            }
        }
    }
    // α is stored through softplus⁻¹, so the parameters carry one rounding.
    outcome(
        count_mismatch == 0 && worst < 1e-12,
        format!("count mismatches {count_mismatch}/50, max relative α error {worst:.1e} (< 1e-12)"),
    )
}

fn estimator_params(e: &DensityEstimator) -> Vec<Array> {
    e.flow.parameters().into_iter().chain(e.base.parameters()).cloned().collect()
}

fn estimator_with(e: &DensityEstimator, ps: &[Array]) -> DensityEstimator {
    let mut out = e.clone();
    let dst: Vec<&mut Array> = out.flow.parameters_mut().into_iter().chain(out.base.parameters_mut()).collect();
    for (d, s) in dst.into_iter().zip(ps) {
        *d = s.clone();
    }
    out
}

fn gradient_suite() -> Outcome {
    let mut r = rng(105);
    let h = 1e-5;
    let mut worst = [0.0f64; 5];
    for k in 0..100 {
        let mode = PartitionMode::ALL[k % 3];
        let levels = 1 + k % 4;
        let dims = 1 + k % 3;
        let tree = random_tree(&mut r, levels, dims, mode, 2.0);
        let x = points(&mut r, 6, dims);

        // Tree log density against the plain per-point evaluation.
        let tape = Tape::new();
        let vars = tree.bind(&tape);
        let g = tree.log_density_on_tape(&vars, &x, None).unwrap().sum().backward().unwrap();
        let analytic: Vec<Array> = vars.to_vec().into_iter().map(|v| g.get(v)).collect();
        let e = fd_max_rel_err(&tree_params(&tree), &analytic, h, 1e-6, |ps| {
            let t = tree_with(&tree, ps);
            (0..6).map(|i| t.log_density(x.row(i)).unwrap()).sum()
        });
        worst[0] = worst[0].max(e);

        // Joint posterior, posterior-mean branch probabilities.
        let tape = Tape::new();
        let vars = tree.bind(&tape);
        let g = tree
            .log_joint_posterior_on_tape(&vars, &x, YSource::PosteriorMean)
            .unwrap()
            .backward()
            .unwrap();
        let analytic: Vec<Array> = vars.to_vec().into_iter().map(|v| g.get(v)).collect();
        let e = fd_max_rel_err(&tree_params(&tree), &analytic, h, 1e-6, |ps| {
            let t = tree_with(&tree, ps);
            let probs: BranchProbs = t.mean_branch_probs();
            t.log_joint_posterior(&x, &probs).unwrap().total()
        });
        worst[1] = worst[1].max(e);

        // Histogram latent log density.
        let mut hist = LearnableHistogram::with_levels(levels, dims).unwrap();
        for p in hist.parameters_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = r.random_range(-1.5..1.5));
        }
        let tape = Tape::new();
        let hv = hist.bind(&tape);
        let g = hist.latent_log_density_on_tape(&hv, &x).unwrap().sum().backward().unwrap();
        let analytic = vec![g.get(hv.widths), g.get(hv.logits)];
        let hp: Vec<Array> = hist.parameters().into_iter().cloned().collect();
        let e = fd_max_rel_err(&hp, &analytic, h, 1e-6, |ps| {
            let mut t = hist.clone();
            for (d, s) in t.parameters_mut().into_iter().zip(ps) {
                *d = s.clone();
            }
            (0..6).map(|i| t.latent_log_density(x.row(i)).unwrap()).sum()
        });
        worst[2] = worst[2].max(e);

        // Flow log likelihood through every base.
        let kind = [PriorKind::Vpt, PriorKind::Gaussian, PriorKind::Logistic, PriorKind::Histogram][k % 4];
        let fdims = 2 + k % 2;
        let config = FlowConfig { coupling_layers: 2, hidden: vec![6, 5], ..FlowConfig::default() };
        let mut est = DensityEstimator::new(fdims, kind, levels, mode, config, false, &mut r).unwrap();
        for p in est.flow.parameters_mut().into_iter().chain(est.base.parameters_mut()) {
            p.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
        }
        let xs = Array::matrix(5, fdims, (0..5 * fdims).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        let tape = Tape::new();
        let bound = est.bind(&tape);
        let g = est.log_likelihood_on_tape(&tape, &bound, &xs).unwrap().sum().backward().unwrap();
        let analytic: Vec<Array> = bound.flow.iter().copied().chain(bound.base.to_vec()).map(|v| g.get(v)).collect();
        let e = fd_max_rel_err(&estimator_params(&est), &analytic, h, 1e-6, |ps| {
            estimator_with(&est, ps).log_likelihood(&xs).unwrap().iter().sum()
        });
        worst[3] = worst[3].max(e);

        // Beta KL against the closed form evaluated off the tape.
        let ab = Array::from_vec((0..8).map(|_| r.random_range(0.2..6.0)).collect());
        let (c, d) = (r.random_range(0.3..4.0), r.random_range(0.3..4.0));
        let split = |v: &Array| (Array::from_vec(v.data()[..4].to_vec()), Array::from_vec(v.data()[4..].to_vec()));
        let (a, b) = split(&ab);
        let tape = Tape::new();
        let (av, bv) = (tape.var(a.clone()), tape.var(b.clone()));
        let g = beta_kl_on_tape(av, bv, c, d).unwrap().sum().backward().unwrap();
        let prior = BetaDist::new(c, d).unwrap();
        let e = fd_max_rel_err(&[a, b], &[g.get(av), g.get(bv)], h, 1e-6, |ps| {
            ps[0].data()
                .iter()
                .zip(ps[1].data())
                .map(|(&p, &q)| BetaDist::new(p, q).unwrap().kl(&prior))
                .sum()
        });
        worst[4] = worst[4].max(e);
    }
    let names = ["tree density", "joint posterior", "histogram", "flow likelihood", "Beta KL"];
    let detail: Vec<String> = names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.1e}")).collect();
    outcome(worst.iter().all(|&w| w < 1e-4), format!("max relative error: {} (< 1e-4)", detail.join(", ")))
}

fn joint_posterior_consistency() -> Outcome {
    let mut r = rng(106);
    let mut worst_zero = 0.0f64;
    let mut worst_data = 0.0f64;
    for k in 0..30 {
        let levels = 1 + k % 5;
        let dims = 1 + k % 3;
        let uniform = PolyaTreeModel::new(levels, dims, PartitionMode::Dyadic).unwrap();
        let x = points(&mut r, 20, dims);
        let half = BranchProbs::constant(levels, dims, 0.5);
        for i in 0..20 {
            let one = Array::matrix(1, dims, x.row(i).to_vec()).unwrap();
            worst_zero = worst_zero.max(uniform.log_joint_posterior(&one, &half).unwrap().total().abs());
        }
        // With α = 1 everywhere the prior term vanishes for any Y.
        let mut tree = random_tree(&mut r, levels, dims, PartitionMode::ALL[k % 3], 2.0);
        tree.fill_alphas(1.0, 1.0).unwrap();
        let probs = tree.sample_branch_probs(&mut r);
        let jp = tree.log_joint_posterior(&x, &probs).unwrap();
        let direct: f64 = (0..20).map(|i| tree.log_density_with(x.row(i), &probs).unwrap()).sum();
        worst_data = worst_data.max((jp.data_term - direct).abs()).max(jp.prior_term.abs());
    }
    outcome(
        worst_zero < 1e-12 && worst_data < 1e-12,
        format!("uniform per-point value {worst_zero:.1e}, data term vs Σ log density {worst_data:.1e} (< 1e-12)"),
    )
}

const SYNTH_N: usize = 20_000;
const SYNTH_SEED: u64 = 7;

/// Shared protocol of the synthetic comparisons: one pair of coupling
/// layers (a single transform of every coordinate) with 2×50 tanh hidden
/// units, identical for every prior.
fn synthetic_config(prior: PriorKind, levels: usize) -> TrainConfig {
    TrainConfig {
        prior,
        levels,
        flow: FlowConfig { coupling_layers: 2, hidden: vec![50, 50], ..FlowConfig::default() },
        epochs: 300,
        batch_size: 256,
        lr_flow: 3e-3,
        lr_prior: 0.1,
        smooth_base: prior == PriorKind::Vpt,
        seed: 0,
        ..TrainConfig::default()
    }
}

fn synthetic_nll(kind: SynthKind, prior: PriorKind, levels: usize) -> f64 {
    let data = synth(kind, SYNTH_N, &mut rng(SYNTH_SEED)).unwrap();
    train(&synthetic_config(prior, levels), &data).unwrap().1.test_nll
}

fn synthetic_ordering() -> Outcome {
    let mut pass = true;
    let mut lines = Vec::new();
    for kind in SynthKind::ALL {
        let gauss = synthetic_nll(kind, PriorKind::Gaussian, 3);
        let l2 = synthetic_nll(kind, PriorKind::Vpt, 2);
        let l3 = synthetic_nll(kind, PriorKind::Vpt, 3);
        let ok = l3 <= gauss - 0.05 && l3 <= l2 + 0.02;
        pass &= ok;
        lines.push(format!(
            "{}: gaussian {gauss:.4}, L2 {l2:.4}, L3 {l3:.4} [{}]",
            kind.name(),
            if ok { "ok" } else { "violated" }
        ));
    }
    outcome(pass, format!("{} (need L3 ≤ gaussian − 0.05 and L3 ≤ L2 + 0.02)", lines.join("; ")))
}

fn histogram_direction() -> Outcome {
    let vpt = synthetic_nll(SynthKind::Checkerboard, PriorKind::Vpt, 4);
    let lh = synthetic_nll(SynthKind::Checkerboard, PriorKind::Histogram, 4);
    outcome(vpt <= lh + 0.05, format!("checkerboard test NLL: VPT L4 {vpt:.4}, histogram K=16 {lh:.4} (need VPT ≤ LH + 0.05)"))
}

fn log_norm(a: f64, b: f64) -> f64 {
    tanh_sinh(|t, s| ((a - 1.0) * t.ln() + (b - 1.0) * s.ln()).exp()).ln()
}

fn kl_formulas() -> Outcome {
    let mut r = rng(109);
    let (mut beta_err, mut gauss_err, mut same) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let p: [f64; 4] = std::array::from_fn(|_| r.random_range(0.5..6.0));
        let (zp, zq) = (log_norm(p[0], p[1]), log_norm(p[2], p[3]));
        let oracle = tanh_sinh(|t, s| {
            let lp = (p[0] - 1.0) * t.ln() + (p[1] - 1.0) * s.ln() - zp;
            let lq = (p[2] - 1.0) * t.ln() + (p[3] - 1.0) * s.ln() - zq;
            lp.exp() * (lp - lq)
        });
        let a = BetaDist::new(p[0], p[1]).unwrap();
        beta_err = beta_err.max((a.kl(&BetaDist::new(p[2], p[3]).unwrap()) - oracle).abs());
        same = same.max(a.kl(&a).abs());

        let dims = r.random_range(1..4);
        let m: Vec<[f64; 4]> = (0..dims)
            .map(|_| [r.random_range(-2.0..2.0), r.random_range(0.2..3.0), r.random_range(-2.0..2.0), r.random_range(0.2..3.0)])
            .collect();
        let quad: f64 = m
            .iter()
            .map(|&[m1, v1, m2, v2]| {
                let lp = |x: f64, m: f64, v: f64| -0.5 * ((x - m).powi(2) / v + (2.0 * std::f64::consts::PI * v).ln());
                let s = v1.sqrt();
                simpson(|x| lp(x, m1, v1).exp() * (lp(x, m1, v1) - lp(x, m2, v2)), m1 - 14.0 * s, m1 + 14.0 * s, 20_000)
            })
            .sum();
        let gp = DiagGaussian::new(m.iter().map(|v| v[0]).collect(), m.iter().map(|v| v[1]).collect()).unwrap();
        let gq = DiagGaussian::new(m.iter().map(|v| v[2]).collect(), m.iter().map(|v| v[3]).collect()).unwrap();
        gauss_err = gauss_err.max((gp.kl(&gq).unwrap() - quad).abs());
        same = same.max(gp.kl(&gp).unwrap().abs());
    }
    outcome(
        beta_err < 1e-6 && gauss_err < 1e-6 && same < 1e-12,
        format!("Beta max error {beta_err:.1e}, Gaussian max error {gauss_err:.1e} (< 1e-6), identical {same:.1e} (< 1e-12)"),
    )
}

fn calibration() -> Outcome {
    let data = synth(SynthKind::EightGaussians, 5000, &mut rng(110)).unwrap();
    let config = TrainConfig { epochs: 40, ..synthetic_config(PriorKind::Vpt, 3) };
    let (model, _) = train(&config, &data).unwrap();
    let mut r = rng(111);
    let own = model.sample(&mut r, 10_000, YMode::PosteriorMean).unwrap();
    let sse = sse_calibration(&model, &own, &mut r).unwrap();
    outcome((0.9..=1.1).contains(&sse), format!("SSE on 10^4 self-sampled points = {sse:.4} (in [0.9, 1.1])"))
}

fn round_trips() -> Outcome {
    let mut r = rng(112);
    let mut worst = 0.0f64;
    for dims in [1, 2, 3, 6] {
        let mut f = FlowModel::new(dims, FlowConfig::default(), &mut r).unwrap();
        for p in f.parameters_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.3..0.3));
        }
        let x = Array::matrix(1000, dims, (0..1000 * dims).map(|_| r.random_range(-3.0..3.0)).collect()).unwrap();
        let back = f.inverse(&f.forward(&x).unwrap().0).unwrap();
        worst = worst.max(x.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }

    let data = synth(SynthKind::TwoSpirals, 2000, &mut rng(113)).unwrap();
    let config = TrainConfig {
        epochs: 5,
        flow: FlowConfig { coupling_layers: 2, hidden: vec![16, 16], ..FlowConfig::default() },
        ..synthetic_config(PriorKind::Vpt, 3)
    };
    let (m1, r1) = train(&config, &data).unwrap();
    let (m2, r2) = train(&config, &data).unwrap();
    let seeded = m1 == m2 && r1.without_timing() == r2.without_timing();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    Checkpoint::new(config, m1.clone(), Standardization::identity(2), Some(&r1)).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap().model;
    let test = data.test();
    let bits = |m: &DensityEstimator| -> Vec<u64> { m.log_likelihood(&test).unwrap().iter().map(|v| v.to_bits()).collect() };
    let saved = back == m1 && bits(&back) == bits(&m1);
    outcome(
        worst < 1e-9 && seeded && saved,
        format!("inverse∘forward max error {worst:.1e} (< 1e-9), seeded training identical: {seeded}, checkpoint bit-identical: {saved}"),
    )
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 11] = [
        ("normalization", Duration::from_secs(10), normalization),
        ("interval oracle", Duration::MAX, interval_oracle),
        ("parameter accounting", Duration::MAX, parameter_accounting),
        ("conjugacy", Duration::from_secs(30), conjugacy),
        ("gradient suite", Duration::from_secs(60), gradient_suite),
        ("joint posterior consistency", Duration::MAX, joint_posterior_consistency),
        ("synthetic ordering", Duration::from_secs(15 * 60), synthetic_ordering),
        ("histogram comparison", Duration::from_secs(10 * 60), histogram_direction),
        ("KL formulas", Duration::MAX, kl_formulas),
        ("calibration", Duration::MAX, calibration),
        ("round trips and determinism", Duration::MAX, round_trips),
    ];
    let mut failed = 0;
    for (i, (name, limit, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let out = run();
        let took = start.elapsed();
        let in_time = took < *limit;
        let pass = out.pass && in_time;
        failed += usize::from(!pass);
        let budget = if *limit == Duration::MAX { String::new() } else { format!(" / limit {}s", limit.as_secs()) };
        println!(
            "{} {:>2}. {name}: {} [{:.1}s{budget}{}]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            out.detail,
            took.as_secs_f64(),
            if in_time { "" } else { ", over time limit" }
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
