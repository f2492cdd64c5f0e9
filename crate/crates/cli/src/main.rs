//! `vpt`: train, evaluate and inspect flow density estimators from the
//! command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use vpt_core::data::{parse_delimited, synth, DEFAULT_FRACTIONS};
use vpt_core::metrics::{bits_per_dim, density_grid, sse_calibration, write_grid, write_rows};
use vpt_core::{
    train::train_with, Array, Base, Checkpoint, Dataset, Error, FlowConfig, PartitionMode, PriorKind, Result,
    SynthKind, TrainConfig, YMode,
};

#[derive(Parser)]
#[command(name = "vpt", version, about = "Flow density estimation with variational Pólya tree priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an estimator and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Draw samples from a checkpoint, in the original data units.
    Sample(SampleArgs),
    /// Density on a regular 2-D lattice, as `x,y,density` rows.
    Grid(GridArgs),
    /// Per-dimension variance of the deepest tree nodes.
    Variance(VarianceArgs),
}

#[derive(Args)]
struct DataArgs {
    /// A delimited file, or `synthetic:NAME` with NAME one of eight_gaussians,
    /// two_spirals, checkerboard.
    #[arg(long)]
    data: String,
    /// Field delimiter for file input.
    #[arg(long, default_value_t = ',')]
    delimiter: char,
    /// The file's first row is a header.
    #[arg(long)]
    header: bool,
    /// Number of points drawn for synthetic data.
    #[arg(long, default_value_t = 20_000)]
    synthetic_n: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 4)]
    levels: usize,
    #[arg(long, default_value = "vpt", value_parser = parse_with::<PriorKind>)]
    prior: PriorKind,
    #[arg(long, default_value = "dyadic", value_parser = parse_with::<PartitionMode>)]
    mode: PartitionMode,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr_flow: f64,
    #[arg(long, default_value_t = 0.1)]
    lr_prior: f64,
    /// Seeds data synthesis, the split shuffle and training.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch JSON lines; defaults to the checkpoint path with `.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Update tree nodes by minibatch conjugate counting instead of gradients.
    #[arg(long)]
    conjugate: bool,
    #[arg(long, default_value_t = 0.0)]
    kl_weight: f64,
    /// Train against the interpolated tree density.
    #[arg(long)]
    smooth_base: bool,
    #[arg(long, default_value_t = 4)]
    flow_layers: usize,
    /// Hidden widths of each coupling network, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [50usize, 50])]
    hidden: Vec<usize>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Nll,
    Bpd,
    Sse,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rows {
    All,
    Train,
    Validation,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = Metric::Nll)]
    metric: Metric,
    /// Which rows to score. Split assignment is reproduced from `--seed`.
    #[arg(long, value_enum, default_value_t = Rows::All)]
    rows: Rows,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Draw tree branch probabilities from their Beta posteriors instead of
    /// using the means.
    #[arg(long)]
    sampled_y: bool,
    /// Output path; standard output if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 100)]
    res: usize,
    /// `x_lo,x_hi,y_lo,y_hi` in the model's (standardized) coordinates.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true,
          default_values_t = [-4.0, 4.0, -4.0, 4.0])]
    bounds: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VarianceArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_with<T: std::str::FromStr<Err = String>>(s: &str) -> std::result::Result<T, String> {
    s.parse()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Grid(a) => grid_cmd(a),
        Command::Variance(a) => variance_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vpt: {e}");
            match e {
                Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn delimiter(c: char) -> Result<u8> {
    u8::try_from(c).map_err(|_| Error::Usage(format!("delimiter '{c}' is not a single byte")))
}

fn load_data(args: &DataArgs, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match args.data.strip_prefix("synthetic:") {
        Some(name) => synth(name.parse::<SynthKind>()?, args.synthetic_n, &mut rng),
        None => vpt_core::data::load_delimited(
            Path::new(&args.data),
            delimiter(args.delimiter)?,
            args.header,
            DEFAULT_FRACTIONS,
            &mut rng,
        ),
    }
}

/// Data as the checkpoint's model sees it: synthetic data unchanged, file
/// data with the training-time columns dropped and z-scored.
fn load_for_model(args: &DataArgs, ckpt: &Checkpoint, seed: u64) -> Result<Dataset> {
    if args.data.starts_with("synthetic:") {
        return load_data(args, seed);
    }
    let raw = parse_delimited(File::open(&args.data)?, delimiter(args.delimiter)?, args.header)?;
    let (n, d) = raw.dims2()?;
    let std = &ckpt.standardization;
    if d != std.dims() + std.dropped.len() {
        return Err(Error::Contract(format!(
            "data has {d} columns, model was trained on {}",
            std.dims() + std.dropped.len()
        )));
    }
    let kept: Vec<f64> = raw
        .data()
        .iter()
        .enumerate()
        .filter(|(k, _)| !std.dropped.contains(&(k % d)))
        .map(|(_, &v)| v)
        .collect();
    let x = std.standardize(&Array::matrix(n, std.dims(), kept)?)?;
    let mut ds = Dataset::from_points(x, DEFAULT_FRACTIONS, &mut ChaCha8Rng::seed_from_u64(seed))?;
    ds.standardization = std.clone();
    Ok(ds)
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut config = TrainConfig {
        prior: a.prior,
        levels: a.levels,
        mode: a.mode,
        flow: FlowConfig {
            coupling_layers: a.flow_layers,
            hidden: a.hidden.clone(),
            ..FlowConfig::default()
        },
        epochs: a.epochs,
        batch_size: a.batch,
        lr_flow: a.lr_flow,
        lr_prior: a.lr_prior,
        seed: a.seed,
        conjugate: a.conjugate,
        kl_weight: a.kl_weight,
        smooth_base: a.smooth_base,
        ..TrainConfig::default()
    };
    if let Some(p) = a.patience {
        config.patience = p;
    }
    config.validate().map_err(|e| match e {
        Error::Contract(m) | Error::Domain(m) => Error::Usage(m),
        other => other,
    })?;
    let data = load_data(&a.data, a.seed)?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("log.jsonl"));
    let mut log = BufWriter::new(File::create(&log_path)?);
    let mut log_err = None;
    let (model, report) = train_with(&config, &data, |rec| {
        let line = serde_json::to_string(rec).expect("epoch records serialize");
        eprintln!("{line}");
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    log.flush()?;
    println!("prior parameters: {}", report.prior_params);
    println!("flow parameters: {}", report.flow_params);
    println!(
        "{}",
        json!({
            "best_epoch": report.best_epoch,
            "best_validation_nll": report.best_validation_nll,
            "test_nll": report.test_nll,
            "test_bpd": report.test_bpd,
        })
    );
    Checkpoint::new(config, model, data.standardization.clone(), Some(&report)).save(&a.out)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.model)?;
    let ds = load_for_model(&a.data, &ckpt, a.seed)?;
    let x = match a.rows {
        Rows::All => ds.points.clone(),
        Rows::Train => ds.train(),
        Rows::Validation => ds.validation(),
        Rows::Test => ds.test(),
    };
    let (n, d) = x.dims2()?;
    if d != ckpt.model.dims() {
        return Err(Error::Contract(format!("data has {d} columns, model expects {}", ckpt.model.dims())));
    }
    let (name, value) = match a.metric {
        Metric::Nll => ("nll", -ckpt.model.mean_log_likelihood(&x)?),
        Metric::Bpd => ("bpd", bits_per_dim(&ckpt.model, &x)?),
        Metric::Sse => ("sse", sse_calibration(&ckpt.model, &x, &mut ChaCha8Rng::seed_from_u64(a.seed))?),
    };
    println!("{}", json!({ "metric": name, "value": value, "rows": n }));
    Ok(())
}

fn sample_cmd(a: SampleArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.model)?;
    let y_mode = if a.sampled_y { YMode::Sampled } else { YMode::PosteriorMean };
    let x = ckpt.model.sample(&mut ChaCha8Rng::seed_from_u64(a.seed), a.n, y_mode)?;
    let x = ckpt.standardization.destandardize(&x)?;
    let mut out = output(&a.out)?;
    write_rows(&mut out, &x)?;
    out.flush()?;
    Ok(())
}

fn grid_cmd(a: GridArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.model)?;
    let b = &a.bounds;
    if b.len() != 4 {
        return Err(Error::Usage(format!("--bounds takes 4 values, got {}", b.len())));
    }
    let grid = density_grid(&ckpt.model, [(b[0], b[1]), (b[2], b[3])], a.res)?;
    let mut out = output(&a.out)?;
    write_grid(&mut out, &grid)?;
    out.flush()?;
    Ok(())
}

fn variance_cmd(a: VarianceArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.model)?;
    let Base::PolyaTree(tree) = &ckpt.model.base else {
        return Err(Error::Usage("variance maps need a model with a vpt prior".into()));
    };
    let mut out = output(&a.out)?;
    writeln!(out, "dim,variance")?;
    for (d, v) in tree.variance_map().iter().enumerate() {
        writeln!(out, "{d},{v:?}")?;
    }
    out.flush()?;
    Ok(())
}
