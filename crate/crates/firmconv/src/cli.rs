//! Command-line surface: the whole pipeline as batch subcommands.
//!
//! Every run ends with one machine-readable result line on stdout,
//! `{"schema_version": 1, "command": ..., "status": "ok" | "error", ...}`,
//! and exits 0 on success, 1 on validation failures (bad flags, bad shapes,
//! unsafe step sizes), 2 on runtime failures (IO, iteration caps,
//! divergence). Human-readable tables go to stdout above the result line
//! and can be silenced by setting `FIRMCONV_QUIET`, the only environment
//! variable consulted. All numerics are controlled by flags and config
//! files, so identical invocations give identical outputs.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::algebra::Geometry;
use crate::data::{
    add_noise, gauss_kernel, gen_images, gen_pwc, load_dataset, psnr_image, psnr_signal, read_pgm,
    save_dataset, write_pgm,
};
use crate::error::{ensure, Error, Result};
use crate::network::Network;
use crate::pnp::{
    admm_pnp, averagedness_profile, divergence_example, estimate_averagedness, fbs_pnp,
    resolve_reference, AnchoredDenoiser, ChainDenoiser, DataTerm, EstimatorConfig, Operator,
    PnPConfig, ReferenceSource, ResidualOp, DEFAULT_REFERENCE_SIGMA,
};
use crate::pnp::estimator::GRID_STEP;
use crate::serial;
use crate::training::{
    init_full_network, init_limited_network, project_filters, Arch, TrainConfig, TrainMode,
    train_full, train_limited, PROJECT_MAX_ITERS,
};

const RESULT_SCHEMA_VERSION: u32 = 1;

/// On-disk training configuration: the architecture and optimizer settings
/// as one JSON document. The `train` block may be omitted entirely, in which
/// case every optimizer setting takes its default.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSpec {
    pub arch: Arch,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Parser)]
#[command(
    name = "firmconv",
    version,
    about = "Orthogonal convolutional chains: training, projection, denoising, and plug-and-play solvers"
)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores)
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Also write the result JSON line to this file
    #[arg(long, global = true)]
    result: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a clean/noisy dataset directory
    GenData(GenDataArgs),
    /// Train a denoising chain and save the model
    Train(TrainArgs),
    /// Project every layer of a model onto the orthogonality manifold
    Project(ProjectArgs),
    /// Run a trained model on one signal or image
    Denoise(DenoiseArgs),
    /// Solve a denoising or deblurring problem with a plug-and-play scheme
    Pnp(PnpArgs),
    /// Certify the averagedness constant of a model's chain empirically
    EstimateAveragedness(EstimateArgs),
    /// Print per-layer orthogonality residuals of a model
    CheckOrth(CheckOrthArgs),
    /// Run the divergence construction for alternating plug-and-play
    Counterexample(CounterexampleArgs),
    /// Tabulate PSNR between two directories of outputs and references
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKindArg {
    /// 1-d piecewise-constant signals
    Pwc,
    /// piecewise-smooth square images in [0, 1]
    Image,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    kind: DataKindArg,
    /// Number of samples
    #[arg(long)]
    n: usize,
    /// Signal length, or image side length
    #[arg(long)]
    m: usize,
    /// Noise standard deviation
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset directory to create
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    /// Full-length filters updated on the manifold
    Full,
    /// Tap-limited filters with a penalty, projected afterwards
    Limited,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// JSON file holding {"arch": ..., "train": ...}
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory from gen-data
    #[arg(long)]
    data: PathBuf,
    /// Model file to write
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch records as JSON lines
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    model: PathBuf,
    /// Orthogonality penalty weight of the projection objective
    #[arg(long, default_value_t = 1e4)]
    lambda: f64,
    /// Model file to write
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DenoiseArgs {
    #[arg(long)]
    model: PathBuf,
    /// Input sample: a CSV signal or a PGM image
    #[arg(long = "in")]
    input: PathBuf,
    /// Output file, same format as the input
    #[arg(long)]
    out: PathBuf,
    /// Re-plant the windowed filters on this longer period first
    #[arg(long)]
    extend: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    /// Forward-backward splitting
    Fbs,
    /// Alternating direction scheme
    Admm,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Denoise,
    Deblur,
}

#[derive(Args)]
struct PnpArgs {
    #[arg(long, value_enum)]
    solver: SolverArg,
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long)]
    model: PathBuf,
    /// Observation: a CSV signal or a PGM image
    #[arg(long = "in")]
    input: PathBuf,
    /// Restored output, same format as the input
    #[arg(long)]
    out: PathBuf,
    /// Step size (fbs) or coupling weight (admm)
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    /// Override the model's denoiser scale
    #[arg(long)]
    gamma: Option<f64>,
    /// Anchor for the averaged denoiser: none, smooth, second-pass, or a
    /// CSV file with the reference signal
    #[arg(long, default_value = "none")]
    oracle: String,
    /// Averagedness constant of the model's chain; required unless the
    /// oracle is none
    #[arg(long)]
    t: Option<f64>,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    /// Stop once the iterate moves less than this
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Width of the Gaussian blur kernel (deblur task)
    #[arg(long, default_value_t = 1.5)]
    tau: f64,
    /// Smoothing width for --oracle smooth
    #[arg(long, default_value_t = DEFAULT_REFERENCE_SIGMA)]
    smooth_sigma: f64,
    /// Skip the step-size safety check eta * L < 2
    #[arg(long = "unsafe")]
    unsafe_step: bool,
    /// Per-iteration trace CSV
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Random probe points
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Spacing of the candidate grid over [1/2, 1]
    #[arg(long, default_value_t = GRID_STEP)]
    grid: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sweep the whole grid instead of stopping at the first pass
    #[arg(long)]
    profile: bool,
}

#[derive(Args)]
struct CheckOrthArgs {
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct CounterexampleArgs {
    /// Averagedness constant of the adversarial denoiser, in (1/2, 1]
    #[arg(long, default_value_t = 0.75)]
    t: f64,
    /// Data-term parameter in (0, 1)
    #[arg(long, default_value_t = 0.9)]
    a2: f64,
    #[arg(long, default_value_t = 20)]
    iters: usize,
    /// Per-iteration trace CSV
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted outputs (CSV signals and/or PGM images)
    #[arg(long)]
    pred: PathBuf,
    /// Directory of references with matching file names
    #[arg(long)]
    truth: PathBuf,
    /// Write the PSNR table CSV here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct ResultRecord {
    schema_version: u32,
    command: String,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    exit_code: Option<i32>,
}

fn quiet() -> bool {
    std::env::var_os("FIRMCONV_QUIET").is_some()
}

fn emit(record: &ResultRecord, file: Option<&Path>) {
    match serial::to_json_string(record) {
        Ok(line) => {
            println!("{line}");
            if let Some(path) = file {
                if let Err(e) = std::fs::write(path, format!("{line}\n")) {
                    eprintln!("could not write result file {path:?}: {e}");
                }
            }
        }
        Err(e) => eprintln!("could not serialize the result record: {e}"),
    }
}

/// Entry point used by the binary: parses real argv and process-exits with
/// the code this returns.
pub fn run_cli() -> i32 {
    dispatch(std::env::args_os())
}

/// Parses and runs one invocation; returns the process exit code. Split
/// from [`run_cli`] so tests can drive the full surface in-process.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            if code != 0 {
                emit(
                    &ResultRecord {
                        schema_version: RESULT_SCHEMA_VERSION,
                        command: "parse".to_string(),
                        status: "error",
                        data: None,
                        error: Some("invalid arguments".to_string()),
                        exit_code: Some(code),
                    },
                    None,
                );
            }
            return code;
        }
    };

    if let Some(w) = cli.workers {
        if w == 0 {
            eprintln!("error: --workers must be at least 1");
            emit(
                &ResultRecord {
                    schema_version: RESULT_SCHEMA_VERSION,
                    command: command_name(&cli.command).to_string(),
                    status: "error",
                    data: None,
                    error: Some("validation: --workers must be at least 1".to_string()),
                    exit_code: Some(1),
                },
                cli.result.as_deref(),
            );
            return 1;
        }
        // a pool set up by an earlier call in this process wins; determinism
        // does not depend on the worker count
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global();
    }

    let name = command_name(&cli.command).to_string();
    match run_command(cli.command) {
        Ok(data) => {
            emit(
                &ResultRecord {
                    schema_version: RESULT_SCHEMA_VERSION,
                    command: name,
                    status: "ok",
                    data: Some(data),
                    error: None,
                    exit_code: None,
                },
                cli.result.as_deref(),
            );
            0
        }
        Err(err) => {
            let code = err.exit_code();
            eprintln!("error: {err}");
            emit(
                &ResultRecord {
                    schema_version: RESULT_SCHEMA_VERSION,
                    command: name,
                    status: "error",
                    data: None,
                    error: Some(err.to_string()),
                    exit_code: Some(code),
                },
                cli.result.as_deref(),
            );
            code
        }
    }
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::GenData(_) => "gen-data",
        Command::Train(_) => "train",
        Command::Project(_) => "project",
        Command::Denoise(_) => "denoise",
        Command::Pnp(_) => "pnp",
        Command::EstimateAveragedness(_) => "estimate-averagedness",
        Command::CheckOrth(_) => "check-orth",
        Command::Counterexample(_) => "counterexample",
        Command::Eval(_) => "eval",
    }
}

fn run_command(cmd: Command) -> Result<serde_json::Value> {
    match cmd {
        Command::GenData(a) => run_gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Project(a) => run_project(a),
        Command::Denoise(a) => run_denoise(a),
        Command::Pnp(a) => run_pnp(a),
        Command::EstimateAveragedness(a) => run_estimate(a),
        Command::CheckOrth(a) => run_check_orth(a),
        Command::Counterexample(a) => run_counterexample(a),
        Command::Eval(a) => run_eval(a),
    }
}

/// A sample read from disk, remembering its format so outputs match.
enum SampleFile {
    Signal(Vec<f64>),
    Image { data: Vec<f64>, d1: usize, d2: usize },
}

impl SampleFile {
    fn data(&self) -> &[f64] {
        match self {
            SampleFile::Signal(x) => x,
            SampleFile::Image { data, .. } => data,
        }
    }

    fn image_dims(&self) -> Option<(usize, usize)> {
        match self {
            SampleFile::Signal(_) => None,
            SampleFile::Image { d1, d2, .. } => Some((*d1, *d2)),
        }
    }
}

fn read_sample(path: &Path) -> Result<SampleFile> {
    let is_pgm = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("pgm"))
        .unwrap_or(false);
    if is_pgm {
        let (data, d1, d2) = read_pgm(path)?;
        return Ok(SampleFile::Image { data, d1, d2 });
    }
    let rows = serial::read_csv(path)?;
    ensure!(!rows.is_empty(), "sample file {path:?} is empty");
    if rows.len() == 1 {
        return Ok(SampleFile::Signal(rows.into_iter().next().expect("one row")));
    }
    let mut out = Vec::with_capacity(rows.len());
    for row in &rows {
        ensure!(
            row.len() == 1,
            "sample file {path:?} must hold a single row or a single column"
        );
        out.push(row[0]);
    }
    Ok(SampleFile::Signal(out))
}

fn write_sample(path: &Path, data: &[f64], like: &SampleFile) -> Result<()> {
    match like {
        SampleFile::Signal(_) => serial::write_csv(path, &[data.to_vec()]),
        SampleFile::Image { d1, d2, .. } => write_pgm(path, data, *d1, *d2),
    }
}

fn run_gen_data(a: GenDataArgs) -> Result<serde_json::Value> {
    let clean = match a.kind {
        DataKindArg::Pwc => gen_pwc(a.n, a.m, a.seed)?,
        DataKindArg::Image => gen_images(a.n, a.m, a.m, a.seed)?,
    };
    let dataset = add_noise(&clean, a.sigma, a.seed)?;
    save_dataset(&a.out, &dataset)?;
    Ok(json!({
        "kind": match a.kind { DataKindArg::Pwc => "pwc", DataKindArg::Image => "image" },
        "count": dataset.len(),
        "m": a.m,
        "sigma": a.sigma,
        "seed": a.seed,
        "dir": a.out,
    }))
}

fn run_train(a: TrainArgs) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(&a.config)?;
    let mut spec: TrainSpec = serde_json::from_str(&text)?;
    spec.train.mode = match a.mode {
        ModeArg::Full => TrainMode::FullFilters,
        ModeArg::Limited => TrainMode::LimitedFilters,
    };
    let data = load_dataset(&a.data)?;
    let (net, report) = match spec.train.mode {
        TrainMode::FullFilters => {
            let net0 = init_full_network(&spec.arch, spec.train.seed)?;
            train_full(&net0, &data, &spec.train)?
        }
        TrainMode::LimitedFilters => {
            let net0 = init_limited_network(&spec.arch, spec.train.seed)?;
            train_limited(&net0, &data, &spec.train)?
        }
    };
    net.save_checkpoint(&a.out)?;
    if let Some(path) = &a.report {
        let file = std::fs::File::create(path)?;
        report.write_jsonl(std::io::BufWriter::new(file))?;
    }
    Ok(json!({
        "model": a.out,
        "epochs": report.epochs.len(),
        "final_psnr": report.final_psnr,
        "last_loss": report.epochs.last().map(|r| r.loss),
        "projection": serde_json::to_value(&report.projection)?,
        "report": a.report,
    }))
}

fn run_project(a: ProjectArgs) -> Result<serde_json::Value> {
    let mut net = Network::load_checkpoint(&a.model)?;
    let mut layers = Vec::new();
    for (k, layer) in net.layers_mut().iter_mut().enumerate() {
        let before = layer.gram_residual();
        let out = project_filters(layer.bank(), a.lambda, PROJECT_MAX_ITERS)?;
        layers.push(json!({
            "layer": k,
            "iterations": out.iterations,
            "converged": out.converged,
            "gram_residual_before": before,
            "gram_residual_after": out.gram_residual,
        }));
        *layer.bank_mut() = out.bank;
    }
    net.save_checkpoint(&a.out)?;
    Ok(json!({
        "model": a.out,
        "lambda": a.lambda,
        "layers": layers,
    }))
}

fn run_denoise(a: DenoiseArgs) -> Result<serde_json::Value> {
    let mut net = Network::load_checkpoint(&a.model)?;
    if let Some(period) = a.extend {
        net = net.extend(period)?;
    }
    let sample = read_sample(&a.input)?;
    ensure!(
        sample.data().len() == net.signal_len(),
        "input holds {} values but the model expects {}",
        sample.data().len(),
        net.signal_len()
    );
    let out = net.denoise(sample.data())?;
    write_sample(&a.out, &out, &sample)?;
    Ok(json!({
        "in": a.input,
        "out": a.out,
        "len": out.len(),
        "extended": a.extend,
    }))
}

fn run_pnp(a: PnpArgs) -> Result<serde_json::Value> {
    let mut net = Network::load_checkpoint(&a.model)?;
    if let Some(g) = a.gamma {
        net.set_gamma(g)?;
    }
    let sample = read_sample(&a.input)?;
    let obs = sample.data().to_vec();
    ensure!(
        obs.len() == net.signal_len(),
        "observation holds {} values but the model expects {}",
        obs.len(),
        net.signal_len()
    );

    let data = match a.task {
        TaskArg::Denoise => DataTerm::quadratic_identity(obs.clone())?,
        TaskArg::Deblur => {
            let (d1, d2) = match (sample.image_dims(), net.geometry()) {
                (Some(dims), _) => dims,
                (None, Geometry::TwoD { m }) => (m, m),
                (None, Geometry::OneD { .. }) => {
                    return Err(Error::validation(
                        "deblurring uses a 2-d kernel; the model and input must be images",
                    ))
                }
            };
            DataTerm::quadratic_blur(obs.clone(), gauss_kernel(a.tau)?, d1, d2, false)?
        }
    };

    let chain;
    let anchored;
    let denoiser: &dyn Operator = if a.oracle == "none" {
        chain = ChainDenoiser::new(&net);
        &chain
    } else {
        let source = match a.oracle.as_str() {
            "smooth" => ReferenceSource::Smoothed {
                sigma: a.smooth_sigma,
            },
            "second-pass" => ReferenceSource::SecondPass,
            path => ReferenceSource::File(PathBuf::from(path)),
        };
        let x_ref = resolve_reference(&source, &net, &obs)?;
        let t = a
            .t
            .ok_or_else(|| Error::validation("an anchored reference needs --t"))?;
        anchored = AnchoredDenoiser::new(&net, x_ref, t)?;
        &anchored
    };

    let cfg = PnPConfig {
        eta: a.eta,
        max_iters: a.max_iters,
        stop_tol: a.tol,
        unsafe_step: a.unsafe_step,
        ..PnPConfig::default()
    };
    let (x, trace) = match a.solver {
        SolverArg::Fbs => fbs_pnp(&data, denoiser, &obs, &cfg)?,
        SolverArg::Admm => admm_pnp(&data, denoiser, &obs, &cfg)?,
    };
    write_sample(&a.out, &x, &sample)?;
    if let Some(path) = &a.trace {
        trace.write_csv(path)?;
    }
    Ok(json!({
        "solver": match a.solver { SolverArg::Fbs => "fbs", SolverArg::Admm => "admm" },
        "task": match a.task { TaskArg::Denoise => "denoise", TaskArg::Deblur => "deblur" },
        "iterations": trace.iterations,
        "converged": trace.converged,
        "diverged": trace.diverged,
        "final_residual": trace.residuals.last(),
        "final_objective": trace.objectives.last(),
        "out": a.out,
        "trace": a.trace,
    }))
}

fn run_estimate(a: EstimateArgs) -> Result<serde_json::Value> {
    let net = Network::load_checkpoint(&a.model)?;
    let op = ResidualOp::new(&net);
    let cfg = EstimatorConfig {
        samples: a.samples,
        seed: a.seed,
        grid_step: a.grid,
        ..EstimatorConfig::default()
    };
    let estimate = estimate_averagedness(&op, net.signal_len(), &cfg)?;
    let profile = if a.profile {
        Some(averagedness_profile(&op, net.signal_len(), &cfg)?)
    } else {
        None
    };
    Ok(json!({
        "model": a.model,
        "samples": a.samples,
        "grid": a.grid,
        "seed": a.seed,
        "estimate": serde_json::to_value(&estimate)?,
        "profile": serde_json::to_value(&profile)?,
    }))
}

fn run_check_orth(a: CheckOrthArgs) -> Result<serde_json::Value> {
    let net = Network::load_checkpoint(&a.model)?;
    let mut layers = Vec::new();
    for (k, layer) in net.layers().iter().enumerate() {
        // residuals are defined on the tall orientation of each bank
        let gram = layer.gram_residual();
        let tap = if layer.bank().m1() >= layer.bank().m2() {
            layer.bank().filter_orthogonality_residual()
        } else {
            layer.bank().transpose().filter_orthogonality_residual()
        };
        if !quiet() {
            match &tap {
                Ok(v) => println!("layer {k}: gram_residual {gram:.6e}  tap_residual {v:.6e}"),
                Err(why) => println!("layer {k}: gram_residual {gram:.6e}  tap_residual n/a ({why})"),
            }
        }
        layers.push(json!({
            "layer": k,
            "gram_residual": gram,
            "tap_residual": tap.ok(),
        }));
    }
    Ok(json!({
        "model": a.model,
        "layers": layers,
    }))
}

fn run_counterexample(a: CounterexampleArgs) -> Result<serde_json::Value> {
    let trace = divergence_example(a.t, a.a2, &[1.0], a.iters)?;
    let a1 = 2.0 * a.t - 1.0;
    let growth = 1.0 + a1 - (1.0 - a.a2) * (1.0 + 2.0 * a1) / 2.0;
    let observed = if trace.t_norms.len() >= 2 {
        trace.t_norms[1] / trace.t_norms[0]
    } else {
        f64::NAN
    };
    if !quiet() {
        println!(
            "denoiser argument grows by {growth:.12} per iteration over {} iterations",
            trace.iterations
        );
    }
    if let Some(path) = &a.trace {
        trace.write_csv(path)?;
    }
    Ok(json!({
        "t": a.t,
        "a2": a.a2,
        "iterations": trace.iterations,
        "growth_factor": growth,
        "observed_ratio": observed,
        "first_norm": trace.t_norms.first(),
        "last_norm": trace.t_norms.last(),
        "diverged": trace.diverged,
        "trace": a.trace,
    }))
}

fn run_eval(a: EvalArgs) -> Result<serde_json::Value> {
    let mut names: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(&a.pred)? {
        let entry = entry?;
        let path = entry.path();
        let usable = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("csv") || e.eq_ignore_ascii_case("pgm"))
            .unwrap_or(false);
        if path.is_file() && usable {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.push(name.to_string());
            }
        }
    }
    ensure!(
        !names.is_empty(),
        "no CSV or PGM files found in {:?}",
        a.pred
    );
    names.sort_unstable();

    let mut table = Vec::new();
    let mut csv = String::from("file,samples,psnr\n");
    let mut sum = 0.0;
    let mut count = 0usize;
    for name in &names {
        let pred_path = a.pred.join(name);
        let truth_path = a.truth.join(name);
        ensure!(
            truth_path.is_file(),
            "reference directory lacks a file named {name:?}"
        );
        let is_pgm = name.to_ascii_lowercase().ends_with(".pgm");
        let (samples, mean) = if is_pgm {
            let (pred, pd1, pd2) = read_pgm(&pred_path)?;
            let (truth, td1, td2) = read_pgm(&truth_path)?;
            ensure!(
                pd1 == td1 && pd2 == td2,
                "image sizes differ for {name:?}: {pd1}x{pd2} vs {td1}x{td2}"
            );
            (1usize, psnr_image(&pred, &truth)?)
        } else {
            let pred = serial::read_csv(&pred_path)?;
            let truth = serial::read_csv(&truth_path)?;
            ensure!(
                pred.len() == truth.len(),
                "row counts differ for {name:?}: {} vs {}",
                pred.len(),
                truth.len()
            );
            ensure!(!pred.is_empty(), "{name:?} holds no rows");
            let mut acc = 0.0;
            for (p, t) in pred.iter().zip(truth.iter()) {
                acc += psnr_signal(p, t)?;
            }
            (pred.len(), acc / pred.len() as f64)
        };
        sum += mean * samples as f64;
        count += samples;
        csv.push_str(&format!("{name},{samples},{}\n", serial::fmt_f64(mean)));
        table.push(json!({"file": name, "samples": samples, "psnr": mean}));
    }
    let overall = sum / count as f64;
    csv.push_str(&format!("mean,{count},{}\n", serial::fmt_f64(overall)));

    match &a.out {
        Some(path) => std::fs::write(path, &csv)?,
        None => {
            if !quiet() {
                print!("{csv}");
            }
        }
    }
    Ok(json!({
        "pairs": names.len(),
        "samples": count,
        "mean_psnr": overall,
        "table": table,
        "out": a.out,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_files_round_trip_in_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let sig_path = dir.path().join("x.csv");
        serial::write_csv(&sig_path, &[vec![1.0, -2.0, 3.0]]).unwrap();
        let sig = read_sample(&sig_path).unwrap();
        assert_eq!(sig.data(), &[1.0, -2.0, 3.0]);
        assert!(sig.image_dims().is_none());

        // single-column CSVs read as one signal too
        let col_path = dir.path().join("col.csv");
        serial::write_csv(&col_path, &[vec![1.0], vec![2.0]]).unwrap();
        assert_eq!(read_sample(&col_path).unwrap().data(), &[1.0, 2.0]);

        let img_path = dir.path().join("x.pgm");
        let img = vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.125];
        write_pgm(&img_path, &img, 2, 3).unwrap();
        let back = read_sample(&img_path).unwrap();
        assert_eq!(back.image_dims(), Some((2, 3)));
        assert_eq!(back.data().len(), 6);

        let out_path = dir.path().join("y.pgm");
        write_sample(&out_path, back.data(), &back).unwrap();
        assert!(out_path.is_file());
    }

    #[test]
    fn help_and_parse_failures_use_the_documented_exit_codes() {
        assert_eq!(dispatch(["firmconv", "--help"]), 0);
        assert_eq!(dispatch(["firmconv", "counterexample", "--help"]), 0);
        assert_eq!(dispatch(["firmconv", "no-such-command"]), 1);
        assert_eq!(dispatch(["firmconv", "counterexample", "--bogus-flag"]), 1);
    }

    #[test]
    fn counterexample_command_runs_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let trace = dir.path().join("trace.csv");
        let code = dispatch([
            "firmconv",
            "counterexample",
            "--t",
            "0.75",
            "--a2",
            "0.9",
            "--iters",
            "20",
            "--trace",
            trace.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        assert!(trace.is_file());
        // growth 1.0 case is a validation failure: exit 1
        let code = dispatch([
            "firmconv",
            "counterexample",
            "--t",
            "0.75",
            "--a2",
            "0.5",
            "--iters",
            "10",
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn result_file_records_the_outcome() {
        let dir = tempfile::tempdir().unwrap();
        let result = dir.path().join("result.json");
        let code = dispatch([
            "firmconv",
            "--result",
            result.to_str().unwrap(),
            "counterexample",
            "--iters",
            "5",
        ]);
        assert_eq!(code, 0);
        let text = std::fs::read_to_string(&result).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["schema_version"], 1);
        assert_eq!(value["command"], "counterexample");
        assert_eq!(value["status"], "ok");
        assert!((value["data"]["growth_factor"].as_f64().unwrap() - 1.4).abs() < 1e-12);
    }

    #[test]
    fn gen_data_writes_a_loadable_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("set");
        let code = dispatch([
            "firmconv",
            "gen-data",
            "--kind",
            "pwc",
            "--n",
            "4",
            "--m",
            "16",
            "--sigma",
            "0.1",
            "--seed",
            "7",
            "--out",
            data_dir.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let ds = load_dataset(&data_dir).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.clean[0].len(), 16);
        assert!(ds.sigma == 0.1);
    }
}
