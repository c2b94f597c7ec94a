//! `impflow` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 input or format error, 3 runtime
//! failure (layer collapse, divergence).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use impflow::config::ExperimentConfig;
use impflow::data::{gen_blobs, gen_circles, write_idx};
use impflow::flow::{
    analyze_flow, compare_flows, compute_observables, flow_projection, Alignment, Relevance, DEFAULT_BAND,
    DEFAULT_SEM_THRESHOLD,
};
use impflow::imp::{run_imp, run_oneshot};
use impflow::io::{
    read_curve_csv, read_report, read_summary_csv, read_trajectory, write_curve_csv, write_projection_csv,
    write_report, write_summary_csv, write_trajectory, ReportDocument,
};
use impflow::scaling::{fit_scaling, DensityErrorCurve, FitBounds, FitOptions, Interval, DEFAULT_EPS_NP_WIDTH};
use impflow::trajectory::ImpTrajectory;
use impflow::Error;

const OUT_ENV: &str = "IMPFLOW_OUT";

#[derive(Parser)]
#[command(name = "impflow", version, about = "Iterative magnitude pruning and pruning-flow analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as an IDX image/label pair.
    Synth(SynthArgs),
    /// Train and iteratively prune a network, writing its trajectory.
    Imp(ImpArgs),
    /// Estimate per-group exponents and relevance labels from a trajectory or summary.
    Flow(FlowArgs),
    /// Compare the relevance pattern of two reports.
    Compare(CompareArgs),
    /// Fit the error-versus-density scaling law to a curve.
    Fit(FitArgs),
    /// Run several `imp` configs, up to `--jobs` at a time.
    Batch(BatchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Circles,
    Blobs,
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: SynthKind,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory [default: $IMPFLOW_OUT/synth]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0.6)]
    spread: f64,
}

#[derive(clap::Args)]
struct ImpArgs {
    #[arg(long)]
    config: PathBuf,
    /// Prune once to this density instead of iterating.
    #[arg(long)]
    oneshot: Option<f64>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    x: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Training (data order) seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct FlowArgs {
    #[arg(long, conflicts_with = "summary", required_unless_present = "summary")]
    traj: Option<PathBuf>,
    #[arg(long)]
    summary: Option<PathBuf>,
    /// `round,x` file giving the sparsification of each transition (with --summary).
    #[arg(long, requires = "summary")]
    x_schedule: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BAND)]
    band: f64,
    #[arg(long, value_delimiter = ',')]
    exclude: Vec<String>,
    /// Two group names; writes the flow projected onto their magnitude shares.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    project: Option<Vec<String>>,
    /// Projection CSV path [default: next to --out, with `.projection.csv`]
    #[arg(long, requires = "project")]
    project_out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SEM_THRESHOLD)]
    sem_threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlignArg {
    Name,
    Position,
}

#[derive(clap::Args)]
struct CompareArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, value_enum, default_value = "name")]
    align: AlignArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct FitArgs {
    /// CSV with header `density,error`.
    #[arg(long)]
    curve: PathBuf,
    /// Unpruned error [default: the error at the highest density]
    #[arg(long)]
    dense_error: Option<f64>,
    /// Per-parameter bounds, e.g. `gamma=-2:-0.01,p=0.001:0.5`.
    #[arg(long)]
    bounds: Option<String>,
    /// Half-width of the eps_np bound relative to the dense error.
    #[arg(long, default_value_t = DEFAULT_EPS_NP_WIDTH)]
    eps_np_width: f64,
    #[arg(long, default_value_t = 25)]
    starts: usize,
    #[arg(long)]
    log_space: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct BatchArgs {
    #[arg(required = true)]
    configs: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

/// An error caused by how the command was invoked.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

/// Ran to completion but hit a runtime failure worth a nonzero exit.
#[derive(Debug)]
struct Runtime(String);

impl std::fmt::Display for Runtime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Runtime {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if cause.is::<Runtime>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Argument(_) => 1,
                Error::Divergence { .. } | Error::LayerCollapse { .. } => 3,
                Error::Dimension(_) | Error::Domain(_) | Error::Format(_) | Error::Io { .. } => 2,
            };
        }
    }
    2
}

fn output_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("impflow-out"), PathBuf::from)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Imp(a) => cmd_imp(a),
        Command::Flow(a) => cmd_flow(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Batch(a) => cmd_batch(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let data = match args.kind {
        SynthKind::Circles => gen_circles(args.n, args.noise, args.seed)?,
        SynthKind::Blobs => {
            let centers = ExperimentConfig::default().dataset.centers;
            gen_blobs(args.n, &centers, args.spread, args.seed)?
        }
    };
    let out = args.out.unwrap_or_else(|| output_root().join("synth"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let images = out.join("images.idx3-ubyte");
    let labels = out.join("labels.idx1-ubyte");
    write_idx(&data.normalized_to_unit(), &images, &labels)?;
    println!("wrote {} samples to {}", data.len(), out.display());
    Ok(())
}

/// Runs one config; the trajectory is written even when it was truncated.
fn run_config(config: &ExperimentConfig, oneshot: Option<f64>, out: &Path) -> anyhow::Result<ImpTrajectory> {
    let dataset = config.load_dataset()?;
    let spec = config.network_spec(&dataset)?;
    let options = config.imp_options();
    let traj = match oneshot {
        Some(d) => run_oneshot(&spec, &dataset, &config.train, d, &options)?,
        None => run_imp(&spec, &dataset, &config.train, &config.prune.schedule(), &options)?,
    };
    write_trajectory(&traj, out)?;
    write_curve_csv(&traj, out.join("curve.csv"))?;
    write_summary_csv(&traj, out.join("summary.csv"))?;
    if traj.manifest.truncated {
        return Err(anyhow::Error::new(Runtime(format!(
            "{} (trajectory with {} rounds written to {})",
            traj.manifest.notes.join("; "),
            traj.rounds.len(),
            out.display()
        ))));
    }
    Ok(traj)
}

fn resolve_out(config: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| config.output_dir.clone())
        .map(|p| if p.is_absolute() { p } else { output_root().join(p) })
        .unwrap_or_else(|| output_root().join(&config.name))
}

fn cmd_imp(args: ImpArgs) -> anyhow::Result<()> {
    let mut config = ExperimentConfig::from_file(&args.config)?;
    if let Some(r) = args.rounds {
        config.prune.rounds = r;
    }
    if let Some(x) = args.x {
        config.prune.x = x;
    }
    if let Some(e) = args.epochs {
        config.train.epochs = e;
    }
    if let Some(s) = args.seed {
        config.train.seed = s;
    }
    let out = match args.out {
        Some(p) => p,
        None => resolve_out(&config, None),
    };
    let traj = run_config(&config, args.oneshot, &out)?;
    let last = traj.rounds.last().expect("round 0 always exists");
    println!(
        "{} rounds written to {}; final density {:.4}, error {:.2}% (dense {:.2}%)",
        traj.rounds.len(),
        out.display(),
        last.density,
        last.eval_error,
        traj.rounds[0].eval_error
    );
    Ok(())
}

fn cmd_flow(args: FlowArgs) -> anyhow::Result<()> {
    let obs = match (&args.traj, &args.summary) {
        (Some(dir), _) => compute_observables(&read_trajectory(dir)?)?,
        (None, Some(csv)) => read_summary_csv(csv, args.x_schedule.as_deref())?,
        (None, None) => bail!(usage("one of --traj or --summary is required")),
    };
    let names = |list: &[String]| -> anyhow::Result<()> {
        for n in list {
            if obs.group_index(n).is_none() {
                return Err(usage(format!(
                    "unknown group `{n}` (groups: {})",
                    obs.group_names.join(", ")
                )));
            }
        }
        Ok(())
    };
    names(&args.exclude)?;
    if let Some(pair) = &args.project {
        if pair.len() != 2 {
            return Err(usage("--project takes exactly two group names"));
        }
        names(pair)?;
    }
    let report = analyze_flow(&obs, &args.exclude, args.band, args.sem_threshold)?;
    write_report(&ReportDocument::Flow(report.clone()), &args.out)?;

    if let Some(pair) = &args.project {
        let points = flow_projection(&obs, &pair[0], &pair[1])?;
        let path = args
            .project_out
            .clone()
            .unwrap_or_else(|| args.out.with_extension("projection.csv"));
        write_projection_csv(&points, &pair[0], &pair[1], &path)?;
    }
    for g in &report.magnitude.groups {
        let sigma = g.sigma_mean.map_or("n/a".to_owned(), |s| format!("{s:+.4}"));
        println!("{:<20} sigma {:>8}  {}", g.name, sigma, g.label.as_str());
    }
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> anyhow::Result<()> {
    let load = |p: &Path| -> anyhow::Result<impflow::flow::EigenReport> {
        let doc = read_report(p)?;
        doc.eigen()
            .cloned()
            .ok_or_else(|| usage(format!("{} holds no eigen report", p.display())))
    };
    let (a, b) = (load(&args.a)?, load(&args.b)?);
    let align = match args.align {
        AlignArg::Name => Alignment::Name,
        AlignArg::Position => Alignment::Position,
    };
    let verdict = compare_flows(&a, &b, align).map_err(|e| match e {
        Error::Argument(m) => usage(m),
        other => other.into(),
    })?;
    write_report(&ReportDocument::Comparison(verdict.clone()), &args.out)?;
    let flips = verdict
        .per_group_labels
        .iter()
        .filter(|p| {
            matches!(
                (p.label_a, p.label_b),
                (Relevance::Relevant, Relevance::Irrelevant) | (Relevance::Irrelevant, Relevance::Relevant)
            )
        })
        .count();
    println!(
        "{:?}: sign agreement {:.3}, {} flipped group(s)",
        verdict.verdict, verdict.sign_agreement, flips
    );
    Ok(())
}

fn parse_bounds(spec: &str, mut bounds: FitBounds) -> anyhow::Result<FitBounds> {
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (name, range) = item
            .split_once('=')
            .ok_or_else(|| usage(format!("bound `{item}` is not name=lo:hi")))?;
        let (lo, hi) = range
            .split_once(':')
            .ok_or_else(|| usage(format!("bound `{item}` is not name=lo:hi")))?;
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| usage(format!("bad number `{s}` in `{item}`")));
        let iv = Interval::new(parse(lo)?, parse(hi)?).map_err(|e| usage(e.to_string()))?;
        match name.trim() {
            "eps_np" => bounds.eps_np = iv,
            "eps_up" => bounds.eps_up = iv,
            "gamma" => bounds.gamma = iv,
            "p" => bounds.p = iv,
            other => return Err(usage(format!("unknown parameter `{other}` in --bounds"))),
        }
    }
    Ok(bounds)
}

fn cmd_fit(args: FitArgs) -> anyhow::Result<()> {
    let points = read_curve_csv(&args.curve)?;
    if points.len() < 6 {
        return Err(usage(format!("fit needs at least 6 points, {} has {}", args.curve.display(), points.len())));
    }
    let curve = match args.dense_error {
        Some(e) => DensityErrorCurve::new(points, e)?,
        None => DensityErrorCurve::from_points(points)?,
    };
    let defaults = FitBounds::default_for(curve.dense_error(), args.eps_np_width).map_err(|e| usage(e.to_string()))?;
    let bounds = match &args.bounds {
        Some(spec) => parse_bounds(spec, defaults)?,
        None => defaults,
    };
    let options = FitOptions {
        bounds: Some(bounds),
        eps_np_width: args.eps_np_width,
        starts: args.starts,
        log_space: args.log_space,
        ..FitOptions::default()
    };
    let fit = fit_scaling(&curve, &options)?;
    write_report(&ReportDocument::Fit(fit.clone()), &args.out)?;
    let p = fit.params;
    println!(
        "eps_np {:.4}  eps_up {:.4}  gamma {:.4}  p {:.5}  rms {:.3e}{}",
        p.eps_np,
        p.eps_up,
        p.gamma,
        p.p,
        fit.rms_residual,
        if fit.converged { "" } else { "  (not converged)" }
    );
    Ok(())
}

fn cmd_batch(args: BatchArgs) -> anyhow::Result<()> {
    if args.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let mut jobs = Vec::new();
    for path in &args.configs {
        let config = ExperimentConfig::from_file(path)?;
        let out = resolve_out(&config, None);
        if jobs.iter().any(|(_, _, o): &(PathBuf, ExperimentConfig, PathBuf)| *o == out) {
            return Err(usage(format!("two configs write to {}; give them distinct names", out.display())));
        }
        jobs.push((path.clone(), config, out));
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<anyhow::Result<()>>>> =
        jobs.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..args.jobs.min(jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some((_, config, out)) = jobs.get(i) else { break };
                let r = run_config(config, None, out).map(|_| ());
                *results[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    let mut worst: Option<anyhow::Error> = None;
    for ((path, _, out), slot) in jobs.iter().zip(results) {
        match slot.into_inner().expect("result slot").expect("every job ran") {
            Ok(()) => println!("{}: ok -> {}", path.display(), out.display()),
            Err(e) => {
                eprintln!("{}: {e:#}", path.display());
                if worst.as_ref().is_none_or(|w| exit_code(&e) > exit_code(w)) {
                    worst = Some(e);
                }
            }
        }
    }
    match worst {
        None => Ok(()),
        Some(e) => Err(e.context("batch had failures")),
    }
}
