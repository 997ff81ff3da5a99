use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use dpvi::io::{
    fmt_f64, load_instance, load_point, read_json, write_json, write_nispp_trajectory, write_nseg_trajectory,
};
use dpvi::parallel::{ordered_map, pool};
use dpvi::{build_config, run_experiment, ExperimentConfig, PolicyName};
use dpvi_core::gap::{evaluate_replica, strong_gap, OperatorSource};
use dpvi_core::linalg::Matrix;
use dpvi_core::nispp::nispp_run;
use dpvi_core::nseg::nseg_run;
use dpvi_core::privacy::{
    gaussian_sigma, parallel_composition, subsampled_composition_sigma, CalibrationReport, Mechanism, PrivacyBudget,
};
use dpvi_core::problems::sample_dataset;
use dpvi_core::rng::{derive_seed, stream};
use dpvi_core::stability::{
    coupled_run, nispp_per_run_bound, nseg_per_run_bound, trial_setup, SolverConfig, SolverKind,
};
use dpvi_core::{Datapoint, Dataset, FeasibleSet, ProblemInstance};
use rand::Rng;
use serde_json::json;

#[derive(Parser)]
#[command(name = "dpvi", version, about = "Differentially private solvers for stochastic variational inequalities")]
struct Cli {
    /// Worker threads for replica-level parallelism (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the noise calibration of a mechanism as JSON.
    Calibrate(CalibrateArgs),
    /// Run a solver on a sampled dataset.
    Solve(SolveArgs),
    /// Strong gap of a point.
    Gap(GapArgs),
    /// Coupled runs on neighboring datasets against the per-run drift bounds.
    Stability(StabilityArgs),
    /// Replicated runs over an n-grid, written as CSV.
    Experiment(ExperimentArgs),
    /// Write a problem instance to a JSON file.
    MakeInstance(MakeInstanceArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MechanismArg {
    Gaussian,
    Subsampled,
    Parallel,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long, value_enum)]
    mechanism: MechanismArg,
    #[arg(long)]
    sensitivity: Option<f64>,
    /// Repeat for parallel composition.
    #[arg(long = "eps", required = true)]
    eps: Vec<f64>,
    #[arg(long = "eta", required = true)]
    eta: Vec<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    c1: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Nseg,
    Nispp,
}

impl From<SolverArg> for SolverKind {
    fn from(s: SolverArg) -> Self {
        match s {
            SolverArg::Nseg => SolverKind::Nseg,
            SolverArg::Nispp => SolverKind::Nispp,
        }
    }
}

#[derive(Args)]
struct SolverSelection {
    #[arg(long, value_enum)]
    solver: SolverArg,
    #[arg(long, value_enum, default_value = "multipass")]
    policy: PolicyName,
    /// Solver configuration JSON for the custom policy.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    instance: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    /// Privacy budget; omit both for a nonprivate run.
    #[arg(long, requires = "eta")]
    eps: Option<f64>,
    #[arg(long, requires = "eps")]
    eta: Option<f64>,
}

impl SolverSelection {
    fn resolve(&self) -> anyhow::Result<(ProblemInstance, SolverConfig)> {
        let instance = load_instance(&self.instance)?;
        let budget = match (self.eps, self.eta) {
            (Some(e), Some(h)) => Some(PrivacyBudget::new(e, h)?),
            _ => None,
        };
        let custom: Option<SolverConfig> = self.config.as_deref().map(read_json).transpose()?;
        let cfg = build_config(self.solver.into(), self.policy, &instance, self.n, budget.as_ref(), custom.as_ref())?;
        Ok((instance, cfg))
    }
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    sel: SolverSelection,
    /// Output point (JSON array).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Per-step trajectory CSV.
    #[arg(long)]
    trajectory: Option<PathBuf>,
}

#[derive(Args)]
struct GapArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long)]
    point: PathBuf,
    /// Dataset JSON (array of datapoints); the population operator is used without it.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct StabilityArgs {
    #[command(flatten)]
    sel: SolverSelection,
    #[arg(long)]
    trials: usize,
    /// Replace the differing entry by itself (a smoke test: every distance is zero).
    #[arg(long)]
    identical: bool,
    /// Per-trial CSV; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment configuration JSON.
    config: PathBuf,
    /// Overrides the output path of the configuration; standard output when neither is set.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum InstanceKind {
    /// Constant operators `M beta` on a centered ball.
    ConstantOp {
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
        #[arg(long, default_value_t = 1.0)]
        m: f64,
        #[arg(long, default_value_t = 0.5)]
        p_plus: f64,
    },
    /// Random bilinear game on two probability simplices.
    Bilinear {
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        matrix_half_width: f64,
        #[arg(long, default_value_t = 0.1)]
        vector_half_width: f64,
    },
    /// The 2x2 matching-pennies game.
    Pennies {
        #[arg(long, default_value_t = 0.0)]
        matrix_half_width: f64,
        #[arg(long, default_value_t = 0.0)]
        vector_half_width: f64,
    },
}

#[derive(Args)]
struct MakeInstanceArgs {
    #[command(subcommand)]
    kind: InstanceKind,
    #[arg(long, global = true)]
    output: Option<PathBuf>,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

/// Maps to the usage exit code.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

/// Failure that is a finding rather than an error (exit code 1, no message prefix).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Failed(String);

fn output_writer(path: Option<&std::path::Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("cannot create {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn single<T: Copy>(v: &[T], name: &str) -> anyhow::Result<T> {
    match v {
        [x] => Ok(*x),
        _ => Err(usage(format!("--{name} must be given exactly once for this mechanism"))),
    }
}

fn calibrate(a: &CalibrateArgs) -> anyhow::Result<()> {
    let report = match a.mechanism {
        MechanismArg::Gaussian => {
            let (eps, eta) = (single(&a.eps, "eps")?, single(&a.eta, "eta")?);
            let s = a.sensitivity.ok_or_else(|| usage("--sensitivity is required"))?;
            CalibrationReport {
                mechanism: Mechanism::Gaussian,
                sensitivity: Some(s),
                sigma_sq: Some(gaussian_sigma(s, eps, eta)?),
                composition: "single release".into(),
                budget: PrivacyBudget::new(eps, eta)?,
                steps: None,
                batch: None,
                n: None,
                regime_ok: None,
            }
        }
        MechanismArg::Subsampled => {
            let (eps, eta) = (single(&a.eps, "eps")?, single(&a.eta, "eta")?);
            let s = a.sensitivity.ok_or_else(|| usage("--sensitivity is required"))?;
            let steps = a.steps.ok_or_else(|| usage("--steps is required"))?;
            let batch = a.batch.ok_or_else(|| usage("--batch is required"))?;
            let n = a.n.ok_or_else(|| usage("--n is required"))?;
            let (sigma, ok) = subsampled_composition_sigma(steps, s, batch, n, eps, eta, a.c1)?;
            CalibrationReport {
                mechanism: Mechanism::Subsampled,
                sensitivity: Some(s),
                sigma_sq: Some(sigma * sigma),
                composition: "subsampled adaptive composition".into(),
                budget: PrivacyBudget::new(eps, eta)?,
                steps: Some(steps),
                batch: Some(batch),
                n: Some(n),
                regime_ok: Some(ok),
            }
        }
        MechanismArg::Parallel => {
            if a.eps.len() != a.eta.len() {
                return Err(usage("--eps and --eta must be repeated the same number of times"));
            }
            let budgets: Vec<PrivacyBudget> =
                a.eps.iter().zip(&a.eta).map(|(e, h)| PrivacyBudget::new(*e, *h)).collect::<Result<_, _>>()?;
            CalibrationReport {
                mechanism: Mechanism::Parallel,
                sensitivity: None,
                sigma_sq: None,
                composition: "parallel over disjoint data".into(),
                budget: parallel_composition(&budgets)?,
                steps: None,
                batch: None,
                n: None,
                regime_ok: None,
            }
        }
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn solve(a: &SolveArgs) -> anyhow::Result<()> {
    let (instance, cfg) = a.sel.resolve()?;
    let dist = instance.distribution()?.clone();
    let data = sample_dataset(&dist, a.sel.n, derive_seed(a.sel.seed, 0))?;
    let cfg = cfg.with_seed(derive_seed(a.sel.seed, 1)).with_record(a.trajectory.is_some());
    let output = match &cfg {
        SolverConfig::Nseg(c) => {
            let t = nseg_run(&instance, &data, c)?;
            if let Some(p) = &a.trajectory {
                write_nseg_trajectory(output_writer(Some(p))?, c, &t)?;
            }
            t.output
        }
        SolverConfig::Nispp(c) => {
            let t = nispp_run(&instance, &data, c)?;
            if let Some(p) = &a.trajectory {
                write_nispp_trajectory(output_writer(Some(p))?, c, &t)?;
            }
            t.output
        }
    };
    if let Some(p) = &a.output {
        write_json(p, &output)?;
    }
    let gaps = evaluate_replica(&instance, &data, output)?;
    let echo = json!({
        "n": a.sel.n,
        "config": cfg,
        "output": gaps.output,
        "empirical_gap": gaps.empirical_gap,
        "population_gap": gaps.population_gap,
    });
    println!("{}", serde_json::to_string_pretty(&echo)?);
    Ok(())
}

fn gap(a: &GapArgs) -> anyhow::Result<()> {
    let instance = load_instance(&a.instance)?;
    let point = load_point(&a.point)?;
    let data = match a.data.as_deref() {
        Some(p) => Some(Dataset::new(read_json::<Vec<Datapoint>>(p)?)?),
        None => None,
    };
    let source = match &data {
        Some(d) => OperatorSource::Dataset(d),
        None => OperatorSource::Population,
    };
    let g = strong_gap(&instance, source, &point)?;
    println!("{}", serde_json::to_string_pretty(&g)?);
    Ok(())
}

fn stability(a: &StabilityArgs, jobs: usize) -> anyhow::Result<()> {
    if a.trials == 0 {
        return Err(usage("--trials must be positive"));
    }
    let (instance, cfg) = a.sel.resolve()?;
    let dist = instance.distribution()?.clone();
    let c = instance.constants;
    let n = a.sel.n;
    let p = pool(Some(jobs))?;
    let results = ordered_map(&p, a.trials, |t| -> anyhow::Result<(usize, f64, f64, usize)> {
        let (data, index, replacement, solver_seed) = trial_setup(&dist, n, a.sel.seed, t)?;
        let replacement = if a.identical { data.points()[index].clone() } else { replacement };
        let rep = coupled_run(&cfg.with_seed(solver_seed), &instance, &data, index, replacement)?;
        let bound = match cfg.kind() {
            SolverKind::Nispp => nispp_per_run_bound(&rep)?,
            SolverKind::Nseg => nseg_per_run_bound(&rep, c.m, c.l, c.d, true)?,
        };
        Ok((index, rep.output_distance, bound.output, bound.violations(&rep)))
    });
    let mut w = csv::Writer::from_writer(output_writer(a.output.as_deref())?);
    w.write_record(["trial", "index", "delta_final", "bound", "violated"])?;
    let mut violated = 0;
    for (t, r) in results.into_iter().enumerate() {
        let (index, delta, bound, v) = r.with_context(|| format!("trial {t}"))?;
        violated += usize::from(v > 0);
        w.write_record([t.to_string(), index.to_string(), fmt_f64(delta), fmt_f64(bound), (v > 0).to_string()])?;
    }
    w.flush()?;
    drop(w);
    if violated > 0 {
        return Err(Failed(format!("{violated} of {} trials violated the per-run bound", a.trials)).into());
    }
    Ok(())
}

fn experiment(a: &ExperimentArgs, jobs: usize) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let instance = load_instance(&cfg.instance)?;
    let p = pool(Some(jobs))?;
    let outcome = run_experiment(&cfg, &instance, &p)?;
    let path = a.output.clone().or_else(|| cfg.output.clone());
    outcome.write_csv(output_writer(path.as_deref())?)?;
    if outcome.failures() > 0 {
        log::warn!("{} replica runs failed; see the error column", outcome.failures());
    }
    Ok(())
}

fn random_game(rows: usize, cols: usize, seed: u64, mhw: f64, vhw: f64) -> anyhow::Result<ProblemInstance> {
    if rows == 0 || cols == 0 {
        return Err(usage("--rows and --cols must be positive"));
    }
    let mut r = stream(seed, 0);
    let a = Matrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0));
    let av: Vec<f64> = (0..rows).map(|_| r.random_range(-0.5..0.5)).collect();
    let bv: Vec<f64> = (0..cols).map(|_| r.random_range(-0.5..0.5)).collect();
    Ok(ProblemInstance::bilinear(
        FeasibleSet::simplex(rows, 1.0)?,
        FeasibleSet::simplex(cols, 1.0)?,
        a,
        av,
        bv,
        mhw,
        vhw,
    )?)
}

fn make_instance(a: &MakeInstanceArgs) -> anyhow::Result<()> {
    let inst = match &a.kind {
        InstanceKind::ConstantOp { dim, radius, m, p_plus } => {
            ProblemInstance::constant_op(*dim, *radius, *m, *p_plus)?
        }
        InstanceKind::Bilinear { rows, cols, seed, matrix_half_width, vector_half_width } => {
            random_game(*rows, *cols, *seed, *matrix_half_width, *vector_half_width)?
        }
        InstanceKind::Pennies { matrix_half_width, vector_half_width } => {
            ProblemInstance::matching_pennies(*matrix_half_width, *vector_half_width)?
        }
    };
    match &a.output {
        Some(p) => write_json(p, &inst)?,
        None => println!("{}", serde_json::to_string_pretty(&inst)?),
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Calibrate(a) => calibrate(a),
        Command::Solve(a) => solve(a),
        Command::Gap(a) => gap(a),
        Command::Stability(a) => stability(a, cli.jobs),
        Command::Experiment(a) => experiment(a, cli.jobs),
        Command::MakeInstance(a) => make_instance(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) if e.is::<Failed>() => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
