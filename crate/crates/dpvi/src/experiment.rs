//! Replicated solver runs over a grid of sample sizes.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use dpvi_core::gap::{
    evaluate_replica, replica_seeds, strong_gap, summarize_replicas, OperatorSource, ReplicaGap, WeakGapEstimate,
};
use dpvi_core::privacy::PrivacyBudget;
use dpvi_core::problems::sample_dataset;
use dpvi_core::rng::derive_seed;
use dpvi_core::stability::{summarize_uas, uas_trial, SolverConfig, SolverKind, UasEstimate};
use dpvi_core::{DataDistribution, ProblemInstance};
use serde::{Deserialize, Serialize};

use crate::io::{fmt_f64, fmt_opt};
use crate::parallel::ordered_map;
use crate::policy::{build_config, PolicyName};

/// Column order of the per-replica block.
pub const ROW_COLUMNS: [&str; 15] = [
    "experiment_id",
    "n",
    "d",
    "epsilon",
    "eta",
    "solver",
    "replica",
    "empirical_gap",
    "population_gap",
    "weak_gap",
    "weak_gap_se",
    "uas_estimate",
    "runtime_ms",
    "seed",
    "error",
];

/// Column order of the summary block that follows the rows.
pub const SUMMARY_COLUMNS: [&str; 11] = [
    "summary",
    "n",
    "replicas_ok",
    "weak_gap",
    "weak_gap_se",
    "mean_empirical_gap",
    "empirical_gap_se",
    "mean_population_gap",
    "population_gap_se",
    "uas_estimate",
    "uas_se",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    /// Problem-instance JSON, relative to the config file.
    pub instance: PathBuf,
    /// Overrides the instance's own sampling law.
    #[serde(default)]
    pub distribution: Option<DataDistribution>,
    pub solver: SolverKind,
    pub policy: PolicyName,
    /// Required for the custom policy.
    #[serde(default)]
    pub config: Option<SolverConfig>,
    /// Absent for nonprivate runs.
    #[serde(default)]
    pub budget: Option<PrivacyBudget>,
    pub replicas: usize,
    pub n_grid: Vec<usize>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    pub seed: u64,
    /// Coupled trials per grid point for the stability estimate; 0 skips it.
    #[serde(default)]
    pub uas_trials: usize,
    /// Fill the runtime column. Off by default so that reruns are byte-identical.
    #[serde(default)]
    pub timing: bool,
}

impl ExperimentConfig {
    /// Parses a config file and resolves its paths against the file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let mut cfg: ExperimentConfig = crate::io::read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.instance = base.join(&cfg.instance);
        if let Some(o) = &cfg.output {
            cfg.output = Some(base.join(o));
        }
        cfg.validate()?;
        if !cfg.instance.is_file() {
            bail!("instance file {} does not exist", cfg.instance.display());
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.replicas == 0 {
            bail!("replicas must be at least 1");
        }
        if self.n_grid.is_empty() {
            bail!("n_grid is empty");
        }
        if self.uas_trials > 0 && self.uas_trials < 10 {
            bail!("uas_trials must be 0 or at least 10");
        }
        if self.policy == PolicyName::Custom && self.config.is_none() {
            bail!("custom policy needs a solver configuration");
        }
        if let Some(b) = &self.budget {
            b.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment_id: String,
    pub n: usize,
    pub d: usize,
    pub epsilon: Option<f64>,
    pub eta: Option<f64>,
    pub solver: SolverKind,
    pub replica: usize,
    pub empirical_gap: Option<f64>,
    pub population_gap: Option<f64>,
    /// Weak-gap estimate of the row's grid point, repeated on each replica.
    pub weak_gap: Option<f64>,
    pub weak_gap_se: Option<f64>,
    pub uas_estimate: Option<f64>,
    pub runtime_ms: Option<f64>,
    pub seed: u64,
    pub error: Option<String>,
}

impl ResultRow {
    fn record(&self) -> Vec<String> {
        let solver = match self.solver {
            SolverKind::Nseg => "nseg",
            SolverKind::Nispp => "nispp",
        };
        vec![
            self.experiment_id.clone(),
            self.n.to_string(),
            self.d.to_string(),
            fmt_opt(self.epsilon),
            fmt_opt(self.eta),
            solver.to_string(),
            self.replica.to_string(),
            fmt_opt(self.empirical_gap),
            fmt_opt(self.population_gap),
            fmt_opt(self.weak_gap),
            fmt_opt(self.weak_gap_se),
            fmt_opt(self.uas_estimate),
            fmt_opt(self.runtime_ms),
            self.seed.to_string(),
            self.error.clone().unwrap_or_default(),
        ]
    }
}

/// Aggregates of one grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NSummary {
    pub n: usize,
    pub replicas_ok: usize,
    /// Present when at least two replicas succeeded.
    pub weak: Option<WeakGapEstimate>,
    /// Population gap at the mean output; with a single replica this is
    /// the weak-gap estimate without a standard error.
    pub weak_gap: Option<f64>,
    pub uas: Option<UasEstimate>,
    pub uas_error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<NSummary>,
    /// Least-squares slope of `ln weak_gap` against `ln n`; needs two grid
    /// points with positive weak gap.
    pub slope: Option<f64>,
}

impl ExperimentOutcome {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    /// Rows, then the summary block, then the slope line when present.
    pub fn write_csv<W: Write>(&self, out: W) -> anyhow::Result<()> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
        w.write_record(ROW_COLUMNS)?;
        for r in &self.rows {
            w.write_record(r.record())?;
        }
        w.write_record(SUMMARY_COLUMNS)?;
        for s in &self.summary {
            let weak = s.weak.as_ref();
            w.write_record([
                "summary".to_string(),
                s.n.to_string(),
                s.replicas_ok.to_string(),
                fmt_opt(s.weak_gap),
                fmt_opt(weak.map(|x| x.standard_error)),
                fmt_opt(weak.map(|x| x.mean_empirical_gap)),
                fmt_opt(weak.map(|x| x.empirical_gap_se)),
                fmt_opt(weak.map(|x| x.mean_population_gap)),
                fmt_opt(weak.map(|x| x.population_gap_se)),
                fmt_opt(s.uas.as_ref().map(|u| u.mean)),
                fmt_opt(s.uas.as_ref().map(|u| u.standard_error)),
            ])?;
        }
        if let Some(slope) = self.slope {
            w.write_record(["slope".to_string(), fmt_f64(slope)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Parses the per-replica block of an experiment CSV.
pub fn parse_rows<R: std::io::Read>(input: R) -> anyhow::Result<Vec<ResultRow>> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(ROW_COLUMNS) {
        bail!("unexpected header {:?}", header);
    }
    let opt = |s: &str| -> anyhow::Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            Ok(Some(s.parse()?))
        }
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.get(0) == Some("summary") {
            break;
        }
        let solver = match &rec[5] {
            "nseg" => SolverKind::Nseg,
            "nispp" => SolverKind::Nispp,
            other => bail!("unknown solver {other}"),
        };
        rows.push(ResultRow {
            experiment_id: rec[0].to_string(),
            n: rec[1].parse()?,
            d: rec[2].parse()?,
            epsilon: opt(&rec[3])?,
            eta: opt(&rec[4])?,
            solver,
            replica: rec[6].parse()?,
            empirical_gap: opt(&rec[7])?,
            population_gap: opt(&rec[8])?,
            weak_gap: opt(&rec[9])?,
            weak_gap_se: opt(&rec[10])?,
            uas_estimate: opt(&rec[11])?,
            runtime_ms: opt(&rec[12])?,
            seed: rec[13].parse()?,
            error: (!rec[14].is_empty()).then(|| rec[14].to_string()),
        });
    }
    Ok(rows)
}

/// Least-squares slope of `ln y` on `ln x` over points with `x, y > 0`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> =
        points.iter().filter(|(x, y)| *x > 0.0 && *y > 0.0 && y.is_finite()).map(|(x, y)| (x.ln(), y.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

struct ReplicaResult {
    gap: anyhow::Result<ReplicaGap>,
    runtime_ms: f64,
}

/// Runs every `(n, replica)` pair of the grid. Replica failures are kept as
/// rows with an error message; configuration errors abort.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    instance: &ProblemInstance,
    pool: &rayon::ThreadPool,
) -> anyhow::Result<ExperimentOutcome> {
    cfg.validate()?;
    let dist = match &cfg.distribution {
        Some(d) => d.clone(),
        None => instance.distribution().context("instance has no sampling law")?.clone(),
    };
    let dim = instance.dim();
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (gi, &n) in cfg.n_grid.iter().enumerate() {
        let n_seed = derive_seed(cfg.seed, 2 * gi as u64);
        let uas_seed = derive_seed(cfg.seed, 2 * gi as u64 + 1);
        let base = build_config(cfg.solver, cfg.policy, instance, n, cfg.budget.as_ref(), cfg.config.as_ref())
            .with_context(|| format!("no solver configuration for n = {n}"))?
            .with_record(false);
        log::info!("{}: n = {n}, {} replicas", cfg.id, cfg.replicas);
        let results = ordered_map(pool, cfg.replicas, |r| {
            let start = Instant::now();
            let (ds, ss) = replica_seeds(n_seed, r);
            let gap = (|| -> anyhow::Result<ReplicaGap> {
                let data = sample_dataset(&dist, n, ds)?;
                let out = base.with_seed(ss).run(instance, &data)?;
                Ok(evaluate_replica(instance, &data, out)?)
            })();
            ReplicaResult { gap, runtime_ms: start.elapsed().as_secs_f64() * 1e3 }
        });
        let ok: Vec<ReplicaGap> = results.iter().filter_map(|r| r.gap.as_ref().ok().cloned()).collect();
        let weak = if ok.len() >= 2 { Some(summarize_replicas(instance, &ok)?) } else { None };
        let weak_gap = match (&weak, ok.first()) {
            (Some(w), _) => Some(w.estimate),
            (None, Some(single)) => Some(strong_gap(instance, OperatorSource::Population, &single.output)?.value),
            (None, None) => None,
        };
        let (uas, uas_error) = if cfg.uas_trials > 0 {
            let d: anyhow::Result<Vec<f64>> = ordered_map(pool, cfg.uas_trials, |t| {
                uas_trial(&base, instance, &dist, n, uas_seed, t).map_err(anyhow::Error::from)
            })
            .into_iter()
            .collect();
            match d {
                Ok(d) => (Some(summarize_uas(&d)), None),
                Err(e) => (None, Some(format!("{e:#}"))),
            }
        } else {
            (None, None)
        };
        for (r, res) in results.iter().enumerate() {
            let (emp, pop, error) = match &res.gap {
                Ok(g) => (Some(g.empirical_gap), Some(g.population_gap), None),
                Err(e) => (None, None, Some(format!("{e:#}"))),
            };
            rows.push(ResultRow {
                experiment_id: cfg.id.clone(),
                n,
                d: dim,
                epsilon: cfg.budget.map(|b| b.epsilon),
                eta: cfg.budget.map(|b| b.eta),
                solver: cfg.solver,
                replica: r,
                empirical_gap: emp,
                population_gap: pop,
                weak_gap,
                weak_gap_se: weak.as_ref().map(|w| w.standard_error),
                uas_estimate: uas.as_ref().map(|u| u.mean),
                runtime_ms: cfg.timing.then_some(res.runtime_ms),
                seed: n_seed,
                error: error.or_else(|| uas_error.clone()),
            });
        }
        summary.push(NSummary { n, replicas_ok: ok.len(), weak, weak_gap, uas, uas_error });
    }
    let pts: Vec<(f64, f64)> = summary.iter().filter_map(|s| s.weak_gap.map(|g| (s.n as f64, g))).collect();
    let distinct = {
        let mut ns: Vec<usize> = summary.iter().map(|s| s.n).collect();
        ns.sort_unstable();
        ns.dedup();
        ns.len()
    };
    let slope = if distinct >= 2 { log_log_slope(&pts) } else { None };
    Ok(ExperimentOutcome { rows, summary, slope })
}
