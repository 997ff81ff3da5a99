//! JSON and CSV file formats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use dpvi_core::nispp::{NisppConfig, NisppTrajectory};
use dpvi_core::nseg::{NsegConfig, NsegTrajectory};
use dpvi_core::ProblemInstance;
use serde::de::DeserializeOwned;
use serde::Serialize;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f)).with_context(|| format!("cannot parse {}", path.display()))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn load_instance(path: &Path) -> anyhow::Result<ProblemInstance> {
    let inst: ProblemInstance = read_json(path)?;
    inst.validate().with_context(|| format!("invalid instance in {}", path.display()))?;
    Ok(inst)
}

/// A point file holds a bare JSON array of numbers.
pub fn load_point(path: &Path) -> anyhow::Result<Vec<f64>> {
    read_json(path)
}

/// Formats a float so that it parses back to the same value.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn coordinate_headers(prefix: &str, d: usize) -> impl Iterator<Item = String> + '_ {
    (0..d).map(move |i| format!("{prefix}_{i}"))
}

/// Per-step trajectory: `step,gamma,sigma_sq,u_0..,w_0..`.
pub fn write_nseg_trajectory<W: Write>(out: W, cfg: &NsegConfig, traj: &NsegTrajectory) -> anyhow::Result<()> {
    let d = traj.start.len();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string(), "gamma".into(), "sigma_sq".into()];
    header.extend(coordinate_headers("u", d));
    header.extend(coordinate_headers("w", d));
    w.write_record(&header)?;
    for (t, s) in traj.steps.iter().enumerate() {
        let mut rec = vec![t.to_string(), fmt_f64(cfg.stepsizes.at(t)), fmt_f64(cfg.noise_variances.at(t))];
        rec.extend(s.u.iter().map(|v| fmt_f64(*v)));
        rec.extend(s.w.iter().map(|v| fmt_f64(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-step trajectory: `step,lambda,sigma_sq,nu_actual,inner_iterations,u_0..,w_0..`.
pub fn write_nispp_trajectory<W: Write>(out: W, cfg: &NisppConfig, traj: &NisppTrajectory) -> anyhow::Result<()> {
    let d = traj.start.len();
    let mut w = csv::Writer::from_writer(out);
    let mut header =
        vec!["step".to_string(), "lambda".into(), "sigma_sq".into(), "nu_actual".into(), "inner_iterations".into()];
    header.extend(coordinate_headers("u", d));
    header.extend(coordinate_headers("w", d));
    w.write_record(&header)?;
    for (k, s) in traj.steps.iter().enumerate() {
        let cert = traj.certificates[k];
        let mut rec = vec![
            k.to_string(),
            fmt_f64(cfg.regularization.at(k)),
            fmt_f64(cfg.noise_variances.at(k)),
            fmt_f64(cert.nu_actual),
            cert.inner_iterations.to_string(),
        ];
        rec.extend(s.u.iter().map(|v| fmt_f64(*v)));
        rec.extend(s.w.iter().map(|v| fmt_f64(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
