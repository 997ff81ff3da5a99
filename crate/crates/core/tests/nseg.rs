mod common;

use common::*;
use dpvi_core::gap::{strong_gap, OperatorSource};
use dpvi_core::nseg::{
    max_stepsize, nseg_error_bound, nseg_multipass_policy, nseg_noise_for_privacy, nseg_run, nseg_single_pass_policy,
    NsegConfig, SamplingMode,
};
use dpvi_core::privacy::PrivacyBudget;
use dpvi_core::problems::sample_dataset;
use dpvi_core::schedule::Schedule;
use dpvi_core::{Constants, Datapoint, Dataset, Error, ProblemInstance};

const E: f64 = std::f64::consts::E;

fn config(t: usize, gamma: f64, mode: SamplingMode) -> NsegConfig {
    NsegConfig {
        iterations: t,
        stepsizes: Schedule::Constant(gamma),
        batch_sizes: Schedule::Constant(1),
        noise_variances: Schedule::Constant(0.0),
        sampling_mode: mode,
        seed: 1,
        start: None,
        record: true,
    }
}

fn pennies_data(n: usize) -> (ProblemInstance, Dataset) {
    let inst = ProblemInstance::matching_pennies(0.0, 0.0).unwrap();
    let data = sample_dataset(inst.distribution().unwrap(), n, 0).unwrap();
    (inst, data)
}

fn pennies_gap(t: usize) -> f64 {
    let (inst, data) = pennies_data(4);
    let mut cfg = config(t, 0.1, SamplingMode::FullBatch);
    cfg.start = Some(vec![1.0, 0.0, 1.0, 0.0]);
    cfg.record = false;
    let out = nseg_run(&inst, &data, &cfg).unwrap().output;
    strong_gap(&inst, OperatorSource::Dataset(&data), &out).unwrap().value
}

#[test]
fn constant_operator_descends() {
    let inst = ProblemInstance::constant_op(2, 1.0, 1.0, 0.5).unwrap();
    let s = 1.0 / 2f64.sqrt();
    let data =
        Dataset::new(vec![Datapoint::ConstantOp { beta: vec![-s, s] }, Datapoint::ConstantOp { beta: vec![-s, -s] }])
            .unwrap();
    let traj = nseg_run(&inst, &data, &config(200, 0.05, SamplingMode::FullBatch)).unwrap();
    let xs: Vec<f64> = traj.steps.iter().map(|st| st.u[0]).collect();
    assert!(xs.windows(2).all(|w| w[1] >= w[0]));
    assert!(traj.final_u[0] > 0.99);
    let g0 = strong_gap(&inst, OperatorSource::Dataset(&data), &traj.start).unwrap().value;
    let g1 = strong_gap(&inst, OperatorSource::Dataset(&data), &traj.output).unwrap().value;
    assert!(g1 < g0);
}

#[test]
fn degenerate_schedules() {
    let inst = ProblemInstance::constant_op(2, 1.0, 1.0, 0.5).unwrap();
    let data = sample_dataset(inst.distribution().unwrap(), 4, 0).unwrap();
    assert!(matches!(nseg_run(&inst, &data, &config(0, 0.1, SamplingMode::FullBatch)), Err(Error::InvalidArgument(_))));
    let mut cfg = config(1, 0.0, SamplingMode::FullBatch);
    cfg.start = Some(vec![3.0, 4.0]);
    let traj = nseg_run(&inst, &data, &cfg).unwrap();
    assert_vec_close(&traj.output, &[0.6, 0.8], 1e-15);
    assert_eq!(traj.output, traj.steps[0].w);
}

#[test]
fn run_errors() {
    let (inst, data) = pennies_data(10);
    let mut cfg = config(6, 0.1, SamplingMode::DisjointSinglePass);
    assert!(matches!(nseg_run(&inst, &data, &cfg), Err(Error::InvalidArgument(_))));
    cfg.iterations = 5;
    assert!(nseg_run(&inst, &data, &cfg).is_ok());
    let too_big = config(3, 1.01 * max_stepsize(inst.constants.l), SamplingMode::FullBatch);
    assert!(matches!(nseg_run(&inst, &data, &too_big), Err(Error::Precondition(_))));
}

#[test]
fn matching_pennies_converges() {
    let gap = pennies_gap(2000);
    assert!(gap <= 0.05, "gap {gap}");
    assert!(pennies_gap(4000) < pennies_gap(500));
}

#[test]
fn output_is_weighted_average_and_iterates_feasible() {
    let inst = ProblemInstance::matching_pennies(0.3, 0.2).unwrap();
    let data = sample_dataset(inst.distribution().unwrap(), 30, 2).unwrap();
    let cfg = NsegConfig {
        iterations: 15,
        stepsizes: Schedule::PerStep((1..=15).map(|t| 0.2 / t as f64).collect()),
        batch_sizes: Schedule::Constant(2),
        noise_variances: Schedule::Constant(0.3),
        sampling_mode: SamplingMode::WithReplacement,
        seed: 5,
        start: None,
        record: true,
    };
    let traj = nseg_run(&inst, &data, &cfg).unwrap();
    let mut acc = [0.0; 4];
    let mut total = 0.0;
    for (t, st) in traj.steps.iter().enumerate() {
        assert!(inst.set.contains(&st.u, 1e-9) && inst.set.contains(&st.w, 1e-9));
        assert_eq!(st.batch_first.len(), 2);
        let g = 0.2 / (t + 1) as f64;
        for (a, w) in acc.iter_mut().zip(&st.w) {
            *a += g * w;
        }
        total += g;
    }
    let want: Vec<f64> = acc.iter().map(|v| v / total).collect();
    assert_vec_close(&traj.output, &want, 1e-14);
    assert!(inst.set.contains(&traj.output, 1e-9));
}

#[test]
fn runs_are_deterministic() {
    let inst = ProblemInstance::matching_pennies(0.3, 0.2).unwrap();
    let data = sample_dataset(inst.distribution().unwrap(), 40, 2).unwrap();
    let mut cfg = config(20, 0.1, SamplingMode::DisjointSinglePass);
    cfg.noise_variances = Schedule::Constant(0.5);
    let a = nseg_run(&inst, &data, &cfg).unwrap();
    let b = nseg_run(&inst, &data, &cfg).unwrap();
    assert_eq!(a, b);
    cfg.seed = 2;
    assert_ne!(nseg_run(&inst, &data, &cfg).unwrap(), a);
    assert_eq!(a.steps[3].batch_first, vec![6]);
    assert_eq!(a.steps[3].batch_second, vec![7]);
}

#[test]
fn single_pass_policy_examples() {
    let c = Constants { m: 1.0, l: 1.0, d: 1.0 };
    let b = PrivacyBudget::new(1.0, 1.0 / E).unwrap();
    let cfg = nseg_single_pass_policy(100, 16, Some(&b), c).unwrap();
    assert_eq!(cfg.batch_sizes.at(0), 4);
    assert_eq!(cfg.iterations, 12);
    assert_eq!(cfg.sampling_mode, SamplingMode::DisjointSinglePass);
    assert_eq!(cfg.noise_variances.at(0), nseg_noise_for_privacy(1.0, 4, 1.0, 1.0 / E).unwrap());
    let gamma = 1.0 / (7.0f64 * 12.0 * (1.0 + 8.0 * 16.0 / 16.0)).sqrt();
    assert!(close(cfg.stepsizes.at(0), gamma, 1e-15));
    assert!(matches!(nseg_single_pass_policy(3, 16, Some(&b), c), Err(Error::InvalidArgument(_))));
    let steep = Constants { m: 1.0, l: 100.0, d: 1.0 };
    let cfg = nseg_single_pass_policy(100, 16, Some(&b), steep).unwrap();
    assert!(close(cfg.stepsizes.at(0), max_stepsize(100.0), 1e-15));
}

#[test]
fn multipass_policy_examples() {
    let c = Constants { m: 1.0, l: 1.0, d: 1.0 };
    let b = PrivacyBudget::new(1.0, 1.0 / E).unwrap();
    let cfg = nseg_multipass_policy(100, 4, Some(&b), c).unwrap();
    assert!(close(cfg.stepsizes.at(0), 1e-3, 1e-15));
    assert_eq!(cfg.iterations, 10_000);
    assert!(close(cfg.noise_variances.at(0), 8.0, 1e-15));
    assert_eq!(cfg.batch_sizes.at(0), 1);
    assert_eq!(cfg.sampling_mode, SamplingMode::WithReplacement);
    for n in [1, 2, 5, 16, 64] {
        let cfg = nseg_multipass_policy(n, 3, Some(&b), Constants { m: 0.1, l: 5.0, d: 3.0 }).unwrap();
        assert_eq!(cfg.iterations, n * n);
        assert!(cfg.stepsizes.at(0) <= max_stepsize(5.0));
    }
}

#[test]
fn error_bound_examples() {
    let (m, d) = (1.5, 2.0);
    for (t, gamma) in [(10, 0.1), (100, 0.01), (1000, 0.05)] {
        let cfg = config(t, gamma, SamplingMode::FullBatch);
        let want = d * d / (gamma * t as f64) + 3.5 * gamma * m * m;
        assert!(close(nseg_error_bound(&cfg, m, 1.0, d, 2).unwrap(), want, 1e-13));
    }
    let vals: Vec<f64> = [10, 100, 1000, 10_000]
        .iter()
        .map(|&t| nseg_error_bound(&config(t, 0.05, SamplingMode::FullBatch), m, 1.0, d, 2).unwrap())
        .collect();
    assert!(vals.windows(2).all(|w| w[1] <= w[0]));
    assert!(matches!(
        nseg_error_bound(&config(5, 0.0, SamplingMode::FullBatch), m, 1.0, d, 2),
        Err(Error::InvalidArgument(_))
    ));
}

// With B = sqrt(d ln(1/eta))/eps the policy bound is
// sqrt(7 a 2B / n) (1 + b/a) MD with a = 1 + 8, b = 1/2 + 8, i.e. about
// 21.8 times the leading rate term sqrt(B/n) MD, for every n.
#[test]
fn single_pass_bound_tracks_rate_with_fixed_constant() {
    let c = Constants { m: 1.0, l: 1.0, d: 1.0 };
    let b = PrivacyBudget::new(1.0, 1.0 / E).unwrap();
    let dim = 16usize;
    let want = (7.0f64 * 9.0 * 2.0).sqrt() * (1.0 + 8.5 / 9.0);
    for n in [1_000usize, 10_000, 100_000, 1_000_000] {
        let cfg = nseg_single_pass_policy(n, dim, Some(&b), c).unwrap();
        let bound = nseg_error_bound(&cfg, 1.0, 1.0, 1.0, dim).unwrap();
        let nf = n as f64;
        let rate = ((dim as f64).powf(0.25) / nf.sqrt()).max((dim as f64).sqrt() / nf);
        let ratio = bound / rate;
        assert!((ratio - want).abs() <= 0.02 * want, "n = {n}: ratio {ratio}, expected about {want}");
    }
}

#[test]
fn config_json_round_trip() {
    let mut cfg = config(3, 0.1, SamplingMode::WithReplacement);
    cfg.stepsizes = Schedule::PerStep(vec![0.1, 0.2, 0.3]);
    let j = serde_json::to_value(&cfg).unwrap();
    assert_eq!(j["sampling_mode"], "with_replacement");
    assert_eq!(j["stepsizes"][2], 0.3);
    let back: NsegConfig = serde_json::from_value(j).unwrap();
    assert_eq!(back, cfg);
}
