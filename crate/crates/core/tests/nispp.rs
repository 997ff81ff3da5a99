mod common;

use common::*;
use dpvi_core::gap::{strong_gap, OperatorSource};
use dpvi_core::linalg::Matrix;
use dpvi_core::nispp::{
    certify_prox, certify_prox_solution, nispp_error_bound, nispp_multipass_policy, nispp_noise_for_privacy, nispp_run,
    nispp_sensitivity_bound, nispp_single_pass_policy, oe_iteration_count, oe_solve, prox_step, InnerControls,
    NisppConfig,
};
use dpvi_core::nseg::SamplingMode;
use dpvi_core::privacy::{subsampled_composition_sigma, PrivacyBudget};
use dpvi_core::problems::sample_dataset;
use dpvi_core::schedule::Schedule;
use dpvi_core::{Constants, Datapoint, Dataset, Error, FeasibleSet, Operator, ProblemInstance};
use proptest::prelude::*;
use rand::Rng;

const E: f64 = std::f64::consts::E;

fn zero(w: &[f64]) -> Vec<f64> {
    vec![0.0; w.len()]
}

fn identity(w: &[f64]) -> Vec<f64> {
    w.to_vec()
}

fn config(k: usize, lambda: f64, batch: usize, nu: f64, mode: SamplingMode) -> NisppConfig {
    NisppConfig {
        iterations: k,
        weights: Schedule::Constant(1.0),
        regularization: Schedule::Constant(lambda),
        batch_size: batch,
        accuracy: nu,
        noise_variances: Schedule::Constant(0.0),
        sampling_mode: mode,
        seed: 3,
        inner: InnerControls::default(),
        start: None,
        record: true,
    }
}

#[test]
fn oe_examples() {
    let ball = FeasibleSet::centered_ball(2, 2.0).unwrap();
    let wk = [1.0, 0.0];
    assert_eq!(oe_solve(&zero, &wk, 0.7, 0.0, &ball, 1).unwrap(), wk.to_vec());
    let mut prev = f64::INFINITY;
    for t in [1, 5, 10, 20, 40] {
        let z = oe_solve(&identity, &wk, 1.0, 1.0, &ball, t).unwrap();
        let e = dist(&z, &[0.5, 0.0]);
        assert!(e < prev);
        prev = e;
    }
    assert!(prev < 1e-6);
    assert!(oe_solve(&identity, &wk, 1.0, 1.0, &ball, 0).is_err());
    assert!(oe_solve(&identity, &wk, 0.0, 1.0, &ball, 3).is_err());
}

struct Affine {
    q: Matrix,
    c: Vec<f64>,
}

impl Operator for Affine {
    fn eval(&self, w: &[f64]) -> Vec<f64> {
        let mut v = self.q.mul_vec(w);
        for (a, b) in v.iter_mut().zip(&self.c) {
            *a += b;
        }
        v
    }
}

fn random_monotone(seed: u64, d: usize) -> (Affine, f64) {
    let mut r = rng(seed);
    let g: Vec<Vec<f64>> = (0..d).map(|_| random_vec(&mut r, d, 1.0)).collect();
    let k: Vec<Vec<f64>> = (0..d).map(|_| random_vec(&mut r, d, 1.0)).collect();
    let q = Matrix::from_fn(d, d, |i, j| {
        (0..d).map(|t| g[t][i] * g[t][j]).sum::<f64>() / d as f64 + 0.5 * (k[i][j] - k[j][i])
    });
    let l = q.op_norm();
    (Affine { q, c: random_vec(&mut r, d, 1.0) }, l)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    // The iterate after T updates, z_{T+1}, against the closed-form solution
    // of (Q + lambda I) u = lambda w_k - c, interior to a large ball.
    #[test]
    fn oe_linear_rate(seed in any::<u64>(), d in 1usize..=5, ratio in 1.0f64..50.0) {
        let (op, l) = random_monotone(seed, d);
        let lambda = ratio * l.max(1e-3);
        let mut r = rng(seed ^ 9);
        let wk = random_vec(&mut r, d, 1.0);
        let shifted = Matrix::from_fn(d, d, |i, j| op.q.get(i, j) + if i == j { lambda } else { 0.0 });
        let rhs: Vec<f64> = wk.iter().zip(&op.c).map(|(w, c)| lambda * w - c).collect();
        let u_star = shifted.solve(&rhs).unwrap();
        let set = FeasibleSet::centered_ball(d, 1e3).unwrap();
        let kappa = lambda / (l + lambda) + 1.0;
        let e1 = dist(&wk, &u_star).powi(2);
        for t in 1..=200 {
            let z = oe_solve(&op, &wk, lambda, l, &set, t).unwrap();
            let et = dist(&z, &u_star).powi(2);
            prop_assert!(et <= kappa.powi(-(t as i32)) * e1 * (1.0 + 1e-6) + 1e-24, "T = {}: {} vs {}", t, et, kappa.powi(-(t as i32)) * e1);
        }
    }
}

#[test]
fn certificate_examples() {
    let ball = FeasibleSet::centered_ball(2, 2.0).unwrap();
    let nu = certify_prox(&identity, &ball, &[0.5, 0.0], &[1.0, 0.0], 1.0).unwrap();
    assert_eq!(nu, 0.0);

    let g = [1.0, 2.0, 3.0];
    let constant = move |_: &[f64]| g.to_vec();
    let sx = FeasibleSet::simplex(3, 1.0).unwrap();
    assert_eq!(certify_prox(&constant, &sx, &[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], 4.0).unwrap(), 0.0);
    let mut r = rng(5);
    for _ in 0..20 {
        let u = random_feasible(&mut r, &sx);
        let nu = certify_prox(&constant, &sx, &u, &u, 4.0).unwrap();
        let want = (0..3).map(|i| g[i] * u[i]).sum::<f64>() - 1.0;
        assert!((nu - want).abs() <= 1e-14);
    }
    assert!(matches!(certify_prox(&identity, &ball, &[3.0, 0.0], &[0.0, 0.0], 1.0), Err(Error::InvalidArgument(_))));
}

#[test]
fn certificate_for_dataset_batches() {
    let inst = ProblemInstance::matching_pennies(0.2, 0.1).unwrap();
    let data = sample_dataset(inst.distribution().unwrap(), 10, 3).unwrap();
    let batch = [1, 4, 4];
    let u = [0.3, 0.7, 0.5, 0.5];
    let wk = [0.1, 0.2, 0.3, 0.4];
    let cert = certify_prox_solution(&inst, &data, &batch, &u, &wk, 2.0).unwrap();
    let p = data.batch_payload(&batch).unwrap();
    let g: Vec<f64> = p.apply(inst.constants.m, &u).iter().enumerate().map(|(i, f)| f + 2.0 * (u[i] - wk[i])).collect();
    // vertex enumeration of min_W <g, w> over the product of two simplices
    let min = g[0].min(g[1]) + g[2].min(g[3]);
    let want = dot(&g, &u) - min;
    assert!((cert.nu_actual - want.max(0.0)).abs() <= 1e-14);
}

#[test]
fn constant_operator_run_heads_to_the_boundary() {
    let inst = ProblemInstance::constant_op(2, 1.5, 1.0, 0.5).unwrap();
    let s = 1.0 / 2f64.sqrt();
    let data =
        Dataset::new(vec![Datapoint::ConstantOp { beta: vec![s, s] }, Datapoint::ConstantOp { beta: vec![s, -s] }])
            .unwrap();
    let cfg = config(60, 2.0, 2, 1e-9, SamplingMode::WithReplacement);
    let traj = nispp_run(&inst, &data, &cfg).unwrap();
    let last = &traj.steps.last().unwrap().u;
    assert_vec_close(last, &[-1.5, 0.0], 1e-4);
    let g0 = strong_gap(&inst, OperatorSource::Dataset(&data), &traj.start).unwrap().value;
    let g1 = strong_gap(&inst, OperatorSource::Dataset(&data), &traj.output).unwrap().value;
    assert!(g1 < g0);
}

#[test]
fn single_step_is_one_prox_step() {
    let inst = ProblemInstance::matching_pennies(0.3, 0.2).unwrap();
    let data = sample_dataset(inst.distribution().unwrap(), 12, 1).unwrap();
    let nu = 1e-10;
    let cfg = config(0, 5.0, 4, nu, SamplingMode::DisjointSinglePass);
    let traj = nispp_run(&inst, &data, &cfg).unwrap();
    let op = inst.operator(data.batch_payload(&[0, 1, 2, 3]).unwrap());
    let c = inst.constants;
    let w0 = inst.set.project(&[0.0; 4]).unwrap();
    let (u, _) = prox_step(&op, &inst.set, &w0, 5.0, c.l, c.m, c.d, nu, &InnerControls::default()).unwrap();
    assert_eq!(traj.output, u);
}

#[test]
fn matching_pennies_converges() {
    let inst = ProblemInstance::matching_pennies(0.0, 0.0).unwrap();
    let data = sample_dataset(inst.distribution().unwrap(), 400, 0).unwrap();
    let c = inst.constants;
    let lambda = c.m / c.d * 20.0;
    let mut cfg = config(400, lambda, 20, 1e-8, SamplingMode::WithReplacement);
    cfg.start = Some(vec![1.0, 0.0, 1.0, 0.0]);
    cfg.record = false;
    let traj = nispp_run(&inst, &data, &cfg).unwrap();
    let gap = strong_gap(&inst, OperatorSource::Dataset(&data), &traj.output).unwrap().value;
    assert!(gap <= 0.1 * c.m * c.d, "gap {gap}");
    assert!(traj.certificates.iter().all(|ct| ct.nu_actual <= 1e-8));
}

#[test]
fn run_invariants() {
    let inst = ProblemInstance::matching_pennies(0.3, 0.2).unwrap();
    let data = sample_dataset(inst.distribution().unwrap(), 50, 6).unwrap();
    let mut cfg = config(30, 4.0, 5, 1e-6, SamplingMode::WithReplacement);
    cfg.noise_variances = Schedule::Constant(0.05);
    cfg.weights = Schedule::PerStep((0..31).map(|k| 1.0 + k as f64).collect());
    cfg.regularization = Schedule::PerStep((0..31).map(|k| 4.0 / (1.0 + k as f64)).collect());
    let traj = nispp_run(&inst, &data, &cfg).unwrap();
    assert_eq!(traj, nispp_run(&inst, &data, &cfg).unwrap());
    assert_eq!(traj.certificates.len(), 31);
    let mut infeasible = 0;
    let mut noise_acc = [0.0; 4];
    let mut total = 0.0;
    for (k, (st, ct)) in traj.steps.iter().zip(&traj.certificates).enumerate() {
        assert!(ct.nu_actual <= cfg.accuracy);
        let lambda = cfg.regularization.at(k);
        let anchor = if k == 0 { traj.start.clone() } else { traj.steps[k - 1].w.clone() };
        let again = certify_prox_solution(&inst, &data, &st.batch, &st.u, &anchor, lambda).unwrap();
        assert!((again.nu_actual - ct.nu_actual).abs() <= 1e-12);
        let mut sorted = st.batch.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 5);
        assert_vec_close(&st.w, &st.u.iter().zip(&st.noise).map(|(a, b)| a + b).collect::<Vec<_>>(), 0.0);
        if !inst.set.contains(&st.w, 1e-9) {
            infeasible += 1;
        }
        let g = cfg.weights.at(k);
        for (a, z) in noise_acc.iter_mut().zip(&st.noise) {
            *a += g * z;
        }
        total += g;
    }
    assert!(infeasible > 0);
    let avg_noise: Vec<f64> = noise_acc.iter().map(|v| v / total).collect();
    let dist_avg = inst.set.dist(&traj.average).unwrap();
    assert!(dist_avg * dist_avg <= avg_noise.iter().map(|v| v * v).sum::<f64>() + 1e-12);
    assert_eq!(traj.output, inst.set.project(&traj.average).unwrap());
}

#[test]
fn config_validation() {
    let inst = ProblemInstance::matching_pennies(0.0, 0.0).unwrap();
    let data = sample_dataset(inst.distribution().unwrap(), 20, 0).unwrap();
    let mut cfg = config(4, 2.0, 5, 1e-6, SamplingMode::DisjointSinglePass);
    assert!(nispp_run(&inst, &data, &cfg).is_err());
    cfg.iterations = 3;
    assert!(nispp_run(&inst, &data, &cfg).is_ok());
    cfg.weights = Schedule::PerStep(vec![1.0, 2.0, 1.0, 1.0]);
    assert!(matches!(nispp_run(&inst, &data, &cfg), Err(Error::Precondition(_))));
    let full = config(3, 2.0, 5, 1e-6, SamplingMode::FullBatch);
    assert!(matches!(nispp_run(&inst, &data, &full), Err(Error::InvalidArgument(_))));
}

#[test]
fn inner_cap_reports_solver_failure() {
    let inst = ProblemInstance::matching_pennies(0.0, 0.0).unwrap();
    let data = sample_dataset(inst.distribution().unwrap(), 20, 0).unwrap();
    let mut cfg = config(3, 0.5, 5, 1e-14, SamplingMode::WithReplacement);
    cfg.start = Some(vec![1.0, 0.0, 1.0, 0.0]);
    cfg.inner = InnerControls { initial_iterations: Some(1), max_growth: 2 };
    assert!(matches!(nispp_run(&inst, &data, &cfg), Err(Error::SolverFailure(_))));
}

#[test]
fn sensitivity_bound_examples() {
    assert!(close(nispp_sensitivity_bound(1.0, 10.0, 10, 0.0).unwrap(), 0.04, 1e-15));
    let a = nispp_sensitivity_bound(2.0, 3.0, 4, 1e-4).unwrap();
    let b = nispp_sensitivity_bound(2.0, 6.0, 4, 1e-4).unwrap();
    assert!(close(b, a / 2.0, 1e-15));
    assert!(matches!(nispp_sensitivity_bound(1.0, 10.0, 10, 0.1), Err(Error::Precondition(_))));
}

#[test]
fn single_pass_policy_examples() {
    let c = Constants { m: 1.0, l: 1.0, d: 1.0 };
    let b = PrivacyBudget::new(1.0, 1.0 / E).unwrap();
    let cfg = nispp_single_pass_policy(1000, 4, Some(&b), c).unwrap();
    assert_eq!(cfg.batch_size, 10);
    assert!(close(cfg.regularization.at(0), 10.0, 1e-12));
    assert!(close(cfg.accuracy, 2e-3, 1e-12));
    assert!(close(cfg.accuracy, 2.0 / (cfg.regularization.at(0) * 100.0), 1e-15));
    assert!(cfg.satisfies_sensitivity_hypothesis(1.0));
    assert!((cfg.iterations + 1) * cfg.batch_size <= 1000);
    assert_eq!(cfg.iterations, 99);
    assert_eq!(
        cfg.noise_variances.at(0),
        nispp_noise_for_privacy(1.0, cfg.regularization.at(0), 10, 1.0, 1.0 / E).unwrap()
    );
    for n in [8usize, 26, 27, 63, 64, 999, 1001, 100_000] {
        let cfg = nispp_single_pass_policy(n, 4, Some(&b), c).unwrap();
        let bs = cfg.batch_size;
        assert!(bs.pow(3) <= n && (bs + 1).pow(3) > n);
        assert!((cfg.iterations + 1) * bs <= n);
    }
    assert!(nispp_single_pass_policy(7, 4, Some(&b), c).is_err());
}

#[test]
fn multipass_policy_examples() {
    let c = Constants { m: 1.0, l: 1.0, d: 1.0 };
    let b = PrivacyBudget::new(1.0, 1.0 / E).unwrap();
    let cfg = nispp_multipass_policy(100, 4, Some(&b), c).unwrap();
    assert!(close(cfg.regularization.at(0), 10.0, 1e-15));
    assert_eq!(cfg.batch_size, 10);
    assert_eq!(cfg.iterations, 100);
    assert!(close(cfg.accuracy, 1e-5, 1e-12));
    assert!(close(cfg.noise_variances.at(0).sqrt(), 0.08, 1e-12));
    assert_eq!(cfg.sampling_mode, SamplingMode::WithReplacement);
    assert!(cfg.satisfies_sensitivity_hypothesis(1.0));

    for (n, m, eps) in [(100usize, 1.0, 1.0), (256, 2.0, 0.5), (1024, 0.3, 4.0)] {
        let c = Constants { m, l: 1.0, d: 1.0 };
        let bud = PrivacyBudget::new(eps, 1e-5).unwrap();
        let cfg = nispp_multipass_policy(n, 4, Some(&bud), c).unwrap();
        let lam = cfg.regularization.at(0);
        let s = 4.0 * m / (lam * cfg.batch_size as f64);
        let (sub, _) = subsampled_composition_sigma(n, s, cfg.batch_size, n, eps, 1e-5, 1.0).unwrap();
        assert!(close(cfg.noise_variances.at(0), 2.0 * sub * sub, 1e-12));
    }
}

#[test]
fn error_bound_examples() {
    let (m, l, d) = (1.0, 2.0, 1.5);
    let cfg = config(49, 7.0, 2, 1e-3, SamplingMode::WithReplacement);
    let want = 1e-3 + (1.5 * 7.0 * d * d + 50.0 * (4.0 * m * m + 3.0 * l * l * d * d) / 7.0) / 50.0;
    assert!(close(nispp_error_bound(&cfg, m, l, d, 3).unwrap(), want, 1e-14));
    let mut more = cfg.clone();
    more.accuracy = 1e-3 + 0.25;
    let diff = nispp_error_bound(&more, m, l, d, 3).unwrap() - nispp_error_bound(&cfg, m, l, d, 3).unwrap();
    assert!(close(diff, 0.25, 1e-12));
    let mut bad = cfg.clone();
    bad.weights = Schedule::PerStep(vec![1.0; 50]);
    bad.regularization = Schedule::PerStep((0..50).map(|k| 1.0 + k as f64).collect());
    assert!(matches!(nispp_error_bound(&bad, m, l, d, 3), Err(Error::Precondition(_))));

    let c = Constants { m: 1.0, l: 1.0, d: 1.0 };
    let b = PrivacyBudget::new(1.0, 1.0 / E).unwrap();
    let n = 1_000_000usize;
    let cfg = nispp_single_pass_policy(n, 1, Some(&b), c).unwrap();
    let bound = nispp_error_bound(&cfg, 1.0, 1.0, 1.0, 1).unwrap();
    let nf = n as f64;
    let rate = 2.0 * (nf.cbrt().recip() + 1.0 / nf.powf(2.0 / 3.0));
    assert!(bound / rate <= 10.0 && rate / bound <= 10.0, "bound {bound} rate {rate}");
}

#[test]
fn iteration_count_examples() {
    assert_eq!(oe_iteration_count(1.0, 1.0, 1.0, 1.0, 1e-4), 32);
    let lam: f64 = 1e6;
    // kappa -> 2 and the log argument -> 2 lambda D^2 / nu
    let want = (4.0f64 * (2.0 * lam / 1e-3).ln()).ceil() as usize;
    let got = oe_iteration_count(1.0, lam, 1.0, 1.0, 1e-3);
    assert!(got.abs_diff(want) <= 1);
    let mut r = rng(2);
    for _ in 0..50 {
        let a = r.random_range(1e-8..1.0);
        let b = r.random_range(1e-8..1.0);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        assert!(oe_iteration_count(2.0, 3.0, 1.0, 1.0, hi) <= oe_iteration_count(2.0, 3.0, 1.0, 1.0, lo));
    }
    assert_eq!(oe_iteration_count(1.0, 1.0, 1.0, 1.0, 1e9), 1);
}

#[test]
fn config_json_round_trip() {
    let cfg = config(3, 2.0, 5, 1e-6, SamplingMode::DisjointSinglePass);
    let j = serde_json::to_value(&cfg).unwrap();
    assert_eq!(j["sampling_mode"], "disjoint_single_pass");
    let back: NisppConfig = serde_json::from_value(j).unwrap();
    assert_eq!(back, cfg);
}
