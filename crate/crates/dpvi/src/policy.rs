use anyhow::{bail, Context};
use dpvi_core::nispp::{nispp_multipass_policy, nispp_single_pass_policy};
use dpvi_core::nseg::{nseg_multipass_policy, nseg_single_pass_policy};
use dpvi_core::privacy::PrivacyBudget;
use dpvi_core::stability::{SolverConfig, SolverKind};
use dpvi_core::ProblemInstance;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    SinglePass,
    Multipass,
    Custom,
}

/// Solver configuration for `n` datapoints. `custom` must be given for the
/// custom policy and is ignored otherwise. The seed is left at zero.
pub fn build_config(
    solver: SolverKind,
    policy: PolicyName,
    instance: &ProblemInstance,
    n: usize,
    budget: Option<&PrivacyBudget>,
    custom: Option<&SolverConfig>,
) -> anyhow::Result<SolverConfig> {
    let c = instance.constants;
    let d = instance.dim();
    let cfg = match (solver, policy) {
        (_, PolicyName::Custom) => {
            let cfg = custom.context("custom policy needs a solver configuration")?.clone();
            if cfg.kind() != solver {
                bail!("configuration is for {:?}, requested {:?}", cfg.kind(), solver);
            }
            cfg
        }
        (SolverKind::Nseg, PolicyName::SinglePass) => SolverConfig::Nseg(nseg_single_pass_policy(n, d, budget, c)?),
        (SolverKind::Nseg, PolicyName::Multipass) => SolverConfig::Nseg(nseg_multipass_policy(n, d, budget, c)?),
        (SolverKind::Nispp, PolicyName::SinglePass) => SolverConfig::Nispp(nispp_single_pass_policy(n, d, budget, c)?),
        (SolverKind::Nispp, PolicyName::Multipass) => SolverConfig::Nispp(nispp_multipass_policy(n, d, budget, c)?),
    };
    Ok(cfg)
}
