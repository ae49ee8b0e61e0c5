//! Property suites behind `qfix verify`. Every instance draws from its own
//! RNG stream keyed by the check name and instance index, so results do not
//! depend on how instances are spread over threads.

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::gradcheck::{detach_check, grad_check_mixer, grad_check_utilities};
use super::stateful::{enumerate_histories, stateful_igm_check, state_only_witness};
use super::{
    advantage_constraint_check, best_additive_fit, fit_target_table, igm_check, perturb_near_tie, random_igm_target,
    random_table, random_utilities, FitOptions, JointValueTable, TargetParams, ARGMAX_TOL,
};
use crate::agents::{AgentConfig, UtilityNetwork};
use crate::envs::{Environment, LatentStateMatrixGame, PayoffTable};
use crate::error::{Error, Result};
use crate::mixers::{Conditioning, Fault, Mixer, MixerDims, MixerKind, MixerSpec};
use crate::par::{self, Exec};
use crate::seed;

const MAX_WITNESSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Igm,
    Stateful,
    Detach,
    Grad,
    Completeness,
    All,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Igm => "igm",
            Suite::Stateful => "stateful",
            Suite::Detach => "detach",
            Suite::Grad => "grad",
            Suite::Completeness => "completeness",
            Suite::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Suite::Igm, Suite::Stateful, Suite::Detach, Suite::Grad, Suite::Completeness, Suite::All]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub check_name: String,
    pub instances: usize,
    pub failures: usize,
    pub witnesses: Vec<Value>,
    /// Per-check breakdown.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<SuiteReport>,
}

impl SuiteReport {
    fn leaf(name: impl Into<String>) -> Self {
        Self {
            check_name: name.into(),
            instances: 0,
            failures: 0,
            witnesses: Vec::new(),
            checks: Vec::new(),
        }
    }

    fn record(&mut self, failed: bool, witness: impl FnOnce() -> Value) {
        self.instances += 1;
        if failed {
            self.failures += 1;
            if self.witnesses.len() < MAX_WITNESSES {
                self.witnesses.push(witness());
            }
        }
    }

    /// Sums children into a parent report.
    pub fn aggregate(name: impl Into<String>, checks: Vec<SuiteReport>) -> Self {
        let mut out = Self::leaf(name);
        for c in &checks {
            out.instances += c.instances;
            out.failures += c.failures;
            for w in &c.witnesses {
                if out.witnesses.len() < MAX_WITNESSES {
                    out.witnesses.push(json!({"check": c.check_name, "witness": w}));
                }
            }
        }
        out.checks = checks;
        out
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    pub fn find(&self, name: &str) -> Option<&SuiteReport> {
        if self.check_name == name {
            return Some(self);
        }
        self.checks.iter().find_map(|c| c.find(name))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteOptions {
    pub master_seed: u64,
    pub exec: Exec,
    /// Deliberate mixer defect, to confirm the checks catch it.
    pub fault: Option<Fault>,
    /// Overrides every per-check instance count (for quick runs).
    pub instances: Option<usize>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            master_seed: 0,
            exec: Exec::Parallel,
            fault: None,
            instances: None,
        }
    }
}

impl SuiteOptions {
    fn count(&self, default: usize) -> usize {
        self.instances.unwrap_or(default)
    }

    fn rng(&self, check: &str, instance: usize) -> seed::Rng {
        seed::stream(self.master_seed, instance as u64, check)
    }

    /// Runs `f` on every instance and folds the outcomes into one report.
    /// `f` returns `Ok(None)` on success and `Ok(Some(witness))` on failure.
    fn run(&self, check: &str, n: usize, f: impl Fn(&mut seed::Rng) -> Result<Option<Value>> + Send + Sync) -> Result<SuiteReport> {
        let outcomes = par::map_indexed(n, self.exec, |i| f(&mut self.rng(check, i)));
        let mut report = SuiteReport::leaf(check);
        for (i, o) in outcomes.into_iter().enumerate() {
            let o = o?;
            report.record(o.is_some(), || json!({"instance": i, "detail": o}));
        }
        Ok(report)
    }
}

pub fn run_suite(suite: Suite, opts: &SuiteOptions) -> Result<SuiteReport> {
    match suite {
        Suite::Igm => igm_suite(opts),
        Suite::Stateful => stateful_suite(opts),
        Suite::Detach => detach_suite(opts),
        Suite::Grad => grad_suite(opts),
        Suite::Completeness => completeness_suite(opts),
        Suite::All => {
            let parts = [Suite::Igm, Suite::Stateful, Suite::Detach, Suite::Grad, Suite::Completeness]
                .into_iter()
                .map(|s| run_suite(s, opts))
                .collect::<Result<Vec<_>>>()?;
            Ok(SuiteReport::aggregate("all", parts))
        }
    }
}

/// Kinds paired with the conditionings they are checked under. VDN ignores
/// its conditioning, so it is checked once.
pub fn igm_combinations() -> Vec<(MixerKind, Conditioning)> {
    let mut out = vec![(MixerKind::Vdn, Conditioning::Stateless)];
    for kind in MixerKind::ALL.into_iter().filter(|k| *k != MixerKind::Vdn) {
        out.extend(Conditioning::ALL.into_iter().map(|c| (kind, c)));
    }
    out
}

fn random_counts(rng: &mut impl Rng) -> Vec<usize> {
    let n = rng.gen_range(2..=3);
    (0..n).map(|_| rng.gen_range(2..=5)).collect()
}

/// One random mixer instance: random shape, parameters, utilities and
/// conditioning. Returns the composed table.
fn random_mixer_table(kind: MixerKind, conditioning: Conditioning, fault: Option<Fault>, rng: &mut impl Rng) -> Result<JointValueTable> {
    let counts = random_counts(rng);
    let dims = MixerDims {
        action_counts: counts.clone(),
        history_dim: 4,
        state_dim: 3,
    };
    let mut mixer = Mixer::new(MixerSpec::new(kind).with_conditioning(conditioning), dims)?;
    if let Some(f) = fault {
        mixer = mixer.with_fault(f);
    }
    let store = mixer.init(rng);
    let utilities = random_utilities(rng, &counts);
    let history: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let state: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let values = mixer.joint_values(&store, &utilities, &conditioning.build(&history, &state))?;
    JointValueTable::new(values, utilities)
}

fn fault_applies(fault: Option<Fault>, kind: MixerKind) -> Option<Fault> {
    match fault {
        Some(Fault::NegateMonotonicWeights) if kind == MixerKind::Qmix => fault,
        _ => None,
    }
}

/// Every mixer kind composes IGM tables, and the advantage biconditional
/// agrees with the IGM check on random and near-tie tables.
pub fn igm_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    for (kind, cond) in igm_combinations() {
        let fault = fault_applies(opts.fault, kind);
        let name = format!("igm.{}.{}", kind.name(), cond.name());
        checks.push(opts.run(&name, opts.count(1000), |rng| {
            let table = random_mixer_table(kind, cond, fault, rng)?;
            let report = igm_check(&table, ARGMAX_TOL)?;
            Ok((!report.holds).then(|| json!({"witness": report.witness, "table": table})))
        })?);
    }
    checks.push(advantage_agreement(opts, opts.count(9_900), opts.count(100))?);
    Ok(SuiteReport::aggregate("igm", checks))
}

fn advantage_agreement(opts: &SuiteOptions, random: usize, near_tie: usize) -> Result<SuiteReport> {
    let check = |table: &JointValueTable| -> Result<Option<Value>> {
        let igm = igm_check(table, ARGMAX_TOL)?.holds;
        let adv = advantage_constraint_check(table, ARGMAX_TOL)?;
        Ok((igm != adv).then(|| json!({"igm": igm, "advantage": adv, "table": table})))
    };
    let a = opts.run("advantage.random", random, |rng| {
        let counts = random_counts(rng);
        check(&random_table(rng, &counts)?)
    })?;
    let b = opts.run("advantage.near_tie", near_tie, |rng| {
        let counts = random_counts(rng);
        let base = if rng.gen_bool(0.5) {
            random_igm_target(rng, &counts, &TargetParams::default())?
        } else {
            random_table(rng, &counts)?
        };
        check(&perturb_near_tie(rng, &base)?)
    })?;
    Ok(SuiteReport::aggregate("advantage", vec![a, b]))
}

/// A random two-state latent game with a random reading accuracy and prior.
pub fn random_latent_game(rng: &mut impl Rng) -> Result<LatentStateMatrixGame> {
    let a = rng.gen_range(2..=3);
    let counts = vec![a, a];
    let size: usize = counts.iter().product();
    let payoffs = (0..2)
        .map(|_| PayoffTable::new(counts.clone(), (0..size).map(|_| rng.gen_range(-5.0..5.0)).collect()))
        .collect::<Result<Vec<_>>>()?;
    let p: f64 = rng.gen_range(0.1..0.9);
    LatentStateMatrixGame::new(payoffs, vec![p, 1.0 - p], rng.gen_range(0.5..1.0), 2, 0.99)
}

/// Pointwise and posterior-marginalized IGM for state-conditioned Q+FIX on
/// the latent game, plus the state-only completeness witness.
pub fn stateful_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    for (kind, cond) in [
        (MixerKind::QplusfixSum, Conditioning::StateOnly),
        (MixerKind::QplusfixSum, Conditioning::HistoryState),
        (MixerKind::QplusfixMono, Conditioning::StateOnly),
        (MixerKind::QplusfixMono, Conditioning::HistoryState),
    ] {
        let name = format!("stateful.{}.{}", kind.name(), cond.name());
        checks.push(opts.run(&name, opts.count(200), |rng| {
            let game = random_latent_game(rng)?;
            let agents = UtilityNetwork::new(
                AgentConfig {
                    window: 2,
                    hidden: 16,
                    shared: true,
                },
                game.spec(),
            )?;
            let dims = MixerDims {
                action_counts: game.spec().action_counts.clone(),
                history_dim: agents.joint_window_dim(),
                state_dim: game.spec().state_dim,
            };
            let mixer = Mixer::new(MixerSpec::new(kind).with_conditioning(cond).with_widths(16), dims)?;
            let mut store = agents.init(rng);
            store.extend(mixer.init(rng));
            let histories = enumerate_histories(&game, 2)?;
            let report = stateful_igm_check(&game, &agents, &mixer, &store, &histories, ARGMAX_TOL)?;
            Ok((!report.holds).then(|| json!(report.failure)))
        })?);
    }
    checks.push(witness_check(opts, opts.count(10))?);
    Ok(SuiteReport::aggregate("stateful", checks))
}

/// Passes when at least 8 in 10 constructed targets reproduce the
/// separation. Each non-reproducing target is recorded as a witness, but
/// the check only fails as a whole.
fn witness_check(opts: &SuiteOptions, n: usize) -> Result<SuiteReport> {
    let outcomes = par::map_indexed(n, opts.exec, |i| {
        let mut rng = opts.rng("stateful.state_only_witness", i);
        let fit = FitOptions {
            seed: i as u64,
            ..FitOptions::default()
        };
        state_only_witness(&mut rng, 0.3, &fit)
    });
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let reproduced = outcomes.iter().filter(|o| o.reproduces()).count();
    let mut report = SuiteReport::leaf("stateful.state_only_witness");
    report.instances = n;
    let needed = (n * 8).div_ceil(10);
    if reproduced < needed {
        report.failures = 1;
        report.witnesses.push(json!({"reproduced": reproduced, "needed": needed, "outcomes": outcomes}));
    }
    Ok(report)
}

/// Detach on: agent gradients of Q+FIX equal the fixee's. Detach off:
/// they differ on at least 95% of instances.
pub fn detach_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    for kind in [MixerKind::QplusfixSum, MixerKind::QplusfixMono, MixerKind::QplusfixLin] {
        let on = MixerSpec::new(kind).with_detach(true).with_widths(8);
        checks.push(opts.run(&format!("detach.{}.on", kind.name()), opts.count(200), |rng| {
            let out = detach_check(&on, false, rng)?;
            Ok((out.max_abs_diff > 1e-10).then(|| json!(out)))
        })?);

        let off = MixerSpec::new(kind).with_widths(8);
        let n = opts.count(200);
        let outcomes = par::map_indexed(n, opts.exec, |i| detach_check(&off, false, &mut opts.rng(&format!("detach.{}.off", kind.name()), i)));
        let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
        let differ = outcomes.iter().filter(|o| o.max_abs_diff > 1e-10).count();
        let mut report = SuiteReport::leaf(format!("detach.{}.off", kind.name()));
        report.instances = n;
        if differ * 100 < n * 95 {
            report.failures = 1;
            report.witnesses.push(json!({"differ": differ, "instances": n}));
        }
        checks.push(report);

        checks.push(opts.run(&format!("detach.{}.zero", kind.name()), opts.count(200), |rng| {
            let out = detach_check(&off, true, rng)?;
            Ok((out.max_abs_diff > 1e-10).then(|| json!(out)))
        })?);
    }
    Ok(SuiteReport::aggregate("detach", checks))
}

/// Finite-difference checks for every mixer kind and the utility network.
pub fn grad_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    for kind in MixerKind::ALL {
        let spec = MixerSpec::new(kind)
            .with_conditioning(Conditioning::HistoryState)
            .with_widths(4);
        checks.push(opts.run(&format!("grad.{}", kind.name()), opts.count(100), |rng| {
            let counts = vec![rng.gen_range(2..=3), rng.gen_range(2..=3)];
            let out = grad_check_mixer(&spec, &counts, rng)?;
            Ok((!out.passed()).then(|| json!(out)))
        })?);
    }
    for kind in [MixerKind::Qplex, MixerKind::QplusfixSum, MixerKind::QplusfixLin] {
        let spec = MixerSpec::new(kind).with_detach(true).with_widths(4);
        checks.push(opts.run(&format!("grad.{}.detach", kind.name()), opts.count(100), |rng| {
            let out = grad_check_mixer(&spec, &[2, 3], rng)?;
            Ok((!out.passed()).then(|| json!(out)))
        })?);
    }
    checks.push(opts.run("grad.utility_network", opts.count(100), |rng| {
        let out = grad_check_utilities(rng)?;
        Ok((!out.passed()).then(|| json!(out)))
    })?);
    Ok(SuiteReport::aggregate("grad", checks))
}

/// Penalty game payoff, used as a non-additive target.
pub const PENALTY: [[f64; 3]; 3] = [[8.0, -12.0, -12.0], [-12.0, 0.0, 0.0], [-12.0, 0.0, 0.0]];

pub fn penalty_values() -> Vec<f64> {
    PENALTY.iter().flatten().copied().collect()
}

/// Q+FIX fits random IGM targets; the best additive fit cannot represent
/// the penalty table or most random targets.
pub fn completeness_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let n = opts.count(50);
    let mut checks = Vec::new();
    for kind in [MixerKind::QplusfixSum, MixerKind::QplusfixMono, MixerKind::QplusfixLin] {
        let name = format!("completeness.{}", kind.name());
        let errors = par::map_indexed(n, opts.exec, |i| -> Result<f64> {
            let mut rng = opts.rng("completeness.targets", i);
            let target = random_igm_target(&mut rng, &[3, 3], &TargetParams::default())?;
            let fit = FitOptions {
                seed: i as u64,
                ..FitOptions::default()
            };
            Ok(fit_target_table(&MixerSpec::new(kind), &target, &fit)?.0.max_abs_error)
        });
        let errors = errors.into_iter().collect::<Result<Vec<_>>>()?;
        let good = errors.iter().filter(|e| **e < 1e-2).count();
        let mut report = SuiteReport::leaf(name);
        report.instances = n;
        if good * 100 < n * 95 {
            report.failures = 1;
            report.witnesses.push(json!({"fitted": good, "instances": n, "errors": errors}));
        }
        checks.push(report);
    }

    let mut vdn = SuiteReport::leaf("completeness.vdn_penalty");
    let fit = best_additive_fit(&[3, 3], &penalty_values())?;
    vdn.record(fit.residual_sup <= 1.0 || fit.greedy == [0, 0], || json!(fit));
    checks.push(vdn);

    let mut median = SuiteReport::leaf("completeness.vdn_random_targets");
    let mut residuals = (0..n)
        .map(|i| {
            let mut rng = opts.rng("completeness.targets", i);
            let target = random_igm_target(&mut rng, &[3, 3], &TargetParams::default())?;
            Ok(best_additive_fit(&[3, 3], &target.values)?.residual_sup)
        })
        .collect::<Result<Vec<f64>>>()?;
    residuals.sort_by(f64::total_cmp);
    let med = residuals.get(residuals.len() / 2).copied().unwrap_or(0.0);
    median.record(med < 0.1, || json!({"median_residual": med}));
    checks.push(median);
    Ok(SuiteReport::aggregate("completeness", checks))
}

/// Error for reports whose failures should stop a caller.
pub fn require_pass(report: &SuiteReport) -> Result<()> {
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} failed {} of {} instances", report.check_name, report.failures, report.instances)))
    }
}
