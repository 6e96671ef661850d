//! Policy elimination driven by per-step experiment design.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::design::{
    adaptive_xy_design, conditioned_cov, design_value, guarded_inverse, opt_cov, AdaptiveConfig, ConditionedCovConfig,
    GateMode, OptCovConfig, SmoothObjective, SmoothedXy, StepStatistics,
};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::mdp::{Environment, LinearMdp, Policy};
use crate::regret::RegMinKind;

/// `E_{a ~ pi_h(.|s)} phi(s, a)`.
pub fn policy_feature(mdp: &LinearMdp, policy: &Policy, h: usize, s: usize) -> Result<Vector> {
    let probs = policy.action_probs(mdp, h, s)?;
    let mut out = Vector::zeros(mdp.dim());
    for (a, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            out.axpy(*p, mdp.phi(s, a), 1.0);
        }
    }
    Ok(out)
}

fn check_estimable(stats: &StepStatistics, mdp: &LinearMdp) -> Result<()> {
    if stats.count == 0 {
        return Err(Error::Parameter(format!("no observations at step {}", stats.step)));
    }
    if stats.step + 1 >= mdp.horizon() {
        return Err(Error::Parameter(format!("step {} has no successor step", stats.step)));
    }
    Ok(())
}

/// `(sum_tau phi_{pi,h+1}(s_{h+1,tau}) phi_{h,tau}^T) (Sigma + ridge I)^{-1}`.
pub fn estimate_transition_operator(
    mdp: &LinearMdp,
    stats: &StepStatistics,
    policy: &Policy,
    ridge: f64,
) -> Result<Matrix> {
    check_estimable(stats, mdp)?;
    let d = mdp.dim();
    let inv = guarded_inverse(&stats.regularized(ridge))?;
    let mut acc = Matrix::zeros(d, d);
    for &s in mdp.layer(stats.step + 1) {
        let b = &stats.next_feat[s];
        if b.iter().any(|x| *x != 0.0) {
            let f = policy_feature(mdp, policy, stats.step + 1, s)?;
            acc.ger(1.0, &f, b, 1.0);
        }
    }
    Ok(acc * inv)
}

/// Applies the estimated transition operator to `phi_hat` without forming it.
pub fn propagate_visitation(
    mdp: &LinearMdp,
    stats: &StepStatistics,
    inv: &Matrix,
    policy: &Policy,
    phi_hat: &Vector,
) -> Result<Vector> {
    check_estimable(stats, mdp)?;
    let u = inv * phi_hat;
    let mut out = Vector::zeros(mdp.dim());
    for &s in mdp.layer(stats.step + 1) {
        let c = stats.next_feat[s].dot(&u);
        if c != 0.0 {
            out.axpy(c, &policy_feature(mdp, policy, stats.step + 1, s)?, 1.0);
        }
    }
    Ok(out)
}

/// Chained estimates `phi_hat_{pi,h+1}` for every policy.
pub fn estimate_feature_visitations(
    mdp: &LinearMdp,
    stats: &StepStatistics,
    ridge: f64,
    policies: &[&Policy],
    phi_hat: &[Vector],
) -> Result<Vec<Vector>> {
    let inv = guarded_inverse(&stats.regularized(ridge))?;
    policies.iter().zip(phi_hat).map(|(p, v)| propagate_visitation(mdp, stats, &inv, p, v)).collect()
}

/// Ridge estimate `(Sigma + ridge I)^{-1} sum phi r`.
pub fn estimate_reward_vector(stats: &StepStatistics, ridge: f64) -> Result<Vector> {
    let inv = guarded_inverse(&stats.regularized(ridge))?;
    Ok(inv * &stats.reward_feat)
}

/// Exact start-step visitation `E_{a ~ pi_0(.|s_0)} phi(s_0, a)`.
pub fn start_visitation(mdp: &LinearMdp, policy: &Policy) -> Result<Vector> {
    policy_feature(mdp, policy, 0, mdp.start())
}

/// Keeps every index whose value is within `2 eps` of the best.
pub fn eliminate(values: &[f64], eps: f64) -> Vec<bool> {
    let top = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values.iter().map(|v| *v >= top - 2.0 * eps).collect()
}

/// `64 H^4 log(4 H^2 |Pi| l^2 / delta)`, times `scale`.
pub fn epoch_beta(horizon: usize, active: usize, epoch: u32, delta: f64, scale: f64) -> f64 {
    let h = horizon as f64;
    let l = f64::from(epoch);
    64.0 * h.powi(4) * (4.0 * h * h * active as f64 * l * l / delta).ln() * scale
}

/// `(l0, l_end)` with `l0 = max(1, ceil(log2(d^{3/2} / H)))` capped at `l_end = ceil(log2(4/eps))`.
pub fn epoch_range(d: usize, horizon: usize, eps: f64) -> (u32, u32) {
    let end = (4.0 / eps).log2().ceil().max(1.0) as u32;
    let start = ((d as f64).powf(1.5) / horizon as f64).log2().ceil().max(1.0) as u32;
    (start.min(end), end)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignMode {
    Adaptive,
    OptCov,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PedelConfig {
    pub eps: f64,
    pub delta: f64,
    pub constant_scale: f64,
    pub design: DesignMode,
    /// Learner that navigates the model during design.
    pub regmin: RegMinKind,
    pub adaptive: AdaptiveConfig,
    pub max_episodes: u64,
    pub max_episodes_per_epoch: u64,
    pub start_epoch: Option<u32>,
}

impl PedelConfig {
    pub fn new(eps: f64, delta: f64) -> Self {
        Self {
            eps,
            delta,
            constant_scale: 1.0,
            design: DesignMode::Adaptive,
            regmin: RegMinKind::Oracle,
            adaptive: AdaptiveConfig::default(),
            max_episodes: u64::MAX,
            max_episodes_per_epoch: u64::MAX,
            start_epoch: None,
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < 1.0 && self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Parameter(format!("eps and delta must lie in (0,1), got {} and {}", self.eps, self.delta)));
        }
        if self.constant_scale <= 0.0 || self.max_episodes == 0 || self.max_episodes_per_epoch == 0 {
            return Err(Error::Parameter("constant_scale and episode caps must be positive".into()));
        }
        Ok(())
    }
}

/// One design phase at `(epoch, h)`, with what is needed to re-check its gate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub epoch: u32,
    pub step: usize,
    pub episodes: u64,
    pub active: Vec<usize>,
    pub design_value: f64,
    pub threshold: f64,
    pub reached: bool,
    /// `sum phi phi^T` of the phase, without the ridge.
    pub covariance: Matrix,
    pub ridge: f64,
    /// `phi_hat_{pi,h}` for the active policies, in `active` order.
    pub targets: Vec<Vector>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub eps: f64,
    pub beta: f64,
    pub active: Vec<usize>,
    pub values: Vec<f64>,
    pub v_max: f64,
    pub survivors: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PedelFlags {
    pub budget_exhausted: bool,
    pub early_stopped: bool,
    pub trivial: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PedelResult {
    pub policy_id: usize,
    pub episodes_total: u64,
    pub flags: PedelFlags,
    pub constant_scale: f64,
    pub phases: Vec<PhaseRecord>,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Serialize)]
struct ResultSummary<'a> {
    policy_id: usize,
    episodes_total: u64,
    flags: &'a PedelFlags,
    constant_scale: f64,
}

impl PedelResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ResultSummary {
            policy_id: self.policy_id,
            episodes_total: self.episodes_total,
            flags: &self.flags,
            constant_scale: self.constant_scale,
        })?)
    }

    /// Columns `epoch,h,episodes_this_phase,design_value_achieved,active,v_hat_max,eliminated_count`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("epoch,h,episodes_this_phase,design_value_achieved,active,v_hat_max,eliminated_count\n");
        for ph in &self.phases {
            let ep = self.epochs.iter().find(|e| e.epoch == ph.epoch);
            let (vmax, elim) = match ep {
                Some(e) => (e.v_max.to_string(), (e.active.len() - e.survivors.len()).to_string()),
                None => (String::new(), String::new()),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                ph.epoch,
                ph.step,
                ph.episodes,
                ph.design_value,
                ph.active.len(),
                vmax,
                elim
            );
        }
        out
    }

    /// Recomputes each completed phase's gate from the stored matrices.
    /// Returns `(epoch, h, value, threshold)` for every phase that fails.
    pub fn certify_gates(&self) -> Result<Vec<(u32, usize, f64, f64)>> {
        let mut bad = vec![];
        for ph in self.phases.iter().filter(|p| p.reached) {
            let v = design_value(&ph.covariance, ph.ridge, &ph.targets)?;
            if v > ph.threshold + 1e-10 {
                bad.push((ph.epoch, ph.step, v, ph.threshold));
            }
        }
        Ok(bad)
    }

    /// Active sets are nested across epochs.
    pub fn is_nested(&self) -> bool {
        self.epochs.windows(2).all(|w| w[1].active.iter().all(|i| w[0].survivors.contains(i)))
            && self.epochs.iter().all(|e| e.survivors.iter().all(|i| e.active.contains(i)))
    }
}

fn collect_phase(
    env: &mut Environment,
    cfg: &PedelConfig,
    targets: &[Vector],
    h: usize,
    ridge: f64,
    threshold: f64,
    budget: u64,
    epoch: u32,
) -> Result<(StepStatistics, bool)> {
    let mdp = env.mdp();
    let mut learner = cfg.regmin.build();
    match cfg.design {
        DesignMode::Adaptive => {
            let acfg = AdaptiveConfig { max_episodes: cfg.adaptive.max_episodes.min(budget), ..cfg.adaptive };
            let res = adaptive_xy_design(env, learner.as_mut(), targets, h, ridge, threshold, &acfg)?;
            Ok((res.stats, res.reached))
        }
        DesignMode::OptCov => {
            if design_value(&Matrix::zeros(mdp.dim(), mdp.dim()), ridge, targets)? <= threshold {
                return Ok((StepStatistics::new(mdp, h), true));
            }
            let log_term = (4.0 * (mdp.horizon() as f64).powi(2) * targets.len() as f64 * f64::from(epoch).powi(2)
                / cfg.delta)
                .ln();
            let ccfg = ConditionedCovConfig {
                delta: cfg.delta,
                lambda_floor: log_term * cfg.constant_scale,
                constant_scale: cfg.constant_scale,
                ..Default::default()
            };
            let ocfg = OptCovConfig {
                eps: threshold,
                delta: cfg.delta,
                constant_scale: cfg.constant_scale,
                gate: GateMode::Scaled,
                bound: cfg.regmin.contract_bound(mdp.dim(), mdp.horizon()),
                max_episodes: budget,
                max_rounds: 24,
            };
            let mut nav = cfg.regmin.build();
            let mut family = |i: u32, n: u64, env: &mut Environment, stats: &mut StepStatistics| {
                let c = ConditionedCovConfig { delta: ccfg.delta / (2.0 * f64::from(i * i)), ..ccfg };
                let cc = conditioned_cov(env, nav.as_mut(), n, h, &c, stats)?;
                let f = SmoothedXy::with_default_eta(targets.to_vec(), cc.covariance / n as f64)?;
                Ok(Box::new(f) as Box<dyn SmoothObjective>)
            };
            let res = opt_cov(env, &mut family, learner.as_mut(), h, &ocfg)?;
            let reached = design_value(&res.stats.cov, ridge, targets)? <= threshold;
            Ok((res.stats, reached))
        }
    }
}

/// Runs the elimination algorithm on `policies` and returns the index of the
/// recommended one.
pub fn run_pedel(env: &mut Environment, policies: &[Policy], cfg: &PedelConfig) -> Result<PedelResult> {
    cfg.check()?;
    if policies.is_empty() {
        return Err(Error::Parameter("policy set is empty".into()));
    }
    let mdp = env.mdp();
    let d = mdp.dim();
    let horizon = mdp.horizon();
    let ridge = 1.0 / d as f64;
    let start = env.episodes();
    let mut result = PedelResult {
        policy_id: 0,
        episodes_total: 0,
        flags: PedelFlags::default(),
        constant_scale: cfg.constant_scale,
        phases: vec![],
        epochs: vec![],
    };
    if policies.len() == 1 {
        result.flags.trivial = true;
        return Ok(result);
    }
    let start_phi: Vec<Vector> = policies.iter().map(|p| start_visitation(mdp, p)).collect::<Result<_>>()?;
    let (mut l0, l_end) = epoch_range(d, horizon, cfg.eps);
    if let Some(s) = cfg.start_epoch {
        l0 = s.clamp(1, l_end);
    }
    let mut active: Vec<usize> = (0..policies.len()).collect();
    let mut last_values: Option<Vec<f64>> = None;
    // Estimates from the previous epoch seed this epoch's design targets.
    let mut phi_hat: Vec<Vec<Vector>> = (0..policies.len())
        .map(|i| {
            let mut v = vec![Vector::zeros(d); horizon];
            v[0] = start_phi[i].clone();
            v
        })
        .collect();
    'epochs: for l in l0..=l_end {
        let eps_l = 0.5f64.powi(l as i32);
        let beta = epoch_beta(horizon, active.len(), l, cfg.delta, cfg.constant_scale);
        let threshold = eps_l * eps_l / beta;
        let epoch_start = env.episodes();
        let mut theta = vec![Vector::zeros(d); horizon];
        for h in 0..horizon {
            let targets: Vec<Vector> = active.iter().map(|&i| phi_hat[i][h].clone()).collect();
            let used = env.episodes() - start;
            let budget = (cfg.max_episodes - used.min(cfg.max_episodes))
                .min(cfg.max_episodes_per_epoch - (env.episodes() - epoch_start).min(cfg.max_episodes_per_epoch));
            let before = env.episodes();
            let (stats, reached) = if budget == 0 {
                (StepStatistics::new(mdp, h), false)
            } else {
                collect_phase(env, cfg, &targets, h, ridge, threshold, budget, l)?
            };
            let value = design_value(&stats.cov, ridge, &targets)?;
            result.phases.push(PhaseRecord {
                epoch: l,
                step: h,
                episodes: env.episodes() - before,
                active: active.clone(),
                design_value: value,
                threshold,
                reached,
                covariance: stats.cov.clone(),
                ridge,
                targets,
            });
            if !reached {
                result.flags.budget_exhausted = true;
                break 'epochs;
            }
            theta[h] = estimate_reward_vector(&stats, ridge)?;
            if h + 1 < horizon {
                let pols: Vec<&Policy> = active.iter().map(|&i| &policies[i]).collect();
                let cur: Vec<Vector> = active.iter().map(|&i| phi_hat[i][h].clone()).collect();
                let next = estimate_feature_visitations(mdp, &stats, ridge, &pols, &cur)?;
                for (&i, v) in active.iter().zip(next) {
                    phi_hat[i][h + 1] = v;
                }
            }
        }
        let values: Vec<f64> =
            active.iter().map(|&i| (0..horizon).map(|h| phi_hat[i][h].dot(&theta[h])).sum()).collect();
        let keep = eliminate(&values, eps_l);
        let survivors: Vec<usize> = active.iter().zip(&keep).filter(|(_, k)| **k).map(|(i, _)| *i).collect();
        let v_max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        result.epochs.push(EpochRecord {
            epoch: l,
            eps: eps_l,
            beta,
            active: active.clone(),
            values: values.clone(),
            v_max,
            survivors: survivors.clone(),
        });
        last_values = Some(values.iter().zip(&keep).filter(|(_, k)| **k).map(|(v, _)| *v).collect());
        active = survivors;
        if active.len() == 1 {
            result.flags.early_stopped = l < l_end;
            break;
        }
    }
    result.policy_id = match &last_values {
        Some(v) if v.len() == active.len() => {
            let mut best = 0;
            for j in 1..v.len() {
                if v[j] > v[best] {
                    best = j;
                }
            }
            active[best]
        }
        _ => active[0],
    };
    result.episodes_total = env.episodes() - start;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{embed_bandit_as_mdp, hard_instance_start_policies, random_latent_mdp, HardBandit};
    use crate::mdp::{feature_visitation, policy_value, MdpParts, RewardNoise};

    fn det_chain() -> LinearMdp {
        let e = |i: usize| {
            let mut v = Vector::zeros(2);
            v[i] = 1.0;
            v
        };
        LinearMdp::new(MdpParts {
            dim: 2,
            horizon: 2,
            state_names: vec!["s".into(), "u".into(), "v".into()],
            layers: vec![vec![0], vec![1, 2]],
            action_names: vec![vec!["l".into(), "r".into()], vec!["a".into()], vec!["a".into()]],
            phi: vec![vec![e(0), e(1)], vec![e(0)], vec![e(1)]],
            mu: vec![vec![Vector::zeros(2), e(0), e(1)]],
            theta: vec![Vector::from_vec(vec![0.1, 0.2]), Vector::from_vec(vec![0.3, 0.9])],
            noise: RewardNoise::Deterministic,
        })
        .unwrap()
    }

    #[test]
    fn single_sample_operator_closed_form() {
        let mdp = det_chain();
        let mut env = Environment::new(&mdp, 0);
        let go_right = Policy::deterministic_from(&mdp, |h, _| if h == 0 { 1 } else { 0 });
        let log = env.run(&go_right, None).unwrap();
        let stats = StepStatistics::from_logs(&mdp, 0, [&log]);
        let ridge = 0.5;
        let t = estimate_transition_operator(&mdp, &stats, &go_right, ridge).unwrap();
        let phi = mdp.phi(0, 1);
        let got = &t * phi;
        let shrink = phi.norm_squared() / (phi.norm_squared() + ridge);
        let want = mdp.phi(2, 0) * shrink;
        assert!((got - want).norm() < 1e-12);
        let direct = propagate_visitation(&mdp, &stats, &guarded_inverse(&stats.regularized(ridge)).unwrap(), &go_right, phi)
            .unwrap();
        assert!((direct - &t * phi).norm() < 1e-12);
    }

    #[test]
    fn empty_data_is_an_error() {
        let mdp = det_chain();
        let stats = StepStatistics::new(&mdp, 0);
        let p = Policy::uniform(&mdp);
        assert!(estimate_transition_operator(&mdp, &stats, &p, 0.5).is_err());
    }

    #[test]
    fn ridge_has_no_mass_off_the_data() {
        let mdp = det_chain();
        let mut env = Environment::new(&mdp, 0);
        let left = Policy::deterministic_from(&mdp, |_, _| 0);
        let logs: Vec<_> = (0..5).map(|_| env.run(&left, None).unwrap()).collect();
        let stats = StepStatistics::from_logs(&mdp, 0, &logs);
        let th = estimate_reward_vector(&stats, 0.5).unwrap();
        assert_eq!(th[1], 0.0);
        assert!((th[0] - 0.5 / 5.5).abs() < 1e-12);
    }

    #[test]
    fn elimination_threshold() {
        assert_eq!(eliminate(&[0.3, 0.3, 0.3], 0.1), vec![true; 3]);
        assert_eq!(eliminate(&[0.5, 0.5 - 0.3, 0.45], 0.1), vec![true, false, true]);
    }

    #[test]
    fn epoch_schedule() {
        assert_eq!(epoch_range(4, 2, 0.01), (2, 9));
        assert_eq!(epoch_range(2, 4, 0.25), (1, 4));
        assert_eq!(epoch_range(64, 1, 0.5), (3, 3));
    }

    #[test]
    fn exact_elimination_on_hard_instance() {
        let b = HardBandit::scaled(4, 0.5, 0.1, 0.02).unwrap();
        let hard = embed_bandit_as_mdp(&b).unwrap();
        let pols = hard_instance_start_policies(&hard);
        let values: Vec<f64> = pols.iter().map(|p| policy_value(&hard.mdp, p).unwrap()).collect();
        let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for l in 1..8 {
            let eps = 0.5f64.powi(l);
            let keep = eliminate(&values, eps);
            for (v, k) in values.iter().zip(keep) {
                assert_eq!(k, best - v <= 2.0 * eps);
            }
        }
    }

    #[test]
    fn exact_operators_reproduce_visitations() {
        let mdp = random_latent_mdp(3, 4, 2, 3, 8).unwrap();
        let p = Policy::deterministic_from(&mdp, |h, s| (h + s) % 2);
        let truth = feature_visitation(&mdp, &p).unwrap();
        for h in 0..2 {
            let mut exact = Matrix::zeros(3, 3);
            for &s in mdp.layer(h + 1) {
                let f = policy_feature(&mdp, &p, h + 1, s).unwrap();
                exact.ger(1.0, &f, mdp.mu(h, s), 1.0);
            }
            assert!((&exact * &truth[h] - &truth[h + 1]).norm() < 1e-12);
        }
    }

    #[test]
    fn single_policy_is_returned_without_data() {
        let mdp = det_chain();
        let mut env = Environment::new(&mdp, 0);
        let res = run_pedel(&mut env, &[Policy::uniform(&mdp)], &PedelConfig::new(0.1, 0.1)).unwrap();
        assert_eq!((res.policy_id, res.episodes_total), (0, 0));
        assert!(res.flags.trivial);
    }

    #[test]
    fn finds_best_policy_and_gates_certify() {
        let mdp = det_chain();
        let pols = vec![
            Policy::deterministic_from(&mdp, |_, _| 0),
            Policy::deterministic_from(&mdp, |h, _| if h == 0 { 1 } else { 0 }),
        ];
        let mut cfg = PedelConfig::new(0.05, 0.1);
        cfg.constant_scale = 1e-3;
        let mut env = Environment::new(&mdp, 5);
        let res = run_pedel(&mut env, &pols, &cfg).unwrap();
        assert_eq!(res.policy_id, 1);
        assert!(res.certify_gates().unwrap().is_empty());
        assert!(res.is_nested());
        assert!(res.trace_csv().lines().count() > 1);
        let js: serde_json::Value = serde_json::from_str(&res.to_json().unwrap()).unwrap();
        assert_eq!(js["policy_id"], 1);
    }

    #[test]
    fn budget_cap_is_flagged() {
        let mdp = det_chain();
        let pols = vec![Policy::deterministic_from(&mdp, |_, _| 0), Policy::deterministic_from(&mdp, |_, _| 1)];
        let mut cfg = PedelConfig::new(0.01, 0.1);
        cfg.max_episodes = 100;
        let mut env = Environment::new(&mdp, 5);
        let res = run_pedel(&mut env, &pols, &cfg).unwrap();
        assert!(res.flags.budget_exhausted);
        assert!(res.episodes_total <= 100);
    }

    #[test]
    fn optcov_mode_runs() {
        let mdp = det_chain();
        let pols = vec![
            Policy::deterministic_from(&mdp, |_, _| 0),
            Policy::deterministic_from(&mdp, |h, _| if h == 0 { 1 } else { 0 }),
        ];
        let mut cfg = PedelConfig::new(0.2, 0.1);
        cfg.constant_scale = 1e-4;
        cfg.design = DesignMode::OptCov;
        cfg.max_episodes = 5_000_000;
        let mut env = Environment::new(&mdp, 2);
        let res = run_pedel(&mut env, &pols, &cfg).unwrap();
        assert!(!res.flags.budget_exhausted);
        assert_eq!(res.policy_id, 1);
        assert!(res.certify_gates().unwrap().is_empty());
    }
}
