//! Experiment design over expected-covariance matrices: the smoothed XY
//! objective, approximate Frank-Wolfe, its regret-driven online version,
//! the doubling wrapper, well-conditioned covariance collection and the
//! adaptive design loop used by the elimination algorithm.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{add_outer, is_psd, min_eigenvalue, min_eigenvector, op_norm, quad_form, spd_inverse, Matrix, Vector};
use crate::mdp::{EpisodeLog, Environment, LinearMdp, Policy};
use crate::regret::{RegretBound, RegretMinimizer, RewardFunction};

/// Diameter of the feasible set of expected covariances in Frobenius norm.
pub const DESIGN_RADIUS: f64 = 2.0;

const ETA_CAP: f64 = 1e6;
const JITTER: f64 = 1e-12;

/// Inverse of `a`, retried once with a `1e-12` jitter on the diagonal.
pub fn guarded_inverse(a: &Matrix) -> Result<Matrix> {
    match spd_inverse(a) {
        Ok(inv) => Ok(inv),
        Err(_) => spd_inverse(&(a + Matrix::identity(a.nrows(), a.ncols()) * JITTER)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothConstants {
    pub l: f64,
    pub beta: f64,
    pub m: f64,
}

/// A convex, decreasing design objective on PSD matrices.
pub trait SmoothObjective {
    fn dim(&self) -> usize;

    fn value(&self, lambda: &Matrix) -> Result<f64>;

    /// The negated gradient `Xi`.
    fn xi(&self, lambda: &Matrix) -> Result<Matrix>;

    fn constants(&self) -> SmoothConstants;

    /// Index of the target direction that currently attains the maximum.
    fn argmax(&self, _lambda: &Matrix) -> Result<Option<usize>> {
        Ok(None)
    }
}

/// `max_phi phi^T (lambda + lambda0)^{-1} phi`.
pub fn xy_value(lambda: &Matrix, phi: &[Vector], lambda0: &Matrix) -> Result<f64> {
    let norms = weighted_norms(lambda, phi, lambda0)?.0;
    Ok(norms.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// LogSumExp smoothing of [`xy_value`] at temperature `eta`.
pub fn xy_smoothed(lambda: &Matrix, phi: &[Vector], eta: f64, lambda0: &Matrix) -> Result<f64> {
    check_eta(eta)?;
    let norms = weighted_norms(lambda, phi, lambda0)?.0;
    Ok(log_sum_exp(&norms, eta))
}

/// The negated gradient of [`xy_smoothed`]: softmax-weighted
/// `A^{-1} phi phi^T A^{-1}` with `A = lambda + lambda0`.
pub fn xy_gradient(lambda: &Matrix, phi: &[Vector], eta: f64, lambda0: &Matrix) -> Result<Matrix> {
    check_eta(eta)?;
    let (norms, inv) = weighted_norms(lambda, phi, lambda0)?;
    let w = softmax_weights(&norms, eta);
    let d = lambda.nrows();
    let mut xi = Matrix::zeros(d, d);
    for (p, wi) in phi.iter().zip(&w) {
        if *wi > 0.0 {
            let u = &inv * p;
            add_outer(&mut xi, &u, *wi);
        }
    }
    Ok(xi)
}

/// `2 (1 + ||lambda0||) log|Phi| / max ||phi||`, capped at `1e6`, floored at 1.
pub fn default_eta(phi: &[Vector], lambda0: &Matrix) -> f64 {
    let gamma = phi.iter().map(|p| p.norm()).fold(0.0, f64::max);
    if gamma <= 0.0 || phi.len() < 2 {
        return 1.0;
    }
    let eta = 2.0 * (1.0 + op_norm(lambda0)) * (phi.len() as f64).ln() / gamma;
    eta.clamp(1.0, ETA_CAP)
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("eta must be positive and finite, got {eta}")))
    }
}

fn weighted_norms(lambda: &Matrix, phi: &[Vector], lambda0: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if phi.is_empty() {
        return Err(Error::Parameter("target set is empty".into()));
    }
    let d = lambda.nrows();
    if lambda.ncols() != d || lambda0.shape() != (d, d) || phi.iter().any(|p| p.len() != d) {
        return Err(Error::Parameter("design dimensions disagree".into()));
    }
    let inv = guarded_inverse(&(lambda + lambda0))?;
    let norms = phi.iter().map(|p| quad_form(p, &inv)).collect();
    Ok((norms, inv))
}

fn log_sum_exp(x: &[f64], eta: f64) -> f64 {
    let top = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = x.iter().map(|v| (eta * (v - top)).exp()).sum();
    top + sum.ln() / eta
}

fn softmax_weights(x: &[f64], eta: f64) -> Vec<f64> {
    let top = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (eta * (v - top)).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn argmax_lowest(x: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..x.len() {
        if x[i] > x[best] {
            best = i;
        }
    }
    best
}

/// Smoothed XY objective with fixed regularizer `lambda0`.
#[derive(Clone, Debug)]
pub struct SmoothedXy {
    phi: Vec<Vector>,
    eta: f64,
    lambda0: Matrix,
    constants: SmoothConstants,
}

impl SmoothedXy {
    pub fn new(phi: Vec<Vector>, eta: f64, lambda0: Matrix) -> Result<Self> {
        check_eta(eta)?;
        if phi.is_empty() {
            return Err(Error::Parameter("target set is empty".into()));
        }
        let d = lambda0.nrows();
        if lambda0.ncols() != d || phi.iter().any(|p| p.len() != d) {
            return Err(Error::Parameter("design dimensions disagree".into()));
        }
        if min_eigenvalue(&lambda0) <= 0.0 {
            return Err(Error::Parameter("lambda0 must be positive definite".into()));
        }
        let inv_norm = op_norm(&spd_inverse(&lambda0)?);
        let constants = SmoothConstants {
            l: inv_norm * inv_norm,
            beta: 2.0 * inv_norm.powi(3) * (1.0 + eta * inv_norm),
            m: inv_norm * inv_norm,
        };
        Ok(Self { phi, eta, lambda0, constants })
    }

    pub fn with_default_eta(phi: Vec<Vector>, lambda0: Matrix) -> Result<Self> {
        let eta = default_eta(&phi, &lambda0);
        Self::new(phi, eta, lambda0)
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn lambda0(&self) -> &Matrix {
        &self.lambda0
    }

    pub fn targets(&self) -> &[Vector] {
        &self.phi
    }

    /// The unsmoothed objective.
    pub fn exact(&self, lambda: &Matrix) -> Result<f64> {
        xy_value(lambda, &self.phi, &self.lambda0)
    }
}

impl SmoothObjective for SmoothedXy {
    fn dim(&self) -> usize {
        self.lambda0.nrows()
    }

    fn value(&self, lambda: &Matrix) -> Result<f64> {
        xy_smoothed(lambda, &self.phi, self.eta, &self.lambda0)
    }

    fn xi(&self, lambda: &Matrix) -> Result<Matrix> {
        xy_gradient(lambda, &self.phi, self.eta, &self.lambda0)
    }

    fn constants(&self) -> SmoothConstants {
        self.constants
    }

    fn argmax(&self, lambda: &Matrix) -> Result<Option<usize>> {
        let norms = weighted_norms(lambda, &self.phi, &self.lambda0)?.0;
        Ok(Some(argmax_lowest(&norms)))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FwStep {
    /// Target that attained the maximum at the iterate the step started from.
    pub argmax: Option<usize>,
    pub gamma: f64,
    /// The oracle's point `y_t`; for the online version this is `Gamma_t / K`.
    pub y: Matrix,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DesignState {
    pub initial: Matrix,
    pub lambda: Matrix,
    pub raw_count: u64,
    pub history: Vec<FwStep>,
}

impl DesignState {
    pub fn new(initial: Matrix, raw_count: u64) -> Self {
        Self { lambda: initial.clone(), initial, raw_count, history: vec![] }
    }

    /// `(x_1 + sum_t y_t) / (T + 1)`, recomputed from the history.
    pub fn replay(&self) -> Matrix {
        let mut acc = self.initial.clone();
        for st in &self.history {
            acc += &st.y;
        }
        acc / (self.history.len() as f64 + 1.0)
    }

    pub fn step_sizes(&self) -> Vec<f64> {
        self.history.iter().map(|s| s.gamma).collect()
    }

    fn advance(&mut self, y: Matrix, argmax: Option<usize>) {
        let gamma = 1.0 / (self.history.len() as f64 + 2.0);
        self.lambda = &self.lambda * (1.0 - gamma) + &y * gamma;
        self.history.push(FwStep { argmax, gamma, y });
    }
}

/// Checks that `y` can be an expected covariance: symmetric PSD with
/// operator norm at most one.
pub fn check_feasible(y: &Matrix, d: usize) -> Result<()> {
    if y.shape() != (d, d) {
        return Err(Error::Contract(format!("oracle returned a {:?} matrix, expected {d}x{d}", y.shape())));
    }
    if !y.iter().all(|v| v.is_finite()) || !is_psd(y, 1e-9) || op_norm(y) > 1.0 + 1e-9 {
        return Err(Error::Contract("oracle returned a point outside the feasible set".into()));
    }
    Ok(())
}

/// Frank-Wolfe with step sizes `1/(t+1)`. The oracle receives the iteration
/// number and `Xi` (the negated gradient) and returns a feasible point
/// approximately maximizing `tr(Xi y)`.
pub fn approx_frank_wolfe(
    f: &dyn SmoothObjective,
    lmo: &mut dyn FnMut(usize, &Matrix) -> Result<Matrix>,
    iterations: usize,
    x1: Matrix,
) -> Result<DesignState> {
    let d = f.dim();
    check_feasible(&x1, d)?;
    let mut state = DesignState::new(x1, 0);
    for t in 1..=iterations {
        let xi = f.xi(&state.lambda)?;
        let argmax = f.argmax(&state.lambda)?;
        let y = lmo(t, &xi)?;
        check_feasible(&y, d)?;
        state.advance(y, argmax);
    }
    Ok(state)
}

/// Exact oracle over the convex hull of finitely many covariances.
pub fn vertex_oracle(vertices: &[Matrix]) -> impl FnMut(usize, &Matrix) -> Result<Matrix> + '_ {
    move |_, xi| {
        if vertices.is_empty() {
            return Err(Error::Parameter("no vertices".into()));
        }
        let scores: Vec<f64> = vertices.iter().map(|v| xi.dot(v)).collect();
        Ok(vertices[argmax_lowest(&scores)].clone())
    }
}

/// Aggregated observations at one step: enough to rebuild covariances,
/// ridge estimates and transition estimates without keeping logs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepStatistics {
    pub step: usize,
    pub count: u64,
    /// `sum phi phi^T`.
    pub cov: Matrix,
    /// `sum phi r`.
    pub reward_feat: Vector,
    /// `sum phi` over transitions into each state, indexed by global state.
    /// Empty at the last step.
    pub next_feat: Vec<Vector>,
}

impl StepStatistics {
    pub fn new(mdp: &LinearMdp, step: usize) -> Self {
        let d = mdp.dim();
        let next = if step + 1 < mdp.horizon() { mdp.num_states() } else { 0 };
        Self {
            step,
            count: 0,
            cov: Matrix::zeros(d, d),
            reward_feat: Vector::zeros(d),
            next_feat: vec![Vector::zeros(d); next],
        }
    }

    /// Adds the record at this step if it is usable. Returns whether it was.
    pub fn add(&mut self, mdp: &LinearMdp, log: &EpisodeLog) -> bool {
        let Some(st) = log.steps.get(self.step) else { return false };
        if !st.usable {
            return false;
        }
        let phi = mdp.phi(st.state, st.action);
        self.count += 1;
        add_outer(&mut self.cov, phi, 1.0);
        self.reward_feat.axpy(st.reward, phi, 1.0);
        if let Some(s) = st.next_state {
            if !self.next_feat.is_empty() {
                self.next_feat[s].axpy(1.0, phi, 1.0);
            }
        }
        true
    }

    pub fn from_logs<'l>(mdp: &LinearMdp, step: usize, logs: impl IntoIterator<Item = &'l EpisodeLog>) -> Self {
        let mut out = Self::new(mdp, step);
        for log in logs {
            out.add(mdp, log);
        }
        out
    }

    pub fn merge(&mut self, other: &StepStatistics) {
        self.count += other.count;
        self.cov += &other.cov;
        self.reward_feat += &other.reward_feat;
        for (a, b) in self.next_feat.iter_mut().zip(&other.next_feat) {
            *a += b;
        }
    }

    /// `sum phi phi^T + ridge I`.
    pub fn regularized(&self, ridge: f64) -> Matrix {
        &self.cov + Matrix::identity(self.cov.nrows(), self.cov.ncols()) * ridge
    }
}

/// `max_phi phi^T (cov + ridge I)^{-1} phi`.
pub fn design_value(cov: &Matrix, ridge: f64, targets: &[Vector]) -> Result<f64> {
    if targets.is_empty() {
        return Ok(0.0);
    }
    let inv = guarded_inverse(&(cov + Matrix::identity(cov.nrows(), cov.ncols()) * ridge))?;
    Ok(targets.iter().map(|p| quad_form(p, &inv)).fold(f64::NEG_INFINITY, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignTraceRow {
    pub iteration: usize,
    pub objective_value: f64,
    pub smoothed_value: f64,
    pub min_eig: f64,
    pub episodes_cumulative: u64,
}

pub fn design_trace_csv(rows: &[DesignTraceRow]) -> String {
    let mut out = String::from("iteration,objective_value,smoothed_value,min_eig,episodes_cumulative\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.iteration, r.objective_value, r.smoothed_value, r.min_eig, r.episodes_cumulative
        );
    }
    out
}

/// Reward `phi^T Xi phi / scale` at step `h`. Values above one by more than
/// rounding are a contract violation.
pub fn design_reward(mdp: &LinearMdp, h: usize, xi: &Matrix, scale: f64) -> Result<RewardFunction> {
    RewardFunction::at_step(mdp, h, |s, a| {
        let r = quad_form(mdp.phi(s, a), xi) / scale;
        if (-1e-12..0.0).contains(&r) {
            0.0
        } else if r > 1.0 && r <= 1.0 + 1e-12 {
            1.0
        } else {
            r
        }
    })
}

fn play_into(
    env: &mut Environment,
    learner: &mut dyn RegretMinimizer,
    reward: &RewardFunction,
    k: usize,
    h: usize,
    stats: &mut StepStatistics,
    mut extra: impl FnMut(&Policy, &EpisodeLog, &Vector),
) -> Result<()> {
    let mdp = env.mdp();
    learner.play(env, reward, k, Some(h), &mut |p, log| {
        if stats.add(mdp, log) {
            extra(p, log, log.feature(mdp, h));
        }
    })
}

#[derive(Clone, Debug)]
pub struct FwRegretRun {
    pub state: DesignState,
    pub stats: StepStatistics,
    pub logs: Vec<EpisodeLog>,
    pub trace: Vec<DesignTraceRow>,
}

/// Online Frank-Wolfe: `K` uniform episodes, then `T` rounds of `K`
/// episodes of the learner on the induced reward `tr(Xi phi phi^T) / M`,
/// all in the `h`-truncated model.
pub fn fw_regret(
    env: &mut Environment,
    f: &dyn SmoothObjective,
    learner: &mut dyn RegretMinimizer,
    iterations: usize,
    k: usize,
    h: usize,
    keep_logs: bool,
) -> Result<FwRegretRun> {
    let mdp = env.mdp();
    if k == 0 {
        return Err(Error::Parameter("FWRegret needs K >= 1".into()));
    }
    if h >= mdp.horizon() {
        return Err(Error::Parameter(format!("step {h} is past the horizon")));
    }
    let d = mdp.dim();
    let m = f.constants().m;
    let mut stats = StepStatistics::new(mdp, h);
    let mut logs = vec![];
    let mut trace = vec![];
    let uniform = Policy::uniform(mdp);
    let mut gamma0 = Matrix::zeros(d, d);
    for _ in 0..k {
        let log = env.run_truncated(&uniform, h)?;
        stats.add(mdp, &log);
        add_outer(&mut gamma0, log.feature(mdp, h), 1.0);
        if keep_logs {
            logs.push(log);
        }
    }
    let mut state = DesignState::new(gamma0 / k as f64, k as u64);
    let record = |state: &DesignState, t: usize, trace: &mut Vec<DesignTraceRow>| -> Result<()> {
        trace.push(DesignTraceRow {
            iteration: t,
            objective_value: f.value(&state.lambda)?,
            smoothed_value: f.value(&state.lambda)?,
            min_eig: min_eigenvalue(&state.lambda),
            episodes_cumulative: state.raw_count,
        });
        Ok(())
    };
    record(&state, 0, &mut trace)?;
    for t in 1..=iterations {
        let xi = f.xi(&state.lambda)?;
        let argmax = f.argmax(&state.lambda)?;
        let reward = design_reward(mdp, h, &xi, m)?;
        let mut gamma_t = Matrix::zeros(d, d);
        play_into(env, learner, &reward, k, h, &mut stats, |_, log, phi| {
            add_outer(&mut gamma_t, phi, 1.0);
            if keep_logs {
                logs.push(log.clone());
            }
        })?;
        state.raw_count += k as u64;
        state.advance(gamma_t / k as f64, argmax);
        record(&state, t, &mut trace)?;
    }
    Ok(FwRegretRun { state, stats, logs, trace })
}

/// The minimum integer `K` meeting the three requirements of the online
/// Frank-Wolfe guarantee.
pub fn k0_exact(t: usize, beta: f64, m: f64, delta: f64, horizon: usize, bound: &RegretBound) -> u64 {
    let (t, h, r2) = (t as f64, horizon as f64, DESIGN_RADIUS * DESIGN_RADIUS);
    let a = 72.0 * t * t * m * m * (4.0 * t / delta).ln() / (beta * beta * r2 * r2);
    let rhs = |k: f64| {
        let l = (2.0 * h * k * t / delta).ln().max(0.0);
        let b = 8.0 * t * t * m * m * bound.c1 * l.powf(bound.p1) / (beta * beta * r2 * r2);
        let c = 3.0 * t * m * bound.c2 * l.powf(bound.p2) / (beta * r2);
        a.max(b).max(c)
    };
    let mut k = 1.0_f64;
    for _ in 0..10_000 {
        let next = rhs(k).ceil().max(1.0);
        if next <= k {
            break;
        }
        k = next;
    }
    k as u64
}

/// Closed-form quadratic coefficient bounding [`k0_exact`].
pub fn k0_tilde(t: usize, beta: f64, m: f64, delta: f64, horizon: usize, bound: &RegretBound) -> f64 {
    let (t, h, r4) = (t as f64, horizon as f64, DESIGN_RADIUS.powi(4));
    let first = 72.0 * m * m * (4.0 * t / delta).ln() / (beta * beta * r4);
    let p1 = bound.p1;
    let inner = 32.0 * p1 * h * t.powi(3) * m * m * bound.c1 / (beta * beta * r4 * delta);
    let second = 8.0 * m * m * bound.c1 / (beta * beta * r4) * (2.0 * p1).powf(p1) * inner.ln().max(0.0).powf(p1);
    first.max(second)
}

/// Closed-form linear coefficient bounding [`k0_exact`].
pub fn k1_tilde(t: usize, beta: f64, m: f64, delta: f64, horizon: usize, bound: &RegretBound) -> f64 {
    let (t, h, r2) = (t as f64, horizon as f64, DESIGN_RADIUS * DESIGN_RADIUS);
    let p2 = bound.p2;
    let inner = 12.0 * p2 * h * t * t * m * bound.c2 / (beta * r2 * delta);
    3.0 * m * bound.c2 / (beta * r2) * (2.0 * p2).powf(p2) * inner.ln().max(0.0).powf(p2)
}

/// `inf f / eps`.
pub fn n_star(inf_value: f64, eps: f64) -> f64 {
    inf_value / eps
}

/// `(T_i, K_i) = (2^i, 2^i T_i^2)`.
pub fn opt_cov_schedule(i: u32) -> (u64, u64) {
    let t = 1u64 << i.min(63);
    (t, t.saturating_mul(t).saturating_mul(t))
}

/// Lower termination gate of the doubling wrapper.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    Theory,
    Scaled,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptCovConfig {
    pub eps: f64,
    pub delta: f64,
    /// Multiplies the `K` gate and, in `Scaled` mode, the lower gate.
    pub constant_scale: f64,
    pub gate: GateMode,
    pub bound: RegretBound,
    pub max_episodes: u64,
    pub max_rounds: u32,
}

#[derive(Clone, Debug)]
pub struct OptCovResult {
    /// Time-normalized covariance of the final round.
    pub lambda_hat: Matrix,
    /// `sum phi phi^T` of the final round's online Frank-Wolfe data.
    pub covariance: Matrix,
    /// `K_i T_i` of the final round.
    pub n: u64,
    pub round: u32,
    pub objective: f64,
    /// True when the episode cap stopped the loop before the tests passed.
    pub partial: bool,
    pub episodes_total: u64,
    pub skipped_rounds: Vec<u32>,
    /// All step data, including whatever the objective family collected.
    pub stats: StepStatistics,
    pub trace: Vec<DesignTraceRow>,
}

/// The doubling wrapper. `family(i, N_i, env, stats)` builds `f_i` and may
/// collect data of its own into `stats`.
pub fn opt_cov(
    env: &mut Environment,
    family: &mut dyn FnMut(u32, u64, &mut Environment, &mut StepStatistics) -> Result<Box<dyn SmoothObjective>>,
    learner: &mut dyn RegretMinimizer,
    h: usize,
    cfg: &OptCovConfig,
) -> Result<OptCovResult> {
    if !(cfg.eps > 0.0 && cfg.delta > 0.0 && cfg.delta < 1.0 && cfg.constant_scale > 0.0) {
        return Err(Error::Parameter("OptCov needs eps > 0, delta in (0,1), constant_scale > 0".into()));
    }
    let mdp = env.mdp();
    let d = mdp.dim();
    let start = env.episodes();
    let mut stats = StepStatistics::new(mdp, h);
    let mut trace = vec![];
    let mut skipped = vec![];
    let mut best: Option<(Matrix, Matrix, u64, u32, f64)> = None;
    for i in 1..=cfg.max_rounds {
        let (t, k) = opt_cov_schedule(i);
        let n = k.saturating_mul(t);
        if (env.episodes() - start).saturating_add(n.saturating_mul(2)) > cfg.max_episodes {
            break;
        }
        let f = family(i, n, env, &mut stats)?;
        let c = f.constants();
        let di = cfg.delta / (4.0 * f64::from(i * i));
        let need = cfg.constant_scale
            * (k0_tilde(t as usize, c.beta, c.m, di, mdp.horizon(), &cfg.bound) * (t * t) as f64
                + k1_tilde(t as usize, c.beta, c.m, di, mdp.horizon(), &cfg.bound) * t as f64);
        if (k as f64) < need {
            skipped.push(i);
            continue;
        }
        let run = fw_regret(env, f.as_ref(), learner, (t - 1) as usize, k as usize, h, false)?;
        stats.merge(&run.stats);
        let value = f.value(&run.state.lambda)?;
        let offset = trace.last().map_or(0, |r: &DesignTraceRow| r.iteration + 1);
        trace.extend(run.trace.into_iter().map(|mut r| {
            r.iteration += offset;
            r.episodes_cumulative = r.episodes_cumulative.min(n);
            r
        }));
        let lower = c.beta * DESIGN_RADIUS * DESIGN_RADIUS * ((t as f64).ln() + 3.0) / t as f64;
        let lower_ok = match cfg.gate {
            GateMode::Theory => value >= lower,
            GateMode::Scaled => value >= cfg.constant_scale * lower,
            GateMode::Off => true,
        };
        let cov = &run.state.lambda * n as f64;
        let done = value <= n as f64 * cfg.eps && lower_ok;
        best = Some((run.state.lambda, cov, n, i, value));
        if done {
            let (lambda_hat, covariance, n, round, objective) = best.unwrap();
            return Ok(OptCovResult {
                lambda_hat,
                covariance,
                n,
                round,
                objective,
                partial: false,
                episodes_total: env.episodes() - start,
                skipped_rounds: skipped,
                stats,
                trace,
            });
        }
    }
    let (lambda_hat, covariance, n, round, objective) =
        best.unwrap_or((Matrix::zeros(d, d), Matrix::zeros(d, d), 0, 0, f64::INFINITY));
    Ok(OptCovResult {
        lambda_hat,
        covariance,
        n,
        round,
        objective,
        partial: true,
        episodes_total: env.episodes() - start,
        skipped_rounds: skipped,
        stats,
        trace,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionedCovConfig {
    pub delta: f64,
    pub lambda_floor: f64,
    /// Multiplies the `12544 d log(.)` eigenvalue target.
    pub constant_scale: f64,
    pub first_batch: usize,
    /// Rounds without eigenvalue growth before giving up.
    pub patience: usize,
    pub max_rounds: usize,
}

impl Default for ConditionedCovConfig {
    fn default() -> Self {
        Self { delta: 0.1, lambda_floor: 0.0, constant_scale: 1.0, first_batch: 16, patience: 6, max_rounds: 40 }
    }
}

#[derive(Clone, Debug)]
pub struct ConditionedCovResult {
    /// `explore + replay`.
    pub covariance: Matrix,
    pub explore: Matrix,
    pub replay: Matrix,
    /// Policies of the first phase in play order, run-length encoded.
    pub policies: Vec<(Policy, usize)>,
    pub explore_episodes: u64,
    pub replay_episodes: u64,
    pub target: f64,
    pub rounds: usize,
    /// `lambda_min(covariance)`, measured.
    pub min_eig: f64,
}

/// `max{c * 12544 d log(2N(2 + 32T)/delta), floor}`.
pub fn conditioned_target(d: usize, n: u64, t: u64, delta: f64, scale: f64, floor: f64) -> f64 {
    let v = 12544.0 * d as f64 * (2.0 * n.max(1) as f64 * (2.0 + 32.0 * t as f64) / delta).ln();
    (scale * v).max(floor)
}

/// Grows `lambda_min` of the step-`h` covariance by running the learner on
/// `(phi^T v)^2` for the current minimum eigenvector `v`, then replays the
/// first phase's policies `ceil(N / T)` times each.
pub fn conditioned_cov(
    env: &mut Environment,
    learner: &mut dyn RegretMinimizer,
    n: u64,
    h: usize,
    cfg: &ConditionedCovConfig,
    stats: &mut StepStatistics,
) -> Result<ConditionedCovResult> {
    let mdp = env.mdp();
    let d = mdp.dim();
    if cfg.first_batch == 0 || !(cfg.delta > 0.0 && cfg.delta < 1.0) {
        return Err(Error::Parameter("ConditionedCov needs first_batch >= 1 and delta in (0,1)".into()));
    }
    let mut explore = Matrix::zeros(d, d);
    let mut policies: Vec<(Policy, usize)> = vec![];
    let mut episodes = 0u64;
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    let mut rounds = 0;
    let mut target;
    loop {
        rounds += 1;
        let (_, v) = min_eigenvector(&explore);
        let reward = RewardFunction::at_step(mdp, h, |s, a| mdp.phi(s, a).dot(&v).powi(2).min(1.0))?;
        let k = cfg.first_batch << (rounds - 1).min(30);
        play_into(env, learner, &reward, k, h, stats, |p, _, phi| {
            add_outer(&mut explore, phi, 1.0);
            match policies.last_mut() {
                Some((q, c)) if &*q == p => *c += 1,
                _ => policies.push((p.clone(), 1)),
            }
        })?;
        episodes += k as u64;
        target = conditioned_target(d, n, episodes, cfg.delta, cfg.constant_scale, cfg.lambda_floor);
        let lmin = min_eigenvalue(&explore);
        if lmin >= target {
            break;
        }
        if lmin > best * (1.0 + 1e-9) + 1e-12 {
            best = lmin;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                return Err(Error::Numerical(format!(
                    "minimum eigenvalue stalled at {lmin:.3e} after {rounds} rounds (target {target:.3e}); \
                     some feature direction looks unreachable at step {h}"
                )));
            }
        }
        if rounds >= cfg.max_rounds {
            return Err(Error::Numerical(format!(
                "minimum eigenvalue {lmin:.3e} below target {target:.3e} after {rounds} rounds"
            )));
        }
    }
    let reps = n.div_ceil(episodes.max(1)) as usize;
    let mut replay = Matrix::zeros(d, d);
    let mut replay_episodes = 0u64;
    for (p, count) in &policies {
        for _ in 0..count * reps {
            let log = env.run_truncated(p, h)?;
            if stats.add(mdp, &log) {
                add_outer(&mut replay, log.feature(mdp, h), 1.0);
            }
            replay_episodes += 1;
        }
    }
    let covariance = &explore + &replay;
    let min_eig = min_eigenvalue(&covariance);
    Ok(ConditionedCovResult {
        covariance,
        explore,
        replay,
        policies,
        explore_episodes: episodes,
        replay_episodes,
        target,
        rounds,
        min_eig,
    })
}

/// Settings of the adaptive design loop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveConfig {
    pub initial_batch: usize,
    /// Each batch has `max(initial_batch, ceil(growth * N))` episodes.
    pub growth: f64,
    pub max_episodes: u64,
    pub eta: Option<f64>,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self { initial_batch: 32, growth: 1.0 / 256.0, max_episodes: 50_000_000, eta: None }
    }
}

#[derive(Clone, Debug)]
pub struct AdaptiveResult {
    pub stats: StepStatistics,
    /// `max_phi phi^T (Sigma + ridge I)^{-1} phi` on exit.
    pub value: f64,
    pub reached: bool,
    pub episodes: u64,
    pub iterations: usize,
    pub trace: Vec<DesignTraceRow>,
}

/// Frank-Wolfe on the smoothed XY objective with growing batches: after a
/// uniform batch, each round runs the learner on the normalized gradient
/// reward for a batch proportional to the data so far, and the loop stops
/// once `max_phi phi^T (Sigma + ridge I)^{-1} phi <= threshold`.
pub fn adaptive_xy_design(
    env: &mut Environment,
    learner: &mut dyn RegretMinimizer,
    targets: &[Vector],
    h: usize,
    ridge: f64,
    threshold: f64,
    cfg: &AdaptiveConfig,
) -> Result<AdaptiveResult> {
    let mdp = env.mdp();
    if ridge <= 0.0 || threshold <= 0.0 || cfg.initial_batch == 0 || cfg.growth <= 0.0 {
        return Err(Error::Parameter("adaptive design needs ridge, threshold, batch and growth positive".into()));
    }
    let d = mdp.dim();
    let mut stats = StepStatistics::new(mdp, h);
    let mut trace = vec![];
    let mut episodes = 0u64;
    let mut iterations = 0;
    let mut value = design_value(&stats.cov, ridge, targets)?;
    let push = |trace: &mut Vec<DesignTraceRow>, it: usize, stats: &StepStatistics, value: f64, eta: f64| -> Result<()> {
        let n = stats.count.max(1) as f64;
        let lambda = &stats.cov / n;
        let lambda0 = Matrix::identity(d, d) * (ridge / n);
        let smoothed = if targets.is_empty() { 0.0 } else { xy_smoothed(&lambda, targets, eta, &lambda0)? };
        trace.push(DesignTraceRow {
            iteration: it,
            objective_value: value * n,
            smoothed_value: smoothed,
            min_eig: min_eigenvalue(&lambda),
            episodes_cumulative: stats.count,
        });
        Ok(())
    };
    if value <= threshold || targets.is_empty() {
        return Ok(AdaptiveResult { stats, value, reached: true, episodes, iterations, trace });
    }
    let uniform = Policy::uniform(mdp);
    let k = cfg.initial_batch.min(cfg.max_episodes as usize).max(1);
    for _ in 0..k {
        let log = env.run_truncated(&uniform, h)?;
        stats.add(mdp, &log);
    }
    episodes += k as u64;
    value = design_value(&stats.cov, ridge, targets)?;
    let eta_of = |n: f64| cfg.eta.unwrap_or_else(|| default_eta(targets, &(Matrix::identity(d, d) * (ridge / n))));
    push(&mut trace, 0, &stats, value, eta_of(stats.count.max(1) as f64))?;
    while value > threshold && episodes < cfg.max_episodes {
        iterations += 1;
        let n = stats.count.max(1) as f64;
        let eta = eta_of(n);
        let lambda = &stats.cov / n;
        let lambda0 = Matrix::identity(d, d) * (ridge / n);
        let xi = xy_gradient(&lambda, targets, eta, &lambda0)?;
        let mut top = 0.0_f64;
        for &s in mdp.layer(h) {
            for a in 0..mdp.num_actions(s) {
                top = top.max(quad_form(mdp.phi(s, a), &xi));
            }
        }
        if top <= 0.0 {
            break;
        }
        let reward = design_reward(mdp, h, &xi, top)?;
        let batch = ((cfg.growth * n).ceil() as u64).max(cfg.initial_batch as u64).min(cfg.max_episodes - episodes);
        play_into(env, learner, &reward, batch as usize, h, &mut stats, |_, _, _| {})?;
        episodes += batch;
        value = design_value(&stats.cov, ridge, targets)?;
        push(&mut trace, iterations, &stats, value, eta)?;
    }
    Ok(AdaptiveResult { reached: value <= threshold, stats, value, episodes, iterations, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::random_latent_mdp;
    use crate::mdp::expected_covariance;
    use crate::regret::{OracleRegMin, UniformRegMin};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn e(d: usize, i: usize) -> Vector {
        let mut v = Vector::zeros(d);
        v[i] = 1.0;
        v
    }

    fn random_psd(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Matrix {
        let b = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &b * b.transpose() * scale
    }

    fn random_targets(rng: &mut ChaCha8Rng, d: usize, n: usize) -> Vec<Vector> {
        (0..n)
            .map(|_| {
                let v = Vector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
                let norm = v.norm().max(1e-9);
                v * (rng.random_range(0.1..1.0) / norm)
            })
            .collect()
    }

    #[test]
    fn closed_form_two_axes() {
        let id = Matrix::identity(2, 2);
        let phi = vec![e(2, 0), e(2, 1)];
        let z = Matrix::zeros(2, 2);
        assert_eq!(xy_value(&z, &phi, &id).unwrap(), 1.0);
        for eta in [0.5, 3.0, 40.0] {
            let s = xy_smoothed(&z, &phi, eta, &id).unwrap();
            assert!((s - (1.0 + 2f64.ln() / eta)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_target_smoothing_is_exact() {
        let phi = vec![Vector::from_vec(vec![0.3, 0.4])];
        let lam = Matrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.2]);
        let id = Matrix::identity(2, 2) * 0.5;
        let a = xy_value(&lam, &phi, &id).unwrap();
        let b = xy_smoothed(&lam, &phi, 7.0, &id).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn single_target_gradient_collapses() {
        let xi = xy_gradient(&Matrix::zeros(3, 3), &[e(3, 0)], 2.0, &Matrix::identity(3, 3)).unwrap();
        assert!((xi - outer_e(3, 0)).abs().max() < 1e-15);
    }

    fn outer_e(d: usize, i: usize) -> Matrix {
        let v = e(d, i);
        &v * v.transpose()
    }

    #[test]
    fn huge_eta_does_not_overflow() {
        let phi = vec![e(2, 0) * 0.9, e(2, 1)];
        let id = Matrix::identity(2, 2) * 1e-3;
        let s = xy_smoothed(&Matrix::zeros(2, 2), &phi, 1e6, &id).unwrap();
        assert!(s.is_finite() && (s - 1000.0).abs() < 1e-3);
    }

    #[test]
    fn eta_is_monotone_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let d = rng.random_range(2..6);
            let lam = random_psd(&mut rng, d, 0.3);
            let n = rng.random_range(1..8);
            let phi = random_targets(&mut rng, d, n);
            let l0 = Matrix::identity(d, d) * (1.0 / d as f64);
            let s10 = xy_smoothed(&lam, &phi, 10.0, &l0).unwrap();
            let s1 = xy_smoothed(&lam, &phi, 1.0, &l0).unwrap();
            assert!(s10 <= s1 + 1e-12);
        }
    }

    #[test]
    fn trace_of_xi_is_bounded_by_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let d = rng.random_range(2..6);
            let lam = random_psd(&mut rng, d, 0.3);
            let n = rng.random_range(1..8);
            let phi = random_targets(&mut rng, d, n);
            let l0 = random_psd(&mut rng, d, 0.2) + Matrix::identity(d, d) * 0.05;
            let f = SmoothedXy::new(phi, rng.random_range(0.5..50.0), l0).unwrap();
            let xi = f.xi(&lam).unwrap();
            assert!(is_psd(&xi, 1e-12));
            assert!(xi.trace() <= f.constants().m * (1.0 + 1e-12));
        }
    }

    #[test]
    fn smoothness_constants() {
        let l0 = Matrix::identity(2, 2) * 0.5;
        let f = SmoothedXy::new(vec![e(2, 0)], 3.0, l0).unwrap();
        let c = f.constants();
        assert!((c.l - 4.0).abs() < 1e-12 && (c.m - 4.0).abs() < 1e-12);
        assert!((c.beta - 2.0 * 8.0 * 7.0).abs() < 1e-9);
    }

    #[test]
    fn bad_parameters_are_rejected() {
        let id = Matrix::identity(2, 2);
        assert!(SmoothedXy::new(vec![], 1.0, id.clone()).is_err());
        assert!(SmoothedXy::new(vec![e(2, 0)], 0.0, id).is_err());
        assert!(SmoothedXy::new(vec![e(2, 0)], 1.0, Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn default_eta_formula() {
        let phi = vec![e(2, 0) * 0.5, e(2, 1) * 0.25, e(2, 1) * 0.1];
        let l0 = Matrix::identity(2, 2) * 0.5;
        let eta = default_eta(&phi, &l0);
        assert!((eta - 2.0 * 1.5 * 3f64.ln() / 0.5).abs() < 1e-12);
        let tiny = vec![e(2, 0) * 1e-9, e(2, 1) * 1e-9];
        assert_eq!(default_eta(&tiny, &l0), 1e6);
    }

    #[test]
    fn first_step_is_midpoint() {
        let f = SmoothedXy::new(vec![e(2, 0), e(2, 1)], 5.0, Matrix::identity(2, 2)).unwrap();
        let verts = vec![outer_e(2, 0), outer_e(2, 1)];
        let x1 = outer_e(2, 1);
        let mut lmo = vertex_oracle(&verts);
        let st = approx_frank_wolfe(&f, &mut lmo, 1, x1.clone()).unwrap();
        let y1 = &st.history[0].y;
        assert!((&st.lambda - (&x1 + y1) * 0.5).abs().max() < 1e-15);
        assert_eq!(st.step_sizes(), vec![0.5]);
    }

    #[test]
    fn step_sizes_and_replay() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 3;
        let phi = random_targets(&mut rng, d, 4);
        let f = SmoothedXy::new(phi, 4.0, Matrix::identity(d, d) * 0.1).unwrap();
        let verts: Vec<Matrix> = (0..5)
            .map(|_| {
                let v = random_targets(&mut rng, d, 1).pop().unwrap();
                &v * v.transpose()
            })
            .collect();
        let mut lmo = vertex_oracle(&verts);
        let st = approx_frank_wolfe(&f, &mut lmo, 100, verts[0].clone()).unwrap();
        let want: Vec<f64> = (1..=100).map(|t| 1.0 / (t as f64 + 1.0)).collect();
        assert_eq!(st.step_sizes(), want);
        assert!((st.replay() - &st.lambda).abs().max() <= 1e-12);
        assert!(st.history.iter().all(|s| s.argmax.is_some()));
    }

    #[test]
    fn infeasible_oracle_output_is_a_contract_error() {
        let f = SmoothedXy::new(vec![e(2, 0)], 1.0, Matrix::identity(2, 2)).unwrap();
        let mut lmo = |_: usize, _: &Matrix| Ok(Matrix::identity(2, 2) * 2.0);
        let err = approx_frank_wolfe(&f, &mut lmo, 3, Matrix::zeros(2, 2)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        let mut neg = |_: usize, _: &Matrix| Ok(-Matrix::identity(2, 2) * 0.5);
        assert!(approx_frank_wolfe(&f, &mut neg, 3, Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn induced_reward_formula() {
        let mdp = random_latent_mdp(3, 3, 2, 2, 1).unwrap();
        let r = design_reward(&mdp, 0, &outer_e(3, 0), 1.0).unwrap();
        for &s in mdp.layer(0) {
            for a in 0..mdp.num_actions(s) {
                assert!((r.value(0, s, a) - mdp.phi(s, a)[0].powi(2)).abs() < 1e-15);
            }
        }
        assert!(design_reward(&mdp, 0, &(Matrix::identity(3, 3) * 5.0), 1.0).is_err());
    }

    fn one_action_mdp() -> LinearMdp {
        use crate::mdp::{MdpParts, RewardNoise};
        let f = Vector::from_vec(vec![0.6, 0.4]);
        let g = Vector::from_vec(vec![0.1, 0.9]);
        let m = Vector::from_vec(vec![1.0, 1.0]) * 0.5;
        LinearMdp::new(MdpParts {
            dim: 2,
            horizon: 2,
            state_names: vec!["s".into(), "u".into(), "v".into()],
            layers: vec![vec![0], vec![1, 2]],
            action_names: vec![vec!["a".into()], vec!["a".into()], vec!["a".into()]],
            phi: vec![vec![f.clone()], vec![f], vec![g]],
            mu: vec![vec![Vector::zeros(2), m.clone(), m]],
            theta: vec![Vector::from_vec(vec![0.2, 0.2]), Vector::from_vec(vec![0.5, 0.5])],
            noise: RewardNoise::Deterministic,
        })
        .unwrap()
    }

    #[test]
    fn fw_regret_with_one_policy_is_the_empirical_covariance() {
        let mdp = one_action_mdp();
        let mut env = Environment::new(&mdp, 9);
        let f = SmoothedXy::new(vec![e(2, 0), e(2, 1)], 2.0, Matrix::identity(2, 2)).unwrap();
        let run = fw_regret(&mut env, &f, &mut OracleRegMin, 7, 20, 1, true).unwrap();
        assert_eq!(run.logs.len(), 160);
        assert_eq!(run.stats.count, 160);
        let emp = &run.stats.cov / 160.0;
        assert!((&run.state.lambda - emp).abs().max() < 1e-12);
        assert!((run.state.replay() - &run.state.lambda).abs().max() < 1e-12);
        assert_eq!(run.trace.len(), 8);
    }

    #[test]
    fn schedule_values() {
        assert_eq!(opt_cov_schedule(1), (2, 8));
        assert_eq!(opt_cov_schedule(2), (4, 64));
        assert_eq!(opt_cov_schedule(3), (8, 512));
    }

    #[test]
    fn n_star_halving() {
        assert_eq!(n_star(3.0, 0.1 / 2.0), 2.0 * n_star(3.0, 0.1));
    }

    proptest! {
        #[test]
        fn k0_is_bounded_by_closed_form(
            t in 2usize..64,
            beta in 1.0f64..1e4,
            m in 0.1f64..100.0,
            delta in 1e-4f64..0.5,
            c1 in 0.0f64..1e3,
            c2 in 0.0f64..1e3,
            p1 in 1.0f64..3.0,
            p2 in 1.0f64..3.5,
        ) {
            let bound = RegretBound::new(c1, c2, p1, p2).unwrap();
            let k0 = k0_exact(t, beta, m, delta, 3, &bound) as f64;
            let tf = t as f64;
            let rhs = k0_tilde(t, beta, m, delta, 3, &bound) * tf * tf + k1_tilde(t, beta, m, delta, 3, &bound) * tf;
            prop_assert!(k0 <= rhs.ceil() + 1.0, "K0 = {k0}, bound = {rhs}");
        }

        #[test]
        fn sandwich(seed in 0u64..10_000, eta in 0.01f64..1e4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = rng.random_range(1..6);
            let lam = random_psd(&mut rng, d, 0.5);
            let n = rng.random_range(1..10);
            let phi = random_targets(&mut rng, d, n);
            let l0 = Matrix::identity(d, d) * rng.random_range(0.01..1.0);
            let v = xy_value(&lam, &phi, &l0).unwrap();
            let s = xy_smoothed(&lam, &phi, eta, &l0).unwrap();
            prop_assert!(s - v >= -1e-12);
            prop_assert!(s - v <= (phi.len() as f64).ln() / eta + 1e-12);
        }

        #[test]
        fn gradient_matches_finite_differences(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 4;
            let lam = random_psd(&mut rng, d, 0.2);
            let phi = random_targets(&mut rng, d, 5);
            let l0 = Matrix::identity(d, d) * 0.5;
            let eta = rng.random_range(0.5..5.0);
            let xi = xy_gradient(&lam, &phi, eta, &l0).unwrap();
            let fd = finite_difference(&lam, &phi, eta, &l0);
            for (a, b) in xi.iter().zip(fd.iter()) {
                if a.abs() >= 1e-8 {
                    prop_assert!(((a - b) / a).abs() <= 1e-5, "{a} vs {b}");
                }
            }
        }
    }

    pub(crate) fn finite_difference(lam: &Matrix, phi: &[Vector], eta: f64, l0: &Matrix) -> Matrix {
        let d = lam.nrows();
        let step = 1e-5;
        Matrix::from_fn(d, d, |i, j| {
            let mut up = lam.clone();
            let mut dn = lam.clone();
            up[(i, j)] += step;
            dn[(i, j)] -= step;
            let a = xy_smoothed(&up, phi, eta, l0).unwrap();
            let b = xy_smoothed(&dn, phi, eta, l0).unwrap();
            -(a - b) / (2.0 * step)
        })
    }

    #[test]
    fn kiefer_wolfowitz_on_small_instance() {
        let mdp = random_latent_mdp(3, 4, 3, 2, 11).unwrap();
        let policies: Vec<Policy> = (0..5)
            .map(|i| Policy::deterministic_from(&mdp, |h, s| (i + h + s) % mdp.num_actions(s)))
            .collect();
        let h = 1;
        let verts: Vec<Matrix> = policies.iter().map(|p| expected_covariance(&mdp, p, h).unwrap()).collect();
        let targets: Vec<Vector> = policies
            .iter()
            .map(|p| crate::mdp::feature_visitation(&mdp, p).unwrap()[h].clone())
            .collect();
        let l0 = Matrix::identity(3, 3) * 1e-6;
        let f = SmoothedXy::new(targets.clone(), 100.0, l0.clone()).unwrap();
        let mut lmo = vertex_oracle(&verts);
        let st = approx_frank_wolfe(&f, &mut lmo, 1000, verts.iter().sum::<Matrix>() / 5.0).unwrap();
        let v = xy_value(&st.lambda, &targets, &l0).unwrap();
        assert!(v <= 3.0 * 1.05, "design value {v}");
    }

    #[test]
    fn conditioned_cov_single_full_rank_policy() {
        let mdp = random_latent_mdp(3, 6, 1, 2, 2).unwrap();
        let mut env = Environment::new(&mdp, 1);
        let mut stats = StepStatistics::new(&mdp, 1);
        let cfg = ConditionedCovConfig { constant_scale: 1e-6, first_batch: 200, ..Default::default() };
        let res = conditioned_cov(&mut env, &mut OracleRegMin, 1000, 1, &cfg, &mut stats).unwrap();
        assert_eq!(res.rounds, 1);
        assert_eq!(res.replay_episodes, 1000);
        assert!(res.min_eig >= res.target);
        assert_eq!(stats.count, 1200);
        assert!((stats.cov.clone() - &res.covariance).abs().max() < 1e-9);
    }

    #[test]
    fn conditioned_cov_reports_stagnation() {
        let mdp = one_action_mdp();
        let mut env = Environment::new(&mdp, 1);
        let mut stats = StepStatistics::new(&mdp, 0);
        let cfg = ConditionedCovConfig { lambda_floor: 1.0, constant_scale: 1e-9, patience: 3, ..Default::default() };
        let err = conditioned_cov(&mut env, &mut UniformRegMin, 100, 0, &cfg, &mut stats).unwrap_err();
        assert!(matches!(err, Error::Numerical(m) if m.contains("stalled")));
    }

    #[test]
    fn adaptive_design_reaches_threshold() {
        let mdp = random_latent_mdp(3, 4, 3, 2, 7).unwrap();
        let targets: Vec<Vector> = (0..3).map(|a| mdp.phi(mdp.start(), a).clone()).collect();
        let mut env = Environment::new(&mdp, 3);
        let res = adaptive_xy_design(&mut env, &mut OracleRegMin, &targets, 0, 1.0 / 3.0, 0.01, &AdaptiveConfig::default())
            .unwrap();
        assert!(res.reached);
        let check = design_value(&res.stats.cov, 1.0 / 3.0, &targets).unwrap();
        assert!((check - res.value).abs() < 1e-12 && check <= 0.01);
        assert_eq!(res.stats.count, res.episodes);
        assert!(design_trace_csv(&res.trace).starts_with("iteration,objective_value"));
    }

    #[test]
    fn opt_cov_meets_tolerance_on_toy() {
        let mdp = random_latent_mdp(2, 3, 3, 1, 5).unwrap();
        let targets: Vec<Vector> = (0..3).map(|a| mdp.phi(mdp.start(), a).clone()).collect();
        let mut env = Environment::new(&mdp, 4);
        let eps = 0.02;
        let cfg = OptCovConfig {
            eps,
            delta: 0.1,
            constant_scale: 1e-9,
            gate: GateMode::Off,
            bound: RegretBound::new(1.0, 1.0, 1.0, 1.0).unwrap(),
            max_episodes: 2_000_000,
            max_rounds: 12,
        };
        let ccfg = ConditionedCovConfig { constant_scale: 1e-6, first_batch: 8, ..Default::default() };
        let mut base = Matrix::zeros(2, 2);
        let mut family = |_: u32, n: u64, env: &mut Environment, stats: &mut StepStatistics| -> Result<Box<dyn SmoothObjective>> {
            let cc = conditioned_cov(env, &mut OracleRegMin, n, 0, &ccfg, stats)?;
            base = cc.covariance.clone();
            let l0 = cc.covariance / n as f64;
            Ok(Box::new(SmoothedXy::with_default_eta(targets.clone(), l0)?) as Box<dyn SmoothObjective>)
        };
        let res = opt_cov(&mut env, &mut family, &mut OracleRegMin, 0, &cfg).unwrap();
        assert!(!res.partial);
        let achieved = xy_value(&res.covariance, &targets, &base).unwrap();
        assert!(achieved <= eps, "achieved {achieved}");
    }
}
