//! Regret minimization: the learner contract used by the design routines,
//! an optimistic least-squares value-iteration learner, a known-dynamics
//! planner, uniform play, and the online-to-batch protocol.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{add_outer, sherman_morrison, Matrix, Vector};
use crate::mdp::{plan, value_under, Environment, EpisodeLog, LinearMdp, Policy, StepTable};

/// High-probability guarantee `sqrt(C1 K log^p1(HK/delta)) + C2 log^p2(HK/delta)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretBound {
    pub c1: f64,
    pub c2: f64,
    pub p1: f64,
    pub p2: f64,
}

impl RegretBound {
    pub fn new(c1: f64, c2: f64, p1: f64, p2: f64) -> Result<Self> {
        if c1 < 0.0 || c2 < 0.0 || p1 < 1.0 || p2 < 1.0 {
            return Err(Error::Parameter("regret bound needs C1, C2 >= 0 and p1, p2 >= 1".into()));
        }
        Ok(Self { c1, c2, p1, p2 })
    }

    /// `C1 = d^4 H^4`, `C2 = d^4 H^3`, `p1 = 3`, `p2 = 7/2`.
    pub fn force_defaults(d: usize, horizon: usize) -> Self {
        let (d, h) = (d as f64, horizon as f64);
        Self { c1: d.powi(4) * h.powi(4), c2: d.powi(4) * h.powi(3), p1: 3.0, p2: 3.5 }
    }

    pub fn regret(&self, k: f64, horizon: usize, delta: f64) -> f64 {
        let l = (horizon as f64 * k / delta).ln().max(0.0);
        (self.c1 * k * l.powf(self.p1)).sqrt() + self.c2 * l.powf(self.p2)
    }
}

/// Expected-regret guarantee `C1 K^alpha + C2` used by the lower bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRegretBound {
    pub c1: f64,
    pub c2: f64,
    pub alpha: f64,
}

impl LowRegretBound {
    pub fn regret(&self, k: f64) -> f64 {
        self.c1 * k.powf(self.alpha) + self.c2
    }
}

/// Which guarantee a learner declares.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum RegretContract {
    HighProbability(RegretBound),
    Expected(LowRegretBound),
}

/// Deterministic reward table with values in `[0, 1]`, checked on construction.
#[derive(Clone, Debug)]
pub struct RewardFunction {
    table: StepTable,
}

impl RewardFunction {
    pub fn from_fn(mdp: &LinearMdp, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut table: StepTable = (0..mdp.horizon())
            .map(|_| (0..mdp.num_states()).map(|s| vec![0.0; mdp.num_actions(s)]).collect())
            .collect();
        for (h, row) in table.iter_mut().enumerate() {
            for &s in mdp.layer(h) {
                for (a, cell) in row[s].iter_mut().enumerate() {
                    let r = f(h, s, a);
                    if !(0.0..=1.0).contains(&r) {
                        return Err(Error::Contract(format!(
                            "reward {r} outside [0, 1] at step {h} state {} action {a}",
                            mdp.state_name(s)
                        )));
                    }
                    *cell = r;
                }
            }
        }
        Ok(Self { table })
    }

    /// Reward that is nonzero only at step `h`.
    pub fn at_step(mdp: &LinearMdp, h: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        Self::from_fn(mdp, |hh, s, a| if hh == h { f(s, a) } else { 0.0 })
    }

    pub fn value(&self, h: usize, s: usize, a: usize) -> f64 {
        self.table[h][s][a]
    }

    pub fn table(&self) -> &StepTable {
        &self.table
    }
}

/// A learner that plays episodes against a fixed deterministic reward.
pub trait RegretMinimizer {
    fn name(&self) -> &'static str;

    /// Plays `k` episodes. With `truncate_at = Some(h)` the episodes are in
    /// the `h`-truncated model. `observe` receives the policy of each episode
    /// and its log; the policy depends only on earlier episodes.
    fn play(
        &mut self,
        env: &mut Environment,
        reward: &RewardFunction,
        k: usize,
        truncate_at: Option<usize>,
        observe: &mut dyn FnMut(&Policy, &EpisodeLog),
    ) -> Result<()>;
}

fn run_one(env: &mut Environment, policy: &Policy, truncate_at: Option<usize>) -> Result<EpisodeLog> {
    match truncate_at {
        Some(h) => env.run_truncated(policy, h),
        None => env.run(policy, None),
    }
}

/// Plans with the true model and replays the optimal policy; zero regret.
#[derive(Clone, Debug, Default)]
pub struct OracleRegMin;

impl RegretMinimizer for OracleRegMin {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn play(
        &mut self,
        env: &mut Environment,
        reward: &RewardFunction,
        k: usize,
        truncate_at: Option<usize>,
        observe: &mut dyn FnMut(&Policy, &EpisodeLog),
    ) -> Result<()> {
        let mdp = env.mdp();
        let (policy, _) = plan(mdp, reward.table(), truncate_at.unwrap_or(mdp.horizon() - 1));
        for _ in 0..k {
            let log = run_one(env, &policy, truncate_at)?;
            observe(&policy, &log);
        }
        Ok(())
    }
}

/// Uniformly random actions; a baseline, not a regret minimizer.
#[derive(Clone, Debug, Default)]
pub struct UniformRegMin;

impl RegretMinimizer for UniformRegMin {
    fn name(&self) -> &'static str {
        "uniform"
    }

    fn play(
        &mut self,
        env: &mut Environment,
        _reward: &RewardFunction,
        k: usize,
        truncate_at: Option<usize>,
        observe: &mut dyn FnMut(&Policy, &EpisodeLog),
    ) -> Result<()> {
        let policy = Policy::uniform(env.mdp());
        for _ in 0..k {
            let log = run_one(env, &policy, truncate_at)?;
            observe(&policy, &log);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsviConfig {
    pub ridge: f64,
    /// Multiplier `c` of the bonus `c d H sqrt(log(d K H / delta))`.
    pub bonus_scale: f64,
    pub delta: f64,
    /// Recompute the greedy policy only when some `log det Lambda_h` has grown
    /// by `log 2` since the last recomputation.
    pub rare_switching: bool,
}

impl Default for LsviConfig {
    fn default() -> Self {
        Self { ridge: 1.0, bonus_scale: 1.0, delta: 0.1, rare_switching: true }
    }
}

impl LsviConfig {
    pub fn bonus(&self, d: usize, horizon: usize, k: usize) -> f64 {
        let (df, hf) = (d as f64, horizon as f64);
        let l = (df * (k.max(1) as f64) * hf / self.delta).ln().max(1.0);
        self.bonus_scale * df * hf * l.sqrt()
    }
}

/// Where the learner takes rewards from.
#[derive(Clone, Copy, Debug)]
pub enum RewardSource<'r> {
    /// A known deterministic table.
    Known(&'r RewardFunction),
    /// Observed rewards, regressed on the features.
    Observed,
}

/// Sufficient statistics and current policy of optimistic LSVI.
///
/// Regression targets `V_{h+1}(s_{h+1})` are aggregated per next state,
/// which is exact for finite state spaces and keeps updates at `O(d^2)`.
pub struct LsviState {
    cfg: LsviConfig,
    last: usize,
    bonus: f64,
    inv: Vec<Matrix>,
    cov: Vec<Matrix>,
    logdet: Vec<f64>,
    logdet_at_plan: Vec<f64>,
    next_feat: Vec<Vec<Vector>>,
    reward_feat: Vec<Vector>,
    policy: Policy,
    stale: bool,
}

impl LsviState {
    /// `last` is the final step that is learned (the truncation step, or `H - 1`).
    pub fn new(mdp: &LinearMdp, cfg: LsviConfig, last: usize, planned_episodes: usize) -> Self {
        let d = mdp.dim();
        let n = last + 1;
        Self {
            cfg,
            last,
            bonus: cfg.bonus(d, mdp.horizon(), planned_episodes),
            inv: vec![Matrix::identity(d, d) / cfg.ridge; n],
            cov: vec![Matrix::identity(d, d) * cfg.ridge; n],
            logdet: vec![d as f64 * cfg.ridge.ln(); n],
            logdet_at_plan: vec![f64::NEG_INFINITY; n],
            next_feat: vec![vec![Vector::zeros(d); mdp.num_states()]; n],
            reward_feat: vec![Vector::zeros(d); n],
            policy: Policy::uniform(mdp),
            stale: true,
        }
    }

    pub fn bonus(&self) -> f64 {
        self.bonus
    }

    /// Regularized covariance `lambda I + sum phi phi^T` at step `h`.
    pub fn covariance(&self, h: usize) -> &Matrix {
        &self.cov[h]
    }

    pub fn update(&mut self, mdp: &LinearMdp, log: &EpisodeLog) {
        for h in 0..=self.last.min(log.steps.len() - 1) {
            let st = &log.steps[h];
            if !st.usable {
                break;
            }
            let f = mdp.phi(st.state, st.action);
            let q = sherman_morrison(&mut self.inv[h], f);
            add_outer(&mut self.cov[h], f, 1.0);
            self.logdet[h] += q.ln_1p();
            self.reward_feat[h].axpy(st.reward, f, 1.0);
            if h < self.last {
                if let Some(t) = st.next_state {
                    self.next_feat[h][t] += f;
                }
            }
        }
        let grown = (0..=self.last).any(|h| self.logdet[h] > self.logdet_at_plan[h] + std::f64::consts::LN_2);
        if !self.cfg.rare_switching || grown {
            self.stale = true;
        }
    }

    /// Current optimistic policy.
    pub fn policy(&mut self, mdp: &LinearMdp, reward: RewardSource) -> &Policy {
        if self.stale {
            self.policy = self.compute(mdp, reward, self.bonus);
            self.logdet_at_plan.clone_from(&self.logdet);
            self.stale = false;
        }
        &self.policy
    }

    /// Greedy policy with respect to the estimates, without bonus.
    pub fn greedy(&self, mdp: &LinearMdp, reward: RewardSource) -> Policy {
        self.compute(mdp, reward, 0.0)
    }

    /// Certifies the greedy start action: returns it when, for every other
    /// start action `a`, the estimated advantage exceeds
    /// `width * ||phi(s0, best) - phi(s0, a)||` in the inverse step-0 covariance.
    pub fn certify_start(&self, mdp: &LinearMdp, reward: RewardSource, width: f64) -> Option<usize> {
        let mut q = vec![];
        self.backward(mdp, reward, 0.0, Some(&mut q));
        let s0 = mdp.start();
        let mut best = 0;
        for a in 1..q.len() {
            if q[a] > q[best] {
                best = a;
            }
        }
        let certified = (0..q.len()).filter(|&a| a != best).all(|a| {
            let diff = mdp.phi(s0, best) - mdp.phi(s0, a);
            let w = crate::linalg::quad_form(&diff, &self.inv[0]).max(0.0).sqrt();
            q[best] - q[a] > width * w
        });
        certified.then_some(best)
    }

    fn compute(&self, mdp: &LinearMdp, reward: RewardSource, bonus: f64) -> Policy {
        self.backward(mdp, reward, bonus, None)
    }

    fn backward(&self, mdp: &LinearMdp, reward: RewardSource, bonus: f64, mut start_q: Option<&mut Vec<f64>>) -> Policy {
        let horizon = mdp.horizon();
        let mut table = vec![vec![None; mdp.num_states()]; horizon];
        for (h, row) in table.iter_mut().enumerate().skip(self.last + 1) {
            for &s in mdp.layer(h) {
                row[s] = Some(0);
            }
        }
        let mut v_next = vec![0.0; mdp.num_states()];
        for h in (0..=self.last).rev() {
            let mut target = Vector::zeros(mdp.dim());
            if let RewardSource::Observed = reward {
                target += &self.reward_feat[h];
            }
            if h < self.last {
                for &t in mdp.layer(h + 1) {
                    if v_next[t] != 0.0 {
                        target.axpy(v_next[t], &self.next_feat[h][t], 1.0);
                    }
                }
            }
            let w = &self.inv[h] * target;
            let cap = (self.last - h + 1) as f64;
            let mut v = vec![0.0; mdp.num_states()];
            for &s in mdp.layer(h) {
                let mut best = f64::NEG_INFINITY;
                let mut best_a = 0;
                for a in 0..mdp.num_actions(s) {
                    let f = mdp.phi(s, a);
                    let mut q = f.dot(&w);
                    if let RewardSource::Known(r) = reward {
                        q += r.value(h, s, a);
                    }
                    if bonus > 0.0 {
                        q += bonus * crate::linalg::quad_form(f, &self.inv[h]).max(0.0).sqrt();
                    }
                    let q = q.min(cap);
                    if h == 0 && s == mdp.start() {
                        if let Some(out) = start_q.as_deref_mut() {
                            out.push(q);
                        }
                    }
                    if q > best {
                        best = q;
                        best_a = a;
                    }
                }
                v[s] = best.max(0.0);
                table[h][s] = Some(best_a);
            }
            v_next = v;
        }
        Policy::Deterministic(table)
    }
}

/// Optimistic least-squares value iteration.
#[derive(Clone, Debug, Default)]
pub struct Lsvi {
    pub cfg: LsviConfig,
}

impl Lsvi {
    pub fn new(cfg: LsviConfig) -> Self {
        Self { cfg }
    }
}

impl RegretMinimizer for Lsvi {
    fn name(&self) -> &'static str {
        "lsvi"
    }

    fn play(
        &mut self,
        env: &mut Environment,
        reward: &RewardFunction,
        k: usize,
        truncate_at: Option<usize>,
        observe: &mut dyn FnMut(&Policy, &EpisodeLog),
    ) -> Result<()> {
        let mdp = env.mdp();
        let last = truncate_at.unwrap_or(mdp.horizon() - 1);
        let mut state = LsviState::new(mdp, self.cfg, last, k);
        for _ in 0..k {
            let policy = state.policy(mdp, RewardSource::Known(reward)).clone();
            let log = run_one(env, &policy, truncate_at)?;
            state.update(mdp, &log);
            observe(&policy, &log);
        }
        Ok(())
    }
}

/// Learner selection by name.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegMinKind {
    Lsvi(LsviConfig),
    Oracle,
    Uniform,
}

impl RegMinKind {
    pub fn build(&self) -> Box<dyn RegretMinimizer> {
        match self {
            RegMinKind::Lsvi(cfg) => Box::new(Lsvi::new(*cfg)),
            RegMinKind::Oracle => Box::new(OracleRegMin),
            RegMinKind::Uniform => Box::new(UniformRegMin),
        }
    }

    /// Regret guarantee charged in design gates. The planner has none to pay;
    /// the others are charged the generic `d^4 H^4` constants.
    pub fn contract_bound(&self, d: usize, horizon: usize) -> RegretBound {
        match self {
            RegMinKind::Oracle => RegretBound { c1: 0.0, c2: 0.0, p1: 1.0, p2: 1.0 },
            _ => RegretBound::force_defaults(d, horizon),
        }
    }
}

/// Everything a learner played.
#[derive(Clone, Debug)]
pub struct RegMinRun {
    pub policies: Vec<Policy>,
    pub logs: Vec<EpisodeLog>,
    /// `sum phi phi^T` over usable records, per step.
    pub covariance: Vec<Matrix>,
}

/// Runs a learner for `k` episodes and keeps every log.
pub fn run_regmin(
    env: &mut Environment,
    learner: &mut dyn RegretMinimizer,
    reward: &RewardFunction,
    k: usize,
    truncate_at: Option<usize>,
) -> Result<RegMinRun> {
    if k == 0 {
        return Err(Error::Parameter("run_regmin needs K >= 1".into()));
    }
    let mdp = env.mdp();
    let d = mdp.dim();
    let mut run = RegMinRun {
        policies: Vec::with_capacity(k),
        logs: Vec::with_capacity(k),
        covariance: vec![Matrix::zeros(d, d); mdp.horizon()],
    };
    learner.play(env, reward, k, truncate_at, &mut |p, log| {
        for (h, st) in log.steps.iter().enumerate() {
            if st.usable {
                add_outer(&mut run.covariance[h], mdp.phi(st.state, st.action), 1.0);
            }
        }
        run.policies.push(p.clone());
        run.logs.push(log.clone());
    })?;
    Ok(run)
}

/// Cumulative regret of the played policies under `reward`, computed exactly.
pub fn exact_regret(mdp: &LinearMdp, reward: &RewardFunction, policies: &[Policy]) -> Result<Vec<f64>> {
    let (_, best) = plan(mdp, reward.table(), mdp.horizon() - 1);
    let mut out = Vec::with_capacity(policies.len());
    let mut total = 0.0;
    for p in policies {
        total += best - value_under(mdp, p, reward.table())?;
        out.push(total);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct OnlineToBatchResult {
    pub episodes: u64,
    pub recommended: Policy,
    /// True when no data was collected; the recommendation is then uniform.
    pub undefined: bool,
    /// Greedy recommendation at each schedule point.
    pub checkpoints: Vec<(u64, Policy)>,
}

/// Default budget schedule: geometric from 64 with ratio `2^{1/4}` up to
/// `ceil(d log(1/delta) / eps^2)` scaled by `scale`.
pub fn default_schedule(d: usize, eps: f64, delta: f64, scale: f64) -> Vec<u64> {
    let top = ((d as f64) * (1.0 / delta).ln().max(1.0) / (eps * eps) * scale).ceil().max(64.0) as u64;
    geometric_schedule(64, top, 2f64.powf(0.25))
}

pub fn geometric_schedule(first: u64, last: u64, ratio: f64) -> Vec<u64> {
    let mut out = vec![];
    let mut x = first.max(1) as f64;
    while (x.round() as u64) < last {
        let v = x.round() as u64;
        if out.last() != Some(&v) {
            out.push(v);
        }
        x *= ratio;
    }
    out.push(last);
    out
}

/// Runs optimistic LSVI on the observed reward and records the greedy policy
/// at each schedule point; the recommendation is the one at the last point.
pub fn online_to_batch(env: &mut Environment, cfg: LsviConfig, schedule: &[u64]) -> Result<OnlineToBatchResult> {
    let mdp = env.mdp();
    let total = schedule.iter().copied().max().unwrap_or(0);
    if total == 0 {
        return Ok(OnlineToBatchResult {
            episodes: 0,
            recommended: Policy::uniform(mdp),
            undefined: true,
            checkpoints: vec![],
        });
    }
    let mut points: Vec<u64> = schedule.iter().copied().filter(|&x| x > 0).collect();
    points.sort_unstable();
    points.dedup();
    let mut state = LsviState::new(mdp, cfg, mdp.horizon() - 1, total as usize);
    let mut checkpoints = Vec::with_capacity(points.len());
    let mut next = 0;
    for k in 1..=total {
        let policy = state.policy(mdp, RewardSource::Observed).clone();
        let log = env.run(&policy, None)?;
        state.update(mdp, &log);
        if next < points.len() && points[next] == k {
            checkpoints.push((k, state.greedy(mdp, RewardSource::Observed)));
            next += 1;
        }
    }
    let recommended = checkpoints.last().map(|c| c.1.clone()).unwrap_or_else(|| Policy::uniform(mdp));
    Ok(OnlineToBatchResult { episodes: total, recommended, undefined: false, checkpoints })
}

/// Online-to-batch with a stopping rule: at each schedule point the greedy
/// start action is checked with [`LsviState::certify_start`], and the run
/// stops at the first certified point. Without certification the run ends at
/// the last point with the greedy recommendation and `certified_at = None`.
pub fn online_to_batch_certified(
    env: &mut Environment,
    cfg: LsviConfig,
    schedule: &[u64],
    width: f64,
) -> Result<CertifiedRun> {
    let mdp = env.mdp();
    let mut points: Vec<u64> = schedule.iter().copied().filter(|&x| x > 0).collect();
    points.sort_unstable();
    points.dedup();
    let total = points.last().copied().unwrap_or(0);
    let mut state = LsviState::new(mdp, cfg, mdp.horizon() - 1, total as usize);
    let mut next = 0;
    for k in 1..=total {
        let policy = state.policy(mdp, RewardSource::Observed).clone();
        let log = env.run(&policy, None)?;
        state.update(mdp, &log);
        if points[next] == k {
            next += 1;
            if let Some(a) = state.certify_start(mdp, RewardSource::Observed, width) {
                return Ok(CertifiedRun {
                    episodes: k,
                    start_action: a,
                    recommended: state.greedy(mdp, RewardSource::Observed),
                    certified_at: Some(k),
                });
            }
        }
    }
    let recommended = state.greedy(mdp, RewardSource::Observed);
    let start_action = recommended.action_probs(mdp, 0, mdp.start())?.iter().position(|p| *p > 0.5).unwrap_or(0);
    Ok(CertifiedRun { episodes: total, start_action, recommended, certified_at: None })
}

/// Confidence width `sqrt(64 H^4 log(4 H^2 |A| / delta) * scale)` used by the
/// certified baseline; `|A|` is the action count at the start state.
pub fn certification_width(mdp: &LinearMdp, delta: f64, scale: f64) -> f64 {
    let h = mdp.horizon() as f64;
    let a = mdp.num_actions(mdp.start()) as f64;
    (64.0 * h.powi(4) * (4.0 * h * h * a / delta).ln() * scale).sqrt()
}

#[derive(Clone, Debug)]
pub struct CertifiedRun {
    pub episodes: u64,
    pub start_action: usize,
    pub recommended: Policy,
    pub certified_at: Option<u64>,
}
