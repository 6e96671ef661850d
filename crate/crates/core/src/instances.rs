//! Benchmark environments: the hard linear-bandit instance and its two-step
//! MDP embedding, tabular models written as linear MDPs, the chain used to
//! compare against gap-visitation complexity, and random latent-state models.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::mdp::{seeded_rng, LinearMdp, MdpParts, Policy, RewardNoise, ViolationKind};

fn unit(d: usize, i: usize) -> Vector {
    let mut v = Vector::zeros(d);
    v[i] = 1.0;
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArmKind {
    /// `xi * e_1`.
    Optimal,
    /// `e_i` for `i = 2..d` (zero-based coordinate stored).
    Axis(usize),
    /// `(xi - Delta) e_1 + gamma e_i`.
    Near(usize),
}

/// Hard linear-bandit instance with `theta_* = e_1`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HardBandit {
    pub d: usize,
    pub gap: f64,
    pub xi: f64,
    pub gamma: f64,
    pub zeta: f64,
    pub alpha: f64,
    pub c1: f64,
    pub c2: f64,
    pub theta_star: Vec<f64>,
    /// Arm order: `xi e_1`, then `e_2..e_d`, then `x_2..x_d`.
    pub arms: Vec<Vec<f64>>,
    pub kinds: Vec<ArmKind>,
    /// False for desk-scale presets that skip the parameter bounds.
    pub faithful: bool,
}

/// Largest gap allowed by the parameter bounds.
pub fn max_hard_gap(d: usize, alpha: f64, c1: f64, c2: f64) -> f64 {
    let df = d as f64;
    let a = 1.0 / (2704.0 * df * df);
    let b = (1.0 / (10816.0 * c2)).sqrt();
    let c = (1.0 / (10816.0 * df.powf(alpha) * c1)).powf(1.0 / (2.0 * (1.0 - alpha)));
    a.min(b).min(c)
}

/// One inequality of the instance constraints, evaluated as `lhs <= rhs`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Constraint {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
}

impl Constraint {
    /// Allows a relative slack of `1e-12` for parameters set at the boundary.
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs + 1e-12 * self.rhs.abs()
    }
}

/// Builds the instance at the largest admissible `xi = 1/(52 d)` and
/// `gamma^2 = max{zeta, d Delta}`.
pub fn make_hard_bandit(d: usize, gap: f64, alpha: f64, c1: f64, c2: f64) -> Result<HardBandit> {
    if d < 2 {
        return Err(Error::Parameter("hard instance needs d >= 2".into()));
    }
    if !(0.0..1.0).contains(&alpha) || c1 <= 0.0 || c2 <= 0.0 || gap <= 0.0 {
        return Err(Error::Parameter("need 0 <= alpha < 1, C1, C2 > 0 and Delta > 0".into()));
    }
    let df = d as f64;
    let bounds = [
        ("Delta <= 1/(2704 d^2)", 1.0 / (2704.0 * df * df)),
        ("Delta <= sqrt(1/(10816 C2))", (1.0 / (10816.0 * c2)).sqrt()),
        (
            "Delta <= (1/(10816 d^alpha C1))^(1/(2(1-alpha)))",
            (1.0 / (10816.0 * df.powf(alpha) * c1)).powf(1.0 / (2.0 * (1.0 - alpha))),
        ),
    ];
    for (name, bound) in bounds {
        if gap > bound {
            return Err(Error::Parameter(format!("{name} violated: Delta = {gap:e} > {bound:e}")));
        }
    }
    let zeta = hard_zeta(d, gap, alpha, c1, c2);
    let xi = 1.0 / (52.0 * df);
    let gamma = zeta.max(df * gap).sqrt();
    let b = assemble(d, xi, gamma, gap, zeta, alpha, c1, c2, true);
    if let Some(c) = b.constraints().into_iter().find(|c| !c.holds()) {
        return Err(Error::Parameter(format!(
            "instance constraint {} violated: {:e} > {:e}",
            c.name, c.lhs, c.rhs
        )));
    }
    Ok(b)
}

/// `zeta = 2 C1 / (d / Delta^2)^(1 - alpha) + 2 C2 Delta^2 / d`.
pub fn hard_zeta(d: usize, gap: f64, alpha: f64, c1: f64, c2: f64) -> f64 {
    let df = d as f64;
    2.0 * c1 / (df / (gap * gap)).powf(1.0 - alpha) + 2.0 * c2 * gap * gap / df
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    d: usize,
    xi: f64,
    gamma: f64,
    gap: f64,
    zeta: f64,
    alpha: f64,
    c1: f64,
    c2: f64,
    faithful: bool,
) -> HardBandit {
    let mut arms = vec![];
    let mut kinds = vec![];
    arms.push(unit(d, 0) * xi);
    kinds.push(ArmKind::Optimal);
    for i in 1..d {
        arms.push(unit(d, i));
        kinds.push(ArmKind::Axis(i));
    }
    for i in 1..d {
        arms.push(unit(d, 0) * (xi - gap) + unit(d, i) * gamma);
        kinds.push(ArmKind::Near(i));
    }
    HardBandit {
        d,
        gap,
        xi,
        gamma,
        zeta,
        alpha,
        c1,
        c2,
        theta_star: unit(d, 0).as_slice().to_vec(),
        arms: arms.iter().map(|a| a.as_slice().to_vec()).collect(),
        kinds,
        faithful,
    }
}

impl HardBandit {
    /// Same arm geometry with free `xi`, `gamma` and gap, for experiments at
    /// budgets where the parameter bounds are out of reach. `zeta` is set to
    /// `gamma^2`, the loosest value the constraints allow.
    pub fn scaled(d: usize, xi: f64, gamma: f64, gap: f64) -> Result<HardBandit> {
        if d < 2 {
            return Err(Error::Parameter("hard instance needs d >= 2".into()));
        }
        if !(gap > 0.0 && gap < xi && xi <= 0.5 && gamma > 0.0) {
            return Err(Error::Parameter(format!(
                "scaled hard instance needs 0 < Delta < xi <= 1/2 and gamma > 0 (got Delta={gap}, xi={xi}, gamma={gamma})"
            )));
        }
        let b = assemble(d, xi, gamma, gap, gamma * gamma, 0.5, 1.0, 1.0, false);
        if b.arms.iter().any(|a| Vector::from_column_slice(a).norm() > 1.0) {
            return Err(Error::Parameter("scaled hard instance has an arm outside the unit ball".into()));
        }
        Ok(b)
    }

    pub fn arm(&self, j: usize) -> Vector {
        Vector::from_column_slice(&self.arms[j])
    }

    pub fn theta(&self) -> Vector {
        Vector::from_column_slice(&self.theta_star)
    }

    pub fn num_arms(&self) -> usize {
        self.arms.len()
    }

    pub fn mean(&self, j: usize) -> f64 {
        self.arm(j).dot(&self.theta())
    }

    /// `<theta_*, z_* - z>` for every arm.
    pub fn gaps(&self) -> Vec<f64> {
        (0..self.num_arms()).map(|j| self.mean(0) - self.mean(j)).collect()
    }

    pub fn optimal_arm(&self) -> usize {
        0
    }

    /// The instance inequalities as `lhs <= rhs` pairs.
    pub fn constraints(&self) -> Vec<Constraint> {
        let df = self.d as f64;
        let c = |name: &str, lhs: f64, rhs: f64| Constraint { name: name.into(), lhs, rhs };
        let max_norm = (0..self.num_arms()).map(|j| self.arm(j).norm()).fold(0.0, f64::max);
        vec![
            c("xi <= 1/(52 d)", self.xi, 1.0 / (52.0 * df)),
            c("gamma/sqrt(d) <= xi", self.gamma / df.sqrt(), self.xi),
            c("sqrt(Delta) <= xi", self.gap.sqrt(), self.xi),
            c("zeta <= gamma^2", self.zeta, self.gamma * self.gamma),
            c("Delta <= gamma^2", self.gap, self.gamma * self.gamma),
            c("|z| <= 1", max_norm, 1.0),
        ]
    }
}

/// The two-step linear MDP in dimension `d + 1` that simulates the bandit.
///
/// States: `s0` (start), `s1`, `sbar_2..sbar_{d+1}`. Every state offers the
/// `2d - 1` arms followed by the extra action `e_{d+1}/2`; only `s0`
/// distinguishes them.
#[derive(Clone, Debug)]
pub struct HardMdp {
    pub mdp: LinearMdp,
    pub bandit: HardBandit,
}

impl HardMdp {
    pub fn num_actions(&self) -> usize {
        self.bandit.num_arms() + 1
    }

    /// Index of the `e_{d+1}/2` action.
    pub fn extra_action(&self) -> usize {
        self.bandit.num_arms()
    }

    /// `pi^{z,z'}`: action `z` at the start state, `z'` everywhere at step 2.
    pub fn policy(&self, z: usize, z2: usize) -> Policy {
        Policy::deterministic_from(&self.mdp, |h, _| if h == 0 { z } else { z2 })
    }

    /// Step-one action with the largest probability under `policy`.
    pub fn decode(&self, policy: &Policy) -> Result<usize> {
        let p = policy.action_probs(&self.mdp, 0, self.mdp.start())?;
        let mut best = 0;
        for (a, w) in p.iter().enumerate() {
            if *w > p[best] {
                best = a;
            }
        }
        Ok(best)
    }

    /// Mean return of each step-one action.
    pub fn action_value(&self, a: usize) -> f64 {
        if a == self.extra_action() {
            0.5
        } else {
            self.bandit.mean(a) + 0.5
        }
    }

    pub fn optimal_value(&self) -> f64 {
        self.bandit.xi + 0.5
    }

    /// The preset exploration policy over the start-state actions:
    /// weights proportional to 1/4 on `xi e_1`, 1/4 on `e_{d+1}/2` and
    /// `1/(4(d-1))` on each `e_i`.
    pub fn exploration_policy(&self) -> Policy {
        let d = self.bandit.d;
        let n = self.num_actions();
        let mut w = vec![0.0; n];
        w[0] = 1.0 / 3.0;
        w[self.extra_action()] = 1.0 / 3.0;
        for wi in w.iter_mut().take(d).skip(1) {
            *wi = 1.0 / (3.0 * (d as f64 - 1.0));
        }
        let mut table = vec![vec![Vec::new(); self.mdp.num_states()]; 2];
        table[0][self.mdp.start()] = w;
        for &s in self.mdp.layer(1) {
            let mut p = vec![0.0; n];
            p[0] = 1.0;
            table[1][s] = p;
        }
        Policy::Stochastic(table)
    }
}

/// Builds the embedding. The measure-norm bound `|| sum |mu_1| || <= sqrt(d+1)`
/// fails for `d + 1 < 20` (the left side is `sqrt(20)`); every other
/// invariant is enforced.
pub fn embed_bandit_as_mdp(bandit: &HardBandit) -> Result<HardMdp> {
    let d = bandit.d;
    let dim = d + 1;
    let n_arms = bandit.num_arms();
    let n_actions = n_arms + 1;
    let ext = |z: &Vector, last: f64| {
        let mut v = Vector::zeros(dim);
        v.rows_mut(0, d).copy_from(z);
        v[d] = last;
        v
    };
    let mut names = vec!["s0".to_string(), "s1".to_string()];
    for i in 2..=d + 1 {
        names.push(format!("sbar{i}"));
    }
    let n_states = names.len();
    let mut action_names: Vec<String> = (0..n_arms)
        .map(|j| match bandit.kinds[j] {
            ArmKind::Optimal => "xi*e1".to_string(),
            ArmKind::Axis(i) => format!("e{}", i + 1),
            ArmKind::Near(i) => format!("x{}", i + 1),
        })
        .collect();
    action_names.push(format!("e{}/2", d + 1));
    let mut phi = Vec::with_capacity(n_states);
    let mut start_feats: Vec<Vector> = (0..n_arms).map(|j| ext(&(bandit.arm(j) * 0.5), 0.5)).collect();
    start_feats.push(unit(dim, d) * 0.5);
    phi.push(start_feats);
    phi.push(vec![unit(dim, 0); n_actions]);
    for i in 1..=d {
        phi.push(vec![unit(dim, i); n_actions]);
    }
    let theta_star = bandit.theta();
    let mut mu0 = vec![Vector::zeros(dim); n_states];
    mu0[1] = ext(&(theta_star.clone() * 2.0), 1.0);
    for m in mu0.iter_mut().skip(2) {
        *m = ext(&(theta_star.clone() * -2.0), 1.0) / d as f64;
    }
    let parts = MdpParts {
        dim,
        horizon: 2,
        state_names: names,
        layers: vec![vec![0], (1..n_states).collect()],
        action_names: vec![action_names; n_states],
        phi,
        mu: vec![mu0],
        theta: vec![Vector::zeros(dim), unit(dim, 0)],
        noise: RewardNoise::Bernoulli,
    };
    let mdp = LinearMdp::new_allowing(parts, &[ViolationKind::MeasureNorm])?;
    Ok(HardMdp { mdp, bandit: bandit.clone() })
}

/// Every `pi^{z,z'}` over the full action set, ordered by `(z, z')`.
pub fn hard_instance_policy_set(hard: &HardMdp) -> Vec<Policy> {
    let n = hard.num_actions();
    (0..n)
        .flat_map(|z| (0..n).map(move |z2| (z, z2)))
        .map(|(z, z2)| hard.policy(z, z2))
        .collect()
}

/// One policy per start action (`z' = 0`); these are all the behaviorally
/// distinct members of [`hard_instance_policy_set`].
pub fn hard_instance_start_policies(hard: &HardMdp) -> Vec<Policy> {
    (0..hard.num_actions()).map(|z| hard.policy(z, 0)).collect()
}

/// Tabular model: `p[h][s][a][s']` for `h < H - 1`, `r[h][s][a]` in `[0, 1]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TabularSpec {
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    pub start: usize,
    pub p: Vec<Vec<Vec<Vec<f64>>>>,
    pub r: Vec<Vec<Vec<f64>>>,
    #[serde(default = "default_noise")]
    pub noise: RewardNoise,
}

fn default_noise() -> RewardNoise {
    RewardNoise::Bernoulli
}

/// Indicator-feature encoding with `d = S * A`; every state is in every layer
/// after the first.
pub fn encode_tabular(spec: &TabularSpec) -> Result<LinearMdp> {
    let (ns, na, hz) = (spec.states, spec.actions, spec.horizon);
    if ns == 0 || na == 0 || hz == 0 || spec.start >= ns {
        return Err(Error::Parameter("tabular model needs S, A, H > 0 and a valid start".into()));
    }
    if spec.p.len() + 1 != hz || spec.r.len() != hz {
        return Err(Error::Parameter("tabular model needs H-1 transition tables and H reward tables".into()));
    }
    let d = ns * na;
    let idx = |s: usize, a: usize| s * na + a;
    let phi = (0..ns).map(|s| (0..na).map(|a| unit(d, idx(s, a))).collect()).collect();
    let mut mu = Vec::with_capacity(hz - 1);
    for ph in &spec.p {
        let mut m = vec![Vector::zeros(d); ns];
        for s in 0..ns {
            for a in 0..na {
                for (t, mt) in m.iter_mut().enumerate() {
                    mt[idx(s, a)] = ph[s][a][t];
                }
            }
        }
        mu.push(m);
    }
    let theta = spec
        .r
        .iter()
        .map(|rh| {
            let mut t = Vector::zeros(d);
            for s in 0..ns {
                for a in 0..na {
                    t[idx(s, a)] = rh[s][a];
                }
            }
            t
        })
        .collect();
    let mut layers = vec![vec![spec.start]];
    for _ in 1..hz {
        layers.push((0..ns).collect());
    }
    LinearMdp::new(MdpParts {
        dim: d,
        horizon: hz,
        state_names: (0..ns).map(|s| format!("s{}", s + 1)).collect(),
        layers,
        action_names: vec![(0..na).map(|a| format!("a{}", a + 1)).collect(); ns],
        phi,
        mu,
        theta,
        noise: spec.noise,
    })
}

/// The chain where replaying `a_1` from `s_1` earns 1 per step, leaving
/// `s_1` is irreversible and action `a_1` elsewhere earns `eps`.
/// `S = A = n`; `(s_i, a_1)` for `i != 1` stays at `s_i`.
pub fn gap_vis_chain(n: usize, horizon: usize, eps: f64) -> Result<TabularSpec> {
    if n < 2 || horizon < 1 || !(0.0..1.0).contains(&eps) {
        return Err(Error::Parameter("chain needs n >= 2, H >= 1 and 0 <= eps < 1".into()));
    }
    let mut p = vec![vec![vec![vec![0.0; n]; n]; n]; horizon - 1];
    for ph in p.iter_mut() {
        for (s, row) in ph.iter_mut().enumerate() {
            for (a, dist) in row.iter_mut().enumerate() {
                let to = if a == 0 { s } else { a };
                dist[to] = 1.0;
            }
        }
    }
    let mut rh = vec![vec![0.0; n]; n];
    rh[0][0] = 1.0;
    for row in rh.iter_mut().skip(1) {
        row[0] = eps;
    }
    Ok(TabularSpec {
        states: n,
        actions: n,
        horizon,
        start: 0,
        p,
        r: vec![rh; horizon],
        noise: RewardNoise::Bernoulli,
    })
}

/// Approximate stand-in for the instance where gap-visitation complexity
/// wins: a uniform-ish first step into `n` states whose two actions differ
/// by `2^{-i}` at state `i`, so near-optimal policies differ deep in the
/// ordering. Not the original construction.
pub fn gap_vis_stand_in(n: usize) -> Result<TabularSpec> {
    if n < 2 {
        return Err(Error::Parameter("stand-in needs n >= 2".into()));
    }
    let mut first = vec![0.0; n];
    first[0] = 0.5;
    for f in first.iter_mut().skip(1) {
        *f = 0.5 / (n as f64 - 1.0);
    }
    let p = vec![vec![vec![first; 2]; n]];
    let r0 = vec![vec![0.0; 2]; n];
    let r1 = (0..n)
        .map(|i| {
            let g = 0.5f64.powi(i as i32 + 1);
            vec![0.5 + g / 2.0, 0.5 - g / 2.0]
        })
        .collect();
    Ok(TabularSpec {
        states: n,
        actions: 2,
        horizon: 2,
        start: 0,
        p,
        r: vec![r0, r1],
        noise: RewardNoise::Bernoulli,
    })
}

/// The chain model and the approximate stand-in, both encoded.
pub fn make_gap_vis_instances(n: usize, horizon: usize, eps: f64) -> Result<(LinearMdp, LinearMdp)> {
    Ok((encode_tabular(&gap_vis_chain(n, horizon, eps)?)?, encode_tabular(&gap_vis_stand_in(n)?)?))
}

fn dirichlet_ones(rng: &mut crate::mdp::SeededRng, k: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|x| x / total).collect()
}

/// Two states, two actions, `H = 2`, every mean reward `1/2`: all policies tie,
/// so elimination never shortens a run.
pub fn tied_tabular() -> TabularSpec {
    let stay = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    TabularSpec {
        states: 2,
        actions: 2,
        horizon: 2,
        start: 0,
        p: vec![vec![stay.clone(), stay]],
        r: vec![vec![vec![0.5, 0.5]; 2]; 2],
        noise: RewardNoise::Bernoulli,
    }
}

/// Latent-state linear MDP: features are points of the simplex, each latent
/// coordinate owns a next-state distribution, rewards are uniform in `[0, 1]`.
pub fn random_latent_mdp(d: usize, states: usize, actions: usize, horizon: usize, seed: u64) -> Result<LinearMdp> {
    if d == 0 || states == 0 || actions == 0 || horizon == 0 {
        return Err(Error::Parameter("latent model needs positive sizes".into()));
    }
    let mut rng = seeded_rng(seed);
    let phi: Vec<Vec<Vector>> = (0..states)
        .map(|_| (0..actions).map(|_| Vector::from_vec(dirichlet_ones(&mut rng, d))).collect())
        .collect();
    let mut mu = Vec::with_capacity(horizon.saturating_sub(1));
    for _ in 1..horizon {
        let psi: Vec<Vec<f64>> = (0..d).map(|_| dirichlet_ones(&mut rng, states)).collect();
        mu.push(
            (0..states)
                .map(|t| Vector::from_iterator(d, (0..d).map(|k| psi[k][t])))
                .collect(),
        );
    }
    let theta = (0..horizon)
        .map(|_| Vector::from_iterator(d, (0..d).map(|_| rng.random::<f64>())))
        .collect();
    let mut layers = vec![vec![0]];
    for _ in 1..horizon {
        layers.push((0..states).collect());
    }
    LinearMdp::new(MdpParts {
        dim: d,
        horizon,
        state_names: (0..states).map(|s| format!("s{s}")).collect(),
        layers,
        action_names: vec![(0..actions).map(|a| format!("a{a}")).collect(); states],
        phi,
        mu,
        theta,
        noise: RewardNoise::Bernoulli,
    })
}
