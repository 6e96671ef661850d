//! Finite-horizon linear MDPs with a finite state and action space.
//!
//! Transitions and mean rewards are linear in a known feature map:
//! `P_h(s'|s,a) = <phi(s,a), mu_h(s')>` and `E[r_h(s,a)] = <phi(s,a), theta_h>`.
//! States are grouped into layers: `layers[h]` lists the states that can be
//! occupied at step `h` (zero-based), and `layers[0]` holds the single start
//! state. `mu[h]` maps layer `h` to layer `h + 1`, so there are `H - 1`
//! transition kernels.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{add_outer, Matrix, Vector};

pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tolerance for simplex, norm and range checks.
pub const VALIDATION_TOL: f64 = 1e-9;
/// Transition probabilities in `[-CLAMP_TOL, 0)` are treated as zero.
pub const CLAMP_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardNoise {
    Deterministic,
    /// Observed reward is Bernoulli with the linear mean.
    Bernoulli,
}

/// Raw ingredients of a [`LinearMdp`].
#[derive(Clone, Debug)]
pub struct MdpParts {
    pub dim: usize,
    pub horizon: usize,
    pub state_names: Vec<String>,
    pub layers: Vec<Vec<usize>>,
    pub action_names: Vec<Vec<String>>,
    /// `phi[s][a]`.
    pub phi: Vec<Vec<Vector>>,
    /// `mu[h][s']` for `h < H - 1`; only entries of states in `layers[h + 1]` are read.
    pub mu: Vec<Vec<Vector>>,
    /// `theta[h]` for `h < H`.
    pub theta: Vec<Vector>,
    pub noise: RewardNoise,
}

#[derive(Clone, Debug)]
pub struct LinearMdp {
    parts: MdpParts,
    /// `trans[h][s][a]`: (next state, probability) pairs over `layers[h + 1]`.
    trans: Vec<Vec<Vec<Vec<(usize, f64)>>>>,
    /// `mean_reward[h][s][a]`, zero for states outside `layers[h]`.
    mean_reward: Vec<Vec<Vec<f64>>>,
    in_layer: Vec<Vec<bool>>,
}

impl LinearMdp {
    /// Builds and validates a model.
    pub fn new(parts: MdpParts) -> Result<Self> {
        let mdp = Self::new_unchecked(parts)?;
        mdp.validate()?;
        Ok(mdp)
    }

    /// Builds a model after shape checks only. [`LinearMdp::validate`] reports
    /// invariant violations; simulating an invalid model is unspecified.
    pub fn new_unchecked(parts: MdpParts) -> Result<Self> {
        check_shapes(&parts)?;
        let n = parts.state_names.len();
        let h_total = parts.horizon;
        let mut in_layer = vec![vec![false; n]; h_total];
        for (h, layer) in parts.layers.iter().enumerate() {
            for &s in layer {
                in_layer[h][s] = true;
            }
        }
        let mut trans = Vec::with_capacity(h_total.saturating_sub(1));
        for h in 0..h_total.saturating_sub(1) {
            let mut per_state = vec![Vec::new(); n];
            for &s in &parts.layers[h] {
                let mut per_action = Vec::with_capacity(parts.phi[s].len());
                for phi in &parts.phi[s] {
                    let row: Vec<(usize, f64)> = parts.layers[h + 1]
                        .iter()
                        .map(|&t| {
                            let p = phi.dot(&parts.mu[h][t]);
                            let p = if (-CLAMP_TOL..0.0).contains(&p) { 0.0 } else { p };
                            (t, p)
                        })
                        .collect();
                    per_action.push(row);
                }
                per_state[s] = per_action;
            }
            trans.push(per_state);
        }
        let mut mean_reward = Vec::with_capacity(h_total);
        for h in 0..h_total {
            let mut per_state = vec![Vec::new(); n];
            for &s in &parts.layers[h] {
                per_state[s] = parts.phi[s].iter().map(|f| f.dot(&parts.theta[h])).collect();
            }
            mean_reward.push(per_state);
        }
        Ok(Self { parts, trans, mean_reward, in_layer })
    }

    pub fn dim(&self) -> usize {
        self.parts.dim
    }

    pub fn horizon(&self) -> usize {
        self.parts.horizon
    }

    pub fn num_states(&self) -> usize {
        self.parts.state_names.len()
    }

    pub fn start(&self) -> usize {
        self.parts.layers[0][0]
    }

    pub fn layer(&self, h: usize) -> &[usize] {
        &self.parts.layers[h]
    }

    pub fn in_layer(&self, h: usize, s: usize) -> bool {
        self.in_layer[h][s]
    }

    pub fn num_actions(&self, s: usize) -> usize {
        self.parts.phi[s].len()
    }

    pub fn phi(&self, s: usize, a: usize) -> &Vector {
        &self.parts.phi[s][a]
    }

    pub fn theta(&self, h: usize) -> &Vector {
        &self.parts.theta[h]
    }

    pub fn mu(&self, h: usize, s_next: usize) -> &Vector {
        &self.parts.mu[h][s_next]
    }

    pub fn state_name(&self, s: usize) -> &str {
        &self.parts.state_names[s]
    }

    pub fn action_name(&self, s: usize, a: usize) -> &str {
        &self.parts.action_names[s][a]
    }

    pub fn noise(&self) -> RewardNoise {
        self.parts.noise
    }

    pub fn parts(&self) -> &MdpParts {
        &self.parts
    }

    /// Next-state distribution over `layers[h + 1]`, after clamping.
    pub fn transition(&self, h: usize, s: usize, a: usize) -> &[(usize, f64)] {
        &self.trans[h][s][a]
    }

    pub fn mean_reward(&self, h: usize, s: usize, a: usize) -> f64 {
        self.mean_reward[h][s][a]
    }

    /// Total number of (step, state, action) triples reachable in principle.
    pub fn num_step_state_actions(&self) -> usize {
        (0..self.horizon())
            .map(|h| self.layer(h).iter().map(|&s| self.num_actions(s)).sum::<usize>())
            .sum()
    }

    /// Checks every linear-MDP invariant and reports the first violation.
    pub fn validate(&self) -> Result<()> {
        match self.violations().into_iter().next() {
            None => Ok(()),
            Some(v) => Err(Error::Validation(v.detail)),
        }
    }

    /// Builds a model that may break only the listed invariants.
    pub fn new_allowing(parts: MdpParts, allowed: &[ViolationKind]) -> Result<Self> {
        let mdp = Self::new_unchecked(parts)?;
        if let Some(v) = mdp.violations().into_iter().find(|v| !allowed.contains(&v.kind)) {
            return Err(Error::Validation(v.detail));
        }
        Ok(mdp)
    }

    /// Every invariant violation of the model.
    pub fn violations(&self) -> Vec<Violation> {
        let d = self.dim() as f64;
        let p = &self.parts;
        let mut out = Vec::new();
        let mut push = |kind, detail: String| out.push(Violation { kind, detail });
        for h in 0..self.horizon() {
            for &s in self.layer(h) {
                for (a, f) in p.phi[s].iter().enumerate() {
                    let norm = f.norm();
                    if norm > 1.0 + VALIDATION_TOL {
                        push(
                            ViolationKind::FeatureNormUpper,
                            format!("feature norm {norm} > 1 at state {} action {a}", p.state_names[s]),
                        );
                    }
                    if norm < 1.0 / d.sqrt() - VALIDATION_TOL {
                        push(
                            ViolationKind::FeatureNormLower,
                            format!("feature norm {norm} < 1/sqrt(d) at state {} action {a}", p.state_names[s]),
                        );
                    }
                    let r = self.mean_reward(h, s, a);
                    if !(-VALIDATION_TOL..=1.0 + VALIDATION_TOL).contains(&r) {
                        push(
                            ViolationKind::RewardRange,
                            format!(
                                "mean reward {r} outside [0, 1] at step {h} state {} action {a}",
                                p.state_names[s]
                            ),
                        );
                    }
                }
            }
        }
        for (h, theta) in p.theta.iter().enumerate() {
            if theta.norm() > d.sqrt() + VALIDATION_TOL {
                push(ViolationKind::ThetaNorm, format!("|theta_{h}| = {} > sqrt(d)", theta.norm()));
            }
        }
        for h in 0..self.horizon().saturating_sub(1) {
            let mut abs_sum = Vector::zeros(self.dim());
            for &t in self.layer(h + 1) {
                abs_sum += p.mu[h][t].abs();
            }
            if abs_sum.norm() > d.sqrt() + VALIDATION_TOL {
                push(
                    ViolationKind::MeasureNorm,
                    format!("|sum_s' |mu_{h}(s')|| = {} > sqrt(d) = {}", abs_sum.norm(), d.sqrt()),
                );
            }
            for &s in self.layer(h) {
                for a in 0..self.num_actions(s) {
                    let mut total = 0.0;
                    for &(t, q) in self.transition(h, s, a) {
                        if q < 0.0 {
                            push(
                                ViolationKind::NegativeTransition,
                                format!(
                                    "negative transition probability {q} at step {h} state {} action {a} -> {}",
                                    p.state_names[s], p.state_names[t]
                                ),
                            );
                        }
                        total += q;
                    }
                    if (total - 1.0).abs() > VALIDATION_TOL {
                        push(
                            ViolationKind::TransitionSum,
                            format!(
                                "transition probabilities sum to {total} at step {h} state {} action {a}",
                                p.state_names[s]
                            ),
                        );
                    }
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let p = &self.parts;
        let file = MdpFile {
            d: p.dim,
            horizon: p.horizon,
            states: p.state_names.clone(),
            layers: p.layers.clone(),
            actions: p.action_names.clone(),
            phi: p.phi.iter().map(|row| row.iter().map(encode_vector).collect()).collect(),
            mu: p.mu.iter().map(|row| row.iter().map(encode_vector).collect()).collect(),
            theta: p.theta.iter().map(encode_vector).collect(),
            reward_noise: p.noise,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Parses and validates a model written by [`LinearMdp::to_json`].
    pub fn from_json(text: &str) -> Result<Self> {
        let file: MdpFile = serde_json::from_str(text)?;
        let decode_rows = |rows: &[Vec<String>]| -> Result<Vec<Vec<Vector>>> {
            rows.iter()
                .map(|row| row.iter().map(|v| decode_vector(v)).collect())
                .collect()
        };
        let parts = MdpParts {
            dim: file.d,
            horizon: file.horizon,
            state_names: file.states,
            layers: file.layers,
            action_names: file.actions,
            phi: decode_rows(&file.phi)?,
            mu: decode_rows(&file.mu)?,
            theta: file.theta.iter().map(|v| decode_vector(v)).collect::<Result<_>>()?,
            noise: file.reward_noise,
        };
        Self::new(parts)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    FeatureNormUpper,
    FeatureNormLower,
    RewardRange,
    ThetaNorm,
    /// `|| sum_s' |mu_h(s')| ||_2 > sqrt(d)`.
    MeasureNorm,
    NegativeTransition,
    TransitionSum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub detail: String,
}

fn invalid(msg: String) -> Error {
    Error::Validation(msg)
}

fn check_shapes(p: &MdpParts) -> Result<()> {
    let n = p.state_names.len();
    if p.dim == 0 || p.horizon == 0 {
        return Err(invalid("dimension and horizon must be positive".into()));
    }
    if p.layers.len() != p.horizon {
        return Err(invalid(format!("{} layers for horizon {}", p.layers.len(), p.horizon)));
    }
    if p.layers[0].len() != 1 {
        return Err(invalid("the first layer must hold exactly one start state".into()));
    }
    if p.layers.iter().flatten().any(|&s| s >= n) {
        return Err(invalid("layer refers to an unknown state".into()));
    }
    if p.phi.len() != n || p.action_names.len() != n {
        return Err(invalid("phi and action names need one entry per state".into()));
    }
    for s in 0..n {
        if p.phi[s].len() != p.action_names[s].len() {
            return Err(invalid(format!("action count mismatch at state {}", p.state_names[s])));
        }
        if p.phi[s].iter().any(|f| f.len() != p.dim) {
            return Err(invalid(format!("feature of wrong length at state {}", p.state_names[s])));
        }
    }
    for h in 0..p.horizon {
        if p.layers[h].iter().any(|&s| p.phi[s].is_empty()) {
            return Err(invalid(format!("state without actions in layer {h}")));
        }
    }
    if p.mu.len() != p.horizon - 1 {
        return Err(invalid(format!("expected {} transition kernels, got {}", p.horizon - 1, p.mu.len())));
    }
    if p.mu.iter().any(|row| row.len() != n || row.iter().any(|m| m.len() != p.dim)) {
        return Err(invalid("mu must hold one d-vector per state and step".into()));
    }
    if p.theta.len() != p.horizon || p.theta.iter().any(|t| t.len() != p.dim) {
        return Err(invalid("theta must hold one d-vector per step".into()));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct MdpFile {
    d: usize,
    #[serde(rename = "H")]
    horizon: usize,
    states: Vec<String>,
    layers: Vec<Vec<usize>>,
    actions: Vec<Vec<String>>,
    phi: Vec<Vec<String>>,
    mu: Vec<Vec<String>>,
    theta: Vec<String>,
    reward_noise: RewardNoise,
}

/// Little-endian IEEE-754 bytes, base64 encoded, so that files round-trip bit for bit.
pub fn encode_vector(v: &Vector) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    B64.encode(bytes)
}

pub fn decode_vector(text: &str) -> Result<Vector> {
    let bytes = B64
        .decode(text)
        .map_err(|e| Error::Validation(format!("bad vector encoding: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Validation("vector byte length is not a multiple of 8".into()));
    }
    Ok(Vector::from_iterator(
        bytes.len() / 8,
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())),
    ))
}

/// Softmax over linear scores, optionally restricted to a subset of actions per state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPolicy {
    pub eta: f64,
    /// One weight vector per step.
    pub weights: Vec<Vec<f64>>,
    /// `allowed[s]` lists the actions that may receive mass at state `s`;
    /// `None` allows every action.
    pub allowed: Option<Vec<Vec<usize>>>,
}

impl SoftmaxPolicy {
    pub fn probs(&self, mdp: &LinearMdp, h: usize, s: usize) -> Result<Vec<f64>> {
        let n = mdp.num_actions(s);
        let allowed: Vec<usize> = match &self.allowed {
            Some(sets) => sets.get(s).cloned().unwrap_or_default(),
            None => (0..n).collect(),
        };
        if allowed.is_empty() {
            return Err(Error::Contract(format!("softmax policy has no action at state {s}")));
        }
        let w = Vector::from_column_slice(&self.weights[h]);
        let scores: Vec<f64> = allowed.iter().map(|&a| self.eta * mdp.phi(s, a).dot(&w)).collect();
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|x| (x - top).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut out = vec![0.0; n];
        for (i, &a) in allowed.iter().enumerate() {
            out[a] = exps[i] / z;
        }
        Ok(out)
    }
}

/// A policy over steps and states. Tables are indexed `[h][s]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Policy {
    /// `None` marks a state where the policy is undefined.
    Deterministic(Vec<Vec<Option<usize>>>),
    /// An empty distribution marks a state where the policy is undefined.
    Stochastic(Vec<Vec<Vec<f64>>>),
    Softmax(SoftmaxPolicy),
    /// Draws one component per episode and follows it throughout.
    Mixture(Vec<(f64, Policy)>),
}

impl Policy {
    pub fn uniform(mdp: &LinearMdp) -> Policy {
        Policy::Stochastic(
            (0..mdp.horizon())
                .map(|_| {
                    (0..mdp.num_states())
                        .map(|s| vec![1.0 / mdp.num_actions(s).max(1) as f64; mdp.num_actions(s)])
                        .collect()
                })
                .collect(),
        )
    }

    /// Deterministic policy from a rule evaluated on every layer state.
    pub fn deterministic_from(mdp: &LinearMdp, mut rule: impl FnMut(usize, usize) -> usize) -> Policy {
        let mut table = vec![vec![None; mdp.num_states()]; mdp.horizon()];
        for (h, row) in table.iter_mut().enumerate() {
            for &s in mdp.layer(h) {
                row[s] = Some(rule(h, s));
            }
        }
        Policy::Deterministic(table)
    }

    pub fn is_markov(&self) -> bool {
        !matches!(self, Policy::Mixture(_))
    }

    /// Action distribution of a Markov policy at `(h, s)`.
    pub fn action_probs(&self, mdp: &LinearMdp, h: usize, s: usize) -> Result<Vec<f64>> {
        let n = mdp.num_actions(s);
        match self {
            Policy::Deterministic(t) => match t.get(h).and_then(|r| r.get(s)).copied().flatten() {
                Some(a) if a < n => {
                    let mut p = vec![0.0; n];
                    p[a] = 1.0;
                    Ok(p)
                }
                _ => Err(undefined(mdp, h, s)),
            },
            Policy::Stochastic(t) => match t.get(h).and_then(|r| r.get(s)) {
                Some(p) if p.len() == n && !p.is_empty() => {
                    let total: f64 = p.iter().sum();
                    if p.iter().any(|x| *x < 0.0) || (total - 1.0).abs() > VALIDATION_TOL {
                        return Err(Error::Contract(format!(
                            "action distribution at step {h} state {} is not a probability vector",
                            mdp.state_name(s)
                        )));
                    }
                    Ok(p.clone())
                }
                _ => Err(undefined(mdp, h, s)),
            },
            Policy::Softmax(p) => p.probs(mdp, h, s),
            Policy::Mixture(_) => Err(Error::Contract(
                "a mixture policy has no per-state action distribution".into(),
            )),
        }
    }

    fn sample_action(&self, mdp: &LinearMdp, h: usize, s: usize, rng: &mut SeededRng) -> Result<usize> {
        if let Policy::Deterministic(t) = self {
            return match t.get(h).and_then(|r| r.get(s)).copied().flatten() {
                Some(a) if a < mdp.num_actions(s) => Ok(a),
                _ => Err(undefined(mdp, h, s)),
            };
        }
        let p = self.action_probs(mdp, h, s)?;
        Ok(sample_index(&p, rng))
    }

    fn pick_component(&self, rng: &mut SeededRng) -> Result<&Policy> {
        match self {
            Policy::Mixture(parts) => {
                check_mixture(parts)?;
                let weights: Vec<f64> = parts.iter().map(|(w, _)| *w).collect();
                parts[sample_index(&weights, rng)].1.pick_component(rng)
            }
            other => Ok(other),
        }
    }
}

fn check_mixture(parts: &[(f64, Policy)]) -> Result<()> {
    let total: f64 = parts.iter().map(|(w, _)| *w).sum();
    if parts.is_empty() || parts.iter().any(|(w, _)| *w < 0.0) || (total - 1.0).abs() > VALIDATION_TOL {
        return Err(Error::Contract("mixture weights must form a probability vector".into()));
    }
    Ok(())
}

fn undefined(mdp: &LinearMdp, h: usize, s: usize) -> Error {
    Error::Contract(format!("policy undefined at step {h} state {}", mdp.state_name(s)))
}

/// Index drawn with probability proportional to `weights`.
pub fn sample_index(weights: &[f64], rng: &mut SeededRng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            if u < *w {
                return i;
            }
            u -= w;
            last = i;
        }
    }
    last
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    /// `None` after the last step.
    pub next_state: Option<usize>,
    /// False for steps past the truncation point.
    pub usable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub steps: Vec<StepRecord>,
    pub truncated_at: Option<usize>,
}

impl EpisodeLog {
    /// Feature of the recorded pair at step `h`.
    pub fn feature<'m>(&self, mdp: &'m LinearMdp, h: usize) -> &'m Vector {
        let st = &self.steps[h];
        mdp.phi(st.state, st.action)
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

fn sample_step(
    mdp: &LinearMdp,
    h: usize,
    s: usize,
    a: usize,
    rng: &mut SeededRng,
) -> (f64, Option<usize>) {
    let mean = mdp.mean_reward(h, s, a);
    let reward = match mdp.noise() {
        RewardNoise::Deterministic => mean,
        RewardNoise::Bernoulli => {
            if rng.random::<f64>() < mean {
                1.0
            } else {
                0.0
            }
        }
    };
    let next = if h + 1 < mdp.horizon() {
        let row = mdp.transition(h, s, a);
        let mut u = rng.random::<f64>();
        let mut pick = row[row.len() - 1].0;
        for &(t, q) in row {
            if u < q {
                pick = t;
                break;
            }
            u -= q;
        }
        Some(pick)
    } else {
        None
    };
    (reward, next)
}

/// Samples one episode. With `truncate_at = Some(h)` the policy is followed up
/// to step `h`; later actions are uniform and flagged unusable, while the
/// reward and next state of step `h` stay usable.
pub fn simulate(
    mdp: &LinearMdp,
    policy: &Policy,
    rng: &mut SeededRng,
    truncate_at: Option<usize>,
) -> Result<EpisodeLog> {
    run_steps(mdp, policy, rng, truncate_at, mdp.horizon())
}

fn run_steps(
    mdp: &LinearMdp,
    policy: &Policy,
    rng: &mut SeededRng,
    truncate_at: Option<usize>,
    steps: usize,
) -> Result<EpisodeLog> {
    let component = policy.pick_component(rng)?;
    let mut s = mdp.start();
    let mut out = Vec::with_capacity(steps);
    for h in 0..steps {
        let past = truncate_at.is_some_and(|t| h > t);
        let a = if past {
            rng.random_range(0..mdp.num_actions(s))
        } else {
            component.sample_action(mdp, h, s, rng)?
        };
        let (reward, next) = sample_step(mdp, h, s, a, rng);
        out.push(StepRecord { state: s, action: a, reward, next_state: next, usable: !past });
        match next {
            Some(t) => s = t,
            None => break,
        }
    }
    Ok(EpisodeLog { steps: out, truncated_at: truncate_at })
}

/// Sampling access to a model with an episode counter.
pub struct Environment<'a> {
    mdp: &'a LinearMdp,
    rng: SeededRng,
    episodes: u64,
}

impl<'a> Environment<'a> {
    pub fn new(mdp: &'a LinearMdp, seed: u64) -> Self {
        Self { mdp, rng: seeded_rng(seed), episodes: 0 }
    }

    pub fn mdp(&self) -> &'a LinearMdp {
        self.mdp
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    pub fn rng(&mut self) -> &mut SeededRng {
        &mut self.rng
    }

    /// Full episode, see [`simulate`].
    pub fn run(&mut self, policy: &Policy, truncate_at: Option<usize>) -> Result<EpisodeLog> {
        self.episodes += 1;
        simulate(self.mdp, policy, &mut self.rng, truncate_at)
    }

    /// Episode of the `h`-truncated model: stops once the next state after
    /// step `h` has been drawn. Usable records match [`Environment::run`].
    pub fn run_truncated(&mut self, policy: &Policy, h: usize) -> Result<EpisodeLog> {
        self.episodes += 1;
        run_steps(self.mdp, policy, &mut self.rng, Some(h), h + 1)
    }
}

/// Per-step table indexed `[h][s][a]`.
pub type StepTable = Vec<Vec<Vec<f64>>>;

fn zero_table(mdp: &LinearMdp) -> StepTable {
    (0..mdp.horizon())
        .map(|_| (0..mdp.num_states()).map(|s| vec![0.0; mdp.num_actions(s)]).collect())
        .collect()
}

/// State-action occupancy `[h][s][a]` of a policy.
pub fn occupancy(mdp: &LinearMdp, policy: &Policy) -> Result<StepTable> {
    if let Policy::Mixture(parts) = policy {
        check_mixture(parts)?;
        let mut acc = zero_table(mdp);
        for (w, p) in parts {
            let occ = occupancy(mdp, p)?;
            for (a, b) in acc.iter_mut().flatten().zip(occ.iter().flatten()) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += w * y;
                }
            }
        }
        return Ok(acc);
    }
    let mut occ = zero_table(mdp);
    let mut dist = vec![0.0; mdp.num_states()];
    dist[mdp.start()] = 1.0;
    for h in 0..mdp.horizon() {
        let mut next = vec![0.0; mdp.num_states()];
        for &s in mdp.layer(h) {
            let m = dist[s];
            if m <= 0.0 {
                continue;
            }
            let probs = policy.action_probs(mdp, h, s)?;
            for (a, p) in probs.iter().enumerate() {
                if *p <= 0.0 {
                    continue;
                }
                occ[h][s][a] = m * p;
                if h + 1 < mdp.horizon() {
                    for &(t, q) in mdp.transition(h, s, a) {
                        next[t] += m * p * q;
                    }
                }
            }
        }
        dist = next;
    }
    Ok(occ)
}

/// Expected feature at every step: `phi_{pi,h} = E_pi[phi(s_h, a_h)]`.
pub fn feature_visitation(mdp: &LinearMdp, policy: &Policy) -> Result<Vec<Vector>> {
    let occ = occupancy(mdp, policy)?;
    Ok((0..mdp.horizon())
        .map(|h| {
            let mut v = Vector::zeros(mdp.dim());
            for &s in mdp.layer(h) {
                for (a, w) in occ[h][s].iter().enumerate() {
                    if *w > 0.0 {
                        v.axpy(*w, mdp.phi(s, a), 1.0);
                    }
                }
            }
            v
        })
        .collect())
}

/// Expected covariance `Lambda_{pi,h} = E_pi[phi phi^T]` at step `h`.
pub fn expected_covariance(mdp: &LinearMdp, policy: &Policy, h: usize) -> Result<Matrix> {
    let occ = occupancy(mdp, policy)?;
    let mut m = Matrix::zeros(mdp.dim(), mdp.dim());
    for &s in mdp.layer(h) {
        for (a, w) in occ[h][s].iter().enumerate() {
            if *w > 0.0 {
                add_outer(&mut m, mdp.phi(s, a), *w);
            }
        }
    }
    Ok(m)
}

/// Expected return, summed over steps from the feature visitations.
pub fn policy_value(mdp: &LinearMdp, policy: &Policy) -> Result<f64> {
    let vis = feature_visitation(mdp, policy)?;
    Ok(vis.iter().enumerate().map(|(h, v)| v.dot(mdp.theta(h))).sum())
}

/// Expected return under an arbitrary reward table.
pub fn value_under(mdp: &LinearMdp, policy: &Policy, reward: &StepTable) -> Result<f64> {
    let occ = occupancy(mdp, policy)?;
    let mut total = 0.0;
    for h in 0..mdp.horizon() {
        for &s in mdp.layer(h) {
            for (a, w) in occ[h][s].iter().enumerate() {
                total += w * reward[h][s][a];
            }
        }
    }
    Ok(total)
}

/// Expected return by backward induction (Markov policies and mixtures of them).
pub fn policy_value_backward(mdp: &LinearMdp, policy: &Policy) -> Result<f64> {
    if let Policy::Mixture(parts) = policy {
        check_mixture(parts)?;
        let mut total = 0.0;
        for (w, p) in parts {
            total += w * policy_value_backward(mdp, p)?;
        }
        return Ok(total);
    }
    let reach = reachable(mdp, policy)?;
    let mut v_next = vec![0.0; mdp.num_states()];
    for h in (0..mdp.horizon()).rev() {
        let mut v = vec![0.0; mdp.num_states()];
        for &s in mdp.layer(h) {
            if !reach[h][s] {
                continue;
            }
            let probs = policy.action_probs(mdp, h, s)?;
            for (a, p) in probs.iter().enumerate() {
                if *p <= 0.0 {
                    continue;
                }
                let mut q = mdp.mean_reward(h, s, a);
                if h + 1 < mdp.horizon() {
                    q += mdp.transition(h, s, a).iter().map(|&(t, pr)| pr * v_next[t]).sum::<f64>();
                }
                v[s] += p * q;
            }
        }
        v_next = v;
    }
    Ok(v_next[mdp.start()])
}

fn reachable(mdp: &LinearMdp, policy: &Policy) -> Result<Vec<Vec<bool>>> {
    let occ = occupancy(mdp, policy)?;
    Ok(occ
        .iter()
        .map(|row| row.iter().map(|acts| acts.iter().any(|w| *w > 0.0)).collect())
        .collect())
}

/// Mean-reward table of the model.
pub fn mean_reward_table(mdp: &LinearMdp) -> StepTable {
    let mut t = zero_table(mdp);
    for h in 0..mdp.horizon() {
        for &s in mdp.layer(h) {
            for a in 0..mdp.num_actions(s) {
                t[h][s][a] = mdp.mean_reward(h, s, a);
            }
        }
    }
    t
}

/// Optimal deterministic policy for `reward` by dynamic programming over
/// steps `0..=last_step`; later steps carry no reward and play action 0.
/// Ties go to the lowest action index.
pub fn plan(mdp: &LinearMdp, reward: &StepTable, last_step: usize) -> (Policy, f64) {
    let horizon = mdp.horizon();
    let last = last_step.min(horizon - 1);
    let mut table = vec![vec![None; mdp.num_states()]; horizon];
    for (h, row) in table.iter_mut().enumerate().skip(last + 1) {
        for &s in mdp.layer(h) {
            row[s] = Some(0);
        }
    }
    let mut v_next = vec![0.0; mdp.num_states()];
    for h in (0..=last).rev() {
        let mut v = vec![0.0; mdp.num_states()];
        for &s in mdp.layer(h) {
            let mut best = f64::NEG_INFINITY;
            let mut best_a = 0;
            for a in 0..mdp.num_actions(s) {
                let mut q = reward[h][s][a];
                if h < last {
                    q += mdp.transition(h, s, a).iter().map(|&(t, p)| p * v_next[t]).sum::<f64>();
                }
                if q > best {
                    best = q;
                    best_a = a;
                }
            }
            v[s] = best;
            table[h][s] = Some(best_a);
        }
        v_next = v;
    }
    (Policy::Deterministic(table), v_next[mdp.start()])
}

/// Optimal policy and value for the model's own mean rewards.
pub fn optimal_policy(mdp: &LinearMdp) -> (Policy, f64) {
    plan(mdp, &mean_reward_table(mdp), mdp.horizon() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two-state tabular chain with indicator features (d = 4, H = 3).
    fn toy() -> LinearMdp {
        let e = |i: usize| {
            let mut v = Vector::zeros(4);
            v[i] = 1.0;
            v
        };
        let mut mu0 = vec![Vector::zeros(4), Vector::zeros(4)];
        // (s0,a0)->s0 w.p. .7, (s0,a1)->s0 .2, (s1,a0)->s0 .5, (s1,a1)->s0 1
        let rows = [[0.7, 0.3], [0.2, 0.8], [0.5, 0.5], [1.0, 0.0]];
        for (k, r) in rows.iter().enumerate() {
            mu0[0][k] = r[0];
            mu0[1][k] = r[1];
        }
        let parts = MdpParts {
            dim: 4,
            horizon: 3,
            state_names: vec!["a".into(), "b".into()],
            layers: vec![vec![0], vec![0, 1], vec![0, 1]],
            action_names: vec![vec!["x".into(), "y".into()]; 2],
            phi: vec![vec![e(0), e(1)], vec![e(2), e(3)]],
            mu: vec![mu0.clone(), mu0],
            theta: vec![
                Vector::from_vec(vec![0.1, 0.4, 0.9, 0.0]),
                Vector::from_vec(vec![0.3, 0.2, 1.0, 0.5]),
                Vector::from_vec(vec![0.0, 1.0, 0.6, 0.2]),
            ],
            noise: RewardNoise::Bernoulli,
        };
        LinearMdp::new(parts).unwrap()
    }

    /// Brute-force value by enumerating every trajectory.
    fn enumerate_value(mdp: &LinearMdp, policy: &Policy) -> f64 {
        fn go(mdp: &LinearMdp, policy: &Policy, h: usize, s: usize) -> f64 {
            let probs = policy.action_probs(mdp, h, s).unwrap();
            let mut total = 0.0;
            for (a, p) in probs.iter().enumerate() {
                let mut q = mdp.mean_reward(h, s, a);
                if h + 1 < mdp.horizon() {
                    for &(t, pr) in mdp.transition(h, s, a) {
                        if pr > 0.0 {
                            q += pr * go(mdp, policy, h + 1, t);
                        }
                    }
                }
                total += p * q;
            }
            total
        }
        go(mdp, policy, 0, mdp.start())
    }

    #[test]
    fn forward_backward_and_enumeration_agree() {
        let mdp = toy();
        let policy = Policy::Stochastic(vec![
            vec![vec![0.3, 0.7], vec![0.5, 0.5]],
            vec![vec![0.9, 0.1], vec![0.2, 0.8]],
            vec![vec![0.4, 0.6], vec![1.0, 0.0]],
        ]);
        let f = policy_value(&mdp, &policy).unwrap();
        let b = policy_value_backward(&mdp, &policy).unwrap();
        let e = enumerate_value(&mdp, &policy);
        assert!((f - b).abs() < 1e-12 && (f - e).abs() < 1e-12);
    }

    #[test]
    fn planning_matches_enumeration_over_deterministic_policies() {
        let mdp = toy();
        let (pi, v) = optimal_policy(&mdp);
        let mut best: f64 = 0.0;
        for code in 0..(1 << 5) {
            let bits = [code & 1, (code >> 1) & 1, (code >> 2) & 1, (code >> 3) & 1, (code >> 4) & 1];
            let p = Policy::Deterministic(vec![
                vec![Some(bits[0]), None],
                vec![Some(bits[1]), Some(bits[2])],
                vec![Some(bits[3]), Some(bits[4])],
            ]);
            best = best.max(enumerate_value(&mdp, &p));
        }
        assert!((v - best).abs() < 1e-12);
        assert!((policy_value(&mdp, &pi).unwrap() - best).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_matches_exact_value() {
        let mdp = toy();
        let policy = Policy::uniform(&mdp);
        let exact = policy_value(&mdp, &policy).unwrap();
        let mut env = Environment::new(&mdp, 7);
        let n = 200_000;
        let mut total = 0.0;
        for _ in 0..n {
            total += env.run(&policy, None).unwrap().total_reward();
        }
        let mean = total / n as f64;
        // Returns lie in [0, 3]: a 5 sigma band is far below 0.02.
        assert!((mean - exact).abs() < 0.02, "{mean} vs {exact}");
        assert_eq!(env.episodes(), n);
    }

    #[test]
    fn simulation_is_deterministic_given_seed() {
        let mdp = toy();
        let policy = Policy::uniform(&mdp);
        let a = simulate(&mdp, &policy, &mut seeded_rng(3), None).unwrap();
        let b = simulate(&mdp, &policy, &mut seeded_rng(3), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncation_flags_later_steps() {
        let mdp = toy();
        let policy = Policy::uniform(&mdp);
        let log = simulate(&mdp, &policy, &mut seeded_rng(1), Some(0)).unwrap();
        assert!(log.steps[0].usable && log.steps[0].next_state.is_some());
        assert!(!log.steps[1].usable && !log.steps[2].usable);
    }

    #[test]
    fn undefined_policy_at_reached_state_fails() {
        let mdp = toy();
        let p = Policy::Deterministic(vec![vec![Some(0), None], vec![Some(0), None], vec![Some(0), Some(0)]]);
        assert!(matches!(policy_value(&mdp, &p), Err(Error::Contract(_))));
        let mut rng = seeded_rng(0);
        let failed = (0..50).any(|_| simulate(&mdp, &p, &mut rng, None).is_err());
        assert!(failed);
    }

    #[test]
    fn json_round_trip_is_bit_stable() {
        let mdp = toy();
        let text = mdp.to_json().unwrap();
        let back = LinearMdp::from_json(&text).unwrap();
        for s in 0..mdp.num_states() {
            for a in 0..mdp.num_actions(s) {
                let (x, y) = (mdp.phi(s, a), back.phi(s, a));
                assert!(x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
            }
        }
        assert_eq!(text, back.to_json().unwrap());
    }

    #[test]
    fn validation_catches_bad_features() {
        let mut parts = toy().parts().clone();
        parts.phi[0][0] *= 1.5;
        let err = LinearMdp::new(parts).unwrap_err();
        assert!(err.to_string().contains("feature norm"));
    }

    #[test]
    fn validation_catches_non_simplex_transition() {
        let mut parts = toy().parts().clone();
        parts.mu[0][0][0] = 0.65;
        let err = LinearMdp::new(parts).unwrap_err();
        assert!(err.to_string().contains("sum to"), "{err}");
    }

    #[test]
    fn tiny_negative_probabilities_are_clamped() {
        let mut parts = toy().parts().clone();
        parts.mu[0][0][0] = 0.7 + 5e-13;
        parts.mu[0][1][0] = 0.3 - 5e-13;
        parts.mu[1][0][3] = 1.0 + 5e-13;
        parts.mu[1][1][3] = -5e-13;
        let mdp = LinearMdp::new(parts).unwrap();
        assert_eq!(mdp.transition(0, 0, 0)[1].1, 0.3 - 5e-13);
        assert_eq!(mdp.transition(1, 1, 1)[1].1, 0.0);
    }

    #[test]
    fn mixture_value_is_linear() {
        let mdp = toy();
        let p1 = Policy::deterministic_from(&mdp, |_, _| 0);
        let p2 = Policy::deterministic_from(&mdp, |_, _| 1);
        let mix = Policy::Mixture(vec![(0.25, p1.clone()), (0.75, p2.clone())]);
        let v = policy_value(&mdp, &mix).unwrap();
        let expect = 0.25 * policy_value(&mdp, &p1).unwrap() + 0.75 * policy_value(&mdp, &p2).unwrap();
        assert!((v - expect).abs() < 1e-12);
        assert!((policy_value_backward(&mdp, &mix).unwrap() - expect).abs() < 1e-12);
    }
}
