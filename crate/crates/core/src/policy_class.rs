//! Finite policy classes: explicit lists, action covers and restricted-action
//! linear softmax nets.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::mdp::{seeded_rng, LinearMdp, Policy, SoftmaxPolicy};

/// Greedy cover radius `delta / (4 H sqrt d)`.
pub fn cover_radius(d: usize, horizon: usize, delta: f64) -> f64 {
    delta / (4.0 * horizon as f64 * (d as f64).sqrt())
}

/// Cardinality bound `(1 + 8 H sqrt d / delta)^d` of a single state's cover.
pub fn cover_size_bound(d: usize, horizon: usize, delta: f64) -> f64 {
    (1.0 + 8.0 * horizon as f64 * (d as f64).sqrt() / delta).powi(d as i32)
}

/// Per-state action subsets. Actions are visited in a seeded shuffled order
/// and kept when their feature is farther than [`cover_radius`] from every
/// kept feature, so every action lies within `delta / (2 H sqrt d)` of a kept one.
pub fn build_action_cover(mdp: &LinearMdp, delta: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
    if !(delta > 0.0) {
        return Err(Error::Parameter(format!("cover resolution must be positive (got {delta})")));
    }
    let r = cover_radius(mdp.dim(), mdp.horizon(), delta);
    let mut rng = seeded_rng(seed);
    let mut out = Vec::with_capacity(mdp.num_states());
    for s in 0..mdp.num_states() {
        let mut order: Vec<usize> = (0..mdp.num_actions(s)).collect();
        order.shuffle(&mut rng);
        let mut kept: Vec<usize> = Vec::new();
        for a in order {
            let f = mdp.phi(s, a);
            if kept.iter().all(|&b| (f - mdp.phi(s, b)).norm() > r) {
                kept.push(a);
            }
        }
        kept.sort_unstable();
        out.push(kept);
    }
    Ok(out)
}

/// `pi(a|s) ∝ exp(eta <phi(s,a), w>)` over `allowed`, zero elsewhere.
pub fn softmax_policy_probs(mdp: &LinearMdp, w: &[f64], eta: f64, allowed: &[usize], s: usize) -> Result<Vec<f64>> {
    let mut sets = vec![Vec::new(); mdp.num_states()];
    sets[s] = allowed.to_vec();
    SoftmaxPolicy { eta, weights: vec![w.to_vec()], allowed: Some(sets) }.probs(mdp, 0, s)
}

/// Temperature large enough for the softmax net to contain an `eps`-optimal policy.
pub fn theory_eta(d: usize, horizon: usize, eps: f64) -> f64 {
    let (d, h) = (d as f64, horizon as f64);
    2.0 * d * h * (1.0 + 16.0 * h * d / eps).ln() * (3.0 * d.sqrt()).powf(h) / eps
}

/// Action-cover resolution `eps / (3 (3 sqrt d)^H)`.
pub fn theory_cover_delta(d: usize, horizon: usize, eps: f64) -> f64 {
    eps / (3.0 * (3.0 * (d as f64).sqrt()).powi(horizon as i32))
}

/// Weight-net resolution `eps / (4 d H^2 eta)`.
pub fn theory_net_resolution(d: usize, horizon: usize, eps: f64, eta: f64) -> f64 {
    eps / (4.0 * d as f64 * (horizon * horizon) as f64 * eta)
}

/// Natural log of `(1 + 32 H^4 d^{5/2} log(1 + 16 H d / eps) / eps^2)^{d H^2}`.
pub fn theory_log_cardinality(d: usize, horizon: usize, eps: f64) -> f64 {
    let (df, h) = (d as f64, horizon as f64);
    let base = 1.0 + 32.0 * h.powi(4) * df.powf(2.5) * (1.0 + 16.0 * h * df / eps).ln() / (eps * eps);
    df * h * h * base.ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetMode {
    /// Full net at the theoretical parameters, refused above the cap.
    Theory,
    /// Seeded subsample of the net plus pinned policies.
    Capped,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SoftmaxNetSpec {
    pub mode: NetMode,
    /// `None` uses [`theory_eta`].
    pub eta: Option<f64>,
    /// Weight-net resolution; `None` uses [`theory_net_resolution`].
    pub resolution: Option<f64>,
    /// Action-cover resolution; `None` uses [`theory_cover_delta`].
    pub cover_delta: Option<f64>,
    pub cap: usize,
    pub seed: u64,
    /// Always included (first) in capped mode.
    #[serde(default)]
    pub pinned: Vec<Policy>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum PolicyClassSpec {
    Explicit(Vec<Policy>),
    SoftmaxNet(SoftmaxNetSpec),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicyClassMeta {
    pub size: usize,
    /// False when the class is a subsample of the net.
    pub faithful: bool,
    pub pinned: usize,
    /// Log of the theoretical net cardinality (softmax nets only).
    pub log_cardinality: Option<f64>,
    pub eta: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct PolicyClass {
    pub policies: Vec<Policy>,
    pub meta: PolicyClassMeta,
}

/// Points of the cubic lattice with spacing `2 r / sqrt d` inside the ball of
/// radius `radius + r`; every point of the radius-`radius` ball is within `r`.
fn lattice_axis(d: usize, radius: f64, r: f64) -> (f64, i64) {
    let step = 2.0 * r / (d as f64).sqrt();
    (step, ((radius + r) / step).ceil() as i64)
}

fn enumerate_net(d: usize, radius: f64, r: f64, cap: usize) -> Result<Vec<Vec<f64>>> {
    let (step, m) = lattice_axis(d, radius, r);
    let per_axis = (2 * m + 1) as f64;
    if per_axis.powi(d as i32) > 1e8 {
        return Err(Error::Contract(format!(
            "weight net needs a {}^{d} lattice scan, which is too large",
            2 * m + 1
        )));
    }
    let mut idx = vec![-m; d];
    let mut out = Vec::new();
    loop {
        let p: Vec<f64> = idx.iter().map(|&i| i as f64 * step).collect();
        if p.iter().map(|x| x * x).sum::<f64>().sqrt() <= radius + r {
            out.push(p);
            if out.len() > cap {
                return Err(Error::Contract(format!("weight net exceeds the cap of {cap} points")));
            }
        }
        let mut k = 0;
        while k < d {
            idx[k] += 1;
            if idx[k] <= m {
                break;
            }
            idx[k] = -m;
            k += 1;
        }
        if k == d {
            return Ok(out);
        }
    }
}

/// Uniform draw from the ball, snapped to the net lattice.
fn sample_net_point(rng: &mut impl Rng, d: usize, radius: f64, r: f64) -> Vec<f64> {
    let (step, _) = lattice_axis(d, radius, r);
    let g: Vec<f64> = (0..d)
        .map(|_| {
            let (u1, u2): (f64, f64) = (rng.random(), rng.random());
            (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    let n = g.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    let len = radius * rng.random::<f64>().powf(1.0 / d as f64);
    g.iter().map(|x| (x / n * len / step).round() * step).collect()
}

/// Builds the class for accuracy `eps`. Theory mode refuses (contract error
/// naming the cardinality) when the theoretical size exceeds `cap`.
pub fn build_policy_class(mdp: &LinearMdp, spec: &PolicyClassSpec, eps: f64) -> Result<PolicyClass> {
    let net = match spec {
        PolicyClassSpec::Explicit(list) => {
            return Ok(PolicyClass {
                policies: list.clone(),
                meta: PolicyClassMeta { size: list.len(), faithful: true, pinned: 0, log_cardinality: None, eta: None },
            })
        }
        PolicyClassSpec::SoftmaxNet(n) => n,
    };
    if !(eps > 0.0 && eps < 1.0) || net.cap == 0 {
        return Err(Error::Parameter("softmax net needs eps in (0,1) and a positive cap".into()));
    }
    let (d, hz) = (mdp.dim(), mdp.horizon());
    let eta = net.eta.unwrap_or_else(|| theory_eta(d, hz, eps));
    let r = net.resolution.unwrap_or_else(|| theory_net_resolution(d, hz, eps, eta));
    let cover = build_action_cover(mdp, net.cover_delta.unwrap_or_else(|| theory_cover_delta(d, hz, eps)), net.seed)?;
    let radius = 2.0 * hz as f64 * (d as f64).sqrt();
    let log_card = theory_log_cardinality(d, hz, eps);
    let make = |weights: Vec<Vec<f64>>| Policy::Softmax(SoftmaxPolicy { eta, weights, allowed: Some(cover.clone()) });
    match net.mode {
        NetMode::Theory => {
            if log_card > (net.cap as f64).ln() {
                return Err(Error::Contract(format!(
                    "softmax net has theoretical cardinality e^{log_card:.3} = {:.4e}, above the cap of {}",
                    log_card.exp(),
                    net.cap
                )));
            }
            let points = enumerate_net(d, radius, r, net.cap)?;
            let total = (points.len() as f64).powi(hz as i32);
            if total > net.cap as f64 {
                return Err(Error::Contract(format!(
                    "softmax net has {total} policies, above the cap of {}",
                    net.cap
                )));
            }
            let mut policies = Vec::new();
            let mut idx = vec![0usize; hz];
            loop {
                policies.push(make(idx.iter().map(|&i| points[i].clone()).collect()));
                let mut k = 0;
                while k < hz {
                    idx[k] += 1;
                    if idx[k] < points.len() {
                        break;
                    }
                    idx[k] = 0;
                    k += 1;
                }
                if k == hz {
                    break;
                }
            }
            Ok(PolicyClass {
                meta: PolicyClassMeta { size: policies.len(), faithful: true, pinned: 0, log_cardinality: Some(log_card), eta: Some(eta) },
                policies,
            })
        }
        NetMode::Capped => {
            let mut policies = net.pinned.clone();
            let mut rng = seeded_rng(net.seed ^ 0x9e37_79b9_7f4a_7c15);
            let mut misses = 0;
            while policies.len() < net.cap && misses < 64 * net.cap {
                let p = make((0..hz).map(|_| sample_net_point(&mut rng, d, radius, r)).collect());
                if policies.contains(&p) {
                    misses += 1;
                } else {
                    policies.push(p);
                }
            }
            Ok(PolicyClass {
                meta: PolicyClassMeta {
                    size: policies.len(),
                    faithful: false,
                    pinned: net.pinned.len(),
                    log_cardinality: Some(log_card),
                    eta: Some(eta),
                },
                policies,
            })
        }
    }
}

/// Every policy that plays one fixed action per step, `A^H` in total.
/// Needs the same action count at every state.
pub fn step_constant_policies(mdp: &LinearMdp, cap: usize) -> Result<Vec<Policy>> {
    let na = mdp.num_actions(mdp.start());
    if (0..mdp.num_states()).any(|s| mdp.num_actions(s) != na) {
        return Err(Error::Parameter("step-constant policies need equal action counts".into()));
    }
    let hz = mdp.horizon();
    let total = (na as f64).powi(hz as i32);
    if total > cap as f64 {
        return Err(Error::Contract(format!("{na}^{hz} step-constant policies exceed the cap of {cap}")));
    }
    let mut out = Vec::with_capacity(total as usize);
    for code in 0..total as usize {
        out.push(Policy::deterministic_from(mdp, |h, _| code / na.pow(h as u32) % na));
    }
    Ok(out)
}

pub fn policies_to_json(policies: &[Policy]) -> Result<String> {
    Ok(serde_json::to_string_pretty(policies)?)
}

pub fn policies_from_json(text: &str) -> Result<Vec<Policy>> {
    Ok(serde_json::from_str(text)?)
}

/// Largest distance from an action's feature to its nearest covered feature.
pub fn cover_error(mdp: &LinearMdp, cover: &[Vec<usize>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (s, kept) in cover.iter().enumerate() {
        for a in 0..mdp.num_actions(s) {
            let f: &Vector = mdp.phi(s, a);
            let best = kept.iter().map(|&b| (f - mdp.phi(s, b)).norm()).fold(f64::INFINITY, f64::min);
            worst = worst.max(best);
        }
    }
    worst
}
