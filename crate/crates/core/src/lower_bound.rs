//! Transportation lower bounds for the hard bandit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instances::{ArmKind, HardBandit};
use crate::linalg::{spd_inverse, Matrix, Vector};

/// KL divergence between Bernoulli(p) and Bernoulli(q).
pub fn bernoulli_kl(p: f64, q: f64) -> f64 {
    if p == q {
        return 0.0;
    }
    let term = |a: f64, b: f64| -> f64 {
        if a == 0.0 {
            0.0
        } else if b == 0.0 {
            f64::INFINITY
        } else {
            a * ((a - b) / b).ln_1p()
        }
    };
    term(p, q) + term(1.0 - p, 1.0 - q)
}

/// `(d - 1) / (48 Delta^2) * log(1 / (2.4 delta))`, floored at zero.
pub fn closed_form_bound(d: usize, gap: f64, delta: f64) -> f64 {
    let v = (d as f64 - 1.0) / (48.0 * gap * gap) * (1.0 / (2.4 * delta)).ln();
    v.max(0.0)
}

/// The allocation problem: arms, the true parameter, the regulariser of the
/// design matrix and which arms count against the `zeta` budget.
#[derive(Clone, Debug)]
pub struct TransportProblem {
    pub arms: Vec<Vector>,
    pub theta: Vector,
    pub best: usize,
    pub constrained: Vec<bool>,
    /// Arms sharing a group get equal weight on the coarse grid.
    pub groups: Vec<usize>,
    pub regularizer: Vec<f64>,
    /// Margin of the alternative instances: `y_z^T theta_z = -eps`.
    pub eps: f64,
}

impl TransportProblem {
    /// Hard instance with `A(t) = sum t_z z z^T + diag(xi^2, gamma^2/d, ...)`
    /// and margin `1e-6 min(Delta, xi)`. The `zeta` budget caps the share of
    /// the costly axis arms `e_2..e_d`.
    pub fn from_hard(b: &HardBandit) -> TransportProblem {
        let d = b.d;
        let mut regularizer = vec![b.gamma * b.gamma / d as f64; d];
        regularizer[0] = b.xi * b.xi;
        TransportProblem {
            arms: b.arms.iter().map(|a| Vector::from_column_slice(a)).collect(),
            theta: b.theta(),
            best: b.optimal_arm(),
            constrained: b.kinds.iter().map(|k| matches!(k, ArmKind::Axis(_))).collect(),
            groups: b
                .kinds
                .iter()
                .map(|k| match k {
                    ArmKind::Optimal => 0,
                    ArmKind::Axis(_) => 1,
                    ArmKind::Near(_) => 2,
                })
                .collect(),
            regularizer,
            eps: 1e-6 * b.gap.min(b.xi),
        }
    }

    fn design(&self, lambda: &[f64]) -> Result<Matrix> {
        let d = self.theta.len();
        let mut a = Matrix::from_diagonal(&Vector::from_column_slice(&self.regularizer));
        for (z, &w) in self.arms.iter().zip(lambda) {
            if w > 0.0 {
                a += z * z.transpose() * w;
            }
        }
        debug_assert_eq!(a.nrows(), d);
        spd_inverse(&a)
    }

    /// `theta - (y^T theta + eps) A^{-1} y / (y^T A^{-1} y)` with `y = z_best - z`.
    pub fn alternative(&self, lambda: &[f64], z: usize) -> Result<Vector> {
        let inv = self.design(lambda)?;
        Ok(self.alternative_with(&inv, z))
    }

    fn alternative_with(&self, inv: &Matrix, z: usize) -> Vector {
        let y = &self.arms[self.best] - &self.arms[z];
        let ay = inv * &y;
        let scale = (y.dot(&self.theta) + self.eps) / y.dot(&ay);
        &self.theta - ay * scale
    }

    fn mean(&self, theta: &Vector, v: usize) -> f64 {
        theta.dot(&self.arms[v]) + 0.5
    }

    /// Per-arm rates `sum_v lambda_v KL(nu_theta, v || nu_alt, v)` for each rival `z`.
    /// Alternatives with a mean outside `[0, 1]` are not Bernoulli models and get `+inf`.
    pub fn rates(&self, lambda: &[f64]) -> Result<Vec<(usize, f64)>> {
        let inv = self.design(lambda)?;
        let mut out = Vec::new();
        for z in 0..self.arms.len() {
            if z == self.best {
                continue;
            }
            let alt = self.alternative_with(&inv, z);
            let mut g = 0.0;
            for (v, &w) in lambda.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let (p, q) = (self.mean(&self.theta, v), self.mean(&alt, v));
                if !(0.0..=1.0).contains(&q) {
                    g = f64::INFINITY;
                    break;
                }
                g += w * bernoulli_kl(p, q);
            }
            out.push((z, g));
        }
        Ok(out)
    }

    /// `min_z` of [`TransportProblem::rates`] and the binding rival.
    pub fn worst_rate(&self, lambda: &[f64]) -> Result<(f64, usize)> {
        let r = self.rates(lambda)?;
        Ok(r.into_iter().fold((f64::INFINITY, usize::MAX), |acc, (z, g)| if g < acc.0 { (g, z) } else { acc }))
    }

    fn constrained_mass(&self, lambda: &[f64]) -> f64 {
        lambda.iter().zip(&self.constrained).filter(|(_, &c)| c).map(|(w, _)| w).sum()
    }

    /// Caps the constrained mass at `zeta`, handing the excess to the other arms.
    fn project(&self, lambda: &mut [f64], zeta: f64) {
        let total: f64 = lambda.iter().sum();
        lambda.iter_mut().for_each(|w| *w /= total);
        let c = self.constrained_mass(lambda);
        if c > zeta {
            let free = 1.0 - c;
            for (w, &k) in lambda.iter_mut().zip(&self.constrained) {
                if k {
                    *w *= zeta / c;
                } else if free > 0.0 {
                    *w *= (1.0 - zeta) / free;
                }
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransportReport {
    /// Total samples of the best allocation found; `None` when no rival exists.
    pub value: Option<f64>,
    pub infeasible: bool,
    pub allocation: Vec<f64>,
    pub worst_rate: f64,
    pub binding_arm: Option<usize>,
    pub grid_points: usize,
    pub refine_iterations: usize,
    pub converged: bool,
    pub eps: f64,
    pub zeta: f64,
}

fn compositions(k: usize, n: usize) -> Vec<Vec<usize>> {
    if k == 1 {
        return vec![vec![n]];
    }
    let mut out = Vec::new();
    for first in 0..=n {
        for mut rest in compositions(k - 1, n - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Best allocation over a group-symmetric grid with `grid` steps per group,
/// refined by exponentiated-gradient ascent on the worst rate. The returned
/// value `log(1/(2.4 delta)) / worst_rate` is attained by a feasible allocation
/// for the alternatives in the `theta_z(eps, t)` family.
pub fn solve_transport(problem: &TransportProblem, delta: f64, zeta: f64, grid: usize) -> Result<TransportReport> {
    if !(delta > 0.0 && delta < 1.0 / 2.4) || !(0.0..=1.0).contains(&zeta) || grid == 0 {
        return Err(Error::Parameter("transport program needs 0 < delta < 1/2.4, zeta in [0,1], grid > 0".into()));
    }
    let n = problem.arms.len();
    let mut report = TransportReport {
        value: None,
        infeasible: true,
        allocation: vec![],
        worst_rate: 0.0,
        binding_arm: None,
        grid_points: 0,
        refine_iterations: 0,
        converged: true,
        eps: problem.eps,
        zeta,
    };
    if n < 2 {
        return Ok(report);
    }
    let ngroups = problem.groups.iter().max().map_or(1, |m| m + 1);
    let sizes: Vec<usize> = (0..ngroups).map(|g| problem.groups.iter().filter(|&&x| x == g).count()).collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for comp in compositions(ngroups, grid) {
        if comp.iter().zip(&sizes).any(|(&c, &s)| c > 0 && s == 0) {
            continue;
        }
        let lambda: Vec<f64> = problem
            .groups
            .iter()
            .map(|&g| comp[g] as f64 / grid as f64 / sizes[g] as f64)
            .collect();
        if problem.constrained_mass(&lambda) > zeta + 1e-12 {
            continue;
        }
        report.grid_points += 1;
        let (g, _) = problem.worst_rate(&lambda)?;
        if g.is_finite() && best.as_ref().is_none_or(|b| g > b.0) {
            best = Some((g, lambda));
        }
    }
    let (mut g_best, mut lam_best) = match best {
        Some(b) if b.0 > 0.0 => b,
        _ => return Ok(report),
    };
    let mut lambda: Vec<f64> = lam_best.iter().map(|w| w.max(1e-6)).collect();
    problem.project(&mut lambda, zeta);
    let iters = 400;
    let mut last_improve = 0;
    for it in 0..iters {
        let (g0, _) = problem.worst_rate(&lambda)?;
        if g0.is_finite() && g0 > g_best {
            if g0 > g_best * (1.0 + 1e-9) {
                last_improve = it;
            }
            g_best = g0;
            lam_best = lambda.clone();
        }
        let h = 1e-7;
        let mut grad = vec![0.0; n];
        for i in 0..n {
            let mut l = lambda.clone();
            l[i] += h;
            let (gi, _) = problem.worst_rate(&l)?;
            grad[i] = if gi.is_finite() && g0.is_finite() { (gi - g0) / h } else { 0.0 };
        }
        let scale = grad.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if scale == 0.0 {
            break;
        }
        let step = 0.5 / (1.0 + it as f64).sqrt();
        for (w, gr) in lambda.iter_mut().zip(&grad) {
            *w = (*w * (step * gr / scale).exp()).max(1e-12);
        }
        problem.project(&mut lambda, zeta);
        report.refine_iterations = it + 1;
    }
    report.converged = report.refine_iterations - last_improve >= 50;
    let (g, z) = problem.worst_rate(&lam_best)?;
    report.value = Some((1.0 / (2.4 * delta)).ln() / g);
    report.infeasible = false;
    report.worst_rate = g;
    report.binding_arm = Some(z);
    report.allocation = lam_best;
    Ok(report)
}

/// Numeric transportation value for the hard instance.
pub fn numeric_transportation_value(bandit: &HardBandit, delta: f64, zeta: f64, grid: usize) -> Result<TransportReport> {
    solve_transport(&TransportProblem::from_hard(bandit), delta, zeta, grid)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundReport {
    pub d: usize,
    pub delta: f64,
    #[serde(rename = "Delta")]
    pub gap: f64,
    pub zeta: f64,
    pub closed_form: f64,
    pub numeric: Option<f64>,
    pub details: TransportReport,
}

impl BoundReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Closed form and numeric program side by side, at the instance's own `zeta`.
pub fn bound_report(bandit: &HardBandit, delta: f64, grid: usize) -> Result<BoundReport> {
    let details = numeric_transportation_value(bandit, delta, bandit.zeta, grid)?;
    Ok(BoundReport {
        d: bandit.d,
        delta,
        gap: bandit.gap,
        zeta: bandit.zeta,
        closed_form: closed_form_bound(bandit.d, bandit.gap, delta),
        numeric: details.value,
        details,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaselineCertificate {
    pub trials: usize,
    pub mean: f64,
    /// Normal-approximation 95% interval for the mean.
    pub ci_low: f64,
    pub ci_high: f64,
    pub bound: f64,
    /// True when the whole interval lies at or above the bound.
    pub above_bound: bool,
}

/// Compares measured stopping budgets with a lower bound.
pub fn certify_baseline(episodes: &[f64], bound: f64) -> Result<BaselineCertificate> {
    if episodes.is_empty() {
        return Err(Error::Parameter("certificate needs at least one trial".into()));
    }
    let n = episodes.len() as f64;
    let mean = episodes.iter().sum::<f64>() / n;
    let var = if episodes.len() > 1 {
        episodes.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let half = 1.96 * (var / n).sqrt();
    Ok(BaselineCertificate {
        trials: episodes.len(),
        mean,
        ci_low: mean - half,
        ci_high: mean + half,
        bound,
        above_bound: mean - half >= bound,
    })
}
