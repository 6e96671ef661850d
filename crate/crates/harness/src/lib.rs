//! Seeded experiment campaigns over the algorithms of the `pedel` crate.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use pedel::design::{adaptive_xy_design, design_trace_csv, AdaptiveConfig};
use pedel::instances::{
    embed_bandit_as_mdp, encode_tabular, gap_vis_chain, hard_instance_start_policies, make_hard_bandit,
    random_latent_mdp, tied_tabular, HardBandit, TabularSpec,
};
use pedel::linalg::Vector;
use pedel::lower_bound::{bound_report, BoundReport};
use pedel::mdp::{optimal_policy, policy_value, Environment, LinearMdp, Policy};
use pedel::pedel::{epoch_beta, run_pedel, DesignMode, PedelConfig};
use pedel::policy_class::{build_policy_class, step_constant_policies, PolicyClassSpec};
use pedel::regret::{certification_width, geometric_schedule, online_to_batch_certified, LsviConfig, RegMinKind};
use pedel::{Error, Result};

/// Environment presets.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum EnvSpec {
    /// Parameter-faithful hard instance.
    Hard { d: usize, gap: f64, alpha: f64, c1: f64, c2: f64 },
    /// Hard-instance geometry with free `xi`, `gamma` and gap.
    HardScaled { d: usize, xi: f64, gamma: f64, gap: f64 },
    Tabular { spec: TabularSpec },
    /// Two states and actions, all policies tied.
    Tied,
    Latent { d: usize, states: usize, actions: usize, horizon: usize, seed: u64 },
    Chain { n: usize, horizon: usize, eps: f64 },
    /// A model serialised with `LinearMdp::to_json`.
    File { path: PathBuf },
}

impl EnvSpec {
    pub fn hard_bandit(&self) -> Result<Option<HardBandit>> {
        Ok(match *self {
            EnvSpec::Hard { d, gap, alpha, c1, c2 } => Some(make_hard_bandit(d, gap, alpha, c1, c2)?),
            EnvSpec::HardScaled { d, xi, gamma, gap } => Some(HardBandit::scaled(d, xi, gamma, gap)?),
            _ => None,
        })
    }

    /// Returns the model and, for hard presets, the start-action policy set.
    pub fn build(&self) -> Result<(LinearMdp, Option<Vec<Policy>>)> {
        if let Some(b) = self.hard_bandit()? {
            let hard = embed_bandit_as_mdp(&b)?;
            let pols = hard_instance_start_policies(&hard);
            return Ok((hard.mdp, Some(pols)));
        }
        let mdp = match self {
            EnvSpec::Tabular { spec } => encode_tabular(spec)?,
            EnvSpec::Tied => encode_tabular(&tied_tabular())?,
            EnvSpec::Latent { d, states, actions, horizon, seed } => {
                random_latent_mdp(*d, *states, *actions, *horizon, *seed)?
            }
            EnvSpec::Chain { n, horizon, eps } => encode_tabular(&gap_vis_chain(*n, *horizon, *eps)?)?,
            EnvSpec::File { path } => LinearMdp::from_json(&fs::read_to_string(path)?)?,
            EnvSpec::Hard { .. } | EnvSpec::HardScaled { .. } => unreachable!(),
        };
        Ok((mdp, None))
    }

    fn with_d(&self, value: f64) -> Result<EnvSpec> {
        let v = value.round() as usize;
        let mut out = self.clone();
        match &mut out {
            EnvSpec::Hard { d, .. } | EnvSpec::HardScaled { d, .. } | EnvSpec::Latent { d, .. } => *d = v,
            _ => return Err(Error::Parameter("this preset has no dimension to sweep".into())),
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Pedel,
    OnlineToBatch,
    DesignOnly,
    LowerBound,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerChoice {
    Oracle,
    Lsvi,
    Uniform,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicySource {
    /// Hard presets use their start-action policies, others the step-constant set.
    Auto,
    StepConstant,
    Class(PolicyClassSpec),
}

fn default_policies() -> PolicySource {
    PolicySource::Auto
}
fn default_learner() -> LearnerChoice {
    LearnerChoice::Oracle
}
fn default_bonus() -> f64 {
    0.3
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_class_cap() -> usize {
    4096
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub algorithms: Vec<Algorithm>,
    pub eps: f64,
    pub delta: f64,
    pub seeds: Vec<u64>,
    pub constant_scale: f64,
    /// Episode cap of a single run.
    pub max_episodes: u64,
    #[serde(default = "default_policies")]
    pub policies: PolicySource,
    #[serde(default = "default_class_cap")]
    pub class_cap: usize,
    /// Learner that navigates the design inside the elimination algorithm.
    #[serde(default = "default_learner")]
    pub learner: LearnerChoice,
    /// Bonus multiplier of the optimistic learner.
    #[serde(default = "default_bonus")]
    pub lsvi_bonus: f64,
    #[serde(default)]
    pub opt_cov: bool,
    /// Not part of the config hash.
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(text)?;
        c.check()?;
        Ok(c)
    }

    pub fn check(&self) -> Result<()> {
        if self.seeds.is_empty() || self.algorithms.is_empty() {
            return Err(Error::Parameter("config needs at least one seed and one algorithm".into()));
        }
        if !(self.eps > 0.0 && self.eps < 1.0 && self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Parameter(format!("eps and delta must lie in (0,1), got {} and {}", self.eps, self.delta)));
        }
        if !(self.constant_scale > 0.0) || self.max_episodes == 0 || self.class_cap == 0 {
            return Err(Error::Parameter("constant_scale and caps must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of every field except `output_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let text = serde_json::to_string(&c).expect("config serialises");
        Sha256::digest(text.as_bytes()).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    fn learner(&self) -> RegMinKind {
        match self.learner {
            LearnerChoice::Oracle => RegMinKind::Oracle,
            LearnerChoice::Uniform => RegMinKind::Uniform,
            LearnerChoice::Lsvi => RegMinKind::Lsvi(self.lsvi()),
        }
    }

    fn lsvi(&self) -> LsviConfig {
        LsviConfig { bonus_scale: self.lsvi_bonus, delta: self.delta, ..Default::default() }
    }
}

/// Outcome of one `(seed, algorithm)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub episodes: u64,
    pub success: bool,
    /// The run hit its episode cap.
    pub capped: bool,
    /// Index into the policy class (elimination runs only).
    pub policy_id: Option<usize>,
    pub value_gap: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSummary {
    pub algorithm: Algorithm,
    pub runs: usize,
    pub mean_episodes: f64,
    /// Normal-approximation 95% interval for the mean episode count.
    pub ci95: [f64; 2],
    pub success_rate: f64,
    pub capped: usize,
    pub errors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub config_hash: String,
    pub constant_scale: f64,
    pub summaries: Vec<AlgorithmSummary>,
    pub cells: Vec<CellResult>,
    pub lower_bound: Option<serde_json::Value>,
}

impl CampaignSummary {
    pub fn summary(&self, algorithm: Algorithm) -> Option<&AlgorithmSummary> {
        self.summaries.iter().find(|s| s.algorithm == algorithm)
    }
}

fn file_header(hash: &str, scale: f64) -> String {
    format!("# config_hash={hash}\n# constant_scale={scale:e}\n")
}

struct Prepared {
    mdp: LinearMdp,
    policies: Vec<Policy>,
    best_in_class: f64,
    optimum: f64,
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (mdp, hard_pols) = cfg.env.build()?;
    let policies = match (&cfg.policies, hard_pols) {
        (PolicySource::Auto, Some(p)) => p,
        (PolicySource::Auto, None) | (PolicySource::StepConstant, _) => step_constant_policies(&mdp, cfg.class_cap)?,
        (PolicySource::Class(spec), _) => build_policy_class(&mdp, spec, cfg.eps)?.policies,
    };
    let mut best_in_class = f64::NEG_INFINITY;
    for p in &policies {
        best_in_class = best_in_class.max(policy_value(&mdp, p)?);
    }
    let optimum = optimal_policy(&mdp).1;
    Ok(Prepared { mdp, policies, best_in_class, optimum })
}

fn run_cell(cfg: &ExperimentConfig, prep: &Prepared, algorithm: Algorithm, seed: u64) -> Result<(CellResult, String)> {
    let mut env = Environment::new(&prep.mdp, seed);
    let mut cell = CellResult {
        algorithm,
        seed,
        episodes: 0,
        success: false,
        capped: false,
        policy_id: None,
        value_gap: None,
        error: None,
    };
    let trace = match algorithm {
        Algorithm::Pedel => {
            let mut pc = PedelConfig::new(cfg.eps, cfg.delta);
            pc.constant_scale = cfg.constant_scale;
            pc.max_episodes = cfg.max_episodes;
            pc.regmin = cfg.learner();
            if cfg.opt_cov {
                pc.design = DesignMode::OptCov;
            }
            let r = run_pedel(&mut env, &prep.policies, &pc)?;
            let v = policy_value(&prep.mdp, &prep.policies[r.policy_id])?;
            cell.episodes = r.episodes_total;
            cell.capped = r.flags.budget_exhausted;
            cell.policy_id = Some(r.policy_id);
            cell.value_gap = Some(prep.best_in_class - v);
            cell.success = !cell.capped && v >= prep.best_in_class - cfg.eps;
            r.trace_csv()
        }
        Algorithm::OnlineToBatch => {
            let schedule = geometric_schedule(64, cfg.max_episodes, 2f64.powf(0.25));
            let width = certification_width(&prep.mdp, cfg.delta, cfg.constant_scale);
            let r = online_to_batch_certified(&mut env, cfg.lsvi(), &schedule, width)?;
            let v = policy_value(&prep.mdp, &r.recommended)?;
            cell.episodes = r.episodes;
            cell.capped = r.certified_at.is_none();
            cell.value_gap = Some(prep.optimum - v);
            cell.success = !cell.capped && v >= prep.optimum - cfg.eps;
            format!("episodes,start_action,certified\n{},{},{}\n", r.episodes, r.start_action, !cell.capped)
        }
        Algorithm::DesignOnly => {
            let mdp = &prep.mdp;
            let s0 = mdp.start();
            let targets: Vec<Vector> = (0..mdp.num_actions(s0)).map(|a| mdp.phi(s0, a).clone()).collect();
            let epoch = (1.0 / cfg.eps).log2().ceil().max(1.0) as u32;
            let beta = epoch_beta(mdp.horizon(), targets.len(), epoch, cfg.delta, cfg.constant_scale);
            let ad = AdaptiveConfig { max_episodes: cfg.max_episodes, ..Default::default() };
            let mut learner = cfg.learner().build();
            let r = adaptive_xy_design(
                &mut env,
                learner.as_mut(),
                &targets,
                0,
                1.0 / mdp.dim() as f64,
                cfg.eps * cfg.eps / beta,
                &ad,
            )?;
            cell.episodes = r.episodes;
            cell.capped = !r.reached;
            cell.success = r.reached;
            design_trace_csv(&r.trace)
        }
        Algorithm::LowerBound => unreachable!(),
    };
    Ok((cell, trace))
}

fn summarize(algorithm: Algorithm, cells: &[&CellResult]) -> AlgorithmSummary {
    let n = cells.len() as f64;
    let eps: Vec<f64> = cells.iter().map(|c| c.episodes as f64).collect();
    let mean = eps.iter().sum::<f64>() / n;
    let var = if cells.len() > 1 { eps.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    let half = 1.96 * (var / n).sqrt();
    AlgorithmSummary {
        algorithm,
        runs: cells.len(),
        mean_episodes: mean,
        ci95: [mean - half, mean + half],
        success_rate: cells.iter().filter(|c| c.success).count() as f64 / n,
        capped: cells.iter().filter(|c| c.capped).count(),
        errors: cells.iter().filter(|c| c.error.is_some()).count(),
    }
}

fn algo_name(a: Algorithm) -> &'static str {
    match a {
        Algorithm::Pedel => "pedel",
        Algorithm::OnlineToBatch => "online_to_batch",
        Algorithm::DesignOnly => "design_only",
        Algorithm::LowerBound => "lower_bound",
    }
}

/// Hard presets at `delta`: the lower-bound report of the instance.
pub fn lower_bound_for(env: &EnvSpec, delta: f64) -> Result<BoundReport> {
    match env.hard_bandit()? {
        Some(b) => bound_report(&b, delta, 12),
        None => Err(Error::Parameter("the lower bound needs a hard-instance preset".into())),
    }
}

/// Runs every `(seed, algorithm)` cell, writes one trace CSV per cell and
/// `aggregate.json` into `output_dir`. Cell failures are recorded, not raised.
pub fn run_campaign(cfg: &ExperimentConfig) -> Result<CampaignSummary> {
    cfg.check()?;
    let hash = cfg.hash();
    let header = file_header(&hash, cfg.constant_scale);
    fs::create_dir_all(&cfg.output_dir)?;
    let prep = prepare(cfg)?;
    let jobs: Vec<(Algorithm, u64)> = cfg
        .algorithms
        .iter()
        .filter(|&&a| a != Algorithm::LowerBound)
        .flat_map(|&a| cfg.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let outcomes: Vec<(CellResult, Option<String>)> = jobs
        .par_iter()
        .map(|&(a, s)| match run_cell(cfg, &prep, a, s) {
            Ok((c, t)) => (c, Some(t)),
            Err(e) => (
                CellResult {
                    algorithm: a,
                    seed: s,
                    episodes: 0,
                    success: false,
                    capped: false,
                    policy_id: None,
                    value_gap: None,
                    error: Some(e.to_string()),
                },
                None,
            ),
        })
        .collect();
    for (c, t) in &outcomes {
        if let Some(t) = t {
            let path = cfg.output_dir.join(format!("trace_{}_seed{}.csv", algo_name(c.algorithm), c.seed));
            fs::write(path, format!("{header}{t}"))?;
        }
    }
    let cells: Vec<CellResult> = outcomes.into_iter().map(|(c, _)| c).collect();
    let mut summaries = Vec::new();
    for &a in &cfg.algorithms {
        if a == Algorithm::LowerBound {
            continue;
        }
        let mine: Vec<&CellResult> = cells.iter().filter(|c| c.algorithm == a).collect();
        summaries.push(summarize(a, &mine));
    }
    let lower_bound = if cfg.algorithms.contains(&Algorithm::LowerBound) {
        Some(match lower_bound_for(&cfg.env, cfg.delta) {
            Ok(r) => serde_json::to_value(&r)?,
            Err(e) => serde_json::json!({ "error": e.to_string() }),
        })
    } else {
        None
    };
    let summary = CampaignSummary { config_hash: hash, constant_scale: cfg.constant_scale, summaries, cells, lower_bound };
    write_json(&cfg.output_dir.join("aggregate.json"), &summary)?;
    Ok(summary)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    D,
    Eps,
    ConstantScale,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "d" => Ok(SweepAxis::D),
            "eps" | "epsilon" => Ok(SweepAxis::Eps),
            "constant_scale" => Ok(SweepAxis::ConstantScale),
            _ => Err(Error::Parameter(format!("unknown sweep axis {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub algorithm: Algorithm,
    pub mean_episodes: f64,
    pub success_rate: f64,
}

/// One campaign per axis value, each in its own subdirectory; the table is
/// also written to `sweep.csv`.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    cfg.check()?;
    if values.is_empty() {
        return Err(Error::Parameter("sweep needs at least one value".into()));
    }
    let mut rows = Vec::new();
    for &v in values {
        let mut c = cfg.clone();
        match axis {
            SweepAxis::D => c.env = cfg.env.with_d(v)?,
            SweepAxis::Eps => c.eps = v,
            SweepAxis::ConstantScale => c.constant_scale = v,
        }
        c.output_dir = cfg.output_dir.join(format!("{axis:?}_{v}").to_lowercase());
        let s = run_campaign(&c)?;
        for a in &s.summaries {
            rows.push(SweepRow { value: v, algorithm: a.algorithm, mean_episodes: a.mean_episodes, success_rate: a.success_rate });
        }
    }
    fs::create_dir_all(&cfg.output_dir)?;
    let mut csv = file_header(&cfg.hash(), cfg.constant_scale);
    csv.push_str("value,algorithm,mean_episodes,success_rate\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{}", r.value, algo_name(r.algorithm), r.mean_episodes, r.success_rate);
    }
    fs::write(cfg.output_dir.join("sweep.csv"), csv)?;
    Ok(rows)
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let num: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    num / den
}
