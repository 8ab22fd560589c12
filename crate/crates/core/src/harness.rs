//! Run orchestration shared by the command-line tool and the acceptance suite:
//! configuration, training, evaluation sweeps, comparisons, safety-set reports,
//! headway calibration and plot-data emission.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::driver::{
    fit_headway, sample_preference, BehaviorSample, IdmParams, PreferenceDistribution, T_MAX, T_MIN,
};
use crate::env::{
    run_episode, CavControl, EnvConfig, EpisodeResult, InitialConditions, PvProfile, Scenario,
    PROFILE_MIN_SPEED,
};
use crate::error::{Error, Result};
use crate::filter::{build_config, RmpcConfig, RmpcWeights, SafetyFilter};
use crate::rng::{self, indexed_stream};
use crate::sets::invariance_check;
use crate::td3::{
    gradient_check, load_checkpoint_for, Head, Mlp, ReplayBuffer, Td3Agent, Td3Config, Transition,
};

/// Controller under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Tube MPC tracking without a learned proposal.
    RmpcOnly,
    /// TD3 actions applied directly.
    RawRl,
    /// TD3 actions certified by the tube filter.
    SafeRl,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::RmpcOnly, Method::RawRl, Method::SafeRl];

    pub fn name(self) -> &'static str {
        match self {
            Method::RmpcOnly => "rmpc-only",
            Method::RawRl => "raw-rl",
            Method::SafeRl => "safe-rl",
        }
    }

    pub fn uses_agent(self) -> bool {
        self != Method::RmpcOnly
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::domain(format!(
                    "unknown method {s:?} (expected rmpc-only, raw-rl or safe-rl)"
                ))
            })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Number of headway values on the uniform grid over [0.5, 3] s.
    pub preferences: usize,
    pub seeds_per_preference: usize,
    /// Headway of the single traced episode written for plots.
    pub representative_t: f64,
    /// Worker threads for sweeps; 0 uses the available parallelism.
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            preferences: 50,
            seeds_per_preference: 2,
            representative_t: 1.2,
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Directory of `t,v` CSV profiles; synthetic profiles when absent.
    pub profiles: Option<PathBuf>,
    /// `[{T, weight}]` JSON for training preferences; uniform grid when absent.
    pub preference_file: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

/// Complete, serializable description of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub scenario: Scenario,
    pub method: Method,
    pub episodes: usize,
    /// Periodic checkpoint interval in episodes (0 disables).
    pub checkpoint_every: usize,
    /// Critic learning rate used instead of `td3.lr_q` for the unfiltered baseline.
    pub raw_rl_lr_q: f64,
    /// Relative error bound of the gradient check run before training.
    pub gradient_check_tol: f64,
    pub env: EnvConfig,
    pub test_initial: InitialConditions,
    pub rmpc: RmpcWeights,
    pub td3: Td3Config,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            scenario: Scenario::C,
            method: Method::SafeRl,
            episodes: 500,
            checkpoint_every: 100,
            raw_rl_lr_q: 5e-5,
            gradient_check_tol: 1e-4,
            env: EnvConfig::default(),
            test_initial: InitialConditions::test(),
            rmpc: RmpcWeights::default().with_horizon(20),
            td3: Td3Config::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Episode count and horizon of the full-scale study.
    pub fn full_scale(mut self) -> Self {
        self.episodes = 5000;
        self.rmpc.horizon = 50;
        self
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(s).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.td3.validate()?;
        self.env.reward.validate()?;
        self.env.constraints.validate()?;
        self.env.disturbance.validate(&self.env.model)?;
        if self.env.scenario != self.scenario {
            return Err(Error::domain(format!(
                "env.scenario {} differs from scenario {}",
                self.env.scenario, self.scenario
            )));
        }
        if !(self.raw_rl_lr_q > 0.0 && self.gradient_check_tol > 0.0) {
            return Err(Error::domain(
                "raw_rl_lr_q and gradient_check_tol must be positive",
            ));
        }
        if self.eval.preferences == 0 || self.eval.seeds_per_preference == 0 {
            return Err(Error::domain(
                "evaluation sweep must contain at least one case",
            ));
        }
        Ok(())
    }

    pub fn with_scenario(mut self, scenario: Scenario) -> Self {
        self.scenario = scenario;
        self.env.scenario = scenario;
        self
    }

    /// Single-line JSON echo used in every emitted file.
    pub fn echo(&self) -> String {
        serde_json::to_string(self).unwrap_or_else(|e| format!("{{\"error\":\"{e}\"}}"))
    }

    fn td3_for(&self, method: Method) -> Td3Config {
        let mut c = self.td3;
        if method == Method::RawRl {
            c.lr_q = self.raw_rl_lr_q;
        }
        c
    }
}

/// Offline safety artifacts for a configuration; `rl` overrides the proposal weight.
pub fn safety_config(cfg: &RunConfig, rl: f64) -> Result<RmpcConfig> {
    let weights = RmpcWeights { rl, ..cfg.rmpc };
    build_config(
        &cfg.env.constraints,
        &cfg.env.disturbance,
        &cfg.env.model,
        &weights,
    )
}

fn control_for(method: Method, cfg: &RunConfig) -> Result<CavControl> {
    Ok(match method {
        Method::RawRl => CavControl::Raw,
        Method::SafeRl => CavControl::Filtered(Box::new(SafetyFilter::new(safety_config(
            cfg,
            cfg.rmpc.rl,
        )?)?)),
        Method::RmpcOnly => {
            CavControl::Filtered(Box::new(SafetyFilter::new(safety_config(cfg, 0.0)?)?))
        }
    })
}

/// Source of PV profiles: CSV files cycled in name order, or the synthetic generator.
#[derive(Debug, Clone)]
pub struct ProfileSource {
    files: Vec<PvProfile>,
    tau: f64,
    v0: f64,
    len: usize,
}

impl ProfileSource {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let tau = cfg.env.model.tau;
        let mut files = Vec::new();
        if let Some(dir) = &cfg.paths.profiles {
            let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            paths.sort();
            for p in &paths {
                files.push(PvProfile::from_csv(p, tau)?);
            }
            if files.is_empty() {
                return Err(Error::domain(format!(
                    "no CSV profiles in {}",
                    dir.display()
                )));
            }
        }
        let v0 = cfg.env.initial.v_c + cfg.env.initial.dv_pc;
        Ok(Self {
            files,
            tau,
            v0,
            len: cfg.env.steps + 1,
        })
    }

    /// Profile number `index` of the stream `name`.
    pub fn get(&self, master: u64, name: &str, index: u64) -> PvProfile {
        if self.files.is_empty() {
            let mut r = indexed_stream(master, name, index);
            PvProfile::synthetic(&mut r, self.len, self.tau, self.v0, 3.0, PROFILE_MIN_SPEED)
        } else {
            self.files[(index as usize) % self.files.len()].clone()
        }
    }
}

fn preference_distribution(cfg: &RunConfig) -> Result<PreferenceDistribution> {
    match &cfg.paths.preference_file {
        Some(p) => PreferenceDistribution::load(p),
        None => Ok(PreferenceDistribution::default()),
    }
}

fn episode_seed(master: u64, name: &str, index: u64) -> u64 {
    indexed_stream(master, name, index).random()
}

/// Largest finite-difference gradient error over the agent's network shapes.
pub fn gradient_gate(state_dim: usize, td3: &Td3Config, seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, "gradient-check");
    let [h1, h2] = td3.hidden;
    let actor = Mlp::new(&[state_dim, h1, h2, 1], Head::Tanh, td3.u_max, &mut r)?;
    let critic = Mlp::new(&[state_dim + 1, h1, h2, 1], Head::Linear, 1.0, &mut r)?;
    let loss = |out: &DMatrix<f64>| {
        let diff = out.map(|v| v - 0.5);
        (0.5 * diff.norm_squared(), diff)
    };
    let mut worst = 0.0f64;
    for (net, d) in [(&actor, state_dim), (&critic, state_dim + 1)] {
        let x = DMatrix::from_fn(d, td3.batch, |_, _| r.random_range(-1.0..1.0));
        worst = worst.max(gradient_check(net, &x, loss, 200, &mut r)?);
    }
    Ok(worst)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub episode: usize,
    pub t_true: f64,
    pub steps: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub collisions: usize,
    pub violations: usize,
    pub qp_failures: usize,
    pub cav_kj_per_km: f64,
    pub hdv_kj_per_km: f64,
    pub holistic_kj_per_km: f64,
    pub exploration_std: f64,
}

impl TrainLogRow {
    fn from_episode(episode: usize, r: &EpisodeResult, std: f64) -> Self {
        let nan = f64::NAN;
        Self {
            episode,
            t_true: r.t_true,
            steps: r.steps,
            ret: r.total_reward(),
            collisions: usize::from(r.collision),
            violations: r.violations,
            qp_failures: r.qp_failures,
            cav_kj_per_km: r.cav_energy.and_then(|e| e.kj_per_km).unwrap_or(nan),
            hdv_kj_per_km: r.hdv_energy.kj_per_km.unwrap_or(nan),
            holistic_kj_per_km: r.holistic_kj_per_km.unwrap_or(nan),
            exploration_std: std,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub agent: Td3Agent,
    pub log: Vec<TrainLogRow>,
    pub gradient_error: f64,
}

/// Trains a TD3 agent for `cfg.method` (raw-rl or safe-rl).
///
/// `on_episode` sees every log row and the agent after that episode, e.g. for
/// progress output or periodic checkpoints; returning `false` stops training.
pub fn train<F>(cfg: &RunConfig, mut on_episode: F) -> Result<TrainOutcome>
where
    F: FnMut(&TrainLogRow, &Td3Agent) -> Result<bool>,
{
    cfg.validate()?;
    let method = cfg.method;
    if !method.uses_agent() || !cfg.scenario.has_cav() {
        return Err(Error::domain(format!(
            "method {method} in scenario {} has nothing to train",
            cfg.scenario
        )));
    }
    let sd = cfg.scenario.state_dim();
    let td3 = cfg.td3_for(method);
    let gradient_error = gradient_gate(sd, &td3, cfg.seed)?;
    if !(gradient_error <= cfg.gradient_check_tol) {
        return Err(Error::domain(format!(
            "gradient check failed: relative error {gradient_error:.3e} exceeds {:.1e}",
            cfg.gradient_check_tol
        )));
    }
    let mut agent_rng = rng::stream(cfg.seed, rng::AGENT);
    let mut agent = Td3Agent::new(sd, cfg.scenario.observation_scale(), td3, &mut agent_rng)?;
    let mut buffer = ReplayBuffer::new(td3.buffer_capacity);
    let profiles = ProfileSource::new(cfg)?;
    let prefs = preference_distribution(cfg)?;
    let mut control = control_for(method, cfg)?;
    let env_cfg = EnvConfig {
        scenario: cfg.scenario,
        ..cfg.env.clone()
    };
    let mut log = Vec::with_capacity(cfg.episodes);

    for ep in 0..cfg.episodes {
        let profile = profiles.get(cfg.seed, "train-profile", ep as u64);
        let t_true = sample_preference(
            &prefs,
            &mut indexed_stream(cfg.seed, rng::PREFERENCE, ep as u64),
        );
        let seed = episode_seed(cfg.seed, "train-episode", ep as u64);
        let std = td3.exploration_std(ep);
        let mut env = crate::env::Env::new(env_cfg.clone(), control, profile, t_true, seed)?;
        let mut obs = env.observation();
        while !env.is_done() {
            let u_l = agent.act_with_std(&obs, std, &mut agent_rng)?;
            let out = env.step(u_l)?;
            buffer.push(Transition {
                state: obs,
                action: u_l,
                reward: out.reward,
                next_state: out.observation.clone(),
                done: out.info.collision,
            });
            agent.update(&buffer, &mut agent_rng)?;
            obs = out.observation;
        }
        let (result, c) = env.finish()?;
        control = c;
        let row = TrainLogRow::from_episode(ep, &result, std);
        info!(
            "{} {} episode {ep}: return {:.2}, collisions {}, holistic {:.1} kJ/km",
            cfg.scenario, method, row.ret, row.collisions, row.holistic_kj_per_km
        );
        let keep_going = on_episode(&row, &agent)?;
        log.push(row);
        if !keep_going {
            break;
        }
    }
    Ok(TrainOutcome {
        agent,
        log,
        gradient_error,
    })
}

/// Result of one evaluation case of the preference sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case: usize,
    pub method: Method,
    pub scenario: Scenario,
    pub t_true: f64,
    pub seed: u64,
    pub t_hat: f64,
    pub cav_kj_per_km: f64,
    pub hdv_kj_per_km: f64,
    pub holistic_kj_per_km: f64,
    pub violations: usize,
    pub collision: bool,
    pub qp_failures: usize,
    pub min_tube_margin: f64,
    #[serde(rename = "return")]
    pub ret: f64,
}

/// Headway grid and seed of every evaluation case (shared across methods).
pub fn sweep_cases(cfg: &RunConfig) -> Vec<(f64, u64)> {
    let n = cfg.eval.preferences;
    let mut out = Vec::with_capacity(n * cfg.eval.seeds_per_preference);
    for i in 0..n {
        let t = if n == 1 {
            cfg.eval.representative_t
        } else {
            T_MIN + (T_MAX - T_MIN) * i as f64 / (n - 1) as f64
        };
        for j in 0..cfg.eval.seeds_per_preference {
            let idx = (i * cfg.eval.seeds_per_preference + j) as u64;
            out.push((t, episode_seed(cfg.seed, "eval-episode", idx)));
        }
    }
    out
}

fn eval_config(cfg: &RunConfig, scenario: Scenario) -> EnvConfig {
    EnvConfig {
        scenario,
        initial: cfg.test_initial,
        ..cfg.env.clone()
    }
}

/// Runs one evaluation episode for a method with a frozen agent.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_case(
    cfg: &RunConfig,
    scenario: Scenario,
    method: Method,
    agent: Option<&Td3Agent>,
    control: CavControl,
    profile: PvProfile,
    t_true: f64,
    seed: u64,
) -> Result<(EpisodeResult, CavControl)> {
    let env_cfg = eval_config(cfg, scenario);
    match (method.uses_agent() && scenario.has_cav(), agent) {
        (true, Some(a)) => run_episode(&env_cfg, control, profile, t_true, seed, |o| a.act(o)),
        (true, None) => Err(Error::domain(format!(
            "method {method} needs a trained agent"
        ))),
        (false, _) => run_episode(&env_cfg, control, profile, t_true, seed, |_| Ok(0.0)),
    }
}

fn worker_count(cfg: &RunConfig, jobs: usize) -> usize {
    let avail = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let w = if cfg.eval.workers == 0 {
        avail
    } else {
        cfg.eval.workers
    };
    w.clamp(1, jobs.max(1))
}

/// Preference sweep with frozen policy; cases are split across workers and
/// merged back in case order.
pub fn evaluate(
    cfg: &RunConfig,
    scenario: Scenario,
    method: Method,
    agent: Option<&Td3Agent>,
) -> Result<Vec<CaseResult>> {
    cfg.validate()?;
    if let Some(a) = agent {
        if a.state_dim() != scenario.state_dim() {
            return Err(Error::Dimension {
                expected: scenario.state_dim(),
                got: a.state_dim(),
            });
        }
    }
    let cases = sweep_cases(cfg);
    let profiles = ProfileSource::new(cfg)?;
    let control = if scenario.has_cav() {
        control_for(method, cfg)?
    } else {
        CavControl::Raw
    };
    let workers = worker_count(cfg, cases.len());
    let chunk = cases.len().div_ceil(workers);
    let run_chunk = |start: usize, mut control: CavControl| -> Result<Vec<CaseResult>> {
        let mut out = Vec::new();
        for (k, &(t, seed)) in cases.iter().enumerate().skip(start).take(chunk) {
            let profile = profiles.get(cfg.seed, "eval-profile", k as u64);
            let (r, c) = evaluate_case(cfg, scenario, method, agent, control, profile, t, seed)?;
            control = c;
            out.push(CaseResult {
                case: k,
                method,
                scenario,
                t_true: t,
                seed,
                t_hat: r.t_hat,
                cav_kj_per_km: r.cav_energy.and_then(|e| e.kj_per_km).unwrap_or(f64::NAN),
                hdv_kj_per_km: r.hdv_energy.kj_per_km.unwrap_or(f64::NAN),
                holistic_kj_per_km: r.holistic_kj_per_km.unwrap_or(f64::NAN),
                violations: r.violations,
                collision: r.collision,
                qp_failures: r.qp_failures,
                min_tube_margin: r.min_tube_margin(),
                ret: r.total_reward(),
            });
        }
        Ok(out)
    };
    if workers == 1 {
        return run_chunk(0, control);
    }
    let results: Vec<Result<Vec<CaseResult>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let c = control.clone();
                let f = &run_chunk;
                s.spawn(move || f(w * chunk, c))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::domain("evaluation worker panicked")))
            })
            .collect()
    });
    let mut all = Vec::with_capacity(cases.len());
    for r in results {
        all.extend(r?);
    }
    Ok(all)
}

/// Least/most/mean of a metric over a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub least: f64,
    pub most: f64,
    pub mean: f64,
    pub count: usize,
}

impl Spread {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        let least = v.iter().copied().fold(f64::INFINITY, f64::min);
        let most = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = (v.iter().sum::<f64>() / v.len() as f64).clamp(least, most);
        Some(Self {
            least,
            most,
            mean,
            count: v.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub scenario: Scenario,
    pub holistic: Option<Spread>,
    pub hdv: Option<Spread>,
    pub cav: Option<Spread>,
    pub collisions: usize,
    pub violations: usize,
    pub qp_failures: usize,
}

pub fn summarize(cases: &[CaseResult]) -> Option<MethodSummary> {
    let first = cases.first()?;
    Some(MethodSummary {
        method: first.method,
        scenario: first.scenario,
        holistic: Spread::of(cases.iter().map(|c| c.holistic_kj_per_km)),
        hdv: Spread::of(cases.iter().map(|c| c.hdv_kj_per_km)),
        cav: Spread::of(cases.iter().map(|c| c.cav_kj_per_km)),
        collisions: cases.iter().filter(|c| c.collision).count(),
        violations: cases.iter().map(|c| c.violations).sum(),
        qp_failures: cases.iter().map(|c| c.qp_failures).sum(),
    })
}

/// Mean ratio of paired holistic energies `a/b` (same cases, same order).
pub fn paired_ratio(a: &[CaseResult], b: &[CaseResult]) -> Option<f64> {
    if a.len() != b.len() || a.is_empty() {
        return None;
    }
    let mean =
        |c: &[CaseResult]| c.iter().map(|x| x.holistic_kj_per_km).sum::<f64>() / c.len() as f64;
    let paired = a
        .iter()
        .zip(b)
        .all(|(x, y)| x.case == y.case && x.seed == y.seed);
    paired.then(|| mean(a) / mean(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub methods: Vec<MethodSummary>,
    /// HDV energy spread per scenario (A, B, C) for the CAV-insertion comparison.
    pub scenarios: Vec<MethodSummary>,
    /// `1 − mean(safe-rl)/mean(rmpc-only)` on paired cases, if both ran.
    pub safe_rl_improvement: Option<f64>,
}

/// Writes a CSV whose first line echoes the resolved configuration.
pub fn write_csv<T: Serialize>(path: &Path, cfg: &RunConfig, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    writeln!(f, "# config = {}", cfg.echo())?;
    let mut w = csv::Writer::from_writer(f);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV written by [`write_csv`].
pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let mut out = Vec::new();
    for r in rdr.deserialize() {
        out.push(r?);
    }
    Ok(out)
}

/// Writes pretty JSON wrapping `body` together with the configuration echo.
pub fn write_json<T: Serialize>(path: &Path, cfg: &RunConfig, body: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    #[derive(Serialize)]
    struct Wrapped<'a, T> {
        config: &'a RunConfig,
        seed: u64,
        body: &'a T,
    }
    fs::write(
        path,
        serde_json::to_string_pretty(&Wrapped {
            config: cfg,
            seed: cfg.seed,
            body,
        })?,
    )?;
    Ok(())
}

fn output_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn checkpoint_path(dir: &Path, scenario: Scenario, method: Method) -> PathBuf {
    dir.join(format!("checkpoint_{scenario}_{method}.json"))
}

pub fn train_log_path(dir: &Path, scenario: Scenario, method: Method) -> PathBuf {
    dir.join(format!("train_{scenario}_{method}.csv"))
}

pub fn cases_path(dir: &Path, scenario: Scenario, method: Method) -> PathBuf {
    dir.join(format!("eval_{scenario}_{method}_cases.csv"))
}

pub fn summary_path(dir: &Path, scenario: Scenario, method: Method) -> PathBuf {
    dir.join(format!("eval_{scenario}_{method}_summary.csv"))
}

pub fn trace_path(dir: &Path, scenario: Scenario, method: Method) -> PathBuf {
    dir.join(format!("trace_{scenario}_{method}.json"))
}

/// `train` command: log CSV, final and periodic checkpoints.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let dir = output_dir(cfg);
    fs::create_dir_all(&dir)?;
    let (scenario, method) = (cfg.scenario, cfg.method);
    let every = cfg.checkpoint_every;
    let outcome = train(cfg, |row, agent| {
        if every > 0 && (row.episode + 1) % every == 0 {
            let p = dir.join(format!(
                "checkpoint_{scenario}_{method}_ep{}.json",
                row.episode + 1
            ));
            agent.save_checkpoint(&p, scenario.tag(), cfg.seed)?;
        }
        Ok(true)
    })?;
    write_csv(&train_log_path(&dir, scenario, method), cfg, &outcome.log)?;
    outcome.agent.save_checkpoint(
        &checkpoint_path(&dir, scenario, method),
        scenario.tag(),
        cfg.seed,
    )?;
    Ok(outcome)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SummaryRow {
    method: Method,
    scenario: Scenario,
    metric: String,
    least: f64,
    most: f64,
    mean: f64,
    count: usize,
    collisions: usize,
    violations: usize,
    qp_failures: usize,
}

fn summary_rows(s: &MethodSummary) -> Vec<SummaryRow> {
    [
        ("holistic_kj_per_km", s.holistic),
        ("cav_kj_per_km", s.cav),
        ("hdv_kj_per_km", s.hdv),
    ]
    .into_iter()
    .filter_map(|(name, sp)| {
        sp.map(|sp| SummaryRow {
            method: s.method,
            scenario: s.scenario,
            metric: name.into(),
            least: sp.least,
            most: sp.most,
            mean: sp.mean,
            count: sp.count,
            collisions: s.collisions,
            violations: s.violations,
            qp_failures: s.qp_failures,
        })
    })
    .collect()
}

/// `evaluate` command: sweep CSVs plus one traced episode at the representative headway.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
) -> Result<(Vec<CaseResult>, MethodSummary)> {
    let dir = output_dir(cfg);
    let (scenario, method) = (cfg.scenario, cfg.method);
    let agent = match (method.uses_agent() && scenario.has_cav(), checkpoint) {
        (true, Some(p)) => {
            Some(load_checkpoint_for(p, scenario.tag(), scenario.state_dim())?.agent)
        }
        (true, None) => {
            let p = checkpoint_path(&dir, scenario, method);
            Some(load_checkpoint_for(&p, scenario.tag(), scenario.state_dim())?.agent)
        }
        (false, _) => None,
    };
    let cases = evaluate(cfg, scenario, method, agent.as_ref())?;
    let summary = summarize(&cases).ok_or_else(|| Error::domain("empty evaluation sweep"))?;
    write_csv(&cases_path(&dir, scenario, method), cfg, &cases)?;
    write_csv(
        &summary_path(&dir, scenario, method),
        cfg,
        &summary_rows(&summary),
    )?;
    let trace = representative_trace(cfg, scenario, method, agent.as_ref())?;
    write_json(&trace_path(&dir, scenario, method), cfg, &trace)?;
    Ok((cases, summary))
}

/// Test-start episode at the representative headway on evaluation profile 0.
pub fn representative_trace(
    cfg: &RunConfig,
    scenario: Scenario,
    method: Method,
    agent: Option<&Td3Agent>,
) -> Result<EpisodeResult> {
    let profiles = ProfileSource::new(cfg)?;
    let control = if scenario.has_cav() {
        control_for(method, cfg)?
    } else {
        CavControl::Raw
    };
    let seed = episode_seed(cfg.seed, "eval-episode", 0);
    let profile = profiles.get(cfg.seed, "eval-profile", 0);
    Ok(evaluate_case(
        cfg,
        scenario,
        method,
        agent,
        control,
        profile,
        cfg.eval.representative_t,
        seed,
    )?
    .0)
}

/// `compare` command: every method on the same sweep plus the scenario A/B/C HDV comparison.
///
/// Checkpoints are looked up in the output directory as written by `train`;
/// methods whose checkpoint is missing are skipped with a warning.
pub fn cmd_compare(cfg: &RunConfig) -> Result<ComparisonReport> {
    let dir = output_dir(cfg);
    let load = |scenario: Scenario, method: Method| -> Result<Option<Td3Agent>> {
        let p = checkpoint_path(&dir, scenario, method);
        if !p.exists() {
            log::warn!(
                "{} missing; skipping {method} in scenario {scenario}",
                p.display()
            );
            return Ok(None);
        }
        Ok(Some(
            load_checkpoint_for(&p, scenario.tag(), scenario.state_dim())?.agent,
        ))
    };
    let mut methods = Vec::new();
    let mut swept: Vec<(Method, Vec<CaseResult>)> = Vec::new();
    for method in Method::ALL {
        let agent = if method.uses_agent() {
            match load(cfg.scenario, method)? {
                Some(a) => Some(a),
                None => continue,
            }
        } else {
            None
        };
        let cases = evaluate(cfg, cfg.scenario, method, agent.as_ref())?;
        write_csv(&cases_path(&dir, cfg.scenario, method), cfg, &cases)?;
        if let Some(s) = summarize(&cases) {
            methods.push(s);
        }
        swept.push((method, cases));
    }
    let find = |m: Method| {
        swept
            .iter()
            .find(|(x, _)| *x == m)
            .map(|(_, c)| c.as_slice())
    };
    let safe_rl_improvement = match (find(Method::SafeRl), find(Method::RmpcOnly)) {
        (Some(a), Some(b)) => paired_ratio(a, b).map(|r| 1.0 - r),
        _ => None,
    };
    let mut scenarios = Vec::new();
    for scenario in [Scenario::A, Scenario::B, Scenario::C] {
        let agent = if scenario.has_cav() {
            match load(scenario, Method::SafeRl)? {
                Some(a) => Some(a),
                None => continue,
            }
        } else {
            None
        };
        let cases = evaluate(cfg, scenario, Method::SafeRl, agent.as_ref())?;
        if let Some(s) = summarize(&cases) {
            scenarios.push(s);
        }
    }
    let report = ComparisonReport {
        methods,
        scenarios,
        safe_rl_improvement,
    };
    write_json(&dir.join("comparison.json"), cfg, &report)?;
    let mut rows: Vec<SummaryRow> = report.methods.iter().flat_map(summary_rows).collect();
    rows.extend(report.scenarios.iter().flat_map(summary_rows));
    write_csv(&dir.join("comparison.csv"), cfg, &rows)?;
    Ok(report)
}

/// Precomputed safety artifacts in plain numbers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MrpiReport {
    pub horizon: usize,
    pub k: [f64; 2],
    pub p: [[f64; 2]; 2],
    pub mrpi_terms: usize,
    pub z_vertices: Vec<[f64; 2]>,
    pub z_facets: Vec<[f64; 3]>,
    pub x_rows: Vec<[f64; 3]>,
    pub xbar_rows: Vec<[f64; 3]>,
    /// Tightening per state row, `offset(X) − offset(X̄)`.
    pub state_tightening: Vec<f64>,
    pub u: [f64; 2],
    pub ubar: [f64; 2],
    pub terminal_rows: Vec<[f64; 3]>,
    pub invariance_margin: f64,
    pub invariant: bool,
}

pub fn mrpi_report(cfg: &RunConfig) -> Result<MrpiReport> {
    let rc = safety_config(cfg, cfg.rmpc.rl)?;
    let inv = invariance_check(&rc.a_k(), &rc.z, &rc.w, 1e-9)?;
    let rows =
        |h: &crate::sets::HalfspaceSet| h.rows().map(|(r, o)| [r[0], r[1], o]).collect::<Vec<_>>();
    let x_rows = rows(&rc.x);
    let xbar_rows = rows(&rc.xbar);
    let state_tightening = x_rows
        .iter()
        .zip(&xbar_rows)
        .map(|(a, b)| a[2] - b[2])
        .collect();
    Ok(MrpiReport {
        horizon: rc.horizon,
        k: [rc.k[0], rc.k[1]],
        p: [
            [rc.pw[(0, 0)], rc.pw[(0, 1)]],
            [rc.pw[(1, 0)], rc.pw[(1, 1)]],
        ],
        mrpi_terms: rc.mrpi_terms,
        z_vertices: rc.z.vertices().iter().map(|v| [v[0], v[1]]).collect(),
        z_facets: rc
            .z
            .facets()
            .iter()
            .map(|(n, g)| [n[0], n[1], *g])
            .collect(),
        x_rows,
        xbar_rows,
        state_tightening,
        u: [rc.u.0, rc.u.1],
        ubar: [rc.ubar.0, rc.ubar.1],
        terminal_rows: rows(&rc.xf),
        invariance_margin: inv.worst_margin,
        invariant: inv.invariant,
    })
}

pub fn cmd_mrpi_report(cfg: &RunConfig) -> Result<MrpiReport> {
    let report = mrpi_report(cfg)?;
    write_json(&output_dir(cfg).join("mrpi_report.json"), cfg, &report)?;
    Ok(report)
}

/// One row of a calibration trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub t: f64,
    pub v_leader: f64,
    pub v_follower: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCase {
    pub name: String,
    pub t_hat: f64,
    pub samples: usize,
    pub skipped_rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub cases: Vec<CalibrationCase>,
    pub skipped_rows: usize,
    pub distribution: Option<PreferenceDistribution>,
}

/// Headway estimate from one trajectory.
pub fn calibrate_rows(rows: &[CalibrationRow], idm: &IdmParams, tau: f64) -> Result<f64> {
    let samples: Vec<BehaviorSample> = rows
        .iter()
        .map(|r| BehaviorSample {
            v_h: r.v_follower,
            v_c: r.v_leader,
            s_ch: r.gap,
        })
        .collect();
    fit_headway(&samples, idm, tau, 1e-6)
}

fn read_calibration_csv(path: &Path) -> Result<(Vec<CalibrationRow>, usize)> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .from_path(path)?;
    let mut rows = Vec::new();
    let mut skipped = 0;
    for r in rdr.deserialize::<CalibrationRow>() {
        match r {
            Ok(row)
                if [row.t, row.v_leader, row.v_follower, row.gap]
                    .iter()
                    .all(|v| v.is_finite())
                    && row.gap > 0.0 =>
            {
                rows.push(row)
            }
            _ => skipped += 1,
        }
    }
    Ok((rows, skipped))
}

/// Histogram of headway estimates on bins of width 0.05 s over [0.5, 3].
pub fn headway_histogram(estimates: &[f64]) -> Option<PreferenceDistribution> {
    const WIDTH: f64 = 0.05;
    let bins = ((T_MAX - T_MIN) / WIDTH).round() as usize;
    let mut counts = vec![0usize; bins];
    for &t in estimates {
        let i = (((t - T_MIN) / WIDTH).floor().max(0.0) as usize).min(bins - 1);
        counts[i] += 1;
    }
    let (points, weights): (Vec<f64>, Vec<f64>) = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(i, &c)| (T_MIN + (i as f64 + 0.5) * WIDTH, c as f64))
        .unzip();
    PreferenceDistribution::new(points, weights).ok()
}

/// `calibrate` command: fits `T` per trajectory file and writes the preference distribution.
pub fn cmd_calibrate(cfg: &RunConfig, inputs: &[PathBuf], out: &Path) -> Result<CalibrationReport> {
    let mut cases = Vec::new();
    let mut skipped_rows = 0;
    for p in inputs {
        let (rows, skipped) = read_calibration_csv(p)?;
        skipped_rows += skipped;
        if skipped > 0 {
            log::warn!("{}: skipped {skipped} malformed rows", p.display());
        }
        match calibrate_rows(&rows, &cfg.env.idm, cfg.env.model.tau) {
            Ok(t_hat) => cases.push(CalibrationCase {
                name: p.display().to_string(),
                t_hat,
                samples: rows.len(),
                skipped_rows: skipped,
            }),
            Err(e) => log::warn!("{}: {e}", p.display()),
        }
    }
    let estimates: Vec<f64> = cases.iter().map(|c| c.t_hat).collect();
    let distribution = headway_histogram(&estimates);
    let report = CalibrationReport {
        cases,
        skipped_rows,
        distribution,
    };
    let Some(dist) = &report.distribution else {
        return Err(Error::EstimationFailed(
            "no trajectory produced a headway estimate".into(),
        ));
    };
    write_json(out, cfg, dist)?;
    let case_csv = out.with_extension("cases.csv");
    write_csv(&case_csv, cfg, &report.cases)?;
    Ok(report)
}

/// Leader/follower trajectory with a known headway, for calibration checks.
pub fn synthetic_calibration_case<R: Rng + ?Sized>(
    t_true: f64,
    steps: usize,
    idm: &IdmParams,
    tau: f64,
    noise_sigma: f64,
    noise_bound: f64,
    rng: &mut R,
) -> Result<Vec<CalibrationRow>> {
    let leader = PvProfile::synthetic(rng, steps + 1, tau, 10.0, 3.0, PROFILE_MIN_SPEED);
    let p = idm.with_headway(t_true);
    let v0 = 9.0;
    let mut follower = crate::model::VehicleState::new(0.0, v0);
    let mut lead = crate::model::VehicleState::new(
        (p.s0 + t_true * v0) / (1.0 - (v0 / p.v_d).powf(p.delta0)).sqrt(),
        leader.v[0],
    );
    let mut rows = Vec::with_capacity(steps);
    for k in 0..steps {
        let gap = lead.s - follower.s;
        rows.push(CalibrationRow {
            t: k as f64 * tau,
            v_leader: lead.v,
            v_follower: follower.v,
            gap,
        });
        let a = crate::driver::idm_accel(&p, follower.v, follower.v - lead.v, gap)?;
        let noise = crate::model::truncated_normal(rng, noise_sigma, noise_bound);
        follower = crate::driver::step_hdv(
            follower,
            a,
            noise,
            &crate::model::ModelParams {
                tau,
                ..Default::default()
            },
        )?;
        let a_lead = (leader.v[k + 1] - lead.v) / tau;
        lead = crate::model::step_vehicle(
            lead,
            a_lead,
            &crate::model::ModelParams {
                tau,
                ..Default::default()
            },
        )?;
    }
    Ok(rows)
}

pub fn write_calibration_csv(path: &Path, rows: &[CalibrationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct VelocityRow {
    step: usize,
    v_p: f64,
    v_c: f64,
    v_h: f64,
    method: Method,
}

#[derive(Debug, Clone, Serialize)]
struct InputRow {
    step: usize,
    u_l: f64,
    u_s: f64,
    method: Method,
}

#[derive(Debug, Clone, Serialize)]
struct TubeRow {
    step: usize,
    x1: f64,
    x2: f64,
    xbar1: f64,
    xbar2: f64,
    x1_min: f64,
    x2_min: f64,
    x2_max: f64,
    method: Method,
}

#[derive(Debug, Clone, Serialize)]
struct RewardRow {
    episode: usize,
    #[serde(rename = "return")]
    ret: f64,
    collisions: usize,
    method: Method,
}

#[derive(Debug, Clone, Serialize)]
struct EnergyHistRow {
    method: Method,
    bin_lo: f64,
    bin_hi: f64,
    count: usize,
}

#[derive(Debug, Clone, Deserialize)]
struct TraceFile {
    body: EpisodeTrace,
}

#[derive(Debug, Clone, Deserialize)]
struct EpisodeTrace {
    v_p: Vec<f64>,
    v_c: Vec<f64>,
    v_h: Vec<f64>,
    a_c: Vec<f64>,
    u_l: Vec<f64>,
    x: Vec<[f64; 2]>,
    xbar0: Vec<Option<[f64; 2]>>,
}

/// Paths of the files written by `plot-data`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotFiles {
    pub velocity: PathBuf,
    pub inputs: PathBuf,
    pub tube: PathBuf,
    pub rewards: PathBuf,
    pub energy_hist: PathBuf,
}

/// `plot-data` command: tidy CSVs from the artifacts of `train` and `evaluate`.
pub fn cmd_plot_data(cfg: &RunConfig) -> Result<PlotFiles> {
    let dir = output_dir(cfg);
    let scenario = cfg.scenario;
    let traces: Vec<(Method, PathBuf)> = Method::ALL
        .iter()
        .map(|&m| (m, trace_path(&dir, scenario, m)))
        .collect();
    let logs: Vec<(Method, PathBuf)> = [Method::RawRl, Method::SafeRl]
        .iter()
        .map(|&m| (m, train_log_path(&dir, scenario, m)))
        .collect();
    let cases: Vec<(Method, PathBuf)> = Method::ALL
        .iter()
        .map(|&m| (m, cases_path(&dir, scenario, m)))
        .collect();
    let present = |v: &[(Method, PathBuf)]| {
        v.iter()
            .filter(|(_, p)| p.exists())
            .cloned()
            .collect::<Vec<_>>()
    };
    let (tr, lg, cs) = (present(&traces), present(&logs), present(&cases));
    if tr.is_empty() || lg.is_empty() || cs.is_empty() {
        let missing: Vec<String> = traces
            .iter()
            .chain(&logs)
            .chain(&cases)
            .filter(|(_, p)| !p.exists())
            .map(|(_, p)| p.display().to_string())
            .collect();
        return Err(Error::domain(format!(
            "missing plot inputs: {}",
            missing.join(", ")
        )));
    }

    let mut velocity = Vec::new();
    let mut inputs = Vec::new();
    let mut tube = Vec::new();
    let cs_spec = cfg.env.constraints;
    for (method, path) in &tr {
        let t: TraceFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        let e = t.body;
        for k in 0..e.v_p.len() {
            velocity.push(VelocityRow {
                step: k,
                v_p: e.v_p[k],
                v_c: e.v_c[k],
                v_h: e.v_h[k],
                method: *method,
            });
            inputs.push(InputRow {
                step: k,
                u_l: e.u_l[k],
                u_s: e.a_c[k],
                method: *method,
            });
            let xb = e.xbar0[k].unwrap_or([f64::NAN, f64::NAN]);
            tube.push(TubeRow {
                step: k,
                x1: e.x[k][0],
                x2: e.x[k][1],
                xbar1: xb[0],
                xbar2: xb[1],
                x1_min: -cs_spec.x1_min,
                x2_min: -cs_spec.x2_min,
                x2_max: cs_spec.x2_max,
                method: *method,
            });
        }
    }
    let mut rewards = Vec::new();
    for (method, path) in &lg {
        for r in read_csv::<TrainLogRow>(path)? {
            rewards.push(RewardRow {
                episode: r.episode,
                ret: r.ret,
                collisions: r.collisions,
                method: *method,
            });
        }
    }
    let mut hist = Vec::new();
    let mut all: Vec<(Method, Vec<f64>)> = Vec::new();
    for (method, path) in &cs {
        let rows = read_csv::<CaseResult>(path)?;
        all.push((
            *method,
            rows.iter()
                .map(|r| r.holistic_kj_per_km)
                .filter(|v| v.is_finite())
                .collect(),
        ));
    }
    let lo = all
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(f64::INFINITY, f64::min);
    let hi = all
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    if lo.is_finite() && hi.is_finite() {
        let bins = 20usize;
        let width = ((hi - lo) / bins as f64).max(1e-9);
        for (method, v) in &all {
            let mut counts = vec![0usize; bins];
            for x in v {
                counts[(((x - lo) / width) as usize).min(bins - 1)] += 1;
            }
            for (i, c) in counts.into_iter().enumerate() {
                let a = lo + i as f64 * width;
                hist.push(EnergyHistRow {
                    method: *method,
                    bin_lo: a,
                    bin_hi: a + width,
                    count: c,
                });
            }
        }
    }
    let files = PlotFiles {
        velocity: dir.join(format!("plot_velocity_{scenario}.csv")),
        inputs: dir.join(format!("plot_inputs_{scenario}.csv")),
        tube: dir.join(format!("plot_tube_{scenario}.csv")),
        rewards: dir.join(format!("plot_rewards_{scenario}.csv")),
        energy_hist: dir.join(format!("plot_energy_hist_{scenario}.csv")),
    };
    write_csv(&files.velocity, cfg, &velocity)?;
    write_csv(&files.inputs, cfg, &inputs)?;
    write_csv(&files.tube, cfg, &tube)?;
    write_csv(&files.rewards, cfg, &rewards)?;
    write_csv(&files.energy_hist, cfg, &hist)?;
    Ok(files)
}
