//! Human driver: IDM car-following law, online headway estimation and the
//! population distribution of driving preferences.

use std::collections::VecDeque;
use std::path::Path;

use log::{debug, warn};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::model::{ModelParams, VehicleState};
use crate::numerics::fit_scalar_nls;

pub const T_MIN: f64 = 0.5;
pub const T_MAX: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdmParams {
    pub a0: f64,
    pub delta0: f64,
    pub v_d: f64,
    pub s0: f64,
    /// Comfortable deceleration, as a positive magnitude.
    pub b0_mag: f64,
    #[serde(rename = "T")]
    pub t: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            a0: 4.0,
            delta0: 4.0,
            v_d: 25.0,
            s0: 2.0,
            b0_mag: 5.0,
            t: 1.0,
        }
    }
}

impl IdmParams {
    pub fn with_headway(self, t: f64) -> Self {
        Self { t, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_finite(
            "IDM parameters",
            &[self.a0, self.delta0, self.v_d, self.s0, self.b0_mag, self.t],
        )?;
        if self.a0 <= 0.0
            || self.v_d <= 0.0
            || self.s0 <= 0.0
            || self.b0_mag <= 0.0
            || self.t <= 0.0
        {
            return Err(Error::domain(format!(
                "IDM parameters must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// IDM acceleration for speed `v`, approach rate `dv = v − v_lead` and gap `s`.
pub fn idm_accel(p: &IdmParams, v: f64, dv: f64, s: f64) -> Result<f64> {
    ensure_finite("idm_accel", &[v, dv, s])?;
    if s <= 0.0 {
        return Err(Error::domain(format!("non-positive gap {s}")));
    }
    let s_star = p.s0 + (p.t * v + v * dv / (2.0 * (p.a0 * p.b0_mag).sqrt())).max(0.0);
    Ok(p.a0 * (1.0 - (v / p.v_d).powf(p.delta0) - (s_star / s).powi(2)))
}

/// Vehicle step that stops at zero speed instead of reversing. The flag reports a clamp.
pub fn advance_clamped(
    x: VehicleState,
    a: f64,
    params: &ModelParams,
) -> Result<(VehicleState, bool)> {
    ensure_finite("advance_clamped", &[x.s, x.v, a])?;
    let tau = params.tau;
    let v_next = x.v + tau * a;
    if v_next >= 0.0 {
        return Ok((
            VehicleState {
                s: x.s + tau * x.v + 0.5 * tau * tau * a,
                v: v_next,
            },
            false,
        ));
    }
    // decelerate to rest within the step
    let travelled = if a < 0.0 {
        (x.v.max(0.0)).powi(2) / (-2.0 * a)
    } else {
        0.0
    };
    Ok((
        VehicleState {
            s: x.s + travelled,
            v: 0.0,
        },
        true,
    ))
}

/// HDV update under multiplicative acceleration noise `(1 + Δa_h)·a_h`.
pub fn step_hdv(
    x: VehicleState,
    a_h: f64,
    delta_a_h: f64,
    params: &ModelParams,
) -> Result<VehicleState> {
    let (next, clamped) = advance_clamped(x, (1.0 + delta_a_h) * a_h, params)?;
    if clamped {
        debug!("HDV speed clamped at zero (v={}, a_h={a_h})", x.v);
    }
    Ok(next)
}

/// One observation of the following car-following pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSample {
    pub v_h: f64,
    pub v_c: f64,
    pub s_ch: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub window: usize,
    pub refit_every: usize,
    pub prior: f64,
    pub tol: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            window: 50,
            refit_every: 10,
            prior: 1.0,
            tol: 1e-4,
        }
    }
}

/// Online estimate of the follower's time headway.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorEstimate {
    pub t_hat: f64,
    pub sample_count: usize,
    /// Set when the last refit failed and the previous value was kept.
    pub fit_failed: bool,
    window: VecDeque<BehaviorSample>,
    config: EstimatorConfig,
}

impl BehaviorEstimate {
    pub fn new(config: EstimatorConfig) -> Self {
        Self {
            t_hat: config.prior.clamp(T_MIN, T_MAX),
            sample_count: 0,
            fit_failed: false,
            window: VecDeque::with_capacity(config.window + 1),
            config,
        }
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn window(&self) -> impl Iterator<Item = &BehaviorSample> {
        self.window.iter()
    }

    /// Appends a sample and refits `T̂` when the window is full and a refit is due.
    pub fn update(&mut self, sample: BehaviorSample, defaults: &IdmParams, params: &ModelParams) {
        self.window.push_back(sample);
        if self.window.len() > self.config.window {
            self.window.pop_front();
        }
        self.sample_count += 1;
        let full = self.window.len() >= self.config.window.max(2);
        let due =
            (self.sample_count - self.window.len()).is_multiple_of(self.config.refit_every.max(1));
        if !(full && due) {
            return;
        }
        match fit_headway(&self.window, defaults, params.tau, self.config.tol) {
            Ok(t) => {
                self.t_hat = t;
                self.fit_failed = false;
            }
            Err(e) => {
                warn!("headway refit failed, keeping T_hat={}: {e}", self.t_hat);
                self.fit_failed = true;
            }
        }
    }
}

pub fn update_estimate(
    est: &mut BehaviorEstimate,
    sample: BehaviorSample,
    defaults: &IdmParams,
    params: &ModelParams,
) {
    est.update(sample, defaults, params)
}

/// Least-squares headway over consecutive sample pairs, matching forward-difference accelerations.
pub fn fit_headway<'a, I>(window: I, defaults: &IdmParams, tau: f64, tol: f64) -> Result<f64>
where
    I: IntoIterator<Item = &'a BehaviorSample>,
{
    let samples: Vec<&BehaviorSample> = window.into_iter().collect();
    if samples.len() < 2 {
        return Err(Error::EstimationFailed("fewer than two samples".into()));
    }
    let obs: Vec<(f64, &BehaviorSample)> = samples
        .windows(2)
        .map(|w| ((w[1].v_h - w[0].v_h) / tau, w[0]))
        .collect();
    let fit = fit_scalar_nls(
        |t| {
            let p = defaults.with_headway(t);
            obs.iter()
                .map(
                    |(a_obs, s)| match idm_accel(&p, s.v_h, s.v_h - s.v_c, s.s_ch) {
                        Ok(a) => a_obs - a,
                        Err(_) => f64::NAN,
                    },
                )
                .collect()
        },
        (T_MIN, T_MAX),
        tol,
    )?;
    Ok(fit.argmin)
}

/// IDM prediction of the follower's acceleration using the current headway estimate.
pub fn estimated_hdv_accel(
    est: &BehaviorEstimate,
    v_h: f64,
    s_ch: f64,
    v_c: f64,
    defaults: &IdmParams,
) -> Result<f64> {
    idm_accel(&defaults.with_headway(est.t_hat), v_h, v_h - v_c, s_ch)
}

/// Discrete distribution over time headways.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDistribution {
    points: Vec<f64>,
    weights: Vec<f64>,
    index: WeightedIndex<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct PreferenceEntry {
    #[serde(rename = "T")]
    t: f64,
    weight: f64,
}

impl PreferenceDistribution {
    pub fn new(points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(Error::domain(
                "preference distribution needs matching, non-empty points and weights",
            ));
        }
        ensure_finite("preference points", &points)?;
        if points.iter().any(|&t| t <= 0.0) {
            return Err(Error::domain("time headways must be positive"));
        }
        let index = WeightedIndex::new(&weights)
            .map_err(|e| Error::domain(format!("preference weights: {e}")))?;
        Ok(Self {
            points,
            weights,
            index,
        })
    }

    /// `n` equally weighted points spaced evenly over `[lo, hi]`.
    pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n == 0 || !(lo <= hi) {
            return Err(Error::domain(format!(
                "invalid grid [{lo}, {hi}] with {n} points"
            )));
        }
        let points = if n == 1 {
            vec![lo]
        } else {
            (0..n)
                .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                .collect()
        };
        Self::new(points, vec![1.0; n])
    }

    pub fn single(t: f64) -> Result<Self> {
        Self::new(vec![t], vec![1.0])
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Accepts a bare `[{T, weight}]` array or an object carrying it under `body`.
    pub fn from_json_str(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Doc {
            Bare(Vec<PreferenceEntry>),
            Wrapped { body: Vec<PreferenceEntry> },
        }
        let entries = match serde_json::from_str(s)? {
            Doc::Bare(e) | Doc::Wrapped { body: e } => e,
        };
        Self::new(
            entries.iter().map(|e| e.t).collect(),
            entries.iter().map(|e| e.weight).collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.entries())?)
    }

    fn entries(&self) -> Vec<PreferenceEntry> {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(&t, &weight)| PreferenceEntry { t, weight })
            .collect()
    }
}

impl Serialize for PreferenceDistribution {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.entries().serialize(s)
    }
}

impl Default for PreferenceDistribution {
    fn default() -> Self {
        Self::uniform_grid(T_MIN, T_MAX, 100).expect("default grid is valid")
    }
}

pub fn sample_preference<R: Rng + ?Sized>(dist: &PreferenceDistribution, rng: &mut R) -> f64 {
    dist.points[dist.index.sample(rng)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::truncated_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn idm_examples() {
        let p = IdmParams::default();
        assert!(close(idm_accel(&p, 0.0, 0.0, 2.0).unwrap(), 0.0, 1e-12));
        assert!(close(
            idm_accel(&p, 25.0, 0.0, 270.0).unwrap(),
            -0.04,
            1e-12
        ));
        assert!(close(idm_accel(&p, 10.0, 0.0, 1e12).unwrap(), 3.8976, 1e-9));
        assert!(idm_accel(&p, 10.0, 0.0, 0.0).is_err());
        assert!(idm_accel(&p, 10.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn idm_bounded_and_decreasing_in_speed() {
        let p = IdmParams::default().with_headway(1.5);
        for s in [1.0, 5.0, 20.0, 80.0] {
            for dv in [-3.0, 0.0, 3.0] {
                let mut prev = f64::INFINITY;
                for i in 0..=300 {
                    let v = i as f64 * 0.1;
                    let a = idm_accel(&p, v, dv, s).unwrap();
                    assert!(a <= p.a0);
                    // the max(0, ·) in s* can hold s* flat for negative dv, so allow equality
                    assert!(a <= prev + 1e-12, "s={s} dv={dv} v={v}");
                    if dv >= 0.0 && i > 0 {
                        assert!(a < prev);
                    }
                    prev = a;
                }
            }
        }
    }

    #[test]
    fn hdv_step_examples() {
        let m = ModelParams::default();
        let x = VehicleState::new(3.0, 8.0);
        let plain = crate::model::step_vehicle(x, 1.3, &m).unwrap();
        assert_eq!(step_hdv(x, 1.3, 0.0, &m).unwrap(), plain);
        let noisy = step_hdv(x, 2.0, 0.05, &m).unwrap();
        assert!(close(noisy.v, 8.0 + 0.5 * 2.1, 1e-12));
        let (stopped, clamped) = advance_clamped(VehicleState::new(0.0, 0.1), -3.0, &m).unwrap();
        assert!(clamped);
        assert_eq!(stopped.v, 0.0);
        assert!(stopped.s >= 0.0 && stopped.s < 0.01);
    }

    #[test]
    fn estimated_accel_examples() {
        let d = IdmParams::default();
        let est = BehaviorEstimate::new(EstimatorConfig::default());
        assert_eq!(est.t_hat, 1.0);
        assert!(close(
            estimated_hdv_accel(&est, 10.0, 50.0, 10.0, &d).unwrap(),
            3.6672,
            1e-9
        ));
        assert!(close(
            estimated_hdv_accel(&est, 0.0, 2.0, 0.0, &d).unwrap(),
            0.0,
            1e-12
        ));
    }

    /// HDV trailing a leader with oscillating speed; returns the observed samples.
    fn follow_trace(
        t_true: f64,
        steps: usize,
        noise: Option<&mut ChaCha8Rng>,
    ) -> Vec<BehaviorSample> {
        let m = ModelParams::default();
        let p = IdmParams::default().with_headway(t_true);
        let mut lead = VehicleState::new(20.0 + 8.0 * t_true, 8.5);
        let mut hdv = VehicleState::new(0.0, 8.0);
        let mut out = Vec::with_capacity(steps);
        let mut rng = noise;
        for k in 0..steps {
            let s = lead.s - hdv.s;
            out.push(BehaviorSample {
                v_h: hdv.v,
                v_c: lead.v,
                s_ch: s,
            });
            let a_h = idm_accel(&p, hdv.v, hdv.v - lead.v, s).unwrap();
            let d = rng
                .as_deref_mut()
                .map_or(0.0, |r| truncated_normal(r, 0.1, 0.05));
            hdv = step_hdv(hdv, a_h, d, &m).unwrap();
            let a_c = 0.8 * (k as f64 * 0.2).sin();
            lead = advance_clamped(lead, a_c, &m).unwrap().0;
        }
        out
    }

    fn estimate(samples: &[BehaviorSample]) -> BehaviorEstimate {
        let m = ModelParams::default();
        let mut est = BehaviorEstimate::new(EstimatorConfig::default());
        for s in samples {
            est.update(*s, &IdmParams::default(), &m);
        }
        est
    }

    #[test]
    fn prior_holds_until_window_fills() {
        let samples = follow_trace(2.0, 49, None);
        let est = estimate(&samples);
        assert_eq!(est.t_hat, 1.0);
        assert_eq!(est.sample_count, 49);
    }

    #[test]
    fn noiseless_recovery() {
        let est = estimate(&follow_trace(1.2, 50, None));
        assert!(close(est.t_hat, 1.2, 0.01), "{}", est.t_hat);
        for i in 0..20 {
            let t = T_MIN + (T_MAX - T_MIN) * i as f64 / 19.0;
            let est = estimate(&follow_trace(t, 50, None));
            assert!(close(est.t_hat, t, 0.01), "T={t}: {}", est.t_hat);
        }
    }

    #[test]
    fn noisy_recovery_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let est = estimate(&follow_trace(1.2, 50, Some(&mut rng)));
        assert!(close(est.t_hat, 1.2, 0.2), "{}", est.t_hat);
        let mut within = 0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let est = estimate(&follow_trace(1.2, 50, Some(&mut rng)));
            if close(est.t_hat, 1.2, 0.2) {
                within += 1;
            }
        }
        assert!(within >= 90, "{within}/100 within band");
    }

    #[test]
    fn refit_cadence() {
        let samples = follow_trace(2.5, 75, None);
        let m = ModelParams::default();
        let mut est = BehaviorEstimate::new(EstimatorConfig::default());
        let mut changes = Vec::new();
        for (k, s) in samples.iter().enumerate() {
            let before = est.t_hat;
            est.update(*s, &IdmParams::default(), &m);
            if est.t_hat != before {
                changes.push(k + 1);
            }
        }
        assert_eq!(changes.first(), Some(&50));
        assert!(changes.iter().all(|k| (k - 50) % 10 == 0));
    }

    #[test]
    fn preference_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            sample_preference(&PreferenceDistribution::single(1.2).unwrap(), &mut rng),
            1.2
        );

        let d = PreferenceDistribution::default();
        assert_eq!(d.points().len(), 100);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..10_000 {
            let t = sample_preference(&d, &mut rng);
            assert!((T_MIN..=T_MAX).contains(&t));
            seen.insert(t.to_bits());
        }
        assert!(seen.len() >= 95);
    }

    #[test]
    fn weighted_file_frequencies() {
        let json =
            r#"[{"T": 0.8, "weight": 1.0}, {"T": 1.5, "weight": 3.0}, {"T": 2.4, "weight": 6.0}]"#;
        let d = PreferenceDistribution::from_json_str(json).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 20_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let t = sample_preference(&d, &mut rng);
            let i = d.points().iter().position(|&p| p == t).unwrap();
            counts[i] += 1;
        }
        for (i, w) in [0.1, 0.3, 0.6].iter().enumerate() {
            let sd = (n as f64 * w * (1.0 - w)).sqrt();
            assert!(
                (counts[i] as f64 - n as f64 * w).abs() <= 3.0 * sd,
                "{counts:?}"
            );
        }
        let round = PreferenceDistribution::from_json_str(&d.to_json_string().unwrap()).unwrap();
        assert_eq!(round, d);
        assert!(PreferenceDistribution::from_json_str(r#"[{"T": 1.0, "weight": -1.0}]"#).is_err());
    }
}
