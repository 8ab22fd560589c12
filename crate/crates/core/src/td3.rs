//! TD3 agent: dense networks with hand-written backpropagation, Adam,
//! replay buffer, twin-critic updates and JSON checkpoints.
//!
//! Batches are stored column-wise: a batch of `B` inputs of width `d` is a
//! `d × B` matrix.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    /// `scale · tanh(z)`.
    Tanh,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    w: DMatrix<f64>,
    b: DVector<f64>,
}

/// Fully connected network with ReLU hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    head: Head,
    scale: f64,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Layer inputs; `inputs[0]` is the network input.
    inputs: Vec<DMatrix<f64>>,
    /// Output-layer pre-activation.
    z_out: DMatrix<f64>,
    pub output: DMatrix<f64>,
}

/// Parameter gradients, laid out like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<Dense>,
}

impl Mlp {
    /// Uniform fan-in initialization `U(−1/√fan_in, 1/√fan_in)` for every layer.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        head: Head,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(sizes, head, scale)?;
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.w.ncols() as f64).sqrt();
            layer
                .w
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-bound..bound));
            layer
                .b
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-bound..bound));
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize], head: Head, scale: f64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::domain(format!("invalid layer sizes {sizes:?}")));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::domain(format!(
                "output scale must be positive, got {scale}"
            )));
        }
        let layers = sizes
            .windows(2)
            .map(|w| Dense {
                w: DMatrix::zeros(w[1], w[0]),
                b: DVector::zeros(w[1]),
            })
            .collect();
        Ok(Self {
            layers,
            head,
            scale,
        })
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].w.ncols()];
        s.extend(self.layers.iter().map(|l| l.w.nrows()));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.w.nrows()).unwrap_or(0)
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Flattened parameters: per layer, weights column-major then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::Dimension {
                expected: self.n_params(),
                got: p.len(),
            });
        }
        let mut i = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.as_mut_slice().copy_from_slice(&p[i..i + nw]);
            i += nw;
            let nb = l.b.len();
            l.b.as_mut_slice().copy_from_slice(&p[i..i + nb]);
            i += nb;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.nrows(),
            });
        }
        Ok(())
    }

    pub fn forward_trace(&self, x: &DMatrix<f64>) -> Result<Trace> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for l in &self.layers[..last] {
            let mut z = affine(l, &a);
            z.iter_mut().for_each(|v| *v = v.max(0.0));
            inputs.push(std::mem::replace(&mut a, z));
        }
        inputs.push(a);
        let z_out = affine(&self.layers[last], &inputs[last]);
        let output = match self.head {
            Head::Tanh => z_out.map(|v| self.scale * v.tanh()),
            Head::Linear => z_out.clone(),
        };
        Ok(Trace {
            inputs,
            z_out,
            output,
        })
    }

    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward_trace(x)?.output)
    }

    /// Scalar output for a single input vector.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        ensure_finite("network input", x)?;
        let out = self.forward_batch(&DMatrix::from_column_slice(x.len(), 1, x))?;
        Ok(out[(0, 0)])
    }

    /// Backpropagates `d_out = ∂L/∂output`; returns parameter and input gradients.
    pub fn backward(&self, trace: &Trace, d_out: &DMatrix<f64>) -> (Gradients, DMatrix<f64>) {
        self.backprop(trace, d_out, true)
    }

    /// Gradient with respect to the network input only.
    pub fn input_gradient(&self, trace: &Trace, d_out: &DMatrix<f64>) -> DMatrix<f64> {
        self.backprop(trace, d_out, false).1
    }

    fn backprop(
        &self,
        trace: &Trace,
        d_out: &DMatrix<f64>,
        with_params: bool,
    ) -> (Gradients, DMatrix<f64>) {
        let mut delta = match self.head {
            Head::Tanh => d_out.zip_map(&trace.z_out, |g, z| {
                let t = z.tanh();
                g * self.scale * (1.0 - t * t)
            }),
            Head::Linear => d_out.clone(),
        };
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        for (idx, l) in self.layers.iter().enumerate().rev() {
            let a_in = &trace.inputs[idx];
            if with_params {
                let mut dw = DMatrix::zeros(l.w.nrows(), l.w.ncols());
                gemm(&delta, false, a_in, true, 0.0, &mut dw);
                grads.push(Dense {
                    w: dw,
                    b: delta.column_sum(),
                });
            }
            let mut d_in = DMatrix::zeros(l.w.ncols(), delta.ncols());
            gemm(&l.w, true, &delta, false, 0.0, &mut d_in);
            if idx > 0 {
                // a_in is a ReLU output: zero entries had non-positive pre-activation
                d_in.zip_apply(a_in, |g, a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            delta = d_in;
        }
        grads.reverse();
        (Gradients { layers: grads }, delta)
    }
}

fn affine(l: &Dense, a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(l.w.nrows(), a.ncols());
    for mut col in z.column_iter_mut() {
        col.copy_from(&l.b);
    }
    gemm(&l.w, false, a, false, 1.0, &mut z);
    z
}

/// `c ← op(a)·op(b) + beta·c` for column-major matrices, transposes taken by stride.
fn gemm(a: &DMatrix<f64>, ta: bool, b: &DMatrix<f64>, tb: bool, beta: f64, c: &mut DMatrix<f64>) {
    let (m, k) = if ta {
        (a.ncols(), a.nrows())
    } else {
        (a.nrows(), a.ncols())
    };
    let (kb, n) = if tb {
        (b.ncols(), b.nrows())
    } else {
        (b.nrows(), b.ncols())
    };
    assert!(
        k == kb && c.nrows() == m && c.ncols() == n,
        "gemm dimension mismatch"
    );
    let strides = |x: &DMatrix<f64>, t: bool| {
        let (rs, cs) = (1isize, x.nrows() as isize);
        if t {
            (cs, rs)
        } else {
            (rs, cs)
        }
    };
    let (rsa, csa) = strides(a, ta);
    let (rsb, csb) = strides(b, tb);
    let rsc = 1isize;
    let csc = c.nrows() as isize;
    // SAFETY: dimensions are checked above and the strides describe the
    // dense column-major storage of each matrix.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }
}

/// Adam optimizer state for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) {
        self.t += 1;
        let step = self.lr / (1.0 - self.beta1.powi(self.t));
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let mut offset = 0;
        for (l, g) in net.layers.iter_mut().zip(&grads.layers) {
            for (p, gr) in [
                (l.w.as_mut_slice(), g.w.as_slice()),
                (l.b.as_mut_slice(), g.b.as_slice()),
            ] {
                let n = p.len();
                let m = &mut self.m[offset..offset + n];
                let v = &mut self.v[offset..offset + n];
                for i in 0..n {
                    m[i] = b1 * m[i] + (1.0 - b1) * gr[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * gr[i] * gr[i];
                    p[i] -= step * m[i] / ((v[i] / bc2).sqrt() + eps);
                }
                offset += n;
            }
        }
    }
}

/// `θ' ← τ·θ + (1−τ)·θ'`.
pub fn soft_update(target: &mut Mlp, source: &Mlp, tau: f64) {
    for (t, s) in target.layers.iter_mut().zip(&source.layers) {
        t.w.zip_apply(&s.w, |a, b| *a = tau * b + (1.0 - tau) * *a);
        t.b.zip_apply(&s.b, |a, b| *a = tau * b + (1.0 - tau) * *a);
    }
}

/// Largest relative error between the analytic gradient of `loss(net(x))` and
/// central finite differences (step 1e-5) over `n_probe` randomly chosen weights.
///
/// `loss` returns the scalar loss and `∂L/∂output`.
pub fn gradient_check<R, F>(
    net: &Mlp,
    x: &DMatrix<f64>,
    loss: F,
    n_probe: usize,
    rng: &mut R,
) -> Result<f64>
where
    R: Rng + ?Sized,
    F: Fn(&DMatrix<f64>) -> (f64, DMatrix<f64>),
{
    let trace = net.forward_trace(x)?;
    let (_, d_out) = loss(&trace.output);
    let (grads, _) = net.backward(&trace, &d_out);
    let analytic = grads.flatten();
    let base = net.params();
    let mut probe = net.clone();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..n_probe {
        let i = rng.random_range(0..base.len());
        let mut p = base.clone();
        p[i] = base[i] + h;
        probe.set_params(&p)?;
        let plus = loss(&probe.forward_batch(x)?).0;
        p[i] = base[i] - h;
        probe.set_params(&p)?;
        let minus = loss(&probe.forward_batch(x)?).0;
        let numeric = (plus - minus) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Td3Config {
    pub buffer_capacity: usize,
    pub gamma: f64,
    pub batch: usize,
    pub lr_policy: f64,
    pub lr_q: f64,
    pub soft_tau: f64,
    pub policy_delay: usize,
    /// Exploration standard deviation in episode `i` is `exploration_decay^i`.
    pub exploration_decay: f64,
    pub target_noise_std: f64,
    pub target_noise_clip: f64,
    pub hidden: [usize; 2],
    /// Action bound; the policy outputs `u_max · tanh(·)`.
    pub u_max: f64,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            buffer_capacity: 20_000,
            gamma: 0.9,
            batch: 16,
            lr_policy: 1e-5,
            lr_q: 2e-5,
            soft_tau: 0.005,
            policy_delay: 2,
            exploration_decay: 0.9992,
            target_noise_std: 0.1,
            target_noise_clip: 0.1,
            hidden: [256, 128],
            u_max: 3.0,
        }
    }
}

impl Td3Config {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.gamma,
            self.lr_policy,
            self.lr_q,
            self.soft_tau,
            self.exploration_decay,
            self.u_max,
        ];
        ensure_finite("td3 config", &positive)?;
        ensure_finite(
            "td3 config",
            &[self.target_noise_std, self.target_noise_clip],
        )?;
        if positive.iter().any(|&v| v <= 0.0)
            || self.gamma >= 1.0
            || self.soft_tau > 1.0
            || self.buffer_capacity == 0
            || self.batch == 0
            || self.policy_delay == 0
            || self.hidden.contains(&0)
            || self.target_noise_std < 0.0
            || self.target_noise_clip < 0.0
        {
            return Err(Error::domain(format!("invalid TD3 configuration {self:?}")));
        }
        Ok(())
    }

    pub fn exploration_std(&self, episode: usize) -> f64 {
        self.exploration_decay.powf(episode as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: f64,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// FIFO ring of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    data: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            data: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() == self.capacity {
            self.data.pop_front();
        }
        self.data.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.data.get(i)
    }

    /// Uniform draw of `batch` distinct transitions; `None` if underfull.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Option<Vec<&Transition>> {
        if self.data.len() < batch {
            return None;
        }
        let idx = rand::seq::index::sample(rng, self.data.len(), batch);
        Some(idx.iter().map(|i| &self.data[i]).collect())
    }
}

/// Losses and diagnostics of one update call.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct UpdateOutcome {
    /// `false` when the buffer held fewer transitions than a batch.
    pub performed: bool,
    pub critic_loss: [f64; 2],
    pub actor_loss: Option<f64>,
    /// Largest amount by which a target exceeds `r + γ·(1−done)·Q_i'` for either critic.
    pub target_excess: f64,
}

#[derive(Debug, Clone)]
pub struct Td3Agent {
    pub cfg: Td3Config,
    /// Multiplies raw observations before they enter any network.
    input_scale: Vec<f64>,
    actor: Mlp,
    actor_target: Mlp,
    critics: [Mlp; 2],
    critic_targets: [Mlp; 2],
    actor_opt: Adam,
    critic_opts: [Adam; 2],
    updates: u64,
}

impl Td3Agent {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        input_scale: Vec<f64>,
        cfg: Td3Config,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if input_scale.len() != state_dim {
            return Err(Error::Dimension {
                expected: state_dim,
                got: input_scale.len(),
            });
        }
        ensure_finite("input scale", &input_scale)?;
        let [h1, h2] = cfg.hidden;
        let actor = Mlp::new(&[state_dim, h1, h2, 1], Head::Tanh, cfg.u_max, rng)?;
        let c1 = Mlp::new(&[state_dim + 1, h1, h2, 1], Head::Linear, 1.0, rng)?;
        let c2 = Mlp::new(&[state_dim + 1, h1, h2, 1], Head::Linear, 1.0, rng)?;
        Ok(Self::from_networks(
            cfg,
            input_scale,
            actor.clone(),
            actor,
            [c1.clone(), c2.clone()],
            [c1, c2],
        ))
    }

    fn from_networks(
        cfg: Td3Config,
        input_scale: Vec<f64>,
        actor: Mlp,
        actor_target: Mlp,
        critics: [Mlp; 2],
        critic_targets: [Mlp; 2],
    ) -> Self {
        let actor_opt = Adam::new(actor.n_params(), cfg.lr_policy);
        let critic_opts = [
            Adam::new(critics[0].n_params(), cfg.lr_q),
            Adam::new(critics[1].n_params(), cfg.lr_q),
        ];
        Self {
            cfg,
            input_scale,
            actor,
            actor_target,
            critics,
            critic_targets,
            actor_opt,
            critic_opts,
            updates: 0,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    pub fn critics(&self) -> &[Mlp; 2] {
        &self.critics
    }

    pub fn input_scale(&self) -> &[f64] {
        &self.input_scale
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    fn scaled(&self, state: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.state_dim() {
            return Err(Error::Dimension {
                expected: self.state_dim(),
                got: state.len(),
            });
        }
        Ok(state
            .iter()
            .zip(&self.input_scale)
            .map(|(s, k)| s * k)
            .collect())
    }

    /// Deterministic policy action in `[−u_max, u_max]`.
    pub fn act(&self, state: &[f64]) -> Result<f64> {
        forward_policy(&self.actor, &self.scaled(state)?)
    }

    /// Policy action plus `N(0, std²)` noise, clipped to the action range.
    pub fn act_with_std<R: Rng + ?Sized>(
        &self,
        state: &[f64],
        std: f64,
        rng: &mut R,
    ) -> Result<f64> {
        let a = self.act(state)?;
        if std <= 0.0 {
            return Ok(a);
        }
        let noise = Normal::new(0.0, std)
            .map_err(|e| Error::domain(e.to_string()))?
            .sample(rng);
        Ok((a + noise).clamp(-self.cfg.u_max, self.cfg.u_max))
    }

    pub fn act_with_exploration<R: Rng + ?Sized>(
        &self,
        state: &[f64],
        episode: usize,
        rng: &mut R,
    ) -> Result<f64> {
        self.act_with_std(state, self.cfg.exploration_std(episode), rng)
    }

    pub fn q_values(&self, state: &[f64], action: f64) -> Result<[f64; 2]> {
        let mut x = self.scaled(state)?;
        x.push(action / self.cfg.u_max);
        Ok([self.critics[0].forward(&x)?, self.critics[1].forward(&x)?])
    }

    /// One TD3 step: both critics every call, actor and targets every `policy_delay` calls.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        buffer: &ReplayBuffer,
        rng: &mut R,
    ) -> Result<UpdateOutcome> {
        let cfg = self.cfg;
        let Some(batch) = buffer.sample(cfg.batch, rng) else {
            return Ok(UpdateOutcome::default());
        };
        let b = batch.len();
        let sd = self.state_dim();
        let mut s = DMatrix::zeros(sd, b);
        let mut s_next = DMatrix::zeros(sd, b);
        for (j, t) in batch.iter().enumerate() {
            if t.state.len() != sd || t.next_state.len() != sd {
                return Err(Error::Dimension {
                    expected: sd,
                    got: t.state.len().min(t.next_state.len()),
                });
            }
            for i in 0..sd {
                s[(i, j)] = t.state[i] * self.input_scale[i];
                s_next[(i, j)] = t.next_state[i] * self.input_scale[i];
            }
        }

        // target y = r + γ(1−done)·min_i Q_i'(s', clip(π'(s') + ε))
        let a_next = self.actor_target.forward_batch(&s_next)?;
        let noise = if cfg.target_noise_std > 0.0 {
            Some(Normal::new(0.0, cfg.target_noise_std).map_err(|e| Error::domain(e.to_string()))?)
        } else {
            None
        };
        let mut sa_next = s_next.clone().insert_row(sd, 0.0);
        for j in 0..b {
            let eps = noise
                .map_or(0.0, |n| n.sample(rng))
                .clamp(-cfg.target_noise_clip, cfg.target_noise_clip);
            sa_next[(sd, j)] = (a_next[(0, j)] + eps).clamp(-cfg.u_max, cfg.u_max) / cfg.u_max;
        }
        let q1t = self.critic_targets[0].forward_batch(&sa_next)?;
        let q2t = self.critic_targets[1].forward_batch(&sa_next)?;
        let mut y = DMatrix::zeros(1, b);
        let mut target_excess = f64::NEG_INFINITY;
        for (j, t) in batch.iter().enumerate() {
            let min_q = q1t[(0, j)].min(q2t[(0, j)]);
            let cont = if t.done { 0.0 } else { 1.0 };
            y[(0, j)] = t.reward + cfg.gamma * cont * min_q;
            let e1 = y[(0, j)] - (t.reward + cfg.gamma * cont * q1t[(0, j)]);
            let e2 = y[(0, j)] - (t.reward + cfg.gamma * cont * q2t[(0, j)]);
            target_excess = target_excess.max(e1).max(e2);
        }

        let mut sa = s.clone().insert_row(sd, 0.0);
        for (j, t) in batch.iter().enumerate() {
            sa[(sd, j)] = t.action / cfg.u_max;
        }
        let mut critic_loss = [0.0; 2];
        for k in 0..2 {
            let trace = self.critics[k].forward_trace(&sa)?;
            let diff = &trace.output - &y;
            critic_loss[k] = diff.norm_squared() / b as f64;
            let d_out = diff * (2.0 / b as f64);
            let (grads, _) = self.critics[k].backward(&trace, &d_out);
            self.critic_opts[k].step(&mut self.critics[k], &grads);
        }

        self.updates += 1;
        let mut actor_loss = None;
        if self.updates.is_multiple_of(cfg.policy_delay as u64) {
            // ascend Q1(s, π(s))
            let a_trace = self.actor.forward_trace(&s)?;
            let mut sa_pi = s.clone().insert_row(sd, 0.0);
            for j in 0..b {
                sa_pi[(sd, j)] = a_trace.output[(0, j)] / cfg.u_max;
            }
            let q_trace = self.critics[0].forward_trace(&sa_pi)?;
            actor_loss = Some(-q_trace.output.mean());
            let d_q = DMatrix::from_element(1, b, -1.0 / b as f64);
            let d_in = self.critics[0].input_gradient(&q_trace, &d_q);
            let d_action = d_in.rows(sd, 1) / cfg.u_max;
            let (grads, _) = self.actor.backward(&a_trace, &d_action.into_owned());
            self.actor_opt.step(&mut self.actor, &grads);
            soft_update(&mut self.actor_target, &self.actor, cfg.soft_tau);
            soft_update(&mut self.critic_targets[0], &self.critics[0], cfg.soft_tau);
            soft_update(&mut self.critic_targets[1], &self.critics[1], cfg.soft_tau);
        }
        if !(self.actor.is_finite() && self.critics.iter().all(Mlp::is_finite)) {
            return Err(Error::domain("network weights became non-finite"));
        }
        Ok(UpdateOutcome {
            performed: true,
            critic_loss,
            actor_loss,
            target_excess,
        })
    }

    pub fn save_checkpoint(&self, path: &Path, scenario: &str, seed: u64) -> Result<()> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            scenario: scenario.to_string(),
            seed,
            config: self.cfg,
            input_scale: self.input_scale.clone(),
            actor: NetRecord::from(&self.actor),
            actor_target: NetRecord::from(&self.actor_target),
            critics: [
                NetRecord::from(&self.critics[0]),
                NetRecord::from(&self.critics[1]),
            ],
            critic_targets: [
                NetRecord::from(&self.critic_targets[0]),
                NetRecord::from(&self.critic_targets[1]),
            ],
        };
        fs::write(path, serde_json::to_string(&ck)?)?;
        Ok(())
    }
}

/// Policy output for an already scaled state.
pub fn forward_policy(net: &Mlp, state: &[f64]) -> Result<f64> {
    net.forward(state)
}

pub fn td3_update<R: Rng + ?Sized>(
    agent: &mut Td3Agent,
    buffer: &ReplayBuffer,
    rng: &mut R,
) -> Result<UpdateOutcome> {
    agent.update(buffer, rng)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetRecord {
    sizes: Vec<usize>,
    head: Head,
    scale: f64,
    /// Little-endian f64 parameters, base64 encoded.
    params: String,
}

impl From<&Mlp> for NetRecord {
    fn from(net: &Mlp) -> Self {
        let bytes: Vec<u8> = net.params().iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            sizes: net.sizes(),
            head: net.head,
            scale: net.scale,
            params: B64.encode(bytes),
        }
    }
}

impl NetRecord {
    fn to_mlp(&self) -> Result<Mlp> {
        let mut net = Mlp::zeros(&self.sizes, self.head, self.scale)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let bytes = B64
            .decode(&self.params)
            .map_err(|e| Error::Checkpoint(format!("weights: {e}")))?;
        if bytes.len() != 8 * net.n_params() {
            return Err(Error::Checkpoint(format!(
                "expected {} weight bytes for sizes {:?}, found {}",
                8 * net.n_params(),
                self.sizes,
                bytes.len()
            )));
        }
        let params: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        net.set_params(&params)?;
        if !net.is_finite() {
            return Err(Error::Checkpoint("non-finite weights".into()));
        }
        Ok(net)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    scenario: String,
    seed: u64,
    config: Td3Config,
    input_scale: Vec<f64>,
    actor: NetRecord,
    actor_target: NetRecord,
    critics: [NetRecord; 2],
    critic_targets: [NetRecord; 2],
}

/// Agent restored from disk together with the metadata it was saved with.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub agent: Td3Agent,
    pub scenario: String,
    pub seed: u64,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let text = fs::read_to_string(path)?;
    let ck: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {} not supported (expected {CHECKPOINT_VERSION})",
            ck.version
        )));
    }
    ck.config.validate()?;
    let actor = ck.actor.to_mlp()?;
    let actor_target = ck.actor_target.to_mlp()?;
    let critics = [ck.critics[0].to_mlp()?, ck.critics[1].to_mlp()?];
    let critic_targets = [
        ck.critic_targets[0].to_mlp()?,
        ck.critic_targets[1].to_mlp()?,
    ];
    let sd = actor.input_dim();
    let consistent = ck.input_scale.len() == sd
        && actor.output_dim() == 1
        && actor_target.sizes() == actor.sizes()
        && critics
            .iter()
            .chain(&critic_targets)
            .all(|c| c.input_dim() == sd + 1 && c.output_dim() == 1);
    if !consistent {
        return Err(Error::Checkpoint("network shapes are inconsistent".into()));
    }
    let agent = Td3Agent::from_networks(
        ck.config,
        ck.input_scale,
        actor,
        actor_target,
        critics,
        critic_targets,
    );
    Ok(LoadedCheckpoint {
        agent,
        scenario: ck.scenario,
        seed: ck.seed,
    })
}

/// Loads a checkpoint and checks it matches the expected scenario and state width.
pub fn load_checkpoint_for(
    path: &Path,
    scenario: &str,
    state_dim: usize,
) -> Result<LoadedCheckpoint> {
    let ck = load_checkpoint(path)?;
    if ck.agent.state_dim() != state_dim {
        return Err(Error::Dimension {
            expected: state_dim,
            got: ck.agent.state_dim(),
        });
    }
    if ck.scenario != scenario {
        return Err(Error::Checkpoint(format!(
            "checkpoint trained for scenario {}, requested {scenario}",
            ck.scenario
        )));
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_batch(d: usize, b: usize, r: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(d, b, |_, _| r.random_range(-2.0..2.0))
    }

    fn half_squared(out: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let target = DMatrix::from_fn(out.nrows(), out.ncols(), |_, j| 0.3 * j as f64 - 1.0);
        let diff = out - &target;
        (0.5 * diff.norm_squared(), diff)
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[5, 256, 128, 1], Head::Tanh, 3.0).unwrap();
        assert_eq!(net.forward(&[1.0, -4.0, 2.0, 8.0, 0.5]).unwrap(), 0.0);
    }

    #[test]
    fn policy_output_stays_in_range() {
        let mut r = rng(1);
        let mut net = Mlp::new(&[5, 256, 128, 1], Head::Tanh, 3.0, &mut r).unwrap();
        // make saturation likely
        let p: Vec<f64> = net.params().iter().map(|v| v * 20.0).collect();
        net.set_params(&p).unwrap();
        let x = DMatrix::from_fn(5, 10_000, |_, _| r.random_range(-50.0..50.0));
        let out = net.forward_batch(&x).unwrap();
        assert!(out.iter().all(|v| (-3.0..=3.0).contains(v)));
    }

    #[test]
    fn forward_is_deterministic_and_checks_width() {
        let a = Mlp::new(&[5, 16, 8, 1], Head::Tanh, 3.0, &mut rng(4)).unwrap();
        let b = Mlp::new(&[5, 16, 8, 1], Head::Tanh, 3.0, &mut rng(4)).unwrap();
        let s = [0.3, -0.2, 0.1, 0.9, 0.4];
        assert_eq!(
            a.forward(&s).unwrap().to_bits(),
            b.forward(&s).unwrap().to_bits()
        );
        assert!(matches!(
            a.forward(&s[..3]),
            Err(Error::Dimension {
                expected: 5,
                got: 3
            })
        ));
    }

    #[test]
    fn linear_layer_gradient_is_exact() {
        let mut r = rng(2);
        let net = Mlp::new(&[4, 1], Head::Linear, 1.0, &mut r).unwrap();
        let x = random_batch(4, 8, &mut r);
        let err = gradient_check(&net, &x, half_squared, 200, &mut r).unwrap();
        assert!(err <= 1e-9, "relative error {err}");
    }

    #[test]
    fn policy_network_gradient() {
        let mut r = rng(3);
        let net = Mlp::new(&[5, 256, 128, 1], Head::Tanh, 3.0, &mut r).unwrap();
        let x = random_batch(5, 16, &mut r);
        let err = gradient_check(&net, &x, half_squared, 300, &mut r).unwrap();
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn q_network_gradient() {
        let mut r = rng(5);
        let net = Mlp::new(&[6, 256, 128, 1], Head::Linear, 1.0, &mut r).unwrap();
        let x = random_batch(6, 16, &mut r);
        let err = gradient_check(&net, &x, half_squared, 300, &mut r).unwrap();
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut r = rng(6);
        let net = Mlp::new(&[6, 32, 16, 1], Head::Linear, 1.0, &mut r).unwrap();
        let x = random_batch(6, 1, &mut r);
        let trace = net.forward_trace(&x).unwrap();
        let (_, d_in) = net.backward(&trace, &DMatrix::from_element(1, 1, 1.0));
        for i in 0..6 {
            let mut xp = x.clone();
            xp[(i, 0)] += 1e-6;
            let mut xm = x.clone();
            xm[(i, 0)] -= 1e-6;
            let fd = (net.forward_batch(&xp).unwrap()[(0, 0)]
                - net.forward_batch(&xm).unwrap()[(0, 0)])
                / 2e-6;
            assert!(
                (fd - d_in[(i, 0)]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "input {i}: {fd} vs {}",
                d_in[(i, 0)]
            );
        }
    }

    #[test]
    fn soft_update_blends() {
        let mut target = Mlp::zeros(&[2, 3, 1], Head::Linear, 1.0).unwrap();
        let mut source = target.clone();
        source.set_params(&vec![1.0; source.n_params()]).unwrap();
        soft_update(&mut target, &source, 0.005);
        assert!(target.params().iter().all(|&v| v == 0.005));
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let mut r = rng(7);
        let mut net = Mlp::new(&[3, 8, 1], Head::Tanh, 3.0, &mut r).unwrap();
        let before = net.params();
        let x = random_batch(3, 4, &mut r);
        let trace = net.forward_trace(&x).unwrap();
        let (_, d) = half_squared(&trace.output);
        let (g, _) = net.backward(&trace, &d);
        let mut opt = Adam::new(net.n_params(), 0.0);
        opt.step(&mut net, &g);
        assert!(before
            .iter()
            .zip(net.params())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn exploration_schedule() {
        let cfg = Td3Config::default();
        assert_eq!(cfg.exploration_std(0), 1.0);
        assert!((cfg.exploration_std(5000) - 0.9992f64.powi(5000)).abs() < 1e-15);
        assert!((cfg.exploration_std(5000) - 0.0183).abs() < 1e-4);
        let agent = Td3Agent::new(3, vec![1.0; 3], cfg, &mut rng(8)).unwrap();
        let s = [0.2, 0.1, -0.3];
        assert_eq!(
            agent.act_with_std(&s, 0.0, &mut rng(9)).unwrap(),
            agent.act(&s).unwrap()
        );
    }

    fn transition(reward: f64, done: bool) -> Transition {
        Transition {
            state: vec![0.5, -0.2, 0.1],
            action: 0.7,
            reward,
            next_state: vec![0.5, -0.2, 0.1],
            done,
        }
    }

    #[test]
    fn underfull_buffer_is_a_noop() {
        let mut agent = Td3Agent::new(3, vec![1.0; 3], Td3Config::default(), &mut rng(10)).unwrap();
        let mut buf = ReplayBuffer::new(100);
        buf.push(transition(1.0, false));
        let out = agent.update(&buf, &mut rng(11)).unwrap();
        assert!(!out.performed);
        assert_eq!(agent.updates(), 0);
    }

    /// Repeats one transition whose action is the (frozen) policy's own action,
    /// so the self-loop value is the geometric series `r/(1−γ)`.
    fn fit_single_transition(done: bool) -> f64 {
        let cfg = Td3Config {
            lr_q: 1e-3,
            lr_policy: 1e-12,
            soft_tau: 0.05,
            hidden: [32, 16],
            ..Td3Config::default()
        };
        let mut agent = Td3Agent::new(3, vec![1.0; 3], cfg, &mut rng(12)).unwrap();
        let s = vec![0.5, -0.2, 0.1];
        let a = agent.act(&s).unwrap();
        let mut buf = ReplayBuffer::new(100);
        for _ in 0..cfg.batch {
            buf.push(Transition {
                state: s.clone(),
                action: a,
                reward: 1.0,
                next_state: s.clone(),
                done,
            });
        }
        let mut r = rng(13);
        for _ in 0..6000 {
            let out = agent.update(&buf, &mut r).unwrap();
            assert!(out.target_excess <= 1e-12);
        }
        let q = agent.q_values(&s, a).unwrap();
        0.5 * (q[0] + q[1])
    }

    #[test]
    fn terminal_transition_targets_reward() {
        let q = fit_single_transition(true);
        assert!((q - 1.0).abs() < 0.05, "Q = {q}");
    }

    #[test]
    fn self_loop_converges_to_geometric_sum() {
        let q = fit_single_transition(false);
        assert!((q - 10.0).abs() <= 0.5, "Q = {q}");
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agent.json");
        let mut r = rng(14);
        let agent = Td3Agent::new(
            5,
            vec![0.05, 0.05, 0.2, 0.1, 0.1],
            Td3Config::default(),
            &mut r,
        )
        .unwrap();
        agent.save_checkpoint(&path, "C", 42).unwrap();
        let loaded = load_checkpoint_for(&path, "C", 5).unwrap();
        assert_eq!(loaded.seed, 42);
        for _ in 0..100 {
            let s: Vec<f64> = (0..5).map(|_| r.random_range(-30.0..30.0)).collect();
            assert_eq!(
                agent.act(&s).unwrap().to_bits(),
                loaded.agent.act(&s).unwrap().to_bits()
            );
            let a = agent.q_values(&s, 1.0).unwrap();
            let b = loaded.agent.q_values(&s, 1.0).unwrap();
            assert_eq!(a[0].to_bits(), b[0].to_bits());
            assert_eq!(a[1].to_bits(), b[1].to_bits());
        }
    }

    #[test]
    fn checkpoint_rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agent.json");
        let agent = Td3Agent::new(3, vec![1.0; 3], Td3Config::default(), &mut rng(15)).unwrap();
        agent.save_checkpoint(&path, "B", 1).unwrap();
        assert!(matches!(
            load_checkpoint_for(&path, "B", 5),
            Err(Error::Dimension {
                expected: 5,
                got: 3
            })
        ));
        assert!(matches!(
            load_checkpoint_for(&path, "C", 3),
            Err(Error::Checkpoint(_))
        ));

        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

        let bumped = text.replacen("\"version\":1", "\"version\":99", 1);
        fs::write(&path, bumped).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    proptest! {
        #[test]
        fn buffer_is_fifo_and_bounded(cap in 1usize..40, pushes in 0usize..120) {
            let mut buf = ReplayBuffer::new(cap);
            for k in 0..pushes {
                buf.push(transition(k as f64, false));
                prop_assert!(buf.len() <= cap);
            }
            let kept = pushes.min(cap);
            prop_assert_eq!(buf.len(), kept);
            for i in 0..kept {
                prop_assert_eq!(buf.get(i).unwrap().reward, (pushes - kept + i) as f64);
            }
        }

        #[test]
        fn batch_has_distinct_entries(n in 16usize..60, seed in any::<u64>()) {
            let mut buf = ReplayBuffer::new(100);
            for k in 0..n {
                buf.push(transition(k as f64, false));
            }
            let batch = buf.sample(16, &mut rng(seed)).unwrap();
            let mut rewards: Vec<i64> = batch.iter().map(|t| t.reward as i64).collect();
            rewards.sort_unstable();
            rewards.dedup();
            prop_assert_eq!(rewards.len(), 16);
        }
    }
}
