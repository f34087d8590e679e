//! Offline goal-conditioned TD3+BC.
//!
//! The actor maps a normalised `goal || state` vector to a squashed action
//! `u in (-1, 1)^6`, which is mapped affinely onto the workspace ranges.
//! Critics see `[state, u]`. Behaviour cloning and target smoothing noise are
//! both expressed in `u`, so every action component has the same scale.

use std::fs;
use std::io::Write;
use std::path::Path;

use log::info;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::jsonfmt;
use crate::mdp::{encode_input, Action, Observation, Range, Shape, Workspace, ACTION_DIM, INPUT_DIM};
use crate::nn::{Masks, Mode, Net, NetSpec, Pass};

pub const POLICY_MAGIC: &[u8; 4] = b"DLOP";
pub const POLICY_VERSION: u32 = 1;
/// Smallest allowed standard deviation in the input normaliser.
pub const MIN_STD: f64 = 1e-6;
const LOG_EVERY: usize = 1000;
const CHECKSUM: crc::Crc<u64> = crc::Crc::<u64>::new(&crc::CRC_64_XZ);

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("non-finite network input")]
    NonFinite,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("policy file: {0}")]
    Format(String),
    #[error("policy file version {found}, expected {POLICY_VERSION}")]
    Version { found: u32 },
    #[error("policy file checksum mismatch (truncated or corrupted)")]
    Checksum,
}

/// Which action the critic is evaluated at when computing the BC weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaSource {
    Policy,
    Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub tau: f64,
    pub policy_delay: usize,
    pub target_noise_sigma: f64,
    pub target_noise_clip: f64,
    pub total_steps: usize,
    pub seed: u64,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub dropout: f64,
    pub batch_norm: bool,
    pub lambda_source: LambdaSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            actor_lr: 1e-4,
            critic_lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 256,
            alpha: 2.5,
            tau: 0.005,
            policy_delay: 2,
            target_noise_sigma: 0.2,
            target_noise_clip: 0.5,
            total_steps: 1_000_000,
            seed: 0,
            hidden_layers: 4,
            hidden_width: 256,
            dropout: 0.5,
            batch_norm: true,
            lambda_source: LambdaSource::Policy,
        }
    }
}

impl TrainConfig {
    /// Settings sized for a single desktop core.
    pub fn desk() -> Self {
        Self {
            hidden_width: 64,
            total_steps: 50_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        let positive = [
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("adam_eps", self.adam_eps),
            ("tau", self.tau),
            ("target_noise_sigma", self.target_noise_sigma),
            ("target_noise_clip", self.target_noise_clip),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LearnError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(LearnError::Config(format!("gamma must be in (0, 1), got {}", self.gamma)));
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(LearnError::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(LearnError::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(LearnError::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.tau > 1.0 {
            return Err(LearnError::Config(format!("tau must be at most 1, got {}", self.tau)));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("policy_delay", self.policy_delay),
            ("hidden_width", self.hidden_width),
        ] {
            if v == 0 {
                return Err(LearnError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    fn net_spec(&self, input_dim: usize, output_dim: usize) -> NetSpec {
        NetSpec {
            dropout: self.dropout,
            batch_norm: self.batch_norm,
            ..NetSpec::new(input_dim, self.hidden_layers, self.hidden_width, output_dim)
        }
    }
}

/// `mean_i alpha / |q_i|` with `|q_i|` floored at 1e-8.
pub fn compute_lambda(q: &[f64], alpha: f64) -> f64 {
    if q.is_empty() {
        return 0.0;
    }
    q.iter().map(|v| alpha / v.abs().max(1e-8)).sum::<f64>() / q.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Column statistics of row-major `rows` with `dim` columns.
    pub fn fit(rows: &[f64], dim: usize) -> Self {
        let n = (rows.len() / dim).max(1) as f64;
        let mut mean = vec![0.0; dim];
        for r in rows.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows.chunks_exact(dim) {
            for j in 0..dim {
                let c = r[j] - mean[j];
                var[j] += c * c;
            }
        }
        let std = var.iter().map(|v| ((v / n).sqrt() + 1e-3).max(MIN_STD)).collect();
        Self { mean, std }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn apply(&self, row: &[f64], out: &mut [f64]) {
        for j in 0..row.len() {
            out[j] = (row[j] - self.mean[j]) / self.std[j];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, beta1: f64, beta2: f64, eps: f64) {
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Critic {
    Q1,
    Q2,
    Target1,
    Target2,
}

/// Live and target networks, optimiser state, normaliser and action bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub config: TrainConfig,
    pub workspace: Workspace,
    pub normalizer: Normalizer,
    pub actor: Net,
    pub critic1: Net,
    pub critic2: Net,
    pub actor_target: Net,
    pub critic1_target: Net,
    pub critic2_target: Net,
    pub actor_opt: Adam,
    pub critic1_opt: Adam,
    pub critic2_opt: Adam,
    pub steps_done: usize,
}

fn stream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

const STREAM_INIT: u64 = 1;
const STREAM_BATCH: u64 = 2;
const STREAM_CRITIC: u64 = 3;
const STREAM_ACTOR: u64 = 4;

impl PolicyParams {
    pub fn new(config: TrainConfig, workspace: Workspace, normalizer: Normalizer) -> Self {
        let mut rng = stream(config.seed, STREAM_INIT, 0);
        let actor = Net::init(config.net_spec(INPUT_DIM, ACTION_DIM), &mut rng);
        let critic_spec = config.net_spec(INPUT_DIM + ACTION_DIM, 1);
        let critic1 = Net::init(critic_spec.clone(), &mut rng);
        let critic2 = Net::init(critic_spec, &mut rng);
        Self {
            actor_opt: Adam::new(actor.params.len()),
            critic1_opt: Adam::new(critic1.params.len()),
            critic2_opt: Adam::new(critic2.params.len()),
            actor_target: actor.clone(),
            critic1_target: critic1.clone(),
            critic2_target: critic2.clone(),
            actor,
            critic1,
            critic2,
            config,
            workspace,
            normalizer,
            steps_done: 0,
        }
    }

    pub fn ranges(&self) -> [Range; ACTION_DIM] {
        self.workspace.action_ranges()
    }

    fn normalize_checked(&self, raw: &[f64], batch: usize) -> Result<Vec<f64>, LearnError> {
        if raw.len() != batch * INPUT_DIM {
            return Err(LearnError::Config(format!("input length {} is not {batch} x {INPUT_DIM}", raw.len())));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(LearnError::NonFinite);
        }
        let mut out = vec![0.0; raw.len()];
        for (r, o) in raw.chunks_exact(INPUT_DIM).zip(out.chunks_exact_mut(INPUT_DIM)) {
            self.normalizer.apply(r, o);
        }
        Ok(out)
    }

    /// Actions for a batch of raw (unnormalised) 78-dim inputs. Training mode
    /// uses batch statistics but no dropout.
    pub fn actor_forward(&self, raw: &[f64], mode: Mode) -> Result<Vec<Action>, LearnError> {
        let batch = raw.len() / INPUT_DIM;
        let x = self.normalize_checked(raw, batch)?;
        let out = self.actor.forward(&x, batch, mode, None).out;
        let ranges = self.ranges();
        Ok(out.chunks_exact(ACTION_DIM).map(|y| to_action(y, &ranges)).collect())
    }

    /// Eval-mode value of one raw input and action.
    pub fn critic_forward(&self, raw: &[f64], action: &Action, which: Critic) -> Result<f64, LearnError> {
        if !action.is_finite() {
            return Err(LearnError::NonFinite);
        }
        let mut x = self.normalize_checked(raw, 1)?;
        x.extend(to_unit(action, &self.ranges()));
        let net = match which {
            Critic::Q1 => &self.critic1,
            Critic::Q2 => &self.critic2,
            Critic::Target1 => &self.critic1_target,
            Critic::Target2 => &self.critic2_target,
        };
        Ok(net.forward(&x, 1, Mode::Eval, None).out[0])
    }

    /// Greedy action for one goal and observation.
    pub fn act(&self, goal: &Shape, obs: &Observation) -> Result<Action, LearnError> {
        let raw = encode_input(goal, obs);
        Ok(self.actor_forward(&raw, Mode::Eval)?.remove(0))
    }
}

fn to_action(y: &[f64], ranges: &[Range; ACTION_DIM]) -> Action {
    let mut a = [0.0; ACTION_DIM];
    for j in 0..ACTION_DIM {
        // The clamp only absorbs rounding at saturation.
        a[j] = ranges[j].clamp(ranges[j].mid() + 0.5 * ranges[j].width() * y[j].tanh());
    }
    Action::from_array(&a)
}

fn to_unit(action: &Action, ranges: &[Range; ACTION_DIM]) -> Vec<f64> {
    action
        .to_array()
        .iter()
        .zip(ranges)
        .map(|(v, r)| ((v - r.mid()) / (0.5 * r.width())).clamp(-1.0, 1.0))
        .collect()
}

/// Dataset flattened into normalised states and unit-scaled actions.
#[derive(Debug, Clone)]
pub struct TransitionTable {
    /// Normalised states, one row per stored step.
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub source: Vec<usize>,
    pub next: Vec<usize>,
    pub done: Vec<bool>,
}

impl TransitionTable {
    /// Raw encoded state rows of every step and the transition links between them.
    fn raw(dataset: &Dataset) -> (Vec<f64>, Self) {
        let ranges = dataset.manifest.workspace.action_ranges();
        let mut t = Self {
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            source: Vec::new(),
            next: Vec::new(),
            done: Vec::new(),
        };
        let mut raw = Vec::new();
        let mut row = 0;
        for ep in &dataset.episodes {
            let n = ep.steps.len();
            for (k, step) in ep.steps.iter().enumerate() {
                raw.extend(encode_input(&ep.goal, &step.observation));
                if k + 1 < n {
                    t.source.push(row + k);
                    t.next.push(row + k + 1);
                    t.actions.extend(to_unit(&step.action, &ranges));
                    t.rewards.push(ep.steps[k + 1].reward);
                    t.done.push(k + 2 == n);
                }
            }
            row += n;
        }
        (raw, t)
    }

    pub fn build(dataset: &Dataset, normalizer: &Normalizer) -> Self {
        let (raw, mut t) = Self::raw(dataset);
        t.states = vec![0.0; raw.len()];
        for (r, o) in raw.chunks_exact(INPUT_DIM).zip(t.states.chunks_exact_mut(INPUT_DIM)) {
            normalizer.apply(r, o);
        }
        t
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut b = Batch::with_capacity(indices.len());
        for &i in indices {
            let s = self.source[i] * INPUT_DIM;
            let n = self.next[i] * INPUT_DIM;
            b.states.extend_from_slice(&self.states[s..s + INPUT_DIM]);
            b.next_states.extend_from_slice(&self.states[n..n + INPUT_DIM]);
            b.actions.extend_from_slice(&self.actions[i * ACTION_DIM..(i + 1) * ACTION_DIM]);
            b.rewards.push(self.rewards[i]);
            b.done.push(self.done[i]);
        }
        b
    }

    /// Uniform sample with replacement, fixed by `(seed, step)`.
    pub fn sample(&self, seed: u64, step: usize, size: usize) -> Batch {
        let mut rng = stream(seed, STREAM_BATCH, step as u64);
        let idx: Vec<usize> = (0..size).map(|_| rng.gen_range(0..self.len())).collect();
        self.batch(&idx)
    }
}

/// Normalised states, unit actions, rewards and terminal flags.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<f64>,
    pub done: Vec<bool>,
}

impl Batch {
    fn with_capacity(n: usize) -> Self {
        Self {
            states: Vec::with_capacity(n * INPUT_DIM),
            actions: Vec::with_capacity(n * ACTION_DIM),
            rewards: Vec::with_capacity(n),
            next_states: Vec::with_capacity(n * INPUT_DIM),
            done: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

pub fn critic_input(states: &[f64], actions: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(states.len() + actions.len());
    for (s, a) in states.chunks_exact(INPUT_DIM).zip(actions.chunks_exact(ACTION_DIM)) {
        x.extend_from_slice(s);
        x.extend_from_slice(a);
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct UpdateMetrics {
    pub critic_loss: f64,
    pub actor_loss: Option<f64>,
    pub lambda: Option<f64>,
    pub mean_abs_q: f64,
}

/// Bootstrapped critic targets `r + gamma (1 - done) min(Q1', Q2')` under
/// smoothed target-policy actions.
pub fn critic_targets(params: &PolicyParams, batch: &Batch, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let cfg = &params.config;
    let n = batch.len();
    let y = params.actor_target.forward(&batch.next_states, n, Mode::Eval, None).out;
    let mut next_u = Vec::with_capacity(n * ACTION_DIM);
    for v in y {
        let noise: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.target_noise_sigma;
        let noise = noise.clamp(-cfg.target_noise_clip, cfg.target_noise_clip);
        next_u.push((v.tanh() + noise).clamp(-1.0, 1.0));
    }
    let x = critic_input(&batch.next_states, &next_u);
    let q1 = params.critic1_target.forward(&x, n, Mode::Eval, None).out;
    let q2 = params.critic2_target.forward(&x, n, Mode::Eval, None).out;
    (0..n)
        .map(|i| {
            let live = if batch.done[i] { 0.0 } else { 1.0 };
            batch.rewards[i] + cfg.gamma * live * q1[i].min(q2[i])
        })
        .collect()
}

/// Mean squared error of `net` against `target` and its parameter gradient.
pub fn critic_objective(net: &Net, x: &[f64], target: &[f64], mode: Mode, masks: Option<&Masks>) -> (f64, Vec<f64>, Pass) {
    let n = target.len();
    let pass = net.forward(x, n, mode, masks);
    let mut d = vec![0.0; n];
    let mut loss = 0.0;
    for i in 0..n {
        let e = pass.out[i] - target[i];
        loss += e * e;
        d[i] = 2.0 * e / n as f64;
    }
    let mut grad = vec![0.0; net.params.len()];
    net.backward(&pass, &d, Some(&mut grad), None);
    (loss / n as f64, grad, pass)
}

fn critic_step(net: &mut Net, opt: &mut Adam, x: &[f64], target: &[f64], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> f64 {
    let masks = net.sample_masks(rng, target.len());
    let (loss, grad, pass) = critic_objective(net, x, target, Mode::Train, masks.as_ref());
    opt.step(&mut net.params, &grad, cfg.critic_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    net.update_running_stats(&pass);
    loss
}

/// Actor loss terms and parameter gradient for one batch.
pub struct ActorObjective {
    pub loss: f64,
    pub bc_loss: f64,
    pub lambda: f64,
    pub mean_q: f64,
    pub mean_abs_q: f64,
    pub grad: Vec<f64>,
    pub pass: Pass,
}

/// `-lambda * mean Q(s, pi(s)) + mean |pi(s) - a|^2` over a batch of
/// normalised states and unit actions. `lambda` is computed from the critic
/// values of the policy actions and treated as a constant. Without a critic
/// this is plain behaviour cloning.
pub fn actor_objective(
    actor: &Net,
    critic: Option<&Net>,
    states: &[f64],
    actions: &[f64],
    mode: Mode,
    masks: Option<&Masks>,
    lambda: impl Fn(&[f64]) -> f64,
) -> ActorObjective {
    let n = actions.len() / ACTION_DIM;
    let pass = actor.forward(states, n, mode, masks);
    let u: Vec<f64> = pass.out.iter().map(|v| v.tanh()).collect();
    let mut bc_loss = 0.0;
    let mut du = vec![0.0; u.len()];
    for i in 0..u.len() {
        let e = u[i] - actions[i];
        bc_loss += e * e;
        du[i] = 2.0 * e / n as f64;
    }
    bc_loss /= n as f64;
    let mut out = ActorObjective {
        loss: bc_loss,
        bc_loss,
        lambda: 0.0,
        mean_q: 0.0,
        mean_abs_q: 0.0,
        grad: vec![0.0; actor.params.len()],
        pass,
    };
    if let Some(critic) = critic {
        let xq = critic_input(states, &u);
        let qpass = critic.forward(&xq, n, Mode::Eval, None);
        let q = &qpass.out;
        out.lambda = lambda(q);
        out.mean_q = q.iter().sum::<f64>() / n as f64;
        out.mean_abs_q = q.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
        out.loss = -out.lambda * out.mean_q + bc_loss;
        let dq = vec![-out.lambda / n as f64; n];
        let width = INPUT_DIM + ACTION_DIM;
        let mut dx = vec![0.0; n * width];
        critic.backward(&qpass, &dq, None, Some(&mut dx));
        for i in 0..n {
            for j in 0..ACTION_DIM {
                du[i * ACTION_DIM + j] += dx[i * width + INPUT_DIM + j];
            }
        }
    }
    let dy: Vec<f64> = du.iter().zip(&u).map(|(g, u)| g * (1.0 - u * u)).collect();
    actor.backward(&out.pass, &dy, Some(&mut out.grad), None);
    out
}

fn actor_apply(params: &mut PolicyParams, obj: &ActorObjective) {
    let cfg = &params.config;
    params
        .actor_opt
        .step(&mut params.actor.params, &obj.grad, cfg.actor_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    params.actor.update_running_stats(&obj.pass);
}

/// One TD3+BC iteration: a critic step on every call, an actor step and
/// target update every `policy_delay` calls.
pub fn td3bc_update(params: &mut PolicyParams, batch: &Batch, step: usize) -> Result<UpdateMetrics, LearnError> {
    let cfg = params.config.clone();
    let n = batch.len();
    if n == 0 {
        return Err(LearnError::Config("empty batch".into()));
    }
    let mut crng = stream(cfg.seed, STREAM_CRITIC, step as u64);
    let y = critic_targets(params, batch, &mut crng);
    let x = critic_input(&batch.states, &batch.actions);
    let l1 = critic_step(&mut params.critic1, &mut params.critic1_opt, &x, &y, &cfg, &mut crng);
    let l2 = critic_step(&mut params.critic2, &mut params.critic2_opt, &x, &y, &cfg, &mut crng);
    let mut metrics = UpdateMetrics {
        critic_loss: l1 + l2,
        ..Default::default()
    };
    if !metrics.critic_loss.is_finite() {
        return Err(LearnError::Diverged { step });
    }

    if (step + 1) % cfg.policy_delay == 0 {
        let mut arng = stream(cfg.seed, STREAM_ACTOR, step as u64);
        let masks = params.actor.sample_masks(&mut arng, n);
        let dataset_q = match cfg.lambda_source {
            LambdaSource::Policy => None,
            LambdaSource::Dataset => Some(params.critic1.forward(&x, n, Mode::Eval, None).out),
        };
        let obj = actor_objective(
            &params.actor,
            Some(&params.critic1),
            &batch.states,
            &batch.actions,
            Mode::Train,
            masks.as_ref(),
            |q| compute_lambda(dataset_q.as_deref().unwrap_or(q), cfg.alpha),
        );
        metrics.mean_abs_q = obj.mean_abs_q;
        metrics.lambda = Some(obj.lambda);
        metrics.actor_loss = Some(obj.loss);
        if !obj.loss.is_finite() {
            return Err(LearnError::Diverged { step });
        }
        actor_apply(params, &obj);
        let tau = cfg.tau;
        params.actor_target.polyak_from(&params.actor, tau);
        params.critic1_target.polyak_from(&params.critic1, tau);
        params.critic2_target.polyak_from(&params.critic2, tau);
    }
    params.steps_done = step + 1;
    Ok(metrics)
}

/// One pure behaviour-cloning actor step; consumes the same actor random
/// stream as the TD3+BC actor step at `step`.
pub fn bc_update(params: &mut PolicyParams, batch: &Batch, step: usize) -> Result<f64, LearnError> {
    let mut arng = stream(params.config.seed, STREAM_ACTOR, step as u64);
    let masks = params.actor.sample_masks(&mut arng, batch.len());
    let obj = actor_objective(&params.actor, None, &batch.states, &batch.actions, Mode::Train, masks.as_ref(), |_| 0.0);
    if !obj.loss.is_finite() {
        return Err(LearnError::Diverged { step });
    }
    actor_apply(params, &obj);
    Ok(obj.loss)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRecord {
    pub step: usize,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub lambda: f64,
    pub mean_abs_q: f64,
}

/// Fit the normaliser on `dataset` and build the initial parameters and transition table.
pub fn prepare(dataset: &Dataset, config: &TrainConfig) -> Result<(PolicyParams, TransitionTable), LearnError> {
    config.validate()?;
    if dataset.transition_count() == 0 {
        return Err(LearnError::Config("dataset has no transitions".into()));
    }
    if config.batch_size > dataset.transition_count() {
        return Err(LearnError::Config(format!(
            "batch size {} exceeds {} transitions",
            config.batch_size,
            dataset.transition_count()
        )));
    }
    let (raw, _) = TransitionTable::raw(dataset);
    let normalizer = Normalizer::fit(&raw, INPUT_DIM);
    let table = TransitionTable::build(dataset, &normalizer);
    let params = PolicyParams::new(config.clone(), dataset.manifest.workspace, normalizer);
    Ok((params, table))
}

/// Train for `config.total_steps` iterations, returning the final parameters
/// and metrics averaged over each logging window.
pub fn train_logged(dataset: &Dataset, config: &TrainConfig) -> Result<(PolicyParams, Vec<LogRecord>), LearnError> {
    let (mut params, table) = prepare(dataset, config)?;
    let mut log = Vec::new();
    let mut acc = [0.0; 4];
    let mut counts = [0usize; 2];
    for step in 0..config.total_steps {
        let batch = table.sample(config.seed, step, config.batch_size);
        let m = td3bc_update(&mut params, &batch, step)?;
        acc[0] += m.critic_loss;
        counts[0] += 1;
        if let (Some(a), Some(l)) = (m.actor_loss, m.lambda) {
            acc[1] += a;
            acc[2] += l;
            acc[3] += m.mean_abs_q;
            counts[1] += 1;
        }
        if (step + 1) % LOG_EVERY == 0 || step + 1 == config.total_steps {
            let k = counts[1].max(1) as f64;
            let rec = LogRecord {
                step: step + 1,
                critic_loss: acc[0] / counts[0] as f64,
                actor_loss: acc[1] / k,
                lambda: acc[2] / k,
                mean_abs_q: acc[3] / k,
            };
            info!(
                "step {} critic {:.5} actor {:.5} lambda {:.4} |Q| {:.4}",
                rec.step, rec.critic_loss, rec.actor_loss, rec.lambda, rec.mean_abs_q
            );
            log.push(rec);
            acc = [0.0; 4];
            counts = [0; 2];
        }
    }
    Ok((params, log))
}

pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<PolicyParams, LearnError> {
    train_logged(dataset, config).map(|(p, _)| p)
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct PolicyManifest {
    config: TrainConfig,
    workspace: Workspace,
    actor_spec: NetSpec,
    critic_spec: NetSpec,
    normalizer: Normalizer,
    steps_done: usize,
    optimizer_steps: [u64; 3],
    tensors: Vec<TensorEntry>,
}

fn tensors(p: &PolicyParams) -> Vec<(String, &[f64])> {
    let mut out: Vec<(String, &[f64])> = Vec::new();
    let nets = [
        ("actor", &p.actor),
        ("critic1", &p.critic1),
        ("critic2", &p.critic2),
        ("actor_target", &p.actor_target),
        ("critic1_target", &p.critic1_target),
        ("critic2_target", &p.critic2_target),
    ];
    for (name, net) in nets {
        out.push((format!("{name}.params"), &net.params));
        out.push((format!("{name}.running_mean"), &net.running_mean));
        out.push((format!("{name}.running_var"), &net.running_var));
    }
    for (name, opt) in [("actor", &p.actor_opt), ("critic1", &p.critic1_opt), ("critic2", &p.critic2_opt)] {
        out.push((format!("{name}_adam.m"), &opt.m));
        out.push((format!("{name}_adam.v"), &opt.v));
    }
    out
}

pub fn encode_policy(p: &PolicyParams) -> Vec<u8> {
    let ts = tensors(p);
    let manifest = PolicyManifest {
        config: p.config.clone(),
        workspace: p.workspace,
        actor_spec: p.actor.spec.clone(),
        critic_spec: p.critic1.spec.clone(),
        normalizer: p.normalizer.clone(),
        steps_done: p.steps_done,
        optimizer_steps: [p.actor_opt.t, p.critic1_opt.t, p.critic2_opt.t],
        tensors: ts.iter().map(|(n, v)| TensorEntry { name: n.clone(), len: v.len() }).collect(),
    };
    let json = jsonfmt::to_line(&manifest).expect("policy manifest serialises");
    let mut buf = Vec::new();
    buf.extend_from_slice(POLICY_MAGIC);
    buf.extend_from_slice(&POLICY_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(json.as_bytes());
    for (_, v) in &ts {
        for x in *v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let sum = CHECKSUM.checksum(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    buf
}

pub fn decode_policy(bytes: &[u8]) -> Result<PolicyParams, LearnError> {
    if bytes.len() < 24 {
        return Err(LearnError::Checksum);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if CHECKSUM.checksum(body).to_le_bytes() != tail {
        return Err(LearnError::Checksum);
    }
    if &body[..4] != POLICY_MAGIC {
        return Err(LearnError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != POLICY_VERSION {
        return Err(LearnError::Version { found: version });
    }
    let mlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    let json = body
        .get(16..16usize.saturating_add(mlen))
        .ok_or_else(|| LearnError::Format("manifest overruns file".into()))?;
    let m: PolicyManifest = serde_json::from_slice(json).map_err(|e| LearnError::Format(e.to_string()))?;
    let mut rest = &body[16 + mlen..];
    let mut values = Vec::with_capacity(m.tensors.len());
    for t in &m.tensors {
        let nbytes = t.len * 8;
        if rest.len() < nbytes {
            return Err(LearnError::Format(format!("tensor {} overruns file", t.name)));
        }
        let (chunk, r) = rest.split_at(nbytes);
        values.push(chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect::<Vec<f64>>());
        rest = r;
    }
    if !rest.is_empty() {
        return Err(LearnError::Format(format!("{} trailing bytes", rest.len())));
    }
    let mut p = PolicyParams::new(m.config, m.workspace, m.normalizer);
    if p.actor.spec != m.actor_spec || p.critic1.spec != m.critic_spec {
        return Err(LearnError::Format("network layout disagrees with config".into()));
    }
    let expected: Vec<(String, usize)> = tensors(&p).into_iter().map(|(n, v)| (n, v.len())).collect();
    let found: Vec<(String, usize)> = m.tensors.iter().map(|t| (t.name.clone(), t.len)).collect();
    if expected != found {
        return Err(LearnError::Format("tensor list disagrees with network layout".into()));
    }
    let mut it = values.into_iter();
    for net in [
        &mut p.actor,
        &mut p.critic1,
        &mut p.critic2,
        &mut p.actor_target,
        &mut p.critic1_target,
        &mut p.critic2_target,
    ] {
        net.params = it.next().unwrap();
        net.running_mean = it.next().unwrap();
        net.running_var = it.next().unwrap();
    }
    for (opt, t) in [&mut p.actor_opt, &mut p.critic1_opt, &mut p.critic2_opt].into_iter().zip(m.optimizer_steps) {
        opt.m = it.next().unwrap();
        opt.v = it.next().unwrap();
        opt.t = t;
    }
    p.steps_done = m.steps_done;
    Ok(p)
}

pub fn save_policy(p: &PolicyParams, path: &Path) -> Result<(), LearnError> {
    let io = |source| LearnError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&encode_policy(p)).map_err(io)
}

pub fn load_policy(path: &Path) -> Result<PolicyParams, LearnError> {
    let bytes = fs::read(path).map_err(|source| LearnError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_policy(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::toy_dataset;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_config() -> TrainConfig {
        TrainConfig {
            hidden_layers: 2,
            hidden_width: 16,
            batch_size: 32,
            total_steps: 40,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lambda_hand_cases() {
        assert_eq!(compute_lambda(&[2.5, 2.5, 2.5], 2.5), 1.0);
        assert_eq!(compute_lambda(&[2.5, 5.0], 2.5), 0.75);
        assert_eq!(compute_lambda(&[-1.0, 3.0], 0.0), 0.0);
        assert_eq!(compute_lambda(&[0.0], 1.0), 1e8);
    }

    proptest! {
        #[test]
        fn lambda_scale_equivariant(q in prop::collection::vec(0.01f64..10.0, 1..20), c in 0.1f64..10.0, alpha in 0.1f64..5.0) {
            let scaled: Vec<f64> = q.iter().map(|v| -v * c).collect();
            let a = compute_lambda(&q, alpha);
            let b = compute_lambda(&scaled, alpha);
            prop_assert!((b * c - a).abs() <= 1e-12 * a);
        }

        #[test]
        fn actions_stay_inside_workspace(raw in prop::collection::vec(-50.0f64..50.0, INPUT_DIM), seed in 0u64..20) {
            let cfg = TrainConfig { hidden_layers: 2, hidden_width: 8, seed, ..TrainConfig::default() };
            let mut p = PolicyParams::new(cfg, Workspace::default(), Normalizer::identity(INPUT_DIM));
            for v in p.actor.params.iter_mut() {
                *v *= 30.0;
            }
            let a = p.actor_forward(&raw, Mode::Eval).unwrap().remove(0);
            let ranges = Workspace::default().action_ranges();
            for (v, r) in a.to_array().iter().zip(&ranges) {
                prop_assert!(r.contains(*v));
            }
        }
    }

    /// Largest per-block relative error between analytic and central-difference gradients.
    fn worst_block_error(net: &Net, analytic: &[f64], loss: impl Fn(&Net) -> f64) -> f64 {
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for b in net.spec.blocks() {
            let (mut diff, mut scale) = (0.0f64, 0.0f64);
            for i in b.offset..b.offset + b.len {
                let mut p = net.clone();
                p.params[i] += h;
                let up = loss(&p);
                p.params[i] -= 2.0 * h;
                let fd = (up - loss(&p)) / (2.0 * h);
                diff += (fd - analytic[i]).powi(2);
                scale = scale.max(fd.abs()).max(analytic[i].abs());
            }
            if scale > 0.0 {
                worst = worst.max(diff.sqrt() / (scale * (b.len as f64).sqrt()));
            }
        }
        worst
    }

    fn gradient_fixture(seed: u64) -> (PolicyParams, Batch) {
        let ds = toy_dataset(3, 10);
        let cfg = TrainConfig { hidden_width: 8, batch_size: 6, seed, ..small_config() };
        let (mut p, table) = prepare(&ds, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for net in [&mut p.actor, &mut p.critic1] {
            for v in net.running_mean.iter_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
            for v in net.running_var.iter_mut() {
                *v = rng.gen_range(0.5..2.0);
            }
        }
        (p, table.sample(seed, 0, 6))
    }

    #[test]
    fn critic_loss_gradients() {
        for seed in 0..3 {
            let (p, b) = gradient_fixture(seed);
            let x = critic_input(&b.states, &b.actions);
            let target: Vec<f64> = b.rewards.iter().map(|r| r - 0.3).collect();
            for mode in [Mode::Eval, Mode::Train] {
                let (_, grad, _) = critic_objective(&p.critic1, &x, &target, mode, None);
                let err = worst_block_error(&p.critic1, &grad, |n| critic_objective(n, &x, &target, mode, None).0);
                assert!(err < 1e-4, "{mode:?} {err}");
            }
        }
    }

    #[test]
    fn actor_loss_gradients() {
        for seed in 0..3 {
            let (p, b) = gradient_fixture(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 10);
            let masks = p.actor.sample_masks(&mut rng, b.len());
            for (mode, m) in [(Mode::Eval, None), (Mode::Train, masks.as_ref())] {
                let obj = actor_objective(&p.actor, Some(&p.critic1), &b.states, &b.actions, mode, m, |q| {
                    compute_lambda(q, 2.5)
                });
                let lambda = obj.lambda;
                assert!(lambda > 0.0);
                let err = worst_block_error(&p.actor, &obj.grad, |n| {
                    actor_objective(n, Some(&p.critic1), &b.states, &b.actions, mode, m, |_| lambda).loss
                });
                assert!(err < 1e-4, "{mode:?} {err}");
            }
        }
    }

    #[test]
    fn zero_networks() {
        let cfg = small_config();
        let mut p = PolicyParams::new(cfg.clone(), Workspace::default(), Normalizer::identity(INPUT_DIM));
        p.actor = Net::zeros(p.actor.spec.clone());
        p.critic1 = Net::zeros(p.critic1.spec.clone());
        let raw = vec![0.2; INPUT_DIM];
        let a = p.actor_forward(&raw, Mode::Eval).unwrap().remove(0);
        let mids: Vec<f64> = Workspace::default().action_ranges().iter().map(|r| r.mid()).collect();
        assert_eq!(a.to_array().to_vec(), mids);
        assert_eq!(p.critic_forward(&raw, &a, Critic::Q1).unwrap(), 0.0);
        assert_ne!(
            p.critic_forward(&raw, &a, Critic::Q2).unwrap(),
            p.critic_forward(&raw, &a, Critic::Target1).unwrap()
        );
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let p = PolicyParams::new(small_config(), Workspace::default(), Normalizer::identity(INPUT_DIM));
        let mut raw = vec![0.0; INPUT_DIM];
        raw[3] = f64::NAN;
        assert!(matches!(p.actor_forward(&raw, Mode::Eval), Err(LearnError::NonFinite)));
        let a = Action::from_array(&[0.4, 0.2, 0.4, -0.2, 0.0, 0.0]);
        assert!(matches!(p.critic_forward(&raw, &a, Critic::Q1), Err(LearnError::NonFinite)));
    }

    #[test]
    fn terminal_transition_targets_reward() {
        let p = PolicyParams::new(small_config(), Workspace::default(), Normalizer::identity(INPUT_DIM));
        let batch = Batch {
            states: vec![0.1; INPUT_DIM],
            actions: vec![0.0; ACTION_DIM],
            rewards: vec![0.0],
            next_states: vec![0.3; INPUT_DIM],
            done: vec![true],
        };
        let mut rng = stream(0, STREAM_CRITIC, 0);
        assert_eq!(critic_targets(&p, &batch, &mut rng), vec![0.0]);
    }

    #[test]
    fn transition_table_links_and_terminals() {
        let ds = toy_dataset(3, 5);
        let (_, t) = TransitionTable::raw(&ds);
        assert_eq!(t.len(), ds.transition_count());
        assert_eq!(t.done.iter().filter(|d| **d).count(), 3);
        for i in 0..t.len() {
            assert_eq!(t.next[i], t.source[i] + 1);
        }
        assert!(t.done[3] && !t.done[2] && !t.done[4]);
        assert_eq!(t.rewards[0], ds.episodes[0].steps[1].reward);
    }

    #[test]
    fn normaliser_floor() {
        let rows = vec![1.0, 2.0, 1.0, 4.0];
        let n = Normalizer::fit(&rows, 2);
        assert_eq!(n.mean, vec![1.0, 3.0]);
        assert!(n.std.iter().all(|s| *s >= MIN_STD));
        assert!((n.std[1] - 1.001).abs() < 1e-12);
    }

    #[test]
    fn target_lag_is_exact() {
        let ds = toy_dataset(4, 12);
        let cfg = TrainConfig { policy_delay: 1, ..small_config() };
        let (mut p, table) = prepare(&ds, &cfg).unwrap();
        let before = p.clone();
        let batch = table.sample(cfg.seed, 0, cfg.batch_size);
        td3bc_update(&mut p, &batch, 0).unwrap();
        for (live, old, new) in [
            (&p.actor, &before.actor_target, &p.actor_target),
            (&p.critic1, &before.critic1_target, &p.critic1_target),
            (&p.critic2, &before.critic2_target, &p.critic2_target),
        ] {
            for i in 0..live.params.len() {
                assert_eq!(new.params[i], cfg.tau * live.params[i] + (1.0 - cfg.tau) * old.params[i]);
            }
        }
        assert_ne!(p.actor.params, before.actor.params);
    }

    #[test]
    fn zero_alpha_matches_behaviour_cloning() {
        let ds = toy_dataset(4, 12);
        let cfg = TrainConfig { alpha: 0.0, ..small_config() };
        let (mut rl, table) = prepare(&ds, &cfg).unwrap();
        let mut bc = rl.clone();
        let mut actor_updates = 0;
        for step in 0..40 {
            let batch = table.sample(cfg.seed, step, cfg.batch_size);
            let m = td3bc_update(&mut rl, &batch, step).unwrap();
            if m.actor_loss.is_some() {
                bc_update(&mut bc, &batch, step).unwrap();
                actor_updates += 1;
            }
        }
        assert_eq!(actor_updates, 20);
        for (a, b) in rl.actor.params.iter().zip(&bc.actor.params) {
            assert!((a - b).abs() <= 1e-10);
        }
        assert_ne!(rl.critic1.params, bc.critic1.params);
    }

    #[test]
    fn training_is_deterministic_and_logs() {
        let ds = toy_dataset(4, 12);
        let cfg = small_config();
        let (a, log) = train_logged(&ds, &cfg).unwrap();
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].step, 40);
        assert!(log[0].lambda > 0.0);
    }

    #[test]
    fn config_errors() {
        let ds = toy_dataset(2, 4);
        let too_big = TrainConfig { batch_size: 100, ..small_config() };
        assert!(matches!(prepare(&ds, &too_big), Err(LearnError::Config(_))));
        let bad_gamma = TrainConfig { gamma: 1.0, ..small_config() };
        assert!(matches!(prepare(&ds, &bad_gamma), Err(LearnError::Config(_))));
        let empty = Dataset {
            manifest: ds.manifest.clone(),
            episodes: vec![],
        };
        assert!(matches!(prepare(&empty, &small_config()), Err(LearnError::Config(_))));
    }

    #[test]
    fn policy_round_trip() {
        let ds = toy_dataset(4, 12);
        let p = train(&ds, &small_config()).unwrap();
        let bytes = encode_policy(&p);
        assert_eq!(&bytes[..4], b"DLOP");
        let q = decode_policy(&bytes).unwrap();
        assert_eq!(p, q);
        let raw = encode_input(&ds.episodes[0].goal, &ds.episodes[0].steps[0].observation);
        assert_eq!(p.actor_forward(&raw, Mode::Eval).unwrap(), q.actor_forward(&raw, Mode::Eval).unwrap());

        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_policy(&bytes[..cut]), Err(LearnError::Checksum)));
        }
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(decode_policy(&flipped), Err(LearnError::Checksum)));

        let mut other = bytes[..bytes.len() - 8].to_vec();
        other[4..8].copy_from_slice(&7u32.to_le_bytes());
        let sum = CHECKSUM.checksum(&other);
        other.extend_from_slice(&sum.to_le_bytes());
        assert!(matches!(decode_policy(&other), Err(LearnError::Version { found: 7 })));
    }

    #[test]
    fn policy_file_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.dlop");
        let p = PolicyParams::new(small_config(), Workspace::default(), Normalizer::identity(INPUT_DIM));
        save_policy(&p, &path).unwrap();
        assert_eq!(load_policy(&path).unwrap(), p);
        assert!(matches!(load_policy(&dir.path().join("missing")), Err(LearnError::Io { .. })));
    }
}
