//! DAgger distillation and hybrid sim-to-real control.
//!
//! The shipped instantiation is small on purpose: a 2-D point-mass reaching
//! task, a scripted proportional expert and a linear student refit by ridge
//! regression after every epoch.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::derive_seed;
use crate::linalg::cholesky_solve;
use crate::simworld::{chain_step, KinematicChain, SimError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DaggerError {
    #[error("vectors differ in length: {expected} vs {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("least-squares system is singular")]
    SingularFit,
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Probability of executing the expert action, decayed geometrically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutScheduler {
    p: f64,
    decay: f64,
}

impl RolloutScheduler {
    pub fn new(p0: f64, decay: f64) -> Result<Self, DaggerError> {
        if !(0.0..=1.0).contains(&p0) {
            return Err(DaggerError::InvalidConfig(format!("p0 {p0} outside [0, 1]")));
        }
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(DaggerError::InvalidConfig(format!("decay {decay} outside (0, 1]")));
        }
        Ok(Self { p: p0, decay })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn step(&mut self) -> f64 {
        self.p *= self.decay;
        self.p
    }
}

/// Expert action with probability `p`, otherwise the student's. The flag is
/// `true` when the expert's action was chosen.
pub fn choose_action<'a, R: Rng>(a_student: &'a [f64], a_expert: &'a [f64], p: f64, rng: &mut R) -> (&'a [f64], bool) {
    if rng.random::<f64>() < p {
        (a_expert, true)
    } else {
        (a_student, false)
    }
}

/// `|a - a*|_2^2 + |a - a*|_1`.
pub fn action_loss(a: &[f64], a_star: &[f64]) -> Result<f64, DaggerError> {
    if a.len() != a_star.len() {
        return Err(DaggerError::DimensionMismatch { expected: a_star.len(), got: a.len() });
    }
    Ok(a.iter().zip(a_star).map(|(x, y)| (x - y) * (x - y) + (x - y).abs()).sum())
}

/// Adds `U(-range, range)` at the proprioceptive indices only.
pub fn inject_proprio_noise<R: Rng>(obs: &[f64], proprio: &[usize], range: f64, rng: &mut R) -> Result<Vec<f64>, DaggerError> {
    let mut out = obs.to_vec();
    if range == 0.0 {
        return Ok(out);
    }
    for &i in proprio {
        let slot = out.get_mut(i).ok_or(DaggerError::DimensionMismatch { expected: obs.len(), got: i + 1 })?;
        *slot += rng.random_range(-range..=range);
    }
    Ok(out)
}

/// Fixed-capacity store of `(student observation, expert action)` pairs,
/// evicting the oldest entry first.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: VecDeque<(Vec<f64>, Vec<f64>)>,
}

pub const DEFAULT_BUFFER_CAPACITY: usize = 100_000;

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self, DaggerError> {
        if capacity == 0 {
            return Err(DaggerError::InvalidConfig("buffer capacity must be positive".into()));
        }
        Ok(Self { capacity, entries: VecDeque::new() })
    }

    pub fn push(&mut self, obs: Vec<f64>, action: Vec<f64>) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((obs, action));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &(Vec<f64>, Vec<f64>)> {
        self.entries.iter()
    }
}

pub trait Policy {
    fn act(&self, obs: &[f64]) -> Vec<f64>;
}

pub trait TrainablePolicy: Policy {
    fn fit(&mut self, data: &ReplayBuffer) -> Result<(), DaggerError>;
}

/// `a = W [obs; 1]`, refit by ridge regression on the whole buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPolicy {
    /// One row of `obs_dim + 1` weights (bias last) per action component.
    pub weights: Vec<Vec<f64>>,
    pub ridge: f64,
}

impl LinearPolicy {
    pub fn zeros(obs_dim: usize, act_dim: usize, ridge: f64) -> Self {
        Self { weights: vec![vec![0.0; obs_dim + 1]; act_dim], ridge }
    }
}

impl Policy for LinearPolicy {
    fn act(&self, obs: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w[..w.len() - 1].iter().zip(obs).map(|(a, b)| a * b).sum::<f64>() + w[w.len() - 1])
            .collect()
    }
}

impl TrainablePolicy for LinearPolicy {
    fn fit(&mut self, data: &ReplayBuffer) -> Result<(), DaggerError> {
        let n = self.weights[0].len();
        let mut xtx = vec![0.0; n * n];
        let mut xty = vec![vec![0.0; n]; self.weights.len()];
        let mut x = vec![1.0; n];
        for (obs, act) in data.iter() {
            if obs.len() + 1 != n || act.len() != self.weights.len() {
                return Err(DaggerError::DimensionMismatch { expected: n - 1, got: obs.len() });
            }
            x[..n - 1].copy_from_slice(obs);
            for i in 0..n {
                for j in 0..n {
                    xtx[i * n + j] += x[i] * x[j];
                }
                for (k, a) in act.iter().enumerate() {
                    xty[k][i] += x[i] * a;
                }
            }
        }
        for i in 0..n {
            xtx[i * n + i] += self.ridge;
        }
        for (k, rhs) in xty.iter().enumerate() {
            self.weights[k] = cholesky_solve(&xtx, rhs, n).ok_or(DaggerError::SingularFit)?;
        }
        Ok(())
    }
}

/// 2-D point mass reaching a goal. Observation `[pos_x, pos_y, goal_x, goal_y]`;
/// the position entries are proprioception.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub horizon: usize,
    pub dt: f64,
    pub action_bound: f64,
    pos: [f64; 2],
    goal: [f64; 2],
    t: usize,
}

pub const TOY_PROPRIO: [usize; 2] = [0, 1];

impl ToyTask {
    pub fn new(horizon: usize, dt: f64, action_bound: f64) -> Result<Self, DaggerError> {
        if horizon == 0 || !(dt > 0.0) || !(action_bound > 0.0) {
            return Err(DaggerError::InvalidConfig("horizon, dt and action bound must be positive".into()));
        }
        Ok(Self { horizon, dt, action_bound, pos: [0.0; 2], goal: [0.0; 2], t: 0 })
    }

    pub fn reset<R: Rng>(&mut self, rng: &mut R) {
        self.pos = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        self.goal = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        self.t = 0;
    }

    pub fn observation(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.goal[0], self.goal[1]]
    }

    /// Applies the clamped action; returns `(reward, episode_done)` with
    /// reward the negative distance to the goal after the move.
    pub fn step(&mut self, action: &[f64]) -> (f64, bool) {
        for (p, a) in self.pos.iter_mut().zip(action) {
            *p += a.clamp(-self.action_bound, self.action_bound) * self.dt;
        }
        self.t += 1;
        let d = (self.pos[0] - self.goal[0]).hypot(self.pos[1] - self.goal[1]);
        (-d, self.t >= self.horizon)
    }
}

/// Proportional expert `a = gain (goal - pos)`, clamped to the bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScriptedExpert {
    pub gain: f64,
    pub bound: f64,
}

impl Policy for ScriptedExpert {
    fn act(&self, obs: &[f64]) -> Vec<f64> {
        (0..2).map(|i| (self.gain * (obs[i + 2] - obs[i])).clamp(-self.bound, self.bound)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaggerConfig {
    pub epochs: usize,
    /// Environment steps per epoch.
    pub rollout_len: usize,
    pub p0: f64,
    pub decay: f64,
    /// Decay once per epoch instead of once per environment step.
    pub decay_per_epoch: bool,
    pub buffer_capacity: usize,
    pub proprio_noise: f64,
    pub probe_size: usize,
    pub seed: u64,
}

impl Default for DaggerConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            rollout_len: 64,
            p0: 1.0,
            decay: 0.93,
            decay_per_epoch: false,
            buffer_capacity: DEFAULT_BUFFER_CAPACITY,
            proprio_noise: 0.01,
            probe_size: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Scheduler probability at the end of the epoch.
    pub p: f64,
    pub buffer_size: usize,
    pub probe_loss: f64,
    /// Sum of rewards collected during the epoch's rollout.
    pub rollout_return: f64,
    pub expert_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaggerReport {
    /// Probe loss of the untrained student.
    pub initial_probe_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub final_p: f64,
}

/// Mean action loss of `student` against `expert` on clean probe observations.
pub fn probe_loss<S: Policy + ?Sized, E: Policy + ?Sized>(student: &S, expert: &E, probe: &[Vec<f64>]) -> f64 {
    let total: f64 = probe
        .iter()
        .map(|o| action_loss(&student.act(o), &expert.act(o)).expect("policies share the action dimension"))
        .sum();
    total / probe.len().max(1) as f64
}

/// Fixed held-out observations for the probe loss.
pub fn probe_set(env: &ToyTask, size: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e = env.clone();
    (0..size)
        .map(|_| {
            e.reset(&mut rng);
            e.observation()
        })
        .collect()
}

/// The DAgger loop: roll out a mix of expert and student actions, store
/// (noisy student observation, clean expert action) pairs, refit the
/// student after each epoch and score it on the probe set.
pub fn dagger_train<E: Policy, S: TrainablePolicy>(
    env: &mut ToyTask,
    expert: &E,
    student: &mut S,
    cfg: &DaggerConfig,
) -> Result<DaggerReport, DaggerError> {
    let mut scheduler = RolloutScheduler::new(cfg.p0, cfg.decay)?;
    if !(cfg.proprio_noise >= 0.0) {
        return Err(DaggerError::InvalidConfig("proprio noise must be non-negative".into()));
    }
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity)?;
    let probe = probe_set(env, cfg.probe_size, derive_seed(cfg.seed, 0));
    let initial_probe_loss = probe_loss(student, expert, &probe);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    env.reset(&mut rng);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut rollout_return = 0.0;
        let mut expert_steps = 0;
        for _ in 0..cfg.rollout_len {
            let clean = env.observation();
            let noisy = inject_proprio_noise(&clean, &TOY_PROPRIO, cfg.proprio_noise, &mut rng)?;
            let a_student = student.act(&noisy);
            let a_expert = expert.act(&clean);
            let (action, from_expert) = choose_action(&a_student, &a_expert, scheduler.p(), &mut rng);
            expert_steps += from_expert as usize;
            let (reward, done) = env.step(action);
            rollout_return += reward;
            buffer.push(noisy, a_expert.clone());
            if done {
                env.reset(&mut rng);
            }
            if !cfg.decay_per_epoch {
                scheduler.step();
            }
        }
        if cfg.decay_per_epoch {
            scheduler.step();
        }
        if !buffer.is_empty() {
            student.fit(&buffer)?;
        }
        epochs.push(EpochRecord {
            epoch,
            p: scheduler.p(),
            buffer_size: buffer.len(),
            probe_loss: probe_loss(student, expert, &probe),
            rollout_return,
            expert_steps,
        });
    }
    Ok(DaggerReport { initial_probe_loss, epochs, final_p: scheduler.p() })
}

// ---------------------------------------------------------------------------
// Hybrid control

/// Joint-space policy: a bounded step toward a goal configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachingPolicy {
    pub goal: Vec<f64>,
    pub gain: f64,
    pub max_delta: f64,
}

impl Policy for ReachingPolicy {
    fn act(&self, q: &[f64]) -> Vec<f64> {
        q.iter()
            .zip(&self.goal)
            .map(|(q, g)| (self.gain * (g - q)).clamp(-self.max_delta, self.max_delta))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointTrace {
    /// Joint positions per step, starting with the initial configuration.
    pub sim: Vec<Vec<f64>>,
    pub real: Vec<Vec<f64>>,
    /// `|q_sim - q_real|` per recorded step.
    pub deviation: Vec<f64>,
    /// Steps on which a chain clamped at a joint limit.
    pub limit_hits: usize,
}

impl JointTrace {
    fn start(sim: &KinematicChain, real: &KinematicChain) -> Self {
        Self { sim: vec![sim.q.clone()], real: vec![real.q.clone()], deviation: vec![deviation(&sim.q, &real.q)], limit_hits: 0 }
    }

    fn record(&mut self, sim: &KinematicChain, real: &KinematicChain, hit: bool) {
        self.deviation.push(deviation(&sim.q, &real.q));
        self.sim.push(sim.q.clone());
        self.real.push(real.q.clone());
        self.limit_hits += hit as usize;
    }

    pub fn terminal_deviation(&self) -> f64 {
        *self.deviation.last().expect("trace holds the initial state")
    }
}

fn deviation(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_dims(sim: &KinematicChain, real: &KinematicChain) -> Result<(), DaggerError> {
    if sim.dof() != real.dof() {
        return Err(DaggerError::DimensionMismatch { expected: sim.dof(), got: real.dof() });
    }
    Ok(())
}

/// Hybrid loop: the policy reads the real joints, the simulated chain
/// executes the action, and the real chain tracks the simulator's joints.
pub fn hybrid_control_loop<P: Policy>(
    policy: &P,
    sim: &KinematicChain,
    real: &KinematicChain,
    steps: usize,
    dt: f64,
) -> Result<JointTrace, DaggerError> {
    check_dims(sim, real)?;
    let (mut sim, mut real) = (sim.clone(), real.clone());
    let mut trace = JointTrace::start(&sim, &real);
    for _ in 0..steps {
        let a = policy.act(&real.q);
        let target: Vec<f64> = sim.q.iter().zip(&a).map(|(q, d)| q + d).collect();
        let (s, hit_s) = chain_step(&sim, &target, dt)?;
        let (r, hit_r) = chain_step(&real, &s.q, dt)?;
        sim = s;
        real = r;
        trace.record(&sim, &real, hit_s || hit_r);
    }
    Ok(trace)
}

/// Naive baseline: the policy's action is sent straight to the real chain
/// (target `q_real + a`) while the simulator integrates the same actions.
pub fn naive_control_loop<P: Policy>(
    policy: &P,
    sim: &KinematicChain,
    real: &KinematicChain,
    steps: usize,
    dt: f64,
) -> Result<JointTrace, DaggerError> {
    check_dims(sim, real)?;
    let (mut sim, mut real) = (sim.clone(), real.clone());
    let mut trace = JointTrace::start(&sim, &real);
    for _ in 0..steps {
        let a = policy.act(&real.q);
        let sim_target: Vec<f64> = sim.q.iter().zip(&a).map(|(q, d)| q + d).collect();
        let real_target: Vec<f64> = real.q.iter().zip(&a).map(|(q, d)| q + d).collect();
        let (s, hit_s) = chain_step(&sim, &sim_target, dt)?;
        let (r, hit_r) = chain_step(&real, &real_target, dt)?;
        sim = s;
        real = r;
        trace.record(&sim, &real, hit_s || hit_r);
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridConfig {
    pub dof: usize,
    pub steps: usize,
    pub dt: f64,
    pub tau_real: f64,
    pub gain: f64,
    pub max_delta: f64,
    pub joint_limit: f64,
    pub seed: u64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self { dof: 4, steps: 60, dt: 0.05, tau_real: 0.15, gain: 0.3, max_delta: 0.1, joint_limit: 2.5, seed: 0 }
    }
}

/// Paired hybrid and naive runs from one seeded start and goal. The
/// simulator lag equals `dt` (it reaches commanded positions in one step).
pub fn hybrid_experiment(cfg: &HybridConfig) -> Result<(JointTrace, JointTrace), DaggerError> {
    if cfg.dof == 0 || !(cfg.dt > 0.0) || !(cfg.tau_real > 0.0) || !(cfg.joint_limit > 0.0) {
        return Err(DaggerError::InvalidConfig("dof, dt, tau_real and joint_limit must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let span = 0.8 * cfg.joint_limit;
    let q0: Vec<f64> = (0..cfg.dof).map(|_| rng.random_range(-span..span)).collect();
    let goal: Vec<f64> = (0..cfg.dof).map(|_| rng.random_range(-span..span)).collect();
    let lim = cfg.joint_limit;
    let sim = KinematicChain::uniform(q0.clone(), cfg.dt, -lim, lim)?;
    let real = KinematicChain::uniform(q0, cfg.tau_real, -lim, lim)?;
    let policy = ReachingPolicy { goal, gain: cfg.gain, max_delta: cfg.max_delta };
    Ok((
        hybrid_control_loop(&policy, &sim, &real, cfg.steps, cfg.dt)?,
        naive_control_loop(&policy, &sim, &real, cfg.steps, cfg.dt)?,
    ))
}
