//! Command-line front end: TOML experiment configs with dotted overrides,
//! one runner per subcommand, and the CSV / graymap artifacts they write.
//!
//! Every runner returns the list of files it wrote; nothing is written
//! before the config has been fully validated.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::dagger::{
    dagger_train, hybrid_experiment, DaggerConfig, DaggerError, HybridConfig, JointTrace, LinearPolicy, RolloutScheduler,
    ScriptedExpert, ToyTask,
};
use crate::depth_aug::{
    format_histogram_csv, load_pgm, real_pipeline, save_pgm, sim_pipeline, AugmentConfig, DepthError, DepthImage,
    DEFAULT_PGM_SCALE,
};
use crate::derive_seed;
use crate::geometry::{Pose, Vec3};
use crate::pnp_servo::{servo_loop, ServoConfig, ServoError};
use crate::rewards::{
    chain_reward, contact_count, object_tracking_reward, power_penalty, should_terminate_early, total_reward, ContactSet,
    DistanceChain, JointState, RewardConfig, RewardError, CHAIN_LEN,
};
use crate::simworld::{generate_field, ground_truth_error, run_trial, BaseState, Scenario, SimError, SimWorld, TrialResult, WorldConfig};
use crate::trajectory::{
    load_trajectory, parse_header, Fields, HandKeypoints, ReferenceTrajectory, TrajectoryError, KEYPOINTS_PER_HAND,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Parse { path: PathBuf, source: TrajectoryError },
    #[error("{}: {source}", path.display())]
    Image { path: PathBuf, source: DepthError },
    #[error(transparent)]
    Depth(#[from] DepthError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Servo(#[from] ServoError),
    #[error("sweep trial {trial}: {source}")]
    Trial { trial: usize, source: ServoError },
    #[error(transparent)]
    Dagger(#[from] DaggerError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

// ---------------------------------------------------------------------------
// Arguments

#[derive(Debug, Parser)]
#[command(name = "sim2real", version, about = "Sim2real experiment runner")]
pub struct Cli {
    /// TOML experiment config; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config's `out`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Dotted config override such as `servo.max_steps=50` (repeatable).
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DepthMode {
    Sim,
    Real,
}

impl DepthMode {
    fn as_str(self) -> &'static str {
        match self {
            DepthMode::Sim => "sim",
            DepthMode::Real => "real",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// One closed-loop servo episode.
    Servo,
    /// Seeded servo episodes with the open-loop baseline alongside.
    Sweep {
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Per-step rewards of a rollout log against a reference trajectory.
    RewardEval {
        #[arg(long, value_name = "PATH")]
        trajectory: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        rollout: Option<PathBuf>,
    },
    /// Augments one depth graymap and writes its histogram.
    Depth {
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "sim")]
        mode: DepthMode,
    },
    /// DAgger distillation on the toy reaching task.
    Dagger,
    /// Paired hybrid and naive joint-space control traces.
    Hybrid,
}

// ---------------------------------------------------------------------------
// Config

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub n_landmarks: Option<usize>,
    pub field_volume: Option<[(f64, f64); 3]>,
    pub fx: Option<f64>,
    pub fy: Option<f64>,
    pub cx: Option<f64>,
    pub cy: Option<f64>,
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub camera_mount: Option<[f64; 3]>,
    pub near_clip: Option<f64>,
    pub max_depth: Option<f64>,
    pub pixel_noise_sigma: Option<f64>,
    pub outlier_fraction: Option<f64>,
    pub depth_noise_sigma: Option<f64>,
    pub actuation_noise_sigma: Option<f64>,
    pub coupling_gain: Option<f64>,
    pub splat_radius: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServoSection {
    pub eps_x: Option<f64>,
    pub eps_y: Option<f64>,
    /// Radians.
    pub eps_yaw: Option<f64>,
    pub ransac_max_iterations: Option<usize>,
    pub ransac_confidence: Option<f64>,
    pub inlier_threshold_px: Option<f64>,
    pub refine_max_iterations: Option<usize>,
    pub refine_tolerance: Option<f64>,
    pub dt: Option<f64>,
    pub max_steps: Option<usize>,
    pub simultaneous: Option<bool>,
    pub max_consecutive_failures: Option<usize>,
    pub kp_linear: Option<f64>,
    pub ki_linear: Option<f64>,
    pub kd_linear: Option<f64>,
    pub integral_clamp_linear: Option<f64>,
    pub output_clamp_linear: Option<f64>,
    pub kp_yaw: Option<f64>,
    pub ki_yaw: Option<f64>,
    pub kd_yaw: Option<f64>,
    pub integral_clamp_yaw: Option<f64>,
    pub output_clamp_yaw: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub goal_x: Option<f64>,
    pub goal_y: Option<f64>,
    pub goal_yaw: Option<f64>,
    pub max_offset_m: Option<f64>,
    pub max_yaw_rad: Option<f64>,
    /// Fixed start for `servo`; unset coordinates default to the goal's.
    pub start_x: Option<f64>,
    pub start_y: Option<f64>,
    pub start_yaw: Option<f64>,
    pub trials: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSection {
    pub clip_distance: Option<f64>,
    pub clip_min: Option<f64>,
    pub clip_max: Option<f64>,
    pub noise_sigma: Option<f64>,
    pub blur_sigma: Option<f64>,
    pub dropout_fraction: Option<f64>,
    pub mixup_alpha: Option<f64>,
    /// Dataset image blended in by mixup.
    pub dataset: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub bins: Option<usize>,
    /// Meters per 16-bit unit in written graymaps.
    pub pgm_scale: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub k1: Option<f64>,
    pub k2: Option<f64>,
    pub lambda: Option<f64>,
    pub n_num: Option<usize>,
    pub w_chain: Option<f64>,
    pub w_obj: Option<f64>,
    pub termination_threshold: Option<f64>,
    /// Tracked object id; the trajectory's first object by default.
    pub object: Option<String>,
    pub trajectory: Option<PathBuf>,
    pub rollout: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaggerSection {
    pub epochs: Option<usize>,
    pub rollout_len: Option<usize>,
    pub p0: Option<f64>,
    pub decay: Option<f64>,
    pub decay_per_epoch: Option<bool>,
    pub buffer_capacity: Option<usize>,
    pub proprio_noise: Option<f64>,
    pub probe_size: Option<usize>,
    pub horizon: Option<usize>,
    pub task_dt: Option<f64>,
    pub action_bound: Option<f64>,
    pub expert_gain: Option<f64>,
    pub ridge: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HybridSection {
    pub dof: Option<usize>,
    pub steps: Option<usize>,
    pub dt: Option<f64>,
    pub tau_real: Option<f64>,
    pub gain: Option<f64>,
    pub max_delta: Option<f64>,
    pub joint_limit: Option<f64>,
}

/// Raw config file contents. Every key is optional; unknown keys are errors.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub world: WorldSection,
    pub servo: ServoSection,
    pub scenario: ScenarioSection,
    pub augmentation: AugmentationSection,
    pub reward: RewardSection,
    pub dagger: DaggerSection,
    pub hybrid: HybridSection,
}

macro_rules! overlay {
    ($sec:expr, $cfg:expr; $($f:ident),* $(,)?) => {
        $(if let Some(v) = &$sec.$f { $cfg.$f = v.clone(); })*
    };
}

/// Toy-task settings around the DAgger loop.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySettings {
    pub horizon: usize,
    pub dt: f64,
    pub action_bound: f64,
    pub expert_gain: f64,
    pub ridge: f64,
}

/// Fully resolved and validated settings.
#[derive(Debug, Clone)]
pub struct Settings {
    pub seed: u64,
    pub out: PathBuf,
    pub world: WorldConfig,
    pub servo: ServoConfig<f64>,
    pub scenario: Scenario,
    pub fixed_start: Option<BaseState>,
    pub trials: usize,
    pub augment: AugmentConfig<f64>,
    pub dataset: Option<PathBuf>,
    pub depth_input: Option<PathBuf>,
    pub bins: usize,
    pub pgm_scale: f64,
    pub reward: RewardConfig<f64>,
    pub termination_threshold: f64,
    pub reward_object: Option<String>,
    pub trajectory: Option<PathBuf>,
    pub rollout: Option<PathBuf>,
    pub dagger: DaggerConfig,
    pub toy: ToySettings,
    pub hybrid: HybridConfig,
}

// Seed streams hung off the master seed.
const STREAM_WORLD: u64 = 1;
const STREAM_SERVO: u64 = 2;
const STREAM_START: u64 = 3;
const STREAM_AUGMENT: u64 = 4;
const STREAM_DAGGER: u64 = 5;
const STREAM_HYBRID: u64 = 6;
const STREAM_SWEEP: u64 = 7;

/// Parses `key=value`, reading the value as a TOML literal and falling back
/// to a bare string, and stores it at the dotted key path.
pub fn apply_override(root: &mut toml::Table, arg: &str) -> Result<(), CliError> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {arg:?} is not key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let path: Vec<&str> = key.split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed override key {key:?}")));
    }
    let mut table = root;
    for part in &path[..path.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?}: {part:?} is not a section")))?;
    }
    table.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

/// Reads the config file (if any), applies overrides and deserializes.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let mut table = match path {
        Some(p) => read_file(p)?
            .parse::<toml::Table>()
            .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn must_exist(what: &str, p: &Option<PathBuf>) -> Result<(), CliError> {
    match p {
        Some(p) if !p.is_file() => Err(CliError::Config(format!("{what} file {} does not exist", p.display()))),
        _ => Ok(()),
    }
}

impl Settings {
    /// Resolves a parsed config against the defaults. Relative paths in the
    /// file are taken relative to the file's directory.
    pub fn resolve(cfg: &ExperimentConfig, config_dir: &Path) -> Result<Self, CliError> {
        let bad = |m: String| CliError::Config(m);
        let seed = cfg.seed.unwrap_or(0);

        let mut world = WorldConfig { seed: derive_seed(seed, STREAM_WORLD), ..WorldConfig::default() };
        let w = &cfg.world;
        overlay!(w, world; n_landmarks, field_volume, fx, fy, cx, cy, width, height, camera_mount, near_clip, max_depth,
            pixel_noise_sigma, outlier_fraction, depth_noise_sigma, actuation_noise_sigma, coupling_gain, splat_radius);
        world.validate()?;

        let mut servo = ServoConfig { seed: derive_seed(seed, STREAM_SERVO), extrinsic: world.camera_extrinsic(), ..ServoConfig::default() };
        let s = &cfg.servo;
        overlay!(s, servo; eps_x, eps_y, eps_yaw, ransac_max_iterations, ransac_confidence, inlier_threshold_px,
            refine_max_iterations, refine_tolerance, dt, max_steps, simultaneous, max_consecutive_failures);
        for (i, kind) in [(0, "linear"), (1, "linear"), (2, "yaw")] {
            let g = &mut servo.gains[i];
            let (kp, ki, kd, ic, oc) = if kind == "linear" {
                (s.kp_linear, s.ki_linear, s.kd_linear, s.integral_clamp_linear, s.output_clamp_linear)
            } else {
                (s.kp_yaw, s.ki_yaw, s.kd_yaw, s.integral_clamp_yaw, s.output_clamp_yaw)
            };
            g.kp = kp.unwrap_or(g.kp);
            g.ki = ki.unwrap_or(g.ki);
            g.kd = kd.unwrap_or(g.kd);
            g.integral_clamp = ic.unwrap_or(g.integral_clamp);
            g.output_clamp = oc.unwrap_or(g.output_clamp);
        }
        servo.validate().map_err(|e| bad(format!("servo: {e}")))?;

        let sc = &cfg.scenario;
        let mut scenario = Scenario::default();
        scenario.goal = BaseState::new(sc.goal_x.unwrap_or(0.0), sc.goal_y.unwrap_or(0.0), sc.goal_yaw.unwrap_or(0.0));
        scenario.max_offset_m = sc.max_offset_m.unwrap_or(scenario.max_offset_m);
        scenario.max_yaw_rad = sc.max_yaw_rad.unwrap_or(scenario.max_yaw_rad);
        if !(scenario.max_offset_m >= 0.0 && scenario.max_yaw_rad >= 0.0) {
            return Err(bad("scenario offsets must be non-negative".into()));
        }
        let fixed_start = (sc.start_x.is_some() || sc.start_y.is_some() || sc.start_yaw.is_some()).then(|| {
            let g = scenario.goal;
            BaseState::new(sc.start_x.unwrap_or(g.x), sc.start_y.unwrap_or(g.y), sc.start_yaw.unwrap_or(g.yaw))
        });
        let trials = sc.trials.unwrap_or(100);

        let a = &cfg.augmentation;
        let mut augment = AugmentConfig { seed: derive_seed(seed, STREAM_AUGMENT), ..AugmentConfig::default() };
        overlay!(a, augment; clip_distance, noise_sigma, blur_sigma, dropout_fraction);
        augment.clip_range = (a.clip_min.unwrap_or(augment.clip_range.0), a.clip_max.unwrap_or(augment.clip_range.1));
        augment.mixup_alpha = a.mixup_alpha;
        augment.validate()?;
        let bins = a.bins.unwrap_or(32);
        let pgm_scale = a.pgm_scale.unwrap_or(DEFAULT_PGM_SCALE);
        if bins == 0 || !(pgm_scale > 0.0) {
            return Err(bad("augmentation: bins and pgm_scale must be positive".into()));
        }

        let r = &cfg.reward;
        let mut reward = RewardConfig::default();
        overlay!(r, reward; k1, k2, lambda, n_num, w_chain, w_obj);
        reward.validate()?;
        let termination_threshold = r.termination_threshold.unwrap_or(0.3);
        if !(termination_threshold > 0.0) {
            return Err(bad("reward: termination_threshold must be positive".into()));
        }

        let d = &cfg.dagger;
        let mut dagger = DaggerConfig { seed: derive_seed(seed, STREAM_DAGGER), ..DaggerConfig::default() };
        overlay!(d, dagger; epochs, rollout_len, p0, decay, decay_per_epoch, buffer_capacity, proprio_noise, probe_size);
        RolloutScheduler::new(dagger.p0, dagger.decay)?;
        let toy = ToySettings {
            horizon: d.horizon.unwrap_or(16),
            dt: d.task_dt.unwrap_or(0.1),
            action_bound: d.action_bound.unwrap_or(1.0),
            expert_gain: d.expert_gain.unwrap_or(0.5),
            ridge: d.ridge.unwrap_or(1e-6),
        };
        ToyTask::new(toy.horizon, toy.dt, toy.action_bound)?;
        if !(toy.expert_gain > 0.0 && toy.ridge >= 0.0 && dagger.proprio_noise >= 0.0) || dagger.buffer_capacity == 0 {
            return Err(bad("dagger: expert_gain and buffer_capacity must be positive, ridge and noise non-negative".into()));
        }

        let h = &cfg.hybrid;
        let mut hybrid = HybridConfig { seed: derive_seed(seed, STREAM_HYBRID), ..HybridConfig::default() };
        overlay!(h, hybrid; dof, steps, dt, tau_real, gain, max_delta, joint_limit);
        if hybrid.dof == 0 || !(hybrid.dt > 0.0 && hybrid.tau_real > 0.0 && hybrid.joint_limit > 0.0 && hybrid.max_delta > 0.0) {
            return Err(bad("hybrid: dof, dt, tau_real, max_delta and joint_limit must be positive".into()));
        }

        let path = |p: &Option<PathBuf>| p.as_deref().map(|p| resolve(config_dir, p));
        let settings = Self {
            seed,
            out: path(&cfg.out).unwrap_or_else(|| PathBuf::from("out")),
            world,
            servo,
            scenario,
            fixed_start,
            trials,
            augment,
            dataset: path(&a.dataset),
            depth_input: path(&a.input),
            bins,
            pgm_scale,
            reward,
            termination_threshold,
            reward_object: r.object.clone(),
            trajectory: path(&r.trajectory),
            rollout: path(&r.rollout),
            dagger,
            toy,
            hybrid,
        };
        settings.check_files()?;
        Ok(settings)
    }

    fn check_files(&self) -> Result<(), CliError> {
        must_exist("augmentation dataset", &self.dataset)?;
        must_exist("depth input", &self.depth_input)?;
        must_exist("trajectory", &self.trajectory)?;
        must_exist("rollout", &self.rollout)
    }

    /// Loads, overrides, applies the global flags and validates.
    pub fn from_cli(cli: &Cli) -> Result<Self, CliError> {
        let cfg = load_config(cli.config.as_deref(), &cli.overrides)?;
        let cfg = ExperimentConfig { seed: cli.seed.or(cfg.seed), ..cfg };
        let dir = cli
            .config
            .as_deref()
            .and_then(Path::parent)
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let mut s = Self::resolve(&cfg, &dir)?;
        if let Some(out) = &cli.out {
            s.out = out.clone();
        }
        match &cli.command {
            Command::Sweep { trials: Some(n) } => s.trials = *n,
            Command::RewardEval { trajectory, rollout } => {
                s.trajectory = trajectory.clone().or(s.trajectory.take());
                s.rollout = rollout.clone().or(s.rollout.take());
            }
            Command::Depth { input: Some(p), .. } => s.depth_input = Some(p.clone()),
            _ => {}
        }
        s.check_files()?;
        Ok(s)
    }
}

// ---------------------------------------------------------------------------
// Rollout logs

pub const ROLLOUT_VERSION: &str = "v1";
pub const ROLLOUT_LAYOUT: &str =
    "step,object[id,px,py,pz,qw,qx,qy,qz]*n,left[kp6x3],right[kp6x3],contacts,force[m],velocity[m]";

/// One logged policy step. Contacts are (hand part, object index) pairs;
/// parts 0..6 are the left hand's fingertips and palm, 6..12 the right's.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStep {
    pub step: usize,
    pub objects: Vec<(String, Pose<f64>)>,
    pub left: HandKeypoints<f64>,
    pub right: HandKeypoints<f64>,
    pub contacts: ContactSet,
    pub joints: JointState<f64>,
}

/// Serializes steps in the rollout log format. All steps must share the
/// object count and joint count of the first.
pub fn format_rollout(steps: &[RolloutStep]) -> String {
    let n_objects = steps.first().map_or(0, |s| s.objects.len());
    let n_joints = steps.first().map_or(0, |s| s.joints.forces().len());
    let mut out = format!("#rollout {ROLLOUT_VERSION} objects={n_objects} joints={n_joints} layout={ROLLOUT_LAYOUT}\n");
    for s in steps {
        let mut fields = vec![s.step.to_string()];
        for (id, pose) in &s.objects {
            fields.push(id.clone());
            fields.extend(pose.to_array7().iter().map(f64::to_string));
        }
        for hand in [&s.left, &s.right] {
            for k in hand.points() {
                fields.extend(k.to_array().iter().map(f64::to_string));
            }
        }
        let pairs: Vec<String> = (0..s.contacts.n_parts())
            .flat_map(|p| (0..s.contacts.n_objects()).map(move |o| (p, o)))
            .filter(|&(p, o)| s.contacts.touching(p, o))
            .map(|(p, o)| format!("{p}:{o}"))
            .collect();
        fields.push(if pairs.is_empty() { "-".into() } else { pairs.join(";") });
        fields.extend(s.joints.forces().iter().map(f64::to_string));
        fields.extend(s.joints.velocities().iter().map(f64::to_string));
        let _ = writeln!(out, "{}", fields.join(","));
    }
    out
}

pub fn parse_rollout(text: &str) -> Result<Vec<RolloutStep>, TrajectoryError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines.next().ok_or(TrajectoryError::Parse { line: 1, msg: "empty file".into() })?;
    let hln = hline + 1;
    let herr = |msg: String| TrajectoryError::Parse { line: hln, msg };
    let (mut n_objects, mut n_joints) = (None, None);
    for (k, v) in parse_header(header, "#rollout", ROLLOUT_VERSION, hln)? {
        let count = || v.parse::<usize>().map_err(|_| herr(format!("invalid {k} count {v:?}")));
        match k.as_str() {
            "objects" => n_objects = Some(count()?),
            "joints" => n_joints = Some(count()?),
            "layout" if v != ROLLOUT_LAYOUT => return Err(herr(format!("unsupported layout {v:?}"))),
            _ => {}
        }
    }
    let n_objects = n_objects.ok_or_else(|| herr("header lacks objects=".into()))?;
    let n_joints = n_joints.ok_or_else(|| herr("header lacks joints=".into()))?;
    let expected = 1 + 8 * n_objects + 2 * 3 * KEYPOINTS_PER_HAND + 1 + 2 * n_joints;

    let mut steps = Vec::new();
    for (i, line) in lines {
        let ln = i + 1;
        let perr = |msg: String| TrajectoryError::Parse { line: ln, msg };
        let toks: Vec<&str> = line.split(',').map(str::trim).collect();
        if toks.len() != expected {
            return Err(perr(format!("expected {expected} fields, got {}", toks.len())));
        }
        let step: usize = toks[0].parse().map_err(|_| perr(format!("invalid step {:?}", toks[0])))?;
        if step != steps.len() {
            return Err(perr(format!("steps must count up from 0; expected {}, got {step}", steps.len())));
        }
        let mut rd = Fields { toks: &toks, pos: 1, line: ln };
        let mut objects = Vec::with_capacity(n_objects);
        for _ in 0..n_objects {
            let id = rd.text()?.to_string();
            let v = rd.nums::<f64>(7)?;
            objects.push((id, Pose::from_slice7(&v).map_err(|e| perr(e.to_string()))?));
        }
        let mut hands = [HandKeypoints::default(); 2];
        for hand in &mut hands {
            let v = rd.nums::<f64>(3 * KEYPOINTS_PER_HAND)?;
            *hand = HandKeypoints::from_points(std::array::from_fn(|k| Vec3::from_slice(&v[3 * k..3 * k + 3])));
        }
        let mut contacts = ContactSet::new(CHAIN_LEN, n_objects);
        let ctok = rd.text()?;
        if ctok != "-" {
            for pair in ctok.split(';') {
                let (p, o) = pair
                    .split_once(':')
                    .and_then(|(p, o)| Some((p.trim().parse::<usize>().ok()?, o.trim().parse::<usize>().ok()?)))
                    .ok_or_else(|| perr(format!("malformed contact {pair:?}, expected part:object")))?;
                contacts.set(p, o, true).map_err(|e| perr(e.to_string()))?;
            }
        }
        let forces = rd.nums::<f64>(n_joints)?;
        let velocities = rd.nums::<f64>(n_joints)?;
        let joints = JointState::new(forces, velocities).map_err(|e| perr(e.to_string()))?;
        steps.push(RolloutStep { step, objects, left: hands[0], right: hands[1], contacts, joints });
    }
    Ok(steps)
}

// ---------------------------------------------------------------------------
// Commands

pub const SERVO_HEADER: &str = "cycle,n_matches,n_inliers,reproj_error_px,e_x,e_y,e_yaw,active_axis,v_x,v_y,v_yaw,gt_dist_error_m,gt_ori_error_rad";
pub const SERVO_SUMMARY_HEADER: &str = "converged,steps,gt_dist_error_m,gt_ori_error_rad";
pub const SWEEP_TRIALS_HEADER: &str =
    "trial,start_x,start_y,start_yaw,converged,steps,closed_dist_m,closed_ori_rad,open_dist_m,open_ori_rad";
pub const SWEEP_SUMMARY_HEADER: &str = "mode,n,converged,dist_mean_m,dist_std_m,ori_mean_rad,ori_std_rad";
pub const REWARD_HEADER: &str = "step,r_chain,r_obj,r_penalty,total,n_contact,terminated";
pub const DAGGER_HEADER: &str = "epoch,p,buffer_size,probe_loss,rollout_return";

/// Shortest round-trip decimal, switching to exponent form for tiny or huge
/// magnitudes so that values such as `0.93^600` stay readable.
pub fn num(x: f64) -> String {
    let a = x.abs();
    if a != 0.0 && a.is_finite() && !(1e-6..1e15).contains(&a) {
        format!("{x:e}")
    } else {
        x.to_string()
    }
}

/// Empty field for missing or non-finite values.
fn opt(v: Option<f64>) -> String {
    v.filter(|x| x.is_finite()).map(num).unwrap_or_default()
}

fn write_artifact(dir: &Path, name: &str, bytes: &[u8], written: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|source| CliError::Io { path: path.clone(), source })?;
    written.push(path);
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })
}

/// Runs one servo episode; writes `servo.csv` and `servo_summary.csv`.
pub fn cmd_servo(s: &Settings) -> Result<Vec<PathBuf>, CliError> {
    let start = s.fixed_start.unwrap_or_else(|| s.scenario.sample_start(derive_seed(s.seed, STREAM_START)));
    let goal = s.scenario.goal;
    let mut world = SimWorld::new(s.world.clone(), start)?;
    let outcome = servo_loop(&mut world, &goal, &s.servo)?;
    let mut csv = format!("{SERVO_HEADER}\n");
    for r in &outcome.history {
        let (gd, go) = r.ground_truth.unzip();
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.cycle,
            r.n_matches,
            r.n_inliers,
            opt(Some(r.reproj_error_px)),
            opt(r.error.map(|e| e.e_x)),
            opt(r.error.map(|e| e.e_y)),
            opt(r.error.map(|e| e.e_yaw)),
            r.axis,
            num(r.command[0]),
            num(r.command[1]),
            num(r.command[2]),
            opt(gd),
            opt(go),
        );
    }
    let (dist, ori) = ground_truth_error(&world.state(), &goal);
    let summary = format!("{SERVO_SUMMARY_HEADER}\n{},{},{},{}\n", outcome.converged, outcome.steps, num(dist), num(ori));
    ensure_dir(&s.out)?;
    let mut written = Vec::new();
    write_artifact(&s.out, "servo.csv", csv.as_bytes(), &mut written)?;
    write_artifact(&s.out, "servo_summary.csv", summary.as_bytes(), &mut written)?;
    Ok(written)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs `trials` paired closed/open-loop episodes in parallel over one
/// landmark field. Rows are sorted by trial index.
pub fn sweep_trials(s: &Settings) -> Result<Vec<TrialResult>, CliError> {
    if s.trials == 0 {
        return Err(CliError::Config("sweep needs at least one trial".into()));
    }
    let field = generate_field(&s.world)?;
    let sweep_seed = derive_seed(s.seed, STREAM_SWEEP);
    let mut results: Vec<TrialResult> = (0..s.trials)
        .into_par_iter()
        .map(|t| {
            run_trial(&s.world, &s.servo, &s.scenario, &field, t, sweep_seed).map_err(|source| CliError::Trial { trial: t, source })
        })
        .collect::<Result<_, _>>()?;
    results.sort_by_key(|r| r.trial);
    Ok(results)
}

/// Writes `sweep_trials.csv` and `sweep_summary.csv`.
pub fn cmd_sweep(s: &Settings) -> Result<Vec<PathBuf>, CliError> {
    let results = sweep_trials(s)?;
    let mut trials = format!("{SWEEP_TRIALS_HEADER}\n");
    for r in &results {
        let (od, oo) = r.open_loop.unzip();
        let _ = writeln!(
            trials,
            "{},{},{},{},{},{},{},{},{},{}",
            r.trial,
            num(r.start.x),
            num(r.start.y),
            num(r.start.yaw),
            r.outcome.converged,
            r.outcome.steps,
            num(r.closed_loop.0),
            num(r.closed_loop.1),
            opt(od),
            opt(oo),
        );
    }
    let closed: Vec<(f64, f64)> = results.iter().map(|r| r.closed_loop).collect();
    let open: Vec<(f64, f64)> = results.iter().filter_map(|r| r.open_loop).collect();
    let converged = results.iter().filter(|r| r.outcome.converged).count();
    let mut summary = format!("{SWEEP_SUMMARY_HEADER}\n");
    for (mode, rows, conv) in [("closed_loop", &closed, converged.to_string()), ("open_loop", &open, String::new())] {
        let (dm, ds) = mean_std(&rows.iter().map(|r| r.0).collect::<Vec<_>>());
        let (om, os) = mean_std(&rows.iter().map(|r| r.1).collect::<Vec<_>>());
        let _ = writeln!(summary, "{mode},{},{conv},{},{},{},{}", rows.len(), opt(Some(dm)), opt(Some(ds)), opt(Some(om)), opt(Some(os)));
    }
    ensure_dir(&s.out)?;
    let mut written = Vec::new();
    write_artifact(&s.out, "sweep_trials.csv", trials.as_bytes(), &mut written)?;
    write_artifact(&s.out, "sweep_summary.csv", summary.as_bytes(), &mut written)?;
    Ok(written)
}

/// Per-step reward rows `(r_chain, r_obj, r_penalty, total, n_contact, terminated)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardRow {
    pub step: usize,
    pub r_chain: f64,
    pub r_obj: f64,
    pub r_penalty: f64,
    pub total: f64,
    pub n_contact: usize,
    pub terminated: bool,
}

/// Scores rollout step `k` against reference frame `k`, tracking one object.
/// The chain runs from that object's center to both hands' keypoints.
pub fn evaluate_rewards(
    traj: &ReferenceTrajectory<f64>,
    rollout: &[RolloutStep],
    object: Option<&str>,
    cfg: &RewardConfig<f64>,
    termination_threshold: f64,
) -> Result<Vec<RewardRow>, CliError> {
    let frames = traj.frames();
    let id = match object {
        Some(id) => id.to_string(),
        None => frames[0]
            .objects
            .first()
            .map(|(id, _)| id.clone())
            .ok_or_else(|| CliError::Config("trajectory has no objects to track".into()))?,
    };
    if rollout.len() > frames.len() {
        return Err(CliError::Config(format!(
            "rollout has {} steps but the trajectory only {} frames",
            rollout.len(),
            frames.len()
        )));
    }
    let mut rows = Vec::with_capacity(rollout.len());
    for (step, frame) in rollout.iter().zip(frames) {
        let missing = |w: &str| CliError::Config(format!("step {}: object {id:?} missing from the {w}", step.step));
        let reference = frame.object(&id).ok_or_else(|| missing("trajectory"))?;
        let current = step
            .objects
            .iter()
            .find(|(oid, _)| *oid == id)
            .map(|(_, p)| p)
            .ok_or_else(|| missing("rollout"))?;
        let ref_chain = DistanceChain::from_hands(&reference.position, &frame.left.keypoints, &frame.right.keypoints);
        let cur_chain = DistanceChain::from_hands(&current.position, &step.left, &step.right);
        let n_contact = contact_count(&step.contacts);
        let r_chain = chain_reward(&cur_chain, &ref_chain, n_contact, cfg)?;
        let r_obj = object_tracking_reward(
            &current.position,
            &current.orientation,
            &reference.position,
            &reference.orientation,
            cfg,
        );
        let r_penalty = power_penalty(&step.joints, cfg);
        rows.push(RewardRow {
            step: step.step,
            r_chain,
            r_obj,
            r_penalty,
            total: total_reward(r_chain, r_obj, r_penalty, cfg),
            n_contact,
            terminated: should_terminate_early(&current.position, &reference.position, termination_threshold),
        });
    }
    Ok(rows)
}

/// Writes `rewards.csv`.
pub fn cmd_reward_eval(s: &Settings) -> Result<Vec<PathBuf>, CliError> {
    let need = |p: &Option<PathBuf>, what: &str| {
        p.clone()
            .ok_or_else(|| CliError::Config(format!("reward-eval needs a {what} (--{what} or reward.{what})")))
    };
    let (tpath, rpath) = (need(&s.trajectory, "trajectory")?, need(&s.rollout, "rollout")?);
    let traj = load_trajectory::<f64>(&tpath).map_err(|source| CliError::Parse { path: tpath.clone(), source })?;
    let rollout = parse_rollout(&read_file(&rpath)?).map_err(|source| CliError::Parse { path: rpath.clone(), source })?;
    let rows = evaluate_rewards(&traj, &rollout, s.reward_object.as_deref(), &s.reward, s.termination_threshold)?;
    let mut csv = format!("{REWARD_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.step,
            num(r.r_chain),
            num(r.r_obj),
            num(r.r_penalty),
            num(r.total),
            r.n_contact,
            r.terminated
        );
    }
    ensure_dir(&s.out)?;
    let mut written = Vec::new();
    write_artifact(&s.out, "rewards.csv", csv.as_bytes(), &mut written)?;
    Ok(written)
}

fn load_image(path: &Path) -> Result<DepthImage<f64>, CliError> {
    load_pgm(path).map_err(|source| CliError::Image { path: path.to_path_buf(), source })
}

/// Writes `depth_<mode>.pgm` and `depth_<mode>_hist.csv`.
pub fn cmd_depth(s: &Settings, mode: DepthMode) -> Result<Vec<PathBuf>, CliError> {
    let input = s
        .depth_input
        .as_deref()
        .ok_or_else(|| CliError::Config("depth needs an input image (--input or augmentation.input)".into()))?;
    let img = load_image(input)?;
    let out = match mode {
        DepthMode::Sim => {
            let dataset = s.dataset.as_deref().map(load_image).transpose()?;
            sim_pipeline(&img, &s.augment, dataset.as_ref())?
        }
        DepthMode::Real => real_pipeline(&img, s.augment.clip_distance),
    };
    ensure_dir(&s.out)?;
    let name = mode.as_str();
    let image_path = s.out.join(format!("depth_{name}.pgm"));
    save_pgm(&out, s.pgm_scale, &image_path).map_err(|source| CliError::Image { path: image_path.clone(), source })?;
    let mut written = vec![image_path];
    write_artifact(&s.out, &format!("depth_{name}_hist.csv"), format_histogram_csv(&out, s.bins).as_bytes(), &mut written)?;
    Ok(written)
}

/// Writes `dagger.csv`.
pub fn cmd_dagger(s: &Settings) -> Result<Vec<PathBuf>, CliError> {
    let t = &s.toy;
    let mut env = ToyTask::new(t.horizon, t.dt, t.action_bound)?;
    let expert = ScriptedExpert { gain: t.expert_gain, bound: t.action_bound };
    let mut student = LinearPolicy::zeros(4, 2, t.ridge);
    let report = dagger_train(&mut env, &expert, &mut student, &s.dagger)?;
    let mut csv = format!("{DAGGER_HEADER}\n");
    for e in &report.epochs {
        let _ = writeln!(csv, "{},{},{},{},{}", e.epoch, num(e.p), e.buffer_size, num(e.probe_loss), num(e.rollout_return));
    }
    ensure_dir(&s.out)?;
    let mut written = Vec::new();
    write_artifact(&s.out, "dagger.csv", csv.as_bytes(), &mut written)?;
    Ok(written)
}

pub fn hybrid_header(dof: usize) -> String {
    let joints = |prefix: &str| (0..dof).map(|j| format!("{prefix}_q{j}")).collect::<Vec<_>>().join(",");
    format!(
        "step,{},{},deviation_norm,{},{},naive_deviation_norm",
        joints("sim"),
        joints("real"),
        joints("naive_sim"),
        joints("naive_real")
    )
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|&x| num(x)).collect::<Vec<_>>().join(",")
}

pub fn format_hybrid_csv(dof: usize, hybrid: &JointTrace, naive: &JointTrace) -> String {
    let mut csv = hybrid_header(dof);
    csv.push('\n');
    for k in 0..hybrid.deviation.len().min(naive.deviation.len()) {
        let _ = writeln!(
            csv,
            "{k},{},{},{},{},{},{}",
            join(&hybrid.sim[k]),
            join(&hybrid.real[k]),
            num(hybrid.deviation[k]),
            join(&naive.sim[k]),
            join(&naive.real[k]),
            num(naive.deviation[k])
        );
    }
    csv
}

/// Writes `hybrid.csv`: the hybrid trace with the paired naive trace.
pub fn cmd_hybrid(s: &Settings) -> Result<Vec<PathBuf>, CliError> {
    let (hybrid, naive) = hybrid_experiment(&s.hybrid)?;
    let csv = format_hybrid_csv(s.hybrid.dof, &hybrid, &naive);
    ensure_dir(&s.out)?;
    let mut written = Vec::new();
    write_artifact(&s.out, "hybrid.csv", csv.as_bytes(), &mut written)?;
    Ok(written)
}

/// Validates the config and dispatches the subcommand.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let s = Settings::from_cli(cli)?;
    match &cli.command {
        Command::Servo => cmd_servo(&s),
        Command::Sweep { .. } => cmd_sweep(&s),
        Command::RewardEval { .. } => cmd_reward_eval(&s),
        Command::Depth { mode, .. } => cmd_depth(&s, *mode),
        Command::Dagger => cmd_dagger(&s),
        Command::Hybrid => cmd_hybrid(&s),
    }
}
