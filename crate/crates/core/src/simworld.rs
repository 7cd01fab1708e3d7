//! Deterministic synthetic world for the servo and hybrid-control harnesses.
//!
//! A planar omnidirectional base carries a forward-looking pinhole camera
//! that observes a random 3D landmark field. A matcher oracle pairs goal
//! pixels with current-frame points, with tunable pixel noise, depth noise
//! and labeled outliers. First-order kinematic chains stand in for the
//! simulated and real arms.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::depth_aug::DepthImage;
use crate::derive_seed;
use crate::geometry::{project, CameraIntrinsics, PixelPoint, RigidTransform, UnitQuaternion, Vec3};
use crate::linalg::symmetric_eigen;
use crate::pnp_servo::{open_loop_correction, servo_loop, Correspondence, PoseError, ServoConfig, ServoError, ServoOutcome, ServoWorld};
use crate::scalar::wrap_angle;

/// Fewest landmarks a field may hold.
pub const MIN_LANDMARKS: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("field needs at least {MIN_LANDMARKS} points, got {got}")]
    TooFewLandmarks { got: usize },
    #[error("landmark field is (near) coplanar")]
    Coplanar,
    #[error("no non-coplanar field after {attempts} attempts")]
    DegenerateField { attempts: usize },
    #[error("no landmark is visible from both poses")]
    NoVisibleLandmarks,
    #[error("joint vectors differ in length: {expected} vs {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BaseState {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl BaseState {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw: wrap_angle(yaw) }
    }

    /// Base frame expressed in the world frame.
    pub fn transform(&self) -> RigidTransform<f64> {
        RigidTransform::new(UnitQuaternion::from_yaw(self.yaw), Vec3::new(self.x, self.y, 0.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub n_landmarks: usize,
    /// Landmark volume in the world frame, `[(lo, hi); 3]` for x, y, z.
    pub field_volume: [(f64, f64); 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Camera position on the base, meters.
    pub camera_mount: [f64; 3],
    pub near_clip: f64,
    pub max_depth: f64,
    pub pixel_noise_sigma: f64,
    pub outlier_fraction: f64,
    pub depth_noise_sigma: f64,
    /// Relative actuation noise per axis: `v (1 + N(0, sigma^2))`.
    pub actuation_noise_sigma: f64,
    /// Lateral displacement per radian of wheel reorientation and meter of travel.
    pub coupling_gain: f64,
    /// Half-width in pixels of the square each landmark covers in the depth image.
    pub splat_radius: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_landmarks: 80,
            field_volume: [(1.6, 3.0), (-1.0, 1.0), (0.0, 1.2)],
            fx: 300.0,
            fy: 300.0,
            cx: 160.0,
            cy: 160.0,
            width: 320,
            height: 320,
            camera_mount: [0.1, 0.0, 0.5],
            near_clip: 0.1,
            max_depth: 4.0,
            pixel_noise_sigma: 1.0,
            outlier_fraction: 0.1,
            depth_noise_sigma: 0.005,
            actuation_noise_sigma: 0.02,
            coupling_gain: 0.1,
            splat_radius: 1,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn noise_free(self) -> Self {
        Self {
            pixel_noise_sigma: 0.0,
            outlier_fraction: 0.0,
            depth_noise_sigma: 0.0,
            actuation_noise_sigma: 0.0,
            coupling_gain: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if self.n_landmarks < MIN_LANDMARKS {
            return Err(SimError::TooFewLandmarks { got: self.n_landmarks });
        }
        if self.field_volume.iter().any(|(lo, hi)| !(lo <= hi) || !lo.is_finite() || !hi.is_finite()) {
            return bad("field volume bounds must be finite with lo <= hi");
        }
        if self.intrinsics().is_none() || self.width == 0 || self.height == 0 {
            return bad("focal lengths and image size must be positive");
        }
        if !(self.near_clip > 0.0 && self.max_depth > self.near_clip) {
            return bad("need 0 < near_clip < max_depth");
        }
        let noises = [self.pixel_noise_sigma, self.depth_noise_sigma, self.actuation_noise_sigma, self.coupling_gain];
        if noises.iter().any(|n| !(*n >= 0.0)) {
            return bad("noise magnitudes must be non-negative");
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return bad("outlier_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Option<CameraIntrinsics<f64>> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy)
    }

    /// Camera-to-base transform. The optical axis points along base x,
    /// image right along base -y and image down along base -z.
    pub fn camera_extrinsic(&self) -> RigidTransform<f64> {
        let r = [[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]];
        let [x, y, z] = self.camera_mount;
        RigidTransform::new(UnitQuaternion::from_matrix(&r), Vec3::new(x, y, z))
    }

    fn world_to_camera(&self, base: &BaseState) -> RigidTransform<f64> {
        base.transform().compose(&self.camera_extrinsic()).inverse()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkField {
    points: Vec<Vec3<f64>>,
}

/// Ratio of the smallest to largest covariance eigenvalue below which a
/// point set counts as planar.
const COPLANAR_TOLERANCE: f64 = 1e-6;

impl LandmarkField {
    pub fn new(points: Vec<Vec3<f64>>) -> Result<Self, SimError> {
        if points.len() < MIN_LANDMARKS {
            return Err(SimError::TooFewLandmarks { got: points.len() });
        }
        let n = points.len() as f64;
        let c = points.iter().fold(Vec3::zeros(), |a, &b| a + b).scale(1.0 / n);
        let mut cov = [0.0; 9];
        for p in &points {
            let d = (*p - c).to_array();
            for i in 0..3 {
                for j in 0..3 {
                    cov[i * 3 + j] += d[i] * d[j] / n;
                }
            }
        }
        let (vals, _) = symmetric_eigen(&cov, 3);
        if !(vals[0] > COPLANAR_TOLERANCE * vals[2].max(f64::MIN_POSITIVE)) {
            return Err(SimError::Coplanar);
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

const FIELD_ATTEMPTS: usize = 8;

/// Seeded uniform landmarks inside the configured volume, regenerated until
/// the set is not coplanar.
pub fn generate_field(cfg: &WorldConfig) -> Result<LandmarkField, SimError> {
    cfg.validate()?;
    for attempt in 0..FIELD_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, attempt as u64));
        let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if lo < hi { rng.random_range(lo..hi) } else { lo };
        let points = (0..cfg.n_landmarks)
            .map(|_| {
                let [vx, vy, vz] = cfg.field_volume;
                let x = draw(&mut rng, vx);
                let y = draw(&mut rng, vy);
                let z = draw(&mut rng, vz);
                Vec3::new(x, y, z)
            })
            .collect();
        match LandmarkField::new(points) {
            Ok(f) => return Ok(f),
            Err(SimError::Coplanar) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(SimError::DegenerateField { attempts: FIELD_ATTEMPTS })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub correspondences: Vec<Correspondence<f64>>,
    /// `true` where the goal pixel was replaced by a random pixel.
    pub outlier: Vec<bool>,
    /// Landmark index behind each correspondence.
    pub landmark: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub matches: CorrespondenceSet,
    pub depth: DepthImage<f64>,
}

fn in_view(cfg: &WorldConfig, k: &CameraIntrinsics<f64>, p: &Vec3<f64>) -> Option<PixelPoint<f64>> {
    if p.z < cfg.near_clip || p.z > cfg.max_depth {
        return None;
    }
    let px = project(k, p).ok()?;
    let inside = px.u >= 0.0 && px.v >= 0.0 && px.u < cfg.width as f64 && px.v < cfg.height as f64;
    inside.then_some(px)
}

/// Current-frame landmark positions with depth noise applied along each
/// viewing ray, for every landmark in the current view.
fn noisy_current_points(
    base: &BaseState,
    field: &LandmarkField,
    k: &CameraIntrinsics<f64>,
    cfg: &WorldConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Option<Vec3<f64>>> {
    let to_cam = cfg.world_to_camera(base);
    field
        .points
        .iter()
        .map(|p| {
            let c = to_cam.apply_point(p);
            in_view(cfg, k, &c)?;
            let n: f64 = StandardNormal.sample(rng);
            let r = c.norm();
            let noisy = c.scale(1.0 + cfg.depth_noise_sigma * n / r);
            (noisy.z > 0.0).then_some(noisy)
        })
        .collect()
}

/// The matcher oracle: correspondences between the current view and the
/// goal view, without rendering a depth image.
pub fn match_views(
    base: &BaseState,
    goal: &BaseState,
    field: &LandmarkField,
    k: &CameraIntrinsics<f64>,
    cfg: &WorldConfig,
    seed: u64,
) -> Result<CorrespondenceSet, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let current = noisy_current_points(base, field, k, cfg, &mut rng);
    matches_from(goal, field, k, cfg, &current, &mut rng)
}

fn matches_from(
    goal: &BaseState,
    field: &LandmarkField,
    k: &CameraIntrinsics<f64>,
    cfg: &WorldConfig,
    current: &[Option<Vec3<f64>>],
    rng: &mut ChaCha8Rng,
) -> Result<CorrespondenceSet, SimError> {
    let to_goal = cfg.world_to_camera(goal);
    let pixel_noise = Normal::new(0.0, cfg.pixel_noise_sigma).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    let mut set = CorrespondenceSet { correspondences: Vec::new(), outlier: Vec::new(), landmark: Vec::new() };
    for (i, (p, cur)) in field.points.iter().zip(current).enumerate() {
        let Some(cur) = cur else { continue };
        let Some(px) = in_view(cfg, k, &to_goal.apply_point(p)) else { continue };
        let noisy = PixelPoint::new(px.u + pixel_noise.sample(rng), px.v + pixel_noise.sample(rng));
        set.correspondences.push(Correspondence { goal_pixel: noisy, current_point: *cur });
        set.outlier.push(false);
        set.landmark.push(i);
    }
    let n = set.correspondences.len();
    if n == 0 {
        return Err(SimError::NoVisibleLandmarks);
    }
    let count = ((cfg.outlier_fraction * n as f64).round() as usize).min(n);
    let mut chosen = sample(rng, n, count).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        set.correspondences[i].goal_pixel =
            PixelPoint::new(rng.random_range(0.0..cfg.width as f64), rng.random_range(0.0..cfg.height as f64));
        set.outlier[i] = true;
    }
    Ok(set)
}

/// Correspondences plus the current depth image: landmarks splatted into a
/// z-buffer over a flat backdrop at the maximum depth.
pub fn observe(
    base: &BaseState,
    goal: &BaseState,
    field: &LandmarkField,
    k: &CameraIntrinsics<f64>,
    cfg: &WorldConfig,
    seed: u64,
) -> Result<Observation, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let current = noisy_current_points(base, field, k, cfg, &mut rng);
    let matches = matches_from(goal, field, k, cfg, &current, &mut rng)?;
    let mut zbuf = vec![cfg.max_depth; cfg.width * cfg.height];
    let r = cfg.splat_radius as isize;
    for p in current.iter().flatten() {
        let Ok(px) = project(k, p) else { continue };
        let (u, v) = (px.u.floor() as isize, px.v.floor() as isize);
        for y in (v - r).max(0)..=(v + r).min(cfg.height as isize - 1) {
            for x in (u - r).max(0)..=(u + r).min(cfg.width as isize - 1) {
                let cell = &mut zbuf[y as usize * cfg.width + x as usize];
                *cell = cell.min(p.z.clamp(0.0, cfg.max_depth));
            }
        }
    }
    let depth = DepthImage::new(cfg.width, cfg.height, zbuf, cfg.max_depth)
        .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    Ok(Observation { matches, depth })
}

/// One motion step under a body-frame command `(v_x, v_y, v_yaw)`.
///
/// The command is scaled by `1 + N(0, sigma^2)` per axis and integrated at
/// the midpoint heading, so without noise a step is undone exactly by the
/// negated command.
pub fn step_base(state: &BaseState, v: [f64; 3], dt: f64, cfg: &WorldConfig, seed: u64) -> BaseState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = noisy_command(v, cfg, &mut rng);
    integrate(state, v, dt)
}

fn noisy_command(v: [f64; 3], cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut out = v;
    if cfg.actuation_noise_sigma > 0.0 {
        for c in &mut out {
            let n: f64 = StandardNormal.sample(rng);
            *c *= 1.0 + cfg.actuation_noise_sigma * n;
        }
    }
    out
}

fn integrate(state: &BaseState, v: [f64; 3], dt: f64) -> BaseState {
    let mid = state.yaw + 0.5 * v[2] * dt;
    let (s, c) = mid.sin_cos();
    BaseState::new(
        state.x + (c * v[0] - s * v[1]) * dt,
        state.y + (s * v[0] + c * v[1]) * dt,
        state.yaw + v[2] * dt,
    )
}

/// Omnidirectional drive with wheel-orientation memory.
///
/// Changing the direction of translation reorients the wheels, which shoves
/// the base sideways by `coupling_gain * |turn| * |v| dt`, perpendicular to
/// the new direction and toward the turn.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Drive {
    wheel_direction: Option<f64>,
}

impl Drive {
    pub fn step(&mut self, state: &BaseState, v: [f64; 3], dt: f64, cfg: &WorldConfig, seed: u64) -> BaseState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = noisy_command(v, cfg, &mut rng);
        let mut next = integrate(state, v, dt);
        let speed = v[0].hypot(v[1]);
        if speed > 0.0 {
            let dir = v[1].atan2(v[0]);
            if let Some(prev) = self.wheel_direction {
                let turn = wrap_angle(dir - prev);
                if turn != 0.0 {
                    let kick = cfg.coupling_gain * turn.abs() * speed * dt;
                    let heading = state.yaw + 0.5 * v[2] * dt + dir + turn.signum() * std::f64::consts::FRAC_PI_2;
                    next.x += kick * heading.cos();
                    next.y += kick * heading.sin();
                }
            }
            self.wheel_direction = Some(dir);
        }
        next
    }
}

/// `(planar distance, |wrapped yaw difference|)`.
pub fn ground_truth_error(base: &BaseState, goal: &BaseState) -> (f64, f64) {
    ((base.x - goal.x).hypot(base.y - goal.y), wrap_angle(base.yaw - goal.yaw).abs())
}

/// Goal pose in the base frame, the quantity the servo loop estimates.
pub fn ground_truth_pose_error(base: &BaseState, goal: &BaseState) -> PoseError<f64> {
    let (s, c) = base.yaw.sin_cos();
    let (dx, dy) = (goal.x - base.x, goal.y - base.y);
    PoseError { e_x: c * dx + s * dy, e_y: -s * dx + c * dy, e_yaw: wrap_angle(goal.yaw - base.yaw) }
}

/// Servo-loop adapter around a landmark field and a moving base.
#[derive(Debug, Clone)]
pub struct SimWorld {
    cfg: WorldConfig,
    field: LandmarkField,
    k: CameraIntrinsics<f64>,
    state: BaseState,
    drive: Drive,
    tick: u64,
}

impl SimWorld {
    pub fn new(cfg: WorldConfig, start: BaseState) -> Result<Self, SimError> {
        let field = generate_field(&cfg)?;
        Self::with_field(cfg, field, start)
    }

    pub fn with_field(cfg: WorldConfig, field: LandmarkField, start: BaseState) -> Result<Self, SimError> {
        cfg.validate()?;
        let k = cfg.intrinsics().ok_or_else(|| SimError::InvalidConfig("intrinsics".into()))?;
        Ok(Self { cfg, field, k, state: start, drive: Drive::default(), tick: 0 })
    }

    pub fn state(&self) -> BaseState {
        self.state
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn field(&self) -> &LandmarkField {
        &self.field
    }
}

impl ServoWorld<f64> for SimWorld {
    type Goal = BaseState;

    fn intrinsics(&self) -> CameraIntrinsics<f64> {
        self.k
    }

    fn match_against(&mut self, goal: &BaseState) -> Vec<Correspondence<f64>> {
        self.tick += 1;
        let seed = derive_seed(self.cfg.seed, 2 * self.tick);
        match_views(&self.state, goal, &self.field, &self.k, &self.cfg, seed)
            .map(|s| s.correspondences)
            .unwrap_or_default()
    }

    fn command(&mut self, v: [f64; 3], dt: f64) {
        self.tick += 1;
        let seed = derive_seed(self.cfg.seed, 2 * self.tick + 1);
        self.state = self.drive.step(&self.state, v, dt, &self.cfg, seed);
    }

    fn ground_truth_error(&self, goal: &BaseState) -> Option<(f64, f64)> {
        Some(ground_truth_error(&self.state, goal))
    }
}

/// Goal pose and start-pose sampling for servo episodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scenario {
    pub goal: BaseState,
    /// Start positions are drawn uniformly from a disc of this radius around the goal.
    pub max_offset_m: f64,
    /// Start yaw offsets are drawn uniformly from `[-max, max]`.
    pub max_yaw_rad: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self { goal: BaseState::default(), max_offset_m: 0.5, max_yaw_rad: 20f64.to_radians() }
    }
}

impl Scenario {
    pub fn sample_start(&self, seed: u64) -> BaseState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = self.max_offset_m * rng.random::<f64>().sqrt();
        let a = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let yaw = if self.max_yaw_rad > 0.0 { rng.random_range(-self.max_yaw_rad..=self.max_yaw_rad) } else { 0.0 };
        BaseState::new(self.goal.x + r * a.cos(), self.goal.y + r * a.sin(), self.goal.yaw + yaw)
    }
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub trial: usize,
    pub start: BaseState,
    pub outcome: ServoOutcome<f64>,
    /// Closed-loop terminal ground-truth `(distance, orientation)` error.
    pub closed_loop: (f64, f64),
    /// Open-loop baseline terminal error; `None` when its single estimate failed.
    pub open_loop: Option<(f64, f64)>,
}

/// One paired episode: the closed servo loop and the open-loop baseline,
/// each in its own world built from the same field and start pose.
pub fn run_trial(
    world: &WorldConfig,
    servo: &ServoConfig<f64>,
    scenario: &Scenario,
    field: &LandmarkField,
    trial: usize,
    seed: u64,
) -> Result<TrialResult, ServoError> {
    let trial_seed = derive_seed(seed, trial as u64);
    let start = scenario.sample_start(derive_seed(trial_seed, 0));
    let wcfg = WorldConfig { seed: derive_seed(trial_seed, 1), ..world.clone() };
    let scfg = ServoConfig { seed: derive_seed(trial_seed, 2), extrinsic: wcfg.camera_extrinsic(), ..servo.clone() };
    let build = || SimWorld::with_field(wcfg.clone(), field.clone(), start).map_err(|e| ServoError::InvalidConfig(e.to_string()));
    let mut closed = build()?;
    let outcome = servo_loop(&mut closed, &scenario.goal, &scfg)?;
    let closed_loop = ground_truth_error(&closed.state(), &scenario.goal);
    let mut open = build()?;
    let open_loop = open_loop_correction(&mut open, &scenario.goal, &scfg)
        .ok()
        .map(|_| ground_truth_error(&open.state(), &scenario.goal));
    Ok(TrialResult { trial, start, outcome, closed_loop, open_loop })
}

// ---------------------------------------------------------------------------
// Kinematic chains

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicChain {
    pub q: Vec<f64>,
    /// First-order lag constant per joint, seconds.
    pub tau: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl KinematicChain {
    pub fn new(q: Vec<f64>, tau: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, SimError> {
        let n = q.len();
        for v in [&tau, &lower, &upper] {
            if v.len() != n {
                return Err(SimError::DimensionMismatch { expected: n, got: v.len() });
            }
        }
        if tau.iter().any(|t| !(*t > 0.0)) {
            return Err(SimError::InvalidConfig("lag constants must be positive".into()));
        }
        if (0..n).any(|i| !(lower[i] <= q[i] && q[i] <= upper[i])) {
            return Err(SimError::InvalidConfig("joint positions must lie within limits".into()));
        }
        Ok(Self { q, tau, lower, upper })
    }

    /// Same lag for every joint.
    pub fn uniform(q: Vec<f64>, tau: f64, lower: f64, upper: f64) -> Result<Self, SimError> {
        let n = q.len();
        Self::new(q, vec![tau; n], vec![lower; n], vec![upper; n])
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }
}

/// `q <- q + (dt / tau) (target - q)` per joint, with the gain capped at 1
/// (a lag no longer than `dt` lands on the target exactly). Targets and
/// results are clamped to the joint limits; the flag reports any clamp.
pub fn chain_step(chain: &KinematicChain, target: &[f64], dt: f64) -> Result<(KinematicChain, bool), SimError> {
    if target.len() != chain.dof() {
        return Err(SimError::DimensionMismatch { expected: chain.dof(), got: target.len() });
    }
    let mut out = chain.clone();
    let mut hit = false;
    for i in 0..chain.dof() {
        let (lo, hi) = (chain.lower[i], chain.upper[i]);
        let goal = target[i].clamp(lo, hi);
        hit |= goal != target[i];
        let alpha = (dt / chain.tau[i]).min(1.0);
        out.q[i] = if alpha == 1.0 { goal } else { chain.q[i] + alpha * (goal - chain.q[i]) };
    }
    Ok((out, hit))
}

// ---------------------------------------------------------------------------
// Depth scenes

/// Dense tabletop depth render (table, boxes, floor) from a camera pitched
/// toward the table, clipped to `max_depth`.
pub fn tabletop_scene(width: usize, height: usize, max_depth: f64, seed: u64) -> DepthImage<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = 0.9 * width as f64;
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let cam_h: f64 = rng.random_range(0.45..0.65);
    let pitch: f64 = rng.random_range(40f64..60.0).to_radians();
    let (sp, cp) = pitch.sin_cos();
    let x_axis = Vec3::new(0.0, -1.0, 0.0);
    let y_axis = Vec3::new(-sp, 0.0, -cp);
    let z_axis = Vec3::new(cp, 0.0, -sp);
    let origin = Vec3::new(0.0, 0.0, cam_h);
    let table = ((0.15, 1.2), (-0.6, 0.6));
    let floor_drop = 0.75;
    let boxes: Vec<([f64; 3], [f64; 3])> = (0..rng.random_range(2..6))
        .map(|_| {
            let c = [rng.random_range(0.35..0.9), rng.random_range(-0.35..0.35)];
            let s = [rng.random_range(0.04..0.12), rng.random_range(0.04..0.12), rng.random_range(0.05..0.25)];
            ([c[0] - s[0], c[1] - s[1], 0.0], [c[0] + s[0], c[1] + s[1], s[2]])
        })
        .collect();
    let mut values = Vec::with_capacity(width * height);
    for v in 0..height {
        for u in 0..width {
            // camera-frame ray with unit z, so the hit parameter is the depth
            let d = x_axis.scale((u as f64 + 0.5 - cx) / f) + y_axis.scale((v as f64 + 0.5 - cy) / f) + z_axis;
            let mut best = f64::INFINITY;
            if d.z < 0.0 {
                let t = -origin.z / d.z;
                let hit = origin + d.scale(t);
                if hit.x >= table.0 .0 && hit.x <= table.0 .1 && hit.y >= table.1 .0 && hit.y <= table.1 .1 {
                    best = t;
                } else {
                    best = (floor_drop + origin.z) / -d.z;
                }
            }
            for (lo, hi) in &boxes {
                if let Some(t) = ray_box(&origin, &d, lo, hi) {
                    best = best.min(t);
                }
            }
            values.push(best.min(max_depth));
        }
    }
    DepthImage::new(width, height, values, max_depth).expect("render stays within range")
}

fn ray_box(o: &Vec3<f64>, d: &Vec3<f64>, lo: &[f64; 3], hi: &[f64; 3]) -> Option<f64> {
    let (o, d) = (o.to_array(), d.to_array());
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for i in 0..3 {
        if d[i].abs() < 1e-12 {
            if o[i] < lo[i] || o[i] > hi[i] {
                return None;
            }
            continue;
        }
        let (a, b) = ((lo[i] - o[i]) / d[i], (hi[i] - o[i]) / d[i]);
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

/// Corrupts a clean render the way a structured-light sensor would: depth
/// dependent noise, holes along depth discontinuities and scattered
/// missing pixels (encoded as 0).
pub fn synthetic_real_capture(clean: &DepthImage<f64>, seed: u64) -> DepthImage<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = clean.dims();
    let src = clean.values();
    let m = clean.max_depth();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            let z = src[y * w + x];
            let edge = [(1isize, 0isize), (-1, 0), (0, 1), (0, -1)].iter().any(|&(dx, dy)| {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h && (src[ny as usize * w + nx as usize] - z).abs() > 0.03
            });
            let drop = if edge { 0.6 } else { 0.02 };
            if z >= m || rng.random::<f64>() < drop {
                out.push(0.0);
                continue;
            }
            let n: f64 = StandardNormal.sample(&mut rng);
            out.push((z + 0.004 * z * z * n + 0.002 * n).clamp(0.0, m));
        }
    }
    DepthImage::new(w, h, out, m).expect("corruption stays within range")
}

/// Seeded suite of tabletop renders used to check depth-distribution alignment.
pub fn depth_scene_suite(count: usize, seed: u64) -> Vec<DepthImage<f64>> {
    (0..count).map(|i| tabletop_scene(160, 120, 2.5, derive_seed(seed, i as u64))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pnp_servo::{solve_pnp_ransac, Termination};

    fn k(cfg: &WorldConfig) -> CameraIntrinsics<f64> {
        cfg.intrinsics().unwrap()
    }

    #[test]
    fn field_generation() {
        let cfg = WorldConfig { n_landmarks: 50, ..WorldConfig::default() };
        let a = generate_field(&cfg).unwrap();
        assert_eq!(a, generate_field(&cfg).unwrap());
        assert_eq!(a.len(), 50);
        let planar: Vec<Vec3<f64>> = (0..20).map(|i| Vec3::new(i as f64 * 0.1, (i * i % 7) as f64, 1.0)).collect();
        assert_eq!(LandmarkField::new(planar), Err(SimError::Coplanar));
        let flat = WorldConfig { field_volume: [(1.0, 2.0), (-1.0, 1.0), (0.5, 0.5)], ..cfg };
        assert_eq!(generate_field(&flat), Err(SimError::DegenerateField { attempts: FIELD_ATTEMPTS }));
        assert!(LandmarkField::new(vec![Vec3::new(1.0, 2.0, 3.0); 5]).is_err());
    }

    #[test]
    fn observation_at_goal_is_exact() {
        let cfg = WorldConfig::default().noise_free();
        let field = generate_field(&cfg).unwrap();
        let b = BaseState::new(0.1, -0.2, 0.1);
        let obs = observe(&b, &b, &field, &k(&cfg), &cfg, 1).unwrap();
        assert!(obs.matches.correspondences.len() >= 12);
        for c in &obs.matches.correspondences {
            assert!(project(&k(&cfg), &c.current_point).unwrap().distance_squared(&c.goal_pixel) < 1e-18);
        }
        let servo = ServoConfig::default();
        let est = solve_pnp_ransac(&obs.matches.correspondences, &k(&cfg), &servo, 3).unwrap();
        assert!(est.translation.norm() < 1e-9);
        assert!(crate::geometry::quat_distance(&est.rotation, &UnitQuaternion::identity()) < 1e-9);
    }

    #[test]
    fn outliers_are_exact_and_labeled() {
        let base = WorldConfig { outlier_fraction: 0.3, n_landmarks: 400, ..WorldConfig::default() };
        let field = generate_field(&base).unwrap();
        let b = BaseState::default();
        let set = match_views(&b, &b, &field, &k(&base), &base, 4).unwrap();
        let n = set.correspondences.len();
        assert_eq!(set.outlier.iter().filter(|&&o| o).count(), (0.3 * n as f64).round() as usize);
        // exactly 100 visible points gives exactly 30 outliers
        let hundred: Vec<Vec3<f64>> = set.landmark.iter().take(100).map(|&i| field.points()[i]).collect();
        let f100 = LandmarkField::new(hundred).unwrap();
        let s100 = match_views(&b, &b, &f100, &k(&base), &base, 5).unwrap();
        assert_eq!(s100.correspondences.len(), 100);
        assert_eq!(s100.outlier.iter().filter(|&&o| o).count(), 30);
    }

    #[test]
    fn depth_image_matches_landmarks() {
        let cfg = WorldConfig { outlier_fraction: 0.0, ..WorldConfig::default() };
        let field = generate_field(&cfg).unwrap();
        let b = BaseState::default();
        let obs = observe(&b, &b, &field, &k(&cfg), &cfg, 6).unwrap();
        let to_cam = cfg.world_to_camera(&b);
        let mut checked = 0;
        for (c, &li) in obs.matches.correspondences.iter().zip(&obs.matches.landmark) {
            let px = project(&k(&cfg), &c.current_point).unwrap();
            let z = obs.depth.get(px.u.floor() as usize, px.v.floor() as usize);
            let truth = to_cam.apply_point(&field.points()[li]).z;
            // nearer landmarks may occlude the splat
            assert!(z <= c.current_point.z + 1e-12);
            if (z - c.current_point.z).abs() < 1e-12 {
                assert!((z - truth).abs() < 5.0 * cfg.depth_noise_sigma);
                checked += 1;
            }
        }
        assert!(checked > 20);
        assert!(obs.depth.values().iter().all(|&v| v <= cfg.max_depth));
    }

    #[test]
    fn nothing_visible() {
        let cfg = WorldConfig::default();
        let field = generate_field(&cfg).unwrap();
        let away = BaseState::new(0.0, 0.0, std::f64::consts::PI);
        assert_eq!(
            match_views(&away, &BaseState::default(), &field, &k(&cfg), &cfg, 0),
            Err(SimError::NoVisibleLandmarks)
        );
    }

    #[test]
    fn base_motion() {
        let cfg = WorldConfig::default().noise_free();
        let s = BaseState::new(0.3, -0.1, 0.4);
        assert_eq!(step_base(&s, [0.0; 3], 1.0, &cfg, 0), s);
        let a = step_base(&BaseState::default(), [0.1, 0.0, 0.0], 1.0, &cfg, 0);
        assert_eq!((a.x, a.y, a.yaw), (0.1, 0.0, 0.0));
        let b = step_base(&BaseState::new(0.0, 0.0, std::f64::consts::FRAC_PI_2), [0.1, 0.0, 0.0], 1.0, &cfg, 0);
        assert!(b.x.abs() < 1e-12 && (b.y - 0.1).abs() < 1e-12);
        let g = ground_truth_error(&BaseState::new(0.03, 0.04, 0.2), &BaseState::new(0.0, 0.0, 0.2));
        assert!((g.0 - 0.05).abs() < 1e-15 && g.1 == 0.0);
        let w = ground_truth_error(&BaseState::new(0.0, 0.0, 179f64.to_radians()), &BaseState::new(0.0, 0.0, -179f64.to_radians()));
        assert!((w.1 - 2f64.to_radians()).abs() < 1e-12);
    }

    #[test]
    fn drive_kicks_only_on_reorientation() {
        let cfg = WorldConfig { actuation_noise_sigma: 0.0, coupling_gain: 0.1, ..WorldConfig::default() };
        let mut d = Drive::default();
        let s1 = d.step(&BaseState::default(), [0.2, 0.0, 0.0], 0.5, &cfg, 0);
        assert_eq!((s1.x, s1.y), (0.1, 0.0));
        let s2 = d.step(&s1, [0.2, 0.0, 0.0], 0.5, &cfg, 0);
        assert!((s2.x - 0.2).abs() < 1e-15 && s2.y == 0.0);
        // quarter turn to +y: kick of 0.1 * pi/2 * 0.1 m toward -x (turn side)
        let s3 = d.step(&s2, [0.0, 0.2, 0.0], 0.5, &cfg, 0);
        let kick = 0.1 * std::f64::consts::FRAC_PI_2 * 0.1;
        assert!((s3.x - (0.2 - kick)).abs() < 1e-12 && (s3.y - 0.1).abs() < 1e-12);
    }

    #[test]
    fn chain_dynamics() {
        let c = KinematicChain::uniform(vec![0.1, -0.2], 0.3, -1.0, 1.0).unwrap();
        assert_eq!(chain_step(&c, &[0.1, -0.2], 0.1).unwrap().0, c);
        let unit = KinematicChain::uniform(vec![0.0, 0.0], 0.1, -1.0, 1.0).unwrap();
        assert_eq!(chain_step(&unit, &[0.5, -0.25], 0.1).unwrap().0.q, vec![0.5, -0.25]);
        let lag = KinematicChain::uniform(vec![0.0], 0.2, -2.0, 2.0).unwrap();
        let mut s = lag.clone();
        let dt = 0.002;
        for _ in 0..(5.0 * 0.2 / dt) as usize {
            s = chain_step(&s, &[1.0], dt).unwrap().0;
        }
        assert!(s.q[0] >= 0.99);
        let (out, hit) = chain_step(&unit, &[3.0, 0.0], 0.1).unwrap();
        assert!(hit && out.q[0] == 1.0);
    }

    #[test]
    fn servo_converges_noise_free() {
        let cfg = WorldConfig::default().noise_free();
        let goal = BaseState::default();
        let start = BaseState::new(-0.3, 0.2, -15f64.to_radians());
        let mut world = SimWorld::new(cfg.clone(), start).unwrap();
        let servo = ServoConfig { extrinsic: cfg.camera_extrinsic(), ..ServoConfig::default() };
        let out = servo_loop(&mut world, &goal, &servo).unwrap();
        assert!(out.converged);
        let g = ground_truth_pose_error(&world.state(), &goal);
        assert!(g.e_x.abs() <= servo.eps_x && g.e_y.abs() <= servo.eps_y && g.e_yaw.abs() <= servo.eps_yaw, "{g:?}");
        let e = out.final_error().unwrap();
        assert!(e.e_x.abs() <= servo.eps_x && e.e_y.abs() <= servo.eps_y && e.e_yaw.abs() <= servo.eps_yaw);
        // at the goal: nothing to do
        let mut still = SimWorld::new(cfg.clone(), goal).unwrap();
        let out = servo_loop(&mut still, &goal, &servo).unwrap();
        assert!(out.converged && out.steps == 0);
        // budget of one step from far away
        let mut far = SimWorld::new(cfg, start).unwrap();
        let out = servo_loop(&mut far, &goal, &ServoConfig { max_steps: 1, ..servo }).unwrap();
        assert!(!out.converged && out.termination == Termination::StepBudgetExhausted && out.steps == 1);
    }

    #[test]
    fn servo_is_deterministic() {
        let cfg = WorldConfig::default();
        let field = generate_field(&cfg).unwrap();
        let servo = ServoConfig::default();
        let a = run_trial(&cfg, &servo, &Scenario::default(), &field, 3, 9).unwrap();
        let b = run_trial(&cfg, &servo, &Scenario::default(), &field, 3, 9).unwrap();
        assert_eq!(a.outcome, b.outcome);
        assert_eq!(a.open_loop, b.open_loop);
    }

    #[test]
    fn augmentation_aligns_depth_histograms() {
        use crate::depth_aug::{clip_depth, histogram, kl_divergence, real_pipeline, sim_pipeline, AugmentConfig};
        let d = 1.0;
        for (i, clean) in depth_scene_suite(4, 11).iter().enumerate() {
            let real = real_pipeline(&synthetic_real_capture(clean, i as u64), d);
            let aug = sim_pipeline(clean, &AugmentConfig { clip_distance: d, seed: i as u64, ..AugmentConfig::default() }, None).unwrap();
            let hr = histogram(&real, 32);
            let kl_aug = kl_divergence(&histogram(&aug, 32), &hr, 1e-6);
            let kl_raw = kl_divergence(&histogram(clean, 32), &hr, 1e-6);
            let kl_clip = kl_divergence(&histogram(&clip_depth(clean, d), 32), &hr, 1e-6);
            assert!(kl_aug < kl_raw, "scene {i}: {kl_aug} vs {kl_raw}");
            assert!(kl_aug < kl_clip, "scene {i}: {kl_aug} vs clip-only {kl_clip}");
        }
    }

    proptest::proptest! {
        #[test]
        fn step_is_invertible(x in -1.0..1.0f64, y in -1.0..1.0f64, yaw in -3.0..3.0f64,
                              vx in -0.3..0.3f64, vy in -0.3..0.3f64, w in -0.5..0.5f64, dt in 0.01..1.0f64) {
            let cfg = WorldConfig::default().noise_free();
            let s = BaseState::new(x, y, yaw);
            let there = step_base(&s, [vx, vy, w], dt, &cfg, 0);
            let back = step_base(&there, [-vx, -vy, -w], dt, &cfg, 0);
            proptest::prop_assert!((back.x - x).abs() < 1e-12 && (back.y - y).abs() < 1e-12);
            proptest::prop_assert!(wrap_angle(back.yaw - s.yaw).abs() < 1e-12);
        }

        #[test]
        fn distance_error_is_symmetric(a in -1.0..1.0f64, b in -1.0..1.0f64, c in -1.0..1.0f64, d in -1.0..1.0f64) {
            let p = BaseState::new(a, b, 0.3);
            let q = BaseState::new(c, d, -1.0);
            proptest::prop_assert_eq!(ground_truth_error(&p, &q).0, ground_truth_error(&q, &p).0);
        }
    }
}
