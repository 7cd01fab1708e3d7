//! Closed-loop localization: PnP pose estimation (RANSAC over a minimal
//! solver, then Gauss-Newton refinement), per-axis PID control and the
//! sequential x → y → yaw servo loop.
//!
//! Conventions. A correspondence pairs a pixel in the goal image with a 3D
//! point in the current camera frame. A [`PnPEstimate`] maps current-camera
//! coordinates into goal-camera coordinates, so `project(K, R X + t)` should
//! land on the goal pixel.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{project, yaw_of, CameraIntrinsics, PixelPoint, RigidTransform, UnitQuaternion, Vec3};
use crate::linalg::{cholesky_solve, symmetric_eigen};
use crate::scalar::{wrap_angle, Real};

/// Correspondences a minimal sample draws (three for the solver, one to
/// choose among its solutions).
pub const MIN_CORRESPONDENCES: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PnpError {
    #[error("need at least {need} correspondences, got {got}")]
    TooFewCorrespondences { got: usize, need: usize },
    #[error("correspondence {index} lies behind the camera under the estimate")]
    PointBehindCamera { index: usize },
    #[error("every minimal sample was degenerate")]
    DegenerateGeometry,
    #[error("best hypothesis has only {inliers} inliers")]
    NoConsensus { inliers: usize },
    #[error("normal equations are singular")]
    SingularNormalEquations,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence<T> {
    pub goal_pixel: PixelPoint<T>,
    pub current_point: Vec3<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnPEstimate<T: Real> {
    pub rotation: UnitQuaternion<T>,
    pub translation: Vec3<T>,
    pub inlier_mask: Vec<bool>,
    /// Mean squared pixel distance over the inliers.
    pub mean_reprojection_error: T,
    /// Gauss-Newton iterations that changed the pose in the last refinement.
    pub refine_iterations: usize,
}

impl<T: Real> PnPEstimate<T> {
    pub fn from_pose(rotation: UnitQuaternion<T>, translation: Vec3<T>, n: usize) -> Self {
        Self {
            rotation,
            translation,
            inlier_mask: vec![true; n],
            mean_reprojection_error: T::zero(),
            refine_iterations: 0,
        }
    }

    pub fn transform(&self) -> RigidTransform<T> {
        RigidTransform::new(self.rotation, self.translation)
    }

    pub fn inlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseError<T> {
    pub e_x: T,
    pub e_y: T,
    pub e_yaw: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
    Yaw,
    Done,
}

impl Axis {
    pub fn index(self) -> Option<usize> {
        match self {
            Axis::X => Some(0),
            Axis::Y => Some(1),
            Axis::Yaw => Some(2),
            Axis::Done => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Yaw => "yaw",
            Axis::Done => "done",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidGains<T> {
    pub kp: T,
    pub ki: T,
    pub kd: T,
    /// Bound on the accumulated integral (anti-windup).
    pub integral_clamp: T,
    /// Bound on the commanded velocity.
    pub output_clamp: T,
}

impl<T: Real> PidGains<T> {
    pub fn new(kp: T, ki: T, kd: T, integral_clamp: T, output_clamp: T) -> Self {
        Self { kp, ki, kd, integral_clamp, output_clamp }
    }

    fn is_valid(&self) -> bool {
        self.kp >= T::zero()
            && self.ki >= T::zero()
            && self.kd >= T::zero()
            && self.integral_clamp > T::zero()
            && self.output_clamp > T::zero()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServoConfig<T: Real> {
    pub eps_x: T,
    pub eps_y: T,
    pub eps_yaw: T,
    pub ransac_max_iterations: usize,
    /// Adaptive stopping confidence for RANSAC.
    pub ransac_confidence: T,
    pub inlier_threshold_px: T,
    pub refine_max_iterations: usize,
    pub refine_tolerance: T,
    pub dt: T,
    pub max_steps: usize,
    /// Camera pose in the base frame (maps camera coordinates to base coordinates).
    pub extrinsic: RigidTransform<T>,
    /// Gains for x, y and yaw, in that order.
    pub gains: [PidGains<T>; 3],
    /// Actuate all axes at once instead of the sequential strategy.
    pub simultaneous: bool,
    pub max_consecutive_failures: usize,
    pub seed: u64,
}

impl<T: Real> Default for ServoConfig<T> {
    fn default() -> Self {
        let lin = PidGains::new(T::lit(0.8), T::zero(), T::lit(0.1), T::lit(0.5), T::lit(0.3));
        let ang = PidGains::new(T::lit(0.8), T::zero(), T::lit(0.1), T::lit(0.5), T::lit(0.5));
        Self {
            eps_x: T::lit(0.01),
            eps_y: T::lit(0.01),
            eps_yaw: T::lit(1f64.to_radians()),
            ransac_max_iterations: 500,
            ransac_confidence: T::lit(0.999),
            inlier_threshold_px: T::lit(4.0),
            refine_max_iterations: 20,
            refine_tolerance: T::lit(1e-10),
            dt: T::lit(0.5),
            max_steps: 200,
            extrinsic: RigidTransform::identity(),
            gains: [lin, lin, ang],
            simultaneous: false,
            max_consecutive_failures: 5,
            seed: 0,
        }
    }
}

impl<T: Real> ServoConfig<T> {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.eps_x > T::zero() && self.eps_y > T::zero() && self.eps_yaw > T::zero()) {
            return Err("thresholds must be positive".into());
        }
        if !(self.dt > T::zero()) {
            return Err("dt must be positive".into());
        }
        if !(self.inlier_threshold_px > T::zero()) {
            return Err("inlier threshold must be positive".into());
        }
        if !(self.ransac_confidence > T::zero() && self.ransac_confidence < T::one()) {
            return Err("ransac confidence must lie in (0, 1)".into());
        }
        if self.ransac_max_iterations == 0 || self.max_consecutive_failures == 0 {
            return Err("iteration and failure budgets must be positive".into());
        }
        if !self.gains.iter().all(PidGains::is_valid) {
            return Err("gains must be non-negative and clamps positive".into());
        }
        Ok(())
    }
}

fn transform_point<T: Real>(r: &UnitQuaternion<T>, t: &Vec3<T>, x: &Vec3<T>) -> Vec3<T> {
    r.rotate(x) + *t
}

/// Mean squared pixel distance between `project(K, R X + t)` and the goal
/// pixel, over all correspondences.
pub fn reprojection_error<T: Real>(
    k: &CameraIntrinsics<T>,
    est: &PnPEstimate<T>,
    corrs: &[Correspondence<T>],
) -> Result<T, PnpError> {
    if corrs.is_empty() {
        return Err(PnpError::TooFewCorrespondences { got: 0, need: 1 });
    }
    let mut sum = T::zero();
    for (index, c) in corrs.iter().enumerate() {
        let p = transform_point(&est.rotation, &est.translation, &c.current_point);
        let px = project(k, &p).map_err(|_| PnpError::PointBehindCamera { index })?;
        sum += px.distance_squared(&c.goal_pixel);
    }
    Ok(sum / T::lit(corrs.len() as f64))
}

fn squared_error<T: Real>(
    k: &CameraIntrinsics<T>,
    r: &UnitQuaternion<T>,
    t: &Vec3<T>,
    c: &Correspondence<T>,
) -> Option<T> {
    project(k, &transform_point(r, t, &c.current_point))
        .ok()
        .map(|px| px.distance_squared(&c.goal_pixel))
}

// ---------------------------------------------------------------------------
// Minimal solver

/// Polynomial with ascending coefficients.
fn poly_mul<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| a.get(i).copied().unwrap_or(T::zero()) + b.get(i).copied().unwrap_or(T::zero()))
        .collect()
}

fn poly_scale<T: Real>(a: &[T], s: T) -> Vec<T> {
    a.iter().map(|&x| x * s).collect()
}

fn poly_eval<T: Real>(p: &[T], x: T) -> T {
    p.iter().rev().fold(T::zero(), |acc, &c| acc * x + c)
}

fn poly_derivative<T: Real>(p: &[T]) -> Vec<T> {
    p.iter().enumerate().skip(1).map(|(i, &c)| c * T::lit(i as f64)).collect()
}

/// Real roots of a polynomial, by bracketing between the roots of its
/// derivative and bisecting.
pub(crate) fn real_roots<T: Real>(p: &[T]) -> Vec<T> {
    let scale = p.iter().fold(T::zero(), |m, c| m.max(c.abs()));
    if scale == T::zero() {
        return Vec::new();
    }
    let mut p: Vec<T> = p.to_vec();
    while p.len() > 1 && p[p.len() - 1].abs() <= scale * T::lit(1e-14) {
        p.pop();
    }
    match p.len() {
        0 | 1 => return Vec::new(),
        2 => return vec![-p[0] / p[1]],
        3 => {
            let (c, b, a) = (p[0], p[1], p[2]);
            let disc = b * b - T::lit(4.0) * a * c;
            if disc < T::zero() {
                return Vec::new();
            }
            let sq = disc.sqrt();
            let q = -T::lit(0.5) * (b + if b >= T::zero() { sq } else { -sq });
            let mut r = vec![q / a];
            if q != T::zero() {
                r.push(c / q);
            } else {
                r.push(T::zero());
            }
            return r;
        }
        _ => {}
    }
    let n = p.len() - 1;
    let lead = p[n];
    let bound = T::one() + p[..n].iter().fold(T::zero(), |m, c| m.max((*c / lead).abs()));
    let mut crit: Vec<T> = real_roots(&poly_derivative(&p))
        .into_iter()
        .filter(|x| x.abs() < bound)
        .collect();
    crit.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mut knots = vec![-bound];
    knots.extend(crit);
    knots.push(bound);
    let mut roots = Vec::new();
    let tiny = scale * T::lit(1e-13);
    for w in knots.windows(2) {
        let (mut a, mut b) = (w[0], w[1]);
        let (mut fa, fb) = (poly_eval(&p, a), poly_eval(&p, b));
        if fa.abs() <= tiny && roots.last().is_none_or(|&r: &T| (r - a).abs() > T::lit(1e-9)) {
            // double root at a critical point
            roots.push(a);
            continue;
        }
        if (fa < T::zero()) == (fb < T::zero()) {
            continue;
        }
        for _ in 0..200 {
            let m = (a + b) * T::lit(0.5);
            if m <= a || m >= b {
                break;
            }
            let fm = poly_eval(&p, m);
            if (fm < T::zero()) == (fa < T::zero()) {
                a = m;
                fa = fm;
            } else {
                b = m;
            }
        }
        roots.push((a + b) * T::lit(0.5));
    }
    roots
}

/// Rigid transform `(R, t)` minimizing `sum |R x_i + t - y_i|^2`, from the
/// dominant eigenvector of the 4x4 quaternion form of the cross-covariance.
pub(crate) fn absolute_orientation<T: Real>(xs: &[Vec3<T>], ys: &[Vec3<T>]) -> (UnitQuaternion<T>, Vec3<T>) {
    let n = T::lit(xs.len() as f64);
    let cx = xs.iter().fold(Vec3::zeros(), |a, &b| a + b).scale(T::one() / n);
    let cy = ys.iter().fold(Vec3::zeros(), |a, &b| a + b).scale(T::one() / n);
    let mut s = [[T::zero(); 3]; 3];
    for (x, y) in xs.iter().zip(ys) {
        let a = (*x - cx).to_array();
        let b = (*y - cy).to_array();
        for i in 0..3 {
            for j in 0..3 {
                s[i][j] += a[i] * b[j];
            }
        }
    }
    let [[sxx, sxy, sxz], [syx, syy, syz], [szx, szy, szz]] = s;
    let m = [
        sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
        syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
        szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
        sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz,
    ];
    let (_, vecs) = symmetric_eigen(&m, 4);
    let q = UnitQuaternion::new_normalize(vecs[3], vecs[7], vecs[11], vecs[15]);
    let t = cy - q.rotate(&cx);
    (q, t)
}

/// Candidate poses from three correspondences (Grunert's distance
/// formulation). The quartic in the depth ratio `v = s3 / s1` is assembled
/// by polynomial elimination of `u = s2 / s1`.
pub fn p3p<T: Real>(k: &CameraIntrinsics<T>, corrs: &[Correspondence<T>; 3]) -> Vec<(UnitQuaternion<T>, Vec3<T>)> {
    let two = T::lit(2.0);
    let x = [corrs[0].current_point, corrs[1].current_point, corrs[2].current_point];
    let j = [
        k.bearing(&corrs[0].goal_pixel),
        k.bearing(&corrs[1].goal_pixel),
        k.bearing(&corrs[2].goal_pixel),
    ];
    let a2 = (x[1] - x[2]).norm_squared();
    let b2 = (x[0] - x[2]).norm_squared();
    let c2 = (x[0] - x[1]).norm_squared();
    let area = (x[1] - x[0]).cross(&(x[2] - x[0])).norm_squared();
    let longest = a2.max(b2).max(c2);
    if !(b2 > T::zero()) || area <= longest * longest * T::lit(1e-10) {
        return Vec::new();
    }
    let cos_a = j[1].dot(&j[2]);
    let cos_b = j[0].dot(&j[2]);
    let cos_g = j[0].dot(&j[1]);
    let k1 = c2 / b2;
    let k2 = a2 / b2;
    let kd = k1 - k2;
    // u = N(v) / D(v)
    let num = [T::one() - kd, two * kd * cos_b, -T::one() - kd];
    let den = [two * cos_g, -two * cos_a];
    // 1 - k1 * (1 + v^2 - 2 v cos_b)
    let rest = [T::one() - k1, two * k1 * cos_b, -k1];
    let quartic = poly_add(
        &poly_add(&poly_mul(&num, &num), &poly_scale(&poly_mul(&num, &den), -two * cos_g)),
        &poly_mul(&rest, &poly_mul(&den, &den)),
    );
    let mut out = Vec::new();
    for mut v in real_roots(&quartic) {
        // Newton polish on the quartic
        let dq = poly_derivative(&quartic);
        for _ in 0..3 {
            let d = poly_eval(&dq, v);
            if d != T::zero() {
                v -= poly_eval(&quartic, v) / d;
            }
        }
        if !(v > T::zero()) {
            continue;
        }
        let d = poly_eval(&den, v);
        if d.abs() < T::lit(1e-12) {
            continue;
        }
        let u = poly_eval(&num, v) / d;
        if !(u > T::zero()) {
            continue;
        }
        let p = T::one() + v * v - two * v * cos_b;
        let s1 = (b2 / p).sqrt();
        let ys = [j[0].scale(s1), j[1].scale(u * s1), j[2].scale(v * s1)];
        let (q, t) = absolute_orientation(&x, &ys);
        if q.w().is_finite() && t.is_finite() {
            out.push((q, t));
        }
    }
    out
}

/// Minimal four-point hypothesis: P3P on the first three, the fourth picks
/// the solution.
fn minimal_pose<T: Real>(
    k: &CameraIntrinsics<T>,
    sample4: &[Correspondence<T>; 4],
) -> Option<(UnitQuaternion<T>, Vec3<T>)> {
    let three = [sample4[0], sample4[1], sample4[2]];
    p3p(k, &three)
        .into_iter()
        .filter_map(|(q, t)| squared_error(k, &q, &t, &sample4[3]).map(|e| (e, q, t)))
        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(_, q, t)| (q, t))
}

/// RANSAC over four-point minimal samples with adaptive stopping, followed
/// by refinement on the consensus set (re-masked until the set is stable).
pub fn solve_pnp_ransac<T: Real>(
    corrs: &[Correspondence<T>],
    k: &CameraIntrinsics<T>,
    cfg: &ServoConfig<T>,
    seed: u64,
) -> Result<PnPEstimate<T>, PnpError> {
    let n = corrs.len();
    if n < MIN_CORRESPONDENCES {
        return Err(PnpError::TooFewCorrespondences { got: n, need: MIN_CORRESPONDENCES });
    }
    let thr2 = cfg.inlier_threshold_px * cfg.inlier_threshold_px;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, T, UnitQuaternion<T>, Vec3<T>)> = None;
    let mut needed = cfg.ransac_max_iterations;
    let mut it = 0;
    while it < needed.min(cfg.ransac_max_iterations) {
        it += 1;
        let idx = sample(&mut rng, n, 4);
        let s = [corrs[idx.index(0)], corrs[idx.index(1)], corrs[idx.index(2)], corrs[idx.index(3)]];
        let Some((q, t)) = minimal_pose(k, &s) else { continue };
        let mut count = 0;
        let mut score = T::zero();
        for c in corrs {
            match squared_error(k, &q, &t, c) {
                Some(e) if e <= thr2 => {
                    count += 1;
                    score += e;
                }
                _ => score += thr2,
            }
        }
        let better = match &best {
            None => true,
            Some((bc, bs, _, _)) => count > *bc || (count == *bc && score < *bs),
        };
        if better {
            best = Some((count, score, q, t));
            let w = T::lit(count as f64 / n as f64);
            let miss = T::one() - w.powi(4);
            needed = if miss <= T::zero() {
                0
            } else {
                let r = (T::one() - cfg.ransac_confidence).ln() / miss.ln();
                r.ceil().to_usize().unwrap_or(usize::MAX)
            };
        }
    }
    let Some((count, _, q, t)) = best else { return Err(PnpError::DegenerateGeometry) };
    if count < MIN_CORRESPONDENCES {
        return Err(PnpError::NoConsensus { inliers: count });
    }
    let mask_for = |q: &UnitQuaternion<T>, t: &Vec3<T>| -> Vec<bool> {
        corrs
            .iter()
            .map(|c| squared_error(k, q, t, c).is_some_and(|e| e <= thr2))
            .collect()
    };
    let mut est = PnPEstimate { rotation: q, translation: t, inlier_mask: mask_for(&q, &t), mean_reprojection_error: T::zero(), refine_iterations: 0 };
    est.mean_reprojection_error = inlier_error(k, &est.rotation, &est.translation, corrs, &est.inlier_mask).unwrap_or(T::infinity());
    for _ in 0..5 {
        let refined = refine_pnp(corrs, k, &est, cfg)?;
        let mask = mask_for(&refined.rotation, &refined.translation);
        let stable = mask == refined.inlier_mask;
        if mask.iter().filter(|&&b| b).count() < MIN_CORRESPONDENCES {
            return Ok(refined);
        }
        est = refined;
        if stable {
            break;
        }
        est.inlier_mask = mask;
        est.mean_reprojection_error =
            inlier_error(k, &est.rotation, &est.translation, corrs, &est.inlier_mask).unwrap_or(T::infinity());
    }
    Ok(est)
}

fn inlier_error<T: Real>(
    k: &CameraIntrinsics<T>,
    r: &UnitQuaternion<T>,
    t: &Vec3<T>,
    corrs: &[Correspondence<T>],
    mask: &[bool],
) -> Option<T> {
    let mut sum = T::zero();
    let mut n = 0;
    for (c, _) in corrs.iter().zip(mask).filter(|(_, &m)| m) {
        sum += squared_error(k, r, t, c)?;
        n += 1;
    }
    (n > 0).then(|| sum / T::lit(n as f64))
}

// ---------------------------------------------------------------------------
// Refinement

/// Jacobian of the projected pixel of `R X + t` with respect to a left
/// rotation increment `w` (`R <- exp(w) R`) and a translation increment, as
/// two rows of six columns `[w_x, w_y, w_z, t_x, t_y, t_z]`.
pub fn reprojection_jacobian<T: Real>(
    k: &CameraIntrinsics<T>,
    rotation: &UnitQuaternion<T>,
    translation: &Vec3<T>,
    point: &Vec3<T>,
) -> Result<[[T; 6]; 2], PnpError> {
    let rx = rotation.rotate(point);
    let p = rx + *translation;
    if !(p.z > T::zero()) {
        return Err(PnpError::PointBehindCamera { index: 0 });
    }
    let iz = T::one() / p.z;
    let dpi = [
        [k.fx * iz, T::zero(), -k.fx * p.x * iz * iz],
        [T::zero(), k.fy * iz, -k.fy * p.y * iz * iz],
    ];
    // dp/dw = -[R X]x
    let skew = [
        [T::zero(), rx.z, -rx.y],
        [-rx.z, T::zero(), rx.x],
        [rx.y, -rx.x, T::zero()],
    ];
    let mut j = [[T::zero(); 6]; 2];
    for r in 0..2 {
        for c in 0..3 {
            j[r][c] = (0..3).fold(T::zero(), |acc, i| acc + dpi[r][i] * skew[i][c]);
            j[r][c + 3] = dpi[r][c];
        }
    }
    Ok(j)
}

fn apply_increment<T: Real>(r: &UnitQuaternion<T>, t: &Vec3<T>, d: &[T]) -> (UnitQuaternion<T>, Vec3<T>) {
    let w = Vec3::new(d[0], d[1], d[2]);
    (UnitQuaternion::from_rotation_vector(w).compose(r), *t + Vec3::new(d[3], d[4], d[5]))
}

/// Gauss-Newton on the six pose parameters over the initial estimate's
/// inliers (all correspondences when the mask selects fewer than four).
/// Backtracking keeps the mean squared error from increasing; a singular
/// system is retried once with Levenberg damping.
pub fn refine_pnp<T: Real>(
    corrs: &[Correspondence<T>],
    k: &CameraIntrinsics<T>,
    initial: &PnPEstimate<T>,
    cfg: &ServoConfig<T>,
) -> Result<PnPEstimate<T>, PnpError> {
    let mask: Vec<bool> = if initial.inlier_mask.len() == corrs.len()
        && initial.inlier_mask.iter().filter(|&&b| b).count() >= MIN_CORRESPONDENCES
    {
        initial.inlier_mask.clone()
    } else {
        vec![true; corrs.len()]
    };
    let used: Vec<&Correspondence<T>> = corrs.iter().zip(&mask).filter(|(_, &m)| m).map(|(c, _)| c).collect();
    if used.len() < 3 {
        return Err(PnpError::TooFewCorrespondences { got: used.len(), need: MIN_CORRESPONDENCES });
    }
    let cost = |r: &UnitQuaternion<T>, t: &Vec3<T>| -> T {
        let mut s = T::zero();
        for c in &used {
            match squared_error(k, r, t, c) {
                Some(e) => s += e,
                None => return T::infinity(),
            }
        }
        s / T::lit(used.len() as f64)
    };
    let (mut r, mut t) = (initial.rotation, initial.translation);
    let mut current = cost(&r, &t);
    let mut iterations = 0;
    for _ in 0..cfg.refine_max_iterations {
        let mut h = [T::zero(); 36];
        let mut g = [T::zero(); 6];
        for c in &used {
            let Ok(j) = reprojection_jacobian(k, &r, &t, &c.current_point) else {
                return Err(PnpError::PointBehindCamera { index: 0 });
            };
            let px = project(k, &transform_point(&r, &t, &c.current_point))
                .map_err(|_| PnpError::PointBehindCamera { index: 0 })?;
            let res = [px.u - c.goal_pixel.u, px.v - c.goal_pixel.v];
            for row in 0..2 {
                for a in 0..6 {
                    g[a] += j[row][a] * res[row];
                    for b in 0..6 {
                        h[a * 6 + b] += j[row][a] * j[row][b];
                    }
                }
            }
        }
        let rhs: Vec<T> = g.iter().map(|&x| -x).collect();
        let step = match cholesky_solve(&h, &rhs, 6) {
            Some(s) => s,
            None => {
                let trace = (0..6).fold(T::zero(), |a, i| a + h[i * 6 + i]);
                let lambda = T::lit(1e-6) * trace.max(T::one());
                let mut damped = h;
                for i in 0..6 {
                    damped[i * 6 + i] += lambda;
                }
                cholesky_solve(&damped, &rhs, 6).ok_or(PnpError::SingularNormalEquations)?
            }
        };
        let norm = step.iter().fold(T::zero(), |a, &x| a + x * x).sqrt();
        if !norm.is_finite() {
            return Err(PnpError::SingularNormalEquations);
        }
        if norm < cfg.refine_tolerance {
            break;
        }
        let mut scale = T::one();
        let mut accepted = false;
        for _ in 0..30 {
            let scaled: Vec<T> = step.iter().map(|&x| x * scale).collect();
            let (nr, nt) = apply_increment(&r, &t, &scaled);
            let c = cost(&nr, &nt);
            if c <= current {
                r = nr;
                t = nt;
                current = c;
                accepted = true;
                break;
            }
            scale *= T::lit(0.5);
        }
        if !accepted {
            break;
        }
        iterations += 1;
    }
    Ok(PnPEstimate {
        rotation: r,
        translation: t,
        inlier_mask: mask,
        mean_reprojection_error: current,
        refine_iterations: iterations,
    })
}

/// Goal base pose expressed in the current base frame.
///
/// `extrinsic` maps camera coordinates into base coordinates. The estimate
/// maps current-camera into goal-camera coordinates, so the goal base frame
/// seen from the current base is `E * T^-1 * E^-1`.
pub fn extract_pose_errors<T: Real>(est: &PnPEstimate<T>, extrinsic: &RigidTransform<T>) -> PoseError<T> {
    let rel = extrinsic.compose(&est.transform().inverse()).compose(&extrinsic.inverse());
    PoseError {
        e_x: rel.translation.x,
        e_y: rel.translation.y,
        e_yaw: wrap_angle(yaw_of(&rel.rotation)),
    }
}

// ---------------------------------------------------------------------------
// Control

/// Per-axis controller memory.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PidState<T> {
    pub integral: T,
    pub prev_error: Option<T>,
}

impl<T: Real> PidState<T> {
    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

/// `v = kp e + ki ∫e + kd de/dt`, clamped. The integral uses the trapezoid
/// rule once a previous sample exists (the first sample contributes `e dt`);
/// the derivative is a backward difference and zero on the first call.
pub fn pid_step<T: Real>(state: &mut PidState<T>, e: T, dt: T, gains: &PidGains<T>) -> T {
    let derivative = match state.prev_error {
        Some(prev) => {
            state.integral += (e + prev) * T::lit(0.5) * dt;
            (e - prev) / dt
        }
        None => {
            state.integral += e * dt;
            T::zero()
        }
    };
    state.integral = state.integral.max(-gains.integral_clamp).min(gains.integral_clamp);
    state.prev_error = Some(e);
    let v = gains.kp * e + gains.ki * state.integral + gains.kd * derivative;
    v.max(-gains.output_clamp).min(gains.output_clamp)
}

/// First axis in (x, y, yaw) whose error exceeds its threshold.
pub fn sequential_axis<T: Real>(err: &PoseError<T>, cfg: &ServoConfig<T>) -> Axis {
    if err.e_x.abs() > cfg.eps_x {
        Axis::X
    } else if err.e_y.abs() > cfg.eps_y {
        Axis::Y
    } else if err.e_yaw.abs() > cfg.eps_yaw {
        Axis::Yaw
    } else {
        Axis::Done
    }
}

/// What the servo loop needs from the robot (or a simulator standing in).
pub trait ServoWorld<T: Real> {
    type Goal;

    fn intrinsics(&self) -> CameraIntrinsics<T>;

    /// Matches the current view against the goal view. An empty or short
    /// list signals a matcher failure for this cycle.
    fn match_against(&mut self, goal: &Self::Goal) -> Vec<Correspondence<T>>;

    /// Applies a body-frame velocity command `(v_x, v_y, v_yaw)` for `dt`.
    fn command(&mut self, v: [T; 3], dt: T);

    /// Ground-truth `(distance, orientation)` error to the goal, if known.
    fn ground_truth_error(&self, _goal: &Self::Goal) -> Option<(T, T)> {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleRecord<T> {
    pub cycle: usize,
    pub n_matches: usize,
    pub n_inliers: usize,
    /// Root of the mean squared reprojection error, pixels.
    pub reproj_error_px: T,
    /// `None` when pose estimation failed this cycle.
    pub error: Option<PoseError<T>>,
    pub axis: Axis,
    pub command: [T; 3],
    pub ground_truth: Option<(T, T)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    StepBudgetExhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServoOutcome<T> {
    pub converged: bool,
    pub termination: Termination,
    /// Velocity commands issued.
    pub steps: usize,
    pub history: Vec<CycleRecord<T>>,
}

impl<T: Real> ServoOutcome<T> {
    pub fn final_error(&self) -> Option<PoseError<T>> {
        self.history.last().and_then(|r| r.error)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServoError {
    #[error("matcher failed for {cycles} consecutive cycles (last: {last})")]
    MatcherFailure { cycles: usize, last: PnpError },
    #[error("invalid servo config: {0}")]
    InvalidConfig(String),
}

/// One estimate from the current view, or the reason there is none.
fn estimate_cycle<T: Real, W: ServoWorld<T>>(
    world: &mut W,
    goal: &W::Goal,
    cfg: &ServoConfig<T>,
    seed: u64,
) -> (usize, Result<PnPEstimate<T>, PnpError>) {
    let corrs = world.match_against(goal);
    let k = world.intrinsics();
    (corrs.len(), solve_pnp_ransac(&corrs, &k, cfg, seed))
}

/// Re-estimates the pose every cycle and drives the active axis until every
/// error is inside its threshold or the step budget runs out.
pub fn servo_loop<T: Real, W: ServoWorld<T>>(
    world: &mut W,
    goal: &W::Goal,
    cfg: &ServoConfig<T>,
) -> Result<ServoOutcome<T>, ServoError> {
    cfg.validate().map_err(ServoError::InvalidConfig)?;
    let mut pids = [PidState::default(); 3];
    let mut active = Axis::Done;
    let mut failures = 0;
    let mut steps = 0;
    let mut history = Vec::new();
    for cycle in 0.. {
        let (n_matches, est) = estimate_cycle(world, goal, cfg, crate::derive_seed(cfg.seed, cycle as u64));
        let ground_truth = world.ground_truth_error(goal);
        let mut record = CycleRecord {
            cycle,
            n_matches,
            n_inliers: 0,
            reproj_error_px: T::nan(),
            error: None,
            axis: Axis::Done,
            command: [T::zero(); 3],
            ground_truth,
        };
        let est = match est {
            Ok(e) => {
                failures = 0;
                e
            }
            Err(e) => {
                failures += 1;
                if failures >= cfg.max_consecutive_failures {
                    return Err(ServoError::MatcherFailure { cycles: failures, last: e });
                }
                if steps >= cfg.max_steps {
                    history.push(record);
                    return Ok(ServoOutcome { converged: false, termination: Termination::StepBudgetExhausted, steps, history });
                }
                // hold still and look again
                world.command([T::zero(); 3], cfg.dt);
                steps += 1;
                history.push(record);
                continue;
            }
        };
        let err = extract_pose_errors(&est, &cfg.extrinsic);
        let axis = sequential_axis(&err, cfg);
        record.n_inliers = est.inlier_count();
        record.reproj_error_px = est.mean_reprojection_error.sqrt();
        record.error = Some(err);
        record.axis = axis;
        if axis == Axis::Done {
            history.push(record);
            return Ok(ServoOutcome { converged: true, termination: Termination::Converged, steps, history });
        }
        if steps >= cfg.max_steps {
            history.push(record);
            return Ok(ServoOutcome { converged: false, termination: Termination::StepBudgetExhausted, steps, history });
        }
        let errs = [err.e_x, err.e_y, err.e_yaw];
        let mut v = [T::zero(); 3];
        if cfg.simultaneous {
            for i in 0..3 {
                v[i] = pid_step(&mut pids[i], errs[i], cfg.dt, &cfg.gains[i]);
            }
        } else {
            if axis != active {
                pids.iter_mut().for_each(PidState::reset);
                active = axis;
            }
            let i = axis.index().expect("active axis");
            v[i] = pid_step(&mut pids[i], errs[i], cfg.dt, &cfg.gains[i]);
        }
        record.command = v;
        world.command(v, cfg.dt);
        steps += 1;
        history.push(record);
    }
    unreachable!("servo loop exits from inside")
}

/// Open-loop baseline: one estimate, then dead-reckoned x, y and yaw moves
/// at the clamped velocities, with a fractional final step per axis.
pub fn open_loop_correction<T: Real, W: ServoWorld<T>>(
    world: &mut W,
    goal: &W::Goal,
    cfg: &ServoConfig<T>,
) -> Result<(PoseError<T>, usize), PnpError> {
    let (_, est) = estimate_cycle(world, goal, cfg, crate::derive_seed(cfg.seed, 0));
    let err = extract_pose_errors(&est?, &cfg.extrinsic);
    let mut steps = 0;
    for (i, e) in [err.e_x, err.e_y, err.e_yaw].into_iter().enumerate() {
        let vmax = cfg.gains[i].output_clamp;
        let mut remaining = e.abs();
        let sign = if e < T::zero() { -T::one() } else { T::one() };
        while remaining > T::zero() && steps < cfg.max_steps {
            let travel = (vmax * cfg.dt).min(remaining);
            let mut v = [T::zero(); 3];
            v[i] = sign * travel / cfg.dt;
            world.command(v, cfg.dt);
            remaining -= travel;
            steps += 1;
        }
    }
    Ok((err, steps))
}
