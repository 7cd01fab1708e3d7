//! One-shot human motion references: file ingestion, preprocessing and
//! rigid augmentation.
//!
//! File layout (comma separated, one frame per line):
//!
//! ```text
//! #traj v1 objects=<n> layout=<TRAJECTORY_LAYOUT>
//! index,dt,{id,px,py,pz,qw,qx,qy,qz}*n,{kp 6x3,wrist 7}*2,{guidance 6}*2
//! ```
//!
//! Hand keypoints are stored fingertips first (thumb to little finger) and
//! the palm last. Guidance actions are `(tx, ty, tz, roll, pitch, yaw)`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{apply_transform, quat_distance, Pose, RigidTransform, UnitQuaternion, Vec3};
use crate::scalar::Real;

pub const TRAJECTORY_VERSION: &str = "v1";
pub const TRAJECTORY_LAYOUT: &str =
    "index,dt,object[id,px,py,pz,qw,qx,qy,qz]*n,left[kp6x3,wrist7],right[kp6x3,wrist7],guidance_left[6],guidance_right[6]";
pub const KEYPOINTS_PER_HAND: usize = 6;
const HAND_FIELDS: usize = KEYPOINTS_PER_HAND * 3 + 7;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("frame {frame}: {msg}")]
    Validation { frame: usize, msg: String },
    #[error("stride must be at least 1")]
    InvalidStride,
    #[error("symmetry group is empty")]
    EmptyGroup,
    #[error("unknown object id {0:?}")]
    UnknownObject(String),
    #[error("invalid augmentation range: {0}")]
    InvalidRange(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Five fingertips and the palm of one hand.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HandKeypoints<T: Real> {
    pub fingertips: [Vec3<T>; 5],
    pub palm: Vec3<T>,
}

impl<T: Real> HandKeypoints<T> {
    /// Fingertips then palm.
    pub fn points(&self) -> [Vec3<T>; KEYPOINTS_PER_HAND] {
        let f = self.fingertips;
        [f[0], f[1], f[2], f[3], f[4], self.palm]
    }

    pub fn from_points(p: [Vec3<T>; KEYPOINTS_PER_HAND]) -> Self {
        Self { fingertips: [p[0], p[1], p[2], p[3], p[4]], palm: p[5] }
    }

    fn map(&self, f: impl Fn(&Vec3<T>) -> Vec3<T>) -> Self {
        Self::from_points(self.points().map(|p| f(&p)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HandState<T: Real> {
    pub keypoints: HandKeypoints<T>,
    pub wrist: Pose<T>,
}

/// Coarse arm action `(tx, ty, tz, roll, pitch, yaw)` taken from the reference.
pub type GuidanceAction<T> = [T; 6];

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryFrame<T: Real> {
    pub index: usize,
    pub objects: Vec<(String, Pose<T>)>,
    pub left: HandState<T>,
    pub right: HandState<T>,
    /// Left arm then right arm.
    pub guidance: [GuidanceAction<T>; 2],
}

impl<T: Real> TrajectoryFrame<T> {
    pub fn object(&self, id: &str) -> Option<&Pose<T>> {
        self.objects.iter().find(|(oid, _)| oid == id).map(|(_, p)| p)
    }

    pub fn hands(&self) -> [&HandState<T>; 2] {
        [&self.left, &self.right]
    }
}

/// Validated, immutable reference trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory<T: Real> {
    frames: Vec<TrajectoryFrame<T>>,
    dt: T,
}

impl<T: Real> ReferenceTrajectory<T> {
    pub fn new(frames: Vec<TrajectoryFrame<T>>, dt: T) -> Result<Self, TrajectoryError> {
        if frames.is_empty() {
            return Err(TrajectoryError::Validation { frame: 0, msg: "trajectory has no frames".into() });
        }
        if !(dt > T::zero()) || !dt.is_finite() {
            return Err(TrajectoryError::Validation { frame: 0, msg: format!("dt must be positive, got {dt}") });
        }
        let ids = |f: &TrajectoryFrame<T>| -> Result<BTreeSet<String>, TrajectoryError> {
            let mut set = BTreeSet::new();
            for (id, _) in &f.objects {
                if !set.insert(id.clone()) {
                    return Err(TrajectoryError::Validation {
                        frame: f.index,
                        msg: format!("duplicate object id {id:?}"),
                    });
                }
            }
            Ok(set)
        };
        let reference = ids(&frames[0])?;
        for f in &frames {
            if ids(f)? != reference {
                return Err(TrajectoryError::Validation {
                    frame: f.index,
                    msg: "object id set differs from the first frame".into(),
                });
            }
            if !frame_is_finite(f) {
                return Err(TrajectoryError::Validation { frame: f.index, msg: "non-finite value".into() });
            }
        }
        Ok(Self { frames, dt })
    }

    pub fn frames(&self) -> &[TrajectoryFrame<T>] {
        &self.frames
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn object_ids(&self) -> Vec<String> {
        self.frames[0].objects.iter().map(|(id, _)| id.clone()).collect()
    }

    /// Frame used as the reference at rollout step `step` (clamped to the end).
    pub fn frame_at(&self, step: usize) -> &TrajectoryFrame<T> {
        &self.frames[step.min(self.frames.len() - 1)]
    }
}

fn frame_is_finite<T: Real>(f: &TrajectoryFrame<T>) -> bool {
    let pose_ok = |p: &Pose<T>| p.to_array7().iter().all(|v| v.is_finite());
    f.objects.iter().all(|(_, p)| pose_ok(p))
        && f.hands().iter().all(|h| pose_ok(&h.wrist) && h.keypoints.points().iter().all(|k| k.is_finite()))
        && f.guidance.iter().flatten().all(|v| v.is_finite())
}

fn header_line(n_objects: usize) -> String {
    format!("#traj {TRAJECTORY_VERSION} objects={n_objects} layout={TRAJECTORY_LAYOUT}")
}

/// Serializes a trajectory into the line format.
pub fn format_trajectory<T: Real>(traj: &ReferenceTrajectory<T>) -> String {
    let mut out = header_line(traj.frames[0].objects.len());
    out.push('\n');
    for f in &traj.frames {
        let mut fields: Vec<String> = vec![f.index.to_string(), traj.dt.to_string()];
        for (id, pose) in &f.objects {
            fields.push(id.clone());
            fields.extend(pose.to_array7().iter().map(T::to_string));
        }
        for hand in f.hands() {
            for k in hand.keypoints.points() {
                fields.extend(k.to_array().iter().map(T::to_string));
            }
            fields.extend(hand.wrist.to_array7().iter().map(T::to_string));
        }
        for g in &f.guidance {
            fields.extend(g.iter().map(T::to_string));
        }
        let _ = writeln!(out, "{}", fields.join(","));
    }
    out
}

pub fn save_trajectory<T: Real>(traj: &ReferenceTrajectory<T>, path: impl AsRef<Path>) -> Result<(), TrajectoryError> {
    std::fs::write(path, format_trajectory(traj))?;
    Ok(())
}

pub fn load_trajectory<T: Real>(path: impl AsRef<Path>) -> Result<ReferenceTrajectory<T>, TrajectoryError> {
    parse_trajectory(&std::fs::read_to_string(path)?)
}

/// Checks the magic and version of a header line and returns its `key=value` fields.
pub(crate) fn parse_header(line: &str, magic: &str, version: &str, line_no: usize) -> Result<Vec<(String, String)>, TrajectoryError> {
    let perr = |msg: String| TrajectoryError::Parse { line: line_no, msg };
    let mut parts = line.split_whitespace();
    if parts.next() != Some(magic) {
        return Err(perr(format!("expected header starting with {magic:?}")));
    }
    match parts.next() {
        Some(v) if v == version => {}
        other => return Err(perr(format!("unsupported version {other:?}, expected {version}"))),
    }
    parts
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| perr(format!("malformed header field {kv:?}")))
        })
        .collect()
}

pub(crate) fn parse_num<T: Real>(tok: &str, line: usize) -> Result<T, TrajectoryError> {
    tok.trim()
        .parse::<T>()
        .map_err(|_| TrajectoryError::Parse { line, msg: format!("invalid number {tok:?}") })
}

/// Sequential reader over the comma-separated fields of one record.
pub(crate) struct Fields<'a> {
    pub toks: &'a [&'a str],
    pub pos: usize,
    pub line: usize,
}

impl<'a> Fields<'a> {
    pub fn text(&mut self) -> Result<&'a str, TrajectoryError> {
        let t = self
            .toks
            .get(self.pos)
            .copied()
            .ok_or(TrajectoryError::Parse { line: self.line, msg: "record too short".into() })?;
        if t.is_empty() {
            return Err(TrajectoryError::Parse { line: self.line, msg: format!("empty field {}", self.pos + 1) });
        }
        self.pos += 1;
        Ok(t)
    }

    pub fn nums<T: Real>(&mut self, n: usize) -> Result<Vec<T>, TrajectoryError> {
        (0..n).map(|_| self.text().and_then(|t| parse_num(t, self.line))).collect()
    }
}

pub fn parse_trajectory<T: Real>(text: &str) -> Result<ReferenceTrajectory<T>, TrajectoryError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines.next().ok_or(TrajectoryError::Parse { line: 1, msg: "empty file".into() })?;
    let fields = parse_header(header, "#traj", TRAJECTORY_VERSION, hline + 1)?;
    let mut n_objects = None;
    for (k, v) in &fields {
        match k.as_str() {
            "objects" => {
                n_objects = Some(v.parse::<usize>().map_err(|_| TrajectoryError::Parse {
                    line: hline + 1,
                    msg: format!("invalid object count {v:?}"),
                })?)
            }
            "layout" if v != TRAJECTORY_LAYOUT => {
                return Err(TrajectoryError::Parse { line: hline + 1, msg: format!("unsupported layout {v:?}") })
            }
            _ => {}
        }
    }
    let n_objects = n_objects.ok_or(TrajectoryError::Parse { line: hline + 1, msg: "header lacks objects=".into() })?;
    let expected = 2 + 8 * n_objects + 2 * HAND_FIELDS + 12;

    let mut frames = Vec::new();
    let mut dt: Option<T> = None;
    for (i, line) in lines {
        let ln = i + 1;
        let toks: Vec<&str> = line.split(',').map(str::trim).collect();
        if toks.len() != expected {
            return Err(TrajectoryError::Parse { line: ln, msg: format!("expected {expected} fields, got {}", toks.len()) });
        }
        let index: usize = toks[0]
            .parse()
            .map_err(|_| TrajectoryError::Parse { line: ln, msg: format!("invalid frame index {:?}", toks[0]) })?;
        let this_dt: T = parse_num(toks[1], ln)?;
        match dt {
            None => dt = Some(this_dt),
            Some(d) if d != this_dt => {
                return Err(TrajectoryError::Validation { frame: index, msg: "dt differs between frames".into() })
            }
            _ => {}
        }
        let mut rd = Fields { toks: &toks, pos: 2, line: ln };
        let pose_from = |v: &[T]| {
            Pose::from_slice7(v).map_err(|e| TrajectoryError::Validation { frame: index, msg: e.to_string() })
        };
        let mut objects = Vec::with_capacity(n_objects);
        for _ in 0..n_objects {
            let id = rd.text()?.to_string();
            let v = rd.nums::<T>(7)?;
            objects.push((id, pose_from(&v)?));
        }
        let mut hands = Vec::with_capacity(2);
        for _ in 0..2 {
            let v = rd.nums::<T>(HAND_FIELDS)?;
            let pts: [Vec3<T>; KEYPOINTS_PER_HAND] = std::array::from_fn(|k| Vec3::from_slice(&v[3 * k..3 * k + 3]));
            hands.push(HandState { keypoints: HandKeypoints::from_points(pts), wrist: pose_from(&v[18..25])? });
        }
        let (left, right) = (hands[0], hands[1]);
        let g = rd.nums::<T>(12)?;
        let guidance = [
            std::array::from_fn(|k| g[k]),
            std::array::from_fn(|k| g[6 + k]),
        ];
        frames.push(TrajectoryFrame { index, objects, left, right, guidance });
    }
    let dt = dt.ok_or(TrajectoryError::Validation { frame: 0, msg: "trajectory has no frames".into() })?;
    ReferenceTrajectory::new(frames, dt)
}

/// Applies one rigid transform to every object pose, hand keypoint and wrist
/// pose of every frame. Guidance translations are rotated; their Euler parts
/// are left as-is.
pub fn augment_trajectory<T: Real>(traj: &ReferenceTrajectory<T>, t: &RigidTransform<T>) -> ReferenceTrajectory<T> {
    let hand = |h: &HandState<T>| HandState {
        keypoints: h.keypoints.map(|p| t.apply_point(p)),
        wrist: apply_transform(t, &h.wrist),
    };
    let frames = traj
        .frames
        .iter()
        .map(|f| TrajectoryFrame {
            index: f.index,
            objects: f.objects.iter().map(|(id, p)| (id.clone(), apply_transform(t, p))).collect(),
            left: hand(&f.left),
            right: hand(&f.right),
            guidance: f.guidance.map(|g| {
                let tr = t.rotation.rotate(&Vec3::new(g[0], g[1], g[2]));
                [tr.x, tr.y, tr.z, g[3], g[4], g[5]]
            }),
        })
        .collect();
    ReferenceTrajectory { frames, dt: traj.dt }
}

/// Per-axis translation bounds and a yaw bound for placement randomization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationRange<T> {
    translation: [(T, T); 3],
    yaw: (T, T),
}

impl<T: Real> AugmentationRange<T> {
    pub fn new(translation: [(T, T); 3], yaw: (T, T)) -> Result<Self, TrajectoryError> {
        for (axis, (lo, hi)) in translation.iter().enumerate() {
            if !(lo <= hi) {
                return Err(TrajectoryError::InvalidRange(format!("axis {axis}: {lo} > {hi}")));
            }
        }
        if !(yaw.0 <= yaw.1) {
            return Err(TrajectoryError::InvalidRange(format!("yaw: {} > {}", yaw.0, yaw.1)));
        }
        Ok(Self { translation, yaw })
    }

    pub fn translation(&self) -> [(T, T); 3] {
        self.translation
    }

    pub fn yaw(&self) -> (T, T) {
        self.yaw
    }
}

/// Uniform translation within the box and a uniform pure yaw.
pub fn sample_random_transform<T: Real>(range: &AugmentationRange<T>, seed: u64) -> RigidTransform<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |(lo, hi): (T, T)| {
        let u: f64 = rng.random();
        lo + (hi - lo) * T::lit(u)
    };
    let [ax, ay, az] = range.translation;
    let translation = Vec3::new(uniform(ax), uniform(ay), uniform(az));
    let yaw = uniform(range.yaw);
    RigidTransform::new(UnitQuaternion::from_yaw(yaw), translation)
}

/// Keeps frames `0, s, 2s, ...` plus the final frame; `dt` scales by `s`.
pub fn downsample<T: Real>(traj: &ReferenceTrajectory<T>, stride: usize) -> Result<ReferenceTrajectory<T>, TrajectoryError> {
    if stride < 1 {
        return Err(TrajectoryError::InvalidStride);
    }
    let last = traj.frames.len() - 1;
    let mut frames: Vec<_> = traj.frames.iter().step_by(stride).cloned().collect();
    if !last.is_multiple_of(stride) {
        frames.push(traj.frames[last].clone());
    }
    Ok(ReferenceTrajectory { frames, dt: traj.dt * T::lit(stride as f64) })
}

/// Removes symmetry flips from one object's orientation track.
///
/// Each frame after the first is replaced by `q ⊗ s`, with `s` the group
/// element bringing it closest to the previous canonicalized orientation.
/// The group must contain the identity and be closed under composition.
pub fn canonicalize_symmetry<T: Real>(
    traj: &ReferenceTrajectory<T>,
    object_id: &str,
    symmetry_group: &[UnitQuaternion<T>],
) -> Result<ReferenceTrajectory<T>, TrajectoryError> {
    if symmetry_group.is_empty() {
        return Err(TrajectoryError::EmptyGroup);
    }
    let slot = traj.frames[0]
        .objects
        .iter()
        .position(|(id, _)| id == object_id)
        .ok_or_else(|| TrajectoryError::UnknownObject(object_id.to_string()))?;
    let mut frames = traj.frames.clone();
    let slot_in = |f: &TrajectoryFrame<T>| f.objects.iter().position(|(id, _)| id == object_id).unwrap_or(slot);
    let mut prev = frames[0].objects[slot_in(&frames[0])].1.orientation;
    for f in frames.iter_mut().skip(1) {
        let s = slot_in(f);
        let q = f.objects[s].1.orientation;
        let mut best = q;
        let mut best_d = quat_distance(&q, &prev);
        for g in symmetry_group {
            let cand = q.compose(g);
            let d = quat_distance(&cand, &prev);
            if d < best_d {
                best = cand;
                best_d = d;
            }
        }
        f.objects[s].1.orientation = best;
        prev = best;
    }
    Ok(ReferenceTrajectory { frames, dt: traj.dt })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geometry::RigidTransform;
    use rand::Rng;
    use std::f64::consts::{FRAC_PI_4, PI};

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose<f64> {
        Pose::new(
            Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..1.0)),
            UnitQuaternion::new_normalize(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
        )
    }

    fn random_hand(rng: &mut ChaCha8Rng) -> HandState<f64> {
        let pts = std::array::from_fn(|_| random_pose(rng).position);
        HandState { keypoints: HandKeypoints::from_points(pts), wrist: random_pose(rng) }
    }

    pub(crate) fn random_trajectory(n: usize, seed: u64) -> ReferenceTrajectory<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..n)
            .map(|index| TrajectoryFrame {
                index,
                objects: vec![("bottle".into(), random_pose(&mut rng)), ("cup".into(), random_pose(&mut rng))],
                left: random_hand(&mut rng),
                right: random_hand(&mut rng),
                guidance: [
                    std::array::from_fn(|_| rng.random_range(-0.2..0.2)),
                    std::array::from_fn(|_| rng.random_range(-0.2..0.2)),
                ],
            })
            .collect();
        ReferenceTrajectory::new(frames, 1.0 / 75.0).unwrap()
    }

    #[test]
    fn two_frame_file_loads() {
        let text = format_trajectory(&random_trajectory(2, 1));
        let t: ReferenceTrajectory<f64> = parse_trajectory(&text).unwrap();
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn save_load_round_trip_is_identity() {
        let traj = random_trajectory(50, 7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.traj");
        save_trajectory(&traj, &path).unwrap();
        let back: ReferenceTrajectory<f64> = load_trajectory(&path).unwrap();
        assert_eq!(back, traj);
    }

    #[test]
    fn inconsistent_ids_name_the_frame() {
        let traj = random_trajectory(3, 2);
        let text = format_trajectory(&traj);
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[3] = lines[3].replacen("cup", "plate", 1);
        let err = parse_trajectory::<f64>(&lines.join("\n")).unwrap_err();
        match err {
            TrajectoryError::Validation { frame, .. } => assert_eq!(frame, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_record_is_parse_error() {
        let text = format_trajectory(&random_trajectory(2, 3));
        let bad = text.replacen(",0.", ",x0.", 1);
        assert!(matches!(parse_trajectory::<f64>(&bad), Err(TrajectoryError::Parse { line: 2, .. })));
        let short = format!("{}\n0,0.1,1,2\n", header_line(2));
        assert!(matches!(parse_trajectory::<f64>(&short), Err(TrajectoryError::Parse { line: 2, .. })));
        assert!(matches!(parse_trajectory::<f64>("#traj v9 objects=1\n"), Err(TrajectoryError::Parse { .. })));
    }

    #[test]
    fn identity_augmentation_is_noop() {
        let traj = random_trajectory(5, 4);
        let out = augment_trajectory(&traj, &RigidTransform::identity());
        for (a, b) in out.frames().iter().zip(traj.frames()) {
            for ((_, pa), (_, pb)) in a.objects.iter().zip(&b.objects) {
                assert!((pa.position - pb.position).norm() < 1e-15);
                assert!(quat_distance(&pa.orientation, &pb.orientation) < 1e-7);
            }
        }
    }

    fn relative(a: &Pose<f64>, b: &Pose<f64>) -> RigidTransform<f64> {
        a.as_transform().inverse().compose(&b.as_transform())
    }

    #[test]
    fn translation_preserves_hand_object_relative_pose() {
        let traj = random_trajectory(10, 5);
        let t = RigidTransform::from_translation(Vec3::new(0.1, -0.05, 0.02));
        let out = augment_trajectory(&traj, &t);
        for (a, b) in out.frames().iter().zip(traj.frames()) {
            let ra = relative(&a.objects[0].1, &a.left.wrist);
            let rb = relative(&b.objects[0].1, &b.left.wrist);
            assert!((ra.translation - rb.translation).norm() < 1e-12);
        }
    }

    #[test]
    fn yaw_augmentation_matches_rotation_matrix() {
        let traj = random_trajectory(10, 6);
        let t = RigidTransform::new(UnitQuaternion::from_yaw(FRAC_PI_4), Vec3::new(0.2, 0.0, 0.0));
        let out = augment_trajectory(&traj, &t);
        let (s, c) = FRAC_PI_4.sin_cos();
        for (a, b) in out.frames().iter().zip(traj.frames()) {
            for ((_, pa), (_, pb)) in a.objects.iter().zip(&b.objects) {
                let p = pb.position;
                let oracle = Vec3::new(c * p.x - s * p.y + 0.2, s * p.x + c * p.y, p.z);
                assert!((pa.position - oracle).norm() < 1e-10);
            }
            let g = b.guidance[0];
            let ga = a.guidance[0];
            assert!((ga[0] - (c * g[0] - s * g[1])).abs() < 1e-12);
            assert_eq!(&ga[3..], &g[3..]);
        }
    }

    #[test]
    fn sample_transform_examples() {
        let zero = AugmentationRange::new([(0.0, 0.0); 3], (0.0, 0.0)).unwrap();
        assert_eq!(sample_random_transform(&zero, 9), RigidTransform::identity());
        let r = AugmentationRange::new([(-0.1, 0.1), (0.0, 0.2), (-0.01, 0.01)], (-PI / 6.0, PI / 6.0)).unwrap();
        assert_eq!(sample_random_transform(&r, 3), sample_random_transform(&r, 3));
        assert!(AugmentationRange::new([(0.1, 0.0), (0.0, 0.0), (0.0, 0.0)], (0.0, 0.0)).is_err());
    }

    #[test]
    fn sample_transform_uniform_statistics() {
        let bounds = [(-0.1, 0.1), (0.0, 0.2), (0.3, 0.5)];
        let r = AugmentationRange::new(bounds, (-0.5, 0.5)).unwrap();
        let n = 10_000;
        let mut sums = [0.0; 3];
        for seed in 0..n {
            let t = sample_random_transform(&r, seed);
            let tr = t.translation.to_array();
            for k in 0..3 {
                assert!(tr[k] >= bounds[k].0 && tr[k] <= bounds[k].1);
                sums[k] += tr[k];
            }
            let yaw = crate::geometry::yaw_of(&t.rotation);
            assert!((-0.5..=0.5).contains(&yaw));
        }
        for k in 0..3 {
            let (lo, hi) = bounds[k];
            let mean = sums[k] / n as f64;
            let se = (hi - lo) / 12f64.sqrt() / (n as f64).sqrt();
            assert!((mean - 0.5 * (lo + hi)).abs() < 3.0 * se, "axis {k}: {mean}");
        }
    }

    #[test]
    fn downsample_examples() {
        let traj = random_trajectory(10, 8);
        assert_eq!(downsample(&traj, 1).unwrap(), traj);
        let d = downsample(&traj, 3).unwrap();
        let idx: Vec<usize> = d.frames().iter().map(|f| f.index).collect();
        assert_eq!(idx, vec![0, 3, 6, 9]);
        assert!(matches!(downsample(&traj, 0), Err(TrajectoryError::InvalidStride)));

        let long = random_trajectory(300, 9);
        let d = downsample(&long, 5).unwrap();
        let mut oracle: Vec<usize> = (0..300).filter(|i| i % 5 == 0).collect();
        oracle.push(299);
        assert_eq!(d.frames().iter().map(|f| f.index).collect::<Vec<_>>(), oracle);
        assert_eq!(d.len(), 61);
        assert!((1.0 / d.dt() - 15.0).abs() < 1e-9);
        for f in d.frames() {
            assert!(long.frames().contains(f));
        }
    }

    fn spinning_trajectory(flip_at: usize, n: usize) -> ReferenceTrajectory<f64> {
        let base = random_trajectory(n, 10);
        let flip = UnitQuaternion::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), PI);
        let frames = base
            .frames()
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let mut f = f.clone();
                let mut q = UnitQuaternion::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), 0.02 * i as f64);
                if i >= flip_at && i % 2 == 0 {
                    q = q.compose(&flip);
                }
                f.objects[0].1.orientation = q;
                f
            })
            .collect();
        ReferenceTrajectory::new(frames, base.dt()).unwrap()
    }

    #[test]
    fn canonicalize_two_fold_flips() {
        let traj = spinning_trajectory(10, 30);
        let group = [
            UnitQuaternion::identity(),
            UnitQuaternion::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), PI),
        ];
        let raw_max = traj
            .frames()
            .windows(2)
            .map(|w| quat_distance(&w[0].objects[0].1.orientation, &w[1].objects[0].1.orientation))
            .fold(0.0, f64::max);
        assert!(raw_max > PI / 2.0);
        let out = canonicalize_symmetry(&traj, "bottle", &group).unwrap();
        for (k, w) in out.frames().windows(2).enumerate() {
            let d = quat_distance(&w[0].objects[0].1.orientation, &w[1].objects[0].1.orientation);
            // brute force: the best achievable step over the group for this frame
            let raw = traj.frames()[k + 1].objects[0].1.orientation;
            let best = group
                .iter()
                .map(|g| quat_distance(&raw.compose(g), &w[0].objects[0].1.orientation))
                .fold(f64::INFINITY, f64::min);
            assert!((d - best).abs() < 1e-12);
            assert!(d < PI / 2.0);
            assert_eq!(w[1].objects[0].1.position, traj.frames()[k + 1].objects[0].1.position);
        }
        let again = canonicalize_symmetry(&out, "bottle", &group).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn canonicalize_trivial_cases() {
        let traj = random_trajectory(6, 11);
        assert_eq!(canonicalize_symmetry(&traj, "cup", &[UnitQuaternion::identity()]).unwrap(), traj);
        assert!(matches!(canonicalize_symmetry(&traj, "cup", &[]), Err(TrajectoryError::EmptyGroup)));
        assert!(matches!(
            canonicalize_symmetry(&traj, "vase", &[UnitQuaternion::identity()]),
            Err(TrajectoryError::UnknownObject(_))
        ));
        let mut frames = traj.frames().to_vec();
        let q = UnitQuaternion::new_normalize(0.9, 0.1, 0.3, 0.2);
        for f in &mut frames {
            f.objects[1].1.orientation = q;
        }
        let constant = ReferenceTrajectory::new(frames, traj.dt()).unwrap();
        let group = [
            UnitQuaternion::identity(),
            UnitQuaternion::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), PI / 2.0),
            UnitQuaternion::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), PI),
            UnitQuaternion::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), -PI / 2.0),
        ];
        assert_eq!(canonicalize_symmetry(&constant, "cup", &group).unwrap(), constant);
    }
}
