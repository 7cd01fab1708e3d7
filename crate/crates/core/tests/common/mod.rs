//! Fixtures shared by the integration suites.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sim2real::cli::RolloutStep;
use sim2real::geometry::{Pose, UnitQuaternion, Vec3};
use sim2real::rewards::{ContactSet, JointState, CHAIN_LEN};
use sim2real::trajectory::{HandKeypoints, HandState, ReferenceTrajectory, TrajectoryFrame};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_sim2real")
}

/// Runs the binary with `args` inside `dir`.
pub fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin()).current_dir(dir).args(args).output().expect("spawn sim2real")
}

pub fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

/// Parses a CSV body (header skipped) into rows of fields.
pub fn rows(path: impl AsRef<Path>) -> Vec<Vec<String>> {
    String::from_utf8(read(path))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

pub fn header(path: impl AsRef<Path>) -> String {
    String::from_utf8(read(path)).unwrap().lines().next().unwrap_or_default().to_string()
}

fn v(rng: &mut ChaCha8Rng, r: f64) -> Vec3<f64> {
    Vec3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))
}

fn hand(rng: &mut ChaCha8Rng, center: Vec3<f64>) -> HandState<f64> {
    let pts = std::array::from_fn(|_| center + v(rng, 0.08));
    HandState { keypoints: HandKeypoints::from_points(pts), wrist: Pose::new(center, UnitQuaternion::identity()) }
}

/// A short single-object reference trajectory with hands hovering around the object.
pub fn sample_trajectory(frames: usize, seed: u64) -> ReferenceTrajectory<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = (0..frames)
        .map(|i| {
            let p = Vec3::new(0.5 + 0.01 * i as f64, 0.0, 0.8);
            let q = UnitQuaternion::from_yaw(0.05 * i as f64);
            TrajectoryFrame {
                index: i,
                objects: vec![("mug".to_string(), Pose::new(p, q))],
                left: hand(&mut rng, p + Vec3::new(0.0, 0.1, 0.0)),
                right: hand(&mut rng, p - Vec3::new(0.0, 0.1, 0.0)),
                guidance: [[0.0; 6]; 2],
            }
        })
        .collect();
    ReferenceTrajectory::new(frames, 0.05).unwrap()
}

/// A rollout that replays the reference exactly, touching with `contacts[k]`
/// hand parts at step `k`.
pub fn replay_rollout(traj: &ReferenceTrajectory<f64>, contacts: &[usize]) -> Vec<RolloutStep> {
    traj.frames()
        .iter()
        .zip(contacts)
        .map(|(f, &n)| {
            let mut c = ContactSet::new(CHAIN_LEN, 1);
            for part in 0..n {
                c.set(part, 0, true).unwrap();
            }
            RolloutStep {
                step: f.index,
                objects: f.objects.clone(),
                left: f.left.keypoints,
                right: f.right.keypoints,
                contacts: c,
                joints: JointState::new(vec![1.0, -2.0, 0.5], vec![0.2, 0.1, -0.4]).unwrap(),
            }
        })
        .collect()
}

pub fn tmp() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

pub fn p(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
