//! Unified manipulation rewards over a reference trajectory: the
//! contact-gated object-centric distance chain, object trajectory tracking,
//! the joint power penalty, residual arm actions and early termination.

use thiserror::Error;

use crate::geometry::{quat_distance, UnitQuaternion, Vec3};
use crate::scalar::Real;
use crate::trajectory::HandKeypoints;

/// Keypoints per hand (five fingertips and the palm) times two hands.
pub const CHAIN_LEN: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("distance chains differ in length ({current} vs {reference})")]
    ChainLengthMismatch { current: usize, reference: usize },
    #[error("distance chain is empty")]
    EmptyChain,
    #[error("observation field {field}: expected {expected} values, got {got}")]
    DimensionMismatch { field: &'static str, expected: usize, got: usize },
    #[error("joint state has {forces} forces but {velocities} velocities")]
    JointStateMismatch { forces: usize, velocities: usize },
    #[error("contact index out of range: {0}")]
    ContactIndex(String),
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
}

/// Vectors from an object center to each hand keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceChain<T: Real> {
    vectors: Vec<Vec3<T>>,
}

impl<T: Real> DistanceChain<T> {
    pub fn new(vectors: Vec<Vec3<T>>) -> Result<Self, RewardError> {
        if vectors.is_empty() {
            return Err(RewardError::EmptyChain);
        }
        Ok(Self { vectors })
    }

    /// The 12-vector chain of both hands, left hand first.
    pub fn from_hands(object_center: &Vec3<T>, left: &HandKeypoints<T>, right: &HandKeypoints<T>) -> Self {
        let vectors = left
            .points()
            .iter()
            .chain(right.points().iter())
            .map(|k| *k - *object_center)
            .collect();
        Self { vectors }
    }

    pub fn vectors(&self) -> &[Vec3<T>] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn flatten(&self) -> Vec<T> {
        self.vectors.iter().flat_map(|v| v.to_array()).collect()
    }
}

/// One side of a reported contact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ContactBody {
    HandPart(usize),
    Object(usize),
}

/// Hand-part x object contact flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContactSet {
    n_parts: usize,
    n_objects: usize,
    flags: Vec<bool>,
}

impl ContactSet {
    pub fn new(n_parts: usize, n_objects: usize) -> Self {
        Self { n_parts, n_objects, flags: vec![false; n_parts * n_objects] }
    }

    /// Builds the flag table from simulator contact events, which may name
    /// either body first and may repeat. Hand-hand and object-object events
    /// are ignored.
    pub fn from_events(
        n_parts: usize,
        n_objects: usize,
        events: &[(ContactBody, ContactBody)],
    ) -> Result<Self, RewardError> {
        let mut set = Self::new(n_parts, n_objects);
        for &(a, b) in events {
            match (a, b) {
                (ContactBody::HandPart(p), ContactBody::Object(o)) | (ContactBody::Object(o), ContactBody::HandPart(p)) => {
                    set.set(p, o, true)?
                }
                _ => {}
            }
        }
        Ok(set)
    }

    pub fn set(&mut self, part: usize, object: usize, touching: bool) -> Result<(), RewardError> {
        if part >= self.n_parts || object >= self.n_objects {
            return Err(RewardError::ContactIndex(format!(
                "({part}, {object}) outside {}x{}",
                self.n_parts, self.n_objects
            )));
        }
        self.flags[part * self.n_objects + object] = touching;
        Ok(())
    }

    pub fn touching(&self, part: usize, object: usize) -> bool {
        part < self.n_parts && object < self.n_objects && self.flags[part * self.n_objects + object]
    }

    /// Row-major (part, object) flags.
    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn n_parts(&self) -> usize {
        self.n_parts
    }

    pub fn n_objects(&self) -> usize {
        self.n_objects
    }

    fn indicator(&self, a: ContactBody, b: ContactBody) -> usize {
        match (a, b) {
            (ContactBody::HandPart(p), ContactBody::Object(o)) | (ContactBody::Object(o), ContactBody::HandPart(p)) => {
                usize::from(self.touching(p, o))
            }
            _ => 0,
        }
    }
}

/// Number of distinct contacting (hand part, object) pairs.
///
/// The indicator is summed over both orderings of every pair and halved.
pub fn contact_count(contacts: &ContactSet) -> usize {
    let mut doubled = 0;
    for j in 0..contacts.n_objects {
        for i in 0..contacts.n_parts {
            let (h, o) = (ContactBody::HandPart(i), ContactBody::Object(j));
            doubled += contacts.indicator(h, o) + contacts.indicator(o, h);
        }
    }
    doubled / 2
}

/// Reward coefficients; defaults follow the tuned values `k1 = k2 = 1`,
/// `lambda = 1e-3`, `n_num = 2` with unit combination weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardConfig<T> {
    pub k1: T,
    pub k2: T,
    pub lambda: T,
    pub n_num: usize,
    pub w_chain: T,
    pub w_obj: T,
}

impl<T: Real> Default for RewardConfig<T> {
    fn default() -> Self {
        Self {
            k1: T::one(),
            k2: T::one(),
            lambda: T::lit(1e-3),
            n_num: 2,
            w_chain: T::one(),
            w_obj: T::one(),
        }
    }
}

impl<T: Real> RewardConfig<T> {
    pub fn validate(&self) -> Result<(), RewardError> {
        for (name, v) in [("k1", self.k1), ("k2", self.k2), ("lambda", self.lambda)] {
            if !(v >= T::zero()) || !v.is_finite() {
                return Err(RewardError::InvalidConfig(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// `exp(-mean_i |r_ref_i - r_i|)` when at least `n_num` contacts hold, else 0.
pub fn chain_reward<T: Real>(
    current: &DistanceChain<T>,
    reference: &DistanceChain<T>,
    n_contact: usize,
    cfg: &RewardConfig<T>,
) -> Result<T, RewardError> {
    if current.len() != reference.len() {
        return Err(RewardError::ChainLengthMismatch { current: current.len(), reference: reference.len() });
    }
    if n_contact < cfg.n_num {
        return Ok(T::zero());
    }
    let total = current
        .vectors
        .iter()
        .zip(&reference.vectors)
        .fold(T::zero(), |acc, (c, r)| acc + (*r - *c).norm());
    Ok((-total / T::lit(current.len() as f64)).exp())
}

/// `exp(-k1 |p - p_ref|^2 - k2 d_quat(q, q_ref)^2)`.
pub fn object_tracking_reward<T: Real>(
    p: &Vec3<T>,
    q: &UnitQuaternion<T>,
    p_ref: &Vec3<T>,
    q_ref: &UnitQuaternion<T>,
    cfg: &RewardConfig<T>,
) -> T {
    let d = quat_distance(q, q_ref);
    (-cfg.k1 * (*p - *p_ref).norm_squared() - cfg.k2 * d * d).exp()
}

/// Per-joint actuation forces and velocities of the hand joints.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState<T> {
    forces: Vec<T>,
    velocities: Vec<T>,
}

impl<T: Real> JointState<T> {
    pub fn new(forces: Vec<T>, velocities: Vec<T>) -> Result<Self, RewardError> {
        if forces.len() != velocities.len() {
            return Err(RewardError::JointStateMismatch { forces: forces.len(), velocities: velocities.len() });
        }
        Ok(Self { forces, velocities })
    }

    pub fn forces(&self) -> &[T] {
        &self.forces
    }

    pub fn velocities(&self) -> &[T] {
        &self.velocities
    }
}

/// `-lambda * sum_j |f_j * qdot_j|`.
pub fn power_penalty<T: Real>(js: &JointState<T>, cfg: &RewardConfig<T>) -> T {
    let power = js
        .forces
        .iter()
        .zip(&js.velocities)
        .fold(T::zero(), |acc, (f, v)| acc + (*f * *v).abs());
    -cfg.lambda * power
}

pub fn total_reward<T: Real>(chain: T, obj: T, penalty: T, cfg: &RewardConfig<T>) -> T {
    cfg.w_chain * chain + cfg.w_obj * obj + penalty
}

/// Scale of the residual arm correction: `±0.01 m` and `±0.04 rad` by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualBounds<T> {
    translation: T,
    orientation: T,
}

impl<T: Real> Default for ResidualBounds<T> {
    fn default() -> Self {
        Self { translation: T::lit(0.01), orientation: T::lit(0.04) }
    }
}

impl<T: Real> ResidualBounds<T> {
    pub fn new(translation: T, orientation: T) -> Option<Self> {
        (translation > T::zero() && orientation > T::zero()).then_some(Self { translation, orientation })
    }

    pub fn translation(&self) -> T {
        self.translation
    }

    pub fn orientation(&self) -> T {
        self.orientation
    }
}

/// Adds a network residual in `[-1, 1]^6` (clamped) scaled to the bounds
/// onto the coarse guidance action.
pub fn compose_residual_action<T: Real>(a_g: &[T; 6], delta: &[T; 6], bounds: &ResidualBounds<T>) -> [T; 6] {
    std::array::from_fn(|i| {
        let scale = if i < 3 { bounds.translation } else { bounds.orientation };
        a_g[i] + delta[i].max(-T::one()).min(T::one()) * scale
    })
}

/// True iff the object has drifted strictly farther than `threshold` from
/// its reference position.
pub fn should_terminate_early<T: Real>(p_obj: &Vec3<T>, p_ref: &Vec3<T>, threshold: T) -> bool {
    (*p_obj - *p_ref).norm() > threshold
}

/// Observation blocks in order, with their widths.
pub const OBSERVATION_LAYOUT: [(&str, usize); 14] = [
    ("arm_qpos", 12),
    ("hand_qpos", 36),
    ("arm_qvel", 12),
    ("hand_qvel", 36),
    ("hand_position", 6),
    ("hand_quaternion", 8),
    ("distance_chain", 72),
    ("contact", 24),
    ("actuator", 24),
    ("time", 1),
    ("ref_hand_position", 6),
    ("ref_hand_quaternion", 8),
    ("ref_object_position", 3),
    ("ref_object_quaternion", 4),
];

pub const OBSERVATION_DIM: usize = {
    let mut total = 0;
    let mut i = 0;
    while i < OBSERVATION_LAYOUT.len() {
        total += OBSERVATION_LAYOUT[i].1;
        i += 1;
    }
    total
};

/// Offset of a named block inside the observation vector.
pub fn observation_offset(field: &str) -> Option<usize> {
    let mut off = 0;
    for (name, width) in OBSERVATION_LAYOUT {
        if name == field {
            return Some(off);
        }
        off += width;
    }
    None
}

/// Robot state, reference frame and contacts at one control step.
#[derive(Debug, Clone)]
pub struct ObservationInputs<'a, T: Real> {
    pub arm_qpos: &'a [T],
    pub hand_qpos: &'a [T],
    pub arm_qvel: &'a [T],
    pub hand_qvel: &'a [T],
    pub hand_position: &'a [T],
    pub hand_quaternion: &'a [T],
    pub current_chain: &'a DistanceChain<T>,
    pub reference_chain: &'a DistanceChain<T>,
    pub contacts: &'a ContactSet,
    pub actuator: &'a [T],
    pub step: usize,
    pub horizon: usize,
    pub ref_hand_position: &'a [T],
    pub ref_hand_quaternion: &'a [T],
    pub ref_object_position: &'a [T],
    pub ref_object_quaternion: &'a [T],
}

/// Concatenates the observation blocks of [`OBSERVATION_LAYOUT`].
pub fn build_observation<T: Real>(inp: &ObservationInputs<'_, T>) -> Result<Vec<T>, RewardError> {
    let mut chain = inp.current_chain.flatten();
    chain.extend(inp.reference_chain.flatten());
    let contact: Vec<T> = inp.contacts.flags().iter().map(|&c| if c { T::one() } else { T::zero() }).collect();
    if inp.horizon == 0 {
        return Err(RewardError::DimensionMismatch { field: "time", expected: 1, got: 0 });
    }
    let time = [T::lit(inp.step as f64) / T::lit(inp.horizon as f64)];
    let blocks: [&[T]; 14] = [
        inp.arm_qpos,
        inp.hand_qpos,
        inp.arm_qvel,
        inp.hand_qvel,
        inp.hand_position,
        inp.hand_quaternion,
        &chain,
        &contact,
        inp.actuator,
        &time,
        inp.ref_hand_position,
        inp.ref_hand_quaternion,
        inp.ref_object_position,
        inp.ref_object_quaternion,
    ];
    let mut out = Vec::with_capacity(OBSERVATION_DIM);
    for ((field, expected), block) in OBSERVATION_LAYOUT.iter().zip(blocks) {
        if block.len() != *expected {
            return Err(RewardError::DimensionMismatch { field, expected: *expected, got: block.len() });
        }
        if let Some(bad) = block.iter().find(|v| !v.is_finite()) {
            return Err(RewardError::InvalidConfig(format!("non-finite value {bad} in {field}")));
        }
        out.extend_from_slice(block);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;
    use std::f64::consts::FRAC_PI_2;

    fn chain(seed: u64) -> DistanceChain<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DistanceChain::new(
            (0..CHAIN_LEN)
                .map(|_| Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn contact_count_examples() {
        assert_eq!(contact_count(&ContactSet::new(12, 2)), 0);
        use ContactBody::*;
        let one = ContactSet::from_events(12, 2, &[(HandPart(3), Object(0)), (Object(0), HandPart(3))]).unwrap();
        assert_eq!(contact_count(&one), 1);
        let four = ContactSet::from_events(
            12,
            2,
            &[(HandPart(0), Object(0)), (HandPart(1), Object(0)), (Object(0), HandPart(2)), (HandPart(5), Object(1))],
        )
        .unwrap();
        assert_eq!(contact_count(&four), 4);
        assert!(ContactSet::from_events(12, 2, &[(HandPart(12), Object(0))]).is_err());
    }

    #[test]
    fn contact_count_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let n_parts = rng.random_range(1..=24);
            let n_objects = rng.random_range(1..=3);
            let events: Vec<_> = (0..rng.random_range(0..40))
                .map(|_| {
                    let p = ContactBody::HandPart(rng.random_range(0..n_parts));
                    let o = ContactBody::Object(rng.random_range(0..n_objects));
                    if rng.random::<bool>() { (p, o) } else { (o, p) }
                })
                .collect();
            let distinct: HashSet<(ContactBody, ContactBody)> =
                events.iter().map(|&(a, b)| if a < b { (a, b) } else { (b, a) }).collect();
            let set = ContactSet::from_events(n_parts, n_objects, &events).unwrap();
            assert_eq!(contact_count(&set), distinct.len());
        }
    }

    #[test]
    fn chain_reward_examples() {
        let cfg = RewardConfig::default();
        let c = chain(1);
        assert_eq!(chain_reward(&c, &c, 2, &cfg).unwrap(), 1.0);
        assert_eq!(chain_reward(&c, &chain(2), 1, &cfg).unwrap(), 0.0);
        let offset = Vec3::new(0.06, 0.0, 0.08);
        let shifted = DistanceChain::new(c.vectors().iter().map(|v| *v + offset).collect()).unwrap();
        let r = chain_reward(&shifted, &c, 3, &cfg).unwrap();
        assert!((r - (-0.1f64).exp()).abs() < 1e-12);
        assert!((r - 0.9048).abs() < 1e-4);
        let short = DistanceChain::new(vec![Vec3::new(0.0, 0.0, 0.0)]).unwrap();
        assert!(matches!(chain_reward(&short, &c, 2, &cfg), Err(RewardError::ChainLengthMismatch { .. })));
    }

    #[test]
    fn object_tracking_examples() {
        let cfg = RewardConfig::default();
        let q = UnitQuaternion::new_normalize(0.2, 0.4, -0.1, 0.9);
        let p = Vec3::new(0.3, 0.1, 0.8);
        assert_eq!(object_tracking_reward(&p, &q, &p, &q, &cfg), 1.0);
        let r = object_tracking_reward(&(p + Vec3::new(0.0, 0.1, 0.0)), &q, &p, &q, &cfg);
        assert!((r - (-0.01f64).exp()).abs() < 1e-9);
        assert!((r - 0.99005).abs() < 1e-5);
        let q90 = q.compose(&UnitQuaternion::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), FRAC_PI_2));
        let r = object_tracking_reward(&p, &q90, &p, &q, &cfg);
        assert!((r - (-(FRAC_PI_2 * FRAC_PI_2)).exp()).abs() < 1e-9);
        assert!((r - 0.0848).abs() < 1e-4);
    }

    #[test]
    fn power_penalty_examples() {
        let cfg = RewardConfig::default();
        assert_eq!(power_penalty(&JointState::new(vec![1.0, 2.0], vec![0.0, 0.0]).unwrap(), &cfg), 0.0);
        assert_eq!(power_penalty(&JointState::new(vec![2.0], vec![3.0]).unwrap(), &cfg), -0.006);
        let a = power_penalty(&JointState::new(vec![2.0, -1.5], vec![3.0, 0.2]).unwrap(), &cfg);
        let b = power_penalty(&JointState::new(vec![-2.0, 1.5], vec![3.0, 0.2]).unwrap(), &cfg);
        assert_eq!(a, b);
        assert!(JointState::new(vec![1.0], vec![]).is_err());
    }

    #[test]
    fn total_reward_examples() {
        let cfg = RewardConfig::<f64>::default();
        assert_eq!(total_reward(1.0, 1.0, 0.0, &cfg), 2.0);
        assert_eq!(total_reward(0.0, 0.0, -0.006, &cfg), -0.006);
        let weighted = RewardConfig { w_chain: 0.5, w_obj: 2.0, ..cfg };
        // 0.5 * 0.9048 + 2.0 * 0.99005 - 0.006
        assert!((total_reward(0.9048, 0.99005, -0.006, &weighted) - 2.4265).abs() < 1e-5);
    }

    #[test]
    fn residual_action_examples() {
        let b = ResidualBounds::default();
        let a_g: [f64; 6] = [0.1, -0.2, 0.3, 0.01, 0.02, -0.03];
        assert_eq!(compose_residual_action(&a_g, &[0.0; 6], &b), a_g);
        let full = compose_residual_action(&a_g, &[1.0; 6], &b);
        let expected: [f64; 6] = [0.11, -0.19, 0.31, 0.05, 0.06, 0.01];
        for i in 0..6 {
            assert!((full[i] - expected[i]).abs() < 1e-15);
        }
        let d1 = [0.2, -0.3, 0.1, 0.4, 0.0, -0.5];
        let d2 = [0.3, 0.1, -0.6, 0.2, 0.5, 0.1];
        let sum: [f64; 6] = std::array::from_fn(|i| d1[i] + d2[i]);
        let once = compose_residual_action(&a_g, &sum, &b);
        let twice = compose_residual_action(&compose_residual_action(&a_g, &d1, &b), &d2, &b);
        for i in 0..6 {
            assert!((once[i] - twice[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn early_termination_examples() {
        let p = Vec3::new(0.1, 0.2, 0.3);
        assert!(!should_terminate_early(&p, &p, 0.3));
        assert!(should_terminate_early(&(p + Vec3::new(0.31, 0.0, 0.0)), &p, 0.3));
        let at = Vec3::new(0.0, 0.0, 0.25);
        assert!(!should_terminate_early(&at, &Vec3::zeros(), 0.25));
    }

    fn zero_inputs<'a>(
        z: &'a [f64],
        chains: &'a (DistanceChain<f64>, DistanceChain<f64>),
        contacts: &'a ContactSet,
    ) -> ObservationInputs<'a, f64> {
        ObservationInputs {
            arm_qpos: &z[..12],
            hand_qpos: &z[..36],
            arm_qvel: &z[..12],
            hand_qvel: &z[..36],
            hand_position: &z[..6],
            hand_quaternion: &z[..8],
            current_chain: &chains.0,
            reference_chain: &chains.1,
            contacts,
            actuator: &z[..24],
            step: 0,
            horizon: 100,
            ref_hand_position: &z[..6],
            ref_hand_quaternion: &z[..8],
            ref_object_position: &z[..3],
            ref_object_quaternion: &z[..4],
        }
    }

    #[test]
    fn observation_layout() {
        assert_eq!(OBSERVATION_DIM, 252);
        let z = vec![0.0; 64];
        let zero_chain = DistanceChain::new(vec![Vec3::zeros(); CHAIN_LEN]).unwrap();
        let chains = (zero_chain.clone(), zero_chain);
        let contacts = ContactSet::new(12, 2);
        let obs = build_observation(&zero_inputs(&z, &chains, &contacts)).unwrap();
        assert_eq!(obs, vec![0.0; OBSERVATION_DIM]);

        let chains = (chain(5), chain(6));
        let mut inp = zero_inputs(&z, &chains, &contacts);
        inp.step = 25;
        let obs = build_observation(&inp).unwrap();
        let off = observation_offset("distance_chain").unwrap();
        let mut oracle = chains.0.flatten();
        oracle.extend(chains.1.flatten());
        assert_eq!(&obs[off..off + 72], oracle.as_slice());
        assert_eq!(obs[observation_offset("time").unwrap()], 0.25);

        let mut bad = zero_inputs(&z, &chains, &contacts);
        bad.hand_qpos = &z[..35];
        assert_eq!(
            build_observation(&bad).unwrap_err(),
            RewardError::DimensionMismatch { field: "hand_qpos", expected: 36, got: 35 }
        );
    }

    proptest! {
        #[test]
        fn rewards_bounded(seed in 0u64..1000, n_contact in 0usize..6, dx in -1.0..1.0f64,
                           f in -10.0..10.0f64, v in -10.0..10.0f64) {
            let cfg = RewardConfig::default();
            let r = chain_reward(&chain(seed), &chain(seed + 1), n_contact, &cfg).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            let q = UnitQuaternion::from_yaw(dx);
            let o = object_tracking_reward(&Vec3::new(dx, 0.0, 0.0), &q, &Vec3::zeros(), &UnitQuaternion::identity(), &cfg);
            prop_assert!(o > 0.0 && o <= 1.0);
            prop_assert!(power_penalty(&JointState::new(vec![f], vec![v]).unwrap(), &cfg) <= 0.0);
        }

        #[test]
        fn chain_reward_monotone_in_single_deviation(seed in 0u64..500, k in 0usize..CHAIN_LEN,
                                                     a in 0.0..0.5f64, b in 0.0..0.5f64) {
            let cfg = RewardConfig::default();
            let reference = chain(seed);
            let dir = Vec3::new(0.6, -0.8, 0.0);
            let perturb = |s: f64| {
                let mut v = reference.vectors().to_vec();
                v[k] += dir.scale(s);
                DistanceChain::new(v).unwrap()
            };
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let r_lo = chain_reward(&perturb(lo), &reference, 2, &cfg).unwrap();
            let r_hi = chain_reward(&perturb(hi), &reference, 2, &cfg).unwrap();
            prop_assert!(r_hi <= r_lo);
        }

        #[test]
        fn tracking_reward_rigid_invariance(yaw in -3.0..3.0f64, tx in -1.0..1.0f64, ty in -1.0..1.0f64,
                                            px in -0.5..0.5f64, qz in -1.0..1.0f64) {
            let cfg = RewardConfig::default();
            let t = crate::geometry::RigidTransform::new(
                UnitQuaternion::from_axis_angle(Vec3::new(0.3, 0.1, 1.0), yaw), Vec3::new(tx, ty, 0.2));
            let p = Vec3::new(px, 0.1, 0.3);
            let q = UnitQuaternion::from_yaw(qz);
            let p_ref = Vec3::new(0.0, 0.2, 0.1);
            let q_ref = UnitQuaternion::identity();
            let r0 = object_tracking_reward(&p, &q, &p_ref, &q_ref, &cfg);
            let r1 = object_tracking_reward(&t.apply_point(&p), &t.rotation.compose(&q),
                                            &t.apply_point(&p_ref), &t.rotation.compose(&q_ref), &cfg);
            prop_assert!((r0 - r1).abs() < 1e-9);
        }

        #[test]
        fn residual_within_bounds(d in proptest::array::uniform6(-3.0..3.0f64)) {
            let b = ResidualBounds::default();
            let a_g = [0.5; 6];
            let out = compose_residual_action(&a_g, &d, &b);
            for i in 0..6 {
                let lim = if i < 3 { 0.01 } else { 0.04 };
                prop_assert!((out[i] - a_g[i]).abs() <= lim + 1e-15);
            }
        }
    }
}
