//! Algorithmic core of a human-to-robot sim2real pipeline.
//!
//! Numeric modules are generic over the scalar type through [`Real`]
//! (implemented for `f32` and `f64`); the aliases below fix the common
//! double-precision instantiations.

// `!(x > 0)` style checks deliberately reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dagger;
pub mod depth_aug;
pub mod geometry;
pub mod linalg;
pub mod pnp_servo;
pub mod rewards;
pub mod scalar;
pub mod simworld;
pub mod trajectory;

pub use scalar::Real;

pub type Vec3d = geometry::Vec3<f64>;
pub type UnitQuaterniond = geometry::UnitQuaternion<f64>;
pub type Posed = geometry::Pose<f64>;
pub type RigidTransformd = geometry::RigidTransform<f64>;
pub type CameraIntrinsicsd = geometry::CameraIntrinsics<f64>;
pub type PixelPointd = geometry::PixelPoint<f64>;

/// Derives an independent child seed so that separate random streams
/// (stages, trials, epochs) never share a generator state.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined input
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
