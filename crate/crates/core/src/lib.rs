//! Differentiable 3D Gaussian splatting geometry and a self-supervised scene
//! optimizer that recovers per-view depth and relative camera poses from an
//! unposed image triplet `(c1, t, c2)`.
//!
//! Conventions used throughout the crate:
//!
//! * Pixel `(x, y)` samples the continuous image coordinate `(x + 0.5, y + 0.5)`.
//! * A [`RigidTransform`] used as a camera pose is camera-to-world. A world
//!   point `p` has camera coordinates `Rᵀ (p - t)`.
//! * The target view `t` defines the world frame; context poses are the
//!   transforms `T_{c→t}`.
//! * Rotation tangents are left perturbations: `R ← exp([ω]ₓ) R`.

pub mod error;
pub mod eval;
pub mod gaussian;
pub mod geometry;
pub mod optimize;
pub mod photometric;
pub mod plane;
pub mod rasterizer;
pub mod scene_io;
pub mod threads;

pub use error::{Error, Result};
pub use gaussian::{Gaussian, GaussianSet, RawAttributeField, RawAttributes, ShCoeffs};
pub use geometry::{CameraIntrinsics, RigidTransform, Twist};
pub use plane::{DepthMap, ImagePlane, Mask};
pub use rasterizer::{RenderGradients, RenderOptions, RenderOutput};
