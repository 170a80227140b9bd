//! Scenes as sets of semantic 3D Gaussians, with two latent world models.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: Gaussians, rigid poses, cameras and the covariance math.
//! - [`splat`]: depth/semantic splatting and its analytic backward pass.
//! - [`recon`]: the masked reconstruction objective.
//! - [`bev`]: bird's-eye-view latent rasterization with height stacking.
//! - [`flow`]: the Gaussian-flow world model.
//! - [`plan`]: the ego-planning world model (attention, MLN, BEV fusion).
//! - [`occupancy`]: Gaussian-to-occupancy splatting and forecasting.
//! - [`metrics`]: IoU / mIoU, L2 and collision metrics.
//! - [`synth`]: procedural scenes and ray-cast oracles.
//! - [`optim`]: Adam and the stage-one fitting loop.
//!
//! [`autodiff`] is a small reverse-mode tape used by the learned heads, and
//! [`gradcheck`] holds the finite-difference machinery used to verify every
//! hand-written backward pass.

pub mod autodiff;
pub mod bev;
mod binio;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod occupancy;
pub mod optim;
pub mod plan;
pub mod recon;
pub mod splat;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{Camera, Gaussian, GaussianSet, Pose, Quaternion};
pub use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
pub use bev::{BevGrid, BevSpec};
pub use flow::{FlowField, FlowHead};
pub use metrics::Trajectory;
pub use occupancy::{OccSpec, OccupancyGrid};
pub use plan::{Planner, PlannerConfig, QuerySet};
pub use recon::{LossWeights, ReconTargets};
pub use splat::{DepthImage, SemanticImage};
pub use synth::SceneSpec;
