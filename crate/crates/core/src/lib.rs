//! Shape-completion grasp planning from a single depth view.

pub mod cem;
pub mod error;
pub mod geometry;
pub mod grasp;
pub mod harness;
pub mod scenesim;
pub mod seeds;
pub mod shapepred;
pub mod tensor;

pub use error::{Error, Result};
pub use geometry::{BBox2D, CameraIntrinsics, Frame, PointCloud, Projection2D, RigidTransform, Vec3};
pub use tensor::{ParamSet, Tape, Tensor, Var};
