//! Point clouds, rigid transforms, sampling, and camera geometry.

mod camera;
mod cloud;
mod ppf;
mod rigid;
pub mod sampling;

pub use camera::{backproject, CameraIntrinsics, DepthImage, Mask};
pub use cloud::{apply_transform, barycenter, estimate_normals, NormalField, PointCloud};
pub use ppf::{angle_between, ppf};
pub use rigid::{
    compose, invert, normalize_quat, quat_to_rot, rot_entries, rot_jacobian, so3_residuals, RigidTransform,
    UnitQuaternion, QUAT_EPS,
};
pub use sampling::{fps, knn};

pub type Vec3 = nalgebra::Vector3<f64>;
