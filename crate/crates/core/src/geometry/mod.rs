//! Mesh ingestion and normalization, surface sampling, cameras and
//! projection. Downstream modules assume normalized meshes (bounding box
//! centered at the origin, unit diagonal).

pub mod bvh;
pub mod camera;
pub mod io;
pub mod mesh;
pub mod primitives;
pub mod sampling;

pub use bvh::TriangleBvh;
pub use camera::{orbit_camera, Camera, ProjectionKind, Projected, ViewSampler};
pub use io::{load_mesh, save_obj};
pub use mesh::{normalize_mesh, Aabb, Mesh, Normalization, Texture};
pub use sampling::{farthest_point_sample, sample_surface, SurfaceSampler};
