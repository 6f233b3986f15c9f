//! Camera-frustum geometry: unprojection, per-pixel ray directions, and
//! the pseudo-color encoding of camera pose.
//!
//! A frustum point at pixel (u, v) and depth d is the homogeneous vector
//! p_c = (u*d, v*d, d, 1); it unprojects to ego/world space as
//! E * K^-1 * p_c. The ray direction at a pixel is the normalized
//! difference of the unprojections at depths 1 and 2. Pixel coordinates
//! use a corner origin; no half-pixel offset is applied.

use nalgebra::{Matrix4, Vector3, Vector4};
use thiserror::Error;

use crate::scene::CameraCalib;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("singular intrinsic matrix")]
    SingularIntrinsic,
    #[error("degenerate calibration: zero-length ray at pixel ({u}, {v})")]
    DegenerateRay { u: f64, v: f64 },
}

/// Unprojects a frustum point to ego/world space (homogeneous, w = 1).
pub fn unproject(
    u: f64,
    v: f64,
    depth: f64,
    calib: &CameraCalib,
) -> Result<Vector4<f64>, GeometryError> {
    assert!(depth > 0.0, "depth must be positive");
    let k_inv = calib
        .intrinsic
        .try_inverse()
        .ok_or(GeometryError::SingularIntrinsic)?;
    let p_c = Vector4::new(u * depth, v * depth, depth, 1.0);
    let mut p = calib.extrinsic * k_inv * p_c;
    if p.w != 1.0 && p.w != 0.0 {
        p /= p.w;
    }
    Ok(p)
}

/// Projects an ego/world point into the image; returns (u, v, depth).
///
/// Inverse of `unproject`: p_c = K * E^-1 * p, with u = p_c.x / depth,
/// v = p_c.y / depth, depth = p_c.z. Depth may be non-positive for
/// points behind the camera; callers clip.
pub fn project(point: &Vector4<f64>, calib: &CameraCalib) -> Result<(f64, f64, f64), GeometryError> {
    let e_inv = calib
        .extrinsic
        .try_inverse()
        .ok_or(GeometryError::SingularIntrinsic)?;
    let p_c = calib.intrinsic * e_inv * point;
    Ok((p_c.x, p_c.y, p_c.z))
}

/// Pixel coordinates of a camera-space point (already E^-1 applied).
pub fn project_camera_point(
    cam_point: &Vector4<f64>,
    intrinsic: &Matrix4<f64>,
) -> (f64, f64, f64) {
    let p_c = intrinsic * cam_point;
    (p_c.x, p_c.y, p_c.z)
}

pub const RAY_NEAR_DEPTH: f64 = 1.0;
pub const RAY_FAR_DEPTH: f64 = 2.0;

/// Unit direction of the camera ray through pixel (u, v).
pub fn direction_vector(
    u: f64,
    v: f64,
    calib: &CameraCalib,
) -> Result<Vector3<f64>, GeometryError> {
    direction_vector_at_depths(u, v, calib, RAY_NEAR_DEPTH, RAY_FAR_DEPTH)
}

/// Same ray from an arbitrary depth pair d2 > d1 > 0; the normalized
/// result is independent of the pair.
pub fn direction_vector_at_depths(
    u: f64,
    v: f64,
    calib: &CameraCalib,
    d1: f64,
    d2: f64,
) -> Result<Vector3<f64>, GeometryError> {
    assert!(d2 > d1 && d1 > 0.0, "require d2 > d1 > 0");
    let near = unproject(u, v, d1, calib)?;
    let far = unproject(u, v, d2, calib)?;
    let diff = Vector3::new(far.x - near.x, far.y - near.y, far.z - near.z);
    let norm = diff.norm();
    if norm < 1e-12 {
        return Err(GeometryError::DegenerateRay { u, v });
    }
    Ok(diff / norm)
}

/// Per-pixel unit ray directions for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionField {
    pub width: usize,
    pub height: usize,
    /// Row-major (y, x); each entry has unit Euclidean norm.
    pub directions: Vec<Vector3<f64>>,
}

impl DirectionField {
    pub fn from_calib(
        width: usize,
        height: usize,
        calib: &CameraCalib,
    ) -> Result<Self, GeometryError> {
        let mut directions = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                directions.push(direction_vector(x as f64, y as f64, calib)?);
            }
        }
        Ok(DirectionField {
            width,
            height,
            directions,
        })
    }

    pub fn at(&self, x: usize, y: usize) -> Vector3<f64> {
        self.directions[y * self.width + x]
    }
}

/// Maps a unit direction to RGB pseudo-color: c = (dv + 1) / 2 * 255.
pub fn pseudocolor(dv: &Vector3<f64>) -> [f64; 3] {
    [
        (dv.x + 1.0) / 2.0 * 255.0,
        (dv.y + 1.0) / 2.0 * 255.0,
        (dv.z + 1.0) / 2.0 * 255.0,
    ]
}

/// 3-channel pose image of a direction field, values within [0, 255].
pub fn pose_pseudocolor(field: &DirectionField) -> Vec<[f64; 3]> {
    field.directions.iter().map(pseudocolor).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;
    use proptest::prelude::*;

    fn diag_calib(fx: f64, fy: f64) -> CameraCalib {
        let mut k = Matrix4::identity();
        k[(0, 0)] = fx;
        k[(1, 1)] = fy;
        CameraCalib {
            intrinsic: k,
            extrinsic: Matrix4::identity(),
        }
    }

    fn rot_z(theta: f64) -> Matrix4<f64> {
        let (s, c) = theta.sin_cos();
        let mut m = Matrix4::identity();
        m[(0, 0)] = c;
        m[(0, 1)] = -s;
        m[(1, 0)] = s;
        m[(1, 1)] = c;
        m
    }

    #[test]
    fn unproject_identity_cases() {
        let calib = CameraCalib::identity();
        let p = unproject(0.0, 0.0, 1.0, &calib).unwrap();
        assert_eq!(p, Vector4::new(0.0, 0.0, 1.0, 1.0));
        let p = unproject(3.0, 4.0, 2.0, &calib).unwrap();
        assert_eq!(p, Vector4::new(6.0, 8.0, 2.0, 1.0));
    }

    #[test]
    fn unproject_diag_intrinsic() {
        let calib = diag_calib(2.0, 2.0);
        let p = unproject(1.0, 1.0, 1.0, &calib).unwrap();
        assert!((p - Vector4::new(0.5, 0.5, 1.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn project_inverts_unproject() {
        let mut k = Matrix4::identity();
        k[(0, 0)] = 500.0;
        k[(1, 1)] = 480.0;
        k[(0, 2)] = 320.0;
        k[(1, 2)] = 240.0;
        let calib = CameraCalib {
            intrinsic: k,
            extrinsic: rot_z(0.3),
        };
        let p = unproject(100.0, 200.0, 7.5, &calib).unwrap();
        let (u, v, d) = project(&p, &calib).unwrap();
        assert!((u / d - 100.0).abs() < 1e-9);
        assert!((v / d - 200.0).abs() < 1e-9);
        assert!((d - 7.5).abs() < 1e-9);
    }

    #[test]
    fn principal_ray_is_optical_axis() {
        let dv = direction_vector(0.0, 0.0, &CameraCalib::identity()).unwrap();
        assert!((dv - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn off_axis_ray() {
        let dv = direction_vector(1.0, 0.0, &CameraCalib::identity()).unwrap();
        let expected = Vector3::new(1.0, 0.0, 1.0) / 2.0f64.sqrt();
        assert!((dv - expected).norm() < 1e-12);
    }

    #[test]
    fn rotated_extrinsic_rotates_principal_ray() {
        // 90 degrees about the vertical (y) axis.
        let mut e = Matrix4::identity();
        e[(0, 0)] = 0.0;
        e[(0, 2)] = 1.0;
        e[(2, 0)] = -1.0;
        e[(2, 2)] = 0.0;
        let calib = CameraCalib {
            intrinsic: Matrix4::identity(),
            extrinsic: e,
        };
        let dv = direction_vector(0.0, 0.0, &calib).unwrap();
        assert!((dv - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-9);
        assert!((dv.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pseudocolor_reference_values() {
        let c = pseudocolor(&Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(c, [127.5, 127.5, 255.0]);
        let c = pseudocolor(&Vector3::new(-1.0, 0.0, 0.0));
        assert_eq!(c, [0.0, 127.5, 127.5]);
    }

    #[test]
    fn constant_field_constant_image() {
        let field = DirectionField {
            width: 3,
            height: 2,
            directions: vec![Vector3::new(0.0, 1.0, 0.0); 6],
        };
        let img = pose_pseudocolor(&field);
        assert!(img.iter().all(|&c| c == [127.5, 255.0, 127.5]));
    }

    proptest! {
        #[test]
        fn direction_invariant_to_depth_pair(u in -50.0..50.0f64, v in -50.0..50.0f64,
                                             fx in 0.5..3.0f64, theta in -3.0..3.0f64) {
            let calib = CameraCalib {
                intrinsic: diag_calib(fx, fx * 0.9).intrinsic,
                extrinsic: rot_z(theta),
            };
            let a = direction_vector_at_depths(u, v, &calib, 1.0, 2.0).unwrap();
            let b = direction_vector_at_depths(u, v, &calib, 0.5, 3.7).unwrap();
            prop_assert!((a - b).norm() < 1e-9);
        }

        #[test]
        fn rigid_motion_equivariance(u in -20.0..20.0f64, v in -20.0..20.0f64,
                                     theta in -3.0..3.0f64) {
            let base = CameraCalib::identity();
            let r = rot_z(theta);
            let rotated = CameraCalib {
                intrinsic: Matrix4::identity(),
                extrinsic: r * base.extrinsic,
            };
            let dv = direction_vector(u, v, &base).unwrap();
            let dv_rot = direction_vector(u, v, &rotated).unwrap();
            let dv4 = r * Vector4::new(dv.x, dv.y, dv.z, 0.0);
            prop_assert!((dv_rot - Vector3::new(dv4.x, dv4.y, dv4.z)).norm() < 1e-9);
        }

        #[test]
        fn pseudocolor_in_range_over_sphere(az in 0.0..std::f64::consts::TAU,
                                            el in -1.5..1.5f64) {
            let dv = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let c = pseudocolor(&dv);
            for ch in c {
                prop_assert!((0.0..=255.0).contains(&ch));
            }
        }
    }
}
