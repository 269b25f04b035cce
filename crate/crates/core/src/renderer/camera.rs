//! Pinhole camera poses: look-at construction, hemisphere sampling shared by
//! scene generation and key selection, and ray generation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Camera-to-world pose plus intrinsics. Rotation is row-major; columns are
/// the camera axes in world space (x right, y image-up, z backward — the
/// camera looks along −z).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CameraPose {
    #[serde(rename = "R")]
    pub r: [f32; 9],
    pub t: [f32; 3],
    pub focal: f32,
    pub cx: f32,
    pub cy: f32,
    #[serde(rename = "H")]
    pub h: u32,
    #[serde(rename = "W")]
    pub w: u32,
}

impl CameraPose {
    /// Orthonormality within 1e-5 and det = +1.
    pub fn validate(&self) -> Result<()> {
        let r = &self.r;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0f32;
                for k in 0..3 {
                    dot += r[k * 3 + i] * r[k * 3 + j];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-5 {
                    return Err(Error::invalid(format!(
                        "pose rotation not orthonormal: col{i}.col{j} = {dot}"
                    )));
                }
            }
        }
        let det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6])
            + r[2] * (r[3] * r[7] - r[4] * r[6]);
        if (det - 1.0).abs() > 1e-4 {
            return Err(Error::invalid(format!("pose rotation det {det} != +1")));
        }
        if !(self.focal > 0.0) || self.h == 0 || self.w == 0 {
            return Err(Error::invalid("pose intrinsics must be positive"));
        }
        Ok(())
    }

    /// World-space ray through the center of pixel (px, py).
    /// Returns (origin, unit direction).
    pub fn ray(&self, px: u32, py: u32) -> ([f64; 3], [f64; 3]) {
        assert!(px < self.w && py < self.h, "pixel out of bounds");
        let x = (px as f64 + 0.5 - self.cx as f64) / self.focal as f64;
        let y = -(py as f64 + 0.5 - self.cy as f64) / self.focal as f64;
        let z = -1.0f64;
        let n = (x * x + y * y + z * z).sqrt();
        let dc = [x / n, y / n, z / n];
        let r = &self.r;
        let dw = [
            r[0] as f64 * dc[0] + r[1] as f64 * dc[1] + r[2] as f64 * dc[2],
            r[3] as f64 * dc[0] + r[4] as f64 * dc[1] + r[5] as f64 * dc[2],
            r[6] as f64 * dc[0] + r[7] as f64 * dc[1] + r[8] as f64 * dc[2],
        ];
        let o = [self.t[0] as f64, self.t[1] as f64, self.t[2] as f64];
        (o, dw)
    }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Look-at pose: camera at `eye` pointing toward `target`, world up = +z.
pub fn look_at(eye: [f64; 3], target: [f64; 3], h: u32, w: u32, focal: f32) -> CameraPose {
    let zc = normalize([eye[0] - target[0], eye[1] - target[1], eye[2] - target[2]]);
    let up = [0.0, 0.0, 1.0];
    let xc = normalize(cross(up, zc));
    let yc = cross(zc, xc);
    CameraPose {
        r: [
            xc[0] as f32, yc[0] as f32, zc[0] as f32, //
            xc[1] as f32, yc[1] as f32, zc[1] as f32, //
            xc[2] as f32, yc[2] as f32, zc[2] as f32,
        ],
        t: [eye[0] as f32, eye[1] as f32, eye[2] as f32],
        focal,
        cx: w as f32 / 2.0,
        cy: h as f32 / 2.0,
        h,
        w,
    }
}

pub const SCENE_CENTER: [f64; 3] = [0.5, 0.5, 0.5];
pub const CAMERA_RADIUS: f64 = 2.2;
pub const IMAGE_SIZE: u32 = 128;

/// Default focal length: 45 degree horizontal field of view.
pub fn default_focal(w: u32) -> f32 {
    (w as f64 / 2.0 / (22.5f64.to_radians()).tan()) as f32
}

/// Draw a pose from the training-pose distribution: camera on the upper
/// hemisphere (elevation 10..80 degrees), looking at the scene center.
pub fn sample_hemisphere_pose(rng: &mut ChaCha8Rng, h: u32, w: u32) -> CameraPose {
    let azimuth: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let elevation: f64 = rng.gen_range(10f64.to_radians()..80f64.to_radians());
    let eye = [
        SCENE_CENTER[0] + CAMERA_RADIUS * elevation.cos() * azimuth.cos(),
        SCENE_CENTER[1] + CAMERA_RADIUS * elevation.cos() * azimuth.sin(),
        SCENE_CENTER[2] + CAMERA_RADIUS * elevation.sin(),
    ];
    look_at(eye, SCENE_CENTER, h, w, default_focal(w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{rng, Domain};

    fn identity_pose() -> CameraPose {
        CameraPose {
            r: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            t: [0.0, 0.0, 0.0],
            focal: 100.0,
            cx: 64.0,
            cy: 64.0,
            h: 128,
            w: 128,
        }
    }

    #[test]
    fn principal_point_ray_is_the_optical_axis() {
        // cx = 64 means pixel 63's center +0.5 hits it exactly: px + 0.5 = 63.5
        // is off by half a pixel, so use a pose with cx at a pixel center.
        let mut pose = identity_pose();
        pose.cx = 63.5;
        pose.cy = 63.5;
        let (_, d) = pose.ray(63, 63);
        assert!((d[0]).abs() < 1e-12 && (d[1]).abs() < 1e-12);
        assert!((d[2] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn adjacent_pixels_are_one_over_focal_apart() {
        let pose = identity_pose();
        let (_, d1) = pose.ray(60, 64);
        let (_, d2) = pose.ray(61, 64);
        let dot = d1[0] * d2[0] + d1[1] * d2[1] + d1[2] * d2[2];
        let angle = dot.clamp(-1.0, 1.0).acos();
        assert!(
            (angle - 1.0 / 100.0).abs() < 1e-4,
            "angle {angle} vs 0.01 rad"
        );
    }

    #[test]
    fn all_rays_share_the_camera_center() {
        let pose = identity_pose();
        let (o1, _) = pose.ray(0, 0);
        let (o2, _) = pose.ray(127, 127);
        assert_eq!(o1, o2);
    }

    #[test]
    fn hemisphere_poses_validate_and_look_at_center() {
        let mut r = rng(3, Domain::KeyPose);
        for _ in 0..50 {
            let pose = sample_hemisphere_pose(&mut r, 128, 128);
            pose.validate().unwrap();
            // The center pixel ray should pass near the scene center.
            let (o, d) = pose.ray(63, 63);
            // distance from SCENE_CENTER to the ray
            let oc = [
                SCENE_CENTER[0] - o[0],
                SCENE_CENTER[1] - o[1],
                SCENE_CENTER[2] - o[2],
            ];
            let along = oc[0] * d[0] + oc[1] * d[1] + oc[2] * d[2];
            let closest = [
                o[0] + along * d[0] - SCENE_CENTER[0],
                o[1] + along * d[1] - SCENE_CENTER[1],
                o[2] + along * d[2] - SCENE_CENTER[2],
            ];
            let dist =
                (closest[0] * closest[0] + closest[1] * closest[1] + closest[2] * closest[2])
                    .sqrt();
            assert!(dist < 0.02, "center ray misses scene center by {dist}");
            assert!(along > 0.0, "scene center behind camera");
        }
    }

    #[test]
    fn non_orthonormal_rotation_is_rejected() {
        let mut pose = identity_pose();
        pose.r[0] = 1.1;
        assert!(pose.validate().is_err());
    }
}
