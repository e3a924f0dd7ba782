//! Pinhole cameras on a Y-up orbit around the origin.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub eye: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    /// Vertical field of view in degrees.
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
}

/// Orthonormal camera frame.
#[derive(Clone, Copy, Debug)]
pub struct Frame {
    pub forward: Vec3,
    pub right: Vec3,
    pub up: Vec3,
}

/// Per-pixel rays in row-major pixel order; all share the eye as origin.
#[derive(Clone, Debug)]
pub struct Rays {
    pub origin: Vec3,
    /// Unit directions, `3 * width * height`.
    pub dirs: Vec<f64>,
}

impl Rays {
    pub fn len(&self) -> usize {
        self.dirs.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn dir(&self, i: usize) -> Vec3 {
        [self.dirs[3 * i], self.dirs[3 * i + 1], self.dirs[3 * i + 2]]
    }
}

/// Point on a sphere of radius `distance`; azimuth 0 looks from +Z, 90 from +X.
pub fn orbit_eye(azimuth_deg: f64, elevation_deg: f64, distance: f64) -> Vec3 {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    [distance * el.cos() * az.sin(), distance * el.sin(), distance * el.cos() * az.cos()]
}

impl Camera {
    pub fn orbit(azimuth_deg: f64, elevation_deg: f64, distance: f64, fov_y: f64, width: usize, height: usize) -> Self {
        Self {
            eye: orbit_eye(azimuth_deg, elevation_deg, distance),
            look_at: [0.0; 3],
            up: [0.0, 1.0, 0.0],
            fov_y,
            width,
            height,
        }
    }

    pub fn with_size(&self, width: usize, height: usize) -> Self {
        Self { width, height, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Camera("image size must be positive".into()));
        }
        if !(self.fov_y > 0.0 && self.fov_y < 180.0) {
            return Err(Error::Camera(format!("field of view {} outside (0, 180)", self.fov_y)));
        }
        if self.eye.iter().chain(&self.look_at).chain(&self.up).any(|v| !v.is_finite()) {
            return Err(Error::Camera("non-finite camera vectors".into()));
        }
        if norm(sub(self.look_at, self.eye)) < 1e-9 {
            return Err(Error::Camera("eye coincides with look_at".into()));
        }
        Ok(())
    }

    pub fn frame(&self) -> Result<Frame> {
        self.validate()?;
        let forward = normalize(sub(self.look_at, self.eye));
        let r = cross(forward, self.up);
        if norm(r) < 1e-6 * norm(self.up).max(1e-300) || norm(self.up) == 0.0 {
            return Err(Error::Camera("up vector is parallel to the view direction".into()));
        }
        let right = normalize(r);
        let up = cross(right, forward);
        Ok(Frame { forward, right, up })
    }

    /// `tan(fov_y / 2)`
    pub fn tan_half(&self) -> f64 {
        (self.fov_y.to_radians() * 0.5).tan()
    }

    /// Camera-plane offsets `(x, y)` at unit depth of pixel `(row, col)`'s center.
    pub fn pixel_offset(&self, row: usize, col: usize) -> (f64, f64) {
        let t = self.tan_half();
        let aspect = self.width as f64 / self.height as f64;
        let x = ((col as f64 + 0.5) / self.width as f64 * 2.0 - 1.0) * t * aspect;
        let y = (1.0 - (row as f64 + 0.5) / self.height as f64 * 2.0) * t;
        (x, y)
    }

    pub fn make_rays(&self) -> Result<Rays> {
        let f = self.frame()?;
        let mut dirs = Vec::with_capacity(3 * self.width * self.height);
        for row in 0..self.height {
            for col in 0..self.width {
                let (x, y) = self.pixel_offset(row, col);
                let d: Vec3 = std::array::from_fn(|a| f.forward[a] + x * f.right[a] + y * f.up[a]);
                dirs.extend_from_slice(&normalize(d));
            }
        }
        Ok(Rays { origin: self.eye, dirs })
    }

    /// Projects a world point to continuous pixel coordinates `(col, row)`
    /// and its view depth along the forward axis.
    pub fn project(&self, p: Vec3) -> Result<(f64, f64, f64)> {
        let f = self.frame()?;
        let d = sub(p, self.eye);
        let z = dot(d, f.forward);
        let (x, y) = (dot(d, f.right) / z, dot(d, f.up) / z);
        let t = self.tan_half();
        let aspect = self.width as f64 / self.height as f64;
        let col = (x / (t * aspect) + 1.0) * 0.5 * self.width as f64;
        let row = (1.0 - y / t) * 0.5 * self.height as f64;
        Ok((col, row, z))
    }
}

/// Entry and exit distances of a ray through the cube `[-h, h]^3`, clipped
/// to `t >= 0`; `None` if it misses.
pub fn ray_box(origin: Vec3, dir: Vec3, h: f64) -> Option<(f64, f64)> {
    let (mut near, mut far) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a].abs() > h {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (t0, t1) = ((-h - origin[a]) * inv, (h - origin[a]) * inv);
        near = near.max(t0.min(t1));
        far = far.min(t0.max(t1));
    }
    (far > near).then_some((near, far))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_ray_looks_at_target() {
        let cam = Camera {
            eye: [0.4, 1.2, 2.5],
            look_at: [0.1, -0.2, 0.3],
            up: [0.0, 1.0, 0.0],
            fov_y: 50.0,
            width: 7,
            height: 5,
        };
        let rays = cam.make_rays().unwrap();
        let want = normalize(sub(cam.look_at, cam.eye));
        let c = rays.dir(2 * 7 + 3);
        for a in 0..3 {
            assert!((c[a] - want[a]).abs() < 1e-12);
        }
        for i in 0..rays.len() {
            assert!((norm(rays.dir(i)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn corner_angle_matches_pinhole_geometry() {
        let cam = Camera::orbit(30.0, 20.0, 3.0, 60.0, 3, 3);
        let rays = cam.make_rays().unwrap();
        let f = normalize(sub(cam.look_at, cam.eye));
        // Corner pixel center sits 2/3 of the half-width out on both axes.
        let t = (30f64).to_radians().tan() * 2.0 / 3.0;
        let want = (2.0 * t * t).sqrt().atan();
        let got = dot(rays.dir(0), f).acos();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cameras_are_rejected() {
        let mut cam = Camera::orbit(0.0, 0.0, 3.0, 45.0, 4, 4);
        cam.up = normalize(sub(cam.look_at, cam.eye));
        assert!(matches!(cam.make_rays(), Err(Error::Camera(_))));
        let mut cam = Camera::orbit(0.0, 0.0, 3.0, 45.0, 4, 4);
        cam.look_at = cam.eye;
        assert!(cam.make_rays().is_err());
        assert!(Camera::orbit(0.0, 0.0, 3.0, 180.0, 4, 4).make_rays().is_err());
    }

    #[test]
    fn orbit_conventions_and_projection() {
        let e = orbit_eye(0.0, 0.0, 3.0);
        assert!((e[2] - 3.0).abs() < 1e-12);
        let e = orbit_eye(90.0, 0.0, 3.0);
        assert!((e[0] - 3.0).abs() < 1e-12);
        let cam = Camera::orbit(40.0, 10.0, 3.0, 50.0, 9, 9);
        let (c, r, z) = cam.project([0.0; 3]).unwrap();
        assert!((c - 4.5).abs() < 1e-9 && (r - 4.5).abs() < 1e-9 && (z - 3.0).abs() < 1e-12);
        // a pixel's ray re-projects onto that pixel center
        let rays = cam.make_rays().unwrap();
        let d = rays.dir(2 * 9 + 6);
        let p: Vec3 = std::array::from_fn(|a| cam.eye[a] + 2.0 * d[a]);
        let (c, r, _) = cam.project(p).unwrap();
        assert!((c - 6.5).abs() < 1e-9 && (r - 2.5).abs() < 1e-9);
    }

    #[test]
    fn box_intersection() {
        let (n, f) = ray_box([0.0, 0.0, 3.0], [0.0, 0.0, -1.0], 1.0).unwrap();
        assert!((n - 2.0).abs() < 1e-12 && (f - 4.0).abs() < 1e-12);
        assert!(ray_box([0.0, 2.0, 3.0], [0.0, 0.0, -1.0], 1.0).is_none());
        let (n, f) = ray_box([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], 1.0).unwrap();
        assert!(n == 0.0 && (f - 1.0).abs() < 1e-12);
    }
}
