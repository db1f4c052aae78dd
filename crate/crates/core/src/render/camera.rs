//! Pinhole cameras and the orbit distribution used during training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::space::Aabb;

type V3 = [f64; 3];

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: V3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn unit(a: V3) -> V3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: V3,
    pub target: V3,
    pub up: V3,
    pub fov_y_deg: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CameraError {
    #[error("camera resolution must be at least 1x1")]
    EmptyImage,
    #[error("field of view {0} is outside (0, 120) degrees")]
    FieldOfView(f64),
    #[error("camera lies inside the sphere inscribed in the scene bounds")]
    InsideScene,
    #[error("camera view direction is degenerate")]
    Degenerate,
}

impl Camera {
    /// Camera on a sphere of `radius` around the origin looking at it, y up.
    pub fn orbit(azimuth_deg: f64, elevation_deg: f64, radius: f64, fov_y_deg: f64, width: usize, height: usize) -> Self {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        Self {
            position: [radius * el.cos() * az.sin(), radius * el.sin(), radius * el.cos() * az.cos()],
            target: [0.0; 3],
            up: [0.0, 1.0, 0.0],
            fov_y_deg,
            width,
            height,
        }
    }

    pub fn validate(&self, bounds: &Aabb) -> Result<(), CameraError> {
        if self.width == 0 || self.height == 0 {
            return Err(CameraError::EmptyImage);
        }
        if !(self.fov_y_deg > 0.0 && self.fov_y_deg < 120.0) {
            return Err(CameraError::FieldOfView(self.fov_y_deg));
        }
        let inscribed = bounds.extent().iter().cloned().fold(f64::INFINITY, f64::min) / 2.0;
        if norm(sub(self.position, bounds.center())) <= inscribed {
            return Err(CameraError::InsideScene);
        }
        let f = sub(self.target, self.position);
        if norm(f) < 1e-12 || norm(cross(f, self.up)) < 1e-12 {
            return Err(CameraError::Degenerate);
        }
        Ok(())
    }

    pub fn with_resolution(mut self, width: usize, height: usize) -> Self {
        self.width = width;
        self.height = height;
        self
    }

    /// Orthonormal `(right, up, forward)`.
    fn basis(&self) -> (V3, V3, V3) {
        let f = unit(sub(self.target, self.position));
        let r = unit(cross(f, self.up));
        let u = cross(r, f);
        (r, u, f)
    }

    /// Origin and unit direction of the ray through the center of pixel
    /// `(x, y)`; row 0 is the top of the image.
    pub fn ray(&self, x: usize, y: usize) -> (V3, V3) {
        let (r, u, f) = self.basis();
        let t = (self.fov_y_deg.to_radians() / 2.0).tan();
        let aspect = self.width as f64 / self.height as f64;
        let sx = (2.0 * (x as f64 + 0.5) / self.width as f64 - 1.0) * t * aspect;
        let sy = (1.0 - 2.0 * (y as f64 + 0.5) / self.height as f64) * t;
        let d = unit([
            f[0] + sx * r[0] + sy * u[0],
            f[1] + sx * r[1] + sy * u[1],
            f[2] + sx * r[2] + sy * u[2],
        ]);
        (self.position, d)
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }
}

/// Random orbit cameras looking at the scene center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraDistribution {
    /// Degrees, half-open `[min, max)`.
    pub azimuth: (f64, f64),
    /// Degrees, closed `[min, max]`.
    pub elevation: (f64, f64),
    pub radius: f64,
    pub fov_y_deg: f64,
}

impl Default for CameraDistribution {
    fn default() -> Self {
        Self {
            azimuth: (0.0, 360.0),
            elevation: (-10.0, 45.0),
            radius: 2.5,
            fov_y_deg: 40.0,
        }
    }
}

impl CameraDistribution {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, width: usize, height: usize) -> Camera {
        let az = self.azimuth.0 + rng.random::<f64>() * (self.azimuth.1 - self.azimuth.0);
        let el = self.elevation.0 + rng.random::<f64>() * (self.elevation.1 - self.elevation.0);
        Camera::orbit(az, el, self.radius, self.fov_y_deg, width, height)
    }
}

/// Draws a training camera.
pub fn sample_camera<R: Rng + ?Sized>(rng: &mut R, dist: &CameraDistribution, width: usize, height: usize) -> Camera {
    dist.sample(rng, width, height)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn center_ray_points_at_target() {
        let c = Camera::orbit(30.0, 20.0, 2.5, 40.0, 3, 3);
        let (o, d) = c.ray(1, 1);
        let to = unit(sub(c.target, o));
        assert!((0..3).all(|a| (d[a] - to[a]).abs() < 1e-12));
        assert!((norm(o) - 2.5).abs() < 1e-12);
        c.validate(&Aabb::default()).unwrap();
    }

    #[test]
    fn image_orientation() {
        let c = Camera::orbit(0.0, 0.0, 2.5, 40.0, 4, 4);
        // camera on +z looking down -z: top row points up, left column points to -x
        assert!(c.ray(2, 0).1[1] > 0.0);
        assert!(c.ray(0, 2).1[0] < 0.0);
    }

    #[test]
    fn invalid_cameras() {
        let b = Aabb::default();
        assert_eq!(Camera::orbit(0.0, 0.0, 2.5, 40.0, 0, 4).validate(&b), Err(CameraError::EmptyImage));
        assert_eq!(Camera::orbit(0.0, 0.0, 2.5, 130.0, 4, 4).validate(&b), Err(CameraError::FieldOfView(130.0)));
        assert_eq!(Camera::orbit(0.0, 0.0, 0.5, 40.0, 4, 4).validate(&b), Err(CameraError::InsideScene));
        assert_eq!(Camera::orbit(0.0, 90.0, 2.5, 40.0, 4, 4).validate(&b), Err(CameraError::Degenerate));
    }

    #[test]
    fn distribution_ranges_and_reproducibility() {
        let d = CameraDistribution::default();
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let ca = d.sample(&mut a, 8, 8);
            assert_eq!(ca, d.sample(&mut b, 8, 8));
            let el = (ca.position[1] / 2.5).asin().to_degrees();
            assert!((-10.0 - 1e-9..=45.0 + 1e-9).contains(&el));
        }
    }
}
