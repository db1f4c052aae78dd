//! The shared scene volume and the initial sphere layout of its objects.

use serde::{Deserialize, Serialize};

use crate::graph::SceneGraph;

/// Axis-aligned box in scene units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for Aabb {
    fn default() -> Self {
        Self {
            min: [-1.0; 3],
            max: [1.0; 3],
        }
    }
}

impl Aabb {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn clamp(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| p[a].clamp(self.min[a], self.max[a]))
    }

    pub fn extent(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.max[a] - self.min[a])
    }

    pub fn volume(&self) -> f64 {
        self.extent().iter().product()
    }

    pub fn center(&self) -> [f64; 3] {
        std::array::from_fn(|a| 0.5 * (self.min[a] + self.max[a]))
    }

    /// Whether the closed ball lies inside the box.
    pub fn contains_sphere(&self, s: &Sphere) -> bool {
        (0..3).all(|a| s.center[a] - s.radius >= self.min[a] && s.center[a] + s.radius <= self.max[a])
    }

    /// Parametric entry and exit of the ray `o + t d` (slab method), or `None`
    /// when it misses or the box lies behind the origin.
    pub fn intersect_ray(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if d[a].abs() < 1e-300 {
                if o[a] < self.min[a] || o[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[a];
            let (mut ta, mut tb) = ((self.min[a] - o[a]) * inv, (self.max[a] - o[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t1 > t0).then_some((t0, t1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
}

impl Sphere {
    pub fn new(center: [f64; 3], radius: f64) -> Self {
        Self { center, radius }
    }

    pub fn sdf(&self, p: [f64; 3]) -> f64 {
        dist(p, self.center) - self.radius
    }

    pub fn overlaps(&self, other: &Sphere) -> bool {
        dist(self.center, other.center) < self.radius + other.radius
    }

    pub fn volume(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.radius.powi(3)
    }
}

pub(crate) fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Volume shared by two balls.
pub fn lens_volume(a: &Sphere, b: &Sphere) -> f64 {
    let d = dist(a.center, b.center);
    let (r1, r2) = (a.radius, b.radius);
    if d >= r1 + r2 {
        return 0.0;
    }
    if d <= (r1 - r2).abs() {
        return a.volume().min(b.volume());
    }
    std::f64::consts::PI * (r1 + r2 - d).powi(2) * (d * d + 2.0 * d * (r1 + r2) - 3.0 * (r1 - r2).powi(2))
        / (12.0 * d)
}

/// Scene bounds plus one initial sphere per object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpace {
    pub bounds: Aabb,
    pub spheres: Vec<Sphere>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LayoutError {
    #[error("initial sphere of object {0} does not fit inside the scene bounds")]
    OutOfBounds(usize),
    #[error("no disjoint default layout exists for {0} objects")]
    Infeasible(usize),
}

const DEFAULT_SINGLE_RADIUS: f64 = 0.5;
const RING_RADIUS: f64 = 0.4;
const RING_SPHERE_RADIUS: f64 = 0.3;
const MIN_RADIUS: f64 = 1e-2;

impl SceneSpace {
    pub fn new(bounds: Aabb, spheres: Vec<Sphere>) -> Result<Self, LayoutError> {
        if let Some(i) = spheres.iter().position(|s| !bounds.contains_sphere(s)) {
            return Err(LayoutError::OutOfBounds(i));
        }
        Ok(Self { bounds, spheres })
    }

    /// Default layout, honoring per-node `init_center` / `init_radius`.
    ///
    /// One object sits at the box center with radius 0.5. Several objects sit
    /// evenly on a horizontal circle of radius 0.4 with radius 0.3; default
    /// radii shrink by 10% until no default sphere overlaps another sphere.
    /// Explicit overrides are kept verbatim, overlaps among them included.
    pub fn layout(graph: &SceneGraph, bounds: Aabb) -> Result<Self, LayoutError> {
        let m = graph.num_objects();
        let c = bounds.center();
        let mut spheres: Vec<Sphere> = (0..m)
            .map(|i| {
                let (center, radius) = if m == 1 {
                    (c, DEFAULT_SINGLE_RADIUS)
                } else {
                    let a = std::f64::consts::TAU * i as f64 / m as f64;
                    ([c[0] + RING_RADIUS * a.cos(), c[1], c[2] + RING_RADIUS * a.sin()], RING_SPHERE_RADIUS)
                };
                Sphere::new(center, radius)
            })
            .collect();
        let mut fixed = vec![false; m];
        for (i, node) in graph.nodes().iter().enumerate() {
            if let Some(ctr) = node.init_center {
                spheres[i].center = ctr;
            }
            if let Some(r) = node.init_radius {
                spheres[i].radius = r;
                fixed[i] = true;
            }
        }
        loop {
            let clash = (0..m).any(|i| {
                (i + 1..m).any(|j| (!fixed[i] || !fixed[j]) && spheres[i].overlaps(&spheres[j]))
            });
            if !clash {
                break;
            }
            for (s, f) in spheres.iter_mut().zip(&fixed) {
                if !f {
                    s.radius *= 0.9;
                }
            }
            if spheres.iter().zip(&fixed).any(|(s, f)| !f && s.radius < MIN_RADIUS) {
                return Err(LayoutError::Infeasible(m));
            }
        }
        Self::new(bounds, spheres)
    }

    pub fn num_objects(&self) -> usize {
        self.spheres.len()
    }
}
