//! Volume rendering of identity-aware SDF scenes.
//!
//! One field evaluation per pass feeds every composite: object images gate
//! each object's opacity by its identity vector, edge images sum the gated
//! opacities of a pair, and scene images sum all of them.

mod camera;
pub mod ops;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use camera::{sample_camera, Camera, CameraDistribution, CameraError};
pub use ops::{neus_opacity, IdentityMode};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::field::{FrozenField, SceneField};
use crate::space::Aabb;

/// Which objects an image composites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RenderTag {
    Object { object: usize },
    Edge { a: usize, b: usize },
    Scene,
}

impl RenderTag {
    /// Edge tag with its endpoints in ascending order.
    pub fn edge(a: usize, b: usize) -> Self {
        Self::Edge { a: a.min(b), b: a.max(b) }
    }
}

/// Placement of the samples inside each equal sub-interval of `[t_n, t_f]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stratification {
    Midpoint,
    Jittered { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub samples_per_ray: usize,
    pub background: [f64; 3],
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            samples_per_ray: 64,
            background: [1.0; 3],
        }
    }
}

/// Sample positions of every ray that enters the scene bounds.
#[derive(Debug, Clone)]
pub struct RayBatch<T> {
    pub width: usize,
    pub height: usize,
    pub samples_per_ray: usize,
    /// Pixel index of each hit ray.
    pub pixels: Vec<usize>,
    /// `[t_n, t_f]` per hit ray.
    pub intervals: Vec<(f64, f64)>,
    /// Ray-major sample depths, `N` per hit ray.
    pub t: Vec<f64>,
    /// `[R·N × 3]` sample positions.
    pub points: Arc<Tensor<T>>,
}

impl<T: Real> RayBatch<T> {
    pub fn num_rays(&self) -> usize {
        self.pixels.len()
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    fn empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Consecutive batches of at most `max_rays` rays covering this one.
    pub fn split(&self, max_rays: usize) -> Vec<RayBatch<T>> {
        let n = self.samples_per_ray;
        let max_rays = max_rays.max(1);
        if self.num_rays() <= max_rays {
            return vec![self.clone()];
        }
        (0..self.num_rays())
            .step_by(max_rays)
            .map(|r0| {
                let r1 = (r0 + max_rays).min(self.num_rays());
                let rows = (r1 - r0) * n;
                RayBatch {
                    width: self.width,
                    height: self.height,
                    samples_per_ray: n,
                    pixels: self.pixels[r0..r1].to_vec(),
                    intervals: self.intervals[r0..r1].to_vec(),
                    t: self.t[r0 * n..r1 * n].to_vec(),
                    points: Arc::new(Tensor::from_vec(rows, 3, self.points.data()[3 * r0 * n..3 * r1 * n].to_vec())),
                }
            })
            .collect()
    }
}

/// Stratified samples along the pixel-center ray of every pixel; rays that
/// miss `bounds` get none and render as background.
pub fn sample_rays<T: Real>(camera: &Camera, bounds: &Aabb, samples_per_ray: usize, strategy: Stratification) -> RayBatch<T> {
    let n = samples_per_ray;
    assert!(n >= 2, "at least two samples per ray");
    let mut rng = match strategy {
        Stratification::Jittered { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Stratification::Midpoint => None,
    };
    let (mut pixels, mut intervals, mut ts, mut pts) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for y in 0..camera.height {
        for x in 0..camera.width {
            let (o, d) = camera.ray(x, y);
            let Some((t0, t1)) = bounds.intersect_ray(o, d) else { continue };
            pixels.push(y * camera.width + x);
            intervals.push((t0, t1));
            let step = (t1 - t0) / n as f64;
            for k in 0..n {
                let xi = rng.as_mut().map_or(0.5, |r| r.random::<f64>());
                let t = t0 + (k as f64 + xi) * step;
                ts.push(t);
                let p = bounds.clamp(std::array::from_fn(|a| o[a] + t * d[a]));
                pts.extend(p.map(T::of));
            }
        }
    }
    let rows = ts.len();
    RayBatch {
        width: camera.width,
        height: camera.height,
        samples_per_ray: n,
        pixels,
        intervals,
        t: ts,
        points: Arc::new(Tensor::from_vec(rows, 3, pts)),
    }
}

/// A field evaluated at a ray batch, with opacities and identity vectors.
pub struct RaySamples<T: Real> {
    pub rays: RayBatch<T>,
    pub background: [f64; 3],
    /// `[P × M]` signed distances.
    pub sdf: Option<Var>,
    /// Per-object `[P × 3]` colors.
    pub colors: Vec<Var>,
    /// Per-object `[P × 3]` SDF gradients when requested.
    pub gradients: Vec<Var>,
    /// `[P × M]` NeuS opacities.
    pub opacity: Option<Var>,
    /// `[P × M]` identity vectors.
    pub identity: Option<Var>,
    pub kappa: Option<Var>,
    num_objects: usize,
    hard_identity: bool,
}

impl<T: Real> RaySamples<T> {
    pub fn num_objects(&self) -> usize {
        self.num_objects
    }
}

/// Evaluates `field` at every sample of `rays`.
pub fn evaluate<T: Real>(
    tape: &mut Tape<T>,
    field: &dyn SceneField<T>,
    rays: RayBatch<T>,
    background: [f64; 3],
    identity: &IdentityMode<T>,
    with_gradients: bool,
) -> RaySamples<T> {
    let m = field.num_objects();
    if rays.empty() {
        return RaySamples {
            rays,
            background,
            sdf: None,
            colors: Vec::new(),
            gradients: Vec::new(),
            opacity: None,
            identity: None,
            kappa: None,
            num_objects: m,
            hard_identity: true,
        };
    }
    let s = field.sample(tape, &rays.points, with_gradients);
    let opacity = ops::neus_alpha(tape, s.sdf, s.kappa, rays.samples_per_ray);
    let lambda = ops::identity_vector(tape, s.sdf, identity);
    RaySamples {
        rays,
        background,
        sdf: Some(s.sdf),
        colors: s.colors,
        gradients: s.gradients,
        opacity: Some(opacity),
        identity: Some(lambda),
        kappa: Some(s.kappa),
        num_objects: m,
        hard_identity: matches!(identity, IdentityMode::StraightThrough),
    }
}

/// A composited image on the tape.
#[derive(Debug, Clone)]
pub struct RenderedImage {
    pub tag: RenderTag,
    pub width: usize,
    pub height: usize,
    /// `[H·W × 3]` colors, row-major from the top-left pixel.
    pub rgb: Var,
    /// `H·W` accumulated opacities.
    pub opacity: Vec<f64>,
}

impl RenderedImage {
    pub fn image<T: Real>(&self, tape: &Tape<T>) -> Image {
        Image {
            width: self.width,
            height: self.height,
            rgb: tape.value(self.rgb).to_f64_vec(),
            opacity: self.opacity.clone(),
        }
    }
}

/// Composites `samples` according to `tag`.
pub fn composite<T: Real>(tape: &mut Tape<T>, samples: &RaySamples<T>, tag: RenderTag) -> RenderedImage {
    let rays = &samples.rays;
    let (w, h) = (rays.width, rays.height);
    let m = samples.num_objects;
    match tag {
        RenderTag::Object { object } => assert!(object < m, "object {object} out of range"),
        RenderTag::Edge { a, b } => assert!(a < m && b < m && a != b, "edge ({a}, {b}) out of range"),
        RenderTag::Scene => {}
    }
    let (Some(gamma), Some(lambda)) = (samples.opacity, samples.identity) else {
        let bg = Tensor::from_vec(w * h, 3, (0..w * h).flat_map(|_| samples.background.map(T::of)).collect());
        return RenderedImage {
            tag,
            width: w,
            height: h,
            rgb: tape.constant(bg),
            opacity: vec![0.0; w * h],
        };
    };
    let gated = |tape: &mut Tape<T>, i: usize| {
        let g = tape.slice_cols(gamma, i, 1);
        let l = tape.slice_cols(lambda, i, 1);
        (tape.mul(l, g), l)
    };
    let mix = |tape: &mut Tape<T>, objects: &[usize]| {
        let mut alpha = None;
        let mut color = None;
        for &i in objects {
            let (a, l) = gated(tape, i);
            let c = tape.mul_col(samples.colors[i], l);
            alpha = Some(alpha.map_or(a, |s| tape.add(s, a)));
            color = Some(color.map_or(c, |s| tape.add(s, c)));
        }
        (alpha.expect("at least one object"), color.expect("at least one object"))
    };
    let (alpha, color) = match tag {
        RenderTag::Object { object } => (gated(tape, object).0, samples.colors[object]),
        RenderTag::Edge { a, b } => mix(tape, &[a.min(b), a.max(b)]),
        RenderTag::Scene => mix(tape, &(0..m).collect::<Vec<_>>()),
    };
    let n = rays.samples_per_ray;
    let weights = ops::ray_weights(tape, alpha, n);
    let weighted = tape.mul_col(color, weights);
    let rgb = ops::segment_sum(tape, weighted, n);
    let acc = ops::segment_sum(tape, weights, n);
    let mut opacity = vec![0.0; w * h];
    for (r, &px) in rays.pixels.iter().enumerate() {
        let a = tape.value(acc).at(r, 0).as_f64();
        debug_assert!(!samples.hard_identity || (-1e-9..=1.0 + 1e-9).contains(&a), "accumulated opacity {a}");
        opacity[px] = a.clamp(0.0, 1.0);
    }
    let rgb = ops::finalize_pixels(tape, rgb, acc, &rays.pixels, w * h, samples.background);
    RenderedImage {
        tag,
        width: w,
        height: h,
        rgb,
        opacity,
    }
}

/// Plain image values, `[H·W × 3]` row-major colors.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
    pub opacity: Vec<f64>,
}

impl Image {
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        self.rgb.iter().zip(&other.rgb).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Peak signal-to-noise ratio in dB for colors in `[0, 1]`.
    pub fn psnr(&self, reference: &Image) -> f64 {
        assert_eq!(self.rgb.len(), reference.rgb.len());
        let mse = self.rgb.iter().zip(&reference.rgb).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / self.rgb.len() as f64;
        -10.0 * mse.max(1e-20).log10()
    }

    /// Pixels whose accumulated opacity exceeds `threshold`.
    pub fn mask(&self, threshold: f64) -> Vec<bool> {
        self.opacity.iter().map(|&a| a > threshold).collect()
    }
}

/// Intersection over union of two masks; two empty masks count as identical.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len());
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Rays per tape when rendering without gradients.
pub const RENDER_CHUNK: usize = 1024;

/// Renders the listed composites ray chunk by ray chunk, without gradients.
pub fn render_images<T: Real>(
    field: &dyn FrozenField<T>,
    camera: &Camera,
    bounds: &Aabb,
    settings: &RenderSettings,
    tags: &[RenderTag],
) -> Vec<Image> {
    let rays = sample_rays::<T>(camera, bounds, settings.samples_per_ray, Stratification::Midpoint);
    render_batch(field, &rays, settings.background, tags)
}

/// [`render_images`] for precomputed rays.
pub fn render_batch<T: Real>(field: &dyn FrozenField<T>, rays: &RayBatch<T>, background: [f64; 3], tags: &[RenderTag]) -> Vec<Image> {
    let np = rays.num_pixels();
    let mut images: Vec<Image> = tags
        .iter()
        .map(|_| Image {
            width: rays.width,
            height: rays.height,
            rgb: (0..np).flat_map(|_| background).collect(),
            opacity: vec![0.0; np],
        })
        .collect();
    for chunk in rays.split(RENDER_CHUNK) {
        if chunk.empty() {
            continue;
        }
        let mut tape = Tape::new();
        let bound = field.frozen(&mut tape);
        let pixels = chunk.pixels.clone();
        let samples = evaluate(&mut tape, bound.as_ref(), chunk, background, &IdentityMode::StraightThrough, false);
        for (img, &tag) in images.iter_mut().zip(tags) {
            let part = composite(&mut tape, &samples, tag);
            let rgb = tape.value(part.rgb);
            for &px in &pixels {
                img.opacity[px] = part.opacity[px];
                for c in 0..3 {
                    img.rgb[3 * px + c] = rgb.at(px, c).as_f64();
                }
            }
        }
    }
    images
}
