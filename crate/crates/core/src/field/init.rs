//! Sphere initialization by a short supervised pre-fit.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Field, FieldConfig, ParamGroup};
use crate::autodiff::{Real, Tape, Tensor};
use crate::optim::{Adam, AdamConfig};
use crate::space::{SceneSpace, Sphere};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SphereFit {
    pub steps: usize,
    /// Points per object per step.
    pub batch: usize,
    pub lr_table: f64,
    pub lr_decoder: f64,
    pub eikonal_weight: f64,
    /// Learning rates decay linearly to this fraction of their initial value.
    pub final_lr_fraction: f64,
}

impl Default for SphereFit {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 2048,
            lr_table: 1e-2,
            lr_decoder: 1e-2,
            eikonal_weight: 0.05,
            final_lr_fraction: 0.1,
        }
    }
}

/// A third uniform over the bounds, a third jittered around the sphere
/// surface and a third inside a ball of 1.5 radii, with the radius drawn as
/// `1.5 r U²` so the kink at the center is well sampled.
pub(crate) fn fit_points<R: Rng>(rng: &mut R, space: &SceneSpace, sphere: &Sphere, n: usize) -> Vec<[f64; 3]> {
    let b = space.bounds;
    (0..n)
        .map(|k| {
            if k % 3 == 0 {
                return std::array::from_fn(|a| rng.random_range(b.min[a]..b.max[a]));
            }
            let d: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
            let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-9);
            let rad = if k % 3 == 1 {
                let jitter: f64 = StandardNormal.sample(rng);
                sphere.radius * (1.0 + 0.2 * jitter)
            } else {
                1.5 * sphere.radius * rng.random::<f64>().powi(2)
            };
            b.clamp(std::array::from_fn(|a| sphere.center[a] + rad * d[a] / len))
        })
        .collect()
}

/// Fields whose SDFs approximate `‖p − c_i‖ − r_i` for every sphere of `space`.
pub fn init_spheres<T: Real>(space: &SceneSpace, config: FieldConfig, fit: &SphereFit, seed: u64) -> Field<T> {
    let m = space.num_objects();
    let mean_r = space.spheres.iter().map(|s| s.radius).sum::<f64>() / m as f64;
    let mut field = Field::<T>::new(FieldConfig { bounds: space.bounds, ..config }, m, mean_r, seed);
    let lrs: Vec<f64> = field
        .params
        .groups()
        .iter()
        .map(|g| match g {
            ParamGroup::Table(_) => fit.lr_table,
            ParamGroup::Decoder => fit.lr_decoder,
            ParamGroup::Kappa => 0.0,
        })
        .collect();
    let mut adam = Adam::<T>::new(AdamConfig { eps: 1e-12, ..AdamConfig::default() }, &field.params.shapes());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f17);
    for step in 0..fit.steps {
        let decay = 1.0 - (1.0 - fit.final_lr_fraction) * step as f64 / fit.steps.max(1) as f64;
        let step_lrs: Vec<f64> = lrs.iter().map(|l| l * decay).collect();
        let grads = {
            let mut tape = Tape::<T>::new();
            let bound = field.bind(&mut tape);
            let mut terms = Vec::with_capacity(2 * m);
            for (i, sphere) in space.spheres.iter().enumerate() {
                let pts = fit_points(&mut rng, space, sphere, fit.batch);
                let target = Tensor::from_vec(pts.len(), 1, pts.iter().map(|p| T::of(sphere.sdf(*p))).collect());
                let pts = Arc::new(Tensor::from_vec(pts.len(), 3, pts.iter().flatten().map(|&v| T::of(v)).collect()));
                let s = bound.object(&mut tape, i, &pts, fit.eikonal_weight > 0.0);
                let t = tape.constant(target);
                let d = tape.sub(s.sdf, t);
                let d = tape.square(d);
                terms.push(tape.mean(d));
                if let Some(g) = s.gradient {
                    let n = tape.row_norm(g);
                    let n = tape.affine(n, T::one(), -T::one());
                    let n = tape.square(n);
                    let e = tape.mean(n);
                    terms.push(tape.scale(e, T::of(fit.eikonal_weight)));
                }
            }
            let parts = tape.concat_cols(&terms);
            let total = tape.sum(parts);
            let loss = tape.scale(total, T::of(1.0 / m as f64));
            let g = tape.backward(loss).expect("scalar loss");
            bound.vars().iter().map(|&v| g.get_or_zeros(v)).collect::<Vec<_>>()
        };
        let mut params = field.params.tensors_mut();
        adam.update(&mut params, &grads, &step_lrs);
    }
    field
}
