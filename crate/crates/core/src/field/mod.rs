//! Identity-aware object fields.
//!
//! Every object owns a hash-grid encoder; one SDF decoder and one color
//! decoder are shared by all objects. The SDF decoder sees the encoder
//! feature concatenated with the raw position, so the sphere initialization
//! can start from a well-conditioned distance function.

pub mod hashgrid;
mod init;

use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::space::{Aabb, Sphere};
use hashgrid::{CornerCache, EncodeOp, GridLayout, HashGridConfig, SpatialVjpOp};

pub use init::{init_spheres, SphereFit};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub grid: HashGridConfig,
    pub sdf_hidden: usize,
    pub sdf_layers: usize,
    pub color_hidden: usize,
    pub softplus_beta: f64,
    pub init_kappa: f64,
    pub bounds: Aabb,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            grid: HashGridConfig::default(),
            sdf_hidden: 64,
            sdf_layers: 1,
            color_hidden: 32,
            softplus_beta: 100.0,
            init_kappa: 10.0,
            bounds: Aabb::default(),
        }
    }
}

/// Optimizer grouping of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Hash table of one object.
    Table(usize),
    Decoder,
    Kappa,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams<T: Real> {
    pub tables: Vec<Tensor<T>>,
    /// Hidden SDF layers; the first maps `F + 3 → H`.
    pub sdf_w: Vec<Tensor<T>>,
    pub sdf_b: Vec<Tensor<T>>,
    /// `[1 × H]`.
    pub sdf_out_w: Tensor<T>,
    pub sdf_out_b: Tensor<T>,
    pub color_w1: Tensor<T>,
    pub color_b1: Tensor<T>,
    pub color_w2: Tensor<T>,
    pub color_b2: Tensor<T>,
    pub log_kappa: Tensor<T>,
}

impl<T: Real> FieldParams<T> {
    /// All tensors in canonical order: tables, SDF layers, SDF output, color, κ.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v: Vec<&Tensor<T>> = self.tables.iter().collect();
        for (w, b) in self.sdf_w.iter().zip(&self.sdf_b) {
            v.push(w);
            v.push(b);
        }
        v.extend([
            &self.sdf_out_w,
            &self.sdf_out_b,
            &self.color_w1,
            &self.color_b1,
            &self.color_w2,
            &self.color_b2,
            &self.log_kappa,
        ]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v: Vec<&mut Tensor<T>> = self.tables.iter_mut().collect();
        for (w, b) in self.sdf_w.iter_mut().zip(self.sdf_b.iter_mut()) {
            v.push(w);
            v.push(b);
        }
        v.extend([
            &mut self.sdf_out_w,
            &mut self.sdf_out_b,
            &mut self.color_w1,
            &mut self.color_b1,
            &mut self.color_w2,
            &mut self.color_b2,
            &mut self.log_kappa,
        ]);
        v
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut g: Vec<ParamGroup> = (0..self.tables.len()).map(ParamGroup::Table).collect();
        g.extend(std::iter::repeat_n(ParamGroup::Decoder, 2 * self.sdf_w.len() + 6));
        g.push(ParamGroup::Kappa);
        g
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors().iter().map(|t| t.shape()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> FieldParams<U> {
        FieldParams {
            tables: self.tables.iter().map(Tensor::cast).collect(),
            sdf_w: self.sdf_w.iter().map(Tensor::cast).collect(),
            sdf_b: self.sdf_b.iter().map(Tensor::cast).collect(),
            sdf_out_w: self.sdf_out_w.cast(),
            sdf_out_b: self.sdf_out_b.cast(),
            color_w1: self.color_w1.cast(),
            color_b1: self.color_b1.cast(),
            color_w2: self.color_w2.cast(),
            color_b2: self.color_b2.cast(),
            log_kappa: self.log_kappa.cast(),
        }
    }

    /// Flattened copy of every scalar in canonical order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`FieldParams::flatten`].
    pub fn assign(&mut self, flat: &[T]) {
        let mut o = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[o..o + n]);
            o += n;
        }
        assert_eq!(o, flat.len(), "assign: length mismatch");
    }
}

/// M object fields plus their shared decoders.
#[derive(Debug, Clone)]
pub struct Field<T: Real> {
    config: FieldConfig,
    layout: Arc<GridLayout>,
    pub params: FieldParams<T>,
}

fn normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("valid std");
    (0..rows * cols).map(|_| d.sample(rng)).collect()
}

fn uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect()
}

impl<T: Real> Field<T> {
    /// Random parameters with a geometric SDF initialization: the decoder
    /// starts as a sphere of radius `radius` about the origin in raw position.
    pub fn new(config: FieldConfig, objects: usize, radius: f64, seed: u64) -> Self {
        assert!(objects >= 1);
        assert!(config.sdf_layers >= 1 && config.sdf_hidden >= 1 && config.color_hidden >= 1);
        let layout = Arc::new(GridLayout::new(config.grid, config.bounds));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = layout.output_dim();
        let fpl = config.grid.features_per_level;
        let rows = layout.table_rows();
        let tables = (0..objects)
            .map(|_| Tensor::from_f64(rows, fpl, &uniform(&mut rng, rows, fpl, 1e-4)))
            .collect();
        let h = config.sdf_hidden;
        let std = (2.0f64).sqrt() / (h as f64).sqrt();
        let mut sdf_w = Vec::new();
        let mut sdf_b = Vec::new();
        for l in 0..config.sdf_layers {
            let inputs = if l == 0 { f + 3 } else { h };
            sdf_w.push(Tensor::from_f64(inputs, h, &normal(&mut rng, inputs, h, std)));
            sdf_b.push(Tensor::zeros(1, h));
        }
        let out_scale = std::f64::consts::PI.sqrt() / (h as f64).sqrt();
        let ch = config.color_hidden;
        let b1 = (6.0 / (f + ch) as f64).sqrt();
        let b2 = (6.0 / (ch + 3) as f64).sqrt();
        let params = FieldParams {
            tables,
            sdf_w,
            sdf_b,
            sdf_out_w: Tensor::filled(1, h, T::of(out_scale)),
            sdf_out_b: Tensor::scalar(T::of(-radius)),
            color_w1: Tensor::from_f64(f, ch, &uniform(&mut rng, f, ch, b1)),
            color_b1: Tensor::zeros(1, ch),
            color_w2: Tensor::from_f64(ch, 3, &uniform(&mut rng, ch, 3, b2)),
            color_b2: Tensor::zeros(1, 3),
            log_kappa: Tensor::scalar(T::of(config.init_kappa.ln())),
        };
        Self { config, layout, params }
    }

    pub fn from_params(config: FieldConfig, params: FieldParams<T>) -> Self {
        let layout = Arc::new(GridLayout::new(config.grid, config.bounds));
        assert!(params.tables.iter().all(|t| t.rows() == layout.table_rows()));
        assert_eq!(params.sdf_w.len(), config.sdf_layers);
        Self { config, layout, params }
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn layout(&self) -> &Arc<GridLayout> {
        &self.layout
    }

    pub fn num_objects(&self) -> usize {
        self.params.tables.len()
    }

    /// Feature dimension F, identical for every object.
    pub fn feature_dim(&self) -> usize {
        self.layout.output_dim()
    }

    pub fn kappa(&self) -> f64 {
        self.params.log_kappa.item().as_f64().exp()
    }

    pub fn cast<U: Real>(&self) -> Field<U> {
        Field {
            config: self.config,
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    /// Records every parameter as a trainable leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<T>) -> BoundField<'a, T> {
        let vars = self.params.tensors().into_iter().map(|t| tape.param(t.clone())).collect();
        BoundField {
            field: self,
            vars,
            corners: Mutex::new(None),
        }
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape<T>) -> BoundField<'a, T> {
        let vars = self.params.tensors().into_iter().map(|t| tape.constant(t.clone())).collect();
        BoundField {
            field: self,
            vars,
            corners: Mutex::new(None),
        }
    }
}

/// Per-sample outputs of all objects.
#[derive(Debug, Clone)]
pub struct SceneSample {
    /// `[P × M]` signed distances.
    pub sdf: Var,
    /// One `[P × 3]` color per object.
    pub colors: Vec<Var>,
    /// `[1 × 1]` NeuS steepness.
    pub kappa: Var,
    /// One `[P × 3]` spatial SDF gradient per object, when requested.
    pub gradients: Vec<Var>,
}

/// Anything the renderer can query for SDF, color and steepness on a tape.
pub trait SceneField<T: Real> {
    fn num_objects(&self) -> usize;

    fn sample(&self, tape: &mut Tape<T>, points: &Arc<Tensor<T>>, with_gradients: bool) -> SceneSample;
}

/// Fields that can be recorded on a fresh tape as constants, for rendering
/// without gradients.
pub trait FrozenField<T: Real> {
    fn frozen<'a>(&'a self, tape: &mut Tape<T>) -> Box<dyn SceneField<T> + 'a>;
}

impl<T: Real> FrozenField<T> for Field<T> {
    fn frozen<'a>(&'a self, tape: &mut Tape<T>) -> Box<dyn SceneField<T> + 'a> {
        Box::new(self.bind_frozen(tape))
    }
}

impl<T: Real> FrozenField<T> for AnalyticScene {
    fn frozen<'a>(&'a self, _tape: &mut Tape<T>) -> Box<dyn SceneField<T> + 'a> {
        Box::new(self.clone())
    }
}

/// Off-tape SDF queries for meshing and audits.
pub trait SdfQuery {
    fn num_objects(&self) -> usize;

    fn sdf_batch(&self, object: usize, points: &[[f64; 3]]) -> Vec<f64>;
}

/// One object's evaluation on a tape.
pub struct ObjectSample {
    pub sdf: Var,
    pub color: Var,
    pub gradient: Option<Var>,
}

/// A [`Field`] whose parameters live on a tape.
pub struct BoundField<'a, T: Real> {
    field: &'a Field<T>,
    vars: Vec<Var>,
    /// Corner lookups of the last point set, reused across objects.
    corners: Mutex<Option<(Arc<Tensor<T>>, Arc<CornerCache>)>>,
}

impl<T: Real> BoundField<'_, T> {
    /// Leaves in canonical parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn field(&self) -> &Field<T> {
        self.field
    }

    fn m(&self) -> usize {
        self.field.num_objects()
    }

    fn layers(&self) -> usize {
        self.field.config.sdf_layers
    }

    pub fn table(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn decoder(&self, k: usize) -> Var {
        self.vars[self.m() + k]
    }

    pub fn kappa_var(&self) -> Var {
        *self.vars.last().expect("nonempty")
    }

    fn corner_cache(&self, points: &Arc<Tensor<T>>) -> Arc<CornerCache> {
        let mut slot = self.corners.lock().expect("corner cache lock");
        match &*slot {
            Some((p, c)) if Arc::ptr_eq(p, points) => c.clone(),
            _ => {
                let c = Arc::new(CornerCache::new(&self.field.layout, points));
                *slot = Some((points.clone(), c.clone()));
                c
            }
        }
    }

    /// Encoder feature only, `[P × F]`.
    pub fn encode(&self, tape: &mut Tape<T>, i: usize, points: &Arc<Tensor<T>>) -> Var {
        let table = self.table(i);
        let cache = self.corner_cache(points);
        let value = hashgrid::encode_cached(&self.field.layout, tape.value(table), &cache);
        tape.custom(
            &[table],
            value,
            Box::new(EncodeOp {
                layout: self.field.layout.clone(),
                cache,
            }),
        )
    }

    pub fn object(&self, tape: &mut Tape<T>, i: usize, points: &Arc<Tensor<T>>, with_gradient: bool) -> ObjectSample {
        #[cfg(debug_assertions)]
        flag_out_of_bounds(&self.field.layout, points);
        let beta = T::of(self.field.config.softplus_beta);
        let fdim = self.field.feature_dim();
        let feat = self.encode(tape, i, points);
        let pos = tape.constant((**points).clone());
        let x = tape.concat_cols(&[feat, pos]);
        // σ(β·z) of each hidden layer, for the spatial gradient
        let mut slopes = Vec::with_capacity(self.layers());
        let mut h = x;
        for l in 0..self.layers() {
            let z = tape.matmul(h, self.decoder(2 * l));
            let z = tape.add_row(z, self.decoder(2 * l + 1));
            h = if with_gradient {
                let (h, s) = tape.softplus_sigmoid(z, beta);
                slopes.push(s);
                h
            } else {
                tape.softplus(z, beta)
            };
        }
        let base = 2 * self.layers();
        let (w_out, b_out) = (self.decoder(base), self.decoder(base + 1));
        let u = tape.matmul_bt(h, w_out);
        let u = tape.add_row(u, b_out);

        let c = tape.matmul(feat, self.decoder(base + 2));
        let c = tape.add_row(c, self.decoder(base + 3));
        let c = tape.relu(c);
        let c = tape.matmul(c, self.decoder(base + 4));
        let c = tape.add_row(c, self.decoder(base + 5));
        let color = tape.sigmoid(c);

        let gradient = with_gradient.then(|| {
            let mut g = tape.mul_row(slopes[self.layers() - 1], w_out);
            for l in (1..self.layers()).rev() {
                let back = tape.matmul_bt(g, self.decoder(2 * l));
                g = tape.mul(back, slopes[l - 1]);
            }
            let dx = tape.matmul_bt(g, self.decoder(0));
            let gfeat = tape.slice_cols(dx, 0, fdim);
            let graw = tape.slice_cols(dx, fdim, 3);
            let table = self.table(i);
            let cache = self.corner_cache(points);
            let hv = hashgrid::spatial_vjp_cached(&self.field.layout, tape.value(table), &cache, tape.value(gfeat));
            let hv = tape.custom(
                &[table, gfeat],
                hv,
                Box::new(SpatialVjpOp {
                    layout: self.field.layout.clone(),
                    cache,
                }),
            );
            tape.add(graw, hv)
        });
        ObjectSample { sdf: u, color, gradient }
    }

    pub fn kappa(&self, tape: &mut Tape<T>) -> Var {
        tape.exp(self.kappa_var())
    }
}

impl<T: Real> SceneField<T> for BoundField<'_, T> {
    fn num_objects(&self) -> usize {
        self.m()
    }

    fn sample(&self, tape: &mut Tape<T>, points: &Arc<Tensor<T>>, with_gradients: bool) -> SceneSample {
        let objs: Vec<ObjectSample> = (0..self.m()).map(|i| self.object(tape, i, points, with_gradients)).collect();
        let cols: Vec<Var> = objs.iter().map(|o| o.sdf).collect();
        let sdf = tape.concat_cols(&cols);
        SceneSample {
            sdf,
            colors: objs.iter().map(|o| o.color).collect(),
            kappa: self.kappa(tape),
            gradients: objs.iter().filter_map(|o| o.gradient).collect(),
        }
    }
}

const QUERY_CHUNK: usize = 1 << 15;

#[cfg(debug_assertions)]
static OUT_OF_BOUNDS: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(0);

/// Debug builds count encoder queries that fell outside the scene bounds
/// (and were clamped onto them); release builds always report zero.
pub fn out_of_bounds_queries() -> usize {
    #[cfg(debug_assertions)]
    {
        OUT_OF_BOUNDS.load(std::sync::atomic::Ordering::Relaxed)
    }
    #[cfg(not(debug_assertions))]
    {
        0
    }
}

#[cfg(debug_assertions)]
fn flag_out_of_bounds<T: Real>(layout: &GridLayout, points: &Tensor<T>) {
    let b = layout.bounds();
    let slack = 1e-6;
    let n = (0..points.rows())
        .filter(|&r| {
            let p = points.row(r);
            (0..3).any(|a| p[a].as_f64() < b.min[a] - slack || p[a].as_f64() > b.max[a] + slack)
        })
        .count();
    OUT_OF_BOUNDS.fetch_add(n, std::sync::atomic::Ordering::Relaxed);
}

impl<T: Real> Field<T> {
    /// SDF of object `i` at arbitrary points (clamped into the bounds).
    pub fn sdf_values(&self, i: usize, points: &[[f64; 3]]) -> Vec<f64> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(QUERY_CHUNK) {
            let mut tape = Tape::new();
            let bound = self.bind_frozen(&mut tape);
            let pts = self.points_tensor(chunk);
            let s = bound.object(&mut tape, i, &pts, false);
            out.extend(tape.value(s.sdf).data().iter().map(|v| v.as_f64()));
        }
        out
    }

    /// Colors of object `i`.
    pub fn color_values(&self, i: usize, points: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(QUERY_CHUNK) {
            let mut tape = Tape::new();
            let bound = self.bind_frozen(&mut tape);
            let pts = self.points_tensor(chunk);
            let s = bound.object(&mut tape, i, &pts, false);
            let c = tape.value(s.color);
            out.extend((0..c.rows()).map(|r| {
                let row = c.row(r);
                [row[0].as_f64(), row[1].as_f64(), row[2].as_f64()]
            }));
        }
        out
    }

    /// Spatial gradient `∇u` of object `i` via the explicit tape construction.
    pub fn sdf_gradients(&self, i: usize, points: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(QUERY_CHUNK) {
            let mut tape = Tape::new();
            let bound = self.bind_frozen(&mut tape);
            let pts = self.points_tensor(chunk);
            let s = bound.object(&mut tape, i, &pts, true);
            let g = tape.value(s.gradient.expect("requested"));
            out.extend((0..g.rows()).map(|r| {
                let row = g.row(r);
                [row[0].as_f64(), row[1].as_f64(), row[2].as_f64()]
            }));
        }
        out
    }

    fn points_tensor(&self, chunk: &[[f64; 3]]) -> Arc<Tensor<T>> {
        let b = self.config.bounds;
        Arc::new(Tensor::from_vec(
            chunk.len(),
            3,
            chunk.iter().flat_map(|p| b.clamp(*p)).map(T::of).collect(),
        ))
    }
}

impl<T: Real> SdfQuery for Field<T> {
    fn num_objects(&self) -> usize {
        Field::num_objects(self)
    }

    fn sdf_batch(&self, object: usize, points: &[[f64; 3]]) -> Vec<f64> {
        self.sdf_values(object, points)
    }
}

/// Closed-form spheres with constant colors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub spheres: Vec<Sphere>,
    pub colors: Vec<[f64; 3]>,
    pub kappa: f64,
}

impl AnalyticScene {
    pub fn new(spheres: Vec<Sphere>, colors: Vec<[f64; 3]>, kappa: f64) -> Self {
        assert_eq!(spheres.len(), colors.len());
        Self { spheres, colors, kappa }
    }

    /// The scene restricted to the listed objects, in the given order.
    pub fn subset(&self, objects: &[usize]) -> Self {
        Self {
            spheres: objects.iter().map(|&i| self.spheres[i]).collect(),
            colors: objects.iter().map(|&i| self.colors[i]).collect(),
            kappa: self.kappa,
        }
    }
}

impl<T: Real> SceneField<T> for AnalyticScene {
    fn num_objects(&self) -> usize {
        self.spheres.len()
    }

    fn sample(&self, tape: &mut Tape<T>, points: &Arc<Tensor<T>>, with_gradients: bool) -> SceneSample {
        let p = points.rows();
        let m = self.spheres.len();
        let mut sdf = Tensor::zeros(p, m);
        let mut grads: Vec<Tensor<T>> = (0..m).map(|_| Tensor::zeros(p, 3)).collect();
        for r in 0..p {
            let row = points.row(r);
            let q = [row[0].as_f64(), row[1].as_f64(), row[2].as_f64()];
            for (i, s) in self.spheres.iter().enumerate() {
                sdf.set(r, i, T::of(s.sdf(q)));
                let d: [f64; 3] = std::array::from_fn(|a| q[a] - s.center[a]);
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-12);
                for a in 0..3 {
                    grads[i].set(r, a, T::of(d[a] / n));
                }
            }
        }
        let sdf = tape.constant(sdf);
        let colors = self
            .colors
            .iter()
            .map(|c| {
                let t = Tensor::from_vec(p, 3, (0..p).flat_map(|_| c.iter().map(|&v| T::of(v))).collect());
                tape.constant(t)
            })
            .collect();
        let kappa = tape.constant(Tensor::scalar(T::of(self.kappa)));
        let gradients = if with_gradients {
            grads.into_iter().map(|g| tape.constant(g)).collect()
        } else {
            Vec::new()
        };
        SceneSample {
            sdf,
            colors,
            kappa,
            gradients,
        }
    }
}

impl SdfQuery for AnalyticScene {
    fn num_objects(&self) -> usize {
        self.spheres.len()
    }

    fn sdf_batch(&self, object: usize, points: &[[f64; 3]]) -> Vec<f64> {
        points.iter().map(|&p| self.spheres[object].sdf(p)).collect()
    }
}

#[cfg(test)]
mod tests;
