//! Multi-resolution hash-grid positional encoding with trilinear interpolation.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Real, Tensor};
use crate::par;
use crate::space::Aabb;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HashGridConfig {
    pub levels: usize,
    pub features_per_level: usize,
    pub log2_table_size: u32,
    pub base_resolution: usize,
    pub max_resolution: usize,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            features_per_level: 2,
            log2_table_size: 16,
            base_resolution: 16,
            max_resolution: 256,
        }
    }
}

impl HashGridConfig {
    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_level
    }
}

const PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];

/// Static addressing of the per-level tables, shared by every object.
#[derive(Debug, Clone, PartialEq)]
pub struct GridLayout {
    config: HashGridConfig,
    bounds: Aabb,
    resolutions: Vec<usize>,
    offsets: Vec<usize>,
    sizes: Vec<usize>,
    dense: Vec<bool>,
    total: usize,
}

/// The eight cell corners around a point at one level.
pub(crate) struct Corners {
    pub index: [usize; 8],
    pub weight: [f64; 8],
    /// `∂weight/∂p`, in scene units.
    pub dweight: [[f64; 3]; 8],
}

impl GridLayout {
    pub fn new(config: HashGridConfig, bounds: Aabb) -> Self {
        assert!(config.levels >= 1 && config.features_per_level >= 1);
        assert!(config.base_resolution >= 1 && config.max_resolution >= config.base_resolution);
        let t = 1usize << config.log2_table_size;
        let growth = if config.levels > 1 {
            ((config.max_resolution as f64).ln() - (config.base_resolution as f64).ln()) / (config.levels - 1) as f64
        } else {
            0.0
        };
        let mut resolutions = Vec::new();
        let mut offsets = Vec::new();
        let mut sizes = Vec::new();
        let mut dense = Vec::new();
        let mut total = 0;
        for l in 0..config.levels {
            let n = ((config.base_resolution as f64) * (growth * l as f64).exp() + 1e-9).floor() as usize;
            let vertices = (n + 1).pow(3);
            let size = vertices.min(t);
            resolutions.push(n);
            offsets.push(total);
            sizes.push(size);
            dense.push(vertices <= t);
            total += size;
        }
        Self {
            config,
            bounds,
            resolutions,
            offsets,
            sizes,
            dense,
            total,
        }
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.config
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.resolutions
    }

    /// Rows of one object's table (all levels stacked).
    pub fn table_rows(&self) -> usize {
        self.total
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn level_range(&self, level: usize) -> std::ops::Range<usize> {
        self.offsets[level]..self.offsets[level] + self.sizes[level]
    }

    fn vertex_index(&self, level: usize, v: [usize; 3]) -> usize {
        let n1 = self.resolutions[level] + 1;
        let local = if self.dense[level] {
            v[0] + n1 * (v[1] + n1 * v[2])
        } else {
            let h = (v[0] as u64).wrapping_mul(PRIMES[0])
                ^ (v[1] as u64).wrapping_mul(PRIMES[1])
                ^ (v[2] as u64).wrapping_mul(PRIMES[2]);
            (h & (self.sizes[level] as u64 - 1)) as usize
        };
        self.offsets[level] + local
    }

    /// Whether `p` lies inside the bounds (points outside get clamped).
    pub fn in_bounds(&self, p: [f64; 3]) -> bool {
        self.bounds.contains(p)
    }

    #[cfg(test)]
    pub(crate) fn corners(&self, level: usize, p: [f64; 3]) -> Corners {
        self.corners_impl(level, p, true)
    }

    /// Cell, fractional offset and per-axis inside flags (bit `a`) of `p`.
    #[inline]
    fn locate(&self, level: usize, p: [f64; 3]) -> ([usize; 3], [f64; 3], u8) {
        let n = self.resolutions[level];
        let mut cell = [0usize; 3];
        let mut frac = [0f64; 3];
        let mut inside = 0u8;
        for a in 0..3 {
            let x = (p[a] - self.bounds.min[a]) / (self.bounds.max[a] - self.bounds.min[a]);
            if (0.0..=1.0).contains(&x) {
                inside |= 1 << a;
            }
            let s = x.clamp(0.0, 1.0) * n as f64;
            // s >= 0, so truncation is floor
            let c = (s as usize).min(n - 1);
            cell[a] = c;
            frac[a] = s - c as f64;
        }
        (cell, frac, inside)
    }

    fn corner_indices(&self, level: usize, cell: [usize; 3]) -> [usize; 8] {
        std::array::from_fn(|corner| self.vertex_index(level, [cell[0] + (corner & 1), cell[1] + ((corner >> 1) & 1), cell[2] + ((corner >> 2) & 1)]))
    }

    #[inline]
    fn weights(&self, level: usize, index: [usize; 8], frac: [f64; 3], inside: u8, derivative: bool) -> Corners {
        let n = self.resolutions[level] as f64;
        let mut out = Corners {
            index,
            weight: [0.0; 8],
            dweight: [[0.0; 3]; 8],
        };
        for corner in 0..8 {
            let bit = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let w: [f64; 3] = std::array::from_fn(|a| if bit[a] == 1 { frac[a] } else { 1.0 - frac[a] });
            out.weight[corner] = w[0] * w[1] * w[2];
            if derivative {
                let others = [w[1] * w[2], w[0] * w[2], w[0] * w[1]];
                for a in 0..3 {
                    if inside & (1 << a) != 0 {
                        let sign = if bit[a] == 1 { 1.0 } else { -1.0 };
                        out.dweight[corner][a] = sign * others[a] * (n / (self.bounds.max[a] - self.bounds.min[a]));
                    }
                }
            }
        }
        out
    }

    #[cfg(test)]
    fn corners_impl(&self, level: usize, p: [f64; 3], derivative: bool) -> Corners {
        let (cell, frac, inside) = self.locate(level, p);
        self.weights(level, self.corner_indices(level, cell), frac, inside, derivative)
    }
}

/// Corner indices and cell offsets of a point set at every level. Objects
/// share one layout, so a single cache serves every object's encoding and
/// both passes.
#[derive(Debug)]
pub struct CornerCache {
    rows: usize,
    /// `[L × P]`.
    index: Vec<[u32; 8]>,
    frac: Vec<[f64; 3]>,
    inside: Vec<u8>,
}

impl CornerCache {
    pub fn new<T: Real>(layout: &GridLayout, points: &Tensor<T>) -> Self {
        let rows = points.rows();
        let parts = par::map_indices(layout.config.levels, |level| {
            let mut index = Vec::with_capacity(rows);
            let mut frac = Vec::with_capacity(rows);
            let mut inside = Vec::with_capacity(rows);
            for r in 0..rows {
                let (cell, f, ins) = layout.locate(level, point(points, r));
                index.push(layout.corner_indices(level, cell).map(|i| i as u32));
                frac.push(f);
                inside.push(ins);
            }
            (index, frac, inside)
        });
        let mut out = Self {
            rows,
            index: Vec::with_capacity(rows * parts.len()),
            frac: Vec::with_capacity(rows * parts.len()),
            inside: Vec::with_capacity(rows * parts.len()),
        };
        for (i, f, ins) in parts {
            out.index.extend(i);
            out.frac.extend(f);
            out.inside.extend(ins);
        }
        out
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    fn get(&self, layout: &GridLayout, level: usize, r: usize, derivative: bool) -> Corners {
        let k = level * self.rows + r;
        layout.weights(level, self.index[k].map(|i| i as usize), self.frac[k], self.inside[k], derivative)
    }
}

fn point<T: Real>(points: &Tensor<T>, r: usize) -> [f64; 3] {
    let row = points.row(r);
    [row[0].as_f64(), row[1].as_f64(), row[2].as_f64()]
}

/// Forward encoding `[P × 3] → [P × L·F]`.
pub fn encode<T: Real>(layout: &GridLayout, table: &Tensor<T>, points: &Tensor<T>) -> Tensor<T> {
    encode_cached(layout, table, &CornerCache::new(layout, points))
}

pub fn encode_cached<T: Real>(layout: &GridLayout, table: &Tensor<T>, cache: &CornerCache) -> Tensor<T> {
    let f = layout.config.features_per_level;
    let dim = layout.output_dim();
    let mut out = Tensor::zeros(cache.rows(), dim);
    par::for_each_chunk_mut(out.data_mut(), par::ROW_CHUNK * dim, |ci, dst| {
        let r0 = ci * par::ROW_CHUNK;
        for (lr, orow) in dst.chunks_mut(dim).enumerate() {
            for level in 0..layout.config.levels {
                let c = cache.get(layout, level, r0 + lr, false);
                let o = &mut orow[level * f..(level + 1) * f];
                for k in 0..8 {
                    let w = T::of(c.weight[k]);
                    for (d, &v) in o.iter_mut().zip(table.row(c.index[k])) {
                        *d += w * v;
                    }
                }
            }
        }
    });
    out
}

/// `Σ_f g[p, f] · ∂feature_f/∂p`, i.e. the spatial vector-Jacobian product `[P × 3]`.
pub fn spatial_vjp<T: Real>(layout: &GridLayout, table: &Tensor<T>, points: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    spatial_vjp_cached(layout, table, &CornerCache::new(layout, points), g)
}

pub fn spatial_vjp_cached<T: Real>(layout: &GridLayout, table: &Tensor<T>, cache: &CornerCache, g: &Tensor<T>) -> Tensor<T> {
    let f = layout.config.features_per_level;
    let mut out = Tensor::zeros(cache.rows(), 3);
    par::for_each_chunk_mut(out.data_mut(), par::ROW_CHUNK * 3, |ci, dst| {
        let r0 = ci * par::ROW_CHUNK;
        for (lr, orow) in dst.chunks_mut(3).enumerate() {
            let r = r0 + lr;
            let grow = g.row(r);
            for level in 0..layout.config.levels {
                let c = cache.get(layout, level, r, true);
                let gl = &grow[level * f..(level + 1) * f];
                for k in 0..8 {
                    let dot: f64 = table.row(c.index[k]).iter().zip(gl).map(|(&v, &q)| (v * q).as_f64()).sum();
                    for a in 0..3 {
                        orow[a] += T::of(c.dweight[k][a] * dot);
                    }
                }
            }
        }
    });
    out
}

/// Scatters per-point interpolation weights into a table-shaped gradient, one
/// level at a time (levels own disjoint rows, so the reduction order is fixed).
fn scatter_levels<T: Real>(
    layout: &GridLayout,
    cache: &CornerCache,
    f: usize,
    contrib: impl Fn(usize, &Corners, usize, usize, &mut [T]) + Sync + Send,
) -> Tensor<T> {
    let parts = par::map_indices(layout.config.levels, |level| {
        let range = layout.level_range(level);
        let mut acc = vec![T::zero(); range.len() * f];
        for r in 0..cache.rows() {
            let c = cache.get(layout, level, r, false);
            for k in 0..8 {
                let row = c.index[k] - range.start;
                contrib(r, &c, k, level, &mut acc[row * f..(row + 1) * f]);
            }
        }
        acc
    });
    Tensor::from_vec(layout.table_rows(), f, parts.into_iter().flatten().collect())
}

/// Tape op for [`encode`]; differentiable in the table only.
pub(crate) struct EncodeOp {
    pub layout: Arc<GridLayout>,
    pub cache: Arc<CornerCache>,
}

impl<T: Real> CustomOp<T> for EncodeOp {
    fn name(&self) -> &'static str {
        "hash_encode"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let f = self.layout.config.features_per_level;
        let g = scatter_levels(&self.layout, &self.cache, f, |r, c, k, level, dst| {
            let w = T::of(c.weight[k]);
            for (d, &q) in dst.iter_mut().zip(&grad.row(r)[level * f..(level + 1) * f]) {
                *d += w * q;
            }
        });
        vec![Some(g)]
    }
}

/// Tape op for [`spatial_vjp`] with inputs `[table, g]`; bilinear, so both
/// adjoints are first-order.
pub(crate) struct SpatialVjpOp {
    pub layout: Arc<GridLayout>,
    pub cache: Arc<CornerCache>,
}

impl<T: Real> CustomOp<T> for SpatialVjpOp {
    fn name(&self) -> &'static str {
        "hash_spatial_vjp"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (table, g) = (inputs[0], inputs[1]);
        let layout = &*self.layout;
        let f = layout.config.features_per_level;
        let rows = g.rows();
        // One sweep per level produces that level's table rows and feature columns.
        let parts = par::map_indices(layout.config.levels, |level| {
            let range = layout.level_range(level);
            let mut dtable = if needs[0] { vec![T::zero(); range.len() * f] } else { Vec::new() };
            let mut dg = if needs[1] { vec![T::zero(); rows * f] } else { Vec::new() };
            for r in 0..rows {
                let c = self.cache.get(layout, level, r, true);
                let go = grad.row(r);
                let gl = &g.row(r)[level * f..(level + 1) * f];
                for k in 0..8 {
                    let s = T::of((0..3).map(|a| c.dweight[k][a] * go[a].as_f64()).sum::<f64>());
                    if needs[0] {
                        let row = c.index[k] - range.start;
                        for (d, &q) in dtable[row * f..(row + 1) * f].iter_mut().zip(gl) {
                            *d += s * q;
                        }
                    }
                    if needs[1] {
                        for (d, &v) in dg[r * f..(r + 1) * f].iter_mut().zip(table.row(c.index[k])) {
                            *d += s * v;
                        }
                    }
                }
            }
            (dtable, dg)
        });
        let dtable = needs[0].then(|| {
            Tensor::from_vec(layout.table_rows(), f, parts.iter().flat_map(|(t, _)| t.iter().copied()).collect())
        });
        let dg = needs[1].then(|| {
            let dim = layout.output_dim();
            let mut out = Tensor::zeros(rows, dim);
            for (level, (_, part)) in parts.iter().enumerate() {
                for r in 0..rows {
                    out.row_mut(r)[level * f..(level + 1) * f].copy_from_slice(&part[r * f..(r + 1) * f]);
                }
            }
            out
        });
        vec![dtable, dg]
    }
}
