//! Mesh extraction, decomposition audits and file output.

mod tables;

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::field::{FrozenField, SdfQuery};
use crate::losses::penetration_count;
use crate::render::{mask_iou, render_images, Camera, Image, RenderSettings, RenderTag};
use crate::space::Aabb;

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("grid resolution {0} is below the minimum of 16")]
    Resolution(usize),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExportError + '_ {
    move |source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Triangle mesh of one object's zero level set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub object: usize,
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i as usize]);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    /// Edges used by exactly one triangle; zero for a closed surface.
    pub fn boundary_edges(&self) -> usize {
        let mut count: HashMap<(u32, u32), u32> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        count.values().filter(|&&c| c == 1).count()
    }

    pub fn is_watertight(&self) -> bool {
        !self.is_empty() && self.boundary_edges() == 0
    }

    /// Indices in range and every triangle with area above `1e-12`.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.vertices.len() as u32;
        for (k, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&i| i >= n) {
                return Err(format!("triangle {k} indexes past {n} vertices"));
            }
            if self.triangle_area(k) <= 1e-12 {
                return Err(format!("triangle {k} is degenerate"));
            }
        }
        Ok(())
    }

    /// Enclosed volume by the divergence theorem (outward orientation gives a
    /// positive value).
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i as usize]);
                let x = cross(b, c);
                (a[0] * x[0] + a[1] * x[1] + a[2] * x[2]) / 6.0
            })
            .sum()
    }
}

/// Triangulates `u_object = 0` on an `n³` lattice spanning `bounds`, with
/// linear interpolation along cell edges. Vertices on shared edges are
/// shared; triangles face outward (towards `u > 0`).
pub fn marching_cubes(field: &dyn SdfQuery, object: usize, bounds: &Aabb, n: usize) -> Result<Mesh, ExportError> {
    if n < 16 {
        return Err(ExportError::Resolution(n));
    }
    let step: [f64; 3] = std::array::from_fn(|a| (bounds.max[a] - bounds.min[a]) / (n - 1) as f64);
    let at = |x: usize, y: usize, z: usize| [bounds.min[0] + x as f64 * step[0], bounds.min[1] + y as f64 * step[1], bounds.min[2] + z as f64 * step[2]];
    let slab = |z: usize| {
        let pts: Vec<[f64; 3]> = (0..n * n).map(|k| at(k % n, k / n, z)).collect();
        field.sdf_batch(object, &pts)
    };
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut index: HashMap<u64, u32> = HashMap::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    let mut lower = slab(0);
    for z in 0..n - 1 {
        let upper = slab(z + 1);
        let value = |x: usize, y: usize, dz: usize| if dz == 0 { lower[y * n + x] } else { upper[y * n + x] };
        for y in 0..n - 1 {
            for x in 0..n - 1 {
                let corner = tables::CORNERS.map(|c| value(x + c[0], y + c[1], c[2]));
                let case = (0..8).filter(|&k| corner[k] < 0.0).fold(0usize, |acc, k| acc | (1 << k));
                if case == 0 || case == 255 {
                    continue;
                }
                let mut vertex = |e: usize| -> u32 {
                    let [c0, c1] = tables::EDGES[e];
                    let (o0, o1) = (tables::CORNERS[c0], tables::CORNERS[c1]);
                    let p0 = [x + o0[0], y + o0[1], z + o0[2]];
                    let p1 = [x + o1[0], y + o1[1], z + o1[2]];
                    let axis = (0..3).find(|&a| p0[a] != p1[a]).expect("edge spans one axis");
                    let (lo, (v0, v1)) = if p0[axis] < p1[axis] { (p0, (corner[c0], corner[c1])) } else { (p1, (corner[c1], corner[c0])) };
                    let key = ((((lo[2] * n + lo[1]) * n + lo[0]) * 3) + axis) as u64;
                    *index.entry(key).or_insert_with(|| {
                        let t = (v0 / (v0 - v1)).clamp(0.0, 1.0);
                        let mut p = at(lo[0], lo[1], lo[2]);
                        p[axis] += t * step[axis];
                        vertices.push(p);
                        (vertices.len() - 1) as u32
                    })
                };
                for t in tables::TRIANGLES[case].chunks(3).take_while(|t| t[0] >= 0) {
                    let tri = [vertex(t[0] as usize), vertex(t[1] as usize), vertex(t[2] as usize)];
                    // table winding faces the inside; flip to face outward
                    triangles.push([tri[0], tri[2], tri[1]]);
                }
            }
        }
        lower = upper;
    }
    let mut mesh = Mesh { object, vertices, triangles };
    let keep: Vec<bool> = (0..mesh.triangles.len()).map(|t| mesh.triangle_area(t) > 1e-12).collect();
    let mut k = 0;
    mesh.triangles.retain(|_| {
        k += 1;
        keep[k - 1]
    });
    compact(&mut mesh);
    Ok(mesh)
}

/// Drops vertices no triangle uses.
fn compact(mesh: &mut Mesh) {
    let mut remap = vec![u32::MAX; mesh.vertices.len()];
    let mut vertices = Vec::new();
    for t in &mut mesh.triangles {
        for i in t.iter_mut() {
            if remap[*i as usize] == u32::MAX {
                remap[*i as usize] = vertices.len() as u32;
                vertices.push(mesh.vertices[*i as usize]);
            }
            *i = remap[*i as usize];
        }
    }
    mesh.vertices = vertices;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAudit {
    pub object: usize,
    /// Fraction of samples with `u < 0`.
    pub occupancy_fraction: f64,
    pub occupancy_volume: f64,
    /// Monte-Carlo occupancy IoU against the reference field, when given.
    pub occupancy_iou: Option<f64>,
    /// Mean silhouette IoU against reference renders, when computed.
    pub silhouette_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAudit {
    pub a: usize,
    pub b: usize,
    /// Fraction of samples inside both objects.
    pub overlap_fraction: f64,
    pub overlap_volume: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub samples: usize,
    pub seed: u64,
    pub bounds: Aabb,
    pub objects: Vec<ObjectAudit>,
    pub pairs: Vec<PairAudit>,
    /// `histogram[c]` = samples inside exactly `c` objects.
    pub penetration_histogram: Vec<usize>,
    pub naive_penetration_loss: f64,
}

impl AuditReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Uniform samples over `bounds`, shared by every object.
pub fn uniform_points(bounds: &Aabb, samples: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples).map(|_| std::array::from_fn(|a| rng.random_range(bounds.min[a]..bounds.max[a]))).collect()
}

/// Monte-Carlo occupancy, pairwise overlap and penetration statistics over
/// `samples` uniform points. With `reference` (same object count), also the
/// per-object occupancy IoU against it.
pub fn audit_decomposition(field: &dyn SdfQuery, bounds: &Aabb, samples: usize, seed: u64, reference: Option<&dyn SdfQuery>) -> AuditReport {
    let m = field.num_objects();
    let pts = uniform_points(bounds, samples, seed);
    let inside: Vec<Vec<bool>> = (0..m).map(|i| field.sdf_batch(i, &pts).iter().map(|&u| u < 0.0).collect()).collect();
    let vol = bounds.volume();
    let frac = |c: usize| c as f64 / samples.max(1) as f64;
    let objects = (0..m)
        .map(|i| {
            let f = frac(inside[i].iter().filter(|&&b| b).count());
            let occupancy_iou = reference.map(|r| {
                let truth: Vec<bool> = r.sdf_batch(i, &pts).iter().map(|&u| u < 0.0).collect();
                mask_iou(&inside[i], &truth)
            });
            ObjectAudit {
                object: i,
                occupancy_fraction: f,
                occupancy_volume: f * vol,
                occupancy_iou,
                silhouette_iou: None,
            }
        })
        .collect();
    let mut pairs = Vec::new();
    for a in 0..m {
        for b in a + 1..m {
            let f = frac(inside[a].iter().zip(&inside[b]).filter(|(x, y)| **x && **y).count());
            pairs.push(PairAudit {
                a,
                b,
                overlap_fraction: f,
                overlap_volume: f * vol,
            });
        }
    }
    let signs = Tensor::<f64>::from_vec(samples, m, (0..samples).flat_map(|p| inside.iter().map(move |col| if col[p] { -1.0 } else { 1.0 })).collect());
    let pen = penetration_count(&signs);
    AuditReport {
        samples,
        seed,
        bounds: *bounds,
        objects,
        pairs,
        penetration_histogram: pen.histogram,
        naive_penetration_loss: pen.naive_loss,
    }
}

/// Per-object silhouette IoU (opacity > 0.5) of object renders of `field`
/// against `reference`, averaged over `cameras`.
pub fn silhouette_iou<T: Real>(
    field: &dyn FrozenField<T>,
    reference: &dyn FrozenField<f64>,
    objects: usize,
    cameras: &[Camera],
    bounds: &Aabb,
    settings: &RenderSettings,
) -> Vec<f64> {
    let tags: Vec<RenderTag> = (0..objects).map(|object| RenderTag::Object { object }).collect();
    let mut sums = vec![0.0; objects];
    for cam in cameras {
        let a = render_images(field, cam, bounds, settings, &tags);
        let b = render_images(reference, cam, bounds, settings, &tags);
        for i in 0..objects {
            sums[i] += mask_iou(&a[i].mask(0.5), &b[i].mask(0.5));
        }
    }
    sums.iter().map(|s| s / cameras.len().max(1) as f64).collect()
}

/// ASCII OBJ with 1-based indices.
pub fn write_obj(mesh: &Mesh, path: &Path) -> Result<(), ExportError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    let mut body = || -> std::io::Result<()> {
        writeln!(w, "# object {}", mesh.object)?;
        for v in &mesh.vertices {
            writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
        }
        for t in &mesh.triangles {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        w.flush()
    };
    body().map_err(io_err(path))
}

/// Reads the `v` and triangular `f` records of an OBJ file.
pub fn read_obj(path: &Path) -> Result<Mesh, ExportError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |line: usize, what: &str| ExportError::Format {
        path: path.to_path_buf(),
        message: format!("line {line}: {what}"),
    };
    let mut mesh = Mesh {
        object: 0,
        vertices: Vec::new(),
        triangles: Vec::new(),
    };
    for (k, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("#") => {
                if let (Some("object"), Some(i)) = (parts.next(), parts.next()) {
                    mesh.object = i.parse().map_err(|_| bad(k + 1, "bad object index"))?;
                }
            }
            Some("v") => {
                let v: Vec<f64> = parts.take(3).map(str::parse).collect::<Result<_, _>>().map_err(|_| bad(k + 1, "bad vertex"))?;
                if v.len() != 3 {
                    return Err(bad(k + 1, "vertex needs three coordinates"));
                }
                mesh.vertices.push([v[0], v[1], v[2]]);
            }
            Some("f") => {
                let idx: Vec<u32> = parts
                    .map(|p| p.split('/').next().unwrap_or("").parse::<u32>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad(k + 1, "bad face"))?;
                if idx.len() != 3 || idx.iter().any(|&i| i == 0 || i as usize > mesh.vertices.len()) {
                    return Err(bad(k + 1, "face needs three valid 1-based indices"));
                }
                mesh.triangles.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            _ => {}
        }
    }
    Ok(mesh)
}

/// 8-bit sRGB-agnostic PNG of the colors, clamped to `[0, 1]`.
pub fn write_png(image: &Image, path: &Path) -> Result<(), ExportError> {
    let bytes: Vec<u8> = image.rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(image.width as u32, image.height as u32, bytes).expect("buffer matches the image size");
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(source) => ExportError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => ExportError::Format {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

/// Color PFM (`PF`, little-endian, rows stored bottom to top).
pub fn write_pfm(width: usize, height: usize, rgb: &[f32], path: &Path) -> Result<(), ExportError> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut bytes = format!("PF\n{width} {height}\n-1.0\n").into_bytes();
    for y in (0..height).rev() {
        for v in &rgb[3 * y * width..3 * (y + 1) * width] {
            bytes.extend(v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn write_image_pfm(image: &Image, path: &Path) -> Result<(), ExportError> {
    let rgb: Vec<f32> = image.rgb.iter().map(|&v| v as f32).collect();
    write_pfm(image.width, image.height, &rgb, path)
}

/// Reads a color PFM into top-to-bottom rows: `(width, height, rgb)`.
pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f32>), ExportError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |m: &str| ExportError::Format {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    let mut fields = Vec::new();
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..at]).into_owned());
    }
    at += 1;
    if fields[0] != "PF" {
        return Err(bad("not a color PFM"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = fields[3].parse().map_err(|_| bad("bad scale"))?;
    let data = bytes.get(at..).unwrap_or(&[]);
    if data.len() != 4 * 3 * w * h {
        return Err(bad("pixel data does not match the header"));
    }
    let word = |c: &[u8]| {
        let b = [c[0], c[1], c[2], c[3]];
        if scale < 0.0 {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    };
    let stored: Vec<f32> = data.chunks_exact(4).map(word).collect();
    let mut rgb = Vec::with_capacity(stored.len());
    for y in (0..h).rev() {
        rgb.extend_from_slice(&stored[3 * y * w..3 * (y + 1) * w]);
    }
    Ok((w, h, rgb))
}
