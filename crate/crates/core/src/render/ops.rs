//! Compositing kernels with hand-written backward passes.
//!
//! Samples are laid out ray-major: row `r·N + k` is sample `k` of ray `r`.

use crate::autodiff::{CustomOp, Real, Tape, Tensor, Var};
use crate::par;

fn ln_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Discrete NeuS opacity of the interval from a sample with SDF `u0` to the
/// next one with `u1`: `max((Φ(u0) − Φ(u1)) / Φ(u0), 0)` with `Φ(u) = σ(κu)`.
pub fn neus_opacity(u0: f64, u1: f64, kappa: f64) -> f64 {
    neus_alpha_and_partials(u0, u1, kappa).0
}

/// `(α, ∂α/∂(κu0), ∂α/∂(κu1))`, evaluated in log space.
fn neus_alpha_and_partials(u0: f64, u1: f64, kappa: f64) -> (f64, f64, f64) {
    let (a, b) = (kappa * u0, kappa * u1);
    if a <= b {
        return (0.0, 0.0, 0.0);
    }
    let ratio = (ln_sigmoid(b) - ln_sigmoid(a)).exp();
    (1.0 - ratio, ratio * sigmoid(-a), -ratio * sigmoid(-b))
}

/// Per-sample per-object opacities `[P × M]` from SDFs `[P × M]` and `κ`.
/// The last sample of each ray closes no interval and gets zero opacity.
pub fn neus_alpha<T: Real>(tape: &mut Tape<T>, sdf: Var, kappa: Var, samples_per_ray: usize) -> Var {
    let n = samples_per_ray;
    let u = tape.value(sdf);
    let k = tape.value(kappa).item().as_f64();
    let (p, m) = u.shape();
    assert_eq!(p % n, 0, "neus_alpha: sample count must be a multiple of N");
    let mut out = Tensor::zeros(p, m);
    par::for_each_chunk_mut(out.data_mut(), n * m, |r, chunk| {
        for s in 0..n - 1 {
            let row = r * n + s;
            for i in 0..m {
                let a = neus_alpha_and_partials(u.at(row, i).as_f64(), u.at(row + 1, i).as_f64(), k).0;
                chunk[s * m + i] = T::of(a);
            }
        }
    });
    tape.custom(&[sdf, kappa], out, Box::new(NeusAlphaOp { n }))
}

struct NeusAlphaOp {
    n: usize,
}

impl<T: Real> CustomOp<T> for NeusAlphaOp {
    fn name(&self) -> &'static str {
        "neus_alpha"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (u, k) = (inputs[0], inputs[1].item().as_f64());
        let (p, m) = u.shape();
        let n = self.n;
        let rays = p / n;
        // per ray: gradient rows and the κ partial sum
        let parts = par::map_ranges(rays, 64, |range| {
            let mut du = vec![0.0f64; range.len() * n * m];
            let mut dk = 0.0f64;
            for (local, r) in range.clone().enumerate() {
                for s in 0..n - 1 {
                    let row = r * n + s;
                    for i in 0..m {
                        let gv = g.at(row, i).as_f64();
                        if gv == 0.0 {
                            continue;
                        }
                        let (u0, u1) = (u.at(row, i).as_f64(), u.at(row + 1, i).as_f64());
                        let (_, da, db) = neus_alpha_and_partials(u0, u1, k);
                        let base = (local * n + s) * m + i;
                        du[base] += gv * da * k;
                        du[base + m] += gv * db * k;
                        dk += gv * (da * u0 + db * u1);
                    }
                }
            }
            (du, dk)
        });
        let mut du = Vec::with_capacity(p * m);
        let mut dk = 0.0;
        for (d, kpart) in parts {
            du.extend(d.into_iter().map(T::of));
            dk += kpart;
        }
        vec![
            needs[0].then(|| Tensor::from_vec(p, m, du)),
            needs[1].then(|| Tensor::scalar(T::of(dk))),
        ]
    }
}

/// Volume-rendering weights `w_k = α_k Π_{j<k} (1 − α_j)` per ray, `[P × 1]`.
pub fn ray_weights<T: Real>(tape: &mut Tape<T>, alpha: Var, samples_per_ray: usize) -> Var {
    let n = samples_per_ray;
    let a = tape.value(alpha);
    assert_eq!(a.cols(), 1, "ray_weights expects a single opacity column");
    assert_eq!(a.rows() % n, 0);
    let mut out = Tensor::zeros(a.rows(), 1);
    par::for_each_chunk_mut(out.data_mut(), n, |r, w| {
        let mut trans = 1.0f64;
        for (k, wk) in w.iter_mut().enumerate() {
            let ak = a.at(r * n + k, 0).as_f64();
            *wk = T::of(ak * trans);
            trans *= 1.0 - ak;
        }
    });
    tape.custom(&[alpha], out, Box::new(RayWeightsOp { n }))
}

struct RayWeightsOp {
    n: usize,
}

impl<T: Real> CustomOp<T> for RayWeightsOp {
    fn name(&self) -> &'static str {
        "ray_weights"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, g: &Tensor<T>, _needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let a = inputs[0];
        let n = self.n;
        let mut da = Tensor::zeros(a.rows(), 1);
        par::for_each_chunk_mut(da.data_mut(), n, |r, d| {
            let alpha = |k: usize| a.at(r * n + k, 0).as_f64();
            let gw = |k: usize| g.at(r * n + k, 0).as_f64();
            let mut trans = vec![1.0f64; n];
            for k in 1..n {
                trans[k] = trans[k - 1] * (1.0 - alpha(k - 1));
            }
            // tail = Σ_{k>j} g_k α_k Π_{j<i<k} (1 − α_i)
            let mut tail = 0.0f64;
            for j in (0..n).rev() {
                d[j] = T::of(trans[j] * (gw(j) - tail));
                tail = gw(j) * alpha(j) + (1.0 - alpha(j)) * tail;
            }
        });
        vec![Some(da)]
    }
}

/// Sums consecutive blocks of `n` rows: `[R·n × c] → [R × c]`.
pub fn segment_sum<T: Real>(tape: &mut Tape<T>, x: Var, n: usize) -> Var {
    let v = tape.value(x);
    let (p, c) = v.shape();
    assert_eq!(p % n, 0);
    let mut out = Tensor::zeros(p / n, c);
    par::for_each_chunk_mut(out.data_mut(), c.max(1), |r, row| {
        for k in 0..n {
            for (o, &s) in row.iter_mut().zip(v.row(r * n + k)) {
                *o += s;
            }
        }
    });
    tape.custom(&[x], out, Box::new(SegmentSumOp { n }))
}

struct SegmentSumOp {
    n: usize,
}

impl<T: Real> CustomOp<T> for SegmentSumOp {
    fn name(&self) -> &'static str {
        "segment_sum"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, g: &Tensor<T>, _needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (p, c) = inputs[0].shape();
        let n = self.n;
        let mut dx = Tensor::zeros(p, c);
        par::for_each_chunk_mut(dx.data_mut(), c.max(1), |row, d| d.copy_from_slice(g.row(row / n)));
        vec![Some(dx)]
    }
}

/// Places per-ray colors `[R × 3]` composited over `background` into an
/// image `[pixels × 3]`; `pixels[r]` is the pixel of ray `r` and every other
/// pixel shows the background.
pub fn finalize_pixels<T: Real>(tape: &mut Tape<T>, rgb: Var, acc: Var, pixels: &[usize], num_pixels: usize, background: [f64; 3]) -> Var {
    let (c, a) = (tape.value(rgb), tape.value(acc));
    let mut out = Tensor::from_vec(num_pixels, 3, (0..num_pixels).flat_map(|_| background.map(T::of)).collect());
    for (r, &px) in pixels.iter().enumerate() {
        let rest = 1.0 - a.at(r, 0).as_f64();
        for ch in 0..3 {
            out.set(px, ch, T::of(c.at(r, ch).as_f64() + rest * background[ch]));
        }
    }
    tape.custom(
        &[rgb, acc],
        out,
        Box::new(FinalizeOp {
            pixels: pixels.to_vec(),
            background,
        }),
    )
}

struct FinalizeOp {
    pixels: Vec<usize>,
    background: [f64; 3],
}

impl<T: Real> CustomOp<T> for FinalizeOp {
    fn name(&self) -> &'static str {
        "finalize_pixels"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, g: &Tensor<T>, _needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let r = self.pixels.len();
        let mut drgb = Tensor::zeros(r, 3);
        let mut dacc = Tensor::zeros(r, 1);
        for (ray, &px) in self.pixels.iter().enumerate() {
            let mut s = 0.0;
            for ch in 0..3 {
                drgb.set(ray, ch, g.at(px, ch));
                s -= g.at(px, ch).as_f64() * self.background[ch];
            }
            dacc.set(ray, 0, T::of(s));
        }
        vec![Some(drgb), Some(dacc)]
    }
}

/// One-hot of the smallest entry per row, ties to the lowest index.
pub fn argmin_one_hot<T: Real>(u: &Tensor<T>) -> Tensor<T> {
    let (p, m) = u.shape();
    let mut out = Tensor::zeros(p, m);
    for r in 0..p {
        let row = u.row(r);
        let best = (1..m).fold(0, |b, i| if row[i] < row[b] { i } else { b });
        out.set(r, best, T::one());
    }
    out
}

/// How the hard identity vector is differentiated.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum IdentityMode<T> {
    /// One-hot forward, `softmax(−u)` backward.
    #[default]
    StraightThrough,
    /// `softmax(−u) + offset` with a frozen offset: a smooth function whose
    /// value at the point where the offset was taken equals the one-hot and
    /// whose gradient everywhere equals the straight-through one. Used for
    /// finite-difference checks.
    Surrogate(Tensor<T>),
}

/// The offset turning the soft identity into the hard one at SDF values `u`.
pub fn surrogate_offset<T: Real>(u: &Tensor<T>) -> Tensor<T> {
    let hard = argmin_one_hot(u);
    let soft = softmax_neg(u);
    let mut out = hard;
    out.data_mut().iter_mut().zip(soft.data()).for_each(|(h, s)| *h -= *s);
    out
}

/// `softmax(−u)` per row with the same arithmetic as [`Tape::softmax`].
fn softmax_neg<T: Real>(u: &Tensor<T>) -> Tensor<T> {
    let (p, m) = u.shape();
    let mut out = Tensor::zeros(p, m);
    for r in 0..p {
        let row: Vec<T> = u.row(r).iter().map(|&v| -v).collect();
        let hi = row.iter().copied().fold(T::neg_infinity(), T::max);
        let o = out.row_mut(r);
        let mut z = T::zero();
        for (o, &v) in o.iter_mut().zip(&row) {
            *o = (v - hi).exp();
            z += *o;
        }
        for o in o.iter_mut() {
            *o = *o / z;
        }
    }
    out
}

/// Identity vectors `[P × M]` for SDFs `[P × M]`.
pub fn identity_vector<T: Real>(tape: &mut Tape<T>, sdf: Var, mode: &IdentityMode<T>) -> Var {
    let neg = tape.neg(sdf);
    let soft = tape.softmax(neg);
    match mode {
        IdentityMode::StraightThrough => {
            let hard = argmin_one_hot(tape.value(sdf));
            tape.straight_through(hard, soft).expect("identity shapes match")
        }
        IdentityMode::Surrogate(offset) => {
            let c = tape.constant(offset.clone());
            tape.add(soft, c)
        }
    }
}
