//! Training objective: guidance injections routed by the step plan plus the
//! penetration and Eikonal constraints.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::graph::{PromptSet, SceneGraph, StepKind, StepPlan};
use crate::render::ops::argmin_one_hot;
use crate::render::{RenderTag, RenderedImage};

/// Weights of the guidance, penetration and Eikonal terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Coefficients {
    pub sds: f64,
    pub penetration: f64,
    pub eikonal: f64,
}

impl Default for Coefficients {
    fn default() -> Self {
        Self {
            sds: 1.0,
            penetration: 100.0,
            eikonal: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("step plan needs {expected} renders, got {found}")]
    RenderCount { expected: usize, found: usize },
    #[error("render {index} is {found:?}, plan needs {expected:?}")]
    RenderMismatch {
        index: usize,
        expected: RenderTag,
        found: RenderTag,
    },
    #[error("coefficients must be nonnegative")]
    BadCoefficients,
}

/// One image the plan calls for, with the prompt that guides it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidedRender {
    pub tag: RenderTag,
    pub prompt: String,
}

/// The images (in order) and prompts a step guides.
pub fn required_renders(graph: &SceneGraph, prompts: &PromptSet, plan: &StepPlan) -> Vec<GuidedRender> {
    match plan.kind {
        StepKind::ObjectAndEdge { object, edge } => {
            let mut out = vec![GuidedRender {
                tag: RenderTag::Object { object },
                prompt: prompts.objects[object].clone(),
            }];
            if let Some(k) = edge {
                let e = graph.edges()[k];
                out.push(GuidedRender {
                    tag: RenderTag::edge(e.subject, e.object),
                    prompt: prompts.edges[k].prompt.clone(),
                });
            }
            out
        }
        StepKind::Global => vec![GuidedRender {
            tag: RenderTag::Scene,
            prompt: prompts.global.clone(),
        }],
    }
}

/// Pseudo-loss whose parameter gradient is `weight · residualᵀ ∂image/∂Θ`.
pub fn sds_inject<T: Real>(tape: &mut Tape<T>, image: &RenderedImage, residual: &Tensor<T>, weight: f64) -> Var {
    let mut r = residual.clone();
    r.scale_assign(T::of(weight));
    tape.inject_gradient(image.rgb, r).expect("residual matches the image shape")
}

/// Refined penetration loss over `[P × M]` SDFs with identity vectors
/// `lambda`: the owner's depth `d = ReLU(λ·(−u))` pushes every other object
/// out to at least that depth, `Σ_{j≠owner} ReLU(d − u_j)²`, normalized by
/// `(M − 1)·total_points`. `total_points` is the size of the whole sample set
/// when `sdf` holds only a part of it.
pub fn penetration_loss<T: Real>(tape: &mut Tape<T>, sdf: Var, lambda: Var, total_points: usize) -> Var {
    let (_, m) = sdf.shape();
    if m < 2 {
        return tape.constant(Tensor::scalar(T::zero()));
    }
    let mut others = argmin_one_hot(tape.value(sdf));
    others.data_mut().iter_mut().for_each(|v| *v = T::one() - *v);
    let neg = tape.neg(sdf);
    let owned = tape.mul(lambda, neg);
    let d = tape.sum_cols(owned);
    let d = tape.relu(d);
    let gap = tape.add_col(neg, d);
    let gap = tape.relu(gap);
    let sq = tape.square(gap);
    let sq = tape.mul_const(sq, others);
    let s = tape.sum(sq);
    tape.scale(s, T::of(1.0 / ((m - 1) * total_points) as f64))
}

/// Point-in-object counts `𝒩⁻(p)` with the naive count loss alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenetrationReport {
    pub counts: Vec<u32>,
    /// `histogram[c]` = points inside exactly `c` objects.
    pub histogram: Vec<usize>,
    /// Mean of `max(0, 𝒩⁻ − 1)`.
    pub naive_loss: f64,
}

/// Counts, per row of `[P × M]` SDFs, the objects with `u < 0`. A point on
/// the surface (`u = 0`) is not inside.
pub fn penetration_count<T: Real>(sdf: &Tensor<T>) -> PenetrationReport {
    let (p, m) = sdf.shape();
    let counts: Vec<u32> = (0..p).map(|r| sdf.row(r).iter().filter(|&&u| u < T::zero()).count() as u32).collect();
    let mut histogram = vec![0usize; m + 1];
    counts.iter().for_each(|&c| histogram[c as usize] += 1);
    let naive = counts.iter().map(|&c| c.saturating_sub(1) as f64).sum::<f64>() / p.max(1) as f64;
    PenetrationReport {
        counts,
        histogram,
        naive_loss: naive,
    }
}

/// `Σ_i Σ_p (‖∇u_i(p)‖ − 1)² / (M · total_points)` over per-object `[P × 3]`
/// spatial gradients.
pub fn eikonal_loss<T: Real>(tape: &mut Tape<T>, gradients: &[Var], total_points: usize) -> Var {
    if gradients.is_empty() {
        return tape.constant(Tensor::scalar(T::zero()));
    }
    let terms: Vec<Var> = gradients
        .iter()
        .map(|&g| {
            let n = tape.row_norm(g);
            let n = tape.affine(n, T::one(), -T::one());
            let n = tape.square(n);
            tape.sum(n)
        })
        .collect();
    let all = tape.concat_cols(&terms);
    let s = tape.sum(all);
    tape.scale(s, T::of(1.0 / (gradients.len() * total_points) as f64))
}

/// Logged values of one step's objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub kind: String,
    pub sds_terms: Vec<GuidedRender>,
    pub penetration: f64,
    pub eikonal: f64,
    pub coefficients: Coefficients,
}

impl LossBundle {
    pub fn sds_count(&self) -> usize {
        self.sds_terms.len()
    }

    /// `β₂·penetration + β₃·eikonal`; guidance terms have no scalar value.
    pub fn weighted_constraints(&self) -> f64 {
        self.coefficients.penetration * self.penetration + self.coefficients.eikonal * self.eikonal
    }
}

/// Assembles the scalar whose gradient is the step's full objective:
/// one injection per planned render (in `required_renders` order), plus the
/// penetration and Eikonal terms over `sdf` / `lambda` / `gradients`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    expected: &[GuidedRender],
    renders: &[(&RenderedImage, &Tensor<T>)],
    sdf: Var,
    lambda: Var,
    gradients: &[Var],
    total_points: usize,
    coefficients: &Coefficients,
) -> Result<(Var, f64, f64), LossError> {
    if coefficients.sds < 0.0 || coefficients.penetration < 0.0 || coefficients.eikonal < 0.0 {
        return Err(LossError::BadCoefficients);
    }
    if renders.len() != expected.len() {
        return Err(LossError::RenderCount {
            expected: expected.len(),
            found: renders.len(),
        });
    }
    let mut terms = Vec::with_capacity(renders.len() + 2);
    for (index, ((img, residual), want)) in renders.iter().zip(expected).enumerate() {
        if img.tag != want.tag {
            return Err(LossError::RenderMismatch {
                index,
                expected: want.tag,
                found: img.tag,
            });
        }
        terms.push(sds_inject(tape, img, residual, coefficients.sds));
    }
    let pen = penetration_loss(tape, sdf, lambda, total_points);
    let eik = eikonal_loss(tape, gradients, total_points);
    let (pv, ev) = (tape.value(pen).item().as_f64(), tape.value(eik).item().as_f64());
    let pen_w = tape.scale(pen, T::of(coefficients.penetration));
    let eik_w = tape.scale(eik, T::of(coefficients.eikonal));
    terms.push(pen_w);
    terms.push(eik_w);
    let all = tape.concat_cols(&terms);
    Ok((tape.sum(all), pv, ev))
}

#[cfg(test)]
mod tests;
