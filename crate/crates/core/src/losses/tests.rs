use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck::{central_differences, compare};
use crate::field::{AnalyticScene, Field, SceneField};
use crate::graph::{decompose_prompts, parse_graph, plan_sequence, EdgePromptStyle};
use crate::optim::{Adam, AdamConfig};
use crate::render::ops::{identity_vector, surrogate_offset};
use crate::render::{composite, evaluate, sample_rays, IdentityMode, Stratification};
use crate::space::{Aabb, Sphere};
use crate::testing::{lively_field, micro_camera, tiny_field_config};

fn point_loss(u: &[f64]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let s = tape.constant(Tensor::from_vec(1, u.len(), u.to_vec()));
    let l = identity_vector(&mut tape, s, &IdentityMode::StraightThrough);
    let p = penetration_loss(&mut tape, s, l, 1);
    tape.value(p).item()
}

#[test]
fn penetration_examples() {
    assert!((point_loss(&[-0.3, 0.1]) - 0.04).abs() < 1e-15);
    assert_eq!(point_loss(&[0.2, 0.5]), 0.0);
    assert_eq!(point_loss(&[-0.4]), 0.0);
    // inside one object only, yet penalized: the margin is the owner's depth
    let u = Tensor::from_rows(&[vec![-0.3, 0.1]]);
    assert_eq!(penetration_count(&u).naive_loss, 0.0);
}

#[test]
fn count_examples() {
    let u = Tensor::<f64>::from_rows(&[vec![-0.1, -0.2, 0.3], vec![0.1, 0.2, 0.3], vec![-0.1, 0.2, 0.0]]);
    let r = penetration_count(&u);
    assert_eq!(r.counts, vec![2, 0, 1]);
    assert_eq!(r.histogram, vec![1, 1, 1, 0]);
    assert!((r.naive_loss - 1.0 / 3.0).abs() < 1e-15);
}

fn scene_sdf(scene: &AnalyticScene, n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut tape = Tape::new();
    let s = SceneField::<f64>::sample(scene, &mut tape, &Arc::new(Tensor::from_vec(n, 3, pts)), false);
    tape.value(s.sdf).clone()
}

fn refined(u: &Tensor<f64>) -> f64 {
    let mut tape = Tape::new();
    let s = tape.constant(u.clone());
    let l = identity_vector(&mut tape, s, &IdentityMode::StraightThrough);
    let p = penetration_loss(&mut tape, s, l, u.rows());
    tape.value(p).item()
}

#[test]
fn disjoint_spheres_have_no_penetration() {
    let disjoint = AnalyticScene::new(vec![Sphere::new([-0.5, 0.0, 0.0], 0.3), Sphere::new([0.5, 0.0, 0.0], 0.3)], vec![[0.0; 3]; 2], 10.0);
    let u = scene_sdf(&disjoint, 20000, 1);
    assert_eq!(refined(&u), 0.0);
    assert_eq!(penetration_count(&u).naive_loss, 0.0);
    let overlapping = AnalyticScene::new(vec![Sphere::new([-0.2, 0.0, 0.0], 0.3), Sphere::new([0.2, 0.0, 0.0], 0.3)], vec![[0.0; 3]; 2], 10.0);
    let u = scene_sdf(&overlapping, 20000, 1);
    assert!(refined(&u) > 0.0);
    assert!(penetration_count(&u).naive_loss > 0.0);
}

proptest! {
    #[test]
    fn multi_object_points_are_always_penalized(rows in proptest::collection::vec(proptest::collection::vec(-1.0..1.0f64, 3), 1..30)) {
        let u = Tensor::from_rows(&rows);
        // keep clear of the sign tolerance
        prop_assume!(u.data().iter().all(|v| v.abs() > 1e-6));
        // naive > 0 implies refined > 0; the converse fails because
        // non-owners are pushed out to the owner's depth
        if penetration_count(&u).naive_loss > 0.0 {
            prop_assert!(refined(&u) > 0.0);
        }
    }

    #[test]
    fn constraints_are_permutation_invariant(rows in proptest::collection::vec(proptest::collection::vec(-1.0..1.0f64, 3), 1..20)) {
        let u = Tensor::from_rows(&rows);
        let perm: Vec<Vec<f64>> = rows.iter().map(|r| vec![r[2], r[0], r[1]]).collect();
        let v = Tensor::from_rows(&perm);
        prop_assert!((refined(&u) - refined(&v)).abs() < 1e-12);
    }
}

fn eikonal_of(scene: &AnalyticScene, scale: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pts: Vec<f64> = (0..3000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut tape = Tape::new();
    let s = SceneField::<f64>::sample(scene, &mut tape, &Arc::new(Tensor::from_vec(1000, 3, pts)), true);
    let g: Vec<Var> = s.gradients.iter().map(|&g| tape.scale(g, scale)).collect();
    let e = eikonal_loss(&mut tape, &g, 1000);
    tape.value(e).item()
}

#[test]
fn eikonal_examples() {
    let s = AnalyticScene::new(vec![Sphere::new([0.1, 0.0, 0.0], 0.4), Sphere::new([-0.3, 0.2, 0.0], 0.2)], vec![[0.0; 3]; 2], 10.0);
    assert!(eikonal_of(&s, 1.0) < 1e-8);
    assert!((eikonal_of(&s, 2.0) - 1.0).abs() < 1e-12);
}

#[test]
fn eikonal_optimization_reduces_the_loss() {
    let mut field = Field::<f32>::new(tiny_field_config(), 2, 0.3, 5);
    let mut adam = Adam::new(AdamConfig::default(), &field.params.shapes());
    let lrs = vec![1e-3; field.params.shapes().len()];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut history = Vec::new();
    for _ in 0..200 {
        let pts: Vec<f32> = (0..3 * 512).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pts = Arc::new(Tensor::from_vec(512, 3, pts));
        let mut tape = Tape::new();
        let b = field.bind(&mut tape);
        let s = b.sample(&mut tape, &pts, true);
        let e = eikonal_loss(&mut tape, &s.gradients, 512);
        history.push(tape.value(e).item() as f64);
        let g = tape.backward(e).unwrap();
        let grads: Vec<_> = b.vars().iter().map(|&v| g.get_or_zeros(v)).collect();
        adam.update(&mut field.params.tensors_mut(), &grads, &lrs);
    }
    let head = history[..20].iter().sum::<f64>() / 20.0;
    let tail = history[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.5 * head, "{head} -> {tail}");
    // smoothed trend never rises by much
    let smooth: Vec<f64> = history.chunks(20).map(|c| c.iter().sum::<f64>() / 20.0).collect();
    assert!(smooth.windows(2).all(|w| w[1] <= w[0] * 1.05), "{smooth:?}");
}

/// Penetration plus Eikonal over the micro-scene ray samples.
fn constraint_loss(field: &Field<f64>, pts: &Arc<Tensor<f64>>, offset: &Tensor<f64>) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let b = field.bind(&mut tape);
    let s = b.sample(&mut tape, pts, true);
    let lam = identity_vector(&mut tape, s.sdf, &IdentityMode::Surrogate(offset.clone()));
    let p = penetration_loss(&mut tape, s.sdf, lam, pts.rows());
    let e = eikonal_loss(&mut tape, &s.gradients, pts.rows());
    let p = tape.scale(p, 100.0);
    let both = tape.concat_cols(&[p, e]);
    let l = tape.sum(both);
    let v = tape.value(l).item();
    let g = tape.backward(l).unwrap();
    (v, b.vars().iter().flat_map(|&x| g.get_or_zeros(x).into_vec()).collect())
}

#[test]
fn constraint_gradients_match_finite_differences() {
    let mut field = lively_field(2, 41);
    // make the objects overlap so the penetration term is active
    field.params.sdf_out_b.data_mut()[0] = -0.6;
    let rays = sample_rays::<f64>(&micro_camera(), &Aabb::default(), 12, Stratification::Jittered { seed: 3 });
    let u = field.sdf_values(0, &[[0.0; 3]]);
    assert!(u[0] < 0.0);
    let offset = {
        let mut tape = Tape::new();
        let b = field.bind_frozen(&mut tape);
        let s = b.sample(&mut tape, &rays.points, false);
        surrogate_offset(tape.value(s.sdf))
    };
    let (v, analytic) = constraint_loss(&field, &rays.points, &offset);
    assert!(v > 0.0);
    let x0 = field.params.flatten();
    let tables: usize = field.params.tables.iter().map(|t| t.len()).sum();
    let mut idx: Vec<usize> = (0..tables).filter(|&i| analytic[i] != 0.0).step_by(2).collect();
    idx.extend(tables..x0.len());
    let numeric = central_differences(
        |x| {
            let mut f = field.clone();
            f.params.assign(x);
            constraint_loss(&f, &rays.points, &offset).0
        },
        &x0,
        &idx,
        1e-5,
    );
    let picked: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
    let r = compare(&picked, &numeric, &idx, 1e-5);
    assert!(r.max_relative_error < 1e-4, "{r:?}");
}

fn two_node_graph() -> SceneGraph {
    parse_graph(r#"{"global_prompt": "a cat on a mat", "nodes": [{"name": "cat"}, {"name": "mat"}], "edges": [{"subject": 0, "object": 1, "relation": "on"}]}"#).unwrap()
}

#[test]
fn renders_follow_the_plan() {
    let g = two_node_graph();
    let p = decompose_prompts(&g, EdgePromptStyle::Full);
    let plans = plan_sequence(&g, 3);
    let r0 = required_renders(&g, &p, &plans[0]);
    assert_eq!(r0.iter().map(|r| r.tag).collect::<Vec<_>>(), vec![RenderTag::Object { object: 0 }, RenderTag::edge(0, 1)]);
    assert_eq!(r0[1].prompt, "cat on mat");
    let r2 = required_renders(&g, &p, &plans[2]);
    assert_eq!(r2, vec![GuidedRender { tag: RenderTag::Scene, prompt: "a cat on a mat".into() }]);
    let one = parse_graph(r#"{"global_prompt": "x", "nodes": [{"name": "ball"}], "edges": []}"#).unwrap();
    let p1 = decompose_prompts(&one, EdgePromptStyle::Full);
    assert_eq!(required_renders(&one, &p1, &plan_sequence(&one, 1)[0]).len(), 1);
}

/// Micro-scene objective with a photometric residual `image − target`.
fn photometric_loss(field: &Field<f64>, target: &Tensor<f64>, offset: &Tensor<f64>, scale: f64) -> (f64, Vec<f64>) {
    let rays = sample_rays::<f64>(&micro_camera(), &Aabb::default(), 10, Stratification::Midpoint);
    let mut tape = Tape::new();
    let b = field.bind(&mut tape);
    let s = evaluate(&mut tape, &b, rays, [1.0; 3], &IdentityMode::Surrogate(offset.clone()), false);
    let img = composite(&mut tape, &s, RenderTag::Object { object: 1 });
    let value = tape.value(img.rgb).clone();
    let mut residual = value.clone();
    residual.data_mut().iter_mut().zip(target.data()).for_each(|(r, t)| *r -= t);
    let half_sq = 0.5 * residual.data().iter().map(|v| v * v).sum::<f64>();
    let l = sds_inject(&mut tape, &img, &residual, scale);
    let g = tape.backward(l).unwrap();
    (half_sq, b.vars().iter().flat_map(|&x| g.get_or_zeros(x).into_vec()).collect())
}

#[test]
fn photometric_injection_is_the_squared_error_gradient() {
    let mut field = lively_field(2, 51);
    field.params.log_kappa.data_mut()[0] = 2.0f64.ln();
    let target = Tensor::from_vec(4, 3, (0..12).map(|i| 0.1 * (i % 7) as f64).collect());
    let offset = {
        let rays = sample_rays::<f64>(&micro_camera(), &Aabb::default(), 10, Stratification::Midpoint);
        let mut tape = Tape::new();
        let b = field.bind_frozen(&mut tape);
        let s = b.sample(&mut tape, &rays.points, false);
        surrogate_offset(tape.value(s.sdf))
    };
    let (_, analytic) = photometric_loss(&field, &target, &offset, 1.0);
    let x0 = field.params.flatten();
    let idx: Vec<usize> = (0..x0.len()).filter(|&i| analytic[i] != 0.0).step_by(3).collect();
    assert!(idx.len() > 20);
    let numeric = central_differences(
        |x| {
            let mut f = field.clone();
            f.params.assign(x);
            photometric_loss(&f, &target, &offset, 1.0).0
        },
        &x0,
        &idx,
        1e-5,
    );
    let picked: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
    let r = compare(&picked, &numeric, &idx, 1e-5);
    assert!(r.max_relative_error < 1e-4, "{r:?}");
    // residual scaled by 2 doubles every gradient; a zero residual gives none
    let (_, doubled) = photometric_loss(&field, &target, &offset, 2.0);
    assert!(analytic.iter().zip(&doubled).all(|(a, d)| (2.0 * a - d).abs() <= 1e-12 * d.abs().max(1.0)));
    let (_, zero) = photometric_loss(&field, &target, &offset, 0.0);
    assert!(zero.iter().all(|&g| g == 0.0));
}

#[test]
fn total_loss_checks_the_plan() {
    let field = lively_field(2, 61);
    let g = two_node_graph();
    let p = decompose_prompts(&g, EdgePromptStyle::Full);
    let plan = plan_sequence(&g, 1)[0];
    let expected = required_renders(&g, &p, &plan);
    let rays = sample_rays::<f64>(&micro_camera(), &Aabb::default(), 8, Stratification::Midpoint);
    let total = rays.points.rows();
    let mut tape = Tape::new();
    let b = field.bind(&mut tape);
    let s = evaluate(&mut tape, &b, rays, [1.0; 3], &IdentityMode::StraightThrough, true);
    let obj = composite(&mut tape, &s, RenderTag::Object { object: 0 });
    let edge = composite(&mut tape, &s, RenderTag::edge(0, 1));
    let scene = composite(&mut tape, &s, RenderTag::Scene);
    let zero = Tensor::zeros(4, 3);
    let (sdf, lam) = (s.sdf.unwrap(), s.identity.unwrap());
    let c = Coefficients::default();
    let bad = total_loss(&mut tape, &expected, &[(&obj, &zero), (&scene, &zero)], sdf, lam, &s.gradients, total, &c);
    assert!(matches!(bad, Err(LossError::RenderMismatch { index: 1, .. })));
    let short = total_loss(&mut tape, &expected, &[(&obj, &zero)], sdf, lam, &s.gradients, total, &c);
    assert!(matches!(short, Err(LossError::RenderCount { expected: 2, found: 1 })));
    let (l, pen, eik) = total_loss(&mut tape, &expected, &[(&obj, &zero), (&edge, &zero)], sdf, lam, &s.gradients, total, &c).unwrap();
    assert!(pen >= 0.0 && eik > 0.0);
    assert!((tape.value(l).item() - (100.0 * pen + 10.0 * eik)).abs() < 1e-9);
}
