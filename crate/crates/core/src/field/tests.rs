use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck::{central_differences, compare};
use crate::space::SceneSpace;

use crate::testing::lively_field;

fn random_points(n: usize, seed: u64, extent: f64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(-extent..extent)))
        .collect()
}

fn tensor(points: &[[f64; 3]]) -> Arc<Tensor<f64>> {
    Arc::new(Tensor::from_vec(points.len(), 3, points.iter().flatten().copied().collect()))
}

fn lively(seed: u64) -> Field<f64> {
    lively_field(2, seed)
}

#[test]
fn feature_dimension_is_shared() {
    let f = Field::<f32>::new(FieldConfig::default(), 3, 0.3, 0);
    assert_eq!(f.feature_dim(), 16);
    let mut tape = Tape::new();
    let b = f.bind(&mut tape);
    let pts = Arc::new(Tensor::<f32>::zeros(4, 3));
    for i in 0..3 {
        let e = b.encode(&mut tape, i, &pts);
        assert_eq!(e.shape(), (4, 16));
    }
}

#[test]
fn objects_have_distinct_features() {
    let f = lively(1);
    let mut tape = Tape::new();
    let b = f.bind_frozen(&mut tape);
    let pts = tensor(&[[0.13, -0.2, 0.31]]);
    let a = b.encode(&mut tape, 0, &pts);
    let c = b.encode(&mut tape, 1, &pts);
    assert_ne!(tape.value(a).data(), tape.value(c).data());
}

#[test]
fn shared_decoder_property() {
    let f = lively(2);
    let pts = random_points(64, 3, 0.9);
    let base: Vec<Vec<f64>> = (0..2).map(|i| f.sdf_values(i, &pts)).collect();
    // perturb θ₁
    let mut g = f.clone();
    g.params.tables[1].data_mut().iter_mut().for_each(|v| *v += 0.05);
    assert_eq!(g.sdf_values(0, &pts), base[0]);
    assert_ne!(g.sdf_values(1, &pts), base[1]);
    // perturb φ₁
    let mut h = f.clone();
    h.params.sdf_w[0].data_mut().iter_mut().for_each(|v| *v *= 1.1);
    assert_ne!(h.sdf_values(0, &pts), base[0]);
    assert_ne!(h.sdf_values(1, &pts), base[1]);
}

#[test]
fn colors_are_in_unit_cube() {
    let mut f = lively(4);
    f.params.color_w2.data_mut().iter_mut().for_each(|v| *v *= 100.0);
    for c in f.color_values(0, &random_points(500, 5, 1.0)) {
        assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn spatial_gradient_matches_finite_differences() {
    let f = lively(6);
    let pts = random_points(40, 7, 0.9);
    for i in 0..2 {
        let an = f.sdf_gradients(i, &pts);
        for (k, p) in pts.iter().enumerate() {
            for a in 0..3 {
                let h = 1e-6;
                let mut q = *p;
                q[a] += h;
                let hi = f.sdf_values(i, &[q])[0];
                q[a] -= 2.0 * h;
                let lo = f.sdf_values(i, &[q])[0];
                let fd = (hi - lo) / (2.0 * h);
                let err = (fd - an[k][a]).abs() / fd.abs().max(an[k][a].abs()).max(1e-3);
                assert!(err < 1e-3, "object {i} point {k} axis {a}: {fd} vs {}", an[k][a]);
            }
        }
    }
}

/// Weighted sum of SDF, colors, and the Eikonal penalty of both objects.
fn composite_loss(field: &Field<f64>, pts: &Arc<Tensor<f64>>, tape: &mut Tape<f64>) -> (Var, Vec<Var>) {
    let b = field.bind(tape);
    let mut terms = Vec::new();
    for i in 0..2 {
        let s = b.object(tape, i, pts, true);
        let w = Tensor::from_vec(pts.rows(), 1, (0..pts.rows()).map(|r| 0.3 + 0.1 * r as f64).collect());
        let u = tape.mul_const(s.sdf, w);
        terms.push(tape.sum(u));
        let cw = Tensor::from_vec(pts.rows(), 3, (0..pts.rows() * 3).map(|r| ((r % 5) as f64 - 2.0) * 0.2).collect());
        let c = tape.mul_const(s.color, cw);
        terms.push(tape.sum(c));
        let n = tape.row_norm(s.gradient.expect("requested"));
        let n = tape.affine(n, 1.0, -1.0);
        let n = tape.square(n);
        terms.push(tape.sum(n));
    }
    let k = b.kappa(tape);
    terms.push(k);
    let all = tape.concat_cols(&terms);
    (tape.sum(all), b.vars().to_vec())
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let field = lively(8);
    let pts = tensor(&random_points(6, 9, 0.9));
    let mut tape = Tape::new();
    let (loss, vars) = composite_loss(&field, &pts, &mut tape);
    let g = tape.backward(loss).unwrap();
    let analytic: Vec<f64> = vars.iter().flat_map(|&v| g.get_or_zeros(v).into_vec()).collect();
    let x0 = field.params.flatten();
    // every decoder/κ scalar, plus the table entries that receive gradient
    let tables: usize = field.params.tables.iter().map(|t| t.len()).sum();
    let mut idx: Vec<usize> = (0..tables).filter(|&i| analytic[i] != 0.0).step_by(3).collect();
    idx.extend(tables..x0.len());
    let numeric = central_differences(
        |x| {
            let mut f = field.clone();
            f.params.assign(x);
            let mut t = Tape::new();
            let (l, _) = composite_loss(&f, &pts, &mut t);
            t.value(l).item()
        },
        &x0,
        &idx,
        1e-5,
    );
    let picked: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
    let r = compare(&picked, &numeric, &idx, 1e-5);
    assert!(r.max_relative_error < 1e-4, "{r:?}");
}

#[test]
fn analytic_sphere_is_exact() {
    let s = AnalyticScene::new(vec![Sphere::new([0.1, 0.2, 0.0], 0.3)], vec![[1.0, 0.0, 0.0]], 10.0);
    let v = s.sdf_batch(0, &[[0.1, 0.2, 0.0], [0.4, 0.2, 0.0], [0.1, 0.2, 1.0]]);
    assert!((v[0] + 0.3).abs() < 1e-15 && v[1].abs() < 1e-15 && (v[2] - 0.7).abs() < 1e-15);
}

fn fitted(space: &SceneSpace) -> Field<f32> {
    init_spheres::<f32>(space, FieldConfig::default(), &SphereFit::default(), 11)
}

#[test]
fn sphere_initialization_fits_the_layout() {
    let space = SceneSpace::new(
        crate::space::Aabb::default(),
        vec![Sphere::new([0.3, 0.0, 0.0], 0.2), Sphere::new([-0.4, 0.0, 0.1], 0.3)],
    )
    .unwrap();
    let field = fitted(&space);
    let probe = random_points(1000, 12, 1.0);
    for (i, s) in space.spheres.iter().enumerate() {
        let c = s.center;
        let u = field.sdf_values(i, &[c, [c[0] + s.radius, c[1], c[2]]]);
        assert!((u[0] + s.radius).abs() < 0.05 * s.radius, "center {i}: {}", u[0]);
        assert!(u[1].abs() < 0.05 * s.radius, "surface {i}: {}", u[1]);
        let fit = field.sdf_values(i, &probe);
        let mae = probe.iter().zip(&fit).map(|(p, u)| (u - s.sdf(*p)).abs()).sum::<f64>() / probe.len() as f64;
        assert!(mae < 0.02, "object {i}: mean abs error {mae}");
        for (p, u) in probe.iter().zip(&fit) {
            let d = s.sdf(*p);
            if d < -0.1 * s.radius {
                assert!(*u < 0.0, "object {i} inside point {p:?} has u = {u}");
            }
            if d > 0.1 * s.radius {
                assert!(*u > 0.0, "object {i} outside point {p:?} has u = {u}");
            }
        }
    }
}
