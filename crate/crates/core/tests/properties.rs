use harnack_lab::classes::{check_p_local, witness_margin, ClassParams, Definition, LocalSamples};
use harnack_lab::contact::{barrier_profile, contact_set, lattice_vertices, slide_to_touch, touch_tolerance};
use harnack_lab::experiments::{coverage_check, oscillation_decay_check, weak_harnack_check};
use harnack_lab::lattice::{measure_fraction, oscillation};
use harnack_lab::operators::{
    apply_discrete, apply_nonlocal, ball_interior, kernel_moment, solve_dirichlet, sphere_area, DiscreteEllipticOp,
    NonlocalKernel, ScalarField, SolverOptions, tail_mass,
};
use harnack_lab::{GridFunction, Lattice, Region};
use proptest::prelude::*;

fn unit(h: f64) -> Lattice {
    Lattice::centered(2, h, 1.0).unwrap()
}

/// Smooth positive test function with a few random parameters.
fn bump(p: &[f64], c: &[f64; 4]) -> f64 {
    1.0 + c[0] * (3.0 * p[0] + c[1]).sin() * (2.0 * p[1] - c[2]).cos() + c[3] * (p[0] * p[0] + p[1] * p[1])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fraction_monotone_in_threshold(t1 in -1.0f64..2.0, dt in 0.0f64..1.0, seed in 0u64..1000) {
        let l = unit(0.0625);
        let u = ScalarField::RandomUniform { lo: -1.0, hi: 2.0 }.sample(&l, seed).unwrap();
        let r = Region::ball0(2, 0.5);
        let f1 = measure_fraction(&l, &r, |i, _| u.value(i) <= t1).unwrap();
        let f2 = measure_fraction(&l, &r, |i, _| u.value(i) <= t1 + dt).unwrap();
        prop_assert!(f1 <= f2);
    }

    #[test]
    fn oscillation_affine_behaviour(t in 0.01f64..10.0, c in -5.0f64..5.0, seed in 0u64..1000) {
        let l = unit(0.125);
        let u = ScalarField::RandomUniform { lo: 0.0, hi: 1.0 }.sample(&l, seed).unwrap();
        let r = Region::ball0(2, 0.75);
        let o = oscillation(&u, &r).unwrap();
        let shifted = oscillation(&u.affine(1.0, c), &r).unwrap();
        let scaled = oscillation(&u.affine(t, 0.0), &r).unwrap();
        prop_assert!((shifted - o).abs() <= 1e-12 * (1.0 + c.abs()));
        prop_assert!((scaled - t * o).abs() <= 1e-12 * t);
    }

    #[test]
    fn slide_touches_from_below(c in prop::array::uniform4(-0.4f64..0.4), a in 0.5f64..16.0, yx in -0.5f64..0.5, yy in -0.5f64..0.5) {
        let l = unit(0.0625);
        let u = GridFunction::from_fn(&l, |p| bump(p, &c)).unwrap();
        let rec = slide_to_touch(&u, a, &[yx, yy]).unwrap();
        let tol = touch_tolerance(a, l.spacing(), 4.0);
        let mut p = vec![0.0; 2];
        for i in 0..l.len() {
            l.point_into(i, &mut p);
            if p[0] * p[0] + p[1] * p[1] <= 1.0 {
                prop_assert!(rec.paraboloid.eval(&p) <= u.value(i) + 1e-12);
            }
        }
        let z = &rec.contact_point;
        prop_assert!((rec.paraboloid.eval(z) - u.value(rec.contact_node)).abs() <= tol);
    }

    #[test]
    fn contact_translation_equivariance(kx in -3i64..=3, ky in -3i64..=3, a in 1.0f64..8.0, c in prop::array::uniform4(-0.3f64..0.3)) {
        let h = 0.0625;
        let l = unit(h);
        let shift = [kx as f64 * h, ky as f64 * h];
        // u is defined on the whole plane, so shifting it is exact on the lattice
        let u = GridFunction::from_fn(&l, |p| bump(p, &c)).unwrap();
        let v = GridFunction::from_fn(&l, |p| bump(&[p[0] - shift[0], p[1] - shift[1]], &c)).unwrap();
        let y = [0.125, -0.0625];
        let ry = slide_to_touch(&u, a, &y).unwrap();
        let rv = slide_to_touch(&v, a, &[y[0] + shift[0], y[1] + shift[1]]).unwrap();
        // the shifted contact stays inside the touch domain for these small shifts
        let z = &ry.contact_point;
        let zs = [z[0] + shift[0], z[1] + shift[1]];
        if zs[0] * zs[0] + zs[1] * zs[1] <= 0.8 && z[0] * z[0] + z[1] * z[1] <= 0.8 {
            prop_assert!((rv.contact_point[0] - zs[0]).abs() < 1e-12);
            prop_assert!((rv.contact_point[1] - zs[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn contact_scaling(t in 0.1f64..10.0, a in 0.5f64..8.0, c in prop::array::uniform4(-0.4f64..0.4)) {
        let l = unit(0.0625);
        let u = GridFunction::from_fn(&l, |p| bump(p, &c)).unwrap();
        let y = [0.1875, 0.25];
        let r1 = slide_to_touch(&u, a, &y).unwrap();
        let r2 = slide_to_touch(&u.affine(t, 0.0), t * a, &y).unwrap();
        prop_assert_eq!(r1.contact_node, r2.contact_node);
        let (c1, c2) = (r1.paraboloid.offset, r2.paraboloid.offset);
        prop_assert!((c2 - t * c1).abs() <= 1e-12 * (1.0 + t * c1.abs()));
    }

    #[test]
    fn contact_points_bounded(a in 0.5f64..32.0, c in prop::array::uniform4(-0.5f64..0.5)) {
        let l = unit(0.0625);
        // positive u: a touching admissible paraboloid is positive at the contact
        let u = GridFunction::from_fn(&l, |p| (bump(p, &c) - 0.5).max(0.01)).unwrap();
        let set = contact_set(&u, a, &lattice_vertices(&l, 0.75)).unwrap();
        let tol = touch_tolerance(a, l.spacing(), 4.0);
        for rec in set.admissible() {
            let z = &rec.contact_point;
            prop_assert!(u.value(rec.contact_node) <= a + tol);
            prop_assert!((z[0] * z[0] + z[1] * z[1]).sqrt() <= 0.75 + l.spacing() + 1e-12);
        }
    }

    #[test]
    fn barrier_tangency(lambda in 0.5f64..6.0, sigma in 0.3f64..3.0, angle in 0.0f64..std::f64::consts::TAU) {
        let b = barrier_profile(2, lambda, sigma).unwrap();
        let on = [sigma * angle.cos(), sigma * angle.sin()];
        prop_assert!(b.gap(&on).abs() <= 1e-9 * b.phi(&on).abs().max(1.0));
        for k in 1..40 {
            let rho = sigma / 2.0 + (b.outer_radius() - sigma / 2.0) * k as f64 / 40.0;
            prop_assert!(b.gap(&[rho * angle.cos(), rho * angle.sin()]) >= -1e-8);
        }
    }

    #[test]
    fn local_margin_monotone_in_lambda(l1 in 1.0f64..10.0, dl in 0.0f64..10.0, c in prop::array::uniform4(-0.3f64..0.3)) {
        let l = unit(0.0625);
        let u = GridFunction::from_fn(&l, |p| bump(p, &c)).unwrap();
        let mut p1 = ClassParams::new(l1, 1.0, 1.0, 0.25);
        p1.domain_radius = 1.0;
        let mut samples = LocalSamples::defaults(2, &p1);
        samples.centers = Some(Region::ball0(2, 0.25));
        let r1 = check_p_local(&u, &p1, &samples).unwrap();
        let mut p2 = p1.clone();
        p2.lambda = l1 + dl;
        let r2 = check_p_local(&u, &p2, &samples).unwrap();
        // raising Lambda only lowers the test polynomial margins
        prop_assert!(r2.witness_count <= r1.witness_count);
        if r1.pass {
            prop_assert!(r2.pass);
        }
        for w in &r1.witnesses {
            let m1 = witness_margin(&u, Definition::LocalP, &p1, w).unwrap();
            prop_assert!((m1 - w.margin).abs() <= 1e-10);
        }
    }

    #[test]
    fn local_check_scale_invariant(t in 0.1f64..10.0, c in prop::array::uniform4(-0.3f64..0.3)) {
        let l = unit(0.0625);
        // a function that does get touched, so witnesses are compared too
        let u = GridFunction::from_fn(&l, |p| bump(p, &c) + 4.0 * p[0] * p[0] - p[1] * p[1]).unwrap();
        let p1 = ClassParams::new(2.0, 1.0, 2.0, 0.25);
        let mut samples = LocalSamples::defaults(2, &p1);
        samples.centers = Some(Region::ball0(2, 0.25));
        let r1 = check_p_local(&u, &p1, &samples).unwrap();
        let p2 = ClassParams::new(2.0, t, 2.0 * t, 0.25);
        let mut s2 = LocalSamples::defaults(2, &p2);
        s2.centers = samples.centers.clone();
        let r2 = check_p_local(&u.affine(t, 0.0), &p2, &s2).unwrap();
        prop_assert_eq!(r1.pass, r2.pass);
        prop_assert_eq!(r1.witness_count, r2.witness_count);
        for (w1, w2) in r1.witnesses.iter().zip(&r2.witnesses) {
            prop_assert_eq!(w1.node, w2.node);
            prop_assert_eq!(w1.direction_index, w2.direction_index);
        }
    }

    #[test]
    fn stencil_exact_on_quadratics(seed in 0u64..1000, q in prop::array::uniform6(-2.0f64..2.0)) {
        let l = unit(0.125);
        let op = DiscreteEllipticOp::random(&l, 1.0, 10.0, seed).unwrap();
        let u = GridFunction::from_fn(&l, |p| {
            q[0] + q[1] * p[0] + q[2] * p[1] + q[3] * p[0] * p[0] + q[4] * p[0] * p[1] + q[5] * p[1] * p[1]
        })
        .unwrap();
        for i in (0..l.len()).filter(|&i| l.is_interior(i)) {
            let exact = 2.0 * q[3] * op.coefficient(i, 0) + 2.0 * q[5] * op.coefficient(i, 1);
            prop_assert!((apply_discrete(&op, &u, i).unwrap() - exact).abs() <= 1e-10);
        }
    }

    #[test]
    fn weak_harnack_scaling(t in 0.1f64..10.0, k in 0.0f64..2.0, seed in 0u64..1000) {
        let l = unit(0.0625);
        let u = ScalarField::RandomUniform { lo: 0.0, hi: 1.0 }.sample(&l, seed).unwrap();
        let a = weak_harnack_check(&u, k).unwrap();
        // scaling may break the u <= 1 hypothesis, so compare the raw fractions
        let v = u.affine(t, 0.0);
        let frac = measure_fraction(&l, &Region::ball0(2, 0.5), |i, _| v.value(i) <= t * k).unwrap();
        prop_assert_eq!(a.fraction, frac);
    }

    #[test]
    fn exponent_invariant_under_affine_maps(s in 0.1f64..10.0, c in -5.0f64..5.0, e in 0.2f64..1.5) {
        let l = unit(0.5f64.powi(6));
        let u = GridFunction::from_fn(&l, |p| p[0].abs().powf(e) + 0.3 * p[1].abs().powf(e)).unwrap();
        let g1 = oscillation_decay_check(&u, &[0.0, 0.0], 4, 0.0).unwrap().exponent.unwrap();
        let g2 = oscillation_decay_check(&u.affine(s, c), &[0.0, 0.0], 4, 0.0).unwrap().exponent.unwrap();
        prop_assert!((g1 - g2).abs() <= 1e-9);
    }

    #[test]
    fn nonlocal_linear_and_kills_odd(sigma in 0.5f64..1.9, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let l = Lattice::centered(2, 0.125, 2.0).unwrap();
        let k = NonlocalKernel::fractional(sigma);
        let center = l.node_at(&[0.0, 0.0]).unwrap();
        // data vanish beyond B_2, so a constant only feels the kernel mass outside B_2
        let constant = GridFunction::constant(&l, a).unwrap();
        let expected = -a * tail_mass(sigma, 2, 2.0);
        prop_assert!((apply_nonlocal(&k, &constant, center).unwrap() - expected).abs() <= 0.02 * expected.abs());
        let odd = GridFunction::from_fn(&l, |p| {
            if p[0].abs() <= 2.0 && p[1].abs() <= 2.0 { a * p[0] + b * p[1] * p[1] * p[1] } else { 0.0 }
        })
        .unwrap();
        prop_assert!(apply_nonlocal(&k, &odd, center).unwrap().abs() <= 1e-8);
        let f = GridFunction::from_fn(&l, |p| (p[0] + 0.3 * p[1]).sin()).unwrap();
        let g = GridFunction::from_fn(&l, |p| p[0] * p[1]).unwrap();
        let sum = GridFunction::from_fn(&l, |p| a * (p[0] + 0.3 * p[1]).sin() + b * p[0] * p[1]).unwrap();
        let lhs = apply_nonlocal(&k, &sum, center + 3).unwrap();
        let rhs = a * apply_nonlocal(&k, &f, center + 3).unwrap() + b * apply_nonlocal(&k, &g, center + 3).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-8 * (1.0 + lhs.abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn discrete_comparison(seed in 0u64..10_000, shift in 0.0f64..0.5) {
        let l = unit(0.5f64.powi(5));
        let op = DiscreteEllipticOp::random(&l, 1.0, 10.0, seed).unwrap();
        let interior = ball_interior(&l, 1.0);
        let g = ScalarField::RandomUniform { lo: 0.0, hi: 1.0 }.sample(&l, seed).unwrap();
        let zero = GridFunction::constant(&l, 0.0).unwrap();
        let sink = GridFunction::constant(&l, -1.0).unwrap();
        let opts = SolverOptions::default();
        // L u = -1 <= 0 = L v inside and u >= v on the boundary
        let (v, _) = solve_dirichlet(&op, &interior, &g, &zero, &opts).unwrap();
        let (u, _) = solve_dirichlet(&op, &interior, &g.affine(1.0, shift), &sink, &opts).unwrap();
        for (a, b) in u.values().iter().zip(v.values()) {
            prop_assert!(a >= b);
        }
    }

    #[test]
    fn coverage_monotone(c in prop::array::uniform4(-0.4f64..0.4)) {
        let l = unit(0.0625);
        let u = GridFunction::from_fn(&l, |p| (bump(p, &c) - 0.6).max(0.0)).unwrap();
        let schedule: Vec<f64> = (0..8).map(|k| 2f64.powi(k)).collect();
        let r = coverage_check(&u, &schedule, 2, 1e-9, &lattice_vertices(&l, 0.75)).unwrap();
        for w in r.steps.windows(2) {
            prop_assert!(w[1].fraction >= w[0].fraction);
        }
    }
}

#[test]
fn lattice_counts_double_with_refinement() {
    for k in 1..7 {
        let l = unit(0.5f64.powi(k));
        let side = 2usize.pow(k as u32 + 1) + 1;
        assert_eq!(l.len(), side * side);
    }
}

#[test]
fn kernel_moment_converges() {
    for sigma in [0.5, 1.0, 1.5] {
        let e1 = (kernel_moment(sigma, 2, 0.5f64.powi(5), 1.0).unwrap() - sphere_area(2)).abs();
        let e2 = (kernel_moment(sigma, 2, 0.5f64.powi(6), 1.0).unwrap() - sphere_area(2)).abs();
        assert!(e2 * 1.5 <= e1 || e2 < 1e-10, "sigma {sigma}: {e1} -> {e2}");
    }
}

#[test]
fn solver_is_bit_reproducible() {
    let l = unit(0.5f64.powi(5));
    let op = DiscreteEllipticOp::random(&l, 1.0, 10.0, 9).unwrap();
    let g = ScalarField::RandomUniform { lo: 0.0, hi: 1.0 }.sample(&l, 2).unwrap();
    let f = GridFunction::constant(&l, 0.0).unwrap();
    let interior = ball_interior(&l, 1.0);
    let a = solve_dirichlet(&op, &interior, &g, &f, &SolverOptions::default()).unwrap();
    let b = solve_dirichlet(&op, &interior, &g, &f, &SolverOptions::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn refinement_consistency() {
    let mut prev: Option<(f64, f64)> = None;
    for k in [4, 5, 6] {
        let h = 0.5f64.powi(k);
        let l = unit(h);
        let u = GridFunction::from_fn(&l, |p| p[0] * p[0] + p[1] * p[1]).unwrap();
        let frac = measure_fraction(&l, &Region::ball0(2, 1.0), |i, _| u.value(i) <= 0.25).unwrap();
        let osc = oscillation(&GridFunction::from_fn(&l, |p| p[0]).unwrap(), &Region::ball0(2, 0.3)).unwrap();
        if let Some((f0, o0)) = prev {
            assert!((frac - f0).abs() <= 4.0 * 2.0 * h, "{frac} vs {f0}");
            assert!((osc - o0).abs() <= 2.0 * 2.0 * h);
        }
        prev = Some((frac, osc));
    }
}
