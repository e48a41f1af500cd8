use foldlab::canrel::fold_data;
use foldlab::changevars::normalize;
use foldlab::dyadic::{eta0, slab_cutoff, top_level, DyadicPiece};
use foldlab::jets::{eval_jet, indices, Domain, FnField, JetMode, MultiIndex, ScalarField};
use foldlab::linalg::{dot, norm};
use foldlab::models::{builtin_model, make_xray_model, BUILTIN_MODELS};
use foldlab::normlab::{fit_decay, DecayRow};
use foldlab::plates::{plate_frame, Plate};
use foldlab::poly::Poly;
use proptest::prelude::*;

fn unit_box() -> Domain {
    Domain::new([-1.0; 4], [1.0; 4])
}

fn smooth(p: &[f64; 4]) -> f64 {
    (p[0] + 0.3 * p[3]).sin() * (0.5 * p[1]).exp() + p[2] * p[2] * p[3]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn slab_pieces_sum_to_one(k in 1u32..=12, s in -3.0f64..3.0) {
        let top = top_level(k);
        let total: f64 = (0..=top).map(|l| slab_cutoff(l, top, s)).sum();
        prop_assert!((total - 1.0).abs() < 1e-14);
    }

    #[test]
    fn fit_recovers_power_laws(a in -1.0f64..1.0, b in -1.0f64..1.0, c in -3.0f64..3.0) {
        let rows: Vec<DecayRow> = (5..=8u32)
            .flat_map(|k| (0..=2u32).map(move |l| (k, l)))
            .map(|(k, l)| DecayRow { k, ell: l, p: 2.0, value: 2f64.powf(c + a * k as f64 + b * l as f64) })
            .collect();
        let fit = fit_decay(&rows).unwrap();
        prop_assert!((fit.slope_k.unwrap() - a).abs() < 1e-9);
        prop_assert!((fit.slope_ell.unwrap() - b).abs() < 1e-9);
        prop_assert!(fit.residual < 1e-9);
    }

    #[test]
    fn plate_frame_is_orthogonal(b in -0.25f64..0.25, k in -4.0f64..4.0) {
        let f = plate_frame(b, k);
        prop_assert!(dot(&f.t1, &f.t2).abs() < 1e-10);
        prop_assert!(dot(&f.t1, &f.n).abs() < 1e-10);
        prop_assert!(dot(&f.t2, &f.n).abs() < 1e-10);
        // T2 = e1 + κ0 b e2 + b e3 + O(b³)
        let r = [f.t2[0] - 1.0, f.t2[1] - k * b, f.t2[2] - b];
        prop_assert!(norm(&r) <= (1.0 + k * k) * b.abs().powi(3) + 1e-10);
    }

    #[test]
    fn plates_grow_with_a(
        b in -0.25f64..0.25,
        k in -4.0f64..4.0,
        a in 1.0f64..6.0,
        extra in 0.0f64..4.0,
        delta in 0.01f64..0.5,
        xi in prop::array::uniform3(-3.0f64..3.0),
    ) {
        let frame = plate_frame(b, k);
        let small = Plate { frame, a, delta };
        let big = Plate { frame, a: a + extra, delta };
        prop_assert!(!small.contains(&xi) || big.contains(&xi));
    }

    #[test]
    fn jet_of_sum_is_sum_of_jets(p in prop::array::uniform4(-0.5f64..0.5)) {
        let f = FnField::new(unit_box(), smooth);
        let g = FnField::new(unit_box(), |q: &[f64; 4]| q[0] * q[1] * q[3] + q[2].cos());
        let sum = FnField::new(unit_box(), |q: &[f64; 4]| f.eval(q) + g.eval(q));
        let mode = JetMode::FiniteDifference { step: Some(1e-2) };
        let (jf, jg, js) = (
            eval_jet(&f, &p, 3, mode).unwrap(),
            eval_jet(&g, &p, 3, mode).unwrap(),
            eval_jet(&sum, &p, 3, mode).unwrap(),
        );
        // differences are linear up to round-off, amplified by h⁻³ at order 3
        for a in indices(3) {
            prop_assert!((js.get(*a) - jf.get(*a) - jg.get(*a)).abs() < 1e-7);
        }
    }

    #[test]
    fn finite_differences_converge_at_second_order(p in prop::array::uniform4(-0.5f64..0.5)) {
        // ∂x1 ∂y3 of the smooth field, in closed form
        let exact = -0.3 * (p[0] + 0.3 * p[3]).sin() * (0.5 * p[1]).exp();
        let f = FnField::new(unit_box(), smooth);
        let a = MultiIndex([1, 0, 0, 1]);
        let err = |h: f64| (eval_jet(&f, &p, 2, JetMode::FiniteDifference { step: Some(h) }).unwrap().get(a) - exact).abs();
        let (e1, e2) = (err(0.08), err(0.04));
        prop_assume!(e1 > 1e-9);
        prop_assert!(e1 / e2 >= 3.5, "ratio {}", e1 / e2);
    }

    #[test]
    fn fold_data_agrees_across_jet_modes(m in 0usize..4, t in prop::array::uniform4(0.2f64..0.8)) {
        let model = builtin_model(BUILTIN_MODELS[m]).unwrap();
        let d = model.domain();
        let p: [f64; 4] = std::array::from_fn(|i| d.lo[i] + t[i] * (d.hi[i] - d.lo[i]));
        let cf = fold_data(&model, &p, JetMode::ClosedForm).unwrap();
        let fd = fold_data(&model, &p, JetMode::FiniteDifference { step: None }).unwrap();
        let scale = 1.0 + cf.kappa.abs() + cf.delta[0].abs() + cf.delta[1].abs();
        prop_assert!((cf.kappa - fd.kappa).abs() <= 1e-3 * scale);
        for i in 0..2 {
            prop_assert!((cf.delta[i] - fd.delta[i]).abs() <= 1e-3 * scale);
        }
    }

    #[test]
    fn changevars_round_trips(m in 0usize..4, t in prop::array::uniform3(-1.0f64..1.0)) {
        let model = builtin_model(BUILTIN_MODELS[m]).unwrap();
        let c = model.domain().center();
        let nz = normalize(&model, [c[0], c[1], c[2]], c[3]).unwrap();
        let w: [f64; 3] = std::array::from_fn(|i| 0.5 * nz.radii.w_radius * t[i]);
        let x = nz.x_map(&w).unwrap();
        let wb = nz.w_map(&x);
        for i in 0..3 {
            prop_assert!((wb[i] - w[i]).abs() < 1e-10);
        }
        let z = [t[0] * 0.1, t[1] * 0.1, 0.5 * nz.radii.z3_radius * t[2]];
        let zb = nz.z_map(&nz.y_map(&z));
        for i in 0..3 {
            prop_assert!((zb[i] - z[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn normalizations_hold(m in 0usize..4, t in prop::array::uniform3(-1.0f64..1.0)) {
        let model = builtin_model(BUILTIN_MODELS[m]).unwrap();
        let c = model.domain().center();
        let nz = normalize(&model, [c[0], c[1], c[2]], c[3]).unwrap();
        let w: [f64; 3] = std::array::from_fn(|i| 0.5 * nz.radii.w_radius * t[i]);
        let s = nz.frak_s(&w, 0.0).unwrap();
        prop_assert!((s[0] - w[0]).abs() < 1e-6 && (s[1] - w[1]).abs() < 1e-6);
        let j = eval_jet(&*nz.normalized.s1, &[w[0], w[1], w[2], 0.0], 1, JetMode::Auto).unwrap();
        prop_assert!((j.get(MultiIndex::y3(1)) - w[2]).abs() < 1e-6);
        let g = nz.w_gradients(&[0.0; 3], 0.0).unwrap();
        prop_assert!(g.s_wz3[1].iter().all(|v| v.abs() < 1e-6));
    }
}

#[test]
fn base_point_maps_to_itself() {
    for name in BUILTIN_MODELS {
        let model = builtin_model(name).unwrap();
        for t in [0.3, 0.5, 0.7] {
            let d = model.domain();
            let a: [f64; 3] = std::array::from_fn(|i| d.lo[i] + t * (d.hi[i] - d.lo[i]));
            let b = d.lo[3] + t * (d.hi[3] - d.lo[3]);
            let nz = normalize(&model, a, b).unwrap();
            assert_eq!(nz.x_map(&[0.0; 3]).unwrap(), a, "{name}");
        }
    }
}

#[test]
fn slab_support_measure_scales_like_two_to_minus_ell() {
    // τ-measure of the support of χ_{k,ℓ}, on a fine grid over [-2, 2]²
    let n = 800;
    let h = 4.0 / n as f64;
    for name in BUILTIN_MODELS {
        let model = builtin_model(name).unwrap();
        let c = model.domain().center();
        let mut scaled = Vec::new();
        for ell in 0..=4u32 {
            let piece = DyadicPiece::new(model.clone(), 12, Some(ell)).unwrap();
            let fr = piece.frame(&c).unwrap();
            let mut count = 0usize;
            for i in 0..n {
                for j in 0..n {
                    let tau = [-2.0 + (i as f64 + 0.5) * h, -2.0 + (j as f64 + 0.5) * h];
                    if piece.cutoff(tau, &fr) > 0.0 {
                        count += 1;
                    }
                }
            }
            scaled.push(count as f64 * h * h * 2f64.powi(ell as i32));
        }
        let (lo, hi) = scaled.iter().fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
        assert!(hi / lo <= 8.0, "{name}: {scaled:?}");
    }
}

#[test]
fn vr_derivative_of_det_pi_l_matches_xray_formula() {
    // V_R = y3 ∂x1 + ∂x3 applied to τ1 Δ1 + τ2 Δ2, by central differences
    let g = Poly::new(vec![0.0, 0.0, 0.5, 0.1]);
    for beta in [0.0, 0.3, -0.4] {
        let dom = Domain::new([-0.5, -0.5, -0.5, -1.0], [0.5, 0.5, 0.5, 1.0]);
        let model = make_xray_model(g.clone(), beta, dom).unwrap();
        let tau = [0.7, -1.3];
        let det = |p: &[f64; 4]| fold_data(&model, p, JetMode::ClosedForm).unwrap().det_pi_l(tau);
        for p in [[0.1, -0.2, 0.15, 0.3], [-0.2, 0.1, -0.1, -0.4]] {
            let h = 1e-5;
            let shift = |s: f64| [p[0] + s * p[3], p[1], p[2] + s, p[3]];
            let d = (det(&shift(h)) - det(&shift(-h))) / (2.0 * h);
            let gp = g.derivative().eval(p[3]);
            let q = 1.0 + beta * p[2];
            let expected = beta * (tau[0] / q.powi(2) + 3.0 * tau[1] * gp / q.powi(4));
            assert!((d - expected).abs() < 1e-6, "β = {beta}: {d} vs {expected}");
            if beta == 0.0 {
                assert!(d.abs() < 1e-8);
            }
        }
    }
}

#[test]
fn eta0_is_a_plateau_cutoff() {
    assert_eq!(eta0(0.0), 1.0);
    assert_eq!(eta0(0.5), 1.0);
    assert_eq!(eta0(1.0), 0.0);
    assert!(eta0(0.75) > 0.0 && eta0(0.75) < 1.0);
}
