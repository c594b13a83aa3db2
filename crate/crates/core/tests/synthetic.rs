mod common;

use alset_core::alset::run_compositional;
use alset_core::linalg::{spectral_norm, sym_eig_range, Matrix, Vector};
use alset_core::problem_model::{exact_hypergradient, upper_objective, BilevelProblem};
use alset_core::rng;
use alset_core::synthetic::*;
use common::{fixed, identity_composition, m, one_d, scalar_game, v};
use proptest::prelude::*;

fn random_x(r: &mut rng::Stream, d: usize) -> Vector {
    rng::normal_vector(r, d, 3.0)
}

fn instances() -> Vec<(String, Box<dyn BilevelProblem>)> {
    let mut out: Vec<(String, Box<dyn BilevelProblem>)> = Vec::new();
    for kappa in CANNED_KAPPAS {
        out.push((format!("quadratic {kappa}"), Box::new(make_quadratic_bilevel(&canned_quadratic(kappa, 4, 5, [0.0; 3], 1)).unwrap())));
        out.push((format!("smooth {kappa}"), Box::new(make_smooth_bilevel(&canned_smooth(kappa, 4, 5, 1)).unwrap())));
        out.push((format!("minmax {kappa}"), Box::new(make_minmax_quadratic(&canned_minmax(kappa, 4, 5, 0.0, 1)).unwrap())));
    }
    out.push(("compositional".into(), Box::new(make_compositional(&canned_compositional(4, 5, [0.0; 3], 1)).unwrap())));
    out
}

#[test]
fn one_d_instance() {
    let p = make_quadratic_bilevel(&one_d()).unwrap();
    let t = p.ground_truth().unwrap();
    assert_eq!(t.y_star(&v(&[3.0])).unwrap()[0], 3.0);
    assert_eq!(t.grad_objective(&v(&[2.0])).unwrap()[0], 2.0);
    assert_eq!(upper_objective(&p, &v(&[2.0])).unwrap(), 2.0);
    let c = p.constants();
    assert_eq!((c.mu_g, c.l_g1, c.l_g2, c.kappa), (1.0, 1.0, 0.0, 1.0));
}

#[test]
fn lower_stationarity_at_solution() {
    let mut r = rng::derive_stream(0, 0, "test/stationarity");
    for (name, p) in instances() {
        let t = p.ground_truth().unwrap();
        for _ in 0..1000 {
            let x = random_x(&mut r, p.dim_upper());
            let ys = t.y_star(&x).unwrap();
            let g = p.lower_grad_y(&x, &ys);
            assert!(g.norm() <= 1e-10 * (1.0 + x.norm()), "{name}: |grad_y g| = {:e}", g.norm());
        }
    }
}

#[test]
fn solution_map_ratio_is_bounded_and_tight() {
    let p = make_quadratic_bilevel(&canned_quadratic(4.0, 5, 5, [0.0; 3], 7)).unwrap();
    let t = p.ground_truth().unwrap();
    let jac = p.lower_inverse() * &p.spec().b;
    let bound = spectral_norm(&jac);
    assert!(bound <= p.constants().L_y);
    let mut r = rng::derive_stream(0, 0, "test/y_star_ratio");
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let (x1, x2) = (random_x(&mut r, 5), random_x(&mut r, 5));
        let ratio = (t.y_star(&x1).unwrap() - t.y_star(&x2).unwrap()).norm() / (&x1 - &x2).norm();
        worst = worst.max(ratio);
    }
    assert!(worst <= bound * (1.0 + 1e-12));
    let svd = jac.svd(false, true);
    let (i, _) = svd.singular_values.argmax();
    let dir: Vector = svd.v_t.unwrap().row(i).transpose();
    let x1 = v(&[0.3, -0.2, 0.1, 0.0, 1.0]);
    let x2 = &x1 + &dir * 2.0;
    let ratio = (t.y_star(&x1).unwrap() - t.y_star(&x2).unwrap()).norm() / 2.0;
    assert!((ratio - bound).abs() <= 1e-12 * bound);
}

#[test]
fn quadratic_hypergradient_matches_differences() {
    let p = make_quadratic_bilevel(&random_quadratic(5, 5, 8.0, 21)).unwrap();
    let x = v(&[0.5, -1.0, 0.25, 2.0, -0.75]);
    let g = exact_hypergradient(&p, &x).unwrap();
    let h = 1e-5;
    let fd = Vector::from_fn(5, |i, _| {
        let mut e = Vector::zeros(5);
        e[i] = h;
        (upper_objective(&p, &(&x + &e)).unwrap() - upper_objective(&p, &(&x - &e)).unwrap()) / (2.0 * h)
    });
    assert!((&g - &fd).norm() <= 1e-6 * g.norm());
}

#[test]
fn minmax_scalar_game() {
    let p = make_minmax_quadratic(&scalar_game()).unwrap();
    let t = p.ground_truth().unwrap();
    assert_eq!(t.y_star(&v(&[2.0])).unwrap()[0], 2.0);
    assert_eq!(t.grad_objective(&v(&[2.0])).unwrap()[0], 2.0);
    assert_eq!(p.upper_value(&v(&[2.0]), &v(&[2.0])), 2.0);
}

#[test]
fn minmax_gradient_is_partial_at_solution() {
    let p = make_minmax_quadratic(&canned_minmax(4.0, 5, 5, 0.0, 9)).unwrap();
    let t = p.ground_truth().unwrap();
    let mut r = rng::derive_stream(0, 0, "test/minmax_grad");
    for _ in 0..100 {
        let x = random_x(&mut r, 5);
        let ys = t.y_star(&x).unwrap();
        let d = t.grad_objective(&x).unwrap() - p.upper_grad_x(&x, &ys);
        assert!(d.norm() <= 1e-10 * (1.0 + x.norm()));
    }
    let (lo, hi) = sym_eig_range(&p.spec().r_mat);
    assert_eq!(p.constants().kappa, hi / lo);
}

#[test]
fn compositional_constants() {
    let p = make_compositional(&canned_compositional(4, 6, [0.1; 3], 5)).unwrap();
    let c = p.constants();
    assert_eq!((c.mu_g, c.l_g1, c.kappa), (1.0, 1.0, 1.0));
    let s = p.spec();
    let hess = s.w_mat.transpose() * &s.m_mat * &s.w_mat;
    assert!(spectral_norm(&hess) <= c.L_F);

    let id = make_compositional(&identity_composition()).unwrap();
    let t = id.ground_truth().unwrap();
    assert_eq!(upper_objective(&id, &v(&[2.0])).unwrap(), 2.0);
    assert_eq!(t.grad_objective(&v(&[2.0])).unwrap()[0], 2.0);
}

#[test]
fn compositional_gradient_closed_form() {
    let p = make_compositional(&canned_compositional(3, 5, [0.0; 3], 2)).unwrap();
    let s = p.spec();
    let x = v(&[1.0, -2.0, 0.5]);
    let expected = s.w_mat.transpose() * (&s.m_mat * p.inner(&x) + &s.m);
    assert!((p.ground_truth().unwrap().grad_objective(&x).unwrap() - &expected).norm() <= 1e-12 * expected.norm());
    assert!((exact_hypergradient(&p, &x).unwrap() - &expected).norm() <= 1e-10 * expected.norm());
}

#[test]
fn one_full_step_leaves_only_inner_noise() {
    let mut spec = identity_composition();
    spec.noise_sigma_h = 0.3;
    let p = make_compositional(&spec).unwrap();
    let n = 20_000;
    let sq: Vec<f64> = (0..n)
        .map(|s| {
            let mut cfg = fixed(&[1.0], &[0.0], 0.5, 1.0);
            cfg.seed = s;
            let t = run_compositional(&p, &cfg).unwrap();
            (t.records[1].y[0] - 1.0).powi(2)
        })
        .collect();
    let mean = sq.iter().sum::<f64>() / n as f64;
    // variance of a χ²₁ draw scaled by σ² is 2σ⁴
    let se = (2.0f64).sqrt() * 0.09 / (n as f64).sqrt();
    assert!((mean - 0.09).abs() <= 3.0 * se, "{mean}");
}

fn empirical_sq(draw: impl Fn(&mut rng::Stream) -> Vector, label: &str) -> f64 {
    let mut r = rng::derive_stream(0, 0, label);
    let n = 100_000;
    (0..n).map(|_| draw(&mut r).norm_squared()).sum::<f64>() / n as f64
}

#[test]
fn noise_variances_match_declared_scales() {
    let p = make_quadratic_bilevel(&canned_quadratic(4.0, 3, 5, [0.2, 0.3, 0.25], 4)).unwrap();
    let (x, y) = (v(&[1.0, 0.5, -1.0]), v(&[0.2, 0.0, -0.3, 1.0, 2.0]));
    let fx = p.upper_grad_x(&x, &y);
    let fy = p.upper_grad_y(&x, &y);
    let gy = p.lower_grad_y(&x, &y);
    let f = empirical_sq(
        |r| {
            let (a, b) = p.sample_upper_grad(&x, &y, r);
            Vector::from_iterator(8, (a - &fx).iter().chain((b - &fy).iter()).copied())
        },
        "test/noise_f",
    );
    assert!((f / 0.04 - 1.0).abs() < 0.05, "f {f}");
    let g = empirical_sq(|r| p.sample_lower_grad(&x, &y, r) - &gy, "test/noise_g");
    assert!((g / 0.09 - 1.0).abs() < 0.05, "g {g}");

    // Hessian draws are rejection-sampled, so the declared scale is an upper bound
    let u = v(&[0.6, 0.0, 0.8, 0.0, 0.0]);
    let hv = p.lower_hess_yy_vec(&x, &y, &u);
    let h = empirical_sq(|r| p.sample_lower_hess_yy_vec(&x, &y, &u, r) - &hv, "test/noise_h");
    assert!(h > 0.0 && h <= p.constants().sigma_g2.powi(2), "h {h}");
    let xv = p.lower_hess_xy_vec(&x, &y, &u);
    let hx = empirical_sq(|r| p.sample_lower_hess_xy_vec(&x, &y, &u, r) - &xv, "test/noise_hx");
    assert!(hx > 0.0 && hx <= p.constants().sigma_g2.powi(2), "hx {hx}");

    let mm = make_minmax_quadratic(&canned_minmax(2.0, 3, 4, 0.5, 4)).unwrap();
    let (x, y) = (v(&[1.0, 0.0, 0.0]), v(&[0.0, 1.0, 0.0, 0.0]));
    let (mx, my) = (mm.upper_grad_x(&x, &y), mm.upper_grad_y(&x, &y));
    let s = empirical_sq(
        |r| {
            let (a, b) = mm.sample_upper_grad(&x, &y, r);
            Vector::from_iterator(7, (a - &mx).iter().chain((b - &my).iter()).copied())
        },
        "test/noise_mm",
    );
    assert!((s / 0.25 - 1.0).abs() < 0.05, "minmax {s}");
}

#[test]
fn hessian_draws_respect_spectral_bound() {
    let p = make_quadratic_bilevel(&canned_quadratic(2.0, 2, 3, [0.0, 0.0, 0.45], 8)).unwrap();
    let (x, y) = (Vector::zeros(2), Vector::zeros(3));
    let mut r = rng::derive_stream(0, 0, "test/hess_bound");
    let l_g1 = p.constants().l_g1;
    for _ in 0..2000 {
        // replaying one stream state per column recovers a single perturbed matrix
        let cols: Vec<Vector> = (0..3)
            .map(|j| {
                let mut e = Vector::zeros(3);
                e[j] = 1.0;
                p.sample_lower_hess_yy_vec(&x, &y, &e, &mut r.clone())
            })
            .collect();
        let draw = Matrix::from_columns(&cols);
        let (lo, hi) = sym_eig_range(&((&draw + draw.transpose()) * 0.5));
        assert!(lo >= p.constants().mu_g / 2.0 && hi <= l_g1, "{lo} {hi}");
        p.sample_lower_hess_yy_vec(&x, &y, &Vector::zeros(3), &mut r);
    }
}

#[test]
fn domain_errors() {
    let mut bad = one_d();
    bad.a = m(1, 1, &[-1.0]);
    assert!(make_quadratic_bilevel(&bad).is_err());
    let mut bad = one_d();
    bad.noise_sigma_hess = 0.5;
    assert!(make_quadratic_bilevel(&bad).is_err());
    bad.noise_sigma_hess = 0.49;
    assert!(make_quadratic_bilevel(&bad).is_ok());
    let mut bad = one_d();
    bad.b = m(2, 1, &[1.0, 1.0]);
    assert!(make_quadratic_bilevel(&bad).is_err());
    let mut bad = one_d();
    bad.noise_sigma_grad_f = f64::NAN;
    assert!(make_quadratic_bilevel(&bad).is_err());

    let mut game = scalar_game();
    game.r_mat = m(1, 1, &[0.0]);
    assert!(make_minmax_quadratic(&game).is_err());

    let mut comp = identity_composition();
    comp.m_mat = m(1, 1, &[-1.0]);
    assert!(make_compositional(&comp).is_err());
    let mut comp = identity_composition();
    comp.w = v(&[0.0, 1.0]);
    assert!(make_compositional(&comp).is_err());
}

#[test]
fn specs_round_trip_through_json() {
    let q = canned_quadratic(2.0, 3, 4, [0.1, 0.2, 0.3], 6);
    assert_eq!(serde_json::from_str::<QuadraticBilevelSpec>(&serde_json::to_string(&q).unwrap()).unwrap(), q);
    let s = canned_smooth(2.0, 3, 4, 6);
    assert_eq!(serde_json::from_str::<SmoothBilevelSpec>(&serde_json::to_string(&s).unwrap()).unwrap(), s);
    let g = canned_minmax(2.0, 3, 4, 0.1, 6);
    assert_eq!(serde_json::from_str::<MinMaxSpec>(&serde_json::to_string(&g).unwrap()).unwrap(), g);
    let c = canned_compositional(3, 4, [0.1; 3], 6);
    assert_eq!(serde_json::from_str::<CompositionalSpec>(&serde_json::to_string(&c).unwrap()).unwrap(), c);
    let text = serde_json::to_string(&one_d()).unwrap();
    assert!(text.contains("\"A\":[[1.0]]"), "{text}");
}

#[test]
fn generators_are_pure() {
    assert_eq!(canned_quadratic(4.0, 3, 3, [0.0; 3], 2), canned_quadratic(4.0, 3, 3, [0.0; 3], 2));
    assert_ne!(canned_quadratic(4.0, 3, 3, [0.0; 3], 2), canned_quadratic(4.0, 3, 3, [0.0; 3], 3));
    assert_eq!(canned_minmax(2.0, 3, 3, 0.1, 2), canned_minmax(2.0, 3, 3, 0.1, 2));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn canned_kappa_and_certificates(kappa in 1.0f64..16.0, seed in 0u64..10_000) {
        let p = make_quadratic_bilevel(&canned_quadratic(kappa, 3, 4, [0.0; 3], seed)).unwrap();
        let c = p.constants();
        prop_assert!((c.kappa - kappa).abs() <= 1e-9 * kappa);
        prop_assert_eq!(c.L_yx, 0.0);
        let jac = p.lower_inverse() * &p.spec().b;
        prop_assert!(spectral_norm(&jac) <= c.L_y * (1.0 + 1e-12));
        prop_assert!(spectral_norm(p.objective_hessian()) <= c.L_F * (1.0 + 1e-12));
    }

    #[test]
    fn smooth_solution_is_stationary(seed in 0u64..1000, x in proptest::collection::vec(-10.0f64..10.0, 3)) {
        let p = make_smooth_bilevel(&canned_smooth(4.0, 3, 3, seed)).unwrap();
        let x = Vector::from_vec(x);
        let ys = p.ground_truth().unwrap().y_star(&x).unwrap();
        prop_assert!(p.lower_grad_y(&x, &ys).norm() <= 1e-10 * (1.0 + x.norm()));
    }
}
