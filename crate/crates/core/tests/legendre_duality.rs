use pregeneric::legendre::*;
use pregeneric::Verdict;
use proptest::prelude::*;

fn line(r: f64, n: usize) -> Grid {
    Grid::new(vec![Axis::symmetric(r, n).unwrap()]).unwrap()
}

fn sample(g: Grid, f: impl Fn(f64) -> f64) -> SampledFunction {
    SampledFunction::from_fn(g, Convexity::ClaimedConvex, |x| f(x[0])).unwrap()
}

fn cosh_conjugate(v: f64) -> f64 {
    v * v.asinh() - (1.0 + v * v).sqrt() + 1.0
}

/// Dense direct sup, independent of the hull sweep.
fn brute_sup(xs: &[f64], ys: &[f64], s: f64) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(x, y)| s * x - y)
        .fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn quadratic_is_self_dual() {
    let f = sample(line(5.0, 1001), |x| 0.5 * x * x);
    let g = conjugate(&f, &line(3.0, 601)).unwrap();
    let err = g.grid.axes[0]
        .nodes()
        .iter()
        .zip(&g.values)
        .map(|(v, gv)| (gv - 0.5 * v * v).abs())
        .fold(0.0, f64::max);
    assert!(err <= 5e-3, "{err}");
    assert_eq!(g.convexity, Convexity::ClaimedConvex);
}

#[test]
fn cosh_conjugate_matches_closed_form_and_dense_oracle() {
    let f = sample(line(6.0, 1001), |x| x.cosh() - 1.0);
    let g = conjugate(&f, &line(5.0, 501)).unwrap();
    let dense: Vec<f64> = (0..=120_000).map(|i| -6.0 + 12.0 * i as f64 / 120_000.0).collect();
    let dense_y: Vec<f64> = dense.iter().map(|x| x.cosh() - 1.0).collect();
    for (v, gv) in g.grid.axes[0].nodes().iter().zip(&g.values) {
        assert!((gv - cosh_conjugate(*v)).abs() <= 1e-2, "{v}");
        assert!((brute_sup(&dense, &dense_y, *v) - cosh_conjugate(*v)).abs() <= 1e-4);
    }
}

#[test]
fn norm_conjugates_to_unit_ball_indicator() {
    let f = sample(line(4.0, 801), f64::abs);
    let h = f.grid.max_spacing();
    let g = conjugate(&f, &line(2.0, 401)).unwrap();
    for (v, gv) in g.grid.axes[0].nodes().iter().zip(&g.values) {
        if v.abs() <= 1.0 {
            assert!(gv.abs() < 1e-12, "{v} {gv}");
        } else if v.abs() > 1.0 + h {
            assert_eq!(*gv, f64::INFINITY, "{v}");
        }
    }
}

#[test]
fn conjugate_errors() {
    let g = line(1.0, 11);
    let all_inf = SampledFunction::new(g.clone(), vec![f64::INFINITY; 11], Convexity::Unknown).unwrap();
    assert!(matches!(
        conjugate(&all_inf, &g),
        Err(pregeneric::Error::DegenerateFunction)
    ));
    assert!(Axis::new(0.0, 1.0, 2).is_err());
    assert!(SampledFunction::new(g, vec![f64::NAN; 11], Convexity::Unknown).is_err());
}

#[test]
fn biconjugation_of_quadratic_and_cosh() {
    let q = biconjugate_check(&sample(line(5.0, 1001), |x| 0.5 * x * x), Some(1e-3));
    assert!(q.passed(), "{}", q.residual);
    let c = biconjugate_check(&sample(line(6.0, 1001), |x| x.cosh() - 1.0), None);
    assert!(c.passed() && c.residual <= 1e-2, "{}", c.residual);
}

#[test]
fn cosh_biconjugate_agrees_with_refined_double_conjugation() {
    let coarse = sample(line(3.0, 301), |x| x.cosh() - 1.0);
    let fine = sample(line(3.0, 1201), |x| x.cosh() - 1.0);
    let ff = |f: &SampledFunction| {
        let fs = conjugate(f, &slope_grid(f).unwrap()).unwrap();
        conjugate(&fs, &f.grid).unwrap()
    };
    let (c, r) = (ff(&coarse), ff(&fine));
    for i in 0..coarse.grid.len() {
        if coarse.grid.in_interior_two_thirds(i) {
            let x = coarse.grid.node(i)[0];
            let j = ((x + 3.0) / fine.grid.max_spacing()).round() as usize;
            assert!((c.values[i] - r.values[j]).abs() <= 1e-2);
        }
    }
}

#[test]
fn concave_kink_is_not_applicable() {
    let f = SampledFunction::from_fn(line(1.0, 101), Convexity::ClaimedConvex, |x| -x[0].abs()).unwrap();
    let r = biconjugate_check(&f, None);
    assert_eq!(r.verdict, Verdict::NotApplicable);
    assert!(r.worst_case_location.is_some());
}

#[test]
fn young_gap_examples() {
    let f = sample(line(3.0, 301), |x| 0.5 * x * x);
    let g = sample(line(3.0, 301), |x| 0.5 * x * x);
    assert!(young_gap(&f, &g).unwrap() >= -1e-12);
    let wrong = sample(line(3.0, 301), |x| 0.25 * x * x);
    let gap = young_gap(&f, &wrong).unwrap();
    assert!(gap < -0.1, "{gap}");
    assert!(!young_check(&f, &wrong, 1e-3).unwrap().passed());
    let plane = SampledFunction::from_fn(
        Grid::new(vec![Axis::symmetric(1.0, 5).unwrap(); 2]).unwrap(),
        Convexity::ClaimedConvex,
        |x| x[0] + x[1],
    )
    .unwrap();
    assert!(young_gap(&f, &plane).is_err());
}

#[test]
fn json_round_trip_preserves_infinity() {
    let mut f = sample(line(1.0, 5), |x| x * x);
    f.values[0] = f64::INFINITY;
    let s = f.to_json().unwrap();
    assert!(s.contains("\"inf\""));
    let back = SampledFunction::from_json(&s).unwrap();
    assert_eq!(back, f);
}

#[test]
fn separable_two_dimensional_conjugate_matches_brute_force() {
    let g = Grid::new(vec![
        Axis::symmetric(2.0, 41).unwrap(),
        Axis::symmetric(2.0, 21).unwrap(),
    ])
    .unwrap();
    let f = SampledFunction::from_fn(g.clone(), Convexity::ClaimedConvex, |x| {
        0.5 * x[0] * x[0] + x[1].cosh() - 1.0
    })
    .unwrap();
    let dual = Grid::new(vec![
        Axis::symmetric(1.5, 13).unwrap(),
        Axis::symmetric(1.0, 9).unwrap(),
    ])
    .unwrap();
    let brute = conjugate(&f, &dual).unwrap();
    let tensor = conjugate(&f.clone().declare_separable(), &dual).unwrap();
    for (a, b) in brute.values.iter().zip(&tensor.values) {
        assert!((a - b).abs() <= 1e-12);
    }
}

fn coeffs() -> impl Strategy<Value = (f64, f64, f64)> {
    (0.1f64..3.0, -1.0f64..1.0, 0.0f64..1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conjugation_reverses_order((a, b, c) in coeffs(), bump in 0.0f64..2.0) {
        let grid = line(2.0, 81);
        let f = sample(grid.clone(), |x| a * x * x + b * x + c);
        let g = sample(grid, |x| a * x * x + b * x + c + bump * x.cos().abs());
        let dual = line(3.0, 61);
        let (fs, gs) = (conjugate(&f, &dual).unwrap(), conjugate(&g, &dual).unwrap());
        for (x, y) in fs.values.iter().zip(&gs.values) {
            prop_assert!(y <= x);
        }
    }

    #[test]
    fn symmetric_functions_have_symmetric_conjugates(a in 0.1f64..3.0, k in 0.0f64..2.0, n in 10usize..60) {
        let f = sample(line(2.0, 2 * n + 1), |x| a * x * x + k * x.abs());
        let g = conjugate(&f, &line(3.0, 2 * n + 1)).unwrap();
        let m = g.values.len();
        for i in 0..m {
            prop_assert_eq!(g.values[i], g.values[m - 1 - i]);
        }
    }

    #[test]
    fn normalized_potentials_have_normalized_conjugates(a in 0.1f64..3.0, k in 0.0f64..2.0) {
        let f = sample(line(2.0, 101), |x| a * x * x + k * x.abs());
        let g = conjugate(&f, &line(1.0, 101)).unwrap();
        prop_assert_eq!(g.values[50], 0.0);
        prop_assert!(g.values.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn biconjugate_recovers_convex_functions((a, b, c) in coeffs()) {
        let f = sample(line(3.0, 601), |x| a * x * x + b * x + c);
        let r = biconjugate_check(&f, None);
        prop_assert!(r.passed(), "{} > {}", r.residual, r.tolerance);
    }

    #[test]
    fn young_inequality_holds_for_computed_conjugates((a, b, c) in coeffs()) {
        let f = sample(line(2.0, 81), |x| a * x * x + b * x + c);
        let fs = conjugate(&f, &line(2.0, 81)).unwrap();
        prop_assert!(young_gap(&f, &fs).unwrap() >= -1e-12);
    }
}
