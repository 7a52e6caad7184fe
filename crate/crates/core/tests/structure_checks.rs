use pregeneric::builtins::{self, Oscillator};
use pregeneric::extension::{bar_extend, hat_extend, interpolate_extend};
use pregeneric::structure::*;
use pregeneric::Verdict;

fn v(x: &[f64]) -> Vector {
    Vector::from_column_slice(x)
}

fn fails(r: &pregeneric::CheckReport) -> bool {
    r.verdict == Verdict::Fail
}

#[test]
fn oscillator_audit_passes_everything() {
    let b = builtins::damped_oscillator(Oscillator::default());
    for r in audit(&b, 256).unwrap() {
        assert!(
            r.passed(),
            "{} residual {} tol {}",
            r.check_name,
            r.residual,
            r.tolerance
        );
    }
}

#[test]
fn running_example_orthogonality_and_friction_degeneracy() {
    let b = builtins::damped_oscillator(Oscillator {
        m: 1.3,
        gamma: 0.7,
        k: 2.0,
    });
    let states = b.states(100);
    let w = |z: &Vector| b.drift(z).unwrap();
    assert!(check_orthogonality(&w, &b.s, &states).unwrap().residual == 0.0);
    let r = check_degeneracy_psi(
        b.psi_star.as_ref().unwrap(),
        b.e.as_ref().unwrap(),
        &b.state_covector_samples(100),
    )
    .unwrap();
    assert!(r.residual <= 1e-12, "{}", r.residual);
}

#[test]
fn gradient_direction_fails_orthogonality_by_norm_squared() {
    let s = Functional::quadratic(0.0, Vector::zeros(2), Matrix::identity(2, 2));
    let z = v(&[0.6, -0.8]);
    let r = check_orthogonality(&|z: &Vector| z.clone(), &s, &[z]).unwrap();
    assert!((r.residual - 1.0).abs() < 1e-15);
    assert!(fails(&r));
}

#[test]
fn symplectic_l_annihilates_entropy_of_heat_bath() {
    let b = builtins::damped_oscillator(Oscillator::default());
    let r = check_degeneracy_l(b.l.as_ref().unwrap(), &b.s, &b.states(50)).unwrap();
    assert_eq!(r.residual, 0.0);
}

#[test]
fn constant_l_quadratic_tests_satisfy_jacobi() {
    let l = PoissonOperator::constant(Matrix::from_row_slice(
        3,
        3,
        &[0.0, 1.0, -2.0, -1.0, 0.0, 0.5, 2.0, -0.5, 0.0],
    ));
    let f: Vec<Functional> = (0..3)
        .map(|i| {
            let a = Matrix::from_fn(3, 3, |r, c| ((r + 2 * c + i) % 5) as f64 - 2.0);
            Functional::quadratic(0.1 * i as f64, v(&[1.0, -(i as f64), 0.5]), a)
        })
        .collect();
    let states = builtins::rotation().states(1);
    let states: Vec<Vector> = states.iter().map(|z| v(&[z[0], z[1], 0.3])).collect();
    let r = check_jacobi(&l, [&f[0], &f[1], &f[2]], &states, 1e-12).unwrap();
    assert!(r.residual <= 1e-12, "{}", r.residual);
}

#[test]
fn fluctuation_symmetry_of_quadratic_lagrangian() {
    // 𝓛(v) = ½(v + ½dS)² with M = 1, dS = 2, W = 0
    let s = Functional::new(|z| 2.0 * z[0], |_| v(&[2.0]));
    let lag = |_: &Vector, x: &Vector| 0.5 * (x[0] + 1.0).powi(2);
    let z = v(&[0.0]);
    assert_eq!(lag(&z, &v(&[1.0])) - lag(&z, &v(&[-1.0])), 2.0);
    let samples: Vec<(Vector, Vector)> = [-2.0, -1.0, 0.0, 0.5, 1.0]
        .iter()
        .map(|&x| (z.clone(), v(&[x])))
        .collect();
    let r = check_fluctuation_symmetry(&lag, &s, None, &samples).unwrap();
    assert_eq!(r.residual, 0.0);
}

#[test]
fn infinite_lagrangian_everywhere_is_not_applicable() {
    let s = Functional::new(|z| z[0], |_| v(&[1.0]));
    let lag = |_: &Vector, _: &Vector| f64::INFINITY;
    let r = check_fluctuation_symmetry(&lag, &s, None, &[(v(&[0.0]), v(&[1.0]))]).unwrap();
    assert_eq!(r.verdict, Verdict::NotApplicable);
}

#[test]
fn reversible_hamiltonian_zero_cost_velocity_identity() {
    let b = builtins::quadratic_gradient_flow();
    let h = b.hamiltonian.as_ref().unwrap();
    for z in b.states(50) {
        let v0 = zero_cost_velocity(h, &z);
        let alt = -h.xi_gradient(&z, &b.s.gradient(&z));
        assert!((v0 - alt).amax() < 1e-12);
    }
}

#[test]
fn reversible_hamiltonian_minimizer_is_half_ds() {
    let b = builtins::quadratic_gradient_flow();
    let h = b.hamiltonian.as_ref().unwrap();
    let z = v(&[0.7]);
    let grid: Vec<f64> = (0..=4000).map(|i| -3.0 + 6.0 * i as f64 / 4000.0).collect();
    let best = grid
        .iter()
        .copied()
        .min_by(|a, c| h.eval(&z, &v(&[*a])).partial_cmp(&h.eval(&z, &v(&[*c]))).unwrap())
        .unwrap();
    assert!((best - 0.5 * b.s.gradient(&z)[0]).abs() <= 6.0 / 4000.0);
}

#[test]
fn generic_residual_examples() {
    let b = builtins::quadratic_gradient_flow();
    let z = v(&[0.8]);
    let ds = b.s.gradient(&z);
    let flow = -0.5 * &ds;
    assert!(generic_residual(&b, &z, &flow).unwrap().abs() <= 1e-10);
    // time-reversed velocity: residual equals -<v, dS>
    let back = 0.5 * &ds;
    let r = generic_residual(&b, &z, &back).unwrap();
    assert!((r - 0.5 * ds.dot(&ds)).abs() < 1e-12);
    // dS = 0, v = W = 0
    let r0 = generic_residual(&b, &v(&[0.0]), &v(&[0.0])).unwrap();
    assert_eq!(r0, 0.0);
}

#[test]
fn grid_conjugated_psi_gives_same_residual_within_legendre_tolerance() {
    let mut b = builtins::quadratic_gradient_flow();
    let exact = b.clone();
    b.psi = None;
    for z in b.states(10) {
        let f = b.flow(&z).unwrap();
        let r = generic_residual(&b, &z, &f).unwrap();
        let r0 = generic_residual(&exact, &z, &f).unwrap();
        assert!((r - r0).abs() <= b.tol_residual(), "{r} vs {r0}");
    }
}

#[test]
fn rotation_hat_extension_checks() {
    let h = hat_extend(&builtins::rotation()).unwrap();
    let states = h.states(256);
    let trip = h.state_covector_pairs(256);
    let l = h.l.as_ref().unwrap();
    assert!(check_antisymmetry(l, &trip).unwrap().residual <= 1e-12);
    let t = cubic_test_triple(3);
    assert!(check_jacobi(l, [&t[0], &t[1], &t[2]], &states, 1e-10).unwrap().passed());
    assert!(check_degeneracy_l(l, &h.s, &states).unwrap().residual <= 1e-12);
    let r = check_degeneracy_psi(
        h.psi_star.as_ref().unwrap(),
        h.e.as_ref().unwrap(),
        &h.state_covector_samples(256),
    )
    .unwrap();
    assert!(r.residual <= 1e-12);
}

#[test]
fn hat_extension_with_zero_drift_has_zero_operator() {
    let h = hat_extend(&builtins::quadratic_gradient_flow()).unwrap();
    let z = v(&[0.4, 1.0]);
    assert_eq!(h.l.as_ref().unwrap().apply(&z, &v(&[1.0, 2.0])), v(&[0.0, 0.0]));
}

#[test]
fn hat_flow_of_quadratic_example() {
    let base = builtins::rotation();
    let h = hat_extend(&base).unwrap();
    let x = v(&[0.3, -0.4, 2.0]);
    let f = h.flow(&x).unwrap();
    // ż = W − ½ M dS with M = I, ȧ = 0
    assert!((f[0] - (-0.4 - 0.15)).abs() < 1e-15);
    assert!((f[1] - (-0.3 + 0.2)).abs() < 1e-15);
    assert_eq!(f[2], 0.0);
}

#[test]
fn bar_of_oscillator_base_reproduces_running_example() {
    let o = Oscillator::default();
    let bar = bar_extend(&builtins::damped_oscillator_base(o)).unwrap();
    let direct = builtins::damped_oscillator(o);
    for x in bar.states(100) {
        assert!((bar.flow(&x).unwrap() - direct.flow(&x).unwrap()).amax() < 1e-14);
        assert!((bar.s.value(&x) - direct.s.value(&x)).abs() < 1e-14);
        assert!((bar.e.as_ref().unwrap().value(&x) - direct.e.as_ref().unwrap().value(&x)).abs() < 1e-14);
    }
    for r in audit(&bar, 256).unwrap() {
        assert!(r.passed(), "{} {}", r.check_name, r.residual);
    }
}

#[test]
fn bar_with_constant_energy_leaves_psi_star_unchanged() {
    let mut base = builtins::quadratic_gradient_flow();
    base.kind = Kind::PreGeneric;
    base.e = Some(Functional::quadratic(0.0, Vector::zeros(1), Matrix::zeros(1, 1)));
    base.l = Some(PoissonOperator::constant(Matrix::zeros(1, 1)));
    // L = 0 makes hypothesis (b) hold trivially
    let bar = bar_extend(&base).unwrap();
    let ps = base.psi_star.as_ref().unwrap();
    for (x, k) in bar.state_covector_samples(30) {
        let (z, xi) = (v(&[x[0]]), v(&[k[0]]));
        assert_eq!(bar.psi_star.as_ref().unwrap().eval(&x, &k), ps.eval(&z, &xi));
        assert_eq!(bar.flow(&x).unwrap()[1], 0.0);
    }
}

#[test]
fn alpha_endpoints_match_bar_and_tilde_operators() {
    let base = builtins::rotation();
    let bar = bar_extend(&base).unwrap();
    let one = interpolate_extend(&base, 1.0).unwrap();
    let zero = interpolate_extend(&base, 0.0).unwrap();
    for (x, k) in bar.state_covector_samples(100) {
        let l1 = one.l.as_ref().unwrap().apply(&x, &k);
        assert!((l1 - bar.l.as_ref().unwrap().apply(&x, &k)).amax() <= 1e-12);
        assert!((one.s.value(&x) - bar.s.value(&x)).abs() <= 1e-12);
        let z = v(&[x[0], x[1]]);
        let w = v(&[z[1], -z[0]]);
        let tilde = v(&[k[2] * w[0], k[2] * w[1], -(w[0] * k[0] + w[1] * k[1])]);
        assert!((zero.l.as_ref().unwrap().apply(&x, &k) - tilde).amax() <= 1e-12);
        assert!((zero.s.value(&x) - base.s.value(&z)).abs() <= 1e-12);
    }
}

#[test]
fn alpha_half_rotation_passes_structure_checks() {
    let b = interpolate_extend(&builtins::rotation(), 0.5).unwrap();
    let reports = audit(&b, 256).unwrap();
    for r in &reports {
        assert!(r.passed(), "{} {}", r.check_name, r.residual);
    }
    let j = reports.iter().find(|r| r.check_name == "jacobi").unwrap();
    assert!(j.note.as_deref().unwrap_or("").contains("no proof"));
}

#[test]
fn missing_w_jacobian_makes_jacobi_not_applicable() {
    let mut base = builtins::rotation();
    base.w = Some(VectorField::new(|z| v(&[z[1], -z[0]])));
    let h = hat_extend(&base).unwrap();
    let t = cubic_test_triple(3);
    let r = check_jacobi(h.l.as_ref().unwrap(), [&t[0], &t[1], &t[2]], &h.states(4), 1e-10).unwrap();
    assert_eq!(r.verdict, Verdict::NotApplicable);
}
