use pregeneric::builtins::{self, Oscillator};
use pregeneric::extension::{bar_extend, hat_extend, interpolate_extend};
use pregeneric::structure::*;
use proptest::prelude::*;

fn v(x: &[f64]) -> Vector {
    Vector::from_column_slice(x)
}

fn cosh_psi() -> Hamiltonian {
    Hamiltonian::new(|_, x| x.iter().map(|t| t.cosh() - 1.0).sum(), |_, x| x.map(f64::sinh))
}

#[test]
fn construction_examples() {
    // 𝓗₂ = ½ξ² − ξ with dS = 2 gives Ψ* = ½ξ²
    let s = Functional::new(|z| 2.0 * z[0], |_| v(&[2.0]));
    let h2 = Hamiltonian::from_value(|_, x| 0.5 * x[0] * x[0] - x[0]);
    let ps = psi_star_from_hamiltonian(&h2, &s);
    let h = hamiltonian_from_psi_star(&Hamiltonian::quadratic(|_| Matrix::identity(1, 1)), &s);
    for x in [-2.0, -0.3, 0.0, 1.0, 4.0] {
        let z = v(&[0.1]);
        assert!((ps.eval(&z, &v(&[x])) - 0.5 * x * x).abs() < 1e-12);
        assert!((h.eval(&z, &v(&[x])) - (0.5 * x * x - x)).abs() < 1e-12);
    }
    assert_eq!(ps.eval(&v(&[0.0]), &v(&[0.0])), 0.0);
    let flat = Functional::quadratic(0.0, Vector::zeros(1), Matrix::zeros(1, 1));
    let hc = hamiltonian_from_psi_star(&cosh_psi(), &flat);
    assert_eq!(hc.eval(&v(&[0.0]), &v(&[0.7])), 0.7f64.cosh() - 1.0);
}

#[test]
fn reversibility_examples() {
    let s = Functional::new(|z| 2.0 * z[0], |_| v(&[2.0]));
    let samples: Vec<_> = (0..20).map(|i| (v(&[0.0]), v(&[i as f64 * 0.3 - 3.0]))).collect();
    let h = Hamiltonian::from_value(|_, x| 0.5 * x[0] * x[0] - x[0]);
    assert!(check_reversibility(&h, &s, &samples).unwrap().residual <= 1e-12);
    let flat = Functional::quadratic(0.0, Vector::zeros(1), Matrix::zeros(1, 1));
    let even = Hamiltonian::from_value(|_, x| 0.5 * x[0] * x[0]);
    assert_eq!(check_reversibility(&even, &flat, &samples).unwrap().residual, 0.0);
    let odd = Hamiltonian::from_value(|_, x| x[0].powi(3));
    assert!(!check_reversibility(&odd, &flat, &samples).unwrap().passed());
    assert!(check_reversibility(&odd, &flat, &[]).is_err());
}

#[test]
fn decomposition_examples() {
    let a = 1.5;
    let h = Hamiltonian::new(move |_, x| a * x[0] + 0.5 * x[0] * x[0], move |_, x| v(&[a + x[0]]));
    let (h1, h2) = decompose_hamiltonian(&h, &VectorField::new(move |_| v(&[a])));
    let (h1z, h2z) = decompose_hamiltonian(&h, &VectorField::new(|_| v(&[0.0])));
    for x in [-1.0, 0.0, 0.4, 2.0] {
        let (z, xi) = (v(&[0.0]), v(&[x]));
        assert!((h2.eval(&z, &xi) - 0.5 * x * x).abs() < 1e-15);
        assert_eq!(h1.eval(&z, &xi) + h2.eval(&z, &xi), h.eval(&z, &xi));
        assert_eq!(h2z.eval(&z, &xi), h.eval(&z, &xi));
        assert_eq!(h1z.eval(&z, &xi), 0.0);
    }
}

#[test]
fn zero_cost_velocity_examples() {
    let h = Hamiltonian::new(|_, x| 0.5 * x[0] * x[0] - x[0], |_, x| v(&[x[0] - 1.0]));
    assert_eq!(zero_cost_velocity(&h, &v(&[3.0])), v(&[-1.0]));
    let w = v(&[0.2, -0.7]);
    let wc = w.clone();
    let lin = Hamiltonian::new(move |_, x| wc.dot(x), {
        let w = w.clone();
        move |_, _| w.clone()
    });
    assert_eq!(zero_cost_velocity(&lin, &v(&[1.0, 1.0])), w);
}

#[test]
fn broken_operator_fails_jacobi() {
    // L = [[0,1,0],[-1,0,z2],[0,-z2,0]]; coordinate functions give sum -1
    let l = PoissonOperator::from_matrix(|z| {
        Matrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, -1.0, 0.0, z[1], 0.0, -z[1], 0.0])
    })
    .with_derivative(|_| {
        let mut d = vec![Matrix::zeros(3, 3); 3];
        d[1][(1, 2)] = 1.0;
        d[1][(2, 1)] = -1.0;
        d
    });
    let coord = |i: usize| {
        let mut b = Vector::zeros(3);
        b[i] = 1.0;
        Functional::quadratic(0.0, b, Matrix::zeros(3, 3))
    };
    let f = [coord(0), coord(1), coord(2)];
    let r = jacobi_residual(&l, [&f[0], &f[1], &f[2]], &v(&[0.3, 0.2, -0.1])).unwrap();
    assert!((r + 1.0).abs() < 1e-14, "{r}");
    assert!(!check_jacobi(&l, [&f[0], &f[1], &f[2]], &[v(&[0.0; 3])], 1e-10)
        .unwrap()
        .passed());
}

#[test]
fn generic_residual_along_running_example() {
    let b = builtins::damped_oscillator(Oscillator::default());
    let r = check_generic_residual(&b, &b.states(100)).unwrap();
    assert!(r.passed(), "{}", r.residual);
}

fn state3() -> impl Strategy<Value = Vector> {
    prop::collection::vec(-2.0f64..2.0, 3).prop_map(Vector::from_vec)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn construction_pair_is_mutually_inverse(z in state3(), xi in state3()) {
        let s = Functional::new(
            |z| z[0].sin() + z[1] * z[2],
            |z| v(&[z[0].cos(), z[2], z[1]]),
        );
        let base = cosh_psi();
        let h = hamiltonian_from_psi_star(&base, &s);
        let back = psi_star_from_hamiltonian(&h, &s);
        prop_assert!((back.eval(&z, &xi) - base.eval(&z, &xi)).abs() <= 1e-12 * (1.0 + base.eval(&z, &xi)));
        prop_assert_eq!(h.eval(&z, &Vector::zeros(3)), 0.0);
    }

    #[test]
    fn reversible_hamiltonians_give_symmetric_psi_star(z in state3(), xi in state3()) {
        let s = Functional::new(|z| 0.5 * z.dot(z), |z| z.clone());
        let h = hamiltonian_from_psi_star(&cosh_psi(), &s);
        let samples = vec![(z.clone(), xi.clone())];
        let rev = check_reversibility(&h, &s, &samples).unwrap();
        let ps = psi_star_from_hamiltonian(&h, &s);
        let sym = check_symmetry(&ps, &samples).unwrap();
        prop_assert!(sym.residual <= 2.0 * rev.residual.max(1e-12) * (1.0 + xi.amax().cosh()));
    }

    #[test]
    fn extended_operators_are_antisymmetric(x in state3(), a in state3(), b in state3(), alpha in 0.0f64..=1.0) {
        let base = builtins::rotation();
        for ext in [hat_extend(&base).unwrap(), bar_extend(&base).unwrap(), interpolate_extend(&base, alpha).unwrap()] {
            let l = ext.l.as_ref().unwrap();
            let r = l.apply(&x, &a).dot(&b) + l.apply(&x, &b).dot(&a);
            prop_assert!(r.abs() <= 1e-12);
        }
    }

    #[test]
    fn extended_flows_project_onto_base_flow(x in state3(), alpha in 0.0f64..=1.0) {
        let base = builtins::damped_oscillator_base(Oscillator::default());
        let z = v(&[x[0], x[1]]);
        let f = base.flow(&z).unwrap();
        for ext in [hat_extend(&base).unwrap(), bar_extend(&base).unwrap(), interpolate_extend(&base, alpha).unwrap()] {
            let fe = ext.flow(&x).unwrap();
            prop_assert_eq!(fe[0], f[0]);
            prop_assert_eq!(fe[1], f[1]);
        }
    }

    #[test]
    fn bar_psi_star_is_shift_invariant(x in state3(), k in state3(), alpha in -1.0f64..1.0) {
        let bar = bar_extend(&builtins::damped_oscillator_base(Oscillator::default())).unwrap();
        let ps = bar.psi_star.as_ref().unwrap();
        let de = bar.e.as_ref().unwrap().gradient(&x);
        let r = ps.eval(&x, &(&k + alpha * de)) - ps.eval(&x, &k);
        prop_assert!(r.abs() <= 1e-12);
    }
}
