//! Finite-dimensional example bundles.

use crate::extension::{bar_extend, hat_extend};
use crate::sampling::SampleBox;
use crate::structure::{Bundle, Functional, Hamiltonian, Kind, Matrix, PairFn, PoissonOperator, Vector, VectorField};
use std::sync::Arc;

/// Ψ(z, v) = sup_ξ <v,ξ> − ½ξᵀM(z)ξ, finite only on the range of `M`.
pub fn quadratic_psi(m: impl Fn(&Vector) -> Matrix + Send + Sync + 'static) -> PairFn {
    Arc::new(move |z, v| {
        let mz = m(z);
        let pinv = mz
            .clone()
            .pseudo_inverse(1e-12 * (1.0 + mz.amax()))
            .expect("pseudo-inverse of a symmetric matrix");
        let w = &pinv * v;
        let back = &mz * &w;
        if (&back - v).amax() > 1e-9 * (1.0 + v.amax()) {
            f64::INFINITY
        } else {
            0.5 * v.dot(&w)
        }
    })
}

fn symplectic() -> Matrix {
    Matrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])
}

/// Rotation drift `W(z) = (z₂, −z₁)` on ℝ² with `S = E = ½|z|²`,
/// `Ψ* = ½|ξ|²` and `L` the symplectic matrix, so that `W = L dE`.
pub fn rotation() -> Bundle {
    let s = Functional::quadratic(0.0, Vector::zeros(2), Matrix::identity(2, 2));
    let mut b = Bundle::new("rotation-preGENERIC", 2, Kind::PreGeneric, s.clone());
    b.w = Some(VectorField::linear(symplectic()));
    b.e = Some(s);
    b.l = Some(PoissonOperator::constant(symplectic()));
    b.psi_star = Some(Hamiltonian::quadratic(|_| Matrix::identity(2, 2)));
    b.psi = Some(quadratic_psi(|_| Matrix::identity(2, 2)));
    b.state_box = SampleBox::cube(2, 2.0);
    b.covector_box = SampleBox::cube(2, 2.0);
    b.validate().expect("rotation bundle is well formed")
}

/// One-dimensional gradient flow with `S(z) = z²`, `Ψ* = ½ξ²`.
pub fn quadratic_gradient_flow() -> Bundle {
    let s = Functional::quadratic(0.0, Vector::zeros(1), Matrix::from_element(1, 1, 2.0));
    let mut b = Bundle::new("quadratic-gradient-flow", 1, Kind::GradientFlow, s);
    b.psi_star = Some(Hamiltonian::quadratic(|_| Matrix::identity(1, 1)));
    b.psi = Some(quadratic_psi(|_| Matrix::identity(1, 1)));
    b.hamiltonian = Some(Hamiltonian::new(
        |z, x| 0.5 * x[0] * x[0] - x[0] * z[0],
        |z, x| Vector::from_element(1, x[0] - z[0]),
    ));
    b.conjugation_box = Some(SampleBox::cube(1, 8.0));
    b.state_box = SampleBox::cube(1, 2.0);
    b.covector_box = SampleBox::cube(1, 3.0);
    b.validate().expect("quadratic bundle is well formed")
}

/// Damped oscillator parameters; `V(q) = ½kq²`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Oscillator {
    pub m: f64,
    pub gamma: f64,
    pub k: f64,
}

impl Default for Oscillator {
    fn default() -> Self {
        Self {
            m: 1.0,
            gamma: 1.0,
            k: 1.0,
        }
    }
}

/// The oscillator as a GENERIC system on `(q, p, e)`: `E = p²/2m + V + e`,
/// `S = −e`, symplectic `L` on `(q, p)` and friction matrix
/// `M = 2γ [[0,0,0],[0,1,−p/m],[0,−p/m,p²/m²]]`.
pub fn damped_oscillator(o: Oscillator) -> Bundle {
    let Oscillator { m, gamma, k } = o;
    let s = Functional::quadratic(0.0, Vector::from_vec(vec![0.0, 0.0, -1.0]), Matrix::zeros(3, 3));
    let e = Functional::new(
        move |z| z[1] * z[1] / (2.0 * m) + 0.5 * k * z[0] * z[0] + z[2],
        move |z| Vector::from_vec(vec![k * z[0], z[1] / m, 1.0]),
    )
    .with_hessian(move |_| Matrix::from_diagonal(&Vector::from_vec(vec![k, 1.0 / m, 0.0])));
    let friction = move |z: &Vector| {
        let u = Vector::from_vec(vec![0.0, 1.0, -z[1] / m]);
        2.0 * gamma * &u * u.transpose()
    };
    let mut l = Matrix::zeros(3, 3);
    l[(0, 1)] = 1.0;
    l[(1, 0)] = -1.0;
    let mut b = Bundle::new("damped-oscillator", 3, Kind::Generic, s);
    b.e = Some(e);
    b.l = Some(PoissonOperator::constant(l));
    b.psi_star = Some(Hamiltonian::quadratic(friction));
    b.psi = Some(quadratic_psi(friction));
    b.state_box = SampleBox::new(vec![-2.0, -2.0, -1.0], vec![2.0, 2.0, 1.0]).unwrap();
    b.covector_box = SampleBox::cube(3, 1.0);
    b.validate().expect("oscillator bundle is well formed")
}

/// The oscillator without the heat bath: pre-GENERIC on `(q, p)` with
/// `S = E = p²/2m + V`, `L` symplectic and `Ψ*(ξ) = γ ξ_p²`. Its bar
/// extension is [`damped_oscillator`].
pub fn damped_oscillator_base(o: Oscillator) -> Bundle {
    let Oscillator { m, gamma, k } = o;
    let h = Functional::quadratic(
        0.0,
        Vector::zeros(2),
        Matrix::from_diagonal(&Vector::from_vec(vec![k, 1.0 / m])),
    );
    let friction = move |_: &Vector| Matrix::from_diagonal(&Vector::from_vec(vec![0.0, 2.0 * gamma]));
    let mut b = Bundle::new("damped-oscillator-base", 2, Kind::PreGeneric, h.clone());
    b.e = Some(h);
    b.l = Some(PoissonOperator::constant(symplectic()));
    b.psi_star = Some(Hamiltonian::quadratic(friction));
    b.psi = Some(quadratic_psi(friction));
    b.state_box = SampleBox::cube(2, 2.0);
    b.covector_box = SampleBox::cube(2, 1.0);
    b.validate().expect("oscillator base is well formed")
}

/// Names of the finite-dimensional built-ins.
pub const FINITE_BUILTINS: [&str; 7] = [
    "damped-oscillator",
    "damped-oscillator-bar",
    "rotation-preGENERIC",
    "rotation-hat",
    "rotation-bar",
    "quadratic-gradient-flow",
    "quadratic-gradient-flow-hat",
];

pub fn finite_builtin(name: &str, o: Oscillator) -> Option<Bundle> {
    let b = match name {
        "damped-oscillator" => damped_oscillator(o),
        "damped-oscillator-bar" => bar_extend(&damped_oscillator_base(o)).ok()?,
        "rotation-preGENERIC" => rotation(),
        "rotation-hat" => hat_extend(&rotation()).ok()?,
        "rotation-bar" => bar_extend(&rotation()).ok()?,
        "quadratic-gradient-flow" => quadratic_gradient_flow(),
        "quadratic-gradient-flow-hat" => hat_extend(&quadratic_gradient_flow()).ok()?,
        _ => return None,
    };
    Some(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_psi_is_infinite_off_range() {
        let psi = quadratic_psi(|_| Matrix::from_diagonal(&Vector::from_vec(vec![0.0, 2.0])));
        let z = Vector::zeros(2);
        assert_eq!(psi(&z, &Vector::from_vec(vec![0.0, 2.0])), 1.0);
        assert_eq!(psi(&z, &Vector::from_vec(vec![0.1, 2.0])), f64::INFINITY);
    }

    #[test]
    fn oscillator_flow_matches_equations_of_motion() {
        let o = Oscillator {
            m: 2.0,
            gamma: 0.5,
            k: 3.0,
        };
        let b = damped_oscillator(o);
        let z = Vector::from_vec(vec![0.4, -1.2, 0.1]);
        let f = b.flow(&z).unwrap();
        let (q, p) = (z[0], z[1]);
        assert!((f[0] - p / o.m).abs() < 1e-15);
        assert!((f[1] - (-o.k * q - o.gamma * p / o.m)).abs() < 1e-15);
        assert!((f[2] - o.gamma * p * p / (o.m * o.m)).abs() < 1e-15);
    }

    #[test]
    fn every_finite_builtin_builds() {
        for n in FINITE_BUILTINS {
            assert!(finite_builtin(n, Oscillator::default()).is_some(), "{n}");
        }
    }
}
