//! Variational bundles on ℝⁿ and the structural identity checks.

use crate::error::{invalid, Result};
use crate::legendre::{self, Axis, Convexity, Grid, SampledFunction};
use crate::report::{CheckReport, Location, WorstCase};
use crate::sampling::{sample_box, sample_product, SampleBox, DEFAULT_SAMPLES};
use nalgebra::{DMatrix, DVector};
use std::fmt;
use std::sync::Arc;

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

pub type ScalarFn = Arc<dyn Fn(&Vector) -> f64 + Send + Sync>;
pub type VecFn = Arc<dyn Fn(&Vector) -> Vector + Send + Sync>;
pub type MatFn = Arc<dyn Fn(&Vector) -> Matrix + Send + Sync>;
pub type MatListFn = Arc<dyn Fn(&Vector) -> Vec<Matrix> + Send + Sync>;
pub type PairFn = Arc<dyn Fn(&Vector, &Vector) -> f64 + Send + Sync>;
/// Draws `count` deterministic samples.
pub type SamplerFn = Arc<dyn Fn(usize) -> Vec<Vector> + Send + Sync>;
pub type PairVecFn = Arc<dyn Fn(&Vector, &Vector) -> Vector + Send + Sync>;

pub const TOL_STRUCT_ANALYTIC: f64 = 1e-8;
pub const TOL_STRUCT_FD: f64 = 1e-4;
/// Relative tolerance for the Richardson consistency test of FD gradients.
pub const TOL_GRAD: f64 = 1e-4;
/// Shifts used by the dissipation-potential degeneracy check.
pub const DEGENERACY_ALPHAS: [f64; 6] = [1.0, -1.0, 0.5, -0.5, 0.1, -0.1];

fn fd_step(x: &Vector) -> f64 {
    1e-5 * (1.0 + x.norm())
}

fn central_difference(f: &dyn Fn(&Vector) -> f64, x: &Vector, h: f64) -> Vector {
    let mut g = Vector::zeros(x.len());
    let mut y = x.clone();
    for i in 0..x.len() {
        let xi = x[i];
        y[i] = xi + h;
        let fp = f(&y);
        y[i] = xi - h;
        let fm = f(&y);
        y[i] = xi;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Largest mismatch between `<g, v>` and a Richardson difference of `f`
/// along the multiplicative directions `v = z ⊙ u`, `|u| ≤ 1`.
fn scaled_direction_mismatch(f: &dyn Fn(&Vector) -> f64, g: &Vector, z: &Vector) -> f64 {
    let t = 1e-3;
    (0..3)
        .map(|k| {
            let v = Vector::from_fn(z.len(), |i, _| z[i] * (0.7 * k as f64 + 1.3 * i as f64).cos());
            let d = |h: f64| (f(&(z + h * &v)) - f(&(z - h * &v))) / (2.0 * h);
            let fd = (4.0 * d(0.5 * t) - d(t)) / 3.0;
            let scale: f64 = g.iter().zip(v.iter()).map(|(a, b)| (a * b).abs()).sum();
            (g.dot(&v) - fd).abs() / (1.0 + scale)
        })
        .fold(0.0, f64::max)
}

/// Central differences at `h` and `h/2`. Returns the Richardson estimate and
/// the relative disagreement between the two stencils.
pub fn richardson_gradient(f: &dyn Fn(&Vector) -> f64, x: &Vector) -> (Vector, f64) {
    let h = fd_step(x);
    let g1 = central_difference(f, x, h);
    let g2 = central_difference(f, x, 0.5 * h);
    let diff = (&g1 - &g2).amax() / (1.0 + g2.amax());
    ((4.0 * &g2 - &g1) / 3.0, diff)
}

/// Scalar function on states with its derivative.
#[derive(Clone)]
pub struct Functional {
    value: ScalarFn,
    gradient: Option<VecFn>,
    hessian: Option<MatFn>,
}

impl fmt::Debug for Functional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Functional")
            .field("analytic_gradient", &self.gradient.is_some())
            .field("hessian", &self.hessian.is_some())
            .finish()
    }
}

impl Functional {
    /// Value only; the gradient falls back to finite differences.
    pub fn from_value(value: impl Fn(&Vector) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            value: Arc::new(value),
            gradient: None,
            hessian: None,
        }
    }

    pub fn new(
        value: impl Fn(&Vector) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&Vector) -> Vector + Send + Sync + 'static,
    ) -> Self {
        Self {
            value: Arc::new(value),
            gradient: Some(Arc::new(gradient)),
            hessian: None,
        }
    }

    pub fn with_hessian(mut self, h: impl Fn(&Vector) -> Matrix + Send + Sync + 'static) -> Self {
        self.hessian = Some(Arc::new(h));
        self
    }

    pub(crate) fn from_parts(value: ScalarFn, gradient: Option<VecFn>, hessian: Option<MatFn>) -> Self {
        Self {
            value,
            gradient,
            hessian,
        }
    }

    /// `c + <b, z> + ½ zᵀ A z` with exact derivatives.
    pub fn quadratic(c: f64, b: Vector, a: Matrix) -> Self {
        let a = 0.5 * (&a + a.transpose());
        let (b1, a1) = (b.clone(), a.clone());
        let (b2, a2) = (b, a.clone());
        Self::new(move |z| c + b1.dot(z) + 0.5 * z.dot(&(&a1 * z)), move |z| &b2 + &a2 * z)
            .with_hessian(move |_| a.clone())
    }

    pub fn value(&self, z: &Vector) -> f64 {
        (self.value)(z)
    }

    pub fn gradient(&self, z: &Vector) -> Vector {
        match &self.gradient {
            Some(g) => g(z),
            None => richardson_gradient(&*self.value, z).0,
        }
    }

    pub fn hessian(&self, z: &Vector) -> Option<Matrix> {
        self.hessian.as_ref().map(|h| h(z))
    }

    pub fn has_analytic_gradient(&self) -> bool {
        self.gradient.is_some()
    }

    pub fn has_hessian(&self) -> bool {
        self.hessian.is_some()
    }

    pub(crate) fn value_fn(&self) -> ScalarFn {
        self.value.clone()
    }

    pub(crate) fn gradient_fn(&self) -> VecFn {
        match &self.gradient {
            Some(g) => g.clone(),
            None => {
                let v = self.value.clone();
                Arc::new(move |z| richardson_gradient(&*v, z).0)
            }
        }
    }

    pub(crate) fn hessian_fn(&self) -> Option<MatFn> {
        self.hessian.clone()
    }

    /// Directional test of the gradient against its value: analytic
    /// gradients are compared with a Richardson difference, finite-difference
    /// gradients with their own half-step stencil.
    pub fn check_gradient(&self, states: &[Vector]) -> Result<CheckReport> {
        self.check_gradient_with(states, false)
    }

    /// As [`Functional::check_gradient`]; with `relative` the test runs along
    /// directions `z ⊙ u`, which keep `z ± t·z ⊙ u` in the positive orthant.
    pub fn check_gradient_with(&self, states: &[Vector], relative: bool) -> Result<CheckReport> {
        nonempty(states.len())?;
        let mut w = WorstCase::new();
        for (i, z) in states.iter().enumerate() {
            if relative {
                let r = self
                    .gradient
                    .as_ref()
                    .map_or(0.0, |g| scaled_direction_mismatch(&*self.value, &g(z), z));
                w.push(i, r, || loc_state(z));
                continue;
            }
            let (fd, diff) = richardson_gradient(&*self.value, z);
            let r = match &self.gradient {
                Some(g) => (g(z) - &fd).amax() / (1.0 + fd.amax()),
                None => diff,
            };
            w.push(i, r, || loc_state(z));
        }
        Ok(w.report(
            "gradient-consistency",
            "gradient agrees with finite differences of the value",
            TOL_GRAD,
        ))
    }
}

/// Vector field with an optional Jacobian.
#[derive(Clone)]
pub struct VectorField {
    eval: VecFn,
    jacobian: Option<MatFn>,
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorField")
            .field("jacobian", &self.jacobian.is_some())
            .finish()
    }
}

impl VectorField {
    pub fn new(eval: impl Fn(&Vector) -> Vector + Send + Sync + 'static) -> Self {
        Self {
            eval: Arc::new(eval),
            jacobian: None,
        }
    }

    pub fn with_jacobian(mut self, j: impl Fn(&Vector) -> Matrix + Send + Sync + 'static) -> Self {
        self.jacobian = Some(Arc::new(j));
        self
    }

    /// Linear field `z ↦ A z`.
    pub fn linear(a: Matrix) -> Self {
        let a1 = a.clone();
        Self::new(move |z| &a1 * z).with_jacobian(move |_| a.clone())
    }

    pub fn eval(&self, z: &Vector) -> Vector {
        (self.eval)(z)
    }

    pub fn jacobian(&self, z: &Vector) -> Option<Matrix> {
        self.jacobian.as_ref().map(|j| j(z))
    }

    pub(crate) fn eval_fn(&self) -> VecFn {
        self.eval.clone()
    }

    pub(crate) fn jacobian_fn(&self) -> Option<MatFn> {
        self.jacobian.clone()
    }
}

/// Map on the cotangent bundle, `(z, ξ) ↦ 𝓗(z, ξ)`. Also used for Ψ*.
#[derive(Clone)]
pub struct Hamiltonian {
    eval: PairFn,
    xi_gradient: Option<PairVecFn>,
}

impl fmt::Debug for Hamiltonian {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Hamiltonian")
            .field("analytic_xi_gradient", &self.xi_gradient.is_some())
            .finish()
    }
}

impl Hamiltonian {
    pub fn from_value(eval: impl Fn(&Vector, &Vector) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            eval: Arc::new(eval),
            xi_gradient: None,
        }
    }

    pub fn new(
        eval: impl Fn(&Vector, &Vector) -> f64 + Send + Sync + 'static,
        xi_gradient: impl Fn(&Vector, &Vector) -> Vector + Send + Sync + 'static,
    ) -> Self {
        Self {
            eval: Arc::new(eval),
            xi_gradient: Some(Arc::new(xi_gradient)),
        }
    }

    pub(crate) fn from_parts(eval: PairFn, xi_gradient: Option<PairVecFn>) -> Self {
        Self { eval, xi_gradient }
    }

    /// `½ ξᵀ M(z) ξ` for a symmetric positive semidefinite `M`.
    pub fn quadratic(m: impl Fn(&Vector) -> Matrix + Send + Sync + 'static) -> Self {
        let m = Arc::new(m);
        let m2 = m.clone();
        Self::new(move |z, xi| 0.5 * xi.dot(&(m(z) * xi)), move |z, xi| m2(z) * xi)
    }

    pub fn eval(&self, z: &Vector, xi: &Vector) -> f64 {
        (self.eval)(z, xi)
    }

    pub fn xi_gradient(&self, z: &Vector, xi: &Vector) -> Vector {
        match &self.xi_gradient {
            Some(g) => g(z, xi),
            None => {
                let f = |x: &Vector| (self.eval)(z, x);
                richardson_gradient(&f, xi).0
            }
        }
    }

    pub fn has_analytic_gradient(&self) -> bool {
        self.xi_gradient.is_some()
    }

    pub(crate) fn eval_fn(&self) -> PairFn {
        self.eval.clone()
    }

    pub(crate) fn xi_gradient_fn(&self) -> PairVecFn {
        match &self.xi_gradient {
            Some(g) => g.clone(),
            None => {
                let e = self.eval.clone();
                Arc::new(move |z: &Vector, xi: &Vector| {
                    let f = |x: &Vector| e(z, x);
                    richardson_gradient(&f, xi).0
                })
            }
        }
    }

    /// `𝓗(z, 0) = 0` at the sampled states.
    pub fn check_normalization(&self, states: &[Vector]) -> Result<CheckReport> {
        nonempty(states.len())?;
        let mut w = WorstCase::new();
        for (i, z) in states.iter().enumerate() {
            let r = self.eval(z, &Vector::zeros(z.len())).abs();
            w.push(i, r, || loc_state(z));
        }
        Ok(w.report("normalization", "H(z, 0) = 0", TOL_STRUCT_ANALYTIC))
    }

    /// Midpoint convexity in ξ on sampled segments.
    pub fn check_convexity(&self, samples: &[(Vector, Vector, Vector)]) -> Result<CheckReport> {
        nonempty(samples.len())?;
        let mut w = WorstCase::new();
        for (i, (z, a, b)) in samples.iter().enumerate() {
            let mid = 0.5 * (a + b);
            let (fa, fb, fm) = (self.eval(z, a), self.eval(z, b), self.eval(z, &mid));
            let excess = fm - 0.5 * (fa + fb);
            let r = excess.max(0.0) / (1.0 + fa.abs().max(fb.abs()));
            w.push(i, r, || loc_pair(z, &mid));
        }
        Ok(w.report("convexity", "H(z, .) is midpoint convex", TOL_STRUCT_ANALYTIC))
    }
}

/// Antisymmetric operator `ξ ↦ L(z) ξ`.
#[derive(Clone)]
pub struct PoissonOperator {
    apply: PairVecFn,
    matrix: Option<MatFn>,
    derivative: Option<MatListFn>,
}

impl fmt::Debug for PoissonOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PoissonOperator")
            .field("matrix", &self.matrix.is_some())
            .field("derivative", &self.derivative.is_some())
            .finish()
    }
}

impl PoissonOperator {
    /// Matrix-valued `z ↦ L(z)`; `apply` is the matrix product.
    pub fn from_matrix(m: impl Fn(&Vector) -> Matrix + Send + Sync + 'static) -> Self {
        let m: MatFn = Arc::new(m);
        let m2 = m.clone();
        Self {
            apply: Arc::new(move |z, xi| m2(z) * xi),
            matrix: Some(m),
            derivative: None,
        }
    }

    /// Constant matrix, with its (zero) derivative.
    pub fn constant(m: Matrix) -> Self {
        let n = m.nrows();
        Self::from_matrix(move |_| m.clone()).with_derivative(move |_| vec![Matrix::zeros(n, n); n])
    }

    /// Matrix-free operator. Jacobi checks are then not applicable.
    pub fn from_apply(apply: impl Fn(&Vector, &Vector) -> Vector + Send + Sync + 'static) -> Self {
        Self {
            apply: Arc::new(apply),
            matrix: None,
            derivative: None,
        }
    }

    /// `derivative(z)[k]` is `∂L/∂z_k`.
    pub fn with_derivative(mut self, d: impl Fn(&Vector) -> Vec<Matrix> + Send + Sync + 'static) -> Self {
        self.derivative = Some(Arc::new(d));
        self
    }

    pub(crate) fn from_parts(apply: PairVecFn, matrix: Option<MatFn>, derivative: Option<MatListFn>) -> Self {
        Self {
            apply,
            matrix,
            derivative,
        }
    }

    pub fn apply(&self, z: &Vector, xi: &Vector) -> Vector {
        (self.apply)(z, xi)
    }

    pub fn matrix(&self, z: &Vector) -> Option<Matrix> {
        self.matrix.as_ref().map(|m| m(z))
    }

    pub fn derivative(&self, z: &Vector) -> Option<Vec<Matrix>> {
        self.derivative.as_ref().map(|d| d(z))
    }

    pub(crate) fn apply_fn(&self) -> PairVecFn {
        self.apply.clone()
    }

    pub(crate) fn matrix_fn(&self) -> Option<MatFn> {
        self.matrix.clone()
    }

    pub(crate) fn derivative_fn(&self) -> Option<MatListFn> {
        self.derivative.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    GradientFlow,
    PreGeneric,
    Generic,
    Raw,
}

/// Named collection of the variational objects over ℝⁿ.
#[derive(Clone)]
pub struct Bundle {
    pub name: String,
    pub dim: usize,
    pub kind: Kind,
    pub s: Functional,
    pub e: Option<Functional>,
    pub w: Option<VectorField>,
    pub l: Option<PoissonOperator>,
    pub psi_star: Option<Hamiltonian>,
    /// Primal potential Ψ(z, v); may return `+inf`.
    pub psi: Option<PairFn>,
    pub hamiltonian: Option<Hamiltonian>,
    /// Explicit flow; otherwise `W + ∂_ξΨ*(z, -½dS)`.
    pub flow: Option<VecFn>,
    pub state_box: SampleBox,
    pub covector_box: SampleBox,
    /// Box in which Ψ is synthesized from Ψ* by grid conjugation.
    pub conjugation_box: Option<SampleBox>,
    /// Set when the bundle comes from a discretization; checks whose
    /// residual is a discretization error then use this tolerance.
    pub discretization_tol: Option<f64>,
    /// Replaces Halton sampling of `state_box` when set.
    pub state_sampler: Option<SamplerFn>,
    /// Replaces Halton sampling of `covector_box` when set.
    pub covector_sampler: Option<SamplerFn>,
    /// States live in the positive orthant (up to the last coordinates
    /// added by an extension); difference steps then scale with each
    /// coordinate.
    pub positive_states: bool,
    pub notes: Vec<String>,
}

impl fmt::Debug for Bundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Bundle")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("kind", &self.kind)
            .finish()
    }
}

impl Bundle {
    /// Minimal bundle; the caller fills the optional parts and then calls
    /// [`Bundle::validate`].
    pub fn new(name: impl Into<String>, dim: usize, kind: Kind, s: Functional) -> Self {
        Self {
            name: name.into(),
            dim,
            kind,
            s,
            e: None,
            w: None,
            l: None,
            psi_star: None,
            psi: None,
            hamiltonian: None,
            flow: None,
            state_box: SampleBox::cube(dim, 1.0),
            covector_box: SampleBox::cube(dim, 1.0),
            conjugation_box: None,
            discretization_tol: None,
            state_sampler: None,
            covector_sampler: None,
            positive_states: false,
            notes: Vec::new(),
        }
    }

    pub fn validate(self) -> Result<Self> {
        if self.dim == 0 {
            return Err(invalid("bundle dimension must be positive"));
        }
        if self.psi_star.is_none() && self.hamiltonian.is_none() {
            return Err(invalid(format!(
                "bundle `{}` needs psi_star or a hamiltonian",
                self.name
            )));
        }
        if self.state_box.dim() != self.dim || self.covector_box.dim() != self.dim {
            return Err(invalid("sample boxes must match the bundle dimension"));
        }
        let need = |ok: bool, what: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(invalid(format!("{:?} bundle `{}` lacks {what}", self.kind, self.name)))
            }
        };
        match self.kind {
            Kind::GradientFlow => need(self.psi_star.is_some(), "psi_star")?,
            Kind::PreGeneric => {
                need(self.psi_star.is_some(), "psi_star")?;
                need(self.w.is_some() || (self.l.is_some() && self.e.is_some()), "W")?;
            }
            Kind::Generic => {
                need(self.psi_star.is_some(), "psi_star")?;
                need(self.e.is_some(), "E")?;
                need(self.l.is_some(), "L")?;
            }
            Kind::Raw => {}
        }
        Ok(self)
    }

    pub fn analytic(&self) -> bool {
        self.s.has_analytic_gradient()
            && self.e.as_ref().is_none_or(|e| e.has_analytic_gradient())
            && self.psi_star.as_ref().is_none_or(|p| p.has_analytic_gradient())
    }

    pub fn tol_struct(&self) -> f64 {
        if self.analytic() {
            TOL_STRUCT_ANALYTIC
        } else {
            TOL_STRUCT_FD
        }
    }

    /// Tolerance for identities whose residual is a discretization error.
    pub fn tol_discrete(&self) -> f64 {
        self.discretization_tol.unwrap_or_else(|| self.tol_struct())
    }

    /// `W(z)`, or `L(z) dE(z)` when no explicit drift is given.
    pub fn drift(&self, z: &Vector) -> Option<Vector> {
        if let Some(w) = &self.w {
            return Some(w.eval(z));
        }
        match (&self.l, &self.e) {
            (Some(l), Some(e)) => Some(l.apply(z, &e.gradient(z))),
            _ => None,
        }
    }

    /// Flow velocity `F(z)`.
    pub fn flow(&self, z: &Vector) -> Result<Vector> {
        if let Some(f) = &self.flow {
            return Ok(f(z));
        }
        let ps = self
            .psi_star
            .as_ref()
            .ok_or_else(|| invalid(format!("bundle `{}` has no dissipation potential", self.name)))?;
        let ds = self.s.gradient(z);
        let mut v = ps.xi_gradient(z, &(-0.5 * ds));
        if let Some(w) = self.drift(z) {
            v += w;
        }
        Ok(v)
    }

    /// Ψ(z, v), analytic or by grid conjugation of Ψ*(z, ·).
    pub fn psi_value(&self, z: &Vector, v: &Vector) -> Result<f64> {
        if let Some(p) = &self.psi {
            return Ok(p(z, v));
        }
        let ps = self
            .psi_star
            .as_ref()
            .ok_or_else(|| invalid("no dissipation potential to conjugate"))?;
        let bx = self
            .conjugation_box
            .as_ref()
            .ok_or_else(|| invalid("no analytic psi and no conjugation box declared"))?;
        if self.dim > 3 {
            return Err(invalid("grid conjugation is limited to dimension 3"));
        }
        let count = match self.dim {
            1 => 2001,
            2 => 201,
            _ => 41,
        };
        let axes = bx
            .lower
            .iter()
            .zip(&bx.upper)
            .map(|(&l, &u)| Axis::new(l, u, count))
            .collect::<Result<Vec<_>>>()?;
        let grid = Grid::new(axes)?;
        let f = SampledFunction::from_fn(grid, Convexity::ClaimedConvex, |xi| {
            ps.eval(z, &Vector::from_column_slice(xi))
        })?;
        Ok(legendre::conjugate_at(&f, v.as_slice()))
    }

    /// Tolerance that applies to [`generic_residual`] on this bundle.
    pub fn tol_residual(&self) -> f64 {
        match (&self.psi, &self.conjugation_box) {
            (None, Some(b)) => {
                let count = match self.dim {
                    1 => 2001,
                    2 => 201,
                    _ => 41,
                };
                let h = b
                    .lower
                    .iter()
                    .zip(&b.upper)
                    .map(|(l, u)| (u - l) / (count - 1) as f64)
                    .fold(0.0, f64::max);
                legendre::tol_legendre(h)
            }
            _ => self.tol_discrete(),
        }
    }

    pub fn states(&self, count: usize) -> Vec<Vector> {
        match &self.state_sampler {
            Some(f) => f(count),
            None => sample_box(&self.state_box, count)
                .into_iter()
                .map(Vector::from_vec)
                .collect(),
        }
    }

    fn covectors(&self, count: usize, stream: usize) -> Vec<Vector> {
        match &self.covector_sampler {
            Some(f) => f(count * (stream + 1)).into_iter().skip(count * stream).collect(),
            None => sample_box(&self.covector_box, count * (stream + 1))
                .into_iter()
                .skip(count * stream)
                .map(Vector::from_vec)
                .collect(),
        }
    }

    fn custom(&self) -> bool {
        self.state_sampler.is_some() || self.covector_sampler.is_some()
    }

    pub fn state_covector_samples(&self, count: usize) -> Vec<(Vector, Vector)> {
        if self.custom() {
            return self.states(count).into_iter().zip(self.covectors(count, 0)).collect();
        }
        sample_product(&[&self.state_box, &self.covector_box], count)
            .into_iter()
            .map(|mut p| {
                let xi = Vector::from_vec(p.pop().unwrap());
                (Vector::from_vec(p.pop().unwrap()), xi)
            })
            .collect()
    }

    pub fn state_covector_pairs(&self, count: usize) -> Vec<(Vector, Vector, Vector)> {
        if self.custom() {
            return self
                .states(count)
                .into_iter()
                .zip(self.covectors(count, 0))
                .zip(self.covectors(count, 1))
                .map(|((z, a), b)| (z, a, b))
                .collect();
        }
        sample_product(&[&self.state_box, &self.covector_box, &self.covector_box], count)
            .into_iter()
            .map(|mut p| {
                let eta = Vector::from_vec(p.pop().unwrap());
                let xi = Vector::from_vec(p.pop().unwrap());
                (Vector::from_vec(p.pop().unwrap()), xi, eta)
            })
            .collect()
    }
}

fn nonempty(n: usize) -> Result<()> {
    if n == 0 {
        Err(invalid("no samples"))
    } else {
        Ok(())
    }
}

fn loc_state(z: &Vector) -> Location {
    Location {
        state: z.as_slice().to_vec(),
        ..Default::default()
    }
}

fn loc_pair(z: &Vector, xi: &Vector) -> Location {
    Location {
        state: z.as_slice().to_vec(),
        covector: xi.as_slice().to_vec(),
        note: None,
    }
}

/// `Ψ*(z, ξ) = 𝓗₂(z, ξ + ½dS) − 𝓗₂(z, ½dS)`.
pub fn psi_star_from_hamiltonian(h2: &Hamiltonian, s: &Functional) -> Hamiltonian {
    let (e, g) = (h2.eval_fn(), h2.xi_gradient_fn());
    let (ds1, ds2) = (s.gradient_fn(), s.gradient_fn());
    Hamiltonian::from_parts(
        Arc::new(move |z, xi| {
            let half = 0.5 * ds1(z);
            e(z, &(xi + &half)) - e(z, &half)
        }),
        Some(Arc::new(move |z, xi| g(z, &(xi + 0.5 * ds2(z))))),
    )
}

/// `𝓗(z, ξ) = Ψ*(z, ξ − ½dS) − Ψ*(z, −½dS)`.
pub fn hamiltonian_from_psi_star(psi_star: &Hamiltonian, s: &Functional) -> Hamiltonian {
    let (e, g) = (psi_star.eval_fn(), psi_star.xi_gradient_fn());
    let (ds1, ds2) = (s.gradient_fn(), s.gradient_fn());
    Hamiltonian::from_parts(
        Arc::new(move |z, xi| {
            let half = 0.5 * ds1(z);
            e(z, &(xi - &half)) - e(z, &(-half))
        }),
        Some(Arc::new(move |z, xi| g(z, &(xi - 0.5 * ds2(z))))),
    )
}

/// Splits `𝓗 = 𝓗₁ + 𝓗₂` with `𝓗₁(z, ξ) = <W(z), ξ>`.
pub fn decompose_hamiltonian(h: &Hamiltonian, w: &VectorField) -> (Hamiltonian, Hamiltonian) {
    let (w1, w2, w3, w4) = (w.eval_fn(), w.eval_fn(), w.eval_fn(), w.eval_fn());
    let h1 = Hamiltonian::from_parts(Arc::new(move |z, xi| w1(z).dot(xi)), Some(Arc::new(move |z, _| w2(z))));
    let (e, g) = (h.eval_fn(), h.xi_gradient_fn());
    let h2 = Hamiltonian::from_parts(
        Arc::new(move |z, xi| e(z, xi) - w3(z).dot(xi)),
        Some(Arc::new(move |z, xi| g(z, xi) - w4(z))),
    );
    (h1, h2)
}

/// `|𝓗(z, ξ) − 𝓗(z, dS − ξ)|`.
pub fn check_reversibility(h: &Hamiltonian, s: &Functional, samples: &[(Vector, Vector)]) -> Result<CheckReport> {
    nonempty(samples.len())?;
    let mut w = WorstCase::new();
    for (i, (z, xi)) in samples.iter().enumerate() {
        let ds = s.gradient(z);
        let r = (h.eval(z, xi) - h.eval(z, &(ds - xi))).abs();
        w.push(i, r, || loc_pair(z, xi));
    }
    Ok(w.report("reversibility", "H(z, xi) = H(z, dS(z) - xi)", TOL_STRUCT_ANALYTIC))
}

/// `|Ψ*(z, ξ) − Ψ*(z, −ξ)|`.
pub fn check_symmetry(psi_star: &Hamiltonian, samples: &[(Vector, Vector)]) -> Result<CheckReport> {
    nonempty(samples.len())?;
    let mut w = WorstCase::new();
    for (i, (z, xi)) in samples.iter().enumerate() {
        let r = (psi_star.eval(z, xi) - psi_star.eval(z, &(-xi))).abs();
        w.push(i, r, || loc_pair(z, xi));
    }
    Ok(w.report("psi-star-symmetry", "Psi*(z, xi) = Psi*(z, -xi)", TOL_STRUCT_ANALYTIC))
}

/// `𝓛(z, W+v) − 𝓛(z, W−v) = <dS, v>`; samples where 𝓛 is infinite are
/// skipped.
pub fn check_fluctuation_symmetry(
    lagrangian: &dyn Fn(&Vector, &Vector) -> f64,
    s: &Functional,
    w: Option<&VectorField>,
    samples: &[(Vector, Vector)],
) -> Result<CheckReport> {
    const NAME: &str = "fluctuation-symmetry";
    const ID: &str = "L(z, W + v) - L(z, W - v) = <dS(z), v>";
    nonempty(samples.len())?;
    let mut worst = WorstCase::new();
    let mut skipped = 0;
    for (i, (z, v)) in samples.iter().enumerate() {
        let w0 = w.map(|w| w.eval(z)).unwrap_or_else(|| Vector::zeros(z.len()));
        let (a, b) = (lagrangian(z, &(&w0 + v)), lagrangian(z, &(&w0 - v)));
        if !(a.is_finite() && b.is_finite()) {
            skipped += 1;
            continue;
        }
        let r = (a - b - s.gradient(z).dot(v)).abs();
        worst.push(i, r, || loc_pair(z, v));
    }
    if worst.count == 0 {
        return Ok(CheckReport::not_applicable(
            NAME,
            ID,
            "Lagrangian infinite at every sample",
        ));
    }
    let mut rep = worst.report(NAME, ID, TOL_STRUCT_ANALYTIC);
    if skipped > 0 {
        rep.note = Some(format!("{skipped} samples skipped (infinite Lagrangian)"));
    }
    Ok(rep)
}

/// `|<W(z), dS(z)>|`.
pub fn check_orthogonality(w: &dyn Fn(&Vector) -> Vector, s: &Functional, states: &[Vector]) -> Result<CheckReport> {
    nonempty(states.len())?;
    let mut worst = WorstCase::new();
    for (i, z) in states.iter().enumerate() {
        let r = w(z).dot(&s.gradient(z)).abs();
        worst.push(i, r, || loc_state(z));
    }
    Ok(worst.report("orthogonality", "<W(z), dS(z)> = 0", TOL_STRUCT_ANALYTIC))
}

/// `‖L(z) dS(z)‖`.
pub fn check_degeneracy_l(l: &PoissonOperator, s: &Functional, states: &[Vector]) -> Result<CheckReport> {
    nonempty(states.len())?;
    let mut worst = WorstCase::new();
    for (i, z) in states.iter().enumerate() {
        let r = l.apply(z, &s.gradient(z)).norm();
        worst.push(i, r, || loc_state(z));
    }
    Ok(worst.report("degeneracy-L", "L(z) dS(z) = 0", TOL_STRUCT_ANALYTIC))
}

/// `|Ψ*(z, ξ + α dE) − Ψ*(z, ξ)|` over α in [`DEGENERACY_ALPHAS`].
pub fn check_degeneracy_psi(
    psi_star: &Hamiltonian,
    e: &Functional,
    samples: &[(Vector, Vector)],
) -> Result<CheckReport> {
    nonempty(samples.len())?;
    let mut worst = WorstCase::new();
    for (i, (z, xi)) in samples.iter().enumerate() {
        let de = e.gradient(z);
        let base = psi_star.eval(z, xi);
        for (k, a) in DEGENERACY_ALPHAS.iter().enumerate() {
            let r = (psi_star.eval(z, &(xi + *a * &de)) - base).abs();
            worst.push(i * DEGENERACY_ALPHAS.len() + k, r, || loc_pair(z, xi));
        }
    }
    Ok(worst.report(
        "degeneracy-psi",
        "Psi*(z, xi + alpha dE(z)) = Psi*(z, xi)",
        TOL_STRUCT_ANALYTIC,
    ))
}

/// `|<Lξ, η> + <Lη, ξ>|`.
pub fn check_antisymmetry(l: &PoissonOperator, samples: &[(Vector, Vector, Vector)]) -> Result<CheckReport> {
    nonempty(samples.len())?;
    let mut worst = WorstCase::new();
    for (i, (z, xi, eta)) in samples.iter().enumerate() {
        let r = (l.apply(z, xi).dot(eta) + l.apply(z, eta).dot(xi)).abs();
        worst.push(i, r, || loc_pair(z, xi));
    }
    Ok(worst.report("antisymmetry", "<L xi, eta> = -<L eta, xi>", TOL_STRUCT_ANALYTIC))
}

/// `‖L(aξ + η) − aLξ − Lη‖` with `a = 1.7`.
pub fn check_linearity(l: &PoissonOperator, samples: &[(Vector, Vector, Vector)]) -> Result<CheckReport> {
    nonempty(samples.len())?;
    let a = 1.7;
    let mut worst = WorstCase::new();
    for (i, (z, xi, eta)) in samples.iter().enumerate() {
        let lhs = l.apply(z, &(a * xi + eta));
        let rhs = a * l.apply(z, xi) + l.apply(z, eta);
        let r = (lhs - &rhs).amax() / (1.0 + rhs.amax());
        worst.push(i, r, || loc_pair(z, xi));
    }
    Ok(worst.report("linearity", "L(a xi + eta) = a L xi + L eta", TOL_STRUCT_ANALYTIC))
}

/// Gradient of `{F, G} = <dF, L dG>` assembled from Hessians and `∂L`.
fn bracket_gradient(ga: &Vector, ha: &Matrix, gb: &Vector, hb: &Matrix, l: &Matrix, dl: &[Matrix]) -> Vector {
    let mut g = ha * (l * gb) + hb * (l.transpose() * ga);
    for (k, dlk) in dl.iter().enumerate() {
        g[k] += ga.dot(&(dlk * gb));
    }
    g
}

/// Cyclic sum `{{F₁,F₂},F₃} + {{F₃,F₁},F₂} + {{F₂,F₃},F₁}`.
pub fn jacobi_residual(l: &PoissonOperator, f: [&Functional; 3], z: &Vector) -> Option<f64> {
    let lm = l.matrix(z)?;
    let dl = l.derivative(z)?;
    let g: Vec<Vector> = f.iter().map(|fi| fi.gradient(z)).collect();
    let h: Vec<Matrix> = f.iter().map(|fi| fi.hessian(z)).collect::<Option<_>>()?;
    let outer =
        |a: usize, b: usize, c: usize| bracket_gradient(&g[a], &h[a], &g[b], &h[b], &lm, &dl).dot(&(&lm * &g[c]));
    Some(outer(0, 1, 2) + outer(2, 0, 1) + outer(1, 2, 0))
}

pub fn check_jacobi(l: &PoissonOperator, f: [&Functional; 3], states: &[Vector], tol: f64) -> Result<CheckReport> {
    const NAME: &str = "jacobi";
    const ID: &str = "{{F1,F2},F3} + {{F3,F1},F2} + {{F2,F3},F1} = 0";
    nonempty(states.len())?;
    if f.iter().any(|fi| !fi.has_hessian() || !fi.has_analytic_gradient()) {
        return Ok(CheckReport::not_applicable(
            NAME,
            ID,
            "test functions lack analytic Hessians",
        ));
    }
    if l.matrix.is_none() || l.derivative.is_none() {
        return Ok(CheckReport::not_applicable(
            NAME,
            ID,
            "no analytic derivative of z -> L(z)",
        ));
    }
    let mut worst = WorstCase::new();
    for (i, z) in states.iter().enumerate() {
        let r = jacobi_residual(l, f, z).map(f64::abs).unwrap_or(f64::INFINITY);
        worst.push(i, r, || loc_state(z));
    }
    Ok(worst.report(NAME, ID, tol))
}

/// Cubic polynomial `c + <b,z> + ½zᵀAz + Σ d_k <w_k, z>³` with exact
/// derivatives, for Jacobi checks.
pub fn cubic_test_function(c: f64, b: Vector, a: Matrix, cubic: Vec<(f64, Vector)>) -> Functional {
    let a = 0.5 * (&a + a.transpose());
    let (b1, a1, c1) = (b.clone(), a.clone(), cubic.clone());
    let (a2, c2) = (a.clone(), cubic.clone());
    Functional::new(
        move |z| c + b1.dot(z) + 0.5 * z.dot(&(&a1 * z)) + c1.iter().map(|(d, w)| d * w.dot(z).powi(3)).sum::<f64>(),
        move |z| {
            let mut g = &b + &a2 * z;
            for (d, w) in &c2 {
                g += 3.0 * d * w.dot(z).powi(2) * w;
            }
            g
        },
    )
    .with_hessian(move |z| {
        let mut h = a.clone();
        for (d, w) in &cubic {
            h += 6.0 * d * w.dot(z) * (w * w.transpose());
        }
        h
    })
}

/// Three cubic test functions on ℝⁿ with coefficients from a fixed Halton
/// stream.
pub fn cubic_test_triple(n: usize) -> [Functional; 3] {
    let mut k = 0usize;
    let mut next = || {
        k += 1;
        2.0 * crate::sampling::halton(k, 1)[0] - 1.0
    };
    let mut make = || {
        let c = next();
        let b = Vector::from_fn(n, |_, _| next());
        let a = Matrix::from_fn(n, n, |_, _| next());
        let cubic = (0..2).map(|_| (next(), Vector::from_fn(n, |_, _| next()))).collect();
        cubic_test_function(c, b, a, cubic)
    };
    [make(), make(), make()]
}

/// `∂_ξ𝓗(z, 0)`.
pub fn zero_cost_velocity(h: &Hamiltonian, z: &Vector) -> Vector {
    h.xi_gradient(z, &Vector::zeros(z.len()))
}

/// `Ψ(z, v − W) + Ψ*(z, −½dS) + ½<v, dS>`.
pub fn generic_residual(bundle: &Bundle, z: &Vector, v: &Vector) -> Result<f64> {
    let ps = bundle
        .psi_star
        .as_ref()
        .ok_or_else(|| invalid("generic_residual needs psi_star"))?;
    let ds = bundle.s.gradient(z);
    let w = bundle.drift(z).unwrap_or_else(|| Vector::zeros(z.len()));
    let psi = bundle.psi_value(z, &(v - w))?;
    Ok(psi + ps.eval(z, &(-0.5 * &ds)) + 0.5 * v.dot(&ds))
}

/// Residual of the variational characterization at the bundle's own flow.
pub fn check_generic_residual(bundle: &Bundle, states: &[Vector]) -> Result<CheckReport> {
    const NAME: &str = "generic-residual";
    const ID: &str = "Psi(z, F - W) + Psi*(z, -dS/2) + <F, dS>/2 = 0";
    nonempty(states.len())?;
    if bundle.psi.is_none() && (bundle.conjugation_box.is_none() || bundle.dim > 3) {
        return Ok(CheckReport::not_applicable(
            NAME,
            ID,
            "no analytic psi and no conjugation box",
        ));
    }
    let mut worst = WorstCase::new();
    for (i, z) in states.iter().enumerate() {
        let v = bundle.flow(z)?;
        let r = generic_residual(bundle, z, &v)?.abs();
        worst.push(i, r, || loc_state(z));
    }
    Ok(worst.report(NAME, ID, bundle.tol_residual()))
}

/// Every check applicable to the bundle's declared kind, on the default
/// Halton samples.
pub fn audit(bundle: &Bundle, count: usize) -> Result<Vec<CheckReport>> {
    let count = if count == 0 { DEFAULT_SAMPLES } else { count };
    let states = bundle.states(count);
    let pairs = bundle.state_covector_samples(count);
    let triples = bundle.state_covector_pairs(count);
    let tol = bundle.tol_struct();
    let mut out = Vec::new();

    let rel = bundle.positive_states;
    out.push(bundle.s.check_gradient_with(&states, rel)?);
    if let Some(e) = &bundle.e {
        let mut r = e.check_gradient_with(&states, rel)?;
        r.check_name = "energy-gradient-consistency".into();
        out.push(r);
    }
    if let Some(ps) = &bundle.psi_star {
        let mut r = ps.check_normalization(&states)?;
        r.check_name = "psi-star-normalization".into();
        r.tolerance = tol;
        out.push(rescore(r));
        let mut r = ps.check_convexity(&triples)?;
        r.check_name = "psi-star-convexity".into();
        out.push(r);
        out.push(with_tol(check_symmetry(ps, &pairs)?, tol));
    }
    if let Some(h) = &bundle.hamiltonian {
        out.push(with_tol(h.check_normalization(&states)?, tol));
    }
    if matches!(bundle.kind, Kind::PreGeneric | Kind::Generic) {
        let w = |z: &Vector| bundle.drift(z).unwrap_or_else(|| Vector::zeros(z.len()));
        out.push(discrete(bundle, check_orthogonality(&w, &bundle.s, &states)?));
    }
    if let Some(l) = &bundle.l {
        out.push(discrete(bundle, check_antisymmetry(l, &triples)?));
        out.push(with_tol(check_linearity(l, &triples)?, tol));
        let t = cubic_test_triple(bundle.dim);
        let mut r = check_jacobi(l, [&t[0], &t[1], &t[2]], &states, tol)?;
        if bundle.notes.iter().any(|n| n.contains("jacobi-unproven")) {
            r.note = Some("Jacobi identity checked numerically; no proof is available for this operator".into());
        }
        out.push(r);
        if bundle.kind == Kind::Generic {
            // inherits the base orthogonality error through extensions
            out.push(discrete(bundle, check_degeneracy_l(l, &bundle.s, &states)?));
        }
    }
    if bundle.kind == Kind::Generic {
        if let (Some(ps), Some(e)) = (&bundle.psi_star, &bundle.e) {
            out.push(with_tol(check_degeneracy_psi(ps, e, &pairs)?, tol));
        }
    }
    if bundle.psi_star.is_some() {
        out.push(check_generic_residual(bundle, &states)?);
    }
    Ok(out)
}

fn rescore(mut r: CheckReport) -> CheckReport {
    r.scale_tolerance(1.0);
    r
}

/// Scores against the discretization tolerance, flagged second order
/// when the bundle comes from a grid.
fn discrete(bundle: &Bundle, r: CheckReport) -> CheckReport {
    let mut r = with_tol(r, bundle.tol_discrete());
    if bundle.discretization_tol.is_some() {
        r.order = Some(2);
    }
    r
}

fn with_tol(mut r: CheckReport, tol: f64) -> CheckReport {
    r.tolerance = tol;
    rescore(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s_const_slope(c: f64) -> Functional {
        Functional::new(move |z| c * z[0], move |_| Vector::from_element(1, c))
    }

    #[test]
    fn richardson_gradient_is_accurate() {
        let f = |z: &Vector| z[0].sin() * z[1].exp();
        let z = Vector::from_vec(vec![0.3, -0.2]);
        let (g, diff) = richardson_gradient(&f, &z);
        assert!((g[0] - 0.3f64.cos() * (-0.2f64).exp()).abs() < 1e-9);
        assert!((g[1] - 0.3f64.sin() * (-0.2f64).exp()).abs() < 1e-9);
        assert!(diff < 1e-8);
    }

    #[test]
    fn gradient_check_catches_wrong_gradient() {
        let bad = Functional::new(|z| z[0] * z[0], |z| Vector::from_element(1, 3.0 * z[0]));
        let states: Vec<Vector> = (1..5).map(|i| Vector::from_element(1, i as f64)).collect();
        assert!(!bad.check_gradient(&states).unwrap().passed());
        let good = Functional::new(|z| z[0] * z[0], |z| Vector::from_element(1, 2.0 * z[0]));
        assert!(good.check_gradient(&states).unwrap().passed());
    }

    #[test]
    fn construction_example_by_hand() {
        // H2(ξ) = ½ξ² − ξ with dS = 2 gives Ψ*(ξ) = ½ξ²
        let h2 = Hamiltonian::new(|_, x| 0.5 * x.dot(x) - x[0], |_, x| x - Vector::from_element(1, 1.0));
        let s = s_const_slope(2.0);
        let ps = psi_star_from_hamiltonian(&h2, &s);
        let z = Vector::zeros(1);
        for x in [-2.0, -0.5, 0.0, 1.0, 3.0] {
            let xi = Vector::from_element(1, x);
            assert!((ps.eval(&z, &xi) - 0.5 * x * x).abs() < 1e-14);
        }
        let back = hamiltonian_from_psi_star(&ps, &s);
        for x in [-2.0, 0.0, 1.5] {
            let xi = Vector::from_element(1, x);
            assert!((back.eval(&z, &xi) - (0.5 * x * x - x)).abs() < 1e-14);
        }
        assert_eq!(zero_cost_velocity(&h2, &z)[0], -1.0);
    }

    #[test]
    fn odd_hamiltonian_is_not_reversible() {
        let h = Hamiltonian::from_value(|_, x| x[0].powi(3));
        let s = s_const_slope(0.0);
        let samples: Vec<(Vector, Vector)> = (1..10)
            .map(|i| (Vector::zeros(1), Vector::from_element(1, 0.3 * i as f64)))
            .collect();
        assert!(!check_reversibility(&h, &s, &samples).unwrap().passed());
    }

    #[test]
    fn broken_operator_fails_jacobi_with_hand_value() {
        // L = [[0,1,0],[-1,0,z2],[0,-z2,0]]: antisymmetric, Jacobi sum for the
        // coordinate functions is L21 = -1
        let l = PoissonOperator::from_matrix(|z| {
            Matrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, -1.0, 0.0, z[1], 0.0, -z[1], 0.0])
        })
        .with_derivative(|_| {
            let mut d1 = Matrix::zeros(3, 3);
            d1[(1, 2)] = 1.0;
            d1[(2, 1)] = -1.0;
            vec![Matrix::zeros(3, 3), d1, Matrix::zeros(3, 3)]
        });
        let coord = |k: usize| {
            let mut b = Vector::zeros(3);
            b[k] = 1.0;
            Functional::quadratic(0.0, b, Matrix::zeros(3, 3))
        };
        let (f1, f2, f3) = (coord(0), coord(1), coord(2));
        let z = Vector::from_vec(vec![0.2, 0.7, -0.4]);
        let r = jacobi_residual(&l, [&f1, &f2, &f3], &z).unwrap();
        assert!((r + 1.0).abs() < 1e-14, "{r}");
        let rep = check_jacobi(&l, [&f1, &f2, &f3], &[z], 1e-10).unwrap();
        assert!(!rep.passed());
    }

    #[test]
    fn jacobi_needs_hessians() {
        let l = PoissonOperator::constant(Matrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]));
        let f = Functional::from_value(|z| z[0]);
        let r = check_jacobi(&l, [&f, &f, &f], &[Vector::zeros(2)], 1e-10).unwrap();
        assert_eq!(r.verdict, crate::report::Verdict::NotApplicable);
    }

    #[test]
    fn decomposition_reassembles() {
        let a = 0.7;
        let h = Hamiltonian::from_value(move |_, x| a * x[0] + 0.5 * x[0] * x[0]);
        let w = VectorField::new(move |_| Vector::from_element(1, a));
        let (h1, h2) = decompose_hamiltonian(&h, &w);
        let z = Vector::zeros(1);
        for x in [-1.0, 0.3, 2.0] {
            let xi = Vector::from_element(1, x);
            assert!((h2.eval(&z, &xi) - 0.5 * x * x).abs() < 1e-15);
            assert_eq!(h1.eval(&z, &xi) + h2.eval(&z, &xi), h.eval(&z, &xi));
        }
    }

    #[test]
    fn bundle_validation_enforces_kind() {
        let s = Functional::quadratic(0.0, Vector::zeros(2), Matrix::identity(2, 2));
        let b = Bundle::new("x", 2, Kind::Generic, s.clone());
        assert!(b.validate().is_err());
        let mut b = Bundle::new("x", 2, Kind::GradientFlow, s);
        b.psi_star = Some(Hamiltonian::quadratic(|_| Matrix::identity(2, 2)));
        assert!(b.validate().is_ok());
    }
}
