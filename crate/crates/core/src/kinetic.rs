//! Phase-space grid discretization of the kinetic models with Andersen or
//! Fokker–Planck momentum dissipation.
//!
//! Densities live on a `(q, p)` grid stored row-major with `p` fastest.
//! Pairings of a tangent field `v` with a cotangent field `ξ` are
//! `Σ v ξ · cellvol`.

use crate::error::{invalid, Error, Result};
use crate::legendre::{Axis, Convexity, Grid, SampledFunction};
use crate::report::{CheckReport, Location};
use crate::structure::{Bundle, Functional, Hamiltonian, Kind, PoissonOperator, Vector};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::sync::Arc;

pub const MIN_NODES: usize = 8;
/// Largest Maxwellian mass allowed outside the momentum window.
pub const TAIL_MASS: f64 = 1e-8;
/// Densities below this are treated as zero.
pub const TINY: f64 = 1e-300;
/// Cumulative clipped mass beyond which a run is tainted.
pub const TAINT_MASS: f64 = 1e-6;
pub const CFL_SAFETY: f64 = 0.4;
/// Tolerance of identities that hold exactly on the grid.
pub const TOL_EXACT: f64 = 1e-12;
/// Discretization tolerance `TOL_KINETIC_BASE · h²` for identities that
/// hold to second order in the spacing.
pub const TOL_KINETIC_BASE: f64 = 0.25;
/// Tolerance on the mass balance of the grid operators.
pub const TOL_MASS: f64 = 1e-10;

/// Rectangular phase-space grid. The `q`-axis is periodic (nodes
/// `q_min + i·h`, `q_max` excluded) or truncated (both ends included); the
/// `p`-axis is `[-p_max, p_max]` with both ends included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct PhaseGrid {
    pub q_min: f64,
    pub q_max: f64,
    pub nq: usize,
    pub periodic: bool,
    pub p_max: f64,
    pub np: usize,
}

impl PhaseGrid {
    pub fn new(q_min: f64, q_max: f64, nq: usize, periodic: bool, p_max: f64, np: usize) -> Result<Self> {
        if nq < MIN_NODES || np < MIN_NODES {
            return Err(invalid(format!("phase grid needs at least {MIN_NODES} nodes per axis")));
        }
        if !(q_max > q_min) || !q_min.is_finite() || !q_max.is_finite() {
            return Err(invalid("q-axis needs finite bounds with q_min < q_max"));
        }
        if !(p_max > 0.0 && p_max.is_finite()) {
            return Err(invalid("p_max must be positive"));
        }
        Ok(Self {
            q_min,
            q_max,
            nq,
            periodic,
            p_max,
            np,
        })
    }

    /// Periodic `[-π, π) × [-p_max, p_max]`.
    pub fn periodic(nq: usize, p_max: f64, np: usize) -> Result<Self> {
        Self::new(-std::f64::consts::PI, std::f64::consts::PI, nq, true, p_max, np)
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.q_min, self.q_max, self.nq, self.periodic, self.p_max, self.np).map(|_| ())
    }

    pub fn hq(&self) -> f64 {
        if self.periodic {
            (self.q_max - self.q_min) / self.nq as f64
        } else {
            (self.q_max - self.q_min) / (self.nq - 1) as f64
        }
    }

    pub fn hp(&self) -> f64 {
        2.0 * self.p_max / (self.np - 1) as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.hq() * self.hp()
    }

    pub fn q(&self, i: usize) -> f64 {
        self.q_min + i as f64 * self.hq()
    }

    pub fn p(&self, j: usize) -> f64 {
        // symmetric formula keeps p_j = -p_{np-1-j} exactly
        let n = (self.np - 1) as f64;
        (-self.p_max * (n - j as f64) + self.p_max * j as f64) / n
    }

    pub fn len(&self) -> usize {
        self.nq * self.np
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.np + j
    }

    pub fn max_spacing(&self) -> f64 {
        self.hq().max(self.hp())
    }

    /// Same domain with both spacings halved; the `p`-axis goes from `n`
    /// to `2n − 1` nodes.
    pub fn refined(&self) -> Self {
        Self {
            nq: if self.periodic { 2 * self.nq } else { 2 * self.nq - 1 },
            np: 2 * self.np - 1,
            ..*self
        }
    }

    /// Grid of the density as a [`SampledFunction`] domain.
    pub fn sample_grid(&self) -> Result<Grid> {
        let q_hi = self.q(self.nq - 1);
        Grid::new(vec![
            Axis::new(self.q_min, q_hi, self.nq)?,
            Axis::symmetric(self.p_max, self.np)?,
        ])
    }
}

/// Potentials on the line; all are even.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default, schemars::JsonSchema)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Potential {
    #[default]
    Zero,
    /// `½ k x²`
    Harmonic { k: f64 },
    /// `a (1 − cos(k x))`
    Cosine { a: f64, k: f64 },
    /// `a exp(−x²/(2s²))`
    Gaussian { a: f64, s: f64 },
}

impl Potential {
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            Potential::Zero => 0.0,
            Potential::Harmonic { k } => 0.5 * k * x * x,
            Potential::Cosine { a, k } => a * (1.0 - (k * x).cos()),
            Potential::Gaussian { a, s } => a * (-x * x / (2.0 * s * s)).exp(),
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            Potential::Zero => 0.0,
            Potential::Harmonic { k } => k * x,
            Potential::Cosine { a, k } => a * k * (k * x).sin(),
            Potential::Gaussian { a, s } => -a * x / (s * s) * (-x * x / (2.0 * s * s)).exp(),
        }
    }

    pub fn second_derivative(&self, x: f64) -> f64 {
        match *self {
            Potential::Zero => 0.0,
            Potential::Harmonic { k } => k,
            Potential::Cosine { a, k } => a * k * k * (k * x).cos(),
            Potential::Gaussian { a, s } => a / (s * s) * (x * x / (s * s) - 1.0) * (-x * x / (2.0 * s * s)).exp(),
        }
    }

    /// Upper bound of `|V''|` over the line.
    pub fn curvature_bound(&self) -> f64 {
        match *self {
            Potential::Zero => 0.0,
            Potential::Harmonic { k } => k.abs(),
            Potential::Cosine { a, k } => (a * k * k).abs(),
            Potential::Gaussian { a, s } => (a / (s * s)).abs(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match *self {
            Potential::Zero => true,
            Potential::Harmonic { k } => k == 0.0,
            Potential::Cosine { a, k } => a == 0.0 || k == 0.0,
            Potential::Gaussian { a, .. } => a == 0.0,
        }
    }

    pub(crate) fn validate(&self, what: &str) -> Result<()> {
        let ok = match *self {
            Potential::Zero => true,
            Potential::Harmonic { k } => k.is_finite(),
            Potential::Cosine { a, k } => a.is_finite() && k.is_finite(),
            Potential::Gaussian { a, s } => a.is_finite() && s.is_finite() && s > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("{what} has non-finite or degenerate parameters")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum Mechanism {
    Andersen,
    Vfp,
}

/// Parameters of a kinetic model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct KineticParams {
    pub grid: PhaseGrid,
    pub m: f64,
    pub gamma: f64,
    #[serde(default)]
    pub v: Potential,
    #[serde(default)]
    pub phi: Potential,
    pub mechanism: Mechanism,
}

/// A kinetic model with its grid tables.
#[derive(Debug, Clone)]
pub struct KineticModel {
    pub params: KineticParams,
    /// Maxwellian renormalized so that `Σ_j M_j h_p = 1`.
    maxwellian: Vec<f64>,
    /// `√(M_j M_j')`, row-major.
    kernel: Vec<f64>,
    v_nodes: Vec<f64>,
    /// `Φ(q_i − q_k)`, with minimal-image differences on periodic grids.
    phi_table: Vec<f64>,
    force_bound: f64,
}

fn erfc(x: f64) -> f64 {
    statrs::function::erf::erfc(x)
}

impl KineticModel {
    pub fn new(params: KineticParams) -> Result<Self> {
        let g = params.grid;
        g.validate()?;
        if !(params.m > 0.0 && params.m.is_finite()) {
            return Err(invalid("mass m must be positive"));
        }
        if !(params.gamma > 0.0 && params.gamma.is_finite()) {
            return Err(invalid("gamma must be positive"));
        }
        params.v.validate("V")?;
        params.phi.validate("Phi")?;
        let tail = erfc(g.p_max / (2.0 * params.m).sqrt());
        if tail > TAIL_MASS {
            return Err(invalid(format!(
                "momentum window ±{} leaves Maxwellian mass {tail:.2e} outside (limit {TAIL_MASS:.0e})",
                g.p_max
            )));
        }
        let hp = g.hp();
        let raw: Vec<f64> = (0..g.np).map(|j| (-g.p(j).powi(2) / (2.0 * params.m)).exp()).collect();
        let z: f64 = raw.iter().sum::<f64>() * hp;
        let maxwellian: Vec<f64> = raw.iter().map(|x| x / z).collect();
        let kernel = (0..g.np * g.np)
            .map(|k| (maxwellian[k / g.np] * maxwellian[k % g.np]).sqrt())
            .collect();
        let v_nodes: Vec<f64> = (0..g.nq).map(|i| params.v.value(g.q(i))).collect();
        let phi_table: Vec<f64> = (0..g.nq * g.nq)
            .map(|k| params.phi.value(q_difference(&g, k / g.nq, k % g.nq)))
            .collect();
        for i in 0..g.nq {
            for k in 0..g.nq {
                if (phi_table[i * g.nq + k] - phi_table[k * g.nq + i]).abs()
                    > 1e-14 * (1.0 + phi_table[i * g.nq + k].abs())
                {
                    return Err(invalid("Phi must be symmetric on the sampled difference axis"));
                }
            }
        }
        let v_force = (0..g.nq).map(|i| params.v.derivative(g.q(i)).abs()).fold(0.0, f64::max);
        let phi_force = (0..g.nq * g.nq)
            .map(|k| params.phi.derivative(q_difference(&g, k / g.nq, k % g.nq)).abs())
            .fold(0.0, f64::max);
        Ok(Self {
            params,
            maxwellian,
            kernel,
            v_nodes,
            phi_table,
            force_bound: v_force + phi_force,
        })
    }

    pub fn grid(&self) -> &PhaseGrid {
        &self.params.grid
    }

    /// Grid-renormalized Maxwellian on the `p` nodes.
    pub fn maxwellian(&self) -> &[f64] {
        &self.maxwellian
    }

    /// Same model on the refined grid.
    pub fn refined(&self) -> Result<Self> {
        Self::new(KineticParams {
            grid: self.params.grid.refined(),
            ..self.params
        })
    }

    /// `TOL_KINETIC_BASE · h²` with `h` the largest spacing.
    pub fn tol_kinetic(&self) -> f64 {
        TOL_KINETIC_BASE * self.grid().max_spacing().powi(2)
    }
}

fn q_difference(g: &PhaseGrid, i: usize, k: usize) -> f64 {
    let d = g.q(i) - g.q(k);
    if g.periodic {
        let l = g.q_max - g.q_min;
        let wrapped = d - l * (d / l).round();
        // the half-period image is ambiguous; fold it to +l/2
        if (wrapped.abs() - 0.5 * l).abs() < 1e-12 * l {
            0.5 * l
        } else {
            wrapped
        }
    } else {
        d
    }
}

/// Nonnegative density on a phase grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensity {
    pub grid: PhaseGrid,
    pub values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DensityDocument {
    grid: PhaseGrid,
    density: SampledFunction,
}

impl GridDensity {
    /// Checks nonnegativity and unit mass within `1e-10`.
    pub fn new(grid: PhaseGrid, values: Vec<f64>) -> Result<Self> {
        let d = Self::unchecked(grid, values)?;
        let mass = d.mass();
        if (mass - 1.0).abs() > 1e-10 {
            return Err(invalid(format!("density has mass {mass}, expected 1")));
        }
        Ok(d)
    }

    /// Scales nonnegative values to unit mass.
    pub fn normalized(grid: PhaseGrid, values: Vec<f64>) -> Result<Self> {
        let mut d = Self::unchecked(grid, values)?;
        let mass = d.mass();
        if !(mass > 0.0) {
            return Err(invalid("density has no mass"));
        }
        d.values.iter_mut().for_each(|x| *x /= mass);
        Ok(d)
    }

    fn unchecked(grid: PhaseGrid, values: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.len() {
            return Err(invalid(format!(
                "{} values for a {}-cell grid",
                values.len(),
                grid.len()
            )));
        }
        if let Some(k) = values.iter().position(|x| !x.is_finite() || *x < 0.0) {
            return Err(invalid(format!("density value at cell {k} is negative or not finite")));
        }
        Ok(Self { grid, values })
    }

    /// Wraps raw values without checks; used by the bundle adapter, whose
    /// states need not be normalized.
    pub(crate) fn raw(grid: PhaseGrid, values: Vec<f64>) -> Self {
        Self { grid, values }
    }

    pub fn from_fn(grid: PhaseGrid, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let values = (0..grid.len())
            .map(|k| f(grid.q(k / grid.np), grid.p(k % grid.np)))
            .collect();
        Self::normalized(grid, values)
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    /// `∫ρ dp` at each `q` node.
    pub fn q_marginal(&self) -> Vec<f64> {
        let hp = self.grid.hp();
        self.values
            .chunks(self.grid.np)
            .map(|c| c.iter().sum::<f64>() * hp)
            .collect()
    }

    /// `∫ρ dq` at each `p` node.
    pub fn p_marginal(&self) -> Vec<f64> {
        let g = self.grid;
        (0..g.np)
            .map(|j| (0..g.nq).map(|i| self.values[g.index(i, j)]).sum::<f64>() * g.hq())
            .collect()
    }

    /// `∫ f(q, p) ρ`.
    pub fn expectation(&self, f: impl Fn(f64, f64) -> f64) -> f64 {
        let g = self.grid;
        self.values
            .iter()
            .enumerate()
            .map(|(k, r)| r * f(g.q(k / g.np), g.p(k % g.np)))
            .sum::<f64>()
            * g.cell_volume()
    }

    pub fn l1_distance(&self, other: &GridDensity) -> Result<f64> {
        if self.grid != other.grid {
            return Err(invalid("densities live on different grids"));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * self.grid.cell_volume())
    }

    /// JSON document with the grid header and the values as a sampled
    /// function over `(q, p)`.
    pub fn to_json(&self) -> Result<String> {
        let density = SampledFunction::new(self.grid.sample_grid()?, self.values.clone(), Convexity::Unknown)?;
        Ok(serde_json::to_string_pretty(&DensityDocument {
            grid: self.grid,
            density,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: DensityDocument = serde_json::from_str(s)?;
        Self::unchecked(doc.grid, doc.density.values)
    }
}

fn check_grid(model: &KineticModel, rho: &GridDensity) {
    assert_eq!(model.grid(), &rho.grid, "density and model live on different grids");
}

/// Grid pairing `Σ a b · cellvol`.
pub fn grid_dot(grid: &PhaseGrid, a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() * grid.cell_volume()
}

/// Centered difference in `q`: periodic wrap, or the end value repeated
/// outside a truncated axis.
fn dq(g: &PhaseGrid, f: &[f64]) -> Vec<f64> {
    let (nq, np, h) = (g.nq, g.np, g.hq());
    let mut out = vec![0.0; f.len()];
    for i in 0..nq {
        let (lo, hi) = neighbours(i, nq, g.periodic);
        for j in 0..np {
            out[i * np + j] = (f[hi * np + j] - f[lo * np + j]) / (2.0 * h);
        }
    }
    out
}

/// Centered difference in `p` with the end value repeated outside the
/// window.
fn dp(g: &PhaseGrid, f: &[f64]) -> Vec<f64> {
    let (np, h) = (g.np, g.hp());
    let mut out = vec![0.0; f.len()];
    for (row, o) in f.chunks(np).zip(out.chunks_mut(np)) {
        for j in 0..np {
            let (lo, hi) = neighbours(j, np, false);
            o[j] = (row[hi] - row[lo]) / (2.0 * h);
        }
    }
    out
}

fn neighbours(i: usize, n: usize, periodic: bool) -> (usize, usize) {
    if periodic {
        ((i + n - 1) % n, (i + 1) % n)
    } else {
        (i.saturating_sub(1), (i + 1).min(n - 1))
    }
}

/// Logarithmic mean `(a − b)/(log a − log b)`; zero when either is not
/// positive.
pub fn log_mean(a: f64, b: f64) -> f64 {
    if a <= TINY || b <= TINY {
        return 0.0;
    }
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let x = hi / lo - 1.0;
    if x < 1e-4 {
        // series of x / log(1 + x)
        lo * (1.0 + x / 2.0 - x * x / 12.0 + x * x * x / 24.0)
    } else {
        (hi - lo) / (hi.ln() - lo.ln())
    }
}

/// `ρ`-weighted centered difference `Λ(ρ₊, ρ₋)(ξ₊ − ξ₋)/(2h)`, which equals
/// the plain difference of `ρ` when `ξ = log ρ`.
fn weighted_difference(rho_hi: f64, rho_lo: f64, xi_hi: f64, xi_lo: f64, h: f64) -> f64 {
    log_mean(rho_hi, rho_lo) * (xi_hi - xi_lo) / (2.0 * h)
}

/// `L(ρ)ξ = div(ρ J ∇ξ) = −∂_q(ρ ∂_pξ) + ∂_p(ρ ∂_qξ)`, with `ρ` replaced by
/// the logarithmic mean of the two stencil neighbours. The outer and inner
/// stencils commute, so `L(ρ) log ρ` vanishes up to rounding.
pub fn poisson_apply(rho: &GridDensity, xi: &[f64]) -> Vec<f64> {
    let g = rho.grid;
    assert_eq!(xi.len(), g.len(), "covector has the wrong size");
    let (nq, np) = (g.nq, g.np);
    let (r, hq, hp) = (&rho.values, g.hq(), g.hp());
    let mut flux_p = vec![0.0; g.len()];
    let mut flux_q = vec![0.0; g.len()];
    for i in 0..nq {
        let (ql, qh) = neighbours(i, nq, g.periodic);
        for j in 0..np {
            let (pl, ph) = neighbours(j, np, false);
            let k = i * np + j;
            let (a, b) = (i * np + ph, i * np + pl);
            flux_p[k] = weighted_difference(r[a], r[b], xi[a], xi[b], hp);
            let (a, b) = (qh * np + j, ql * np + j);
            flux_q[k] = weighted_difference(r[a], r[b], xi[a], xi[b], hq);
        }
    }
    let a = dq(&g, &flux_p);
    let b = dp(&g, &flux_q);
    a.iter().zip(&b).map(|(x, y)| y - x).collect()
}

/// `(Φ ∗ ρ)(q_i)` by direct summation over the `q`-marginal.
pub fn convolution(model: &KineticModel, rho: &GridDensity) -> Vec<f64> {
    let g = model.grid();
    if model.params.phi.is_zero() {
        return vec![0.0; g.nq];
    }
    let marg = rho.q_marginal();
    let hq = g.hq();
    (0..g.nq)
        .map(|i| {
            let row = &model.phi_table[i * g.nq..(i + 1) * g.nq];
            row.iter().zip(&marg).map(|(f, r)| f * r).sum::<f64>() * hq
        })
        .collect()
}

/// `dE(ρ)(q, p) = p²/2m + V(q) + (Φ ∗ ρ)(q)`.
pub fn grad_energy(model: &KineticModel, rho: &GridDensity) -> Vec<f64> {
    check_grid(model, rho);
    let g = model.grid();
    let conv = convolution(model, rho);
    let m = model.params.m;
    let mut out = vec![0.0; g.len()];
    for i in 0..g.nq {
        for j in 0..g.np {
            out[g.index(i, j)] = g.p(j).powi(2) / (2.0 * m) + model.v_nodes[i] + conv[i];
        }
    }
    out
}

/// `E(ρ) = ∫ (p²/2m + V + ½ Φ ∗ ρ) ρ`.
pub fn energy(model: &KineticModel, rho: &GridDensity) -> f64 {
    check_grid(model, rho);
    let g = model.grid();
    let conv = convolution(model, rho);
    let m = model.params.m;
    let mut total = 0.0;
    for i in 0..g.nq {
        for j in 0..g.np {
            let e = g.p(j).powi(2) / (2.0 * m) + model.v_nodes[i] + 0.5 * conv[i];
            total += e * rho.values[g.index(i, j)];
        }
    }
    total * g.cell_volume()
}

/// `S(ρ) = ∫ ρ log ρ + E(ρ)` with `0 log 0 = 0`.
pub fn entropy(model: &KineticModel, rho: &GridDensity) -> f64 {
    let g = model.grid();
    let ent: f64 = rho
        .values
        .iter()
        .map(|&r| if r > TINY { r * r.ln() } else { 0.0 })
        .sum::<f64>()
        * g.cell_volume();
    ent + energy(model, rho)
}

/// `log ρ + 1`, with cells below [`TINY`] clamped.
fn log_density_plus_one(rho: &GridDensity) -> Vec<f64> {
    rho.values.iter().map(|&r| r.max(TINY).ln() + 1.0).collect()
}

/// `dS(ρ) = log ρ + 1 + dE(ρ)`.
pub fn grad_entropy(model: &KineticModel, rho: &GridDensity) -> Vec<f64> {
    let de = grad_energy(model, rho);
    log_density_plus_one(rho).iter().zip(&de).map(|(a, b)| a + b).collect()
}

/// `W(ρ) = L(ρ) dE(ρ)`.
pub fn transport(model: &KineticModel, rho: &GridDensity) -> Vec<f64> {
    poisson_apply(rho, &grad_energy(model, rho))
}

/// `γ (M(p) ∫ρ(q, p′)dp′ − ρ(q, p))`.
pub fn dissipation_andersen(model: &KineticModel, rho: &GridDensity) -> Vec<f64> {
    check_grid(model, rho);
    let g = model.grid();
    let gamma = model.params.gamma;
    let marg = rho.q_marginal();
    let mut out = vec![0.0; g.len()];
    for i in 0..g.nq {
        for j in 0..g.np {
            let k = g.index(i, j);
            out[k] = gamma * (model.maxwellian[j] * marg[i] - rho.values[k]);
        }
    }
    out
}

/// `γ ∂_p(∂_pρ + ρ p/m)` in flux form on the staggered `p` nodes, with
/// zero flux through the ends of the window.
pub fn dissipation_vfp(model: &KineticModel, rho: &GridDensity) -> Vec<f64> {
    check_grid(model, rho);
    let g = model.grid();
    let (np, hp, m, gamma) = (g.np, g.hp(), model.params.m, model.params.gamma);
    let mut out = vec![0.0; g.len()];
    let mut flux = vec![0.0; np + 1];
    for (row, o) in rho.values.chunks(np).zip(out.chunks_mut(np)) {
        for j in 0..np - 1 {
            let pm = 0.5 * (g.p(j) + g.p(j + 1));
            flux[j + 1] = (row[j + 1] - row[j]) / hp + 0.5 * (row[j] + row[j + 1]) * pm / m;
        }
        for j in 0..np {
            o[j] = gamma * (flux[j + 1] - flux[j]) / hp;
        }
    }
    out
}

pub fn dissipation(model: &KineticModel, rho: &GridDensity) -> Vec<f64> {
    match model.params.mechanism {
        Mechanism::Andersen => dissipation_andersen(model, rho),
        Mechanism::Vfp => dissipation_vfp(model, rho),
    }
}

/// `∂_tρ = W(ρ) + G*(ρ)`.
pub fn velocity(model: &KineticModel, rho: &GridDensity) -> Vec<f64> {
    let w = transport(model, rho);
    let d = dissipation(model, rho);
    w.iter().zip(&d).map(|(a, b)| a + b).collect()
}

/// Column (fixed `q`) contribution to the Andersen Ψ*, without the factor
/// `γ h_q h_p²`.
fn andersen_column(model: &KineticModel, rho: &[f64], xi: &[f64]) -> f64 {
    let np = rho.len();
    let sq: Vec<f64> = rho.iter().map(|r| r.max(0.0).sqrt()).collect();
    let mut total = 0.0;
    for j in 0..np {
        if sq[j] == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for k in 0..np {
            let d = xi[k] - xi[j];
            // cosh(d) − 1 without cancellation
            let c = 2.0 * (0.5 * d).sinh().powi(2);
            row += c * model.kernel[j * np + k] * sq[k];
        }
        total += row * sq[j];
    }
    total
}

/// Staggered density `½(ρ_j + ρ_{j+1})`.
fn staggered(row: &[f64], j: usize) -> f64 {
    0.5 * (row[j] + row[j + 1])
}

/// Ψ*(ρ, ξ): `γ ΣΣ [cosh(ξ(q,p′) − ξ(q,p)) − 1] √(M M′) √(ρ ρ′)` for
/// Andersen, `γ Σ ρ̄ |D_pξ|²` on the staggered nodes for Fokker–Planck.
pub fn psi_star_kinetic(model: &KineticModel, rho: &GridDensity, xi: &[f64]) -> f64 {
    check_grid(model, rho);
    let g = model.grid();
    assert_eq!(xi.len(), g.len(), "covector has the wrong size");
    let (np, hq, hp, gamma) = (g.np, g.hq(), g.hp(), model.params.gamma);
    match model.params.mechanism {
        Mechanism::Andersen => {
            let cols: Vec<f64> = rho
                .values
                .par_chunks(np)
                .zip(xi.par_chunks(np))
                .map(|(r, x)| andersen_column(model, r, x))
                .collect();
            gamma * hq * hp * hp * cols.iter().sum::<f64>()
        }
        Mechanism::Vfp => {
            let mut total = 0.0;
            for (r, x) in rho.values.chunks(np).zip(xi.chunks(np)) {
                for j in 0..np - 1 {
                    total += staggered(r, j) * ((x[j + 1] - x[j]) / hp).powi(2);
                }
            }
            gamma * hq * hp * total
        }
    }
}

/// `∂_ξΨ*(ρ, ξ)` as a tangent field (the Riesz representative for the grid
/// pairing).
pub fn psi_star_gradient(model: &KineticModel, rho: &GridDensity, xi: &[f64]) -> Vec<f64> {
    check_grid(model, rho);
    let g = model.grid();
    let (np, hp, gamma) = (g.np, g.hp(), model.params.gamma);
    let mut out = vec![0.0; g.len()];
    match model.params.mechanism {
        Mechanism::Andersen => {
            out.par_chunks_mut(np)
                .zip(rho.values.par_chunks(np))
                .zip(xi.par_chunks(np))
                .for_each(|((o, r), x)| {
                    for j in 0..np {
                        let mut acc = 0.0;
                        for k in 0..np {
                            acc += (x[j] - x[k]).sinh()
                                * model.kernel[j * np + k]
                                * (r[j].max(0.0) * r[k].max(0.0)).sqrt();
                        }
                        o[j] = 2.0 * gamma * hp * acc;
                    }
                });
        }
        Mechanism::Vfp => {
            let mut flux = vec![0.0; np + 1];
            for ((o, r), x) in out.chunks_mut(np).zip(rho.values.chunks(np)).zip(xi.chunks(np)) {
                for j in 0..np - 1 {
                    flux[j + 1] = 2.0 * gamma * staggered(r, j) * (x[j + 1] - x[j]) / hp;
                }
                for j in 0..np {
                    o[j] = -(flux[j + 1] - flux[j]) / hp;
                }
            }
        }
    }
    out
}

/// Legendre dual `Ψ(ρ, v) = sup_ξ <v, ξ> − Ψ*(ρ, ξ)`, column by column.
/// Infinite unless every column of `v` has zero sum.
pub fn psi_kinetic(model: &KineticModel, rho: &GridDensity, v: &[f64]) -> f64 {
    check_grid(model, rho);
    let g = model.grid();
    let np = g.np;
    let cols: Vec<f64> = rho
        .values
        .par_chunks(np)
        .zip(v.par_chunks(np))
        .map(|(r, vc)| match model.params.mechanism {
            Mechanism::Vfp => vfp_dual_column(model, r, vc),
            Mechanism::Andersen => andersen_dual_column(model, r, vc),
        })
        .collect();
    cols.iter().sum::<f64>() * g.hq()
}

fn column_scale(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum::<f64>()
}

/// `Σ G²/(4γρ̄) h_p` with the flux `G` recovered from `v = −D⁻G`.
fn vfp_dual_column(model: &KineticModel, rho: &[f64], v: &[f64]) -> f64 {
    let g = model.grid();
    let (np, hp, gamma) = (g.np, g.hp(), model.params.gamma);
    let scale = column_scale(v);
    let mut flux = 0.0;
    let mut total = 0.0;
    for j in 0..np - 1 {
        flux -= hp * v[j];
        if flux == 0.0 {
            continue;
        }
        let rb = staggered(rho, j);
        if rb <= TINY {
            return f64::INFINITY;
        }
        total += flux * flux / (4.0 * gamma * rb);
    }
    let last = flux - hp * v[np - 1];
    if last.abs() > 1e-10 * hp * (1.0 + scale) {
        return f64::INFINITY;
    }
    total * hp
}

/// Newton ascent on the concave column objective.
fn andersen_dual_column(model: &KineticModel, rho: &[f64], v: &[f64]) -> f64 {
    let g = model.grid();
    let (hp, gamma) = (g.hp(), model.params.gamma);
    let scale = column_scale(v);
    let active: Vec<usize> = (0..rho.len()).filter(|&j| rho[j] > TINY).collect();
    if (0..rho.len()).any(|j| rho[j] <= TINY && v[j].abs() > 1e-14 * (1.0 + scale)) {
        return f64::INFINITY;
    }
    let vs: Vec<f64> = active.iter().map(|&j| v[j]).collect();
    if vs.iter().sum::<f64>().abs() > 1e-10 * (1.0 + scale) {
        return f64::INFINITY;
    }
    let n = active.len();
    if n == 0 || scale == 0.0 {
        return 0.0;
    }
    let sq: Vec<f64> = active.iter().map(|&j| rho[j].sqrt()).collect();
    let w = |a: usize, b: usize| model.kernel[active[a] * g.np + active[b]] * sq[a] * sq[b];
    let c = gamma * hp * hp;
    let objective = |x: &[f64]| -> f64 {
        let mut psi = 0.0;
        for a in 0..n {
            for b in 0..n {
                psi += 2.0 * (0.5 * (x[b] - x[a])).sinh().powi(2) * w(a, b);
            }
        }
        hp * vs.iter().zip(x).map(|(p, q)| p * q).sum::<f64>() - c * psi
    };
    let mut x = vec![0.0; n];
    let mut f = objective(&x);
    for _ in 0..200 {
        let mut grad = DVector::<f64>::zeros(n);
        let mut hess = DMatrix::<f64>::zeros(n, n);
        for a in 0..n {
            let mut ga = 0.0;
            for b in 0..n {
                if a == b {
                    continue;
                }
                let d = x[a] - x[b];
                ga += d.sinh() * w(a, b);
                let hab = 2.0 * c * d.cosh() * w(a, b);
                hess[(a, b)] -= hab;
                hess[(a, a)] += hab;
            }
            grad[a] = hp * vs[a] - 2.0 * c * ga;
        }
        let gnorm = grad.amax();
        if gnorm <= 1e-14 * hp * (1.0 + scale) {
            break;
        }
        // the constant direction is a null space of the Hessian
        let shift = hess.diagonal().amax().max(1e-300) / n as f64;
        hess.add_scalar_mut(shift);
        let step = match hess.cholesky() {
            Some(ch) => ch.solve(&grad),
            None => grad.clone(),
        };
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            let ft = objective(&trial);
            if ft >= f || t < 1e-12 {
                if ft >= f {
                    x = trial;
                    f = ft;
                }
                break;
            }
            t *= 0.5;
        }
        if t < 1e-12 {
            break;
        }
    }
    f
}

fn max_abs(a: &[f64]) -> (f64, usize) {
    a.iter().enumerate().fold((0.0, 0), |(m, k), (i, x)| {
        if x.abs() > m || x.is_nan() {
            (x.abs(), i)
        } else {
            (m, k)
        }
    })
}

fn cell_location(g: &PhaseGrid, k: usize) -> Location {
    Location {
        state: vec![g.q(k / g.np), g.p(k % g.np)],
        note: Some("worst cell (q, p)".into()),
        ..Default::default()
    }
}

/// `‖∂_ξΨ*(ρ, −½dS(ρ)) − G*(ρ)‖_∞`, the drift identity of the dissipative
/// part.
pub fn drift_identity_residual(model: &KineticModel, rho: &GridDensity) -> (f64, usize) {
    let half: Vec<f64> = grad_entropy(model, rho).iter().map(|x| -0.5 * x).collect();
    let lhs = psi_star_gradient(model, rho, &half);
    let rhs = dissipation(model, rho);
    let diff: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
    max_abs(&diff)
}

pub fn verify_drift_identity(model: &KineticModel, rho: &GridDensity) -> CheckReport {
    let (r, k) = drift_identity_residual(model, rho);
    CheckReport::new(
        "drift-identity",
        "d_xi Psi*(rho, -dS/2) = G*(rho)",
        r,
        model.tol_kinetic(),
        model.grid().len(),
    )
    .with_order(2)
    .with_location(cell_location(model.grid(), k))
}

/// `‖L(ρ)(dS − dE)‖_∞`.
pub fn poisson_degeneracy_residual(model: &KineticModel, rho: &GridDensity) -> (f64, usize) {
    check_grid(model, rho);
    max_abs(&poisson_apply(rho, &log_density_plus_one(rho)))
}

pub fn check_poisson_degeneracy(model: &KineticModel, rho: &GridDensity) -> CheckReport {
    let (r, k) = poisson_degeneracy_residual(model, rho);
    CheckReport::new(
        "poisson-entropy-degeneracy",
        "L(rho)(dS - dE) = 0",
        r,
        TOL_EXACT,
        model.grid().len(),
    )
    .with_location(cell_location(model.grid(), k))
}

/// `<W(ρ), dS(ρ)>` on the grid.
pub fn orthogonality_residual(model: &KineticModel, rho: &GridDensity) -> f64 {
    grid_dot(model.grid(), &transport(model, rho), &grad_entropy(model, rho))
}

pub fn check_orthogonality(model: &KineticModel, rho: &GridDensity) -> CheckReport {
    CheckReport::new(
        "orthogonality",
        "<W(rho), dS(rho)> = 0",
        orthogonality_residual(model, rho).abs(),
        model.tol_kinetic(),
        1,
    )
    .with_order(2)
}

/// `|Σ W cellvol|` and the largest per-column `|Σ_p G* h_p|`.
pub fn mass_balance(model: &KineticModel, rho: &GridDensity) -> (f64, f64) {
    let g = model.grid();
    let w = transport(model, rho);
    let total = w.iter().sum::<f64>() * g.cell_volume();
    let d = dissipation(model, rho);
    let col = d
        .chunks(g.np)
        .map(|c| (c.iter().sum::<f64>() * g.hp()).abs())
        .fold(0.0, f64::max);
    (total.abs(), col)
}

/// Smooth random covector: a few Fourier modes in `q` times a cubic in `p`.
pub fn smooth_covector(grid: &PhaseGrid, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
    let c: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (qs, ps) = q_scale(grid);
    (0..grid.len())
        .map(|k| {
            let x = (grid.q(k / grid.np) - qs) / ps;
            let p = grid.p(k % grid.np) / grid.p_max;
            let fq = c[0] + c[1] * x.cos() + c[2] * x.sin() + c[3] * (2.0 * x).cos() + c[4] * (2.0 * x).sin();
            let fp = c[5] + c[6] * p + c[7] * p * p + c[8] * p * p * p;
            fq * fp + c[9] * p
        })
        .collect()
}

/// Centre and angular scale of the `q`-axis for smooth test fields.
fn q_scale(grid: &PhaseGrid) -> (f64, f64) {
    let l = grid.q_max - grid.q_min;
    (grid.q_min + 0.5 * l, l / (2.0 * std::f64::consts::PI))
}

/// Smooth, strictly positive random density: Gaussian in `p` with random
/// temperature and drift, modulated by Fourier modes in `q` (and a Gaussian
/// envelope on truncated axes). The same seed gives the same function on
/// every grid.
pub fn random_smooth(model: &KineticModel, seed: u64) -> Result<GridDensity> {
    let g = *model.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = || rng.random_range(-1.0f64..1.0);
    let (a1, b1, a2, b2) = (0.5 * u(), 0.5 * u(), 0.25 * u(), 0.25 * u());
    let temp = model.params.m * (1.0 + 0.3 * u());
    let drift = 0.5 * u();
    let tilt = 0.3 * u();
    let (qs, ps) = q_scale(&g);
    let width = 0.2 * (g.q_max - g.q_min);
    let periodic = g.periodic;
    GridDensity::from_fn(g, move |q, p| {
        let x = (q - qs) / ps;
        let modes = a1 * x.cos() + b1 * x.sin() + a2 * (2.0 * x).cos() + b2 * (2.0 * x).sin();
        let envelope = if periodic {
            0.0
        } else {
            -(q - qs).powi(2) / (2.0 * width * width)
        };
        let pp = p - drift - tilt * x.sin();
        (modes + envelope - pp * pp / (2.0 * temp)).exp()
    })
}

/// Gibbs density `∝ exp(−p²/2m − V(q))` on the grid.
pub fn gibbs(model: &KineticModel) -> Result<GridDensity> {
    let g = *model.grid();
    let (m, v) = (model.params.m, model.params.v);
    GridDensity::from_fn(g, move |q, p| (-(p * p / (2.0 * m) + v.value(q))).exp())
}

/// Product of Gaussians centred at `(q0, p0)`.
pub fn gaussian_blob(grid: PhaseGrid, q0: f64, p0: f64, sq: f64, sp: f64) -> Result<GridDensity> {
    GridDensity::from_fn(grid, move |q, p| {
        (-(q - q0).powi(2) / (2.0 * sq * sq) - (p - p0).powi(2) / (2.0 * sp * sp)).exp()
    })
}

/// Largest stable step for the current density.
pub fn cfl_bound(model: &KineticModel) -> f64 {
    let g = model.grid();
    let (m, gamma) = (model.params.m, model.params.gamma);
    let transport_q = g.hq() * m / g.p_max;
    let transport_p = if model.force_bound > 0.0 {
        g.hp() / model.force_bound
    } else {
        f64::INFINITY
    };
    let diss = match model.params.mechanism {
        Mechanism::Vfp => g.hp().powi(2) / (2.0 * gamma),
        Mechanism::Andersen => 1.0 / gamma,
    };
    CFL_SAFETY * transport_q.min(transport_p).min(diss)
}

/// Outcome of one accepted step.
#[derive(Debug, Clone)]
pub struct KineticStep {
    pub density: GridDensity,
    /// `|mass − 1|` before clipping and renormalization.
    pub mass_drift: f64,
    pub clipped_mass: f64,
}

fn axpy(a: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(xi, yi)| yi + a * xi).collect()
}

/// One RK4 step of `∂_tρ = W(ρ) + G*(ρ)`, then clipping of negative cells
/// and renormalization.
pub fn step_kinetic(model: &KineticModel, rho: &GridDensity, dt: f64) -> Result<KineticStep> {
    check_grid(model, rho);
    if !(dt >= 0.0 && dt.is_finite()) {
        return Err(invalid(format!("time step must be nonnegative, got {dt}")));
    }
    let bound = cfl_bound(model);
    if dt > bound {
        return Err(Error::Cfl { dt, bound });
    }
    if dt == 0.0 {
        return Ok(KineticStep {
            density: rho.clone(),
            mass_drift: 0.0,
            clipped_mass: 0.0,
        });
    }
    let g = rho.grid;
    let at = |v: Vec<f64>| GridDensity::raw(g, v);
    let r0 = &rho.values;
    let k1 = velocity(model, rho);
    let k2 = velocity(model, &at(axpy(0.5 * dt, &k1, r0)));
    let k3 = velocity(model, &at(axpy(0.5 * dt, &k2, r0)));
    let k4 = velocity(model, &at(axpy(dt, &k3, r0)));
    let mut next: Vec<f64> = (0..g.len())
        .map(|k| r0[k] + dt / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]))
        .collect();
    if next.iter().any(|x| !x.is_finite()) {
        return Err(Error::BlowUp {
            step: 1,
            time: dt,
            reason: "density became non-finite".into(),
        });
    }
    let cv = g.cell_volume();
    let mass = next.iter().sum::<f64>() * cv;
    let mut clipped = 0.0;
    for x in next.iter_mut() {
        if *x < 0.0 {
            clipped -= *x;
            *x = 0.0;
        }
    }
    let clipped_mass = clipped * cv;
    let total = next.iter().sum::<f64>() * cv;
    next.iter_mut().for_each(|x| *x /= total);
    Ok(KineticStep {
        density: GridDensity::raw(g, next),
        mass_drift: (mass - 1.0).abs(),
        clipped_mass,
    })
}

/// Per-step monitor record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorRow {
    pub t: f64,
    pub mass_drift: f64,
    pub clipped_mass: f64,
    pub entropy: f64,
    pub energy: f64,
    pub w_ds: f64,
    pub poisson_degeneracy: f64,
    pub drift_identity: f64,
}

#[derive(Debug, Clone)]
pub struct KineticRun {
    pub dt: f64,
    pub density: GridDensity,
    pub monitor: Vec<MonitorRow>,
    pub clipped_total: f64,
    pub tainted: bool,
}

fn monitor_row(model: &KineticModel, rho: &GridDensity, t: f64, step: Option<&KineticStep>) -> MonitorRow {
    MonitorRow {
        t,
        mass_drift: step.map_or(0.0, |s| s.mass_drift),
        clipped_mass: step.map_or(0.0, |s| s.clipped_mass),
        entropy: entropy(model, rho),
        energy: energy(model, rho),
        w_ds: orthogonality_residual(model, rho),
        poisson_degeneracy: poisson_degeneracy_residual(model, rho).0,
        drift_identity: drift_identity_residual(model, rho).0,
    }
}

/// `steps` RK4 steps from `rho0`, recording the monitor every step.
pub fn run_kinetic(model: &KineticModel, rho0: &GridDensity, dt: f64, steps: usize) -> Result<KineticRun> {
    let bound = cfl_bound(model);
    if dt > bound {
        return Err(Error::Cfl { dt, bound });
    }
    let mut rho = rho0.clone();
    let mut monitor = vec![monitor_row(model, &rho, 0.0, None)];
    let mut clipped_total = 0.0;
    for k in 1..=steps {
        let s = step_kinetic(model, &rho, dt).map_err(|e| match e {
            Error::BlowUp { reason, .. } => Error::BlowUp {
                step: k,
                time: k as f64 * dt,
                reason,
            },
            other => other,
        })?;
        clipped_total += s.clipped_mass;
        monitor.push(monitor_row(model, &s.density, k as f64 * dt, Some(&s)));
        rho = s.density;
    }
    Ok(KineticRun {
        dt,
        density: rho,
        monitor,
        clipped_total,
        tainted: clipped_total > TAINT_MASS,
    })
}

impl KineticRun {
    /// CSV with columns `t, mass_drift, clipped_mass, S, E, W_dS, poisson_degeneracy,
    /// drift_identity`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "t,mass_drift,clipped_mass,S,E,W_dS,poisson_degeneracy,drift_identity")?;
        for r in &self.monitor {
            let cells = [
                r.t,
                r.mass_drift,
                r.clipped_mass,
                r.entropy,
                r.energy,
                r.w_ds,
                r.poisson_degeneracy,
                r.drift_identity,
            ];
            let line: Vec<String> = cells.iter().map(|x| crate::flow::fmt(*x)).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    /// Largest entropy increase rate, against `10·dt²`.
    pub fn monitor_lyapunov(&self) -> CheckReport {
        let tol = 10.0 * self.dt * self.dt;
        let (worst, at) = self
            .monitor
            .windows(2)
            .enumerate()
            .map(|(k, w)| (((w[1].entropy - w[0].entropy) / self.dt).max(0.0), k + 1))
            .fold((0.0, 0), |a, b| if b.0 > a.0 { b } else { a });
        let mut r = CheckReport::new(
            "lyapunov",
            "S is nonincreasing along the flow",
            worst,
            tol,
            self.monitor.len().saturating_sub(1),
        )
        .with_location(Location {
            note: Some(format!("t = {}", self.monitor[at].t)),
            ..Default::default()
        });
        r.tainted = self.tainted;
        r
    }

    pub fn max_mass_drift(&self) -> f64 {
        self.monitor.iter().map(|r| r.mass_drift).fold(0.0, f64::max)
    }
}

/// Structure checks of the kinetic model at the given densities: exact
/// identities against [`TOL_EXACT`], second-order ones against
/// [`KineticModel::tol_kinetic`].
pub fn audit_kinetic(model: &KineticModel, densities: &[GridDensity]) -> Result<Vec<CheckReport>> {
    if densities.is_empty() {
        return Err(invalid("no densities to audit"));
    }
    let g = *model.grid();
    let tol = model.tol_kinetic();
    let worst = |name: &str, id: &str, tol: f64, order: Option<u8>, f: &dyn Fn(usize, &GridDensity) -> f64| {
        let (mut r, mut at) = (0.0f64, 0);
        for (i, d) in densities.iter().enumerate() {
            let x = f(i, d);
            if x > r || x.is_nan() {
                r = x;
                at = i;
            }
        }
        let mut rep = CheckReport::new(name, id, r, tol, densities.len()).with_location(Location {
            note: Some(format!("density sample {at}")),
            ..Default::default()
        });
        rep.order = order;
        rep
    };
    let cov = |i: usize, s: u64| smooth_covector(&g, 2 * i as u64 + s);
    let (drift_tol, drift_order) = match model.params.mechanism {
        Mechanism::Andersen => (TOL_EXACT, None),
        Mechanism::Vfp => (tol, Some(2)),
    };
    let mut out = vec![
        worst(
            "poisson-entropy-degeneracy",
            "L(rho)(dS - dE) = 0",
            TOL_EXACT,
            None,
            &|_, d| poisson_degeneracy_residual(model, d).0,
        ),
        worst("poisson-constant-kernel", "L(rho) 1 = 0", TOL_EXACT, None, &|_, d| {
            max_abs(&poisson_apply(d, &vec![1.0; g.len()])).0
        }),
        worst("orthogonality", "<W(rho), dS(rho)> = 0", tol, Some(2), &|_, d| {
            orthogonality_residual(model, d).abs()
        }),
        worst("antisymmetry", "<L xi, eta> = -<L eta, xi>", tol, Some(2), &|i, d| {
            let (a, b) = (cov(i, 0), cov(i, 1));
            (grid_dot(&g, &poisson_apply(d, &a), &b) + grid_dot(&g, &poisson_apply(d, &b), &a)).abs()
        }),
        // the Andersen kernel satisfies the identity to rounding on the grid
        worst(
            "drift-identity",
            "d_xi Psi*(rho, -dS/2) = G*(rho)",
            drift_tol,
            drift_order,
            &|_, d| drift_identity_residual(model, d).0,
        ),
        worst("transport-mass-balance", "sum W(rho) = 0", TOL_MASS, None, &|_, d| {
            mass_balance(model, d).0
        }),
        worst(
            "dissipation-column-balance",
            "sum_p G*(rho) = 0 for every q",
            TOL_EXACT,
            None,
            &|_, d| mass_balance(model, d).1,
        ),
        worst(
            "psi-star-normalization",
            "Psi*(rho, 0) = 0",
            TOL_EXACT,
            None,
            &|_, d| psi_star_kinetic(model, d, &vec![0.0; g.len()]).abs(),
        ),
        worst(
            "psi-star-symmetry",
            "Psi*(rho, xi) = Psi*(rho, -xi)",
            TOL_EXACT,
            None,
            &|i, d| {
                let a = cov(i, 0);
                let neg: Vec<f64> = a.iter().map(|x| -x).collect();
                let (p, n) = (psi_star_kinetic(model, d, &a), psi_star_kinetic(model, d, &neg));
                (p - n).abs() / (1.0 + p.abs())
            },
        ),
        worst(
            "psi-star-q-degeneracy",
            "Psi*(rho, xi(q)) = 0",
            TOL_EXACT,
            None,
            &|i, d| {
                let a = cov(i, 0);
                let q_only: Vec<f64> = (0..g.len()).map(|k| a[(k / g.np) * g.np]).collect();
                psi_star_kinetic(model, d, &q_only).abs()
            },
        ),
        worst(
            "generic-residual",
            "Psi(rho, F - W) + Psi*(rho, -dS/2) + <F, dS>/2 = 0",
            tol,
            Some(2),
            &|_, d| kinetic_generic_residual(model, d).abs(),
        ),
    ];
    let bound = cfl_bound(model);
    out.push(
        CheckReport::new(
            "cfl-bound-positive",
            "stable step bound is positive",
            if bound > 0.0 { 0.0 } else { 1.0 },
            0.0,
            1,
        )
        .with_note(format!("dt bound {bound:.4e}")),
    );
    Ok(out)
}

/// Generic residual at the model's own velocity.
pub fn kinetic_generic_residual(model: &KineticModel, rho: &GridDensity) -> f64 {
    let g = model.grid();
    let ds = grad_entropy(model, rho);
    let half: Vec<f64> = ds.iter().map(|x| -0.5 * x).collect();
    let diss = dissipation(model, rho);
    let f = velocity(model, rho);
    psi_kinetic(model, rho, &diss) + psi_star_kinetic(model, rho, &half) + 0.5 * grid_dot(g, &f, &ds)
}

/// The model as a pre-GENERIC [`Bundle`] on cell masses `m = ρ·cellvol`,
/// so that Euclidean gradients are functional derivatives and the
/// Euclidean pairing is the grid pairing. `L` is available through its
/// action only.
pub fn kinetic_bundle(model: &KineticModel, name: &str) -> Bundle {
    let model = Arc::new(model.clone());
    let g = *model.grid();
    let cv = g.cell_volume();
    let dens = move |z: &Vector| GridDensity::raw(g, z.iter().map(|x| x / cv).collect());
    let vec = |v: Vec<f64>| Vector::from_vec(v);
    let scaled = move |v: Vec<f64>| Vector::from_vec(v.into_iter().map(|x| x * cv).collect());

    let (m1, m2) = (model.clone(), model.clone());
    let s = Functional::new(
        move |z| entropy(&m1, &dens(z)),
        move |z| vec(grad_entropy(&m2, &dens(z))),
    );
    let (m1, m2) = (model.clone(), model.clone());
    let e = Functional::new(move |z| energy(&m1, &dens(z)), move |z| vec(grad_energy(&m2, &dens(z))));
    let l = PoissonOperator::from_apply(move |z, xi| scaled(poisson_apply(&dens(z), xi.as_slice())));
    let (m1, m2) = (model.clone(), model.clone());
    let psi_star = Hamiltonian::new(
        move |z, xi| psi_star_kinetic(&m1, &dens(z), xi.as_slice()),
        move |z, xi| scaled(psi_star_gradient(&m2, &dens(z), xi.as_slice())),
    );
    let m1 = model.clone();
    let psi: crate::structure::PairFn = Arc::new(move |z, v| {
        let rate: Vec<f64> = v.iter().map(|x| x / cv).collect();
        psi_kinetic(&m1, &dens(z), &rate)
    });
    let m1 = model.clone();
    let flow: crate::structure::VecFn = Arc::new(move |z| scaled(velocity(&m1, &dens(z))));

    let mut b = Bundle::new(name, g.len(), Kind::PreGeneric, s);
    b.e = Some(e);
    b.l = Some(l);
    b.psi_star = Some(psi_star);
    b.psi = Some(psi);
    b.flow = Some(flow);
    b.discretization_tol = Some(model.tol_kinetic());
    let m1 = model.clone();
    b.state_sampler = Some(Arc::new(move |count| {
        (0..count)
            .map(|i| {
                let d = random_smooth(&m1, 1000 + i as u64).expect("smooth density");
                Vector::from_vec(d.values.iter().map(|x| x * cv).collect())
            })
            .collect()
    }));
    b.covector_sampler = Some(Arc::new(move |count| {
        (0..count)
            .map(|i| Vector::from_vec(smooth_covector(&g, 5000 + i as u64)))
            .collect()
    }));
    b.positive_states = true;
    b.notes.push("jacobi-unproven".into());
    b
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(mech: Mechanism, n: usize) -> KineticModel {
        KineticModel::new(KineticParams {
            grid: PhaseGrid::periodic(n, 8.0, n).unwrap(),
            m: 1.0,
            gamma: 1.0,
            v: Potential::Cosine { a: 0.5, k: 1.0 },
            phi: Potential::Zero,
            mechanism: mech,
        })
        .unwrap()
    }

    #[test]
    fn log_mean_limits() {
        assert_eq!(log_mean(2.0, 2.0), 2.0);
        assert!((log_mean(1.0, std::f64::consts::E) - (std::f64::consts::E - 1.0)).abs() < 1e-15);
        assert!((log_mean(1.0, 1.0 + 1e-6) - (1.0 + 0.5e-6 - 1e-12 / 12.0)).abs() < 1e-15);
        assert_eq!(log_mean(0.0, 1.0), 0.0);
    }

    #[test]
    fn refined_grid_halves_spacing() {
        let g = PhaseGrid::periodic(64, 8.0, 64).unwrap();
        let r = g.refined();
        assert!((r.hq() - 0.5 * g.hq()).abs() < 1e-15);
        assert!((r.hp() - 0.5 * g.hp()).abs() < 1e-15);
        assert_eq!(r.p(2 * 5), g.p(5));
    }

    #[test]
    fn narrow_window_is_rejected() {
        let mut p = model(Mechanism::Vfp, 16).params;
        p.grid.p_max = 3.0;
        assert!(KineticModel::new(p).is_err());
    }

    #[test]
    fn poisson_degeneracy_is_exact_on_random_density() {
        let m = model(Mechanism::Andersen, 32);
        let r = random_smooth(&m, 3).unwrap();
        assert!(poisson_degeneracy_residual(&m, &r).0 <= TOL_EXACT);
    }

    #[test]
    fn dual_potential_inverts_gradient() {
        for mech in [Mechanism::Andersen, Mechanism::Vfp] {
            let m = model(mech, 16);
            let r = random_smooth(&m, 9).unwrap();
            let xi = smooth_covector(m.grid(), 4);
            let v = psi_star_gradient(&m, &r, &xi);
            // Fenchel equality at v = dPsi*(xi)
            let lhs = psi_kinetic(&m, &r, &v) + psi_star_kinetic(&m, &r, &xi);
            let rhs = grid_dot(m.grid(), &v, &xi);
            assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()), "{mech:?} {lhs} {rhs}");
        }
    }

    #[test]
    fn density_json_round_trip() {
        let m = model(Mechanism::Vfp, 8);
        let r = gibbs(&m).unwrap();
        let back = GridDensity::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
