//! Interacting particle systems whose empirical measures follow the kinetic
//! models, and the pre-limit Hamiltonians of their large deviations.

use crate::error::{invalid, Error, Result};
use crate::kinetic::{
    cfl_bound, gaussian_blob, run_kinetic, GridDensity, KineticModel, KineticParams, KineticRun, Mechanism, PhaseGrid,
    Potential,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

/// Random words reserved per particle and step; a step uses far fewer.
const WORDS_PER_STEP: u128 = 64;
/// Stream offset separating initial-condition draws from dynamics draws.
const INIT_STREAM: u64 = 1 << 62;
pub const STABILITY_SAFETY: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum ParticleMechanism {
    Andersen,
    Langevin,
}

impl ParticleMechanism {
    /// Kinetic model reached in the mean-field limit.
    pub fn kinetic(self) -> Mechanism {
        match self {
            ParticleMechanism::Andersen => Mechanism::Andersen,
            ParticleMechanism::Langevin => Mechanism::Vfp,
        }
    }
}

impl From<Mechanism> for ParticleMechanism {
    fn from(m: Mechanism) -> Self {
        match m {
            Mechanism::Andersen => ParticleMechanism::Andersen,
            Mechanism::Vfp => ParticleMechanism::Langevin,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct ParticleParams {
    pub m: f64,
    pub gamma: f64,
    #[serde(default)]
    pub v: Potential,
    #[serde(default)]
    pub phi: Potential,
    pub mechanism: ParticleMechanism,
    /// Positions live on the circle `[lo, hi)` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub periodic: Option<[f64; 2]>,
}

impl ParticleParams {
    pub fn from_kinetic(k: &KineticParams) -> Self {
        Self {
            m: k.m,
            gamma: k.gamma,
            v: k.v,
            phi: k.phi,
            mechanism: k.mechanism.into(),
            periodic: k.grid.periodic.then_some([k.grid.q_min, k.grid.q_max]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0 && self.m.is_finite()) {
            return Err(invalid("mass m must be positive"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(invalid("gamma must be nonnegative"));
        }
        self.v.validate("V")?;
        self.phi.validate("Phi")?;
        if let Some([lo, hi]) = self.periodic {
            if !(hi > lo) {
                return Err(invalid("periodic box needs lo < hi"));
            }
        }
        Ok(())
    }

    fn wrap(&self, q: f64) -> f64 {
        match self.periodic {
            Some([lo, hi]) => lo + (q - lo).rem_euclid(hi - lo),
            None => q,
        }
    }

    fn difference(&self, a: f64, b: f64) -> f64 {
        let d = a - b;
        match self.periodic {
            Some([lo, hi]) => {
                let l = hi - lo;
                d - l * (d / l).round()
            }
            None => d,
        }
    }

    /// Largest stable step: `0.4·min(2√(m/κ), m/γ)` with `κ` the curvature
    /// bound of `V + ½Φ`.
    pub fn stability_bound(&self) -> f64 {
        let kappa = self.v.curvature_bound() + 0.5 * self.phi.curvature_bound();
        let drift = if kappa > 0.0 {
            2.0 * (self.m / kappa).sqrt()
        } else {
            f64::INFINITY
        };
        let noise = if self.gamma > 0.0 {
            self.m / self.gamma
        } else {
            f64::INFINITY
        };
        STABILITY_SAFETY * drift.min(noise)
    }
}

/// `n` particles in one-dimensional phase space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleEnsemble {
    pub params: ParticleParams,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    /// Random stream of each particle; permuting particles together with
    /// their ids leaves every trajectory unchanged.
    pub ids: Vec<u64>,
    pub time: f64,
    pub steps: u64,
    pub seed: u64,
}

fn key(seed: u64) -> [u8; 32] {
    ChaCha8Rng::seed_from_u64(seed).get_seed()
}

/// Generator of particle `id` at word block `block`; counter-based, so
/// draws do not depend on particle count or iteration order.
fn stream(key: &[u8; 32], id: u64, block: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::from_seed(*key);
    r.set_stream(id);
    r.set_word_pos(block as u128 * WORDS_PER_STEP);
    r
}

impl ParticleEnsemble {
    pub fn new(params: ParticleParams, q: Vec<f64>, p: Vec<f64>, seed: u64) -> Result<Self> {
        params.validate()?;
        if q.is_empty() || q.len() != p.len() {
            return Err(invalid("need equally many positions and momenta, at least one"));
        }
        if q.iter().chain(&p).any(|x| !x.is_finite()) {
            return Err(invalid("particle coordinates must be finite"));
        }
        let ids = (0..q.len() as u64).collect();
        let q = q.into_iter().map(|x| params.wrap(x)).collect();
        Ok(Self {
            params,
            q,
            p,
            ids,
            time: 0.0,
            steps: 0,
            seed,
        })
    }

    /// `n` particles drawn independently from `sample`, which receives a
    /// per-particle generator.
    pub fn sample(
        params: ParticleParams,
        n: usize,
        seed: u64,
        sample: impl Fn(&mut ChaCha8Rng) -> (f64, f64) + Sync,
    ) -> Result<Self> {
        let k = key(seed);
        let (q, p): (Vec<f64>, Vec<f64>) = (0..n as u64)
            .into_par_iter()
            .map(|i| sample(&mut stream(&k, INIT_STREAM + i, 0)))
            .unzip();
        Self::new(params, q, p, seed)
    }

    /// Independent Gaussian positions and momenta.
    pub fn gaussian(params: ParticleParams, n: usize, seed: u64, q0: f64, p0: f64, sq: f64, sp: f64) -> Result<Self> {
        Self::sample(params, n, seed, |r| {
            let (a, b): (f64, f64) = (r.sample(StandardNormal), r.sample(StandardNormal));
            (q0 + sq * a, p0 + sp * b)
        })
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    /// Reorders particles (with their random streams) by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        out.q = perm.iter().map(|&i| self.q[i]).collect();
        out.p = perm.iter().map(|&i| self.p[i]).collect();
        out.ids = perm.iter().map(|&i| self.ids[i]).collect();
        out
    }

    /// `(1/2n) Σ_j Φ'(q_i − q_j)`, summed in id order.
    pub fn interaction_force(&self) -> Vec<f64> {
        let n = self.len();
        if self.params.phi.is_zero() {
            return vec![0.0; n];
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| self.ids[i]);
        let qs: Vec<f64> = order.iter().map(|&i| self.q[i]).collect();
        let prm = self.params;
        self.q
            .par_iter()
            .map(|&qi| {
                qs.iter()
                    .map(|&qj| prm.phi.derivative(prm.difference(qi, qj)))
                    .sum::<f64>()
                    / (2.0 * n as f64)
            })
            .collect()
    }

    /// Symplectic Euler drift `q += (p/m)dt`, `p −= (V'(q) + (1/2n)ΣΦ')dt`,
    /// then the momentum mechanism: Andersen resampling with probability
    /// `1 − e^{−γdt}`, or the Euler–Maruyama Ornstein–Uhlenbeck kick.
    pub fn step(&mut self, dt: f64) -> Result<()> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(invalid(format!("time step must be positive, got {dt}")));
        }
        let bound = self.params.stability_bound();
        if dt > bound {
            return Err(Error::Cfl { dt, bound });
        }
        let prm = self.params;
        let m = prm.m;
        for (q, p) in self.q.iter_mut().zip(&self.p) {
            *q = prm.wrap(*q + p / m * dt);
        }
        let inter = self.interaction_force();
        let k = key(self.seed);
        let block = self.steps;
        let jump = 1.0 - (-prm.gamma * dt).exp();
        let (sd_m, sd_l) = (m.sqrt(), (2.0 * prm.gamma * dt).sqrt());
        self.p
            .par_iter_mut()
            .zip(self.q.par_iter())
            .zip(inter.par_iter())
            .zip(self.ids.par_iter())
            .for_each(|(((p, &q), &f), &id)| {
                *p -= (prm.v.derivative(q) + f) * dt;
                if prm.gamma == 0.0 {
                    return;
                }
                let mut r = stream(&k, id, block);
                match prm.mechanism {
                    ParticleMechanism::Andersen => {
                        if r.random::<f64>() < jump {
                            *p = sd_m * r.sample::<f64, _>(StandardNormal);
                        }
                    }
                    ParticleMechanism::Langevin => {
                        *p += -prm.gamma * *p / m * dt + sd_l * r.sample::<f64, _>(StandardNormal);
                    }
                }
            });
        self.steps += 1;
        self.time = self.steps as f64 * dt;
        if let Some(i) = (0..self.len()).find(|&i| !(self.q[i].is_finite() && self.p[i].is_finite())) {
            return Err(Error::BlowUp {
                step: self.steps as usize,
                time: self.time,
                reason: format!("particle {} left the finite range", self.ids[i]),
            });
        }
        Ok(())
    }

    /// Advances by `steps` steps of size `dt`.
    pub fn run(&mut self, dt: f64, steps: usize) -> Result<()> {
        for _ in 0..steps {
            self.step(dt)?;
        }
        Ok(())
    }

    /// Per-particle energies `p²/2m + V(q)`.
    pub fn particle_energies(&self) -> Vec<f64> {
        self.q
            .iter()
            .zip(&self.p)
            .map(|(q, p)| p * p / (2.0 * self.params.m) + self.params.v.value(*q))
            .collect()
    }

    /// Flat little-endian layout: `n` as u64, then positions, then momenta.
    pub fn write_binary(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for x in self.q.iter().chain(&self.p) {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    /// Writes `<stem>.bin` and the `<stem>.json` sidecar.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(stem.with_extension("bin"))?);
        self.write_binary(&mut f)?;
        f.flush()?;
        std::fs::write(stem.with_extension("json"), self.sidecar_json()?)?;
        Ok(())
    }

    /// Sidecar with parameters, seed, clock and non-trivial ids.
    pub fn sidecar_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Sidecar::of(self))? + "\n")
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        let mut bytes = Vec::new();
        std::fs::File::open(stem.with_extension("bin"))?.read_to_end(&mut bytes)?;
        let word = |i: usize| -> Result<[u8; 8]> {
            bytes
                .get(8 * i..8 * i + 8)
                .and_then(|s| s.try_into().ok())
                .ok_or_else(|| invalid("particle binary is truncated"))
        };
        let n = u64::from_le_bytes(word(0)?) as usize;
        if bytes.len() != 8 * (1 + 2 * n) || n != side.n {
            return Err(invalid("particle binary does not match its sidecar"));
        }
        let read = |k: usize| -> Result<f64> { Ok(f64::from_le_bytes(word(k)?)) };
        let q = (0..n).map(|i| read(1 + i)).collect::<Result<Vec<_>>>()?;
        let p = (0..n).map(|i| read(1 + n + i)).collect::<Result<Vec<_>>>()?;
        let ids = side.ids.unwrap_or_else(|| (0..n as u64).collect());
        if ids.len() != n {
            return Err(invalid("sidecar ids do not match the particle count"));
        }
        Ok(Self {
            params: side.params,
            q,
            p,
            ids,
            time: side.time,
            steps: side.steps,
            seed: side.seed,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    n: usize,
    params: ParticleParams,
    seed: u64,
    time: f64,
    steps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ids: Option<Vec<u64>>,
}

impl Sidecar {
    fn of(e: &ParticleEnsemble) -> Self {
        let identity = e.ids.iter().enumerate().all(|(i, id)| *id == i as u64);
        Self {
            n: e.len(),
            params: e.params,
            seed: e.seed,
            time: e.time,
            steps: e.steps,
            ids: (!identity).then(|| e.ids.clone()),
        }
    }
}

/// Histogram of the particles on the cells around the grid nodes,
/// normalized by `n·cellvol`.
#[derive(Debug, Clone)]
pub struct Histogram {
    pub density: GridDensity,
    /// Particles outside every cell.
    pub spill: usize,
}

fn cell(x: f64, lo: f64, h: f64, n: usize, periodic: bool) -> Option<usize> {
    let k = ((x - lo) / h).round();
    if periodic {
        Some((k as i64).rem_euclid(n as i64) as usize)
    } else if k >= 0.0 && k < n as f64 {
        Some(k as usize)
    } else {
        None
    }
}

pub fn empirical_measure(ens: &ParticleEnsemble, grid: &PhaseGrid) -> Result<Histogram> {
    grid.validate()?;
    let mut counts = vec![0.0; grid.len()];
    let mut spill = 0;
    for (q, p) in ens.q.iter().zip(&ens.p) {
        let i = cell(*q, grid.q_min, grid.hq(), grid.nq, grid.periodic);
        let j = cell(*p, -grid.p_max, grid.hp(), grid.np, false);
        match (i, j) {
            (Some(i), Some(j)) => counts[grid.index(i, j)] += 1.0,
            _ => spill += 1,
        }
    }
    let scale = 1.0 / (ens.len() as f64 * grid.cell_volume());
    counts.iter_mut().for_each(|c| *c *= scale);
    Ok(Histogram {
        density: GridDensity {
            grid: *grid,
            values: counts,
        },
        spill,
    })
}

/// Snapshots of a long run after `burn_in` time units, every `thin` time
/// units.
pub fn sample_stationary(
    start: ParticleEnsemble,
    dt: f64,
    burn_in: f64,
    thin: f64,
    snapshots: usize,
) -> Result<Vec<ParticleEnsemble>> {
    let steps = |t: f64| (t / dt).round() as usize;
    let mut ens = start;
    ens.run(dt, steps(burn_in))?;
    let mut out = Vec::with_capacity(snapshots);
    for k in 0..snapshots {
        if k > 0 {
            ens.run(dt, steps(thin))?;
        }
        out.push(ens.clone());
    }
    Ok(out)
}

/// Kolmogorov–Smirnov distance between samples and a continuous CDF.
pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, x)| {
            let f = cdf(*x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Two-sample Kolmogorov–Smirnov distance.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Critical value of the one-sample KS distance at 99% for `n` samples.
pub fn ks_band_99(n: usize) -> f64 {
    1.63 / (n as f64).sqrt()
}

type PhaseFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// A test function on phase space with the derivatives the generators
/// need.
#[derive(Clone)]
pub struct InnerFunction {
    pub f: PhaseFn,
    pub dq: PhaseFn,
    pub dp: PhaseFn,
    pub dpp: PhaseFn,
}

impl InnerFunction {
    pub fn new(
        f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        dq: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        dp: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        dpp: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            f: Arc::new(f),
            dq: Arc::new(dq),
            dp: Arc::new(dp),
            dpp: Arc::new(dpp),
        }
    }
}

type OuterValue = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type OuterGrad = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// `F(ρ) = φ(<f₁, ρ>, …, <f_l, ρ>)`.
#[derive(Clone)]
pub struct CylinderFunction {
    pub inner: Vec<InnerFunction>,
    pub phi: OuterValue,
    pub grad: OuterGrad,
    pub hess: Arc<dyn Fn(&[f64]) -> Vec<Vec<f64>> + Send + Sync>,
}

impl CylinderFunction {
    pub fn new(
        inner: Vec<InnerFunction>,
        phi: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        hess: impl Fn(&[f64]) -> Vec<Vec<f64>> + Send + Sync + 'static,
    ) -> Result<Self> {
        if inner.is_empty() {
            return Err(invalid("a cylinder function needs at least one inner function"));
        }
        Ok(Self {
            inner,
            phi: Arc::new(phi),
            grad: Arc::new(grad),
            hess: Arc::new(hess),
        })
    }

    /// `φ(x) = c·x + ½xᵀAx`.
    pub fn quadratic(inner: Vec<InnerFunction>, c: Vec<f64>, a: Vec<Vec<f64>>) -> Result<Self> {
        let l = inner.len();
        if c.len() != l || a.len() != l || a.iter().any(|r| r.len() != l) {
            return Err(invalid("quadratic outer function has the wrong shape"));
        }
        let (c1, a1, c2, a2, a3) = (c.clone(), a.clone(), c, a.clone(), a);
        Self::new(
            inner,
            move |x| {
                (0..l)
                    .map(|i| c1[i] * x[i] + 0.5 * x[i] * (0..l).map(|j| a1[i][j] * x[j]).sum::<f64>())
                    .sum()
            },
            move |x| {
                (0..l)
                    .map(|i| c2[i] + (0..l).map(|j| a2[i][j] * x[j]).sum::<f64>())
                    .collect()
            },
            move |_| a3.clone(),
        )
    }

    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }

    /// Finite-difference spot check of the outer derivatives and the inner
    /// `p`-derivatives; returns the largest relative mismatch.
    pub fn derivative_mismatch(&self, x: &[f64], points: &[(f64, f64)]) -> f64 {
        let h = 1e-5;
        let l = self.len();
        let mut worst = 0.0f64;
        let rel = |a: f64, b: f64| (a - b).abs() / (1.0 + a.abs().max(b.abs()));
        let g = (self.grad)(x);
        let hs = (self.hess)(x);
        for i in 0..l {
            let (mut up, mut dn) = (x.to_vec(), x.to_vec());
            up[i] += h;
            dn[i] -= h;
            worst = worst.max(rel(g[i], ((self.phi)(&up) - (self.phi)(&dn)) / (2.0 * h)));
            let (gu, gd) = ((self.grad)(&up), (self.grad)(&dn));
            for j in 0..l {
                worst = worst.max(rel(hs[i][j], (gu[j] - gd[j]) / (2.0 * h)));
            }
        }
        for f in &self.inner {
            for &(q, p) in points {
                worst = worst.max(rel((f.dp)(q, p), ((f.f)(q, p + h) - (f.f)(q, p - h)) / (2.0 * h)));
                worst = worst.max(rel((f.dq)(q, p), ((f.f)(q + h, p) - (f.f)(q - h, p)) / (2.0 * h)));
                worst = worst.max(rel((f.dpp)(q, p), ((f.dp)(q, p + h) - (f.dp)(q, p - h)) / (2.0 * h)));
            }
        }
        worst
    }
}

/// Weighted point masses: an empirical measure or a grid density.
#[derive(Debug, Clone)]
pub struct PointMeasure {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub w: Vec<f64>,
}

impl PointMeasure {
    pub fn empirical(ens: &ParticleEnsemble) -> Self {
        let w = 1.0 / ens.len() as f64;
        Self {
            q: ens.q.clone(),
            p: ens.p.clone(),
            w: vec![w; ens.len()],
        }
    }

    pub fn from_grid(d: &GridDensity) -> Self {
        let g = d.grid;
        let cv = g.cell_volume();
        Self {
            q: (0..g.len()).map(|k| g.q(k / g.np)).collect(),
            p: (0..g.len()).map(|k| g.p(k % g.np)).collect(),
            w: d.values.iter().map(|r| r * cv).collect(),
        }
    }

    fn integrate(&self, f: impl Fn(f64, f64) -> f64) -> f64 {
        (0..self.w.len()).map(|k| self.w[k] * f(self.q[k], self.p[k])).sum()
    }
}

/// Quadrature of `∫ g(p′) M(p′) dp′` against the Maxwellian.
struct MaxwellQuadrature {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl MaxwellQuadrature {
    fn new(m: f64) -> Self {
        // the trapezoid rule is spectrally accurate for Gaussian weights
        let (n, r) = (801, 12.0 * m.sqrt());
        let h = 2.0 * r / (n - 1) as f64;
        let nodes: Vec<f64> = (0..n).map(|i| -r + i as f64 * h).collect();
        let weights = nodes
            .iter()
            .map(|p| h * (-p * p / (2.0 * m)).exp() / (2.0 * std::f64::consts::PI * m).sqrt())
            .collect();
        Self { nodes, weights }
    }
}

/// Pieces shared by the pre-limit and limit Hamiltonians.
struct Evaluation {
    x: Vec<f64>,
    grad: Vec<f64>,
    /// `<dF, B* + C*>`
    transport: f64,
}

fn evaluate(prm: &ParticleParams, rho: &PointMeasure, f: &CylinderFunction) -> Evaluation {
    let x: Vec<f64> = f.inner.iter().map(|fi| rho.integrate(|q, p| (fi.f)(q, p))).collect();
    let grad = (f.grad)(&x);
    let mean_force: Vec<f64> = if prm.phi.is_zero() {
        vec![0.0; rho.w.len()]
    } else {
        (0..rho.w.len())
            .map(|k| {
                (0..rho.w.len())
                    .map(|j| rho.w[j] * prm.phi.derivative(prm.difference(rho.q[k], rho.q[j])))
                    .sum()
            })
            .collect()
    };
    let m = prm.m;
    let transport = f
        .inner
        .iter()
        .zip(&grad)
        .map(|(fi, g)| {
            let t: f64 = (0..rho.w.len())
                .map(|k| {
                    let (q, p) = (rho.q[k], rho.p[k]);
                    rho.w[k] * (p / m * (fi.dq)(q, p) - (prm.v.derivative(q) + mean_force[k]) * (fi.dp)(q, p))
                })
                .sum();
            g * t
        })
        .sum();
    Evaluation { x, grad, transport }
}

/// `Σ_ij c_ij <∂_pf_i ∂_pf_j, ρ>` for a coefficient matrix `c`.
fn carre_du_champ(rho: &PointMeasure, f: &CylinderFunction, c: &dyn Fn(usize, usize) -> f64) -> f64 {
    let l = f.len();
    let mut total = 0.0;
    for i in 0..l {
        for j in 0..l {
            let cij = c(i, j);
            if cij != 0.0 {
                total += cij * rho.integrate(|q, p| (f.inner[i].dp)(q, p) * (f.inner[j].dp)(q, p));
            }
        }
    }
    total
}

/// `<dF, G*>` for the Ornstein–Uhlenbeck generator `γ(∂_p² − (p/m)∂_p)`.
fn vfp_drift(prm: &ParticleParams, rho: &PointMeasure, f: &CylinderFunction, grad: &[f64]) -> f64 {
    f.inner
        .iter()
        .zip(grad)
        .map(|(fi, g)| g * prm.gamma * rho.integrate(|q, p| (fi.dpp)(q, p) - p / prm.m * (fi.dp)(q, p)))
        .sum()
}

/// `γ ∫∫ [exp(Δ(q, p, p′)) − 1] M(p′) dp′ ρ(dq dp)`.
fn andersen_jump(
    prm: &ParticleParams,
    rho: &PointMeasure,
    f: &CylinderFunction,
    exponent: &(dyn Fn(&[f64]) -> f64 + Sync),
) -> f64 {
    let quad = MaxwellQuadrature::new(prm.m);
    let l = f.len();
    let total: f64 = (0..rho.w.len())
        .into_par_iter()
        .map(|k| {
            let (q, p) = (rho.q[k], rho.p[k]);
            let here: Vec<f64> = f.inner.iter().map(|fi| (fi.f)(q, p)).collect();
            let mut delta = vec![0.0; l];
            let mut acc = 0.0;
            for (pp, w) in quad.nodes.iter().zip(&quad.weights) {
                for i in 0..l {
                    delta[i] = (f.inner[i].f)(q, *pp) - here[i];
                }
                acc += w * exponent(&delta).exp_m1();
            }
            rho.w[k] * acc
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    prm.gamma * total
}

/// `H_nF(ρ) = (1/n) e^{−nF(ρ)} (A_n e^{nF})(ρ)` in closed form.
pub fn prelimit_hamiltonian(prm: &ParticleParams, rho: &PointMeasure, f: &CylinderFunction, n: usize) -> f64 {
    let ev = evaluate(prm, rho, f);
    let nf = n as f64;
    match prm.mechanism {
        ParticleMechanism::Langevin => {
            let hess = (f.hess)(&ev.x);
            ev.transport
                + vfp_drift(prm, rho, f, &ev.grad)
                + prm.gamma * carre_du_champ(rho, f, &|i, j| ev.grad[i] * ev.grad[j])
                + prm.gamma / nf * carre_du_champ(rho, f, &|i, j| hess[i][j])
        }
        ParticleMechanism::Andersen => {
            let base = (f.phi)(&ev.x);
            let x = ev.x.clone();
            let phi = f.phi.clone();
            let exponent = move |d: &[f64]| {
                let shifted: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + b / nf).collect();
                nf * (phi(&shifted) - base)
            };
            ev.transport + andersen_jump(prm, rho, f, &exponent)
        }
    }
}

/// `HF(ρ) = 𝓗(ρ, dF(ρ))`.
pub fn limit_hamiltonian(prm: &ParticleParams, rho: &PointMeasure, f: &CylinderFunction) -> f64 {
    let ev = evaluate(prm, rho, f);
    match prm.mechanism {
        ParticleMechanism::Langevin => {
            ev.transport
                + vfp_drift(prm, rho, f, &ev.grad)
                + prm.gamma * carre_du_champ(rho, f, &|i, j| ev.grad[i] * ev.grad[j])
        }
        ParticleMechanism::Andersen => {
            let g = ev.grad.clone();
            let exponent = move |d: &[f64]| g.iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
            ev.transport + andersen_jump(prm, rho, f, &exponent)
        }
    }
}

/// Gaussian initial law `(q0, p0, σ_q, σ_p)` shared by particles and PDE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct Blob {
    pub q0: f64,
    pub p0: f64,
    pub sq: f64,
    pub sp: f64,
}

/// L¹ distances between particle histograms and the kinetic solution for
/// one particle count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationRow {
    pub n: usize,
    pub mean: f64,
    pub std_err: f64,
    pub distances: Vec<f64>,
}

/// Runs the kinetic model and, for every `n` and seed, an `n`-particle
/// ensemble from the same initial law up to time `t`, comparing histograms
/// with the kinetic density.
pub fn propagation_study(
    model: &KineticModel,
    blob: Blob,
    ns: &[usize],
    seeds: &[u64],
    t: f64,
    dt: f64,
) -> Result<(Vec<PropagationRow>, KineticRun)> {
    if ns.is_empty() || seeds.is_empty() {
        return Err(invalid("need at least one particle count and one seed"));
    }
    let steps = crate::flow::step_count(t, dt)?;
    let g = *model.grid();
    let kin_steps = (t / (0.9 * cfl_bound(model))).ceil().max(1.0) as usize;
    let run = run_kinetic(
        model,
        &gaussian_blob(g, blob.q0, blob.p0, blob.sq, blob.sp)?,
        t / kin_steps as f64,
        kin_steps,
    )?;
    let prm = ParticleParams::from_kinetic(&model.params);
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let distances = seeds
            .iter()
            .map(|&seed| {
                let mut e = ParticleEnsemble::gaussian(prm, n, seed, blob.q0, blob.p0, blob.sq, blob.sp)?;
                e.run(dt, steps)?;
                empirical_measure(&e, &g)?.density.l1_distance(&run.density)
            })
            .collect::<Result<Vec<f64>>>()?;
        let k = distances.len() as f64;
        let mean = distances.iter().sum::<f64>() / k;
        let var = if distances.len() > 1 {
            distances.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (k - 1.0)
        } else {
            0.0
        };
        rows.push(PropagationRow {
            n,
            mean,
            std_err: (var / k).sqrt(),
            distances,
        });
    }
    Ok((rows, run))
}

/// Largest increase of the mean distance between consecutive particle
/// counts, in units of the two-sigma band `2√(se₁² + se₂²)`; at most 1 when
/// the means decrease within sampling error.
pub fn monotonicity_excess(rows: &[PropagationRow]) -> f64 {
    rows.windows(2)
        .map(|w| {
            let band = 2.0 * (w[0].std_err.powi(2) + w[1].std_err.powi(2)).sqrt();
            let rise = w[1].mean - w[0].mean;
            if rise <= 0.0 {
                0.0
            } else if band > 0.0 {
                rise / band
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}

/// CDF of the Gibbs position law `∝ e^{−V(q)}` on `[lo, hi]` by cumulative
/// trapezoid on a fine table.
pub fn gibbs_position_cdf(v: Potential, lo: f64, hi: f64) -> impl Fn(f64) -> f64 {
    let n = 20_001;
    let h = (hi - lo) / (n - 1) as f64;
    let dens: Vec<f64> = (0..n).map(|i| (-v.value(lo + i as f64 * h)).exp()).collect();
    let mut cum = vec![0.0; n];
    for i in 1..n {
        cum[i] = cum[i - 1] + 0.5 * h * (dens[i] + dens[i - 1]);
    }
    let total = cum[n - 1];
    cum.iter_mut().for_each(|c| *c /= total);
    move |x: f64| {
        if x <= lo {
            return 0.0;
        }
        if x >= hi {
            return 1.0;
        }
        let s = (x - lo) / h;
        let i = (s.floor() as usize).min(n - 2);
        let f = s - i as f64;
        cum[i] * (1.0 - f) + cum[i + 1] * f
    }
}

/// Least-squares ratio of the particle mean-field force to the macroscopic
/// force `(Φ' ∗ ρ)(q_i)` from a grid density of the same law; about ½ under
/// the `(1/2n)` particle convention. `None` when `Φ = 0`.
pub fn interaction_force_ratio(ens: &ParticleEnsemble, rho: &GridDensity) -> Option<f64> {
    let prm = ens.params;
    if prm.phi.is_zero() {
        return None;
    }
    let g = rho.grid;
    let marg = rho.q_marginal();
    let hq = g.hq();
    let micro = ens.interaction_force();
    let macro_force: Vec<f64> = ens
        .q
        .par_iter()
        .map(|&qi| {
            (0..g.nq)
                .map(|k| prm.phi.derivative(prm.difference(qi, g.q(k))) * marg[k])
                .sum::<f64>()
                * hq
        })
        .collect();
    let num: f64 = micro.iter().zip(&macro_force).map(|(a, b)| a * b).sum();
    let den: f64 = macro_force.iter().map(|b| b * b).sum();
    (den > 0.0).then_some(num / den)
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(mech: ParticleMechanism) -> ParticleParams {
        ParticleParams {
            m: 1.0,
            gamma: 1.0,
            v: Potential::Harmonic { k: 1.0 },
            phi: Potential::Zero,
            mechanism: mech,
            periodic: None,
        }
    }

    #[test]
    fn streams_do_not_depend_on_particle_count() {
        let a = ParticleEnsemble::gaussian(params(ParticleMechanism::Andersen), 10, 3, 0.0, 0.0, 1.0, 1.0).unwrap();
        let b = ParticleEnsemble::gaussian(params(ParticleMechanism::Andersen), 20, 3, 0.0, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(a.q[..], b.q[..10]);
    }

    #[test]
    fn periodic_wrap_and_minimal_image() {
        let mut prm = params(ParticleMechanism::Langevin);
        prm.periodic = Some([0.0, 1.0]);
        assert!((prm.wrap(1.25) - 0.25).abs() < 1e-15);
        assert!((prm.wrap(-0.25) - 0.75).abs() < 1e-15);
        assert!((prm.difference(0.9, 0.1) + 0.2).abs() < 1e-15);
    }

    #[test]
    fn two_sample_ks_of_identical_samples_is_zero() {
        let a = [0.3, -1.0, 2.0, 0.0];
        assert_eq!(ks_two_sample(&a, &a), 0.0);
        assert_eq!(ks_two_sample(&[0.0, 1.0], &[2.0, 3.0]), 1.0);
    }
}
