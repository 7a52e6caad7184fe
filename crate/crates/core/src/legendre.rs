//! Numerical convex conjugation on regular grids.
//!
//! Values are extended reals: `f64::INFINITY` is the `+inf` marker. A
//! conjugate value is set to `+inf` when the supremum over the truncated grid
//! is attained strictly on its boundary, since the grid then cannot tell a
//! finite conjugate from an unbounded one.

use crate::error::{invalid, Error, Result};
use crate::report::{CheckReport, Location, Verdict};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Default tolerance at the reference spacing.
pub const TOL_LEGENDRE_BASE: f64 = 1e-2;
/// Spacing at which the tolerance equals its base value.
pub const REFERENCE_SPACING: f64 = 1e-2;
pub const TOL_CONVEX: f64 = 1e-8;
/// Relative margin by which a boundary value must beat the interior before
/// the conjugate is marked infinite.
const BOUNDARY_MARGIN: f64 = 1e-12;
const MAX_DIM: usize = 3;
const MAX_DUAL_POINTS: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, count: usize) -> Result<Self> {
        if count < 3 {
            return Err(invalid(format!("axis needs at least 3 points, got {count}")));
        }
        if !(min.is_finite() && max.is_finite() && max > min) {
            return Err(invalid(format!("axis bounds [{min}, {max}] are not increasing")));
        }
        Ok(Self { min, max, count })
    }

    /// Symmetric axis `[-r, r]`.
    pub fn symmetric(r: f64, count: usize) -> Result<Self> {
        Self::new(-r, r, count)
    }

    /// Node `i`, computed so that mirrored nodes of a symmetric axis are exact
    /// negatives of each other.
    pub fn node(&self, i: usize) -> f64 {
        let n = (self.count - 1) as f64;
        (self.min * (n - i as f64) + self.max * i as f64) / n
    }

    pub fn spacing(&self) -> f64 {
        (self.max - self.min) / (self.count - 1) as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.node(i)).collect()
    }
}

/// Regular grid over a box in up to three dimensions, row-major with the last
/// axis fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub axes: Vec<Axis>,
}

impl Grid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(invalid("grid has no axes"));
        }
        if axes.len() > MAX_DIM {
            return Err(invalid(format!("grid dimension {} exceeds {MAX_DIM}", axes.len())));
        }
        for a in &axes {
            Axis::new(a.min, a.max, a.count)?;
        }
        Ok(Self { axes })
    }

    pub fn line(min: f64, max: f64, count: usize) -> Result<Self> {
        Self::new(vec![Axis::new(min, max, count)?])
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_spacing(&self) -> f64 {
        self.axes.iter().map(|a| a.spacing()).fold(0.0, f64::max)
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for (k, a) in self.axes.iter().enumerate().rev() {
            idx[k] = flat % a.count;
            flat /= a.count;
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.axes).fold(0, |acc, (&i, a)| acc * a.count + i)
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .zip(&self.axes)
            .map(|(&i, a)| a.node(i))
            .collect()
    }

    pub fn on_boundary(&self, flat: usize) -> bool {
        self.multi_index(flat)
            .iter()
            .zip(&self.axes)
            .any(|(&i, a)| i == 0 || i + 1 == a.count)
    }

    /// True when the node lies in the middle two-thirds of every axis.
    pub fn in_interior_two_thirds(&self, flat: usize) -> bool {
        self.node(flat).iter().zip(&self.axes).all(|(&x, a)| {
            let c = 0.5 * (a.min + a.max);
            let r = (a.max - a.min) / 3.0;
            (x - c).abs() <= r * (1.0 + 1e-12)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convexity {
    ClaimedConvex,
    Unknown,
}

/// Scalar function sampled on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledFunction {
    pub grid: Grid,
    #[serde(with = "crate::serde_ext::extended_real_vec")]
    pub values: Vec<f64>,
    pub convexity: Convexity,
    /// Declared by the caller when f(v) is a sum of one-variable functions;
    /// enables axis-by-axis conjugation.
    #[serde(default)]
    pub separable: bool,
}

impl SampledFunction {
    pub fn new(grid: Grid, values: Vec<f64>, convexity: Convexity) -> Result<Self> {
        let grid = Grid::new(grid.axes)?;
        if values.len() != grid.len() {
            return Err(invalid(format!(
                "{} values for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
            return Err(invalid(format!("value at node {i} is NaN or -inf")));
        }
        Ok(Self {
            grid,
            values,
            convexity,
            separable: false,
        })
    }

    pub fn from_fn(grid: Grid, convexity: Convexity, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let values = (0..grid.len()).map(|i| f(&grid.node(i))).collect();
        Self::new(grid, values, convexity)
    }

    pub fn declare_separable(mut self) -> Self {
        self.separable = true;
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(s)?;
        Self::new(f.grid, f.values, f.convexity).map(|g| Self {
            separable: f.separable,
            ..g
        })
    }

    /// First node where discrete midpoint convexity fails along some axis,
    /// with the size of the violation. The tolerance is relative to the
    /// local magnitude of the values.
    pub fn convexity_violation(&self, tol: f64) -> Option<(usize, f64)> {
        let mut worst: Option<(usize, f64)> = None;
        let n = self.grid.len();
        for flat in 0..n {
            let idx = self.grid.multi_index(flat);
            for (k, a) in self.grid.axes.iter().enumerate() {
                if idx[k] == 0 || idx[k] + 1 == a.count {
                    continue;
                }
                let mut lo = idx.clone();
                lo[k] -= 1;
                let mut hi = idx.clone();
                hi[k] += 1;
                let (fl, f0, fh) = (
                    self.values[self.grid.flat_index(&lo)],
                    self.values[flat],
                    self.values[self.grid.flat_index(&hi)],
                );
                if !(fl.is_finite() && fh.is_finite()) {
                    continue;
                }
                let excess = f0 - 0.5 * (fl + fh);
                let scale = 1.0 + fl.abs().max(f0.abs()).max(fh.abs());
                if excess > tol * scale && worst.is_none_or(|(_, w)| excess > w) {
                    worst = Some((flat, excess));
                }
            }
        }
        worst
    }
}

/// Tolerance for duality residuals on a grid of spacing `h`.
pub fn tol_legendre(h: f64) -> f64 {
    TOL_LEGENDRE_BASE * (h / REFERENCE_SPACING).powi(2)
}

/// Lower convex hull of finite points with increasing abscissae.
fn lower_hull(xs: &[f64], ys: &[f64], keep: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut hull: Vec<usize> = Vec::new();
    for i in 0..xs.len() {
        if !keep(i) || !ys[i].is_finite() {
            continue;
        }
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            // drop b when it lies on or above the chord a-i
            let cross = (xs[b] - xs[a]) * (ys[i] - ys[a]) - (ys[b] - ys[a]) * (xs[i] - xs[a]);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(i);
    }
    hull
}

/// max_i s*x_i - y_i over hull vertices for increasing slopes `ss`.
fn sweep(xs: &[f64], ys: &[f64], hull: &[usize], ss: &[f64], out: &mut [f64]) {
    if hull.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::NEG_INFINITY);
        return;
    }
    let mut k = 0;
    for (j, &s) in ss.iter().enumerate() {
        while k + 1 < hull.len() {
            let (a, b) = (hull[k], hull[k + 1]);
            if s * xs[b] - ys[b] >= s * xs[a] - ys[a] {
                k += 1;
            } else {
                break;
            }
        }
        // the hull walk is monotone, but evaluating the neighbour guards
        // against rounding in the comparison above
        let a = hull[k];
        let mut best = s * xs[a] - ys[a];
        if k > 0 {
            let p = hull[k - 1];
            best = best.max(s * xs[p] - ys[p]);
        }
        out[j] = best;
    }
}

fn mark(full: f64, interior: f64) -> f64 {
    if full == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if full > interior + BOUNDARY_MARGIN * (1.0 + full.abs().max(interior.abs().min(f64::MAX))) {
        f64::INFINITY
    } else {
        full
    }
}

/// One-dimensional conjugate by the linear-time hull sweep. `ys` may contain
/// `+inf` (skipped) and `-inf` (forces `+inf` everywhere).
fn conjugate_line(xs: &[f64], ys: &[f64], ss: &[f64]) -> Vec<f64> {
    if ys.contains(&f64::NEG_INFINITY) {
        return vec![f64::INFINITY; ss.len()];
    }
    let n = xs.len();
    let mut full = vec![0.0; ss.len()];
    let mut inner = vec![0.0; ss.len()];
    sweep(xs, ys, &lower_hull(xs, ys, |_| true), ss, &mut full);
    sweep(xs, ys, &lower_hull(xs, ys, |i| i > 0 && i + 1 < n), ss, &mut inner);
    full.iter().zip(&inner).map(|(&f, &i)| mark(f, i)).collect()
}

/// Convex conjugate `g(xi) = max_v <v, xi> - f(v)` on `dual`.
pub fn conjugate(f: &SampledFunction, dual: &Grid) -> Result<SampledFunction> {
    let dual = Grid::new(dual.axes.clone())?;
    if dual.dim() != f.grid.dim() {
        return Err(invalid(format!(
            "dual grid has dimension {}, function has {}",
            dual.dim(),
            f.grid.dim()
        )));
    }
    if f.values.iter().all(|v| *v == f64::INFINITY) {
        return Err(Error::DegenerateFunction);
    }
    let values = if f.grid.dim() == 1 {
        conjugate_line(&f.grid.axes[0].nodes(), &f.values, &dual.axes[0].nodes())
    } else if f.separable {
        conjugate_factorized(f, &dual)
    } else {
        conjugate_brute(f, &dual)
    };
    let mut g = SampledFunction::new(dual, values, Convexity::ClaimedConvex)?;
    g.separable = f.separable;
    Ok(g)
}

fn conjugate_brute(f: &SampledFunction, dual: &Grid) -> Vec<f64> {
    let nodes: Vec<Vec<f64>> = (0..f.grid.len()).map(|i| f.grid.node(i)).collect();
    let boundary: Vec<bool> = (0..f.grid.len()).map(|i| f.grid.on_boundary(i)).collect();
    (0..dual.len())
        .into_par_iter()
        .map(|j| {
            let xi = dual.node(j);
            let mut full = f64::NEG_INFINITY;
            let mut inner = f64::NEG_INFINITY;
            for (i, v) in nodes.iter().enumerate() {
                let fv = f.values[i];
                if fv == f64::INFINITY {
                    continue;
                }
                let val = dot(v, &xi) - fv;
                full = full.max(val);
                if !boundary[i] {
                    inner = inner.max(val);
                }
            }
            mark(full, inner)
        })
        .collect()
}

/// Axis-by-axis conjugation. Stage k replaces primal axis k by dual axis k.
fn conjugate_factorized(f: &SampledFunction, dual: &Grid) -> Vec<f64> {
    let dim = f.grid.dim();
    // current table lives on a mixed grid: dual axes before k, primal after
    let mut axes: Vec<Axis> = f.grid.axes.clone();
    // stage tables store the negated partial conjugate, ready for the next sup
    let mut table = f.values.clone();
    for k in (0..dim).rev() {
        let prim = axes[k];
        let new_axes: Vec<Axis> = axes
            .iter()
            .enumerate()
            .map(|(i, a)| if i == k { dual.axes[k] } else { *a })
            .collect();
        let old = Grid { axes: axes.clone() };
        let new = Grid { axes: new_axes.clone() };
        let xs = prim.nodes();
        let ss = dual.axes[k].nodes();
        let mut out = vec![0.0; new.len()];
        // iterate over all lines along axis k
        let others: Vec<usize> = (0..dim).filter(|&i| i != k).collect();
        let line_count: usize = others.iter().map(|&i| axes[i].count).product();
        for l in 0..line_count {
            let mut rem = l;
            let mut idx = vec![0usize; dim];
            for &i in others.iter().rev() {
                idx[i] = rem % axes[i].count;
                rem /= axes[i].count;
            }
            let ys: Vec<f64> = (0..prim.count)
                .map(|t| {
                    idx[k] = t;
                    table[old.flat_index(&idx)]
                })
                .collect();
            let g = conjugate_line(&xs, &ys, &ss);
            for (t, gv) in g.into_iter().enumerate() {
                idx[k] = t;
                // negate so the next stage conjugates -g
                out[new.flat_index(&idx)] = if k == 0 { gv } else { -gv };
            }
        }
        table = out;
        axes = new_axes;
    }
    table
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate of `f` at a single dual point, by direct sup over the grid.
/// Returns `+inf` when the sup is attained strictly on the boundary.
pub fn conjugate_at(f: &SampledFunction, xi: &[f64]) -> f64 {
    let mut full = f64::NEG_INFINITY;
    let mut inner = f64::NEG_INFINITY;
    for i in 0..f.grid.len() {
        let fv = f.values[i];
        if fv == f64::INFINITY {
            continue;
        }
        let val = dot(&f.grid.node(i), xi) - fv;
        full = full.max(val);
        if !f.grid.on_boundary(i) {
            inner = inner.max(val);
        }
    }
    mark(full, inner)
}

/// Grid spanning the discrete slopes of `f`, at least as fine as the primal
/// grid along each axis.
pub fn slope_grid(f: &SampledFunction) -> Result<Grid> {
    let dim = f.grid.dim();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for flat in 0..f.grid.len() {
        let idx = f.grid.multi_index(flat);
        for k in 0..dim {
            if idx[k] + 1 == f.grid.axes[k].count {
                continue;
            }
            let mut nb = idx.clone();
            nb[k] += 1;
            let (a, b) = (f.values[flat], f.values[f.grid.flat_index(&nb)]);
            if a.is_finite() && b.is_finite() {
                let s = (b - a) / f.grid.axes[k].spacing();
                lo[k] = lo[k].min(s);
                hi[k] = hi[k].max(s);
            }
        }
    }
    let budget = (MAX_DUAL_POINTS as f64).powf(1.0 / dim as f64) as usize;
    let axes = (0..dim)
        .map(|k| {
            let pa = f.grid.axes[k];
            if !lo[k].is_finite() || hi[k] - lo[k] <= 0.0 {
                let c = if lo[k].is_finite() { lo[k] } else { 0.0 };
                return Axis::new(c - 1.0, c + 1.0, pa.count);
            }
            let span = hi[k] - lo[k];
            let by_spacing = (span / pa.spacing()).ceil() as usize + 1;
            let count = by_spacing.max(pa.count).min(budget.max(pa.count));
            Axis::new(lo[k], hi[k], count)
        })
        .collect::<Result<Vec<_>>>()?;
    Grid::new(axes)
}

/// Checks `f** = f` on the interior two-thirds of the domain.
pub fn biconjugate_check(f: &SampledFunction, tol: Option<f64>) -> CheckReport {
    const NAME: &str = "biconjugation";
    const IDENTITY: &str = "f** = f on the interior of the domain";
    if let Some((at, excess)) = f.convexity_violation(TOL_CONVEX) {
        return CheckReport::not_applicable(NAME, IDENTITY, format!("midpoint convexity fails by {excess:.3e}"))
            .with_location(Location {
                state: f.grid.node(at),
                ..Default::default()
            });
    }
    let tol = tol.unwrap_or_else(|| tol_legendre(f.grid.max_spacing()));
    let result = slope_grid(f)
        .and_then(|dual| conjugate(f, &dual))
        .and_then(|fs| conjugate(&fs, &f.grid));
    let ff = match result {
        Ok(ff) => ff,
        Err(e) => return CheckReport::not_applicable(NAME, IDENTITY, e.to_string()),
    };
    let mut worst = 0.0;
    let mut at = None;
    let mut count = 0;
    for i in 0..f.grid.len() {
        if !f.grid.in_interior_two_thirds(i) || !f.values[i].is_finite() {
            continue;
        }
        count += 1;
        let r = (ff.values[i] - f.values[i]).abs();
        let r = if r.is_nan() { f64::INFINITY } else { r };
        if r > worst || at.is_none() {
            worst = r;
            at = Some(i);
        }
    }
    let mut rep = CheckReport::new(NAME, IDENTITY, worst, tol, count);
    if let Some(i) = at {
        rep = rep.with_location(Location {
            state: f.grid.node(i),
            ..Default::default()
        });
    }
    rep
}

/// Minimum of `f(v) + g(xi) - <v, xi>` over all grid pairs.
pub fn young_gap(f: &SampledFunction, g: &SampledFunction) -> Result<f64> {
    if f.grid.dim() != g.grid.dim() {
        return Err(invalid(format!(
            "young_gap dimension mismatch: {} vs {}",
            f.grid.dim(),
            g.grid.dim()
        )));
    }
    let gnodes: Vec<Vec<f64>> = (0..g.grid.len()).map(|j| g.grid.node(j)).collect();
    let gap = (0..f.grid.len())
        .into_par_iter()
        .map(|i| {
            let fv = f.values[i];
            if !fv.is_finite() {
                return f64::INFINITY;
            }
            let v = f.grid.node(i);
            gnodes
                .iter()
                .zip(&g.values)
                .filter(|(_, gv)| gv.is_finite())
                .map(|(xi, gv)| fv + gv - dot(&v, xi))
                .fold(f64::INFINITY, f64::min)
        })
        .reduce(|| f64::INFINITY, f64::min);
    Ok(gap)
}

/// Young-inequality check built on [`young_gap`].
pub fn young_check(f: &SampledFunction, g: &SampledFunction, tol: f64) -> Result<CheckReport> {
    let gap = young_gap(f, g)?;
    let mut r = CheckReport::new(
        "young-inequality",
        "f(v) + f*(xi) - <v, xi> >= 0 at all grid pairs",
        (-gap).max(0.0),
        tol,
        f.grid.len() * g.grid.len(),
    );
    if gap.is_nan() {
        r.verdict = Verdict::Fail;
    }
    Ok(r)
}
