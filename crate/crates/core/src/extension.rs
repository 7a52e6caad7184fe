//! Embeddings of pre-GENERIC bundles into GENERIC bundles on `Z × ℝ`.
//!
//! Every extended map is a closure over the base bundle's closures, so the
//! `z`-component of an extended flow is the base flow evaluated by the same
//! code.

use crate::error::{invalid, Error, Result};
use crate::sampling::{halton, SampleBox};
use crate::structure::{
    check_orthogonality, Bundle, Functional, Hamiltonian, Kind, MatFn, MatListFn, Matrix, PairFn, PoissonOperator,
    SamplerFn, Vector,
};
use std::sync::Arc;

/// Relative tolerance deciding when an extended velocity leaves the
/// subspace on which the extended Ψ is finite.
const CONSTRAINT_TOL: f64 = 1e-9;
/// Samples used for the precondition checks.
const PRECONDITION_SAMPLES: usize = 64;

fn split(x: &Vector) -> (Vector, f64) {
    let n = x.len() - 1;
    (x.rows(0, n).into_owned(), x[n])
}

fn join(v: &Vector, a: f64) -> Vector {
    let mut out = Vector::zeros(v.len() + 1);
    out.rows_mut(0, v.len()).copy_from(v);
    out[v.len()] = a;
    out
}

fn extend_box(b: &SampleBox, lo: f64, hi: f64) -> SampleBox {
    let mut lower = b.lower.clone();
    let mut upper = b.upper.clone();
    lower.push(lo);
    upper.push(hi);
    SampleBox { lower, upper }
}

/// Extends a custom sampler by a Halton coordinate in `[-1, 1]`.
fn extend_sampler(f: &Option<SamplerFn>, stream: usize) -> Option<SamplerFn> {
    let f = f.clone()?;
    Some(Arc::new(move |count| {
        f(count)
            .into_iter()
            .enumerate()
            .map(|(i, z)| join(&z, 2.0 * halton(i + stream, 1)[0] - 1.0))
            .collect()
    }))
}

fn extend_samples(out: &mut Bundle, base: &Bundle) {
    out.state_box = extend_box(&base.state_box, -1.0, 1.0);
    out.covector_box = extend_box(&base.covector_box, -1.0, 1.0);
    out.state_sampler = extend_sampler(&base.state_sampler, 0);
    out.covector_sampler = extend_sampler(&base.covector_sampler, 7);
    out.positive_states = base.positive_states;
}

/// Block matrix `[[a, col], [-colᵀ·s, 0]]`, used by every extended operator.
fn bordered(a: &Matrix, col: &Vector) -> Matrix {
    let n = a.nrows();
    let mut m = Matrix::zeros(n + 1, n + 1);
    m.view_mut((0, 0), (n, n)).copy_from(a);
    for i in 0..n {
        m[(i, n)] = col[i];
        m[(n, i)] = -col[i];
    }
    m
}

/// Jacobian of the drift, either supplied or assembled from `∂L`, `L` and
/// the Hessian of `E` as `∂_k(L dE) = (∂_k L) dE + L ∂_k dE`.
fn drift_jacobian(b: &Bundle) -> Option<MatFn> {
    if let Some(w) = &b.w {
        return w.jacobian_fn();
    }
    let (l, e) = (b.l.as_ref()?, b.e.as_ref()?);
    let (lm, dl, he, ge) = (l.matrix_fn()?, l.derivative_fn()?, e.hessian_fn()?, e.gradient_fn());
    Some(Arc::new(move |z: &Vector| {
        let de = ge(z);
        let lz = lm(z);
        let mut j = &lz * he(z);
        for (k, dk) in dl(z).iter().enumerate() {
            let col = dk * &de;
            for i in 0..col.len() {
                j[(i, k)] += col[i];
            }
        }
        j
    }))
}

fn drift_fn(b: &Bundle) -> Option<Arc<dyn Fn(&Vector) -> Vector + Send + Sync>> {
    if let Some(w) = &b.w {
        return Some(w.eval_fn());
    }
    let (l, e) = (b.l.as_ref()?, b.e.as_ref()?);
    let (apply, ge) = (l.apply_fn(), e.gradient_fn());
    Some(Arc::new(move |z: &Vector| apply(z, &ge(z))))
}

/// Base Ψ as a closure; falls back to grid conjugation through the base
/// bundle.
fn psi_fn(b: &Bundle) -> PairFn {
    match &b.psi {
        Some(p) => p.clone(),
        None => {
            let base = b.clone();
            Arc::new(move |z, v| base.psi_value(z, v).unwrap_or(f64::NAN))
        }
    }
}

/// `Ŝ(z,a) = S(z)`, `Ê(z,a) = a`, `Ψ̂*((z,a),(ξ,r)) = Ψ*(z,ξ)`,
/// `L̂(z,a)(ξ,r) = (rW(z), −<W(z),ξ>)`.
pub fn hat_extend(base: &Bundle) -> Result<Bundle> {
    if !matches!(base.kind, Kind::PreGeneric | Kind::GradientFlow) {
        return Err(invalid("hat extension expects a pre-GENERIC or gradient-flow bundle"));
    }
    let n = base.dim;
    let psi_star = base
        .psi_star
        .clone()
        .ok_or_else(|| invalid("hat extension needs psi_star"))?;
    let w: Arc<dyn Fn(&Vector) -> Vector + Send + Sync> =
        drift_fn(base).unwrap_or_else(|| Arc::new(move |_: &Vector| Vector::zeros(n)));
    let states = base.states(PRECONDITION_SAMPLES);
    let ortho = check_orthogonality(&*w, &base.s, &states)?;
    if ortho.residual > base.tol_discrete() {
        return Err(Error::Refused(format!(
            "hat extension needs <W, dS> = 0; residual {:.3e} exceeds {:.1e}",
            ortho.residual,
            base.tol_discrete()
        )));
    }

    let (sv, sg, sh) = (base.s.value_fn(), base.s.gradient_fn(), base.s.hessian_fn());
    let s_hat = Functional::from_parts(
        Arc::new(move |x| sv(&split(x).0)),
        Some(Arc::new(move |x| join(&sg(&split(x).0), 0.0))),
        sh.map(|h| -> MatFn {
            Arc::new(move |x: &Vector| {
                let hz = h(&split(x).0);
                let mut m = Matrix::zeros(n + 1, n + 1);
                m.view_mut((0, 0), (n, n)).copy_from(&hz);
                m
            })
        }),
    );
    let e_hat = Functional::from_parts(
        Arc::new(move |x| x[n]),
        Some(Arc::new(move |_| {
            let mut g = Vector::zeros(n + 1);
            g[n] = 1.0;
            g
        })),
        Some(Arc::new(move |_| Matrix::zeros(n + 1, n + 1))),
    );
    let (pe, pg) = (psi_star.eval_fn(), psi_star.xi_gradient_fn());
    let ps_hat = Hamiltonian::from_parts(
        Arc::new(move |x, k| pe(&split(x).0, &split(k).0)),
        Some(Arc::new(move |x, k| join(&pg(&split(x).0, &split(k).0), 0.0))),
    );

    let (w1, w2) = (w.clone(), w.clone());
    let matrix: MatFn = Arc::new(move |x: &Vector| bordered(&Matrix::zeros(n, n), &w2(&split(x).0)));
    let derivative: Option<MatListFn> = drift_jacobian(base).map(|jw| -> MatListFn {
        Arc::new(move |x: &Vector| {
            let j = jw(&split(x).0);
            let mut out: Vec<Matrix> = (0..n)
                .map(|k| bordered(&Matrix::zeros(n, n), &j.column(k).into_owned()))
                .collect();
            out.push(Matrix::zeros(n + 1, n + 1));
            out
        })
    });
    let l_hat = PoissonOperator::from_parts(
        Arc::new(move |x, k| {
            let (z, _) = split(x);
            let (xi, r) = split(k);
            let wz = w1(&z);
            join(&(r * &wz), -wz.dot(&xi))
        }),
        Some(matrix),
        derivative,
    );

    let psi = psi_fn(base);
    let psi_hat: PairFn = Arc::new(move |x, v| {
        let (z, _) = split(x);
        let (vz, va) = split(v);
        if va.abs() > CONSTRAINT_TOL * (1.0 + vz.amax()) {
            f64::INFINITY
        } else {
            psi(&z, &vz)
        }
    });

    let b0 = base.clone();
    let mut out = Bundle::new(format!("{}-hat", base.name), n + 1, Kind::Generic, s_hat);
    out.e = Some(e_hat);
    out.l = Some(l_hat);
    out.psi_star = Some(ps_hat);
    out.psi = Some(psi_hat);
    out.flow = Some(Arc::new(move |x| join(&b0.flow(&split(x).0).expect("base flow"), 0.0)));
    extend_samples(&mut out, base);
    out.discretization_tol = base.discretization_tol;
    Ok(out.validate()?)
}

fn bar_preconditions(base: &Bundle) -> Result<(PoissonOperator, Functional)> {
    let l = base
        .l
        .clone()
        .ok_or_else(|| invalid("bar extension needs a Poisson operator L"))?;
    let e = base
        .e
        .clone()
        .ok_or_else(|| invalid("bar extension needs an energy E"))?;
    if base.psi_star.is_none() {
        return Err(invalid("bar extension needs psi_star"));
    }
    let mut worst = 0.0f64;
    for z in base.states(PRECONDITION_SAMPLES) {
        let d = base.s.gradient(&z) - e.gradient(&z);
        worst = worst.max(l.apply(&z, &d).amax());
    }
    let tol = base.tol_discrete();
    if !(worst <= tol) {
        return Err(Error::Refused(format!(
            "bar extension needs L(dS - dE) = 0; residual {worst:.3e} exceeds {tol:.1e}"
        )));
    }
    Ok((l, e))
}

/// `S̄(z,e) = S(z) − (E(z)+e)`, `Ē = E + e`,
/// `Ψ̄*((z,e),(ξ,r)) = Ψ*(z, ξ − r dE)`, `L̄ = diag(L, 0)`.
pub fn bar_extend(base: &Bundle) -> Result<Bundle> {
    let mut b = interpolate_inner(base, 1.0)?;
    b.name = format!("{}-bar", base.name);
    Ok(b)
}

/// The α-family: `E_α = e + E`, `S_α = S − α(e + E)`, `Ψ*_α = Ψ̄*` and
/// `L_α = [[αL, (1−α)W], [−(1−α)Wᵀ, 0]]`.
pub fn interpolate_extend(base: &Bundle, alpha: f64) -> Result<Bundle> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("alpha = {alpha} lies outside [0, 1]")));
    }
    let mut b = interpolate_inner(base, alpha)?;
    b.name = format!("{}-alpha-{alpha}", base.name);
    if alpha > 0.0 && alpha < 1.0 {
        b.notes.push("jacobi-unproven".into());
    }
    Ok(b)
}

fn interpolate_inner(base: &Bundle, alpha: f64) -> Result<Bundle> {
    let (l, e) = bar_preconditions(base)?;
    let n = base.dim;
    let psi_star = base.psi_star.clone().unwrap();
    let beta = 1.0 - alpha;

    let (sv, sg, sh) = (base.s.value_fn(), base.s.gradient_fn(), base.s.hessian_fn());
    let (ev, eg, eh) = (e.value_fn(), e.gradient_fn(), e.hessian_fn());
    let (ev1, eg1) = (ev.clone(), eg.clone());
    let hess = match (sh, eh.clone()) {
        (Some(hs), Some(he)) => Some(Arc::new(move |x: &Vector| {
            let z = split(x).0;
            let mut m = Matrix::zeros(n + 1, n + 1);
            m.view_mut((0, 0), (n, n)).copy_from(&(hs(&z) - alpha * he(&z)));
            m
        }) as MatFn),
        _ => None,
    };
    let s_a = Functional::from_parts(
        Arc::new(move |x| {
            let (z, a) = split(x);
            sv(&z) - alpha * (ev1(&z) + a)
        }),
        Some(Arc::new(move |x| {
            let z = split(x).0;
            join(&(sg(&z) - alpha * eg1(&z)), -alpha)
        })),
        hess,
    );
    let (ev2, eg2) = (ev.clone(), eg.clone());
    let e_a = Functional::from_parts(
        Arc::new(move |x| {
            let (z, a) = split(x);
            ev2(&z) + a
        }),
        Some(Arc::new(move |x| join(&eg2(&split(x).0), 1.0))),
        eh.map(|he| -> MatFn {
            Arc::new(move |x: &Vector| {
                let mut m = Matrix::zeros(n + 1, n + 1);
                m.view_mut((0, 0), (n, n)).copy_from(&he(&split(x).0));
                m
            })
        }),
    );

    let (pe, pg) = (psi_star.eval_fn(), psi_star.xi_gradient_fn());
    let (eg3, eg4) = (eg.clone(), eg.clone());
    let ps_a = Hamiltonian::from_parts(
        Arc::new(move |x, k| {
            let z = split(x).0;
            let (xi, r) = split(k);
            pe(&z, &(xi - r * eg3(&z)))
        }),
        Some(Arc::new(move |x, k| {
            let z = split(x).0;
            let (xi, r) = split(k);
            let de = eg4(&z);
            let g = pg(&z, &(xi - r * &de));
            let gr = -g.dot(&de);
            join(&g, gr)
        })),
    );

    let w = drift_fn(base).expect("drift exists when L and E exist");
    let lap = l.apply_fn();
    let w1 = w.clone();
    let apply: Arc<dyn Fn(&Vector, &Vector) -> Vector + Send + Sync> = if beta == 0.0 {
        Arc::new(move |x: &Vector, k: &Vector| {
            let z = split(x).0;
            join(&lap(&z, &split(k).0), 0.0)
        })
    } else {
        Arc::new(move |x: &Vector, k: &Vector| {
            let z = split(x).0;
            let (xi, r) = split(k);
            let wz = w1(&z);
            let top = alpha * lap(&z, &xi) + (beta * r) * &wz;
            join(&top, -beta * wz.dot(&xi))
        })
    };
    let matrix: Option<MatFn> = l.matrix_fn().map(|lm| -> MatFn {
        let w2 = w.clone();
        Arc::new(move |x: &Vector| {
            let z = split(x).0;
            bordered(&(alpha * lm(&z)), &(beta * w2(&z)))
        })
    });
    let jw = if beta == 0.0 {
        Some(Arc::new(move |_: &Vector| Matrix::zeros(n, n)) as MatFn)
    } else {
        drift_jacobian(base)
    };
    let derivative: Option<MatListFn> = match (l.derivative_fn(), jw) {
        (Some(dl), Some(jw)) => Some(Arc::new(move |x: &Vector| {
            let z = split(x).0;
            let (d, j) = (dl(&z), jw(&z));
            let mut out: Vec<Matrix> = (0..n)
                .map(|k| bordered(&(alpha * &d[k]), &(beta * j.column(k).into_owned())))
                .collect();
            out.push(Matrix::zeros(n + 1, n + 1));
            out
        })),
        _ => None,
    };
    let l_a = PoissonOperator::from_parts(apply, matrix, derivative);

    let psi = psi_fn(base);
    let eg5 = eg.clone();
    // discretized bases conserve E only up to their discretization error
    let slack = CONSTRAINT_TOL.max(base.discretization_tol.unwrap_or(0.0));
    let psi_a: PairFn = Arc::new(move |x, v| {
        let z = split(x).0;
        let (vz, ve) = split(v);
        let c = ve + vz.dot(&eg5(&z));
        if c.abs() > slack * (1.0 + vz.amax() + ve.abs()) {
            f64::INFINITY
        } else {
            psi(&z, &vz)
        }
    });

    let b0 = base.clone();
    let eg6 = eg;
    let mut out = Bundle::new(base.name.clone(), n + 1, Kind::Generic, s_a);
    out.e = Some(e_a);
    out.l = Some(l_a);
    out.psi_star = Some(ps_a);
    out.psi = Some(psi_a);
    out.flow = Some(Arc::new(move |x| {
        let z = split(x).0;
        let f = b0.flow(&z).expect("base flow");
        let fe = -eg6(&z).dot(&f);
        join(&f, fe)
    }));
    extend_samples(&mut out, base);
    out.discretization_tol = base.discretization_tol;
    out.validate()
}
