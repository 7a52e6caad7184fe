//! C ABI over the `pregeneric` library.
//!
//! Every entry point returns a [`PgStatus`]; on failure the message is
//! available from [`pg_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function. Panics never cross
//! the boundary; they surface as [`PgStatus::Panic`].

use pregeneric::cli::{self, ExperimentConfig, Outcome, Report};
use pregeneric::kinetic::{self, GridDensity, KineticModel, KineticParams, Mechanism, PhaseGrid, Potential};
use pregeneric::particles::{ParticleEnsemble, ParticleMechanism, ParticleParams};
use pregeneric::{Error, Verdict};
use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Config = 3,
    /// Step above the stability bound, blow-up, or a refused construction.
    Refused = 4,
    Io = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgVerdict {
    Pass = 0,
    Fail = 1,
    NotApplicable = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgPotentialKind {
    Zero = 0,
    /// `a x² / 2`
    Harmonic = 1,
    /// `a (1 − cos(b x))`
    Cosine = 2,
    /// `a exp(−x² / (2 b²))`
    Gaussian = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PgPotential {
    pub kind: PgPotentialKind,
    pub a: f64,
    pub b: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgMechanism {
    Andersen = 0,
    /// Fokker-Planck momentum diffusion; Langevin noise for particles.
    Diffusive = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PgGrid {
    pub q_min: f64,
    pub q_max: f64,
    pub nq: usize,
    pub periodic: bool,
    pub p_max: f64,
    pub np: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PgModelParams {
    pub grid: PgGrid,
    pub m: f64,
    pub gamma: f64,
    pub v: PgPotential,
    pub phi: PgPotential,
    pub mechanism: PgMechanism,
}

/// One row of a report.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PgCheck {
    pub residual: f64,
    pub tolerance: f64,
    pub verdict: PgVerdict,
    /// Expected order in the grid spacing, 0 when none.
    pub order: u8,
    pub tainted: bool,
}

pub struct PgExperiment(ExperimentConfig);

pub struct PgReport {
    report: Report,
    outcome: Outcome,
}

pub struct PgKineticModel(KineticModel);

pub struct PgEnsemble(ParticleEnsemble);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> PgStatus {
    match err {
        Error::InvalidInput(_) => PgStatus::InvalidInput,
        Error::Config { .. } => PgStatus::Config,
        Error::Cfl { .. } | Error::BlowUp { .. } | Error::Refused(_) | Error::DegenerateFunction => PgStatus::Refused,
        Error::Io(_) | Error::Json(_) => PgStatus::Io,
    }
}

enum Failure {
    Status(PgStatus, String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn null() -> Failure {
    Failure::Status(PgStatus::NullPointer, "null pointer argument".into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PgStatus::Ok,
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            PgStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(s: *const c_char) -> Result<&'a str, Failure> {
    if s.is_null() {
        return Err(null());
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| Failure::Status(PgStatus::InvalidInput, "string is not UTF-8".into()))
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(null)
}

unsafe fn handle_mut<'a, T>(p: *mut T) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(null)
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, need: usize) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(null());
    }
    if len < need {
        return Err(Failure::Status(
            PgStatus::BufferTooSmall,
            format!("buffer holds {len}, need {need}"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn publish<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null());
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Copies `s` NUL-terminated into `buf` when it fits; `needed` receives
/// the size including the terminator.
unsafe fn write_string(s: &str, buf: *mut c_char, len: usize, needed: *mut usize) -> Result<(), Failure> {
    let need = s.len() + 1;
    if !needed.is_null() {
        *needed = need;
    }
    if buf.is_null() && len == 0 {
        return Ok(());
    }
    if buf.is_null() {
        return Err(null());
    }
    if len < need {
        return Err(Failure::Status(
            PgStatus::BufferTooSmall,
            format!("buffer holds {len} bytes, need {need}"),
        ));
    }
    std::ptr::copy_nonoverlapping(s.as_ptr(), buf.cast::<u8>(), s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf`. With a null
/// `buf` and zero `len`, only `needed` is written.
///
/// # Safety
/// `buf` must hold `len` bytes; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn pg_last_error(buf: *mut c_char, len: usize, needed: *mut usize) -> PgStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    match write_string(&msg, buf, len, needed) {
        Ok(()) => PgStatus::Ok,
        Err(Failure::Status(s, _)) => s,
        Err(Failure::Lib(e)) => status_of(&e),
    }
}

/// Parses and validates a TOML experiment config.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pg_experiment_from_toml(toml: *const c_char, out: *mut *mut PgExperiment) -> PgStatus {
    guard(|| publish(out, PgExperiment(cli::parse_config(str_arg(toml)?)?)))
}

/// Default experiment of a catalog entry.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pg_experiment_builtin(name: *const c_char, out: *mut *mut PgExperiment) -> PgStatus {
    guard(|| {
        let name = str_arg(name)?;
        let cfg = cli::default_config(name)
            .ok_or_else(|| Failure::Status(PgStatus::Config, format!("unknown built-in `{name}`")))?;
        publish(out, PgExperiment(cfg))
    })
}

/// Overrides the seed of a stochastic experiment.
///
/// # Safety
/// `exp` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pg_experiment_set_seed(exp: *mut PgExperiment, seed: u64) -> PgStatus {
    guard(|| {
        handle_mut(exp)?.0.seed = Some(seed);
        Ok(())
    })
}

/// Runs the experiment in memory.
///
/// # Safety
/// `exp` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pg_experiment_run(exp: *const PgExperiment, out: *mut *mut PgReport) -> PgStatus {
    guard(|| {
        let (report, outcome) = cli::run_experiment(&handle(exp)?.0)?;
        publish(out, PgReport { report, outcome })
    })
}

/// # Safety
/// `exp` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pg_experiment_free(exp: *mut PgExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// # Safety
/// `report` must be a live handle; `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pg_report_check_count(report: *const PgReport, count: *mut usize) -> PgStatus {
    guard(|| {
        let n = handle(report)?.report.checks.len();
        *count.as_mut().ok_or_else(null)? = n;
        Ok(())
    })
}

/// Whether every untainted check passed or does not apply.
///
/// # Safety
/// `report` must be a live handle; `ok` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pg_report_ok(report: *const PgReport, ok: *mut bool) -> PgStatus {
    guard(|| {
        let v = handle(report)?.report.summary.ok;
        *ok.as_mut().ok_or_else(null)? = v;
        Ok(())
    })
}

/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pg_report_check(report: *const PgReport, index: usize, out: *mut PgCheck) -> PgStatus {
    guard(|| {
        let r = &handle(report)?.report;
        let c = r
            .checks
            .get(index)
            .ok_or_else(|| Failure::Status(PgStatus::InvalidInput, format!("check {index} of {}", r.checks.len())))?;
        *out.as_mut().ok_or_else(null)? = PgCheck {
            residual: c.residual,
            tolerance: c.tolerance,
            verdict: match c.verdict {
                Verdict::Pass => PgVerdict::Pass,
                Verdict::Fail => PgVerdict::Fail,
                Verdict::NotApplicable => PgVerdict::NotApplicable,
            },
            order: c.order.unwrap_or(0),
            tainted: c.tainted,
        };
        Ok(())
    })
}

/// Name of check `index`; same buffer protocol as [`pg_last_error`].
///
/// # Safety
/// `report` must be a live handle; `buf` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn pg_report_check_name(
    report: *const PgReport,
    index: usize,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> PgStatus {
    guard(|| {
        let r = &handle(report)?.report;
        let c = r
            .checks
            .get(index)
            .ok_or_else(|| Failure::Status(PgStatus::InvalidInput, format!("check {index} of {}", r.checks.len())))?;
        write_string(&c.check_name, buf, len, needed)
    })
}

/// The report as JSON, byte-identical to `report.json`.
///
/// # Safety
/// `report` must be a live handle; `buf` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn pg_report_json(
    report: *const PgReport,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> PgStatus {
    guard(|| write_string(&handle(report)?.report.to_json()?, buf, len, needed))
}

/// Writes the report and auxiliary files into `dir`.
///
/// # Safety
/// `report` must be a live handle; `dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn pg_report_write(report: *const PgReport, dir: *const c_char) -> PgStatus {
    guard(|| {
        let r = handle(report)?;
        let meta = serde_json::json!({ "source": "ffi" });
        Ok(cli::write_outputs(
            Path::new(str_arg(dir)?),
            &r.report,
            &r.outcome,
            &meta,
        )?)
    })
}

/// # Safety
/// `report` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pg_report_free(report: *mut PgReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

fn potential(p: PgPotential) -> Potential {
    match p.kind {
        PgPotentialKind::Zero => Potential::Zero,
        PgPotentialKind::Harmonic => Potential::Harmonic { k: p.a },
        PgPotentialKind::Cosine => Potential::Cosine { a: p.a, k: p.b },
        PgPotentialKind::Gaussian => Potential::Gaussian { a: p.a, s: p.b },
    }
}

fn kinetic_params(p: &PgModelParams) -> Result<KineticParams, Failure> {
    let g = p.grid;
    Ok(KineticParams {
        grid: PhaseGrid::new(g.q_min, g.q_max, g.nq, g.periodic, g.p_max, g.np)?,
        m: p.m,
        gamma: p.gamma,
        v: potential(p.v),
        phi: potential(p.phi),
        mechanism: match p.mechanism {
            PgMechanism::Andersen => Mechanism::Andersen,
            PgMechanism::Diffusive => Mechanism::Vfp,
        },
    })
}

/// # Safety
/// `params` must point to a valid struct; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pg_kinetic_new(params: *const PgModelParams, out: *mut *mut PgKineticModel) -> PgStatus {
    guard(|| {
        let p = kinetic_params(handle(params)?)?;
        publish(out, PgKineticModel(KineticModel::new(p)?))
    })
}

/// Number of grid cells, `nq * np`.
///
/// # Safety
/// `model` must be a live handle; `cells` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pg_kinetic_cells(model: *const PgKineticModel, cells: *mut usize) -> PgStatus {
    guard(|| {
        let n = handle(model)?.0.grid().len();
        *cells.as_mut().ok_or_else(null)? = n;
        Ok(())
    })
}

/// Largest stable explicit step.
///
/// # Safety
/// `model` must be a live handle; `bound` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pg_kinetic_cfl_bound(model: *const PgKineticModel, bound: *mut f64) -> PgStatus {
    guard(|| {
        let b = kinetic::cfl_bound(&handle(model)?.0);
        *bound.as_mut().ok_or_else(null)? = b;
        Ok(())
    })
}

/// Normalized Gibbs density, row-major with `p` fastest.
///
/// # Safety
/// `model` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pg_kinetic_gibbs(model: *const PgKineticModel, out: *mut f64, len: usize) -> PgStatus {
    guard(|| {
        let m = &handle(model)?.0;
        let d = kinetic::gibbs(m)?;
        out_slice(out, len, d.values.len())?.copy_from_slice(&d.values);
        Ok(())
    })
}

/// Evolves `rho0` (unit mass) for `steps` steps of size `dt` into `out`.
/// `tainted` reports whether positivity clipping removed too much mass.
///
/// # Safety
/// `rho0` and `out` must hold `len` doubles; `tainted` may be null.
#[no_mangle]
pub unsafe extern "C" fn pg_kinetic_run(
    model: *const PgKineticModel,
    rho0: *const f64,
    dt: f64,
    steps: usize,
    out: *mut f64,
    len: usize,
    tainted: *mut bool,
) -> PgStatus {
    guard(|| {
        let m = &handle(model)?.0;
        let g = *m.grid();
        if rho0.is_null() {
            return Err(null());
        }
        if len != g.len() {
            return Err(Failure::Status(
                PgStatus::InvalidInput,
                format!("{len} values for {} cells", g.len()),
            ));
        }
        let start = GridDensity::new(g, std::slice::from_raw_parts(rho0, len).to_vec())?;
        let run = kinetic::run_kinetic(m, &start, dt, steps)?;
        out_slice(out, len, len)?.copy_from_slice(&run.density.values);
        if let Some(t) = tainted.as_mut() {
            *t = run.tainted;
        }
        Ok(())
    })
}

/// `S(rho) = ∫ rho log rho + E(rho)` for a density on the model grid.
///
/// # Safety
/// `rho` must hold `len` doubles; `value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pg_kinetic_entropy(
    model: *const PgKineticModel,
    rho: *const f64,
    len: usize,
    value: *mut f64,
) -> PgStatus {
    guard(|| {
        let m = &handle(model)?.0;
        if rho.is_null() {
            return Err(null());
        }
        let d = GridDensity::new(*m.grid(), std::slice::from_raw_parts(rho, len).to_vec())?;
        *value.as_mut().ok_or_else(null)? = kinetic::entropy(m, &d);
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pg_kinetic_free(model: *mut PgKineticModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// `n` particles drawn from independent Gaussians in `q` and `p`. The
/// grid of `params` is used only for its periodic window.
///
/// # Safety
/// `params` must point to a valid struct; `out` must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn pg_particles_gaussian(
    params: *const PgModelParams,
    n: usize,
    seed: u64,
    q0: f64,
    p0: f64,
    sq: f64,
    sp: f64,
    out: *mut *mut PgEnsemble,
) -> PgStatus {
    guard(|| {
        let p = handle(params)?;
        let prm = ParticleParams {
            m: p.m,
            gamma: p.gamma,
            v: potential(p.v),
            phi: potential(p.phi),
            mechanism: match p.mechanism {
                PgMechanism::Andersen => ParticleMechanism::Andersen,
                PgMechanism::Diffusive => ParticleMechanism::Langevin,
            },
            periodic: p.grid.periodic.then_some([p.grid.q_min, p.grid.q_max]),
        };
        publish(
            out,
            PgEnsemble(ParticleEnsemble::gaussian(prm, n, seed, q0, p0, sq, sp)?),
        )
    })
}

/// Advances `steps` steps; a step above the stability bound is refused
/// before any state changes.
///
/// # Safety
/// `ens` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pg_particles_run(ens: *mut PgEnsemble, dt: f64, steps: usize) -> PgStatus {
    guard(|| Ok(handle_mut(ens)?.0.run(dt, steps)?))
}

/// Particle count and elapsed time.
///
/// # Safety
/// `ens` must be a live handle; `n` and `time` may be null.
#[no_mangle]
pub unsafe extern "C" fn pg_particles_info(ens: *const PgEnsemble, n: *mut usize, time: *mut f64) -> PgStatus {
    guard(|| {
        let e = &handle(ens)?.0;
        if let Some(n) = n.as_mut() {
            *n = e.len();
        }
        if let Some(t) = time.as_mut() {
            *t = e.time;
        }
        Ok(())
    })
}

/// Copies positions and momenta; either output may be null.
///
/// # Safety
/// Non-null outputs must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pg_particles_state(ens: *const PgEnsemble, q: *mut f64, p: *mut f64, len: usize) -> PgStatus {
    guard(|| {
        let e = &handle(ens)?.0;
        if !q.is_null() {
            out_slice(q, len, e.len())?.copy_from_slice(&e.q);
        }
        if !p.is_null() {
            out_slice(p, len, e.len())?.copy_from_slice(&e.p);
        }
        Ok(())
    })
}

/// # Safety
/// `ens` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pg_particles_free(ens: *mut PgEnsemble) {
    if !ens.is_null() {
        drop(Box::from_raw(ens));
    }
}
