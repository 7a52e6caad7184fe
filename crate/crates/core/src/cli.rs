//! Declarative experiments: configuration files, the built-in catalog,
//! report generation and report comparison.

use crate::builtins::{finite_builtin, Oscillator, FINITE_BUILTINS};
use crate::error::{Error, Result};
use crate::extension::{bar_extend, hat_extend};
use crate::flow::{energy_tolerance, integrate, monitor_energy, monitor_lyapunov, monitor_residual};
use crate::kinetic::{
    audit_kinetic, cfl_bound, gaussian_blob, kinetic_bundle, random_smooth, run_kinetic, KineticModel, KineticParams,
    Mechanism, PhaseGrid, Potential, TAINT_MASS, TINY,
};
use crate::particles::{
    empirical_measure, gibbs_position_cdf, interaction_force_ratio, ks_band_99, ks_distance, monotonicity_excess,
    propagation_study, sample_stationary, Blob, ParticleEnsemble, ParticleMechanism, ParticleParams,
};
use crate::report::{CheckReport, Verdict};
use crate::structure::{audit, Bundle, Vector};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const TOOL: &str = "pregeneric";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Environment variable overriding the output directory.
pub const ENV_OUT: &str = "PREGENERIC_OUT";
/// Environment variable overriding the worker thread count.
pub const ENV_THREADS: &str = "PREGENERIC_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    StructureAudit,
    Flow,
    Kinetic,
    Particles,
    Convergence,
}

/// One experiment: a catalog bundle, the numerical parameters of the
/// chosen kind and the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Catalog name; see `list`.
    pub bundle: String,
    /// Required for the stochastic kinds `particles` and `convergence`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Multiplies every check tolerance.
    #[serde(default = "unit")]
    pub tol_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Parameters of the oscillator built-ins.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oscillator: Option<Oscillator>,
    /// Overrides of the kinetic and particle model parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelOverrides>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit: Option<AuditSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<FlowSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kinetic: Option<KineticSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub particles: Option<ParticleSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceSection>,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<PhaseGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<Potential>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<Potential>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct AuditSection {
    /// Sampled states (densities for kinetic models).
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    pub t: f64,
    pub dt: f64,
    /// Initial state; defaults to the first unit vector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<f64>>,
}

impl Default for FlowSection {
    fn default() -> Self {
        Self {
            t: 10.0,
            dt: 1e-3,
            initial: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct KineticSection {
    pub t: f64,
    /// Defaults to 90% of the stability bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// Gaussian start; a random smooth density when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Blob>,
}

impl Default for KineticSection {
    fn default() -> Self {
        Self {
            t: 1.0,
            dt: None,
            initial: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ParticleSection {
    pub n: usize,
    pub dt: f64,
    pub burn_in: f64,
    pub thin: f64,
    pub snapshots: usize,
    pub initial: Blob,
    /// Histogram grid.
    pub grid: PhaseGrid,
}

impl Default for ParticleSection {
    fn default() -> Self {
        Self {
            n: 5000,
            dt: 0.01,
            burn_in: 10.0,
            thin: 10.0,
            snapshots: 10,
            initial: Blob {
                q0: 1.0,
                p0: 0.0,
                sq: 0.5,
                sp: 0.5,
            },
            grid: PhaseGrid {
                q_min: -5.0,
                q_max: 5.0,
                nq: 32,
                periodic: false,
                p_max: 5.0,
                np: 32,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceSection {
    pub ns: Vec<usize>,
    pub seeds: usize,
    pub t: f64,
    pub dt: f64,
    pub initial: Blob,
    pub grid: PhaseGrid,
}

impl Default for ConvergenceSection {
    fn default() -> Self {
        Self {
            ns: vec![1000, 10_000],
            seeds: 4,
            t: 2.0,
            dt: 0.01,
            initial: Blob {
                q0: 1.0,
                p0: 0.0,
                sq: 0.5,
                sp: 0.5,
            },
            grid: PhaseGrid {
                q_min: -6.0,
                q_max: 6.0,
                nq: 64,
                periodic: false,
                p_max: 6.0,
                np: 64,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Extension {
    None,
    Hat,
    Bar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    Finite,
    Kinetic(Mechanism, Extension),
    Particles(ParticleMechanism),
}

#[derive(Debug, Clone, Copy)]
pub struct CatalogEntry {
    pub name: &'static str,
    /// Kind run by the entry's default config.
    pub kind: ExperimentKind,
    pub description: &'static str,
    family: Family,
}

impl CatalogEntry {
    /// Kinds this entry can run.
    pub fn kinds(&self) -> &'static [ExperimentKind] {
        use ExperimentKind::*;
        match self.family {
            Family::Finite => &[StructureAudit, Flow],
            Family::Kinetic(_, Extension::None) => &[StructureAudit, Kinetic],
            Family::Kinetic(..) => &[StructureAudit],
            Family::Particles(_) => &[Particles, Convergence],
        }
    }
}

const fn entry(name: &'static str, kind: ExperimentKind, description: &'static str, family: Family) -> CatalogEntry {
    CatalogEntry {
        name,
        kind,
        description,
        family,
    }
}

const CATALOG: [CatalogEntry; 15] = {
    use ExperimentKind::*;
    use Extension::{Bar, Hat};
    use Mechanism::{Andersen, Vfp};
    let none = Extension::None;
    [
        entry(
            "damped-oscillator",
            StructureAudit,
            "GENERIC damped oscillator on (q, p, e)",
            Family::Finite,
        ),
        entry(
            "damped-oscillator-bar",
            Flow,
            "bar extension of the frictional oscillator on (q, p)",
            Family::Finite,
        ),
        entry(
            "rotation-preGENERIC",
            StructureAudit,
            "rotation drift on R^2 with quadratic dissipation",
            Family::Finite,
        ),
        entry(
            "rotation-hat",
            StructureAudit,
            "hat extension of the rotation example",
            Family::Finite,
        ),
        entry(
            "rotation-bar",
            StructureAudit,
            "bar extension of the rotation example",
            Family::Finite,
        ),
        entry(
            "quadratic-gradient-flow",
            StructureAudit,
            "one-dimensional quadratic gradient flow",
            Family::Finite,
        ),
        entry(
            "quadratic-gradient-flow-hat",
            StructureAudit,
            "hat extension of the quadratic gradient flow",
            Family::Finite,
        ),
        entry(
            "andersen-kinetic",
            Kinetic,
            "kinetic model with Andersen momentum resampling",
            Family::Kinetic(Andersen, none),
        ),
        entry(
            "vfp-kinetic",
            Kinetic,
            "Vlasov-Fokker-Planck kinetic model",
            Family::Kinetic(Vfp, none),
        ),
        entry(
            "andersen-kinetic-hat",
            StructureAudit,
            "hat extension of the Andersen kinetic model",
            Family::Kinetic(Andersen, Hat),
        ),
        entry(
            "andersen-kinetic-bar",
            StructureAudit,
            "bar extension of the Andersen kinetic model",
            Family::Kinetic(Andersen, Bar),
        ),
        entry(
            "vfp-kinetic-hat",
            StructureAudit,
            "hat extension of the VFP kinetic model",
            Family::Kinetic(Vfp, Hat),
        ),
        entry(
            "vfp-kinetic-bar",
            StructureAudit,
            "bar extension of the VFP kinetic model",
            Family::Kinetic(Vfp, Bar),
        ),
        entry(
            "andersen-particles",
            Particles,
            "n particles with Andersen thermostat",
            Family::Particles(ParticleMechanism::Andersen),
        ),
        entry(
            "langevin-particles",
            Particles,
            "n particles with Langevin momentum noise",
            Family::Particles(ParticleMechanism::Langevin),
        ),
    ]
};

pub fn catalog() -> &'static [CatalogEntry] {
    &CATALOG
}

pub fn catalog_entry(name: &str) -> Option<&'static CatalogEntry> {
    CATALOG.iter().find(|e| e.name == name)
}

/// The config `run --builtin NAME` uses.
pub fn default_config(name: &str) -> Option<ExperimentConfig> {
    let e = catalog_entry(name)?;
    let mut cfg = ExperimentConfig {
        kind: e.kind,
        bundle: name.to_string(),
        seed: Some(1),
        tol_scale: 1.0,
        output: None,
        oscillator: None,
        model: None,
        audit: None,
        flow: None,
        kinetic: None,
        particles: None,
        convergence: None,
    };
    match e.kind {
        ExperimentKind::StructureAudit => {
            cfg.audit = Some(AuditSection {
                samples: default_samples(e.family),
            })
        }
        ExperimentKind::Flow => cfg.flow = Some(FlowSection::default()),
        ExperimentKind::Kinetic => cfg.kinetic = Some(KineticSection::default()),
        ExperimentKind::Particles => cfg.particles = Some(ParticleSection::default()),
        ExperimentKind::Convergence => cfg.convergence = Some(ConvergenceSection::default()),
    }
    if e.family == Family::Finite && name.starts_with("damped") {
        cfg.oscillator = Some(Oscillator::default());
    }
    Some(cfg)
}

fn default_samples(f: Family) -> usize {
    match f {
        Family::Finite => 256,
        Family::Kinetic(_, Extension::None) => 3,
        _ => 8,
    }
}

fn config_error(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

fn positive(path: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(config_error(path, format!("must be positive and finite, got {x}")))
    }
}

/// Parses and validates a TOML config; errors carry the offending key path.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| config_error("<document>", e.to_string()))?;
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        config_error(
            if path == "." { "<document>" } else { &path },
            e.into_inner().to_string(),
        )
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| config_error("<file>", format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| config_error("<document>", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        positive("tol_scale", self.tol_scale)?;
        let e = catalog_entry(&self.bundle)
            .ok_or_else(|| config_error("bundle", format!("unknown built-in `{}`; see `list`", self.bundle)))?;
        if !e.kinds().contains(&self.kind) {
            return Err(config_error(
                "kind",
                format!("`{}` cannot run {:?} experiments", self.bundle, self.kind),
            ));
        }
        if matches!(self.kind, ExperimentKind::Particles | ExperimentKind::Convergence) && self.seed.is_none() {
            return Err(config_error("seed", "stochastic experiments need a seed"));
        }
        if let Some(o) = &self.oscillator {
            positive("oscillator.m", o.m)?;
            positive("oscillator.k", o.k)?;
            if !(o.gamma >= 0.0 && o.gamma.is_finite()) {
                return Err(config_error("oscillator.gamma", "must be nonnegative"));
            }
        }
        if let Some(m) = &self.model {
            if let Some(x) = m.m {
                positive("model.m", x)?;
            }
            if let Some(g) = m.gamma {
                if !(g >= 0.0 && g.is_finite()) {
                    return Err(config_error("model.gamma", "must be nonnegative"));
                }
            }
            if let Some(g) = &m.grid {
                g.validate().map_err(|e| config_error("model.grid", e.to_string()))?;
            }
            for (path, v) in [("model.v", m.v), ("model.phi", m.phi)] {
                if let Some(v) = v {
                    v.validate(path).map_err(|e| config_error(path, e.to_string()))?;
                }
            }
        }
        if let Some(f) = &self.flow {
            positive("flow.t", f.t)?;
            positive("flow.dt", f.dt)?;
        }
        if let Some(k) = &self.kinetic {
            positive("kinetic.t", k.t)?;
            if let Some(dt) = k.dt {
                positive("kinetic.dt", dt)?;
            }
            if let Some(b) = &k.initial {
                blob_ok("kinetic.initial", b)?;
            }
        }
        if let Some(p) = &self.particles {
            if p.n == 0 {
                return Err(config_error("particles.n", "need at least one particle"));
            }
            if p.snapshots == 0 {
                return Err(config_error("particles.snapshots", "need at least one snapshot"));
            }
            positive("particles.dt", p.dt)?;
            if !(p.burn_in >= 0.0 && p.thin >= 0.0) {
                return Err(config_error(
                    "particles.burn_in",
                    "burn-in and thinning must be nonnegative",
                ));
            }
            blob_ok("particles.initial", &p.initial)?;
            p.grid
                .validate()
                .map_err(|e| config_error("particles.grid", e.to_string()))?;
        }
        if let Some(c) = &self.convergence {
            if c.ns.is_empty() || c.ns.contains(&0) {
                return Err(config_error("convergence.ns", "need positive particle counts"));
            }
            if c.seeds < 2 {
                return Err(config_error(
                    "convergence.seeds",
                    "need at least two seeds for sampling bands",
                ));
            }
            positive("convergence.t", c.t)?;
            positive("convergence.dt", c.dt)?;
            blob_ok("convergence.initial", &c.initial)?;
            c.grid
                .validate()
                .map_err(|e| config_error("convergence.grid", e.to_string()))?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn entry(&self) -> &'static CatalogEntry {
        catalog_entry(&self.bundle).expect("validated bundle name")
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

fn blob_ok(path: &str, b: &Blob) -> Result<()> {
    positive(&format!("{path}.sq"), b.sq)?;
    positive(&format!("{path}.sp"), b.sp)?;
    if !(b.q0.is_finite() && b.p0.is_finite()) {
        return Err(config_error(path, "centre must be finite"));
    }
    Ok(())
}

/// Report, auxiliary files and scalar parameters of one run.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub checks: Vec<CheckReport>,
    pub parameters: BTreeMap<String, f64>,
    pub files: Vec<(String, Vec<u8>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub passed: usize,
    pub failed: usize,
    pub not_applicable: usize,
    pub tainted: usize,
    /// Every check that is not tainted passed or does not apply.
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub experiment: ExperimentKind,
    pub bundle: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub tol_scale: f64,
    pub parameters: BTreeMap<String, f64>,
    pub checks: Vec<CheckReport>,
    pub summary: Summary,
}

impl Report {
    pub fn exit_code(&self) -> i32 {
        if self.summary.ok {
            0
        } else {
            1
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn check(&self, name: &str) -> Option<&CheckReport> {
        self.checks.iter().find(|c| c.check_name == name)
    }
}

pub fn summarize(checks: &[CheckReport]) -> Summary {
    let count = |v: Verdict| checks.iter().filter(|c| c.verdict == v).count();
    Summary {
        passed: count(Verdict::Pass),
        failed: count(Verdict::Fail),
        not_applicable: count(Verdict::NotApplicable),
        tainted: checks.iter().filter(|c| c.tainted).count(),
        ok: checks.iter().all(|c| c.tainted || c.verdict != Verdict::Fail),
    }
}

/// Exit code of a run that stopped with an error.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::InvalidInput(_) => 2,
        Error::Cfl { .. } | Error::BlowUp { .. } | Error::Refused(_) | Error::DegenerateFunction => 3,
        Error::Io(_) | Error::Json(_) => 4,
    }
}

/// Runs the experiment in memory; nothing is written.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(Report, Outcome)> {
    cfg.validate()?;
    let mut out = match cfg.kind {
        ExperimentKind::StructureAudit => run_audit(cfg)?,
        ExperimentKind::Flow => run_flow(cfg)?,
        ExperimentKind::Kinetic => run_kinetic_experiment(cfg)?,
        ExperimentKind::Particles => run_particles(cfg)?,
        ExperimentKind::Convergence => run_convergence(cfg)?,
    };
    for c in out.checks.iter_mut() {
        c.scale_tolerance(cfg.tol_scale);
    }
    let report = Report {
        tool: TOOL.into(),
        version: VERSION.into(),
        config_hash: cfg.hash(),
        experiment: cfg.kind,
        bundle: cfg.bundle.clone(),
        seed: cfg.seed,
        tol_scale: cfg.tol_scale,
        parameters: out.parameters.clone(),
        checks: out.checks.clone(),
        summary: summarize(&out.checks),
    };
    Ok((report, out))
}

/// Writes `report.json`, the auxiliary files and `metadata.json`.
pub fn write_outputs(dir: &Path, report: &Report, outcome: &Outcome, metadata: &serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), report.to_json()?)?;
    for (name, bytes) in &outcome.files {
        std::fs::write(dir.join(name), bytes)?;
    }
    std::fs::write(
        dir.join("metadata.json"),
        serde_json::to_string_pretty(metadata)? + "\n",
    )?;
    Ok(())
}

/// Output directory: explicit flag, then the environment, then the
/// config, then `out/<bundle>`.
pub fn resolve_output(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(ENV_OUT) {
        return PathBuf::from(p);
    }
    cfg.output.clone().unwrap_or_else(|| Path::new("out").join(&cfg.bundle))
}

fn oscillator(cfg: &ExperimentConfig) -> Oscillator {
    cfg.oscillator.unwrap_or_default()
}

fn kinetic_params(cfg: &ExperimentConfig, mech: Mechanism, ext: Extension) -> Result<KineticParams> {
    let n = if ext == Extension::None { 64 } else { 16 };
    let o = cfg.model.unwrap_or_default();
    Ok(KineticParams {
        grid: match o.grid {
            Some(g) => g,
            None => PhaseGrid::periodic(n, 8.0, n)?,
        },
        m: o.m.unwrap_or(1.0),
        gamma: o.gamma.unwrap_or(1.0),
        v: o.v.unwrap_or(Potential::Cosine { a: 0.5, k: 1.0 }),
        phi: o.phi.unwrap_or(Potential::Zero),
        mechanism: mech,
    })
}

fn particle_params(cfg: &ExperimentConfig, mech: ParticleMechanism) -> ParticleParams {
    let o = cfg.model.unwrap_or_default();
    ParticleParams {
        m: o.m.unwrap_or(1.0),
        gamma: o.gamma.unwrap_or(1.0),
        v: o.v.unwrap_or(Potential::Harmonic { k: 1.0 }),
        phi: o.phi.unwrap_or(Potential::Zero),
        mechanism: mech,
        periodic: o.grid.filter(|g| g.periodic).map(|g| [g.q_min, g.q_max]),
    }
}

fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn finite_bundle(cfg: &ExperimentConfig) -> Result<Bundle> {
    finite_builtin(&cfg.bundle, oscillator(cfg))
        .ok_or_else(|| Error::Refused(format!("built-in `{}` failed to build", cfg.bundle)))
}

fn run_audit(cfg: &ExperimentConfig) -> Result<Outcome> {
    let e = cfg.entry();
    let samples = cfg.audit.map_or(default_samples(e.family), |a| a.samples).max(1);
    let mut parameters = params(&[("samples", samples as f64)]);
    let checks = match e.family {
        Family::Finite => audit(&finite_bundle(cfg)?, samples)?,
        Family::Kinetic(mech, ext) => {
            let model = KineticModel::new(kinetic_params(cfg, mech, ext)?)?;
            let g = model.grid();
            parameters.extend(params(&[
                ("h_max", g.max_spacing()),
                ("nq", g.nq as f64),
                ("np", g.np as f64),
            ]));
            match ext {
                Extension::None => {
                    let dens = (0..samples as u64)
                        .map(|i| random_smooth(&model, cfg.seed() + i))
                        .collect::<Result<Vec<_>>>()?;
                    audit_kinetic(&model, &dens)?
                }
                Extension::Hat => audit(&hat_extend(&kinetic_bundle(&model, e.name))?, samples)?,
                Extension::Bar => audit(&bar_extend(&kinetic_bundle(&model, e.name))?, samples)?,
            }
        }
        Family::Particles(_) => unreachable!("validated kind"),
    };
    Ok(Outcome {
        checks,
        parameters,
        files: vec![],
    })
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn run_flow(cfg: &ExperimentConfig) -> Result<Outcome> {
    let b = finite_bundle(cfg)?;
    let f = cfg.flow.clone().unwrap_or_default();
    let z0 = match &f.initial {
        Some(v) if v.len() != b.dim => {
            return Err(config_error(
                "flow.initial",
                format!("expected {} coordinates, got {}", b.dim, v.len()),
            ))
        }
        Some(v) => Vector::from_vec(v.clone()),
        None => Vector::from_fn(b.dim, |i, _| if i == 0 { 1.0 } else { 0.0 }),
    };
    let traj = integrate(&b, &z0, f.t, f.dt)?;
    let mut checks = vec![monitor_lyapunov(&traj)];
    if b.e.is_some() {
        checks.push(monitor_energy(&traj, energy_tolerance(&b, &z0, f.t, f.dt)?));
    }
    checks.push(monitor_residual(&traj, b.tol_residual()));
    let last = serde_json::to_vec_pretty(&serde_json::json!({ "t": traj.times.last(), "state": traj.states.last() }))?;
    Ok(Outcome {
        checks,
        parameters: params(&[("t", f.t), ("dt", f.dt), ("steps", (traj.len() - 1) as f64)]),
        files: vec![
            ("trajectory.csv".into(), csv_bytes(|w| traj.write_csv(w))?),
            ("final_state.json".into(), last),
        ],
    })
}

fn run_kinetic_experiment(cfg: &ExperimentConfig) -> Result<Outcome> {
    let Family::Kinetic(mech, _) = cfg.entry().family else {
        unreachable!("validated kind")
    };
    let model = KineticModel::new(kinetic_params(cfg, mech, Extension::None)?)?;
    let k = cfg.kinetic.unwrap_or_default();
    let g = *model.grid();
    let rho0 = match k.initial {
        Some(b) => gaussian_blob(g, b.q0, b.p0, b.sq, b.sp)?,
        None => random_smooth(&model, cfg.seed())?,
    };
    let (dt, steps) = match k.dt {
        Some(dt) => (dt, crate::flow::step_count(k.t, dt)?),
        None => {
            let steps = (k.t / (0.9 * cfl_bound(&model))).ceil().max(1.0) as usize;
            (k.t / steps as f64, steps)
        }
    };
    let run = run_kinetic(&model, &rho0, dt, steps)?;
    let mut checks = vec![run.monitor_lyapunov()];
    let mut clip = CheckReport::new(
        "clipped-mass",
        "negative mass removed by clipping stays below the taint level",
        run.clipped_total,
        TAINT_MASS,
        steps,
    );
    clip.tainted = run.tainted;
    checks.push(clip);
    checks.extend(audit_kinetic(&model, std::slice::from_ref(&rho0))?);
    // the log-entropy structure is singular on empty cells, which clipping
    // can leave behind in the far tails
    let empty = run.density.values.iter().filter(|&&r| r <= TINY).count();
    if empty == 0 {
        for mut c in audit_kinetic(&model, std::slice::from_ref(&run.density))? {
            c.check_name = format!("final-{}", c.check_name);
            c.tainted = run.tainted;
            checks.push(c);
        }
    } else {
        checks.push(CheckReport::not_applicable(
            "final-density-audit",
            "structure checks at the evolved density",
            format!("{empty} empty cells; identities hold on strictly positive densities only"),
        ));
    }
    let density = run.density.to_json()?.into_bytes();
    Ok(Outcome {
        checks,
        parameters: params(&[
            ("t", k.t),
            ("dt", dt),
            ("steps", steps as f64),
            ("h_max", g.max_spacing()),
            ("nq", g.nq as f64),
            ("np", g.np as f64),
            ("max_mass_drift", run.max_mass_drift()),
            ("empty_cells", empty as f64),
        ]),
        files: vec![
            ("monitor.csv".into(), csv_bytes(|w| run.write_csv(w))?),
            ("final_density.json".into(), density),
        ],
    })
}

/// KS check of pooled samples against a reference CDF at the 99% band.
fn ks_check(name: &str, identity: &str, samples: &[f64], cdf: impl Fn(f64) -> f64) -> CheckReport {
    CheckReport::new(
        name,
        identity,
        ks_distance(samples, cdf),
        ks_band_99(samples.len()),
        samples.len(),
    )
    .with_note("snapshots pooled as independent samples")
}

fn run_particles(cfg: &ExperimentConfig) -> Result<Outcome> {
    let Family::Particles(mech) = cfg.entry().family else {
        unreachable!("validated kind")
    };
    let prm = particle_params(cfg, mech);
    let s = cfg.particles.unwrap_or_default();
    let b = s.initial;
    let bound = prm.stability_bound();
    if s.dt > bound {
        return Err(Error::Cfl { dt: s.dt, bound });
    }
    let start = ParticleEnsemble::gaussian(prm, s.n, cfg.seed(), b.q0, b.p0, b.sq, b.sp)?;
    let replay = {
        let (mut a, mut c) = (start.clone(), start.clone());
        a.run(s.dt, 10)?;
        c.run(s.dt, 10)?;
        let same =
            a.q.iter()
                .chain(&a.p)
                .zip(c.q.iter().chain(&c.p))
                .all(|(x, y)| x.to_bits() == y.to_bits());
        CheckReport::new(
            "replay-determinism",
            "equal seeds give bitwise equal trajectories",
            if same { 0.0 } else { 1.0 },
            0.0,
            2,
        )
    };
    let shots = sample_stationary(start, s.dt, s.burn_in, s.thin, s.snapshots)?;
    let q: Vec<f64> = shots.iter().flat_map(|e| e.q.iter().copied()).collect();
    let p: Vec<f64> = shots.iter().flat_map(|e| e.p.iter().copied()).collect();
    let maxwell = Normal::new(0.0, prm.m.sqrt()).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut checks = vec![
        replay,
        ks_check("stationary-momentum-ks", "momenta follow the Maxwellian", &p, |x| {
            maxwell.cdf(x)
        }),
    ];
    const Q_NAME: &str = "stationary-position-ks";
    const Q_ID: &str = "positions follow the Gibbs law exp(-V)";
    let window = match (prm.periodic, prm.v) {
        _ if !prm.phi.is_zero() => None,
        (Some([lo, hi]), _) => Some((lo, hi)),
        (None, Potential::Harmonic { k }) => Some((-12.0 / k.sqrt(), 12.0 / k.sqrt())),
        _ => None,
    };
    checks.push(match window {
        Some((lo, hi)) => ks_check(Q_NAME, Q_ID, &q, gibbs_position_cdf(prm.v, lo, hi)),
        None => CheckReport::not_applicable(Q_NAME, Q_ID, "position law is not a confined product Gibbs law"),
    });
    let last = shots.last().expect("at least one snapshot");
    let hist = empirical_measure(last, &s.grid)?;
    let mass_gap = (hist.density.mass() - (1.0 - hist.spill as f64 / s.n as f64)).abs();
    checks.push(CheckReport::new(
        "histogram-mass",
        "histogram mass equals 1 - spill/n",
        mass_gap,
        1e-12,
        s.n,
    ));
    let mut table = b"snapshot,t,mean_q,mean_p,mean_q2,mean_p2\n".to_vec();
    for (k, e) in shots.iter().enumerate() {
        let n = e.len() as f64;
        let mean = |f: &dyn Fn(usize) -> f64| (0..e.len()).map(f).sum::<f64>() / n;
        let row = [
            e.time,
            mean(&|i| e.q[i]),
            mean(&|i| e.p[i]),
            mean(&|i| e.q[i] * e.q[i]),
            mean(&|i| e.p[i] * e.p[i]),
        ];
        let cells: Vec<String> = row.iter().map(|x| format!("{x:e}")).collect();
        table.extend(format!("{k},{}\n", cells.join(",")).bytes());
    }
    let mut bin = Vec::new();
    last.write_binary(&mut bin)?;
    Ok(Outcome {
        checks,
        parameters: params(&[
            ("n", s.n as f64),
            ("dt", s.dt),
            ("burn_in", s.burn_in),
            ("thin", s.thin),
            ("snapshots", s.snapshots as f64),
            ("spill", hist.spill as f64),
        ]),
        files: vec![
            ("snapshots.csv".into(), table),
            ("final_state.bin".into(), bin),
            ("final_state.json".into(), last.sidecar_json()?.into_bytes()),
            ("histogram.json".into(), hist.density.to_json()?.into_bytes()),
        ],
    })
}

fn run_convergence(cfg: &ExperimentConfig) -> Result<Outcome> {
    let Family::Particles(mech) = cfg.entry().family else {
        unreachable!("validated kind")
    };
    let c = cfg.convergence.clone().unwrap_or_default();
    let prm = particle_params(cfg, mech);
    let bound = prm.stability_bound();
    if c.dt > bound {
        return Err(Error::Cfl { dt: c.dt, bound });
    }
    let model = KineticModel::new(KineticParams {
        grid: c.grid,
        m: prm.m,
        gamma: prm.gamma,
        v: prm.v,
        phi: prm.phi,
        mechanism: mech.kinetic(),
    })?;
    let seeds: Vec<u64> = (0..c.seeds as u64).map(|i| cfg.seed() + i).collect();
    let (rows, run) = propagation_study(&model, c.initial, &c.ns, &seeds, c.t, c.dt)?;
    let mut table = b"n,mean_l1,std_err\n".to_vec();
    for r in &rows {
        table.extend(format!("{},{:e},{:e}\n", r.n, r.mean, r.std_err).bytes());
    }
    let means: Vec<String> = rows.iter().map(|r| format!("n={}: {:.4e}", r.n, r.mean)).collect();
    let mut check = CheckReport::new(
        "propagation-monotone",
        "histogram-to-PDE L1 distance decreases with n within two-sigma bands",
        monotonicity_excess(&rows),
        1.0,
        rows.len() * seeds.len(),
    )
    .with_note(means.join("; "));
    check.tainted = run.tainted;
    let mut parameters = params(&[
        ("t", c.t),
        ("dt", c.dt),
        ("seeds", c.seeds as f64),
        ("h_max", c.grid.max_spacing()),
    ]);
    for r in &rows {
        parameters.insert(format!("mean_l1_n{}", r.n), r.mean);
    }
    let probe = ParticleEnsemble::gaussian(
        prm,
        c.ns[0].min(5_000),
        cfg.seed(),
        c.initial.q0,
        c.initial.p0,
        c.initial.sq,
        c.initial.sp,
    )?;
    let rho0 = gaussian_blob(c.grid, c.initial.q0, c.initial.p0, c.initial.sq, c.initial.sp)?;
    if let Some(r) = interaction_force_ratio(&probe, &rho0) {
        parameters.insert("interaction_force_ratio".into(), r);
        let note = format!(
            "{}; particle/macroscopic interaction force ratio {r:.3}",
            check.note.clone().unwrap_or_default()
        );
        check = check.with_note(note);
    }
    Ok(Outcome {
        checks: vec![check],
        parameters,
        files: vec![
            ("convergence.csv".into(), table),
            ("kinetic_density.json".into(), run.density.to_json()?.into_bytes()),
        ],
    })
}

/// One row of a report comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub check_name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub order: Option<u8>,
    #[serde(with = "crate::serde_ext::extended_real")]
    pub residual_a: f64,
    #[serde(with = "crate::serde_ext::extended_real")]
    pub residual_b: f64,
    /// `residual_a / residual_b`.
    #[serde(with = "crate::serde_ext::extended_real")]
    pub ratio: f64,
    /// `log(ratio) / log(h_a / h_b)` when both reports record `h_max`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observed_order: Option<f64>,
    pub verdict_a: Verdict,
    pub verdict_b: Verdict,
}

/// Structural difference of two reports of the same experiment kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub experiment: ExperimentKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h_ratio: Option<f64>,
    pub rows: Vec<CompareRow>,
    pub only_in_a: Vec<String>,
    pub only_in_b: Vec<String>,
}

impl Comparison {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty() && self.only_in_a.is_empty() && self.only_in_b.is_empty()
    }

    /// Rows of checks flagged second order.
    pub fn second_order(&self) -> impl Iterator<Item = &CompareRow> {
        self.rows.iter().filter(|r| r.order == Some(2))
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<32} {:>12} {:>12} {:>9} {:>8} {:>8}\n",
            "check", "residual_a", "residual_b", "ratio", "expected", "observed"
        );
        for r in &self.rows {
            let exp = r.order.map_or("-".to_string(), |o| o.to_string());
            let obs = r.observed_order.map_or("-".to_string(), |o| format!("{o:.2}"));
            s += &format!(
                "{:<32} {:>12.4e} {:>12.4e} {:>9.3} {:>8} {:>8}\n",
                r.check_name, r.residual_a, r.residual_b, r.ratio, exp, obs
            );
        }
        for n in &self.only_in_a {
            s += &format!("only in a: {n}\n");
        }
        for n in &self.only_in_b {
            s += &format!("only in b: {n}\n");
        }
        s
    }
}

pub fn compare(a: &Report, b: &Report) -> Result<Comparison> {
    if a.experiment != b.experiment {
        return Err(Error::Refused(format!(
            "cannot compare a {:?} report with a {:?} report",
            a.experiment, b.experiment
        )));
    }
    let h_ratio = match (a.parameters.get("h_max"), b.parameters.get("h_max")) {
        (Some(x), Some(y)) if x != y => Some(x / y),
        _ => None,
    };
    let mut rows = Vec::new();
    let mut only_in_a = Vec::new();
    for ca in &a.checks {
        let Some(cb) = b.check(&ca.check_name) else {
            only_in_a.push(ca.check_name.clone());
            continue;
        };
        let same =
            ca.residual.to_bits() == cb.residual.to_bits() && ca.tolerance == cb.tolerance && ca.verdict == cb.verdict;
        if same {
            continue;
        }
        let ratio = ca.residual / cb.residual;
        rows.push(CompareRow {
            check_name: ca.check_name.clone(),
            order: ca.order,
            residual_a: ca.residual,
            residual_b: cb.residual,
            ratio,
            observed_order: h_ratio
                .filter(|_| ratio.is_finite() && ratio > 0.0)
                .map(|h| ratio.ln() / h.ln()),
            verdict_a: ca.verdict,
            verdict_b: cb.verdict,
        });
    }
    let only_in_b = b
        .checks
        .iter()
        .filter(|c| a.check(&c.check_name).is_none())
        .map(|c| c.check_name.clone())
        .collect();
    Ok(Comparison {
        experiment: a.experiment,
        h_ratio,
        rows,
        only_in_a,
        only_in_b,
    })
}

pub fn load_report(path: &Path) -> Result<Report> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// JSON schema of the config format.
pub fn config_schema() -> String {
    serde_json::to_string_pretty(&schemars::schema_for!(ExperimentConfig)).expect("schema serializes")
}

/// Catalog as `(name, default kind, description)` rows, finite built-ins
/// checked to exist.
pub fn catalog_rows() -> Vec<(String, ExperimentKind, String)> {
    debug_assert!(FINITE_BUILTINS.iter().all(|n| catalog_entry(n).is_some()));
    CATALOG
        .iter()
        .map(|e| (e.name.to_string(), e.kind, e.description.to_string()))
        .collect()
}
