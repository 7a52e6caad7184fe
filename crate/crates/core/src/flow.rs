//! Fixed-step RK4 integration of bundle flows with monitors.

use crate::error::{invalid, Error, Result};
use crate::report::{CheckReport, Location};
use crate::structure::{generic_residual, Bundle, Vector};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Magnitude beyond which a state is treated as blown up.
pub const BLOW_UP: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub entropy: Vec<f64>,
    /// Empty when the bundle has no energy.
    pub energy: Vec<f64>,
    /// NaN where the residual could not be evaluated.
    #[serde(with = "crate::serde_ext::extended_real_vec")]
    pub residual: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Vector {
        Vector::from_column_slice(self.states.last().expect("trajectory is never empty"))
    }

    fn push(&mut self, bundle: &Bundle, t: f64, z: &Vector, residual: bool) {
        self.times.push(t);
        self.states.push(z.as_slice().to_vec());
        self.entropy.push(bundle.s.value(z));
        if let Some(e) = &bundle.e {
            self.energy.push(e.value(z));
        }
        let r = if residual {
            bundle
                .flow(z)
                .and_then(|v| generic_residual(bundle, z, &v))
                .unwrap_or(f64::NAN)
        } else {
            f64::NAN
        };
        self.residual.push(r);
    }

    /// CSV with columns `t, z1..zn, S, E, residual`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let n = self.states.first().map_or(0, |s| s.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("z{i}")));
        header.extend(["S".into(), "E".into(), "residual".into()]);
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.len() {
            let mut row = vec![fmt(self.times[k])];
            row.extend(self.states[k].iter().map(|x| fmt(*x)));
            row.push(fmt(self.entropy[k]));
            row.push(self.energy.get(k).map_or(String::new(), |e| fmt(*e)));
            row.push(if self.residual[k].is_nan() {
                String::new()
            } else {
                fmt(self.residual[k])
            });
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

pub(crate) fn fmt(x: f64) -> String {
    format!("{x:e}")
}

/// Integration stopped early; `partial` holds the accepted steps.
#[derive(Debug)]
pub struct Aborted {
    pub partial: Trajectory,
    pub error: Error,
}

impl From<Aborted> for Error {
    fn from(a: Aborted) -> Self {
        a.error
    }
}

pub fn rk4_step(f: &dyn Fn(&Vector) -> Result<Vector>, z: &Vector, dt: f64) -> Result<Vector> {
    let k1 = f(z)?;
    let k2 = f(&(z + 0.5 * dt * &k1))?;
    let k3 = f(&(z + 0.5 * dt * &k2))?;
    let k4 = f(&(z + dt * &k3))?;
    Ok(z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
}

/// Number of steps of size `dt` covering `[0, t]`.
pub fn step_count(t: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid(format!("time step must be positive, got {dt}")));
    }
    if !(t >= dt) {
        return Err(invalid(format!("duration {t} is shorter than the step {dt}")));
    }
    Ok((t / dt).round() as usize)
}

/// RK4 trajectory of the bundle flow. The generic residual is monitored
/// when the bundle has a closed-form Ψ.
pub fn integrate(bundle: &Bundle, z0: &Vector, t: f64, dt: f64) -> std::result::Result<Trajectory, Aborted> {
    let empty = |error| Aborted {
        partial: Trajectory {
            dt,
            times: vec![],
            states: vec![],
            entropy: vec![],
            energy: vec![],
            residual: vec![],
        },
        error,
    };
    let steps = step_count(t, dt).map_err(empty)?;
    if z0.len() != bundle.dim {
        return Err(empty(invalid(format!(
            "initial state has dimension {}, bundle has {}",
            z0.len(),
            bundle.dim
        ))));
    }
    if let Err(e) = bundle.flow(z0) {
        return Err(empty(e));
    }
    let residual = bundle.psi.is_some();
    let mut traj = Trajectory {
        dt,
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        entropy: Vec::with_capacity(steps + 1),
        energy: Vec::new(),
        residual: Vec::with_capacity(steps + 1),
    };
    traj.push(bundle, 0.0, z0, residual);
    let f = |z: &Vector| bundle.flow(z);
    let mut z = z0.clone();
    for k in 1..=steps {
        let time = k as f64 * dt;
        let next = match rk4_step(&f, &z, dt) {
            Ok(n) => n,
            Err(error) => return Err(Aborted { partial: traj, error }),
        };
        if next.iter().any(|x| !x.is_finite() || x.abs() > BLOW_UP) {
            let reason = format!("state left the finite range |z| <= {BLOW_UP:e}");
            return Err(Aborted {
                partial: traj,
                error: Error::BlowUp { step: k, time, reason },
            });
        }
        z = next;
        traj.push(bundle, time, &z, residual);
    }
    Ok(traj)
}

/// `max_k (S(z_{k+1}) − S(z_k))/dt` clipped at 0, against `10·dt²`.
pub fn monitor_lyapunov(traj: &Trajectory) -> CheckReport {
    let tol = 10.0 * traj.dt * traj.dt;
    let mut worst = 0.0;
    let mut at = 0;
    for k in 1..traj.entropy.len() {
        let r = ((traj.entropy[k] - traj.entropy[k - 1]) / traj.dt).max(0.0);
        if r > worst {
            worst = r;
            at = k;
        }
    }
    CheckReport::new(
        "lyapunov",
        "S is nonincreasing along the flow",
        worst,
        tol,
        traj.len().saturating_sub(1),
    )
    .with_location(Location {
        state: traj.states.get(at).cloned().unwrap_or_default(),
        note: Some(format!("t = {}", traj.times.get(at).copied().unwrap_or(0.0))),
        ..Default::default()
    })
}

/// Maximum energy drift `max_k |E(z_k) − E(z_0)|`.
pub fn energy_drift(traj: &Trajectory) -> Option<f64> {
    let e0 = *traj.energy.first()?;
    Some(traj.energy.iter().map(|e| (e - e0).abs()).fold(0.0, f64::max))
}

pub fn monitor_energy(traj: &Trajectory, tol: f64) -> CheckReport {
    const NAME: &str = "energy-conservation";
    const ID: &str = "E is conserved along the flow";
    match energy_drift(traj) {
        None => CheckReport::not_applicable(NAME, ID, "bundle has no energy"),
        Some(d) => CheckReport::new(NAME, ID, d, tol, traj.len()),
    }
}

/// `C·dt⁴·T` with `C` measured from a run at `dt/2`, floored by the
/// accumulated rounding of `E` over the run.
pub fn energy_tolerance(bundle: &Bundle, z0: &Vector, t: f64, dt: f64) -> Result<f64> {
    let half = integrate(bundle, z0, t, 0.5 * dt)?;
    let drift = energy_drift(&half).unwrap_or(0.0);
    let c = drift / ((0.5 * dt).powi(4) * t);
    let e0 = half.energy.first().map_or(1.0, |e| e.abs().max(1.0));
    let floor = 1e-15 * e0 * (t / dt);
    Ok((2.0 * c * dt.powi(4) * t).max(floor))
}

/// Residual of the flow's variational characterization along the trajectory.
pub fn monitor_residual(traj: &Trajectory, tol: f64) -> CheckReport {
    const NAME: &str = "generic-residual-along-flow";
    const ID: &str = "Psi(z, F - W) + Psi*(z, -dS/2) + <F, dS>/2 = 0 along the trajectory";
    if traj.residual.iter().all(|r| r.is_nan()) {
        return CheckReport::not_applicable(NAME, ID, "no closed-form dissipation potential");
    }
    let worst = traj
        .residual
        .iter()
        .filter(|r| !r.is_nan())
        .map(|r| r.abs())
        .fold(0.0, f64::max);
    CheckReport::new(NAME, ID, worst, tol, traj.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtins;
    use crate::structure::{Functional, Hamiltonian, Kind, Matrix};

    #[test]
    fn zero_flow_is_constant() {
        let mut b = Bundle::new(
            "still",
            2,
            Kind::Raw,
            Functional::quadratic(0.0, Vector::zeros(2), Matrix::zeros(2, 2)),
        );
        b.psi_star = Some(Hamiltonian::quadratic(|_| Matrix::zeros(2, 2)));
        let z0 = Vector::from_vec(vec![0.3, -1.0]);
        let tr = integrate(&b, &z0, 1.0, 0.1).unwrap();
        assert!(tr.states.iter().all(|s| s == &vec![0.3, -1.0]));
        assert_eq!(monitor_lyapunov(&tr).residual, 0.0);
    }

    #[test]
    fn blow_up_returns_partial_trajectory() {
        let mut b = Bundle::new(
            "explode",
            1,
            Kind::Raw,
            Functional::quadratic(0.0, Vector::zeros(1), Matrix::zeros(1, 1)),
        );
        b.psi_star = Some(Hamiltonian::quadratic(|_| Matrix::zeros(1, 1)));
        b.flow = Some(std::sync::Arc::new(|z: &Vector| z.map(|x| x * x)));
        let err = integrate(&b, &Vector::from_element(1, 1.0), 10.0, 0.01).unwrap_err();
        assert!(matches!(err.error, Error::BlowUp { .. }));
        assert!(!err.partial.is_empty());
    }

    #[test]
    fn rejects_bad_steps() {
        let b = builtins::rotation();
        let z = Vector::zeros(2);
        assert!(integrate(&b, &z, 1.0, 0.0).is_err());
        assert!(integrate(&b, &z, 0.01, 0.1).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let b = builtins::damped_oscillator(Default::default());
        let tr = integrate(&b, &Vector::from_vec(vec![1.0, 0.0, 0.0]), 0.1, 0.05).unwrap();
        let mut out = Vec::new();
        tr.write_csv(&mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "t,z1,z2,z3,S,E,residual");
        assert_eq!(lines.len(), 4);
    }
}
