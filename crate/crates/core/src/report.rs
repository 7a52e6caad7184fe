//! Check reports shared by every module.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    Fail,
    NotApplicable,
}

/// Where the worst residual of a check was observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Location {
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub state: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub covector: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check_name: String,
    /// The identity that was tested, in words.
    pub identity: String,
    #[serde(with = "crate::serde_ext::extended_real")]
    pub residual: f64,
    pub tolerance: f64,
    pub verdict: Verdict,
    pub samples: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub worst_case_location: Option<Location>,
    /// Expected convergence order in the grid spacing, when the residual is a
    /// discretization error rather than rounding.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub order: Option<u8>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub tainted: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

impl CheckReport {
    /// Builds a report whose verdict follows from `residual <= tolerance`.
    /// NaN residuals fail.
    pub fn new(
        check_name: impl Into<String>,
        identity: impl Into<String>,
        residual: f64,
        tolerance: f64,
        samples: usize,
    ) -> Self {
        let verdict = if residual <= tolerance {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        Self {
            check_name: check_name.into(),
            identity: identity.into(),
            residual,
            tolerance,
            verdict,
            samples,
            worst_case_location: None,
            order: None,
            tainted: false,
            note: None,
        }
    }

    pub fn not_applicable(
        check_name: impl Into<String>,
        identity: impl Into<String>,
        reason: impl Into<String>,
    ) -> Self {
        Self {
            check_name: check_name.into(),
            identity: identity.into(),
            residual: f64::NAN,
            tolerance: 0.0,
            verdict: Verdict::NotApplicable,
            samples: 0,
            worst_case_location: None,
            order: None,
            tainted: false,
            note: Some(reason.into()),
        }
    }

    pub fn with_location(mut self, loc: Location) -> Self {
        self.worst_case_location = Some(loc);
        self
    }

    pub fn with_order(mut self, order: u8) -> Self {
        self.order = Some(order);
        self
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    /// Multiplies the tolerance and recomputes the verdict.
    pub fn scale_tolerance(&mut self, factor: f64) {
        if self.verdict == Verdict::NotApplicable {
            return;
        }
        self.tolerance *= factor;
        self.verdict = if self.residual <= self.tolerance {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = match self.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::NotApplicable => "N/A ",
        };
        write!(f, "{verdict} {:<36}", self.check_name)?;
        if self.verdict != Verdict::NotApplicable {
            write!(f, " residual {:.3e} tol {:.3e}", self.residual, self.tolerance)?;
        }
        if self.tainted {
            write!(f, " (tainted)")?;
        }
        Ok(())
    }
}

/// Running maximum used by the sampled checks. Combining two trackers is a
/// max-reduction, so the result does not depend on evaluation order as long as
/// ties are broken by sample index.
#[derive(Debug, Clone)]
pub(crate) struct WorstCase {
    pub residual: f64,
    pub index: usize,
    pub location: Option<Location>,
    pub count: usize,
}

impl WorstCase {
    pub fn new() -> Self {
        Self {
            residual: 0.0,
            index: usize::MAX,
            location: None,
            count: 0,
        }
    }

    pub fn push(&mut self, index: usize, residual: f64, loc: impl FnOnce() -> Location) {
        self.count += 1;
        let r = if residual.is_nan() { f64::INFINITY } else { residual };
        if r > self.residual || self.location.is_none() {
            self.residual = r;
            self.index = index;
            self.location = Some(loc());
        }
    }

    pub fn report(self, name: &str, identity: &str, tol: f64) -> CheckReport {
        let mut r = CheckReport::new(name, identity, self.residual, tol, self.count);
        r.worst_case_location = self.location;
        r
    }
}
