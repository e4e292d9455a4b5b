//! Central finite-difference gradient checking.

/// Step used when callers do not pick one.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Floor on the denominator of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub checks: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|analytic − numeric| / max(REL_FLOOR, |numeric|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(REL_FLOOR)
}

/// Compares `analytic` against central differences of `f` at `x0` on the
/// given coordinates. `f` is evaluated twice per coordinate.
pub fn finite_diff_check<F, E>(
    mut f: F,
    x0: &[f64],
    analytic: &[f64],
    coords: &[usize],
    eps: f64,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&[f64]) -> Result<f64, E>,
{
    assert_eq!(x0.len(), analytic.len(), "gradient length must match parameters");
    let mut x = x0.to_vec();
    let mut checks = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = x[i];
        x[i] = orig + eps;
        let fp = f(&x)?;
        x[i] = orig - eps;
        let fm = f(&x)?;
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        checks.push(CoordCheck {
            index: i,
            analytic: analytic[i],
            numeric,
            rel_error: relative_error(analytic[i], numeric),
        });
    }
    Ok(GradCheckReport { checks })
}
