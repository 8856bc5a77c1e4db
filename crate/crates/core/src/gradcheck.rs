//! Central finite-difference gradient checking in double precision.

use rand::seq::index;
use rand::Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub probes: usize,
    /// Coordinate with the largest error.
    pub worst: Option<usize>,
}

impl FdReport {
    pub fn merge(self, other: FdReport) -> FdReport {
        let (max_rel_error, worst) = if other.max_rel_error > self.max_rel_error {
            (other.max_rel_error, other.worst)
        } else {
            (self.max_rel_error, self.worst)
        };
        FdReport {
            max_rel_error,
            probes: self.probes + other.probes,
            worst,
        }
    }
}

/// `|numeric − analytic| / max(1, |analytic|)`.
pub fn relative_error(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / analytic.abs().max(1.0)
}

/// `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)`.
pub fn central_difference<F>(f: &mut F, x: &[f64], i: usize, eps: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    probe[i] = x[i] + eps;
    let plus = f(&probe);
    probe[i] = x[i] - eps;
    let minus = f(&probe);
    (plus - minus) / (2.0 * eps)
}

/// Compares `analytic` (the gradient of `f` at `x`) against central
/// differences at the `probes` coordinates.
pub fn finite_difference_check<F>(mut f: F, x: &[f64], analytic: &[f64], probes: &[usize], eps: f64) -> FdReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length");
    let mut report = FdReport::default();
    for &i in probes {
        let numeric = central_difference(&mut f, x, i, eps);
        let err = relative_error(numeric, analytic[i]);
        report.probes += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(i);
        }
    }
    report
}

/// `count` distinct coordinates in `0..len` (all of them if `len <= count`),
/// in ascending order.
pub fn sample_probes<R: Rng + ?Sized>(rng: &mut R, len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    let mut picked = index::sample(rng, len, count).into_vec();
    picked.sort_unstable();
    picked
}
