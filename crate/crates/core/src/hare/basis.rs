use std::fmt;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use super::HareError;

/// Time factor of a basis term: 1, t, or the decreasing knot spline
/// (k - t)_+ = max(k - t, 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TimeAtom {
    One,
    Linear,
    Knot(f64),
}

/// Covariate factor: x_j or the knot spline (x_j - k)_+.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CovAtom {
    Linear(usize),
    Knot(usize, f64),
}

impl CovAtom {
    pub fn evaluate(&self, x: ArrayView1<'_, f64>) -> f64 {
        match *self {
            CovAtom::Linear(j) => x[j],
            CovAtom::Knot(j, k) => (x[j] - k).max(0.0),
        }
    }

    pub fn column(&self) -> usize {
        match *self {
            CovAtom::Linear(j) | CovAtom::Knot(j, _) => j,
        }
    }
}

/// One basis term: a time atom times up to two covariate atoms. The constant
/// term is `TimeAtom::One` with no covariate factors; terms with a non-trivial
/// time atom carry at most one covariate factor (a time-covariate product).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisTerm {
    pub time: TimeAtom,
    pub covariates: Vec<CovAtom>,
}

impl BasisTerm {
    pub fn constant() -> Self {
        BasisTerm { time: TimeAtom::One, covariates: Vec::new() }
    }

    pub fn time_linear() -> Self {
        BasisTerm { time: TimeAtom::Linear, covariates: Vec::new() }
    }

    pub fn time_knot(k: f64) -> Self {
        BasisTerm { time: TimeAtom::Knot(k), covariates: Vec::new() }
    }

    pub fn covariate(j: usize) -> Self {
        BasisTerm { time: TimeAtom::One, covariates: vec![CovAtom::Linear(j)] }
    }

    pub fn covariate_knot(j: usize, k: f64) -> Self {
        BasisTerm { time: TimeAtom::One, covariates: vec![CovAtom::Knot(j, k)] }
    }

    pub fn covariate_product(i: usize, j: usize) -> Self {
        BasisTerm {
            time: TimeAtom::One,
            covariates: vec![CovAtom::Linear(i), CovAtom::Linear(j)],
        }
    }

    pub fn time_interaction(j: usize) -> Self {
        BasisTerm { time: TimeAtom::Linear, covariates: vec![CovAtom::Linear(j)] }
    }

    /// Covariate part of the term evaluated at x.
    pub fn covariate_factor(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.covariates.iter().map(|a| a.evaluate(x)).product()
    }

    /// Value B(t | x).
    pub fn evaluate(&self, t: f64, x: ArrayView1<'_, f64>) -> f64 {
        let tv = match self.time {
            TimeAtom::One => 1.0,
            TimeAtom::Linear => t,
            TimeAtom::Knot(k) => (k - t).max(0.0),
        };
        tv * self.covariate_factor(x)
    }

    pub fn is_time_dependent(&self) -> bool {
        !matches!(self.time, TimeAtom::One)
    }

    pub fn max_column(&self) -> Option<usize> {
        self.covariates.iter().map(|a| a.column()).max()
    }

    /// Linear representation p + q*t of the time atom on a segment
    /// [lo, hi) that does not straddle the knot.
    fn linear_on_segment(&self, seg_lo: f64) -> (f64, f64) {
        match self.time {
            TimeAtom::One => (1.0, 0.0),
            TimeAtom::Linear => (0.0, 1.0),
            TimeAtom::Knot(k) => {
                if seg_lo < k {
                    (k, -1.0)
                } else {
                    (0.0, 0.0)
                }
            }
        }
    }
}

impl fmt::Display for BasisTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = Vec::new();
        match self.time {
            TimeAtom::One => {}
            TimeAtom::Linear => parts.push("t".to_string()),
            TimeAtom::Knot(k) => parts.push(format!("({k:.4}-t)+")),
        }
        for a in &self.covariates {
            match *a {
                CovAtom::Linear(j) => parts.push(format!("x{j}")),
                CovAtom::Knot(j, k) => parts.push(format!("(x{j}-{k:.4})+")),
            }
        }
        if parts.is_empty() {
            write!(f, "const")
        } else {
            write!(f, "{}", parts.join("*"))
        }
    }
}

/// Ordered collection of distinct basis terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HareBasis {
    pub terms: Vec<BasisTerm>,
}

impl HareBasis {
    pub fn new(terms: Vec<BasisTerm>) -> Self {
        HareBasis { terms }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn contains(&self, term: &BasisTerm) -> bool {
        self.terms.iter().any(|t| t == term)
    }

    pub fn has_constant(&self) -> bool {
        self.contains(&BasisTerm::constant())
    }

    pub fn has_time_dependence(&self) -> bool {
        self.terms.iter().any(|t| t.is_time_dependent())
    }

    pub fn max_column(&self) -> Option<usize> {
        self.terms.iter().filter_map(|t| t.max_column()).max()
    }

    /// Sorted distinct time-knot locations; segment boundaries of the
    /// piecewise-linear log hazard.
    pub fn time_knots(&self) -> Vec<f64> {
        let mut ks: Vec<f64> = self
            .terms
            .iter()
            .filter_map(|t| match t.time {
                TimeAtom::Knot(k) => Some(k),
                _ => None,
            })
            .collect();
        ks.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ks.dedup();
        ks
    }
}

/// phi1(z) = (e^z - 1)/z, the order-0 segment integral kernel.
fn phi1(z: f64) -> f64 {
    if z.abs() < 1e-12 {
        1.0 + z / 2.0
    } else {
        z.exp_m1() / z
    }
}

/// phi2(z) = (e^z (z-1) + 1)/z^2 with a series branch near zero.
fn phi2(z: f64) -> f64 {
    if z.abs() < 0.5 {
        // sum_{m>=0} (m+1)/(m+2)! z^m
        let mut total = 0.0;
        let mut zpow = 1.0;
        let mut fact = 2.0; // (m+2)! starting at m=0
        for m in 0..14 {
            total += (m as f64 + 1.0) / fact * zpow;
            zpow *= z;
            fact *= m as f64 + 3.0;
        }
        total
    } else {
        (z.exp() * (z - 1.0) + 1.0) / (z * z)
    }
}

/// phi3(z) = (e^z (z^2 - 2z + 2) - 2)/z^3 with a series branch near zero.
fn phi3(z: f64) -> f64 {
    if z.abs() < 0.5 {
        // sum_{m>=0} (m+2)(m+1)/(m+3)! z^m
        let mut total = 0.0;
        let mut zpow = 1.0;
        let mut fact = 6.0; // (m+3)! starting at m=0
        for m in 0..14 {
            total += ((m as f64 + 2.0) * (m as f64 + 1.0)) / fact * zpow;
            zpow *= z;
            fact *= m as f64 + 4.0;
        }
        total
    } else {
        (z.exp() * (z * z - 2.0 * z + 2.0) - 2.0) / (z * z * z)
    }
}

/// Per-segment integral moments against exp(a + b*u):
/// `j0 = int e^{a+bu} du`, `j1 = int (u-lo) e^{a+bu} du`,
/// `j2 = int (u-lo)^2 e^{a+bu} du` over [lo, hi].
pub(super) struct SegmentMoments {
    pub j0: f64,
    pub j1: f64,
    pub j2: f64,
}

pub(super) fn segment_moments(a: f64, b: f64, lo: f64, hi: f64) -> SegmentMoments {
    let delta = hi - lo;
    let lead = (a + b * lo).exp();
    let z = b * delta;
    SegmentMoments {
        j0: lead * delta * phi1(z),
        j1: lead * delta * delta * phi2(z),
        j2: lead * delta * delta * delta * phi3(z),
    }
}

/// Walk the piecewise-linear log hazard of one subject. Calls `visit`
/// with (term coefficients aside) the segment bounds and the local linear
/// representation of every term's time factor.
pub(super) struct SubjectSegments<'a> {
    pub basis: &'a HareBasis,
    /// Covariate factor of each term for this subject.
    pub cov_factors: Vec<f64>,
    /// Segment boundaries: 0, knots..., +inf.
    pub bounds: Vec<f64>,
}

impl<'a> SubjectSegments<'a> {
    pub fn new(basis: &'a HareBasis, x: ArrayView1<'_, f64>) -> SubjectSegments<'a> {
        let cov_factors = basis.terms.iter().map(|t| t.covariate_factor(x)).collect();
        let mut bounds = vec![0.0];
        bounds.extend(basis.time_knots().into_iter().filter(|&k| k > 0.0));
        SubjectSegments { basis, cov_factors, bounds }
    }

    /// Slope/intercept of log-hazard on segment starting at `seg_lo`,
    /// along with each term's local (p, q) pair.
    pub fn local_form(&self, beta: &[f64], seg_lo: f64) -> (f64, f64, Vec<(f64, f64)>) {
        let mut a = 0.0;
        let mut b = 0.0;
        let mut pq = Vec::with_capacity(self.basis.len());
        for (k, term) in self.basis.terms.iter().enumerate() {
            let (p, q) = term.linear_on_segment(seg_lo);
            let cf = self.cov_factors[k];
            a += beta[k] * cf * p;
            b += beta[k] * cf * q;
            pq.push((cf * p, cf * q));
        }
        (a, b, pq)
    }

    /// Segments of [0, t] as (lo, hi) pairs.
    pub fn clipped(&self, t: f64) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for (i, &lo) in self.bounds.iter().enumerate() {
            if lo >= t {
                break;
            }
            let hi = self.bounds.get(i + 1).cloned().unwrap_or(f64::INFINITY);
            out.push((lo, hi.min(t)));
        }
        out
    }
}

/// Log hazard at (t, x) for a coefficient vector.
pub fn log_hazard(
    basis: &HareBasis,
    beta: &[f64],
    x: ArrayView1<'_, f64>,
    t: f64,
) -> f64 {
    basis
        .terms
        .iter()
        .zip(beta)
        .map(|(term, b)| b * term.evaluate(t, x))
        .sum()
}

/// Exact cumulative hazard: on each time segment the log hazard is a + b*u,
/// so the segment integral is e^{a+b*lo} * delta * phi1(b*delta).
pub fn cumulative_hazard(
    basis: &HareBasis,
    beta: &[f64],
    x: ArrayView1<'_, f64>,
    t: f64,
) -> Result<f64, HareError> {
    if let Some(needed) = basis.max_column() {
        if needed >= x.len() {
            return Err(HareError::CovariateLength { needed, got: x.len() });
        }
    }
    if t <= 0.0 {
        return Ok(0.0);
    }
    let segs = SubjectSegments::new(basis, x);
    let mut total = 0.0;
    for (lo, hi) in segs.clipped(t) {
        let (a, b, _) = segs.local_form(beta, lo);
        total += segment_moments(a, b, lo, hi).j0;
    }
    Ok(total)
}

/// Cumulative hazard evaluated on a sorted, non-decreasing grid; one pass
/// over the segments instead of one evaluation per grid point.
pub fn cumulative_hazard_grid(
    basis: &HareBasis,
    beta: &[f64],
    x: ArrayView1<'_, f64>,
    grid: &[f64],
) -> Result<Vec<f64>, HareError> {
    if let Some(needed) = basis.max_column() {
        if needed >= x.len() {
            return Err(HareError::CovariateLength { needed, got: x.len() });
        }
    }
    let segs = SubjectSegments::new(basis, x);
    let mut out = Vec::with_capacity(grid.len());
    let mut cum = 0.0;
    let mut seg_idx = 0usize;
    let mut pos = 0.0f64; // integrated up to here
    let mut local = segs.local_form(beta, 0.0);
    for &t in grid {
        let t = t.max(0.0);
        while pos < t {
            let seg_hi = segs.bounds.get(seg_idx + 1).cloned().unwrap_or(f64::INFINITY);
            let upto = seg_hi.min(t);
            if upto > pos {
                cum += segment_moments(local.0, local.1, pos, upto).j0;
                pos = upto;
            }
            if pos >= seg_hi {
                seg_idx += 1;
                local = segs.local_form(beta, segs.bounds[seg_idx]);
            } else {
                break;
            }
        }
        out.push(cum);
    }
    Ok(out)
}
