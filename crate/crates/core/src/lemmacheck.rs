//! Numerical checks of the analytic statements that admit direct
//! measurement: the non-smooth-convex vs. linear separation inequalities,
//! the coupling bound e*tau*k*l/sigma on the fraction of uncoupled hidden
//! units, and the Gaussian margin distribution at initialization.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{InitSnapshot, NetworkParams};
use crate::rng::Rng;
use crate::train::Trajectory;

/// Convex piecewise-linear function. `slopes` has one entry more than
/// `breakpoints`; segment i covers (breakpoints[i-1], breakpoints[i]).
/// The function is anchored at phi(0) = intercept and is continuous by
/// construction.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PiecewiseConvexSpec {
    breakpoints: Vec<f64>,
    slopes: Vec<f64>,
    intercept: f64,
    /// phi evaluated at each breakpoint, derived once from the anchor.
    #[serde(skip)]
    knot_values: Vec<f64>,
}

impl PiecewiseConvexSpec {
    pub fn new(breakpoints: Vec<f64>, slopes: Vec<f64>, intercept: f64) -> Result<Self> {
        if slopes.len() != breakpoints.len() + 1 {
            return Err(Error::InvalidConfig(
                "need one slope per segment (breakpoints + 1)".into(),
            ));
        }
        if breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "breakpoints must be strictly increasing".into(),
            ));
        }
        for (i, w) in slopes.windows(2).enumerate() {
            if w[1] < w[0] {
                return Err(Error::NotConvex { index: i });
            }
        }
        let mut spec = PiecewiseConvexSpec {
            breakpoints,
            slopes,
            intercept,
            knot_values: Vec::new(),
        };
        spec.fill_knot_values();
        Ok(spec)
    }

    fn fill_knot_values(&mut self) {
        // Integrate the slope function away from 0 in both directions.
        let n = self.breakpoints.len();
        self.knot_values = vec![0.0; n];
        let anchor_seg = self
            .breakpoints
            .iter()
            .position(|&b| 0.0 < b)
            .unwrap_or(n);
        // forward from 0 to breakpoints >= 0
        let mut value = self.intercept;
        let mut x = 0.0;
        for i in anchor_seg..n {
            value += self.slopes[i] * (self.breakpoints[i] - x);
            x = self.breakpoints[i];
            self.knot_values[i] = value;
        }
        // backward from 0 to breakpoints < 0
        let mut value = self.intercept;
        let mut x = 0.0;
        for i in (0..anchor_seg).rev() {
            value -= self.slopes[i + 1] * (x - self.breakpoints[i]);
            x = self.breakpoints[i];
            self.knot_values[i] = value;
        }
    }

    fn segment_of(&self, x: f64) -> usize {
        self.breakpoints.partition_point(|&b| b <= x)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.breakpoints.len();
        if n == 0 {
            return self.intercept + self.slopes[0] * x;
        }
        let seg = self.segment_of(x);
        if seg == 0 {
            self.knot_values[0] + self.slopes[0] * (x - self.breakpoints[0])
        } else {
            self.knot_values[seg - 1] + self.slopes[seg] * (x - self.breakpoints[seg - 1])
        }
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// Subgradient jump at 0; positive exactly when phi is non-smooth there.
    pub fn slope_jump_at_zero(&self) -> f64 {
        match self.breakpoints.iter().position(|&b| b == 0.0) {
            Some(i) => self.slopes[i + 1] - self.slopes[i],
            None => 0.0,
        }
    }
}

/// Outcome of checking both separation inequalities for one (phi, l, tau).
#[derive(Debug, Clone, serde::Serialize)]
pub struct NonSmoothReport {
    pub rho: f64,
    pub tau: f64,
    pub integral: f64,
    /// tau^2 * rho / 8
    pub integral_bound: f64,
    pub prob_mass: f64,
    /// 1/16
    pub prob_bound: f64,
    /// tau * rho / 128, the deviation level the probability is measured at.
    pub level: f64,
    pub holds: bool,
}

/// Integral slack absorbing quadrature rounding.
const INTEGRAL_SLACK: f64 = 1e-6;

/// Checks, for a convex phi with a positive slope jump rho at 0 and any
/// linear l over [-tau, tau]:
///   integral of |phi - l|  >=  tau^2 rho / 8
///   Pr_{U(-tau,tau)}[ |phi - l| >= tau rho / 128 ]  >=  1/16
///
/// The integral uses the trapezoid rule with breakpoints and sign crossings
/// of phi - l inserted as nodes, which makes it exact for piecewise-linear
/// phi; the probability is a uniform midpoint-grid estimate.
pub fn check_nonsmooth_vs_linear(
    phi: &PiecewiseConvexSpec,
    linear: (f64, f64),
    tau: f64,
    grid: usize,
) -> Result<NonSmoothReport> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidConfig(format!("tau must be > 0, got {tau}")));
    }
    if grid < 1000 {
        return Err(Error::InvalidConfig(format!(
            "grid must be >= 1000, got {grid}"
        )));
    }
    let rho = phi.slope_jump_at_zero();
    if !(rho > 0.0) {
        return Err(Error::NoKinkAtZero);
    }
    let (lslope, lintercept) = linear;
    let g = |x: f64| phi.eval(x) - (lslope * x + lintercept);

    // Node set: uniform grid, plus interior breakpoints, plus exact zero
    // crossings of phi - l per segment.
    let mut nodes: Vec<f64> = (0..=grid)
        .map(|i| -tau + 2.0 * tau * i as f64 / grid as f64)
        .collect();
    nodes.extend(
        phi.breakpoints()
            .iter()
            .copied()
            .filter(|&b| b > -tau && b < tau),
    );
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    nodes.dedup();
    let mut crossings = Vec::new();
    for w in nodes.windows(2) {
        let (x0, x1) = (w[0], w[1]);
        let (g0, g1) = (g(x0), g(x1));
        if g0 * g1 < 0.0 {
            crossings.push(x0 - g0 * (x1 - x0) / (g1 - g0));
        }
    }
    nodes.extend(crossings);
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    nodes.dedup();

    let mut integral = 0.0;
    for w in nodes.windows(2) {
        let (x0, x1) = (w[0], w[1]);
        integral += 0.5 * (g(x0).abs() + g(x1).abs()) * (x1 - x0);
    }

    let level = tau * rho / 128.0;
    let mut hits = 0usize;
    for i in 0..grid {
        let x = -tau + 2.0 * tau * (i as f64 + 0.5) / grid as f64;
        if g(x).abs() >= level {
            hits += 1;
        }
    }
    let prob_mass = hits as f64 / grid as f64;

    let integral_bound = tau * tau * rho / 8.0;
    let prob_bound = 1.0 / 16.0;
    let holds = integral + INTEGRAL_SLACK >= integral_bound && prob_mass >= prob_bound;
    Ok(NonSmoothReport {
        rho,
        tau,
        integral,
        integral_bound,
        prob_mass,
        prob_bound,
        level,
        holds,
    })
}

/// Result of the randomized search for counterexamples.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BatteryReport {
    pub cases: usize,
    pub grid: usize,
    pub seed: u64,
    /// Indices of cases where either inequality failed. The statement is
    /// universal, so any entry here is a build-breaking event.
    pub violations: Vec<usize>,
    pub all_hold: bool,
}

/// Draws one random (phi, linear, tau) triple with rho in [0.1, 10].
pub fn random_nonsmooth_case(rng: &mut Rng) -> (PiecewiseConvexSpec, (f64, f64), f64) {
    let tau = 0.1 + 1.9 * rng.uniform01();
    let rho = 0.1 + 9.9 * rng.uniform01();
    let extra = rng.below(5) as usize;
    let mut breakpoints = vec![0.0];
    for _ in 0..extra {
        let b = (rng.uniform01() * 3.0 - 1.5) * tau;
        if b.abs() > 1e-3 * tau && breakpoints.iter().all(|&e| e != b) {
            breakpoints.push(b);
        }
    }
    breakpoints.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut slopes = vec![rng.uniform01() * 10.0 - 5.0];
    for &b in &breakpoints {
        let jump = if b == 0.0 { rho } else { 2.0 * rng.uniform01() };
        let last = *slopes.last().unwrap();
        slopes.push(last + jump);
    }
    let intercept = rng.uniform01() * 2.0 - 1.0;
    let phi = PiecewiseConvexSpec::new(breakpoints, slopes, intercept)
        .expect("random construction is always convex");
    let linear = (
        rng.uniform01() * 10.0 - 5.0,
        rng.uniform01() * 4.0 - 2.0,
    );
    (phi, linear, tau)
}

/// Runs `cases` random triples through [`check_nonsmooth_vs_linear`].
pub fn random_nonsmooth_battery(cases: usize, seed: u64, grid: usize) -> Result<BatteryReport> {
    let mut rng = Rng::from_seed(seed);
    let mut violations = Vec::new();
    for case in 0..cases {
        let (phi, linear, tau) = random_nonsmooth_case(&mut rng);
        let report = check_nonsmooth_vs_linear(&phi, linear, tau, grid)?;
        if !report.holds {
            violations.push(case);
        }
    }
    Ok(BatteryReport {
        cases,
        grid,
        seed,
        all_hold: violations.is_empty(),
        violations,
    })
}

/// Trajectory metadata consumed by the coupling premise.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct RunMeta {
    pub eta: f64,
    pub steps: usize,
    /// Empirical Lipschitz stand-in: largest per-row gradient norm observed.
    pub max_row_grad_norm: f64,
}

impl From<&Trajectory> for RunMeta {
    fn from(t: &Trajectory) -> Self {
        RunMeta {
            eta: t.config.eta,
            steps: t.config.steps,
            max_row_grad_norm: t.max_row_grad_norm,
        }
    }
}

/// Empirical check of the coupling statement after `t` steps.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CouplingBoundReport {
    pub tau: f64,
    pub t: usize,
    /// Fraction of rows with a flipped pattern on some representative, or an
    /// initialization margin below tau on some representative.
    pub empirical_uncoupled_fraction: f64,
    /// e * tau * k * l / sigma
    pub bound: f64,
    pub bound_holds: bool,
    /// Whether t <= tau / (2 L eta) held for the measured L; outside the
    /// premise the bound is reported but not guaranteed by the statement.
    pub premise_met: bool,
    pub lipschitz: f64,
}

/// Measures the uncoupled-row fraction on one representative point per
/// (class, component) cell of `ds` (the statement's union bound runs over
/// the k*l support points) and compares it against e*tau*k*l/sigma.
pub fn check_coupling_bound(
    p: &NetworkParams,
    snap: &InitSnapshot,
    ds: &Dataset,
    tau: f64,
    sigma: f64,
    meta: &RunMeta,
) -> Result<CouplingBoundReport> {
    if !(tau > 0.0) || !(sigma > 0.0) {
        return Err(Error::InvalidConfig(
            "tau and sigma must be positive".into(),
        ));
    }
    let reps = ds.cell_representatives()?;
    let d = ds.dim();
    let mut coords = Vec::with_capacity(reps.len() * d);
    for &s in &reps {
        coords.extend_from_slice(ds.point(s));
    }
    let z_cur = p.w().gemm_nt_slice(reps.len(), &coords);
    let z_init = snap.w0().gemm_nt_slice(reps.len(), &coords);

    let m = p.m();
    let mut uncoupled = 0usize;
    for r in 0..m {
        let cur = z_cur.row(r);
        let init = z_init.row(r);
        let bad = cur
            .iter()
            .zip(init)
            .any(|(&zc, &z0)| (zc >= 0.0) != (z0 >= 0.0) || z0.abs() < tau);
        if bad {
            uncoupled += 1;
        }
    }
    let empirical = uncoupled as f64 / m as f64;
    let bound = std::f64::consts::E * tau * (ds.k() * ds.l()) as f64 / sigma;
    let premise_met = if meta.eta == 0.0 || meta.max_row_grad_norm == 0.0 {
        true
    } else {
        (meta.steps as f64) <= tau / (2.0 * meta.max_row_grad_norm * meta.eta)
    };
    Ok(CouplingBoundReport {
        tau,
        t: meta.steps,
        empirical_uncoupled_fraction: empirical,
        bound,
        bound_holds: empirical <= bound,
        premise_met,
        lipschitz: meta.max_row_grad_norm,
    })
}

/// Empirical distribution of |<w_r(0), x_s>| over all (unit, point) pairs.
#[derive(Debug, Clone)]
pub struct MarginHistogram {
    values: Vec<f64>, // sorted ascending
}

impl MarginHistogram {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Fraction of margins strictly below `tau`.
    pub fn fraction_below(&self, tau: f64) -> f64 {
        let idx = self.values.partition_point(|&v| v < tau);
        idx as f64 / self.values.len() as f64
    }

    /// Equal-width bin counts over [0, max].
    pub fn bins(&self, nbins: usize) -> (Vec<f64>, Vec<u64>) {
        assert!(nbins >= 1);
        let max = self.values.last().copied().unwrap_or(0.0);
        let width = if max > 0.0 { max / nbins as f64 } else { 1.0 };
        let mut counts = vec![0u64; nbins];
        for &v in &self.values {
            let mut b = (v / width) as usize;
            if b >= nbins {
                b = nbins - 1;
            }
            counts[b] += 1;
        }
        let edges = (0..=nbins).map(|i| i as f64 * width).collect();
        (edges, counts)
    }
}

/// All m*n initialization margins on `ds`, sorted.
pub fn margin_histogram(snap: &InitSnapshot, ds: &Dataset) -> MarginHistogram {
    let z0 = snap.w0().gemm_nt_slice(ds.len(), ds.coords());
    let mut values: Vec<f64> = z0.data().iter().map(|v| v.abs()).collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    MarginHistogram { values }
}
