//! The run measurements: activation-pattern coupling against the t=0
//! snapshot, relative distance from initialization, test accuracy, the
//! singular spectrum of the accumulated update, and the derived sweep
//! statistics (steps to a target accuracy, log-log distance scaling).

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{frobenius_norm, svd_values, Matrix, SingularSpectrum};
use crate::model::{self, InitSnapshot, NetworkParams};
use crate::train::{Trajectory, WeightedCell};

/// One diagnostics row of a trajectory.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct DiagnosticsRecord {
    pub step: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    /// Per-(unit, point) flip fraction; the headline coupling number.
    pub coupling_fraction: f64,
    pub relative_distance: f64,
}

/// How pattern flips are aggregated into a fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingAggregation {
    /// Flipped (unit, point) pairs over all m*n pairs.
    Pair,
    /// Units with at least one flipped point, over m. Saturates quickly on
    /// large reference sets; reported for completeness.
    UnitAny,
}

fn coupling_counts(
    p: &NetworkParams,
    snap: &InitSnapshot,
    ds: &Dataset,
    z: &Matrix,
) -> Result<(f64, f64)> {
    let baseline = snap.baseline_for(ds)?;
    let (m, n) = (p.m(), ds.len());
    let mut flipped_pairs = 0usize;
    let mut flipped_units = 0usize;
    for r in 0..m {
        let row = z.row(r);
        let mut any = false;
        for (s, &v) in row.iter().enumerate() {
            if (v >= 0.0) != baseline.bit(r, s) {
                flipped_pairs += 1;
                any = true;
            }
        }
        if any {
            flipped_units += 1;
        }
    }
    Ok((
        flipped_pairs as f64 / (m * n) as f64,
        flipped_units as f64 / m as f64,
    ))
}

/// Fraction of activation patterns that differ from the t=0 snapshot on the
/// snapshot's reference dataset.
pub fn coupling_fraction(
    p: &NetworkParams,
    snap: &InitSnapshot,
    ds: &Dataset,
    aggregation: CouplingAggregation,
) -> Result<f64> {
    let (pair, unit) = coupling_both(p, snap, ds)?;
    Ok(match aggregation {
        CouplingAggregation::Pair => pair,
        CouplingAggregation::UnitAny => unit,
    })
}

/// Both aggregations in one pass: (pair, unit-any).
pub fn coupling_both(
    p: &NetworkParams,
    snap: &InitSnapshot,
    ds: &Dataset,
) -> Result<(f64, f64)> {
    let z = p.w().gemm_nt_slice(ds.len(), ds.coords());
    coupling_counts(p, snap, ds, &z)
}

/// ||W - W0||_F / ||W0||_F.
pub fn relative_distance(p: &NetworkParams, snap: &InitSnapshot) -> Result<f64> {
    let w0_norm = frobenius_norm(snap.w0());
    if w0_norm == 0.0 {
        return Err(Error::InvalidConfig(
            "relative distance undefined: ||W0|| is zero".into(),
        ));
    }
    Ok(frobenius_norm(&p.w().sub(snap.w0())) / w0_norm)
}

/// Fraction of points whose argmax logit equals the label. Ties resolve to
/// the lowest class index, so every point contributes exactly once.
pub fn accuracy(p: &NetworkParams, ds: &Dataset) -> f64 {
    assert!(!ds.is_empty(), "dataset must be nonempty");
    let eval = model::eval_block(p, ds.len(), ds.coords());
    accuracy_from_logits(&eval.logits, ds)
}

fn accuracy_from_logits(logits: &Matrix, ds: &Dataset) -> f64 {
    let k = logits.rows();
    let mut correct = 0usize;
    for s in 0..ds.len() {
        let mut best = 0usize;
        for i in 1..k {
            if logits.get(i, s) > logits.get(best, s) {
                best = i;
            }
        }
        if best == ds.label(s) {
            correct += 1;
        }
    }
    correct as f64 / ds.len() as f64
}

/// Full diagnostics row at `step`: train loss over the whole training set,
/// accuracy and pair coupling over the test set, and the relative distance.
pub(crate) fn record_at(
    step: usize,
    p: &NetworkParams,
    snap: &InitSnapshot,
    train: &Dataset,
    test: &Dataset,
) -> Result<DiagnosticsRecord> {
    let eval_test = model::eval_block(p, test.len(), test.coords());
    let (pair, _unit) = coupling_counts(p, snap, test, &eval_test.z)?;
    Ok(DiagnosticsRecord {
        step,
        train_loss: model::loss_dataset(p, train),
        test_accuracy: accuracy_from_logits(&eval_test.logits, test),
        coupling_fraction: pair,
        relative_distance: relative_distance(p, snap)?,
    })
}

/// Singular spectra of the accumulated update W(T) - W(0) and of W(T), with
/// cumulative top-j squared-mass tables for j = 1..=50.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SpectrumReport {
    pub update_spectrum: SingularSpectrum,
    pub weight_spectrum: SingularSpectrum,
    pub update_top_mass: Vec<f64>,
    pub weight_top_mass: Vec<f64>,
}

impl SpectrumReport {
    /// CSV with one row per singular value: `index,sigma_update,sigma_weight`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,sigma_update,sigma_weight\n");
        for (i, (u, w)) in self
            .update_spectrum
            .values()
            .iter()
            .zip(self.weight_spectrum.values())
            .enumerate()
        {
            out.push_str(&format!("{i},{u:.16e},{w:.16e}\n"));
        }
        out
    }
}

pub fn update_spectrum(p: &NetworkParams, snap: &InitSnapshot) -> Result<SpectrumReport> {
    let update = p.w().sub(snap.w0());
    let update_spectrum = svd_values(&update)?;
    let weight_spectrum = svd_values(p.w())?;
    let table = |s: &SingularSpectrum| (1..=50.min(s.len())).map(|j| s.top_mass(j)).collect();
    Ok(SpectrumReport {
        update_top_mass: table(&update_spectrum),
        weight_top_mass: table(&weight_spectrum),
        update_spectrum,
        weight_spectrum,
    })
}

/// First recorded step whose test accuracy reaches `target`.
pub fn steps_to_accuracy(traj: &Trajectory, target: f64) -> Option<usize> {
    traj.records
        .iter()
        .find(|r| r.test_accuracy >= target)
        .map(|r| r.step)
}

/// Ordinary least squares on (log m, log relative_distance). Returns
/// (slope, intercept). Needs at least three strictly positive points.
pub fn distance_scaling_fit(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 3 {
        return Err(Error::InvalidConfig(format!(
            "scaling fit needs >= 3 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|&(m, r)| m <= 0.0 || r <= 0.0) {
        return Err(Error::InvalidConfig(
            "scaling fit needs strictly positive inputs".into(),
        ));
    }
    let xs: Vec<f64> = points.iter().map(|&(m, _)| m.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, r)| r.ln()).collect();
    let n = xs.len() as f64;
    let xbar = xs.iter().sum::<f64>() / n;
    let ybar = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xbar) * (x - xbar)).sum();
    let sxy: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - xbar) * (y - ybar))
        .sum();
    let slope = sxy / sxx;
    Ok((slope, ybar - slope * xbar))
}

/// How many hidden rows carry a large pseudo-gradient on the weighted cells.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LargePseudogradReport {
    /// Fraction of rows r with ||pseudo-gradient row r||_2 at or above the
    /// threshold (strictly above zero when the threshold is zero).
    pub fraction: f64,
    /// max p_{a,b} v_{i,a,b}: the error scale the statement quantifies over.
    pub v_max: f64,
    pub threshold: f64,
}

pub fn large_pseudograd_fraction(
    p: &NetworkParams,
    snap: &InitSnapshot,
    cells: &[WeightedCell],
    threshold: f64,
) -> Result<LargePseudogradReport> {
    assert!(threshold >= 0.0 && threshold.is_finite());
    let ds = crate::train::cells_dataset(cells)?;
    let weights: Vec<f64> = cells.iter().map(|c| c.prob).collect();
    let labels: Vec<usize> = (0..ds.len()).map(|s| ds.label(s)).collect();
    let (grad, _) = model::weighted_grad(
        p,
        ds.len(),
        ds.coords(),
        &labels,
        Some(&weights),
        model::Indicator::Frozen(snap.w0()),
    );
    let mut hits = 0usize;
    for r in 0..p.m() {
        let norm: f64 = grad.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        let large = if threshold > 0.0 {
            norm >= threshold
        } else {
            norm > 0.0
        };
        if large {
            hits += 1;
        }
    }
    let tensor = model::error_tensor(p, &ds)?;
    let probs: Vec<f64> = {
        let mut v = vec![0.0; ds.k() * ds.l()];
        for c in cells {
            v[c.class * ds.l() + c.component] = c.prob;
        }
        v
    };
    Ok(LargePseudogradReport {
        fraction: hits as f64 / p.m() as f64,
        v_max: tensor.max_weighted(&probs),
        threshold,
    })
}
