//! Minibatch SGD on the hidden weights, plus full-batch gradient descent
//! over weighted single-point cells (the no-variance simplification).
//!
//! Runs are bit-deterministic in (init seed, batch seed): batch selection
//! comes from the pinned PRNG, gradient accumulation order is fixed, and A
//! is never touched.

use crate::data::Dataset;
use crate::diagnostics::{self, DiagnosticsRecord};
use crate::error::{Error, Result};
use crate::model::{self, Indicator, InitSnapshot, NetworkParams};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    MinibatchSgd,
    FullBatchGd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchScheme {
    /// Each step draws B indices uniformly without replacement, fresh per
    /// step. Reproduces the experimental setup, where T*B exceeds N.
    FreshUniform,
    /// One random partition of the training set into T batches of size B;
    /// requires B*T <= N. The formal scheme from the problem setup.
    SinglePartition,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub batch_scheme: BatchScheme,
    /// Diagnostics cadence; records land at step 0, every `diag_every`
    /// steps, and the final step.
    pub diag_every: usize,
}

impl TrainConfig {
    /// Default cadence: about a hundred records per run.
    pub fn default_diag_every(steps: usize) -> usize {
        (steps / 100).max(1)
    }

    pub fn new(eta: f64, batch_size: usize, steps: usize, seed: u64) -> Self {
        TrainConfig {
            eta,
            batch_size,
            steps,
            seed,
            mode: TrainMode::MinibatchSgd,
            batch_scheme: BatchScheme::FreshUniform,
            diag_every: Self::default_diag_every(steps),
        }
    }

    /// Checks the config against a training set of `n` points.
    ///
    /// eta = 0 is accepted (several contracts pin the behavior of a frozen
    /// run) even though any real run wants eta > 0.
    pub fn validate(&self, n: usize) -> Result<()> {
        if !self.eta.is_finite() || self.eta < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "eta must be finite and >= 0, got {}",
                self.eta
            )));
        }
        if self.batch_size < 1 || self.steps < 1 || self.diag_every < 1 {
            return Err(Error::InvalidConfig(
                "batch_size, steps and diag_every must be >= 1".into(),
            ));
        }
        if self.batch_size > n {
            return Err(Error::InvalidConfig(format!(
                "batch_size {} exceeds training set size {n}",
                self.batch_size
            )));
        }
        if self.batch_scheme == BatchScheme::SinglePartition
            && self.batch_size * self.steps > n
        {
            return Err(Error::InvalidConfig(format!(
                "single-partition needs B*T <= N, got {}*{} > {n}",
                self.batch_size, self.steps
            )));
        }
        Ok(())
    }
}

/// A completed run: diagnostic records, the final weights, and the metadata
/// the lemma checks need.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub records: Vec<DiagnosticsRecord>,
    pub final_params: NetworkParams,
    pub config: TrainConfig,
    /// Largest per-row gradient norm seen across all update steps; the
    /// empirical stand-in for the Lipschitz constant in the coupling
    /// premise.
    pub max_row_grad_norm: f64,
    pub wall_secs: f64,
}

impl Trajectory {
    /// Trajectory CSV: `step,train_loss,test_acc,coupling_frac,rel_dist`,
    /// floats at 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,train_loss,test_acc,coupling_frac,rel_dist\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                r.step, r.train_loss, r.test_accuracy, r.coupling_fraction, r.relative_distance
            ));
        }
        out
    }
}

fn check_shapes(p: &NetworkParams, snap: &InitSnapshot, ds: &Dataset) -> Result<()> {
    if ds.dim() != p.d() {
        return Err(Error::InvalidConfig(format!(
            "dataset dim {} != network d {}",
            ds.dim(),
            p.d()
        )));
    }
    if ds.k() != p.k() {
        return Err(Error::InvalidConfig(format!(
            "dataset classes {} != network outputs {}",
            ds.k(),
            p.k()
        )));
    }
    if snap.w0().rows() != p.m() || snap.w0().cols() != p.d() {
        return Err(Error::InvalidConfig("snapshot shape mismatch".into()));
    }
    Ok(())
}

/// Minibatch SGD per the update rule: W_r -= eta * mean over the batch of
/// the per-point gradient. Records diagnostics at step 0, every
/// `diag_every` steps, and the final step; coupling and accuracy are
/// measured on `test`, which must be the snapshot's reference dataset.
pub fn sgd_run(
    params: NetworkParams,
    snap: &InitSnapshot,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<Trajectory> {
    check_shapes(&params, snap, train)?;
    check_shapes(&params, snap, test)?;
    cfg.validate(train.len())?;
    snap.baseline_for(test)?;
    let mut params = params;
    let start = std::time::Instant::now();
    let n = train.len();
    let b = cfg.batch_size;
    let mut rng = Rng::from_seed(cfg.seed);

    let partition: Option<Vec<u32>> = match cfg.batch_scheme {
        BatchScheme::SinglePartition => {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            rng.shuffle(&mut idx);
            Some(idx)
        }
        BatchScheme::FreshUniform => None,
    };

    let mut records = Vec::new();
    records.push(diagnostics::record_at(0, &params, snap, train, test)?);

    let mut scratch: Vec<u32> = (0..n as u32).collect();
    let mut batch_coords = vec![0.0f64; b * params.d()];
    let mut batch_labels = vec![0usize; b];
    let mut max_row_grad_norm: f64 = 0.0;

    for t in 0..cfg.steps {
        match &partition {
            Some(perm) => {
                for (i, &s) in perm[t * b..(t + 1) * b].iter().enumerate() {
                    batch_coords[i * params.d()..(i + 1) * params.d()]
                        .copy_from_slice(train.point(s as usize));
                    batch_labels[i] = train.label(s as usize);
                }
            }
            None => {
                for (i, v) in scratch.iter_mut().enumerate() {
                    *v = i as u32;
                }
                for i in 0..b {
                    let j = i + rng.below((n - i) as u64) as usize;
                    scratch.swap(i, j);
                    let s = scratch[i] as usize;
                    batch_coords[i * params.d()..(i + 1) * params.d()]
                        .copy_from_slice(train.point(s));
                    batch_labels[i] = train.label(s);
                }
            }
        }

        let (grad, batch_loss) = model::weighted_grad(
            &params,
            b,
            &batch_coords,
            &batch_labels,
            None,
            Indicator::Current,
        );
        if !batch_loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: t });
        }
        for r in 0..params.m() {
            let norm2: f64 = grad.row(r).iter().map(|v| v * v).sum();
            max_row_grad_norm = max_row_grad_norm.max(norm2.sqrt());
        }
        apply_update(&mut params, &grad, cfg.eta);

        let step = t + 1;
        if step % cfg.diag_every == 0 || step == cfg.steps {
            records.push(diagnostics::record_at(step, &params, snap, train, test)?);
        }
    }

    Ok(Trajectory {
        records,
        final_params: params,
        config: cfg.clone(),
        max_row_grad_norm,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

// eta = 0 must leave W bit-identical; subtracting a signed zero could flip
// the sign bit of a zero entry.
fn apply_update(params: &mut NetworkParams, grad: &crate::linalg::Matrix, eta: f64) {
    if eta == 0.0 {
        return;
    }
    for (w, g) in params.w_mut().data_mut().iter_mut().zip(grad.data()) {
        *w -= eta * g;
    }
}

/// One weighted representative point per (class, component) cell for the
/// no-variance runs.
#[derive(Debug, Clone)]
pub struct WeightedCell {
    pub x: Vec<f64>,
    pub class: usize,
    pub component: usize,
    pub prob: f64,
}

/// Builds the dataset view of the cells (used both as the training support
/// and as the diagnostics reference in the no-variance case).
pub fn cells_dataset(cells: &[WeightedCell]) -> Result<Dataset> {
    if cells.is_empty() {
        return Err(Error::InvalidConfig("no cells given".into()));
    }
    let dim = cells[0].x.len();
    let k = cells.iter().map(|c| c.class).max().unwrap() + 1;
    let l = cells.iter().map(|c| c.component).max().unwrap() + 1;
    let mut coords = Vec::with_capacity(cells.len() * dim);
    let mut labels = Vec::with_capacity(cells.len());
    let mut comps = Vec::with_capacity(cells.len());
    for c in cells {
        coords.extend_from_slice(&c.x);
        labels.push(c.class as u32);
        comps.push(c.component as u32);
    }
    Dataset::from_parts(dim, k, l, coords, labels, comps, false)
}

/// Full-batch gradient descent on the p-weighted loss over exactly k*l
/// single-point cells: W_r -= eta * sum_{a,b} p_{a,b} dL(w, x_{a,b}, a)/dW_r.
pub fn full_batch_gd_run(
    params: NetworkParams,
    snap: &InitSnapshot,
    cells: &[WeightedCell],
    cfg: &TrainConfig,
) -> Result<Trajectory> {
    if params.k() < 2 {
        return Err(Error::InvalidConfig(
            "full-batch GD needs k >= 2 classes".into(),
        ));
    }
    let k = params.k();
    let l = cells.iter().map(|c| c.component).max().map_or(0, |c| c + 1);
    if cells.len() != k * l {
        return Err(Error::InvalidConfig(format!(
            "need exactly k*l = {} cells, got {}",
            k * l,
            cells.len()
        )));
    }
    let mut seen = vec![false; k * l];
    for c in cells {
        if c.class >= k || c.component >= l {
            return Err(Error::InvalidConfig("cell index out of range".into()));
        }
        let idx = c.class * l + c.component;
        if seen[idx] {
            return Err(Error::InvalidConfig(format!(
                "duplicate cell (class {}, component {})",
                c.class, c.component
            )));
        }
        seen[idx] = true;
    }
    let total_p: f64 = cells.iter().map(|c| c.prob).sum();
    if cells.iter().any(|c| c.prob < 0.0) || (total_p - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidConfig(format!(
            "cell probabilities must be non-negative and sum to 1, got {total_p}"
        )));
    }

    let ds = cells_dataset(cells)?;
    check_shapes(&params, snap, &ds)?;
    cfg.validate(ds.len())?;
    snap.baseline_for(&ds)?;
    let mut params = params;
    let start = std::time::Instant::now();

    let n = cells.len();
    let coords: Vec<f64> = ds.coords().to_vec();
    let labels: Vec<usize> = (0..n).map(|s| ds.label(s)).collect();
    let weights: Vec<f64> = cells.iter().map(|c| c.prob).collect();

    let mut records = Vec::new();
    records.push(record_weighted(0, &params, snap, &ds, &weights)?);
    let mut max_row_grad_norm: f64 = 0.0;

    for t in 0..cfg.steps {
        let (grad, _) = model::weighted_grad(
            &params,
            n,
            &coords,
            &labels,
            Some(&weights),
            Indicator::Current,
        );
        let weighted_loss = weighted_loss(&params, &ds, &weights);
        if !weighted_loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: t });
        }
        for r in 0..params.m() {
            let norm2: f64 = grad.row(r).iter().map(|v| v * v).sum();
            max_row_grad_norm = max_row_grad_norm.max(norm2.sqrt());
        }
        apply_update(&mut params, &grad, cfg.eta);

        let step = t + 1;
        if step % cfg.diag_every == 0 || step == cfg.steps {
            records.push(record_weighted(step, &params, snap, &ds, &weights)?);
        }
    }

    Ok(Trajectory {
        records,
        final_params: params,
        config: cfg.clone(),
        max_row_grad_norm,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

fn weighted_loss(p: &NetworkParams, ds: &Dataset, weights: &[f64]) -> f64 {
    let eval = model::eval_block(p, ds.len(), ds.coords());
    (0..ds.len())
        .map(|s| weights[s] * model::point_loss(&eval.logits, s, ds.label(s)))
        .sum()
}

/// Diagnostics record for the no-variance runs: the loss column is the
/// p-weighted loss over the cells, and accuracy/coupling are measured on the
/// same cells (train and test coincide under no variance).
fn record_weighted(
    step: usize,
    p: &NetworkParams,
    snap: &InitSnapshot,
    ds: &Dataset,
    weights: &[f64],
) -> Result<DiagnosticsRecord> {
    let mut rec = diagnostics::record_at(step, p, snap, ds, ds)?;
    rec.train_loss = weighted_loss(p, ds, weights);
    Ok(rec)
}
