//! The two-layer ReLU network: f_i(x) = sum_r a_{i,r} ReLU(<w_r, x>).
//!
//! Only the hidden weights W train; the top layer A is frozen at
//! initialization and checksummed. Besides the usual forward/loss/gradient,
//! this module carries the frozen-indicator machinery: the pseudo-gradient
//! (gradient with activation indicators pinned to their t=0 values), the
//! pseudo-network g, and the per-cell softmax error quantities.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{fnv1a64, Rng};

/// How A3's sigma = m^{-1/2} is read when drawing hidden weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitSigmaConvention {
    /// m^{-1/2} is the standard deviation (variance 1/m). The default.
    Std,
    /// m^{-1/2} is the variance (standard deviation m^{-1/4}).
    Var,
}

impl InitSigmaConvention {
    pub fn std_dev(self, m: usize) -> f64 {
        match self {
            InitSigmaConvention::Std => 1.0 / (m as f64).sqrt(),
            InitSigmaConvention::Var => 1.0 / (m as f64).powf(0.25),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            InitSigmaConvention::Std => "std",
            InitSigmaConvention::Var => "var",
        }
    }
}

/// Trainable hidden weights plus the frozen top layer.
#[derive(Debug, Clone)]
pub struct NetworkParams {
    w: Matrix,
    a: Matrix,
    a_checksum: u64,
}

fn matrix_checksum(m: &Matrix) -> u64 {
    let mut bytes = Vec::with_capacity(m.data().len() * 8);
    for v in m.data() {
        bytes.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fnv1a64(&bytes)
}

impl NetworkParams {
    pub fn from_weights(w: Matrix, a: Matrix) -> Self {
        assert_eq!(a.cols(), w.rows(), "A must be k x m for W of shape m x d");
        let a_checksum = matrix_checksum(&a);
        NetworkParams { w, a, a_checksum }
    }

    pub fn m(&self) -> usize {
        self.w.rows()
    }

    pub fn d(&self) -> usize {
        self.w.cols()
    }

    pub fn k(&self) -> usize {
        self.a.rows()
    }

    pub fn w(&self) -> &Matrix {
        &self.w
    }

    pub(crate) fn w_mut(&mut self) -> &mut Matrix {
        &mut self.w
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    /// True while the top layer still matches its init-time checksum.
    pub fn verify_top_layer(&self) -> bool {
        matrix_checksum(&self.a) == self.a_checksum
    }

    pub fn top_layer_checksum(&self) -> u64 {
        self.a_checksum
    }
}

/// Frozen copy of W at t=0 plus, once attached, the activation patterns on a
/// reference dataset.
#[derive(Debug, Clone)]
pub struct InitSnapshot {
    w0: Matrix,
    baseline: Option<BaselinePatterns>,
}

/// Bitset of 1_{<w_r(0), x_s> >= 0} over the reference dataset.
#[derive(Debug, Clone)]
pub struct BaselinePatterns {
    dataset_id: u64,
    n: usize,
    bits: Vec<u64>,
}

impl BaselinePatterns {
    #[inline]
    pub fn bit(&self, r: usize, s: usize) -> bool {
        let idx = r * self.n + s;
        self.bits[idx >> 6] >> (idx & 63) & 1 == 1
    }

    pub fn dataset_id(&self) -> u64 {
        self.dataset_id
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

impl InitSnapshot {
    pub fn new(w0: Matrix) -> Self {
        InitSnapshot { w0, baseline: None }
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn into_w0(self) -> Matrix {
        self.w0
    }

    /// Computes and stores the t=0 activation patterns on `ds`. The patterns
    /// are re-derivable from `w0` at any time; the bitset exists so coupling
    /// scans do not redo the sign comparison against recomputed products.
    pub fn attach_reference(&mut self, ds: &Dataset) {
        assert_eq!(ds.dim(), self.w0.cols(), "reference dim mismatch");
        let z0 = self.w0.gemm_nt_slice(ds.len(), ds.coords());
        let m = self.w0.rows();
        let n = ds.len();
        let mut bits = vec![0u64; (m * n).div_ceil(64)];
        for (idx, &z) in z0.data().iter().enumerate() {
            if z >= 0.0 {
                bits[idx >> 6] |= 1u64 << (idx & 63);
            }
        }
        self.baseline = Some(BaselinePatterns {
            dataset_id: ds.content_id(),
            n,
            bits,
        });
    }

    pub fn baseline(&self) -> Option<&BaselinePatterns> {
        self.baseline.as_ref()
    }

    /// Baseline patterns for `ds`, or an error naming the mismatch.
    pub fn baseline_for(&self, ds: &Dataset) -> Result<&BaselinePatterns> {
        let b = self.baseline.as_ref().ok_or(Error::NoReference)?;
        if b.dataset_id != ds.content_id() {
            return Err(Error::ReferenceMismatch {
                expected: b.dataset_id,
                found: ds.content_id(),
            });
        }
        Ok(b)
    }
}

/// Draws W with i.i.d. N(0, sigma^2) entries (sigma per the convention) and
/// A with i.i.d. N(0,1) entries, W first, both row-major, from one stream.
pub fn init_network_with(
    m: usize,
    d: usize,
    k: usize,
    seed: u64,
    convention: InitSigmaConvention,
) -> (NetworkParams, InitSnapshot) {
    assert!(m >= 1 && d >= 1 && k >= 1);
    let mut rng = Rng::from_seed(seed);
    let std = convention.std_dev(m);
    let w_data: Vec<f64> = (0..m * d).map(|_| std * rng.normal()).collect();
    let a_data: Vec<f64> = (0..k * m).map(|_| rng.normal()).collect();
    let w = Matrix::from_computed(m, d, w_data);
    let a = Matrix::from_computed(k, m, a_data);
    let snapshot = InitSnapshot::new(w.clone());
    (NetworkParams::from_weights(w, a), snapshot)
}

/// [`init_network_with`] under the default A3 reading (sigma is the std).
pub fn init_network(m: usize, d: usize, k: usize, seed: u64) -> (NetworkParams, InitSnapshot) {
    init_network_with(m, d, k, seed, InitSigmaConvention::Std)
}

/// Logits f_i(x) = sum_r a_{i,r} ReLU(<w_r, x>).
pub fn forward(p: &NetworkParams, x: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), p.d(), "input length must equal d");
    let mut relu_z = vec![0.0f64; p.m()];
    for r in 0..p.m() {
        let z: f64 = p.w.row(r).iter().zip(x).map(|(a, b)| a * b).sum();
        if z >= 0.0 {
            relu_z[r] = z;
        }
    }
    (0..p.k())
        .map(|i| p.a.row(i).iter().zip(&relu_z).map(|(a, h)| a * h).sum())
        .collect()
}

/// The pseudo-network g_i(x) = sum_r a_{i,r} <w_r, x> 1_{<w_r(0), x> >= 0}.
pub fn pseudo_forward(p: &NetworkParams, snap: &InitSnapshot, x: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), p.d(), "input length must equal d");
    let mut gated_z = vec![0.0f64; p.m()];
    for r in 0..p.m() {
        let z0: f64 = snap.w0.row(r).iter().zip(x).map(|(a, b)| a * b).sum();
        if z0 >= 0.0 {
            gated_z[r] = p.w.row(r).iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }
    (0..p.k())
        .map(|i| p.a.row(i).iter().zip(&gated_z).map(|(a, h)| a * h).sum())
        .collect()
}

/// Softmax with max-subtraction. Entries land in (0,1] and sum to 1 within
/// 1e-12 for any finite logits.
pub fn softmax_outputs(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&f| (f - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Batched evaluation shared by loss, accuracy, coupling and the trainer:
/// preactivations of `w` on a block of points, plus the logits under `a`.
pub(crate) struct BlockEval {
    /// m x n preactivations.
    pub z: Matrix,
    /// k x n logits.
    pub logits: Matrix,
}

pub(crate) fn eval_block(p: &NetworkParams, n: usize, coords: &[f64]) -> BlockEval {
    let z = p.w.gemm_nt_slice(n, coords);
    let mut relu = z.clone();
    for v in relu.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let logits = p.a.gemm_nn(&relu);
    BlockEval { z, logits }
}

/// Cross-entropy of one logit column, via log-sum-exp.
pub(crate) fn point_loss(logits: &Matrix, s: usize, label: usize) -> f64 {
    let k = logits.rows();
    let mut max = f64::NEG_INFINITY;
    for i in 0..k {
        max = max.max(logits.get(i, s));
    }
    let mut sum = 0.0;
    for i in 0..k {
        sum += (logits.get(i, s) - max).exp();
    }
    -(logits.get(label, s) - max) + sum.ln()
}

/// Mean cross-entropy over a batch of (point, label) pairs.
pub fn loss(p: &NetworkParams, batch: &[(&[f64], usize)]) -> f64 {
    assert!(!batch.is_empty(), "batch must be nonempty");
    let (coords, labels) = gather(p.d(), batch);
    let eval = eval_block(p, batch.len(), &coords);
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(s, &y)| point_loss(&eval.logits, s, y))
        .sum();
    total / batch.len() as f64
}

/// Mean cross-entropy over a whole dataset.
pub fn loss_dataset(p: &NetworkParams, ds: &Dataset) -> f64 {
    assert!(!ds.is_empty());
    let eval = eval_block(p, ds.len(), ds.coords());
    let total: f64 = (0..ds.len())
        .map(|s| point_loss(&eval.logits, s, ds.label(s)))
        .sum();
    total / ds.len() as f64
}

fn gather(d: usize, batch: &[(&[f64], usize)]) -> (Vec<f64>, Vec<usize>) {
    let mut coords = Vec::with_capacity(batch.len() * d);
    let mut labels = Vec::with_capacity(batch.len());
    for (x, y) in batch {
        assert_eq!(x.len(), d, "point length must equal d");
        coords.extend_from_slice(x);
        labels.push(*y);
    }
    (coords, labels)
}

/// Which weights supply the ReLU indicator inside the gradient.
#[derive(Clone, Copy)]
pub(crate) enum Indicator<'a> {
    /// 1_{<w_r, x> >= 0}: the true gradient of the training loss.
    Current,
    /// 1_{<w0_r, x> >= 0}: the pseudo-gradient with t=0 patterns.
    Frozen(&'a Matrix),
}

/// Shared gradient core. Computes, for each point s with weight c_s,
///   row_r += c_s * (sum_i a_{i,r} (o_i - 1_{i=y_s})) * 1_{<w_ind, x_s> >= 0} * x_s
/// which is the batch form of the loss gradient; with `Frozen` indicators it
/// is the pseudo-gradient instead. Returns the gradient and the
/// equally-weighted loss over the block.
pub(crate) fn weighted_grad(
    p: &NetworkParams,
    n: usize,
    coords: &[f64],
    labels: &[usize],
    weights: Option<&[f64]>,
    indicator: Indicator<'_>,
) -> (Matrix, f64) {
    let (m, k) = (p.m(), p.k());
    let eval = eval_block(p, n, coords);
    let z_ind_storage;
    let z_ind: &Matrix = match indicator {
        Indicator::Current => &eval.z,
        Indicator::Frozen(w0) => {
            z_ind_storage = w0.gemm_nt_slice(n, coords);
            &z_ind_storage
        }
    };

    // D[i][s] = o_i(x_s) - 1_{i = y_s}, the softmax error per point.
    let mut dmat = Matrix::zeros(k, n);
    let mut loss_acc = 0.0;
    for s in 0..n {
        let mut max = f64::NEG_INFINITY;
        for i in 0..k {
            max = max.max(eval.logits.get(i, s));
        }
        let mut total = 0.0;
        for i in 0..k {
            total += (eval.logits.get(i, s) - max).exp();
        }
        let y = labels[s];
        loss_acc += -(eval.logits.get(y, s) - max) + total.ln();
        for i in 0..k {
            let o = (eval.logits.get(i, s) - max).exp() / total;
            dmat.set(i, s, if i == y { o - 1.0 } else { o });
        }
    }

    // C = Aᵀ · D gives the per-row coefficients; gate by the indicator and
    // fold in the per-point weight before the final product with X.
    let mut c = p.a.gemm_tn(&dmat);
    for r in 0..m {
        let crow = c.row_mut(r);
        let zrow = z_ind.row(r);
        for s in 0..n {
            if zrow[s] >= 0.0 {
                let w = weights.map_or(1.0 / n as f64, |ws| ws[s]);
                crow[s] *= w;
            } else {
                crow[s] = 0.0;
            }
        }
    }
    let grad = c.gemm_nn_slice(p.d(), coords);
    (grad, loss_acc / n as f64)
}

/// Mean gradient of the cross-entropy loss over a batch, with the ReLU
/// indicator taken at the current weights (the right-hand side of the SGD
/// update rule).
pub fn grad(p: &NetworkParams, batch: &[(&[f64], usize)]) -> Matrix {
    assert!(!batch.is_empty(), "batch must be nonempty");
    let (coords, labels) = gather(p.d(), batch);
    weighted_grad(p, batch.len(), &coords, &labels, None, Indicator::Current).0
}

/// Same expression as [`grad`] with the indicator frozen at t=0 patterns,
/// derived on the fly from the snapshot's W0.
pub fn pseudo_grad(p: &NetworkParams, snap: &InitSnapshot, batch: &[(&[f64], usize)]) -> Matrix {
    assert!(!batch.is_empty(), "batch must be nonempty");
    assert_eq!(snap.w0.rows(), p.m());
    let (coords, labels) = gather(p.d(), batch);
    weighted_grad(
        p,
        batch.len(),
        &coords,
        &labels,
        None,
        Indicator::Frozen(&snap.w0),
    )
    .0
}

/// The v_{s,a,b} softmax error quantities, averaged over each (a,b) cell.
///
/// v_{a,a,b} = sum_{i != a} o_i(x_{a,b}) measures the true class's
/// misclassification confidence; v_{s,a,b} = -o_s(x_{a,b}) for s != a.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ErrorTensor {
    k: usize,
    l: usize,
    /// v[s * (k*l) + a*l + b]
    v: Vec<f64>,
}

impl ErrorTensor {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn l(&self) -> usize {
        self.l
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize, b: usize) -> f64 {
        self.v[s * self.k * self.l + a * self.l + b]
    }

    /// max over (s,a,b) of probs[a*l+b] * v_{s,a,b}; the `v` scale the
    /// large-pseudo-gradient statement is about.
    pub fn max_weighted(&self, probs: &[f64]) -> f64 {
        assert_eq!(probs.len(), self.k * self.l);
        let mut best = f64::NEG_INFINITY;
        for s in 0..self.k {
            for cell in 0..self.k * self.l {
                best = best.max(probs[cell] * self.v[s * self.k * self.l + cell]);
            }
        }
        best
    }
}

/// Evaluates the error tensor on `ds`, averaging per-point tensors within
/// each (class, component) cell. Errors if any cell has no points.
pub fn error_tensor(p: &NetworkParams, ds: &Dataset) -> Result<ErrorTensor> {
    let (k, l) = (ds.k(), ds.l());
    assert_eq!(k, p.k(), "dataset classes must match network outputs");
    let mut counts = vec![0usize; k * l];
    for s in 0..ds.len() {
        counts[ds.label(s) * l + ds.component(s)] += 1;
    }
    for (cell, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::EmptyCell {
                class: cell / l,
                component: cell % l,
            });
        }
    }

    let eval = eval_block(p, ds.len(), ds.coords());
    let mut v = vec![0.0f64; k * k * l];
    for s in 0..ds.len() {
        let (a, b) = (ds.label(s), ds.component(s));
        let cell = a * l + b;
        let mut logits = vec![0.0f64; k];
        for i in 0..k {
            logits[i] = eval.logits.get(i, s);
        }
        let o = softmax_outputs(&logits);
        for i in 0..k {
            let contrib = if i == a { 1.0 - o[a] } else { -o[i] };
            v[i * k * l + cell] += contrib;
        }
    }
    for s in 0..k {
        for cell in 0..k * l {
            v[s * k * l + cell] /= counts[cell] as f64;
        }
    }
    Ok(ErrorTensor { k, l, v })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"OPLB";
const CHECKPOINT_VERSION: u32 = 1;

/// Fixed little-endian checkpoint: magic, version, m/d/k, seed, convention
/// tag, then row-major f64 blocks for W, A and W0 in that order.
pub fn save_checkpoint(
    path: &std::path::Path,
    p: &NetworkParams,
    snap: &InitSnapshot,
    seed: u64,
    convention: InitSigmaConvention,
) -> Result<()> {
    let (m, d, k) = (p.m(), p.d(), p.k());
    let mut bytes = Vec::with_capacity(44 + 8 * (2 * m * d + k * m));
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(m as u64).to_le_bytes());
    bytes.extend_from_slice(&(d as u64).to_le_bytes());
    bytes.extend_from_slice(&(k as u64).to_le_bytes());
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.push(match convention {
        InitSigmaConvention::Std => 0,
        InitSigmaConvention::Var => 1,
    });
    bytes.extend_from_slice(&[0u8; 7]);
    for block in [p.w.data(), p.a.data(), snap.w0.data()] {
        for v in block {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub struct Checkpoint {
    pub params: NetworkParams,
    pub snapshot: InitSnapshot,
    pub seed: u64,
    pub convention: InitSigmaConvention,
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let fail = |msg: &str| Error::BadCheckpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 52 {
        return Err(fail("too short for a header"));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let read_u64 =
        |off: usize| u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
    let (m, d, k) = (read_u64(8), read_u64(16), read_u64(24));
    let seed = read_u64(32) as u64;
    let convention = match bytes[40] {
        0 => InitSigmaConvention::Std,
        1 => InitSigmaConvention::Var,
        other => return Err(fail(&format!("unknown convention tag {other}"))),
    };
    let expected = 48 + 8 * (2 * m * d + k * m);
    if bytes.len() != expected {
        return Err(fail(&format!(
            "payload length {} != expected {expected}",
            bytes.len()
        )));
    }
    let mut off = 48;
    let mut read_block = |count: usize| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::BadCheckpoint(format!(
                    "{}: non-finite weight",
                    path.display()
                )));
            }
            out.push(v);
            off += 8;
        }
        Ok(out)
    };
    let w = Matrix::new(m, d, read_block(m * d)?);
    let a = Matrix::new(k, m, read_block(k * m)?);
    let w0 = Matrix::new(m, d, read_block(m * d)?);
    Ok(Checkpoint {
        params: NetworkParams::from_weights(w, a),
        snapshot: InitSnapshot::new(w0),
        seed,
        convention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MixtureSpec;
    use crate::linalg::{finite_diff_grad, frobenius_norm};

    fn small_net(m: usize, d: usize, k: usize, seed: u64) -> (NetworkParams, InitSnapshot) {
        init_network(m, d, k, seed)
    }

    fn random_points(n: usize, d: usize, k: usize, seed: u64) -> Vec<(Vec<f64>, usize)> {
        let mut rng = Rng::from_seed(seed);
        (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                let y = rng.below(k as u64) as usize;
                (x, y)
            })
            .collect()
    }

    fn as_batch(points: &[(Vec<f64>, usize)]) -> Vec<(&[f64], usize)> {
        points.iter().map(|(x, y)| (x.as_slice(), *y)).collect()
    }

    #[test]
    fn init_variance_matches_convention() {
        let (p, snap) = small_net(10_000, 100, 2, 31);
        let mvar = p.w().data().iter().map(|v| v * v).sum::<f64>() / (10_000.0 * 100.0);
        let target = 1.0 / 10_000.0;
        assert!(mvar > 0.9 * target && mvar < 1.1 * target, "var {mvar}");
        assert_eq!(p.w(), snap.w0());

        let (pv, _) = init_network_with(10_000, 100, 2, 31, InitSigmaConvention::Var);
        let vvar = pv.w().data().iter().map(|v| v * v).sum::<f64>() / (10_000.0 * 100.0);
        let target = 1.0 / 100.0; // variance m^{-1/2}
        assert!(vvar > 0.9 * target && vvar < 1.1 * target, "var {vvar}");
    }

    #[test]
    fn init_is_deterministic_and_degenerate_width_works() {
        let (p1, _) = small_net(16, 4, 3, 7);
        let (p2, _) = small_net(16, 4, 3, 7);
        assert_eq!(p1.w(), p2.w());
        assert_eq!(p1.a(), p2.a());

        let (p, _) = small_net(1, 5, 2, 7);
        assert_eq!(p.m(), 1);
        let out = forward(&p, &[1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn forward_zero_weights_and_constructed_unit() {
        let w = Matrix::zeros(3, 2);
        let a = Matrix::new(2, 3, vec![1.0; 6]);
        let p = NetworkParams::from_weights(w, a);
        assert_eq!(forward(&p, &[1.0, 2.0]), vec![0.0, 0.0]);

        // single unit with w1 = x/||x||^2 and a_{1,1} = 1 gives f_1 = 1
        let x = [3.0, 4.0];
        let n2 = 25.0;
        let w = Matrix::new(1, 2, vec![x[0] / n2, x[1] / n2]);
        let a = Matrix::new(1, 1, vec![1.0]);
        let p = NetworkParams::from_weights(w, a);
        let f = forward(&p, &x);
        assert!((f[0] - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn forward_positive_homogeneity() {
        // Two-unit hand computation.
        let w = Matrix::new(2, 2, vec![1.0, 2.0, 0.0, 1.0]);
        let a = Matrix::new(1, 2, vec![2.0, -3.0]);
        let p = NetworkParams::from_weights(w, a);
        let x = [0.5, 1.0];
        // z = (2.5, 1.0); f = 2*2.5 - 3*1.0 = 2
        assert!((forward(&p, &x)[0] - 2.0).abs() <= 1e-15);

        // Scaling a row by a power of two scales its contribution exactly.
        let (p, _) = small_net(6, 4, 3, 11);
        let x: Vec<f64> = vec![0.3, -0.7, 0.2, 0.9];
        let base = forward(&p, &x);
        let mut scaled = p.clone();
        let c = 4.0;
        for v in scaled.w_mut().row_mut(2) {
            *v *= c;
        }
        let bumped = forward(&scaled, &x);
        for i in 0..3 {
            let unit_contrib: f64 = {
                let z: f64 = p.w().row(2).iter().zip(&x).map(|(a, b)| a * b).sum();
                p.a().get(i, 2) * z.max(0.0)
            };
            let expect = base[i] + (c - 1.0) * unit_contrib;
            assert_eq!(bumped[i], expect, "logit {i}");
        }
    }

    #[test]
    fn softmax_symmetry_stability_and_derived_values() {
        let o = softmax_outputs(&[2.5, 2.5, 2.5, 2.5]);
        for v in &o {
            assert!((v - 0.25).abs() <= 1e-15);
        }

        let o = softmax_outputs(&[1000.0, 0.0]);
        assert!(o[0] > 1.0 - 1e-12 && o[1] < 1e-12);
        assert!(o.iter().all(|v| v.is_finite()));

        let o = softmax_outputs(&[1.0, 2.0, 3.0]);
        let expect = [0.09003057, 0.24472847, 0.66524096];
        for (a, b) in o.iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-7, "{a} vs {b}");
        }
        assert!((o.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn loss_uniform_confident_and_logsumexp_oracle() {
        let w = Matrix::zeros(4, 3);
        let a = Matrix::new(5, 4, vec![0.5; 20]);
        let p = NetworkParams::from_weights(w, a);
        let pts = random_points(6, 3, 5, 2);
        let batch = as_batch(&pts);
        assert_eq!(loss(&p, &batch), (5.0f64).ln());

        // a perfectly confident margin drives the loss toward zero
        let w = Matrix::new(1, 1, vec![50.0]);
        let a = Matrix::new(2, 1, vec![1.0, -1.0]);
        let p = NetworkParams::from_weights(w, a);
        let x = [1.0];
        assert!(loss(&p, &[(&x, 0)]) < 1e-20);

        // independent log-sum-exp evaluation on a random small net
        let (p, _) = small_net(5, 3, 4, 13);
        let pts = random_points(8, 3, 4, 14);
        let batch = as_batch(&pts);
        let mine = loss(&p, &batch);
        let mut oracle = 0.0;
        for (x, y) in &batch {
            let f = forward(&p, x);
            let lse = {
                let mx = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                mx + f.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
            };
            oracle += lse - f[*y];
        }
        oracle /= batch.len() as f64;
        assert!((mine - oracle).abs() <= 1e-12, "{mine} vs {oracle}");
    }

    #[test]
    fn grad_matches_finite_difference_away_from_kinks() {
        let (p, _) = small_net(4, 3, 2, 21);
        let pts = random_points(3, 3, 2, 22);
        let batch = as_batch(&pts);

        // rows whose preactivations stay clear of the kink on every point
        let safe: Vec<usize> = (0..p.m())
            .filter(|&r| {
                batch.iter().all(|(x, _)| {
                    let z: f64 = p.w().row(r).iter().zip(*x).map(|(a, b)| a * b).sum();
                    z.abs() > 1e-3
                })
            })
            .collect();
        assert!(!safe.is_empty(), "seed produced no kink-free rows");

        let analytic = grad(&p, &batch);
        let pts2 = pts.clone();
        let a = p.a().clone();
        let fd = finite_diff_grad(
            |w| {
                let probe = NetworkParams::from_weights(w.clone(), a.clone());
                loss(&probe, &as_batch(&pts2))
            },
            p.w(),
            crate::linalg::DEFAULT_FD_EPS,
        )
        .unwrap();
        for &r in &safe {
            for j in 0..p.d() {
                let (ga, gf) = (analytic.get(r, j), fd.get(r, j));
                let tol = 1e-5 * ga.abs().max(gf.abs()).max(1.0);
                assert!((ga - gf).abs() <= tol, "row {r} col {j}: {ga} vs {gf}");
            }
        }
    }

    #[test]
    fn grad_vanishes_when_perfectly_separated() {
        // one active unit per class with a huge margin
        let w = Matrix::new(2, 2, vec![30.0, 0.0, 0.0, 30.0]);
        let a = Matrix::new(2, 2, vec![5.0, -5.0, -5.0, 5.0]);
        let p = NetworkParams::from_weights(w, a);
        let x0 = [1.0, 0.0];
        let x1 = [0.0, 1.0];
        let g = grad(&p, &[(&x0, 0), (&x1, 1)]);
        assert!(frobenius_norm(&g) < 1e-20, "norm {}", frobenius_norm(&g));
    }

    #[test]
    fn inactive_rows_get_no_contribution() {
        let (p, _) = small_net(3, 2, 2, 77);
        let x = [1.0, 1.0];
        // find a row with negative preactivation, or force one
        let mut p = p;
        let row0: Vec<f64> = p.w().row(0).to_vec();
        if row0.iter().sum::<f64>() >= 0.0 {
            for v in p.w_mut().row_mut(0) {
                *v = -v.abs() - 0.1;
            }
        }
        let g = grad(&p, &[(&x, 0)]);
        assert!(g.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pseudo_grad_coincides_at_init_bitwise() {
        for seed in 0..10u64 {
            let (p, snap) = small_net(6, 4, 3, seed);
            let pts = random_points(5, 4, 3, seed ^ 0xABCD);
            let batch = as_batch(&pts);
            let g = grad(&p, &batch);
            let pg = pseudo_grad(&p, &snap, &batch);
            for (a, b) in g.data().iter().zip(pg.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn pseudo_grad_single_flip_differs_only_in_that_row() {
        // Hand-built: perturbing row 0 from (1,1) to (-1,1) flips its sign
        // on x0 = (1,0) but not on x1 = (0,1).
        let w0 = Matrix::new(3, 2, vec![1.0, 1.0, 0.5, -0.3, -0.2, 0.8]);
        let snap = InitSnapshot::new(w0.clone());
        let a = Matrix::new(2, 3, vec![0.7, -0.4, 1.1, -0.2, 0.9, 0.3]);
        let mut w = w0.clone();
        w.row_mut(0).copy_from_slice(&[-1.0, 1.0]);
        let p = NetworkParams::from_weights(w, a);

        let x0 = [1.0, 0.0];
        let x1 = [0.0, 1.0];
        let batch: Vec<(&[f64], usize)> = vec![(&x0, 0), (&x1, 1)];
        let g = grad(&p, &batch);
        let pg = pseudo_grad(&p, &snap, &batch);
        // only row 0 differs, and exactly by x0's gated contribution
        for r in 0..3 {
            let differs = g
                .row(r)
                .iter()
                .zip(pg.row(r))
                .any(|(a, b)| (a - b).abs() > 1e-15);
            assert_eq!(differs, r == 0, "row {r}");
        }
        // the difference sits entirely in the x0 coordinate direction
        let delta0 = pg.get(0, 0) - g.get(0, 0);
        let delta1 = pg.get(0, 1) - g.get(0, 1);
        assert!(delta0.abs() > 1e-12);
        assert_eq!(delta1, 0.0);
    }

    #[test]
    fn pseudo_grad_zero_when_all_patterns_negative() {
        let w0 = Matrix::new(2, 2, vec![-1.0, -1.0, -2.0, -0.5]);
        let snap = InitSnapshot::new(w0.clone());
        let a = Matrix::new(2, 2, vec![1.0, -1.0, 0.5, 0.5]);
        // current weights far away from w0
        let w = Matrix::new(2, 2, vec![3.0, 1.0, 2.0, 2.0]);
        let p = NetworkParams::from_weights(w, a);
        let x = [1.0, 1.0];
        let pg = pseudo_grad(&p, &snap, &[(&x, 0)]);
        assert!(pg.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pseudo_forward_matches_forward_at_init_and_hand_case() {
        let (p, snap) = small_net(8, 3, 2, 41);
        let pts = random_points(6, 3, 2, 42);
        for (x, _) in &pts {
            let f = forward(&p, x);
            let g = pseudo_forward(&p, &snap, x);
            for (a, b) in f.iter().zip(&g) {
                assert_eq!(a, b);
            }
        }

        // all baseline patterns zero -> g identically zero
        let w0 = Matrix::new(2, 2, vec![-1.0, 0.0, 0.0, -1.0]);
        let snap = InitSnapshot::new(w0);
        let w = Matrix::new(2, 2, vec![5.0, 5.0, 5.0, 5.0]);
        let a = Matrix::new(1, 2, vec![1.0, 1.0]);
        let p = NetworkParams::from_weights(w, a);
        let g = pseudo_forward(&p, &snap, &[1.0, 2.0]);
        assert_eq!(g, vec![0.0]);

        // two-unit hand computation: w0 gates unit 2 off
        let w0 = Matrix::new(2, 2, vec![1.0, 0.0, -1.0, 0.0]);
        let snap = InitSnapshot::new(w0);
        let w = Matrix::new(2, 2, vec![2.0, 1.0, 3.0, 3.0]);
        let a = Matrix::new(1, 2, vec![0.5, 7.0]);
        let p = NetworkParams::from_weights(w, a);
        // x = (1, 1): unit 1 passes <w1,x> = 3 gated on, unit 2 gated off
        let g = pseudo_forward(&p, &snap, &[1.0, 1.0]);
        assert!((g[0] - 1.5).abs() <= 1e-15);
    }

    #[test]
    fn error_tensor_uniform_and_identities() {
        let spec = MixtureSpec::uniform(4, 2, 3, 0.5, 2.0).unwrap();
        let ds = crate::data::sample_mixture(&spec, 64, 3);

        // W = 0 makes all logits equal
        let w = Matrix::zeros(5, 3);
        let a = Matrix::new(4, 5, vec![1.0; 20]);
        let p = NetworkParams::from_weights(w, a);
        let t = error_tensor(&p, &ds).unwrap();
        for a_ in 0..4 {
            for b in 0..2 {
                assert!((t.get(a_, a_, b) - 0.75).abs() <= 1e-12);
                for s in 0..4 {
                    if s != a_ {
                        assert!((t.get(s, a_, b) + 0.25).abs() <= 1e-12);
                    }
                }
            }
        }

        // identities on a random net
        let (p, _) = small_net(10, 3, 4, 91);
        let t = error_tensor(&p, &ds).unwrap();
        for a_ in 0..4 {
            for b in 0..2 {
                let vaab = t.get(a_, a_, b);
                assert!((0.0..=1.0).contains(&vaab), "v_aab {vaab}");
                let total: f64 = (0..4).map(|s| t.get(s, a_, b)).sum();
                assert!(total.abs() <= 1e-12, "sum {total}");
            }
        }
    }

    #[test]
    fn small_error_implies_confident_correct_classification() {
        // On single-point cells: v_aab below 1/(1+e) forces a logit margin
        // of at least 1, and below 1/e the argmax is already correct.
        let margin_threshold = 1.0 / (1.0 + std::f64::consts::E);
        let correct_threshold = 1.0 / std::f64::consts::E;
        let mut checked_margin = 0;
        for seed in 0..200u64 {
            let (p, _) = small_net(12, 4, 3, seed);
            let pts = random_points(3, 4, 3, seed ^ 0x55);
            for (x, _) in &pts {
                let f = forward(&p, x);
                let o = softmax_outputs(&f);
                for a_ in 0..3 {
                    let v = 1.0 - o[a_];
                    if v < correct_threshold {
                        let argmax = (0..3).max_by(|&i, &j| f[i].partial_cmp(&f[j]).unwrap());
                        assert_eq!(argmax, Some(a_));
                    }
                    if v < margin_threshold {
                        checked_margin += 1;
                        for i in 0..3 {
                            if i != a_ {
                                assert!(f[a_] >= f[i] + 1.0, "margin violated: {f:?}");
                            }
                        }
                    }
                }
            }
        }
        assert!(checked_margin > 0, "no confident cells sampled");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let (p, mut snap) = small_net(6, 4, 3, 123);
        let spec = MixtureSpec::uniform(3, 1, 4, 0.5, 2.0).unwrap();
        let ds = crate::data::sample_mixture(&spec, 12, 9);
        snap.attach_reference(&ds);

        let dir = std::env::temp_dir().join("overparam-core-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ckpt.bin");
        save_checkpoint(&path, &p, &snap, 123, InitSigmaConvention::Std).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.params.w(), p.w());
        assert_eq!(ck.params.a(), p.a());
        assert_eq!(ck.snapshot.w0(), snap.w0());
        assert_eq!(ck.seed, 123);
        assert_eq!(ck.convention, InitSigmaConvention::Std);

        // corrupt the magic
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.join("ckpt-bad.bin");
        std::fs::write(&bad, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&bad),
            Err(Error::BadCheckpoint(_))
        ));
    }

    #[test]
    fn baseline_patterns_rederivable() {
        let spec = MixtureSpec::uniform(2, 1, 3, 0.4, 2.0).unwrap();
        let ds = crate::data::sample_mixture(&spec, 20, 8);
        let (p, mut snap) = small_net(5, 3, 2, 66);
        snap.attach_reference(&ds);
        let b = snap.baseline_for(&ds).unwrap();
        for r in 0..5 {
            for s in 0..20 {
                let z: f64 = snap.w0().row(r).iter().zip(ds.point(s)).map(|(a, b)| a * b).sum();
                assert_eq!(b.bit(r, s), z >= 0.0);
            }
        }
        // mismatch is reported
        let other = crate::data::sample_mixture(&spec, 20, 9);
        assert!(matches!(
            snap.baseline_for(&other),
            Err(Error::ReferenceMismatch { .. })
        ));
        assert_eq!(p.k(), 2);
    }
}
