//! Graph-level pooling operators: the flat sum/average/max readouts, and
//! the spectral readout built on truncated power iteration over the
//! embedding Gram matrix. A cyclic-Jacobi eigendecomposition serves as
//! the independent full-SVD oracle the iterative path is tested against.

use crate::autodiff::{Tape, Tensor, TensorError};
use crate::matrix::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Entries with magnitude at or below this are treated as zero when
/// fixing a singular vector's sign.
pub const SIGN_EPS: f64 = 1e-9;

/// Relative spectral-gap threshold below which the gap is reported as
/// degenerate.
pub const GAP_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("embedding matrix is identically zero")]
    DegenerateInput,
    #[error("iterate norm underflowed twice; matrix is numerically degenerate")]
    IterateUnderflow,
    #[error("vector has no entry above the sign threshold {SIGN_EPS}")]
    DegenerateVector,
    #[error("power iteration needs at least one iteration")]
    ZeroIterations,
    #[error("eigendecomposition did not converge within {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("matrix contains non-finite values")]
    NonFinite,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// The flat single-step readouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlatPooling {
    Sum,
    Average,
    Max,
}

/// How the spectral readout's scale is chosen: a fixed value, or
/// `sigma1 / alpha` using the power-iteration estimate of the leading
/// singular value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauMode {
    Fixed(f64),
    Scaled(f64),
}

/// Output form of the spectral readout: the scaled dominant right
/// singular vector in feature space (the form the risk bound certifies),
/// or its projection `tau * H v` back onto the nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RsOutput {
    Singular,
    Projected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RsPoolConfig {
    pub iterations: usize,
    pub tau: TauMode,
    #[serde(default = "RsPoolConfig::default_output")]
    pub output: RsOutput,
}

impl RsPoolConfig {
    fn default_output() -> RsOutput {
        RsOutput::Singular
    }

    pub fn new(iterations: usize, tau: TauMode) -> Self {
        RsPoolConfig { iterations, tau, output: RsOutput::Singular }
    }

    /// Default iteration counts per backbone: two with GCN, five with
    /// GIN; scale tied to the leading singular value.
    pub fn default_gcn() -> Self {
        RsPoolConfig::new(2, TauMode::Scaled(DEFAULT_ALPHA))
    }

    pub fn default_gin() -> Self {
        RsPoolConfig::new(5, TauMode::Scaled(DEFAULT_ALPHA))
    }
}

/// Default divisor for the scaled tau mode, `tau = sigma1 / alpha`.
pub const DEFAULT_ALPHA: f64 = 1.0;

/// Which pooling a pipeline applies after message passing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PoolingKind {
    Sum,
    Average,
    Max,
    RsPool(RsPoolConfig),
}

impl PoolingKind {
    pub fn as_flat(&self) -> Option<FlatPooling> {
        match self {
            PoolingKind::Sum => Some(FlatPooling::Sum),
            PoolingKind::Average => Some(FlatPooling::Average),
            PoolingKind::Max => Some(FlatPooling::Max),
            PoolingKind::RsPool(_) => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            PoolingKind::Sum => "sum",
            PoolingKind::Average => "average",
            PoolingKind::Max => "max",
            PoolingKind::RsPool(_) => "rs_pool",
        }
    }
}

/// Top of the singular spectrum of an embedding matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralInfo {
    pub sigma1: f64,
    pub sigma2: f64,
    pub gap: f64,
    /// Unit dominant right singular vector, sign-normalized, as d x 1.
    pub v1: Matrix,
}

impl SpectralInfo {
    /// True when the top two singular values coincide up to `GAP_EPS`
    /// relative to `sigma1`.
    pub fn degenerate_gap(&self) -> bool {
        self.gap <= GAP_EPS * self.sigma1
    }
}

// ---- full-spectrum oracle -------------------------------------------------

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
/// Returns eigenvalues in descending order with matching eigenvector
/// columns. Convergence is measured on the matrix scaled to unit max
/// magnitude, so the threshold is scale-invariant.
pub fn jacobi_eigh(sym: &Matrix) -> Result<(Vec<f64>, Matrix), PoolError> {
    assert_eq!(sym.rows(), sym.cols(), "jacobi_eigh needs a square matrix");
    if !sym.all_finite() {
        return Err(PoolError::NonFinite);
    }
    let d = sym.rows();
    let scale = sym.max_abs();
    if scale == 0.0 {
        return Ok((vec![0.0; d], Matrix::identity(d)));
    }
    let mut a = sym.scale(1.0 / scale);
    let mut vecs = Matrix::identity(d);
    const MAX_SWEEPS: usize = 100;
    const OFF_TOL: f64 = 1e-12;

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..d {
            for q in 0..d {
                if p != q {
                    off += a.get(p, q) * a.get(p, q);
                }
            }
        }
        if off.sqrt() < OFF_TOL {
            converged = true;
            break;
        }
        for p in 0..d.saturating_sub(1) {
            for q in (p + 1)..d {
                let apq = a.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                a.set(p, p, app - t * apq);
                a.set(q, q, aqq + t * apq);
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                for k in 0..d {
                    if k != p && k != q {
                        let akp = a.get(k, p);
                        let akq = a.get(k, q);
                        a.set(k, p, c * akp - s * akq);
                        a.set(p, k, c * akp - s * akq);
                        a.set(k, q, s * akp + c * akq);
                        a.set(q, k, s * akp + c * akq);
                    }
                    let vkp = vecs.get(k, p);
                    let vkq = vecs.get(k, q);
                    vecs.set(k, p, c * vkp - s * vkq);
                    vecs.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    if !converged {
        return Err(PoolError::NoConvergence { sweeps: MAX_SWEEPS });
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a.get(j, j).partial_cmp(&a.get(i, i)).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| a.get(i, i) * scale).collect();
    let mut sorted_vecs = Matrix::zeros(d, d);
    for (col, &src) in order.iter().enumerate() {
        for row in 0..d {
            sorted_vecs.set(row, col, vecs.get(row, src));
        }
    }
    Ok((values, sorted_vecs))
}

/// Top two singular values and the dominant right singular vector of an
/// arbitrary dense matrix, via Jacobi on the Gram matrix. This is the
/// independent oracle the power-iteration path is validated against.
pub fn svd_oracle(h: &Matrix) -> Result<SpectralInfo, PoolError> {
    if !h.all_finite() {
        return Err(PoolError::NonFinite);
    }
    let gram = h.transpose().matmul(h);
    let (eigvals, eigvecs) = jacobi_eigh(&gram)?;
    let sigma1 = eigvals[0].max(0.0).sqrt();
    let rank_cap = h.rows().min(h.cols());
    let sigma2 = if rank_cap < 2 { 0.0 } else { eigvals[1].max(0.0).sqrt() };
    let mut v1 = Matrix::zeros(h.cols(), 1);
    for r in 0..h.cols() {
        v1.set(r, 0, eigvecs.get(r, 0));
    }
    let v1 = sign_normalize(&v1)?;
    Ok(SpectralInfo { sigma1, sigma2, gap: sigma1 - sigma2, v1 })
}

/// Largest singular value of a matrix.
pub fn operator_norm(w: &Matrix) -> Result<f64, PoolError> {
    Ok(svd_oracle(w)?.sigma1)
}

// ---- sign convention ------------------------------------------------------

/// Sign of the factor that makes the first entry with magnitude above
/// `SIGN_EPS` positive.
pub fn sign_factor(v: &Matrix) -> Result<f64, PoolError> {
    for &x in v.as_slice() {
        if x.abs() > SIGN_EPS {
            return Ok(if x > 0.0 { 1.0 } else { -1.0 });
        }
    }
    Err(PoolError::DegenerateVector)
}

/// Flip a vector so its first non-negligible entry is positive. The
/// flip is a constant factor; it is idempotent and excluded from
/// differentiation in the tape path.
pub fn sign_normalize(v: &Matrix) -> Result<Matrix, PoolError> {
    Ok(v.scale(sign_factor(v)?))
}

// ---- flat pooling ---------------------------------------------------------

/// Column-wise sum, mean, or max over the rows of `h`; output is a
/// 1 x d row.
pub fn pool_flat(h: &Matrix, kind: FlatPooling) -> Matrix {
    match kind {
        FlatPooling::Sum => h.sum_rows(),
        FlatPooling::Average => h.sum_rows().scale(1.0 / h.rows() as f64),
        FlatPooling::Max => {
            let mut out = Matrix::zeros(1, h.cols());
            for c in 0..h.cols() {
                let mut best = h.get(0, c);
                for r in 1..h.rows() {
                    best = best.max(h.get(r, c));
                }
                out.set(0, c, best);
            }
            out
        }
    }
}

// ---- power iteration ------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PowerIteration {
    /// Unit iterate after K steps, d x 1, not sign-normalized.
    pub v: Matrix,
    /// Rayleigh quotient `v' (H'H) v`, an estimate of `sigma1^2`.
    pub rayleigh: f64,
    /// The unit start vector actually used (after any restart).
    pub start: Matrix,
}

/// Seeded unit start vector in feature space. Depends only on the
/// dimension and the seed, never on the number of rows, which is what
/// makes the spectral readout exactly permutation invariant.
pub fn start_vector(dim: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let data: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let v = Matrix::from_vec(dim, 1, data);
        let norm = v.frobenius_norm();
        if norm > 1e-12 {
            return v.scale(1.0 / norm);
        }
    }
}

/// Truncated power iteration on the Gram matrix of `h`: repeat
/// `v <- H'H v; v <- v / |v|` for `k` steps from a seeded start vector.
/// Converges toward the dominant right singular vector at rate
/// `(sigma2/sigma1)^2` per step. A mid-iteration norm underflow is
/// retried once from a fresh seeded vector before failing.
pub fn power_iteration(h: &Matrix, k: usize, seed: u64) -> Result<PowerIteration, PoolError> {
    if k == 0 {
        return Err(PoolError::ZeroIterations);
    }
    if h.frobenius_norm() == 0.0 {
        return Err(PoolError::DegenerateInput);
    }
    if !h.all_finite() {
        return Err(PoolError::NonFinite);
    }
    let gram = h.transpose().matmul(h);
    'attempt: for attempt in 0..2 {
        let start = start_vector(h.cols(), seed.wrapping_add(attempt));
        let mut v = start.clone();
        for _ in 0..k {
            let w = gram.matmul(&v);
            let norm = w.frobenius_norm();
            if norm < 1e-300 {
                continue 'attempt;
            }
            v = w.scale(1.0 / norm);
        }
        let rayleigh = v.dot(&gram.matmul(&v));
        return Ok(PowerIteration { v, rayleigh, start });
    }
    Err(PoolError::IterateUnderflow)
}

/// Tape-recorded power iteration: identical arithmetic to
/// [`power_iteration`], with every unrolled step differentiable. The
/// start vector is a constant. Returns the unit iterate as a d x 1
/// tensor.
pub fn power_iteration_t(tape: &mut Tape, h: Tensor, k: usize, seed: u64) -> Result<Tensor, PoolError> {
    // Resolve degeneracy and the surviving start vector on plain values
    // first so the recorded graph never divides by a vanishing norm.
    let plain = power_iteration(tape.value(h), k, seed)?;
    let start = tape.constant(plain.start)?;
    let ht = tape.transpose(h)?;
    let gram = tape.matmul(ht, h)?;
    let mut v = start;
    for _ in 0..k {
        let w = tape.matmul(gram, v)?;
        v = tape.l2_normalize(w)?;
    }
    Ok(v)
}

// ---- spectral readout -----------------------------------------------------

#[derive(Debug, Clone)]
pub struct RsPoolResult {
    /// Pooled representation as a row vector: 1 x d in singular mode,
    /// 1 x n in projected mode.
    pub pooled: Matrix,
    /// The scale actually applied.
    pub tau: f64,
    /// Power-iteration estimate of the leading singular value.
    pub sigma1_estimate: f64,
    /// Oracle spectrum of `h`, used to flag a vanishing gap.
    pub spectral: SpectralInfo,
    /// Set when the top two singular values coincide; the output is
    /// still returned (any unit vector in the dominant subspace is
    /// valid) but the certificate degrades to the `2 tau` clamp.
    pub zero_gap_warning: bool,
}

fn resolve_tau(mode: TauMode, sigma1_estimate: f64) -> f64 {
    match mode {
        TauMode::Fixed(tau) => tau,
        TauMode::Scaled(alpha) => sigma1_estimate / alpha,
    }
}

fn rs_pool_core(h: &Matrix, cfg: &RsPoolConfig, seed: u64) -> Result<(Matrix, f64, f64), PoolError> {
    let iter = power_iteration(h, cfg.iterations, seed)?;
    let sign = sign_factor(&iter.v)?;
    let v_signed = iter.v.scale(sign);
    // sigma1 estimated as |H v| so the plain and tape paths share one
    // floating-point route.
    let sigma1_estimate = h.matmul(&iter.v).frobenius_norm();
    let tau = resolve_tau(cfg.tau, sigma1_estimate);
    let pooled = match cfg.output {
        RsOutput::Singular => v_signed.scale(tau).transpose(),
        RsOutput::Projected => h.matmul(&v_signed).scale(tau).transpose(),
    };
    Ok((pooled, tau, sigma1_estimate))
}

/// Pooled vector of the spectral readout without the oracle
/// diagnostics; the prediction and attack hot paths go through here.
pub fn rs_pool_value(h: &Matrix, cfg: &RsPoolConfig, seed: u64) -> Result<Matrix, PoolError> {
    Ok(rs_pool_core(h, cfg, seed)?.0)
}

/// Spectral readout of an embedding matrix: `tau` times the
/// sign-normalized dominant right singular vector (singular mode), or
/// its node-space projection `tau * H v` (projected mode). Also runs
/// the full-spectrum oracle to report the gap and flag degeneracy.
pub fn rs_pool(h: &Matrix, cfg: &RsPoolConfig, seed: u64) -> Result<RsPoolResult, PoolError> {
    let (pooled, tau, sigma1_estimate) = rs_pool_core(h, cfg, seed)?;
    let spectral = svd_oracle(h)?;
    let zero_gap_warning = spectral.degenerate_gap();
    Ok(RsPoolResult { pooled, tau, sigma1_estimate, spectral, zero_gap_warning })
}

/// Tape-recorded spectral readout; gradients flow through the unrolled
/// iterations and, in scaled mode, through the sigma1 estimate. The
/// sign flip and the start vector are constants. Output is a row
/// tensor matching [`rs_pool`].
pub fn rs_pool_t(tape: &mut Tape, h: Tensor, cfg: &RsPoolConfig, seed: u64) -> Result<Tensor, PoolError> {
    let v = power_iteration_t(tape, h, cfg.iterations, seed)?;
    let sign = sign_factor(tape.value(v))?;
    let scaled = match cfg.tau {
        TauMode::Fixed(tau) => {
            let v_signed = tape.scale(v, sign)?;
            let body = match cfg.output {
                RsOutput::Singular => v_signed,
                RsOutput::Projected => tape.matmul(h, v_signed)?,
            };
            tape.scale(body, tau)?
        }
        TauMode::Scaled(alpha) => {
            let hv = tape.matmul(h, v)?;
            let sigma1 = tape.l2_norm(hv)?;
            let tau_t = tape.scale(sigma1, 1.0 / alpha)?;
            let v_signed = tape.scale(v, sign)?;
            let body = match cfg.output {
                RsOutput::Singular => v_signed,
                RsOutput::Projected => tape.matmul(h, v_signed)?,
            };
            tape.scale_by(body, tau_t)?
        }
    };
    Ok(tape.transpose(scaled)?)
}

/// Pooled representation of an embedding matrix under any
/// [`PoolingKind`], as a row vector. `seed` fixes the spectral
/// readout's start vector and is ignored by the flat readouts.
pub fn pool(h: &Matrix, kind: &PoolingKind, seed: u64) -> Result<Matrix, PoolError> {
    match kind {
        PoolingKind::Sum => Ok(pool_flat(h, FlatPooling::Sum)),
        PoolingKind::Average => Ok(pool_flat(h, FlatPooling::Average)),
        PoolingKind::Max => Ok(pool_flat(h, FlatPooling::Max)),
        PoolingKind::RsPool(cfg) => rs_pool_value(h, cfg, seed),
    }
}

/// Tape-recorded counterpart of [`pool`].
pub fn pool_t(tape: &mut Tape, h: Tensor, kind: &PoolingKind, seed: u64) -> Result<Tensor, PoolError> {
    match kind {
        PoolingKind::Sum => Ok(tape.sum_rows(h)?),
        PoolingKind::Average => Ok(tape.mean_rows(h)?),
        PoolingKind::Max => Ok(tape.max_rows(h)?),
        PoolingKind::RsPool(cfg) => rs_pool_t(tape, h, cfg, seed),
    }
}
