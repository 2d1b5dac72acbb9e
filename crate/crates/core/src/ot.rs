//! Entropic optimal transport between uniform marginals.
//!
//! The solver minimizes `<gamma, C> - eps * H(gamma)` subject to row sums
//! `1/n_a` and column sums `1/n_g`, by alternating Sinkhorn scaling. Every
//! executed iteration goes through the [`Backend`], so on a [`crate::Tape`] the
//! resulting plan is differentiable with respect to the cost by unrolling.

use crate::autodiff::{cosine_similarity_matrix, Backend, Eager, ReduceOp};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Cosine-distance costs, every entry in `[0, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Matrix);

impl CostMatrix {
    /// Wraps arbitrary finite costs (e.g. for tests of the solver itself).
    pub fn from_matrix(m: Matrix) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::NonFinite("CostMatrix"));
        }
        Ok(Self(m))
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }
}

/// `C_ij = 1 - cos(source_i, target_j)` on any backend.
pub fn build_cost_on<B: Backend>(b: &mut B, source: &B::Var, target: &B::Var) -> Result<B::Var> {
    let sim = cosine_similarity_matrix(b, source, target)?;
    let neg = b.scale(&sim, -1.0)?;
    b.offset(&neg, 1.0)
}

pub fn build_cost(source: &Matrix, target: &Matrix) -> Result<CostMatrix> {
    build_cost_on(&mut Eager, source, target).map(CostMatrix)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub log_domain: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            max_iterations: 500,
            tolerance: 1e-8,
            log_domain: true,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("sinkhorn epsilon must be positive, got {}", self.epsilon)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("sinkhorn max_iterations must be at least 1".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::Config(format!("sinkhorn tolerance must be nonnegative, got {}", self.tolerance)));
        }
        Ok(())
    }
}

/// Coupling returned by [`sinkhorn_on`]. `V` is a backend variable; the eager
/// form uses a plain [`Matrix`].
#[derive(Debug, Clone)]
pub struct TransportPlan<V = Matrix> {
    pub gamma: V,
    pub epsilon: f64,
    pub iterations_used: usize,
    /// Largest absolute deviation of any row or column sum from its marginal.
    pub marginal_error: f64,
    pub converged: bool,
}

impl TransportPlan<Matrix> {
    /// Wraps a given coupling, e.g. a hand-built plan used with the loss functions.
    pub fn from_gamma(gamma: Matrix) -> Self {
        let marginal_error = marginal_error(&gamma);
        Self {
            gamma,
            epsilon: 0.0,
            iterations_used: 0,
            marginal_error,
            converged: true,
        }
    }
}

/// Maximum violation of the uniform row and column marginals.
pub fn marginal_error(gamma: &Matrix) -> f64 {
    let (n, m) = gamma.shape();
    let a = 1.0 / n as f64;
    let b = 1.0 / m as f64;
    let rows = gamma.row_sums().into_iter().map(|s| (s - a).abs());
    let cols = gamma.col_sums().into_iter().map(|s| (s - b).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

/// Marginal violation of `exp(log_kernel_ij + alpha_i + beta_j)` without materializing it.
fn scaled_marginal_error(log_kernel: &Matrix, alpha: &[f64], beta: &[f64]) -> f64 {
    let (n, m) = log_kernel.shape();
    let mut cols = vec![0.0; m];
    let mut worst: f64 = 0.0;
    for (i, &a) in alpha.iter().enumerate().take(n) {
        let mut row = 0.0;
        for j in 0..m {
            let p = (log_kernel.get(i, j) + a + beta[j]).exp();
            row += p;
            cols[j] += p;
        }
        worst = worst.max((row - 1.0 / n as f64).abs());
    }
    for c in cols {
        worst = worst.max((c - 1.0 / m as f64).abs());
    }
    worst
}

fn overflow(cfg: &SinkhornConfig) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::NonFinite(_) if !cfg.log_domain => Error::SinkhornOverflow { epsilon: cfg.epsilon },
        other => other,
    }
}

/// Sinkhorn iteration on any backend.
///
/// Stops as soon as the marginal violation drops to `cfg.tolerance`, or after
/// `cfg.max_iterations`; in the latter case the current plan is returned with
/// `converged == false`.
pub fn sinkhorn_on<B: Backend>(
    b: &mut B,
    cost: &B::Var,
    cfg: &SinkhornConfig,
) -> Result<TransportPlan<B::Var>> {
    cfg.validate()?;
    let (n, m) = b.value(cost).shape();
    if n == 0 || m == 0 {
        return Err(Error::Degenerate(format!("empty cost matrix {n}x{m}")));
    }
    if !b.value(cost).is_finite() {
        return Err(Error::NonFinite("sinkhorn cost"));
    }
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let log_kernel = b.scale(cost, -1.0 / cfg.epsilon)?;
    let lk = b.value(&log_kernel).clone();

    let mut iterations = 0;
    let gamma = if cfg.log_domain {
        // alpha = f / eps, beta = g / eps
        let mut beta = b.constant(Matrix::zeros(1, m));
        let mut alpha = b.constant(Matrix::zeros(n, 1));
        while iterations < cfg.max_iterations {
            let t = b.add(&log_kernel, &beta)?;
            let l = b.reduce(ReduceOp::LogSumExpRows, &t)?;
            let neg = b.scale(&l, -1.0)?;
            alpha = b.offset(&neg, log_a)?;

            let t = b.add(&log_kernel, &alpha)?;
            let l = b.reduce(ReduceOp::LogSumExpCols, &t)?;
            let neg = b.scale(&l, -1.0)?;
            beta = b.offset(&neg, log_b)?;

            iterations += 1;
            let err = scaled_marginal_error(&lk, b.value(&alpha).data(), b.value(&beta).data());
            if err <= cfg.tolerance {
                break;
            }
        }
        let t = b.add(&log_kernel, &alpha)?;
        let t = b.add(&t, &beta)?;
        b.exp(&t)?
    } else {
        let wrap = overflow(cfg);
        let kernel = b.exp(&log_kernel).map_err(&wrap)?;
        let kernel_t = b.transpose(&kernel);
        let a_vec = b.constant(Matrix::filled(n, 1, 1.0 / n as f64));
        let b_vec = b.constant(Matrix::filled(m, 1, 1.0 / m as f64));
        let mut v = b.constant(Matrix::filled(m, 1, 1.0));
        let mut u = b.constant(Matrix::filled(n, 1, 1.0));
        while iterations < cfg.max_iterations {
            let kv = b.matmul(&kernel, &v).map_err(&wrap)?;
            u = b.div(&a_vec, &kv).map_err(&wrap)?;
            let ktu = b.matmul(&kernel_t, &u).map_err(&wrap)?;
            v = b.div(&b_vec, &ktu).map_err(&wrap)?;

            iterations += 1;
            let alpha: Vec<f64> = b.value(&u).data().iter().map(|x| x.ln()).collect();
            let beta: Vec<f64> = b.value(&v).data().iter().map(|x| x.ln()).collect();
            let err = scaled_marginal_error(&lk, &alpha, &beta);
            if !err.is_finite() {
                return Err(Error::SinkhornOverflow { epsilon: cfg.epsilon });
            }
            if err <= cfg.tolerance {
                break;
            }
        }
        let vt = b.transpose(&v);
        let t = b.mul(&kernel, &u).map_err(&wrap)?;
        b.mul(&t, &vt).map_err(&wrap)?
    };
    let marginal_error = marginal_error(b.value(&gamma));
    Ok(TransportPlan {
        gamma,
        epsilon: cfg.epsilon,
        iterations_used: iterations,
        marginal_error,
        converged: marginal_error <= cfg.tolerance,
    })
}

pub fn sinkhorn(cost: &CostMatrix, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    sinkhorn_on(&mut Eager, cost.values(), cfg)
}

/// Shannon entropy `-sum gamma log gamma` (natural log, `0 log 0 = 0`).
pub fn entropy(gamma: &Matrix) -> Result<f64> {
    let mut h = 0.0;
    for &g in gamma.data() {
        if g < 0.0 {
            return Err(Error::Contract(format!("negative plan entry {g}")));
        }
        if g > 0.0 {
            h -= g * g.ln();
        }
    }
    Ok(h)
}

/// `<gamma, C> - eps * H(gamma)`.
pub fn entropic_objective(gamma: &Matrix, cost: &CostMatrix, epsilon: f64) -> Result<f64> {
    Ok(gamma.dot(cost.values())? - epsilon * entropy(gamma)?)
}

pub const ORACLE_MAX_SIZE: usize = 8;

/// Exact unregularized OT for square uniform marginals by enumerating every
/// permutation. Returns the lexicographically first optimal assignment and
/// its cost `(1/n) sum_i C_{i, sigma(i)}`.
pub fn exact_uniform_ot_oracle(cost: &CostMatrix) -> Result<(Vec<usize>, f64)> {
    let (n, m) = cost.shape();
    if n != m {
        return Err(Error::Dimension {
            op: "exact_uniform_ot_oracle",
            lhs: (n, m),
            rhs: (m, n),
        });
    }
    if n > ORACLE_MAX_SIZE {
        return Err(Error::SizeLimit(format!(
            "exact oracle supports n <= {ORACLE_MAX_SIZE}, got {n}"
        )));
    }
    if n == 0 {
        return Err(Error::Degenerate("empty cost matrix".into()));
    }
    let c = cost.values();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = (perm.clone(), f64::INFINITY);
    loop {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum::<f64>() / n as f64;
        if total < best.1 {
            best = (perm.clone(), total);
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(best)
}

/// Advances to the next lexicographic permutation; false once the last one is passed.
fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).expect("successor exists");
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cost(rows: &[&[f64]]) -> CostMatrix {
        CostMatrix::from_matrix(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn cost_anchor_values() {
        let s = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]).unwrap();
        let t = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let c = build_cost(&s, &t).unwrap();
        assert_eq!(c.values().data(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn cost_rejects_zero_rows() {
        let s = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let t = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(matches!(build_cost(&s, &t), Err(Error::Degenerate(_))));
    }

    #[test]
    fn one_by_one_plan_is_unit_mass() {
        for log_domain in [true, false] {
            let cfg = SinkhornConfig { log_domain, ..Default::default() };
            let p = sinkhorn(&cost(&[&[0.4]]), &cfg).unwrap();
            assert!((p.gamma.get(0, 0) - 1.0).abs() < 1e-15);
            assert!(p.converged);
        }
    }

    #[test]
    fn constant_cost_gives_product_coupling() {
        let p = sinkhorn(&cost(&[&[0.7; 3], &[0.7; 3]]), &SinkhornConfig::default()).unwrap();
        for &g in p.gamma.data() {
            assert!((g - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sharp_epsilon_recovers_permutation() {
        let cfg = SinkhornConfig { epsilon: 0.005, max_iterations: 10_000, ..Default::default() };
        let p = sinkhorn(&cost(&[&[0.0, 1.0], &[1.0, 0.0]]), &cfg).unwrap();
        let expect = Matrix::from_rows(&[[0.5, 0.0], [0.0, 0.5]]).unwrap();
        assert!(p.gamma.max_abs_diff(&expect) < 1e-3);
    }

    #[test]
    fn linear_domain_overflow_is_reported() {
        let cfg = SinkhornConfig { epsilon: 1e-4, log_domain: false, ..Default::default() };
        let r = sinkhorn(&cost(&[&[2.0, 2.0], &[2.0, 2.0]]), &cfg);
        assert!(matches!(r, Err(Error::SinkhornOverflow { .. })), "{r:?}");
    }

    #[test]
    fn non_convergence_returns_plan() {
        let cfg = SinkhornConfig { epsilon: 0.01, max_iterations: 1, ..Default::default() };
        let p = sinkhorn(&cost(&[&[0.0, 1.0, 0.3], &[1.0, 0.0, 0.2]]), &cfg).unwrap();
        assert_eq!(p.iterations_used, 1);
        assert!(!p.converged);
        assert!(p.marginal_error > cfg.tolerance);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let c = cost(&[&[0.0]]);
        for cfg in [
            SinkhornConfig { epsilon: 0.0, ..Default::default() },
            SinkhornConfig { max_iterations: 0, ..Default::default() },
            SinkhornConfig { tolerance: -1.0, ..Default::default() },
        ] {
            assert!(matches!(sinkhorn(&c, &cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn entropy_anchors() {
        let u = Matrix::filled(2, 2, 0.25);
        assert!((entropy(&u).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&Matrix::scalar(1.0)).unwrap(), 0.0);
        let d = Matrix::from_rows(&[[0.5, 0.0], [0.0, 0.5]]).unwrap();
        assert!((entropy(&d).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(entropy(&Matrix::scalar(-0.1)).is_err());
    }

    #[test]
    fn oracle_anchors() {
        let (p, c) = exact_uniform_ot_oracle(&cost(&[&[0.3]])).unwrap();
        assert_eq!((p, c), (vec![0], 0.3));
        let (p, c) = exact_uniform_ot_oracle(&cost(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap();
        assert_eq!((p, c), (vec![0, 1], 0.0));
        let (p, _) = exact_uniform_ot_oracle(&cost(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(p, vec![1, 0]);
        let big = CostMatrix::from_matrix(Matrix::zeros(9, 9)).unwrap();
        assert!(matches!(exact_uniform_ot_oracle(&big), Err(Error::SizeLimit(_))));
    }

    #[test]
    fn permutations_are_complete() {
        let mut p = vec![0, 1, 2, 3];
        let mut count = 1;
        while next_permutation(&mut p) {
            count += 1;
        }
        assert_eq!(count, 24);
    }
}
