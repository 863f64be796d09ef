//! Sample covariance, symmetric eigendecomposition, principal component
//! score vectors, and the convergence-angle quantities for spiked spectra.
//!
//! The covariate matrix `W` (rows = observations) is summarized by
//! `S = n^{-1} W^T W`. Its leading eigenvectors define factor directions;
//! the score vector of direction `u` is `W u`, rescaled to a common L2 norm
//! `sqrt(n)` so factor coefficients live on the same scale as predictor
//! coefficients. When `q > n` the decomposition is done through the dual
//! matrix `n^{-1} W W^T`, which shares the nonzero spectrum of `S` and cuts
//! the cost from `O(q^3)` to `O(n^3 + n q K)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used for orthonormality checks on eigenvector matrices.
pub const ORTHONORMALITY_TOL: f64 = 1e-10;

/// Observation-by-covariate data matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateMatrix {
    values: DMatrix<f64>,
}

impl CovariateMatrix {
    /// Wraps an `n x q` matrix with `n >= 2`, `q >= 1`, all entries finite.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() < 2 {
            return Err(Error::input(format!(
                "covariate matrix needs at least 2 rows, got {}",
                values.nrows()
            )));
        }
        if values.ncols() < 1 {
            return Err(Error::input("covariate matrix needs at least 1 column"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("covariate matrix contains a non-finite entry"));
        }
        Ok(CovariateMatrix { values })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn q(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.values
    }
}

/// Eigendecomposition with eigenvalues sorted descending and a deterministic
/// sign convention: the largest-magnitude entry of each eigenvector is
/// nonnegative, ties broken by lowest index. For covariance inputs the
/// eigenvalues are nonnegative up to roundoff.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSystem {
    pub eigenvalues: Vec<f64>,
    /// Column `i` pairs with `eigenvalues[i]`.
    pub eigenvectors: DMatrix<f64>,
}

impl EigenSystem {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvector(&self, i: usize) -> DVector<f64> {
        DVector::from_column_slice(self.eigenvectors.column(i).as_slice())
    }
}

/// Description of a tiered spiked spectrum: `m` groups of sizes `k_l` whose
/// eigenvalues grow like `q^{alpha_l}`, with strictly decreasing exponents
/// all above one, plus a tail exponent used by the rate bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikedStructure {
    group_sizes: Vec<usize>,
    exponents: Vec<f64>,
    tail_exponent: f64,
    limits: Option<Vec<f64>>,
    q: usize,
    spike_count: usize,
    delta: Option<f64>,
}

impl SpikedStructure {
    pub fn new(
        group_sizes: Vec<usize>,
        exponents: Vec<f64>,
        tail_exponent: f64,
        q: usize,
        limits: Option<Vec<f64>>,
    ) -> Result<Self> {
        if group_sizes.is_empty() || group_sizes.len() != exponents.len() {
            return Err(Error::input(
                "group_sizes and exponents must be nonempty and of equal length",
            ));
        }
        if group_sizes.iter().any(|&k| k == 0) {
            return Err(Error::input("every group size must be positive"));
        }
        let m = exponents.len();
        for l in 0..m {
            if !exponents[l].is_finite() || exponents[l] <= 1.0 {
                return Err(Error::input(format!(
                    "exponent {} must be finite and > 1, got {}",
                    l + 1,
                    exponents[l]
                )));
            }
            if l + 1 < m && exponents[l] <= exponents[l + 1] {
                return Err(Error::input("exponents must be strictly decreasing"));
            }
        }
        if !tail_exponent.is_finite() {
            return Err(Error::input("tail exponent must be finite"));
        }
        let spike_count: usize = group_sizes.iter().sum();
        if spike_count > q {
            return Err(Error::input(format!(
                "total spike count {spike_count} exceeds dimension {q}"
            )));
        }
        if let Some(ref c) = limits {
            if c.len() != spike_count {
                return Err(Error::input("limits must list one constant per spiked index"));
            }
        }
        let delta = if m >= 2 {
            Some(
                exponents
                    .windows(2)
                    .map(|w| w[0] - w[1])
                    .fold(f64::INFINITY, f64::min),
            )
        } else {
            None
        };
        Ok(SpikedStructure {
            group_sizes,
            exponents,
            tail_exponent,
            limits,
            q,
            spike_count,
            delta,
        })
    }

    pub fn group_count(&self) -> usize {
        self.group_sizes.len()
    }

    pub fn group_sizes(&self) -> &[usize] {
        &self.group_sizes
    }

    pub fn exponents(&self) -> &[f64] {
        &self.exponents
    }

    pub fn tail_exponent(&self) -> f64 {
        self.tail_exponent
    }

    pub fn limits(&self) -> Option<&[f64]> {
        self.limits.as_deref()
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// Total number of spiked eigenvalues.
    pub fn spike_count(&self) -> usize {
        self.spike_count
    }

    /// Minimum gap between successive exponents; `None` for a single group.
    pub fn delta(&self) -> Option<f64> {
        self.delta
    }

    /// 0-based index range of group `l` (1-based) in the sorted spectrum.
    pub fn group_indices(&self, l: usize) -> std::ops::Range<usize> {
        let start: usize = self.group_sizes[..l - 1].iter().sum();
        start..start + self.group_sizes[l - 1]
    }

    /// Population eigenvalue for 0-based spiked index `i`: `c_i q^{alpha_l}`
    /// with `c_i = 1` when no limits are supplied.
    pub fn population_eigenvalue(&self, i: usize) -> f64 {
        let mut offset = 0;
        for (l, &k) in self.group_sizes.iter().enumerate() {
            if i < offset + k {
                let c = self.limits.as_ref().map_or(1.0, |cs| cs[i]);
                return c * (self.q as f64).powf(self.exponents[l]);
            }
            offset += k;
        }
        1.0
    }
}

/// Estimated factor score vectors, each rescaled to L2 norm `sqrt(n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    /// `n x K`; column i has L2 norm `sqrt(n)`.
    pub scores: DMatrix<f64>,
    /// `||W u_i||_2` before rescaling.
    pub raw_norms: Vec<f64>,
    /// `sqrt(n) / ||W u_i||_2`; multiplying a fitted factor coefficient by
    /// this scalar moves it back to the raw score scale for prediction.
    pub back_scalars: Vec<f64>,
}

impl ScoreSet {
    pub fn k(&self) -> usize {
        self.scores.ncols()
    }

    pub fn n(&self) -> usize {
        self.scores.nrows()
    }
}

/// Leading factor directions of a covariate sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorBasis {
    /// `q x K` orthonormal directions, eigenvalue-sorted.
    pub directions: DMatrix<f64>,
    /// Matching sample eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
}

impl FactorBasis {
    pub fn k(&self) -> usize {
        self.directions.ncols()
    }

    /// Score set of `w` in this basis (columns rescaled to `sqrt(n)`).
    pub fn scores(&self, w: &CovariateMatrix) -> Result<ScoreSet> {
        if w.q() != self.directions.nrows() {
            return Err(Error::input(format!(
                "covariate dimension {} does not match basis dimension {}",
                w.q(),
                self.directions.nrows()
            )));
        }
        scores_from_directions(w, &self.directions)
    }
}

/// `n^{-1} W^T W`, symmetrized exactly. Columns are used as-is; center
/// beforehand if the data are not mean zero.
pub fn sample_covariance(w: &CovariateMatrix) -> DMatrix<f64> {
    let n = w.n() as f64;
    let mut s = w.values().tr_mul(w.values());
    s /= n;
    symmetrize(&mut s);
    s
}

fn symmetrize(s: &mut DMatrix<f64>) {
    let q = s.nrows();
    for i in 0..q {
        for j in (i + 1)..q {
            let avg = 0.5 * (s[(i, j)] + s[(j, i)]);
            s[(i, j)] = avg;
            s[(j, i)] = avg;
        }
    }
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Full symmetric eigendecomposition, sorted descending with the sign
/// convention applied.
pub fn eigendecompose(s: &DMatrix<f64>) -> Result<EigenSystem> {
    if s.nrows() != s.ncols() {
        return Err(Error::input(format!(
            "matrix must be square, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("matrix contains a non-finite entry"));
    }
    let scale = 1.0 + max_abs(s);
    let mut sym = s.clone();
    symmetrize(&mut sym);
    let asym = max_abs(&(&sym - s));
    if asym > 1e-8 * scale {
        return Err(Error::input(format!(
            "matrix is not symmetric: max deviation {asym:.3e} exceeds tolerance"
        )));
    }
    let eig = sym
        .try_symmetric_eigen(f64::EPSILON, 100_000)
        .ok_or_else(|| Error::numeric("symmetric eigensolver did not converge"))?;
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
    });
    let dim = order.len();
    let mut eigenvalues = Vec::with_capacity(dim);
    let mut eigenvectors = DMatrix::zeros(dim, dim);
    for (dst, &src) in order.iter().enumerate() {
        eigenvalues.push(eig.eigenvalues[src]);
        eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    apply_sign_convention(&mut eigenvectors);
    Ok(EigenSystem {
        eigenvalues,
        eigenvectors,
    })
}

/// Flips columns so the largest-magnitude entry is nonnegative; ties broken
/// by lowest index.
fn apply_sign_convention(vectors: &mut DMatrix<f64>) {
    for mut col in vectors.column_iter_mut() {
        let mut lead = 0;
        let mut best = -1.0;
        for (i, v) in col.iter().enumerate() {
            let a = v.abs();
            if a > best {
                best = a;
                lead = i;
            }
        }
        if col[lead] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Score vectors of the top `k` directions of `eig`, rescaled to `sqrt(n)`.
pub fn principal_scores(w: &CovariateMatrix, eig: &EigenSystem, k: usize) -> Result<ScoreSet> {
    if k == 0 || k >= w.n() {
        return Err(Error::input(format!(
            "factor count must satisfy 1 <= K < n, got K={k}, n={}",
            w.n()
        )));
    }
    if eig.dim() != w.q() {
        return Err(Error::input(format!(
            "eigensystem dimension {} does not match covariate dimension {}",
            eig.dim(),
            w.q()
        )));
    }
    if k > eig.dim() {
        return Err(Error::input(format!(
            "requested {k} factors from a {}-dimensional eigensystem",
            eig.dim()
        )));
    }
    let directions = eig.eigenvectors.columns(0, k).into_owned();
    scores_from_directions(w, &directions)
}

fn scores_from_directions(w: &CovariateMatrix, directions: &DMatrix<f64>) -> Result<ScoreSet> {
    let n = w.n();
    let k = directions.ncols();
    if k >= n {
        return Err(Error::input(format!(
            "factor count must satisfy K < n, got K={k}, n={n}"
        )));
    }
    let sqrt_n = (n as f64).sqrt();
    let mut scores = w.values() * directions;
    let mut raw_norms = Vec::with_capacity(k);
    let mut back_scalars = Vec::with_capacity(k);
    for i in 0..k {
        let norm = scores.column(i).norm();
        if norm == 0.0 || !norm.is_normal() {
            return Err(Error::DegenerateFactor { index: i });
        }
        let scale = sqrt_n / norm;
        scores.column_mut(i).scale_mut(scale);
        raw_norms.push(norm);
        back_scalars.push(scale);
    }
    Ok(ScoreSet {
        scores,
        raw_norms,
        back_scalars,
    })
}

/// Top-`k` factor directions of `w`, through the dual matrix when `q > n`.
pub fn top_factor_basis(w: &CovariateMatrix, k: usize) -> Result<FactorBasis> {
    if k == 0 || k >= w.n() {
        return Err(Error::input(format!(
            "factor count must satisfy 1 <= K < n, got K={k}, n={}",
            w.n()
        )));
    }
    if k > w.q() {
        return Err(Error::input(format!(
            "factor count {k} exceeds covariate dimension {}",
            w.q()
        )));
    }
    let (n, q) = (w.n(), w.q());
    if q <= n {
        let eig = eigendecompose(&sample_covariance(w))?;
        let directions = eig.eigenvectors.columns(0, k).into_owned();
        return Ok(FactorBasis {
            directions,
            eigenvalues: eig.eigenvalues[..k].to_vec(),
        });
    }
    // Dual route: n^{-1} W W^T shares the nonzero spectrum of S and its
    // eigenvector v maps to the primal direction W^T v (normalized).
    let mut dual = w.values() * w.values().transpose();
    dual /= n as f64;
    symmetrize(&mut dual);
    let eig = eigendecompose(&dual)?;
    let mut directions = DMatrix::zeros(q, k);
    let mut eigenvalues = Vec::with_capacity(k);
    for i in 0..k {
        let v = eig.eigenvector(i);
        let mut u = w.values().tr_mul(&v);
        let norm = u.norm();
        if norm == 0.0 || !norm.is_normal() {
            return Err(Error::DegenerateFactor { index: i });
        }
        u /= norm;
        directions.set_column(i, &u);
        eigenvalues.push(eig.eigenvalues[i]);
    }
    apply_sign_convention(&mut directions);
    Ok(FactorBasis {
        directions,
        eigenvalues,
    })
}

fn check_unit(v: &DVector<f64>, what: &str) -> Result<()> {
    let norm = v.norm();
    if (norm - 1.0).abs() > 1e-8 {
        return Err(Error::input(format!("{what} must be a unit vector, norm is {norm}")));
    }
    Ok(())
}

/// Angle in `[0, pi/2]` between `u_hat` and the span of `group`, computed as
/// `arccos{ (sum_j (u_j^T u_hat)^2)^{1/2} }`.
pub fn subspace_angle(u_hat: &DVector<f64>, group: &[DVector<f64>]) -> Result<f64> {
    check_unit(u_hat, "u_hat")?;
    if group.is_empty() {
        return Err(Error::input("group must contain at least one vector"));
    }
    for (i, g) in group.iter().enumerate() {
        if g.len() != u_hat.len() {
            return Err(Error::input("group vector dimension mismatch"));
        }
        check_unit(g, "group vector")?;
        for h in group.iter().take(i) {
            if g.dot(h).abs() > 1e-6 {
                return Err(Error::input("group vectors must be orthonormal"));
            }
        }
    }
    let projected_sq: f64 = group.iter().map(|g| g.dot(u_hat).powi(2)).sum();
    Ok(projected_sq.sqrt().clamp(0.0, 1.0).acos())
}

/// Angle in `[0, pi/2]` between the score images `W u_hat` and `W u`.
pub fn score_angle(w: &CovariateMatrix, u_hat: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
    if u_hat.len() != w.q() || u.len() != w.q() {
        return Err(Error::input("direction dimension does not match covariate dimension"));
    }
    check_unit(u_hat, "u_hat")?;
    check_unit(u, "u")?;
    let a = w.values() * u_hat;
    let b = w.values() * u;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || !na.is_normal() {
        return Err(Error::DegenerateFactor { index: 0 });
    }
    if nb == 0.0 || !nb.is_normal() {
        return Err(Error::DegenerateFactor { index: 1 });
    }
    let cos = (a.dot(&b) / (na * nb)).abs().clamp(0.0, 1.0);
    Ok(cos.acos())
}

/// Convergence-rate driver for group `t` (1-based):
/// `A(t) = (sum_{l=t+1}^m k_l q^{alpha_l} + k_{m+1}) K^{-1} q^{alpha - alpha_t}`
/// with `k_{m+1} = q - K`. Larger `alpha_t` gives a strictly smaller bound.
pub fn rate_bound(s: &SpikedStructure, t: usize) -> Result<f64> {
    let m = s.group_count();
    if t == 0 || t > m {
        return Err(Error::input(format!("group index must lie in 1..={m}, got {t}")));
    }
    let q = s.q() as f64;
    let tail_count = (s.q() - s.spike_count()) as f64;
    let mut spill = 0.0;
    for l in (t + 1)..=m {
        spill += s.group_sizes()[l - 1] as f64 * q.powf(s.exponents()[l - 1]);
    }
    let k_total = s.spike_count() as f64;
    Ok((spill + tail_count) / k_total * q.powf(s.tail_exponent() - s.exponents()[t - 1]))
}

/// Eigenvalue-ratio heuristic for the number of spiked components: the
/// 1-based index maximizing `lambda_i / lambda_{i+1}` among the leading
/// eigenvalues. Diagnostic only; callers choose K themselves.
pub fn eigenvalue_ratio_k(eigenvalues: &[f64], max_k: usize) -> Option<usize> {
    let limit = max_k.min(eigenvalues.len().saturating_sub(1));
    let mut best = None;
    let mut best_ratio = 0.0;
    for i in 0..limit {
        let denom = eigenvalues[i + 1];
        if denom <= 0.0 {
            break;
        }
        let ratio = eigenvalues[i] / denom;
        if ratio > best_ratio {
            best_ratio = ratio;
            best = Some(i + 1);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_covariates(n: usize, q: usize, seed: u64) -> CovariateMatrix {
        let mut rng = crate::rng::stream(seed);
        let values = DMatrix::from_fn(n, q, |_, _| rng.sample::<f64, _>(StandardNormal));
        CovariateMatrix::new(values).unwrap()
    }

    #[test]
    fn covariance_of_two_point_design() {
        let w = CovariateMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0])).unwrap();
        let s = sample_covariance(&w);
        assert_relative_eq!(s[(0, 0)], 1.0);
        assert_relative_eq!(s[(0, 1)], -1.0);
        assert_relative_eq!(s[(1, 1)], 1.0);
    }

    #[test]
    fn covariance_of_zero_matrix_is_zero() {
        let w = CovariateMatrix::new(DMatrix::zeros(3, 2)).unwrap();
        let s = sample_covariance(&w);
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut m = DMatrix::zeros(3, 2);
        m[(0, 0)] = f64::NAN;
        assert!(CovariateMatrix::new(m).is_err());
    }

    #[test]
    fn eigendecompose_identity() {
        let eig = eigendecompose(&DMatrix::identity(3, 3)).unwrap();
        for v in &eig.eigenvalues {
            assert_relative_eq!(*v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn eigendecompose_sorts_descending_with_sign_convention() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 2.0]));
        let eig = eigendecompose(&s).unwrap();
        assert_relative_eq!(eig.eigenvalues[0], 3.0);
        assert_relative_eq!(eig.eigenvalues[1], 2.0);
        assert_relative_eq!(eig.eigenvalues[2], 1.0);
        // eigenvectors e1, e3, e2 with nonnegative leading entries
        assert_relative_eq!(eig.eigenvectors[(0, 0)].abs(), 1.0, epsilon = 1e-12);
        assert!(eig.eigenvectors[(0, 0)] > 0.0);
        assert_relative_eq!(eig.eigenvectors[(2, 1)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(eig.eigenvectors[(1, 2)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn eigendecompose_rank_one_update() {
        let q = 4;
        let s = DMatrix::from_fn(q, q, |i, j| if i == j { 1.0 } else { 0.5 });
        let eig = eigendecompose(&s).unwrap();
        assert_relative_eq!(eig.eigenvalues[0], 2.5, epsilon = 1e-10);
        for i in 1..q {
            assert_relative_eq!(eig.eigenvalues[i], 0.5, epsilon = 1e-10);
        }
    }

    #[test]
    fn eigendecompose_rejects_asymmetric() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(eigendecompose(&s), Err(Error::Input(_))));
    }

    #[test]
    fn reconstruction_and_trace_are_preserved() {
        let w = random_covariates(40, 12, 11);
        let s = sample_covariance(&w);
        let eig = eigendecompose(&s).unwrap();
        let lambda = DMatrix::from_diagonal(&DVector::from_vec(eig.eigenvalues.clone()));
        let rebuilt = &eig.eigenvectors * lambda * eig.eigenvectors.transpose();
        let scale = 1.0 + max_abs(&s);
        assert!(max_abs(&(&rebuilt - &s)) <= 1e-8 * scale);
        let trace: f64 = (0..s.nrows()).map(|i| s[(i, i)]).sum();
        let sum: f64 = eig.eigenvalues.iter().sum();
        assert!((sum - trace).abs() <= 1e-8 * (1.0 + trace.abs()));
        let gram = eig.eigenvectors.tr_mul(&eig.eigenvectors);
        let identity = DMatrix::identity(gram.nrows(), gram.ncols());
        assert!(max_abs(&(&gram - &identity)) <= ORTHONORMALITY_TOL);
    }

    #[test]
    fn scores_of_scaled_identity_design() {
        let w =
            CovariateMatrix::new(DMatrix::from_row_slice(2, 2, &[2f64.sqrt(), 0.0, 0.0, 2f64.sqrt()]))
                .unwrap();
        let eig = EigenSystem {
            eigenvalues: vec![1.0, 1.0],
            eigenvectors: DMatrix::identity(2, 2),
        };
        let scores = principal_scores(&w, &eig, 1).unwrap();
        assert_relative_eq!(scores.scores[(0, 0)], 2f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(scores.scores[(1, 0)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(scores.raw_norms[0], 2f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(scores.back_scalars[0] * scores.raw_norms[0], 2f64.sqrt());
    }

    #[test]
    fn score_columns_have_common_norm_and_are_orthogonal() {
        let w = random_covariates(30, 8, 5);
        let eig = eigendecompose(&sample_covariance(&w)).unwrap();
        let scores = principal_scores(&w, &eig, 4).unwrap();
        let sqrt_n = (w.n() as f64).sqrt();
        for i in 0..4 {
            assert!((scores.scores.column(i).norm() - sqrt_n).abs() <= 1e-8);
            for j in 0..i {
                let dot = scores.scores.column(i).dot(&scores.scores.column(j));
                assert!(
                    dot.abs() <= 1e-6 * w.n() as f64,
                    "score columns {i},{j} not orthogonal: {dot}"
                );
            }
        }
        // cross-check against direct inner products of the raw images
        for i in 0..4 {
            for j in 0..4 {
                let ui = eig.eigenvector(i);
                let uj = eig.eigenvector(j);
                let direct = (w.values() * ui).dot(&(w.values() * uj));
                let expected = w.n() as f64 * eig.eigenvalues[j] * if i == j { 1.0 } else { 0.0 };
                assert!((direct - expected).abs() <= 1e-6 * w.n() as f64);
            }
        }
    }

    #[test]
    fn degenerate_direction_is_reported() {
        let mut values = DMatrix::zeros(4, 3);
        values[(0, 0)] = 1.0;
        values[(1, 0)] = -1.0;
        let w = CovariateMatrix::new(values).unwrap();
        let eig = EigenSystem {
            eigenvalues: vec![1.0, 0.0, 0.0],
            eigenvectors: DMatrix::identity(3, 3),
        };
        match principal_scores(&w, &eig, 2) {
            Err(Error::DegenerateFactor { index }) => assert_eq!(index, 1),
            other => panic!("expected degenerate factor, got {other:?}"),
        }
    }

    #[test]
    fn dual_route_matches_direct_decomposition() {
        let w = random_covariates(12, 40, 9);
        let basis = top_factor_basis(&w, 5).unwrap();
        let eig = eigendecompose(&sample_covariance(&w)).unwrap();
        for i in 0..5 {
            assert_relative_eq!(basis.eigenvalues[i], eig.eigenvalues[i], epsilon = 1e-8);
            let dot = basis
                .directions
                .column(i)
                .dot(&eig.eigenvectors.column(i))
                .abs();
            assert!(dot > 1.0 - 1e-8, "direction {i} mismatch, |dot|={dot}");
        }
        let scores = basis.scores(&w).unwrap();
        assert_eq!(scores.k(), 5);
    }

    #[test]
    fn subspace_angle_trivial_cases() {
        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let e2 = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        let e3 = DVector::from_vec(vec![0.0, 0.0, 1.0]);
        assert_relative_eq!(subspace_angle(&e1, &[e1.clone()]).unwrap(), 0.0);
        assert_relative_eq!(
            subspace_angle(&e3, &[e1.clone(), e2.clone()]).unwrap(),
            std::f64::consts::FRAC_PI_2
        );
        let mixed = DVector::from_vec(vec![1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt(), 0.0]);
        assert_relative_eq!(
            subspace_angle(&mixed, &[e1]).unwrap(),
            std::f64::consts::FRAC_PI_4,
            epsilon = 1e-12
        );
    }

    #[test]
    fn subspace_angle_rejects_non_unit() {
        let v = DVector::from_vec(vec![2.0, 0.0]);
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        assert!(subspace_angle(&v, &[e1]).is_err());
    }

    #[test]
    fn score_angle_identities() {
        let w = random_covariates(20, 6, 3);
        let u = DVector::from_fn(6, |i, _| if i == 0 { 1.0 } else { 0.0 });
        assert_relative_eq!(score_angle(&w, &u, &u).unwrap(), 0.0, epsilon = 1e-8);

        // orthonormal-scaled design: the score angle equals the direction angle
        let n = 4;
        let iso = CovariateMatrix::new(DMatrix::identity(n, n).map(|v: f64| v * (n as f64).sqrt())).unwrap();
        let a = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        let b = DVector::from_vec(vec![1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt(), 0.0, 0.0]);
        assert_relative_eq!(
            score_angle(&iso, &a, &b).unwrap(),
            std::f64::consts::FRAC_PI_4,
            epsilon = 1e-12
        );
    }

    #[test]
    fn rate_bound_examples() {
        // single spike in dimension 10^4
        let s = SpikedStructure::new(vec![1], vec![2.0], 0.5, 10_000, None).unwrap();
        assert_relative_eq!(rate_bound(&s, 1).unwrap(), 9_999.0 * 1e4f64.powf(-1.5), epsilon = 1e-12);

        // no tail dimensions at all
        let s = SpikedStructure::new(vec![1], vec![2.0], 0.5, 1, None).unwrap();
        assert_relative_eq!(rate_bound(&s, 1).unwrap(), 0.0);

        // two groups: hand evaluation (1*100^2 + 98) / 2 * 100^{0.5-3}
        let s = SpikedStructure::new(vec![1, 1], vec![3.0, 2.0], 0.5, 100, None).unwrap();
        let expected = (100f64.powi(2) + 98.0) / 2.0 * 100f64.powf(-2.5);
        assert_relative_eq!(rate_bound(&s, 1).unwrap(), expected, epsilon = 1e-12);
        assert_relative_eq!(rate_bound(&s, 1).unwrap(), 0.05049, epsilon = 1e-10);
        assert!(rate_bound(&s, 3).is_err());
        assert!(rate_bound(&s, 0).is_err());
    }

    #[test]
    fn rate_bound_decreases_in_leading_exponent() {
        let mut prev = f64::INFINITY;
        for alpha in [1.5, 2.0, 2.5, 3.0] {
            let s = SpikedStructure::new(vec![2, 1], vec![alpha + 1.0, alpha], 0.5, 500, None).unwrap();
            let a = rate_bound(&s, 2).unwrap();
            assert!(a < prev);
            prev = a;
        }
    }

    #[test]
    fn spiked_structure_validation() {
        assert!(SpikedStructure::new(vec![1, 1], vec![2.0, 2.5], 0.5, 100, None).is_err());
        assert!(SpikedStructure::new(vec![1], vec![0.9], 0.5, 100, None).is_err());
        assert!(SpikedStructure::new(vec![200], vec![2.0], 0.5, 100, None).is_err());
        let s = SpikedStructure::new(vec![2, 1], vec![3.0, 1.5], 0.5, 100, None).unwrap();
        assert_eq!(s.spike_count(), 3);
        assert_relative_eq!(s.delta().unwrap(), 1.5);
        assert_eq!(s.group_indices(1), 0..2);
        assert_eq!(s.group_indices(2), 2..3);
    }

    #[test]
    fn ratio_heuristic_finds_spike_boundary() {
        let eigenvalues = [250.0, 2.0, 1.8, 1.7, 1.6];
        assert_eq!(eigenvalue_ratio_k(&eigenvalues, 4), Some(1));
        let two = [120.0, 60.0, 1.5, 1.4, 1.3];
        assert_eq!(eigenvalue_ratio_k(&two, 4), Some(2));
    }
}
