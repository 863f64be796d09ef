//! End-to-end fitting: estimate factor scores from the covariate block,
//! augment the design, fit and tune a penalized path, and back-transform
//! factor coefficients for prediction. Also hosts the identifiability
//! diagnostics (robust spark, score-angle bounds, signal-strength
//! thresholds) reported alongside a fit.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::pca::{eigenvalue_ratio_k, top_factor_basis, CovariateMatrix, FactorBasis, ScoreSet};
use crate::penalty::PenaltySpec;
use crate::regression::{
    default_grid, estimate_sigma, fit_path, tune, validation_mse, AugmentedDesign,
    CoefficientEstimate, FitOptions,
};
use crate::rng::{substream, StreamKind};

/// Configuration for a pipeline fit.
#[derive(Debug, Clone)]
pub struct NslConfig {
    /// Number of factor scores appended to the design.
    pub num_factors: usize,
    pub penalty: PenaltySpec,
    /// Center the covariate columns using training-row means.
    pub center_w: bool,
    /// Apply the centered log-ratio transform to the covariate rows
    /// (compositional data; requires strictly positive entries).
    pub clr_w: bool,
    /// Fraction of rows held out for tuning, in (0, 1).
    pub validation_fraction: f64,
    pub seed: u64,
    /// Length of the automatic lambda grid.
    pub grid_len: usize,
    pub fit: FitOptions,
}

impl NslConfig {
    pub fn new(num_factors: usize, penalty: PenaltySpec) -> Self {
        NslConfig {
            num_factors,
            penalty,
            center_w: false,
            clr_w: false,
            validation_fraction: 0.4,
            seed: 12345,
            grid_len: 100,
            fit: FitOptions::default(),
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.num_factors == 0 {
            return Err(Error::input("num_factors must be at least 1"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::input(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        if self.num_factors >= n {
            return Err(Error::input(format!(
                "num_factors must be below the sample count, got K={} with n={n}",
                self.num_factors
            )));
        }
        self.penalty.validate()
    }
}

/// A fitted model: tuned coefficients, the training score set and factor
/// basis, and reporting diagnostics. Factor coefficients are stored on the
/// rescaled-score scale; [`predict`] applies the back-transform.
#[derive(Debug, Clone)]
pub struct NslFit {
    pub estimate: CoefficientEstimate,
    pub scores: ScoreSet,
    pub basis: FactorBasis,
    /// Top-K sample eigenvalues of the training covariate covariance.
    pub eigenvalues: Vec<f64>,
    pub lambda_selected: f64,
    pub sigma_hat: f64,
    pub diagnostics: BTreeMap<String, f64>,
    /// Training-column means subtracted from W, when centering was on.
    pub w_col_means: Option<DVector<f64>>,
    pub clr_w: bool,
}

impl NslFit {
    /// Factor coefficients on the raw score scale (`gamma` times the
    /// back-transform scalars).
    pub fn gamma_raw_scale(&self) -> DVector<f64> {
        DVector::from_fn(self.estimate.gamma.len(), |i, _| {
            self.estimate.gamma[i] * self.scores.back_scalars[i]
        })
    }
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

fn select_entries(v: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    DVector::from_fn(rows.len(), |i, _| v[rows[i]])
}

/// Fits the full pipeline: transform W, split rows, estimate the factor
/// basis on the training split, fit a penalized path on the augmented
/// training design, and tune on the held-out split. The tuned estimate is
/// returned with its training-basis scores, so predictions on new data use
/// the training directions and back-transform scalars throughout.
pub fn fit(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    w: &DMatrix<f64>,
    config: &NslConfig,
) -> Result<NslFit> {
    let n = y.len();
    if x.nrows() != n || w.nrows() != n {
        return Err(Error::input(format!(
            "row mismatch: y has {n}, X has {}, W has {}",
            x.nrows(),
            w.nrows()
        )));
    }
    config.validate(n)?;

    let w_full = if config.clr_w { clr_transform(w)? } else { w.clone() };

    // Deterministic seeded split.
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = substream(config.seed, 0, StreamKind::Aux);
    order.shuffle(&mut rng);
    let n_val = ((n as f64) * config.validation_fraction).round() as usize;
    let n_val = n_val.clamp(1, n - 2);
    let (val_rows, train_rows) = order.split_at(n_val);
    let mut train_rows = train_rows.to_vec();
    let mut val_rows = val_rows.to_vec();
    train_rows.sort_unstable();
    val_rows.sort_unstable();

    if config.num_factors >= train_rows.len() {
        return Err(Error::input(format!(
            "num_factors {} must be below the training row count {}",
            config.num_factors,
            train_rows.len()
        )));
    }

    let mut w_train = select_rows(&w_full, &train_rows);
    let mut w_val = select_rows(&w_full, &val_rows);
    let w_col_means = if config.center_w {
        let means = DVector::from_fn(w_train.ncols(), |j, _| w_train.column(j).mean());
        for j in 0..w_train.ncols() {
            w_train.column_mut(j).add_scalar_mut(-means[j]);
            w_val.column_mut(j).add_scalar_mut(-means[j]);
        }
        Some(means)
    } else {
        None
    };

    let x_train = select_rows(x, &train_rows);
    let x_val = select_rows(x, &val_rows);
    let y_train = select_entries(y, &train_rows);
    let y_val = select_entries(y, &val_rows);

    let w_train_cov = CovariateMatrix::new(w_train)?;
    let basis = top_factor_basis(&w_train_cov, config.num_factors)?;
    let scores = basis.scores(&w_train_cov)?;

    let design_train = AugmentedDesign::new(x_train, &scores)?;
    let grid = default_grid(&design_train, &y_train, config.grid_len);
    let mut opts = config.fit.clone();
    opts.starts_seed = config.seed;
    let path = fit_path(&y_train, &design_train, &config.penalty, &grid, &opts)?;

    // Validation scores use the training directions and back-transform
    // scalars, exactly as prediction does; this keeps the trained factor
    // coefficients scale-consistent on the held-out rows.
    let scores_val = project_scores(&w_val, &basis, &scores.back_scalars);
    let design_val = AugmentedDesign::with_projected_factors(x_val, scores_val)?;
    let tuned = tune(&path, &y_val, &design_val)?.clone();
    let val_mse = validation_mse(&tuned, &y_val, &design_val)?;
    let sigma_hat = estimate_sigma(&y_train, &design_train, &tuned)?;

    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("validation_mse".to_string(), val_mse);
    diagnostics.insert(
        "path_nonconverged".to_string(),
        path.iter().filter(|e| !e.converged).count() as f64,
    );
    diagnostics.insert(
        "dropped_predictors".to_string(),
        design_train.dropped_columns().len() as f64,
    );
    if let Some(k_hat) = eigenvalue_ratio_k(&basis.eigenvalues, config.num_factors) {
        diagnostics.insert("eigenvalue_ratio_k".to_string(), k_hat as f64);
    }

    Ok(NslFit {
        lambda_selected: tuned.lambda_used,
        estimate: tuned,
        eigenvalues: basis.eigenvalues.clone(),
        scores,
        basis,
        sigma_hat,
        diagnostics,
        w_col_means,
        clr_w: config.clr_w,
    })
}

/// New-data scores in a training basis: `W_new U_K` with each column scaled
/// by the training back-transform scalar.
pub fn project_scores(
    w_new: &DMatrix<f64>,
    basis: &FactorBasis,
    back_scalars: &[f64],
) -> DMatrix<f64> {
    let mut scores = w_new * &basis.directions;
    for (i, &s) in back_scalars.iter().enumerate() {
        scores.column_mut(i).scale_mut(s);
    }
    scores
}

/// Scores of `w` in a training basis with each column rescaled to this
/// sample's common norm `sqrt(n)` — the scale convention shared by fitting
/// and tuning designs.
pub fn renormalized_scores(w: &DMatrix<f64>, directions: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut scores = w * directions;
    let sqrt_n = (w.nrows() as f64).sqrt();
    for i in 0..scores.ncols() {
        let norm = scores.column(i).norm();
        if norm == 0.0 || !norm.is_normal() {
            return Err(Error::DegenerateFactor { index: i });
        }
        scores.column_mut(i).scale_mut(sqrt_n / norm);
    }
    Ok(scores)
}

/// Predictions on new data: `X_new beta + (W_new U_K)(back_scalars . gamma)`
/// with the training directions and scalars.
pub fn predict(fit: &NslFit, x_new: &DMatrix<f64>, w_new: &DMatrix<f64>) -> Result<DVector<f64>> {
    if x_new.nrows() != w_new.nrows() {
        return Err(Error::input("X_new and W_new row counts differ"));
    }
    if x_new.ncols() != fit.estimate.beta.len() {
        return Err(Error::input(format!(
            "X_new has {} columns, fit expects {}",
            x_new.ncols(),
            fit.estimate.beta.len()
        )));
    }
    if w_new.ncols() != fit.basis.directions.nrows() {
        return Err(Error::input(format!(
            "W_new has {} columns, fit expects {}",
            w_new.ncols(),
            fit.basis.directions.nrows()
        )));
    }
    let mut w_new = if fit.clr_w { clr_transform(w_new)? } else { w_new.clone() };
    if let Some(means) = &fit.w_col_means {
        for j in 0..w_new.ncols() {
            w_new.column_mut(j).add_scalar_mut(-means[j]);
        }
    }
    let scores = project_scores(&w_new, &fit.basis, &fit.scores.back_scalars);
    Ok(x_new * &fit.estimate.beta + scores * &fit.estimate.gamma)
}

/// Centered log-ratio transform: row-wise `log w_ij - mean_j log w_ij`.
/// Every output row sums to zero; the input must be strictly positive
/// (replace zeros with a pseudocount upstream, e.g. 0.5 on counts).
pub fn clr_transform(values: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if values.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::input(
            "centered log-ratio requires strictly positive, finite entries",
        ));
    }
    let q = values.ncols();
    let mut out = values.map(f64::ln);
    for mut row in out.row_iter_mut() {
        let mean = row.iter().sum::<f64>() / q as f64;
        row.add_scalar_mut(-mean);
    }
    Ok(out)
}

/// Result of the robust-spark search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum SparkBound {
    /// Smallest submatrix size whose minimum singular value drops below the
    /// bound.
    Exact(usize),
    /// No such submatrix up to the searched cap.
    AtLeast(usize),
}

impl std::fmt::Display for SparkBound {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SparkBound::Exact(tau) => write!(f, "{tau}"),
            SparkBound::AtLeast(cap) => write!(f, ">= {cap}"),
        }
    }
}

const SPARK_SUBSET_BUDGET: u128 = 20_000_000;

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i + 1) as u128;
    }
    acc
}

/// Smallest number of columns of the rescaled design whose
/// `n^{-1/2}`-scaled submatrix has a singular value below `c`, searched
/// exhaustively over subset sizes `1..=cap`.
pub fn robust_spark(design: &DMatrix<f64>, c: f64, cap: usize) -> Result<SparkBound> {
    if !(c > 0.0 && c < 1.0) {
        return Err(Error::input(format!("bound c must lie in (0, 1), got {c}")));
    }
    if cap == 0 || cap > 14 {
        return Err(Error::refused(format!("cap must lie in 1..=14, got {cap}")));
    }
    let n = design.nrows();
    let q = design.ncols();
    if n < 2 || q == 0 {
        return Err(Error::input("design must have at least 2 rows and 1 column"));
    }
    let sqrt_n = (n as f64).sqrt();
    let mut rescaled = design.clone();
    for j in 0..q {
        let norm = rescaled.column(j).norm();
        if norm == 0.0 || !norm.is_normal() {
            return Err(Error::input(format!(
                "column {j} has zero norm and cannot be rescaled"
            )));
        }
        rescaled.column_mut(j).scale_mut(sqrt_n / norm);
    }
    let mut budget: u128 = 0;
    for tau in 1..=cap.min(q) {
        budget = budget.saturating_add(binomial(q, tau));
    }
    if budget > SPARK_SUBSET_BUDGET {
        return Err(Error::refused(format!(
            "search would enumerate {budget} subsets; reduce cap or columns"
        )));
    }

    // Gram matrix of the n^{-1/2}-scaled columns: unit diagonal.
    let mut gram = rescaled.tr_mul(&rescaled);
    gram /= n as f64;

    let c_sq = c * c;
    for tau in 1..=cap.min(q) {
        let mut subset: Vec<usize> = (0..tau).collect();
        loop {
            let sub = DMatrix::from_fn(tau, tau, |i, j| gram[(subset[i], subset[j])]);
            let min_eig = sub
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            if min_eig.max(0.0) < c_sq {
                return Ok(SparkBound::Exact(tau));
            }
            // advance to the next lexicographic combination
            let mut i = tau;
            let mut advanced = false;
            while i > 0 {
                i -= 1;
                if subset[i] + 1 <= q - (tau - i) {
                    subset[i] += 1;
                    for j in (i + 1)..tau {
                        subset[j] = subset[j - 1] + 1;
                    }
                    advanced = true;
                    break;
                }
            }
            if !advanced {
                break;
            }
        }
    }
    Ok(SparkBound::AtLeast(cap))
}

/// Inputs for the theory diagnostics. All quantities refer to the fitted
/// problem: `n` rows, `p` predictors, `K` factors, box bound `t_box`,
/// restricted singular-value bound `c`, noise constant `c2`, combined true
/// support size `s`, minimum signal `b0`, and column-scale bound `l_bound`.
#[derive(Debug, Clone)]
pub struct DiagnosticsInput<'a> {
    /// Estimated score vectors, one column per factor.
    pub estimated_scores: &'a DMatrix<f64>,
    /// Population score vectors (synthetic data only).
    pub true_scores: Option<&'a DMatrix<f64>>,
    pub p: usize,
    pub c: f64,
    pub c2: f64,
    pub t_box: f64,
    pub s: usize,
    pub b0: f64,
    pub l_bound: f64,
}

/// Computable surrogates for the identifiability and signal-strength
/// requirements: per-factor score-angle cosines against their admissible
/// bound, the restricted singular-value constant after factor estimation
/// error, the minimum-signal threshold, and the admissible lambda window.
/// Reported values only; nothing here gates a fit.
pub fn condition_diagnostics(input: &DiagnosticsInput<'_>) -> Result<BTreeMap<String, f64>> {
    let truth = input.true_scores.ok_or_else(|| {
        Error::refused("diagnostics compare against population factors; synthetic data only")
    })?;
    let est = input.estimated_scores;
    if truth.nrows() != est.nrows() || truth.ncols() != est.ncols() {
        return Err(Error::input("estimated and true score dimensions differ"));
    }
    let n = est.nrows();
    let k = est.ncols();
    if n < 2 || k == 0 {
        return Err(Error::input("need n >= 2 rows and at least one factor"));
    }
    if !(input.c > 0.0 && input.c < 1.0) {
        return Err(Error::input("c must lie in (0, 1)"));
    }
    if input.c2 <= 0.0 || input.t_box <= 0.0 || input.b0 <= 0.0 || input.l_bound <= 0.0 {
        return Err(Error::input("c2, T, b0, and L must be positive"));
    }
    if input.p < 2 {
        return Err(Error::input("p must be at least 2"));
    }

    let nf = n as f64;
    let kf = k as f64;
    let pf = input.p as f64;
    let sf = input.s as f64;

    let mut out = BTreeMap::new();
    let angle_bound = 1.0 - input.c2.powi(2) * nf.ln() / (8.0 * kf * kf * input.t_box.powi(2) * nf);
    out.insert("score_angle_cos_bound".to_string(), angle_bound);
    for j in 0..k {
        let a = est.column(j);
        let b = truth.column(j);
        let (na, nb) = (a.norm(), b.norm());
        if na == 0.0 || nb == 0.0 {
            return Err(Error::DegenerateFactor { index: j });
        }
        let cos = (a.dot(&b) / (na * nb)).abs().clamp(0.0, 1.0);
        out.insert(format!("score_angle_cos_{}", j + 1), cos);
    }

    let c1 = input.c - input.c2 / (2.0 * input.t_box) * (nf.ln() / (nf * kf)).sqrt();
    out.insert("restricted_singular_surrogate".to_string(), c1);

    let (threshold, lambda_lo, lambda_hi) = if c1 > 0.0 {
        let base = input.c2 / c1 * ((2.0 * sf + 1.0) * pf.ln() / nf).sqrt();
        let threshold = (2f64.sqrt() / c1).max(1.0) * input.l_bound * base;
        let hi = input.b0 / input.l_bound * (c1 / 2f64.sqrt()).min(1.0);
        (threshold, base, hi)
    } else {
        (f64::INFINITY, f64::INFINITY, 0.0)
    };
    out.insert("min_signal_threshold".to_string(), threshold);
    out.insert("min_signal_b0".to_string(), input.b0);
    out.insert(
        "min_signal_satisfied".to_string(),
        if input.b0 > threshold { 1.0 } else { 0.0 },
    );
    out.insert("lambda_window_low".to_string(), lambda_lo);
    out.insert("lambda_window_high".to_string(), lambda_hi);
    Ok(out)
}
