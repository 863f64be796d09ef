//! Seeded data generators and the replicated study harness.
//!
//! Two synthetic designs are built in. In the first, predictors and
//! covariates share a one-spike covariance and a single factor drives the
//! response. In the second, factors come from a covariate block with a
//! two-spike block-diagonal covariance and the noise is heavy-tailed. Studies fit each requested method under a
//! predictors-only model (`M1`) and a factor-augmented model (`M2`),
//! alongside an oracle least squares that knows the true support and true
//! factors, and aggregate prediction, estimation, and selection measures
//! over replications.
//!
//! Replications draw from independent substreams of the master seed, so a
//! study is reproducible bit-for-bit regardless of scheduling; test sets
//! are kept as sphered draws and consumed through matrix products.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pca::{eigendecompose, top_factor_basis, CovariateMatrix};
use crate::penalty::PenaltySpec;
use crate::regression::{
    default_grid, default_support_cap, estimate_sigma, fit_path, AugmentedDesign,
    CoefficientEstimate, FitOptions,
};
use crate::rng::{substream, StreamKind};

/// Noise distribution for the error vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorFamily {
    Gaussian,
    /// Scaled Student t with the given degrees of freedom (`df > 2`).
    StudentT { df: u32 },
}

/// Parameters of a synthetic study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleSpec {
    /// 1: factors from the predictors themselves; 2: separate covariate
    /// block, heavy-tailed noise.
    pub example_id: u8,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    /// Number of sample principal components included in the augmented model.
    pub num_factors: usize,
    /// Times the base coefficient block `(0.6, 0, 0, -0.6, 0, 0)` repeats.
    pub v_repeats: usize,
    pub sigma: f64,
    pub error_family: ErrorFamily,
    pub reps: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl ExampleSpec {
    /// One-spike design: covariates share the predictor covariance, noise is
    /// Gaussian, one factor drives the response.
    pub fn example1(seed: u64) -> Self {
        ExampleSpec {
            example_id: 1,
            n: 100,
            p: 1000,
            q: 1000,
            num_factors: 10,
            v_repeats: 3,
            sigma: 0.4,
            error_family: ErrorFamily::Gaussian,
            reps: 200,
            test_size: 10_000,
            seed,
        }
    }

    /// Two-spike covariate block, AR predictors, scaled t(10) noise.
    pub fn example2(seed: u64) -> Self {
        ExampleSpec {
            example_id: 2,
            error_family: ErrorFamily::StudentT { df: 10 },
            ..Self::example1(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.example_id == 1 || self.example_id == 2) {
            return Err(Error::input(format!("example_id must be 1 or 2, got {}", self.example_id)));
        }
        if self.example_id == 1 && self.q != self.p {
            return Err(Error::input(
                "example 1 covariates share the predictor covariance: q must equal p",
            ));
        }
        if self.n < 4 || self.p < 6 * self.v_repeats || self.v_repeats == 0 {
            return Err(Error::input("need n >= 4 and p >= 6 * v_repeats"));
        }
        if self.num_factors == 0 || self.num_factors >= self.n {
            return Err(Error::input("num_factors must satisfy 1 <= K < n"));
        }
        if self.example_id == 2 && (self.num_factors < 2 || self.q < 10) {
            return Err(Error::input("example 2 needs at least 2 factors and q >= 10"));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::input("sigma must be nonnegative"));
        }
        if let ErrorFamily::StudentT { df } = self.error_family {
            if df <= 2 {
                return Err(Error::input("t-noise needs df > 2"));
            }
        }
        if self.test_size == 0 {
            return Err(Error::input("test_size must be positive"));
        }
        Ok(())
    }

    /// True predictor coefficients: the base block repeated, then zeros.
    pub fn beta0(&self) -> DVector<f64> {
        let mut beta = DVector::zeros(self.p);
        for r in 0..self.v_repeats {
            beta[6 * r] = 0.6;
            beta[6 * r + 3] = -0.6;
        }
        beta
    }

    /// True factor coefficients on the raw population-score scale.
    pub fn gamma0(&self) -> DVector<f64> {
        let mut gamma = DVector::zeros(self.num_factors);
        gamma[0] = 0.5;
        if self.example_id == 2 {
            gamma[1] = -0.5;
        }
        gamma
    }

    /// Population error standard deviation (accounts for the t scale).
    pub fn error_sd(&self) -> f64 {
        match self.error_family {
            ErrorFamily::Gaussian => self.sigma,
            ErrorFamily::StudentT { df } => {
                self.sigma * (df as f64 / (df as f64 - 2.0)).sqrt()
            }
        }
    }
}

/// Entry of the autoregressive correlation matrix `(0.5^{|i-j|})`.
fn ar_entry(i: usize, j: usize) -> f64 {
    0.5f64.powi((i as i32 - j as i32).abs())
}

/// Entry of the one-spike mixture: half autoregressive, half
/// `0.5 I + 0.5 * ones`.
fn spiked_entry(i: usize, j: usize) -> f64 {
    0.5 * (ar_entry(i, j) + if i == j { 0.5 } else { 0.0 } + 0.5)
}

/// Population covariances for a spec: the predictor covariance and, when the
/// covariates are a separate block, theirs too.
#[derive(Debug, Clone)]
pub struct CovariancePair {
    pub x: DMatrix<f64>,
    /// `None` when the covariate block shares the predictor covariance.
    pub w: Option<DMatrix<f64>>,
}

/// Builds the population covariance(s) of a spec.
pub fn build_covariance(spec: &ExampleSpec) -> Result<CovariancePair> {
    spec.validate()?;
    match spec.example_id {
        1 => Ok(CovariancePair {
            x: DMatrix::from_fn(spec.p, spec.p, spiked_entry),
            w: None,
        }),
        _ => {
            let x = DMatrix::from_fn(spec.p, spec.p, ar_entry);
            // Block-diagonal covariate covariance: a stronger spike on the
            // first fifth of the coordinates, the one-spike mixture on the
            // rest.
            let b1 = spec.q / 5;
            let mut w = DMatrix::zeros(spec.q, spec.q);
            for i in 0..b1 {
                for j in 0..b1 {
                    w[(i, j)] = 1.5 * spiked_entry(i, j);
                }
            }
            for i in b1..spec.q {
                for j in b1..spec.q {
                    w[(i, j)] = spiked_entry(i - b1, j - b1);
                }
            }
            Ok(CovariancePair { x, w: Some(w) })
        }
    }
}

/// Per-spec population quantities computed once: Cholesky factors for
/// sampling and the leading population eigenvectors of the covariate
/// covariance.
#[derive(Debug, Clone)]
pub struct PopulationModel {
    pub spec: ExampleSpec,
    x_chol: DMatrix<f64>,
    w_chol: Option<DMatrix<f64>>,
    /// `q x K` leading population eigenvectors of the covariate covariance.
    pub factor_directions: DMatrix<f64>,
    /// Matching population eigenvalues, descending.
    pub factor_eigenvalues: Vec<f64>,
    pub beta0: DVector<f64>,
    pub gamma0: DVector<f64>,
}

impl PopulationModel {
    pub fn new(spec: ExampleSpec) -> Result<Self> {
        spec.validate()?;
        let cov = build_covariance(&spec)?;
        let x_chol = Cholesky::new(cov.x.clone())
            .ok_or_else(|| Error::numeric("predictor covariance is not positive definite"))?
            .l();
        let (w_chol, w_cov) = match cov.w {
            Some(w) => {
                let chol = Cholesky::new(w.clone())
                    .ok_or_else(|| Error::numeric("covariate covariance is not positive definite"))?
                    .l();
                (Some(chol), w)
            }
            None => (None, cov.x),
        };
        let eig = eigendecompose(&w_cov)?;
        let k = spec.num_factors;
        let factor_directions = eig.eigenvectors.columns(0, k).into_owned();
        let factor_eigenvalues = eig.eigenvalues[..k].to_vec();
        let beta0 = spec.beta0();
        let gamma0 = spec.gamma0();
        Ok(PopulationModel {
            spec,
            x_chol,
            w_chol,
            factor_directions,
            factor_eigenvalues,
            beta0,
            gamma0,
        })
    }

    fn w_chol(&self) -> &DMatrix<f64> {
        self.w_chol.as_ref().unwrap_or(&self.x_chol)
    }

    fn noise(&self, rng: &mut impl rand::Rng, len: usize) -> DVector<f64> {
        let sigma = self.spec.sigma;
        match self.spec.error_family {
            ErrorFamily::Gaussian => {
                DVector::from_fn(len, |_, _| sigma * sample_normal(rng))
            }
            ErrorFamily::StudentT { df } => {
                DVector::from_fn(len, |_, _| sigma * sample_student_t(rng, df))
            }
        }
    }

    /// Draws one dataset of `n` rows: predictors, covariates, raw population
    /// factor scores, and the response. The covariate block is an
    /// independent draw even when it shares the predictor covariance.
    pub fn generate(&self, rng: &mut impl rand::Rng) -> Dataset {
        let n = self.spec.n;
        let x = sample_with_chol(&self.x_chol, n, rng);
        let w = sample_with_chol(self.w_chol(), n, rng);
        let f_raw = &w * &self.factor_directions;
        let eps = self.noise(rng, n);
        let y = &x * &self.beta0 + &f_raw * &self.gamma0 + eps;
        Dataset { x, w, y, f_raw }
    }

    /// Truth record for a generated dataset, with the population scores
    /// rescaled to a common norm `sqrt(n)` and their raw norms kept for the
    /// back-transform.
    pub fn truth_for(&self, data: &Dataset) -> Result<TruthSet> {
        let n = data.x.nrows() as f64;
        let sqrt_n = n.sqrt();
        let mut f_true = data.f_raw.clone();
        let mut f_raw_norms = Vec::with_capacity(f_true.ncols());
        for i in 0..f_true.ncols() {
            let norm = f_true.column(i).norm();
            if norm == 0.0 || !norm.is_normal() {
                return Err(Error::DegenerateFactor { index: i });
            }
            f_true.column_mut(i).scale_mut(sqrt_n / norm);
            f_raw_norms.push(norm);
        }
        Ok(TruthSet {
            beta0: self.beta0.clone(),
            gamma0: self.gamma0.clone(),
            f_true,
            f_raw_norms,
            sigma: self.spec.sigma,
        })
    }

    /// Draws a test set, stored as sphered draws plus the realized response.
    pub fn generate_test(&self, rng: &mut impl rand::Rng) -> TestData {
        self.generate_test_sized(self.spec.test_size, rng)
    }

    /// Same as [`generate_test`](Self::generate_test) with an explicit size;
    /// also used for the held-out tuning sample.
    pub fn generate_test_sized(&self, m: usize, rng: &mut impl rand::Rng) -> TestData {
        let z_x = standard_normal_matrix(m, self.spec.p, rng);
        let z_w = standard_normal_matrix(m, self.spec.q, rng);
        let eps = self.noise(rng, m);

        let mut y = chol_product(&z_x, &self.x_chol, &self.beta0);
        let raw_scores = chol_products(&z_w, self.w_chol(), &self.factor_directions);
        y += &raw_scores * &self.gamma0;
        y += eps;
        TestData { z_x, z_w, y }
    }
}

/// One generated dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub y: DVector<f64>,
    /// Raw population scores `W U_K` of this sample.
    pub f_raw: DMatrix<f64>,
}

/// The true coefficients and population factors behind a dataset. `f_true`
/// columns carry norm `sqrt(n)`; `gamma0` is on the raw score scale, so the
/// factor contribution to the response is
/// `f_true * (gamma0 .* f_raw_norms / sqrt(n))`.
#[derive(Debug, Clone)]
pub struct TruthSet {
    pub beta0: DVector<f64>,
    pub gamma0: DVector<f64>,
    pub f_true: DMatrix<f64>,
    pub f_raw_norms: Vec<f64>,
    pub sigma: f64,
}

/// A test sample held in sphered form: products against it are computed on
/// demand, which keeps the large-sample evaluation cheap and exact.
#[derive(Debug, Clone)]
pub struct TestData {
    z_x: DMatrix<f64>,
    z_w: DMatrix<f64>,
    y: DVector<f64>,
}

impl TestData {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.len() == 0
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    /// `X_test v`, exploiting sparsity of `v`.
    pub fn x_product(&self, pop: &PopulationModel, v: &DVector<f64>) -> DVector<f64> {
        &self.z_x * sparse_tr_mul(&pop.x_chol, v)
    }

    /// `W_test V` for a dense direction matrix `V`.
    pub fn w_products(&self, pop: &PopulationModel, v: &DMatrix<f64>) -> DMatrix<f64> {
        chol_products_matrix(&self.z_w, pop.w_chol(), v)
    }
}

fn sample_normal(rng: &mut impl rand::Rng) -> f64 {
    rng.sample::<f64, _>(rand_distr::StandardNormal)
}

/// Student t via the explicit normal/chi-square ratio from a single stream,
/// so draws are reproducible across runs and platforms.
fn sample_student_t(rng: &mut impl rand::Rng, df: u32) -> f64 {
    let z = sample_normal(rng);
    let mut chi_sq = 0.0;
    for _ in 0..df {
        let g = sample_normal(rng);
        chi_sq += g * g;
    }
    z / (chi_sq / df as f64).sqrt()
}

fn standard_normal_matrix(n: usize, dim: usize, rng: &mut impl rand::Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, dim, |_, _| sample_normal(rng))
}

/// Rows i.i.d. `N(0, L L^T)` from sphered draws.
fn sample_with_chol(l: &DMatrix<f64>, n: usize, rng: &mut impl rand::Rng) -> DMatrix<f64> {
    let z = standard_normal_matrix(n, l.nrows(), rng);
    z * l.transpose()
}

/// Rows i.i.d. `N(0, Sigma)`; factors `Sigma` on each call.
pub fn sample_mvn(sigma: &DMatrix<f64>, n: usize, rng: &mut impl rand::Rng) -> Result<DMatrix<f64>> {
    if sigma.nrows() != sigma.ncols() {
        return Err(Error::input("covariance must be square"));
    }
    let chol = Cholesky::new(sigma.clone())
        .ok_or_else(|| Error::numeric("covariance is not positive definite"))?;
    Ok(sample_with_chol(&chol.l(), n, rng))
}

/// `(Z L^T) v = Z (L^T v)`, with `L^T v` accumulated over nonzeros of `v`.
fn chol_product(z: &DMatrix<f64>, l: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    z * sparse_tr_mul(l, v)
}

fn sparse_tr_mul(l: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(l.ncols());
    for j in 0..v.len() {
        if v[j] != 0.0 {
            // row j of L contributes v_j * L[j, .] to L^T v
            out.axpy(v[j], &l.row(j).transpose(), 1.0);
        }
    }
    out
}

fn chol_products(z: &DMatrix<f64>, l: &DMatrix<f64>, vs: &DMatrix<f64>) -> DMatrix<f64> {
    z * (l.tr_mul(vs))
}

fn chol_products_matrix(z: &DMatrix<f64>, l: &DMatrix<f64>, vs: &DMatrix<f64>) -> DMatrix<f64> {
    chol_products(z, l, vs)
}

/// Fitting method compared in a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lasso,
    Scad,
    Hard,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Lasso => "lasso",
            Method::Scad => "scad",
            Method::Hard => "hard",
        }
    }

    fn penalty(self, n: usize, p: usize) -> PenaltySpec {
        match self {
            // The support cap is part of the thresholded-regression
            // estimator; the convex and SCAD fits run effectively uncapped.
            Method::Hard => PenaltySpec::hard(0.0).with_support_cap(default_support_cap(n, p)),
            Method::Scad => PenaltySpec::scad(0.0).with_support_cap(2 * n),
            Method::Lasso => PenaltySpec::lasso(0.0).with_support_cap(2 * n),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lasso" => Ok(Method::Lasso),
            "scad" => Ok(Method::Scad),
            "hard" => Ok(Method::Hard),
            other => Err(Error::input(format!("unknown method `{other}`"))),
        }
    }
}

/// Model variant fit in a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Observable predictors only.
    M1,
    /// Predictors augmented with the top-K sample principal component scores.
    M2,
    /// Least squares on the true support with the true factors.
    Oracle,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::M1 => "m1",
            ModelKind::M2 => "m2",
            ModelKind::Oracle => "oracle",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m1" => Ok(ModelKind::M1),
            "m2" => Ok(ModelKind::M2),
            "oracle" => Ok(ModelKind::Oracle),
            other => Err(Error::input(format!("unknown model `{other}`"))),
        }
    }
}

/// Per-fit performance measures. The factor block is absent for the
/// predictors-only model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureRecord {
    pub pe: f64,
    pub beta_l2: f64,
    pub beta_l1: f64,
    pub beta_linf: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_count: f64,
    pub sigma_hat: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_l2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_linf: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fp_gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fn_gamma: Option<f64>,
}

impl MeasureRecord {
    fn named(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![
            ("pe", self.pe),
            ("beta_l2", self.beta_l2),
            ("beta_l1", self.beta_l1),
            ("beta_linf", self.beta_linf),
            ("fp", self.fp),
            ("fn", self.fn_count),
            ("sigma_hat", self.sigma_hat),
        ];
        for (name, v) in [
            ("gamma_l2", self.gamma_l2),
            ("gamma_l1", self.gamma_l1),
            ("gamma_linf", self.gamma_linf),
            ("fp_gamma", self.fp_gamma),
            ("fn_gamma", self.fn_gamma),
        ] {
            if let Some(v) = v {
                out.push((name, v));
            }
        }
        out
    }
}

/// How the factor term enters test predictions.
pub enum FactorConvention<'a> {
    /// No factor term.
    None,
    /// Estimated scores with training directions; `gamma` is on the fit
    /// scale and back-transformed for the factor measures.
    Estimated {
        scores_test: &'a DMatrix<f64>,
        back_scalars: &'a [f64],
    },
    /// True raw population scores; `gamma` is already on the raw scale.
    TrueFactors { raw_scores_test: &'a DMatrix<f64> },
}

/// Fit-side context needed by the measures.
pub struct EvalContext<'a> {
    pub convention: FactorConvention<'a>,
    pub y_train: &'a DVector<f64>,
    pub design_train: &'a AugmentedDesign,
}

fn support_of(v: &DVector<f64>) -> Vec<usize> {
    (0..v.len()).filter(|&i| v[i] != 0.0).collect()
}

fn set_difference(a: &[usize], b: &[usize]) -> usize {
    a.iter().filter(|i| !b.contains(i)).count()
}

/// Prediction error, estimation losses, selection counts, and the residual
/// SD estimate for one fitted estimate.
pub fn evaluate(
    est: &CoefficientEstimate,
    truth: &TruthSet,
    test: &TestData,
    pop: &PopulationModel,
    ctx: &EvalContext<'_>,
) -> Result<MeasureRecord> {
    let m = test.len() as f64;
    let mut fitted = test.x_product(pop, &est.beta);
    match &ctx.convention {
        FactorConvention::None => {}
        FactorConvention::Estimated { scores_test, .. } => {
            fitted += *scores_test * &est.gamma;
        }
        FactorConvention::TrueFactors { raw_scores_test } => {
            fitted += *raw_scores_test * &est.gamma;
        }
    }
    let pe = (test.y() - fitted).norm_squared() / m;

    let beta_diff = &est.beta - &truth.beta0;
    let beta_l2 = beta_diff.norm();
    let beta_l1 = beta_diff.iter().map(|v| v.abs()).sum();
    let beta_linf = beta_diff.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let supp_hat = support_of(&est.beta);
    let supp_true = support_of(&truth.beta0);
    let fp = set_difference(&supp_hat, &supp_true) as f64;
    let fn_count = set_difference(&supp_true, &supp_hat) as f64;
    let sigma_hat = estimate_sigma(ctx.y_train, ctx.design_train, est)?;

    let gamma_raw = match &ctx.convention {
        FactorConvention::None => None,
        FactorConvention::Estimated { back_scalars, .. } => Some(DVector::from_fn(
            est.gamma.len(),
            |i, _| est.gamma[i] * back_scalars[i],
        )),
        FactorConvention::TrueFactors { .. } => Some(est.gamma.clone()),
    };
    let (gamma_l2, gamma_l1, gamma_linf, fp_gamma, fn_gamma) = match gamma_raw {
        Some(g) => {
            if g.len() != truth.gamma0.len() {
                return Err(Error::input("factor coefficient length does not match truth"));
            }
            let diff = &g - &truth.gamma0;
            let supp_g = support_of(&g);
            let supp_g0 = support_of(&truth.gamma0);
            (
                Some(diff.norm()),
                Some(diff.iter().map(|v| v.abs()).sum()),
                Some(diff.iter().fold(0.0_f64, |a, v| a.max(v.abs()))),
                Some(set_difference(&supp_g, &supp_g0) as f64),
                Some(set_difference(&supp_g0, &supp_g) as f64),
            )
        }
        None => (None, None, None, None, None),
    };

    Ok(MeasureRecord {
        pe,
        beta_l2,
        beta_l1,
        beta_linf,
        fp,
        fn_count,
        sigma_hat,
        gamma_l2,
        gamma_l1,
        gamma_linf,
        fp_gamma,
        fn_gamma,
    })
}

/// Study configuration beyond the spec itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyOptions {
    pub methods: Vec<Method>,
    pub models: Vec<ModelKind>,
    pub grid_len: usize,
    pub num_starts: usize,
    /// Rows in the held-out tuning sample; `None` matches the test size,
    /// which keeps the selected lambda stable enough for clean support
    /// recovery.
    pub validation_size: Option<usize>,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            methods: vec![Method::Lasso, Method::Scad, Method::Hard],
            models: vec![ModelKind::M1, ModelKind::M2, ModelKind::Oracle],
            grid_len: 100,
            num_starts: 5,
            validation_size: None,
        }
    }
}

/// One `(replication, method, model)` measure record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub replication: usize,
    pub method: String,
    pub model: String,
    pub measures: MeasureRecord,
}

/// Mean and standard deviation over replications. The parenthesized values
/// reported alongside means are the SD of the replication values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub model: String,
    pub stats: std::collections::BTreeMap<String, MeanSd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureSummary {
    pub rows: Vec<SummaryRow>,
    pub reps_requested: usize,
    pub reps_completed: usize,
    pub failures: Vec<String>,
}

impl MeasureSummary {
    pub fn row(&self, method: &str, model: &str) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.model == model)
    }

    pub fn stat(&self, method: &str, model: &str, measure: &str) -> Option<MeanSd> {
        self.row(method, model)
            .and_then(|r| r.stats.get(measure))
            .copied()
    }
}

/// Full study output: the aggregate summary plus every replication record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyOutput {
    pub summary: MeasureSummary,
    pub records: Vec<RepRecord>,
}

/// Aggregates records into per-(method, model) means and SDs. Rows appear
/// in first-seen record order; recomputing this from stored records
/// reproduces a study summary exactly.
pub fn summarize(records: &[RepRecord], reps_requested: usize, failures: Vec<String>) -> MeasureSummary {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in records {
        let key = (r.method.clone(), r.model.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut rows = Vec::with_capacity(keys.len());
    let mut completed: Vec<usize> = Vec::new();
    for r in records {
        if !completed.contains(&r.replication) {
            completed.push(r.replication);
        }
    }
    for (method, model) in keys {
        let group: Vec<&MeasureRecord> = records
            .iter()
            .filter(|r| r.method == method && r.model == model)
            .map(|r| &r.measures)
            .collect();
        let mut stats = std::collections::BTreeMap::new();
        if let Some(first) = group.first() {
            for (name, _) in first.named() {
                let values: Vec<f64> = group
                    .iter()
                    .filter_map(|rec| rec.named().iter().find(|(n, _)| *n == name).map(|(_, v)| *v))
                    .collect();
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                let sd = if values.len() > 1 {
                    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                        / (values.len() - 1) as f64)
                        .sqrt()
                } else {
                    0.0
                };
                stats.insert(name.to_string(), MeanSd { mean, sd });
            }
        }
        rows.push(SummaryRow { method, model, stats });
    }
    MeasureSummary {
        rows,
        reps_requested,
        reps_completed: completed.len(),
        failures,
    }
}

/// Runs the replicated study: per replication, generate training,
/// validation, and test data, fit every requested method under every
/// requested model, tune on the validation set, and evaluate. Failures are
/// recorded and excluded, never silently dropped.
pub fn run_study(pop: &PopulationModel, options: &StudyOptions) -> Result<StudyOutput> {
    let spec = &pop.spec;
    if spec.reps < 2 {
        return Err(Error::input("a study needs at least 2 replications"));
    }
    if options.methods.is_empty() || options.models.is_empty() {
        return Err(Error::input("study needs at least one method and one model"));
    }

    let results: Vec<std::result::Result<Vec<RepRecord>, String>> = (0..spec.reps)
        .into_par_iter()
        .map(|rep| run_replication(pop, options, rep).map_err(|e| format!("replication {rep}: {e}")))
        .collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for outcome in results {
        match outcome {
            Ok(mut recs) => records.append(&mut recs),
            Err(msg) => failures.push(msg),
        }
    }
    let summary = summarize(&records, spec.reps, failures);
    Ok(StudyOutput { summary, records })
}

/// Picks the path index minimizing held-out MSE computed through lazy
/// products; ties keep the larger lambda, and runs of identical estimates
/// (common along thresholded paths) are evaluated once.
fn tune_against_sample(
    path: &[CoefficientEstimate],
    val: &TestData,
    pop: &PopulationModel,
    factor_scores: Option<&DMatrix<f64>>,
) -> Result<usize> {
    if path.is_empty() {
        return Err(Error::input("cannot tune over an empty path"));
    }
    let m = val.len() as f64;
    let mut best = 0usize;
    let mut best_mse = f64::INFINITY;
    let mut last_mse = f64::INFINITY;
    for (i, est) in path.iter().enumerate() {
        let mse = if i > 0 && est.beta == path[i - 1].beta && est.gamma == path[i - 1].gamma {
            last_mse
        } else {
            let mut fitted = val.x_product(pop, &est.beta);
            if let Some(scores) = factor_scores {
                fitted += scores * &est.gamma;
            }
            (val.y() - fitted).norm_squared() / m
        };
        last_mse = mse;
        if mse < best_mse {
            best_mse = mse;
            best = i;
        }
    }
    Ok(best)
}

fn run_replication(
    pop: &PopulationModel,
    options: &StudyOptions,
    rep: usize,
) -> Result<Vec<RepRecord>> {
    let spec = &pop.spec;
    let seed = spec.seed;
    let mut rng_train = substream(seed, rep as u64, StreamKind::Train);
    let mut rng_val = substream(seed, rep as u64, StreamKind::Validation);
    let mut rng_test = substream(seed, rep as u64, StreamKind::Test);

    let train = pop.generate(&mut rng_train);
    let val_size = options.validation_size.unwrap_or(spec.test_size);
    let val = pop.generate_test_sized(val_size, &mut rng_val);
    let test = pop.generate_test(&mut rng_test);
    let truth = pop.truth_for(&train)?;

    let fit_opts = FitOptions {
        num_starts: options.num_starts,
        starts_seed: seed ^ rep as u64,
        ..FitOptions::default()
    };

    // Shared M2 machinery: sample factor basis from the training covariates.
    // Held-out and test scores both use the training directions and the
    // training back-transform scalars, exactly as prediction does; that
    // keeps the trained factor coefficient scale-consistent across samples,
    // so the sampling fluctuation of the leading training eigenvalue
    // cancels out of the factor term.
    let m2_parts = if options.models.contains(&ModelKind::M2) {
        let w_train = CovariateMatrix::new(train.w.clone())?;
        let basis = top_factor_basis(&w_train, spec.num_factors)?;
        let scores = basis.scores(&w_train)?;
        let design = AugmentedDesign::new(train.x.clone(), &scores)?;
        let project = |raw: DMatrix<f64>| {
            let mut s = raw;
            for (i, &b) in scores.back_scalars.iter().enumerate() {
                s.column_mut(i).scale_mut(b);
            }
            s
        };
        let val_scores = project(val.w_products(pop, &basis.directions));
        let scores_test = project(test.w_products(pop, &basis.directions));
        Some((basis, scores, design, val_scores, scores_test))
    } else {
        None
    };

    let m1_design = if options.models.contains(&ModelKind::M1) {
        Some(AugmentedDesign::without_factors(train.x.clone())?)
    } else {
        None
    };

    let mut records = Vec::new();
    for &model in &options.models {
        match model {
            ModelKind::M1 => {
                let design = m1_design.as_ref().expect("m1 design built");
                for &method in &options.methods {
                    let penalty = method.penalty(spec.n, spec.p);
                    let grid = default_grid(design, &train.y, options.grid_len);
                    let path = fit_path(&train.y, design, &penalty, &grid, &fit_opts)?;
                    let tuned = &path[tune_against_sample(&path, &val, pop, None)?];
                    let ctx = EvalContext {
                        convention: FactorConvention::None,
                        y_train: &train.y,
                        design_train: design,
                    };
                    let measures = evaluate(tuned, &truth, &test, pop, &ctx)?;
                    records.push(RepRecord {
                        replication: rep,
                        method: method.name().to_string(),
                        model: model.name().to_string(),
                        measures,
                    });
                }
            }
            ModelKind::M2 => {
                let (_, scores, design, val_scores, scores_test) =
                    m2_parts.as_ref().expect("m2 parts built");
                for &method in &options.methods {
                    let penalty = method.penalty(spec.n, spec.p);
                    let grid = default_grid(design, &train.y, options.grid_len);
                    let path = fit_path(&train.y, design, &penalty, &grid, &fit_opts)?;
                    let tuned = &path[tune_against_sample(&path, &val, pop, Some(val_scores))?];
                    let ctx = EvalContext {
                        convention: FactorConvention::Estimated {
                            scores_test,
                            back_scalars: &scores.back_scalars,
                        },
                        y_train: &train.y,
                        design_train: design,
                    };
                    let measures = evaluate(tuned, &truth, &test, pop, &ctx)?;
                    records.push(RepRecord {
                        replication: rep,
                        method: method.name().to_string(),
                        model: model.name().to_string(),
                        measures,
                    });
                }
            }
            ModelKind::Oracle => {
                let (est, design) = oracle_fit(pop, &train)?;
                let raw_scores_test = test.w_products(pop, &pop.factor_directions);
                let ctx = EvalContext {
                    convention: FactorConvention::TrueFactors {
                        raw_scores_test: &raw_scores_test,
                    },
                    y_train: &train.y,
                    design_train: &design,
                };
                let measures = evaluate(&est, &truth, &test, pop, &ctx)?;
                records.push(RepRecord {
                    replication: rep,
                    method: "oracle".to_string(),
                    model: model.name().to_string(),
                    measures,
                });
            }
        }
    }
    Ok(records)
}

/// Least squares on the true predictor support and the true (raw-scale)
/// factors; the benchmark every method is compared against.
pub fn oracle_fit(pop: &PopulationModel, train: &Dataset) -> Result<(CoefficientEstimate, AugmentedDesign)> {
    let supp_beta = support_of(&pop.beta0);
    let supp_gamma = support_of(&pop.gamma0);
    let n = train.x.nrows();
    let cols = supp_beta.len() + supp_gamma.len();
    let mut mat = DMatrix::zeros(n, cols);
    for (slot, &j) in supp_beta.iter().enumerate() {
        mat.set_column(slot, &train.x.column(j));
    }
    for (slot, &k) in supp_gamma.iter().enumerate() {
        mat.set_column(supp_beta.len() + slot, &train.f_raw.column(k));
    }
    let solved = mat
        .clone()
        .svd(true, true)
        .solve(&train.y, 1e-12)
        .map_err(Error::numeric)?;

    let p = pop.spec.p;
    let k = pop.spec.num_factors;
    let mut beta = DVector::zeros(p);
    let mut gamma = DVector::zeros(k);
    let mut support = Vec::new();
    for (slot, &j) in supp_beta.iter().enumerate() {
        beta[j] = solved[slot];
        support.push(j);
    }
    for (slot, &kk) in supp_gamma.iter().enumerate() {
        gamma[kk] = solved[supp_beta.len() + slot];
        support.push(p + kk);
    }
    let est = CoefficientEstimate {
        beta,
        gamma,
        support,
        lambda_used: 0.0,
        objective_value: 0.0,
        converged: true,
        sweeps: 0,
    };
    let design = AugmentedDesign::with_projected_factors(train.x.clone(), train.f_raw.clone())?;
    Ok((est, design))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_spec1() -> ExampleSpec {
        let mut spec = ExampleSpec::example1(7);
        spec.n = 40;
        spec.p = 60;
        spec.q = 60;
        spec.num_factors = 4;
        spec.v_repeats = 1;
        spec.reps = 2;
        spec.test_size = 400;
        spec
    }

    #[test]
    fn covariance_entries_match_closed_form() {
        let mut spec = small_spec1();
        spec.p = 30;
        spec.q = 30;
        let cov = build_covariance(&spec).unwrap();
        for i in 0..30 {
            for j in 0..30 {
                let expected = 0.5
                    * (0.5f64.powi((i as i32 - j as i32).abs())
                        + if i == j { 0.5 } else { 0.0 }
                        + 0.5);
                assert!((cov.x[(i, j)] - expected).abs() <= 1e-12);
            }
        }
        // diagonal entries all equal one
        for i in 0..30 {
            assert_relative_eq!(cov.x[(i, i)], 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn example2_covariance_is_block_diagonal() {
        let mut spec = ExampleSpec::example2(7);
        spec.n = 30;
        spec.p = 40;
        spec.q = 40;
        spec.num_factors = 4;
        spec.v_repeats = 1;
        spec.test_size = 100;
        let cov = build_covariance(&spec).unwrap();
        let w = cov.w.unwrap();
        let b1 = 8;
        for i in 0..b1 {
            for j in b1..40 {
                assert_eq!(w[(i, j)], 0.0);
                assert_eq!(w[(j, i)], 0.0);
            }
        }
        assert_relative_eq!(w[(0, 0)], 1.5 * spiked_entry(0, 0), epsilon = 1e-15);
        assert_relative_eq!(w[(b1, b1)], spiked_entry(0, 0), epsilon = 1e-15);
        // predictor covariance is autoregressive
        assert_relative_eq!(cov.x[(0, 1)], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn beta0_nonzero_pattern() {
        let spec = ExampleSpec::example1(1);
        let beta = spec.beta0();
        let nonzero: Vec<usize> = (0..beta.len()).filter(|&i| beta[i] != 0.0).collect();
        assert_eq!(nonzero, vec![0, 3, 6, 9, 12, 15]);
        assert_relative_eq!(beta[0], 0.6);
        assert_relative_eq!(beta[3], -0.6);
        assert_eq!(nonzero.len(), 6);
    }

    #[test]
    fn gamma0_patterns() {
        let g1 = ExampleSpec::example1(1).gamma0();
        assert_eq!(support_of(&g1), vec![0]);
        let g2 = ExampleSpec::example2(1).gamma0();
        assert_eq!(support_of(&g2), vec![0, 1]);
        assert_relative_eq!(g2[1], -0.5);
    }

    #[test]
    fn example2_error_sd() {
        let spec = ExampleSpec::example2(1);
        assert_relative_eq!(spec.error_sd(), 0.4 * (10.0f64 / 8.0).sqrt(), epsilon = 1e-15);
        assert!((spec.error_sd() - 0.45).abs() < 0.003);
    }

    #[test]
    fn mvn_sampling_matches_moments() {
        let mut rng = crate::rng::stream(3);
        let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 4.0, 4.0, 4.0, 4.0]));
        let draws = sample_mvn(&sigma, 10_000, &mut rng).unwrap();
        for j in 0..5 {
            let col = draws.column(j);
            let sd = (col.norm_squared() / 10_000.0).sqrt();
            assert!((sd - 2.0).abs() < 0.1, "column {j} SD {sd}");
        }
        let eye = DMatrix::identity(5, 5);
        let draws = sample_mvn(&eye, 10_000, &mut rng).unwrap();
        let cov = draws.tr_mul(&draws) / 10_000.0;
        for i in 0..5 {
            for j in 0..5 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((cov[(i, j)] - expected).abs() < 0.1);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let sigma = DMatrix::identity(4, 4);
        let mut a = crate::rng::stream(11);
        let mut b = crate::rng::stream(11);
        let da = sample_mvn(&sigma, 20, &mut a).unwrap();
        let db = sample_mvn(&sigma, 20, &mut b).unwrap();
        assert_eq!(da, db);
    }

    #[test]
    fn cholesky_failure_is_reported() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let mut rng = crate::rng::stream(1);
        assert!(matches!(sample_mvn(&bad, 5, &mut rng), Err(Error::Numeric(_))));
    }

    #[test]
    fn noise_free_dataset_is_exact() {
        let mut spec = small_spec1();
        spec.sigma = 0.0;
        let mut pop = PopulationModel::new(spec).unwrap();
        pop.gamma0 = DVector::zeros(pop.spec.num_factors);
        let mut rng = crate::rng::stream(5);
        let data = pop.generate(&mut rng);
        let expected = &data.x * &pop.beta0;
        for i in 0..data.y.len() {
            assert!((data.y[i] - expected[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn truth_columns_have_common_norm() {
        let pop = PopulationModel::new(small_spec1()).unwrap();
        let mut rng = crate::rng::stream(6);
        let data = pop.generate(&mut rng);
        let truth = pop.truth_for(&data).unwrap();
        let sqrt_n = (pop.spec.n as f64).sqrt();
        for i in 0..truth.f_true.ncols() {
            assert!((truth.f_true.column(i).norm() - sqrt_n).abs() <= 1e-8);
            assert!(truth.f_raw_norms[i] > 0.0);
        }
    }

    #[test]
    fn test_products_match_materialized_sample() {
        let mut spec = small_spec1();
        spec.test_size = 50;
        let pop = PopulationModel::new(spec).unwrap();
        let mut rng = crate::rng::stream(8);
        let test = pop.generate_test(&mut rng);

        // reproduce the draws with an identical stream and materialize
        let mut rng2 = crate::rng::stream(8);
        let z = standard_normal_matrix(50, pop.spec.p, &mut rng2);
        let x_test = &z * pop.x_chol.transpose();
        let mut v = DVector::zeros(pop.spec.p);
        v[0] = 1.0;
        v[7] = -2.0;
        let direct = &x_test * &v;
        let lazy = test.x_product(&pop, &v);
        for i in 0..50 {
            assert!((direct[i] - lazy[i]).abs() <= 1e-10);
        }
    }

    #[test]
    fn oracle_evaluation_with_tiny_noise_has_tiny_pe() {
        let mut spec = small_spec1();
        spec.sigma = 1e-6;
        spec.test_size = 300;
        let pop = PopulationModel::new(spec).unwrap();
        let mut rng = crate::rng::stream(9);
        let train = pop.generate(&mut rng);
        let truth = pop.truth_for(&train).unwrap();
        let test = pop.generate_test(&mut rng);
        let (est, design) = oracle_fit(&pop, &train).unwrap();
        let raw_scores_test = test.w_products(&pop, &pop.factor_directions);
        let ctx = EvalContext {
            convention: FactorConvention::TrueFactors {
                raw_scores_test: &raw_scores_test,
            },
            y_train: &train.y,
            design_train: &design,
        };
        let measures = evaluate(&est, &truth, &test, &pop, &ctx).unwrap();
        assert!(measures.pe < 1e-6, "oracle PE {} too large", measures.pe);
        assert_eq!(measures.fp, 0.0);
        assert_eq!(measures.fn_count, 0.0);
        assert!(measures.beta_l2 < 1e-3);
    }

    #[test]
    fn exact_estimate_scores_perfectly() {
        let mut spec = small_spec1();
        spec.sigma = 0.0;
        let pop = PopulationModel::new(spec).unwrap();
        let mut rng = crate::rng::stream(10);
        let train = pop.generate(&mut rng);
        let truth = pop.truth_for(&train).unwrap();
        let test = pop.generate_test(&mut rng);
        let (est, design) = oracle_fit(&pop, &train).unwrap();
        // perturb: add one spurious predictor coefficient
        let mut with_extra = est.clone();
        with_extra.beta[20] = 0.01;
        with_extra.support.push(20);
        let raw_scores_test = test.w_products(&pop, &pop.factor_directions);
        let ctx = EvalContext {
            convention: FactorConvention::TrueFactors {
                raw_scores_test: &raw_scores_test,
            },
            y_train: &train.y,
            design_train: &design,
        };
        let measures = evaluate(&with_extra, &truth, &test, &pop, &ctx).unwrap();
        assert_eq!(measures.fp, 1.0);
        assert_eq!(measures.fn_count, 0.0);
    }

    #[test]
    fn study_is_deterministic_and_aggregation_reproduces() {
        let mut spec = small_spec1();
        spec.reps = 2;
        spec.test_size = 100;
        let pop = PopulationModel::new(spec).unwrap();
        let options = StudyOptions {
            methods: vec![Method::Hard],
            models: vec![ModelKind::M2, ModelKind::Oracle],
            grid_len: 20,
            num_starts: 2,
            validation_size: None,
        };
        let a = run_study(&pop, &options).unwrap();
        let b = run_study(&pop, &options).unwrap();
        assert_eq!(
            serde_json::to_string(&a.summary).unwrap(),
            serde_json::to_string(&b.summary).unwrap()
        );
        let re = summarize(&a.records, pop.spec.reps, a.summary.failures.clone());
        assert_eq!(
            serde_json::to_string(&a.summary).unwrap(),
            serde_json::to_string(&re).unwrap()
        );
        assert_eq!(a.summary.reps_completed, 2);
        let row = a.summary.row("hard", "m2").unwrap();
        assert!(row.stats.contains_key("pe"));
        assert!(row.stats.contains_key("fp_gamma"));
    }

    #[test]
    fn student_t_draws_have_heavier_scale() {
        let mut rng = crate::rng::stream(12);
        let n = 20_000;
        let values: Vec<f64> = (0..n).map(|_| sample_student_t(&mut rng, 10)).collect();
        let var = values.iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!((var - 10.0 / 8.0).abs() < 0.1, "t(10) variance {var}");
    }
}
