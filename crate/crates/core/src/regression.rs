//! Penalized least squares on a factor-augmented design.
//!
//! The objective is
//! `(2n)^{-1} ||y - X beta - F gamma||_2^2 + sum_j p_lambda(|beta*_j|) + sum_k p_lambda(|gamma_k|)`
//! where `beta*_j = beta_j ||x_j||_2 / sqrt(n)` puts every predictor on a
//! common column scale and the factor columns already carry norm `sqrt(n)`.
//! The solver is cyclic coordinate descent with warm starts along a
//! decreasing lambda path; nonconvex families additionally restart from a
//! zero start, the lasso solution, and seeded random supports, keeping the
//! best objective. Estimates respect a cap on the joint support size and a
//! sup-norm box on the factor coefficients.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::pca::ScoreSet;
use crate::penalty::{PenaltyFamily, PenaltySpec};
use crate::rng::{substream, StreamKind};

/// Predictors joined with estimated factor scores.
#[derive(Debug, Clone)]
pub struct AugmentedDesign {
    x: DMatrix<f64>,
    scores: DMatrix<f64>,
    /// `||x_j||_2 / sqrt(n)` per predictor; zero marks a dropped column.
    col_norms: Vec<f64>,
    dropped: Vec<usize>,
    /// Columns rescaled to norm `sqrt(n)`: retained predictors then factors.
    standardized: DMatrix<f64>,
    /// Original predictor index of each standardized predictor column.
    active: Vec<usize>,
}

impl AugmentedDesign {
    /// Joins `x` with the factor scores of a fitted basis.
    pub fn new(x: DMatrix<f64>, scores: &ScoreSet) -> Result<Self> {
        if x.nrows() != scores.n() {
            return Err(Error::input(format!(
                "predictor rows {} do not match score rows {}",
                x.nrows(),
                scores.n()
            )));
        }
        let sqrt_n = (x.nrows() as f64).sqrt();
        for i in 0..scores.k() {
            let norm = scores.scores.column(i).norm();
            if (norm - sqrt_n).abs() > 1e-8 {
                return Err(Error::input(format!(
                    "factor column {i} has norm {norm}, expected sqrt(n) = {sqrt_n}"
                )));
            }
        }
        Self::build(x, scores.scores.clone())
    }

    /// Design with no factor columns.
    pub fn without_factors(x: DMatrix<f64>) -> Result<Self> {
        let n = x.nrows();
        Self::build(x, DMatrix::zeros(n, 0))
    }

    /// Design whose factor columns were projected into a training basis
    /// (back-transform scale, no norm requirement). Suitable for prediction
    /// and tuning; fitting expects columns of norm `sqrt(n)`.
    pub fn with_projected_factors(x: DMatrix<f64>, factor_columns: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != factor_columns.nrows() {
            return Err(Error::input(format!(
                "predictor rows {} do not match factor rows {}",
                x.nrows(),
                factor_columns.nrows()
            )));
        }
        Self::build(x, factor_columns)
    }

    fn build(x: DMatrix<f64>, scores: DMatrix<f64>) -> Result<Self> {
        let n = x.nrows();
        if n < 2 {
            return Err(Error::input("design needs at least two rows"));
        }
        if x.iter().any(|v| !v.is_finite()) || scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("design contains a non-finite entry"));
        }
        let p = x.ncols();
        let k = scores.ncols();
        let sqrt_n = (n as f64).sqrt();
        let mut col_norms = Vec::with_capacity(p);
        let mut dropped = Vec::new();
        let mut active = Vec::new();
        for j in 0..p {
            let norm = x.column(j).norm() / sqrt_n;
            if norm == 0.0 || !norm.is_normal() {
                col_norms.push(0.0);
                dropped.push(j);
            } else {
                col_norms.push(norm);
                active.push(j);
            }
        }
        let mut standardized = DMatrix::zeros(n, active.len() + k);
        for (slot, &j) in active.iter().enumerate() {
            let scale = 1.0 / col_norms[j];
            standardized.set_column(slot, &(x.column(j) * scale));
        }
        for i in 0..k {
            standardized.set_column(active.len() + i, &scores.column(i));
        }
        Ok(AugmentedDesign {
            x,
            scores,
            col_norms,
            dropped,
            standardized,
            active,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn k(&self) -> usize {
        self.scores.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn scores(&self) -> &DMatrix<f64> {
        &self.scores
    }

    pub fn col_norms(&self) -> &[f64] {
        &self.col_norms
    }

    /// Predictor columns with zero norm, excluded from fitting.
    pub fn dropped_columns(&self) -> &[usize] {
        &self.dropped
    }

    fn num_std_cols(&self) -> usize {
        self.standardized.ncols()
    }

    /// Fitted values `X beta + F gamma` for an estimate.
    pub fn predict(&self, beta: &DVector<f64>, gamma: &DVector<f64>) -> Result<DVector<f64>> {
        if beta.len() != self.p() || gamma.len() != self.k() {
            return Err(Error::input("coefficient length does not match design"));
        }
        let mut out = &self.x * beta;
        if self.k() > 0 {
            out += &self.scores * gamma;
        }
        Ok(out)
    }
}

/// Fitted coefficients in original predictor scale plus the factor block.
///
/// `support` indexes the combined vector: `0..p` for predictors, `p..p+K`
/// for factors. `gamma` is on the fit scale (factor columns of norm
/// `sqrt(n)`); multiply by the score set's back-transform scalars for
/// prediction on raw scores.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientEstimate {
    pub beta: DVector<f64>,
    pub gamma: DVector<f64>,
    pub support: Vec<usize>,
    pub lambda_used: f64,
    pub objective_value: f64,
    pub converged: bool,
    pub sweeps: usize,
}

impl CoefficientEstimate {
    pub fn zero(p: usize, k: usize, lambda: f64) -> Self {
        CoefficientEstimate {
            beta: DVector::zeros(p),
            gamma: DVector::zeros(k),
            support: Vec::new(),
            lambda_used: lambda,
            objective_value: 0.0,
            converged: true,
            sweeps: 0,
        }
    }

    pub fn support_size(&self) -> usize {
        self.support.len()
    }

    /// Indices of selected predictors (subset of `0..p`).
    pub fn beta_support(&self, p: usize) -> Vec<usize> {
        self.support.iter().copied().filter(|&j| j < p).collect()
    }

    /// Indices of selected factors (subset of `0..K`).
    pub fn gamma_support(&self, p: usize) -> Vec<usize> {
        self.support
            .iter()
            .filter_map(|&j| if j >= p { Some(j - p) } else { None })
            .collect()
    }
}

/// Solver configuration.
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Stop when no coefficient moves more than this (standardized scale).
    pub convergence_tol: f64,
    /// Hard cap on coordinate-descent sweeps per solve.
    pub max_sweeps: usize,
    /// Extra starts for nonconvex penalties: zero, lasso solution, and
    /// `num_starts - 2` random supports. The warm start always runs.
    pub num_starts: usize,
    /// Seed for the random-support starts.
    pub starts_seed: u64,
    /// Pin every factor coefficient at zero (diagnostic: the fit must then
    /// match the factor-free design exactly).
    pub freeze_gamma: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            convergence_tol: 1e-7,
            max_sweeps: 1000,
            num_starts: 5,
            starts_seed: 0,
            freeze_gamma: false,
        }
    }
}

/// Default support cap `M = 2 n / log p`, floored at 4.
pub fn default_support_cap(n: usize, p: usize) -> usize {
    let denom = (p.max(2) as f64).ln();
    ((2.0 * n as f64 / denom).floor() as usize).max(4)
}

/// Largest support size strictly below `M / 2`.
fn cap_allowed(m: usize) -> usize {
    if m % 2 == 0 {
        (m / 2).saturating_sub(1)
    } else {
        m / 2
    }
}

/// Penalized residual sum of squares for stored coefficients.
pub fn objective(
    y: &DVector<f64>,
    design: &AugmentedDesign,
    est: &CoefficientEstimate,
    spec: &PenaltySpec,
) -> Result<f64> {
    if y.len() != design.n() {
        return Err(Error::input("response length does not match design rows"));
    }
    let fitted = design.predict(&est.beta, &est.gamma)?;
    let rss = (y - fitted).norm_squared();
    let mut penalty = 0.0;
    for j in 0..design.p() {
        let scaled = est.beta[j] * design.col_norms()[j];
        penalty += spec.penalty_value(scaled.abs())?;
    }
    for k in 0..design.k() {
        penalty += spec.penalty_value(est.gamma[k].abs())?;
    }
    Ok(rss / (2.0 * design.n() as f64) + penalty)
}

/// `max_j |n^{-1} d_j^T y|` over standardized columns; the smallest lambda
/// whose lasso solution is identically zero.
pub fn lambda_max(design: &AugmentedDesign, y: &DVector<f64>) -> f64 {
    let n = design.n() as f64;
    (0..design.num_std_cols())
        .map(|j| (design.standardized.column(j).dot(y) / n).abs())
        .fold(0.0_f64, f64::max)
}

/// Log-spaced grid of `len` values from `lambda_max` down to
/// `1e-3 * lambda_max`.
pub fn default_grid(design: &AugmentedDesign, y: &DVector<f64>, len: usize) -> Vec<f64> {
    let top = lambda_max(design, y).max(f64::MIN_POSITIVE);
    let lo = top * 1e-3;
    if len <= 1 {
        return vec![top];
    }
    let step = (lo / top).powf(1.0 / (len - 1) as f64);
    let mut grid = Vec::with_capacity(len);
    let mut value = top;
    for _ in 0..len {
        grid.push(value);
        value *= step;
    }
    grid
}

/// State for one coordinate-descent solve on the standardized design.
struct CdState<'a> {
    design: &'a AugmentedDesign,
    /// Standardized coefficients, predictors then factors.
    b: DVector<f64>,
    residual: DVector<f64>,
    /// First factor slot in `b`.
    factor_offset: usize,
}

impl<'a> CdState<'a> {
    fn new(design: &'a AugmentedDesign, y: &'a DVector<f64>, init: Option<&DVector<f64>>) -> Self {
        let cols = design.num_std_cols();
        let b = match init {
            Some(v) => v.clone(),
            None => DVector::zeros(cols),
        };
        let mut residual = y.clone();
        for j in 0..cols {
            if b[j] != 0.0 {
                residual.axpy(-b[j], &design.standardized.column(j), 1.0);
            }
        }
        CdState {
            design,
            b,
            residual,
            factor_offset: design.active.len(),
        }
    }

    fn is_factor(&self, slot: usize) -> bool {
        slot >= self.factor_offset
    }

    /// One pass over `slots`; returns (max coefficient change, clamped?).
    fn sweep(&mut self, slots: &[usize], spec: &PenaltySpec, restrict: Option<&[bool]>) -> (f64, bool) {
        let n = self.design.n() as f64;
        let mut max_change = 0.0_f64;
        let mut clamped = false;
        for &j in slots {
            if let Some(mask) = restrict {
                if !mask[j] {
                    continue;
                }
            }
            let col = self.design.standardized.column(j);
            let z = self.b[j] + col.dot(&self.residual) / n;
            let mut updated = spec.threshold_update(z);
            if self.is_factor(j) && updated.abs() > spec.gamma_box_t {
                updated = updated.signum() * spec.gamma_box_t;
                clamped = true;
            }
            let delta = updated - self.b[j];
            if delta != 0.0 {
                self.residual.axpy(-delta, &col, 1.0);
                self.b[j] = updated;
                max_change = max_change.max(delta.abs());
            }
        }
        (max_change, clamped)
    }

    /// Smallest |z| at which a zero coordinate turns on.
    fn entry_threshold(spec: &PenaltySpec) -> f64 {
        match spec.family {
            PenaltyFamily::ElasticNet => spec.lambda * spec.enet_mix,
            _ => spec.lambda,
        }
    }

    /// One screened pass: a single matrix-vector product locates the
    /// coordinates that could move (nonzero ones plus near-threshold
    /// crossers), which are then updated with fresh residual dots. The
    /// exact stationarity check afterwards catches anything the margin
    /// missed.
    fn screened_sweep(
        &mut self,
        slots: &[usize],
        spec: &PenaltySpec,
        restrict: Option<&[bool]>,
        screened: &mut Vec<usize>,
    ) -> (f64, bool) {
        let n = self.design.n() as f64;
        let corr = self.design.standardized.tr_mul(&self.residual) / n;
        let margin = 0.7 * Self::entry_threshold(spec);
        screened.clear();
        for &j in slots {
            if let Some(mask) = restrict {
                if !mask[j] {
                    continue;
                }
            }
            if self.b[j] != 0.0 || (self.b[j] + corr[j]).abs() > margin {
                screened.push(j);
            }
        }
        self.sweep(screened, spec, restrict)
    }

    /// Largest single-coordinate improvement available (optimality check),
    /// from one consistent residual snapshot.
    fn max_update_gap(&self, spec: &PenaltySpec, restrict: Option<&[bool]>) -> f64 {
        let n = self.design.n() as f64;
        let corr = self.design.standardized.tr_mul(&self.residual) / n;
        let mut worst = 0.0_f64;
        for j in 0..self.b.len() {
            if let Some(mask) = restrict {
                if !mask[j] {
                    continue;
                }
            }
            let z = self.b[j] + corr[j];
            let mut updated = spec.threshold_update(z);
            if self.is_factor(j) && updated.abs() > spec.gamma_box_t {
                updated = updated.signum() * spec.gamma_box_t;
            }
            worst = worst.max((updated - self.b[j]).abs());
        }
        worst
    }

    fn objective(&self, spec: &PenaltySpec) -> f64 {
        let n = self.design.n() as f64;
        let mut value = self.residual.norm_squared() / (2.0 * n);
        for j in 0..self.b.len() {
            if self.b[j] != 0.0 {
                value += spec
                    .penalty_value(self.b[j].abs())
                    .expect("nonnegative argument");
            }
        }
        value
    }

    fn active_slots(&self) -> Vec<usize> {
        (0..self.b.len()).filter(|&j| self.b[j] != 0.0).collect()
    }
}

struct CdOutcome {
    b: DVector<f64>,
    converged: bool,
    sweeps: usize,
    objective: f64,
    sweep_objectives: Vec<f64>,
}

/// Cyclic CD at fixed lambda: full sweeps to find the active set, inner
/// sweeps over it, then a full verification pass. If the support cap binds,
/// the largest-magnitude coefficients are kept and refit on that support.
fn cd_solve(
    design: &AugmentedDesign,
    y: &DVector<f64>,
    spec: &PenaltySpec,
    init: Option<&DVector<f64>>,
    allowed_support: usize,
    opts: &FitOptions,
) -> CdOutcome {
    let mut state = CdState::new(design, y, init);
    let all_slots: Vec<usize> = if opts.freeze_gamma {
        (0..state.factor_offset).collect()
    } else {
        (0..state.b.len()).collect()
    };
    let base_mask: Option<Vec<bool>> = if opts.freeze_gamma {
        let mut mask = vec![true; state.b.len()];
        for slot in mask.iter_mut().skip(state.factor_offset) {
            *slot = false;
        }
        Some(mask)
    } else {
        None
    };
    let mut sweeps = 0usize;
    let mut sweep_objectives = Vec::new();
    let mut converged = run_until_stable(
        &mut state,
        spec,
        &all_slots,
        base_mask.as_deref(),
        opts,
        &mut sweeps,
        &mut sweep_objectives,
    );

    let support = state.active_slots();
    if support.len() > allowed_support {
        // Keep the largest standardized magnitudes and refit on that support.
        let mut ranked = support;
        ranked.sort_by(|&a, &b| {
            state.b[b]
                .abs()
                .partial_cmp(&state.b[a].abs())
                .expect("finite coefficients")
                .then(a.cmp(&b))
        });
        let mut mask = vec![false; state.b.len()];
        for &j in ranked.iter().take(allowed_support) {
            mask[j] = true;
        }
        for j in 0..state.b.len() {
            if !mask[j] && state.b[j] != 0.0 {
                let old = state.b[j];
                state
                    .residual
                    .axpy(old, &design.standardized.column(j), 1.0);
                state.b[j] = 0.0;
            }
        }
        sweep_objectives.clear();
        let kept: Vec<usize> = (0..state.b.len()).filter(|&j| mask[j]).collect();
        converged = run_until_stable(
            &mut state,
            spec,
            &kept,
            Some(&mask),
            opts,
            &mut sweeps,
            &mut sweep_objectives,
        );
    }

    let objective = state.objective(spec);
    CdOutcome {
        b: state.b,
        converged,
        sweeps,
        objective,
        sweep_objectives,
    }
}

/// Screened full passes locate violators; between them the active set is
/// polished with cheap restricted sweeps. `max_sweeps` bounds the total
/// work in full-pass equivalents. Near-interpolating solves where the
/// coefficient changes stop contracting (a crawl, typical of saturated
/// supports at tiny lambda) are cut off and flagged unconverged rather
/// than ground to the work cap.
fn run_until_stable(
    state: &mut CdState<'_>,
    spec: &PenaltySpec,
    slots: &[usize],
    restrict: Option<&[bool]>,
    opts: &FitOptions,
    sweeps: &mut usize,
    sweep_objectives: &mut Vec<f64>,
) -> bool {
    const CRAWL_RATIO: f64 = 0.97;
    const CRAWL_LIMIT: usize = 6;
    let full_cost = slots.len().max(1);
    let mut work: usize = 0;
    let work_budget = opts.max_sweeps.saturating_mul(full_cost);
    let mut prev_objective = f64::INFINITY;
    let mut prev_change = f64::INFINITY;
    let mut crawl_count = 0usize;
    let mut screened: Vec<usize> = Vec::new();
    sweep_objectives.push(state.objective(spec));

    while *sweeps < opts.max_sweeps && work < work_budget {
        let (change, clamped) = state.screened_sweep(slots, spec, restrict, &mut screened);
        *sweeps += 1;
        work += full_cost;
        let obj = state.objective(spec);
        sweep_objectives.push(obj);
        if !clamped {
            debug_assert!(
                obj <= prev_objective * (1.0 + 1e-12) + 1e-300,
                "objective rose from {prev_objective} to {obj} within a sweep"
            );
        }
        prev_objective = obj;

        if change < opts.convergence_tol {
            // Full pass moved nothing; check stationarity exactly.
            let gap = state.max_update_gap(spec, restrict);
            work += full_cost;
            if gap <= opts.convergence_tol.max(5e-7 * 0.99) {
                return true;
            }
        }
        if change.is_finite() && prev_change.is_finite() && change > prev_change * CRAWL_RATIO {
            crawl_count += 1;
            if crawl_count >= CRAWL_LIMIT {
                return false;
            }
        } else {
            crawl_count = 0;
        }
        prev_change = change;

        // Polish the current active set before the next full pass. Early
        // rounds use a loose tolerance; the screened pass plus the exact
        // stationarity check drive the final precision.
        let active = state.active_slots();
        if !active.is_empty() && active.len() < slots.len() {
            let inner_cost = active.len().max(1);
            let inner_tol = if change > 100.0 * opts.convergence_tol {
                100.0 * opts.convergence_tol
            } else {
                opts.convergence_tol
            };
            let mut inner_prev = prev_objective;
            let mut inner_prev_change = f64::INFINITY;
            let mut inner_crawl = 0usize;
            let mut rounds = 0usize;
            while work < work_budget && rounds < 50 {
                rounds += 1;
                let (inner_change, inner_clamped) = state.sweep(&active, spec, restrict);
                work += inner_cost;
                let inner_obj = state.objective(spec);
                sweep_objectives.push(inner_obj);
                if !inner_clamped {
                    debug_assert!(
                        inner_obj <= inner_prev * (1.0 + 1e-12) + 1e-300,
                        "objective rose from {inner_prev} to {inner_obj} within a sweep"
                    );
                }
                inner_prev = inner_obj;
                if inner_change < inner_tol {
                    break;
                }
                if inner_change.is_finite()
                    && inner_prev_change.is_finite()
                    && inner_change > inner_prev_change * CRAWL_RATIO
                {
                    inner_crawl += 1;
                    if inner_crawl >= CRAWL_LIMIT {
                        break;
                    }
                } else {
                    inner_crawl = 0;
                }
                inner_prev_change = inner_change;
            }
            prev_objective = inner_prev;
        }
    }
    false
}

fn estimate_from_solution(
    design: &AugmentedDesign,
    y: &DVector<f64>,
    spec: &PenaltySpec,
    lambda: f64,
    outcome: &CdOutcome,
) -> CoefficientEstimate {
    let p = design.p();
    let k = design.k();
    let mut beta = DVector::zeros(p);
    for (slot, &j) in design.active.iter().enumerate() {
        if outcome.b[slot] != 0.0 {
            beta[j] = outcome.b[slot] / design.col_norms()[j];
        }
    }
    let mut gamma = DVector::zeros(k);
    for i in 0..k {
        gamma[i] = outcome.b[design.active.len() + i];
    }
    let mut support = Vec::new();
    for j in 0..p {
        if beta[j] != 0.0 {
            support.push(j);
        }
    }
    for i in 0..k {
        if gamma[i] != 0.0 {
            support.push(p + i);
        }
    }
    let mut est = CoefficientEstimate {
        beta,
        gamma,
        support,
        lambda_used: lambda,
        objective_value: outcome.objective,
        converged: outcome.converged,
        sweeps: outcome.sweeps,
    };
    // Store the objective recomputed from the mapped-back coefficients so the
    // stored value and `objective()` agree to roundoff.
    if let Ok(obj) = objective(y, design, &est, &spec.clone().with_lambda(lambda)) {
        est.objective_value = obj;
    }
    est
}

/// Fits one estimate per grid value with warm starts, multi-starting the
/// nonconvex families. The grid must be strictly decreasing.
pub fn fit_path(
    y: &DVector<f64>,
    design: &AugmentedDesign,
    spec: &PenaltySpec,
    grid: &[f64],
    opts: &FitOptions,
) -> Result<Vec<CoefficientEstimate>> {
    spec.validate()?;
    if y.len() != design.n() {
        return Err(Error::input("response length does not match design rows"));
    }
    if grid.is_empty() {
        return Err(Error::input("lambda grid is empty"));
    }
    for w in grid.windows(2) {
        if !(w[1] < w[0]) {
            return Err(Error::input("lambda grid must be strictly decreasing"));
        }
    }
    if grid.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
        return Err(Error::input("lambda grid values must be finite and >= 0"));
    }

    let m = spec
        .support_cap_m
        .unwrap_or_else(|| default_support_cap(design.n(), design.p()));
    let allowed = cap_allowed(m).max(1);
    let cols = design.num_std_cols();
    let multi_start = spec.family.is_nonconvex();

    let mut estimates = Vec::with_capacity(grid.len());
    let mut warm: Option<DVector<f64>> = None;
    // Warm lasso state reused as a start for the nonconvex families.
    let mut lasso_warm: Option<DVector<f64>> = None;
    let lasso_spec = PenaltySpec {
        family: PenaltyFamily::Lasso,
        ..spec.clone()
    };

    for (idx, &lambda) in grid.iter().enumerate() {
        let spec_here = spec.clone().with_lambda(lambda);
        let mut best = cd_solve(design, y, &spec_here, warm.as_ref(), allowed, opts);

        // Restarts refine converged solves in the sparse regime. When the
        // warm chain cannot converge (saturated near-interpolation fits) or
        // the support has grown past any selectable size, they only burn
        // work: every start lands in the same dense basin.
        let warm_support = best.b.iter().filter(|&&v| v != 0.0).count();
        let restart_gate = allowed.min(design.n() / 2).max(1);
        if multi_start && opts.num_starts > 0 && best.converged && warm_support < restart_gate {
            let mut candidates: Vec<Option<DVector<f64>>> = Vec::new();
            // zero start
            candidates.push(Some(DVector::zeros(cols)));
            // lasso-solution start
            if opts.num_starts >= 2 {
                let lasso_here = lasso_spec.clone().with_lambda(lambda);
                let lasso_sol = cd_solve(design, y, &lasso_here, lasso_warm.as_ref(), cols.max(1), opts);
                lasso_warm = Some(lasso_sol.b.clone());
                candidates.push(Some(lasso_sol.b));
            }
            // random-support starts
            if opts.num_starts >= 3 {
                let mut rng = substream(opts.starts_seed, idx as u64, StreamKind::Starts);
                let n = design.n() as f64;
                let eligible = if opts.freeze_gamma { design.active.len() } else { cols };
                for _ in 0..(opts.num_starts - 2) {
                    let size = allowed.min(8).min(eligible);
                    let mut init = DVector::zeros(cols);
                    if size > 0 {
                        let chosen = rand::seq::index::sample(&mut rng, eligible, size);
                        for j in chosen.iter() {
                            init[j] = design.standardized.column(j).dot(y) / n;
                        }
                    }
                    candidates.push(Some(init));
                }
            }
            for cand in candidates {
                let outcome = cd_solve(design, y, &spec_here, cand.as_ref(), allowed, opts);
                if outcome.objective < best.objective {
                    best = outcome;
                }
            }
        }

        warm = Some(best.b.clone());
        estimates.push(estimate_from_solution(design, y, spec, lambda, &best));
    }
    Ok(estimates)
}

/// Single-lambda solve exposing the per-sweep objective trace.
pub fn solve_at_lambda(
    y: &DVector<f64>,
    design: &AugmentedDesign,
    spec: &PenaltySpec,
    init: Option<&DVector<f64>>,
    opts: &FitOptions,
) -> Result<(CoefficientEstimate, Vec<f64>)> {
    spec.validate()?;
    if y.len() != design.n() {
        return Err(Error::input("response length does not match design rows"));
    }
    let m = spec
        .support_cap_m
        .unwrap_or_else(|| default_support_cap(design.n(), design.p()));
    let allowed = cap_allowed(m).max(1);
    let outcome = cd_solve(design, y, spec, init, allowed, opts);
    let trace = outcome.sweep_objectives.clone();
    Ok((
        estimate_from_solution(design, y, spec, spec.lambda, &outcome),
        trace,
    ))
}

/// Mean squared prediction error of an estimate on a validation set.
pub fn validation_mse(
    est: &CoefficientEstimate,
    y: &DVector<f64>,
    design: &AugmentedDesign,
) -> Result<f64> {
    if y.len() != design.n() {
        return Err(Error::input("validation response length does not match design rows"));
    }
    let fitted = design.predict(&est.beta, &est.gamma)?;
    Ok((y - fitted).norm_squared() / design.n() as f64)
}

/// Picks the path element minimizing validation MSE; ties keep the larger
/// lambda (the path is ordered by decreasing lambda).
pub fn tune<'a>(
    path: &'a [CoefficientEstimate],
    y_val: &DVector<f64>,
    design_val: &AugmentedDesign,
) -> Result<&'a CoefficientEstimate> {
    if path.is_empty() {
        return Err(Error::input("cannot tune over an empty path"));
    }
    let mut best = &path[0];
    let mut best_mse = validation_mse(best, y_val, design_val)?;
    for est in &path[1..] {
        let mse = validation_mse(est, y_val, design_val)?;
        if mse < best_mse {
            best = est;
            best_mse = mse;
        }
    }
    Ok(best)
}

fn least_squares(cols: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    if cols.ncols() == 0 {
        return Ok(DVector::zeros(0));
    }
    let svd = cols.clone().svd(true, true);
    svd.solve(y, 1e-12)
        .map(|m| DVector::from_column_slice(m.as_slice()))
        .map_err(Error::numeric)
}

/// Exhaustive minimizer over all supports of size below
/// `min(max_support, M/2)` for the L0 penalty: least squares per support,
/// the sup-norm box enforced by clipped refits. Small problems only.
pub fn brute_force_l0(
    y: &DVector<f64>,
    design: &AugmentedDesign,
    spec: &PenaltySpec,
    max_support: usize,
) -> Result<CoefficientEstimate> {
    let total = design.p() + design.k();
    if total > 20 {
        return Err(Error::refused(format!(
            "brute force supports at most 20 columns, got {total}"
        )));
    }
    if max_support > 12 {
        return Err(Error::refused(format!(
            "brute force supports max_support <= 12, got {max_support}"
        )));
    }
    if y.len() != design.n() {
        return Err(Error::input("response length does not match design rows"));
    }
    let m = spec
        .support_cap_m
        .unwrap_or_else(|| default_support_cap(design.n(), design.p()));
    let size_limit = max_support.min(cap_allowed(m) + 1);
    let l0_spec = PenaltySpec {
        family: PenaltyFamily::L0,
        ..spec.clone()
    };

    let p = design.p();
    let mut best: Option<CoefficientEstimate> = None;
    let mut indices: Vec<usize> = Vec::new();
    let columns: Vec<DVector<f64>> = (0..total)
        .map(|j| {
            if j < p {
                DVector::from_column_slice(design.x().column(j).as_slice())
            } else {
                DVector::from_column_slice(design.scores().column(j - p).as_slice())
            }
        })
        .collect();

    // sizes 0..size_limit (strict), lexicographic combinations within a size
    for size in 0..size_limit {
        indices.clear();
        indices.extend(0..size);
        loop {
            if size == 0 || indices[size - 1] < total {
                let candidate = solve_support(y, design, &columns, &indices, &l0_spec)?;
                match &best {
                    Some(b) if b.objective_value <= candidate.objective_value => {}
                    _ => best = Some(candidate),
                }
            }
            if size == 0 {
                break;
            }
            // next combination
            let mut i = size;
            loop {
                if i == 0 {
                    break;
                }
                i -= 1;
                if indices[i] + 1 <= total - (size - i) {
                    indices[i] += 1;
                    for j in (i + 1)..size {
                        indices[j] = indices[j - 1] + 1;
                    }
                    break;
                }
                if i == 0 {
                    indices[size - 1] = total; // exhausted
                    break;
                }
            }
            if indices[size - 1] >= total {
                break;
            }
        }
    }
    best.ok_or_else(|| Error::input("no admissible support"))
}

fn solve_support(
    y: &DVector<f64>,
    design: &AugmentedDesign,
    columns: &[DVector<f64>],
    support: &[usize],
    spec: &PenaltySpec,
) -> Result<CoefficientEstimate> {
    let p = design.p();
    let k = design.k();
    let n = design.n();
    let t = spec.gamma_box_t;

    let mut clipped: Vec<(usize, f64)> = Vec::new();
    let mut free: Vec<usize> = support.to_vec();
    let mut coef = vec![0.0; support.len()];

    loop {
        let mut target = y.clone();
        for &(j, v) in &clipped {
            target.axpy(-v, &columns[j], 1.0);
        }
        let mat = DMatrix::from_fn(n, free.len(), |r, c| columns[free[c]][r]);
        let solved = least_squares(&mat, &target)?;
        let mut new_clip = None;
        for (slot, &j) in free.iter().enumerate() {
            if j >= p && solved[slot].abs() > t {
                new_clip = Some((j, solved[slot].signum() * t));
                break;
            }
        }
        match new_clip {
            Some(clip) => {
                clipped.push(clip);
                free.retain(|&j| j != clip.0);
            }
            None => {
                for (pos, &j) in support.iter().enumerate() {
                    if let Some(slot) = free.iter().position(|&f| f == j) {
                        coef[pos] = solved[slot];
                    } else if let Some(&(_, v)) = clipped.iter().find(|&&(c, _)| c == j) {
                        coef[pos] = v;
                    }
                }
                break;
            }
        }
    }

    let mut beta = DVector::zeros(p);
    let mut gamma = DVector::zeros(k);
    for (pos, &j) in support.iter().enumerate() {
        if j < p {
            beta[j] = coef[pos];
        } else {
            gamma[j - p] = coef[pos];
        }
    }
    let realized: Vec<usize> = support
        .iter()
        .copied()
        .filter(|&j| {
            if j < p {
                beta[j] != 0.0
            } else {
                gamma[j - p] != 0.0
            }
        })
        .collect();
    let mut est = CoefficientEstimate {
        beta,
        gamma,
        support: realized,
        lambda_used: spec.lambda,
        objective_value: 0.0,
        converged: true,
        sweeps: 0,
    };
    est.objective_value = objective(y, design, &est, spec)?;
    Ok(est)
}

/// Degrees-of-freedom-adjusted residual standard deviation
/// `sqrt(RSS / (n - |support| - 1))`.
pub fn estimate_sigma(
    y: &DVector<f64>,
    design: &AugmentedDesign,
    est: &CoefficientEstimate,
) -> Result<f64> {
    let n = design.n();
    let s = est.support_size();
    if n <= s + 1 {
        return Err(Error::input(format!(
            "need n > |support| + 1 for the variance estimate, got n={n}, |support|={s}"
        )));
    }
    let fitted = design.predict(&est.beta, &est.gamma)?;
    let rss = (y - fitted).norm_squared();
    Ok((rss / (n - s - 1) as f64).sqrt())
}
