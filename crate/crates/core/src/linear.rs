//! Ridge and L1-penalized linear quantile regression.
//!
//! Both estimators carry an unpenalized intercept. Columns with zero variance
//! in the fitting data get a zero coefficient. With
//! [`LinearFitOptions::standardize`] the penalty is applied to coefficients of
//! numeric columns expressed in standard-deviation units; indicator columns
//! are always penalized on their 0/1 scale.
//!
//! Quantile regression is solved exactly as a bounded linear program with a
//! Mehrotra predictor-corrector interior-point method on the dual, with the
//! L1 penalty folded in as pairs of pseudo-observations.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{ColumnOrigin, EncodedMatrix};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinearFitOptions {
    pub standardize: bool,
}

impl LinearFitOptions {
    pub const RAW: Self = Self { standardize: false };
    pub const STANDARDIZED: Self = Self { standardize: true };
}

/// Pinball loss of a single residual.
pub fn pinball(residual: f64, alpha: f64) -> f64 {
    if residual >= 0.0 {
        alpha * residual
    } else {
        (alpha - 1.0) * residual
    }
}

/// Smallest sorted value whose cumulative share reaches `alpha`.
pub fn empirical_quantile(values: &[f64], alpha: f64) -> f64 {
    assert!(!values.is_empty(), "empirical quantile of empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = ((alpha * v.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    v[k.min(v.len()) - 1]
}

pub trait LinearPredictor {
    fn coefficients(&self) -> &[f64];
    fn intercept(&self) -> f64;

    fn predict(&self, x: &[f64]) -> Result<f64> {
        let beta = self.coefficients();
        if x.len() != beta.len() {
            return Err(Error::DimensionMismatch { expected: beta.len(), got: x.len() });
        }
        Ok(self.intercept() + x.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    coefficients: Vec<f64>,
    intercept: f64,
    lambda: f64,
}

impl RidgeModel {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Constant predictor at the mean of `y`.
    pub fn intercept_only(y: &[f64], width: usize) -> Self {
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        Self { coefficients: vec![0.0; width], intercept: mean, lambda: 0.0 }
    }
}

impl LinearPredictor for RidgeModel {
    fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }
    fn intercept(&self) -> f64 {
        self.intercept
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearQuantileModel {
    alpha: f64,
    coefficients: Vec<f64>,
    intercept: f64,
    lambda: f64,
    penalty_weights: Vec<f64>,
    objective: f64,
}

impl LinearQuantileModel {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Penalized pinball objective at the fitted coefficients.
    pub fn objective(&self) -> f64 {
        self.objective
    }

    /// Recomputes the penalized objective on `(x, y)`.
    pub fn objective_on(&self, x: &EncodedMatrix, y: &[f64]) -> f64 {
        pinball_objective(x, y, self.intercept, &self.coefficients, self.alpha, self.lambda, &self.penalty_weights)
    }

    /// Constant predictor at the empirical `alpha`-quantile of `y`.
    pub fn intercept_only(y: &[f64], alpha: f64, width: usize) -> Self {
        let q = empirical_quantile(y, alpha);
        let objective = y.iter().map(|v| pinball(v - q, alpha)).sum();
        Self {
            alpha,
            coefficients: vec![0.0; width],
            intercept: q,
            lambda: 0.0,
            penalty_weights: vec![1.0; width],
            objective,
        }
    }

    /// True when every slope is zero.
    pub fn is_constant(&self) -> bool {
        self.coefficients.iter().all(|b| *b == 0.0)
    }
}

impl LinearPredictor for LinearQuantileModel {
    fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }
    fn intercept(&self) -> f64 {
        self.intercept
    }
}

/// `sum pinball(y - b0 - x b) + lambda * sum w_j |b_j|`.
pub fn pinball_objective(x: &EncodedMatrix, y: &[f64], intercept: f64, beta: &[f64], alpha: f64, lambda: f64, weights: &[f64]) -> f64 {
    let loss: f64 = (0..x.n_rows())
        .map(|i| {
            let fit = intercept + x.row(i).iter().zip(beta).map(|(a, b)| a * b).sum::<f64>();
            pinball(y[i] - fit, alpha)
        })
        .sum();
    let penalty: f64 = beta.iter().zip(weights).map(|(b, w)| w * b.abs()).sum();
    loss + lambda * penalty
}

/// Centering, scaling and penalty weights for the columns that take part in
/// a fit.
struct Standardized {
    active: Vec<usize>,
    means: Vec<f64>,
    /// multiply a scaled coefficient by this to get the raw coefficient
    scales: Vec<f64>,
    /// penalty weight per active column in scaled units
    penalty: Vec<f64>,
    /// raw-unit penalty weight for every column
    raw_weights: Vec<f64>,
    y_mean: f64,
}

fn standardize(x: &EncodedMatrix, y: &[f64], opts: LinearFitOptions) -> Standardized {
    let (n, p) = (x.n_rows(), x.n_cols());
    let nf = n as f64;
    let mut active = Vec::new();
    let mut means = Vec::new();
    let mut scales = Vec::new();
    let mut penalty = Vec::new();
    let mut raw_weights = vec![1.0; p];
    for j in 0..p {
        let mean = (0..n).map(|i| x.get(i, j)).sum::<f64>() / nf;
        let var = (0..n).map(|i| (x.get(i, j) - mean).powi(2)).sum::<f64>() / nf;
        let sd = var.sqrt();
        let numeric = x.columns()[j].origin == ColumnOrigin::FromNumeric;
        let raw_w = if opts.standardize && numeric { sd } else { 1.0 };
        raw_weights[j] = raw_w;
        if sd <= 1e-12 * mean.abs().max(1.0) {
            continue;
        }
        let scale = if numeric { sd } else { 1.0 };
        active.push(j);
        means.push(mean);
        scales.push(scale);
        penalty.push(raw_w / scale);
    }
    let y_mean = y.iter().sum::<f64>() / nf;
    Standardized { active, means, scales, penalty, raw_weights, y_mean }
}

impl Standardized {
    fn scaled(&self, x: &EncodedMatrix, i: usize, k: usize) -> f64 {
        (x.get(i, self.active[k]) - self.means[k]) / self.scales[k]
    }

    fn unscale(&self, p: usize, scaled_beta: &[f64], centered_intercept: f64) -> (Vec<f64>, f64) {
        let mut beta = vec![0.0; p];
        let mut intercept = centered_intercept;
        for (k, &j) in self.active.iter().enumerate() {
            beta[j] = scaled_beta[k] / self.scales[k];
            intercept -= beta[j] * self.means[k];
        }
        (beta, intercept)
    }
}

fn check_inputs(x: &EncodedMatrix, y: &[f64], lambda: f64) -> Result<()> {
    if x.n_rows() == 0 {
        return Err(Error::EmptyData);
    }
    if y.len() != x.n_rows() {
        return Err(Error::DimensionMismatch { expected: x.n_rows(), got: y.len() });
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(invalid(format!("penalty must be a finite nonnegative number, got {lambda}")));
    }
    Ok(())
}

/// Cholesky solve; adds `1e-10 * trace / dim` to the diagonal when the
/// matrix is numerically singular.
fn spd_solve(mut m: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let dim = m.nrows();
    if dim == 0 {
        return Ok(DVector::zeros(0));
    }
    let well_conditioned = |c: &Cholesky<f64, nalgebra::Dyn>| {
        let d = c.l_dirty().diagonal();
        let (lo, hi) = d.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
        lo > 1e-7 * hi
    };
    if let Some(c) = Cholesky::new(m.clone()) {
        if well_conditioned(&c) {
            return Ok(c.solve(rhs));
        }
    }
    let jitter = 1e-10 * m.trace().max(f64::MIN_POSITIVE) / dim as f64;
    for k in 0..dim {
        m[(k, k)] += jitter;
    }
    Cholesky::new(m).map(|c| c.solve(rhs)).ok_or_else(|| Error::Numerical("normal equations are not positive definite".into()))
}

/// Ridge regression with the closed-form penalized normal equations on
/// centered data, raw-scale penalty.
pub fn fit_ridge(x: &EncodedMatrix, y: &[f64], lambda: f64) -> Result<RidgeModel> {
    fit_ridge_with(x, y, lambda, LinearFitOptions::RAW)
}

pub fn fit_ridge_with(x: &EncodedMatrix, y: &[f64], lambda: f64, opts: LinearFitOptions) -> Result<RidgeModel> {
    check_inputs(x, y, lambda)?;
    let st = standardize(x, y, opts);
    let (n, q) = (x.n_rows(), st.active.len());
    let mut gram = DMatrix::<f64>::zeros(q, q);
    let mut rhs = DVector::<f64>::zeros(q);
    let mut z = vec![0.0; q];
    for i in 0..n {
        for (k, zk) in z.iter_mut().enumerate() {
            *zk = st.scaled(x, i, k);
        }
        let yc = y[i] - st.y_mean;
        for a in 0..q {
            rhs[a] += z[a] * yc;
            for b in 0..=a {
                gram[(a, b)] += z[a] * z[b];
            }
        }
    }
    for a in 0..q {
        for b in 0..a {
            gram[(b, a)] = gram[(a, b)];
        }
        gram[(a, a)] += lambda * st.penalty[a] * st.penalty[a];
    }
    let scaled = spd_solve(gram, &rhs)?;
    let (coefficients, intercept) = st.unscale(x.n_cols(), scaled.as_slice(), st.y_mean);
    Ok(RidgeModel { coefficients, intercept, lambda })
}

/// L1-penalized linear quantile regression with a raw-scale penalty.
pub fn fit_quantile(x: &EncodedMatrix, y: &[f64], alpha: f64, lambda: f64) -> Result<LinearQuantileModel> {
    fit_quantile_with(x, y, alpha, lambda, LinearFitOptions::RAW)
}

pub fn fit_quantile_with(x: &EncodedMatrix, y: &[f64], alpha: f64, lambda: f64, opts: LinearFitOptions) -> Result<LinearQuantileModel> {
    check_inputs(x, y, lambda)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("quantile level must lie in (0, 1), got {alpha}")));
    }
    let st = standardize(x, y, opts);
    let n = x.n_rows();
    let basis = independent_columns(x, &st);

    // Augmented design: data rows [1, z_i], then +/- penalty rows.
    let m = basis.len() + 1;
    let penalized: Vec<usize> = if lambda > 0.0 { (0..basis.len()).filter(|&b| st.penalty[basis[b]] > 0.0).collect() } else { vec![] };
    let rows = n + 2 * penalized.len();
    let mut design = vec![0.0; rows * m];
    let mut response = vec![0.0; rows];
    for i in 0..n {
        let r = &mut design[i * m..(i + 1) * m];
        r[0] = 1.0;
        for (b, &k) in basis.iter().enumerate() {
            r[b + 1] = st.scaled(x, i, k);
        }
        response[i] = y[i] - st.y_mean;
    }
    for (t, &b) in penalized.iter().enumerate() {
        let w = lambda * st.penalty[basis[b]];
        design[(n + 2 * t) * m + b + 1] = w;
        design[(n + 2 * t + 1) * m + b + 1] = -w;
    }
    let solution = solve_quantile_lp(&design, &response, m, alpha)?;

    let mut scaled_beta = vec![0.0; st.active.len()];
    for (b, &k) in basis.iter().enumerate() {
        scaled_beta[k] = solution[b + 1];
    }
    let (coefficients, intercept) = st.unscale(x.n_cols(), &scaled_beta, solution[0] + st.y_mean);
    let objective = pinball_objective(x, y, intercept, &coefficients, alpha, lambda, &st.raw_weights);
    Ok(LinearQuantileModel { alpha, coefficients, intercept, lambda, penalty_weights: st.raw_weights, objective })
}

/// Active columns (indices into `st.active`) that are linearly independent
/// of the intercept and of earlier columns, by modified Gram-Schmidt.
fn independent_columns(x: &EncodedMatrix, st: &Standardized) -> Vec<usize> {
    let n = x.n_rows();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut keep = Vec::new();
    for k in 0..st.active.len() {
        let mut v: Vec<f64> = (0..n).map(|i| st.scaled(x, i, k)).collect();
        let norm0 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        for u in &basis {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-9 * norm0.max(f64::MIN_POSITIVE) && norm > 0.0 {
            v.iter_mut().for_each(|a| *a /= norm);
            basis.push(v);
            keep.push(k);
        }
    }
    keep
}

const MAX_IPM_ITERATIONS: usize = 200;

/// Solves `min sum pinball(y_i - x_i b)` over `b` (row-major `design`,
/// `m` columns) through the dual bounded LP
/// `min -y'a  s.t.  X'a = (1 - alpha) X'1,  0 <= a <= 1`.
fn solve_quantile_lp(design: &[f64], y: &[f64], m: usize, alpha: f64) -> Result<Vec<f64>> {
    let n = y.len();
    let row = |i: usize| &design[i * m..(i + 1) * m];
    let c: Vec<f64> = y.iter().map(|v| -v).collect();

    // Start on the primal central point; the least-squares dual keeps the
    // dual residual at zero.
    let mut x = vec![1.0 - alpha; n];
    let mut s = vec![alpha; n];
    let ones = vec![1.0; n];
    let mut v = normal_solve(design, m, &ones, &c)?;
    let mut z = vec![0.0; n];
    let mut w = vec![0.0; n];
    let r: Vec<f64> = (0..n).map(|i| c[i] - dot(row(i), v.as_slice())).collect();
    let offset = (r.iter().map(|a| a.abs()).sum::<f64>() / n as f64).max(1e-3);
    for i in 0..n {
        z[i] = r[i].max(0.0) + offset;
        w[i] = (-r[i]).max(0.0) + offset;
    }

    let scale = 1.0 + c.iter().map(|a| a.abs()).sum::<f64>();
    let mut dx = vec![0.0; n];
    let mut dz = vec![0.0; n];
    let mut dw = vec![0.0; n];
    let mut theta = vec![0.0; n];
    let mut rho = vec![0.0; n];
    for _ in 0..MAX_IPM_ITERATIONS {
        let gap: f64 = (0..n).map(|i| x[i] * z[i] + s[i] * w[i]).sum();
        if gap <= 1e-13 * scale {
            break;
        }
        let mu = gap / (2 * n) as f64;
        // dual residual (zero up to rounding)
        let rd: Vec<f64> = (0..n).map(|i| c[i] - dot(row(i), v.as_slice()) - z[i] + w[i]).collect();
        for i in 0..n {
            theta[i] = 1.0 / (z[i] / x[i] + w[i] / s[i]);
        }
        let chol = factor_normal(design, m, &theta)?;

        let direction = |rxz: &dyn Fn(usize) -> f64,
                         rsw: &dyn Fn(usize) -> f64,
                         rho: &mut [f64],
                         dx: &mut [f64],
                         dz: &mut [f64],
                         dw: &mut [f64]|
         -> DVector<f64> {
            let mut rhs = DVector::<f64>::zeros(m);
            for i in 0..n {
                rho[i] = rd[i] - rxz(i) / x[i] + rsw(i) / s[i];
                let t = theta[i] * rho[i];
                for (a, xa) in row(i).iter().enumerate() {
                    rhs[a] += xa * t;
                }
            }
            let dv = chol.solve(&rhs);
            for i in 0..n {
                dx[i] = theta[i] * (dot(row(i), dv.as_slice()) - rho[i]);
                dz[i] = (rxz(i) - z[i] * dx[i]) / x[i];
                dw[i] = (rsw(i) + w[i] * dx[i]) / s[i];
            }
            dv
        };

        // predictor
        direction(&|i| -x[i] * z[i], &|i| -s[i] * w[i], &mut rho, &mut dx, &mut dz, &mut dw);
        let (ap, ad) = step_lengths(&x, &s, &z, &w, &dx, &dz, &dw, 1.0);
        let mu_aff: f64 = (0..n)
            .map(|i| (x[i] + ap * dx[i]) * (z[i] + ad * dz[i]) + (s[i] - ap * dx[i]) * (w[i] + ad * dw[i]))
            .sum::<f64>()
            / (2 * n) as f64;
        let sigma = (mu_aff / mu).powi(3).min(1.0);

        // corrector
        let (adx, adz, adw) = (dx.clone(), dz.clone(), dw.clone());
        let target = sigma * mu;
        let dv = direction(
            &|i| target - x[i] * z[i] - adx[i] * adz[i],
            &|i| target - s[i] * w[i] + adx[i] * adw[i],
            &mut rho,
            &mut dx,
            &mut dz,
            &mut dw,
        );
        let (ap, ad) = step_lengths(&x, &s, &z, &w, &dx, &dz, &dw, 0.99995);
        for i in 0..n {
            x[i] += ap * dx[i];
            s[i] = 1.0 - x[i];
            if s[i] <= 0.0 || x[i] <= 0.0 {
                // rounding pushed a coordinate onto its bound
                x[i] = x[i].clamp(f64::EPSILON, 1.0 - f64::EPSILON);
                s[i] = 1.0 - x[i];
            }
            z[i] = (z[i] + ad * dz[i]).max(f64::MIN_POSITIVE);
            w[i] = (w[i] + ad * dw[i]).max(f64::MIN_POSITIVE);
        }
        v += ad * dv;
        if ap < 1e-12 && ad < 1e-12 {
            break;
        }
    }
    Ok(v.iter().map(|a| -a).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

#[allow(clippy::too_many_arguments)]
fn step_lengths(x: &[f64], s: &[f64], z: &[f64], w: &[f64], dx: &[f64], dz: &[f64], dw: &[f64], shrink: f64) -> (f64, f64) {
    let mut ap = 1.0f64;
    let mut ad = 1.0f64;
    for i in 0..x.len() {
        if dx[i] < 0.0 {
            ap = ap.min(-x[i] / dx[i]);
        }
        if dx[i] > 0.0 {
            ap = ap.min(s[i] / dx[i]);
        }
        if dz[i] < 0.0 {
            ad = ad.min(-z[i] / dz[i]);
        }
        if dw[i] < 0.0 {
            ad = ad.min(-w[i] / dw[i]);
        }
    }
    ((shrink * ap).min(1.0), (shrink * ad).min(1.0))
}

fn factor_normal(design: &[f64], m: usize, weights: &[f64]) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let mut mat = DMatrix::<f64>::zeros(m, m);
    for (i, &wt) in weights.iter().enumerate() {
        let r = &design[i * m..(i + 1) * m];
        for a in 0..m {
            let ra = r[a] * wt;
            if ra == 0.0 {
                continue;
            }
            for b in 0..=a {
                mat[(a, b)] += ra * r[b];
            }
        }
    }
    for a in 0..m {
        for b in 0..a {
            mat[(b, a)] = mat[(a, b)];
        }
    }
    if let Some(c) = Cholesky::new(mat.clone()) {
        return Ok(c);
    }
    let jitter = 1e-12 * mat.trace().max(f64::MIN_POSITIVE) / m as f64;
    for a in 0..m {
        mat[(a, a)] += jitter;
    }
    Cholesky::new(mat).ok_or_else(|| Error::Numerical("interior-point normal matrix lost definiteness".into()))
}

/// Weighted least squares `(X' W X) v = X' W c`.
fn normal_solve(design: &[f64], m: usize, weights: &[f64], c: &[f64]) -> Result<DVector<f64>> {
    let chol = factor_normal(design, m, weights)?;
    let mut rhs = DVector::<f64>::zeros(m);
    for (i, (&wt, &ci)) in weights.iter().zip(c).enumerate() {
        for a in 0..m {
            rhs[a] += design[i * m + a] * wt * ci;
        }
    }
    Ok(chol.solve(&rhs))
}
