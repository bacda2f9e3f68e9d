//! Class-regularized graph embedding.
//!
//! Learns a linear map `y = M' x` with `||M||_F = 1` minimizing
//! `sum_ij ||M'x_i - M'x_j||^2 W_ij H_ij`, where `W` is an affinity matrix
//! and `H_ij` is +1 for same-class pairs and -1 otherwise. Same-class
//! neighbors are pulled together and different-class neighbors pushed
//! apart. Sums run over ordered pairs.
//!
//! With `S = W o H` and its Laplacian `L = D - S`, the energy equals
//! `tr(M' Q M)` for `Q = 2 X' L X` (rows of `X` are samples), and its
//! gradient is `2 Q M`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{frob_dot, matrix_serde, orthonormalize_columns, trace_ridge};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AffinityScheme {
    /// 1 for same-class pairs, 0 otherwise.
    Binary,
    /// `exp(-alpha ||x_i - x_j||^2)`.
    Heat { alpha: f64 },
    /// `exp(-alpha (x_i - x_j)' A (x_i - x_j))` for a PSD matrix `A`.
    Mahalanobis { alpha: f64, a: Vec<Vec<f64>> },
    /// Cosine similarity; a zero vector has zero affinity to everything.
    #[default]
    Cosine,
}

impl AffinityScheme {
    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            AffinityScheme::Binary | AffinityScheme::Cosine => Ok(()),
            AffinityScheme::Heat { alpha } => check_alpha(*alpha),
            AffinityScheme::Mahalanobis { alpha, a } => {
                check_alpha(*alpha)?;
                let m = mahalanobis_matrix(a, n)?;
                let eig = SymmetricEigen::new(m);
                let scale = eig.eigenvalues.iter().map(|v| v.abs()).fold(0.0, f64::max);
                if eig
                    .eigenvalues
                    .iter()
                    .any(|&v| v < -1e-10 * scale.max(1e-300))
                {
                    return Err(Error::invalid(
                        "Mahalanobis matrix is not positive semidefinite",
                    ));
                }
                Ok(())
            }
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "alpha must be positive, got {alpha}"
        )))
    }
}

fn mahalanobis_matrix(a: &[Vec<f64>], n: usize) -> Result<DMatrix<f64>> {
    if a.len() != n || a.iter().any(|r| r.len() != n) {
        return Err(Error::invalid(format!(
            "Mahalanobis matrix must be {n}x{n}"
        )));
    }
    let m = DMatrix::from_fn(n, n, |i, j| a[i][j]);
    let asym = (&m - m.transpose()).norm();
    if asym > 1e-12 * m.norm().max(1.0) {
        return Err(Error::invalid("Mahalanobis matrix is not symmetric"));
    }
    Ok(m)
}

/// Row-wise affinity evaluator shared by the dense and streaming paths.
struct Affinity<'a> {
    x: &'a DMatrix<f64>,
    labels: &'a [u8],
    scheme: &'a AffinityScheme,
    norms: Vec<f64>,
    metric: Option<DMatrix<f64>>,
}

impl<'a> Affinity<'a> {
    fn new(x: &'a DMatrix<f64>, labels: &'a [u8], scheme: &'a AffinityScheme) -> Result<Self> {
        check_dim(x.nrows(), labels.len())?;
        scheme.validate(x.ncols())?;
        let norms = (0..x.nrows()).map(|i| x.row(i).norm()).collect();
        let metric = match scheme {
            AffinityScheme::Mahalanobis { a, .. } => Some(mahalanobis_matrix(a, x.ncols())?),
            _ => None,
        };
        Ok(Affinity {
            x,
            labels,
            scheme,
            norms,
            metric,
        })
    }

    fn weight(&self, i: usize, j: usize) -> f64 {
        match self.scheme {
            AffinityScheme::Binary => (self.labels[i] == self.labels[j]) as u8 as f64,
            AffinityScheme::Heat { alpha } => {
                let d = self.x.row(i) - self.x.row(j);
                (-alpha * d.norm_squared()).exp()
            }
            AffinityScheme::Mahalanobis { alpha, .. } => {
                let d = (self.x.row(i) - self.x.row(j)).transpose();
                let q = (d.transpose() * self.metric.as_ref().expect("metric") * &d)[(0, 0)];
                (-alpha * q.max(0.0)).exp()
            }
            AffinityScheme::Cosine => {
                let denom = self.norms[i] * self.norms[j];
                if denom == 0.0 {
                    0.0
                } else {
                    (self.x.row(i).dot(&self.x.row(j)) / denom).clamp(-1.0, 1.0)
                }
            }
        }
    }
}

/// Dense `N x N` affinity matrix. Rows of `x` are samples.
pub fn affinity(x: &DMatrix<f64>, labels: &[u8], scheme: &AffinityScheme) -> Result<DMatrix<f64>> {
    let aff = Affinity::new(x, labels, scheme)?;
    let n = x.nrows();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = aff.weight(i, j);
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
    }
    Ok(w)
}

/// `H_ij = +1` for same-class pairs, `-1` otherwise.
pub fn sign_matrix(labels: &[u8]) -> DMatrix<f64> {
    let n = labels.len();
    DMatrix::from_fn(n, n, |i, j| if labels[i] == labels[j] { 1.0 } else { -1.0 })
}

fn check_energy_dims(
    m: &DMatrix<f64>,
    x: &DMatrix<f64>,
    w: &DMatrix<f64>,
    h: &DMatrix<f64>,
) -> Result<()> {
    check_dim(x.ncols(), m.nrows())?;
    let n = x.nrows();
    for mat in [w, h] {
        check_dim(n, mat.nrows())?;
        check_dim(n, mat.ncols())?;
    }
    Ok(())
}

/// `2 X' L X` for the Laplacian of `W o H`.
fn laplacian_form(x: &DMatrix<f64>, w: &DMatrix<f64>, h: &DMatrix<f64>) -> DMatrix<f64> {
    let s = w.component_mul(h);
    let degrees = s.row_sum();
    let mut l = -s;
    for i in 0..l.nrows() {
        l[(i, i)] += degrees[i];
    }
    (x.transpose() * l * x) * 2.0
}

/// Class-regularized energy via the signed-Laplacian quadratic form.
pub fn energy(
    m: &DMatrix<f64>,
    x: &DMatrix<f64>,
    w: &DMatrix<f64>,
    h: &DMatrix<f64>,
) -> Result<f64> {
    check_energy_dims(m, x, w, h)?;
    let q = laplacian_form(x, w, h);
    Ok(frob_dot(m, &(q * m)))
}

/// Gradient of [`energy`] with respect to `M`: `4 X' L X M`.
pub fn energy_gradient(
    m: &DMatrix<f64>,
    x: &DMatrix<f64>,
    w: &DMatrix<f64>,
    h: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_energy_dims(m, x, w, h)?;
    Ok(laplacian_form(x, w, h) * m * 2.0)
}

/// The fixed quadratic form `Q = 2 X' L X` of one training set, built
/// without materializing the `N x N` affinity matrix.
#[derive(Debug, Clone)]
pub struct CrgeProblem {
    q: DMatrix<f64>,
    /// `X' X`, used to normalize the embedded data for dimension selection.
    gram: DMatrix<f64>,
}

const ROW_BLOCK: usize = 256;

impl CrgeProblem {
    pub fn new(x: &DMatrix<f64>, labels: &[u8], scheme: &AffinityScheme) -> Result<Self> {
        Self::with_affinity_input(x, x, labels, scheme)
    }

    /// Like [`CrgeProblem::new`], but the affinity is evaluated on `a_input`
    /// (one row per sample of `x`) instead of on `x` itself.
    pub fn with_affinity_input(
        x: &DMatrix<f64>,
        a_input: &DMatrix<f64>,
        labels: &[u8],
        scheme: &AffinityScheme,
    ) -> Result<Self> {
        check_dim(x.nrows(), a_input.nrows())?;
        let aff = Affinity::new(a_input, labels, scheme)?;
        let q = match scheme {
            AffinityScheme::Cosine => cosine_form(x, a_input, labels, &aff.norms),
            _ => streamed_form(x, &aff),
        };
        let q = (&q + q.transpose()) * 0.5;
        Ok(CrgeProblem {
            q,
            gram: x.transpose() * x,
        })
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn quadratic_form(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn energy(&self, m: &DMatrix<f64>) -> f64 {
        frob_dot(m, &(&self.q * m))
    }

    pub fn gradient(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        &self.q * m * 2.0
    }

    /// Energy of the embedded training data rescaled to unit Frobenius norm.
    pub fn normalized_energy(&self, m: &DMatrix<f64>) -> f64 {
        let spread = frob_dot(m, &(&self.gram * m));
        if spread <= 0.0 {
            return f64::INFINITY;
        }
        self.energy(m) / spread
    }
}

/// Cosine affinity factorizes: `S_ij = v_i . v_j` with `v_i = s_i u_i / ||u_i||`
/// for affinity inputs `u_i` and `s_i = +-1` by class, so
/// `Q = 2 (X' diag(d) X - B B')` with `B = X' V` and `d_i = v_i . sum_j v_j`.
fn cosine_form(x: &DMatrix<f64>, u: &DMatrix<f64>, labels: &[u8], norms: &[f64]) -> DMatrix<f64> {
    let n_samples = x.nrows();
    let mut v = DMatrix::zeros(n_samples, u.ncols());
    for i in 0..n_samples {
        if norms[i] > 0.0 {
            let sign = if labels[i] == 1 { 1.0 } else { -1.0 };
            v.set_row(i, &(u.row(i) * (sign / norms[i])));
        }
    }
    let total = v.row_sum();
    let mut weighted = x.clone();
    for i in 0..n_samples {
        let d = v.row(i).dot(&total);
        weighted.row_mut(i).scale_mut(d);
    }
    let b = x.transpose() * &v;
    (x.transpose() * weighted - &b * b.transpose()) * 2.0
}

fn streamed_form(x: &DMatrix<f64>, aff: &Affinity<'_>) -> DMatrix<f64> {
    let (n_samples, n) = (x.nrows(), x.ncols());
    let blocks: Vec<DMatrix<f64>> = (0..n_samples.div_ceil(ROW_BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut part = DMatrix::zeros(n, n);
            for i in b * ROW_BLOCK..((b + 1) * ROW_BLOCK).min(n_samples) {
                let mut degree = 0.0;
                let mut pulled = nalgebra::RowDVector::zeros(n);
                for j in 0..n_samples {
                    if j == i {
                        continue;
                    }
                    let h = if aff.labels[i] == aff.labels[j] {
                        1.0
                    } else {
                        -1.0
                    };
                    let s = aff.weight(i, j) * h;
                    if s != 0.0 {
                        degree += s;
                        pulled += x.row(j) * s;
                    }
                }
                let xi = x.row(i);
                // x_i (d_i x_i - sum_j S_ij x_j)'
                let r = xi * degree - pulled;
                part.ger(2.0, &xi.transpose(), &r.transpose(), 1.0);
            }
            part
        })
        .collect();
    blocks
        .into_iter()
        .fold(DMatrix::zeros(n, n), |acc, b| acc + b)
}

/// Column constraint on the projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintMode {
    /// Only `||M||_F = 1`.
    Frobenius,
    /// Orthogonal columns of equal norm, `M'M = I / n_tilde`.
    #[default]
    Orthonormal,
}

/// A fitted linear map `y = M' x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    #[serde(with = "matrix_serde")]
    pub matrix: DMatrix<f64>,
    pub scheme: AffinityScheme,
    pub mode: ConstraintMode,
}

impl Projection {
    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_tilde(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn project_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        project_row(&self.matrix, x)
    }

    /// Projects every row of `x`.
    pub fn project(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.n(), x.ncols())?;
        Ok(x * &self.matrix)
    }
}

pub(crate) fn project_row(m: &DMatrix<f64>, x: &[f64]) -> Result<Vec<f64>> {
    check_dim(m.nrows(), x.len())?;
    Ok((0..m.ncols())
        .map(|c| m.column(c).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrgeOptions {
    pub scheme: AffinityScheme,
    pub mode: ConstraintMode,
    pub max_iters: usize,
    /// Initial gradient step; halved whenever the energy would rise.
    pub initial_step: f64,
    pub max_halvings: usize,
    /// Stop when the constrained gradient norm falls below this fraction of `||Q||_F`.
    pub grad_tol: f64,
    /// Evaluate cosine affinities on features shifted so every column's
    /// minimum is zero. On centered data raw cosines are mostly negative
    /// across the origin, which turns the pull/push signs around.
    pub nonnegative_cosine: bool,
    pub seed: u64,
}

impl Default for CrgeOptions {
    fn default() -> Self {
        CrgeOptions {
            scheme: AffinityScheme::Cosine,
            mode: ConstraintMode::Orthonormal,
            max_iters: 2000,
            initial_step: 1e-2,
            max_halvings: 25,
            grad_tol: 1e-7,
            nonnegative_cosine: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedReport {
    /// Energy at the initial point and after every accepted step.
    pub energy_trajectory: Vec<f64>,
    /// Fisher score of the first `n_tilde` input columns.
    pub fisher_before: f64,
    /// Fisher score of the embedded data.
    pub fisher_after: f64,
    pub chosen_dim: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Largest `| ||M||_F - 1 |` over all iterates.
    pub max_norm_error: f64,
    /// Energy of the embedded data scaled to unit Frobenius norm.
    pub normalized_energy: f64,
}

fn retract(m: DMatrix<f64>, mode: ConstraintMode) -> Result<DMatrix<f64>> {
    match mode {
        ConstraintMode::Frobenius => {
            let norm = m.norm();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::numerical("projection collapsed to zero"));
            }
            Ok(m / norm)
        }
        ConstraintMode::Orthonormal => {
            let k = m.ncols() as f64;
            Ok(orthonormalize_columns(&m)? / k.sqrt())
        }
    }
}

fn tangent(g: &DMatrix<f64>, m: &DMatrix<f64>, mode: ConstraintMode) -> DMatrix<f64> {
    match mode {
        ConstraintMode::Frobenius => g - m * (frob_dot(m, g) / frob_dot(m, m)),
        ConstraintMode::Orthonormal => {
            let k = m.ncols() as f64;
            let mg = m.transpose() * g;
            let sym = (&mg + mg.transpose()) * 0.5;
            g - m * sym * k
        }
    }
}

/// Column-orthonormalized Gaussian matrix scaled to unit Frobenius norm.
pub fn random_init(n: usize, n_tilde: usize, seed: u64) -> Result<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(n, n_tilde, |_, _| StandardNormal.sample(&mut rng));
    Ok(orthonormalize_columns(&g)? / (n_tilde as f64).sqrt())
}

/// Projected gradient descent on a prepared problem.
pub fn fit_problem(
    problem: &CrgeProblem,
    n_tilde: usize,
    opts: &CrgeOptions,
) -> Result<(DMatrix<f64>, EmbedReport)> {
    let n = problem.dim();
    if n_tilde == 0 || n_tilde > n {
        return Err(Error::invalid(format!(
            "n_tilde must lie in 1..={n}, got {n_tilde}"
        )));
    }
    let mut m = random_init(n, n_tilde, opts.seed)?;
    let mut e = problem.energy(&m);
    let q_norm = problem.quadratic_form().norm();
    let mut report = EmbedReport {
        energy_trajectory: vec![e],
        fisher_before: f64::NAN,
        fisher_after: f64::NAN,
        chosen_dim: n_tilde,
        iterations: 0,
        converged: false,
        max_norm_error: (m.norm() - 1.0).abs(),
        normalized_energy: f64::NAN,
    };
    if q_norm == 0.0 {
        report.converged = true;
        report.normalized_energy = problem.normalized_energy(&m);
        return Ok((m, report));
    }
    let mut step = opts.initial_step;
    for iter in 0..opts.max_iters {
        let g = problem.gradient(&m);
        if tangent(&g, &m, opts.mode).norm() < opts.grad_tol * q_norm {
            report.converged = true;
            break;
        }
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand = retract(&m - &g * step, opts.mode)?;
            let ec = problem.energy(&cand);
            if ec <= e {
                accepted = Some((cand, ec));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, ec)) = accepted else { break };
        m = cand;
        e = ec;
        report.energy_trajectory.push(e);
        report.max_norm_error = report.max_norm_error.max((m.norm() - 1.0).abs());
        report.iterations = iter + 1;
    }
    if !e.is_finite() {
        return Err(Error::numerical("non-finite embedding energy"));
    }
    report.normalized_energy = problem.normalized_energy(&m);
    Ok((m, report))
}

fn both_classes(labels: &[u8]) -> Result<()> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::data("embedding needs both classes"));
    }
    Ok(())
}

fn finish(
    x: &DMatrix<f64>,
    labels: &[u8],
    m: DMatrix<f64>,
    mut report: EmbedReport,
    opts: &CrgeOptions,
) -> Result<(Projection, EmbedReport)> {
    let k = m.ncols().min(x.ncols());
    let lead = x.columns(0, k).into_owned();
    report.fisher_before = fisher_score(&lead, labels).unwrap_or(f64::NAN);
    report.fisher_after = fisher_score(&(x * &m), labels).unwrap_or(f64::NAN);
    Ok((
        Projection {
            matrix: m,
            scheme: opts.scheme.clone(),
            mode: opts.mode,
        },
        report,
    ))
}

fn build_problem(x: &DMatrix<f64>, labels: &[u8], opts: &CrgeOptions) -> Result<CrgeProblem> {
    both_classes(labels)?;
    if opts.nonnegative_cosine && opts.scheme == AffinityScheme::Cosine {
        let mut shifted = x.clone();
        for mut col in shifted.column_iter_mut() {
            let lo = col.min();
            col.add_scalar_mut(-lo);
        }
        CrgeProblem::with_affinity_input(x, &shifted, labels, &opts.scheme)
    } else {
        CrgeProblem::new(x, labels, &opts.scheme)
    }
}

/// Fits an `n x n_tilde` projection on samples `x` (one per row).
pub fn fit(
    x: &DMatrix<f64>,
    labels: &[u8],
    n_tilde: usize,
    opts: &CrgeOptions,
) -> Result<(Projection, EmbedReport)> {
    let problem = build_problem(x, labels, opts)?;
    let (m, report) = fit_problem(&problem, n_tilde, opts)?;
    finish(x, labels, m, report, opts)
}

/// Fits every candidate dimension and keeps the one whose embedded,
/// unit-norm training data has the lowest class-regularized energy
/// (ties to the smaller dimension).
pub fn fit_over_dims(
    x: &DMatrix<f64>,
    labels: &[u8],
    dims: &[usize],
    opts: &CrgeOptions,
) -> Result<(Projection, EmbedReport)> {
    if dims.is_empty() {
        return Err(Error::invalid("empty dimension range"));
    }
    let problem = build_problem(x, labels, opts)?;
    let mut fits = dims
        .par_iter()
        .map(|&k| fit_problem(&problem, k, opts).map(|r| (k, r)))
        .collect::<Result<Vec<_>>>()?;
    fits.sort_by_key(|f| f.0);
    let best = fits.iter().enumerate().fold(0, |best, (i, f)| {
        if f.1 .1.normalized_energy < fits[best].1 .1.normalized_energy {
            i
        } else {
            best
        }
    });
    let (_, (m, report)) = fits.swap_remove(best);
    finish(x, labels, m, report, opts)
}

pub fn choose_dim(
    x: &DMatrix<f64>,
    labels: &[u8],
    dims: &[usize],
    opts: &CrgeOptions,
) -> Result<usize> {
    Ok(fit_over_dims(x, labels, dims, opts)?.0.n_tilde())
}

/// Fisher discriminant `(mu+ - mu-)' (S+ + S-)^-1 (mu+ - mu-)` with
/// population covariances and a `1e-8 * trace / dim` ridge.
pub fn fisher_score(y: &DMatrix<f64>, labels: &[u8]) -> Result<f64> {
    check_dim(y.nrows(), labels.len())?;
    let d = y.ncols();
    let stats = |class: u8| -> Result<(nalgebra::DVector<f64>, DMatrix<f64>)> {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if rows.len() < 2 {
            return Err(Error::data(
                "fisher_score needs at least two samples per class",
            ));
        }
        let k = rows.len() as f64;
        let mut mean = nalgebra::DVector::zeros(d);
        for &i in &rows {
            mean += y.row(i).transpose();
        }
        mean /= k;
        let mut cov = DMatrix::zeros(d, d);
        for &i in &rows {
            let c = y.row(i).transpose() - &mean;
            cov.ger(1.0 / k, &c, &c, 1.0);
        }
        Ok((mean, cov))
    };
    let (mp, cp) = stats(1)?;
    let (mn, cn) = stats(0)?;
    let mut s = cp + cn;
    let eps = trace_ridge(&s);
    for i in 0..d {
        s[(i, i)] += eps;
    }
    let delta = mp - mn;
    let chol = s
        .cholesky()
        .ok_or_else(|| Error::numerical("class scatter is not positive definite"))?;
    Ok(delta.dot(&chol.solve(&delta)).max(0.0))
}
