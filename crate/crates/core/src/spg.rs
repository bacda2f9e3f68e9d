//! Sparse projections over a nearest-neighbor graph.
//!
//! Two steps: a spectral embedding of the training samples from the
//! generalized eigenproblem `X'LX a = lambda X'DX a` on an unsupervised kNN
//! graph, then a lasso regression per embedding dimension that turns the
//! dense eigenvectors into sparse projection vectors. Rows of `X` are
//! samples throughout.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crge::project_row;
use crate::error::{check_dim, Error, Result};
use crate::linalg::{generalized_symmetric_eigen, matrix_serde, trace_ridge};

/// Symmetric weighted graph stored as sorted adjacency lists.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl Graph {
    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.adjacency[i].iter().map(|e| e.1).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut w = DMatrix::zeros(n, n);
        for (i, row) in self.adjacency.iter().enumerate() {
            for &(j, v) in row {
                w[(i, j)] = v;
            }
        }
        w
    }
}

fn cosine(x: &DMatrix<f64>, norms: &[f64], i: usize, j: usize) -> f64 {
    let denom = norms[i] * norms[j];
    if denom == 0.0 {
        0.0
    } else {
        (x.row(i).dot(&x.row(j)) / denom).clamp(-1.0, 1.0)
    }
}

/// Indices of the `k` Euclidean nearest neighbors of every sample, ties
/// broken by lower index.
pub fn knn_indices(x: &DMatrix<f64>, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = x.nrows();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!(
            "graph_k must lie in 1..{n}, got {k}"
        )));
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| ((x.row(i) - x.row(j)).norm_squared(), j))
                .collect();
            d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut nn: Vec<(f64, usize)> = d[..k].to_vec();
            nn.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            nn.into_iter().map(|p| p.1).collect()
        })
        .collect())
}

/// Symmetrized kNN graph with cosine edge weights. Negative cosines are
/// clipped to zero so the graph Laplacian stays positive semidefinite.
pub fn knn_graph(x: &DMatrix<f64>, graph_k: usize) -> Result<Graph> {
    let nn = knn_indices(x, graph_k)?;
    let norms: Vec<f64> = (0..x.nrows()).map(|i| x.row(i).norm()).collect();
    let mut adjacency: Vec<Vec<(usize, f64)>> = vec![Vec::new(); x.nrows()];
    for (i, list) in nn.iter().enumerate() {
        for &j in list {
            let w = cosine(x, &norms, i, j).max(0.0);
            adjacency[i].push((j, w));
            adjacency[j].push((i, w));
        }
    }
    for row in &mut adjacency {
        row.sort_by_key(|e| e.0);
        row.dedup_by_key(|e| e.0);
    }
    Ok(Graph { adjacency })
}

/// `(X'LX, X'DX)` for the graph Laplacian `L = D - W`.
pub fn graph_scatter(x: &DMatrix<f64>, graph: &Graph) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_dim(x.nrows(), graph.len())?;
    let n = x.ncols();
    let mut weighted = x.clone();
    let mut pulled = DMatrix::zeros(x.nrows(), n);
    for i in 0..x.nrows() {
        weighted.row_mut(i).scale_mut(graph.degree(i));
        let mut acc = nalgebra::RowDVector::zeros(n);
        for &(j, w) in graph.neighbors(i) {
            acc += x.row(j) * w;
        }
        pulled.set_row(i, &acc);
    }
    let xdx = x.transpose() * weighted;
    let xwx = x.transpose() * pulled;
    let mut xlx = &xdx - xwx;
    xlx = (&xlx + xlx.transpose()) * 0.5;
    Ok((xlx, xdx))
}

#[derive(Debug, Clone)]
pub struct SpectralEmbedding {
    /// Smallest generalized eigenvalues, ascending.
    pub eigenvalues: Vec<f64>,
    /// Matching eigenvectors as columns (`n x n_tilde`).
    pub vectors: DMatrix<f64>,
    /// Embedded training samples (`N x n_tilde`).
    pub embedded: DMatrix<f64>,
    /// `||Aa - lambda Ba|| / max(||Aa||, |lambda| ||Ba||)` per pair, against
    /// the unridged matrices.
    pub residuals: Vec<f64>,
}

/// Solves the graph-embedding eigenproblem and keeps the `n_tilde`
/// smallest pairs. `X'DX` receives a `1e-8 * trace / dim` ridge.
pub fn solve_embedding(
    x: &DMatrix<f64>,
    graph: &Graph,
    n_tilde: usize,
) -> Result<SpectralEmbedding> {
    let n = x.ncols();
    if n_tilde == 0 || n_tilde > n {
        return Err(Error::invalid(format!(
            "n_tilde must lie in 1..={n}, got {n_tilde}"
        )));
    }
    let (a, b) = graph_scatter(x, graph)?;
    let mut b_ridge = b.clone();
    let eps = trace_ridge(&b);
    for i in 0..n {
        b_ridge[(i, i)] += eps;
    }
    let (values, vectors) = generalized_symmetric_eigen(&a, &b_ridge)?;
    let vectors = vectors.columns(0, n_tilde).into_owned();
    let eigenvalues = values[..n_tilde].to_vec();
    let residuals = (0..n_tilde)
        .map(|c| {
            let v = vectors.column(c);
            let av = &a * v;
            let bv = &b * v;
            let lam = eigenvalues[c];
            let denom = av.norm().max(lam.abs() * bv.norm()).max(1e-300);
            (&av - bv * lam).norm() / denom
        })
        .collect();
    Ok(SpectralEmbedding {
        eigenvalues,
        embedded: x * &vectors,
        vectors,
        residuals,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub coefficients: Vec<f64>,
    /// `sum (y - X a)^2 + beta ||a||_1`.
    pub objective: f64,
    /// Largest violation of the coordinatewise optimality conditions.
    pub kkt_violation: f64,
    pub sweeps: usize,
}

pub const LASSO_TOL: f64 = 1e-8;
const LASSO_MAX_SWEEPS: usize = 100_000;

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

fn lasso_objective(x: &DMatrix<f64>, y: &[f64], a: &[f64], beta: f64) -> f64 {
    let mut loss = 0.0;
    for i in 0..x.nrows() {
        let pred: f64 = (0..x.ncols()).map(|j| x[(i, j)] * a[j]).sum();
        loss += (y[i] - pred).powi(2);
    }
    loss + beta * a.iter().map(|v| v.abs()).sum::<f64>()
}

/// Worst subgradient violation of `sum (y - Xa)^2 + beta ||a||_1` at `a`.
pub fn lasso_kkt_violation(x: &DMatrix<f64>, y: &[f64], a: &[f64], beta: f64) -> f64 {
    let resid: Vec<f64> = (0..x.nrows())
        .map(|i| y[i] - (0..x.ncols()).map(|j| x[(i, j)] * a[j]).sum::<f64>())
        .collect();
    (0..x.ncols())
        .map(|j| {
            let g = -2.0
                * x.column(j)
                    .iter()
                    .zip(&resid)
                    .map(|(p, r)| p * r)
                    .sum::<f64>();
            if a[j] != 0.0 {
                (g + beta * a[j].signum()).abs()
            } else {
                (g.abs() - beta).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Cyclic coordinate descent for `min_a sum (y - X a)^2 + beta ||a||_1`.
pub fn lasso_fit(x: &DMatrix<f64>, y: &[f64], beta: f64) -> Result<LassoFit> {
    check_dim(x.nrows(), y.len())?;
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!(
            "beta must be non-negative, got {beta}"
        )));
    }
    let p = x.ncols();
    let col_sq: Vec<f64> = (0..p).map(|j| x.column(j).norm_squared()).collect();
    // rounding floor for the optimality check
    let scale = 2.0 * x.norm() * y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tol = LASSO_TOL.max(64.0 * f64::EPSILON * scale);
    let mut a = vec![0.0; p];
    let mut resid = y.to_vec();
    let mut sweeps = 0;
    let mut kkt = lasso_kkt_violation(x, y, &a, beta);
    while kkt > tol && sweeps < LASSO_MAX_SWEEPS {
        for j in 0..p {
            if col_sq[j] == 0.0 {
                continue;
            }
            let col = x.column(j);
            let rho: f64 =
                col.iter().zip(&resid).map(|(c, r)| c * r).sum::<f64>() + col_sq[j] * a[j];
            let new = soft_threshold(rho, beta / 2.0) / col_sq[j];
            let delta = new - a[j];
            if delta != 0.0 {
                for (r, c) in resid.iter_mut().zip(col.iter()) {
                    *r -= delta * c;
                }
                a[j] = new;
            }
        }
        sweeps += 1;
        if sweeps % 10 == 0 || p <= 64 {
            kkt = lasso_kkt_violation(x, y, &a, beta);
        }
    }
    Ok(LassoFit {
        objective: lasso_objective(x, y, &a, beta),
        kkt_violation: lasso_kkt_violation(x, y, &a, beta),
        coefficients: a,
        sweeps,
    })
}

/// Zeroes all but the `k` largest-magnitude entries (ties keep lower index).
pub fn truncate(a: &mut [f64], k: usize) {
    let mut order: Vec<usize> = (0..a.len()).collect();
    order.sort_by(|&i, &j| a[j].abs().total_cmp(&a[i].abs()).then(i.cmp(&j)));
    for &i in order.iter().skip(k) {
        a[i] = 0.0;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpgParams {
    pub graph_k: usize,
    /// Maximum nonzeros per projection column; `None` keeps all.
    pub k_sparsity: Option<usize>,
    /// Fixed lasso weight; `None` picks one from a grid.
    pub beta: Option<f64>,
}

impl Default for SpgParams {
    fn default() -> Self {
        SpgParams {
            graph_k: 5,
            k_sparsity: None,
            beta: None,
        }
    }
}

/// Grid multipliers applied to `2 ||X'y||_inf`, the smallest weight that
/// zeroes the whole lasso solution.
const BETA_GRID: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpgModel {
    #[serde(with = "matrix_serde")]
    pub matrix: DMatrix<f64>,
    /// Lasso weight used for each column.
    pub betas: Vec<f64>,
    pub k_sparsity: usize,
    pub graph_k: usize,
}

impl SpgModel {
    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_tilde(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn nonzeros(&self, col: usize) -> usize {
        self.matrix
            .column(col)
            .iter()
            .filter(|v| **v != 0.0)
            .count()
    }

    pub fn project_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        project_row(&self.matrix, x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpgReport {
    pub eigenvalues: Vec<f64>,
    pub residuals: Vec<f64>,
    pub kkt_violations: Vec<f64>,
    /// Squared reconstruction error of each column after truncation.
    pub reconstruction_errors: Vec<f64>,
}

struct ColumnFit {
    coef: Vec<f64>,
    beta: f64,
    kkt: f64,
    error: f64,
}

fn fit_column(x: &DMatrix<f64>, target: &[f64], k: usize, beta: Option<f64>) -> Result<ColumnFit> {
    let betas: Vec<f64> = match beta {
        Some(b) => vec![b],
        None => {
            let xty = x.transpose() * nalgebra::DVector::from_column_slice(target);
            let bmax = 2.0 * xty.amax();
            BETA_GRID.iter().map(|m| m * bmax).collect()
        }
    };
    let mut best: Option<ColumnFit> = None;
    for b in betas {
        let fit = lasso_fit(x, target, b)?;
        let mut coef = fit.coefficients;
        truncate(&mut coef, k);
        let error = lasso_objective(x, target, &coef, 0.0);
        if best.as_ref().is_none_or(|c| error < c.error) {
            best = Some(ColumnFit {
                coef,
                beta: b,
                kkt: fit.kkt_violation,
                error,
            });
        }
    }
    Ok(best.expect("non-empty beta grid"))
}

/// Fits an unsupervised sparse projection with `n_tilde` columns.
pub fn fit_spg(
    x: &DMatrix<f64>,
    n_tilde: usize,
    params: &SpgParams,
) -> Result<(SpgModel, SpgReport)> {
    let n = x.ncols();
    let k = params.k_sparsity.unwrap_or(n);
    if k == 0 {
        return Err(Error::invalid("k_sparsity must be at least 1"));
    }
    let graph = knn_graph(x, params.graph_k)?;
    let emb = solve_embedding(x, &graph, n_tilde)?;
    let columns = (0..n_tilde)
        .into_par_iter()
        .map(|c| {
            let target: Vec<f64> = emb.embedded.column(c).iter().copied().collect();
            fit_column(x, &target, k, params.beta)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut matrix = DMatrix::zeros(n, n_tilde);
    for (c, col) in columns.iter().enumerate() {
        for (j, v) in col.coef.iter().enumerate() {
            matrix[(j, c)] = *v;
        }
    }
    let model = SpgModel {
        matrix,
        betas: columns.iter().map(|c| c.beta).collect(),
        k_sparsity: k.min(n),
        graph_k: params.graph_k,
    };
    let report = SpgReport {
        eigenvalues: emb.eigenvalues,
        residuals: emb.residuals,
        kkt_violations: columns.iter().map(|c| c.kkt).collect(),
        reconstruction_errors: columns.iter().map(|c| c.error).collect(),
    };
    Ok((model, report))
}

/// Projects every row of `x`.
pub fn project_spg(model: &SpgModel, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim(model.n(), x.ncols())?;
    Ok(x * &model.matrix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn collinear_knn() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 1.0, 3.0, 1.0]);
        let g = knn_graph(&x, 1).unwrap();
        let w = g.to_dense();
        assert!(w[(1, 0)] > 0.0 && w[(1, 2)] > 0.0);
        assert_eq!(w, w.transpose());
        assert!((0..3).all(|i| w[(i, i)] == 0.0));
    }

    #[test]
    fn knn_counts() {
        let x = gaussian(40, 3, 1);
        let nn = knn_indices(&x, 4).unwrap();
        assert!(nn.iter().all(|l| l.len() == 4));
        assert!(knn_indices(&x, 40).is_err());
    }

    #[test]
    fn eigen_residuals_small() {
        let x = gaussian(20, 8, 2);
        let g = knn_graph(&x, 5).unwrap();
        let emb = solve_embedding(&x, &g, 3).unwrap();
        assert!(
            emb.residuals.iter().all(|r| *r <= 1e-6),
            "{:?}",
            emb.residuals
        );
        assert!(emb.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn constant_direction_has_zero_eigenvalue() {
        let mut x = gaussian(30, 4, 3);
        x = x.insert_column(4, 1.0);
        let g = knn_graph(&x, 6).unwrap();
        let emb = solve_embedding(&x, &g, 1).unwrap();
        assert!(emb.eigenvalues[0].abs() < 1e-8, "{}", emb.eigenvalues[0]);
    }

    #[test]
    fn lasso_single_feature() {
        // objective (1-a)^2 + (1-a)^2 + |a| has its minimum at a = 3/4
        let x = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let fit = lasso_fit(&x, &[1.0, 1.0], 1.0).unwrap();
        assert!((fit.coefficients[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn lasso_zero_and_least_squares() {
        let x = gaussian(30, 4, 4);
        let y: Vec<f64> = gaussian(30, 1, 5).iter().copied().collect();
        let xty = x.transpose() * nalgebra::DVector::from_column_slice(&y);
        let fit = lasso_fit(&x, &y, 2.0 * xty.amax()).unwrap();
        assert!(fit.coefficients.iter().all(|v| *v == 0.0));

        let sq = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let fit = lasso_fit(&sq, &[3.0, 5.0], 0.0).unwrap();
        assert!((fit.coefficients[0] - 0.8).abs() < 1e-8);
        assert!((fit.coefficients[1] - 1.4).abs() < 1e-8);
    }

    #[test]
    fn sparsity_and_consistency() {
        let x = gaussian(60, 6, 6);
        let params = SpgParams {
            graph_k: 5,
            k_sparsity: Some(2),
            beta: None,
        };
        let (model, _) = fit_spg(&x, 3, &params).unwrap();
        assert!((0..3).all(|c| model.nonzeros(c) <= 2));

        let dense = SpgParams {
            graph_k: 5,
            k_sparsity: None,
            beta: Some(1e-10),
        };
        let (model, _) = fit_spg(&x, 2, &dense).unwrap();
        let emb = solve_embedding(&x, &knn_graph(&x, 5).unwrap(), 2).unwrap();
        let y = project_spg(&model, &x).unwrap();
        let rel = (&y - &emb.embedded).norm() / emb.embedded.norm();
        assert!(rel < 1e-3, "{rel}");
        let (again, _) = fit_spg(&x, 2, &dense).unwrap();
        assert_eq!(again, model);
    }

    #[test]
    fn row_order_does_not_change_eigenvalues() {
        let x = gaussian(25, 5, 12);
        let reversed = DMatrix::from_fn(25, 5, |i, j| x[(24 - i, j)]);
        let a = solve_embedding(&x, &knn_graph(&x, 4).unwrap(), 3).unwrap();
        let b = solve_embedding(&reversed, &knn_graph(&reversed, 4).unwrap(), 3).unwrap();
        for (u, v) in a.eigenvalues.iter().zip(&b.eigenvalues) {
            assert!((u - v).abs() < 1e-9 * u.abs().max(1.0), "{u} vs {v}");
        }
    }
}
