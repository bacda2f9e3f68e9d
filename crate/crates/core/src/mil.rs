//! Coarse tier: MAP-trained multiple-instance logistic regression and
//! score-threshold pruning.
//!
//! An instance is positive with probability `sigmoid(a . [x; 1])`; a lesion
//! bag is positive with the noisy-OR of its instances. Training maximizes
//! the bag log-likelihood plus a Gaussian log-prior on the non-bias
//! coefficients with damped Newton-Raphson steps.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{check_dim, Error, Result};

/// Numerically stable logistic function.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t)`, i.e. `-ln(1 - sigmoid(t))`.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilModel {
    /// `n` feature weights followed by the bias.
    pub coefficients: Vec<f64>,
    pub prior_sigma2: f64,
}

impl MilModel {
    pub fn zeros(n: usize, prior_sigma2: f64) -> Self {
        MilModel {
            coefficients: vec![0.0; n + 1],
            prior_sigma2,
        }
    }

    pub fn n_features(&self) -> usize {
        self.coefficients.len() - 1
    }

    fn linear(&self, x: &[f64]) -> f64 {
        let n = self.n_features();
        x.iter()
            .zip(&self.coefficients[..n])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + self.coefficients[n]
    }

    pub fn instance_prob(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.n_features(), x.len())?;
        Ok(sigmoid(self.linear(x)))
    }

    /// Noisy-OR probability that at least one instance in the bag is positive.
    pub fn bag_prob(&self, bag: &[&[f64]]) -> Result<f64> {
        if bag.is_empty() {
            return Err(Error::invalid("bag_prob of an empty bag"));
        }
        let mut s = 0.0;
        let mut top = 0.0f64;
        for x in bag {
            check_dim(self.n_features(), x.len())?;
            let t = self.linear(x);
            s += softplus(t);
            top = top.max(sigmoid(t));
        }
        // the log-space product can round just below its largest member
        Ok((-(-s).exp_m1()).max(top))
    }

    /// Instance probabilities for every sample of `ds`.
    pub fn scores(&self, ds: &Dataset) -> Result<Vec<f64>> {
        check_dim(self.n_features(), ds.n_features())?;
        Ok(ds
            .samples()
            .iter()
            .map(|s| sigmoid(self.linear(&s.features)))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Initial Levenberg damping added to the negated Hessian.
    pub ridge_on_hessian: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            max_iters: 200,
            grad_tol: 1e-6,
            ridge_on_hessian: 0.0,
        }
    }
}

pub const DEFAULT_PRIOR_SIGMA2: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Log-posterior at the start and after every accepted step.
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

/// The MAP objective over a fixed dataset: positive instances grouped into
/// noisy-OR bags by `bag_id`, every negative a singleton bag.
#[derive(Debug, Clone)]
pub struct MilProblem {
    /// Rows are `[x; 1]`.
    design: DMatrix<f64>,
    positive_bags: Vec<Vec<usize>>,
    negatives: Vec<usize>,
    prior_sigma2: f64,
}

impl MilProblem {
    pub fn new(ds: &Dataset, prior_sigma2: f64) -> Result<Self> {
        if !(prior_sigma2 > 0.0 && prior_sigma2.is_finite()) {
            return Err(Error::invalid("prior_sigma2 must be positive and finite"));
        }
        let n = ds.n_features();
        let mut design = DMatrix::zeros(ds.len(), n + 1);
        let mut bags: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
        let mut negatives = Vec::new();
        for (i, s) in ds.samples().iter().enumerate() {
            for (j, v) in s.features.iter().enumerate() {
                design[(i, j)] = *v;
            }
            design[(i, n)] = 1.0;
            if s.is_positive() {
                let bag = s.bag_id.as_deref().unwrap_or_default();
                bags.entry((s.case_id.as_str(), bag)).or_default().push(i);
            } else {
                negatives.push(i);
            }
        }
        if bags.is_empty() || negatives.is_empty() {
            return Err(Error::data("training data must contain both classes"));
        }
        Ok(MilProblem {
            design,
            positive_bags: bags.into_values().collect(),
            negatives,
            prior_sigma2,
        })
    }

    pub fn dim(&self) -> usize {
        self.design.ncols()
    }

    fn check(&self, a: &DVector<f64>) -> Result<()> {
        check_dim(self.dim(), a.len())
    }

    /// Log-posterior up to an additive constant.
    pub fn log_posterior(&self, a: &DVector<f64>) -> Result<f64> {
        self.check(a)?;
        let t = &self.design * a;
        let mut value = 0.0;
        for &i in &self.negatives {
            value -= softplus(t[i]);
        }
        for bag in &self.positive_bags {
            let s: f64 = bag.iter().map(|&i| softplus(t[i])).sum();
            value += (-(-s).exp_m1()).ln();
        }
        let w = a.rows(0, self.dim() - 1);
        value -= w.norm_squared() / (2.0 * self.prior_sigma2);
        Ok(value)
    }

    pub fn gradient(&self, a: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.derivatives(a, false)?.0)
    }

    pub fn hessian(&self, a: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.derivatives(a, true)?.1)
    }

    fn derivatives(
        &self,
        a: &DVector<f64>,
        want_hessian: bool,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.check(a)?;
        let d = self.dim();
        let t = &self.design * a;
        let mut g = DVector::zeros(d);
        let mut h = if want_hessian {
            DMatrix::zeros(d, d)
        } else {
            DMatrix::zeros(0, 0)
        };
        for &i in &self.negatives {
            let p = sigmoid(t[i]);
            let x = self.design.row(i).transpose();
            g.axpy(-p, &x, 1.0);
            if want_hessian {
                h.ger(-p * (1.0 - p), &x, &x, 1.0);
            }
        }
        for bag in &self.positive_bags {
            let s: f64 = bag.iter().map(|&i| softplus(t[i])).sum();
            let em1 = s.exp_m1();
            let c = 1.0 / em1;
            let mut u = DVector::zeros(d);
            for &i in bag {
                let p = sigmoid(t[i]);
                let x = self.design.row(i).transpose();
                u.axpy(p, &x, 1.0);
                if want_hessian {
                    h.ger(c * p * (1.0 - p), &x, &x, 1.0);
                }
            }
            g.axpy(c, &u, 1.0);
            if want_hessian {
                // e^s / expm1(s)^2 written to avoid overflow
                let k = 1.0 / (em1 * -(-s).exp_m1());
                h.ger(-k, &u, &u, 1.0);
            }
        }
        let inv = 1.0 / self.prior_sigma2;
        for j in 0..d - 1 {
            g[j] -= a[j] * inv;
            if want_hessian {
                h[(j, j)] -= inv;
            }
        }
        Ok((g, h))
    }
}

/// Damped Newton ascent direction: solves `(-H + lambda I) dir = g`,
/// growing `lambda` until the system is positive definite.
fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>, ridge: f64) -> Result<DVector<f64>> {
    let d = g.len();
    let neg_h = -h;
    let scale = neg_h
        .diagonal()
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max)
        .max(1e-12);
    let mut lambda = ridge;
    for _ in 0..60 {
        let mut m = neg_h.clone();
        for j in 0..d {
            m[(j, j)] += lambda;
        }
        if let Some(chol) = m.cholesky() {
            let dir = chol.solve(g);
            if dir.iter().all(|v| v.is_finite()) {
                return Ok(dir);
            }
        }
        lambda = if lambda == 0.0 {
            1e-10 * scale
        } else {
            lambda * 10.0
        };
    }
    Err(Error::numerical("could not regularize Newton system"))
}

const MAX_HALVINGS: usize = 30;

/// MAP training by Newton-Raphson with backtracking line search.
pub fn train_map(
    ds: &Dataset,
    prior_sigma2: f64,
    opts: &TrainOptions,
) -> Result<(MilModel, TrainReport)> {
    if !(opts.grad_tol > 0.0) {
        return Err(Error::invalid("grad_tol must be positive"));
    }
    let problem = MilProblem::new(ds, prior_sigma2)?;
    let mut a = DVector::zeros(problem.dim());
    let mut f = problem.log_posterior(&a)?;
    let mut report = TrainReport {
        objective: vec![f],
        iterations: 0,
        grad_norm: f64::INFINITY,
        converged: false,
    };
    for iter in 0..opts.max_iters {
        let (g, h) = problem.derivatives(&a, true)?;
        report.grad_norm = g.norm();
        report.iterations = iter;
        if report.grad_norm <= opts.grad_tol {
            report.converged = true;
            break;
        }
        let dir = newton_direction(&h, &g, opts.ridge_on_hessian)?;
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let trial = &a + &dir * step;
            let ft = problem.log_posterior(&trial)?;
            if !ft.is_finite() {
                return Err(Error::numerical(
                    "non-finite log-posterior during line search",
                ));
            }
            if ft >= f {
                a = trial;
                f = ft;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // no ascent possible at machine precision
            break;
        }
        report.objective.push(f);
        report.iterations = iter + 1;
    }
    if !report.converged {
        let g = problem.gradient(&a)?;
        report.grad_norm = g.norm();
        report.converged = report.grad_norm <= opts.grad_tol;
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite coefficients"));
    }
    Ok((
        MilModel {
            coefficients: a.iter().copied().collect(),
            prior_sigma2,
        },
        report,
    ))
}

/// Cascade threshold: candidates with instance probability `< rho` are pruned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub rho: f64,
}

impl PruneConfig {
    pub fn new(rho: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::invalid(format!("rho must lie in [0,1], got {rho}")));
        }
        Ok(PruneConfig { rho })
    }
}

/// Largest `rho` whose instance-level recall on positives is at least
/// `target_recall`.
pub fn choose_threshold(ds: &Dataset, model: &MilModel, target_recall: f64) -> Result<PruneConfig> {
    if !(target_recall > 0.0 && target_recall <= 1.0) {
        return Err(Error::invalid("target_recall must lie in (0,1]"));
    }
    let scores = model.scores(ds)?;
    let mut pos: Vec<f64> = ds
        .samples()
        .iter()
        .zip(&scores)
        .filter(|(s, _)| s.is_positive())
        .map(|(_, &p)| p)
        .collect();
    if pos.is_empty() {
        return Err(Error::data("choose_threshold needs at least one positive"));
    }
    pos.sort_by(|a, b| b.total_cmp(a));
    let needed = ((target_recall * pos.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    PruneConfig::new(pos[needed.min(pos.len()) - 1])
}

/// Keeps exactly the samples whose instance probability is `>= rho`.
pub fn prune(ds: &Dataset, model: &MilModel, cfg: &PruneConfig) -> Result<Dataset> {
    let scores = model.scores(ds)?;
    let mut it = scores.iter();
    Ok(ds.filter(|_| *it.next().expect("one score per sample") >= cfg.rho))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Sample;

    fn toy_1d() -> Dataset {
        let mut samples = Vec::new();
        for i in 0..20u64 {
            let positive = i % 2 == 0;
            samples.push(Sample {
                candidate_id: i,
                case_id: format!("c{}", i / 4),
                bag_id: positive.then(|| format!("b{i}")),
                label: positive as u8,
                features: vec![if positive { 1.0 } else { -1.0 } + 0.01 * i as f64],
            });
        }
        Dataset::new(vec!["x".into()], samples).unwrap()
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(1.0 - sigmoid(40.0) < 1e-17);
        assert!((sigmoid(1.0) - 0.7310585786300049).abs() < 1e-15);
        assert!(sigmoid(-700.0) > 0.0 && sigmoid(700.0) <= 1.0);
        assert!((sigmoid(-3.0) + sigmoid(3.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn instance_and_bag_probabilities() {
        let zero = MilModel::zeros(3, 1.0);
        assert_eq!(zero.instance_prob(&[5.0, -2.0, 1.0]).unwrap(), 0.5);
        let m = MilModel {
            coefficients: vec![1.0, 0.0, 0.0, 0.0],
            prior_sigma2: 1.0,
        };
        assert!((m.instance_prob(&[1.0, 0.0, 0.0]).unwrap() - 0.7310585786300049).abs() < 1e-12);
        assert!(m.instance_prob(&[1.0]).is_err());

        let x = [0.0, 0.0, 0.0];
        assert!((zero.bag_prob(&[&x, &x]).unwrap() - 0.75).abs() < 1e-15);
        let single = [2.0, 1.0, 1.0];
        assert!(
            (m.bag_prob(&[&single]).unwrap() - m.instance_prob(&single).unwrap()).abs() < 1e-15
        );
        let huge = [800.0, 0.0, 0.0];
        assert_eq!(m.bag_prob(&[&huge, &x]).unwrap(), 1.0);
        assert!(m.bag_prob(&[]).is_err());
    }

    #[test]
    fn separable_training_ranks_perfectly() {
        let ds = toy_1d();
        let (model, report) =
            train_map(&ds, DEFAULT_PRIOR_SIGMA2, &TrainOptions::default()).unwrap();
        assert!(report.converged, "{report:?}");
        assert!(report.objective.windows(2).all(|w| w[1] >= w[0]));
        let scores = model.scores(&ds).unwrap();
        let auc = crate::eval::roc_auc(&scores, &ds.labels()).unwrap();
        assert!(auc >= 0.999);
    }

    #[test]
    fn single_class_rejected() {
        let ds = toy_1d().filter(|s| s.is_positive());
        assert!(matches!(
            train_map(&ds, 1.0, &TrainOptions::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn stronger_prior_shrinks_weights() {
        let ds = toy_1d();
        let mut last = f64::INFINITY;
        for s2 in [10.0, 1.0, 0.1, 0.01, 0.001] {
            let (m, _) = train_map(&ds, s2, &TrainOptions::default()).unwrap();
            let w = m.coefficients[0].abs();
            assert!(w < last, "sigma2={s2}: {w} !< {last}");
            last = w;
        }
        assert!(last < 0.05);
    }

    #[test]
    fn threshold_and_prune() {
        let ds = toy_1d();
        let (m, _) = train_map(&ds, 1.0, &TrainOptions::default()).unwrap();
        let cfg = choose_threshold(&ds, &m, 1.0).unwrap();
        let scores = m.scores(&ds).unwrap();
        let min_pos = ds
            .samples()
            .iter()
            .zip(&scores)
            .filter(|(s, _)| s.is_positive())
            .map(|(_, p)| *p)
            .fold(f64::INFINITY, f64::min);
        assert!(cfg.rho <= min_pos);
        let kept = prune(&ds, &m, &cfg).unwrap();
        assert_eq!(kept.n_positive(), ds.n_positive());

        assert_eq!(prune(&ds, &m, &PruneConfig::new(0.0).unwrap()).unwrap(), ds);
        let none = prune(&ds, &m, &PruneConfig::new(1.0).unwrap()).unwrap();
        assert!(none
            .samples()
            .iter()
            .all(|s| m.instance_prob(&s.features).unwrap() >= 1.0));
        assert!(PruneConfig::new(1.5).is_err());

        let mut last = usize::MAX;
        for k in 0..=20 {
            let kept = prune(&ds, &m, &PruneConfig::new(k as f64 / 20.0).unwrap())
                .unwrap()
                .len();
            assert!(kept <= last);
            last = kept;
        }
    }
}
