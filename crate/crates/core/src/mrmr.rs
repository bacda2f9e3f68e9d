//! Maximum-relevance minimum-redundancy feature selection with absolute
//! Pearson correlation as both the relevance and the redundancy measure.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{check_dim, Error, Result};

/// Absolute Pearson correlation `|cov(f,g)| / sqrt(var f var g)` using
/// population moments; 0 when either variance vanishes.
pub fn pearson(f: &[f64], g: &[f64]) -> Result<f64> {
    check_dim(f.len(), g.len())?;
    if f.len() < 2 {
        return Err(Error::invalid("pearson needs at least two observations"));
    }
    let n = f.len() as f64;
    let mf = f.iter().sum::<f64>() / n;
    let mg = g.iter().sum::<f64>() / n;
    let (mut cov, mut vf, mut vg) = (0.0, 0.0, 0.0);
    for (a, b) in f.iter().zip(g) {
        let (da, db) = (a - mf, b - mg);
        cov += da * db;
        vf += da * da;
        vg += db * db;
    }
    if vf <= 0.0 || vg <= 0.0 {
        return Ok(0.0);
    }
    Ok((cov.abs() / (vf * vg).sqrt()).min(1.0))
}

/// How the pairwise redundancy average treats the `i == j` terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Redundancy {
    /// Average over all `m^2` ordered pairs, diagonal included.
    #[default]
    Inclusive,
    /// Average over the `m(m-1)` off-diagonal pairs (0 for a singleton).
    Exclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub selected: Vec<usize>,
    /// Objective value after each accepted feature.
    pub kappa_trajectory: Vec<f64>,
    pub stopped_early: bool,
}

/// Relevance of every feature and the full feature correlation matrix.
#[derive(Debug, Clone)]
pub struct Correlations {
    pub relevance: Vec<f64>,
    pub pairwise: Vec<Vec<f64>>,
}

impl Correlations {
    pub fn compute(ds: &Dataset) -> Result<Self> {
        let labels: Vec<f64> = ds.samples().iter().map(|s| s.label as f64).collect();
        let columns: Vec<Vec<f64>> = (0..ds.n_features()).map(|j| ds.column(j)).collect();
        let relevance = columns
            .par_iter()
            .map(|c| pearson(c, &labels))
            .collect::<Result<Vec<_>>>()?;
        let n = columns.len();
        let pairwise = (0..n)
            .into_par_iter()
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if i == j {
                            Ok(1.0)
                        } else {
                            pearson(&columns[i], &columns[j])
                        }
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Correlations {
            relevance,
            pairwise,
        })
    }

    pub fn objective(&self, subset: &[usize], mode: Redundancy) -> Result<f64> {
        if subset.is_empty() {
            return Err(Error::invalid("objective of an empty feature subset"));
        }
        let m = subset.len() as f64;
        let relevance = subset.iter().map(|&f| self.relevance[f]).sum::<f64>() / m;
        let mut pair_sum = 0.0;
        for &a in subset {
            for &b in subset {
                if mode == Redundancy::Exclusive && a == b {
                    continue;
                }
                pair_sum += self.pairwise[a][b];
            }
        }
        let pairs = match mode {
            Redundancy::Inclusive => m * m,
            Redundancy::Exclusive => m * (m - 1.0),
        };
        let redundancy = if pairs > 0.0 { pair_sum / pairs } else { 0.0 };
        Ok(relevance - redundancy)
    }
}

/// Mean label relevance minus mean pairwise redundancy of `subset`.
pub fn mrmr_objective(ds: &Dataset, subset: &[usize], mode: Redundancy) -> Result<f64> {
    if let Some(&bad) = subset.iter().find(|&&f| f >= ds.n_features()) {
        return Err(Error::invalid(format!("feature index {bad} out of range")));
    }
    Correlations::compute(ds)?.objective(subset, mode)
}

/// Greedy forward selection.
///
/// The first feature maximizes relevance; each later feature maximizes
/// relevance minus its mean correlation with the already selected ones.
/// Selection stops as soon as adding the best candidate would not strictly
/// increase the objective, or when `max_m` features are selected. Ties go
/// to the lowest index.
pub fn select(ds: &Dataset, max_m: usize, mode: Redundancy) -> Result<SelectionResult> {
    let n = ds.n_features();
    if max_m == 0 || max_m > n {
        return Err(Error::invalid(format!(
            "max_m must lie in 1..={n}, got {max_m}"
        )));
    }
    let labels = ds.labels();
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::data("feature selection needs both classes"));
    }
    let corr = Correlations::compute(ds)?;
    select_with(&corr, max_m, mode)
}

pub fn select_with(corr: &Correlations, max_m: usize, mode: Redundancy) -> Result<SelectionResult> {
    let n = corr.relevance.len();
    let mut selected: Vec<usize> = Vec::new();
    let mut in_set = vec![false; n];
    // running sum of correlations with the selected set, per feature
    let mut redundancy_sum = vec![0.0; n];
    let mut kappa_trajectory = Vec::new();
    let mut stopped_early = false;
    while selected.len() < max_m {
        let m = selected.len();
        let mut best: Option<(usize, f64)> = None;
        for f in (0..n).filter(|&f| !in_set[f]) {
            let score = if m == 0 {
                corr.relevance[f]
            } else {
                corr.relevance[f] - redundancy_sum[f] / m as f64
            };
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((f, score));
            }
        }
        let Some((f, _)) = best else { break };
        selected.push(f);
        let kappa = corr.objective(&selected, mode)?;
        if let Some(&prev) = kappa_trajectory.last() {
            if kappa <= prev {
                selected.pop();
                stopped_early = true;
                break;
            }
        }
        kappa_trajectory.push(kappa);
        in_set[f] = true;
        for (g, r) in redundancy_sum.iter_mut().enumerate() {
            *r += corr.pairwise[g][f];
        }
    }
    Ok(SelectionResult {
        selected,
        kappa_trajectory,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Sample;

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(pearson(&[1.0, 2.0, 3.0], &[1.0, 0.0, 1.0]).unwrap().abs() < 1e-15);
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 0.0, 1.0]).unwrap(), 0.0);
        assert!(pearson(&[1.0, 2.0], &[1.0]).is_err());
    }

    fn dataset(columns: &[Vec<f64>], labels: &[u8]) -> Dataset {
        let samples = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| Sample {
                candidate_id: i as u64,
                case_id: "c".into(),
                bag_id: (l == 1).then(|| format!("b{i}")),
                label: l,
                features: columns.iter().map(|c| c[i]).collect(),
            })
            .collect();
        Dataset::new(
            (0..columns.len()).map(|j| format!("f{j}")).collect(),
            samples,
        )
        .unwrap()
    }

    #[test]
    fn singleton_and_duplicate_objective() {
        let labels = [0, 1, 0, 1, 1, 0];
        let f = vec![0.1, 0.9, 0.3, 0.7, 0.4, 0.2];
        let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        let ds = dataset(&[f.clone(), f.clone()], &labels);
        let rel = pearson(&f, &y).unwrap();
        let single = mrmr_objective(&ds, &[0], Redundancy::Inclusive).unwrap();
        assert!((single - (rel - 1.0)).abs() < 1e-12);
        let dup = mrmr_objective(&ds, &[0, 1], Redundancy::Inclusive).unwrap();
        assert!((dup - (rel - 1.0)).abs() < 1e-12);
        let excl = mrmr_objective(&ds, &[0], Redundancy::Exclusive).unwrap();
        assert!((excl - rel).abs() < 1e-12);
        assert!(mrmr_objective(&ds, &[], Redundancy::Inclusive).is_err());
    }

    #[test]
    fn duplicate_is_not_picked_second() {
        let labels: Vec<u8> = (0..12).map(|i| (i % 3 == 0) as u8).collect();
        let informative: Vec<f64> = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| l as f64 + 0.05 * i as f64)
            .collect();
        let noise = vec![
            0.3, -1.2, 0.8, 0.1, -0.4, 1.5, -0.9, 0.2, 0.6, -0.3, 1.1, -0.7,
        ];
        let ds = dataset(&[noise, informative.clone(), informative], &labels);
        let r = select(&ds, 3, Redundancy::Inclusive).unwrap();
        assert_eq!(r.selected[0], 1);
        assert_ne!(r.selected.get(1), Some(&2));
        assert!(r.kappa_trajectory.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn constant_labels_rejected() {
        let ds = dataset(&[vec![1.0, 2.0, 3.0]], &[0, 0, 0]);
        assert!(matches!(
            select(&ds, 1, Redundancy::Inclusive),
            Err(Error::Data(_))
        ));
        let ds = dataset(&[vec![1.0, 2.0, 3.0]], &[0, 1, 0]);
        assert!(select(&ds, 2, Redundancy::Inclusive).is_err());
    }
}
