//! Soft kNN voting over class templates, neighbor-count selection and
//! counterpart retrieval in the embedded space.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::eval::{froc, partial_auc};
use crate::templates::TemplateSet;

pub const DEFAULT_EXACT_MATCH_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoteConfig {
    pub k: usize,
    /// Relative to [`TemplateSet::scale`]; closer templates count as exact matches.
    pub exact_match_epsilon: f64,
    /// Plain neighbor counts instead of inverse-distance weights.
    pub counting: bool,
}

impl VoteConfig {
    pub fn new(k: usize) -> Self {
        VoteConfig {
            k,
            exact_match_epsilon: DEFAULT_EXACT_MATCH_EPSILON,
            counting: false,
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Indices sorted by distance to `y`, ties to lower index.
fn ranked(points: impl Iterator<Item = f64>) -> Vec<(usize, f64)> {
    let mut d: Vec<(usize, f64)> = points.enumerate().collect();
    d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    d
}

/// Posterior of the positive class for one embedded sample.
pub fn posterior(templates: &TemplateSet, y: &[f64], cfg: &VoteConfig) -> Result<f64> {
    if templates.is_empty() {
        return Err(Error::invalid("empty template set"));
    }
    check_dim(templates.dim(), y.len())?;
    if cfg.k == 0 || cfg.k > templates.len() {
        return Err(Error::invalid(format!(
            "k must lie in 1..={}, got {}",
            templates.len(),
            cfg.k
        )));
    }
    let order = ranked(templates.templates.iter().map(|t| distance(&t.center, y)));
    Ok(vote(templates, &order[..cfg.k], cfg))
}

fn vote(templates: &TemplateSet, neighbors: &[(usize, f64)], cfg: &VoteConfig) -> f64 {
    let positive = |i: usize| templates.templates[i].label == 1;
    let eps = cfg.exact_match_epsilon * templates.scale();
    let exact: Vec<usize> = neighbors
        .iter()
        .filter(|n| n.1 < eps)
        .map(|n| n.0)
        .collect();
    if !exact.is_empty() {
        return exact.iter().filter(|&&i| positive(i)).count() as f64 / exact.len() as f64;
    }
    if cfg.counting {
        return neighbors.iter().filter(|n| positive(n.0)).count() as f64 / neighbors.len() as f64;
    }
    let total: f64 = neighbors.iter().map(|n| 1.0 / n.1).sum();
    let pos: f64 = neighbors
        .iter()
        .filter(|n| positive(n.0))
        .map(|n| 1.0 / n.1)
        .sum();
    (pos / total).clamp(0.0, 1.0)
}

/// Posteriors for every `k` in `1..=templates.len()` at once.
fn posteriors_all_k(templates: &TemplateSet, y: &[f64], cfg: &VoteConfig) -> Vec<f64> {
    let order = ranked(templates.templates.iter().map(|t| distance(&t.center, y)));
    (1..=templates.len())
        .map(|k| vote(templates, &order[..k], cfg))
        .collect()
}

/// One candidate of the validation set for the cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub case_id: String,
    pub bag_id: Option<String>,
    pub label: u8,
    pub coarse_score: f64,
    /// Embedded features when the candidate survived pruning.
    pub embedded: Option<Vec<f64>>,
}

/// Final cascade score. Survivors are placed in `[rho, 1]` by their fine
/// posterior; pruned candidates keep their coarse score, which lies below `rho`.
pub fn cascade_score(coarse: f64, fine: Option<f64>, rho: f64) -> f64 {
    match fine {
        Some(p) => rho + (1.0 - rho) * p,
        None => coarse,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KChoice {
    pub k: usize,
    /// Partial FROC AUC for `k = 1, 2, ...`.
    pub partial_aucs: Vec<f64>,
}

/// Picks the neighbor count maximizing the partial FROC AUC of the cascade
/// scores over `fp_range` (ties to the smallest `k`).
pub fn choose_k(
    templates: &TemplateSet,
    validation: &[Candidate],
    rho: f64,
    fp_range: (f64, f64),
    cfg: &VoteConfig,
) -> Result<KChoice> {
    if templates.is_empty() {
        return Err(Error::invalid("empty template set"));
    }
    if validation.is_empty() {
        return Err(Error::data("empty validation set"));
    }
    let n_pos = validation.iter().filter(|c| c.label == 1).count();
    if n_pos == 0 || n_pos == validation.len() {
        return Err(Error::data("validation set needs both classes"));
    }
    for c in validation {
        if let Some(e) = &c.embedded {
            check_dim(templates.dim(), e.len())?;
        }
    }
    let fine: Vec<Option<Vec<f64>>> = validation
        .par_iter()
        .map(|c| {
            c.embedded
                .as_ref()
                .map(|e| posteriors_all_k(templates, e, cfg))
        })
        .collect();
    let labels: Vec<u8> = validation.iter().map(|c| c.label).collect();
    let cases: Vec<&str> = validation.iter().map(|c| c.case_id.as_str()).collect();
    let bags: Vec<Option<&str>> = validation.iter().map(|c| c.bag_id.as_deref()).collect();
    let partial_aucs = (0..templates.len())
        .map(|k| {
            let scores: Vec<f64> = validation
                .iter()
                .zip(&fine)
                .map(|(c, f)| cascade_score(c.coarse_score, f.as_ref().map(|p| p[k]), rho))
                .collect();
            let curve = froc(&scores, &labels, &cases, &bags)?;
            partial_auc(&curve, fp_range.0, fp_range.1)
        })
        .collect::<Result<Vec<f64>>>()?;
    let best =
        partial_aucs.iter().enumerate().fold(
            0,
            |best, (i, v)| if *v > partial_aucs[best] { i } else { best },
        );
    Ok(KChoice {
        k: best + 1,
        partial_aucs,
    })
}

/// 0-based rank of the first true counterpart of each query in its
/// distance-sorted gallery.
pub fn match_ranks(
    queries: &[Vec<f64>],
    gallery: &[Vec<f64>],
    truth: &[Vec<usize>],
) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(Error::invalid("empty gallery"));
    }
    check_dim(queries.len(), truth.len())?;
    queries
        .iter()
        .zip(truth)
        .map(|(q, t)| {
            if t.is_empty() || t.iter().any(|&g| g >= gallery.len()) {
                return Err(Error::invalid("every query needs a valid counterpart"));
            }
            let order = ranked(gallery.iter().map(|g| distance(g, q)));
            Ok(order
                .iter()
                .position(|(i, _)| t.contains(i))
                .expect("counterpart in gallery"))
        })
        .collect()
}

/// Fraction of queries with a true counterpart among their `k` nearest
/// gallery items.
pub fn retrieve(
    queries: &[Vec<f64>],
    gallery: &[Vec<f64>],
    truth: &[Vec<usize>],
    k: usize,
) -> Result<f64> {
    let ranks = match_ranks(queries, gallery, truth)?;
    if ranks.is_empty() {
        return Err(Error::invalid("no queries"));
    }
    Ok(ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64)
}

/// `retrieve` for every `k` in `1..=k_max`.
pub fn hit_curve(
    queries: &[Vec<f64>],
    gallery: &[Vec<f64>],
    truth: &[Vec<usize>],
    k_max: usize,
) -> Result<Vec<f64>> {
    let ranks = match_ranks(queries, gallery, truth)?;
    if ranks.is_empty() {
        return Err(Error::invalid("no queries"));
    }
    let n = ranks.len() as f64;
    Ok((1..=k_max)
        .map(|k| ranks.iter().filter(|&&r| r < k).count() as f64 / n)
        .collect())
}
