//! Per-class template extraction in the embedded space.
//!
//! Each class is partitioned by hard clustering under the total square loss
//! `delta(z, y) = ||z - y||^2 / sqrt(1 + 4 ||y||^2)`; cluster centers are
//! t-centers, weighted means that discount points far from the origin.
//! The cluster count per class minimizes the intra/inter validity index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn tbd_weight(y: &[f64]) -> f64 {
    1.0 / (1.0 + 4.0 * y.iter().map(|v| v * v).sum::<f64>()).sqrt()
}

/// Total square loss `||y1 - y2||^2 / sqrt(1 + 4 ||y2||^2)`.
pub fn total_square_loss(y1: &[f64], y2: &[f64]) -> Result<f64> {
    check_dim(y1.len(), y2.len())?;
    Ok(sq_dist(y1, y2) * tbd_weight(y2))
}

/// Minimizer of `sum_i delta(z, y_i)`: the mean weighted by
/// `1 / sqrt(1 + 4 ||y_i||^2)`.
pub fn t_center<P: AsRef<[f64]>>(points: &[P]) -> Result<Vec<f64>> {
    let first = points
        .first()
        .ok_or_else(|| Error::invalid("t_center of an empty set"))?;
    let dim = first.as_ref().len();
    let mut acc = vec![0.0; dim];
    let mut total = 0.0;
    for p in points {
        let p = p.as_ref();
        check_dim(dim, p.len())?;
        let w = tbd_weight(p);
        total += w;
        for (a, v) in acc.iter_mut().zip(p) {
            *a += w * v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= total);
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterOptions {
    /// Largest cluster count tried per class.
    pub c_max: usize,
    pub max_iters: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        ClusterOptions {
            c_max: 10,
            max_iters: 100,
            restarts: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    /// Assignment cost after every iteration.
    pub objective_trajectory: Vec<f64>,
}

impl Clustering {
    pub fn objective(&self) -> f64 {
        *self
            .objective_trajectory
            .last()
            .expect("non-empty trajectory")
    }
}

/// Nearest center under `delta(center, y)`; the denominator depends only on
/// `y`, so this is the Euclidean nearest center (ties to lower index).
fn assign(points: &[Vec<f64>], centers: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    points
        .iter()
        .map(|p| {
            let (best, d) = centers
                .iter()
                .enumerate()
                .map(|(c, z)| (c, sq_dist(z, p)))
                .fold(
                    (0, f64::INFINITY),
                    |acc, cur| if cur.1 < acc.1 { cur } else { acc },
                );
            (best, d * tbd_weight(p))
        })
        .unzip()
}

fn seed_centers(points: &[Vec<f64>], c: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut cost: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(&centers[0], p) * tbd_weight(p))
        .collect();
    while centers.len() < c {
        let total: f64 = cost.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, w) in cost.iter().enumerate() {
                if u < *w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        let z = points[pick].clone();
        for (k, p) in points.iter().enumerate() {
            cost[k] = cost[k].min(sq_dist(&z, p) * tbd_weight(p));
        }
        centers.push(z);
    }
    centers
}

fn lloyd(points: &[Vec<f64>], c: usize, max_iters: usize, rng: &mut ChaCha8Rng) -> Clustering {
    let mut centers = seed_centers(points, c, rng);
    let (mut assignments, mut cost) = assign(points, &centers);
    let mut trajectory = vec![cost.iter().sum::<f64>()];
    for _ in 0..max_iters {
        let mut members: Vec<Vec<&Vec<f64>>> = vec![Vec::new(); c];
        for (p, &a) in points.iter().zip(&assignments) {
            members[a].push(p);
        }
        for (k, m) in members.iter().enumerate() {
            if m.is_empty() {
                // reseed from the point currently paying the most
                let far = cost
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, v)| if *v > cost[best] { i } else { best });
                centers[k] = points[far].clone();
                cost[far] = 0.0;
            } else {
                centers[k] = t_center(m).expect("non-empty cluster");
            }
        }
        let (next, next_cost) = assign(points, &centers);
        trajectory.push(next_cost.iter().sum());
        let unchanged = next == assignments;
        assignments = next;
        cost = next_cost;
        if unchanged {
            break;
        }
    }
    Clustering {
        assignments,
        centers,
        objective_trajectory: trajectory,
    }
}

/// Hard clustering under the total square loss; best of `opts.restarts`
/// seeded runs (ties to the earliest run).
pub fn hard_cluster(points: &[Vec<f64>], c: usize, opts: &ClusterOptions) -> Result<Clustering> {
    if c == 0 || c > points.len() {
        return Err(Error::invalid(format!(
            "cannot form {c} clusters from {} points",
            points.len()
        )));
    }
    let dim = points[0].len();
    for p in points {
        check_dim(dim, p.len())?;
    }
    let runs: Vec<Clustering> = (0..opts.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(r as u64));
            lloyd(points, c, opts.max_iters, &mut rng)
        })
        .collect();
    Ok(runs
        .into_iter()
        .reduce(|best, run| {
            if run.objective() < best.objective() {
                run
            } else {
                best
            }
        })
        .expect("at least one restart"))
}

/// Intra-inter validity index: mean squared distance of points to their
/// centers divided by the smallest squared distance between two centers.
pub fn validity_index(
    points: &[Vec<f64>],
    assignments: &[usize],
    centers: &[Vec<f64>],
) -> Result<f64> {
    if centers.len() < 2 {
        return Err(Error::invalid("validity index needs at least two centers"));
    }
    check_dim(points.len(), assignments.len())?;
    if points.is_empty() {
        return Err(Error::invalid("validity index of an empty point set"));
    }
    let mut intra = 0.0;
    for (p, &a) in points.iter().zip(assignments) {
        let z = centers
            .get(a)
            .ok_or_else(|| Error::invalid(format!("assignment {a} has no center")))?;
        intra += sq_dist(p, z);
    }
    intra /= points.len() as f64;
    let mut inter = f64::INFINITY;
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            inter = inter.min(sq_dist(&centers[i], &centers[j]));
        }
    }
    if inter == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(intra / inter)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub label: u8,
    pub member_count: usize,
    pub center: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub templates: Vec<Template>,
    pub c_neg: usize,
    pub c_pos: usize,
}

impl TemplateSet {
    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.templates.first().map_or(0, |t| t.center.len())
    }

    /// Largest template norm, or 1 when every template sits at the origin.
    pub fn scale(&self) -> f64 {
        let s = self
            .templates
            .iter()
            .map(|t| t.center.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }
}

fn cluster_class(points: &[Vec<f64>], opts: &ClusterOptions, seed: u64) -> Result<Clustering> {
    let class_opts = ClusterOptions {
        seed,
        ..opts.clone()
    };
    if points.len() < 4 {
        return hard_cluster(points, 1, &class_opts);
    }
    let c_hi = opts.c_max.min(points.len() / 3).max(2);
    let fits = (2..=c_hi)
        .into_par_iter()
        .map(|c| {
            let cl = hard_cluster(points, c, &class_opts)?;
            let idx = validity_index(points, &cl.assignments, &cl.centers)?;
            Ok((idx, cl))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(fits
        .into_iter()
        .reduce(|best, cur| if cur.0 < best.0 { cur } else { best })
        .expect("non-empty cluster range")
        .1)
}

/// Clusters each class separately and returns labeled t-center templates,
/// negatives first.
pub fn build_templates(
    points: &[Vec<f64>],
    labels: &[u8],
    opts: &ClusterOptions,
) -> Result<TemplateSet> {
    check_dim(points.len(), labels.len())?;
    let mut templates = Vec::new();
    let mut counts = [0usize; 2];
    for class in [0u8, 1] {
        let members: Vec<Vec<f64>> = points
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == class)
            .map(|(p, _)| p.clone())
            .collect();
        if members.is_empty() {
            return Err(Error::data(format!(
                "class {class} has no samples to build templates from"
            )));
        }
        let seed = opts.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(class as u64 + 1));
        let cl = cluster_class(&members, opts, seed)?;
        counts[class as usize] = cl.centers.len();
        for (k, center) in cl.centers.into_iter().enumerate() {
            let member_count = cl.assignments.iter().filter(|&&a| a == k).count();
            if !center.iter().all(|v| v.is_finite()) {
                return Err(Error::numerical("non-finite template center"));
            }
            templates.push(Template {
                label: class,
                member_count,
                center,
            });
        }
    }
    Ok(TemplateSet {
        templates,
        c_neg: counts[0],
        c_pos: counts[1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn loss_examples() {
        assert_eq!(total_square_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(total_square_loss(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        let v = total_square_loss(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((v - 1.0 / 5f64.sqrt()).abs() < 1e-15);
        assert!(total_square_loss(&[0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn center_examples() {
        assert_eq!(t_center(&[vec![2.0, -1.0]]).unwrap(), vec![2.0, -1.0]);
        assert_eq!(
            t_center(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap(),
            vec![0.0, 0.0]
        );
        let z = t_center(&[vec![0.0, 0.0], vec![3.0, 0.0]]).unwrap();
        let w = 1.0 / 37f64.sqrt();
        assert!((z[0] - 3.0 * w / (1.0 + w)).abs() < 1e-15);
        assert!((z[0] - 0.4235).abs() < 1e-4);
        assert!(t_center::<Vec<f64>>(&[]).is_err());
    }

    fn blobs(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for k in 0..40 {
            let c = if k % 2 == 0 { -4.0 } else { 4.0 };
            let dx: f64 = StandardNormal.sample(&mut rng);
            let dy: f64 = StandardNormal.sample(&mut rng);
            pts.push(vec![c + 0.3 * dx, 0.3 * dy]);
            truth.push(k % 2);
        }
        (pts, truth)
    }

    #[test]
    fn two_blobs_recovered() {
        let (pts, truth) = blobs(1);
        let cl = hard_cluster(&pts, 2, &ClusterOptions::default()).unwrap();
        let flip = cl.assignments[0] != truth[0];
        assert!(cl
            .assignments
            .iter()
            .zip(&truth)
            .all(|(a, t)| (*a != *t) == flip));
        assert!(cl
            .objective_trajectory
            .windows(2)
            .all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn single_cluster_is_t_center() {
        let (pts, _) = blobs(2);
        let cl = hard_cluster(&pts, 1, &ClusterOptions::default()).unwrap();
        let z = t_center(&pts).unwrap();
        assert!(sq_dist(&cl.centers[0], &z) < 1e-24);
        assert!(hard_cluster(&pts, 41, &ClusterOptions::default()).is_err());
    }

    #[test]
    fn validity_examples() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert_eq!(validity_index(&pts, &[0, 1], &pts).unwrap(), 0.0);
        // clusters {0, 2} and {10, 12}: intra = 4 * 1 / 4 = 1, inter = 100
        let pts = vec![vec![0.0], vec![2.0], vec![10.0], vec![12.0]];
        let centers = vec![vec![1.0], vec![11.0]];
        let v = validity_index(&pts, &[0, 0, 1, 1], &centers).unwrap();
        assert!((v - 0.01).abs() < 1e-15);
        let shifted: Vec<Vec<f64>> = pts.iter().map(|p| vec![p[0] + 7.5]).collect();
        let sc: Vec<Vec<f64>> = centers.iter().map(|p| vec![p[0] + 7.5]).collect();
        assert!((validity_index(&shifted, &[0, 0, 1, 1], &sc).unwrap() - v).abs() < 1e-12);
        assert!(validity_index(&pts, &[0, 0, 0, 0], &centers[..1]).is_err());
    }

    #[test]
    fn templates_per_class() {
        let (mut pts, _) = blobs(3);
        let mut labels = vec![1u8; pts.len()];
        pts.push(vec![0.0, 9.0]);
        labels.push(0);
        let set = build_templates(&pts, &labels, &ClusterOptions::default()).unwrap();
        assert_eq!(set.c_pos, 2);
        assert_eq!(set.c_neg, 1);
        assert_eq!(set.templates[0].center, vec![0.0, 9.0]);
        let again = build_templates(&pts, &labels, &ClusterOptions::default()).unwrap();
        assert_eq!(set, again);
        assert!(build_templates(&pts, &vec![1; pts.len()], &ClusterOptions::default()).is_err());
    }
}
