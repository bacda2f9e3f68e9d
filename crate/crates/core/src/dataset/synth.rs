use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{Error, Result};

/// Class geometry inside the informative latent subspace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    /// Classes separated by a hyperplane with a margin; most negatives far away.
    Linear,
    /// First latent axis carries a linear shift; positives sit on an annulus
    /// over the remaining latent axes, negatives fill its interior.
    Ring,
    /// Each class is a two-component Gaussian mixture.
    Mixture,
}

/// Parameters of the synthetic candidate generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_cases: usize,
    /// Inclusive range of candidates generated per case.
    pub candidates_per_case: (usize, usize),
    pub n_features: usize,
    /// Dimension of the latent class-structured subspace.
    pub n_informative: usize,
    /// Noisy feature columns observed per informative latent axis.
    #[serde(default = "one")]
    pub views_per_informative: usize,
    pub geometry: Geometry,
    pub positive_rate: f64,
    /// Observation noise on informative columns.
    pub noise_sigma: f64,
    pub seed: u64,
}

fn one() -> usize {
    1
}

const LESION_JITTER: f64 = 0.1;
const VIEW_JITTER: f64 = 0.25;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_informative == 0 || self.views_per_informative == 0 {
            return Err(Error::invalid(
                "n_informative and views_per_informative must be positive",
            ));
        }
        if self.n_informative * self.views_per_informative > self.n_features {
            return Err(Error::invalid(format!(
                "{} informative axes x {} views exceed {} features",
                self.n_informative, self.views_per_informative, self.n_features
            )));
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return Err(Error::invalid("positive_rate must lie in (0,1)"));
        }
        let (lo, hi) = self.candidates_per_case;
        if lo == 0 || lo > hi {
            return Err(Error::invalid(
                "candidates_per_case must be a nonempty positive range",
            ));
        }
        if self.n_cases == 0 {
            return Err(Error::invalid("n_cases must be positive"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma must be non-negative"));
        }
        Ok(())
    }

    fn feature_names(&self) -> Vec<String> {
        let width = (self.n_features.max(2) - 1).to_string().len();
        (0..self.n_features)
            .map(|j| format!("f{j:0width$}"))
            .collect()
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn latent(rng: &mut ChaCha8Rng, geometry: Geometry, d: usize, positive: bool) -> Vec<f64> {
    match geometry {
        Geometry::Linear => {
            let w = 1.0 / (d as f64).sqrt();
            let g: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
            let along: f64 = g.iter().sum::<f64>() * w;
            let h = normal(rng).abs();
            let t = if positive {
                0.5 + 0.75 * h
            } else {
                -0.5 - 1.5 * h
            };
            g.iter().map(|gi| gi - along * w + t * w).collect()
        }
        Geometry::Ring => {
            if d == 1 {
                return if positive {
                    let r = rng.random_range(2.0..2.75);
                    vec![if rng.random_bool(0.5) { r } else { -r }]
                } else {
                    vec![normal(rng)]
                };
            }
            let mut z = Vec::with_capacity(d);
            if positive {
                z.push(1.0 + normal(rng));
                let r = rng.random_range(2.0..2.75);
                z.extend(unit_direction(rng, d - 1).into_iter().map(|u| u * r));
            } else {
                z.push(-0.5 + normal(rng));
                z.extend((1..d).map(|_| normal(rng)));
            }
            z
        }
        Geometry::Mixture => {
            let w = 0.75 / (d as f64).sqrt();
            let sign = if rng.random_bool(0.5) { 1.5 } else { -1.5 };
            let (shift, axis) = if positive { (w, 0) } else { (-w, 1 % d) };
            (0..d)
                .map(|k| shift + if k == axis { sign } else { 0.0 } + 0.75 * normal(rng))
                .collect()
        }
    }
}

fn observe(rng: &mut ChaCha8Rng, spec: &SynthSpec, z: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(spec.n_features);
    for &zk in z {
        for _ in 0..spec.views_per_informative {
            x.push(zk + spec.noise_sigma * normal(rng));
        }
    }
    while x.len() < spec.n_features {
        x.push(normal(rng));
    }
    x
}

fn jitter(rng: &mut ChaCha8Rng, center: &[f64], sigma: f64) -> Vec<f64> {
    center.iter().map(|c| c + sigma * normal(rng)).collect()
}

/// Generates a seeded synthetic candidate set.
///
/// Per case, the number of positive instances is binomial in the candidate
/// count; positives are grouped into lesions of 1-3 instances that share a
/// `bag_id` and a latent center. Informative latent axes come first in the
/// feature layout (each repeated `views_per_informative` times with
/// independent noise); the remaining columns are standard normal noise.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.n_informative;
    let (lo, hi) = spec.candidates_per_case;
    let mut samples = Vec::new();
    let mut next_id = 1u64;
    for case in 0..spec.n_cases {
        let case_id = format!("case{case:04}");
        let m = rng.random_range(lo..=hi);
        let n_pos = Binomial::new(m as u64, spec.positive_rate)
            .map_err(|e| Error::invalid(e.to_string()))?
            .sample(&mut rng) as usize;
        let mut remaining = n_pos;
        let mut lesion = 0;
        while remaining > 0 {
            lesion += 1;
            let size = rng.random_range(1..=3usize).min(remaining);
            remaining -= size;
            let center = latent(&mut rng, spec.geometry, d, true);
            let bag = format!("{case_id}-L{lesion}");
            for _ in 0..size {
                let z = jitter(&mut rng, &center, LESION_JITTER);
                samples.push(Sample {
                    candidate_id: next_id,
                    case_id: case_id.clone(),
                    bag_id: Some(bag.clone()),
                    label: 1,
                    features: observe(&mut rng, spec, &z),
                });
                next_id += 1;
            }
        }
        for _ in n_pos..m {
            let z = latent(&mut rng, spec.geometry, d, false);
            samples.push(Sample {
                candidate_id: next_id,
                case_id: case_id.clone(),
                bag_id: None,
                label: 0,
                features: observe(&mut rng, spec, &z),
            });
            next_id += 1;
        }
    }
    Dataset::new(spec.feature_names(), samples)
}

/// Two observations ("views") of the same set of lesions, plus a labeled
/// training set drawn from the same generator.
#[derive(Debug, Clone)]
pub struct PairedViews {
    pub train: Dataset,
    pub view_a: Vec<Vec<f64>>,
    /// `view_b[i]` is the counterpart of `view_a[i]`.
    pub view_b: Vec<Vec<f64>>,
}

/// Generator for the counterpart-retrieval protocol.
pub fn synth_paired_views(spec: &SynthSpec, n_lesions: usize) -> Result<PairedViews> {
    let train = synth_generate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0f7e_5a00);
    let mut view_a = Vec::with_capacity(n_lesions);
    let mut view_b = Vec::with_capacity(n_lesions);
    for _ in 0..n_lesions {
        let center = latent(&mut rng, spec.geometry, spec.n_informative, true);
        let za = jitter(&mut rng, &center, VIEW_JITTER);
        let zb = jitter(&mut rng, &center, VIEW_JITTER);
        view_a.push(observe(&mut rng, spec, &za));
        view_b.push(observe(&mut rng, spec, &zb));
    }
    Ok(PairedViews {
        train,
        view_a,
        view_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(geometry: Geometry) -> SynthSpec {
        SynthSpec {
            n_cases: 20,
            candidates_per_case: (40, 60),
            n_features: 8,
            n_informative: 3,
            views_per_informative: 2,
            geometry,
            positive_rate: 0.05,
            noise_sigma: 0.2,
            seed: 11,
        }
    }

    #[test]
    fn deterministic_given_seed() {
        for g in [Geometry::Linear, Geometry::Ring, Geometry::Mixture] {
            let a = synth_generate(&spec(g)).unwrap();
            let b = synth_generate(&spec(g)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn lesions_have_one_to_three_instances() {
        let ds = synth_generate(&spec(Geometry::Ring)).unwrap();
        let mut counts = std::collections::HashMap::new();
        for s in ds.samples().iter().filter(|s| s.is_positive()) {
            *counts.entry(s.bag_id.clone().unwrap()).or_insert(0) += 1;
        }
        assert!(!counts.is_empty());
        assert!(counts.values().all(|&c| (1..=3).contains(&c)));
    }

    #[test]
    fn ring_positives_on_annulus() {
        let mut s = spec(Geometry::Ring);
        s.noise_sigma = 0.0;
        s.views_per_informative = 1;
        let ds = synth_generate(&s).unwrap();
        for p in ds.samples().iter().filter(|s| s.is_positive()) {
            let r = (p.features[1].powi(2) + p.features[2].powi(2)).sqrt();
            assert!(r > 1.5 && r < 3.2, "radius {r}");
        }
    }

    #[test]
    fn rejects_bad_spec() {
        let mut s = spec(Geometry::Linear);
        s.n_informative = 5;
        assert!(synth_generate(&s).is_err());
        let mut s = spec(Geometry::Linear);
        s.positive_rate = 1.0;
        assert!(synth_generate(&s).is_err());
    }

    #[test]
    fn noise_free_linear_data_is_separable() {
        let mut s = spec(Geometry::Linear);
        s.noise_sigma = 0.0;
        s.positive_rate = 0.2;
        let ds = crate::dataset::standardize(&synth_generate(&s).unwrap())
            .unwrap()
            .0;
        let (model, _) =
            crate::mil::train_map(&ds, 10.0, &crate::mil::TrainOptions::default()).unwrap();
        let auc = crate::eval::roc_auc(&model.scores(&ds).unwrap(), &ds.labels()).unwrap();
        assert!(auc >= 0.999, "auc {auc}");
    }

    #[test]
    fn positive_count_matches_rate() {
        let s = SynthSpec {
            n_cases: 100,
            candidates_per_case: (100, 100),
            positive_rate: 0.01,
            ..spec(Geometry::Linear)
        };
        let ds = synth_generate(&s).unwrap();
        assert_eq!(ds.len(), 10_000);
        let sd = (10_000.0f64 * 0.01 * 0.99).sqrt();
        let got = ds.n_positive() as f64;
        assert!((got - 100.0).abs() <= 3.0 * sd, "{got} positives");
    }

    #[test]
    fn hundred_case_split_is_even_and_disjoint() {
        let s = SynthSpec {
            n_cases: 100,
            candidates_per_case: (5, 8),
            ..spec(Geometry::Linear)
        };
        let ds = synth_generate(&s).unwrap();
        let (tr, te) = crate::dataset::split_by_case(&ds, 0.5, 1).unwrap();
        let a: std::collections::BTreeSet<_> = tr.case_ids().into_iter().collect();
        let b: std::collections::BTreeSet<_> = te.case_ids().into_iter().collect();
        assert_eq!((a.len(), b.len()), (50, 50));
        assert!(a.is_disjoint(&b));
        assert_eq!(tr.len() + te.len(), ds.len());
    }
}
