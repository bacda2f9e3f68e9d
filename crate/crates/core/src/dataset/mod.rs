//! Candidate data model, delimited-text ingestion, case-level splitting,
//! standardization and the synthetic generators used in place of clinical
//! data.

mod io;
mod synth;

use std::collections::{BTreeSet, HashSet};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub use io::{load, parse_csv, save, to_csv};
pub use synth::{synth_generate, synth_paired_views, Geometry, PairedViews, SynthSpec};

/// One detection candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub candidate_id: u64,
    /// Patient / scan identifier; splits and false-positive counts are per case.
    pub case_id: String,
    /// Groups the instances of one lesion. Required for positives.
    pub bag_id: Option<String>,
    pub label: u8,
    pub features: Vec<f64>,
}

impl Sample {
    pub fn is_positive(&self) -> bool {
        self.label == 1
    }
}

/// An immutable collection of candidates sharing one feature layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    feature_names: Vec<String>,
    samples: Vec<Sample>,
}

impl Dataset {
    /// Builds a dataset, enforcing the sample invariants.
    pub fn new(feature_names: Vec<String>, samples: Vec<Sample>) -> Result<Self> {
        let n = feature_names.len();
        let mut ids = HashSet::with_capacity(samples.len());
        for s in &samples {
            if s.features.len() != n {
                return Err(Error::data(format!(
                    "candidate {} has {} features, expected {}",
                    s.candidate_id,
                    s.features.len(),
                    n
                )));
            }
            if s.label > 1 {
                return Err(Error::data(format!(
                    "invalid label {} for candidate {}",
                    s.label, s.candidate_id
                )));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::data(format!(
                    "non-finite feature value for candidate {}",
                    s.candidate_id
                )));
            }
            if s.is_positive() && s.bag_id.is_none() {
                return Err(Error::data(format!(
                    "positive candidate {} has no bag_id",
                    s.candidate_id
                )));
            }
            if !ids.insert(s.candidate_id) {
                return Err(Error::data(format!(
                    "duplicate candidate_id {}",
                    s.candidate_id
                )));
            }
        }
        Ok(Dataset {
            feature_names,
            samples,
        })
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn n_positive(&self) -> usize {
        self.samples.iter().filter(|s| s.is_positive()).count()
    }

    /// Distinct case identifiers in sorted order.
    pub fn case_ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.samples.iter().map(|s| s.case_id.as_str()).collect();
        set.into_iter().map(str::to_owned).collect()
    }

    /// Row-major copy of the feature values (one row per sample).
    pub fn feature_matrix(&self) -> DMatrix<f64> {
        let n = self.n_features();
        DMatrix::from_fn(self.samples.len(), n, |i, j| self.samples[i].features[j])
    }

    /// Values of a single feature across all samples.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s.features[j]).collect()
    }

    /// Keeps the samples for which `keep` returns true, preserving order.
    pub fn filter<F: FnMut(&Sample) -> bool>(&self, mut keep: F) -> Dataset {
        Dataset {
            feature_names: self.feature_names.clone(),
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }

    /// Restricts every sample to the listed feature columns, in that order.
    pub fn select_features(&self, columns: &[usize]) -> Result<Dataset> {
        let n = self.n_features();
        if let Some(&bad) = columns.iter().find(|&&c| c >= n) {
            return Err(Error::invalid(format!(
                "feature index {bad} out of range for {n} features"
            )));
        }
        let names = columns
            .iter()
            .map(|&c| self.feature_names[c].clone())
            .collect();
        let samples = self
            .samples
            .iter()
            .map(|s| Sample {
                features: columns.iter().map(|&c| s.features[c]).collect(),
                ..s.clone()
            })
            .collect();
        Ok(Dataset {
            feature_names: names,
            samples,
        })
    }

    /// Same metadata, new feature values produced by `f`.
    pub(crate) fn map_features<F: FnMut(&[f64]) -> Vec<f64>>(&self, mut f: F) -> Dataset {
        Dataset {
            feature_names: self.feature_names.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| Sample {
                    features: f(&s.features),
                    ..s.clone()
                })
                .collect(),
        }
    }
}

/// Splits at case level: every case lands entirely on one side.
///
/// The number of training cases is `round(train_fraction * cases)`, clamped
/// so that both sides receive at least one case.
pub fn split_by_case(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train_fraction must lie in (0,1), got {train_fraction}"
        )));
    }
    let mut cases = ds.case_ids();
    if cases.len() < 2 {
        return Err(Error::data(format!(
            "need at least 2 distinct cases to split, found {}",
            cases.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases.shuffle(&mut rng);
    let n_train =
        ((train_fraction * cases.len() as f64).round() as usize).clamp(1, cases.len() - 1);
    let train_cases: HashSet<&str> = cases[..n_train].iter().map(String::as_str).collect();
    let train = ds.filter(|s| train_cases.contains(s.case_id.as_str()));
    let test = ds.filter(|s| !train_cases.contains(s.case_id.as_str()));
    Ok((train, test))
}

/// Per-feature affine standardization fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    /// Population standard deviation; zero marks a constant feature.
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(ds: &Dataset) -> Result<Scaler> {
        if ds.is_empty() {
            return Err(Error::data("cannot standardize an empty dataset"));
        }
        let n = ds.n_features();
        let count = ds.len() as f64;
        let mut mean = vec![0.0; n];
        for s in ds.samples() {
            for (m, v) in mean.iter_mut().zip(&s.features) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; n];
        for s in ds.samples() {
            for j in 0..n {
                let d = s.features[j] - mean[j];
                var[j] += d * d;
            }
        }
        let std = var
            .into_iter()
            .zip(&mean)
            .map(|(v, m)| {
                let sd = (v / count).sqrt();
                // variance that is pure rounding noise counts as constant
                if sd <= 1e-12 * m.abs().max(1.0) {
                    0.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Scaler { mean, std })
    }

    pub fn transform_row(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| if *s == 0.0 { 0.0 } else { (v - m) / s })
            .collect()
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        check_dim(self.mean.len(), ds.n_features())?;
        Ok(ds.map_features(|x| self.transform_row(x)))
    }
}

/// Fits a [`Scaler`] on `train` and returns the transformed training set.
pub fn standardize(train: &Dataset) -> Result<(Dataset, Scaler)> {
    let scaler = Scaler::fit(train)?;
    let out = scaler.apply(train)?;
    Ok((out, scaler))
}

pub fn apply_scaler(scaler: &Scaler, ds: &Dataset) -> Result<Dataset> {
    scaler.apply(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: u64, case: &str, label: u8, features: Vec<f64>) -> Sample {
        Sample {
            candidate_id: id,
            case_id: case.to_string(),
            bag_id: (label == 1).then(|| format!("b{id}")),
            label,
            features,
        }
    }

    #[test]
    fn standardize_hand_values() {
        let ds = Dataset::new(
            vec!["a".into(), "c".into()],
            vec![
                sample(1, "x", 0, vec![1.0, 5.0]),
                sample(2, "x", 0, vec![2.0, 5.0]),
                sample(3, "y", 1, vec![3.0, 5.0]),
            ],
        )
        .unwrap();
        let (out, scaler) = standardize(&ds).unwrap();
        let col = out.column(0);
        assert!((col[0] + 1.224744871391589).abs() < 1e-12);
        assert!(col[1].abs() < 1e-15);
        assert!((col[2] - 1.224744871391589).abs() < 1e-12);
        assert_eq!(out.column(1), vec![0.0, 0.0, 0.0]);
        assert_eq!(scaler.apply(&ds).unwrap(), out);
    }

    #[test]
    fn split_two_cases() {
        let ds = Dataset::new(
            vec!["f".into()],
            vec![
                sample(1, "a", 0, vec![0.0]),
                sample(2, "a", 1, vec![1.0]),
                sample(3, "b", 0, vec![2.0]),
            ],
        )
        .unwrap();
        let (tr, te) = split_by_case(&ds, 0.5, 3).unwrap();
        assert_eq!(tr.case_ids().len(), 1);
        assert_eq!(te.case_ids().len(), 1);
        assert_ne!(tr.case_ids(), te.case_ids());
        assert_eq!(tr.len() + te.len(), 3);
        let again = split_by_case(&ds, 0.5, 3).unwrap();
        assert_eq!(again.0, tr);
    }

    #[test]
    fn split_needs_two_cases() {
        let ds = Dataset::new(vec!["f".into()], vec![sample(1, "a", 0, vec![0.0])]).unwrap();
        assert!(matches!(split_by_case(&ds, 0.5, 0), Err(Error::Data(_))));
        assert!(split_by_case(&ds, 1.0, 0).is_err());
    }

    #[test]
    fn invariants_enforced() {
        let dup = Dataset::new(
            vec!["f".into()],
            vec![sample(1, "a", 0, vec![0.0]), sample(1, "b", 0, vec![1.0])],
        );
        assert!(dup.is_err());
        let mut no_bag = sample(2, "a", 1, vec![0.0]);
        no_bag.bag_id = None;
        assert!(Dataset::new(vec!["f".into()], vec![no_bag]).is_err());
        assert!(Dataset::new(vec!["f".into()], vec![sample(3, "a", 0, vec![f64::NAN])]).is_err());
    }
}
