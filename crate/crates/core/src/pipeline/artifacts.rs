//! Versioned on-disk artifacts. JSON artifacts share an envelope
//! `{"format": ..., "version": ..., <body fields>}`.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::crge::Projection;
use crate::dataset::{self, Dataset, Scaler};
use crate::error::{Error, Result};
use crate::linalg::matrix_serde;
use crate::spg::SpgModel;

pub const VERSION: u32 = 1;

pub const TRAIN: &str = "train.csv";
pub const TEST: &str = "test.csv";
pub const COARSE_SCALER: &str = "coarse_scaler.json";
pub const COARSE_MODEL: &str = "coarse_model.json";
pub const COARSE_REPORT: &str = "coarse_report.json";
pub const PRUNE: &str = "prune.json";
pub const TRAIN_PRUNED: &str = "train_pruned.csv";
pub const TEST_PRUNED: &str = "test_pruned.csv";
pub const FINE_SCALER: &str = "fine_scaler.json";
pub const SELECTION: &str = "selection.json";
pub const PROJECTION: &str = "projection.json";
pub const EMBED_REPORT: &str = "embed_report.json";
pub const TEMPLATES: &str = "templates.json";
pub const SCORES_TRAIN: &str = "scores_train.csv";
pub const SCORES_TEST: &str = "scores_test.csv";
pub const VOTE: &str = "vote.json";
pub const SUMMARY: &str = "summary.json";
pub const RETRIEVAL: &str = "retrieval.csv";
pub const MANIFEST: &str = "manifest.json";

pub fn froc_file(kind: &str, split: &str) -> String {
    format!("froc_{kind}_{split}.csv")
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    #[serde(flatten)]
    body: T,
}

pub(crate) fn require(dir: &Path, name: &str, producer: &'static str) -> Result<PathBuf> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(Error::MissingArtifact { path, producer });
    }
    Ok(path)
}

pub(crate) fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(dir: &Path, name: &str, producer: &'static str) -> Result<String> {
    let path = require(dir, name, producer)?;
    std::fs::read_to_string(&path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(
    dir: &Path,
    name: &str,
    format: &str,
    body: &T,
) -> Result<()> {
    let env = Envelope {
        format: format.to_string(),
        version: VERSION,
        body,
    };
    let mut text =
        serde_json::to_string_pretty(&env).map_err(|e| Error::data(format!("{name}: {e}")))?;
    text.push('\n');
    write_text(dir, name, &text)
}

pub(crate) fn read_json<T: DeserializeOwned>(
    dir: &Path,
    name: &str,
    format: &str,
    producer: &'static str,
) -> Result<T> {
    let text = read_text(dir, name, producer)?;
    let env: Envelope<T> =
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{name}: {e}")))?;
    if env.format != format || env.version != VERSION {
        return Err(Error::data(format!(
            "{name}: expected {format} v{VERSION}, found {} v{}",
            env.format, env.version
        )));
    }
    Ok(env.body)
}

pub(crate) fn read_dataset(dir: &Path, name: &str, producer: &'static str) -> Result<Dataset> {
    let path = require(dir, name, producer)?;
    dataset::load(path)
}

pub(crate) fn write_dataset(dir: &Path, name: &str, ds: &Dataset) -> Result<()> {
    dataset::save(ds, dir.join(name))
}

/// Scaler plus the feature names it was fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerFile {
    pub feature_names: Vec<String>,
    #[serde(flatten)]
    pub scaler: Scaler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneFile {
    pub rho: f64,
    /// Recall target the threshold was chosen for; absent for a fixed threshold.
    pub target_recall: Option<f64>,
    pub train_positives: usize,
    pub train_positives_kept: usize,
    pub train_negatives: usize,
    pub train_negatives_kept: usize,
    pub test_kept: usize,
    pub test_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionFile {
    pub selected: Vec<usize>,
    pub selected_names: Vec<String>,
    pub kappa_trajectory: Vec<f64>,
    pub stopped_early: bool,
}

/// The fitted linear map of the fine tier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase")]
pub enum EmbeddingModel {
    Crge(Projection),
    Spg(SpgModel),
    /// Embedding disabled: unit-Frobenius scaled identity.
    Identity {
        #[serde(with = "matrix_serde")]
        matrix: DMatrix<f64>,
    },
}

impl EmbeddingModel {
    pub fn matrix(&self) -> &DMatrix<f64> {
        match self {
            EmbeddingModel::Crge(p) => &p.matrix,
            EmbeddingModel::Spg(m) => &m.matrix,
            EmbeddingModel::Identity { matrix } => matrix,
        }
    }
}

/// Optional whitening of the selected features followed by the embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionFile {
    #[serde(default, with = "opt_matrix")]
    pub whitening: Option<DMatrix<f64>>,
    pub model: EmbeddingModel,
}

impl ProjectionFile {
    /// The composite linear map from selected, standardized features.
    pub fn map(&self) -> DMatrix<f64> {
        match &self.whitening {
            Some(w) => w * self.model.matrix(),
            None => self.model.matrix().clone(),
        }
    }
}

mod opt_matrix {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Wrapped(#[serde(with = "crate::linalg::matrix_serde")] DMatrix<f64>);

    pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> Result<S::Ok, S::Error> {
        m.as_ref().map(|m| Wrapped(m.clone())).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DMatrix<f64>>, D::Error> {
        Ok(Option::<Wrapped>::deserialize(d)?.map(|w| w.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteFile {
    pub k: usize,
    /// Partial AUC per candidate k on training data; empty when k was fixed.
    pub partial_aucs: Vec<f64>,
    pub rho: f64,
    pub fp_range: (f64, f64),
    pub counting: bool,
}

/// One row of a score file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub candidate_id: u64,
    pub case_id: String,
    pub label: u8,
    pub coarse_score: f64,
    /// Fine-tier posterior; absent for pruned candidates.
    pub fine_score: Option<f64>,
}

pub(crate) fn scores_to_csv(rows: &[ScoreRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let err = |e: csv::Error| Error::data(e.to_string());
    w.write_record([
        "candidate_id",
        "case_id",
        "label",
        "coarse_score",
        "fine_score",
    ])
    .map_err(err)?;
    for r in rows {
        w.write_record([
            r.candidate_id.to_string(),
            r.case_id.clone(),
            r.label.to_string(),
            r.coarse_score.to_string(),
            r.fine_score.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8 csv"))
}

pub(crate) fn scores_from_csv(text: &str, name: &str) -> Result<Vec<ScoreRow>> {
    let bad = |msg: String| Error::data(format!("{name}: {msg}"));
    let mut r = csv::ReaderBuilder::new()
        .flexible(false)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|_| bad(format!("non-numeric value {:?}", &rec[i])))
        };
        rows.push(ScoreRow {
            candidate_id: rec[0]
                .parse()
                .map_err(|_| bad(format!("invalid candidate_id {:?}", &rec[0])))?,
            case_id: rec[1].to_string(),
            label: rec[2]
                .parse()
                .map_err(|_| bad(format!("invalid label {:?}", &rec[2])))?,
            coarse_score: num(3)?,
            fine_score: if rec[4].is_empty() {
                None
            } else {
                Some(num(4)?)
            },
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_rows_round_trip() {
        let rows = vec![
            ScoreRow {
                candidate_id: 3,
                case_id: "a,b".into(),
                label: 1,
                coarse_score: 0.125,
                fine_score: Some(0.1 + 0.2),
            },
            ScoreRow {
                candidate_id: 4,
                case_id: "c".into(),
                label: 0,
                coarse_score: 1e-300,
                fine_score: None,
            },
        ];
        let text = scores_to_csv(&rows).unwrap();
        assert_eq!(scores_from_csv(&text, "s").unwrap(), rows);
    }

    #[test]
    fn envelope_checks_format() {
        let dir = tempfile::tempdir().unwrap();
        write_json(
            dir.path(),
            "x.json",
            "thing",
            &VoteFile {
                k: 2,
                partial_aucs: vec![0.5],
                rho: 0.1,
                fp_range: (2.0, 4.0),
                counting: false,
            },
        )
        .unwrap();
        assert!(read_json::<VoteFile>(dir.path(), "x.json", "thing", "p").is_ok());
        assert!(read_json::<VoteFile>(dir.path(), "x.json", "other", "p").is_err());
        assert!(matches!(
            read_json::<VoteFile>(dir.path(), "missing.json", "thing", "p"),
            Err(Error::MissingArtifact { producer: "p", .. })
        ));
    }
}
