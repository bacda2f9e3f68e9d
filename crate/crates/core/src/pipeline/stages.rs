use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use super::artifacts::*;
use super::config::{Backend, DataSource, DimSelection, PipelineConfig};
use crate::crge::{self, CrgeOptions};
use crate::dataset::{self, Dataset, Sample, Scaler};
use crate::error::{Error, Result};
use crate::eval::{self, FrocCurve};
use crate::mil::{self, MilModel, PruneConfig, TrainOptions};
use crate::mrmr;
use crate::spg::{self, SpgParams};
use crate::templates::{self, ClusterOptions, TemplateSet};
use crate::voting::{self, Candidate, VoteConfig};

const P_SYNTH: &str = "synth";
const P_COARSE: &str = "train-coarse";
const P_PRUNE: &str = "prune";
const P_SELECT: &str = "select";
const P_EMBED: &str = "embed";
const P_CLUSTER: &str = "cluster";
const P_SCORE: &str = "score";

const F_SCALER: &str = "ctf-scaler";
const F_MIL: &str = "ctf-mil-model";
const F_MIL_REPORT: &str = "ctf-mil-report";
const F_PRUNE: &str = "ctf-prune";
const F_SELECTION: &str = "ctf-selection";
const F_PROJECTION: &str = "ctf-projection";
const F_EMBED_REPORT: &str = "ctf-embed-report";
const F_TEMPLATES: &str = "ctf-templates";
const F_VOTE: &str = "ctf-vote";
const F_SUMMARY: &str = "ctf-summary";

pub(super) fn synth(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let (train, test) = match cfg.data.source {
        DataSource::Synth => {
            let seeds = cfg.seeds();
            let all = dataset::synth_generate(&cfg.synth.spec(seeds.synth))?;
            dataset::split_by_case(&all, cfg.data.train_fraction, seeds.split)?
        }
        DataSource::Files => {
            let train = dataset::load(cfg.data.train.as_ref().expect("validated"))?;
            let test = dataset::load(cfg.data.test.as_ref().expect("validated"))?;
            if train.feature_names() != test.feature_names() {
                return Err(Error::data(
                    "train and test files have different feature columns",
                ));
            }
            (train, test)
        }
    };
    write_dataset(out, TRAIN, &train)?;
    write_dataset(out, TEST, &test)
}

pub(super) fn train_coarse(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let train = read_dataset(out, TRAIN, P_SYNTH)?;
    let (std_train, scaler) = dataset::standardize(&train)?;
    let opts = TrainOptions {
        max_iters: cfg.coarse.max_iters,
        grad_tol: cfg.coarse.grad_tol,
        ridge_on_hessian: cfg.coarse.ridge,
    };
    let (model, report) = mil::train_map(&std_train, cfg.coarse.prior_sigma2, &opts)?;
    write_json(
        out,
        COARSE_SCALER,
        F_SCALER,
        &ScalerFile {
            feature_names: train.feature_names().to_vec(),
            scaler,
        },
    )?;
    write_json(out, COARSE_MODEL, F_MIL, &model)?;
    write_json(out, COARSE_REPORT, F_MIL_REPORT, &report)
}

struct Coarse {
    scaler: Scaler,
    model: MilModel,
}

impl Coarse {
    fn load(out: &Path) -> Result<Self> {
        let scaler: ScalerFile = read_json(out, COARSE_SCALER, F_SCALER, P_COARSE)?;
        let model: MilModel = read_json(out, COARSE_MODEL, F_MIL, P_COARSE)?;
        Ok(Coarse {
            scaler: scaler.scaler,
            model,
        })
    }

    fn scores(&self, ds: &Dataset) -> Result<Vec<f64>> {
        self.model.scores(&self.scaler.apply(ds)?)
    }
}

fn keep_scored(ds: &Dataset, scores: &[f64], rho: f64) -> Dataset {
    let mut it = scores.iter();
    ds.filter(|_| *it.next().expect("one score per sample") >= rho)
}

pub(super) fn prune(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let train = read_dataset(out, TRAIN, P_SYNTH)?;
    let test = read_dataset(out, TEST, P_SYNTH)?;
    let coarse = Coarse::load(out)?;
    let std_train = coarse.scaler.apply(&train)?;
    let (threshold, target) = match cfg.coarse.rho {
        Some(rho) => (PruneConfig::new(rho)?, None),
        None => (
            mil::choose_threshold(&std_train, &coarse.model, cfg.coarse.target_recall)?,
            Some(cfg.coarse.target_recall),
        ),
    };
    let train_scores = coarse.model.scores(&std_train)?;
    let kept_train = keep_scored(&train, &train_scores, threshold.rho);
    let kept_test = keep_scored(&test, &coarse.scores(&test)?, threshold.rho);
    let count = |ds: &Dataset, label: u8| ds.samples().iter().filter(|s| s.label == label).count();
    let file = PruneFile {
        rho: threshold.rho,
        target_recall: target,
        train_positives: count(&train, 1),
        train_positives_kept: count(&kept_train, 1),
        train_negatives: count(&train, 0),
        train_negatives_kept: count(&kept_train, 0),
        test_kept: kept_test.len(),
        test_total: test.len(),
    };
    write_dataset(out, TRAIN_PRUNED, &kept_train)?;
    write_dataset(out, TEST_PRUNED, &kept_test)?;
    write_json(out, PRUNE, F_PRUNE, &file)
}

pub(super) fn select(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let train = read_dataset(out, TRAIN_PRUNED, P_PRUNE)?;
    let pos = train.n_positive();
    if pos == 0 || pos == train.len() {
        return Err(Error::data(format!(
            "pruned training set has {pos} positives out of {}; the fine tier needs both classes \
             (lower coarse.target_recall or set coarse.rho)",
            train.len()
        )));
    }
    let (std_train, scaler) = dataset::standardize(&train)?;
    let n = train.n_features();
    let result = if cfg.select.enabled {
        let max_m = if cfg.select.max_m == 0 {
            n
        } else {
            cfg.select.max_m.min(n)
        };
        mrmr::select(&std_train, max_m, cfg.select.redundancy)?
    } else {
        mrmr::SelectionResult {
            selected: (0..n).collect(),
            kappa_trajectory: Vec::new(),
            stopped_early: false,
        }
    };
    write_json(
        out,
        FINE_SCALER,
        F_SCALER,
        &ScalerFile {
            feature_names: train.feature_names().to_vec(),
            scaler,
        },
    )?;
    write_json(
        out,
        SELECTION,
        F_SELECTION,
        &SelectionFile {
            selected_names: result
                .selected
                .iter()
                .map(|&j| train.feature_names()[j].clone())
                .collect(),
            selected: result.selected,
            kappa_trajectory: result.kappa_trajectory,
            stopped_early: result.stopped_early,
        },
    )
}

/// Standardization and column selection of the fine tier.
struct FineInput {
    scaler: Scaler,
    selected: Vec<usize>,
}

impl FineInput {
    fn load(out: &Path) -> Result<Self> {
        let scaler: ScalerFile = read_json(out, FINE_SCALER, F_SCALER, P_SELECT)?;
        let selection: SelectionFile = read_json(out, SELECTION, F_SELECTION, P_SELECT)?;
        Ok(FineInput {
            scaler: scaler.scaler,
            selected: selection.selected,
        })
    }

    fn row(&self, x: &[f64]) -> Vec<f64> {
        let z = self.scaler.transform_row(x);
        self.selected.iter().map(|&j| z[j]).collect()
    }

    fn matrix(&self, samples: &[&Sample]) -> DMatrix<f64> {
        let rows: Vec<Vec<f64>> = samples.iter().map(|s| self.row(&s.features)).collect();
        DMatrix::from_fn(rows.len(), self.selected.len(), |i, j| rows[i][j])
    }
}

#[derive(Serialize)]
struct CrgeReportFile {
    #[serde(flatten)]
    report: crge::EmbedReport,
    /// Training partial AUC of the cascade per candidate dimension, when
    /// the dimension is chosen that way.
    dim_scores: Vec<(usize, f64)>,
}

#[derive(Serialize)]
#[serde(untagged)]
enum EmbedReportFile {
    Crge(CrgeReportFile),
    Spg(spg::SpgReport),
    None {},
}

pub(super) fn embed(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let train = read_dataset(out, TRAIN_PRUNED, P_PRUNE)?;
    let fine = FineInput::load(out)?;
    let samples: Vec<&Sample> = train.samples().iter().collect();
    let e = &cfg.embed;
    let mut x = fine.matrix(&samples);
    let whitening = if e.whiten {
        let w = crate::linalg::whitening_matrix(&x)?;
        x = &x * &w;
        Some(w)
    } else {
        None
    };
    let labels = train.labels();
    let m = x.ncols();
    let (model, report) = if !e.enabled {
        let matrix = DMatrix::identity(m, m) / (m as f64).sqrt();
        (
            EmbeddingModel::Identity { matrix },
            EmbedReportFile::None {},
        )
    } else {
        match e.backend {
            Backend::Crge => {
                let hi = e.dim_max.min(m);
                let lo = e.dim_min.min(hi);
                let dims: Vec<usize> = (lo..=hi).collect();
                let opts = CrgeOptions {
                    scheme: e.affinity.clone(),
                    mode: e.mode,
                    max_iters: e.max_iters,
                    initial_step: e.step,
                    nonnegative_cosine: e.nonnegative_cosine,
                    seed: cfg.seeds().embed,
                    ..CrgeOptions::default()
                };
                let ((p, report), dim_scores) =
                    if dims.len() > 1 && e.dim_selection == DimSelection::Pauc {
                        let val = TrainValidation::load(out)?;
                        let mut best: Option<((crge::Projection, crge::EmbedReport), f64)> = None;
                        let mut dim_scores = Vec::new();
                        for &d in &dims {
                            let fit = crge::fit(&x, &labels, d, &opts)?;
                            let map = match &whitening {
                                Some(w) => w * &fit.0.matrix,
                                None => fit.0.matrix.clone(),
                            };
                            let score = val.cascade_pauc(cfg, &train, &fine, &map)?;
                            dim_scores.push((d, score));
                            if best.as_ref().is_none_or(|b| score > b.1) {
                                best = Some((fit, score));
                            }
                        }
                        (best.expect("non-empty dimension range").0, dim_scores)
                    } else {
                        (crge::fit_over_dims(&x, &labels, &dims, &opts)?, Vec::new())
                    };
                (
                    EmbeddingModel::Crge(p),
                    EmbedReportFile::Crge(CrgeReportFile { report, dim_scores }),
                )
            }
            Backend::Spg => {
                let params = SpgParams {
                    graph_k: e.graph_k,
                    k_sparsity: e.k_sparsity,
                    beta: e.beta,
                };
                let (model, r) = spg::fit_spg(&x, e.spg_dim.min(m), &params)?;
                (EmbeddingModel::Spg(model), EmbedReportFile::Spg(r))
            }
        }
    };
    write_json(
        out,
        PROJECTION,
        F_PROJECTION,
        &ProjectionFile { whitening, model },
    )?;
    write_json(out, EMBED_REPORT, F_EMBED_REPORT, &report)
}

fn embed_rows(fine: &FineInput, map: &DMatrix<f64>, samples: &[&Sample]) -> Vec<Vec<f64>> {
    let y = fine.matrix(samples) * map;
    (0..y.nrows())
        .map(|i| y.row(i).iter().copied().collect())
        .collect()
}

fn fine_templates(
    cfg: &PipelineConfig,
    train_pruned: &Dataset,
    fine: &FineInput,
    map: &DMatrix<f64>,
) -> Result<TemplateSet> {
    let samples: Vec<&Sample> = train_pruned.samples().iter().collect();
    let points = embed_rows(fine, map, &samples);
    let opts = ClusterOptions {
        c_max: cfg.templates.c_max,
        max_iters: cfg.templates.max_iters,
        restarts: cfg.templates.restarts,
        seed: cfg.seeds().templates,
    };
    templates::build_templates(&points, &train_pruned.labels(), &opts)
}

fn base_vote(cfg: &PipelineConfig) -> VoteConfig {
    VoteConfig {
        counting: cfg.voting.counting,
        ..VoteConfig::new(1)
    }
}

/// Configured `k`, or the one maximizing the training partial AUC.
fn pick_k(
    cfg: &PipelineConfig,
    set: &TemplateSet,
    train: &[Candidate],
    rho: f64,
) -> Result<(usize, Vec<f64>)> {
    match cfg.voting.k {
        Some(k) => Ok((k.min(set.len()), Vec::new())),
        None => {
            let fp_range = (cfg.voting.fp_lo, cfg.voting.fp_hi);
            let choice = voting::choose_k(set, train, rho, fp_range, &base_vote(cfg))?;
            Ok((choice.k, choice.partial_aucs))
        }
    }
}

/// Everything needed to score a candidate fine tier on the training cases.
struct TrainValidation {
    train: Dataset,
    coarse: Vec<f64>,
    rho: f64,
}

impl TrainValidation {
    fn load(out: &Path) -> Result<Self> {
        let train = read_dataset(out, TRAIN, P_SYNTH)?;
        let coarse = Coarse::load(out)?.scores(&train)?;
        let prune: PruneFile = read_json(out, PRUNE, F_PRUNE, P_PRUNE)?;
        Ok(TrainValidation {
            train,
            coarse,
            rho: prune.rho,
        })
    }

    /// Best training partial AUC of the cascade over the allowed `k`.
    fn cascade_pauc(
        &self,
        cfg: &PipelineConfig,
        train_pruned: &Dataset,
        fine: &FineInput,
        map: &DMatrix<f64>,
    ) -> Result<f64> {
        let set = fine_templates(cfg, train_pruned, fine, map)?;
        let cands = candidates(&self.train, &self.coarse, self.rho, fine, map);
        let (k, paucs) = pick_k(cfg, &set, &cands, self.rho)?;
        if !paucs.is_empty() {
            return Ok(paucs[k - 1]);
        }
        let vote = VoteConfig {
            k,
            ..base_vote(cfg)
        };
        let rows = score_rows(&self.train, &cands, &set, &vote)?;
        let scores: Vec<f64> = rows
            .iter()
            .map(|r| voting::cascade_score(r.coarse_score, r.fine_score, self.rho))
            .collect();
        let curve = eval::froc_dataset(&self.train, &scores)?;
        eval::partial_auc(&curve, cfg.voting.fp_lo, cfg.voting.fp_hi)
    }
}

pub(super) fn cluster(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let train = read_dataset(out, TRAIN_PRUNED, P_PRUNE)?;
    let fine = FineInput::load(out)?;
    let map = read_json::<ProjectionFile>(out, PROJECTION, F_PROJECTION, P_EMBED)?.map();
    if map.nrows() != fine.selected.len() {
        return Err(Error::data(
            "projection does not match the feature selection",
        ));
    }
    let set = fine_templates(cfg, &train, &fine, &map)?;
    write_json(out, TEMPLATES, F_TEMPLATES, &set)
}

fn candidates(
    ds: &Dataset,
    coarse: &[f64],
    rho: f64,
    fine: &FineInput,
    model: &DMatrix<f64>,
) -> Vec<Candidate> {
    let kept: Vec<&Sample> = ds
        .samples()
        .iter()
        .zip(coarse)
        .filter(|(_, &p)| p >= rho)
        .map(|(s, _)| s)
        .collect();
    let mut embedded = embed_rows(fine, model, &kept).into_iter();
    ds.samples()
        .iter()
        .zip(coarse)
        .map(|(s, &p)| Candidate {
            case_id: s.case_id.clone(),
            bag_id: s.bag_id.clone(),
            label: s.label,
            coarse_score: p,
            embedded: (p >= rho).then(|| embedded.next().expect("one row per kept sample")),
        })
        .collect()
}

fn score_rows(
    ds: &Dataset,
    cands: &[Candidate],
    set: &TemplateSet,
    vote: &VoteConfig,
) -> Result<Vec<ScoreRow>> {
    let fine: Vec<Option<f64>> = cands
        .par_iter()
        .map(|c| {
            c.embedded
                .as_ref()
                .map(|y| voting::posterior(set, y, vote))
                .transpose()
        })
        .collect::<Result<_>>()?;
    Ok(ds
        .samples()
        .iter()
        .zip(cands)
        .zip(fine)
        .map(|((s, c), f)| ScoreRow {
            candidate_id: s.candidate_id,
            case_id: s.case_id.clone(),
            label: s.label,
            coarse_score: c.coarse_score,
            fine_score: f,
        })
        .collect())
}

pub(super) fn score(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let train = read_dataset(out, TRAIN, P_SYNTH)?;
    let test = read_dataset(out, TEST, P_SYNTH)?;
    let coarse = Coarse::load(out)?;
    let prune: PruneFile = read_json(out, PRUNE, F_PRUNE, P_PRUNE)?;
    let fine = FineInput::load(out)?;
    let model = read_json::<ProjectionFile>(out, PROJECTION, F_PROJECTION, P_EMBED)?.map();
    let set: TemplateSet = read_json(out, TEMPLATES, F_TEMPLATES, P_CLUSTER)?;
    let rho = prune.rho;

    let train_c = candidates(&train, &coarse.scores(&train)?, rho, &fine, &model);
    let test_c = candidates(&test, &coarse.scores(&test)?, rho, &fine, &model);
    let fp_range = (cfg.voting.fp_lo, cfg.voting.fp_hi);
    let (k, partial_aucs) = pick_k(cfg, &set, &train_c, rho)?;
    let vote = VoteConfig {
        k,
        ..base_vote(cfg)
    };
    let train_rows = score_rows(&train, &train_c, &set, &vote)?;
    let test_rows = score_rows(&test, &test_c, &set, &vote)?;
    write_text(out, SCORES_TRAIN, &scores_to_csv(&train_rows)?)?;
    write_text(out, SCORES_TEST, &scores_to_csv(&test_rows)?)?;
    write_json(
        out,
        VOTE,
        F_VOTE,
        &VoteFile {
            k,
            partial_aucs,
            rho,
            fp_range,
            counting: cfg.voting.counting,
        },
    )
}

#[derive(Debug, Clone, Serialize)]
struct CurveSummary {
    partial_auc: Option<f64>,
    /// Sensitivity at 1..=5 false positives per case.
    sensitivity_at_fp: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize)]
struct SplitSummary {
    n_cases: usize,
    n_lesions: usize,
    coarse: CurveSummary,
    ctf: CurveSummary,
}

#[derive(Debug, Clone, Serialize)]
struct Summary {
    fp_range: (f64, f64),
    rho: f64,
    k: usize,
    train: SplitSummary,
    test: SplitSummary,
}

fn summarize(curve: &FrocCurve, fp_range: (f64, f64)) -> CurveSummary {
    CurveSummary {
        partial_auc: eval::partial_auc(curve, fp_range.0, fp_range.1).ok(),
        sensitivity_at_fp: (1..=5)
            .map(|f| (f as f64, eval::sensitivity_at(curve, f as f64)))
            .collect(),
    }
}

fn evaluate_split(
    out: &Path,
    ds: &Dataset,
    scores_name: &str,
    split: &str,
    rho: f64,
    fp_range: (f64, f64),
) -> Result<SplitSummary> {
    let rows = scores_from_csv(&read_text(out, scores_name, P_SCORE)?, scores_name)?;
    if rows.len() != ds.len()
        || rows
            .iter()
            .zip(ds.samples())
            .any(|(r, s)| r.candidate_id != s.candidate_id)
    {
        return Err(Error::data(format!(
            "{scores_name} does not match the {split} candidates"
        )));
    }
    let coarse: Vec<f64> = rows.iter().map(|r| r.coarse_score).collect();
    let ctf: Vec<f64> = rows
        .iter()
        .map(|r| voting::cascade_score(r.coarse_score, r.fine_score, rho))
        .collect();
    let coarse_curve = eval::froc_dataset(ds, &coarse)?;
    let ctf_curve = eval::froc_dataset(ds, &ctf)?;
    write_text(
        out,
        &froc_file("coarse", split),
        &eval::curve_to_csv(&coarse_curve),
    )?;
    write_text(
        out,
        &froc_file("ctf", split),
        &eval::curve_to_csv(&ctf_curve),
    )?;
    Ok(SplitSummary {
        n_cases: coarse_curve.n_cases,
        n_lesions: coarse_curve.n_lesions,
        coarse: summarize(&coarse_curve, fp_range),
        ctf: summarize(&ctf_curve, fp_range),
    })
}

pub(super) fn evaluate(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let train = read_dataset(out, TRAIN, P_SYNTH)?;
    let test = read_dataset(out, TEST, P_SYNTH)?;
    let vote: VoteFile = read_json(out, VOTE, F_VOTE, P_SCORE)?;
    let fp_range = (cfg.voting.fp_lo, cfg.voting.fp_hi);
    let summary = Summary {
        fp_range,
        rho: vote.rho,
        k: vote.k,
        train: evaluate_split(out, &train, SCORES_TRAIN, "train", vote.rho, fp_range)?,
        test: evaluate_split(out, &test, SCORES_TEST, "test", vote.rho, fp_range)?,
    };
    write_json(out, SUMMARY, F_SUMMARY, &summary)
}

/// Counterpart retrieval on test lesions with at least two instances: the
/// first instance queries a gallery of all other positive instances.
pub(super) fn retrieve(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let test = read_dataset(out, TEST, P_SYNTH)?;
    let fine = FineInput::load(out)?;
    let model = read_json::<ProjectionFile>(out, PROJECTION, F_PROJECTION, P_EMBED)?.map();
    let mut bags: BTreeMap<(&str, &str), Vec<&Sample>> = BTreeMap::new();
    for s in test.samples().iter().filter(|s| s.is_positive()) {
        let bag = s.bag_id.as_deref().expect("positives carry a bag id");
        bags.entry((s.case_id.as_str(), bag)).or_default().push(s);
    }
    let mut queries = Vec::new();
    let mut gallery = Vec::new();
    let mut owner = Vec::new();
    for (b, members) in bags.values().filter(|m| m.len() >= 2).enumerate() {
        queries.push(members[0]);
        for s in &members[1..] {
            gallery.push(*s);
            owner.push(b);
        }
    }
    let mut text = String::from("k,hit_rate\n");
    if !queries.is_empty() {
        let truth: Vec<Vec<usize>> = (0..queries.len())
            .map(|b| (0..owner.len()).filter(|&g| owner[g] == b).collect())
            .collect();
        let q = embed_rows(&fine, &model, &queries);
        let g = embed_rows(&fine, &model, &gallery);
        let k_max = cfg.retrieval.k_max.min(gallery.len());
        for (k, rate) in voting::hit_curve(&q, &g, &truth, k_max)?.iter().enumerate() {
            text.push_str(&format!("{},{}\n", k + 1, rate));
        }
    }
    write_text(out, RETRIEVAL, &text)
}
