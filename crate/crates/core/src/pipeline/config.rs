use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crge::{AffinityScheme, ConstraintMode};
use crate::dataset::{Geometry, SynthSpec};
use crate::error::{Error, Result};
use crate::mrmr::Redundancy;

/// Full pipeline configuration. Every field has a default, so an empty
/// file is a valid configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub coarse: CoarseConfig,
    pub select: SelectConfig,
    pub embed: EmbedConfig,
    pub templates: TemplateConfig,
    pub voting: VotingConfig,
    pub retrieval: RetrievalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            output: PathBuf::from("ctf-out"),
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            coarse: CoarseConfig::default(),
            select: SelectConfig::default(),
            embed: EmbedConfig::default(),
            templates: TemplateConfig::default(),
            voting: VotingConfig::default(),
            retrieval: RetrievalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Generate candidates with the synthetic generator, then split by case.
    #[default]
    Synth,
    /// Read `train` and `test` files in the candidate CSV format.
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Fraction of cases assigned to training when splitting synthetic data.
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synth,
            train: None,
            test: None,
            train_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_cases: usize,
    pub candidates_per_case: (usize, usize),
    pub n_features: usize,
    pub n_informative: usize,
    pub views_per_informative: usize,
    pub geometry: Geometry,
    pub positive_rate: f64,
    pub noise_sigma: f64,
    /// Generator seed; derived from the global seed when absent.
    pub seed: Option<u64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_cases: 60,
            candidates_per_case: (40, 60),
            n_features: 12,
            n_informative: 3,
            views_per_informative: 2,
            geometry: Geometry::Ring,
            positive_rate: 0.05,
            noise_sigma: 0.3,
            seed: None,
        }
    }
}

impl SynthConfig {
    pub fn spec(&self, seed: u64) -> SynthSpec {
        SynthSpec {
            n_cases: self.n_cases,
            candidates_per_case: self.candidates_per_case,
            n_features: self.n_features,
            n_informative: self.n_informative,
            views_per_informative: self.views_per_informative,
            geometry: self.geometry,
            positive_rate: self.positive_rate,
            noise_sigma: self.noise_sigma,
            seed: self.seed.unwrap_or(seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoarseConfig {
    pub prior_sigma2: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Initial Levenberg damping for the Newton steps.
    pub ridge: f64,
    /// Instance recall on training positives kept by the pruning threshold.
    pub target_recall: f64,
    /// Fixed pruning threshold; overrides `target_recall`.
    pub rho: Option<f64>,
}

impl Default for CoarseConfig {
    fn default() -> Self {
        CoarseConfig {
            prior_sigma2: crate::mil::DEFAULT_PRIOR_SIGMA2,
            max_iters: 200,
            grad_tol: 1e-6,
            ridge: 0.0,
            target_recall: 1.0,
            rho: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectConfig {
    pub enabled: bool,
    /// Upper bound on selected features; 0 means no bound.
    pub max_m: usize,
    pub redundancy: Redundancy,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            enabled: true,
            max_m: 0,
            redundancy: Redundancy::Inclusive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Crge,
    Spg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DimSelection {
    /// Lowest energy of the unit-norm embedded training data.
    Energy,
    /// Highest training partial AUC of the whole cascade.
    #[default]
    Pauc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    /// When off, the selected features pass through unchanged (scaled to unit norm map).
    pub enabled: bool,
    pub backend: Backend,
    /// Sphere the selected features with the training covariance first.
    pub whiten: bool,
    pub affinity: AffinityScheme,
    /// Cosine affinities on features shifted to be non-negative.
    pub nonnegative_cosine: bool,
    pub mode: ConstraintMode,
    /// Candidate embedding dimensions, inclusive; clipped to the feature count.
    pub dim_min: usize,
    pub dim_max: usize,
    pub dim_selection: DimSelection,
    /// Initial gradient step, halved on every energy increase.
    pub step: f64,
    pub max_iters: usize,
    pub graph_k: usize,
    pub k_sparsity: Option<usize>,
    pub beta: Option<f64>,
    /// Embedding dimension for the sparse backend.
    pub spg_dim: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            enabled: true,
            backend: Backend::Crge,
            whiten: true,
            affinity: AffinityScheme::Cosine,
            nonnegative_cosine: true,
            mode: ConstraintMode::Orthonormal,
            dim_min: 2,
            dim_max: 5,
            dim_selection: DimSelection::Pauc,
            step: 1e-2,
            max_iters: 2000,
            graph_k: 5,
            k_sparsity: None,
            beta: None,
            spg_dim: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateConfig {
    pub c_max: usize,
    pub restarts: usize,
    pub max_iters: usize,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        TemplateConfig {
            c_max: 10,
            restarts: 5,
            max_iters: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VotingConfig {
    pub fp_lo: f64,
    pub fp_hi: f64,
    /// Fixed neighbor count; chosen by partial AUC on training data when absent.
    pub k: Option<usize>,
    pub counting: bool,
}

impl Default for VotingConfig {
    fn default() -> Self {
        VotingConfig {
            fp_lo: 2.0,
            fp_hi: 4.0,
            k: None,
            counting: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k_max: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { k_max: 10 }
    }
}

/// SplitMix64 finalizer, used to derive independent stage seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub synth: u64,
    pub split: u64,
    pub embed: u64,
    pub templates: u64,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn seeds(&self) -> StageSeeds {
        StageSeeds {
            synth: self.synth.seed.unwrap_or(mix(self.seed ^ 1)),
            split: mix(self.seed ^ 2),
            embed: mix(self.seed ^ 3),
            templates: mix(self.seed ^ 4),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.data.source == DataSource::Files
            && (self.data.train.is_none() || self.data.test.is_none())
        {
            return bad("data.source = \"files\" needs data.train and data.test");
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return bad("data.train_fraction must lie in (0,1)");
        }
        if !(self.coarse.prior_sigma2 > 0.0) {
            return bad("coarse.prior_sigma2 must be positive");
        }
        if !(self.coarse.target_recall > 0.0 && self.coarse.target_recall <= 1.0) {
            return bad("coarse.target_recall must lie in (0,1]");
        }
        if let Some(rho) = self.coarse.rho {
            if !(0.0..=1.0).contains(&rho) {
                return bad("coarse.rho must lie in [0,1]");
            }
        }
        if self.embed.dim_min == 0 || self.embed.dim_min > self.embed.dim_max {
            return bad("embed.dim_min must lie in 1..=embed.dim_max");
        }
        if self.embed.spg_dim == 0 || self.embed.graph_k == 0 {
            return bad("embed.spg_dim and embed.graph_k must be positive");
        }
        if !(self.embed.step > 0.0) {
            return bad("embed.step must be positive");
        }
        if self.templates.c_max < 2 || self.templates.restarts == 0 {
            return bad("templates.c_max must be at least 2 and templates.restarts positive");
        }
        if !(self.voting.fp_lo >= 0.0 && self.voting.fp_lo < self.voting.fp_hi) {
            return bad("voting.fp_lo must be non-negative and below voting.fp_hi");
        }
        if self.voting.k == Some(0) || self.retrieval.k_max == 0 {
            return bad("voting.k and retrieval.k_max must be positive");
        }
        if self.data.source == DataSource::Synth {
            self.synth
                .spec(0)
                .validate()
                .map_err(|e| Error::Config(format!("synth: {e}")))?;
        }
        self.embed
            .affinity
            .validate(self.embed.affinity_dim())
            .map_err(|e| Error::Config(format!("embed.affinity: {e}")))
    }
}

impl EmbedConfig {
    /// Feature count a Mahalanobis matrix must match, or 0 when not applicable.
    fn affinity_dim(&self) -> usize {
        match &self.affinity {
            AffinityScheme::Mahalanobis { a, .. } => a.len(),
            _ => 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_default() {
        assert_eq!(
            PipelineConfig::from_toml("").unwrap(),
            PipelineConfig::default()
        );
    }

    #[test]
    fn round_trip() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(
            PipelineConfig::from_toml("bogus = 1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::from_toml("[embed]\nfoo = 2"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::from_toml("[voting]\nfp_lo = 4.0\nfp_hi = 2.0"),
            Err(Error::Config(_))
        ));
        let cfg = PipelineConfig::from_toml(
            "[embed]\naffinity = { kind = \"heat\", alpha = 0.5 }\nbackend = \"spg\"",
        )
        .unwrap();
        assert_eq!(cfg.embed.backend, Backend::Spg);
        assert!(
            PipelineConfig::from_toml("[embed]\naffinity = { kind = \"heat\", alpha = -1.0 }")
                .is_err()
        );
    }
}
