//! Experiment configuration: one TOML file with a section per subsystem.
//! Every section falls back to its defaults field by field, and unknown keys
//! are rejected so a typo cannot silently become a default.

use std::collections::BTreeMap;
use std::path::Path;

use crate::codec::KpcaOpts;
use crate::datasets::{ImageGenOpts, ScmVariant};
use crate::error::{Error, Result};
use crate::flow::FlowOpts;
use crate::graph::CausalDag;
use crate::prior::Prior;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub graph: GraphConfig,
    /// Per-variable prior overrides; unlisted variables keep the standard
    /// normal.
    pub priors: BTreeMap<String, Prior>,
    pub flow: FlowOpts,
    pub train: TrainConfig,
    pub kpca: KpcaOpts,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        let data = DataConfig::default();
        let mut priors = BTreeMap::new();
        priors.insert("x0".into(), Prior::Uniform { low: 1.0, high: 2.0 });
        priors.insert("x1".into(), Prior::Normal { mean: 1.0, std: 1.0 });
        Self {
            graph: GraphConfig::default(),
            priors,
            flow: FlowOpts::default(),
            train: TrainConfig::default(),
            kpca: KpcaOpts::default(),
            data,
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub variables: Vec<String>,
    /// Directed edges as `[parent, child]` name pairs.
    pub edges: Vec<(String, String)>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        let dag = crate::datasets::scm_dag();
        let names = dag.names().to_vec();
        let mut edges = Vec::new();
        for child in 0..dag.len() {
            for p in dag.parents(child) {
                edges.push((names[p].clone(), names[child].clone()));
            }
        }
        Self { variables: names, edges }
    }
}

impl GraphConfig {
    pub fn build(&self) -> Result<CausalDag> {
        let index = |name: &str| {
            self.variables
                .iter()
                .position(|v| v == name)
                .ok_or_else(|| Error::Config(format!("edge references unknown variable {name:?}")))
        };
        let mut edges = Vec::with_capacity(self.edges.len());
        for (p, c) in &self.edges {
            edges.push((index(p)?, index(c)?));
        }
        CausalDag::from_edges(self.variables.clone(), &edges)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Scm,
    Images,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Rows (or images) to generate.
    pub n: usize,
    pub seed: u64,
    pub variant: ScmVariant,
    /// Fraction of generated rows held out as the test split.
    pub test_fraction: f64,
    pub images: ImageGenOpts,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Scm,
            n: 10_000,
            seed: 1,
            variant: ScmVariant::Uniform12,
            test_fraction: 0.3,
            images: ImageGenOpts::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    /// Rows drawn from the model for distributional checks.
    pub sample_n: usize,
    /// Intervention audited by the counterfactual experiment.
    pub intervention: String,
    /// Key range and bin count for the counterfactual alignment curve.
    pub curve_lo: f64,
    pub curve_hi: f64,
    pub curve_bins: usize,
    pub ks_alpha: f64,
    pub blur_sigma: f64,
    pub probe_ridge: f64,
    /// Age offsets (years, relative to the test median) swept by the image
    /// counterfactual experiment.
    pub cf_age_offsets: Vec<f64>,
    /// Posterior mass is compared inside vs outside this band around the
    /// true age.
    pub posterior_radius: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 99,
            sample_n: 10_000,
            intervention: "x2=2".into(),
            curve_lo: -5.0,
            curve_hi: 15.0,
            curve_bins: 10,
            ks_alpha: 0.01,
            blur_sigma: 1.0,
            probe_ridge: 1e-3,
            cf_age_offsets: vec![-20.0, -15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0],
            posterior_radius: 5.0,
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Graph plus per-variable priors, standard normal where not overridden.
    pub fn model_inputs(&self) -> Result<(CausalDag, Vec<Prior>)> {
        let dag = self.graph.build()?;
        for name in self.priors.keys() {
            if dag.index_of(name).is_none() {
                return Err(Error::Config(format!(
                    "prior for unknown variable {name:?}"
                )));
            }
        }
        let priors = dag
            .names()
            .iter()
            .map(|n| self.priors.get(n).cloned().unwrap_or(Prior::StandardNormal))
            .collect();
        Ok((dag, priors))
    }

    pub fn validate(&self) -> Result<()> {
        self.graph.build()?;
        self.model_inputs()?;
        self.data.images.validate()?;
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction {} must lie in (0, 1)",
                self.data.test_fraction
            )));
        }
        if self.data.n == 0 {
            return Err(Error::Config("data.n must be positive".into()));
        }
        if !(self.eval.curve_hi > self.eval.curve_lo) || self.eval.curve_bins == 0 {
            return Err(Error::Config("eval curve range is empty".into()));
        }
        if !(self.eval.ks_alpha > 0.0 && self.eval.ks_alpha < 1.0) {
            return Err(Error::Config(format!(
                "ks_alpha {} must lie in (0, 1)",
                self.eval.ks_alpha
            )));
        }
        if self.kpca.groups == 0 || !self.kpca.components.is_multiple_of(self.kpca.groups) {
            return Err(Error::Config(format!(
                "kpca components {} must split evenly into {} groups",
                self.kpca.components, self.kpca.groups
            )));
        }
        Ok(())
    }

    /// Re-seeds every section from one master seed, each down its own
    /// derived stream.
    pub fn override_seed(&mut self, seed: u64) {
        self.data.seed = crate::rng::derive_seed(seed, 1);
        self.train.seed = crate::rng::derive_seed(seed, 2);
        self.kpca.seed = crate::rng::derive_seed(seed, 3);
        self.eval.seed = crate::rng::derive_seed(seed, 4);
    }
}
