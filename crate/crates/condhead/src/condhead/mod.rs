//! Semantic-conditioned dynamic heads: expert banks with generated
//! aggregation weights, hypernetwork-generated light heads, blended
//! predictions, and the two comparison baselines.

pub mod arch;
mod flops;
mod model;

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels;
use crate::error::{Error, Result};

pub use flops::{flop_count, FlopReport, HeadDims};
pub use model::{
    aggregate_parameters, classwise_transfer, generate_parameters, generate_weights,
    AgnosticModel, AgnosticVars, ClassWiseHead, ClassWiseModel, CondHeadModel, CondHeadVars,
    CondVars, Conditioned, ExpertBank, GeneratedHead, Model, ModelDims, Variant,
};

/// Unit-norm semantic vector standing in for a category-name embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticEmbedding {
    pub category: u32,
    vector: Vec<f64>,
}

impl SemanticEmbedding {
    /// Normalizes to unit L2 norm; rejects non-finite or near-zero vectors.
    pub fn new(category: u32, vector: Vec<f64>) -> Result<Self> {
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("embedding has non-finite entries".into()));
        }
        let n = kernels::norm(&vector);
        if n < 1e-12 {
            return Err(Error::Domain("embedding has near-zero norm".into()));
        }
        let vector = vector.into_iter().map(|v| v / n).collect();
        Ok(SemanticEmbedding { category, vector })
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Hyper-parameters of the conditioned head pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CondHeadConfig {
    /// Number of expert heads H per task.
    pub experts: usize,
    /// Box blend weight between aggregated and generated branch.
    pub lambda: f64,
    /// Mask blend weight between aggregated and generated branch.
    pub mu: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Iterations over which the temperature decays linearly to `tau_end`.
    pub anneal_iters: usize,
    /// Semantic embedding dimension E.
    pub embed_dim: usize,
    /// Hidden width of fully connected heads and generators.
    pub fc_hidden: usize,
    /// Hidden channel count of the conv mask experts.
    pub conv_hidden: usize,
    /// Hidden width of the weight/parameter generator nets.
    pub gen_hidden: usize,
}

impl Default for CondHeadConfig {
    fn default() -> Self {
        CondHeadConfig {
            experts: 8,
            lambda: 0.6,
            mu: 0.6,
            tau_start: 20.0,
            tau_end: 1.0,
            anneal_iters: 500,
            embed_dim: 64,
            fc_hidden: 256,
            conv_hidden: 8,
            gen_hidden: 256,
        }
    }
}

impl CondHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 {
            return Err(Error::Config("expert count must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) || !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::Config(format!(
                "blend weights must lie in [0,1]: lambda={}, mu={}",
                self.lambda, self.mu
            )));
        }
        if !(self.tau_end > 0.0 && self.tau_start >= self.tau_end) {
            return Err(Error::Config(format!(
                "temperature schedule requires tau_start >= tau_end > 0, got {} -> {}",
                self.tau_start, self.tau_end
            )));
        }
        if self.anneal_iters == 0 {
            return Err(Error::Config("anneal_iters must be >= 1".into()));
        }
        if self.embed_dim == 0 || self.fc_hidden == 0 || self.conv_hidden == 0 || self.gen_hidden == 0
        {
            return Err(Error::Config("zero width in head configuration".into()));
        }
        Ok(())
    }
}

/// Linear temperature decay from `tau_start` to `tau_end` over the first
/// `anneal_iters` iterations, clamped afterwards.
pub fn anneal_tau(cfg: &CondHeadConfig, iter: usize) -> f64 {
    if iter >= cfg.anneal_iters {
        return cfg.tau_end;
    }
    let frac = iter as f64 / cfg.anneal_iters as f64;
    cfg.tau_start + (cfg.tau_end - cfg.tau_start) * frac
}
