//! The two routers bundled with their dimensions.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{AnnotatedImage, DatasetSchema};
use crate::error::{Error, Result};
use crate::object_router::{self, ObjectRouterConfig};
use crate::relation_router::{self, RelationRouterConfig};
use crate::tensor::{init_rng, write_atomic, ParameterSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "predcls")]
    PredCls,
    #[serde(rename = "sgcls")]
    SgCls,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::PredCls => "PredCls",
            Task::SgCls => "SGCls",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "predcls" => Ok(Task::PredCls),
            "sgcls" => Ok(Task::SgCls),
            other => Err(Error::Validation(format!("unknown task {other:?}"))),
        }
    }
}

/// Architecture knobs shared by both routers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub object_steps: usize,
    pub relation_steps: usize,
    /// Regions past this index are dropped (annotation order).
    pub max_regions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 64,
            output_dim: 64,
            object_steps: 3,
            relation_steps: 3,
            max_regions: 64,
        }
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub num_categories: usize,
    pub num_predicates: usize,
    pub feature_dim: usize,
    pub config: ModelConfig,
}

impl ModelSpec {
    pub fn new(schema: &DatasetSchema, feature_dim: usize, config: ModelConfig) -> Self {
        ModelSpec {
            num_categories: schema.num_categories(),
            num_predicates: schema.num_predicates(),
            feature_dim,
            config,
        }
    }

    pub fn object_router(&self) -> ObjectRouterConfig {
        ObjectRouterConfig {
            num_categories: self.num_categories,
            feature_dim: self.feature_dim,
            hidden_dim: self.config.hidden_dim,
            output_dim: self.config.output_dim,
            steps: self.config.object_steps,
        }
    }

    pub fn relation_router(&self) -> RelationRouterConfig {
        RelationRouterConfig {
            num_predicates: self.num_predicates,
            feature_dim: self.feature_dim,
            hidden_dim: self.config.hidden_dim,
            output_dim: self.config.output_dim,
            steps: self.config.relation_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.object_router().validate()?;
        self.relation_router().validate()?;
        if self.config.max_regions == 0 {
            return Err(Error::Validation("max_regions must be positive".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("spec serializes");
        write_atomic(path, (text + "\n").as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let spec: ModelSpec = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParameterSet,
}

impl Model {
    /// Fresh parameters: weights uniform in ±1/√fan_in, zero biases.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = init_rng(seed);
        let mut params = ParameterSet::new();
        object_router::insert_params(&mut params, &spec.object_router(), &mut rng)?;
        relation_router::insert_params(&mut params, &spec.relation_router(), &mut rng)?;
        Ok(Model { spec, params })
    }

    /// Wraps loaded parameters after checking they match the layout of `spec`.
    pub fn from_params(spec: ModelSpec, params: ParameterSet) -> Result<Self> {
        let reference = Model::new(spec, 0)?;
        let names_match = reference.params.names().eq(params.names());
        if !names_match {
            return Err(Error::Validation("checkpoint parameters do not match the model layout".into()));
        }
        for ((name, a), (_, b)) in reference.params.iter().zip(params.iter()) {
            if a.shape() != b.shape() {
                return Err(Error::Validation(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(Model { spec, params })
    }

    /// `n × d_f` matrix of the first `n` region features.
    pub fn feature_matrix(&self, image: &AnnotatedImage, n: usize) -> Result<Tensor> {
        let d_f = self.spec.feature_dim;
        let mut data = Vec::with_capacity(n * d_f);
        for r in &image.regions[..n] {
            if r.feature.len() != d_f {
                return Err(Error::Validation(format!(
                    "image {}: feature length {} but model expects {d_f}",
                    image.image_id,
                    r.feature.len()
                )));
            }
            data.extend_from_slice(&r.feature);
        }
        Tensor::matrix(n, d_f, data)
    }

    pub fn region_count(&self, image: &AnnotatedImage) -> usize {
        image.regions.len().min(self.spec.config.max_regions)
    }
}
