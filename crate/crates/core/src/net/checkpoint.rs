//! Self-describing JSON checkpoint: hyperparameters, named flat tensors and
//! the data-derived priors needed for sampling.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelParams, NetConfig};
use super::tape::Tensor;
use crate::error::{Error, Result};
use crate::geometry::LengthPrior;
use crate::training::TaskMode;

pub const CHECKPOINT_FORMAT: &str = "disflow-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Container {
    format: String,
    version: u32,
    config: NetConfig,
    task: TaskMode,
    length_prior: LengthPrior,
    /// `atom_counts[n]` = number of training structures with `n` sites.
    atom_counts: Vec<usize>,
    tensors: Vec<NamedTensor>,
}

/// A trained model plus what the sampler needs besides the weights.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub task: TaskMode,
    pub length_prior: LengthPrior,
    pub atom_counts: Vec<usize>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let tensors = self
            .params
            .named()
            .map(|(name, t)| NamedTensor {
                name: name.to_string(),
                shape: [t.nrows(), t.ncols()],
                data: t.iter().copied().collect(),
            })
            .collect();
        let c = Container {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.params.config.clone(),
            task: self.task,
            length_prior: self.length_prior,
            atom_counts: self.atom_counts.clone(),
            tensors,
        };
        Ok(serde_json::to_string(&c)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Container = serde_json::from_str(text)?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", c.format)));
        }
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", c.version)));
        }
        let named = c
            .tensors
            .into_iter()
            .map(|t| {
                let tensor = Tensor::from_shape_vec((t.shape[0], t.shape[1]), t.data)
                    .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", t.name)))?;
                Ok((t.name, tensor))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            params: ModelParams::from_named(c.config, named)?,
            task: c.task,
            length_prior: c.length_prior,
            atom_counts: c.atom_counts,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
