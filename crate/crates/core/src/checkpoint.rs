//! Saving and restoring trained models.
//!
//! A checkpoint is one JSON document holding a format tag, the architecture
//! description needed to rebuild the networks, and every named parameter
//! array with its shape. Loading rebuilds the architecture from the
//! description and then overwrites its parameters, refusing files whose
//! parameter names or shapes do not match the rebuilt model exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adcore::Rng;
use crate::error::{Error, Result};
use crate::inference::{LstmInference, LstmInferenceConfig};
use crate::nn::{Mlp, Parameterized};
use crate::prior::{Binn, EmissionModel, EmissionOperator, GenerativeModel, VarDynNet};
use crate::training::JointModel;

const FORMAT_TAG: &str = "dynid-checkpoint-v1";

/// Observation-operator architecture, enough to rebuild the emission model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum EmissionSpec {
    Identity {
        r_diag: Vec<f64>,
    },
    Learned {
        sizes: Vec<usize>,
        activation: crate::nn::Activation,
        r_diag: Vec<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerativeSpec {
    pub d_z: usize,
    pub delta: f64,
    /// Whether a transition covariance network is attached.
    pub varnet: bool,
    pub emission: EmissionSpec,
}

/// What kind of model a checkpoint holds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ModelSpec {
    Generative(GenerativeSpec),
    Joint { gen: GenerativeSpec, inf: LstmInferenceConfig },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamBlock {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    spec: ModelSpec,
    params: BTreeMap<String, ParamBlock>,
}

/// A model restored from disk.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    Generative(GenerativeModel),
    Joint(JointModel),
}

impl LoadedModel {
    /// The generative half, whichever kind was stored.
    pub fn generative(&self) -> &GenerativeModel {
        match self {
            LoadedModel::Generative(m) => m,
            LoadedModel::Joint(j) => &j.gen,
        }
    }

    pub fn as_joint(&self) -> Option<&JointModel> {
        match self {
            LoadedModel::Generative(_) => None,
            LoadedModel::Joint(j) => Some(j),
        }
    }
}

fn emission_spec(em: &EmissionModel) -> EmissionSpec {
    match em.operator() {
        EmissionOperator::Identity { .. } => {
            EmissionSpec::Identity { r_diag: em.r_diag().to_vec() }
        }
        EmissionOperator::Learned(mlp) => EmissionSpec::Learned {
            sizes: mlp.sizes().to_vec(),
            activation: mlp.hidden_activation(),
            r_diag: em.r_diag().to_vec(),
        },
    }
}

fn generative_spec(model: &GenerativeModel) -> GenerativeSpec {
    GenerativeSpec {
        d_z: model.d_z(),
        delta: model.delta,
        varnet: model.varnet.is_some(),
        emission: emission_spec(&model.emission),
    }
}

fn rebuild_generative(spec: &GenerativeSpec) -> Result<GenerativeModel> {
    // fresh networks of the right shape; every weight is overwritten below
    let mut rng = Rng::new(0);
    let binn = Binn::dense(spec.d_z, &mut rng)?;
    let varnet = if spec.varnet { Some(VarDynNet::new(spec.d_z, &mut rng)?) } else { None };
    let emission = match &spec.emission {
        EmissionSpec::Identity { r_diag } => {
            EmissionModel::identity(spec.d_z, r_diag.clone())?
        }
        EmissionSpec::Learned { sizes, activation, r_diag } => {
            EmissionModel::learned(Mlp::new(sizes, *activation, &mut rng)?, r_diag.clone())?
        }
    };
    let model = GenerativeModel { binn, varnet, emission, delta: spec.delta };
    model.validate()?;
    Ok(model)
}

fn snapshot(model: &dyn Parameterized) -> BTreeMap<String, ParamBlock> {
    let mut map = BTreeMap::new();
    model.visit("", &mut |name, arr| {
        map.insert(
            name.to_string(),
            ParamBlock { shape: arr.shape().to_vec(), data: arr.data().to_vec() },
        );
    });
    map
}

fn restore(model: &mut dyn Parameterized, params: &BTreeMap<String, ParamBlock>) -> Result<()> {
    let mut missing: Vec<String> = Vec::new();
    let mut used: BTreeSet<String> = BTreeSet::new();
    let mut mismatch: Option<String> = None;
    model.visit_mut("", &mut |name, arr| match params.get(name) {
        None => missing.push(name.to_string()),
        Some(block) => {
            used.insert(name.to_string());
            if block.shape != arr.shape() || block.data.len() != arr.data().len() {
                if mismatch.is_none() {
                    mismatch = Some(format!(
                        "parameter {name}: stored shape {:?} does not fit model shape {:?}",
                        block.shape,
                        arr.shape()
                    ));
                }
            } else {
                arr.data_mut().copy_from_slice(&block.data);
            }
        }
    });
    if let Some(msg) = mismatch {
        return Err(Error::format(msg));
    }
    if !missing.is_empty() {
        return Err(Error::format(format!("checkpoint lacks parameters {missing:?}")));
    }
    if used.len() != params.len() {
        let extra: Vec<&String> = params.keys().filter(|k| !used.contains(*k)).collect();
        return Err(Error::format(format!(
            "checkpoint carries parameters the model has no place for: {extra:?}"
        )));
    }
    Ok(())
}

fn write_file(path: &Path, spec: ModelSpec, params: BTreeMap<String, ParamBlock>) -> Result<()> {
    let file = CheckpointFile { format: FORMAT_TAG.to_string(), spec, params };
    let bytes = serde_json::to_vec(&file)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn save_generative(path: &Path, model: &GenerativeModel) -> Result<()> {
    write_file(path, ModelSpec::Generative(generative_spec(model)), snapshot(model))
}

pub fn save_joint(path: &Path, model: &JointModel) -> Result<()> {
    let spec = ModelSpec::Joint {
        gen: generative_spec(&model.gen),
        inf: model.inf.config().clone(),
    };
    write_file(path, spec, snapshot(model))
}

pub fn load(path: &Path) -> Result<LoadedModel> {
    let bytes = std::fs::read(path).map_err(|e| {
        Error::format(format!("cannot read checkpoint {}: {e}", path.display()))
    })?;
    let file: CheckpointFile = serde_json::from_slice(&bytes)
        .map_err(|e| Error::format(format!("malformed checkpoint {}: {e}", path.display())))?;
    if file.format != FORMAT_TAG {
        return Err(Error::format(format!(
            "unsupported checkpoint format {:?} (expected {FORMAT_TAG:?})",
            file.format
        )));
    }
    match file.spec {
        ModelSpec::Generative(spec) => {
            let mut model = rebuild_generative(&spec)?;
            restore(&mut model, &file.params)?;
            Ok(LoadedModel::Generative(model))
        }
        ModelSpec::Joint { gen, inf } => {
            let mut rng = Rng::new(0);
            let mut model =
                JointModel { gen: rebuild_generative(&gen)?, inf: LstmInference::new(inf, &mut rng)? };
            model.validate()?;
            restore(&mut model, &file.params)?;
            Ok(LoadedModel::Joint(model))
        }
    }
}
