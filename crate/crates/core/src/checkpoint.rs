//! Versioned JSON containers for model and adapter checkpoints.
//!
//! Matrices are stored as shapes plus flattened row-major data. JSON `f64`
//! serialization uses shortest-round-trip formatting, so save/load is
//! bit-exact for every finite weight; a property test pins that.

use crate::adapters::{AdaptedModel, AdapterSpec, PrefixInitMode};
use crate::linalg::Matrix;
use crate::model::Model;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported format version {got} (expected {FORMAT_VERSION})")]
    Version { got: u32 },
    #[error("expected a {expect} container, found {got}")]
    WrongKind { expect: &'static str, got: String },
    #[error("checkpoint param {name} does not match the target adapter")]
    ParamMismatch { name: String },
    #[error("adapter error: {0}")]
    Adapter(#[from] crate::adapters::AdapterError),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum Payload {
    Model { model: Model },
    Adapter { spec: AdapterSpec, trainable: Vec<NamedMatrix> },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedMatrix {
    name: String,
    value: Matrix,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Container {
    format_version: u32,
    payload: Payload,
}

fn write(path: &Path, payload: Payload) -> Result<(), CheckpointError> {
    let container = Container { format_version: FORMAT_VERSION, payload };
    fs::write(path, serde_json::to_string(&container)?)?;
    Ok(())
}

fn read(path: &Path) -> Result<Payload, CheckpointError> {
    let container: Container = serde_json::from_str(&fs::read_to_string(path)?)?;
    if container.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version { got: container.format_version });
    }
    Ok(container.payload)
}

pub fn save_model(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    write(path, Payload::Model { model: model.clone() })
}

pub fn load_model(path: &Path) -> Result<Model, CheckpointError> {
    match read(path)? {
        Payload::Model { model } => Ok(model),
        Payload::Adapter { .. } => {
            Err(CheckpointError::WrongKind { expect: "model", got: "adapter".into() })
        }
    }
}

/// Save the adapter's declarative spec plus every trainable matrix by name.
pub fn save_adapter(adapted: &AdaptedModel, spec: &AdapterSpec, path: &Path) -> Result<(), CheckpointError> {
    let trainable = adapted
        .params()
        .iter()
        .filter(|p| p.trainable)
        .map(|p| NamedMatrix { name: p.name.clone(), value: p.value.clone() })
        .collect();
    write(path, Payload::Adapter { spec: spec.clone(), trainable })
}

/// Re-attach a saved adapter to a frozen model: the spec reconstructs the
/// parameter layout and the stored matrices overwrite its trainable slots.
pub fn load_adapter<R: Rng + ?Sized>(
    path: &Path,
    model: Model,
    rng: &mut R,
) -> Result<(AdaptedModel, AdapterSpec), CheckpointError> {
    let Payload::Adapter { spec, trainable } = read(path)? else {
        return Err(CheckpointError::WrongKind { expect: "adapter", got: "model".into() });
    };
    // Demo-derived initializations are overwritten below, so construction
    // never needs the original demos.
    let build_spec = match &spec {
        AdapterSpec::Prefix { m, reparam, .. } => {
            AdapterSpec::Prefix { m: *m, init: PrefixInitMode::Random, reparam: *reparam }
        }
        other => other.clone(),
    };
    let mut adapted = AdaptedModel::apply(model, &build_spec, None, rng)?;
    for nm in trainable {
        let slot = adapted
            .params_mut()
            .iter_mut()
            .find(|p| p.trainable && p.name == nm.name)
            .ok_or_else(|| CheckpointError::ParamMismatch { name: nm.name.clone() })?;
        if (slot.value.rows(), slot.value.cols()) != (nm.value.rows(), nm.value.cols()) {
            return Err(CheckpointError::ParamMismatch { name: nm.name });
        }
        slot.value = nm.value;
    }
    Ok((adapted, spec))
}
