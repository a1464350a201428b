//! Model checkpoints: a `manifest.json` plus one DGT1 file per parameter.
//!
//! Values are stored as 32-bit floats, so an `f32` model reloads bitwise.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dgt;
use crate::error::{Error, Result};
use crate::flow::Flow;
use crate::model::DualGlowModel;
use crate::nn::Module;
use crate::tensor::Scalar;

pub const CHECKPOINT_FORMAT: &str = "dualglow-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: RunConfig,
    pub initialized: bool,
    /// Layer kinds of the source flow, in order.
    pub flow_m: Vec<String>,
    /// Layer kinds of the target flow, in order.
    pub flow_p: Vec<String>,
    pub params: Vec<ParamEntry>,
}

impl CheckpointManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: CheckpointManifest =
            serde_json::from_str(text).map_err(|e| Error::config(format!("checkpoint manifest: {e}")))?;
        if m.format != CHECKPOINT_FORMAT {
            return Err(Error::config(format!("unsupported checkpoint format {:?}", m.format)));
        }
        m.config.validate()?;
        let mut seen = BTreeSet::new();
        for p in &m.params {
            if !seen.insert(p.name.as_str()) {
                return Err(Error::config(format!("parameter {} listed twice", p.name)));
            }
            if !safe_file_name(&p.file) {
                return Err(Error::config(format!("parameter file {:?} is not a plain file name", p.file)));
            }
        }
        Ok(m)
    }
}

fn safe_file_name(f: &str) -> bool {
    !f.is_empty()
        && f != "."
        && f != ".."
        && f.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

fn layer_kinds<T: Scalar>(flow: &Flow<T>) -> Vec<String> {
    flow.layers().iter().map(|l| l.kind().to_string()).collect()
}

/// Writes `model` to `dir`. `run` supplies the seed and training settings;
/// its model section is replaced by the model's own configuration.
pub fn save<T: Scalar>(dir: impl AsRef<Path>, model: &DualGlowModel<T>, run: &RunConfig) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("params"))?;
    let mut params = Vec::new();
    for p in model.params() {
        let file = format!("{}.dgt", p.name);
        dgt::write_file(dir.join("params").join(&file), &p.value)?;
        params.push(ParamEntry {
            name: p.name.clone(),
            file,
            shape: p.value.shape().to_vec(),
        });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        config: RunConfig {
            model: model.config.clone(),
            ..run.clone()
        },
        initialized: model.initialized,
        flow_m: layer_kinds(&model.flow_m),
        flow_p: layer_kinds(&model.flow_p),
        params,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(())
}

/// Rebuilds the model from the stored configuration, checks the layer
/// structure against the manifest and loads every parameter.
pub fn load<T: Scalar>(dir: impl AsRef<Path>) -> Result<(DualGlowModel<T>, RunConfig)> {
    let dir = dir.as_ref();
    let manifest = CheckpointManifest::parse(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let run = manifest.config.clone();
    let mut model = DualGlowModel::<T>::new(run.model.clone(), run.seed)?;
    for (side, stored, built) in [
        ("flow_m", &manifest.flow_m, layer_kinds(&model.flow_m)),
        ("flow_p", &manifest.flow_p, layer_kinds(&model.flow_p)),
    ] {
        if *stored != built {
            let at = stored.iter().zip(&built).position(|(a, b)| a != b).unwrap_or(stored.len().min(built.len()));
            return Err(Error::config(format!(
                "{side} layer order differs from the configuration at layer {at}: checkpoint has {} layers, config builds {}",
                stored.len(),
                built.len()
            )));
        }
    }
    let expected: BTreeSet<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let stored: BTreeSet<String> = manifest.params.iter().map(|p| p.name.clone()).collect();
    if let Some(missing) = expected.difference(&stored).next() {
        return Err(Error::config(format!("checkpoint lacks parameter {missing}")));
    }
    if let Some(extra) = stored.difference(&expected).next() {
        return Err(Error::config(format!("checkpoint has unknown parameter {extra}")));
    }
    for p in model.params_mut() {
        let entry = manifest.params.iter().find(|e| e.name == p.name).expect("checked above");
        let value = dgt::read_file::<T>(dir.join("params").join(&entry.file))?;
        if value.shape() != p.value.shape() || entry.shape != p.value.shape() {
            return Err(Error::dim(format!(
                "parameter {} has shape {:?} on disk, model expects {:?}",
                p.name,
                value.shape(),
                p.value.shape()
            )));
        }
        p.value = value;
    }
    model.initialized = manifest.initialized;
    Ok((model, run))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::flow::{FlowConfig, FlowLayer};
    use crate::nn::perturb;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> (DualGlowModel<f32>, RunConfig) {
        let mut flow = FlowConfig::new([1, 8, 8], 2, 2);
        flow.hidden = 4;
        let mut run = RunConfig {
            seed: 4,
            ..Default::default()
        };
        run.model = ModelConfig::new(flow);
        let mut m = DualGlowModel::new(run.model.clone(), run.seed).unwrap();
        perturb(&mut m, &mut ChaCha8Rng::seed_from_u64(1), 0.1);
        (m, run)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let (m, run) = model();
        save(dir.path(), &m, &run).unwrap();
        let (back, run_back) = load::<f32>(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(run_back, run);
    }

    #[test]
    fn layer_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let (mut m, run) = model();
        m.flow_m.push_layer(FlowLayer::Reverse).unwrap();
        save(dir.path(), &m, &run).unwrap();
        let err = load::<f32>(dir.path()).unwrap_err();
        assert!(err.to_string().contains("flow_m layer order"), "{err}");
    }

    #[test]
    fn missing_parameter_file() {
        let dir = tempfile::tempdir().unwrap();
        let (m, run) = model();
        save(dir.path(), &m, &run).unwrap();
        fs::remove_file(dir.path().join("params/relation.0.bias.dgt")).unwrap();
        assert!(load::<f32>(dir.path()).is_err());
    }

    #[test]
    fn manifest_rejects_path_escapes() {
        let dir = tempfile::tempdir().unwrap();
        let (m, run) = model();
        save(dir.path(), &m, &run).unwrap();
        let text = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let bad = text.replacen("\"relation.0.bias.dgt\"", "\"../relation.0.bias.dgt\"", 1);
        assert!(CheckpointManifest::parse(&bad).is_err());
        assert!(CheckpointManifest::parse(&text).is_ok());
    }
}
