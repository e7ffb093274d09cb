use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{io, Error, Result};
use crate::net::Network;
use crate::params::{param_specs, ModelKind, ParamStore, BACKBONE_PREFIX};

/// How a model's backbone weights came to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lineage {
    Scratch,
    ExternalPretrained,
    PpnTransfer,
}

impl fmt::Display for Lineage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Lineage::Scratch => "scratch",
            Lineage::ExternalPretrained => "external_pretrained",
            Lineage::PpnTransfer => "ppn_transfer",
        })
    }
}

pub fn lineage_chain(chain: &[Lineage]) -> String {
    chain.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("→")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub model: ModelConfig,
    /// Hash of the backbone configuration the weights were built for.
    pub config_hash: String,
    /// Oldest first, e.g. `[external_pretrained, ppn_transfer]`.
    pub lineage: Vec<Lineage>,
    pub epochs: usize,
    pub best_val_loss: Option<f64>,
    pub seed: u64,
    pub learning_rate: Option<f64>,
    /// Validation-optimal detection threshold, for detectors.
    pub detection_threshold: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub weights: BTreeMap<String, Tensor>,
}

/// Where a fresh model's backbone comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Scratch,
    /// Weight file holding at least every `backbone.*` tensor.
    ExternalPretrained(PathBuf),
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io(path, e))
}

/// Reads a safetensors weight file.
pub fn read_weights(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    if !path.exists() {
        return Err(io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    Ok(candle_core::safetensors::load(path, &Device::Cpu)?
        .into_iter()
        .collect())
}

pub fn write_weights(path: &Path, weights: &BTreeMap<String, Tensor>) -> Result<()> {
    let map: HashMap<String, Tensor> = weights.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let tmp = path.with_extension("safetensors.tmp");
    candle_core::safetensors::save(&map, &tmp)?;
    fs::rename(&tmp, path).map_err(|e| io(path, e))
}

impl Checkpoint {
    pub fn from_network(net: &Network, lineage: Vec<Lineage>, seed: u64) -> Result<Self> {
        Ok(Checkpoint {
            meta: CheckpointMeta {
                kind: net.kind,
                model: net.config.clone(),
                config_hash: net.config.backbone.config_hash(),
                lineage,
                epochs: 0,
                best_val_loss: None,
                seed,
                learning_rate: None,
                detection_threshold: None,
            },
            weights: net.params().to_tensors()?,
        })
    }

    pub fn to_network(&self, dtype: DType) -> Result<Network> {
        if self.meta.config_hash != self.meta.model.backbone.config_hash() {
            return Err(Error::Config(
                "checkpoint config hash does not match its backbone configuration".into(),
            ));
        }
        Network::from_tensors(self.meta.model.clone(), self.meta.kind, &self.weights, dtype)
    }

    pub fn lineage_string(&self) -> String {
        lineage_chain(&self.meta.lineage)
    }

    /// Writes `path` (weights) and the metadata sidecar next to it, each via
    /// a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        }
        write_weights(path, &self.weights)?;
        atomic_write(&sidecar(path), &serde_json::to_vec_pretty(&self.meta)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta_path = sidecar(path);
        let meta_bytes = fs::read(&meta_path).map_err(|e| io(&meta_path, e))?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)?;
        let weights = read_weights(path)?;
        let ckpt = Checkpoint { meta, weights };
        // validates hash, names and shapes
        ckpt.to_network(DType::F32)?;
        Ok(ckpt)
    }
}

/// Builds a model with scratch heads and a backbone from `init`.
pub fn build_backbone(
    config: ModelConfig,
    kind: ModelKind,
    init: &Init,
    seed: u64,
    dtype: DType,
) -> Result<(Network, Vec<Lineage>)> {
    let net = Network::new(config, kind, seed, dtype)?;
    match init {
        Init::Scratch => Ok((net, vec![Lineage::Scratch])),
        Init::ExternalPretrained(path) => {
            let external = read_weights(path)?;
            copy_backbone(&net, &external)?;
            Ok((net, vec![Lineage::ExternalPretrained]))
        }
    }
}

/// Overwrites every `backbone.*` parameter of `net` from `source`.
fn copy_backbone(net: &Network, source: &BTreeMap<String, Tensor>) -> Result<()> {
    let specs = param_specs(&net.config, net.kind);
    let backbone: Vec<_> = specs
        .into_iter()
        .filter(|s| s.name.starts_with(BACKBONE_PREFIX))
        .collect();
    let subset: BTreeMap<String, Tensor> = source
        .iter()
        .filter(|(k, _)| k.starts_with(BACKBONE_PREFIX))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let loaded = ParamStore::from_tensors(&backbone, &subset, net.dtype())?;
    for (name, var) in loaded.iter() {
        net.params().set(name, var.as_tensor())?;
    }
    Ok(())
}

/// Detector checkpoint whose backbone is copied bit for bit from a PPN
/// checkpoint; detector heads are freshly initialized from `seed` and the
/// PPN head is dropped.
pub fn transfer_weights(ppn: &Checkpoint, detector: &ModelConfig, seed: u64) -> Result<Checkpoint> {
    if ppn.meta.kind != ModelKind::Ppn {
        return Err(Error::Transfer("source checkpoint is not a PPN".into()));
    }
    let source_hash = ppn.meta.model.backbone.config_hash();
    if source_hash != ppn.meta.config_hash || source_hash != detector.backbone.config_hash() {
        return Err(Error::Transfer(format!(
            "backbone config hash mismatch: ppn {} vs detector {}",
            ppn.meta.config_hash,
            detector.backbone.config_hash()
        )));
    }
    let dtype = ppn.weights.values().next().map(|t| t.dtype()).unwrap_or(DType::F32);
    let net = Network::new(detector.clone(), ModelKind::Detector, seed, dtype)?;
    copy_backbone(&net, &ppn.weights)?;
    let mut lineage = ppn.meta.lineage.clone();
    lineage.push(Lineage::PpnTransfer);
    Checkpoint::from_network(&net, lineage, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(t: &Tensor) -> Vec<u32> {
        t.flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap()
            .iter()
            .map(|v| v.to_bits())
            .collect()
    }

    fn ppn_ckpt(seed: u64) -> Checkpoint {
        let net = Network::new(ModelConfig::tiny(), ModelKind::Ppn, seed, DType::F32).unwrap();
        Checkpoint::from_network(&net, vec![Lineage::Scratch], seed).unwrap()
    }

    #[test]
    fn transfer_copies_backbone_exactly() {
        let ppn = ppn_ckpt(1);
        let det = transfer_weights(&ppn, &ModelConfig::tiny(), 2).unwrap();
        let mut backbone = 0;
        for (k, v) in &det.weights {
            if k.starts_with(BACKBONE_PREFIX) {
                backbone += 1;
                assert_eq!(bits(v), bits(&ppn.weights[k]), "{k}");
            } else {
                assert!(!ppn.weights.contains_key(k));
            }
        }
        assert!(backbone > 0);
        assert!(!det.weights.keys().any(|k| k.starts_with("ppn_head")));
        assert_eq!(det.lineage_string(), "scratch→ppn_transfer");
    }

    #[test]
    fn transfer_is_idempotent() {
        let ppn = ppn_ckpt(1);
        let a = transfer_weights(&ppn, &ModelConfig::tiny(), 9).unwrap();
        let b = transfer_weights(&ppn, &ModelConfig::tiny(), 9).unwrap();
        for (k, v) in &a.weights {
            assert_eq!(bits(v), bits(&b.weights[k]));
        }
    }

    #[test]
    fn hash_mismatch_is_refused() {
        let ppn = ppn_ckpt(1);
        assert!(matches!(
            transfer_weights(&ppn, &ModelConfig::desk(), 0),
            Err(Error::Transfer(_))
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let mut ck = ppn_ckpt(4);
        ck.meta.best_val_loss = Some(0.25);
        ck.save(&path).unwrap();
        assert!(dir.path().join("m.json").exists());
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.meta, ck.meta);
        for (k, v) in &ck.weights {
            assert_eq!(bits(v), bits(&back.weights[k]));
        }
    }

    #[test]
    fn external_backbone_loads_and_truncation_fails() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ext.safetensors");
        let src = ppn_ckpt(3);
        write_weights(&path, &src.weights).unwrap();
        let (net, lineage) = build_backbone(
            ModelConfig::tiny(),
            ModelKind::Detector,
            &Init::ExternalPretrained(path.clone()),
            0,
            DType::F32,
        )
        .unwrap();
        assert_eq!(lineage, vec![Lineage::ExternalPretrained]);
        let w = net.params().get("backbone.stem.weight").as_tensor();
        assert_eq!(bits(w), bits(&src.weights["backbone.stem.weight"]));

        let mut cut = src.weights.clone();
        cut.remove("backbone.stage2.block0.conv1.weight");
        cut.remove("backbone.decoder.up0.fuse.norm.bias");
        write_weights(&path, &cut).unwrap();
        let err = build_backbone(
            ModelConfig::tiny(),
            ModelKind::Ppn,
            &Init::ExternalPretrained(path),
            0,
            DType::F32,
        )
        .unwrap_err();
        match err {
            Error::Load { missing, .. } => {
                assert!(missing.contains(&"backbone.stage2.block0.conv1.weight".to_string()));
                assert!(missing.contains(&"backbone.decoder.up0.fuse.norm.bias".to_string()));
            }
            other => panic!("unexpected {other:?}"),
        }
        let absent = build_backbone(
            ModelConfig::tiny(),
            ModelKind::Ppn,
            &Init::ExternalPretrained(dir.path().join("nope.safetensors")),
            0,
            DType::F32,
        );
        assert!(matches!(absent, Err(Error::Io { .. })));
    }
}
