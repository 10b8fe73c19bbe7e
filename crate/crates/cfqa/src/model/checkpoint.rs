//! Self-describing model checkpoints: config, vocabulary hash, and all
//! parameter tensors as JSON, versioned with a format tag. The
//! counterfactual bias sits in its own section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackboneConfig, Model};
use crate::corpus::io::ArtifactMeta;
use crate::corpus::Vocabulary;
use crate::effects::BiasMode;
use crate::trainer::{AblateBranch, TrainMode};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "cfqa-checkpoint-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub meta: ArtifactMeta,
    pub backbone: BackboneConfig,
    pub vocab_size: usize,
    pub vocab_hash: String,
    pub train_mode: TrainMode,
    pub bias_mode: BiasMode,
    pub ablate: Option<AblateBranch>,
    pub params: Vec<TensorRecord>,
    /// The learnable counterfactual bias, kept in its own section.
    pub bias: Vec<TensorRecord>,
}

/// Extra provenance stored alongside the weights.
#[derive(Debug, Clone)]
pub struct CheckpointInfo {
    pub meta: ArtifactMeta,
    pub train_mode: TrainMode,
    pub ablate: Option<AblateBranch>,
}

pub fn save(
    path: &Path,
    model: &Model,
    vocab: &Vocabulary,
    meta: ArtifactMeta,
    train_mode: TrainMode,
    ablate: Option<AblateBranch>,
) -> Result<()> {
    let mut params = Vec::new();
    let mut bias = Vec::new();
    for t in model.params.tensors() {
        let rec = TensorRecord {
            name: t.name.clone(),
            rows: t.rows,
            cols: t.cols,
            data: t.data.clone(),
        };
        if t.name.starts_with("bias.") {
            bias.push(rec);
        } else {
            params.push(rec);
        }
    }
    let ckpt = Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        meta,
        backbone: model.config.clone(),
        vocab_size: model.vocab_size,
        vocab_hash: vocab.hash(),
        train_mode,
        bias_mode: model.bias_mode,
        ablate,
        params,
        bias,
    };
    fs::write(path, serde_json::to_vec(&ckpt)?)?;
    Ok(())
}

pub fn load(path: &Path, vocab: &Vocabulary) -> Result<(Model, CheckpointInfo)> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let ckpt: Checkpoint = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {:?} (expected {CHECKPOINT_FORMAT})",
            ckpt.format
        )));
    }
    if ckpt.vocab_hash != vocab.hash() {
        return Err(Error::Checkpoint(
            "checkpoint was trained with a different vocabulary".into(),
        ));
    }
    if ckpt.vocab_size != vocab.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint vocabulary size {} != provided {}",
            ckpt.vocab_size,
            vocab.len()
        )));
    }
    let mut model = Model::new(ckpt.backbone.clone(), ckpt.vocab_size, ckpt.bias_mode)?;
    let mut seen = 0usize;
    for rec in ckpt.params.iter().chain(&ckpt.bias) {
        let id = model.params.id(&rec.name).ok_or_else(|| {
            Error::Checkpoint(format!("unknown parameter {:?} in checkpoint", rec.name))
        })?;
        let t = model.params.get_mut(id);
        if (t.rows, t.cols) != (rec.rows, rec.cols) {
            return Err(Error::Checkpoint(format!(
                "parameter {:?} has shape ({}, {}), expected ({}, {})",
                rec.name, rec.rows, rec.cols, t.rows, t.cols
            )));
        }
        t.data = rec.data.clone();
        seen += 1;
    }
    if seen != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {seen} tensors, model needs {}",
            model.params.len()
        )));
    }
    Ok((
        model,
        CheckpointInfo {
            meta: ckpt.meta,
            train_mode: ckpt.train_mode,
            ablate: ckpt.ablate,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::gen::GenConfig;

    #[test]
    fn roundtrip_preserves_every_parameter_bit() {
        let gen = GenConfig {
            num_examples: 1,
            entity_pool_size: 30,
            ..GenConfig::default()
        };
        let vocab = gen.vocabulary().unwrap();
        let backbone = BackboneConfig {
            hidden_dim: 8,
            layers: 1,
            attention_heads: 2,
            ffn_dim: 16,
            max_seq_len: 64,
            head_hidden: true,
            seed: 5,
        };
        let model = Model::new(backbone, vocab.len(), BiasMode::Random).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        let meta = ArtifactMeta::new(CHECKPOINT_FORMAT, "train".into(), "hash".into(), 5);
        save(&path, &model, &vocab, meta, TrainMode::Counterfactual, None).unwrap();
        let (loaded, info) = load(&path, &vocab).unwrap();
        assert_eq!(info.train_mode, TrainMode::Counterfactual);
        for (a, b) in model.params.tensors().iter().zip(loaded.params.tensors()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.data, b.data, "tensor {} changed", a.name);
        }
    }

    #[test]
    fn wrong_vocabulary_is_rejected() {
        let gen = GenConfig {
            num_examples: 1,
            entity_pool_size: 30,
            ..GenConfig::default()
        };
        let vocab = gen.vocabulary().unwrap();
        let other = GenConfig {
            entity_pool_size: 31,
            ..gen.clone()
        }
        .vocabulary()
        .unwrap();
        let backbone = BackboneConfig {
            hidden_dim: 8,
            layers: 1,
            attention_heads: 2,
            ffn_dim: 16,
            max_seq_len: 64,
            head_hidden: false,
            seed: 6,
        };
        let model = Model::new(backbone, vocab.len(), BiasMode::Uniform).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        let meta = ArtifactMeta::new(CHECKPOINT_FORMAT, "train".into(), "hash".into(), 6);
        save(&path, &model, &vocab, meta, TrainMode::Baseline, None).unwrap();
        assert!(load(&path, &other).is_err());
    }
}
