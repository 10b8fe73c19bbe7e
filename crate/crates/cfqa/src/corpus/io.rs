//! On-disk formats: JSON Lines datasets with a provenance header, and the
//! vocabulary as a plain JSON array of tokens.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Example, Vocabulary};
use crate::{Error, Result};

/// Provenance embedded in every artifact this tool writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub format: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
}

impl ArtifactMeta {
    pub fn new(format: &str, command: String, config_hash: String, seed: u64) -> Self {
        Self {
            format: format.to_string(),
            command,
            config_hash,
            seed,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    meta: ArtifactMeta,
}

/// Write a dataset: one header line with provenance, then one example per
/// line.
pub fn write_dataset(path: &Path, meta: &ArtifactMeta, examples: &[Example]) -> Result<()> {
    let mut out = fs::File::create(path)?;
    writeln!(out, "{}", serde_json::to_string(&HeaderLine { meta: meta.clone() })?)?;
    for ex in examples {
        writeln!(out, "{}", serde_json::to_string(ex)?)?;
    }
    Ok(())
}

/// Read a dataset. The header line is optional so externally produced files
/// load too.
pub fn read_dataset(path: &Path) -> Result<(Option<ArtifactMeta>, Vec<Example>)> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut meta = None;
    let mut examples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if lineno == 0 {
            if let Ok(header) = serde_json::from_str::<HeaderLine>(&line) {
                meta = Some(header.meta);
                continue;
            }
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| {
            Error::Parse(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?;
        examples.push(ex);
    }
    Ok((meta, examples))
}

/// The vocabulary file is a bare JSON array of tokens.
pub fn write_vocabulary(path: &Path, vocab: &Vocabulary) -> Result<()> {
    fs::write(path, serde_json::to_string(vocab)?)?;
    Ok(())
}

pub fn read_vocabulary(path: &Path) -> Result<Vocabulary> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::gen::{generate_dataset, GenConfig};

    #[test]
    fn dataset_roundtrip_with_header() {
        let cfg = GenConfig {
            num_examples: 8,
            entity_pool_size: 30,
            seed: 2,
            ..GenConfig::default()
        };
        let examples = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let meta = ArtifactMeta::new("cfqa-dataset-v1", "gen-data".into(), "abc".into(), 2);
        write_dataset(&path, &meta, &examples).unwrap();
        let (got_meta, got) = read_dataset(&path).unwrap();
        assert_eq!(got_meta, Some(meta));
        assert_eq!(got, examples);
    }

    #[test]
    fn vocabulary_roundtrip() {
        let cfg = GenConfig::default();
        let vocab = cfg.vocabulary().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        write_vocabulary(&path, &vocab).unwrap();
        let back = read_vocabulary(&path).unwrap();
        assert_eq!(back.tokens(), vocab.tokens());
    }

    #[test]
    fn malformed_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "{\"id\": \"x\", nonsense\n").unwrap();
        assert!(read_dataset(&path).is_err());
    }
}
