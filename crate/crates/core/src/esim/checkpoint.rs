//! Checkpoint directory layout: `config.json` (manifest), `params.ntar`
//! (tensor archive) and `vocab.txt`.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{EsimModel, EsimParams};
use super::{EsimConfig, EsimError, ALPHABET};
use crate::corpus::Vocabulary;
use crate::tensor::{read_archive, write_archive};

pub const CHECKPOINT_FORMAT: &str = "nextutt-esim-1";
const MANIFEST: &str = "config.json";
const PARAMS: &str = "params.ntar";
const VOCAB: &str = "vocab.txt";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: EsimConfig,
    alphabet: String,
    vocabulary: String,
    params: String,
}

pub fn save_checkpoint(model: &EsimModel, dir: impl AsRef<Path>) -> Result<(), EsimError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let tensors: Vec<_> = model
        .params
        .tensors()
        .into_iter()
        .map(|(name, t)| (name, t.clone()))
        .collect();
    write_archive(BufWriter::new(File::create(dir.join(PARAMS))?), &tensors)?;
    let mut vocab = BufWriter::new(File::create(dir.join(VOCAB))?);
    model.vocab.save(&mut vocab)?;
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        config: model.config.clone(),
        alphabet: ALPHABET.into(),
        vocabulary: VOCAB.into(),
        params: PARAMS.into(),
    };
    let mut w = BufWriter::new(File::create(dir.join(MANIFEST))?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<EsimModel, EsimError> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(dir.join(MANIFEST))?))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(EsimError::Checkpoint(format!(
            "unsupported format {:?}, expected {CHECKPOINT_FORMAT:?}",
            manifest.format
        )));
    }
    if manifest.alphabet != ALPHABET {
        return Err(EsimError::Checkpoint("character alphabet differs from this build".into()));
    }
    let config = manifest.config;
    config.validate()?;
    let vocab = Vocabulary::load(BufReader::new(File::open(dir.join(&manifest.vocabulary))?))?;
    let mut stored: HashMap<String, _> = read_archive(BufReader::new(File::open(dir.join(&manifest.params))?))?
        .into_iter()
        .collect();

    let mut params = EsimParams::<f32>::zeros(&config, vocab.len());
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.iter().zip(params.tensors_mut()) {
        let t = stored
            .remove(name)
            .ok_or_else(|| EsimError::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape() != slot.shape() {
            return Err(EsimError::Checkpoint(format!(
                "tensor {name} has shape {:?}, config and vocabulary imply {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    if let Some(extra) = stored.keys().next() {
        return Err(EsimError::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(EsimModel { config, vocab, params })
}

#[cfg(test)]
mod tests {
    use super::super::model::tests::{tiny_config, tiny_model};
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_model(tiny_config());
        save_checkpoint(&m, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn mismatches_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_model(tiny_config());
        save_checkpoint(&m, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replace("\"ctx_hidden\": 4", "\"ctx_hidden\": 5")).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err().to_string();
        assert!(err.contains("ctx_fwd.w_ih"), "{err}");

        fs::write(&path, text.replace(CHECKPOINT_FORMAT, "other")).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(EsimError::Checkpoint(_))));
        fs::write(&path, text.replace("\"abcdef", "\"bacdef")).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(EsimError::Checkpoint(_))));
    }
}
