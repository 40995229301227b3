//! Model checkpoints on disk: a JSON document (config, parameter layout,
//! fingerprint, provenance) next to a little-endian float32 weight blob.

use std::path::{Path, PathBuf};

use afp_core::nn::ParamInfo;
use afp_core::segnet::{Fingerprint, ModelCheckpoint};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, Result};
use crate::io::{read_file, write_file, Provenance};

#[derive(Serialize, Deserialize)]
struct Document<C> {
    kind: String,
    config: C,
    param_info: Vec<ParamInfo>,
    fingerprint: Fingerprint,
    provenance: Provenance,
    weights_file: String,
    weights_sha256: String,
}

pub fn weights_path(json: &Path) -> PathBuf {
    json.with_extension("bin")
}

pub fn save_checkpoint<C: Serialize>(
    ckpt: &ModelCheckpoint<C>,
    kind: &str,
    prov: &Provenance,
    path: &Path,
) -> Result<()> {
    let mut blob = Vec::with_capacity(4 * ckpt.weights.len());
    for w in &ckpt.weights {
        blob.extend_from_slice(&w.to_le_bytes());
    }
    let bin = weights_path(path);
    let doc = Document {
        kind: kind.into(),
        config: &ckpt.config,
        param_info: ckpt.param_info.clone(),
        fingerprint: ckpt.fingerprint.clone(),
        provenance: prov.clone(),
        weights_file: bin.file_name().unwrap().to_string_lossy().into_owned(),
        weights_sha256: hex::encode(Sha256::digest(&blob)),
    };
    write_file(&bin, &blob)?;
    write_file(
        path,
        &serde_json::to_vec_pretty(&doc).expect("checkpoint serializes"),
    )
}

/// Loads a checkpoint written by [`save_checkpoint`]; `kind` guards against
/// handing a translator file to code expecting a segmenter.
pub fn load_checkpoint<C: DeserializeOwned>(
    path: &Path,
    kind: &str,
) -> Result<(ModelCheckpoint<C>, Provenance)> {
    let text = read_file(path)?;
    let doc: Document<C> = serde_json::from_slice(&text).map_err(|e| AppError::read(path, e))?;
    if doc.kind != kind {
        return Err(AppError::read(
            path,
            format!("holds a {} checkpoint, expected {kind}", doc.kind),
        ));
    }
    let bin = path.with_file_name(&doc.weights_file);
    let blob = read_file(&bin)?;
    if hex::encode(Sha256::digest(&blob)) != doc.weights_sha256 {
        return Err(AppError::read(
            &bin,
            "weight blob does not match its recorded digest",
        ));
    }
    if blob.len() % 4 != 0 {
        return Err(AppError::read(
            &bin,
            "weight blob length is not a multiple of 4",
        ));
    }
    let weights = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((
        ModelCheckpoint {
            config: doc.config,
            param_info: doc.param_info,
            weights,
            fingerprint: doc.fingerprint,
        },
        doc.provenance,
    ))
}
