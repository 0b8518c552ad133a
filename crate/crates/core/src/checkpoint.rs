//! Checkpoints: a JSON manifest next to one tensor file per parameter.
//!
//! Parameters live on the f32 grid (see [`crate::encoder::ParamVec`]), so
//! the 32-bit payloads round-trip value-exactly: save → load → forward is
//! bit-identical to the pre-save forward.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, ParamVec};
use crate::error::{Error, Result};
use crate::runio::write_atomic_str;
use crate::tensorfile;

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    dims: Vec<usize>,
    file: String,
    /// SHA-256 of the tensor file's bytes; makes the manifest itself a
    /// content hash of the whole checkpoint.
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: EncoderConfig,
    step: usize,
    iteration: usize,
    tensors: Vec<TensorRecord>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub params: ParamVec,
    pub step: usize,
    pub iteration: usize,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Write `params` under `dir` (created if needed): `manifest.json` plus one
/// `.tnsr` per named tensor.
pub fn save_checkpoint(
    dir: &Path,
    config: &EncoderConfig,
    params: &ParamVec,
    step: usize,
    iteration: usize,
) -> Result<()> {
    if !params.all_finite() {
        return Err(Error::TensorFile("refusing to checkpoint non-finite parameters".into()));
    }
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::with_capacity(params.layout.entries().len());
    for e in params.layout.entries() {
        let file = format!("{}.tnsr", e.name);
        let data = &params.data[e.offset..e.offset + e.len()];
        tensorfile::save(&dir.join(&file), &e.dims, data)?;
        let bytes = fs::read(dir.join(&file))?;
        tensors.push(TensorRecord {
            name: e.name.clone(),
            dims: e.dims.clone(),
            file,
            sha256: hex(&Sha256::digest(&bytes)),
        });
    }
    let manifest = Manifest {
        config: config.clone(),
        step,
        iteration,
        tensors,
    };
    write_atomic_str(&dir.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Read a checkpoint directory back, verifying payload hashes and that the
/// tensor set matches the config's layout exactly.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    manifest.config.validate()?;
    let layout = manifest.config.layout();
    if manifest.tensors.len() != layout.entries().len() {
        return Err(Error::TensorFile(format!(
            "manifest lists {} tensors, config layout has {}",
            manifest.tensors.len(),
            layout.entries().len()
        )));
    }
    let mut params = ParamVec::zeros(layout.clone());
    for rec in &manifest.tensors {
        let entry = layout.entry(&rec.name)?;
        if entry.dims != rec.dims {
            return Err(Error::TensorFile(format!(
                "tensor {}: manifest dims {:?} vs layout dims {:?}",
                rec.name, rec.dims, entry.dims
            )));
        }
        let path = dir.join(&rec.file);
        let bytes = fs::read(&path)?;
        if hex(&Sha256::digest(&bytes)) != rec.sha256 {
            return Err(Error::TensorFile(format!(
                "tensor {}: payload hash mismatch (corrupt checkpoint?)",
                rec.name
            )));
        }
        let raw = tensorfile::load(&path)?;
        if raw.dims != rec.dims {
            return Err(Error::TensorFile(format!(
                "tensor {}: file dims {:?} vs manifest dims {:?}",
                rec.name, raw.dims, rec.dims
            )));
        }
        params.data[entry.offset..entry.offset + entry.len()].copy_from_slice(&raw.data);
    }
    Ok(Checkpoint {
        config: manifest.config,
        params,
        step: manifest.step,
        iteration: manifest.iteration,
    })
}

/// The manifest's own SHA-256; two runs produced identical checkpoints iff
/// these agree (the manifest embeds every payload hash).
pub fn manifest_hash(dir: &Path) -> Result<String> {
    let bytes = fs::read(dir.join("manifest.json"))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Checkpoint directories under `root` named `step{N}`, sorted by N.
pub fn list_step_checkpoints(root: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut found = Vec::new();
    if !root.exists() {
        return Ok(found);
    }
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(num) = name.strip_prefix("step") {
            if let Ok(step) = num.parse::<usize>() {
                if entry.path().join("manifest.json").exists() {
                    found.push((step, entry.path()));
                }
            }
        }
    }
    found.sort_by_key(|(s, _)| *s);
    Ok(found)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{forward, init_params, HeadKind, MaskSpec, Mode};
    use crate::features::{FeatureKind, FeatureSequence};
    use crate::rng::rng_from;
    use ndarray::Array2;
    use rand::Rng;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            ff_dim: 12,
            input_dim: 5,
            vocab: 7,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn round_trip_forward_is_bit_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let config = cfg();
        let params = init_params(&config, 4).unwrap();
        save_checkpoint(tmp.path(), &config, &params, 120, 2).unwrap();
        let loaded = load_checkpoint(tmp.path()).unwrap();
        assert_eq!(loaded.step, 120);
        assert_eq!(loaded.iteration, 2);
        assert_eq!(loaded.config, config);
        assert_eq!(loaded.params, params);

        let mut rng = rng_from(8);
        let features = FeatureSequence {
            utterance_id: "x".into(),
            frames: Array2::from_shape_fn((6, 5), |_| rng.random::<f64>() - 0.5),
            frame_hop: 0.01,
            frame_len: 0.025,
            kind: FeatureKind::Mfcc,
        };
        let before =
            forward(&params, &config, &features, &MaskSpec::empty(), Mode::Eval).unwrap();
        let after =
            forward(&loaded.params, &config, &features, &MaskSpec::empty(), Mode::Eval)
                .unwrap();
        assert_eq!(before.logits, after.logits);
    }

    #[test]
    fn same_params_same_manifest_hash_and_vice_versa() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let config = cfg();
        let params = init_params(&config, 9).unwrap();
        save_checkpoint(a.path(), &config, &params, 5, 1).unwrap();
        save_checkpoint(b.path(), &config, &params, 5, 1).unwrap();
        assert_eq!(manifest_hash(a.path()).unwrap(), manifest_hash(b.path()).unwrap());

        let mut other = params.clone();
        other.data[0] += 1.0;
        save_checkpoint(b.path(), &config, &other, 5, 1).unwrap();
        assert_ne!(manifest_hash(a.path()).unwrap(), manifest_hash(b.path()).unwrap());
    }

    #[test]
    fn corrupt_payload_is_detected() {
        let tmp = tempfile::tempdir().unwrap();
        let config = cfg();
        let params = init_params(&config, 3).unwrap();
        save_checkpoint(tmp.path(), &config, &params, 0, 1).unwrap();
        // flip a byte in one payload
        let victim = tmp.path().join("input.w.tnsr");
        let mut bytes = fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&victim, bytes).unwrap();
        let err = load_checkpoint(tmp.path()).unwrap_err();
        assert!(err.to_string().contains("hash mismatch"), "got: {err}");
    }

    #[test]
    fn head_kind_survives_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let config = EncoderConfig { head: HeadKind::Cosine { temperature: 0.1 }, ..cfg() };
        let params = init_params(&config, 6).unwrap();
        save_checkpoint(tmp.path(), &config, &params, 1, 1).unwrap();
        let loaded = load_checkpoint(tmp.path()).unwrap();
        assert_eq!(loaded.config.head, HeadKind::Cosine { temperature: 0.1 });
        assert!(loaded.params.layout.entry("head.codewords").is_ok());
    }

    #[test]
    fn step_checkpoints_list_in_numeric_order() {
        let tmp = tempfile::tempdir().unwrap();
        let config = cfg();
        let params = init_params(&config, 1).unwrap();
        for step in [100usize, 20, 3] {
            save_checkpoint(&tmp.path().join(format!("step{step}")), &config, &params, step, 1)
                .unwrap();
        }
        // a stray directory that should be ignored
        fs::create_dir(tmp.path().join("stepX")).unwrap();
        let found = list_step_checkpoints(tmp.path()).unwrap();
        let steps: Vec<usize> = found.iter().map(|(s, _)| *s).collect();
        assert_eq!(steps, vec![3, 20, 100]);
    }
}
