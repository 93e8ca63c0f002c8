use crate::error::{Error, Result};
use autograd::ParamStore;
use ndarray::{ArrayD, IxDyn};
use safetensors::{tensor::TensorView, Dtype, SafeTensors};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

/// Header metadata key holding all string metadata as one canonical JSON
/// object, so archive bytes do not depend on hash-map iteration order.
const META_KEY: &str = "ds3net";

fn ck(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

/// Writes several stores into one safetensors archive, each tensor keyed
/// `<prefix>.<parameter name>`, with string metadata in the header.
pub fn save_stores(path: &Path, groups: &[(&str, &ParamStore<f32>)], metadata: &BTreeMap<String, String>) -> Result<()> {
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = groups
        .iter()
        .flat_map(|(prefix, store)| {
            store.iter().map(move |(name, v)| {
                let data = v.iter().flat_map(|x| x.to_le_bytes()).collect();
                (format!("{prefix}.{name}"), v.shape().to_vec(), data)
            })
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(k, shape, data)| Ok((k.clone(), TensorView::new(Dtype::F32, shape.clone(), data).map_err(ck)?)))
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(metadata)?)]);
    safetensors::serialize_to_file(views, Some(meta), path).map_err(ck)
}

/// Reads only the header metadata of an archive.
pub fn read_metadata(path: &Path) -> Result<BTreeMap<String, String>> {
    let bytes = std::fs::read(path)?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(ck)?;
    let header = meta.metadata().clone().unwrap_or_default();
    let json = header
        .get(META_KEY)
        .ok_or_else(|| Error::Checkpoint(format!("header lacks the {META_KEY} metadata entry")))?;
    Ok(serde_json::from_str(json)?)
}

/// Fills the given stores from an archive. Every parameter must be present
/// with its exact shape, and the archive must hold nothing else.
pub fn load_stores(path: &Path, groups: &mut [(&str, &mut ParamStore<f32>)]) -> Result<BTreeMap<String, String>> {
    let bytes = std::fs::read(path)?;
    let archive = SafeTensors::deserialize(&bytes).map_err(ck)?;
    let mut expected = BTreeSet::new();
    for (prefix, store) in groups.iter_mut() {
        for id in store.ids().collect::<Vec<_>>() {
            let key = format!("{prefix}.{}", store.name(id));
            let view = archive
                .tensor(&key)
                .map_err(|_| Error::Checkpoint(format!("missing tensor {key}")))?;
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!("{key}: expected f32, found {:?}", view.dtype())));
            }
            let dst = store.get_mut(id);
            if view.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!(
                    "{key}: shape {:?} does not match {:?}",
                    view.shape(),
                    dst.shape()
                )));
            }
            let values: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            *dst = ArrayD::from_shape_vec(IxDyn(view.shape()), values).map_err(ck)?;
            expected.insert(key);
        }
    }
    let extra: Vec<&str> = archive.names().into_iter().filter(|k| !expected.contains(*k)).collect();
    if !extra.is_empty() {
        return Err(Error::Checkpoint(format!("unexpected tensors {extra:?}")));
    }
    read_metadata(path)
}

/// SHA-256 over names, shapes and little-endian values of the given stores.
pub fn params_hash(groups: &[(&str, &ParamStore<f32>)]) -> String {
    let mut h = Sha256::new();
    for (prefix, store) in groups {
        for (name, v) in store.iter() {
            h.update(prefix.as_bytes());
            h.update(b".");
            h.update(name.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.iter() {
                h.update(x.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}
