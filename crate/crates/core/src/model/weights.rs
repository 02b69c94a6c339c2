//! Encoder weight files in safetensors format, keyed by the parameter names
//! of [`crate::model::Encoder`] (torchvision naming for the ResNets).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::error::{ItlError, Result};
use crate::nn::ParamStore;

pub(crate) fn store_bytes(store: &ParamStore) -> Vec<(String, Vec<u8>, Vec<usize>)> {
    store
        .entries()
        .iter()
        .map(|e| {
            let bytes = e.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            (e.name.clone(), bytes, e.shape.clone())
        })
        .collect()
}

pub(crate) fn serialize_stores(
    parts: &[(&str, &ParamStore)],
    metadata: Option<HashMap<String, String>>,
) -> Result<Vec<u8>> {
    let owned: Vec<(String, Vec<u8>, Vec<usize>)> = parts
        .iter()
        .flat_map(|(prefix, store)| {
            store_bytes(store)
                .into_iter()
                .map(move |(n, b, s)| (format!("{prefix}{n}"), b, s))
        })
        .collect();
    let views: Vec<(String, TensorView<'_>)> = owned
        .iter()
        .map(|(n, b, s)| {
            let view = TensorView::new(Dtype::F32, s.clone(), b).expect("byte length matches shape");
            (n.clone(), view)
        })
        .collect();
    safetensors::serialize(views, &metadata).map_err(|e| ItlError::Config(e.to_string()))
}

/// Copies every tensor named `{prefix}{entry name}` from `file` into `store`.
/// Every entry must be present with matching shape and `f32` dtype; extra
/// tensors in the file are ignored.
pub(crate) fn fill_store(
    store: &mut ParamStore,
    file: &SafeTensors<'_>,
    prefix: &str,
    path: &Path,
    checkpoint: bool,
) -> Result<()> {
    let err = |reason: String| {
        if checkpoint {
            ItlError::Checkpoint {
                path: path.to_path_buf(),
                reason,
            }
        } else {
            ItlError::Weights {
                path: path.to_path_buf(),
                reason,
            }
        }
    };
    for entry in store.entries_mut() {
        let key = format!("{prefix}{}", entry.name);
        let view = file
            .tensor(&key)
            .map_err(|_| err(format!("missing tensor {key}")))?;
        if view.dtype() != Dtype::F32 {
            return Err(err(format!("tensor {key} has dtype {:?}, expected F32", view.dtype())));
        }
        if view.shape() != entry.shape.as_slice() {
            return Err(err(format!(
                "tensor {key} has shape {:?}, expected {:?}",
                view.shape(),
                entry.shape
            )));
        }
        for (dst, src) in entry.data.iter_mut().zip(view.data().chunks_exact(4)) {
            *dst = f32::from_le_bytes(src.try_into().unwrap());
        }
    }
    Ok(())
}

/// Loads pretrained encoder parameters (and frozen normalization statistics).
pub fn load_encoder_weights(store: &mut ParamStore, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| ItlError::io(path, e))?;
    let file = SafeTensors::deserialize(&bytes).map_err(|e| ItlError::Weights {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    fill_store(store, &file, "", path, false)
}

/// Writes one parameter store as a weights file readable by
/// [`load_encoder_weights`].
pub fn save_param_store(store: &ParamStore, path: &Path) -> Result<()> {
    let bytes = serialize_stores(&[("", store)], None)?;
    fs::write(path, bytes).map_err(|e| ItlError::io(path, e))
}
