//! Single-file parameter archives: named float64 arrays plus a JSON manifest,
//! stored in the safetensors layout.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::Tensor;
use safetensors::{Dtype, SafeTensors, View};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::{device, DTYPE};

const MANIFEST_KEY: &str = "manifest";

struct OwnedView {
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for &OwnedView {
    fn dtype(&self) -> Dtype {
        Dtype::F64
    }

    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn data(&self) -> std::borrow::Cow<'_, [u8]> {
        std::borrow::Cow::Borrowed(&self.bytes)
    }

    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

pub fn encode_archive<M: Serialize>(
    tensors: &BTreeMap<String, Tensor>,
    manifest: &M,
) -> Result<Vec<u8>> {
    let mut views = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let values = t.to_dtype(DTYPE)?.flatten_all()?.to_vec1::<f64>()?;
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        views.push((
            name.clone(),
            OwnedView {
                shape: t.dims().to_vec(),
                bytes,
            },
        ));
    }
    let mut meta = HashMap::new();
    meta.insert(MANIFEST_KEY.to_string(), serde_json::to_string(manifest)?);
    safetensors::serialize(views.iter().map(|(n, v)| (n.as_str(), v)), Some(meta))
        .map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save_archive<M: Serialize>(
    path: &Path,
    tensors: &BTreeMap<String, Tensor>,
    manifest: &M,
) -> Result<()> {
    write_atomic(path, &encode_archive(tensors, manifest)?)
}

pub fn decode_archive<M: DeserializeOwned>(bytes: &[u8]) -> Result<(BTreeMap<String, Tensor>, M)> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let (_, meta) =
        SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let manifest_json = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(MANIFEST_KEY))
        .ok_or_else(|| Error::Checkpoint("archive has no manifest".into()))?;
    let manifest = serde_json::from_str(manifest_json)?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F64 {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has dtype {:?}, expected F64",
                view.dtype()
            )));
        }
        let values: Vec<f64> = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let t = Tensor::from_vec(values, view.shape(), &device())?;
        tensors.insert(name, t);
    }
    Ok((tensors, manifest))
}

pub fn load_archive<M: DeserializeOwned>(path: &Path) -> Result<(BTreeMap<String, Tensor>, M)> {
    let bytes = std::fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
    decode_archive(&bytes)
}
