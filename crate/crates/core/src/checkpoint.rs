//! Binary checkpoints: a UTF-8 JSON manifest, the separator `\n\0`, then
//! the tensors as concatenated little-endian floats.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{NetworkSpec, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::verifier::{VerifierNet, VerifierSpec};

pub const FORMAT_VERSION: u32 = 1;
pub const SEPARATOR: &[u8] = b"\n\0";
pub const VERIFIER_PREFIX: &str = "verifier/";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub netspec: NetworkSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verifier: Option<VerifierSpec>,
    pub tensors: Vec<TensorEntry>,
}

/// A predictor with an optional verifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub net: NetworkSpec,
    pub params: ParamStore<T>,
    pub verifier: Option<VerifierNet<T>>,
}

/// Serialises to bytes. Tensor order follows parameter names, so the
/// output is deterministic.
pub fn to_bytes<T: Real>(net: &NetworkSpec, params: &ParamStore<T>, verifier: Option<&VerifierNet<T>>) -> Result<Vec<u8>> {
    params.check(net)?;
    let mut all = params.clone();
    if let Some(v) = verifier {
        v.check(net)?;
        all.extend_prefixed(VERIFIER_PREFIX, &v.params);
    }
    let mut payload = Vec::with_capacity(all.num_scalars() * T::BYTES);
    let mut tensors = Vec::with_capacity(all.len());
    for (name, t) in all.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            offset: payload.len(),
        });
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        netspec: net.clone(),
        verifier: verifier.map(|v| v.spec.clone()),
        tensors,
    };
    let mut out = serde_json::to_vec(&manifest)?;
    out.extend_from_slice(SEPARATOR);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint<T: Real>(
    path: impl AsRef<Path>,
    net: &NetworkSpec,
    params: &ParamStore<T>,
    verifier: Option<&VerifierNet<T>>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(net, params, verifier)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_tensor<T: Real>(payload: &[u8], e: &TensorEntry, path: &Path) -> Result<Tensor<T>> {
    let n: usize = e.shape.iter().product();
    let width = match e.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => {
            return Err(Error::Checkpoint {
                path: path.into(),
                detail: format!("tensor {} has unsupported dtype {other:?}", e.name),
            })
        }
    };
    let end = e.offset + n * width;
    if end > payload.len() {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("tensor {} needs payload bytes {}..{end}, have {}", e.name, e.offset, payload.len()),
        });
    }
    let bytes = &payload[e.offset..end];
    let data: Vec<T> = if width == 4 {
        bytes.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect()
    } else {
        bytes.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect()
    };
    Tensor::new(e.shape.clone(), data)
}

pub fn from_bytes<T: Real>(bytes: &[u8], path: &Path) -> Result<(Manifest, Checkpoint<T>)> {
    let split = bytes
        .windows(SEPARATOR.len())
        .position(|w| w == SEPARATOR)
        .ok_or_else(|| Error::Checkpoint {
            path: path.into(),
            detail: "no header separator".into(),
        })?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..split]).map_err(|e| Error::Checkpoint {
        path: path.into(),
        detail: format!("corrupt header: {e}"),
    })?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Checkpoint {
            path: path.into(),
            detail: format!("unsupported version {}", manifest.version),
        });
    }
    let payload = &bytes[split + SEPARATOR.len()..];
    let mut expected_len = 0;
    let mut all = ParamStore::new();
    for e in &manifest.tensors {
        let t = read_tensor(payload, e, path)?;
        expected_len = expected_len.max(e.offset + t.len() * if e.dtype == "f32" { 4 } else { 8 });
        all.insert(e.name.clone(), t);
    }
    if payload.len() != expected_len {
        return Err(Error::Checkpoint {
            path: path.into(),
            detail: format!("payload has {} bytes, manifest covers {expected_len}", payload.len()),
        });
    }
    let params = all.without_prefix(VERIFIER_PREFIX);
    params.check(&manifest.netspec).map_err(|e| Error::Checkpoint {
        path: path.into(),
        detail: format!("shape mismatch vs manifest: {e}"),
    })?;
    let verifier = match &manifest.verifier {
        Some(spec) => {
            let v = VerifierNet {
                spec: spec.clone(),
                params: all.strip_prefix(VERIFIER_PREFIX),
            };
            v.check(&manifest.netspec).map_err(|e| Error::Checkpoint {
                path: path.into(),
                detail: format!("verifier: {e}"),
            })?;
            Some(v)
        }
        None => None,
    };
    let ck = Checkpoint {
        net: manifest.netspec.clone(),
        params,
        verifier,
    };
    Ok((manifest, ck))
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(from_bytes(&bytes, path)?.1)
}
