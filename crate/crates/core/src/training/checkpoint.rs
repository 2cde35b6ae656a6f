//! Binary checkpoints: magic, format version, a JSON header carrying the
//! model spec, seed and shape manifest, then little-endian f32 values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Model, ModelSpec, Module};
use crate::review::{AblationMode, ReviewUnits};
use crate::tensor::Real;

pub const MAGIC: &[u8; 8] = b"RVKDCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// What is needed to rebuild the review units stored next to a student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewMeta {
    pub mode: AblationMode,
    pub teacher: ModelSpec,
    pub mid_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    seed: u64,
    review: Option<ReviewMeta>,
    tensors: Vec<ManifestEntry>,
}

pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub seed: u64,
    pub review: Option<(ReviewUnits<T>, ReviewMeta)>,
}

fn ckpt_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Visit every stored tensor in file order: model parameters, model
/// buffers, then review-unit parameters.
fn for_each_tensor<T: Real>(
    model: &mut Model<T>,
    units: Option<&mut ReviewUnits<T>>,
    mut f: impl FnMut(&str, Vec<usize>, &mut [T]) -> Result<()>,
) -> Result<()> {
    for p in model.params_mut() {
        let shape = p.value.shape().to_vec();
        f(&p.name, shape, p.value.data_mut())?;
    }
    for b in model.buffers() {
        let len = b.data.len();
        f(&b.name, vec![len], b.data)?;
    }
    if let Some(units) = units {
        for p in units.params_mut() {
            let shape = p.value.shape().to_vec();
            f(&p.name, shape, p.value.data_mut())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    model: &mut Model<T>,
    seed: u64,
    review: Option<(&mut ReviewUnits<T>, &ReviewMeta)>,
) -> Result<()> {
    let (units, meta) = match review {
        Some((u, m)) => (Some(u), Some(m.clone())),
        None => (None, None),
    };
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for_each_tensor(model, units, |name, shape, data| {
        tensors.push(ManifestEntry {
            name: name.to_string(),
            shape,
        });
        for v in data.iter() {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        Ok(())
    })?;
    let header = serde_json::to_vec(&Header {
        spec: model.spec().clone(),
        seed,
        review: meta,
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, out)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Load a checkpoint. With `expected` set, the stored spec must match it.
pub fn load_checkpoint<T: Real>(path: &Path, expected: Option<&ModelSpec>) -> Result<Checkpoint<T>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(ckpt_err(path, "not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(ckpt_err(
            path,
            format!("format version {version}, this build reads version {FORMAT_VERSION}"),
        ));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let header_bytes = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| ckpt_err(path, "header runs past the end of the file"))?;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| ckpt_err(path, format!("unreadable header: {e}")))?;
    if let Some(exp) = expected {
        if *exp != header.spec {
            return Err(ckpt_err(path, format!("expected model {exp}, found {}", header.spec)));
        }
    }
    let mut model = Model::<T>::build(header.spec.clone(), 0)?;
    let mut units = match &header.review {
        Some(meta) => Some(ReviewUnits::<T>::build(
            meta.mode,
            &model.stage_channels(),
            &meta.teacher.stage_channels(),
            meta.mid_channels,
            0,
        )?),
        None => None,
    };
    let mut payload = &bytes[16 + hlen..];
    let mut entries = header.tensors.iter();
    for_each_tensor(&mut model, units.as_mut(), |name, shape, data| {
        let entry = entries.next().ok_or_else(|| {
            ckpt_err(path, format!("manifest ends before {name} {shape:?}"))
        })?;
        if entry.name != name || entry.shape != shape {
            return Err(ckpt_err(
                path,
                format!(
                    "shape manifest mismatch: expected {name} {shape:?}, found {} {:?}",
                    entry.name, entry.shape
                ),
            ));
        }
        let need = data.len() * 4;
        if payload.len() < need {
            return Err(ckpt_err(path, format!("payload truncated at {name}")));
        }
        for (d, chunk) in data.iter_mut().zip(payload[..need].chunks_exact(4)) {
            *d = T::from_f64_lossy(f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64);
        }
        payload = &payload[need..];
        Ok(())
    })?;
    if let Some(extra) = entries.next() {
        return Err(ckpt_err(
            path,
            format!("shape manifest mismatch: unexpected extra tensor {} {:?}", extra.name, extra.shape),
        ));
    }
    if !payload.is_empty() {
        return Err(ckpt_err(path, format!("{} trailing payload bytes", payload.len())));
    }
    let review = match (units, header.review) {
        (Some(u), Some(m)) => Some((u, m)),
        _ => None,
    };
    Ok(Checkpoint {
        model,
        seed: header.seed,
        review,
    })
}
