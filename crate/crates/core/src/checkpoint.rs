//! Named-tensor files (safetensors) and bundle checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::alignment::{BundleKind, GenerativeBundle};
use crate::error::{Error, Result};
use crate::models::Module;
use crate::tensor::{Float, Tensor};
use crate::vae::BinaryPrior;

fn to_bytes<T: Float>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * std::mem::size_of::<T>());
    if T::DTYPE == "F32" {
        for v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    } else {
        for v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

fn from_view<T: Float>(name: &str, v: &TensorView<'_>) -> Result<Tensor<T>> {
    let raw = v.data();
    let data: Vec<T> = match v.dtype() {
        Dtype::F32 => raw.chunks_exact(4).map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect(),
        Dtype::F64 => raw
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])))
            .collect(),
        d => return Err(Error::Checkpoint(format!("tensor {name} has unsupported dtype {d:?}"))),
    };
    Ok(Tensor::from_vec(v.shape(), data))
}

/// Write tensors plus string metadata. The metadata is stored as a single
/// JSON-encoded header entry so the file bytes are deterministic.
pub fn write_tensors<T: Float>(path: &Path, named: &[(String, Tensor<T>)], meta: &BTreeMap<String, String>) -> Result<()> {
    let dtype = if T::DTYPE == "F32" { Dtype::F32 } else { Dtype::F64 };
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> =
        named.iter().map(|(n, t)| (n.clone(), t.shape().to_vec(), to_bytes(t))).collect();
    let mut views = Vec::with_capacity(bytes.len());
    for (n, shape, b) in &bytes {
        let v = TensorView::new(dtype, shape.clone(), b).map_err(|e| Error::Checkpoint(format!("{n}: {e:?}")))?;
        views.push((n.clone(), v));
    }
    let info: HashMap<String, String> = [("meta".to_string(), serde_json::to_string(meta)?)].into_iter().collect();
    let buf = safetensors::serialize(views, &Some(info)).map_err(|e| Error::Checkpoint(format!("{e:?}")))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub type TensorMap<T> = BTreeMap<String, Tensor<T>>;

pub fn read_tensors<T: Float>(path: &Path) -> Result<(TensorMap<T>, BTreeMap<String, String>)> {
    let buf = std::fs::read(path).map_err(|e| Error::load(path, e))?;
    let st = SafeTensors::deserialize(&buf).map_err(|e| Error::load(path, format!("{e:?}")))?;
    let mut map = BTreeMap::new();
    for (name, view) in st.tensors() {
        let t = from_view(&name, &view)?;
        map.insert(name, t);
    }
    let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| Error::load(path, format!("{e:?}")))?;
    let meta = match header.metadata().as_ref().and_then(|m| m.get("meta")) {
        Some(s) => serde_json::from_str(s)?,
        None => BTreeMap::new(),
    };
    Ok((map, meta))
}

/// Every tensor of every net of `m`, under `prefix.<net index>`.
pub fn module_tensors<T: Float>(m: &(impl Module<T> + ?Sized), prefix: &str) -> Vec<(String, Tensor<T>)> {
    m.nets().iter().enumerate().flat_map(|(i, n)| n.named_tensors(&format!("{prefix}.{i}"))).collect()
}

pub fn load_module<T: Float>(m: &mut (impl Module<T> + ?Sized), prefix: &str, map: &TensorMap<T>) -> Result<()> {
    for (i, n) in m.nets_mut().into_iter().enumerate() {
        n.load_named(&format!("{prefix}.{i}"), map)?;
    }
    Ok(())
}

/// JSON sidecar written next to each bundle file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub kind: BundleKind,
    pub tasks_seen: usize,
    pub priors: Vec<BinaryPrior>,
    pub config_hash: String,
    pub seed: u64,
    /// Full experiment config, so a bundle can be rebuilt without the run.
    pub config: serde_json::Value,
    /// Names of the tensors in the container, in file order.
    pub tensors: Vec<String>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Persist a bundle plus optional extra component tensors (the classifier).
pub fn save_bundle<T: Float>(
    path: &Path,
    bundle: &GenerativeBundle<T>,
    extra: &[(String, Tensor<T>)],
    mut meta: BundleMeta,
) -> Result<()> {
    let mut named = module_tensors(&bundle.global.translator, "translator");
    named.extend(bundle.global.net.named_tensors("global"));
    named.extend(extra.iter().cloned());
    meta.kind = bundle.kind;
    meta.tasks_seen = bundle.tasks_seen;
    meta.priors = bundle.priors.clone();
    meta.tensors = named.iter().map(|(n, _)| n.clone()).collect();
    meta.tensors.sort();
    write_tensors(path, &named, &BTreeMap::new())?;
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_meta(path: &Path) -> Result<BundleMeta> {
    let p = sidecar_path(path);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::load(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Fill `template` (same architecture) from a saved bundle. Returns the
/// sidecar and the full tensor map, so callers can pick up extra components.
pub fn load_bundle_into<T: Float>(path: &Path, template: &mut GenerativeBundle<T>) -> Result<(BundleMeta, TensorMap<T>)> {
    let meta = read_meta(path)?;
    let (map, _) = read_tensors::<T>(path)?;
    if meta.kind != template.kind {
        return Err(Error::Checkpoint(format!("bundle kind {:?} does not match {:?}", meta.kind, template.kind)));
    }
    load_module(&mut template.global.translator, "translator", &map)?;
    template.global.net.load_named("global", &map)?;
    template.tasks_seen = meta.tasks_seen;
    template.priors = meta.priors.clone();
    Ok((meta, map))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensors_round_trip_in_both_precisions() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.safetensors");
        let t = Tensor::from_vec(&[2, 2], vec![1.5f32, -2.0, 0.25, 3.0]);
        let meta: BTreeMap<String, String> = [("k".into(), "v".into())].into_iter().collect();
        write_tensors(&p, &[("a".into(), t.clone())], &meta).unwrap();
        let (m, meta2) = read_tensors::<f32>(&p).unwrap();
        assert_eq!(m["a"], t);
        assert_eq!(meta2, meta);
        let bytes = std::fs::read(&p).unwrap();
        write_tensors(&p, &[("a".into(), t)], &meta).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
        let d = Tensor::from_vec(&[1], vec![0.1f64]);
        write_tensors(&p, &[("d".into(), d.clone())], &BTreeMap::new()).unwrap();
        assert_eq!(read_tensors::<f64>(&p).unwrap().0["d"], d);
    }
}
