//! Named `f32` array archives stored as safetensors files.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::{NnError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// A set of named arrays plus free-form string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    /// Sorted by name after loading.
    pub arrays: Vec<NamedArray>,
    pub metadata: BTreeMap<String, String>,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }
}

pub fn save_archive(path: &Path, archive: &Archive) -> Result<()> {
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = archive
        .arrays
        .iter()
        .map(|a| {
            let raw = a.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            (a.name.clone(), a.shape.clone(), raw)
        })
        .collect();
    let mut views = Vec::with_capacity(bytes.len());
    for (name, shape, raw) in &bytes {
        let view = TensorView::new(Dtype::F32, shape.clone(), raw).map_err(|e| NnError::Format(e.to_string()))?;
        views.push((name.as_str(), view));
    }
    let meta: HashMap<String, String> = archive.metadata.clone().into_iter().collect();
    let meta = if meta.is_empty() { None } else { Some(meta) };
    safetensors::serialize_to_file(views, &meta, path).map_err(|e| match e {
        safetensors::SafeTensorError::IoError(io) => NnError::Io(io),
        other => NnError::Format(other.to_string()),
    })
}

pub fn load_archive(path: &Path) -> Result<Archive> {
    let buf = std::fs::read(path)?;
    let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| NnError::Format(e.to_string()))?;
    let metadata: BTreeMap<String, String> = header
        .metadata()
        .as_ref()
        .map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
        .unwrap_or_default();
    let st = SafeTensors::deserialize(&buf).map_err(|e| NnError::Format(e.to_string()))?;
    let mut arrays = Vec::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(NnError::Format(format!("array `{name}` is {:?}, expected F32", view.dtype())));
        }
        let data = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        arrays.push(NamedArray {
            name,
            shape: view.shape().to_vec(),
            data,
        });
    }
    arrays.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(Archive { arrays, metadata })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_arrays_and_metadata() {
        let dir = std::env::temp_dir().join(format!("nn-archive-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.safetensors");
        let mut archive = Archive::default();
        archive.arrays.push(NamedArray {
            name: "a.weight".into(),
            shape: vec![2, 2],
            data: vec![1.0, -2.5, f32::MIN_POSITIVE, 3.25e7],
        });
        archive.arrays.push(NamedArray {
            name: "b.bias".into(),
            shape: vec![1],
            data: vec![0.125],
        });
        archive.metadata.insert("config".into(), "{\"x\":1}".into());
        save_archive(&path, &archive).unwrap();
        let back = load_archive(&path).unwrap();
        assert_eq!(back, archive);
        std::fs::remove_dir_all(&dir).ok();
    }
}
