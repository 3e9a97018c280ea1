//! JSON parameter checkpoints: one document mapping group name to the
//! group's tensors (name, shape, flat values), plus a format version and a
//! free-form config snapshot.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: String,
    #[serde(default)]
    pub config: serde_json::Value,
    pub groups: BTreeMap<String, Vec<StoredTensor>>,
    #[serde(skip)]
    source: Option<PathBuf>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, config: serde_json::Value) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: kind.into(),
            config,
            groups: BTreeMap::new(),
            source: None,
        }
    }

    pub fn insert_group<'a>(
        &mut self,
        group: &str,
        tensors: impl IntoIterator<Item = (String, &'a Tensor)>,
    ) {
        let stored = tensors
            .into_iter()
            .map(|(name, t)| StoredTensor {
                name,
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect();
        self.groups.insert(group.to_string(), stored);
    }

    fn origin(&self) -> PathBuf {
        self.source.clone().unwrap_or_else(|| PathBuf::from("<memory>"))
    }

    /// Tensors of `group` in stored order.
    pub fn group(&self, group: &str) -> Result<Vec<Tensor>> {
        let stored = self
            .groups
            .get(group)
            .ok_or_else(|| Error::integrity(self.origin(), format!("missing group {group}")))?;
        stored
            .iter()
            .map(|s| {
                Tensor::new(s.shape.clone(), s.values.clone()).map_err(|e| {
                    Error::integrity(self.origin(), format!("{group}/{}: {e}", s.name))
                })
            })
            .collect()
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::integrity(
                self.origin(),
                format!("expected a {kind} checkpoint, found {}", self.kind),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::integrity(path, format!("unreadable checkpoint: {e}")))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::integrity(
                path,
                format!("format version {} (expected {FORMAT_VERSION})", ck.format_version),
            ));
        }
        for (group, tensors) in &ck.groups {
            for t in tensors {
                if t.shape.iter().product::<usize>() != t.values.len() {
                    return Err(Error::integrity(
                        path,
                        format!("{group}/{}: shape {:?} vs {} values", t.name, t.shape, t.values.len()),
                    ));
                }
            }
        }
        ck.source = Some(path.to_path_buf());
        Ok(ck)
    }
}

/// Writes through a sibling temp file and renames, so readers never see a
/// half-written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let w = Tensor::matrix(2, 2, vec![0.1, 1.0 / 3.0, -2.5e-17, 1e300]);
        let mut ck = Checkpoint::new("test", serde_json::json!({"k": 1}));
        ck.insert_group("theta_a", [("layer0.weight".to_string(), &w)]);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.group("theta_a").unwrap(), vec![w]);
        assert_eq!(back.config["k"], 1);
    }

    #[test]
    fn corrupt_file_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{ not json").unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(matches!(err, Error::Integrity { .. }));
        assert!(err.to_string().contains("bad.json"));
    }

    #[test]
    fn inconsistent_shape_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("shape.json");
        std::fs::write(
            &path,
            r#"{"format_version":1,"kind":"x","groups":{"g":[{"name":"w","shape":[2,2],"values":[1.0]}]}}"#,
        )
        .unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Integrity { .. })));
    }
}
