//! Run manifests: enough to replay a run and to tell whether its inputs
//! changed.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Git-style object hash: SHA-256 over `"blob <len>\0"` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub hash: String,
}

impl InputDigest {
    pub fn of_file(path: &Path) -> Result<InputDigest> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(InputDigest {
            path: path.display().to_string(),
            hash: content_hash(&bytes),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    /// The fully resolved configuration the run used.
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    /// Hash over the sorted input hashes.
    pub inputs_hash: String,
    pub tool_version: String,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value, mut inputs: Vec<InputDigest>) -> Manifest {
        inputs.sort_by(|a, b| a.path.cmp(&b.path));
        let joined: Vec<u8> = inputs
            .iter()
            .flat_map(|i| format!("{} {}\n", i.hash, i.path).into_bytes())
            .collect();
        Manifest {
            command: command.into(),
            seed,
            config,
            inputs_hash: content_hash(&joined),
            inputs,
            tool_version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_matches_git_object_format() {
        // `git hash-object --object-format=sha256` of an empty file
        assert_eq!(
            content_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
        assert_ne!(content_hash(b"a"), content_hash(b"b"));
    }

    #[test]
    fn manifest_is_order_independent() {
        let a = InputDigest {
            path: "a".into(),
            hash: content_hash(b"1"),
        };
        let b = InputDigest {
            path: "b".into(),
            hash: content_hash(b"2"),
        };
        let m1 = Manifest::new("eval", 3, serde_json::json!({"k": 1}), vec![a.clone(), b.clone()]);
        let m2 = Manifest::new("eval", 3, serde_json::json!({"k": 1}), vec![b, a]);
        assert_eq!(m1, m2);
    }
}
