//! Versioned JSON checkpoints. Floats are written with round-trip precision,
//! so save followed by load reproduces every parameter bit for bit.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_SCHEMA: &str = "vidstory.checkpoint/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Local,
    Global,
    Narrator,
}

impl std::fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CheckpointKind::Local => "local",
            CheckpointKind::Global => "global",
            CheckpointKind::Narrator => "narrator",
        };
        f.write_str(s)
    }
}

#[derive(Serialize)]
struct EnvelopeOut<'a, T> {
    schema: &'a str,
    kind: CheckpointKind,
    payload: &'a T,
}

#[derive(Deserialize)]
struct EnvelopeIn<T> {
    schema: String,
    kind: CheckpointKind,
    payload: T,
}

pub fn save_checkpoint<T: Serialize>(path: &Path, kind: CheckpointKind, payload: &T) -> Result<()> {
    let env = EnvelopeOut {
        schema: CHECKPOINT_SCHEMA,
        kind,
        payload,
    };
    let s = serde_json::to_string(&env).map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: DeserializeOwned>(path: &Path, expected: CheckpointKind) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: serde_json::Value = serde_json::from_str(&s).map_err(|e| Error::json(path.display().to_string(), e))?;
    match header.get("schema").and_then(|v| v.as_str()) {
        Some(CHECKPOINT_SCHEMA) => {}
        other => {
            return Err(Error::validation(
                format!("{}: schema", path.display()),
                format!("expected {CHECKPOINT_SCHEMA}, found {other:?}"),
            ))
        }
    }
    let env: EnvelopeIn<T> = serde_json::from_value(header).map_err(|e| Error::json(path.display().to_string(), e))?;
    debug_assert_eq!(env.schema, CHECKPOINT_SCHEMA);
    if env.kind != expected {
        return Err(Error::PhaseOrder(format!(
            "{} holds a {} checkpoint, expected {expected}",
            path.display(),
            env.kind
        )));
    }
    Ok(env.payload)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gru::GruParams;
    use rand::SeedableRng;

    #[test]
    fn bitwise_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let p = GruParams::random(&mut rng, 3, 4, 0.08);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        save_checkpoint(&path, CheckpointKind::Local, &p).unwrap();
        let q: GruParams = load_checkpoint(&path, CheckpointKind::Local).unwrap();
        use crate::linalg::ParamSet;
        assert!(p.to_flat().iter().zip(q.to_flat()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(matches!(
            load_checkpoint::<GruParams>(&path, CheckpointKind::Global),
            Err(Error::PhaseOrder(_))
        ));
        std::fs::write(&path, r#"{"schema":"other","kind":"local","payload":{}}"#).unwrap();
        assert!(matches!(
            load_checkpoint::<GruParams>(&path, CheckpointKind::Local),
            Err(Error::Validation { .. })
        ));
    }
}
