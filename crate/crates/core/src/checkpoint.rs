//! Binary checkpoints.
//!
//! Layout: the 8 bytes `TTT4REC1`, one UTF-8 header line, then one record
//! per parameter: name length (u32 LE), name, dtype (u8, 0 = f32), rank
//! (u8), dims (u32 LE each), values (f32 LE).

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{CheckpointError, Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TTT4REC1";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

fn encode_records(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, t) in model.names().iter().zip(model.tensors()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Serializes parameters (rounded to f32) and config.
pub fn to_bytes(model: &Model) -> Vec<u8> {
    let cfg = model.config();
    let records = encode_records(model);
    let config_line: Vec<String> = cfg.pairs().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
    let header = format!(
        "version={VERSION} digest={} payload={} records={} config={}\n",
        cfg.digest(),
        hex::encode(Sha256::digest(&records)),
        model.tensors().len(),
        config_line.join(";")
    );
    let mut out = Vec::with_capacity(MAGIC.len() + header.len() + records.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&records);
    out
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes).map_err(|kind| Error::Checkpoint {
        path: path.to_path_buf(),
        kind,
    })
}

/// Loads and checks that the stored architecture matches `expected`.
pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Model> {
    let model = load(path)?;
    let diffs = architecture_diff(model.config(), expected);
    if diffs.is_empty() {
        Ok(model)
    } else {
        Err(Error::Checkpoint {
            path: path.to_path_buf(),
            kind: CheckpointError::ConfigMismatch(diffs.join(", ")),
        })
    }
}

/// Differences in the keys that determine parameter shapes.
pub fn architecture_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    const KEYS: &[&str] = &[
        "n_items",
        "d_model",
        "blocks",
        "backbone",
        "inner",
        "inner_hidden",
        "tie_prediction",
        "conv_kernel",
        "ffn_mult",
    ];
    let (pa, pb) = (a.pairs(), b.pairs());
    pa.iter()
        .zip(&pb)
        .filter(|((k, va), (_, vb))| KEYS.contains(k) && va != vb)
        .map(|((k, va), (_, vb))| format!("{k}: checkpoint has {va}, expected {vb}"))
        .collect()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Model, CheckpointError> {
    use CheckpointError as E;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(if bytes.len() < MAGIC.len() && MAGIC.starts_with(bytes) {
            E::Truncated
        } else {
            E::BadMagic
        });
    }
    let rest = &bytes[MAGIC.len()..];
    let nl = rest.iter().position(|&b| b == b'\n').ok_or(E::Truncated)?;
    let header = std::str::from_utf8(&rest[..nl]).map_err(|_| E::Header("not UTF-8".into()))?;
    let field = |name: &str| -> std::result::Result<&str, CheckpointError> {
        header
            .split(' ')
            .find_map(|kv| kv.strip_prefix(name).and_then(|r| r.strip_prefix('=')))
            .ok_or_else(|| E::Header(format!("missing {name}")))
    };
    let version = field("version")?;
    if version != VERSION.to_string() {
        return Err(E::Version(version.to_string()));
    }
    let config_text = field("config")?.replace(';', "\n");
    let config = ModelConfig::from_text(&config_text).map_err(|e| E::Header(e.to_string()))?;
    let digest = field("digest")?;
    if digest != config.digest() {
        return Err(E::Digest {
            expected: digest.to_string(),
            actual: config.digest(),
        });
    }
    let n_records: usize = field("records")?
        .parse()
        .map_err(|_| E::Header("bad record count".into()))?;
    let records = &rest[nl + 1..];
    let template = Model::new(config).map_err(|e| E::Header(e.to_string()))?;
    if n_records != template.tensors().len() {
        return Err(E::ConfigMismatch(format!(
            "{n_records} records for a model with {} parameters",
            template.tensors().len()
        )));
    }
    let mut cur = Cursor { bytes: records, pos: 0 };
    let mut tensors = Vec::with_capacity(n_records);
    for (name, want) in template.names().iter().zip(template.tensors()) {
        let len = cur.u32()? as usize;
        let got = cur.take(len)?;
        if got != name.as_bytes() {
            return Err(E::Record(format!(
                "expected '{name}', found '{}'",
                String::from_utf8_lossy(got)
            )));
        }
        if cur.u8()? != DTYPE_F32 {
            return Err(E::Record(format!("{name}: unsupported dtype")));
        }
        let rank = cur.u8()? as usize;
        let dims = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if dims != want.shape() {
            return Err(E::ConfigMismatch(format!(
                "{name}: stored shape {dims:?}, model expects {:?}",
                want.shape()
            )));
        }
        let raw = cur.take(4 * want.numel())?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.push(Tensor::from_vec(&dims, data));
    }
    if cur.pos != records.len() {
        return Err(E::Record("trailing bytes after last record".into()));
    }
    let payload = field("payload")?;
    let actual = hex::encode(Sha256::digest(records));
    if payload != actual {
        return Err(E::Payload {
            expected: payload.to_string(),
            actual,
        });
    }
    template
        .with_tensors(tensors)
        .map_err(|e| E::Record(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Backbone, InnerKind};

    fn model() -> Model {
        let mut m = Model::new(ModelConfig {
            n_items: 9,
            d_model: 6,
            inner_hidden: 5,
            backbone: Backbone::Mamba,
            inner: InnerKind::Mlp,
            ..ModelConfig::default()
        })
        .unwrap();
        m.round_to_f32();
        m
    }

    #[test]
    fn starts_with_magic_and_round_trips() {
        let m = model();
        let bytes = to_bytes(&m);
        assert_eq!(&bytes[..8], b"TTT4REC1");
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        let items = [3, 1, 4, 1, 5];
        assert_eq!(back.score_window(&items).unwrap(), m.score_window(&items).unwrap());
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = to_bytes(&model());
        for cut in (0..bytes.len()).step_by(97) {
            assert!(from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        assert_eq!(from_bytes(&bytes[..bytes.len() - 1]).unwrap_err(), CheckpointError::Truncated);
    }

    #[test]
    fn flipped_bits_are_rejected() {
        let bytes = to_bytes(&model());
        let mut bad = bytes.clone();
        bad[0] ^= 1;
        assert_eq!(from_bytes(&bad).unwrap_err(), CheckpointError::BadMagic);
        let mut bad = bytes.clone();
        let last = bad.len() - 2;
        bad[last] ^= 0x10;
        assert!(matches!(from_bytes(&bad), Err(CheckpointError::Payload { .. })));
    }

    #[test]
    fn edited_config_fails_digest() {
        let bytes = to_bytes(&model());
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let at = text.find("eta_inner=0.1").unwrap();
        let mut bad = bytes.clone();
        bad[at + "eta_inner=0.".len()] = b'2';
        assert!(matches!(from_bytes(&bad), Err(CheckpointError::Digest { .. })));
    }

    #[test]
    fn version_is_checked() {
        let mut bytes = to_bytes(&model());
        bytes[8 + "version=".len()] = b'7';
        assert_eq!(from_bytes(&bytes).unwrap_err(), CheckpointError::Version("7".into()));
    }

    #[test]
    fn mismatched_dimension_is_a_config_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&model(), &path).unwrap();
        let expected = ModelConfig {
            d_model: 8,
            ..model().config().clone()
        };
        match load_expecting(&path, &expected) {
            Err(Error::Checkpoint {
                kind: CheckpointError::ConfigMismatch(msg),
                ..
            }) => assert!(msg.contains("d_model")),
            other => panic!("expected mismatch, got {other:?}"),
        }
        assert!(load_expecting(&path, model().config()).is_ok());
    }
}
