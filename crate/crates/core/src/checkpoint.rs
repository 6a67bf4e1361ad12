//! Weight and embedding container.
//!
//! Layout: the 8 magic bytes `CFDIFF01`, a little-endian `u64` header
//! length, a UTF-8 JSON header, then every tensor's values as raw
//! little-endian `f32` in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::EmbeddingTable;
use crate::error::{Error, Result};
use crate::nn::TensorSpec;

pub const MAGIC: &[u8; 8] = b"CFDIFF01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorSpec>,
    /// Token id of each row for embedding tables; empty otherwise.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tokens: Vec<TokenRow>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenRow {
    pub id: u32,
    pub learnable: bool,
    pub row: usize,
}

pub fn write(path: &Path, header: &Header, values: &[f32]) -> Result<()> {
    let expected: usize = header.tensors.iter().map(|t| t.numel()).sum();
    if expected != values.len() {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("header declares {expected} values but {} were given", values.len()),
        });
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let json = serde_json::to_vec(header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read(path: &Path) -> Result<(Header, Vec<f32>)> {
    let bad = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = BufReader::new(File::open(path).map_err(|e| bad(e.to_string()))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated".into()))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| bad("truncated".into()))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 64 << 20 {
        return Err(bad(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;
    let n: usize = header.tensors.iter().map(|t| t.numel()).sum();
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() != 4 * n {
        return Err(bad(format!("expected {} data bytes, found {}", 4 * n, raw.len())));
    }
    let values = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, values))
}

/// Reads a checkpoint and checks its kind.
pub fn read_kind(path: &Path, kind: &str) -> Result<(Header, Vec<f32>)> {
    let (h, v) = read(path)?;
    if h.kind != kind {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("holds a {:?}, expected a {kind:?}", h.kind),
        });
    }
    Ok((h, v))
}

pub fn save_table(path: &Path, table: &EmbeddingTable, seed: u64) -> Result<()> {
    let mut tokens = Vec::new();
    let mut values = Vec::new();
    let rows = table
        .fixed()
        .iter()
        .map(|(id, v)| (*id, false, v))
        .chain(table.learnable().iter().map(|(id, v)| (*id, true, v)));
    for (row, (id, learnable, v)) in rows.enumerate() {
        tokens.push(TokenRow { id, learnable, row });
        values.extend_from_slice(v);
    }
    let header = Header {
        kind: "embedding_table".into(),
        seed,
        config: serde_json::json!({ "cond_dim": table.cond_dim() }),
        tensors: vec![TensorSpec {
            name: "embeddings".into(),
            shape: vec![tokens.len(), table.cond_dim()],
        }],
        tokens,
    };
    write(path, &header, &values)
}

pub fn load_table(path: &Path) -> Result<EmbeddingTable> {
    let (h, v) = read_kind(path, "embedding_table")?;
    let dim = h.config["cond_dim"].as_u64().ok_or_else(|| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: "missing cond_dim".into(),
    })? as usize;
    let mut t = EmbeddingTable::empty(dim);
    for tr in &h.tokens {
        let row = v
            .get(tr.row * dim..(tr.row + 1) * dim)
            .ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("row {} out of range", tr.row),
            })?
            .to_vec();
        if tr.learnable {
            t.insert_learnable(tr.id, row)?;
        } else {
            t.insert_fixed(tr.id, row)?;
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::tokens;

    #[test]
    fn table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = EmbeddingTable::with_vocabulary(8, 6, 1);
        t.add_learnable(&[tokens::context(0), tokens::class(1, 2)], 4)
            .unwrap();
        let p = dir.path().join("t.ckpt");
        save_table(&p, &t, 4).unwrap();
        assert_eq!(load_table(&p).unwrap(), t);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        std::fs::write(&p, b"nope").unwrap();
        assert!(read(&p).is_err());
        let h = Header {
            kind: "k".into(),
            seed: 0,
            config: serde_json::Value::Null,
            tensors: vec![TensorSpec {
                name: "w".into(),
                shape: vec![2, 2],
            }],
            tokens: vec![],
        };
        assert!(write(&p, &h, &[1.0; 3]).is_err());
        write(&p, &h, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let (h2, v) = read(&p).unwrap();
        assert_eq!((h2, v), (h.clone(), vec![1.0, 2.0, 3.0, 4.0]));
        assert!(read_kind(&p, "other").is_err());
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.pop();
        std::fs::write(&p, bytes).unwrap();
        assert!(read(&p).is_err());
    }
}
