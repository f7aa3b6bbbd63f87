//! `embeddings.bin`: magic `TASAEMB1`, u32 record count, u32 dimension, then per record
//! a u16 name length, the UTF-8 name and `d` float32 values, all little-endian.
//!
//! Record names: `frame/<frame id>` for image embeddings, `task` for the instruction text,
//! `concept/<concept text>` for affordance concepts.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{io_err, EmbeddingVector, SceneError, EMBEDDING_DIM};

pub const MAGIC: &[u8; 8] = b"TASAEMB1";
pub const TASK_RECORD: &str = "task";

pub fn frame_record_name(frame_id: &str) -> String {
    format!("frame/{frame_id}")
}

pub fn concept_record_name(concept: &str) -> String {
    format!("concept/{concept}")
}

/// Named embeddings in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    records: Vec<(String, EmbeddingVector)>,
    by_name: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a record.
    pub fn insert(&mut self, name: impl Into<String>, v: EmbeddingVector) {
        let name = name.into();
        match self.by_name.get(&name) {
            Some(&i) => self.records[i].1 = v,
            None => {
                self.by_name.insert(name.clone(), self.records.len());
                self.records.push((name, v));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&EmbeddingVector> {
        self.by_name.get(name).map(|&i| &self.records[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&EmbeddingVector, SceneError> {
        self.get(name).ok_or_else(|| SceneError::MissingEmbedding(name.to_string()))
    }

    pub fn records(&self) -> &[(String, EmbeddingVector)] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Concept records in file order, as (concept text, embedding).
    pub fn concepts(&self) -> Vec<(&str, &EmbeddingVector)> {
        self.records.iter().filter_map(|(n, v)| n.strip_prefix("concept/").map(|c| (c, v))).collect()
    }
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingTable, SceneError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let malformed = |reason: String| SceneError::MalformedEmbeddings { path: path.to_path_buf(), reason };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(malformed("missing TASAEMB1 header".into()));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if dim != EMBEDDING_DIM {
        return Err(SceneError::EmbeddingDimensionMismatch {
            path: path.to_path_buf(),
            name: "<header>".into(),
            expected: EMBEDDING_DIM,
            found: dim,
        });
    }
    let mut pos = 16;
    let mut table = EmbeddingTable::new();
    for r in 0..count {
        let len_bytes = bytes.get(pos..pos + 2).ok_or_else(|| malformed(format!("truncated at record {r}")))?;
        let name_len = u16::from_le_bytes([len_bytes[0], len_bytes[1]]) as usize;
        pos += 2;
        let name = bytes.get(pos..pos + name_len).ok_or_else(|| malformed(format!("truncated name in record {r}")))?;
        let name =
            std::str::from_utf8(name).map_err(|_| malformed(format!("record {r} name is not UTF-8")))?.to_string();
        pos += name_len;
        let raw =
            bytes.get(pos..pos + 4 * dim).ok_or_else(|| malformed(format!("truncated values in record {name:?}")))?;
        pos += 4 * dim;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if table.get(&name).is_some() {
            return Err(malformed(format!("duplicate record {name:?}")));
        }
        let v = EmbeddingVector::new(values).map_err(|e| malformed(format!("record {name:?}: {e}")))?;
        table.insert(name, v);
    }
    if pos != bytes.len() {
        return Err(malformed(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(table)
}

pub fn write_embeddings(table: &EmbeddingTable, path: &Path) -> Result<(), SceneError> {
    let mut out = Vec::with_capacity(16 + table.len() * (EMBEDDING_DIM * 4 + 32));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    out.extend_from_slice(&(EMBEDDING_DIM as u32).to_le_bytes());
    for (name, v) in table.records() {
        let len = u16::try_from(name.len()).map_err(|_| SceneError::MalformedEmbeddings {
            path: path.to_path_buf(),
            reason: format!("record name {name:?} exceeds 65535 bytes"),
        })?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for x in v.values() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(io_err(path))
}
