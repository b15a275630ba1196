//! Binary parameter checkpoints.
//!
//! Layout (little-endian): the 8-byte magic `ASRF0001`, then records until
//! end of file. Each record is `u32` name length, UTF-8 name, `u32` rank,
//! `rank` x `u64` dims, then `prod(dims)` x `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{DiffError, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ASRF0001";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<CheckpointEntry>,
}

fn bad(msg: impl Into<String>) -> DiffError {
    DiffError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[CheckpointEntry] {
        &self.entries
    }

    /// Inserts or replaces an entry.
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "checkpoint entry `{name}`");
        let entry = CheckpointEntry { name, shape, data };
        match self.entries.iter_mut().find(|e| e.name == entry.name) {
            Some(e) => *e = entry,
            None => self.entries.push(entry),
        }
    }

    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&CheckpointEntry, DiffError> {
        self.get(name).ok_or_else(|| bad(format!("missing entry `{name}`")))
    }

    pub fn scalars(&self, name: &str, n: usize) -> Result<&[f64], DiffError> {
        let e = self.require(name)?;
        if e.data.len() != n {
            return Err(bad(format!("entry `{name}` has {} values, expected {n}", e.data.len())));
        }
        Ok(&e.data)
    }

    pub fn contains_prefix(&self, prefix: &str) -> bool {
        self.entries.iter().any(|e| e.name.starts_with(prefix))
    }

    pub fn insert_store(&mut self, prefix: &str, store: &ParamStore) {
        for p in store.iter() {
            let (r, c) = p.value.dim();
            self.insert(format!("{prefix}/{}", p.name), vec![r, c], p.value.iter().copied().collect());
        }
    }

    /// Overwrites every parameter of `store` from `prefix/<name>` entries.
    pub fn restore_store(&self, prefix: &str, store: &mut ParamStore) -> Result<(), DiffError> {
        for p in store.iter_mut() {
            let name = format!("{prefix}/{}", p.name);
            let e = self.require(&name)?;
            let (r, c) = p.value.dim();
            if e.shape != [r, c] {
                return Err(bad(format!("entry `{name}` has shape {:?}, expected [{r}, {c}]", e.shape)));
            }
            p.value = Array2::from_shape_vec((r, c), e.data.clone()).map_err(|e| bad(e.to_string()))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DiffError> {
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing ASRF0001 header"));
        }
        let mut cur = &bytes[8..];
        let mut take = |n: usize, what: &str| -> Result<&[u8], DiffError> {
            if cur.len() < n {
                return Err(bad(format!("truncated {what}")));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        let mut ck = Checkpoint::new();
        loop {
            // `take` borrows `cur`; probe for end of file through it.
            let len_bytes = match take(4, "name length") {
                Ok(b) => b,
                Err(_) => break,
            };
            let name_len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(name_len, "name")?)
                .map_err(|_| bad("entry name is not UTF-8"))?
                .to_string();
            let rank = u32::from_le_bytes(take(4, "rank")?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(8, "dims")?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let payload = take(8 * n, "payload")?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            ck.entries.push(CheckpointEntry { name, shape, data });
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<(), DiffError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, DiffError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes).map_err(|e| bad(format!("{}: {e}", path.display())))
    }
}
