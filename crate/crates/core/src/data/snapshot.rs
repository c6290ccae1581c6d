//! Versioned binary snapshot of a prepared dataset.
//!
//! Layout (all integers little endian):
//!
//! ```text
//! magic "OCCFSPLT" | u32 version = 1
//! u64 m | u64 n
//! m × (u32 byte length, UTF-8 user key)
//! n × (u32 byte length, UTF-8 item key)
//! 3 × matrix (train, validation, test):
//!     u64 nnz | (m + 1) × u64 row pointer | nnz × u32 item index
//! u64 h | h × u32 held-out user index (ascending)
//! ```

use std::fs;
use std::path::Path;

use super::ingest::IdVocabulary;
use super::matrix::{DatasetSplit, InteractionMatrix};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"OCCFSPLT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSnapshot {
    pub vocab: IdVocabulary,
    pub split: DatasetSplit,
    /// Users excluded from training and reserved for cold-start evaluation.
    pub heldout: Vec<u32>,
}

impl SplitSnapshot {
    pub fn new(vocab: IdVocabulary, split: DatasetSplit, mut heldout: Vec<u32>) -> Result<Self> {
        Error::check_dim(vocab.n_users(), split.n_users())?;
        Error::check_dim(vocab.n_items(), split.n_items())?;
        heldout.sort_unstable();
        heldout.dedup();
        if heldout.last().is_some_and(|&u| u as usize >= split.n_users()) {
            return Err(Error::invalid("held-out user out of range"));
        }
        Ok(SplitSnapshot {
            vocab,
            split,
            heldout,
        })
    }

    pub fn heldout_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.split.n_users()];
        for &u in &self.heldout {
            mask[u as usize] = true;
        }
        mask
    }

    /// The split with held-out users' rows emptied: what training may see.
    pub fn training_view(&self) -> DatasetSplit {
        let keep: Vec<bool> = self.heldout_mask().iter().map(|h| !h).collect();
        self.split.mask_users(&keep)
    }

    /// The split restricted to held-out users.
    pub fn heldout_view(&self) -> DatasetSplit {
        self.split.mask_users(&self.heldout_mask())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.u64(self.split.n_users() as u64);
        w.u64(self.split.n_items() as u64);
        for key in self.vocab.user_keys() {
            w.str(key);
        }
        for key in self.vocab.item_keys() {
            w.str(key);
        }
        for m in [&self.split.train, &self.split.validation, &self.split.test] {
            w.u64(m.nnz() as u64);
            for &p in m.indptr() {
                w.u64(p as u64);
            }
            for &j in m.indices() {
                w.u32(j);
            }
        }
        w.u64(self.heldout.len() as u64);
        for &u in &self.heldout {
            w.u32(u);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, version) = Reader::open(bytes, MAGIC)?;
        if version != VERSION {
            return Err(Error::Snapshot(format!("unsupported split version {version}")));
        }
        let m = r.len()?;
        let n = r.len()?;
        let users = (0..m).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let items = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let vocab = IdVocabulary::from_keys(users, items)?;
        let mut matrices = Vec::with_capacity(3);
        for _ in 0..3 {
            let nnz = r.len()?;
            let indptr = (0..=m)
                .map(|_| r.len())
                .collect::<Result<Vec<_>>>()?;
            let indices = (0..nnz).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            matrices.push(InteractionMatrix::from_csr(n, indptr, indices)?);
        }
        let h = r.len()?;
        let heldout = (0..h).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let test = matrices.pop().unwrap();
        let validation = matrices.pop().unwrap();
        let train = matrices.pop().unwrap();
        SplitSnapshot::new(vocab, DatasetSplit::new(train, validation, test)?, heldout)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
