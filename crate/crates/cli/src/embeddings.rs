//! Binary embedding files.
//!
//! Layout, all little-endian: magic `MLEM`, `u32` version, `u32` width `d`,
//! `u64` record count, then per record a `u32` id count, the ids as `u32`
//! and `d` `f32` values.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use memlab::corpus::TokenId;

pub const MAGIC: &[u8; 4] = b"MLEM";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingFileError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: corrupt embedding file: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("embedding width mismatch: record has {found}, expected {expected}")]
    Width { expected: usize, found: usize },
}

/// One embedded token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub ids: Vec<TokenId>,
    pub vector: Vec<f32>,
}

/// The records of one file; `source` is the file stem.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub records: Vec<EmbeddingRecord>,
    pub source: Option<String>,
}

pub fn write_embeddings(path: &Path, dim: usize, records: &[EmbeddingRecord]) -> Result<(), EmbeddingFileError> {
    let io_err = |source| EmbeddingFileError::Io { path: path.to_path_buf(), source };
    if let Some(r) = records.iter().find(|r| r.vector.len() != dim) {
        return Err(EmbeddingFileError::Width { expected: dim, found: r.vector.len() });
    }
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes);
    put(MAGIC).map_err(io_err)?;
    put(&VERSION.to_le_bytes()).map_err(io_err)?;
    put(&(dim as u32).to_le_bytes()).map_err(io_err)?;
    put(&(records.len() as u64).to_le_bytes()).map_err(io_err)?;
    for r in records {
        put(&(r.ids.len() as u32).to_le_bytes()).map_err(io_err)?;
        for id in &r.ids {
            put(&id.to_le_bytes()).map_err(io_err)?;
        }
        for v in &r.vector {
            put(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingFile, EmbeddingFileError> {
    let file = std::fs::File::open(path).map_err(|source| EmbeddingFileError::Io { path: path.to_path_buf(), source })?;
    let len = file.metadata().map(|m| m.len()).unwrap_or(u64::MAX);
    let mut r = BufReader::new(file);
    let corrupt = |reason: String| EmbeddingFileError::Corrupt { path: path.to_path_buf(), reason };
    let mut take = |n: usize, what: &str| -> Result<Vec<u8>, EmbeddingFileError> {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => corrupt(format!("truncated in {what}")),
            _ => EmbeddingFileError::Io { path: path.to_path_buf(), source: e },
        })?;
        Ok(buf)
    };
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));

    if take(4, "magic")? != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = u32_at(&take(4, "header")?);
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let dim = u32_at(&take(4, "header")?) as usize;
    let count = u64::from_le_bytes(take(8, "header")?.try_into().expect("8 bytes"));
    // Every record takes at least its length prefix and vector.
    if count.saturating_mul(4 + 4 * dim as u64) > len {
        return Err(corrupt(format!("header claims {count} records, more than the file holds")));
    }
    let mut records = Vec::with_capacity(count as usize);
    for i in 0..count {
        let what = format!("record {i}");
        let n = u32_at(&take(4, &what)?) as usize;
        let ids = take(4 * n, &what)?.chunks_exact(4).map(u32_at).collect();
        let vector = take(4 * dim, &what)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        records.push(EmbeddingRecord { ids, vector });
    }
    if take(1, "trailer").is_ok() {
        return Err(corrupt("trailing bytes after the last record".into()));
    }
    let source = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    Ok(EmbeddingFile { dim, records, source })
}
