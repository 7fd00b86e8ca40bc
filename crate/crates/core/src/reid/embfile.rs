//! Binary embedding container.
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"LATREMB\0"
//! 8       4     version (u32 LE)
//! 12      4     reserved, zero
//! 16      4     E, embedding dimension (u32 LE)
//! 20      4     record count (u32 LE)
//! 24      ...   records: person_id (u32 LE, i32 bit pattern), camera_id (u32 LE),
//!               E × f32 LE
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::reid::LabeledEmbedding;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"LATREMB\0";
pub const EMBEDDING_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub records: Vec<LabeledEmbedding>,
}

pub fn encode_embeddings(dim: usize, records: &[LabeledEmbedding]) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    w.bytes(EMBEDDING_MAGIC);
    w.u32(EMBEDDING_VERSION);
    w.u32(0);
    w.len_u32(dim, "dimension")?;
    w.len_u32(records.len(), "record count")?;
    for (i, r) in records.iter().enumerate() {
        if r.vector.len() != dim {
            return Err(Error::dim(format!(
                "record {i} has dimension {}, file dimension is {dim}",
                r.vector.len()
            )));
        }
        w.u32(r.person_id as u32);
        w.u32(r.camera_id);
        w.f32s(&r.vector);
    }
    Ok(w.buf)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingFile> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(8, "magic")?;
    if magic != EMBEDDING_MAGIC {
        return Err(Error::Version {
            found: format!("bad magic {magic:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != EMBEDDING_VERSION {
        return Err(Error::Version {
            found: format!("embedding file version {version}"),
        });
    }
    r.u32("reserved")?;
    let dim = r.u32("dimension")? as usize;
    let count = r.u32("count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let person_id = r.u32("person id")? as i32;
        let camera_id = r.u32("camera id")?;
        let vector = r.f32s(dim, &format!("record {i}"))?;
        records.push(LabeledEmbedding {
            vector,
            person_id,
            camera_id,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after {count} records",
            r.remaining()
        )));
    }
    Ok(EmbeddingFile { dim, records })
}

pub fn write_embeddings(path: &Path, dim: usize, records: &[LabeledEmbedding]) -> Result<()> {
    let bytes = encode_embeddings(dim, records)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}

/// One JSON object per line, for debugging.
pub fn write_jsonl(path: &Path, records: &[LabeledEmbedding]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Malformed(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<LabeledEmbedding>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true))
        .map(|line| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))
        })
        .collect()
}
