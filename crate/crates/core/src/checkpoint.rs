//! Binary checkpoint format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "IHBT"
//! 4       4     format version, u32 LE
//! 8       8     manifest length in bytes, u64 LE
//! 16      4     CRC32 of the manifest bytes, u32 LE
//! 20      m     manifest, UTF-8 JSON
//! 20+m    pad   zero bytes up to the next multiple of 64
//! blob    ...   tensor values, f64 LE, at the offsets listed in the manifest
//! ```
//!
//! Every byte is covered by a check: header fields are validated, padding
//! must be zero, the manifest and each tensor carry a CRC32, and the file
//! must end exactly at the end of the blob.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, ModelState};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"IHBT";
pub const FORMAT_VERSION: u32 = 1;
pub const ALIGN: usize = 64;
const HEADER_LEN: usize = 20;
const MANIFEST: &str = "<manifest>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset from the start of the blob.
    pub offset: usize,
    /// Byte length.
    pub len: usize,
    pub crc32: u32,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: EncoderConfig,
    pub num_labels: Option<usize>,
    /// Run that produced the checkpoint, if recorded.
    pub run_id: Option<String>,
    pub blob_len: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub run_id: Option<String>,
}

fn corrupt(tensor: &str, reason: impl Into<String>) -> Error {
    Error::CorruptCheckpoint {
        tensor: tensor.to_string(),
        reason: reason.into(),
    }
}

fn padded(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serializes a model to checkpoint bytes.
pub fn to_bytes(state: &ModelState, run_id: Option<&str>) -> Result<Vec<u8>> {
    let mut blob = Vec::with_capacity(state.num_scalars() * 8);
    let mut tensors = Vec::with_capacity(state.params().len());
    for p in state.params() {
        let offset = blob.len();
        for x in p.value.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: "f64".into(),
            offset,
            len: blob.len() - offset,
            crc32: crc32fast::hash(&blob[offset..]),
            trainable: p.trainable,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: state.config().clone(),
        num_labels: state.num_labels(),
        run_id: run_id.map(str::to_string),
        blob_len: blob.len(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let blob_start = padded(HEADER_LEN + json.len());
    let mut out = Vec::with_capacity(blob_start + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&json).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(blob_start, 0);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Reads only the manifest, after verifying header and manifest checksum.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(MANIFEST, "file shorter than header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt(MANIFEST, "bad magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(corrupt(
            MANIFEST,
            format!("unsupported format version {version} (expected {FORMAT_VERSION})"),
        ));
    }
    let m_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let m_crc = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes"));
    let m_end = usize::try_from(m_len)
        .ok()
        .and_then(|l| l.checked_add(HEADER_LEN))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt(MANIFEST, format!("manifest length {m_len} exceeds file size")))?;
    let json = &bytes[HEADER_LEN..m_end];
    if crc32fast::hash(json) != m_crc {
        return Err(corrupt(MANIFEST, "manifest checksum mismatch"));
    }
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| corrupt(MANIFEST, format!("unreadable manifest: {e}")))?;
    if manifest.format_version != version {
        return Err(corrupt(MANIFEST, "manifest version disagrees with header"));
    }
    let blob_start = padded(m_end);
    if blob_start > bytes.len() || bytes[m_end..blob_start].iter().any(|&b| b != 0) {
        return Err(corrupt(MANIFEST, "alignment padding is damaged"));
    }
    if bytes.len() - blob_start != manifest.blob_len {
        return Err(corrupt(
            MANIFEST,
            format!(
                "blob is {} bytes, manifest declares {}",
                bytes.len() - blob_start,
                manifest.blob_len
            ),
        ));
    }
    Ok((manifest, blob_start))
}

/// Parses and fully verifies checkpoint bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (manifest, blob_start) = read_manifest(bytes)?;
    let blob = &bytes[blob_start..];
    let mut named = Vec::with_capacity(manifest.tensors.len());
    let mut expected_offset = 0;
    for t in &manifest.tensors {
        if t.dtype != "f64" {
            return Err(corrupt(&t.name, format!("unsupported dtype `{}`", t.dtype)));
        }
        let numel: usize = t.shape.iter().product();
        if t.offset != expected_offset || t.len != numel * 8 || t.offset + t.len > blob.len() {
            return Err(corrupt(&t.name, "byte range disagrees with shape or layout"));
        }
        expected_offset += t.len;
        let raw = &blob[t.offset..t.offset + t.len];
        if crc32fast::hash(raw) != t.crc32 {
            return Err(corrupt(&t.name, "checksum mismatch"));
        }
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let value = Tensor::new(t.shape.clone(), data).map_err(|e| corrupt(&t.name, e.to_string()))?;
        named.push((t.name.clone(), value, t.trainable));
    }
    if expected_offset != blob.len() {
        return Err(corrupt(MANIFEST, "blob has bytes not owned by any tensor"));
    }
    let state = ModelState::from_named(manifest.config, manifest.num_labels, named)
        .map_err(|e| corrupt(MANIFEST, format!("tensor table does not fit config: {e}")))?;
    Ok(Checkpoint {
        state,
        run_id: manifest.run_id,
    })
}

/// Writes to a temporary file in the target directory, then renames.
pub fn save_checkpoint(state: &ModelState, run_id: Option<&str>, path: &Path) -> Result<()> {
    let bytes = to_bytes(state, run_id)?;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
