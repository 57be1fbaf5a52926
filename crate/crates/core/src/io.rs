//! Persistence: binary tensor files, canonical JSON documents (models and
//! artifact bundles) and CSV reports.
//!
//! # Tensor file layout
//!
//! ```text
//! offset  size        field
//! 0       8           magic "CATQTNS1"
//! 8       4           rank r, u32 little-endian, 1 <= r <= 8
//! 12      8 * r       dims, u64 little-endian each
//! 12+8r   8 * prod    payload, row-major f64 little-endian
//! ```
//!
//! JSON output is canonical: object keys sorted, reals printed in their
//! shortest round-trip form, two-space indentation, trailing newline.
//! Writes go to a temporary file in the target directory and are renamed
//! into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cat::CatArtifacts;
use crate::error::{Error, Result};
use crate::net::QuantParamSet;
use crate::numerics::Tensor;

pub const TENSOR_MAGIC: &[u8; 8] = b"CATQTNS1";
pub const MAX_TENSOR_RANK: usize = 8;
pub const BUNDLE_SCHEMA: &str = "catq-bundle/1";

/// Encodes a tensor in the binary layout above.
pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.rank() + 8 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 12 {
        return Err(Error::Format(format!(
            "file is {} bytes, shorter than the 12-byte header",
            bytes.len()
        )));
    }
    let magic = &bytes[..8];
    if magic != TENSOR_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?} (expected \"CATQTNS1\")",
            String::from_utf8_lossy(magic)
        )));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if rank == 0 || rank > MAX_TENSOR_RANK {
        return Err(Error::Format(format!(
            "rank {rank} outside [1, {MAX_TENSOR_RANK}]"
        )));
    }
    let header = 12 + 8 * rank;
    if bytes.len() < header {
        return Err(Error::Format(format!(
            "truncated header: rank {rank} needs {header} bytes, file has {}",
            bytes.len()
        )));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: u64 = 1;
    for chunk in bytes[12..header].chunks_exact(8) {
        let d = u64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        if d == 0 {
            return Err(Error::Format("zero-sized dimension".into()));
        }
        count = count
            .checked_mul(d)
            .ok_or_else(|| Error::Format("dimension product overflows".into()))?;
        shape.push(d as usize);
    }
    let expected = count
        .checked_mul(8)
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let actual = (bytes.len() - header) as u64;
    if actual != expected {
        return Err(Error::Length { expected, actual });
    }
    let data = bytes[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_atomic(path.as_ref(), &encode_tensor(t))
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.flush().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Canonical JSON text for any serializable value.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // `serde_json::Value` keeps object keys in a BTreeMap, so going through
    // it sorts every level.
    let v = serde_json::to_value(value).map_err(|e| Error::Internal(e.to_string()))?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::Internal(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_canonical_json(value)?.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| match source.classify() {
        // Invariant checks inside `try_from` conversions surface as data errors.
        serde_json::error::Category::Data if source.to_string().starts_with("validation error") => {
            Error::validation(path.display().to_string(), source.to_string())
        }
        _ => Error::Parse {
            path: path.to_path_buf(),
            source,
        },
    })
}

/// Where a bundle came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    /// Hex digest of the canonical configuration that produced the bundle.
    pub config_hash: String,
    pub tool_version: String,
}

/// Everything a deployment needs: refined quantization parameters and the
/// optional logit corrections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactBundle {
    pub schema_version: String,
    pub quant_params: QuantParamSet,
    /// Cluster-based correction.
    pub cat: Option<CatArtifacts>,
    /// Single-cluster correction fitted on the same data, kept for
    /// comparison reports.
    pub plain_affine: Option<CatArtifacts>,
    pub provenance: Provenance,
}

impl ArtifactBundle {
    pub fn new(quant_params: QuantParamSet, provenance: Provenance) -> Self {
        Self {
            schema_version: BUNDLE_SCHEMA.to_string(),
            quant_params,
            cat: None,
            plain_affine: None,
            provenance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != BUNDLE_SCHEMA {
            return Err(Error::validation(
                "schema_version",
                format!("unrecognized `{}`, expected `{BUNDLE_SCHEMA}`", self.schema_version),
            ));
        }
        if let Some(cat) = &self.cat {
            cat.validate().map_err(|e| prefix_field("cat", e))?;
        }
        if let Some(plain) = &self.plain_affine {
            plain.validate().map_err(|e| prefix_field("plain_affine", e))?;
        }
        Ok(())
    }
}

fn prefix_field(prefix: &str, e: Error) -> Error {
    match e {
        Error::Validation { field, reason } => Error::Validation {
            field: format!("{prefix}.{field}"),
            reason,
        },
        other => other,
    }
}

pub fn save_bundle(path: impl AsRef<Path>, bundle: &ArtifactBundle) -> Result<()> {
    bundle.validate()?;
    write_json(path.as_ref(), bundle)
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<ArtifactBundle> {
    let bundle: ArtifactBundle = read_json(path.as_ref())?;
    bundle.validate()?;
    Ok(bundle)
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_real(v: f64) -> String {
    format!("{v:?}")
}

/// A CSV table with a fixed header, written atomically.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)
            .map_err(|e| Error::Internal(e.to_string()))?;
        for r in &self.rows {
            w.write_record(r).map_err(|e| Error::Internal(e.to_string()))?;
        }
        w.into_inner().map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }
}
