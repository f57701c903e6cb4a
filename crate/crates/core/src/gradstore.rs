//! Per-sample gradient storage and the on-disk dump format.
//!
//! A dump directory holds `manifest.json` plus one raw little-endian,
//! row-major float32 file per parameter group. Each data file is covered by
//! a 64-bit FNV-1a checksum recorded in the manifest, so dumps produced by an
//! external exporter can be validated before use.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type SampleId = u64;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DUMP_VERSION: u32 = 1;

/// Name of a parameter group such as `WE`, `G1` or `CL`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct GroupId(String);

impl GroupId {
    /// Word embeddings.
    pub const WE: &'static str = "WE";
    /// Classification head.
    pub const CL: &'static str = "CL";

    /// Group names double as file names, so only `[A-Za-z0-9_.-]` is accepted.
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::invalid("group name must be non-empty"));
        }
        if !name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
            || name.starts_with('.')
        {
            return Err(Error::invalid(format!("group name {name:?} is not file-safe")));
        }
        Ok(GroupId(name))
    }

    pub fn we() -> Self {
        GroupId(Self::WE.to_string())
    }

    pub fn cl() -> Self {
        GroupId(Self::CL.to_string())
    }

    /// Hidden group `G{index}` (1-based).
    pub fn hidden(index: usize) -> Self {
        GroupId(format!("G{index}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for GroupId {
    type Error = Error;
    fn try_from(value: String) -> Result<Self> {
        GroupId::new(value)
    }
}

impl From<GroupId> for String {
    fn from(value: GroupId) -> Self {
        value.0
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

/// Flattened gradients of one parameter group, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBlock {
    group: GroupId,
    dim: usize,
    samples: Vec<SampleId>,
    values: Vec<f32>,
    /// When set, the block is a stack of equally wide rows keyed by token id
    /// (compressed embeddings), ascending.
    row_tokens: Option<Vec<u32>>,
}

impl GradientBlock {
    pub fn new(group: GroupId, dim: usize, samples: Vec<SampleId>, values: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid(format!("group {group}: dim must be positive")));
        }
        if values.len() != samples.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: samples.len() * dim,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient block {group}")));
        }
        Ok(GradientBlock {
            group,
            dim,
            samples,
            values,
            row_tokens: None,
        })
    }

    /// Declares the block as token-keyed rows. `tokens` must be strictly
    /// ascending and divide `dim` evenly.
    pub fn with_row_tokens(mut self, tokens: Vec<u32>) -> Result<Self> {
        if tokens.is_empty() || !self.dim.is_multiple_of(tokens.len()) {
            return Err(Error::invalid(format!(
                "group {}: {} row tokens do not divide dim {}",
                self.group,
                tokens.len(),
                self.dim
            )));
        }
        if tokens.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("row tokens must be strictly ascending"));
        }
        self.row_tokens = Some(tokens);
        Ok(self)
    }

    pub fn group(&self) -> &GroupId {
        &self.group
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> &[SampleId] {
        &self.samples
    }

    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row_tokens(&self) -> Option<&[u32]> {
        self.row_tokens.as_deref()
    }

    /// Width of one token row, if the block is token-keyed.
    pub fn token_row_width(&self) -> Option<usize> {
        self.row_tokens.as_ref().map(|t| self.dim / t.len())
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.values[index * self.dim..(index + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.values.chunks_exact(self.dim)
    }

    pub fn position(&self, id: SampleId) -> Option<usize> {
        self.samples.iter().position(|&s| s == id)
    }
}

/// Per-group gradients for one split at one checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientStore {
    pub split: Split,
    pub checkpoint_id: String,
    /// Opaque description of how model parameters map onto flat indices.
    pub note: Option<String>,
    blocks: BTreeMap<GroupId, GradientBlock>,
}

impl GradientStore {
    pub fn new(split: Split, checkpoint_id: impl Into<String>) -> Self {
        GradientStore {
            split,
            checkpoint_id: checkpoint_id.into(),
            note: None,
            blocks: BTreeMap::new(),
        }
    }

    /// Adds a block. Every block must carry the same sample ids in the same
    /// order, and group names must be unique.
    pub fn insert(&mut self, block: GradientBlock) -> Result<()> {
        if let Some(first) = self.blocks.values().next() {
            if first.samples != block.samples {
                return Err(Error::invalid(format!(
                    "group {} sample ids differ from the rest of the store",
                    block.group
                )));
            }
        }
        if self.blocks.contains_key(&block.group) {
            return Err(Error::invalid(format!("duplicate group {}", block.group)));
        }
        self.blocks.insert(block.group.clone(), block);
        Ok(())
    }

    pub fn samples(&self) -> &[SampleId] {
        self.blocks.values().next().map(|b| b.samples()).unwrap_or(&[])
    }

    pub fn groups(&self) -> impl Iterator<Item = &GroupId> {
        self.blocks.keys()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &GradientBlock> {
        self.blocks.values()
    }

    pub fn block(&self, group: &GroupId) -> Result<&GradientBlock> {
        self.blocks
            .get(group)
            .ok_or_else(|| Error::UnknownGroup(group.to_string()))
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub name: GroupId,
    pub dim: usize,
    pub file: String,
    pub byte_length: u64,
    /// FNV-1a 64 of the data file, 16 lowercase hex digits.
    pub checksum: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_tokens: Option<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub split: Split,
    pub checkpoint_id: String,
    pub dtype: String,
    pub endianness: String,
    pub samples: Vec<SampleId>,
    pub groups: Vec<GroupRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

pub(crate) fn format_checksum(sum: u64) -> String {
    format!("{sum:016x}")
}

pub(crate) fn parse_checksum(text: &str) -> Result<u64> {
    u64::from_str_radix(text, 16).map_err(|_| Error::Format(format!("bad checksum {text:?}")))
}

/// Reads a data file, checking its length and checksum against the manifest.
pub(crate) fn read_checked(path: &Path, byte_length: u64, checksum: &str, what: &str) -> Result<Vec<u8>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    if bytes.len() as u64 != byte_length {
        return Err(Error::Format(format!(
            "{what}: file has {} bytes, manifest says {byte_length}",
            bytes.len()
        )));
    }
    let expected = parse_checksum(checksum)?;
    let actual = fnv1a64(&bytes);
    if expected != actual {
        return Err(Error::ChecksumMismatch {
            what: what.to_string(),
            expected,
            actual,
        });
    }
    Ok(bytes)
}

/// Writes `store` into `dir` (created if needed) and returns the manifest.
pub fn write_gradient_dump(store: &GradientStore, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut groups = Vec::new();
    for block in store.blocks() {
        if block.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient block {}", block.group)));
        }
        let bytes: Vec<u8> = block.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let file = format!("{}.f32", block.group);
        fs::write(dir.join(&file), &bytes)?;
        groups.push(GroupRecord {
            name: block.group.clone(),
            dim: block.dim,
            file,
            byte_length: bytes.len() as u64,
            checksum: format_checksum(fnv1a64(&bytes)),
            row_tokens: block.row_tokens.clone(),
        });
    }
    let manifest = Manifest {
        version: DUMP_VERSION,
        split: store.split,
        checkpoint_id: store.checkpoint_id.clone(),
        dtype: "float32".into(),
        endianness: "little".into(),
        samples: store.samples().to_vec(),
        groups,
        note: store.note.clone(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn read_gradient_dump(dir: &Path) -> Result<GradientStore> {
    let manifest = read_manifest(dir)?;
    if manifest.version != DUMP_VERSION {
        return Err(Error::Format(format!("unsupported dump version {}", manifest.version)));
    }
    if manifest.dtype != "float32" {
        return Err(Error::Format(format!("dtype mismatch: expected float32, found {}", manifest.dtype)));
    }
    if manifest.endianness != "little" {
        return Err(Error::Format(format!(
            "endianness mismatch: expected little, found {}",
            manifest.endianness
        )));
    }
    let n = manifest.samples.len();
    let mut store = GradientStore::new(manifest.split, manifest.checkpoint_id.clone());
    store.note = manifest.note.clone();
    for record in &manifest.groups {
        let expected_len = (n * record.dim * 4) as u64;
        if record.byte_length != expected_len {
            return Err(Error::Format(format!(
                "group {}: byte_length {} != {n} samples x {} dim x 4",
                record.name, record.byte_length, record.dim
            )));
        }
        let bytes = read_checked(
            &dir.join(&record.file),
            record.byte_length,
            &record.checksum,
            &format!("group {}", record.name),
        )?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut block = GradientBlock::new(record.name.clone(), record.dim, manifest.samples.clone(), values)?;
        if let Some(tokens) = &record.row_tokens {
            block = block.with_row_tokens(tokens.clone())?;
        }
        store.insert(block)?;
    }
    Ok(store)
}

/// Gathers the rows for `sample_ids`, in the requested order.
pub fn slice_group(store: &GradientStore, group: &GroupId, sample_ids: &[SampleId]) -> Result<GradientBlock> {
    let block = store.block(group)?;
    let index: std::collections::HashMap<SampleId, usize> =
        block.samples.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let mut values = Vec::with_capacity(sample_ids.len() * block.dim);
    for id in sample_ids {
        let row = *index.get(id).ok_or(Error::UnknownSample(*id))?;
        values.extend_from_slice(block.row(row));
    }
    Ok(GradientBlock {
        group: block.group.clone(),
        dim: block.dim,
        samples: sample_ids.to_vec(),
        values,
        row_tokens: block.row_tokens.clone(),
    })
}
