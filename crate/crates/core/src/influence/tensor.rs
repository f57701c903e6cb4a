use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradstore::{fnv1a64, format_checksum, read_checked, GroupId, SampleId, DUMP_VERSION, MANIFEST_FILE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    TracIn,
    Cosine,
    DataInf,
    TracInWE,
    TracInWE10,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::TracIn,
        Method::Cosine,
        Method::DataInf,
        Method::TracInWE,
        Method::TracInWE10,
    ];

    /// Methods defined only on word-embedding rows.
    pub fn embedding_only(self) -> bool {
        matches!(self, Method::TracInWE | Method::TracInWE10)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::TracIn => "TracIn",
            Method::Cosine => "Cosine",
            Method::DataInf => "DataInf",
            Method::TracInWE => "TracInWE",
            Method::TracInWE10 => "TracInWE10",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown influence method {s:?}")))
    }
}

/// Influence of every training sample on every validation sample, per group.
///
/// Entries are laid out train-major, then validation, then group.
#[derive(Clone, Debug, PartialEq)]
pub struct InfluenceTensor {
    pub method: Method,
    pub train_samples: Vec<SampleId>,
    pub validation_samples: Vec<SampleId>,
    pub groups: Vec<GroupId>,
    pub entries: Vec<f64>,
    /// Cosine pairs where a zero-norm gradient forced the score to 0.
    pub zero_norm_pairs: u64,
}

impl InfluenceTensor {
    pub fn new(
        method: Method,
        train_samples: Vec<SampleId>,
        validation_samples: Vec<SampleId>,
        groups: Vec<GroupId>,
        entries: Vec<f64>,
    ) -> Result<Self> {
        let expected = train_samples.len() * validation_samples.len() * groups.len();
        if entries.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: entries.len(),
            });
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("influence tensor".into()));
        }
        Ok(InfluenceTensor {
            method,
            train_samples,
            validation_samples,
            groups,
            entries,
            zero_norm_pairs: 0,
        })
    }

    pub fn num_train(&self) -> usize {
        self.train_samples.len()
    }

    pub fn num_validation(&self) -> usize {
        self.validation_samples.len()
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn get(&self, train: usize, val: usize, group: usize) -> f64 {
        self.entries[self.offset(train, val, group)]
    }

    pub fn offset(&self, train: usize, val: usize, group: usize) -> usize {
        (train * self.num_validation() + val) * self.num_groups() + group
    }

    pub fn group_index(&self, group: &GroupId) -> Result<usize> {
        self.groups
            .iter()
            .position(|g| g == group)
            .ok_or_else(|| Error::UnknownGroup(group.to_string()))
    }

    /// Scores of all training samples for one (validation, group) slice.
    pub fn slice(&self, val: usize, group: usize) -> Vec<f64> {
        (0..self.num_train()).map(|i| self.get(i, val, group)).collect()
    }

    /// Applies `f(val, group, value)` to every entry.
    pub fn map_slices(&self, f: impl Fn(usize, usize, f64) -> f64) -> Result<InfluenceTensor> {
        let mut out = self.clone();
        for i in 0..self.num_train() {
            for j in 0..self.num_validation() {
                for g in 0..self.num_groups() {
                    let o = self.offset(i, j, g);
                    out.entries[o] = f(j, g, self.entries[o]);
                }
            }
        }
        if out.entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("transformed influence tensor".into()));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorManifest {
    pub version: u32,
    pub method: Method,
    pub dtype: String,
    pub endianness: String,
    pub layout: String,
    pub train_samples: Vec<SampleId>,
    pub validation_samples: Vec<SampleId>,
    pub groups: Vec<GroupId>,
    pub file: String,
    pub byte_length: u64,
    pub checksum: String,
    pub zero_norm_pairs: u64,
}

const TENSOR_FILE: &str = "influence.f64";
const LAYOUT: &str = "train,validation,group";

/// Manifest plus one raw little-endian float64 file.
pub fn write_tensor_dump(tensor: &InfluenceTensor, dir: &Path) -> Result<TensorManifest> {
    fs::create_dir_all(dir)?;
    let bytes: Vec<u8> = tensor.entries.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(dir.join(TENSOR_FILE), &bytes)?;
    let manifest = TensorManifest {
        version: DUMP_VERSION,
        method: tensor.method,
        dtype: "float64".into(),
        endianness: "little".into(),
        layout: LAYOUT.into(),
        train_samples: tensor.train_samples.clone(),
        validation_samples: tensor.validation_samples.clone(),
        groups: tensor.groups.clone(),
        file: TENSOR_FILE.into(),
        byte_length: bytes.len() as u64,
        checksum: format_checksum(fnv1a64(&bytes)),
        zero_norm_pairs: tensor.zero_norm_pairs,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_tensor_dump(dir: &Path) -> Result<InfluenceTensor> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let m: TensorManifest = serde_json::from_slice(&fs::read(path)?)?;
    if m.dtype != "float64" || m.endianness != "little" || m.layout != LAYOUT {
        return Err(Error::Format(format!(
            "unsupported tensor encoding {}/{}/{}",
            m.dtype, m.endianness, m.layout
        )));
    }
    let bytes = read_checked(&dir.join(&m.file), m.byte_length, &m.checksum, "influence tensor")?;
    let entries = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut t = InfluenceTensor::new(m.method, m.train_samples, m.validation_samples, m.groups, entries)?;
    t.zero_norm_pairs = m.zero_norm_pairs;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("Hessian".parse::<Method>().is_err());
    }

    #[test]
    fn dump_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let t = InfluenceTensor::new(
            Method::Cosine,
            vec![0, 1],
            vec![5],
            vec![GroupId::cl(), GroupId::hidden(1)],
            vec![0.5, -1.0, 0.25, 1e-300],
        )
        .unwrap();
        let m = write_tensor_dump(&t, dir.path()).unwrap();
        assert_eq!(m.byte_length, 32);
        assert_eq!(read_tensor_dump(dir.path()).unwrap(), t);
        let p = dir.path().join(TENSOR_FILE);
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] ^= 1;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_tensor_dump(dir.path()), Err(Error::ChecksumMismatch { .. })));
    }

    #[test]
    fn shape_is_checked() {
        assert!(InfluenceTensor::new(Method::TracIn, vec![0], vec![0], vec![GroupId::cl()], vec![]).is_err());
    }
}
