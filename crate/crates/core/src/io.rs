//! File formats.
//!
//! Datasets use a small binary container:
//!
//! ```text
//! magic      8 bytes   "MIMDATA1"
//! header_len u32 LE
//! header     header_len bytes of UTF-8 JSON (DatasetHeader)
//! rows       N rows of d + 1 f64 LE values: x_1 .. x_d, y
//! ```
//!
//! Records, manifests and hypotheses are pretty-printed JSON with a
//! `format_version` field.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MimError, Result};
use crate::synthetic::{LabeledDataset, NoiseModel, Provenance};

pub const FORMAT_VERSION: u32 = 1;
pub const DATASET_MAGIC: &[u8; 8] = b"MIMDATA1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub d: usize,
    pub n: usize,
    pub seed: u64,
    pub family: Option<String>,
    pub noise: Option<NoiseModel>,
    pub instance_seed: Option<u64>,
    pub spec_hash: Option<String>,
    /// `train`, `eval` or free text.
    pub role: String,
}

impl DatasetHeader {
    pub fn describe(data: &LabeledDataset, role: &str, spec_hash: Option<&str>) -> Self {
        DatasetHeader {
            format_version: FORMAT_VERSION,
            d: data.dim,
            n: data.len(),
            seed: data.seed,
            family: data.provenance.as_ref().map(|p| p.family.clone()),
            noise: data.provenance.as_ref().map(|p| p.noise),
            instance_seed: data.provenance.as_ref().map(|p| p.instance_seed),
            spec_hash: spec_hash.map(str::to_string),
            role: role.to_string(),
        }
    }
}

pub fn write_dataset(path: &Path, data: &LabeledDataset, header: &DatasetHeader) -> Result<()> {
    if header.d != data.dim || header.n != data.len() {
        return Err(MimError::Format("header does not describe the dataset".into()));
    }
    let json = serde_json::to_vec(header)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for i in 0..data.len() {
        for v in data.row(i) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&data.ys[i].to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, LabeledDataset)> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| MimError::Format(format!("{}: too short for a dataset", path.display())))?;
    if &magic != DATASET_MAGIC {
        return Err(MimError::Format(format!("{}: not a dataset file", path.display())));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: DatasetHeader = serde_json::from_slice(&json)?;
    if header.format_version != FORMAT_VERSION {
        return Err(MimError::Format(format!(
            "unsupported dataset format version {}",
            header.format_version
        )));
    }
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    let row = (header.d + 1) * 8;
    if header.d == 0 || body.len() != header.n * row {
        return Err(MimError::Format(format!(
            "{}: body holds {} bytes, header promises {} rows of {} values",
            path.display(),
            body.len(),
            header.n,
            header.d + 1
        )));
    }
    let mut xs = Vec::with_capacity(header.n * header.d);
    let mut ys = Vec::with_capacity(header.n);
    for chunk in body.chunks_exact(row) {
        let vals = chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()));
        for (j, v) in vals.enumerate() {
            if j < header.d {
                xs.push(v);
            } else {
                ys.push(v);
            }
        }
    }
    let mut data = LabeledDataset::new(header.d, xs, ys)?;
    data.seed = header.seed;
    data.provenance = match (&header.family, header.noise, header.instance_seed) {
        (Some(family), Some(noise), Some(instance_seed)) => Some(Provenance {
            family: family.clone(),
            noise,
            instance_seed,
        }),
        _ => None,
    };
    Ok((header, data))
}

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json_string(value)?)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// SHA-256 of the compact JSON form with object keys sorted.
pub fn canonical_hash<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let bytes = serde_json::to_vec(&v)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{make_relu_network, sample_dataset};

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let inst = make_relu_network(4, 2, &[3], 1).unwrap();
        let mut data = sample_dataset(&inst, NoiseModel::Additive { sigma: 0.2 }, 257, 9).unwrap();
        data.ys[3] = -0.0;
        data.xs[5] = f64::MIN_POSITIVE / 4.0;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.mimd");
        let h = DatasetHeader::describe(&data, "train", Some("abc"));
        write_dataset(&p, &data, &h).unwrap();
        let (h2, back) = read_dataset(&p).unwrap();
        assert_eq!(h, h2);
        assert_eq!(back.ys.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), data.ys.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(back.xs.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), data.xs.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(back.provenance, data.provenance);

        let q = dir.path().join("b.mimd");
        write_dataset(&q, &data, &h).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());

        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&q, &bytes).unwrap();
        assert!(matches!(read_dataset(&q), Err(MimError::Format(_))));
        fs::write(&q, b"nope").unwrap();
        assert!(matches!(read_dataset(&q), Err(MimError::Format(_))));
    }

    #[test]
    fn hash_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"b": 1, "a": [1, 2]}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"a": [1, 2], "b": 1}"#).unwrap();
        assert_eq!(canonical_hash(&a).unwrap(), canonical_hash(&b).unwrap());
        assert_eq!(canonical_hash(&a).unwrap().len(), 64);
    }
}
