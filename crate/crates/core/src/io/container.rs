//! Binary tensor container.
//!
//! Layout, all integers little-endian regardless of host:
//!
//! ```text
//! magic    b"QTGF"
//! version  u32
//! count    u32
//! count records of:
//!   name_len u32, name (UTF-8)
//!   rank     u32
//!   dims     rank x u64
//!   dtype    u8 (0 = f32, 1 = f64)
//!   payload  product(dims) elements, row-major
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::error::{ContainerError, Error, Result};
use crate::numerics::{Real, Tensor};

pub const MAGIC: [u8; 4] = *b"QTGF";
pub const VERSION: u32 = 1;

/// A tensor in whichever precision it was stored.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn dims(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.dims(),
            StoredTensor::F64(t) => t.dims(),
        }
    }

    pub fn dtype_tag(&self) -> u8 {
        match self {
            StoredTensor::F32(_) => f32::DTYPE_TAG,
            StoredTensor::F64(_) => f64::DTYPE_TAG,
        }
    }

    /// Converts to the requested precision.
    pub fn to<T: Real>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Self {
        if T::DTYPE_TAG == f32::DTYPE_TAG {
            StoredTensor::F32(t.cast())
        } else {
            StoredTensor::F64(t.cast())
        }
    }
}

pub type NamedTensors = Vec<(String, StoredTensor)>;

/// Names and tensors of a parameter store (or anything similar) as a
/// container payload.
pub fn named<'a, T: Real>(items: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> NamedTensors {
    items
        .into_iter()
        .map(|(n, t)| (n.to_string(), StoredTensor::from_tensor(t)))
        .collect()
}

pub fn encode(tensors: &[(String, StoredTensor)]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&len_u32(tensors.len(), "tensor count")?.to_le_bytes());
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(ContainerError::DuplicateName(name.clone()).into());
        }
        out.extend_from_slice(&len_u32(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&len_u32(t.dims().len(), "rank")?.to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(t.dtype_tag());
        match t {
            StoredTensor::F32(t) => t.data().iter().for_each(|&x| x.write_le(&mut out)),
            StoredTensor::F64(t) => t.data().iter().for_each(|&x| x.write_le(&mut out)),
        }
    }
    Ok(out)
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| ContainerError::Malformed(format!("{what} {n} exceeds u32")).into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ContainerError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                ContainerError::Truncated(format!(
                    "{what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn read_payload<T: Real>(r: &mut Reader<'_>, dims: &[usize], name: &str) -> Result<Tensor<T>, ContainerError> {
    let count: usize = dims.iter().product();
    let bytes = count
        .checked_mul(T::BYTES)
        .ok_or_else(|| ContainerError::Malformed(format!("{name}: payload size overflows")))?;
    let raw = r.take(bytes, &format!("payload of {name}"))?;
    let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(dims, data).map_err(|e| ContainerError::Malformed(format!("{name}: {e}")))
}

pub fn decode(bytes: &[u8]) -> Result<NamedTensors, ContainerError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(ContainerError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(ContainerError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32("tensor count")?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| ContainerError::Malformed(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(ContainerError::DuplicateName(name));
        }
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            let d = r.u64("dims")?;
            dims.push(
                usize::try_from(d)
                    .map_err(|_| ContainerError::Malformed(format!("{name}: extent {d} too large")))?,
            );
        }
        let tensor = match r.take(1, "dtype")?[0] {
            0 => StoredTensor::F32(read_payload(&mut r, &dims, &name)?),
            1 => StoredTensor::F64(read_payload(&mut r, &dims, &name)?),
            tag => return Err(ContainerError::Malformed(format!("{name}: unknown dtype tag {tag}"))),
        };
        out.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(ContainerError::Malformed(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn write_container(path: impl AsRef<Path>, tensors: &[(String, StoredTensor)]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(tensors)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<NamedTensors> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> NamedTensors {
        vec![
            (
                "a".into(),
                StoredTensor::F64(Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., -0.0]).unwrap()),
            ),
            ("b.weight".into(), StoredTensor::F32(Tensor::vector(vec![f32::MIN_POSITIVE, 7.5]))),
        ]
    }

    #[test]
    fn round_trip_is_identity() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(decode(&bytes).unwrap(), sample());
        assert_eq!(encode(&decode(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn header_is_little_endian() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"QTGF");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        // first record: name "a", rank 2, dims 2 and 3
        assert_eq!(&bytes[12..17], &[1, 0, 0, 0, b'a']);
        assert_eq!(&bytes[17..21], &[2, 0, 0, 0]);
        assert_eq!(&bytes[21..29], &2u64.to_le_bytes());
        assert_eq!(bytes[37], 1);
        assert_eq!(&bytes[38..46], &1f64.to_le_bytes());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert_eq!(decode(&bytes), Err(ContainerError::BadMagic(*b"XXXX")));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(ContainerError::VersionMismatch { found: 9, .. })));
    }

    #[test]
    fn short_payload_is_truncation() {
        // dims 2x3 but only five f64 elements present
        let one = vec![(
            "x".to_string(),
            StoredTensor::F64(Tensor::from_f64(&[2, 3], &[0.0; 6]).unwrap()),
        )];
        let bytes = encode(&one).unwrap();
        let cut = &bytes[..bytes.len() - 8];
        assert!(matches!(decode(cut), Err(ContainerError::Truncated(_))));
    }

    #[test]
    fn duplicate_names() {
        let mut two = sample();
        two.push(two[0].clone());
        assert!(matches!(
            encode(&two),
            Err(Error::Container(ContainerError::DuplicateName(_)))
        ));
        // a file written by something else with a repeated name
        let mut bytes = encode(&sample()[..1]).unwrap();
        let record = bytes[12..].to_vec();
        bytes[8] = 2;
        bytes.extend(record);
        assert_eq!(decode(&bytes), Err(ContainerError::DuplicateName("a".into())));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.qtgf");
        write_container(&path, &sample()).unwrap();
        assert_eq!(read_container(&path).unwrap(), sample());
        let missing = read_container(dir.path().join("nope.qtgf")).unwrap_err();
        assert!(missing.to_string().contains("nope.qtgf"));
    }
}
