//! Single-file tensor container.
//!
//! Layout: the 8-byte magic `SQTN\0\x01\0\0`, a little-endian `u64` giving
//! the length of a UTF-8 JSON index, the index itself, then raw
//! little-endian payloads. Every payload starts at an absolute file offset
//! that is a multiple of 64; gaps are zero-filled.
//!
//! The index is `{"metadata": {...}, "tensors": {name: {"dtype", "shape",
//! "offset", "length"}}}` with keys in sorted order, so equal contents give
//! equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, SqError};

pub const MAGIC: [u8; 8] = *b"SQTN\0\x01\0\0";
pub const ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    U8,
    I32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

/// Element types a tensor can hold.
pub trait Element: Copy + Sized {
    const DTYPE: DType;
    fn put(self, out: &mut Vec<u8>);
    fn take(b: &[u8]) -> Self;
}

macro_rules! element {
    ($t:ty, $d:expr) => {
        impl Element for $t {
            const DTYPE: DType = $d;
            fn put(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn take(b: &[u8]) -> Self {
                <$t>::from_le_bytes(b.try_into().expect("element width"))
            }
        }
    };
}

element!(f32, DType::F32);
element!(f64, DType::F64);
element!(u8, DType::U8);
element!(i32, DType::I32);

/// A tensor held as its little-endian payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl Tensor {
    pub fn from_iter<E: Element>(shape: Vec<usize>, values: impl IntoIterator<Item = E>) -> Result<Self> {
        let mut bytes = Vec::new();
        for v in values {
            v.put(&mut bytes);
        }
        let n: usize = shape.iter().product();
        if bytes.len() != n * E::DTYPE.size() {
            return Err(SqError::Container(format!(
                "shape {shape:?} needs {n} elements, got {}",
                bytes.len() / E::DTYPE.size()
            )));
        }
        Ok(Self {
            dtype: E::DTYPE,
            shape,
            bytes,
        })
    }

    pub fn from_slice<E: Element>(v: &[E]) -> Self {
        Self::from_iter(vec![v.len()], v.iter().copied()).expect("length matches")
    }

    pub fn from_array2<E: Element>(a: &Array2<E>) -> Self {
        Self::from_iter(a.shape().to_vec(), a.iter().copied()).expect("length matches")
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    fn check<E: Element>(&self) -> Result<()> {
        if self.dtype != E::DTYPE {
            return Err(SqError::Container(format!(
                "tensor is {:?}, requested {:?}",
                self.dtype,
                E::DTYPE
            )));
        }
        Ok(())
    }

    pub fn to_vec<E: Element>(&self) -> Result<Vec<E>> {
        self.check::<E>()?;
        Ok(self.bytes.chunks_exact(E::DTYPE.size()).map(E::take).collect())
    }

    pub fn to_array<E: Element>(&self) -> Result<ArrayD<E>> {
        let v = self.to_vec()?;
        ArrayD::from_shape_vec(IxDyn(&self.shape), v).map_err(|e| SqError::Container(e.to_string()))
    }

    pub fn to_array1<E: Element>(&self) -> Result<Array1<E>> {
        if self.shape.len() != 1 {
            return Err(SqError::Container(format!("expected 1-d tensor, shape {:?}", self.shape)));
        }
        Ok(Array1::from(self.to_vec()?))
    }

    pub fn to_array2<E: Element>(&self) -> Result<Array2<E>> {
        if self.shape.len() != 2 {
            return Err(SqError::Container(format!("expected 2-d tensor, shape {:?}", self.shape)));
        }
        Array2::from_shape_vec((self.shape[0], self.shape[1]), self.to_vec()?)
            .map_err(|e| SqError::Container(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    metadata: BTreeMap<String, Value>,
    tensors: BTreeMap<String, Entry>,
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Named tensors plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub metadata: BTreeMap<String, Value>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn set_meta(&mut self, key: &str, v: impl Serialize) {
        self.metadata
            .insert(key.to_string(), serde_json::to_value(v).expect("metadata serializes"));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| SqError::Container(format!("missing tensor `{name}`")))
    }

    pub fn meta<V: serde::de::DeserializeOwned>(&self, key: &str) -> Result<V> {
        let v = self
            .metadata
            .get(key)
            .ok_or_else(|| SqError::Container(format!("missing metadata `{key}`")))?;
        serde_json::from_value(v.clone()).map_err(|e| SqError::Container(format!("metadata `{key}`: {e}")))
    }

    fn index_json(&self, data_start: usize) -> Vec<u8> {
        let mut off = data_start;
        let tensors = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let e = Entry {
                    dtype: t.dtype,
                    shape: t.shape.clone(),
                    offset: off as u64,
                    length: t.bytes.len() as u64,
                };
                off = align(off + t.bytes.len());
                (k.clone(), e)
            })
            .collect();
        serde_json::to_vec(&Index {
            metadata: self.metadata.clone(),
            tensors,
        })
        .expect("index serializes")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        // Offsets are absolute, so the index length feeds back into them;
        // iterate until the payload start is stable.
        let mut start = align(16);
        let mut index = self.index_json(start);
        loop {
            let need = align(16 + index.len());
            if need == start {
                break;
            }
            start = need;
            index = self.index_json(start);
        }
        let mut out = Vec::with_capacity(start + self.tensors.values().map(|t| align(t.bytes.len())).sum::<usize>());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(index.len() as u64).to_le_bytes());
        out.extend_from_slice(&index);
        for t in self.tensors.values() {
            out.resize(align(out.len()), 0);
            out.extend_from_slice(&t.bytes);
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let bad = |m: String| SqError::Container(m);
        if b.len() < 16 || b[..8] != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let n = u64::from_le_bytes(b[8..16].try_into().expect("8 bytes")) as usize;
        let index_end = 16usize
            .checked_add(n)
            .filter(|&e| e <= b.len())
            .ok_or_else(|| bad("index runs past end of file".into()))?;
        let index: Index = serde_json::from_slice(&b[16..index_end]).map_err(|e| bad(format!("index: {e}")))?;
        let mut tensors = BTreeMap::new();
        for (name, e) in index.tensors {
            let (off, len) = (e.offset as usize, e.length as usize);
            let count: usize = e.shape.iter().product();
            if off % ALIGN != 0 || off < index_end || len != count * e.dtype.size() {
                return Err(bad(format!("tensor `{name}` has an inconsistent entry")));
            }
            let bytes = off
                .checked_add(len)
                .and_then(|end| b.get(off..end))
                .ok_or_else(|| bad(format!("tensor `{name}` runs past end of file")))?;
            tensors.insert(
                name,
                Tensor {
                    dtype: e.dtype,
                    shape: e.shape,
                    bytes: bytes.to_vec(),
                },
            );
        }
        Ok(Self {
            metadata: index.metadata,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| SqError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(SqError::MissingArtifact(path.to_path_buf()));
        }
        let b = std::fs::read(path).map_err(|e| SqError::io(path, e))?;
        Self::from_bytes(&b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.insert("a/f32", Tensor::from_array2(&array![[1.5f32, -0.0], [f32::MIN_POSITIVE, 3.0]]));
        c.insert("b/f64", Tensor::from_slice(&[std::f64::consts::PI, -1e-300]));
        c.insert("c/u8", Tensor::from_slice(&[0u8, 7, 255]));
        c.insert("d/i32", Tensor::from_slice(&[-3i32, i32::MAX]));
        c.insert("e/empty", Tensor::from_slice::<f32>(&[]));
        c.set_meta("note", "hi");
        c.set_meta("n", 3);
        c
    }

    #[test]
    fn header_layout() {
        let b = sample().to_bytes();
        assert_eq!(&b[..8], b"SQTN\0\x01\0\0");
        let n = u64::from_le_bytes(b[8..16].try_into().unwrap()) as usize;
        let idx: Value = serde_json::from_slice(&b[16..16 + n]).unwrap();
        for (_, e) in idx["tensors"].as_object().unwrap() {
            assert_eq!(e["offset"].as_u64().unwrap() % 64, 0);
        }
        let f = &idx["tensors"]["b/f64"];
        let off = f["offset"].as_u64().unwrap() as usize;
        assert_eq!(&b[off..off + 8], &std::f64::consts::PI.to_le_bytes());
        assert_eq!(f["dtype"], "f64");
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let b = c.to_bytes();
        let back = Container::from_bytes(&b).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), b);
        let m: Array2<f32> = back.get("a/f32").unwrap().to_array2().unwrap();
        assert_eq!(m[[0, 1]].to_bits(), (-0.0f32).to_bits());
        assert_eq!(back.meta::<u32>("n").unwrap(), 3);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let b = sample().to_bytes();
        assert!(Container::from_bytes(&b[..10]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).is_err());
        assert!(Container::from_bytes(&b[..b.len() - 1]).is_err());
        let t = sample();
        assert!(t.get("a/f32").unwrap().to_vec::<f64>().is_err());
        assert!(t.get("missing").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.sqtn");
        sample().write(&p).unwrap();
        assert_eq!(Container::read(&p).unwrap(), sample());
        assert!(matches!(
            Container::read(&dir.path().join("nope")),
            Err(SqError::MissingArtifact(_))
        ));
    }

    proptest! {
        #[test]
        fn arbitrary_f32_bits_survive(bits in proptest::collection::vec(any::<u32>(), 0..200), rows in 1usize..4) {
            let n = bits.len() / rows * rows;
            let vals: Vec<f32> = bits[..n].iter().map(|&b| f32::from_bits(b)).collect();
            let mut c = Container::new();
            c.insert("t", Tensor::from_iter(vec![rows, n / rows], vals.iter().copied()).unwrap());
            let back = Container::from_bytes(&c.to_bytes()).unwrap();
            let got: Vec<f32> = back.get("t").unwrap().to_vec().unwrap();
            prop_assert!(got.iter().zip(&vals).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn finite_f64_metadata_survives(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL) {
            let mut c = Container::new();
            c.set_meta("x", v);
            let bytes = c.to_bytes();
            let back = Container::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.meta::<f64>("x").unwrap().to_bits(), v.to_bits());
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
