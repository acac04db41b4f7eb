use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::tensor::{Scalar, Tensor};
use super::DiffError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ADVC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named parameter tensors. Paths are dot-separated (`actor.coop.gnn.tap.k2`)
/// and iterate in lexicographic order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamTree<T: Scalar = f32> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamTree<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor<T>) -> Option<Tensor<T>> {
        self.entries.insert(path.into(), value)
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<T>> {
        self.entries.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(path)
    }

    pub fn remove(&mut self, path: &str) -> Option<Tensor<T>> {
        self.entries.remove(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.entries.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamTree<U> {
        ParamTree {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Entries whose path starts with `prefix`.
    pub fn subtree(&self, prefix: &str) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copies every entry of `other` in, replacing same-path entries.
    pub fn merge(&mut self, other: &Self) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Fails unless both trees have identical paths and shapes.
    pub fn check_same_structure(&self, other: &Self) -> Result<(), DiffError> {
        if self.entries.len() != other.entries.len() {
            return Err(DiffError::Structure(format!(
                "{} entries vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((ka, va), (kb, vb)) in self.entries.iter().zip(&other.entries) {
            if ka != kb || va.shape() != vb.shape() {
                return Err(DiffError::Structure(format!(
                    "{} {:?} vs {} {:?}",
                    ka,
                    va.shape(),
                    kb,
                    vb.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn global_norm(&self) -> f64 {
        self.entries.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        let s = T::from_f64_lossy(s);
        for v in self.entries.values_mut() {
            v.scale_in_place(s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    /// Writes the binary checkpoint: magic, version, entry count, then per entry
    /// the UTF-8 path, rank, dims, and little-endian `f32` payload.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), DiffError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (path, t) in &self.entries {
            let bytes = path.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, DiffError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(DiffError::Format("bad checkpoint magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(DiffError::Format(format!("unsupported checkpoint version {}", version)));
        }
        let count = read_u32(&mut r)?;
        let mut tree = Self::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut path = vec![0u8; len];
            r.read_exact(&mut path)?;
            let path = String::from_utf8(path).map_err(|e| DiffError::Format(e.to_string()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            if tree.insert(path.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(DiffError::Format(format!("duplicate path {}", path)));
            }
        }
        Ok(tree)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), DiffError> {
        let f = std::fs::File::create(path)?;
        self.write_checkpoint(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, DiffError> {
        let f = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(f))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, DiffError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
