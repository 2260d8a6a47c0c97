//! Named parameter tensors and the checkpoint container.
//!
//! Container layout (all integers little-endian `u32`):
//!
//! ```text
//! "SLCK" | version | meta_len | meta (UTF-8 "key=value" lines)
//! count | per tensor: name_len | name | ndim | dims… | f32 payload
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::SlotError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ModelParams<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Appends a tensor; replacing an existing name keeps its position.
    pub fn insert(&mut self, name: &str, t: Tensor<T>) {
        if let Some(&i) = self.index.get(name) {
            self.tensors[i] = t;
            return;
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Concatenated values, mostly for norms and checksums.
    pub fn flat(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}

/// Checkpoint payload: metadata plus tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: BTreeMap<String, String>,
    pub params: ModelParams<T>,
}

fn put_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    w.write_all(&(v as u32).to_le_bytes())
}

pub fn write_checkpoint<T: Scalar>(path: &Path, meta: &BTreeMap<String, String>, params: &ModelParams<T>) -> Result<(), SlotError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let meta_text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    put_u32(&mut w, meta_text.len())?;
    w.write_all(meta_text.as_bytes())?;
    put_u32(&mut w, params.len())?;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        put_u32(&mut w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(&mut w, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut w, d)?;
        }
        for &v in t.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8], SlotError> {
        if self.pos + n > self.bytes.len() {
            return Err(SlotError::Checkpoint("truncated container".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, SlotError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self, n: usize) -> Result<String, SlotError> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| SlotError::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>, SlotError> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(SlotError::Checkpoint(format!("{}: not a checkpoint", path.display())));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(SlotError::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = r.u32()?;
    let meta_text = r.string(meta_len)?;
    let meta = meta_text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let count = r.u32()?;
    let mut params = ModelParams::new();
    for _ in 0..count {
        let nlen = r.u32()?;
        let name = r.string(nlen)?;
        let ndim = r.u32()?;
        let shape: Vec<usize> = (0..ndim).map(|_| r.u32()).collect::<Result<_, _>>()?;
        let len: usize = shape.iter().product();
        let data = r
            .take(len * 4)?
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        params.insert(&name, Tensor::from_vec(&shape, data).map_err(|e| SlotError::Checkpoint(e.to_string()))?);
    }
    if r.pos != bytes.len() {
        return Err(SlotError::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { meta, params })
}
