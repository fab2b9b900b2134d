//! Named parameters and the binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "CSDACKPT"
//! version  u32      1
//! count    u32
//! count x {
//!   name_len u32, name utf-8 bytes,
//!   ndim u32, dims u64 x ndim,
//!   values f64 x prod(dims)
//! }
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{AutodiffError, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CSDACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Insertion-ordered set of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(AutodiffError::Invalid {
                op: "ParamStore::insert",
                msg: format!("duplicate parameter name {name}"),
            });
        }
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if requires_grad {
                    tape.variable(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Overwrites gradient buffers from a reverse pass; unreached
    /// parameters get zeros.
    pub fn store_grads(&mut self, bound: &Bound, grads: &Gradients) {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            match grads.get(*v) {
                Some(g) => p.grad.data_mut().copy_from_slice(g.data()),
                None => p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0),
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path)
            .map_err(|e| AutodiffError::Io(format!("{}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path)
            .map_err(|e| AutodiffError::Io(format!("{}: {e}", path.display())))?;
        Self::read_from(&mut BufReader::new(file))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&2u32.to_le_bytes())?;
            w.write_all(&(p.value.rows() as u64).to_le_bytes())?;
            w.write_all(&(p.value.cols() as u64).to_le_bytes())?;
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(AutodiffError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(AutodiffError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let count = read_u32(r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| AutodiffError::Checkpoint("parameter name is not utf-8".into()))?;
            let ndim = read_u32(r)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(read_u64(r)? as usize);
            }
            let (rows, cols) = match dims.as_slice() {
                [] => (1, 1),
                [n] => (1, *n),
                [a, b] => (*a, *b),
                _ => {
                    return Err(AutodiffError::Checkpoint(format!(
                        "{name}: rank {ndim} not supported"
                    )))
                }
            };
            let mut data = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 8];
            for _ in 0..rows * cols {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            store.insert(name, Tensor::new(rows, cols, data)?)?;
        }
        Ok(store)
    }

    /// Copies values from `other` by name; every parameter must be present
    /// with the same shape.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other.by_name(&p.name).ok_or_else(|| {
                AutodiffError::Checkpoint(format!("missing parameter {}", p.name))
            })?;
            if src.value.shape() != p.value.shape() {
                return Err(AutodiffError::Checkpoint(format!(
                    "{}: shape {:?} != {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Tape handles for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps handles recorded elsewhere, e.g. by a gradient checker; they
    /// must follow store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(1, 1)).unwrap();
        assert!(s.insert("a", Tensor::zeros(2, 2)).is_err());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(2, 2, vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap())
            .unwrap();
        s.insert("b", Tensor::row_vector(vec![std::f64::consts::PI])).unwrap();
        let mut bytes = Vec::new();
        s.write_to(&mut bytes).unwrap();
        let back = ParamStore::read_from(&mut bytes.as_slice()).unwrap();
        let bits = |st: &ParamStore| -> Vec<u64> {
            st.iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&s), bits(&back));
        assert_eq!(back.by_name("w").unwrap().value.shape(), [2, 2]);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn bad_magic_rejected() {
        let bytes = b"NOTACKPT\x01\x00\x00\x00\x00\x00\x00\x00".to_vec();
        assert!(matches!(
            ParamStore::read_from(&mut bytes.as_slice()),
            Err(AutodiffError::Checkpoint(_))
        ));
    }
}
