//! Named parameter tensors, their graph bindings, and the `ELP1` container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ELP1"  u32 count
//! repeated count times:
//!     u32 name_len  name bytes (UTF-8)  u32 rank  u64 dims[rank]  f64 payload[prod(dims)]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{GraphError, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ELP1";

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered collection of named tensors. Insertion order is preserved and
/// defines the flattening order used by optimizers and variance estimates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    entries: IndexMap<String, Parameter>,
}

/// Gradient per trainable parameter, keyed by name, in parameter order.
pub type ParamGrads = IndexMap<String, Tensor>;

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(GraphError::DuplicateParameter(name));
        }
        self.entries.insert(name, Parameter { tensor, trainable });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| GraphError::UnknownParameter(name.to_string()))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| GraphError::UnknownParameter(name.to_string()))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.entries.values_mut() {
            p.trainable = trainable;
        }
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// All values concatenated in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_elements());
        for p in self.entries.values() {
            out.extend_from_slice(p.tensor.data());
        }
        out
    }

    /// Names, shapes, flags and every value bit agree.
    pub fn bit_eq(&self, other: &ParameterSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.trainable == b.trainable && a.tensor.bit_eq(&b.tensor))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, p) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let shape = p.tensor.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in p.tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Decode a container; every parameter gets the given `trainable` flag.
    pub fn read_from<R: Read>(mut r: R, trainable: bool) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(GraphError::Format(format!("bad magic {magic:?}")));
        }
        let count = read_u32(&mut r)?;
        let mut set = ParameterSet::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| GraphError::Format(e.to_string()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            set.insert(name, Tensor::new(&shape, data)?, trainable)?;
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, trainable: bool) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?), trainable)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Graph leaves for every tensor of a [`ParameterSet`], in parameter order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Graph {
    /// Trainable parameters become gradient-carrying leaves; frozen ones are constants.
    pub fn bind(&mut self, params: &ParameterSet) -> Bound {
        let vars = params
            .entries
            .values()
            .map(|p| self.leaf(p.tensor.clone(), p.trainable))
            .collect();
        Bound { vars }
    }

    /// Bind every parameter as a constant regardless of its flag.
    pub fn bind_frozen(&mut self, params: &ParameterSet) -> Bound {
        let vars = params
            .entries
            .values()
            .map(|p| self.constant(p.tensor.clone()))
            .collect();
        Bound { vars }
    }
}

impl Gradients {
    /// Collect gradients for the trainable parameters of `params` bound as
    /// `bound`. Frozen parameters have no entry; trainable parameters that
    /// did not influence the root get a zero tensor.
    pub fn param_grads(&self, bound: &Bound, params: &ParameterSet) -> ParamGrads {
        let mut out = ParamGrads::new();
        for ((name, p), &v) in params.entries.iter().zip(&bound.vars) {
            if !p.trainable {
                continue;
            }
            let g = self
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.tensor.shape()));
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Concatenate gradients in map order.
pub fn flatten_grads(grads: &ParamGrads) -> Vec<f64> {
    let mut out = Vec::new();
    for g in grads.values() {
        out.extend_from_slice(g.data());
    }
    out
}
