//! Named parameter tensors.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::RngStream;
#[allow(unused_imports)] // float math for no_std; inherent methods need std
use num_traits::Float;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Initialization rule for a freshly registered tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Normal with the given standard deviation.
    Normal(f64),
    /// Uniform in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
    Glorot,
    /// Identity plus Gaussian noise of the given standard deviation.
    IdentityPlusNoise(f64),
    /// Each row is an independent random unit vector.
    UnitRows,
}

/// Ordered collection of named `rows x cols` tensors.
///
/// Every tensor is initialized from its own RNG stream labelled by the tensor
/// name, so adding or removing tensors never changes the values of the
/// others.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    seed: u64,
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    data: Vec<Vec<f64>>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            names: Vec::new(),
            shapes: Vec::new(),
            data: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> ParamId {
        let mut rng = RngStream::new(self.seed, "init").derive(name);
        let n = rows * cols;
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Normal(sd) => (0..n).map(|_| sd * rng.standard_normal()).collect(),
            Init::Glorot => {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                (0..n).map(|_| rng.uniform(-a, a)).collect()
            }
            Init::IdentityPlusNoise(sd) => (0..n)
                .map(|i| {
                    let eye = if i / cols == i % cols { 1.0 } else { 0.0 };
                    eye + sd * rng.standard_normal()
                })
                .collect(),
            Init::UnitRows => {
                let mut out = Vec::with_capacity(n);
                for _ in 0..rows {
                    let row = rng.normal_vec(cols);
                    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    out.extend(row.into_iter().map(|x| x / norm));
                }
                out
            }
        };
        self.insert(name, rows, cols, data)
            .expect("registered tensor has consistent shape")
    }

    /// Adds a tensor with explicit contents.
    pub fn insert(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>) -> Result<ParamId> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(alloc::format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.names.len());
        self.names.push(name.to_string());
        self.shapes.push((rows, cols));
        self.data.push(data);
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> (usize, usize) {
        self.shapes[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&[f64]> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.data.iter().map(Vec::len).sum()
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.data
    }

    pub fn tensors_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.data
    }

    /// Rounds every value to the nearest `f32`, so that single-precision
    /// serialization is lossless.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.data {
            for x in t.iter_mut() {
                *x = f64::from(*x as f32);
            }
        }
    }

    /// Replaces the contents of every tensor present in `other` by name.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for id in other.ids() {
            let name = other.name(id);
            let mine = self
                .id(name)
                .ok_or_else(|| Error::InvalidArgument(alloc::format!("unknown parameter {name}")))?;
            if self.shape(mine) != other.shape(id) {
                return Err(Error::InvalidArgument(alloc::format!("shape mismatch for {name}")));
            }
            self.data[mine.0].copy_from_slice(other.get(id));
        }
        if other.len() != self.len() {
            return Err(Error::InvalidArgument("parameter set differs".to_string()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_keyed_by_name() {
        let mut a = ParamStore::new(9);
        a.register("x", 3, 4, Init::Glorot);
        let y_a = a.register("y", 2, 2, Init::Normal(1.0));
        let mut b = ParamStore::new(9);
        let y_b = b.register("y", 2, 2, Init::Normal(1.0));
        assert_eq!(a.get(y_a), b.get(y_b));
    }

    #[test]
    fn unit_rows_have_unit_norm() {
        let mut s = ParamStore::new(1);
        let id = s.register("u", 5, 7, Init::UnitRows);
        for r in s.get(id).chunks(7) {
            let n: f64 = r.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new(1);
        s.insert("a", 1, 1, vec![0.0]).unwrap();
        assert!(s.insert("a", 1, 1, vec![0.0]).is_err());
        assert!(s.insert("b", 2, 1, vec![0.0]).is_err());
    }
}
