use std::cell::RefCell;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable; counted by the profiler and updated by the optimiser.
    Learnable,
    /// Persistent state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// U(-bound, bound)
    Uniform(f64),
    Const(f64),
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub var: Var,
    pub kind: ParamKind,
    /// Whether weight decay applies (conv/linear weights only).
    pub decay: bool,
}

/// Ordered registry of every named array in a model.
///
/// Creation order is the RNG draw order, so two stores built by the same
/// constructor with the same seed hold bit-identical values.
pub struct ParamStore {
    entries: RefCell<Vec<ParamEntry>>,
    rng: RefCell<ChaCha8Rng>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            entries: RefCell::new(Vec::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Path<'_> {
        Path {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn entries(&self) -> Vec<ParamEntry> {
        self.entries.borrow().clone()
    }

    pub fn learnable(&self) -> Vec<ParamEntry> {
        self.entries
            .borrow()
            .iter()
            .filter(|e| e.kind == ParamKind::Learnable)
            .cloned()
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.entries
            .borrow()
            .iter()
            .find(|e| e.name == name)
            .map(|e| e.var.clone())
    }

    /// Overwrites a named array; shapes must agree.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::ConfigMismatch(format!("no parameter named {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::ConfigMismatch(format!(
                "shape of {name}: expected {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Total element count of learnable arrays.
    pub fn count_learnable(&self) -> usize {
        self.entries
            .borrow()
            .iter()
            .filter(|e| e.kind == ParamKind::Learnable)
            .map(|e| e.var.elem_count())
            .sum()
    }

    fn create(
        &self,
        name: String,
        shape: &[usize],
        init: Init,
        kind: ParamKind,
        decay: bool,
    ) -> Result<Var> {
        if self.entries.borrow().iter().any(|e| e.name == name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter name {name}")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Uniform(bound) => {
                let mut rng = self.rng.borrow_mut();
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
            Init::Const(v) => vec![v; n],
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.entries.borrow_mut().push(ParamEntry {
            name,
            var: var.clone(),
            kind,
            decay,
        });
        Ok(var)
    }
}

/// Hierarchical naming cursor into a [`ParamStore`].
#[derive(Clone)]
pub struct Path<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Path<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> Path<'a> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Path {
            store: self.store,
            prefix,
        }
    }

    pub fn name(&self) -> &str {
        &self.prefix
    }

    fn full(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn weight(&self, leaf: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.store
            .create(self.full(leaf), shape, init, ParamKind::Learnable, true)
    }

    pub fn bias(&self, leaf: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.store
            .create(self.full(leaf), shape, init, ParamKind::Learnable, false)
    }

    pub fn buffer(&self, leaf: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.store
            .create(self.full(leaf), shape, init, ParamKind::Buffer, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bits() {
        let make = || {
            let s = ParamStore::new(7, DType::F32);
            let p = s.root().pp("a");
            p.weight("w", &[3, 4], Init::Uniform(0.5)).unwrap();
            p.pp("b").weight("w", &[5], Init::Uniform(1.0)).unwrap();
            s.entries()
                .iter()
                .flat_map(|e| e.var.flatten_all().unwrap().to_vec1::<f32>().unwrap())
                .map(f32::to_bits)
                .collect::<Vec<_>>()
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn names_are_hierarchical_and_unique() {
        let s = ParamStore::new(0, DType::F64);
        let p = s.root().pp("net").pp("conv");
        p.weight("weight", &[1], Init::Const(1.0)).unwrap();
        assert!(s.get("net.conv.weight").is_some());
        assert!(p.weight("weight", &[1], Init::Const(1.0)).is_err());
        p.buffer("running_mean", &[2], Init::Const(0.0)).unwrap();
        assert_eq!(s.count_learnable(), 1);
    }
}
