use crate::Real;
use ndarray::ArrayD;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};

static NEXT_STORE: AtomicU32 = AtomicU32::new(1);

fn fresh_store_id() -> u32 {
    NEXT_STORE.fetch_add(1, Ordering::Relaxed)
}

/// Handle to one tensor inside a specific [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId {
    store: u32,
    index: u32,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

/// Named collection of trainable tensors.
///
/// Every store carries a process-unique id, so gradients of parameters that
/// belong to different networks never alias. Cloning a store copies the
/// values but mints a new id; handles taken from the original must be
/// re-resolved by name (or index) against the clone.
#[derive(Debug)]
pub struct ParamStore<T: Real> {
    id: u32,
    names: Vec<String>,
    values: Vec<ArrayD<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            id: fresh_store_id(),
            names: self.names.clone(),
            values: self.values.clone(),
            by_name: self.by_name.clone(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            id: fresh_store_id(),
            names: Vec::new(),
            values: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    /// Registers a tensor. Panics on a duplicate name: parameter names are
    /// produced by network constructors, so a clash is a programming error.
    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let index = self.values.len();
        self.by_name.insert(name.clone(), index);
        self.names.push(name);
        self.values.push(value);
        self.id_at(index)
    }

    pub fn id_at(&self, index: usize) -> ParamId {
        ParamId {
            store: self.id,
            index: index as u32,
        }
    }

    pub fn owns(&self, id: ParamId) -> bool {
        id.store == self.id
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        debug_assert!(self.owns(id), "parameter handle from another store");
        &self.values[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        debug_assert!(self.owns(id), "parameter handle from another store");
        &mut self.values[id.index()]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| self.id_at(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.index()]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(|i| self.id_at(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Copies values from `other`, which must hold exactly the same names and
    /// shapes (the usual teacher → student initialisation).
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> crate::Result<()> {
        if self.names != other.names {
            return Err(crate::GraphError::Invalid {
                op: "copy_from",
                msg: "parameter name sets differ".into(),
            });
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(crate::GraphError::ShapeMismatch {
                    op: "copy_from",
                    lhs: dst.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            dst.assign(src);
        }
        Ok(())
    }

    /// Converts every tensor to another element type, keeping names.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, value) in self.iter() {
            out.add(name, value.mapv(|v| U::from_f64_lossy(v.to_f64_lossy())));
        }
        out
    }
}

/// Weight initialisers.
pub mod init {
    use crate::Real;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    pub fn normal<T: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> ArrayD<T> {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        ArrayD::from_shape_simple_fn(IxDyn(shape), || T::from_f64_lossy(dist.sample(rng)))
    }

    pub fn zeros<T: Real>(shape: &[usize]) -> ArrayD<T> {
        ArrayD::zeros(IxDyn(shape))
    }

    pub fn constant<T: Real>(shape: &[usize], value: f64) -> ArrayD<T> {
        ArrayD::from_elem(IxDyn(shape), T::from_f64_lossy(value))
    }
}
