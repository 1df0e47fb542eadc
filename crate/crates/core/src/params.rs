//! Named parameter tensors and their gradients.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub type Mat = Array2<f64>;

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Flat registry of trainable tensors. Every tensor is 2-D; vectors are `[1 × n]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Mat>,
    names: Vec<String>,
}

pub(crate) static EMPTY_STORE: ParamStore = ParamStore {
    tensors: Vec::new(),
    names: Vec::new(),
};

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.tensors.push(value);
        self.names.push(name.into());
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform(−1/√fan, 1/√fan) initialisation.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan.max(1) as f64).sqrt();
        let value = Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound));
        self.insert(name, value)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.tensors
            .iter()
            .zip(&self.names)
            .enumerate()
            .map(|(i, (t, n))| (ParamId(i), n.as_str(), t))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

/// Gradient of a scalar with respect to every parameter. Embedding tables get
/// row-sparse gradients so a single event never materialises the full table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    dense: Vec<Option<Mat>>,
    sparse: Vec<BTreeMap<usize, Array1<f64>>>,
}

impl ParamGrads {
    pub fn new(n_params: usize) -> Self {
        Self {
            dense: vec![None; n_params],
            sparse: vec![BTreeMap::new(); n_params],
        }
    }

    fn ensure(&mut self, id: ParamId) {
        if self.dense.len() <= id.0 {
            self.dense.resize(id.0 + 1, None);
            self.sparse.resize(id.0 + 1, BTreeMap::new());
        }
    }

    pub fn add_dense(&mut self, id: ParamId, g: &Mat) {
        self.ensure(id);
        match &mut self.dense[id.0] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn add_row(&mut self, id: ParamId, row: usize, g: ndarray::ArrayView1<f64>) {
        self.ensure(id);
        self.sparse[id.0]
            .entry(row)
            .and_modify(|acc| *acc += &g)
            .or_insert_with(|| g.to_owned());
    }

    pub fn dense(&self, id: ParamId) -> Option<&Mat> {
        self.dense.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn sparse_rows(&self, id: ParamId) -> Option<&BTreeMap<usize, Array1<f64>>> {
        self.sparse.get(id.0).filter(|m| !m.is_empty())
    }

    /// Accumulate another gradient into this one.
    pub fn merge(&mut self, other: &ParamGrads) {
        for (i, g) in other.dense.iter().enumerate() {
            if let Some(g) = g {
                self.add_dense(ParamId(i), g);
            }
        }
        for (i, rows) in other.sparse.iter().enumerate() {
            for (&r, g) in rows {
                self.add_row(ParamId(i), r, g.view());
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.dense.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
        for rows in &mut self.sparse {
            for g in rows.values_mut() {
                g.mapv_inplace(|v| v * factor);
            }
        }
    }

    /// Densify the gradient for one parameter of the given shape.
    pub fn to_dense(&self, id: ParamId, shape: (usize, usize)) -> Mat {
        let mut out = self.dense(id).cloned().unwrap_or_else(|| Mat::zeros(shape));
        if let Some(rows) = self.sparse.get(id.0) {
            for (&r, g) in rows {
                let mut row = out.row_mut(r);
                row += g;
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.dense.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
            && self
                .sparse
                .iter()
                .all(|rows| rows.values().all(|g| g.iter().all(|v| v.is_finite())))
    }

    /// Largest absolute entry over all gradients.
    pub fn max_abs(&self) -> f64 {
        let dense = self
            .dense
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        self.sparse
            .iter()
            .flat_map(|rows| rows.values())
            .flat_map(|g| g.iter())
            .fold(dense, |m, v| m.max(v.abs()))
    }
}
