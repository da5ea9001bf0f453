use super::{Matrix, Real, TensorError};

/// Handle to a registered trainable array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named registry of trainable arrays. Each array is registered once and
/// addressed by its [`ParamId`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    mats: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new array. Panics on a duplicate name, which is a
    /// programming error in model construction.
    pub fn register(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "parameter {name} registered twice"
        );
        self.names.push(name);
        self.mats.push(value);
        ParamId(self.mats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.mats[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.mats[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.mats.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.mats)
            .enumerate()
            .map(|(i, (n, m))| (ParamId(i), n.as_str(), m))
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.mats.iter().map(Matrix::len).sum()
    }

    /// Replaces the value of an existing array, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Matrix) -> Result<(), TensorError> {
        let cur = &mut self.mats[id.0];
        if cur.shape() != value.shape() {
            return Err(super::shape_err(
                self.names[id.0].clone(),
                format!("{}x{}", cur.rows(), cur.cols()),
                format!("{}x{}", value.rows(), value.cols()),
            ));
        }
        *cur = value;
        Ok(())
    }

    pub fn zeros_like(&self) -> ParamGrads {
        ParamGrads {
            mats: self.mats.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect(),
        }
    }
}

/// Gradient arrays mirroring a [`ParamStore`] entry for entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    mats: Vec<Matrix>,
}

impl ParamGrads {
    /// Wraps arrays that mirror `store` entry for entry.
    pub fn from_matrices(store: &ParamStore, mats: Vec<Matrix>) -> Result<Self, TensorError> {
        if mats.len() != store.len() {
            return Err(super::shape_err(
                "gradient set",
                format!("{} arrays", store.len()),
                format!("{} arrays", mats.len()),
            ));
        }
        for (id, m) in store.ids().zip(&mats) {
            let p = store.get(id);
            if p.shape() != m.shape() {
                return Err(super::shape_err(
                    store.name(id).to_string(),
                    format!("{}x{}", p.rows(), p.cols()),
                    format!("{}x{}", m.rows(), m.cols()),
                ));
            }
        }
        Ok(Self { mats })
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.mats[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.mats[id.0]
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Matrix> {
        self.mats.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.mats.iter_mut()
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.mats.iter_mut().zip(&other.mats) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: Real) {
        for m in &mut self.mats {
            m.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mats.iter().all(Matrix::is_finite)
    }

    pub fn max_abs(&self) -> Real {
        self.mats
            .iter()
            .flat_map(|m| m.data().iter())
            .fold(0.0, |acc: Real, x| acc.max(x.abs()))
    }
}
