//! Dense numeric kernel.
//!
//! Pure forward kernels live here; [`Tape`] records them for reverse
//! accumulation. Every forward computation in the model goes through these
//! functions, so a hand-assembled forward pass built from the same kernels
//! reproduces the model bit for bit.

mod gradcheck;
mod params;
mod tape;

use rand::Rng;
use thiserror::Error;

pub use gradcheck::{central_difference, gradient_check, relative_error, GradCheckReport};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tape::{GruParams, NodeGrads, NodeId, Tape};

/// Build-wide scalar type.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
/// Build-wide scalar type.
#[cfg(feature = "f32")]
pub type Real = f32;

/// Name of [`Real`] as written into checkpoint manifests.
#[cfg(not(feature = "f32"))]
pub const DTYPE: &str = "f64";
#[cfg(feature = "f32")]
pub const DTYPE: &str = "f32";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: String,
        expected: String,
        got: String,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("index {index} out of range for {what} with {len} entries")]
    Index {
        what: String,
        index: usize,
        len: usize,
    },
}

pub(crate) fn shape_err(what: impl Into<String>, expected: impl ToString, got: impl ToString) -> TensorError {
    TensorError::Shape {
        what: what.into(),
        expected: expected.to_string(),
        got: got.to_string(),
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<Real>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Real>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(shape_err("Matrix::from_vec", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<Real>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(shape_err("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[Real] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [Real] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> Real {
        self.data[r * self.cols + c]
    }

    pub fn fill(&mut self, v: Real) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub fn dot(a: &[Real], b: &[Real]) -> Real {
    debug_assert_eq!(a.len(), b.len());
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    let mut acc = [0.0 as Real; 4];
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `y += a * x`
#[inline]
pub fn axpy(a: Real, x: &[Real], y: &mut [Real]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn matvec(w: &Matrix, x: &[Real]) -> Result<Vec<Real>, TensorError> {
    if w.cols != x.len() {
        return Err(shape_err("matvec", format!("input of length {}", w.cols), x.len()));
    }
    Ok((0..w.rows).map(|r| dot(w.row(r), x)).collect())
}

/// `out += Wᵀ g`
pub(crate) fn matvec_t_acc(w: &Matrix, g: &[Real], out: &mut [Real]) {
    for (r, gr) in g.iter().enumerate() {
        if *gr != 0.0 {
            axpy(*gr, w.row(r), out);
        }
    }
}

/// `W += g xᵀ`
pub(crate) fn outer_acc(w: &mut Matrix, g: &[Real], x: &[Real]) {
    for (r, gr) in g.iter().enumerate() {
        if *gr != 0.0 {
            axpy(*gr, x, w.row_mut(r));
        }
    }
}

#[inline]
pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(v: &[Real]) -> Result<Vec<Real>, TensorError> {
    if v.is_empty() {
        return Err(TensorError::Empty("softmax"));
    }
    let max = v.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let mut out: Vec<Real> = v.iter().map(|x| (x - max).exp()).collect();
    let z: Real = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= z);
    Ok(out)
}

/// Softmax restricted to positions where `mask` is true; masked positions get
/// weight exactly 0 (their energies are treated as −∞).
pub fn masked_softmax(v: &[Real], mask: &[bool]) -> Result<Vec<Real>, TensorError> {
    if v.len() != mask.len() {
        return Err(shape_err("masked_softmax mask", v.len(), mask.len()));
    }
    if !mask.iter().any(|m| *m) {
        return Err(TensorError::Empty("masked_softmax"));
    }
    let energies: Vec<Real> = v
        .iter()
        .zip(mask)
        .map(|(x, m)| if *m { *x } else { Real::NEG_INFINITY })
        .collect();
    softmax(&energies)
}

pub fn log_softmax(v: &[Real]) -> Result<Vec<Real>, TensorError> {
    if v.is_empty() {
        return Err(TensorError::Empty("log_softmax"));
    }
    let max = v.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<Real>().ln();
    Ok(v.iter().map(|x| x - lse).collect())
}

/// Pairwise max: output `j` is `max(r[2j], r[2j+1])`. Also returns the index
/// of the winner inside each pair (first element wins ties).
pub fn maxout_pairs(r: &[Real]) -> Result<(Vec<Real>, Vec<usize>), TensorError> {
    if !r.len().is_multiple_of(2) {
        return Err(shape_err("maxout_pairs", "even length", r.len()));
    }
    let mut out = Vec::with_capacity(r.len() / 2);
    let mut arg = Vec::with_capacity(r.len() / 2);
    for (j, pair) in r.chunks_exact(2).enumerate() {
        if pair[1] > pair[0] {
            out.push(pair[1]);
            arg.push(2 * j + 1);
        } else {
            out.push(pair[0]);
            arg.push(2 * j);
        }
    }
    Ok((out, arg))
}

/// Attention energies `e_i = vᵀ tanh(q + k_i)`. Returns the energies and the
/// per-key tanh activations.
pub fn additive_scores(
    query: &[Real],
    keys: &[&[Real]],
    v: &[Real],
) -> Result<(Vec<Real>, Vec<Vec<Real>>), TensorError> {
    if keys.is_empty() {
        return Err(TensorError::Empty("additive_scores"));
    }
    if v.len() != query.len() {
        return Err(shape_err("additive_scores v_a", query.len(), v.len()));
    }
    let mut scores = Vec::with_capacity(keys.len());
    let mut acts = Vec::with_capacity(keys.len());
    for k in keys {
        if k.len() != query.len() {
            return Err(shape_err("additive_scores key", query.len(), k.len()));
        }
        let u: Vec<Real> = query.iter().zip(k.iter()).map(|(q, k)| (q + k).tanh()).collect();
        scores.push(dot(v, &u));
        acts.push(u);
    }
    Ok((scores, acts))
}

/// `Σ_i w_i · values_i`, accumulated in index order.
pub fn weighted_sum(weights: &[Real], values: &[&[Real]]) -> Result<Vec<Real>, TensorError> {
    if weights.len() != values.len() {
        return Err(shape_err("weighted_sum", values.len(), weights.len()));
    }
    let dim = values.first().map_or(0, |v| v.len());
    let mut out = vec![0.0; dim];
    for (w, v) in weights.iter().zip(values) {
        if v.len() != dim {
            return Err(shape_err("weighted_sum value", dim, v.len()));
        }
        axpy(*w, v, &mut out);
    }
    Ok(out)
}

/// Borrowed GRU weights, each `hidden × (input + hidden)`.
#[derive(Debug, Clone, Copy)]
pub struct GruWeights<'a> {
    pub w_z: &'a Matrix,
    pub w_r: &'a Matrix,
    pub w_h: &'a Matrix,
}

/// Output of one GRU step plus the activations backward needs.
#[derive(Debug, Clone, PartialEq)]
pub struct GruStep {
    pub h: Vec<Real>,
    pub z: Vec<Real>,
    pub r: Vec<Real>,
    pub h_tilde: Vec<Real>,
    /// `[x; h_prev]`
    pub xh: Vec<Real>,
    /// `[x; r ⊙ h_prev]`
    pub xrh: Vec<Real>,
}

/// One GRU step, weights applied to the concatenation `[x; h_prev]`:
///
/// ```text
/// z  = σ(W_z [x; h])          r = σ(W_r [x; h])
/// h~ = tanh(W_h [x; r ⊙ h])   h' = (1 − z) ⊙ h + z ⊙ h~
/// ```
pub fn gru_cell_forward(x: &[Real], h_prev: &[Real], w: GruWeights<'_>) -> Result<GruStep, TensorError> {
    let hidden = h_prev.len();
    let want = (hidden, x.len() + hidden);
    for (name, m) in [("W_z", w.w_z), ("W_r", w.w_r), ("W_h", w.w_h)] {
        if m.shape() != want {
            return Err(shape_err(
                format!("gru weight {name}"),
                format!("{}x{}", want.0, want.1),
                format!("{}x{}", m.rows, m.cols),
            ));
        }
    }
    let mut xh = Vec::with_capacity(want.1);
    xh.extend_from_slice(x);
    xh.extend_from_slice(h_prev);
    let z: Vec<Real> = (0..hidden).map(|i| sigmoid(dot(w.w_z.row(i), &xh))).collect();
    let r: Vec<Real> = (0..hidden).map(|i| sigmoid(dot(w.w_r.row(i), &xh))).collect();
    let mut xrh = Vec::with_capacity(want.1);
    xrh.extend_from_slice(x);
    xrh.extend(r.iter().zip(h_prev).map(|(r, h)| r * h));
    let h_tilde: Vec<Real> = (0..hidden).map(|i| dot(w.w_h.row(i), &xrh).tanh()).collect();
    let h = (0..hidden)
        .map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * h_tilde[i])
        .collect();
    Ok(GruStep {
        h,
        z,
        r,
        h_tilde,
        xh,
        xrh,
    })
}

/// Inverted-dropout mask: each unit is kept with probability `1 − p_drop`
/// and scaled by `1 / (1 − p_drop)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, p_drop: Real, rng: &mut R) -> Vec<Real> {
    if p_drop <= 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 - p_drop;
    (0..len)
        .map(|_| {
            let u: Real = rng.random();
            if u < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect()
}

/// Test tolerance: `t` in 64-bit builds, no tighter than 1e-4 in 32-bit ones.
#[cfg(test)]
pub(crate) fn tol(t: f64) -> Real {
    if cfg!(feature = "f32") {
        t.max(1e-4) as Real
    } else {
        t as Real
    }
}
