//! Reverse-accumulation tape.
//!
//! Nodes are vectors; weights stay in the [`ParamStore`] and are referenced
//! by id, so recording a matrix-vector product never copies the matrix.
//! Backward walks the op list in exact reverse order of execution.

use super::{
    additive_scores, axpy, dot, gru_cell_forward, log_softmax, matvec, matvec_t_acc, maxout_pairs, outer_acc,
    shape_err, sigmoid, softmax, weighted_sum, GruWeights, ParamGrads, ParamId, ParamStore, Real, TensorError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter ids of one GRU cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruParams {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Embed {
        table: ParamId,
        row: usize,
    },
    MatVec {
        w: ParamId,
        x: NodeId,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Concat(Vec<NodeId>),
    Dropout {
        x: NodeId,
        mask: Vec<Real>,
    },
    Gru {
        x: NodeId,
        h: NodeId,
        w: GruParams,
        z: Vec<Real>,
        r: Vec<Real>,
        h_tilde: Vec<Real>,
        xh: Vec<Real>,
        xrh: Vec<Real>,
    },
    AdditiveScores {
        query: NodeId,
        keys: Vec<NodeId>,
        v: ParamId,
        acts: Vec<Vec<Real>>,
    },
    Softmax(NodeId),
    LogSoftmax(NodeId),
    WeightedSum {
        weights: NodeId,
        values: Vec<NodeId>,
    },
    Maxout {
        x: NodeId,
        arg: Vec<usize>,
    },
    Pick {
        x: NodeId,
        index: usize,
    },
    Sum(Vec<NodeId>),
    Scale {
        x: NodeId,
        factor: Real,
    },
}

/// Forward record over a borrowed parameter store.
pub struct Tape<'p> {
    params: &'p ParamStore,
    values: Vec<Vec<Real>>,
    ops: Vec<Op>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct NodeGrads {
    grads: Vec<Vec<Real>>,
    lens: Vec<usize>,
}

impl NodeGrads {
    /// Gradient of the root with respect to `node`; zeros if the root does
    /// not depend on it.
    pub fn get(&self, node: NodeId) -> Vec<Real> {
        let g = &self.grads[node.0];
        if g.is_empty() {
            vec![0.0; self.lens[node.0]]
        } else {
            g.clone()
        }
    }
}

fn acc_into(grads: &mut [Vec<Real>], node: NodeId, len: usize) -> &mut Vec<Real> {
    let g = &mut grads[node.0];
    if g.is_empty() {
        g.resize(len, 0.0);
    }
    g
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, node: NodeId) -> &[Real] {
        &self.values[node.0]
    }

    fn push(&mut self, value: Vec<Real>, op: Op) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        NodeId(self.ops.len() - 1)
    }

    fn same_len(&self, a: NodeId, b: NodeId, what: &str) -> Result<(), TensorError> {
        let (la, lb) = (self.values[a.0].len(), self.values[b.0].len());
        if la != lb {
            return Err(shape_err(what, la, lb));
        }
        Ok(())
    }

    /// Constant input. Its gradient is still reported by backward.
    pub fn leaf(&mut self, value: Vec<Real>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Whole parameter array as a flat vector (used for bias vectors).
    pub fn param(&mut self, id: ParamId) -> NodeId {
        let v = self.params.get(id).data().to_vec();
        self.push(v, Op::Param(id))
    }

    /// Row `row` of an embedding table.
    pub fn embed(&mut self, table: ParamId, row: usize) -> Result<NodeId, TensorError> {
        let m = self.params.get(table);
        if row >= m.rows() {
            return Err(TensorError::Index {
                what: self.params.name(table).to_string(),
                index: row,
                len: m.rows(),
            });
        }
        let v = m.row(row).to_vec();
        Ok(self.push(v, Op::Embed { table, row }))
    }

    pub fn matvec(&mut self, w: ParamId, x: NodeId) -> Result<NodeId, TensorError> {
        let m = self.params.get(w);
        let v = matvec(m, &self.values[x.0]).map_err(|_| {
            shape_err(
                self.params.name(w).to_string(),
                format!("input of length {}", m.cols()),
                self.values[x.0].len(),
            )
        })?;
        Ok(self.push(v, Op::MatVec { w, x }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_len(a, b, "add")?;
        let v = self.values[a.0].iter().zip(&self.values[b.0]).map(|(x, y)| x + y).collect();
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_len(a, b, "mul")?;
        let v = self.values[a.0].iter().zip(&self.values[b.0]).map(|(x, y)| x * y).collect();
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x.0].iter().map(|v| sigmoid(*v)).collect();
        self.push(v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x.0].iter().map(|v| v.tanh()).collect();
        self.push(v, Op::Tanh(x))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut v = Vec::with_capacity(parts.iter().map(|p| self.values[p.0].len()).sum());
        for p in parts {
            v.extend_from_slice(&self.values[p.0]);
        }
        self.push(v, Op::Concat(parts.to_vec()))
    }

    /// Element-wise multiply by a precomputed dropout mask.
    pub fn dropout(&mut self, x: NodeId, mask: Vec<Real>) -> Result<NodeId, TensorError> {
        if mask.len() != self.values[x.0].len() {
            return Err(shape_err("dropout mask", self.values[x.0].len(), mask.len()));
        }
        let v = self.values[x.0].iter().zip(&mask).map(|(a, m)| a * m).collect();
        Ok(self.push(v, Op::Dropout { x, mask }))
    }

    /// One GRU step (see [`super::gru_cell_forward`]); caches the gate
    /// activations for backward.
    pub fn gru(&mut self, x: NodeId, h: NodeId, w: GruParams) -> Result<NodeId, TensorError> {
        let weights = GruWeights {
            w_z: self.params.get(w.w_z),
            w_r: self.params.get(w.w_r),
            w_h: self.params.get(w.w_h),
        };
        let step = gru_cell_forward(&self.values[x.0], &self.values[h.0], weights).map_err(|e| match e {
            TensorError::Shape { what, expected, got } => {
                let name = match what.as_str() {
                    "gru weight W_z" => self.params.name(w.w_z),
                    "gru weight W_r" => self.params.name(w.w_r),
                    _ => self.params.name(w.w_h),
                };
                TensorError::Shape {
                    what: format!("{what} ({name})"),
                    expected,
                    got,
                }
            }
            other => other,
        })?;
        Ok(self.push(
            step.h,
            Op::Gru {
                x,
                h,
                w,
                z: step.z,
                r: step.r,
                h_tilde: step.h_tilde,
                xh: step.xh,
                xrh: step.xrh,
            },
        ))
    }

    /// Energies `e_i = vᵀ tanh(query + key_i)`, one per key.
    pub fn additive_scores(&mut self, query: NodeId, keys: &[NodeId], v: ParamId) -> Result<NodeId, TensorError> {
        let key_vals: Vec<&[Real]> = keys.iter().map(|k| self.values[k.0].as_slice()).collect();
        let (scores, acts) = additive_scores(&self.values[query.0], &key_vals, self.params.get(v).data())?;
        Ok(self.push(
            scores,
            Op::AdditiveScores {
                query,
                keys: keys.to_vec(),
                v,
                acts,
            },
        ))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let v = softmax(&self.values[x.0])?;
        Ok(self.push(v, Op::Softmax(x)))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let v = log_softmax(&self.values[x.0])?;
        Ok(self.push(v, Op::LogSoftmax(x)))
    }

    pub fn weighted_sum(&mut self, weights: NodeId, values: &[NodeId]) -> Result<NodeId, TensorError> {
        let vals: Vec<&[Real]> = values.iter().map(|k| self.values[k.0].as_slice()).collect();
        let v = weighted_sum(&self.values[weights.0], &vals)?;
        Ok(self.push(
            v,
            Op::WeightedSum {
                weights,
                values: values.to_vec(),
            },
        ))
    }

    pub fn maxout_pairs(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (v, arg) = maxout_pairs(&self.values[x.0])?;
        Ok(self.push(v, Op::Maxout { x, arg }))
    }

    /// Scalar node holding `x[index]`.
    pub fn pick(&mut self, x: NodeId, index: usize) -> Result<NodeId, TensorError> {
        let len = self.values[x.0].len();
        let v = *self.values[x.0].get(index).ok_or(TensorError::Index {
            what: "pick".into(),
            index,
            len,
        })?;
        Ok(self.push(vec![v], Op::Pick { x, index }))
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let mut total = 0.0;
        for p in parts {
            let v = &self.values[p.0];
            if v.len() != 1 {
                return Err(shape_err("sum of scalars", 1, v.len()));
            }
            total += v[0];
        }
        Ok(self.push(vec![total], Op::Sum(parts.to_vec())))
    }

    pub fn scale(&mut self, x: NodeId, factor: Real) -> NodeId {
        let v = self.values[x.0].iter().map(|a| a * factor).collect();
        self.push(v, Op::Scale { x, factor })
    }

    /// Backpropagates from scalar `root` with seed 1.
    pub fn backward(&self, root: NodeId, grads: &mut ParamGrads) -> Result<NodeGrads, TensorError> {
        self.backward_with_seed(root, 1.0, grads)
    }

    /// Backpropagates `seed · ∂root/∂·`, accumulating parameter gradients
    /// into `grads`.
    pub fn backward_with_seed(
        &self,
        root: NodeId,
        seed: Real,
        grads: &mut ParamGrads,
    ) -> Result<NodeGrads, TensorError> {
        if self.values[root.0].len() != 1 {
            return Err(shape_err("backward root", "scalar", self.values[root.0].len()));
        }
        if grads.len() != self.params.len() {
            return Err(shape_err("parameter gradients", self.params.len(), grads.len()));
        }
        let lens: Vec<usize> = self.values.iter().map(Vec::len).collect();
        let mut g: Vec<Vec<Real>> = vec![Vec::new(); self.values.len()];
        g[root.0] = vec![seed];

        for i in (0..=root.0).rev() {
            if g[i].is_empty() {
                continue;
            }
            let gi = std::mem::take(&mut g[i]);
            self.backward_op(i, &gi, &mut g, &lens, grads);
            g[i] = gi;
        }
        Ok(NodeGrads { grads: g, lens })
    }

    fn backward_op(&self, i: usize, gi: &[Real], g: &mut [Vec<Real>], lens: &[usize], pg: &mut ParamGrads) {
        let out = &self.values[i];
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Param(id) => {
                for (d, s) in pg.get_mut(*id).data_mut().iter_mut().zip(gi) {
                    *d += s;
                }
            }
            Op::Embed { table, row } => {
                axpy(1.0, gi, pg.get_mut(*table).row_mut(*row));
            }
            Op::MatVec { w, x } => {
                outer_acc(pg.get_mut(*w), gi, &self.values[x.0]);
                let dx = acc_into(g, *x, lens[x.0]);
                matvec_t_acc(self.params.get(*w), gi, dx);
            }
            Op::Add(a, b) => {
                axpy(1.0, gi, acc_into(g, *a, lens[a.0]));
                axpy(1.0, gi, acc_into(g, *b, lens[b.0]));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.values[a.0], &self.values[b.0]);
                {
                    let da = acc_into(g, *a, lens[a.0]);
                    for k in 0..gi.len() {
                        da[k] += gi[k] * vb[k];
                    }
                }
                let db = acc_into(g, *b, lens[b.0]);
                for k in 0..gi.len() {
                    db[k] += gi[k] * va[k];
                }
            }
            Op::Sigmoid(x) => {
                let dx = acc_into(g, *x, lens[x.0]);
                for k in 0..gi.len() {
                    dx[k] += gi[k] * out[k] * (1.0 - out[k]);
                }
            }
            Op::Tanh(x) => {
                let dx = acc_into(g, *x, lens[x.0]);
                for k in 0..gi.len() {
                    dx[k] += gi[k] * (1.0 - out[k] * out[k]);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = lens[p.0];
                    axpy(1.0, &gi[off..off + n], acc_into(g, *p, n));
                    off += n;
                }
            }
            Op::Dropout { x, mask } => {
                let dx = acc_into(g, *x, lens[x.0]);
                for k in 0..gi.len() {
                    dx[k] += gi[k] * mask[k];
                }
            }
            Op::Gru {
                x,
                h,
                w,
                z,
                r,
                h_tilde,
                xh,
                xrh,
            } => {
                let hp = &self.values[h.0];
                let nx = lens[x.0];
                let hidden = hp.len();
                let mut dhp = vec![0.0; hidden];
                let mut da_z = vec![0.0; hidden];
                let mut da_h = vec![0.0; hidden];
                for k in 0..hidden {
                    dhp[k] = gi[k] * (1.0 - z[k]);
                    let dz = gi[k] * (h_tilde[k] - hp[k]);
                    da_z[k] = dz * z[k] * (1.0 - z[k]);
                    da_h[k] = gi[k] * z[k] * (1.0 - h_tilde[k] * h_tilde[k]);
                }
                outer_acc(pg.get_mut(w.w_h), &da_h, xrh);
                let mut dxrh = vec![0.0; nx + hidden];
                matvec_t_acc(self.params.get(w.w_h), &da_h, &mut dxrh);
                let mut da_r = vec![0.0; hidden];
                for k in 0..hidden {
                    let d_rh = dxrh[nx + k];
                    da_r[k] = d_rh * hp[k] * r[k] * (1.0 - r[k]);
                    dhp[k] += d_rh * r[k];
                }
                outer_acc(pg.get_mut(w.w_z), &da_z, xh);
                outer_acc(pg.get_mut(w.w_r), &da_r, xh);
                let mut dxh = vec![0.0; nx + hidden];
                matvec_t_acc(self.params.get(w.w_z), &da_z, &mut dxh);
                matvec_t_acc(self.params.get(w.w_r), &da_r, &mut dxh);
                {
                    let dx = acc_into(g, *x, nx);
                    for k in 0..nx {
                        dx[k] += dxrh[k] + dxh[k];
                    }
                }
                let dh = acc_into(g, *h, hidden);
                for k in 0..hidden {
                    dh[k] += dhp[k] + dxh[nx + k];
                }
            }
            Op::AdditiveScores { query, keys, v, acts } => {
                let va = self.params.get(*v).data();
                let dim = va.len();
                let mut dv = vec![0.0; dim];
                let mut dq = vec![0.0; dim];
                let mut dpre = vec![0.0; dim];
                for (idx, (key, u)) in keys.iter().zip(acts).enumerate() {
                    let de = gi[idx];
                    if de == 0.0 {
                        continue;
                    }
                    axpy(de, u, &mut dv);
                    for k in 0..dim {
                        dpre[k] = de * va[k] * (1.0 - u[k] * u[k]);
                        dq[k] += dpre[k];
                    }
                    axpy(1.0, &dpre, acc_into(g, *key, dim));
                }
                axpy(1.0, &dq, acc_into(g, *query, dim));
                axpy(1.0, &dv, pg.get_mut(*v).data_mut());
            }
            Op::Softmax(x) => {
                let s = dot(gi, out);
                let dx = acc_into(g, *x, lens[x.0]);
                for k in 0..gi.len() {
                    dx[k] += out[k] * (gi[k] - s);
                }
            }
            Op::LogSoftmax(x) => {
                let total: Real = gi.iter().sum();
                let dx = acc_into(g, *x, lens[x.0]);
                for k in 0..gi.len() {
                    dx[k] += gi[k] - out[k].exp() * total;
                }
            }
            Op::WeightedSum { weights, values } => {
                let alphas = &self.values[weights.0];
                let mut dw = vec![0.0; alphas.len()];
                for (idx, v) in values.iter().enumerate() {
                    dw[idx] = dot(gi, &self.values[v.0]);
                    axpy(alphas[idx], gi, acc_into(g, *v, lens[v.0]));
                }
                axpy(1.0, &dw, acc_into(g, *weights, alphas.len()));
            }
            Op::Maxout { x, arg } => {
                let dx = acc_into(g, *x, lens[x.0]);
                for (j, a) in arg.iter().enumerate() {
                    dx[*a] += gi[j];
                }
            }
            Op::Pick { x, index } => {
                acc_into(g, *x, lens[x.0])[*index] += gi[0];
            }
            Op::Sum(parts) => {
                for p in parts {
                    acc_into(g, *p, 1)[0] += gi[0];
                }
            }
            Op::Scale { x, factor } => {
                axpy(*factor, gi, acc_into(g, *x, lens[x.0]));
            }
        }
    }
}
