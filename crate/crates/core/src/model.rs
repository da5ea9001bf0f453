//! The selective-encoding network.
//!
//! A bidirectional GRU reads the source; a per-word sigmoid gate conditioned
//! on the sentence vector `s = [←h_1; →h_n]` rescales each encoder state; an
//! attention GRU decoder with a maxout readout produces the summary.
//!
//! Attention energies use the previous decoder state `s_{t-1}`, and the
//! decoder GRU consumes `[w_{t-1}; c_{t-1}]` as its input, with `c_0 = 0` and
//! `s_0 = tanh(W_d ←h_1 + b_d)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{dropout_mask, GruParams, Matrix, NodeId, ParamGrads, ParamId, ParamStore, Real, Tape, TensorError};
use crate::text::{Batch, TokenId, BOS};

/// Rows per gradient shard. Fixed so that the reduction order, and hence
/// the result, does not depend on the thread count.
const GRAD_SHARD_ROWS: usize = 4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("empty source sentence")]
    EmptySource,
    #[error("empty target sequence")]
    EmptyTarget,
    #[error("{side} token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { side: &'static str, id: TokenId, size: usize },
    #[error("non-finite loss in batch {batch}")]
    NonFiniteLoss { batch: usize },
    #[error("parameter {0} missing")]
    MissingParam(String),
    #[error("parameter {name} has shape {got}, expected {expected}")]
    ParamShape { name: String, expected: String, got: String },
    #[error("gate override has {got} vectors for {expected} source positions")]
    GateOverride { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub emb_dim: usize,
    /// Hidden size of each encoder direction.
    pub enc_hidden: usize,
    /// Decoder hidden size `d`; the readout has `2d` units.
    pub dec_hidden: usize,
    pub attn_dim: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub dropout_p: Real,
    /// `false` forces every gate to 1, giving the plain attention baseline.
    pub selective_gate: bool,
    pub dropout_embeddings: bool,
    pub dropout_readout: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            emb_dim: 300,
            enc_hidden: 512,
            dec_hidden: 512,
            attn_dim: 512,
            src_vocab: 0,
            tgt_vocab: 0,
            dropout_p: 0.5,
            selective_gate: true,
            dropout_embeddings: true,
            dropout_readout: true,
        }
    }
}

impl ModelConfig {
    /// Small configuration with the same structure, handy for tests.
    pub fn tiny(src_vocab: usize, tgt_vocab: usize, emb: usize, hidden: usize) -> Self {
        Self {
            emb_dim: emb,
            enc_hidden: hidden,
            dec_hidden: hidden,
            attn_dim: hidden,
            src_vocab,
            tgt_vocab,
            dropout_p: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("emb_dim", self.emb_dim),
            ("enc_hidden", self.enc_hidden),
            ("dec_hidden", self.dec_hidden),
            ("attn_dim", self.attn_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [("src_vocab", self.src_vocab), ("tgt_vocab", self.tgt_vocab)] {
            if v < 4 {
                return Err(ModelError::Config(format!("{name} must include the 4 special tokens (got {v})")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ModelError::Config(format!("dropout_p must be in [0, 1), got {}", self.dropout_p)));
        }
        Ok(())
    }

    /// `(name, rows, cols)` of every trainable array, in registration order.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let (e, h, d, a) = (self.emb_dim, self.enc_hidden, self.dec_hidden, self.attn_dim);
        let mut out: Vec<(String, usize, usize)> = vec![
            ("src_emb".into(), self.src_vocab, e),
            ("tgt_emb".into(), self.tgt_vocab, e),
        ];
        for dir in ["enc_fwd", "enc_bwd"] {
            for g in ["w_z", "w_r", "w_h"] {
                out.push((format!("{dir}.{g}"), h, e + h));
            }
        }
        out.extend([
            ("gate.w_s".into(), 2 * h, 2 * h),
            ("gate.u_s".into(), 2 * h, 2 * h),
            ("gate.b".into(), 2 * h, 1),
            ("dec_init.w_d".into(), d, h),
            ("dec_init.b".into(), d, 1),
        ]);
        for g in ["w_z", "w_r", "w_h"] {
            out.push((format!("dec.{g}"), d, e + 2 * h + d));
        }
        out.extend([
            ("attn.w_a".into(), a, d),
            ("attn.u_a".into(), a, 2 * h),
            ("attn.v_a".into(), 1, a),
            ("readout.w".into(), 2 * d, e),
            ("readout.u".into(), 2 * d, 2 * h),
            ("readout.v".into(), 2 * d, d),
            ("out.w_o".into(), self.tgt_vocab, d),
        ]);
        out
    }
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".b")
}

/// Handles to every trainable array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamIds {
    pub src_emb: ParamId,
    pub tgt_emb: ParamId,
    pub enc_fwd: GruParams,
    pub enc_bwd: GruParams,
    pub gate_w: ParamId,
    pub gate_u: ParamId,
    pub gate_b: ParamId,
    pub init_w: ParamId,
    pub init_b: ParamId,
    pub dec: GruParams,
    pub attn_w: ParamId,
    pub attn_u: ParamId,
    pub attn_v: ParamId,
    pub read_w: ParamId,
    pub read_u: ParamId,
    pub read_v: ParamId,
    pub out_w: ParamId,
}

impl ParamIds {
    fn resolve(store: &ParamStore) -> Result<Self, ModelError> {
        let id = |n: &str| store.find(n).ok_or_else(|| ModelError::MissingParam(n.to_string()));
        let gru = |p: &str| -> Result<GruParams, ModelError> {
            Ok(GruParams {
                w_z: id(&format!("{p}.w_z"))?,
                w_r: id(&format!("{p}.w_r"))?,
                w_h: id(&format!("{p}.w_h"))?,
            })
        };
        Ok(Self {
            src_emb: id("src_emb")?,
            tgt_emb: id("tgt_emb")?,
            enc_fwd: gru("enc_fwd")?,
            enc_bwd: gru("enc_bwd")?,
            gate_w: id("gate.w_s")?,
            gate_u: id("gate.u_s")?,
            gate_b: id("gate.b")?,
            init_w: id("dec_init.w_d")?,
            init_b: id("dec_init.b")?,
            dec: gru("dec")?,
            attn_w: id("attn.w_a")?,
            attn_u: id("attn.u_a")?,
            attn_v: id("attn.v_a")?,
            read_w: id("readout.w")?,
            read_u: id("readout.u")?,
            read_v: id("readout.v")?,
            out_w: id("out.w_o")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub store: ParamStore,
    pub ids: ParamIds,
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let mut store = ParamStore::new();
        for (name, r, c) in cfg.layout() {
            store.register(name, Matrix::zeros(r, c));
        }
        let ids = ParamIds::resolve(&store).expect("layout registers every parameter");
        Self { store, ids }
    }

    /// Zero-mean Gaussian weights with variance `2 / (fan_in + fan_out)`;
    /// biases zero.
    pub fn xavier<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(cfg);
        let ids: Vec<ParamId> = p.store.ids().collect();
        for id in ids {
            if is_bias(p.store.name(id)) {
                continue;
            }
            let m = p.store.get_mut(id);
            let std = (2.0 / (m.rows() + m.cols()) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for x in m.data_mut() {
                *x = normal.sample(rng) as Real;
            }
        }
        p
    }

    /// Wraps an existing store after checking it against `cfg`'s layout.
    pub fn from_store(cfg: &ModelConfig, store: ParamStore) -> Result<Self, ModelError> {
        let layout = cfg.layout();
        if layout.len() != store.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter arrays, found {}",
                layout.len(),
                store.len()
            )));
        }
        for (name, r, c) in &layout {
            let id = store.find(name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            let m = store.get(id);
            if m.shape() != (*r, *c) {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    expected: format!("{r}x{c}"),
                    got: format!("{}x{}", m.rows(), m.cols()),
                });
            }
        }
        let ids = ParamIds::resolve(&store)?;
        Ok(Self { store, ids })
    }
}

/// Dropout switch. Training mode owns the generator the masks come from.
pub enum Mode<'r> {
    Train(&'r mut ChaCha8Rng),
    Infer,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// How gate values are obtained while encoding.
#[derive(Debug, Clone, Copy)]
pub enum GateInput<'a> {
    /// Gates from the network (or all ones when the gate is disabled).
    Network,
    /// Externally supplied gate vectors, one per source position.
    Fixed(&'a [Vec<Real>]),
}

/// Node handles for one encoded source sentence.
#[derive(Debug, Clone)]
pub struct EncodedSentence {
    /// `h_i = [→h_i; ←h_i]`
    pub h: Vec<NodeId>,
    /// `←h_1`
    pub bwd_first: NodeId,
    /// `→h_n`
    pub fwd_last: NodeId,
    /// `s = [←h_1; →h_n]`
    pub sentence: NodeId,
    /// `sGate_i`; empty when the gate is disabled.
    pub gates: Vec<NodeId>,
    /// `h'_i`
    pub gated: Vec<NodeId>,
    /// Attention keys `U_a h'_i`.
    pub keys: Vec<NodeId>,
}

fn stack(tape: &Tape<'_>, nodes: &[NodeId]) -> Matrix {
    let rows: Vec<Vec<Real>> = nodes.iter().map(|n| tape.value(*n).to_vec()).collect();
    Matrix::from_rows(&rows).expect("encoder rows share a width")
}

impl EncodedSentence {
    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    pub fn h_matrix(&self, tape: &Tape<'_>) -> Matrix {
        stack(tape, &self.h)
    }

    pub fn gated_matrix(&self, tape: &Tape<'_>) -> Matrix {
        stack(tape, &self.gated)
    }

    pub fn gate_matrix(&self, tape: &Tape<'_>) -> Matrix {
        stack(tape, &self.gates)
    }

    pub fn sentence_vector(&self, tape: &Tape<'_>) -> Vec<Real> {
        tape.value(self.sentence).to_vec()
    }
}

/// Node handles for one decoder step.
#[derive(Debug, Clone, Copy)]
pub struct DecoderStep {
    /// `s_t`
    pub state: NodeId,
    /// `c_t`
    pub context: NodeId,
    /// `α_t` over the source positions.
    pub attention: NodeId,
    /// Log of the output distribution over the target vocabulary.
    pub log_probs: NodeId,
}

/// Dropout randomness for loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Dropout masks seeded from `seed` and the row index.
    Train { seed: u64 },
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seass {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Seass {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self, ModelError> {
        config.validate()?;
        let params = ModelParams::from_store(&config, params.store)?;
        Ok(Self { config, params })
    }

    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let params = ModelParams::xavier(&config, rng);
        Ok(Self { config, params })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let params = ModelParams::zeros(&config);
        Ok(Self { config, params })
    }

    pub fn store(&self) -> &ParamStore {
        &self.params.store
    }

    pub fn tape(&self) -> Tape<'_> {
        Tape::new(&self.params.store)
    }

    fn maybe_dropout(&self, tape: &mut Tape<'_>, x: NodeId, mode: &mut Mode<'_>, site: bool) -> Result<NodeId, ModelError> {
        match mode {
            Mode::Train(rng) if site && self.config.dropout_p > 0.0 => {
                let mask = dropout_mask(tape.value(x).len(), self.config.dropout_p, &mut **rng);
                Ok(tape.dropout(x, mask)?)
            }
            _ => Ok(x),
        }
    }

    fn check_ids(&self, ids: &[TokenId], side: &'static str, size: usize) -> Result<(), ModelError> {
        match ids.iter().find(|i| **i as usize >= size) {
            Some(id) => Err(ModelError::TokenOutOfRange { side, id: *id, size }),
            None => Ok(()),
        }
    }

    pub fn encode_sentence(&self, tape: &mut Tape<'_>, src: &[TokenId], mode: &mut Mode<'_>) -> Result<EncodedSentence, ModelError> {
        self.encode_with_gates(tape, src, mode, GateInput::Network)
    }

    pub fn encode_with_gates(
        &self,
        tape: &mut Tape<'_>,
        src: &[TokenId],
        mode: &mut Mode<'_>,
        gates: GateInput<'_>,
    ) -> Result<EncodedSentence, ModelError> {
        if src.is_empty() {
            return Err(ModelError::EmptySource);
        }
        self.check_ids(src, "source", self.config.src_vocab)?;
        let ids = self.params.ids;
        let n = src.len();
        let hid = self.config.enc_hidden;

        let mut emb = Vec::with_capacity(n);
        for tok in src {
            let e = tape.embed(ids.src_emb, *tok as usize)?;
            emb.push(self.maybe_dropout(tape, e, mode, self.config.dropout_embeddings)?);
        }

        let zero = tape.leaf(vec![0.0; hid]);
        let mut fwd = Vec::with_capacity(n);
        let mut state = zero;
        for e in &emb {
            state = tape.gru(*e, state, ids.enc_fwd)?;
            fwd.push(state);
        }
        let mut bwd = vec![zero; n];
        let mut state = zero;
        for i in (0..n).rev() {
            state = tape.gru(emb[i], state, ids.enc_bwd)?;
            bwd[i] = state;
        }

        let h: Vec<NodeId> = fwd.iter().zip(&bwd).map(|(f, b)| tape.concat(&[*f, *b])).collect();
        let sentence = tape.concat(&[bwd[0], fwd[n - 1]]);

        let (gated, gate_nodes) = match gates {
            GateInput::Fixed(values) => {
                if values.len() != n {
                    return Err(ModelError::GateOverride {
                        expected: n,
                        got: values.len(),
                    });
                }
                let mut gated = Vec::with_capacity(n);
                let mut nodes = Vec::with_capacity(n);
                for (hi, g) in h.iter().zip(values) {
                    let g = tape.leaf(g.clone());
                    gated.push(tape.mul(*hi, g)?);
                    nodes.push(g);
                }
                (gated, nodes)
            }
            GateInput::Network if self.config.selective_gate => self.apply_selective_gate(tape, &h, sentence)?,
            GateInput::Network => (h.clone(), Vec::new()),
        };

        let keys = gated
            .iter()
            .map(|g| tape.matvec(ids.attn_u, *g))
            .collect::<Result<Vec<_>, _>>()?;

        Ok(EncodedSentence {
            h,
            bwd_first: bwd[0],
            fwd_last: fwd[n - 1],
            sentence,
            gates: gate_nodes,
            gated,
            keys,
        })
    }

    /// `sGate_i = σ(W_s h_i + U_s s + b)`, `h'_i = h_i ⊙ sGate_i`. Returns
    /// `(h', sGate)`.
    pub fn apply_selective_gate(
        &self,
        tape: &mut Tape<'_>,
        h: &[NodeId],
        sentence: NodeId,
    ) -> Result<(Vec<NodeId>, Vec<NodeId>), ModelError> {
        let ids = self.params.ids;
        let us = tape.matvec(ids.gate_u, sentence)?;
        let b = tape.param(ids.gate_b);
        let mut gated = Vec::with_capacity(h.len());
        let mut gates = Vec::with_capacity(h.len());
        for hi in h {
            let ws = tape.matvec(ids.gate_w, *hi)?;
            let pre = tape.add(ws, us)?;
            let pre = tape.add(pre, b)?;
            let g = tape.sigmoid(pre);
            gated.push(tape.mul(*hi, g)?);
            gates.push(g);
        }
        Ok((gated, gates))
    }

    /// `(s_0, c_0)` with `s_0 = tanh(W_d ←h_1 + b)` and `c_0 = 0`.
    pub fn decoder_init(&self, tape: &mut Tape<'_>, enc: &EncodedSentence) -> Result<(NodeId, NodeId), ModelError> {
        let ids = self.params.ids;
        let wd = tape.matvec(ids.init_w, enc.bwd_first)?;
        let b = tape.param(ids.init_b);
        let pre = tape.add(wd, b)?;
        let s0 = tape.tanh(pre);
        let c0 = tape.leaf(vec![0.0; 2 * self.config.enc_hidden]);
        Ok((s0, c0))
    }

    pub fn decode_step(
        &self,
        tape: &mut Tape<'_>,
        enc: &EncodedSentence,
        prev_word: TokenId,
        prev_state: NodeId,
        prev_context: NodeId,
        mode: &mut Mode<'_>,
    ) -> Result<DecoderStep, ModelError> {
        self.check_ids(&[prev_word], "target", self.config.tgt_vocab)?;
        let ids = self.params.ids;
        let w = tape.embed(ids.tgt_emb, prev_word as usize)?;
        let w = self.maybe_dropout(tape, w, mode, self.config.dropout_embeddings)?;

        let input = tape.concat(&[w, prev_context]);
        let state = tape.gru(input, prev_state, ids.dec)?;

        let query = tape.matvec(ids.attn_w, prev_state)?;
        let energies = tape.additive_scores(query, &enc.keys, ids.attn_v)?;
        let attention = tape.softmax(energies)?;
        let context = tape.weighted_sum(attention, &enc.gated)?;

        let rw = tape.matvec(ids.read_w, w)?;
        let rc = tape.matvec(ids.read_u, context)?;
        let rs = tape.matvec(ids.read_v, state)?;
        let r = tape.add(rw, rc)?;
        let r = tape.add(r, rs)?;
        let m = tape.maxout_pairs(r)?;
        let m = self.maybe_dropout(tape, m, mode, self.config.dropout_readout)?;
        let logits = tape.matvec(ids.out_w, m)?;
        let log_probs = tape.log_softmax(logits)?;
        Ok(DecoderStep {
            state,
            context,
            attention,
            log_probs,
        })
    }

    /// Teacher-forced `log p(y|x)` as a scalar node, plus the per-step
    /// records. `target` should end with EOS.
    pub fn teacher_forced(
        &self,
        tape: &mut Tape<'_>,
        enc: &EncodedSentence,
        target: &[TokenId],
        mode: &mut Mode<'_>,
    ) -> Result<(NodeId, Vec<DecoderStep>), ModelError> {
        if target.is_empty() {
            return Err(ModelError::EmptyTarget);
        }
        self.check_ids(target, "target", self.config.tgt_vocab)?;
        let (mut state, mut ctx) = self.decoder_init(tape, enc)?;
        let mut prev = BOS;
        let mut picks = Vec::with_capacity(target.len());
        let mut steps = Vec::with_capacity(target.len());
        for &y in target {
            let step = self.decode_step(tape, enc, prev, state, ctx, mode)?;
            picks.push(tape.pick(step.log_probs, y as usize)?);
            steps.push(step);
            state = step.state;
            ctx = step.context;
            prev = y;
        }
        Ok((tape.sum(&picks)?, steps))
    }

    /// `log p(y|x)` with dropout off.
    pub fn log_prob(&self, src: &[TokenId], target: &[TokenId]) -> Result<Real, ModelError> {
        let mut tape = self.tape();
        let enc = self.encode_sentence(&mut tape, src, &mut Mode::Infer)?;
        let (lp, _) = self.teacher_forced(&mut tape, &enc, target, &mut Mode::Infer)?;
        Ok(tape.value(lp)[0])
    }

    /// Mean negative log-likelihood over the rows of `batch`. When `grads` is
    /// given, the gradient of that mean is accumulated into it.
    pub fn sequence_nll(&self, batch: &Batch, mode: LossMode, grads: Option<&mut ParamGrads>) -> Result<Real, ModelError> {
        let rows = batch.len();
        if rows == 0 {
            return Err(ModelError::EmptySource);
        }
        let inv = 1.0 / rows as Real;
        let want_grads = grads.is_some();
        let shards: Vec<(Real, Option<ParamGrads>)> = (0..rows)
            .collect::<Vec<_>>()
            .par_chunks(GRAD_SHARD_ROWS)
            .map(|chunk| -> Result<(Real, Option<ParamGrads>), ModelError> {
                let mut shard_grads = want_grads.then(|| self.params.store.zeros_like());
                let mut total = 0.0;
                for &row in chunk {
                    let mut rng = match mode {
                        LossMode::Train { seed } => {
                            let mut r = ChaCha8Rng::seed_from_u64(seed);
                            r.set_stream(row as u64);
                            Some(r)
                        }
                        LossMode::Infer => None,
                    };
                    let mut m = match rng.as_mut() {
                        Some(r) => Mode::Train(r),
                        None => Mode::Infer,
                    };
                    let mut tape = self.tape();
                    let enc = self.encode_sentence(&mut tape, batch.source_row(row), &mut m)?;
                    let (lp, _) = self.teacher_forced(&mut tape, &enc, batch.target_row(row), &mut m)?;
                    let v = tape.value(lp)[0];
                    if !v.is_finite() {
                        return Err(ModelError::NonFiniteLoss { batch: batch.index });
                    }
                    total -= v;
                    if let Some(g) = shard_grads.as_mut() {
                        tape.backward_with_seed(lp, -inv, g)?;
                    }
                }
                Ok((total, shard_grads))
            })
            .collect::<Result<Vec<_>, _>>()?;

        let mut loss = 0.0;
        let mut grads = grads;
        for (l, g) in shards {
            loss += l;
            if let (Some(acc), Some(g)) = (grads.as_deref_mut(), g) {
                acc.add_assign(&g);
            }
        }
        let loss = loss * inv;
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss { batch: batch.index });
        }
        Ok(loss)
    }
}
