//! Greedy and beam-search generation.
//!
//! Beam scores are cumulative log-probabilities while a hypothesis is being
//! extended; finished hypotheses are ranked by cumulative log-probability
//! divided by their length, EOS included.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{EncodedSentence, Mode, ModelError, Seass};
use crate::tensor::{NodeId, Real, Tape};
use crate::text::{TokenId, BOS, EOS, PAD, UNK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Maximum number of generated tokens, EOS included.
    pub max_len: usize,
    /// EOS is unavailable until this many words have been produced.
    pub min_len: usize,
    /// Exact output length in words; overrides `min_len` and `max_len`.
    pub fixed_len: Option<usize>,
    pub suppress_unk: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 12,
            max_len: 30,
            min_len: 0,
            fixed_len: None,
            suppress_unk: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.beam_size == 0 {
            return Err(ModelError::Config("beam_size must be at least 1".into()));
        }
        if self.fixed_len.is_none() && self.min_len > self.max_len {
            return Err(ModelError::Config(format!(
                "min_len {} exceeds max_len {}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }

    /// Number of decoder steps allowed.
    pub fn step_limit(&self) -> usize {
        match self.fixed_len {
            Some(n) => n + 1,
            None => self.max_len,
        }
    }

    fn min_words(&self) -> usize {
        self.fixed_len.unwrap_or(self.min_len)
    }

    /// Whether `token` may follow a prefix of `words` non-EOS tokens.
    pub fn allows(&self, token: TokenId, words: usize) -> bool {
        if token == PAD || token == BOS || (self.suppress_unk && token == UNK) {
            return false;
        }
        if let Some(n) = self.fixed_len {
            if words == n {
                return token == EOS;
            }
        }
        token != EOS || words >= self.min_words()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated words, EOS stripped.
    pub tokens: Vec<TokenId>,
    /// Cumulative log-probability of every generated token.
    pub log_prob: Real,
    /// Generated tokens including EOS when present.
    pub length: usize,
    /// Ended with EOS rather than hitting the step limit.
    pub finished: bool,
}

impl Hypothesis {
    /// `log_prob / length`; zero for an empty hypothesis.
    pub fn score(&self) -> Real {
        if self.length == 0 {
            0.0
        } else {
            self.log_prob / self.length as Real
        }
    }

    /// The full generated sequence, EOS included when present.
    pub fn generated(&self) -> Vec<TokenId> {
        let mut out = self.tokens.clone();
        if self.finished {
            out.push(EOS);
        }
        out
    }
}

/// Descending score, then ascending token ids.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score().total_cmp(&a.score()).then_with(|| a.generated().cmp(&b.generated()))
}

struct Live {
    tokens: Vec<TokenId>,
    log_prob: Real,
    state: NodeId,
    context: NodeId,
}

fn start<'p>(model: &'p Seass, src: &[TokenId]) -> Result<(Tape<'p>, EncodedSentence, NodeId, NodeId), ModelError> {
    let mut tape = model.tape();
    let enc = model.encode_sentence(&mut tape, src, &mut Mode::Infer)?;
    let (s0, c0) = model.decoder_init(&mut tape, &enc)?;
    Ok((tape, enc, s0, c0))
}

/// Emits the most probable allowed token at each step (lowest id on ties)
/// until EOS or the step limit.
pub fn greedy_decode(model: &Seass, src: &[TokenId], cfg: &DecodeConfig) -> Result<Hypothesis, ModelError> {
    cfg.validate()?;
    let (mut tape, enc, mut state, mut ctx) = start(model, src)?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        length: 0,
        finished: false,
    };
    let mut prev = BOS;
    for _ in 0..cfg.step_limit() {
        let step = model.decode_step(&mut tape, &enc, prev, state, ctx, &mut Mode::Infer)?;
        let lp = tape.value(step.log_probs);
        let mut best: Option<(TokenId, Real)> = None;
        for (tok, &v) in lp.iter().enumerate() {
            let tok = tok as TokenId;
            if cfg.allows(tok, hyp.tokens.len()) && best.is_none_or(|(_, b)| v > b) {
                best = Some((tok, v));
            }
        }
        let Some((tok, v)) = best else { break };
        hyp.log_prob += v;
        hyp.length += 1;
        if tok == EOS {
            hyp.finished = true;
            break;
        }
        hyp.tokens.push(tok);
        prev = tok;
        state = step.state;
        ctx = step.context;
    }
    Ok(hyp)
}

/// Beam search. Returns up to `beam_size` hypotheses, best first.
///
/// Each step scores every allowed extension of every live hypothesis and
/// keeps the `beam_size` best by cumulative log-probability (ties broken by
/// token ids). Kept extensions ending in EOS move to the finished pool; at
/// the step limit the kept extensions enter the pool unfinished. Search ends
/// early once the pool holds `beam_size` hypotheses and none of the live
/// ones can still beat the best of them.
pub fn beam_decode(model: &Seass, src: &[TokenId], cfg: &DecodeConfig) -> Result<Vec<Hypothesis>, ModelError> {
    cfg.validate()?;
    let limit = cfg.step_limit();
    let (mut tape, enc, s0, c0) = start(model, src)?;
    let mut live = vec![Live {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: s0,
        context: c0,
    }];
    let mut pool: Vec<Hypothesis> = Vec::new();

    for step_no in 1..=limit {
        // (parent, token, cumulative log-prob, step node)
        let mut cands: Vec<(usize, TokenId, Real, usize)> = Vec::new();
        let mut steps = Vec::with_capacity(live.len());
        for (pi, h) in live.iter().enumerate() {
            let prev = h.tokens.last().copied().unwrap_or(BOS);
            let st = model.decode_step(&mut tape, &enc, prev, h.state, h.context, &mut Mode::Infer)?;
            let lp = tape.value(st.log_probs);
            for (tok, &v) in lp.iter().enumerate() {
                let tok = tok as TokenId;
                if cfg.allows(tok, h.tokens.len()) {
                    cands.push((pi, tok, h.log_prob + v, steps.len()));
                }
            }
            steps.push(st);
        }
        cands.sort_by(|a, b| {
            b.2.total_cmp(&a.2).then_with(|| {
                let pa = &live[a.0].tokens;
                let pb = &live[b.0].tokens;
                pa.iter().chain([&a.1]).cmp(pb.iter().chain([&b.1]))
            })
        });
        cands.truncate(cfg.beam_size);

        let mut next = Vec::with_capacity(cands.len());
        for (pi, tok, lp, si) in cands {
            let parent = &live[pi];
            let mut tokens = parent.tokens.clone();
            if tok == EOS || step_no == limit {
                let finished = tok == EOS;
                if !finished {
                    tokens.push(tok);
                }
                pool.push(Hypothesis {
                    tokens,
                    log_prob: lp,
                    length: step_no,
                    finished,
                });
            } else {
                tokens.push(tok);
                next.push(Live {
                    tokens,
                    log_prob: lp,
                    state: steps[si].state,
                    context: steps[si].context,
                });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        if pool.len() >= cfg.beam_size {
            // Log-probs are non-positive, so a live hypothesis can at best
            // keep its current total and spread it over the full step limit.
            let best = pool.iter().map(Hypothesis::score).fold(Real::NEG_INFINITY, Real::max);
            let bound = live.iter().map(|h| h.log_prob / limit as Real).fold(Real::NEG_INFINITY, Real::max);
            if best >= bound {
                break;
            }
        }
    }

    pool.sort_by(rank);
    pool.truncate(cfg.beam_size);
    if pool.is_empty() {
        pool.push(Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            length: 0,
            finished: false,
        });
    }
    Ok(pool)
}

/// Best hypothesis per source, greedy or beam, in input order.
pub fn decode_corpus(
    model: &Seass,
    sources: &[Vec<TokenId>],
    cfg: &DecodeConfig,
    greedy: bool,
) -> Result<Vec<Hypothesis>, ModelError> {
    sources
        .par_iter()
        .map(|src| {
            if greedy {
                greedy_decode(model, src, cfg)
            } else {
                Ok(beam_decode(model, src, cfg)?.swap_remove(0))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64, tgt_vocab: usize) -> Seass {
        let mut cfg = ModelConfig::tiny(10, tgt_vocab, 4, 5);
        cfg.dropout_p = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Seass::init(cfg, &mut rng).unwrap();
        // Sharper output distributions than the Xavier default.
        let w = m.params.ids.out_w;
        m.params.store.get_mut(w).data_mut().iter_mut().for_each(|x| *x *= 4.0);
        m
    }

    #[test]
    fn masking_rules() {
        let cfg = DecodeConfig {
            suppress_unk: true,
            min_len: 2,
            ..DecodeConfig::default()
        };
        assert!(!cfg.allows(PAD, 5));
        assert!(!cfg.allows(BOS, 5));
        assert!(!cfg.allows(UNK, 5));
        assert!(!cfg.allows(EOS, 1));
        assert!(cfg.allows(EOS, 2));
        let fixed = DecodeConfig {
            fixed_len: Some(3),
            ..DecodeConfig::default()
        };
        assert!(!fixed.allows(EOS, 2));
        assert!(fixed.allows(UNK, 2));
        assert!(fixed.allows(EOS, 3));
        assert!(!fixed.allows(7, 3));
        assert_eq!(fixed.step_limit(), 4);
    }

    #[test]
    fn zero_step_limit_is_empty() {
        let m = model(1, 9);
        let cfg = DecodeConfig {
            max_len: 0,
            ..DecodeConfig::default()
        };
        let g = greedy_decode(&m, &[4, 5], &cfg).unwrap();
        assert!(g.tokens.is_empty());
        let b = beam_decode(&m, &[4, 5], &cfg).unwrap();
        assert!(b[0].tokens.is_empty());
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..30 {
            let m = model(seed, 9);
            let src = [4 + (seed % 5) as TokenId, 5, 6];
            let cfg = DecodeConfig {
                beam_size: 1,
                max_len: 6,
                ..DecodeConfig::default()
            };
            let g = greedy_decode(&m, &src, &cfg).unwrap();
            let b = beam_decode(&m, &src, &cfg).unwrap();
            assert_eq!(b.len(), 1);
            assert_eq!(b[0], g, "seed {seed}");
        }
    }

    #[test]
    fn decoding_is_deterministic() {
        let m = model(3, 9);
        let cfg = DecodeConfig {
            beam_size: 4,
            max_len: 5,
            ..DecodeConfig::default()
        };
        assert_eq!(beam_decode(&m, &[4, 5], &cfg).unwrap(), beam_decode(&m, &[4, 5], &cfg).unwrap());
        assert_eq!(greedy_decode(&m, &[4, 5], &cfg).unwrap(), greedy_decode(&m, &[4, 5], &cfg).unwrap());
    }

    #[test]
    fn scores_match_teacher_forcing() {
        for seed in 0..5 {
            let m = model(seed, 9);
            let cfg = DecodeConfig {
                beam_size: 5,
                max_len: 5,
                ..DecodeConfig::default()
            };
            for h in beam_decode(&m, &[4, 6, 8], &cfg).unwrap() {
                let lp = m.log_prob(&[4, 6, 8], &h.generated()).unwrap();
                assert!((lp / h.length as Real - h.score()).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn ranked_by_normalized_score() {
        let m = model(4, 9);
        let cfg = DecodeConfig {
            beam_size: 6,
            max_len: 5,
            ..DecodeConfig::default()
        };
        let hyps = beam_decode(&m, &[4, 6, 8], &cfg).unwrap();
        for w in hyps.windows(2) {
            assert!(w[0].score() >= w[1].score());
        }
    }

    #[test]
    fn fixed_length_outputs() {
        let m = model(5, 9);
        let cfg = DecodeConfig {
            beam_size: 3,
            fixed_len: Some(18),
            ..DecodeConfig::default()
        };
        for h in beam_decode(&m, &[4, 5, 6], &cfg).unwrap() {
            assert_eq!(h.tokens.len(), 18);
            assert!(h.finished);
        }
        assert_eq!(greedy_decode(&m, &[4, 5, 6], &cfg).unwrap().tokens.len(), 18);
    }

    #[test]
    fn suppressed_tokens_never_emitted() {
        let m = model(6, 9);
        let cfg = DecodeConfig {
            beam_size: 4,
            max_len: 8,
            suppress_unk: true,
            ..DecodeConfig::default()
        };
        for h in beam_decode(&m, &[4, 5], &cfg).unwrap() {
            assert!(h.tokens.iter().all(|t| ![PAD, BOS, UNK, EOS].contains(t)));
        }
    }

    #[test]
    fn corpus_decoding_keeps_order() {
        let m = model(7, 9);
        let cfg = DecodeConfig {
            beam_size: 2,
            max_len: 4,
            ..DecodeConfig::default()
        };
        let srcs = vec![vec![4, 5], vec![6], vec![7, 8, 9]];
        let out = decode_corpus(&m, &srcs, &cfg, false).unwrap();
        for (s, h) in srcs.iter().zip(&out) {
            assert_eq!(*h, beam_decode(&m, s, &cfg).unwrap()[0]);
        }
    }
}
