#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seass::decode::DecodeConfig;
use seass::model::{ModelConfig, Seass};
use seass::tensor::Real;
use seass::text::{TokenId, EOS};

/// Every sequence the decoder could return: word strings ending in EOS with
/// at most `step_limit` tokens, plus EOS-free strings of exactly
/// `step_limit` tokens. Returns the best under `log p / length`, ties to the
/// lexicographically smallest id sequence.
pub fn enumerate_best(model: &Seass, src: &[TokenId], cfg: &DecodeConfig) -> (Vec<TokenId>, Real) {
    let limit = cfg.step_limit();
    let vocab = model.config.tgt_vocab as TokenId;
    let mut best: Option<(Vec<TokenId>, Real)> = None;
    let mut consider = |seq: Vec<TokenId>| {
        let lp = model.log_prob(src, &seq).unwrap();
        let score = lp / seq.len() as Real;
        let better = match &best {
            None => true,
            Some((b, s)) => score > *s || (score == *s && seq < *b),
        };
        if better {
            best = Some((seq, score));
        }
    };
    let mut prefixes: Vec<Vec<TokenId>> = vec![vec![]];
    for depth in 0..limit {
        let mut next = Vec::new();
        for p in &prefixes {
            for tok in 0..vocab {
                if !cfg.allows(tok, p.len()) {
                    continue;
                }
                let mut s = p.clone();
                s.push(tok);
                if tok == EOS || depth + 1 == limit {
                    consider(s);
                } else {
                    next.push(s);
                }
            }
        }
        prefixes = next;
    }
    best.expect("at least one sequence")
}

/// Tiny random model with output logits scaled up so that distributions are
/// far from uniform.
pub fn tiny_model(seed: u64, src_vocab: usize, tgt_vocab: usize) -> Seass {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig::tiny(src_vocab, tgt_vocab, 4, 6);
    let mut m = Seass::init(cfg, &mut rng).unwrap();
    let sharp: Real = rng.random_range(1.0..6.0);
    let w = m.params.ids.out_w;
    m.params.store.get_mut(w).data_mut().iter_mut().for_each(|x| *x *= sharp);
    m
}

/// Prints one verdict line for an acceptance criterion straight to the
/// terminal, so it shows even when the harness captures output.
pub fn report(id: u32, name: &str, pass: bool, detail: &str) {
    use std::io::Write;
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("[acceptance] criterion {id} {name}: {verdict} ({detail})\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
}
