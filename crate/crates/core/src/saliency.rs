//! Gate saliency: the norm of the gradient of the summary log-probability
//! with respect to each source word's selective gate vector.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::{GateInput, Mode, ModelError, Seass};
use crate::tensor::Real;
use crate::text::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub tokens: Vec<String>,
    pub raw: Vec<Real>,
    pub normalized: Vec<Real>,
}

/// `raw / max(raw)`, or all zeros when every raw score is zero.
pub fn normalize(raw: &[Real]) -> Vec<Real> {
    let max = raw.iter().copied().fold(0.0, Real::max);
    if max > 0.0 {
        raw.iter().map(|r| r / max).collect()
    } else {
        vec![0.0; raw.len()]
    }
}

/// Gate vectors the network produces for `src`; all ones when the gate is
/// disabled.
pub fn gate_values(model: &Seass, src: &[TokenId]) -> Result<Vec<Vec<Real>>, ModelError> {
    let mut tape = model.tape();
    let enc = model.encode_sentence(&mut tape, src, &mut Mode::Infer)?;
    if enc.gates.is_empty() {
        return Ok(vec![vec![1.0; 2 * model.config.enc_hidden]; src.len()]);
    }
    Ok(enc.gates.iter().map(|g| tape.value(*g).to_vec()).collect())
}

/// Teacher-forced `Σ log p(y_t | y_<t, x)` with the gates pinned to `gates`.
pub fn score_with_gates(model: &Seass, src: &[TokenId], summary: &[TokenId], gates: &[Vec<Real>]) -> Result<Real, ModelError> {
    let mut tape = model.tape();
    let enc = model.encode_with_gates(&mut tape, src, &mut Mode::Infer, GateInput::Fixed(gates))?;
    let (lp, _) = model.teacher_forced(&mut tape, &enc, summary, &mut Mode::Infer)?;
    Ok(tape.value(lp)[0])
}

/// `∂S_y/∂sGate_i` for every source position, from one backward pass.
pub fn gate_gradients(model: &Seass, src: &[TokenId], summary: &[TokenId]) -> Result<Vec<Vec<Real>>, ModelError> {
    let mut tape = model.tape();
    let enc = if model.config.selective_gate {
        model.encode_sentence(&mut tape, src, &mut Mode::Infer)?
    } else {
        let ones = gate_values(model, src)?;
        model.encode_with_gates(&mut tape, src, &mut Mode::Infer, GateInput::Fixed(&ones))?
    };
    let (lp, _) = model.teacher_forced(&mut tape, &enc, summary, &mut Mode::Infer)?;
    let mut sink = model.store().zeros_like();
    let node_grads = tape.backward(lp, &mut sink)?;
    Ok(enc.gates.iter().map(|g| node_grads.get(*g)).collect())
}

/// Saliency of each source token for producing `summary` (which should end
/// with EOS). `tokens` labels the source positions in the output.
pub fn saliency_map(model: &Seass, src: &[TokenId], summary: &[TokenId], tokens: Vec<String>) -> Result<SaliencyMap, ModelError> {
    if summary.is_empty() {
        return Err(ModelError::EmptyTarget);
    }
    let grads = gate_gradients(model, src, summary)?;
    let raw: Vec<Real> = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<Real>().sqrt()).collect();
    Ok(SaliencyMap {
        normalized: normalize(&raw),
        tokens,
        raw,
    })
}

/// Long-form table, one row per source position:
/// `sentence,position,token,raw,normalized`.
pub fn to_csv(maps: &[SaliencyMap]) -> String {
    let mut out = String::from("sentence,position,token,raw,normalized\n");
    for (s, m) in maps.iter().enumerate() {
        for (i, tok) in m.tokens.iter().enumerate() {
            let tok = if tok.contains([',', '"', '\n']) {
                format!("\"{}\"", tok.replace('"', "\"\""))
            } else {
                tok.clone()
            };
            writeln!(out, "{s},{i},{tok},{},{}", m.raw[i], m.normalized[i]).expect("string write");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::text::EOS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64, gate: bool) -> Seass {
        let mut cfg = ModelConfig::tiny(10, 9, 4, 3);
        cfg.selective_gate = gate;
        Seass::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("w{i}")).collect()
    }

    #[test]
    fn zero_model_has_zero_saliency() {
        let m = Seass::zeros(ModelConfig::tiny(10, 9, 4, 3)).unwrap();
        let s = saliency_map(&m, &[4, 5, 6], &[4, EOS], labels(3)).unwrap();
        assert!(s.raw.iter().all(|x| *x == 0.0));
        assert!(s.normalized.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn normalized_scores_peak_at_one() {
        let m = model(1, true);
        let s = saliency_map(&m, &[4, 5, 6, 7], &[5, 6, EOS], labels(4)).unwrap();
        assert!(s.raw.iter().all(|x| *x >= 0.0));
        assert!(s.normalized.iter().all(|x| (0.0..=1.0).contains(x)));
        assert!(s.normalized.contains(&1.0));
    }

    #[test]
    fn deterministic_and_read_only() {
        let m = model(2, true);
        let before = m.clone();
        let a = saliency_map(&m, &[4, 5], &[6, EOS], labels(2)).unwrap();
        let b = saliency_map(&m, &[4, 5], &[6, EOS], labels(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(m, before);
    }

    #[test]
    fn pinned_network_gates_reproduce_the_score() {
        let m = model(3, true);
        let src = [4, 7, 8];
        let g = gate_values(&m, &src).unwrap();
        let pinned = score_with_gates(&m, &src, &[5, EOS], &g).unwrap();
        assert_eq!(pinned, m.log_prob(&src, &[5, EOS]).unwrap());
    }

    #[cfg(not(feature = "f32"))]
    #[test]
    fn gradients_match_finite_differences() {
        for gate in [true, false] {
            let m = model(4, gate);
            let src = [4, 9, 6];
            let summary = [7, 5, EOS];
            let grads = gate_gradients(&m, &src, &summary).unwrap();
            let base = gate_values(&m, &src).unwrap();
            let eps = 1e-5;
            for i in 0..src.len() {
                for k in 0..base[i].len() {
                    let mut up = base.clone();
                    up[i][k] += eps;
                    let mut down = base.clone();
                    down[i][k] -= eps;
                    let fd = (score_with_gates(&m, &src, &summary, &up).unwrap()
                        - score_with_gates(&m, &src, &summary, &down).unwrap())
                        / (2.0 * eps);
                    let err = crate::tensor::relative_error(grads[i][k], fd);
                    assert!(err <= 1e-4, "gate {gate} pos {i} dim {k}: {} vs {fd}", grads[i][k]);
                }
            }
        }
    }

    #[test]
    fn csv_layout() {
        let maps = vec![SaliencyMap {
            tokens: vec!["a".into(), "b,c".into()],
            raw: vec![0.5, 1.0],
            normalized: vec![0.5, 1.0],
        }];
        assert_eq!(to_csv(&maps), "sentence,position,token,raw,normalized\n0,0,a,0.5,0.5\n0,1,\"b,c\",1,1\n");
    }
}
