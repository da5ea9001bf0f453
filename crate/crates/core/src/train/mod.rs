//! Adam with element-wise clipping, dev-score learning-rate halving,
//! checkpointing and a resumable training loop.

mod checkpoint;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{
    from_bytes, load_checkpoint, load_checkpoint_as, save_checkpoint, to_bytes, Checkpoint, CheckpointError, MAGIC,
    VERSION,
};

use crate::decode::{decode_corpus, DecodeConfig};
use crate::model::{LossMode, ModelConfig, ModelError, Seass};
use crate::rouge::rouge_n;
use crate::tensor::{ParamGrads, ParamStore, Real};
use crate::text::{make_batches, Batch, Pair};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid optimizer config: {0}")]
    Config(String),
    #[error("non-finite update at step {step}")]
    NonFiniteUpdate { step: u64 },
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("dev set is empty")]
    EmptyDevSet,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    pub batch_size: usize,
    /// Updates between dev evaluations.
    pub eval_every: usize,
    pub patience: usize,
    /// Total number of updates.
    pub steps: u64,
    /// Step limit for greedy dev decoding.
    pub dev_max_len: usize,
    /// Record elapsed seconds in the metrics log.
    pub log_wallclock: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 5.0,
            batch_size: 64,
            eval_every: 2000,
            patience: 12,
            steps: 10_000,
            dev_max_len: 30,
            log_wallclock: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return bad("alpha must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("eps must be positive");
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return bad("clip must be positive");
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.patience == 0 {
            return bad("batch_size, eval_every and patience must be at least 1");
        }
        Ok(())
    }
}

/// Learning rate and the dev-score bookkeeping that halves it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub alpha: f64,
    pub patience: usize,
    /// Consecutive evaluations below the best score.
    pub drops: usize,
    pub best: Option<f64>,
    pub evaluations: usize,
    /// Evaluation numbers (1-based) at which the rate was halved.
    pub halved_at: Vec<usize>,
}

impl Schedule {
    pub fn new(alpha: f64, patience: usize) -> Self {
        Self {
            alpha,
            patience,
            drops: 0,
            best: None,
            evaluations: 0,
            halved_at: Vec::new(),
        }
    }

    /// Records a dev score. A new best resets the drop count and returns
    /// `Improved`; a score below the best extends the run of drops, and the
    /// `patience`-th consecutive drop halves the rate and resets the count.
    /// A score equal to the best ends the run without counting.
    pub fn observe(&mut self, score: f64) -> Observation {
        self.evaluations += 1;
        match self.best {
            Some(b) if score < b => {
                self.drops += 1;
                if self.drops >= self.patience {
                    self.alpha *= 0.5;
                    self.drops = 0;
                    self.halved_at.push(self.evaluations);
                    Observation::Halved
                } else {
                    Observation::Dropped
                }
            }
            Some(b) if score == b => {
                self.drops = 0;
                Observation::Tied
            }
            _ => {
                self.best = Some(score);
                self.drops = 0;
                Observation::Improved
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Observation {
    Improved,
    Tied,
    Dropped,
    Halved,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Updates applied so far.
    pub step: u64,
    pub m: ParamGrads,
    pub v: ParamGrads,
    pub schedule: Schedule,
}

impl TrainState {
    pub fn new(params: &ParamStore, cfg: &OptimizerConfig) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
            schedule: Schedule::new(cfg.alpha, cfg.patience),
        }
    }
}

/// Clamps every element into `[-range, range]`.
pub fn clip_gradients(grads: &mut ParamGrads, range: Real) {
    for m in grads.iter_mut() {
        for x in m.data_mut() {
            *x = x.clamp(-range, range);
        }
    }
}

/// One bias-corrected Adam step at the schedule's current rate. Nothing is
/// modified if any updated value would be non-finite.
pub fn adam_update(
    params: &mut ParamStore,
    state: &mut TrainState,
    grads: &ParamGrads,
    cfg: &OptimizerConfig,
) -> Result<(), TrainError> {
    let t = state.step + 1;
    let (b1, b2) = (cfg.beta1 as Real, cfg.beta2 as Real);
    let c1 = 1.0 - (cfg.beta1).powf(t as f64);
    let c2 = 1.0 - (cfg.beta2).powf(t as f64);
    let alpha = state.schedule.alpha;
    let eps = cfg.eps;

    let mut m = state.m.clone();
    let mut v = state.v.clone();
    let mut next = params.clone();
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let g = grads.get(id).data();
        let mm = m.get_mut(id).data_mut();
        let vv = v.get_mut(id).data_mut();
        let p = next.get_mut(id).data_mut();
        for k in 0..g.len() {
            mm[k] = b1 * mm[k] + (1.0 - b1) * g[k];
            vv[k] = b2 * vv[k] + (1.0 - b2) * g[k] * g[k];
            let mhat = mm[k] as f64 / c1;
            let vhat = vv[k] as f64 / c2;
            p[k] -= (alpha * mhat / (vhat.sqrt() + eps)) as Real;
            if !p[k].is_finite() {
                return Err(TrainError::NonFiniteUpdate { step: t });
            }
        }
    }
    *params = next;
    state.m = m;
    state.v = v;
    state.step = t;
    Ok(())
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent seed for stream `tag`, item `n`.
pub fn derive_seed(seed: u64, tag: u64, n: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag.wrapping_mul(0x1000_0000_01b3) ^ splitmix64(n)))
}

const TAG_INIT: u64 = 1;
const TAG_EPOCH: u64 = 2;
const TAG_DROPOUT: u64 = 3;

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub loss: f64,
    pub dev_rouge2: Option<f64>,
    pub alpha: f64,
    pub wallclock: Option<f64>,
}

/// Mean ROUGE-2 F1 of greedy outputs against the gold targets, compared as
/// id strings.
pub fn dev_rouge2(model: &Seass, dev: &[Pair], max_len: usize) -> Result<f64, TrainError> {
    if dev.is_empty() {
        return Err(TrainError::EmptyDevSet);
    }
    let cfg = DecodeConfig {
        beam_size: 1,
        max_len,
        ..DecodeConfig::default()
    };
    let sources: Vec<_> = dev.iter().map(|p| p.source.ids().to_vec()).collect();
    let hyps = decode_corpus(model, &sources, &cfg, true)?;
    let total: f64 = hyps
        .iter()
        .zip(dev)
        .map(|(h, p)| {
            let cand: Vec<String> = h.tokens.iter().map(u32::to_string).collect();
            let gold: Vec<String> = p.target.without_eos().iter().map(u32::to_string).collect();
            rouge_n(&cand, &gold, 2).f1
        })
        .sum();
    Ok(total / dev.len() as f64)
}

/// Drives training. Batch order for each epoch and the dropout masks of each
/// update are derived from the seed and the step count, so a run resumed
/// from a checkpoint continues exactly as an uninterrupted one.
pub struct Trainer {
    pub model: Seass,
    pub state: TrainState,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Best dev score and the parameters that achieved it.
    pub best: Option<(f64, ParamStore)>,
    epoch_cache: Option<(u64, Vec<Batch>)>,
    started: Instant,
}

impl Trainer {
    pub fn new(config: ModelConfig, optimizer: OptimizerConfig, seed: u64) -> Result<Self, TrainError> {
        optimizer.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_INIT, 0));
        let model = Seass::init(config, &mut rng)?;
        let state = TrainState::new(model.store(), &optimizer);
        Ok(Self::assemble(model, state, optimizer, seed))
    }

    fn assemble(model: Seass, state: TrainState, optimizer: OptimizerConfig, seed: u64) -> Self {
        Self {
            model,
            state,
            optimizer,
            seed,
            best: None,
            epoch_cache: None,
            started: Instant::now(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, TrainError> {
        ckpt.optimizer.validate()?;
        let params = crate::model::ModelParams::from_store(&ckpt.config, ckpt.params)?;
        let model = Seass::new(ckpt.config, params)?;
        Ok(Self::assemble(model, ckpt.state, ckpt.optimizer, ckpt.seed))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config.clone(),
            optimizer: self.optimizer.clone(),
            seed: self.seed,
            params: self.model.params.store.clone(),
            state: self.state.clone(),
        }
    }

    /// Model holding the best dev parameters, or the current ones if no
    /// evaluation has happened.
    pub fn best_model(&self) -> Seass {
        let mut m = self.model.clone();
        if let Some((_, p)) = &self.best {
            m.params.store = p.clone();
        }
        m
    }

    fn batch_for_step(&mut self, train: &[Pair], step: u64) -> Batch {
        let per_epoch = train.len().div_ceil(self.optimizer.batch_size) as u64;
        let epoch = step / per_epoch;
        if self.epoch_cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let batches = make_batches(train, self.optimizer.batch_size, derive_seed(self.seed, TAG_EPOCH, epoch));
            self.epoch_cache = Some((epoch, batches));
        }
        let batches = &self.epoch_cache.as_ref().expect("filled above").1;
        batches[(step % per_epoch) as usize].clone()
    }

    /// Applies one update and returns the batch loss.
    pub fn step(&mut self, train: &[Pair]) -> Result<f64, TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptyTrainSet);
        }
        let step = self.state.step;
        let batch = self.batch_for_step(train, step);
        let mut grads = self.model.store().zeros_like();
        let mode = LossMode::Train {
            seed: derive_seed(self.seed, TAG_DROPOUT, step),
        };
        let loss = self.model.sequence_nll(&batch, mode, Some(&mut grads))?;
        clip_gradients(&mut grads, self.optimizer.clip as Real);
        adam_update(&mut self.model.params.store, &mut self.state, &grads, &self.optimizer)?;
        Ok(loss as f64)
    }

    /// Evaluates on `dev`, updates the schedule and remembers the best
    /// parameters. Returns the score and what the schedule did.
    pub fn evaluate(&mut self, dev: &[Pair]) -> Result<(f64, Observation), TrainError> {
        let score = dev_rouge2(&self.model, dev, self.optimizer.dev_max_len)?;
        let obs = self.state.schedule.observe(score);
        if obs == Observation::Improved {
            self.best = Some((score, self.model.params.store.clone()));
        }
        Ok((score, obs))
    }

    /// Trains until `optimizer.steps` updates have been applied. With
    /// `out_dir`, appends to `metrics.jsonl` and keeps `best.ckpt` (best dev
    /// score) and `last.ckpt` (latest evaluation and the end of the run)
    /// there. Returns the records produced by this call.
    pub fn run(&mut self, train: &[Pair], dev: &[Pair], out_dir: Option<&Path>) -> Result<Vec<MetricRecord>, TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptyTrainSet);
        }
        if dev.is_empty() {
            return Err(TrainError::EmptyDevSet);
        }
        let mut log = match out_dir {
            Some(dir) => Some(MetricsLog::open(dir)?),
            None => None,
        };
        let mut records = Vec::new();
        while self.state.step < self.optimizer.steps {
            let loss = self.step(train)?;
            let step = self.state.step;
            let mut dev_score = None;
            if step.is_multiple_of(self.optimizer.eval_every as u64) {
                let (score, obs) = self.evaluate(dev)?;
                dev_score = Some(score);
                if let Some(dir) = out_dir {
                    if obs == Observation::Improved {
                        save_checkpoint(&self.checkpoint(), &dir.join("best.ckpt"))?;
                    }
                    save_checkpoint(&self.checkpoint(), &dir.join("last.ckpt"))?;
                }
            }
            let rec = MetricRecord {
                step,
                loss,
                dev_rouge2: dev_score,
                alpha: self.state.schedule.alpha,
                wallclock: self.optimizer.log_wallclock.then(|| self.started.elapsed().as_secs_f64()),
            };
            if let Some(l) = log.as_mut() {
                l.append(&rec)?;
            }
            records.push(rec);
        }
        if let Some(dir) = out_dir {
            save_checkpoint(&self.checkpoint(), &dir.join("last.ckpt"))?;
            if self.state.schedule.best.is_none() {
                save_checkpoint(&self.checkpoint(), &dir.join("best.ckpt"))?;
            }
        }
        Ok(records)
    }
}

struct MetricsLog {
    path: PathBuf,
    file: std::fs::File,
}

impl MetricsLog {
    fn open(dir: &Path) -> Result<Self, TrainError> {
        let io = |source| TrainError::Io {
            path: dir.to_path_buf(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(io)?;
        let path = dir.join("metrics.jsonl");
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| TrainError::Io {
                path: path.clone(),
                source,
            })?;
        Ok(Self { path, file })
    }

    fn append(&mut self, rec: &MetricRecord) -> Result<(), TrainError> {
        let mut line = serde_json::to_string(rec).expect("record serializes");
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(|source| TrainError::Io {
            path: self.path.clone(),
            source,
        })
    }
}

/// Fresh run from `seed`. See [`Trainer::run`].
pub fn training_run(
    config: ModelConfig,
    optimizer: OptimizerConfig,
    train: &[Pair],
    dev: &[Pair],
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<(Trainer, Vec<MetricRecord>), TrainError> {
    let mut t = Trainer::new(config, optimizer, seed)?;
    let records = t.run(train, dev, out_dir)?;
    Ok((t, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;
    use crate::text::{TokenSequence, EOS};

    fn store(values: &[Real]) -> ParamStore {
        let mut s = ParamStore::new();
        s.register("w", Matrix::from_vec(1, values.len(), values.to_vec()).unwrap());
        s
    }

    fn grads_for(s: &ParamStore, values: &[Real]) -> ParamGrads {
        let mut g = s.zeros_like();
        g.get_mut(s.ids().next().unwrap()).data_mut().copy_from_slice(values);
        g
    }

    #[test]
    fn clipping_examples() {
        let s = store(&[0.0; 4]);
        let mut g = grads_for(&s, &[7.0, -6.0, 3.0, 0.0]);
        clip_gradients(&mut g, 5.0);
        assert_eq!(g.iter().next().unwrap().data(), &[5.0, -5.0, 3.0, 0.0]);
    }

    #[test]
    fn first_adam_step_moves_by_alpha_sign() {
        let mut s = store(&[1.0, 1.0, 1.0]);
        let cfg = OptimizerConfig::default();
        let mut st = TrainState::new(&s, &cfg);
        let g = grads_for(&s, &[2.5, -0.3, 0.0]);
        adam_update(&mut s, &mut st, &g, &cfg).unwrap();
        let p = s.iter().next().unwrap().2.data().to_vec();
        assert!((p[0] - (1.0 - 0.001)).abs() < 1e-9);
        assert!((p[1] - (1.0 + 0.001)).abs() < 1e-9);
        assert_eq!(p[2], 1.0);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut s = store(&[0.3, -2.0]);
        let before = s.clone();
        let cfg = OptimizerConfig::default();
        let mut st = TrainState::new(&s, &cfg);
        let g = s.zeros_like();
        for _ in 0..20 {
            adam_update(&mut s, &mut st, &g, &cfg).unwrap();
        }
        assert_eq!(s, before);
        assert_eq!(st.step, 20);
    }

    #[test]
    fn adam_matches_scalar_recurrence() {
        let cfg = OptimizerConfig::default();
        let mut s = store(&[0.5]);
        let mut st = TrainState::new(&s, &cfg);
        let gs = [0.2, -0.1, 0.4, 0.05];
        let (mut p, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for (t, g) in gs.iter().enumerate() {
            let gr = grads_for(&s, &[*g as Real]);
            adam_update(&mut s, &mut st, &gr, &cfg).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            p -= 0.001 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((s.iter().next().unwrap().2.data()[0] as f64 - p).abs() < 1e-6);
    }

    #[test]
    fn non_finite_update_is_rejected_without_change() {
        let mut s = store(&[1.0]);
        let cfg = OptimizerConfig::default();
        let mut st = TrainState::new(&s, &cfg);
        let before = (s.clone(), st.clone());
        let g = grads_for(&s, &[Real::NAN]);
        assert!(adam_update(&mut s, &mut st, &g, &cfg).is_err());
        assert_eq!((s, st), before);
    }

    #[test]
    fn schedule_halves_after_patience_drops() {
        let mut s = Schedule::new(0.001, 2);
        assert_eq!(s.observe(10.0), Observation::Improved);
        assert_eq!(s.observe(9.0), Observation::Dropped);
        assert_eq!(s.observe(9.0), Observation::Halved);
        assert_eq!(s.alpha, 0.0005);
        assert_eq!(s.observe(9.5), Observation::Dropped);
        assert_eq!(s.observe(11.0), Observation::Improved);
        assert_eq!(s.observe(11.0), Observation::Tied);
        assert_eq!(s.observe(1.0), Observation::Dropped);
        assert_eq!(s.halved_at, vec![3]);
    }

    #[test]
    fn config_validation() {
        let mut c = OptimizerConfig::default();
        assert!(c.validate().is_ok());
        c.alpha = 0.0;
        assert!(c.validate().is_err());
        c = OptimizerConfig {
            beta2: 1.0,
            ..OptimizerConfig::default()
        };
        assert!(c.validate().is_err());
        c = OptimizerConfig {
            clip: -1.0,
            ..OptimizerConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(7, TAG_EPOCH, 0);
        assert_ne!(a, derive_seed(7, TAG_EPOCH, 1));
        assert_ne!(a, derive_seed(7, TAG_DROPOUT, 0));
        assert_ne!(a, derive_seed(8, TAG_EPOCH, 0));
        assert_eq!(a, derive_seed(7, TAG_EPOCH, 0));
    }

    fn toy_pairs() -> Vec<Pair> {
        (0..12u32)
            .map(|i| Pair {
                source: TokenSequence::new(vec![4 + i % 5, 4 + (i * 3) % 5]).unwrap(),
                target: TokenSequence::new(vec![4 + i % 5, EOS]).unwrap(),
            })
            .collect()
    }

    fn toy_trainer(dropout: Real) -> Trainer {
        let mut mc = ModelConfig::tiny(9, 9, 6, 6);
        mc.dropout_p = dropout;
        let oc = OptimizerConfig {
            batch_size: 4,
            eval_every: 5,
            steps: 12,
            dev_max_len: 4,
            log_wallclock: false,
            alpha: 0.01,
            ..OptimizerConfig::default()
        };
        Trainer::new(mc, oc, 42).unwrap()
    }

    #[test]
    fn repeated_batch_loss_does_not_increase() {
        let mut t = toy_trainer(0.0);
        let data = toy_pairs();
        let batch = Batch::from_pairs(0, &data.iter().take(4).collect::<Vec<_>>());
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let mut g = t.model.store().zeros_like();
            let loss = t.model.sequence_nll(&batch, LossMode::Infer, Some(&mut g)).unwrap() as f64;
            assert!(loss <= prev * 1.05, "{loss} after {prev}");
            prev = loss;
            clip_gradients(&mut g, 5.0);
            adam_update(&mut t.model.params.store, &mut t.state, &g, &t.optimizer).unwrap();
        }
    }

    #[test]
    fn runs_are_deterministic_and_resumable() {
        let data = toy_pairs();
        let mut a = toy_trainer(0.3);
        let ra = a.run(&data, &data[..4], None).unwrap();
        let mut b = toy_trainer(0.3);
        assert_eq!(b.run(&data, &data[..4], None).unwrap(), ra);
        assert_eq!(a.model, b.model);

        let mut c = toy_trainer(0.3);
        c.optimizer.steps = 7;
        let first = c.run(&data, &data[..4], None).unwrap();
        let bytes = to_bytes(&c.checkpoint());
        let mut d = Trainer::from_checkpoint(from_bytes(&bytes, None).unwrap()).unwrap();
        d.optimizer.steps = 12;
        let rest = d.run(&data, &data[..4], None).unwrap();
        let losses: Vec<f64> = first.iter().chain(&rest).map(|r| r.loss).collect();
        assert_eq!(losses, ra.iter().map(|r| r.loss).collect::<Vec<_>>());
        assert_eq!(d.model.params, a.model.params);
    }

    #[test]
    fn evaluation_does_not_touch_parameters() {
        let data = toy_pairs();
        let mut t = toy_trainer(0.5);
        let before = t.model.clone();
        t.evaluate(&data).unwrap();
        assert_eq!(t.model, before);
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let data = toy_pairs();
        let mut t = toy_trainer(0.0);
        t.optimizer.steps = 3;
        t.run(&data, &data[..2], None).unwrap();
        let ck = t.checkpoint();
        let bytes = to_bytes(&ck);
        assert_eq!(from_bytes(&bytes, None).unwrap(), ck);

        assert!(matches!(from_bytes(b"NOTACKPT....", None), Err(CheckpointError::BadMagic)));
        let mut v2 = bytes.clone();
        v2[MAGIC.len()] = 9;
        assert!(matches!(from_bytes(&v2, None), Err(CheckpointError::Version { found: 9, .. })));
        for cut in [MAGIC.len() + 2, MAGIC.len() + 20, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut], None), Err(CheckpointError::Corrupt(_))), "cut {cut}");
        }
        let mut bigger = ck.config.clone();
        bigger.emb_dim = 12;
        match from_bytes(&bytes, Some(&bigger)) {
            Err(CheckpointError::ShapeMismatch { name, .. }) => assert_eq!(name, "param/src_emb"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_pairs();
        let mut t = toy_trainer(0.0);
        let recs = t.run(&data, &data[..4], Some(dir.path())).unwrap();
        let log = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(log.lines().count(), recs.len());
        let first: MetricRecord = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!(first, recs[0]);
        assert_eq!(recs.iter().filter(|r| r.dev_rouge2.is_some()).count(), 2);
        let last = load_checkpoint(&dir.path().join("last.ckpt")).unwrap();
        assert_eq!(last.state.step, 12);
        assert!(load_checkpoint(&dir.path().join("best.ckpt")).is_ok());
    }
}
