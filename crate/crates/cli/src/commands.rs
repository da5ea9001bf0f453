use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use seass::decode::decode_corpus;
use seass::io::write_atomic;
use seass::model::{ModelParams, Seass};
use seass::rouge::{load_references, score_corpus};
use seass::saliency::{saliency_map, to_csv};
use seass::synth::generate;
use seass::text::{
    decode_ids, encode_corpus, encode_sequence, normalize_line, read_lines, read_parallel, Role, TokenId, Vocabulary, EOS,
};
use seass::train::{load_checkpoint, Trainer};

use crate::config::RunConfig;

/// A required path was not supplied; reported as a usage error.
#[derive(Debug, thiserror::Error)]
#[error("missing {flag} (or config key paths.{key})")]
pub struct MissingPath {
    flag: &'static str,
    key: &'static str,
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &'static str, key: &'static str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| MissingPath { flag, key }.into())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn preprocess(cfg: &RunConfig) -> Result<()> {
    let src = require(&cfg.paths.src, "--src", "src")?;
    let tgt = require(&cfg.paths.tgt, "--tgt", "tgt")?;
    let out = require(&cfg.paths.out, "--out", "out")?;
    let read = |p: &Path| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
    let (src_text, tgt_text) = (read(src)?, read(tgt)?);
    let (s_lines, t_lines): (Vec<&str>, Vec<&str>) = (src_text.lines().collect(), tgt_text.lines().collect());
    if s_lines.len() != t_lines.len() {
        bail!("{} has {} lines but {} has {}", src.display(), s_lines.len(), tgt.display(), t_lines.len());
    }
    let mut kept = Vec::new();
    for (s, t) in s_lines.iter().zip(&t_lines) {
        let (s, t) = (normalize_line(s), normalize_line(t));
        if s.len() >= cfg.text.min_source_len.max(1) && !t.is_empty() {
            kept.push((s, t));
        }
    }
    if kept.is_empty() {
        bail!("no sentence pairs left after filtering");
    }
    let sv = Vocabulary::build(kept.iter().map(|p| &p.0), cfg.text.min_count)?;
    let tv = Vocabulary::build(kept.iter().map(|p| &p.1), cfg.text.min_count)?;
    create_dir(out)?;
    let join = |side: usize| -> String {
        kept.iter()
            .map(|p| if side == 0 { p.0.join(" ") } else { p.1.join(" ") } + "\n")
            .collect()
    };
    write(&out.join("train.src"), join(0).as_bytes())?;
    write(&out.join("train.tgt"), join(1).as_bytes())?;
    write(&out.join("vocab.src"), sv.to_file_string().as_bytes())?;
    write(&out.join("vocab.tgt"), tv.to_file_string().as_bytes())?;
    eprintln!(
        "kept {} of {} pairs; vocabularies {} / {}",
        kept.len(),
        s_lines.len(),
        sv.len(),
        tv.len()
    );
    Ok(())
}

pub fn gen_synth(cfg: &RunConfig) -> Result<()> {
    let out = require(&cfg.paths.out, "--out", "out")?;
    let mut spec = cfg.synth.clone();
    spec.seed = cfg.seed;
    let corpus = generate(&spec)?;
    corpus.write(out)?;
    eprintln!(
        "wrote {} / {} / {} pairs to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        out.display()
    );
    Ok(())
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::load(path).with_context(|| format!("loading vocabulary {}", path.display()))
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let out = require(&cfg.paths.out, "--out", "out")?;
    let train_text = read_parallel(require(&cfg.paths.src, "--src", "src")?, require(&cfg.paths.tgt, "--tgt", "tgt")?)?;
    let dev_text = read_parallel(
        require(&cfg.paths.dev_src, "--dev-src", "dev_src")?,
        require(&cfg.paths.dev_tgt, "--dev-tgt", "dev_tgt")?,
    )?;
    let sv = match &cfg.paths.vocab_src {
        Some(p) => load_vocab(p)?,
        None => Vocabulary::build(train_text.iter().map(|p| &p.0), cfg.text.min_count)?,
    };
    let tv = match &cfg.paths.vocab_tgt {
        Some(p) => load_vocab(p)?,
        None => Vocabulary::build(train_text.iter().map(|p| &p.1), cfg.text.min_count)?,
    };
    let train = encode_corpus(&train_text, &sv, &tv, 1).context("encoding training data")?;
    let dev = encode_corpus(&dev_text, &sv, &tv, 1).context("encoding dev data")?;

    let mut trainer = match &cfg.paths.checkpoint {
        Some(p) => {
            let ckpt = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
            if (ckpt.config.src_vocab, ckpt.config.tgt_vocab) != (sv.len(), tv.len()) {
                bail!(
                    "checkpoint vocabularies are {} / {} but the given ones have {} / {}",
                    ckpt.config.src_vocab,
                    ckpt.config.tgt_vocab,
                    sv.len(),
                    tv.len()
                );
            }
            let mut t = Trainer::from_checkpoint(ckpt)?;
            t.optimizer.steps = cfg.train.steps;
            t
        }
        None => {
            let mut mc = cfg.model.clone();
            mc.src_vocab = sv.len();
            mc.tgt_vocab = tv.len();
            Trainer::new(mc, cfg.train.clone(), cfg.seed)?
        }
    };
    create_dir(out)?;
    write(&out.join("vocab.src"), sv.to_file_string().as_bytes())?;
    write(&out.join("vocab.tgt"), tv.to_file_string().as_bytes())?;
    let records = trainer.run(&train, &dev, Some(out))?;
    let best = trainer.state.schedule.best.map_or("none".to_string(), |b| format!("{b:.4}"));
    eprintln!(
        "{} updates this run, now at step {}; best dev ROUGE-2 {best}; alpha {}",
        records.len(),
        trainer.state.step,
        trainer.state.schedule.alpha
    );
    Ok(())
}

struct Loaded {
    model: Seass,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
}

/// Loads a checkpoint and its vocabularies, which default to `vocab.src`
/// and `vocab.tgt` beside the checkpoint.
fn load_model(cfg: &RunConfig, gate_set: bool) -> Result<Loaded> {
    let path = require(&cfg.paths.checkpoint, "--checkpoint", "checkpoint")?;
    let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let mut config = ckpt.config;
    if gate_set {
        config.selective_gate = cfg.model.selective_gate;
    }
    let params = ModelParams::from_store(&config, ckpt.params)?;
    let model = Seass::new(config, params)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let vocab = |given: &Option<PathBuf>, name: &str| load_vocab(&given.clone().unwrap_or_else(|| dir.join(name)));
    let src_vocab = vocab(&cfg.paths.vocab_src, "vocab.src")?;
    let tgt_vocab = vocab(&cfg.paths.vocab_tgt, "vocab.tgt")?;
    if (src_vocab.len(), tgt_vocab.len()) != (model.config.src_vocab, model.config.tgt_vocab) {
        bail!(
            "vocabularies have {} / {} entries but the model expects {} / {}",
            src_vocab.len(),
            tgt_vocab.len(),
            model.config.src_vocab,
            model.config.tgt_vocab
        );
    }
    Ok(Loaded {
        model,
        src_vocab,
        tgt_vocab,
    })
}

fn encode_lines(path: &Path, vocab: &Vocabulary, role: Role) -> Result<Vec<Vec<TokenId>>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .map(|(i, toks)| {
            encode_sequence(toks, vocab, role)
                .map(|s| s.into_ids())
                .with_context(|| format!("{} line {}", path.display(), i + 1))
        })
        .collect()
}

fn summarize(cfg: &RunConfig, l: &Loaded, sources: &[Vec<TokenId>]) -> Result<Vec<seass::decode::Hypothesis>> {
    cfg.decode.validate()?;
    Ok(decode_corpus(&l.model, sources, &cfg.decode, cfg.greedy)?)
}

pub fn decode(cfg: &RunConfig, gate_set: bool) -> Result<()> {
    let loaded = load_model(cfg, gate_set)?;
    let sources = encode_lines(require(&cfg.paths.src, "--src", "src")?, &loaded.src_vocab, Role::Source)?;
    let hyps = summarize(cfg, &loaded, &sources)?;
    let text: String = hyps
        .iter()
        .map(|h| decode_ids(&h.tokens, &loaded.tgt_vocab).join(" ") + "\n")
        .collect();
    match &cfg.paths.out {
        Some(out) => write(out, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let cand_path = require(&cfg.paths.cand, "--cand", "cand")?;
    let candidates = read_lines(cand_path)?;
    let references = load_references(require(&cfg.paths.refs, "--refs", "refs")?)?;
    let mut eval = cfg.eval.clone();
    let lengths = match &cfg.paths.buckets {
        Some(_) => {
            let src = require(&cfg.paths.src, "--src", "src")?;
            eval.bucket_width.get_or_insert(4);
            Some(read_lines(src)?.iter().map(Vec::len).collect::<Vec<_>>())
        }
        None => None,
    };
    let report = score_corpus(&candidates, &references, &eval, lengths.as_deref())?;
    let json = serde_json::to_string_pretty(&report.to_json())? + "\n";
    print!("{json}");
    if let Some(out) = &cfg.paths.out {
        write(out, json.as_bytes())?;
    }
    if let (Some(path), Some(csv)) = (&cfg.paths.buckets, report.bucket_csv()) {
        write(path, csv.as_bytes())?;
    }
    Ok(())
}

pub fn saliency(cfg: &RunConfig, gate_set: bool) -> Result<()> {
    let out = require(&cfg.paths.out, "--out", "out")?;
    let loaded = load_model(cfg, gate_set)?;
    let src_path = require(&cfg.paths.src, "--src", "src")?;
    let words = read_lines(src_path)?;
    let sources = encode_lines(src_path, &loaded.src_vocab, Role::Source)?;
    let summaries: Vec<Vec<TokenId>> = match &cfg.paths.tgt {
        Some(t) => encode_lines(t, &loaded.tgt_vocab, Role::Target)?,
        None => summarize(cfg, &loaded, &sources)?
            .into_iter()
            .map(|h| {
                let mut g = h.generated();
                if g.last() != Some(&EOS) {
                    g.push(EOS);
                }
                g
            })
            .collect(),
    };
    if summaries.len() != sources.len() {
        bail!("{} source lines but {} summaries", sources.len(), summaries.len());
    }
    let maps = sources
        .iter()
        .zip(&summaries)
        .zip(words)
        .map(|((s, y), w)| saliency_map(&loaded.model, s, y, w))
        .collect::<Result<Vec<_>, _>>()?;
    create_dir(out)?;
    let mut jsonl = String::new();
    for m in &maps {
        jsonl += &serde_json::to_string(m)?;
        jsonl.push('\n');
    }
    write(&out.join("saliency.jsonl"), jsonl.as_bytes())?;
    write(&out.join("saliency.csv"), to_csv(&maps).as_bytes())?;
    eprintln!("wrote saliency for {} sentences to {}", maps.len(), out.display());
    Ok(())
}
