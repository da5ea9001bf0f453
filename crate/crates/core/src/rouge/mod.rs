//! ROUGE-1/2/L with clipped n-gram counts, LCS, byte capping, stemming,
//! max-over-references aggregation and a source-length bucket report.

mod porter;

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use porter::porter_stem;

#[derive(Debug, Error)]
pub enum RougeError {
    #[error("{candidates} candidate lines but {references} reference lines (first unmatched line {line})")]
    Misaligned { candidates: usize, references: usize, line: usize },
    #[error("line {line} has no reference")]
    NoReference { line: usize },
    #[error("{lengths} source lengths for {lines} lines")]
    LengthMismatch { lengths: usize, lines: usize },
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("unknown metric {0:?} (expected rouge1, rouge2 or rougeL)")]
    UnknownMetric(String),
    #[error("unknown mode {0:?} (expected f1 or recall)")]
    UnknownMode(String),
    #[error("no ref*.txt files in {0}")]
    NoReferenceFiles(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    /// Scores from an overlap count and the two totals; an empty total gives
    /// zero for that side.
    pub fn from_counts(overlap: usize, candidate_total: usize, reference_total: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(overlap, candidate_total);
        let recall = ratio(overlap, reference_total);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }

    pub fn get(&self, mode: ScoreMode) -> f64 {
        match mode {
            ScoreMode::F1 => self.f1,
            ScoreMode::Recall => self.recall,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "rouge1")]
    Rouge1,
    #[serde(rename = "rouge2")]
    Rouge2,
    #[serde(rename = "rougeL")]
    RougeL,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Rouge1, Metric::Rouge2, Metric::RougeL];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Rouge1 => "rouge1",
            Metric::Rouge2 => "rouge2",
            Metric::RougeL => "rougeL",
        }
    }

    pub fn score<S: AsRef<str>>(self, candidate: &[S], reference: &[S]) -> RougeScore {
        match self {
            Metric::Rouge1 => rouge_n(candidate, reference, 1),
            Metric::Rouge2 => rouge_n(candidate, reference, 2),
            Metric::RougeL => rouge_l(candidate, reference),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = RougeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rouge1" | "rouge-1" => Ok(Metric::Rouge1),
            "rouge2" | "rouge-2" => Ok(Metric::Rouge2),
            "rougel" | "rouge-l" => Ok(Metric::RougeL),
            _ => Err(RougeError::UnknownMetric(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    #[default]
    F1,
    Recall,
}

impl FromStr for ScoreMode {
    type Err = RougeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f1" => Ok(ScoreMode::F1),
            "recall" => Ok(ScoreMode::Recall),
            _ => Err(RougeError::UnknownMode(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub metrics: Vec<Metric>,
    pub mode: ScoreMode,
    pub byte_cap: Option<usize>,
    pub stem: bool,
    pub bucket_width: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metrics: Metric::ALL.to_vec(),
            mode: ScoreMode::F1,
            byte_cap: None,
            stem: false,
            bucket_width: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), RougeError> {
        if self.metrics.is_empty() {
            return Err(RougeError::Config("no metrics selected".into()));
        }
        if self.byte_cap == Some(0) {
            return Err(RougeError::Config("byte_cap must be positive".into()));
        }
        if self.bucket_width == Some(0) {
            return Err(RougeError::Config("bucket_width must be positive".into()));
        }
        Ok(())
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap.
pub fn rouge_n<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> RougeScore {
    assert!(n >= 1, "n-gram order must be at least 1");
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let overlap = cand
        .iter()
        .map(|(g, c)| refc.get(g).map_or(0, |r| (*c).min(*r)))
        .sum();
    RougeScore::from_counts(overlap, cand.values().sum(), refc.values().sum())
}

/// Length of the longest common subsequence.
pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> RougeScore {
    RougeScore::from_counts(lcs_len(candidate, reference), candidate.len(), reference.len())
}

/// Tokens lying wholly within the first `cap` bytes of the space-joined
/// sequence.
pub fn truncate_bytes<S: AsRef<str>>(tokens: &[S], cap: usize) -> Vec<&str> {
    let mut out = Vec::new();
    let mut end = 0;
    for (i, t) in tokens.iter().enumerate() {
        end += t.as_ref().len() + usize::from(i > 0);
        if end > cap {
            break;
        }
        out.push(t.as_ref());
    }
    out
}

fn prepare<S: AsRef<str>>(tokens: &[S], cap: Option<usize>, stem: bool) -> Vec<String> {
    let kept: Vec<&str> = match cap {
        Some(c) => truncate_bytes(tokens, c),
        None => tokens.iter().map(AsRef::as_ref).collect(),
    };
    kept.into_iter()
        .map(|t| if stem { porter_stem(t) } else { t.to_string() })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket_start: usize,
    pub bucket_end: usize,
    pub count: usize,
    pub mean_rouge2_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusReport {
    /// Mean over lines of the per-line best-reference score.
    pub scores: BTreeMap<Metric, RougeScore>,
    /// Per-line best-reference scores.
    pub per_line: Vec<BTreeMap<Metric, RougeScore>>,
    pub buckets: Option<Vec<BucketRow>>,
    pub mode: ScoreMode,
}

impl CorpusReport {
    pub fn get(&self, metric: Metric) -> Option<RougeScore> {
        self.scores.get(&metric).copied()
    }

    /// `{metric: {precision, recall, f1}}`
    pub fn to_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .scores
            .iter()
            .map(|(m, s)| (m.name().to_string(), serde_json::to_value(s).expect("plain floats")))
            .collect();
        serde_json::Value::Object(map)
    }

    pub fn bucket_csv(&self) -> Option<String> {
        let rows = self.buckets.as_ref()?;
        let mut out = String::from("bucket_start,bucket_end,count,mean_rouge2_f1\n");
        for r in rows {
            writeln!(out, "{},{},{},{}", r.bucket_start, r.bucket_end, r.count, r.mean_rouge2_f1).expect("string write");
        }
        Some(out)
    }
}

/// Scores line-aligned candidates against one or more references per line.
/// Per line, the reference with the best score under `cfg.mode` is kept;
/// corpus scores are means over lines. With `lengths`, also reports mean
/// ROUGE-2 F1 per source-length bucket.
pub fn score_corpus<S: AsRef<str>>(
    candidates: &[Vec<S>],
    references: &[Vec<Vec<S>>],
    cfg: &EvalConfig,
    lengths: Option<&[usize]>,
) -> Result<CorpusReport, RougeError> {
    cfg.validate()?;
    if candidates.len() != references.len() {
        return Err(RougeError::Misaligned {
            candidates: candidates.len(),
            references: references.len(),
            line: candidates.len().min(references.len()) + 1,
        });
    }
    if let Some(l) = lengths {
        if l.len() != candidates.len() {
            return Err(RougeError::LengthMismatch {
                lengths: l.len(),
                lines: candidates.len(),
            });
        }
    }
    let mut metrics = cfg.metrics.clone();
    if lengths.is_some() && !metrics.contains(&Metric::Rouge2) {
        metrics.push(Metric::Rouge2);
    }

    let mut per_line = Vec::with_capacity(candidates.len());
    for (i, (cand, refs)) in candidates.iter().zip(references).enumerate() {
        if refs.is_empty() {
            return Err(RougeError::NoReference { line: i + 1 });
        }
        let cand = prepare(cand, cfg.byte_cap, cfg.stem);
        let refs: Vec<Vec<String>> = refs.iter().map(|r| prepare(r, None, cfg.stem)).collect();
        let mut line = BTreeMap::new();
        for &m in &metrics {
            let mut best: Option<RougeScore> = None;
            for r in &refs {
                let s = m.score(&cand, r);
                if best.is_none_or(|b| s.get(cfg.mode) > b.get(cfg.mode)) {
                    best = Some(s);
                }
            }
            line.insert(m, best.expect("at least one reference"));
        }
        per_line.push(line);
    }

    let n = per_line.len().max(1) as f64;
    let mut scores = BTreeMap::new();
    for &m in &cfg.metrics {
        let mut acc = RougeScore::default();
        for line in &per_line {
            let s = line[&m];
            acc.precision += s.precision;
            acc.recall += s.recall;
            acc.f1 += s.f1;
        }
        scores.insert(
            m,
            RougeScore {
                precision: acc.precision / n,
                recall: acc.recall / n,
                f1: acc.f1 / n,
            },
        );
    }

    let buckets = lengths.map(|lens| {
        let width = cfg.bucket_width.unwrap_or(4);
        let mut groups: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
        for (len, line) in lens.iter().zip(&per_line) {
            let e = groups.entry(len / width * width).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += line[&Metric::Rouge2].f1;
        }
        groups
            .into_iter()
            .map(|(start, (count, sum))| BucketRow {
                bucket_start: start,
                bucket_end: start + width - 1,
                count,
                mean_rouge2_f1: sum / count as f64,
            })
            .collect()
    });

    Ok(CorpusReport {
        scores,
        per_line,
        buckets,
        mode: cfg.mode,
    })
}

fn read_token_lines(path: &Path) -> Result<Vec<Vec<String>>, RougeError> {
    let text = std::fs::read_to_string(path).map_err(|source| RougeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

/// Loads a reference set: either a single file, or a directory holding
/// `ref0.txt`, `ref1.txt`, ... with one reference per line. Returns one
/// list of references per line.
pub fn load_references(path: &Path) -> Result<Vec<Vec<Vec<String>>>, RougeError> {
    if !path.is_dir() {
        return Ok(read_token_lines(path)?.into_iter().map(|l| vec![l]).collect());
    }
    let entries = std::fs::read_dir(path).map_err(|source| RougeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut files: Vec<(usize, PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| RougeError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(k) = name.strip_prefix("ref").and_then(|r| r.strip_suffix(".txt")).and_then(|k| k.parse().ok()) {
            files.push((k, entry.path()));
        }
    }
    if files.is_empty() {
        return Err(RougeError::NoReferenceFiles(path.to_path_buf()));
    }
    files.sort();
    let mut out: Vec<Vec<Vec<String>>> = Vec::new();
    for (k, (_, file)) in files.iter().enumerate() {
        let lines = read_token_lines(file)?;
        if k == 0 {
            out = lines.into_iter().map(|l| vec![l]).collect();
            continue;
        }
        if lines.len() != out.len() {
            return Err(RougeError::Misaligned {
                candidates: out.len(),
                references: lines.len(),
                line: out.len().min(lines.len()) + 1,
            });
        }
        for (slot, l) in out.iter_mut().zip(lines) {
            slot.push(l);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bigram_example() {
        let s = rouge_n(&toks("the cat on the mat"), &toks("the cat sat on the mat"), 2);
        assert!((s.recall - 3.0 / 5.0).abs() < 1e-12);
        assert!((s.precision - 3.0 / 4.0).abs() < 1e-12);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn lcs_example() {
        let s = rouge_l(&toks("police kill the gunman"), &toks("police killed the gunman"));
        assert_eq!(lcs_len(&toks("police kill the gunman"), &toks("police killed the gunman")), 3);
        assert_eq!(s.recall, 0.75);
        assert_eq!(s.precision, 0.75);
    }

    #[test]
    fn identity_and_disjoint() {
        let a = toks("a b c d");
        for m in Metric::ALL {
            let s = m.score(&a, &a);
            assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
            let z = m.score(&a, &toks("e f g"));
            assert_eq!((z.precision, z.recall, z.f1), (0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn empty_sides_score_zero() {
        let e: Vec<&str> = vec![];
        assert_eq!(rouge_l(&e, &toks("a b")), RougeScore::default());
        assert_eq!(rouge_n(&toks("a"), &toks("a"), 2), RougeScore::default());
    }

    #[test]
    fn clipping_limits_repeats() {
        let s = rouge_n(&toks("the the the"), &toks("the cat"), 1);
        assert!((s.precision - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.recall, 0.5);
    }

    #[test]
    fn truncation_keeps_whole_tokens() {
        let t = toks("abc de fghij");
        assert_eq!(truncate_bytes(&t, 6), vec!["abc", "de"]);
        assert_eq!(truncate_bytes(&t, 5), vec!["abc"]);
        assert_eq!(truncate_bytes(&t, 100), t);
    }

    #[test]
    fn max_over_references() {
        let cands = vec![toks("a b c")];
        let refs = vec![vec![toks("x y"), toks("a b c")]];
        let r = score_corpus(&cands, &refs, &EvalConfig::default(), None).unwrap();
        for m in Metric::ALL {
            assert_eq!(r.get(m).unwrap().f1, 1.0);
        }
    }

    #[test]
    fn misalignment_names_line() {
        let cands = vec![toks("a"), toks("b")];
        let refs = vec![vec![toks("a")]];
        match score_corpus(&cands, &refs, &EvalConfig::default(), None) {
            Err(RougeError::Misaligned { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stemming_applies_to_both_sides() {
        let cands = vec![toks("police kill the gunman")];
        let refs = vec![vec![toks("police killed the gunman")]];
        let cfg = EvalConfig {
            stem: true,
            ..EvalConfig::default()
        };
        let r = score_corpus(&cands, &refs, &cfg, None).unwrap();
        assert_eq!(r.get(Metric::RougeL).unwrap().f1, 1.0);
    }

    #[test]
    fn buckets_group_by_length() {
        let cands = vec![toks("a b"), toks("a c"), toks("x y")];
        let refs = vec![vec![toks("a b")], vec![toks("a b")], vec![toks("x y")]];
        let cfg = EvalConfig {
            bucket_width: Some(4),
            metrics: vec![Metric::Rouge1],
            ..EvalConfig::default()
        };
        let r = score_corpus(&cands, &refs, &cfg, Some(&[3, 2, 9])).unwrap();
        let b = r.buckets.clone().unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!((b[0].bucket_start, b[0].bucket_end, b[0].count), (0, 3, 2));
        assert_eq!(b[0].mean_rouge2_f1, 0.5);
        assert_eq!((b[1].bucket_start, b[1].count, b[1].mean_rouge2_f1), (8, 1, 1.0));
        assert!(r.bucket_csv().unwrap().starts_with("bucket_start,bucket_end,count,mean_rouge2_f1\n0,3,2,0.5\n"));
        assert!(r.to_json().get("rouge2").is_none());
    }

    #[test]
    fn json_report_shape() {
        let cands = vec![toks("a b")];
        let refs = vec![vec![toks("a b")]];
        let r = score_corpus(&cands, &refs, &EvalConfig::default(), None).unwrap();
        let j = r.to_json();
        assert_eq!(j["rouge2"]["f1"], 1.0);
        assert_eq!(j["rougeL"]["recall"], 1.0);
    }

    #[test]
    fn order_matters_for_bigrams_not_unigram_recall() {
        let r = toks("a b c d e");
        let shuffled = toks("e c a d b");
        assert_eq!(rouge_n(&shuffled, &r, 1).recall, 1.0);
        assert!(rouge_n(&shuffled, &r, 2).recall < 1.0);
        assert!(rouge_l(&shuffled, &r).recall < 1.0);
    }

    fn seq() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]).prop_map(String::from), 0..10)
    }

    proptest! {
        #[test]
        fn swapping_sides_swaps_precision_and_recall(a in seq(), b in seq(), n in 1usize..3) {
            for (x, y) in [(rouge_n(&a, &b, n), rouge_n(&b, &a, n)), (rouge_l(&a, &b), rouge_l(&b, &a))] {
                prop_assert_eq!(x.precision, y.recall);
                prop_assert_eq!(x.recall, y.precision);
                prop_assert!((x.f1 - y.f1).abs() < 1e-12);
            }
        }

        #[test]
        fn scores_in_unit_interval(a in seq(), b in seq()) {
            for m in Metric::ALL {
                let s = m.score(&a, &b);
                for v in [s.precision, s.recall, s.f1] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }

        #[test]
        fn extra_reference_never_lowers_line_score(c in seq(), r1 in seq(), r2 in seq()) {
            let cfg = EvalConfig::default();
            let one = score_corpus(std::slice::from_ref(&c), &[vec![r1.clone()]], &cfg, None).unwrap();
            let two = score_corpus(&[c], &[vec![r1, r2]], &cfg, None).unwrap();
            for m in Metric::ALL {
                prop_assert!(two.get(m).unwrap().f1 >= one.get(m).unwrap().f1);
            }
        }
    }
}
