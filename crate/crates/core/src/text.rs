//! Corpus normalization, vocabularies, id encoding and batching.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use unicode_properties::{GeneralCategory, UnicodeGeneralCategory};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Debug, Error)]
pub enum TextError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty token sequence")]
    EmptySequence,
    #[error("min_count must be at least 1")]
    InvalidMinCount,
    #[error("padding id inside a sequence at position {0}")]
    InteriorPad(usize),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: TokenId, size: usize },
    #[error("corpus files are not line-aligned: {source_lines} source lines vs {target_lines} target lines")]
    Misaligned { source_lines: usize, target_lines: usize },
    #[error("line {line}: {reason}")]
    BadLine { line: usize, reason: String },
    #[error("invalid vocabulary file: {0}")]
    BadVocabulary(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TextError + '_ {
    move |source| TextError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Lowercases and replaces every decimal digit (Unicode `Nd`) with `#`.
pub fn normalize_token(token: &str) -> String {
    token
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| {
            if c.general_category() == GeneralCategory::DecimalNumber {
                '#'
            } else {
                c
            }
        })
        .collect()
}

pub fn normalize_token_stream<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens.iter().map(|t| normalize_token(t.as_ref())).collect()
}

/// Whitespace-splits and normalizes one line.
pub fn normalize_line(line: &str) -> Vec<String> {
    line.split_whitespace().map(normalize_token).collect()
}

/// Token ↔ id bijection. Ids 0–3 are the specials.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_count` times, ordered by descending
    /// frequency and then lexicographically.
    pub fn build<I, S>(corpus: I, min_count: usize) -> Result<Self, TextError>
    where
        I: IntoIterator,
        I::Item: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if min_count == 0 {
            return Err(TextError::InvalidMinCount);
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut seen_any = false;
        for seq in corpus {
            for tok in seq {
                seen_any = true;
                let tok = tok.as_ref();
                if SPECIALS.contains(&tok) {
                    continue;
                }
                *counts.entry(tok.to_string()).or_default() += 1;
            }
        }
        if !seen_any {
            return Err(TextError::EmptyCorpus);
        }
        let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_words(kept.into_iter().map(|(t, _)| t)))
    }

    /// Vocabulary of the specials followed by `words` in the given order.
    /// Duplicates and specials in `words` are skipped.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.push(s.to_string());
        }
        for w in words {
            let w = w.into();
            if !v.index.contains_key(&w) {
                v.push(w);
            }
        }
        v
    }

    fn push(&mut self, tok: String) {
        self.index.insert(tok.clone(), self.tokens.len() as TokenId);
        self.tokens.push(tok);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or [`UNK`] when absent.
    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; line number − 1 is the id.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self, TextError> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIALS.len() || lines[..SPECIALS.len()] != SPECIALS {
            return Err(TextError::BadVocabulary(format!(
                "first four lines must be {}",
                SPECIALS.join(", ")
            )));
        }
        let mut v = Self::from_words(std::iter::empty::<String>());
        for (i, l) in lines.iter().enumerate().skip(SPECIALS.len()) {
            if l.is_empty() || l.chars().any(char::is_whitespace) {
                return Err(TextError::BadVocabulary(format!("line {}: invalid token {l:?}", i + 1)));
            }
            if v.index.contains_key(*l) {
                return Err(TextError::BadVocabulary(format!("line {}: duplicate token {l:?}", i + 1)));
            }
            v.push(l.to_string());
        }
        Ok(v)
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Source,
    Target,
}

/// Nonempty id sequence without interior padding.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<TokenId>);

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Result<Self, TextError> {
        if ids.is_empty() {
            return Err(TextError::EmptySequence);
        }
        if let Some(p) = ids.iter().position(|i| *i == PAD) {
            return Err(TextError::InteriorPad(p));
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.0
    }

    /// Ids with a trailing [`EOS`] removed.
    pub fn without_eos(&self) -> &[TokenId] {
        match self.0.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.0,
        }
    }

    pub fn check_range(&self, vocab_size: usize) -> Result<(), TextError> {
        match self.0.iter().find(|i| **i as usize >= vocab_size) {
            Some(id) => Err(TextError::IdOutOfRange {
                id: *id,
                size: vocab_size,
            }),
            None => Ok(()),
        }
    }
}

/// Maps tokens to ids (OOV → UNK); target sequences get a trailing EOS.
pub fn encode_sequence<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, role: Role) -> Result<TokenSequence, TextError> {
    if tokens.is_empty() {
        return Err(TextError::EmptySequence);
    }
    let mut ids: Vec<TokenId> = tokens.iter().map(|t| vocab.id(t.as_ref())).collect();
    if role == Role::Target {
        ids.push(EOS);
    }
    TokenSequence::new(ids)
}

/// Maps ids back to tokens, stopping at the first EOS. PAD and BOS are
/// skipped.
pub fn decode_ids(ids: &[TokenId], vocab: &Vocabulary) -> Vec<String> {
    ids.iter()
        .take_while(|i| **i != EOS)
        .filter(|i| **i != PAD && **i != BOS)
        .map(|i| vocab.token(*i).unwrap_or(SPECIALS[UNK as usize]).to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Pair {
    pub source: TokenSequence,
    pub target: TokenSequence,
}

/// Padded id grids with masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Position of this batch in the stream it came from.
    pub index: usize,
    pub source: Vec<Vec<TokenId>>,
    pub source_mask: Vec<Vec<bool>>,
    pub target: Vec<Vec<TokenId>>,
    pub target_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn from_pairs(index: usize, pairs: &[&Pair]) -> Self {
        let (source, source_mask) = pad_grid(pairs.iter().map(|p| p.source.ids()));
        let (target, target_mask) = pad_grid(pairs.iter().map(|p| p.target.ids()));
        Self {
            index,
            source,
            source_mask,
            target,
            target_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Unpadded source ids of row `i`.
    pub fn source_row(&self, i: usize) -> &[TokenId] {
        unpad(&self.source[i], &self.source_mask[i])
    }

    pub fn target_row(&self, i: usize) -> &[TokenId] {
        unpad(&self.target[i], &self.target_mask[i])
    }
}

fn unpad<'a>(ids: &'a [TokenId], mask: &[bool]) -> &'a [TokenId] {
    let n = mask.iter().take_while(|m| **m).count();
    &ids[..n]
}

fn pad_grid<'a>(rows: impl Iterator<Item = &'a [TokenId]> + Clone) -> (Vec<Vec<TokenId>>, Vec<Vec<bool>>) {
    let width = rows.clone().map(<[TokenId]>::len).max().unwrap_or(0);
    rows.map(|r| {
        let mut ids = r.to_vec();
        let mut mask = vec![true; r.len()];
        ids.resize(width, PAD);
        mask.resize(width, false);
        (ids, mask)
    })
    .unzip()
}

/// Shuffles with `seed`, stably sorts by source length, slices into batches of
/// `batch_size`, then shuffles batch order.
pub fn make_batches(pairs: &[Pair], batch_size: usize, seed: u64) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|i| pairs[*i].source.len());
    let mut chunks: Vec<&[usize]> = order.chunks(batch_size).collect();
    chunks.shuffle(&mut rng);
    chunks
        .into_iter()
        .enumerate()
        .map(|(k, idx)| {
            let rows: Vec<&Pair> = idx.iter().map(|i| &pairs[*i]).collect();
            Batch::from_pairs(k, &rows)
        })
        .collect()
}

/// Source and target tokens of one line pair.
pub type TextPair = (Vec<String>, Vec<String>);

/// Reads line-aligned source/target files (one whitespace-tokenized sentence
/// per line).
pub fn read_parallel(source: &Path, target: &Path) -> Result<Vec<TextPair>, TextError> {
    let src = read_lines(source)?;
    let tgt = read_lines(target)?;
    if src.len() != tgt.len() {
        return Err(TextError::Misaligned {
            source_lines: src.len(),
            target_lines: tgt.len(),
        });
    }
    Ok(src.into_iter().zip(tgt).collect())
}

/// Whitespace-split lines of a UTF-8 file.
pub fn read_lines(path: &Path) -> Result<Vec<Vec<String>>, TextError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

/// Encodes an aligned corpus. Lines whose source has fewer than
/// `min_source_len` tokens are dropped; an empty line on either side is an
/// error naming the (1-based) line.
pub fn encode_corpus(
    lines: &[TextPair],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    min_source_len: usize,
) -> Result<Vec<Pair>, TextError> {
    let mut out = Vec::with_capacity(lines.len());
    for (i, (s, t)) in lines.iter().enumerate() {
        if !s.is_empty() && s.len() < min_source_len {
            continue;
        }
        let bad = |side: &str| TextError::BadLine {
            line: i + 1,
            reason: format!("empty {side}"),
        };
        let source = encode_sequence(s, src_vocab, Role::Source).map_err(|_| bad("source"))?;
        let target = encode_sequence(t, tgt_vocab, Role::Target).map_err(|_| bad("target"))?;
        out.push(Pair { source, target });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_token_stream(&["Kim", "Young-Sam"]), toks("kim young-sam"));
        assert_eq!(normalize_token("1994"), "####");
        assert_eq!(normalize_token_stream::<&str>(&[]), Vec::<String>::new());
        // Arabic-Indic and fullwidth digits are decimal digits too
        assert_eq!(normalize_token("٣x９"), "#x#");
        // Roman numeral Ⅻ is a letter number, not a decimal digit
        assert_eq!(normalize_token("Ⅻ"), "ⅻ");
    }

    #[test]
    fn vocabulary_threshold_and_order() {
        let corpus = vec![toks("a a a b b"), toks("a a b b c"), toks("d")];
        let v = Vocabulary::build(&corpus, 5).unwrap();
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
        assert_eq!(v.len(), 5);

        let v = Vocabulary::build(&corpus, 1).unwrap();
        // a:5, b:4, then c and d tie at 1 and sort lexicographically
        assert_eq!(&v.tokens()[4..], &toks("a b c d")[..]);

        let v = Vocabulary::build(vec![toks("x")], 1).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(&v.tokens()[..4], &SPECIALS.map(String::from)[..]);
    }

    #[test]
    fn vocabulary_errors() {
        assert!(matches!(
            Vocabulary::build(Vec::<Vec<String>>::new(), 1),
            Err(TextError::EmptyCorpus)
        ));
        assert!(matches!(
            Vocabulary::build(vec![toks("a")], 0),
            Err(TextError::InvalidMinCount)
        ));
    }

    #[test]
    fn specials_in_corpus_are_not_counted() {
        let v = Vocabulary::build(vec![toks("<unk> <unk> a")], 1).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("<unk>"), UNK);
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let v = Vocabulary::from_words(["kim", "leaves"]);
        let text = v.to_file_string();
        assert!(text.starts_with("<pad>\n<s>\n</s>\n<unk>\nkim\n"));
        assert_eq!(Vocabulary::parse(&text).unwrap(), v);
        assert!(Vocabulary::parse("kim\nleaves\n").is_err());
        assert!(Vocabulary::parse("<pad>\n<s>\n</s>\n<unk>\na\na\n").is_err());
    }

    #[test]
    fn encode_examples() {
        let v = Vocabulary::from_words(["kim", "leaves"]);
        let seq = encode_sequence(&["kim", "leaves"], &v, Role::Target).unwrap();
        assert_eq!(seq.ids(), &[v.id("kim"), v.id("leaves"), EOS]);
        assert_eq!(encode_sequence(&["zzz-unseen"], &v, Role::Source).unwrap().ids(), &[UNK]);
        assert_eq!(encode_sequence(&["zzz-unseen"], &v, Role::Target).unwrap().ids(), &[UNK, EOS]);
        assert!(matches!(
            encode_sequence::<&str>(&[], &v, Role::Source),
            Err(TextError::EmptySequence)
        ));
        assert_eq!(decode_ids(seq.ids(), &v), toks("kim leaves"));
    }

    #[test]
    fn token_sequence_rejects_interior_pad() {
        assert!(matches!(TokenSequence::new(vec![5, 0, 6]), Err(TextError::InteriorPad(1))));
        assert!(TokenSequence::new(vec![5, 6]).unwrap().check_range(6).is_err());
    }

    fn pairs_of(lens: &[(usize, usize)]) -> Vec<Pair> {
        lens.iter()
            .enumerate()
            .map(|(k, (n, l))| Pair {
                source: TokenSequence::new((0..*n).map(|i| 4 + ((i + k) % 7) as TokenId).collect()).unwrap(),
                target: TokenSequence::new(
                    (0..*l).map(|i| 4 + ((i * 3 + k) % 5) as TokenId).chain([EOS]).collect(),
                )
                .unwrap(),
            })
            .collect()
    }

    #[test]
    fn batches_cover_input_with_correct_masks() {
        let pairs = pairs_of(&[(3, 2), (5, 1), (1, 4)]);
        let batches = make_batches(&pairs, 2, 9);
        let mut sizes: Vec<usize> = batches.iter().map(Batch::len).collect();
        sizes.sort();
        assert_eq!(sizes, vec![1, 2]);
        for b in &batches {
            for i in 0..b.len() {
                let src_len = b.source[i].iter().take_while(|t| **t != PAD).count();
                let tgt_len = b.target[i].iter().take_while(|t| **t != PAD).count();
                assert_eq!(b.source_mask[i].iter().filter(|m| **m).count(), src_len);
                assert_eq!(b.target_mask[i].iter().filter(|m| **m).count(), tgt_len);
                assert!(src_len >= 1);
                assert_eq!(*b.target_row(i).last().unwrap(), EOS);
            }
        }
        assert_eq!(make_batches(&pairs, 2, 9), batches);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,12}") {
            let once = normalize_token(&s);
            prop_assert_eq!(normalize_token(&once), once.clone());
            prop_assert_eq!(normalize_line(&format!("{s} {s}")).len(), s.split_whitespace().count() * 2);
        }

        #[test]
        fn encoded_ids_are_in_range(words in prop::collection::vec("[a-e]{1,3}", 1..10)) {
            let v = Vocabulary::build(vec![words[..words.len() / 2 + 1].to_vec()], 1).unwrap();
            let seq = encode_sequence(&words, &v, Role::Target).unwrap();
            prop_assert!(seq.ids().iter().all(|i| (*i as usize) < v.len()));
        }

        #[test]
        fn batches_preserve_pair_multiset(
            lens in prop::collection::vec((1usize..8, 1usize..6), 1..30),
            bs in 1usize..9,
            seed in any::<u64>(),
        ) {
            let pairs = pairs_of(&lens);
            let batches = make_batches(&pairs, bs, seed);
            let mut seen: Vec<(Vec<TokenId>, Vec<TokenId>)> = batches
                .iter()
                .flat_map(|b| (0..b.len()).map(move |i| (b.source_row(i).to_vec(), b.target_row(i).to_vec())))
                .collect();
            let mut want: Vec<(Vec<TokenId>, Vec<TokenId>)> =
                pairs.iter().map(|p| (p.source.ids().to_vec(), p.target.ids().to_vec())).collect();
            seen.sort();
            want.sort();
            prop_assert_eq!(seen, want);
            prop_assert!(batches.iter().all(|b| b.len() <= bs && !b.is_empty()));
        }
    }
}
