//! WordPiece vocabulary training, encoding and model-input layout.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const MASK: TokenId = 4;
pub const NUM_SPECIAL: usize = 5;

/// Surface forms of the reserved tokens, in id order.
pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

pub const CONTINUATION_PREFIX: &str = "##";

/// Words longer than this (in characters) encode to `[UNK]`.
const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from a token list whose first five entries are the
    /// special tokens in id order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < NUM_SPECIAL {
            return Err(Error::InvalidVocab("missing special tokens".into()));
        }
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *special {
                return Err(Error::InvalidVocab(format!(
                    "line {} must be {special}, found {:?}",
                    i + 1,
                    tokens[i]
                )));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, token) in tokens.iter().enumerate() {
            if token.is_empty() || token.contains(char::is_whitespace) {
                return Err(Error::InvalidVocab(format!("line {}: bad token {token:?}", i + 1)));
            }
            if ids.insert(token.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidVocab(format!("line {}: duplicate token {token:?}", i + 1)));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < NUM_SPECIAL
    }

    /// One token per line, LF endings, line number = id.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for token in &self.tokens {
            out.push_str(token);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Vocab> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        Vocab::from_tokens(body.split('\n').map(str::to_string).collect())
    }

    /// Greedy longest-match-first WordPiece over whitespace-separated words.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            self.encode_word(word, &mut out);
        }
        out
    }

    /// Encodes one word, appending to `out`. Returns the number of pieces.
    pub fn encode_word(&self, word: &str, out: &mut Vec<TokenId>) -> usize {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            out.push(UNK);
            return 1;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        let mut candidate = String::new();
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                candidate.clear();
                if start > 0 {
                    candidate.push_str(CONTINUATION_PREFIX);
                }
                candidate.extend(&chars[start..end]);
                if let Some(id) = self.id(&candidate).filter(|&id| !Vocab::is_special(id)) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(UNK);
                    return 1;
                }
            }
        }
        let n = pieces.len();
        out.extend(pieces);
        n
    }

    /// Joins pieces back into text: continuation pieces attach to the
    /// previous piece, other pieces are separated by one space. Special
    /// tokens are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let token = self.token(id).ok_or(Error::UnknownTokenId(id))?;
            if Vocab::is_special(id) {
                continue;
            }
            match token.strip_prefix(CONTINUATION_PREFIX) {
                Some(rest) => out.push_str(rest),
                None => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(token);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordPieceTrainer {
    pub vocab_size: usize,
    pub min_frequency: u64,
}

impl Default for WordPieceTrainer {
    fn default() -> Self {
        WordPieceTrainer { vocab_size: 30_000, min_frequency: 2 }
    }
}

pub fn train_wordpiece(corpus: &Corpus, vocab_size: usize, min_frequency: u64) -> Result<Vocab> {
    WordPieceTrainer { vocab_size, min_frequency }.train(corpus)
}

struct Word {
    symbols: Vec<String>,
    count: u64,
}

type Pair = (String, String);

fn merged(pair: &Pair) -> String {
    let tail = pair.1.strip_prefix(CONTINUATION_PREFIX).unwrap_or(&pair.1);
    format!("{}{}", pair.0, tail)
}

/// Candidate ordering: highest count first, then lexicographically smallest
/// merged string, then the pair itself.
type Rank = (Reverse<u64>, String, String, String);

fn rank(pair: &Pair, count: u64) -> Rank {
    (Reverse(count), merged(pair), pair.0.clone(), pair.1.clone())
}

struct PairStats {
    counts: HashMap<Pair, u64>,
    where_: HashMap<Pair, BTreeSet<usize>>,
    queue: BTreeSet<Rank>,
}

impl PairStats {
    fn adjust(&mut self, pair: &Pair, word: usize, delta: i64) {
        let old = self.counts.get(pair).copied().unwrap_or(0);
        let new = (old as i64 + delta) as u64;
        if old > 0 {
            self.queue.remove(&rank(pair, old));
        }
        if new > 0 {
            self.queue.insert(rank(pair, new));
            self.counts.insert(pair.clone(), new);
        } else {
            self.counts.remove(pair);
        }
        if delta > 0 {
            self.where_.entry(pair.clone()).or_default().insert(word);
        }
    }

    fn add_word(&mut self, index: usize, word: &Word, sign: i64) {
        for w in word.symbols.windows(2) {
            self.adjust(&(w[0].clone(), w[1].clone()), index, sign * word.count as i64);
        }
    }
}

impl WordPieceTrainer {
    /// Frequency-driven WordPiece training.
    ///
    /// The alphabet is every character seen at least `min_frequency` times,
    /// in its word-initial form plus a `##` form for characters seen inside
    /// words. Merges then greedily join the most frequent adjacent pair
    /// (ties: lexicographically smallest merged string) until the vocabulary
    /// is full or no pair reaches `min_frequency`.
    pub fn train(&self, corpus: &Corpus) -> Result<Vocab> {
        let mut word_counts: BTreeMap<&str, u64> = BTreeMap::new();
        for sentence in corpus.documents.iter().flatten() {
            for word in sentence.split_whitespace() {
                *word_counts.entry(word).or_default() += 1;
            }
        }
        if word_counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }

        let mut char_freq: BTreeMap<char, u64> = BTreeMap::new();
        let mut inner_freq: BTreeMap<char, u64> = BTreeMap::new();
        for (word, &count) in &word_counts {
            for (i, c) in word.chars().enumerate() {
                *char_freq.entry(c).or_default() += count;
                if i > 0 {
                    *inner_freq.entry(c).or_default() += count;
                }
            }
        }
        let required = NUM_SPECIAL + char_freq.len();
        if self.vocab_size < required {
            return Err(Error::VocabTooSmall { requested: self.vocab_size, required });
        }

        let min_frequency = self.min_frequency.max(1);
        let kept: HashSet<char> = char_freq
            .iter()
            .filter(|&(_, &f)| f >= min_frequency)
            .map(|(&c, _)| c)
            .collect();

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut present: HashSet<String> = tokens.iter().cloned().collect();
        let mut push = |tokens: &mut Vec<String>, t: String| {
            if present.insert(t.clone()) {
                tokens.push(t);
            }
        };
        for c in char_freq.keys().filter(|c| kept.contains(c)) {
            push(&mut tokens, c.to_string());
        }
        let mut inner: Vec<(char, u64)> = inner_freq
            .iter()
            .filter(|(c, _)| kept.contains(c))
            .map(|(&c, &f)| (c, f))
            .collect();
        inner.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let inner_budget = self.vocab_size - tokens.len();
        let mut inner_kept: Vec<String> = inner
            .into_iter()
            .take(inner_budget)
            .map(|(c, _)| format!("{CONTINUATION_PREFIX}{c}"))
            .collect();
        inner_kept.sort();
        for t in inner_kept {
            push(&mut tokens, t);
        }

        let alphabet: HashSet<String> = tokens.iter().cloned().collect();
        let mut words: Vec<Word> = Vec::new();
        for (word, &count) in &word_counts {
            let symbols: Vec<String> = word
                .chars()
                .enumerate()
                .map(|(i, c)| if i == 0 { c.to_string() } else { format!("{CONTINUATION_PREFIX}{c}") })
                .collect();
            if symbols.iter().all(|s| alphabet.contains(s)) {
                words.push(Word { symbols, count });
            }
        }

        let mut stats = PairStats {
            counts: HashMap::new(),
            where_: HashMap::new(),
            queue: BTreeSet::new(),
        };
        for (i, word) in words.iter().enumerate() {
            stats.add_word(i, word, 1);
        }

        while tokens.len() < self.vocab_size {
            let Some(best) = stats.queue.first().cloned() else { break };
            let (Reverse(count), new_token, left, right) = best;
            if count < min_frequency {
                break;
            }
            let pair = (left, right);
            let affected: Vec<usize> = stats
                .where_
                .remove(&pair)
                .map(|s| s.into_iter().collect())
                .unwrap_or_default();
            for index in affected {
                let word = &words[index];
                if !word.symbols.windows(2).any(|w| w[0] == pair.0 && w[1] == pair.1) {
                    continue;
                }
                stats.add_word(index, &words[index], -1);
                let word = &mut words[index];
                let mut next = Vec::with_capacity(word.symbols.len());
                let mut i = 0;
                while i < word.symbols.len() {
                    if i + 1 < word.symbols.len()
                        && word.symbols[i] == pair.0
                        && word.symbols[i + 1] == pair.1
                    {
                        next.push(new_token.clone());
                        i += 2;
                    } else {
                        next.push(word.symbols[i].clone());
                        i += 1;
                    }
                }
                word.symbols = next;
                stats.add_word(index, &words[index], 1);
            }
            // Any remaining count belongs to words no longer holding the pair.
            if let Some(c) = stats.counts.remove(&pair) {
                stats.queue.remove(&rank(&pair, c));
            }
            push(&mut tokens, new_token);
        }

        Vocab::from_tokens(tokens)
    }
}

/// Fixed-length model input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedInput {
    pub token_ids: Vec<TokenId>,
    pub segment_ids: Vec<u32>,
    pub attention_mask: Vec<u32>,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of unpadded positions.
    pub fn active_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Checks the layout invariants: equal lengths, a 1-prefix attention
    /// mask, PAD exactly under mask 0, and segment ids non-decreasing over
    /// the unpadded prefix.
    pub fn validate(&self) -> Result<()> {
        let n = self.token_ids.len();
        if self.segment_ids.len() != n || self.attention_mask.len() != n {
            return Err(Error::InvalidInput("input arrays differ in length".into()));
        }
        let active = self.active_len();
        for i in 0..n {
            let expected = u32::from(i < active);
            if self.attention_mask[i] != expected {
                return Err(Error::InvalidInput("attention mask is not a prefix of ones".into()));
            }
            if (self.token_ids[i] == PAD) == (i < active) {
                return Err(Error::InvalidInput(format!("PAD/mask disagreement at position {i}")));
            }
            if self.segment_ids[i] > 1 {
                return Err(Error::InvalidInput(format!("segment id {} at {i}", self.segment_ids[i])));
            }
            if i > 0 && i < active && self.segment_ids[i] < self.segment_ids[i - 1] {
                return Err(Error::InvalidInput("segment 1 precedes segment 0".into()));
            }
        }
        Ok(())
    }
}

/// Trims `a` and `b` (from the end) until `len(a) + len(b) <= budget`,
/// always shortening the longer one; on a tie `b` is shortened.
pub fn truncate_longest_first(a: &mut Vec<TokenId>, b: &mut Vec<TokenId>, budget: usize) {
    while a.len() + b.len() > budget {
        if a.len() > b.len() {
            a.pop();
        } else {
            b.pop();
        }
    }
}

/// Lays out `[CLS] A [SEP]` or `[CLS] A [SEP] B [SEP]`, truncating longest
/// first and padding to `max_seq_len`.
pub fn build_input(
    tokens_a: &[TokenId],
    tokens_b: Option<&[TokenId]>,
    max_seq_len: usize,
) -> Result<EncodedInput> {
    let specials = if tokens_b.is_some() { 3 } else { 2 };
    if max_seq_len < 3 || max_seq_len < specials {
        return Err(Error::SeqLenTooSmall(max_seq_len));
    }
    let mut a = tokens_a.to_vec();
    let mut b = tokens_b.map(<[TokenId]>::to_vec).unwrap_or_default();
    truncate_longest_first(&mut a, &mut b, max_seq_len - specials);

    let mut token_ids = Vec::with_capacity(max_seq_len);
    let mut segment_ids = Vec::with_capacity(max_seq_len);
    token_ids.push(CLS);
    token_ids.extend_from_slice(&a);
    token_ids.push(SEP);
    segment_ids.resize(token_ids.len(), 0);
    if tokens_b.is_some() {
        token_ids.extend_from_slice(&b);
        token_ids.push(SEP);
        segment_ids.resize(token_ids.len(), 1);
    }
    let active = token_ids.len();
    let mut attention_mask = vec![1; active];
    token_ids.resize(max_seq_len, PAD);
    segment_ids.resize(max_seq_len, 0);
    attention_mask.resize(max_seq_len, 0);
    Ok(EncodedInput { token_ids, segment_ids, attention_mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab_with(extra: &[&str]) -> Vocab {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(extra.iter().map(|s| s.to_string()));
        Vocab::from_tokens(tokens).unwrap()
    }

    fn corpus(sentences: &[&str]) -> Corpus {
        Corpus { documents: vec![sentences.iter().map(|s| s.to_string()).collect()] }
    }

    #[test]
    fn two_char_corpus_trace() {
        // Word "اا" starts as [ا, ##ا]; the only pair merges into "اا".
        let vocab = train_wordpiece(&corpus(&["اا"]), 100, 1).unwrap();
        let expected: Vec<String> = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(["ا", "##ا", "اا"].map(String::from))
            .collect();
        assert_eq!(vocab.tokens(), expected.as_slice());
        assert_eq!(vocab.encode("اا"), vec![7]);
    }

    #[test]
    fn specials_only_budget_is_rejected() {
        let err = train_wordpiece(&corpus(&["اا"]), 5, 1).unwrap_err();
        assert!(matches!(err, Error::VocabTooSmall { requested: 5, required: 6 }));
    }

    #[test]
    fn empty_corpus_rejected() {
        let err = train_wordpiece(&Corpus::default(), 100, 1).unwrap_err();
        assert_eq!(err.to_string(), "empty training corpus");
    }

    #[test]
    fn training_is_deterministic() {
        let c = corpus(&["لعب الولد بالكرة", "الولد لعب", "كرة القدم لعبة"]);
        let a = train_wordpiece(&c, 60, 1).unwrap();
        let b = train_wordpiece(&c, 60, 1).unwrap();
        assert_eq!(a.to_file_string(), b.to_file_string());
        assert!(a.len() <= 60);
    }

    #[test]
    fn tie_break_is_lexicographic() {
        // Alphabet is 4 initial + 2 continuation units; one merge slot left, and
        // the pairs behind "اب" and "تث" tie at count 1.
        let vocab = train_wordpiece(&corpus(&["اب تث"]), NUM_SPECIAL + 6 + 1, 1).unwrap();
        assert_eq!(vocab.tokens().last().unwrap(), "اب");
    }

    #[test]
    fn min_frequency_filters_rare_chars() {
        let vocab = train_wordpiece(&corpus(&["اا اا بب"]), 100, 2).unwrap();
        assert!(vocab.id("ا").is_some());
        assert!(vocab.id("ب").is_some());
        assert!(vocab.id("اا").is_some());
        assert!(vocab.id("بب").is_none());
        let c = corpus(&["اا اا ج"]);
        let vocab = train_wordpiece(&c, 100, 2).unwrap();
        assert!(vocab.id("ج").is_none());
        assert_eq!(vocab.encode("ج"), vec![UNK]);
    }

    #[test]
    fn encode_examples() {
        let vocab = vocab_with(&["لع", "##ب", "ل", "##ع"]);
        assert!(vocab.encode("").is_empty());
        assert_eq!(vocab.encode("لعب"), vec![5, 6]);
        assert_eq!(vocab.encode("لعبx"), vec![UNK]);
        assert_eq!(vocab.decode(&[5, 6]).unwrap(), "لعب");
        assert_eq!(vocab.decode(&[]).unwrap(), "");
        assert_eq!(vocab.decode(&[CLS, 5, 6, SEP, 7, PAD]).unwrap(), "لعب ل");
        assert!(matches!(vocab.decode(&[99]), Err(Error::UnknownTokenId(99))));
    }

    #[test]
    fn vocab_file_is_bit_exact() {
        let vocab = vocab_with(&["ا", "##ب"]);
        let text = vocab.to_file_string();
        assert_eq!(text, "[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\nا\n##ب\n");
        assert_eq!(Vocab::parse(&text).unwrap(), vocab);
        assert!(Vocab::parse("[UNK]\n[PAD]\n[CLS]\n[SEP]\n[MASK]\n").is_err());
        assert!(Vocab::parse("[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\n[PAD]\n").is_err());
    }

    #[test]
    fn build_input_single() {
        let input = build_input(&[10, 11], None, 8).unwrap();
        assert_eq!(input.token_ids, vec![CLS, 10, 11, SEP, PAD, PAD, PAD, PAD]);
        assert_eq!(input.segment_ids, vec![0; 8]);
        assert_eq!(input.attention_mask, vec![1, 1, 1, 1, 0, 0, 0, 0]);
        input.validate().unwrap();
    }

    #[test]
    fn build_input_pair() {
        let input = build_input(&[10], Some(&[11]), 8).unwrap();
        assert_eq!(input.token_ids, vec![CLS, 10, SEP, 11, SEP, PAD, PAD, PAD]);
        assert_eq!(input.segment_ids, vec![0, 0, 0, 1, 1, 0, 0, 0]);
        input.validate().unwrap();
    }

    #[test]
    fn build_input_truncates_longest_first() {
        // 10 + 2 tokens, 8 slots of which 3 are specials: A loses 7 to reach 3.
        let a: Vec<TokenId> = (10..20).collect();
        let input = build_input(&a, Some(&[30, 31]), 8).unwrap();
        assert_eq!(input.token_ids, vec![CLS, 10, 11, 12, SEP, 30, 31, SEP]);
        assert_eq!(input.active_len(), 8);
    }

    #[test]
    fn build_input_rejects_tiny_len() {
        assert!(matches!(build_input(&[10], None, 2), Err(Error::SeqLenTooSmall(2))));
    }

    proptest! {
        #[test]
        fn build_input_invariants(
            a in prop::collection::vec(5u32..50, 0..20),
            b in prop::option::of(prop::collection::vec(5u32..50, 0..20)),
            max in 3usize..24,
        ) {
            let input = build_input(&a, b.as_deref(), max).unwrap();
            input.validate().unwrap();
            prop_assert_eq!(input.len(), max);
            let (mut ta, mut tb) = (a.clone(), b.clone().unwrap_or_default());
            let specials = if b.is_some() { 3 } else { 2 };
            truncate_longest_first(&mut ta, &mut tb, max - specials);
            let expected = 2 + ta.len() + if b.is_some() { 1 + tb.len() } else { 0 };
            prop_assert_eq!(input.active_len(), expected);
        }

        #[test]
        fn encode_decode_round_trip(words in prop::collection::vec("[ابتثج]{1,6}", 0..8)) {
            let c = corpus(&["ابتثج", "جثتبا"]);
            let vocab = train_wordpiece(&c, 40, 1).unwrap();
            let text = words.join("  ");
            let ids = vocab.encode(&text);
            prop_assert!(!ids.contains(&UNK));
            let decoded = vocab.decode(&ids).unwrap();
            prop_assert_eq!(&decoded, &words.join(" "));
            prop_assert_eq!(vocab.encode(&decoded), ids);
        }
    }
}
