//! Masked-LM and next-sentence-prediction example construction.

use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::tokenizer::{build_input, EncodedInput, TokenId, Vocab, CLS, MASK, NUM_SPECIAL, SEP};

/// Label value at positions that carry no MLM target.
pub const IGNORE_LABEL: i32 = -1;

pub const IS_NEXT: u8 = 1;
pub const NOT_NEXT: u8 = 0;

pub const DATASET_MAGIC: &[u8; 8] = b"DLMPRE01";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainExample {
    pub input: EncodedInput,
    pub mlm_labels: Vec<i32>,
    pub nsp_label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Every selected token becomes `[MASK]`.
    #[default]
    PaperLiteral,
    /// 80% `[MASK]`, 10% random token, 10% unchanged.
    #[serde(rename = "bert_80_10_10")]
    Bert801010,
}

impl std::str::FromStr for MaskMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper_literal" => Ok(MaskMode::PaperLiteral),
            "bert_80_10_10" => Ok(MaskMode::Bert801010),
            other => Err(format!("unknown mask mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingPolicy {
    pub mask_prob: f64,
    pub mode: MaskMode,
    pub seed: u64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy { mask_prob: 0.15, mode: MaskMode::PaperLiteral, seed: 0 }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::InvalidInput(format!("mask_prob {} outside [0, 1]", self.mask_prob)));
        }
        Ok(())
    }
}

/// Documents of sentences of token ids.
pub type TokenizedCorpus = Vec<Vec<Vec<TokenId>>>;

pub fn tokenize_corpus(corpus: &Corpus, vocab: &Vocab) -> TokenizedCorpus {
    corpus
        .documents
        .par_iter()
        .map(|doc| doc.iter().map(|s| vocab.encode(s)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NspPair {
    pub document: usize,
    pub index: usize,
    pub sentence_a: Vec<TokenId>,
    pub sentence_b: Vec<TokenId>,
    pub label: u8,
    /// Document the second sentence came from.
    pub b_document: usize,
}

/// Draws a sentence uniformly from every document except `exclude`.
fn sample_other(
    docs: &TokenizedCorpus,
    offsets: &[usize],
    exclude: usize,
    rng: &mut rng::StreamRng,
) -> Option<(usize, usize)> {
    let total = *offsets.last()?;
    let excluded = docs[exclude].len();
    let pool = total - excluded;
    if pool == 0 {
        return None;
    }
    let mut r = rng.random_range(0..pool);
    if r >= offsets[exclude] {
        r += excluded;
    }
    let doc = offsets.partition_point(|&o| o <= r) - 1;
    Some((doc, r - offsets[doc]))
}

/// Pairs every sentence with its successor. With probability `next_ratio`
/// the pair is kept as `IsNext`; otherwise the successor is replaced by a
/// uniformly drawn sentence from a different document and labelled
/// `NotNext`. Each document draws from its own `(seed, document)` stream.
pub fn make_nsp_pairs(docs: &TokenizedCorpus, next_ratio: f64, seed: u64) -> Result<Vec<NspPair>> {
    if !(0.0..=1.0).contains(&next_ratio) {
        return Err(Error::InvalidInput(format!("next_ratio {next_ratio} outside [0, 1]")));
    }
    if docs.iter().all(|d| d.len() < 2) {
        return Err(Error::NoNspPairs);
    }
    let mut offsets = Vec::with_capacity(docs.len() + 1);
    offsets.push(0);
    for d in docs {
        offsets.push(offsets.last().unwrap() + d.len());
    }

    let per_doc: Vec<Result<Vec<NspPair>>> = docs
        .par_iter()
        .enumerate()
        .map(|(d, sentences)| {
            let mut rng = rng::stream(seed, domain::NSP, d as u64);
            let mut pairs = Vec::with_capacity(sentences.len().saturating_sub(1));
            for i in 0..sentences.len().saturating_sub(1) {
                let is_next = rng.random::<f64>() < next_ratio;
                let (b_doc, b_idx, label) = if is_next {
                    (d, i + 1, IS_NEXT)
                } else {
                    let (bd, bi) =
                        sample_other(docs, &offsets, d, &mut rng).ok_or(Error::NoNegativeSource)?;
                    (bd, bi, NOT_NEXT)
                };
                pairs.push(NspPair {
                    document: d,
                    index: i,
                    sentence_a: sentences[i].clone(),
                    sentence_b: docs[b_doc][b_idx].clone(),
                    label,
                    b_document: b_doc,
                });
            }
            Ok(pairs)
        })
        .collect();

    let mut out = Vec::new();
    for pairs in per_doc {
        out.extend(pairs?);
    }
    Ok(out)
}

/// Selects each maskable position (attended, not CLS/SEP) with probability
/// `mask_prob` and corrupts it according to the policy's mode. Returns the
/// corrupted input and per-position labels (original id, or -1).
pub fn apply_mlm_mask(
    input: &EncodedInput,
    policy: &MaskingPolicy,
    vocab_size: usize,
    stream_index: u64,
) -> (EncodedInput, Vec<i32>) {
    let mut rng = rng::stream(policy.seed, domain::MASK, stream_index);
    let mut masked = input.clone();
    let mut labels = vec![IGNORE_LABEL; input.len()];
    for (i, &id) in input.token_ids.iter().enumerate() {
        if input.attention_mask[i] == 0 || id == CLS || id == SEP {
            continue;
        }
        if rng.random::<f64>() >= policy.mask_prob {
            continue;
        }
        labels[i] = id as i32;
        masked.token_ids[i] = match policy.mode {
            MaskMode::PaperLiteral => MASK,
            MaskMode::Bert801010 => {
                let r = rng.random::<f64>();
                if r < 0.8 {
                    MASK
                } else if r < 0.9 && vocab_size > NUM_SPECIAL {
                    rng.random_range(NUM_SPECIAL as TokenId..vocab_size as TokenId)
                } else {
                    id
                }
            }
        };
    }
    (masked, labels)
}

/// NSP pairing, then input layout, then masking. Examples come out ordered
/// by (document, pair index); example `k` is masked with stream `k`.
pub fn build_pretrain_dataset(
    corpus: &Corpus,
    vocab: &Vocab,
    policy: &MaskingPolicy,
    max_seq_len: usize,
    next_ratio: f64,
    seed: u64,
) -> Result<Vec<PretrainExample>> {
    policy.validate()?;
    let docs = tokenize_corpus(corpus, vocab);
    let pairs = make_nsp_pairs(&docs, next_ratio, seed)?;
    pairs
        .par_iter()
        .enumerate()
        .map(|(k, pair)| {
            let input = build_input(&pair.sentence_a, Some(&pair.sentence_b), max_seq_len)?;
            let (input, mlm_labels) = apply_mlm_mask(&input, policy, vocab.len(), k as u64);
            Ok(PretrainExample { input, mlm_labels, nsp_label: pair.label })
        })
        .collect()
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_i32s(out: &mut Vec<u8>, values: impl IntoIterator<Item = i32>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// `DLMPRE01` followed by one record per example. A record is a
/// little-endian u32 body length, then the body: u32 sequence length `L`,
/// then `L` i32 token ids, `L` segment ids, `L` attention-mask values, `L`
/// MLM labels, and one i32 NSP label.
pub fn encode_dataset(examples: &[PretrainExample]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    for ex in examples {
        let len = ex.input.len();
        put_u32(&mut out, (4 + 16 * len + 4) as u32);
        put_u32(&mut out, len as u32);
        put_i32s(&mut out, ex.input.token_ids.iter().map(|&v| v as i32));
        put_i32s(&mut out, ex.input.segment_ids.iter().map(|&v| v as i32));
        put_i32s(&mut out, ex.input.attention_mask.iter().map(|&v| v as i32));
        put_i32s(&mut out, ex.mlm_labels.iter().copied());
        put_i32s(&mut out, [i32::from(ex.nsp_label)]);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self) -> Result<u32> {
        let chunk = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| Error::CorruptDataset(format!("truncated at byte {}", self.pos)))?;
        self.pos += 4;
        Ok(u32::from_le_bytes(chunk.try_into().unwrap()))
    }

    fn i32s(&mut self, n: usize) -> Result<Vec<i32>> {
        (0..n).map(|_| self.u32().map(|v| v as i32)).collect()
    }
}

fn non_negative(values: Vec<i32>, what: &str) -> Result<Vec<u32>> {
    values
        .into_iter()
        .map(|v| u32::try_from(v).map_err(|_| Error::CorruptDataset(format!("negative {what}"))))
        .collect()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<PretrainExample>> {
    if bytes.len() < DATASET_MAGIC.len() || &bytes[..8] != DATASET_MAGIC {
        return Err(Error::NotADataset);
    }
    let mut r = Reader { bytes, pos: 8 };
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let body_len = r.u32()? as usize;
        let start = r.pos;
        let len = r.u32()? as usize;
        if body_len != 4 + 16 * len + 4 {
            return Err(Error::CorruptDataset(format!("record {} length mismatch", out.len())));
        }
        let token_ids = non_negative(r.i32s(len)?, "token id")?;
        let segment_ids = non_negative(r.i32s(len)?, "segment id")?;
        let attention_mask = non_negative(r.i32s(len)?, "mask value")?;
        let mlm_labels = r.i32s(len)?;
        let nsp = r.u32()?;
        if nsp > 1 {
            return Err(Error::CorruptDataset(format!("nsp label {nsp}")));
        }
        debug_assert_eq!(r.pos - start, body_len);
        let input = EncodedInput { token_ids, segment_ids, attention_mask };
        input.validate().map_err(|e| Error::CorruptDataset(e.to_string()))?;
        out.push(PretrainExample { input, mlm_labels, nsp_label: nsp as u8 });
    }
    Ok(out)
}

pub fn save_dataset(examples: &[PretrainExample], path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(examples)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Vec<PretrainExample>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{build_input, PAD};
    use proptest::prelude::*;

    fn synthetic_docs(n_docs: usize, per_doc: usize) -> TokenizedCorpus {
        (0..n_docs)
            .map(|d| (0..per_doc).map(|s| vec![(10 + d * per_doc + s) as TokenId]).collect())
            .collect()
    }

    #[test]
    fn nsp_degenerate_ratios() {
        let docs = synthetic_docs(3, 5);
        let all_next = make_nsp_pairs(&docs, 1.0, 1).unwrap();
        assert_eq!(all_next.len(), 12);
        for p in &all_next {
            assert_eq!(p.label, IS_NEXT);
            assert_eq!(p.sentence_b, docs[p.document][p.index + 1]);
        }
        let none_next = make_nsp_pairs(&docs, 0.0, 1).unwrap();
        for p in &none_next {
            assert_eq!(p.label, NOT_NEXT);
            assert_ne!(p.b_document, p.document);
        }
    }

    #[test]
    fn nsp_errors() {
        assert!(matches!(make_nsp_pairs(&synthetic_docs(3, 1), 0.5, 1), Err(Error::NoNspPairs)));
        assert!(matches!(make_nsp_pairs(&synthetic_docs(1, 4), 0.0, 1), Err(Error::NoNegativeSource)));
        assert_eq!(make_nsp_pairs(&synthetic_docs(1, 4), 1.0, 1).unwrap().len(), 3);
    }

    #[test]
    fn pair_count_is_sum_of_n_minus_one() {
        let docs: TokenizedCorpus = [1usize, 2, 7, 4, 1, 3]
            .iter()
            .enumerate()
            .map(|(d, &n)| (0..n).map(|s| vec![(10 + d * 10 + s) as TokenId]).collect())
            .collect();
        let expected: usize = docs.iter().map(|d| d.len() - 1).sum();
        assert_eq!(make_nsp_pairs(&docs, 0.5, 9).unwrap().len(), expected);
    }

    #[test]
    fn negatives_are_uniform_over_other_documents() {
        // Doc 0 has one pair; docs 1 and 2 hold 1 and 3 sentences. Negatives
        // must land on doc 2 about three times as often as on doc 1.
        let docs: TokenizedCorpus = vec![
            vec![vec![10], vec![11]],
            vec![vec![20]],
            vec![vec![30], vec![31], vec![32]],
        ];
        let mut hits = [0usize; 3];
        for seed in 0..4000 {
            let pairs = make_nsp_pairs(&docs, 0.0, seed).unwrap();
            hits[pairs[0].b_document] += 1;
        }
        assert_eq!(hits[0], 0);
        let ratio = hits[2] as f64 / hits[1] as f64;
        assert!((2.5..3.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn masking_degenerate_probabilities() {
        let input = build_input(&[10, 11, 12], Some(&[13, 14]), 12).unwrap();
        let zero = MaskingPolicy { mask_prob: 0.0, ..Default::default() };
        let (out, labels) = apply_mlm_mask(&input, &zero, 50, 0);
        assert_eq!(out, input);
        assert!(labels.iter().all(|&l| l == IGNORE_LABEL));

        let one = MaskingPolicy { mask_prob: 1.0, ..Default::default() };
        let (out, labels) = apply_mlm_mask(&input, &one, 50, 0);
        for i in 0..input.len() {
            let id = input.token_ids[i];
            if id == CLS || id == SEP || id == PAD {
                assert_eq!(out.token_ids[i], id);
                assert_eq!(labels[i], IGNORE_LABEL);
            } else {
                assert_eq!(out.token_ids[i], MASK);
                assert_eq!(labels[i], id as i32);
            }
        }
    }

    #[test]
    fn bert_mode_mixes_replacements() {
        let a: Vec<TokenId> = (0..400).map(|i| 10 + (i % 30)).collect();
        let input = build_input(&a, None, 402).unwrap();
        let policy = MaskingPolicy { mask_prob: 1.0, mode: MaskMode::Bert801010, seed: 3 };
        let (out, labels) = apply_mlm_mask(&input, &policy, 50, 0);
        let labelled: Vec<usize> = (0..out.len()).filter(|&i| labels[i] != IGNORE_LABEL).collect();
        assert_eq!(labelled.len(), 400);
        let masked = labelled.iter().filter(|&&i| out.token_ids[i] == MASK).count();
        let frac = masked as f64 / 400.0;
        assert!((0.72..0.88).contains(&frac), "{frac}");
        for &i in &labelled {
            assert!(out.token_ids[i] == MASK || out.token_ids[i] >= NUM_SPECIAL as TokenId);
        }
    }

    #[test]
    fn mask_mode_parses() {
        assert_eq!("paper_literal".parse::<MaskMode>().unwrap(), MaskMode::PaperLiteral);
        assert_eq!("bert_80_10_10".parse::<MaskMode>().unwrap(), MaskMode::Bert801010);
        assert!("other".parse::<MaskMode>().is_err());
    }

    fn tiny_corpus() -> (Corpus, Vocab) {
        let corpus = Corpus {
            documents: vec![
                vec!["اب تث".into(), "جح خد".into(), "ذر زس".into()],
                vec!["شص ضط".into(), "ظع غف".into()],
            ],
        };
        let vocab = crate::tokenizer::train_wordpiece(&corpus, 200, 1).unwrap();
        (corpus, vocab)
    }

    #[test]
    fn single_pair_dataset() {
        let corpus = Corpus { documents: vec![vec!["اب".into(), "تث".into()]] };
        let vocab = crate::tokenizer::train_wordpiece(&corpus, 200, 1).unwrap();
        let ds = build_pretrain_dataset(&corpus, &vocab, &MaskingPolicy::default(), 16, 1.0, 0).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds[0].nsp_label, IS_NEXT);
    }

    #[test]
    fn dataset_bytes_are_deterministic_and_round_trip() {
        let (corpus, vocab) = tiny_corpus();
        let policy = MaskingPolicy { mask_prob: 0.5, seed: 11, ..Default::default() };
        let a = build_pretrain_dataset(&corpus, &vocab, &policy, 12, 0.5, 5).unwrap();
        let b = build_pretrain_dataset(&corpus, &vocab, &policy, 12, 0.5, 5).unwrap();
        let bytes = encode_dataset(&a);
        assert_eq!(bytes, encode_dataset(&b));
        assert_eq!(&bytes[..8], b"DLMPRE01");
        assert_eq!(decode_dataset(&bytes).unwrap(), a);
        assert!(matches!(decode_dataset(b"DLMPRE02"), Err(Error::NotADataset)));
        assert!(matches!(decode_dataset(&bytes[..bytes.len() - 2]), Err(Error::CorruptDataset(_))));
    }

    proptest! {
        #[test]
        fn masking_never_touches_specials(
            a in prop::collection::vec(5u32..40, 1..12),
            b in prop::collection::vec(5u32..40, 1..12),
            p in 0.0f64..=1.0,
            seed in any::<u64>(),
            bert in any::<bool>(),
        ) {
            let input = build_input(&a, Some(&b), 20).unwrap();
            let mode = if bert { MaskMode::Bert801010 } else { MaskMode::PaperLiteral };
            let policy = MaskingPolicy { mask_prob: p, mode, seed };
            let (out, labels) = apply_mlm_mask(&input, &policy, 40, 0);
            for i in 0..input.len() {
                let id = input.token_ids[i];
                if id == CLS || id == SEP || input.attention_mask[i] == 0 {
                    prop_assert_eq!(labels[i], IGNORE_LABEL);
                    prop_assert_eq!(out.token_ids[i], id);
                }
                if labels[i] != IGNORE_LABEL {
                    prop_assert_eq!(labels[i], id as i32);
                    if !bert {
                        prop_assert_eq!(out.token_ids[i], MASK);
                    }
                } else {
                    prop_assert_eq!(out.token_ids[i], id);
                }
            }
            out.validate().unwrap();
        }
    }
}
