//! Downstream task datasets: loading, splitting and featurization.

use crate::corpus::clean_text;
use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::tokenizer::{build_input, EncodedInput, TokenId, Vocab};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Qa,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Classification => "classification",
            TaskKind::Qa => "qa",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(TaskKind::Classification),
            "qa" => Ok(TaskKind::Qa),
            _ => Err(Error::InvalidConfig(format!("unknown task {s:?}"))),
        }
    }
}

/// Number of classes the classification head predicts.
pub const CLASSIFICATION_ARITY: usize = 2;

pub fn default_label_set() -> Vec<String> {
    vec!["0".into(), "1".into()]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationExample {
    pub text: String,
    pub label: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassificationRecord {
    text: String,
    label: serde_json::Value,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads line-delimited `{text, label}` records. Labels may be strings or
/// integers and must belong to `label_set`. Blank lines are skipped.
pub fn load_classification_dataset(path: &Path, label_set: &[String]) -> Result<Vec<ClassificationExample>> {
    parse_classification(&read_text(path)?, label_set)
}

pub fn parse_classification(text: &str, label_set: &[String]) -> Result<Vec<ClassificationExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::BadRecord { line: line_no, reason };
        let record: ClassificationRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let label = match record.label {
            serde_json::Value::String(s) => s,
            serde_json::Value::Number(n) if n.is_i64() || n.is_u64() => n.to_string(),
            other => return Err(bad(format!("label must be a string or integer, got {other}"))),
        };
        if !label_set.contains(&label) {
            return Err(bad(format!("unknown label {label:?}")));
        }
        out.push(ClassificationExample { text: record.text, label });
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("classification dataset".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaAnswer {
    pub text: String,
    /// Character (not byte) offset into the context.
    pub answer_start: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: String,
    pub question: String,
    pub context: String,
    pub answers: Vec<QaAnswer>,
}

#[derive(Deserialize)]
struct SquadFile {
    data: Vec<SquadDocument>,
}

#[derive(Deserialize)]
struct SquadDocument {
    paragraphs: Vec<SquadParagraph>,
}

#[derive(Deserialize)]
struct SquadParagraph {
    context: String,
    qas: Vec<SquadQa>,
}

#[derive(Deserialize)]
struct SquadQa {
    id: String,
    question: String,
    answers: Vec<QaAnswer>,
}

/// Reads a SQuAD-layout file (`data → paragraphs → qas`), checking that each
/// gold answer occurs at its `answer_start`.
pub fn load_qa_dataset(path: &Path) -> Result<Vec<QaExample>> {
    let text = read_text(path)?;
    if text.trim().is_empty() {
        return Err(Error::EmptyInput(path.display().to_string()));
    }
    let file: SquadFile = serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })?;
    qa_examples(file)
}

pub fn parse_qa(text: &str) -> Result<Vec<QaExample>> {
    let file: SquadFile =
        serde_json::from_str(text).map_err(|e| Error::BadRecord { line: e.line(), reason: e.to_string() })?;
    qa_examples(file)
}

fn qa_examples(file: SquadFile) -> Result<Vec<QaExample>> {
    let mut out = Vec::new();
    for doc in file.data {
        for para in doc.paragraphs {
            let chars: Vec<char> = para.context.chars().collect();
            for qa in para.qas {
                if qa.answers.is_empty() {
                    return Err(Error::AnswerOffset { id: qa.id, reason: "no answers".into() });
                }
                for a in &qa.answers {
                    let len = a.text.chars().count();
                    let found: String = chars.iter().skip(a.answer_start).take(len).collect();
                    if a.answer_start + len > chars.len() || found != a.text {
                        return Err(Error::AnswerOffset {
                            id: qa.id.clone(),
                            reason: format!("answer {:?} not found at offset {}", a.text, a.answer_start),
                        });
                    }
                }
                out.push(QaExample {
                    id: qa.id,
                    question: qa.question,
                    context: para.context.clone(),
                    answers: qa.answers,
                });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("QA dataset".into()));
    }
    Ok(out)
}

/// Seeded shuffle, then the first `round(train_frac · N)` examples (at least
/// one on each side) form the training set.
pub fn split_dataset<T: Clone>(examples: &[T], train_frac: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let n = examples.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!("cannot split {n} examples")));
    }
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidConfig(format!("train fraction {train_frac} outside (0, 1)")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, domain::SPLIT, 0));
    let k = ((train_frac * n as f64).round() as usize).clamp(1, n - 1);
    let pick = |idx: &[usize]| idx.iter().map(|&i| examples[i].clone()).collect();
    Ok((pick(&order[..k]), pick(&order[k..])))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationFeature {
    pub input: EncodedInput,
    pub label: usize,
}

pub fn featurize_classification(
    examples: &[ClassificationExample],
    label_set: &[String],
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<Vec<ClassificationFeature>> {
    if label_set.len() != CLASSIFICATION_ARITY {
        return Err(Error::InvalidConfig(format!(
            "label set has {} labels, the classifier has {CLASSIFICATION_ARITY}",
            label_set.len()
        )));
    }
    examples
        .iter()
        .map(|ex| {
            let label = label_set
                .iter()
                .position(|l| *l == ex.label)
                .ok_or_else(|| Error::InvalidInput(format!("unknown label {:?}", ex.label)))?;
            let tokens = vocab.encode(&clean_text(&ex.text));
            Ok(ClassificationFeature { input: build_input(&tokens, None, max_seq_len)?, label })
        })
        .collect()
}

/// Longest question, in tokens, kept in a QA input.
pub const MAX_QUERY_TOKENS: usize = 64;

/// A QA example laid out as `[CLS] question [SEP] context [SEP]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaFeature {
    pub id: String,
    pub input: EncodedInput,
    /// Inclusive token range of the context, `None` if no context token fits.
    pub context_range: Option<(usize, usize)>,
    /// Context word index of each position in `context_range`.
    pub token_word: Vec<usize>,
    /// Whitespace-separated words of the context.
    pub context_words: Vec<String>,
    /// Token span of the first gold answer, if it lies inside the input.
    pub answer_span: Option<(usize, usize)>,
    pub answers: Vec<String>,
}

impl QaFeature {
    /// Context words covered by the token span `[start, end]`, space-joined.
    pub fn span_text(&self, start: usize, end: usize) -> String {
        let Some((lo, _)) = self.context_range else { return String::new() };
        let first = self.token_word[start - lo];
        let last = self.token_word[end - lo];
        self.context_words[first..=last].join(" ")
    }
}

/// Words of `text` with their character ranges `[start, end)`.
fn words_with_offsets(text: &str) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    for (i, c) in text.chars().enumerate() {
        if c.is_whitespace() {
            if !current.is_empty() {
                out.push((std::mem::take(&mut current), start, i));
            }
        } else {
            if current.is_empty() {
                start = i;
            }
            current.push(c);
        }
    }
    if !current.is_empty() {
        let end = start + current.chars().count();
        out.push((current, start, end));
    }
    out
}

pub fn featurize_qa(examples: &[QaExample], vocab: &Vocab, max_seq_len: usize) -> Result<Vec<QaFeature>> {
    if max_seq_len < 4 {
        return Err(Error::SeqLenTooSmall(max_seq_len));
    }
    examples.iter().map(|ex| featurize_one(ex, vocab, max_seq_len)).collect()
}

fn featurize_one(ex: &QaExample, vocab: &Vocab, max_seq_len: usize) -> Result<QaFeature> {
    let mut question = vocab.encode(&clean_text(&ex.question));
    question.truncate(MAX_QUERY_TOKENS.min((max_seq_len - 3) / 2));
    let budget = max_seq_len - 3 - question.len();

    let words = words_with_offsets(&ex.context);
    let mut context: Vec<TokenId> = Vec::new();
    let mut token_word = Vec::new();
    let mut first_token = vec![None; words.len()];
    let mut last_token = vec![None; words.len()];
    for (w, (word, _, _)) in words.iter().enumerate() {
        let mut pieces = Vec::new();
        for part in clean_text(word).split_whitespace() {
            vocab.encode_word(part, &mut pieces);
        }
        for p in pieces {
            if context.len() == budget {
                break;
            }
            first_token.get_mut(w).unwrap().get_or_insert(context.len());
            last_token[w] = Some(context.len());
            context.push(p);
            token_word.push(w);
        }
    }

    let offset = question.len() + 2;
    let context_range = (!context.is_empty()).then(|| (offset, offset + context.len() - 1));
    let answer_span = ex.answers.first().and_then(|a| {
        let a_end = a.answer_start + a.text.chars().count();
        let covered: Vec<usize> =
            (0..words.len()).filter(|&w| words[w].1 < a_end && words[w].2 > a.answer_start).collect();
        let s = covered.iter().find_map(|&w| first_token[w])?;
        let e = covered.iter().rev().find_map(|&w| last_token[w])?;
        Some((offset + s, offset + e))
    });

    Ok(QaFeature {
        id: ex.id.clone(),
        input: build_input(&question, Some(&context), max_seq_len)?,
        context_range,
        token_word,
        context_words: words.into_iter().map(|(w, _, _)| w).collect(),
        answer_span,
        answers: ex.answers.iter().map(|a| a.text.clone()).collect(),
    })
}

/// Featurized examples of one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskData {
    Classification(Vec<ClassificationFeature>),
    Qa(Vec<QaFeature>),
}

impl TaskData {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskData::Classification(_) => TaskKind::Classification,
            TaskData::Qa(_) => TaskKind::Qa,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TaskData::Classification(v) => v.len(),
            TaskData::Qa(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_seq_len(&self) -> usize {
        match self {
            TaskData::Classification(v) => v.iter().map(|f| f.input.len()).max().unwrap_or(0),
            TaskData::Qa(v) => v.iter().map(|f| f.input.len()).max().unwrap_or(0),
        }
    }
}
