use crate::corpus::is_punctuation;
use crate::error::{Error, Result};
use std::collections::HashMap;

/// Gold and predicted labels of a classification run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassificationResult {
    pub gold: Vec<String>,
    pub predicted: Vec<String>,
    pub label_set: Vec<String>,
}

impl ClassificationResult {
    pub fn new(gold: Vec<String>, predicted: Vec<String>, label_set: Vec<String>) -> Result<Self> {
        if gold.len() != predicted.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} gold labels, {} predictions",
                gold.len(),
                predicted.len()
            )));
        }
        for (i, l) in label_set.iter().enumerate() {
            if label_set[..i].contains(l) {
                return Err(Error::InvalidInput(format!("duplicate label {l:?}")));
            }
        }
        if let Some(l) = gold.iter().chain(&predicted).find(|l| !label_set.contains(l)) {
            return Err(Error::InvalidInput(format!("label {l:?} not in label set")));
        }
        Ok(ClassificationResult { gold, predicted, label_set })
    }

    fn check_nonempty(&self) -> Result<()> {
        if self.gold.is_empty() {
            return Err(Error::EmptyInput("classification result".into()));
        }
        Ok(())
    }
}

pub fn accuracy(result: &ClassificationResult) -> Result<f64> {
    result.check_nonempty()?;
    let correct = result.gold.iter().zip(&result.predicted).filter(|(g, p)| g == p).count();
    Ok(correct as f64 / result.gold.len() as f64)
}

/// One-vs-rest F1 of a single class; 0 when precision + recall is 0.
pub fn class_f1(result: &ClassificationResult, label: &str) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (g, p) in result.gold.iter().zip(&result.predicted) {
        match (g == label, p == label) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Unweighted mean of per-class F1 over the label set.
pub fn macro_f1(result: &ClassificationResult) -> Result<f64> {
    result.check_nonempty()?;
    if result.label_set.is_empty() {
        return Err(Error::EmptyInput("label set".into()));
    }
    let sum: f64 = result.label_set.iter().map(|l| class_f1(result, l)).sum();
    Ok(sum / result.label_set.len() as f64)
}

fn is_diacritic(c: char) -> bool {
    matches!(c, '\u{064B}'..='\u{065F}' | '\u{0670}')
}

const ARTICLE: &str = "ال";

fn strip_article(mut word: &str) -> &str {
    while word.starts_with(ARTICLE) && word.chars().count() > 2 {
        word = &word[ARTICLE.len()..];
    }
    word
}

/// Answer normalization: punctuation becomes a space, diacritics are
/// dropped, the definite article is stripped from each word (repeatedly, while
/// something remains), and whitespace is collapsed.
pub fn normalize_answer(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .filter(|&c| !is_diacritic(c))
        .map(|c| if is_punctuation(c) { ' ' } else { c })
        .collect();
    cleaned.split_whitespace().map(strip_article).collect::<Vec<_>>().join(" ")
}

fn tokens(text: &str) -> Vec<String> {
    normalize_answer(text).split_whitespace().map(str::to_owned).collect()
}

/// Size of the multiset intersection of two token bags.
fn overlap(pred: &[String], gold: &[String]) -> usize {
    let mut counts: HashMap<&str, isize> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    common
}

/// (precision, recall) of one prediction against one gold answer.
fn precision_recall(pred: &[String], gold: &[String]) -> (f64, f64) {
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => (1.0, 1.0),
        (true, false) | (false, true) => (0.0, 0.0),
        (false, false) => {
            let common = overlap(pred, gold) as f64;
            (common / pred.len() as f64, common / gold.len() as f64)
        }
    }
}

fn best_over_golds(pred: &str, golds: &[String], score: impl Fn(&[String], &[String]) -> f64) -> f64 {
    let p = tokens(pred);
    golds.iter().map(|g| score(&p, &tokens(g))).fold(0.0, f64::max)
}

pub fn exact_match(pred: &str, golds: &[String]) -> f64 {
    best_over_golds(pred, golds, |p, g| f64::from(u8::from(p == g)))
}

pub fn token_f1(pred: &str, golds: &[String]) -> f64 {
    best_over_golds(pred, golds, |p, g| {
        let (precision, recall) = precision_recall(p, g);
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    })
}

pub fn token_recall(pred: &str, golds: &[String]) -> f64 {
    best_over_golds(pred, golds, |p, g| precision_recall(p, g).1)
}

/// A predicted answer and its gold answers.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct QaPrediction {
    pub id: String,
    pub predicted: String,
    pub golds: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QaScores {
    pub exact_match: f64,
    pub f1: f64,
    pub recall: f64,
}

pub fn qa_example_scores(pred: &QaPrediction) -> QaScores {
    QaScores {
        exact_match: exact_match(&pred.predicted, &pred.golds),
        f1: token_f1(&pred.predicted, &pred.golds),
        recall: token_recall(&pred.predicted, &pred.golds),
    }
}

/// Means of the per-example scores.
pub fn qa_metrics(predictions: &[QaPrediction]) -> Result<QaScores> {
    if predictions.is_empty() {
        return Err(Error::EmptyInput("QA predictions".into()));
    }
    if let Some(p) = predictions.iter().find(|p| p.golds.is_empty()) {
        return Err(Error::InvalidInput(format!("qa {} has no gold answers", p.id)));
    }
    let n = predictions.len() as f64;
    let mut sum = QaScores { exact_match: 0.0, f1: 0.0, recall: 0.0 };
    for p in predictions {
        let s = qa_example_scores(p);
        sum.exact_match += s.exact_match;
        sum.f1 += s.f1;
        sum.recall += s.recall;
    }
    Ok(QaScores { exact_match: sum.exact_match / n, f1: sum.f1 / n, recall: sum.recall / n })
}

pub const DEFAULT_MAX_ANSWER_LEN: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

/// Highest-scoring `(s, e)` with `s <= e`, `e - s + 1 <= max_answer_len`,
/// both inside the inclusive `context` range. Ties go to smaller `s`, then
/// smaller `e`.
pub fn qa_span_decode<T: Copy + Into<f64>>(
    start_logits: &[T],
    end_logits: &[T],
    context: (usize, usize),
    max_answer_len: usize,
) -> Result<Span> {
    let (lo, hi) = context;
    let mut best: Option<Span> = None;
    if lo <= hi && hi < start_logits.len().min(end_logits.len()) && max_answer_len > 0 {
        for s in lo..=hi {
            for e in s..=hi.min(s + max_answer_len - 1) {
                let score = start_logits[s].into() + end_logits[e].into();
                if best.is_none_or(|b| score > b.score) {
                    best = Some(Span { start: s, end: e, score });
                }
            }
        }
    }
    best.filter(|b| b.score.is_finite()).ok_or(Error::NoValidSpan)
}
