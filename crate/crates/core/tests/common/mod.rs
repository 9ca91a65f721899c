//! Synthetic fixtures shared by the integration tests.
#![allow(dead_code)]
pub mod gradcheck;

use dialbert::corpus::Corpus;
use dialbert::datasets::{ClassificationExample, QaAnswer, QaExample};
use dialbert::model::ModelConfig;
use dialbert::pretrain_data::{build_pretrain_dataset, MaskingPolicy, PretrainExample};
use dialbert::tokenizer::{train_wordpiece, Vocab};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LEXICON: &[&str] = &[
    "برشا", "باهي", "نحب", "نمشي", "الدار", "الخدمة", "اليوم", "غدوة", "توا", "فما", "ماو", "كيفاش", "علاش", "وقتاش",
    "الكرهبة", "البحر", "الماكلة", "القهوة", "الطقس", "الصغار", "المدرسة", "الجامعة", "التران", "الكار", "السوق",
    "الحانوت", "الفلوس", "الخبز", "الحليب", "الشمس", "المطر", "الريح", "الليل", "الصباح", "العشية", "الجمعة",
    "السبت", "الأحد", "تونس", "صفاقس",
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn sentence(rng: &mut ChaCha8Rng, words: &[&str], min: usize, max: usize) -> String {
    let n = rng.random_range(min..=max);
    (0..n).map(|_| *words.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// `docs × sentences` Arabic-script corpus drawn from [`LEXICON`].
pub fn arabic_corpus(docs: usize, sentences: usize, seed: u64) -> Corpus {
    let mut r = rng(seed);
    Corpus {
        documents: (0..docs).map(|_| (0..sentences).map(|_| sentence(&mut r, LEXICON, 4, 7)).collect()).collect(),
    }
}

pub fn tiny_config(vocab: &Vocab, dropout: f64) -> ModelConfig {
    ModelConfig { vocab_size: vocab.len(), dropout_prob: dropout, ..ModelConfig::tiny() }
}

/// The 32-sentence overfitting setup: vocabulary, model config and dataset.
pub fn overfit_setup(seed: u64) -> (Corpus, Vocab, Vec<PretrainExample>) {
    let corpus = arabic_corpus(4, 8, seed);
    let vocab = train_wordpiece(&corpus, 1000, 1).unwrap();
    let policy = MaskingPolicy { seed, ..Default::default() };
    let data = build_pretrain_dataset(&corpus, &vocab, &policy, 64, 0.5, seed).unwrap();
    (corpus, vocab, data)
}

/// Two classes separated by disjoint marker words mixed with shared filler.
pub fn separable_classification(n: usize, seed: u64) -> Vec<ClassificationExample> {
    let positive = ["باهي", "نحب", "برشا", "الشمس", "البحر"];
    let negative = ["المطر", "الريح", "الليل", "الفلوس", "التران"];
    let filler = ["اليوم", "غدوة", "توا", "فما", "تونس", "صفاقس"];
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let marks: &[&str] = if label == 1 { &positive } else { &negative };
            let mut words: Vec<&str> = (0..3).map(|_| *marks.choose(&mut r).unwrap()).collect();
            words.extend((0..r.random_range(1..=3)).map(|_| *filler.choose(&mut r).unwrap()));
            let k = words.len();
            for j in (1..k).rev() {
                words.swap(j, r.random_range(0..=j));
            }
            ClassificationExample { text: words.join(" "), label: label.to_string() }
        })
        .collect()
}

pub const QA_SUBJECTS: &[&str] = &[
    "الدار", "الخدمة", "الكرهبة", "البحر", "الماكلة", "القهوة", "الطقس", "الصغار", "المدرسة", "الجامعة", "التران",
    "الكار",
];
pub const QA_VALUES: &[&str] = &["السوق", "الحانوت", "الفلوس", "الخبز", "الحليب", "الشمس", "المطر", "الريح"];

/// Contexts list three "<subject> <value>" facts; the question names one
/// subject and the answer is the value that follows it.
pub fn synthetic_qa(n: usize, subjects: &[&str], seed: u64, prefix: &str) -> Vec<QaExample> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let facts: Vec<(&str, &str)> = subjects
                .choose_multiple(&mut r, 3)
                .map(|&s| (s, *QA_VALUES.choose(&mut r).unwrap()))
                .collect();
            let pick = r.random_range(0..facts.len());
            let mut context = String::new();
            let mut answer_start = 0;
            for (k, (s, v)) in facts.iter().enumerate() {
                if !context.is_empty() {
                    context.push(' ');
                }
                context.push_str(s);
                context.push(' ');
                if k == pick {
                    answer_start = context.chars().count();
                }
                context.push_str(v);
            }
            QaExample {
                id: format!("{prefix}{i}"),
                question: facts[pick].0.to_string(),
                context,
                answers: vec![QaAnswer { text: facts[pick].1.to_string(), answer_start }],
            }
        })
        .collect()
}
