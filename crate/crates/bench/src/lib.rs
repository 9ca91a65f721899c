//! Shared inputs for the benchmarks.

use dialbert::corpus::Corpus;

const WORDS: &[&str] = &[
    "الدار", "قريبة", "من", "البحر", "نحب", "نمشي", "كل", "يوم", "القهوة", "باهية", "برشا", "الطقس", "اليوم",
    "الشمس", "طالعة", "للخدمة", "بالتران", "نرجع", "مع", "الليل", "السوق", "يتحل", "نهار", "الجمعة", "فيه",
    "الخضرة", "الحوت", "الخبز", "الصغار", "يمشيو", "للمدرسة", "بالكار",
];

/// Deterministic corpus of `docs` documents with `sentences` lines each.
pub fn synthetic_corpus(docs: usize, sentences: usize) -> Corpus {
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    let documents = (0..docs)
        .map(|_| {
            (0..sentences)
                .map(|_| {
                    let n = 4 + (next() % 12) as usize;
                    (0..n).map(|_| WORDS[(next() % WORDS.len() as u64) as usize]).collect::<Vec<_>>().join(" ")
                })
                .collect()
        })
        .collect();
    Corpus { documents }
}
