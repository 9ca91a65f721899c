//! Web-text cleaning and Arabic-script filtering.
//!
//! The pipeline runs per document, in this order: segment into sentences,
//! strip links, strip emoji, strip punctuation, then drop every sentence
//! that is not purely Arabic script. Segmentation comes first because it
//! needs the sentence-final punctuation that cleaning removes.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::LazyLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: String,
    pub text: String,
}

/// Cleaned sentences grouped by source document.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub documents: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sentence_count: u64,
    pub word_count: u64,
    pub unique_word_count: u64,
}

static URL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)(?:https?://|ftp://|www\.)\S*").expect("valid url regex"));

/// Arabic, Arabic Supplement, Arabic Extended-A, Presentation Forms A and B.
const ARABIC_BLOCKS: [(u32, u32); 5] = [
    (0x0600, 0x06FF),
    (0x0750, 0x077F),
    (0x08A0, 0x08FF),
    (0xFB50, 0xFDFF),
    (0xFE70, 0xFEFF),
];

/// Emoticons, Misc Symbols & Pictographs, Supplemental Symbols & Pictographs
/// (plus Extended-A), Transport & Map, Dingbats, Misc Symbols, regional
/// indicators, and the joiners/selectors that glue emoji sequences together.
const EMOJI_RANGES: [(u32, u32); 10] = [
    (0x1F600, 0x1F64F),
    (0x1F300, 0x1F5FF),
    (0x1F900, 0x1F9FF),
    (0x1FA70, 0x1FAFF),
    (0x1F680, 0x1F6FF),
    (0x2700, 0x27BF),
    (0x2600, 0x26FF),
    (0x1F1E6, 0x1F1FF),
    (0xFE0E, 0xFE0F),
    (0x200D, 0x200D),
];

/// Arabic marks that terminate or separate clauses. All of them are already
/// in a `P*` category; listed so the set is explicit.
const ARABIC_PUNCTUATION: [char; 9] = [
    '\u{060C}', '\u{060D}', '\u{061B}', '\u{061E}', '\u{061F}', '\u{066A}', '\u{066B}', '\u{066C}',
    '\u{06D4}',
];

const SENTENCE_FINAL: [char; 7] = ['.', '!', '?', '\u{061F}', '\u{2026}', '\u{06D4}', '\u{061E}'];

fn in_ranges(c: char, ranges: &[(u32, u32)]) -> bool {
    let cp = c as u32;
    ranges.iter().any(|&(lo, hi)| (lo..=hi).contains(&cp))
}

pub fn is_arabic_char(c: char) -> bool {
    in_ranges(c, &ARABIC_BLOCKS)
}

pub fn is_emoji(c: char) -> bool {
    in_ranges(c, &EMOJI_RANGES)
}

pub fn is_punctuation(c: char) -> bool {
    use GeneralCategory::*;
    matches!(
        get_general_category(c),
        ConnectorPunctuation
            | DashPunctuation
            | OpenPunctuation
            | ClosePunctuation
            | InitialPunctuation
            | FinalPunctuation
            | OtherPunctuation
    ) || ARABIC_PUNCTUATION.contains(&c)
}

pub fn contains_url(text: &str) -> bool {
    URL.is_match(text)
}

fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Removes links, emoji and punctuation, then collapses whitespace.
///
/// Removed characters are replaced by a space so that `word,word` still
/// yields two words.
pub fn clean_text(raw: &str) -> String {
    let no_links = URL.replace_all(raw, " ");
    let stripped: String = no_links
        .chars()
        .map(|c| if is_emoji(c) || is_punctuation(c) { ' ' } else { c })
        .collect();
    collapse_whitespace(&stripped)
}

/// True iff the sentence has at least one Arabic letter and no alphabetic
/// character outside the Arabic blocks. Digits, whitespace and symbols are
/// not alphabetic and therefore allowed.
pub fn filter_arabic(sentence: &str) -> bool {
    let mut has_arabic = false;
    for c in sentence.chars().filter(|c| c.is_alphabetic()) {
        if !is_arabic_char(c) {
            return false;
        }
        has_arabic = true;
    }
    has_arabic
}

/// Splits raw document text on line breaks and on runs of sentence-final
/// punctuation that are followed by whitespace or the end of the text.
/// The terminating punctuation is not kept. A period inside a token (as in
/// `x.co`) does not split.
pub fn segment_sentences(document_text: &str) -> Vec<String> {
    let chars: Vec<char> = document_text.chars().collect();
    let mut out = Vec::new();
    let mut current = String::new();
    let mut flush = |buf: &mut String| {
        let trimmed = buf.trim();
        if !trimmed.is_empty() {
            out.push(trimmed.to_string());
        }
        buf.clear();
    };

    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' || c == '\r' {
            flush(&mut current);
            i += 1;
            continue;
        }
        if SENTENCE_FINAL.contains(&c) {
            let mut j = i;
            while j < chars.len() && SENTENCE_FINAL.contains(&chars[j]) {
                j += 1;
            }
            if j == chars.len() || chars[j].is_whitespace() {
                flush(&mut current);
            } else {
                current.extend(&chars[i..j]);
            }
            i = j;
            continue;
        }
        current.push(c);
        i += 1;
    }
    flush(&mut current);
    out
}

/// Runs the full pipeline over one document's raw text.
pub fn process_document(text: &str) -> Vec<String> {
    segment_sentences(text)
        .iter()
        .map(|s| clean_text(s))
        .filter(|s| !s.is_empty() && filter_arabic(s))
        .collect()
}

/// Builds a corpus from raw documents. Documents are processed in parallel;
/// output order follows input order. Documents left with no sentence are
/// dropped.
pub fn build_corpus(documents: &[RawDocument]) -> Result<Corpus> {
    let mut seen = HashSet::new();
    for doc in documents {
        if !seen.insert(doc.id.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate document id {:?}", doc.id)));
        }
    }
    let documents = documents
        .par_iter()
        .map(|d| process_document(&d.text))
        .collect::<Vec<_>>()
        .into_iter()
        .filter(|d| !d.is_empty())
        .collect();
    Ok(Corpus { documents })
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let mut stats = CorpusStats::default();
    let mut unique = HashSet::new();
    for sentence in corpus.documents.iter().flatten() {
        stats.sentence_count += 1;
        for word in sentence.split_whitespace() {
            stats.word_count += 1;
            unique.insert(word);
        }
    }
    stats.unique_word_count = unique.len() as u64;
    stats
}

impl Corpus {
    pub fn sentence_count(&self) -> usize {
        self.documents.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.sentence_count() == 0
    }

    /// One sentence per line, a blank line between documents.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, doc) in self.documents.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            for sentence in doc {
                out.push_str(sentence);
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Corpus {
        let mut documents = Vec::new();
        let mut current = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                if !current.is_empty() {
                    documents.push(std::mem::take(&mut current));
                }
            } else {
                current.push(line.to_string());
            }
        }
        if !current.is_empty() {
            documents.push(current);
        }
        Corpus { documents }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(self.to_text().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Corpus> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Corpus::from_text(&text))
    }
}

/// Reads raw documents from `path`. A `.jsonl` file holds one `{id, text}`
/// record per line; any other file is a single plain-text document whose id
/// is the file stem.
pub fn read_raw_documents(path: &Path) -> Result<Vec<RawDocument>> {
    let is_jsonl = path.extension().is_some_and(|e| e == "jsonl");
    if !is_jsonl {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        return Ok(vec![RawDocument { id, text }]);
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: RawDocument = serde_json::from_str(&line)
            .map_err(|e| Error::BadRecord { line: i + 1, reason: e.to_string() })?;
        docs.push(doc);
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clean_text_examples() {
        assert_eq!(clean_text(""), "");
        assert_eq!(clean_text("شاهد http://x.co الآن!"), "شاهد الآن");
        assert_eq!(clean_text("جيد 👍👍"), "جيد");
        assert_eq!(clean_text("زوروا www.site.tn/x?a=1 اليوم"), "زوروا اليوم");
        assert_eq!(clean_text("كلمة،كلمة؟"), "كلمة كلمة");
        assert_eq!(clean_text("  a \t\n b  "), "a b");
    }

    #[test]
    fn filter_arabic_examples() {
        assert!(!filter_arabic("hello"));
        assert!(filter_arabic("محلاها هالغناية"));
        assert!(!filter_arabic("ok محلاها"));
        assert!(filter_arabic("عام 2014 ٢٠١٤"));
        assert!(!filter_arabic("2014"));
        assert!(!filter_arabic(""));
    }

    #[test]
    fn segment_examples() {
        assert!(segment_sentences("").is_empty());
        assert_eq!(segment_sentences("س1\nس2"), vec!["س1", "س2"]);
        assert_eq!(segment_sentences("س1. س2"), vec!["س1", "س2"]);
        assert_eq!(segment_sentences("أ؟! ب…"), vec!["أ", "ب"]);
        assert_eq!(segment_sentences("شاهد http://x.co الآن"), vec!["شاهد http://x.co الآن"]);
    }

    #[test]
    fn pipeline_keeps_url_sentence_whole() {
        assert_eq!(process_document("شاهد http://x.co الآن!\nhello there"), vec!["شاهد الآن"]);
    }

    #[test]
    fn stats_examples() {
        assert_eq!(corpus_stats(&Corpus::default()), CorpusStats::default());
        let corpus = Corpus {
            documents: vec![vec!["ا ب".into()], vec!["ا ج".into()]],
        };
        let stats = corpus_stats(&corpus);
        assert_eq!((stats.sentence_count, stats.word_count, stats.unique_word_count), (2, 4, 3));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let docs = vec![
            RawDocument { id: "a".into(), text: "س".into() },
            RawDocument { id: "a".into(), text: "ص".into() },
        ];
        assert!(build_corpus(&docs).is_err());
    }

    fn noisy_text() -> impl Strategy<Value = String> {
        let pieces = prop::collection::vec(
            prop_oneof![
                Just("شاهد".to_string()),
                Just("http://x.co/a".to_string()),
                Just("www.ex.tn".to_string()),
                Just("👍".to_string()),
                Just("؟".to_string()),
                Just(". ".to_string()),
                Just("\n".to_string()),
                Just("ok".to_string()),
                Just(" ".to_string()),
                any::<char>().prop_map(String::from),
                "[\u{0600}-\u{06FF}]{1,4}",
            ],
            0..24,
        );
        pieces.prop_map(|p| p.concat())
    }

    proptest! {
        #[test]
        fn clean_is_idempotent(s in noisy_text()) {
            let once = clean_text(&s);
            prop_assert_eq!(clean_text(&once), once);
        }

        #[test]
        fn clean_is_idempotent_any_string(s in any::<String>()) {
            let once = clean_text(&s);
            prop_assert_eq!(clean_text(&once), once);
        }

        #[test]
        fn pipeline_output_is_closed(s in noisy_text()) {
            for sentence in process_document(&s) {
                prop_assert!(filter_arabic(&sentence));
                prop_assert!(!contains_url(&sentence));
                prop_assert!(!sentence.chars().any(|c| is_emoji(c) || is_punctuation(c)));
                prop_assert_eq!(sentence.trim(), sentence.as_str());
                prop_assert!(!sentence.is_empty());
            }
        }

        #[test]
        fn stats_survive_round_trip(docs in prop::collection::vec(prop::collection::vec("[\u{0621}-\u{064A}]{1,3}( [\u{0621}-\u{064A}]{1,3}){0,4}", 1..4), 0..4)) {
            let corpus = Corpus { documents: docs };
            let back = Corpus::from_text(&corpus.to_text());
            prop_assert_eq!(&back, &corpus);
            prop_assert_eq!(corpus_stats(&back), corpus_stats(&corpus));
        }
    }
}
