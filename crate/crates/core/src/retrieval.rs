//! Okapi BM25 over a local passage corpus.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::ByteReader;
use crate::error::{Error, Result};

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;
pub const DEFAULT_TOP_K: usize = 5;

const INDEX_MAGIC: &[u8; 4] = b"EIBM";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub text: String,
}

impl Passage {
    pub fn new(doc_id: impl Into<String>, title: Option<String>, text: impl Into<String>) -> Self {
        Self {
            doc_id: doc_id.into(),
            title,
            text: text.into(),
        }
    }
}

/// Lowercase, replace every non-alphanumeric character with a space, split on
/// whitespace. No stemming or stopword removal.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Index {
    passages: Vec<Passage>,
    postings: BTreeMap<String, Vec<Posting>>,
    doc_lengths: Vec<u32>,
    avg_doc_len: f64,
    k1: f64,
    b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit<'a> {
    pub passage: &'a Passage,
    pub score: f64,
}

impl Bm25Index {
    pub fn build(corpus: Vec<Passage>, k1: f64, b: f64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Validation("cannot index an empty corpus".into()));
        }
        if !(k1 > 0.0 && k1.is_finite()) {
            return Err(Error::Validation(format!("k1 must be > 0, got {k1}")));
        }
        if !(0.0..=1.0).contains(&b) {
            return Err(Error::Validation(format!("b must lie in [0, 1], got {b}")));
        }
        let mut ids = HashSet::with_capacity(corpus.len());
        for p in &corpus {
            if !ids.insert(p.doc_id.as_str()) {
                return Err(Error::Validation(format!("duplicate doc_id {:?}", p.doc_id)));
            }
            if p.text.trim().is_empty() {
                return Err(Error::Validation(format!("passage {:?} has empty text", p.doc_id)));
            }
        }

        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(corpus.len());
        for (ordinal, p) in corpus.iter().enumerate() {
            let mut tokens = p.title.as_deref().map(tokenize).unwrap_or_default();
            tokens.extend(tokenize(&p.text));
            doc_lengths.push(tokens.len() as u32);
            let mut counts: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *counts.entry(t).or_default() += 1;
            }
            for (term, tf) in counts {
                postings.entry(term).or_default().push(Posting {
                    doc: ordinal as u32,
                    tf,
                });
            }
        }
        let avg_doc_len = doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / doc_lengths.len() as f64;
        Ok(Self {
            passages: corpus,
            postings,
            doc_lengths,
            avg_doc_len,
            k1,
            b,
        })
    }

    pub fn with_defaults(corpus: Vec<Passage>) -> Result<Self> {
        Self::build(corpus, DEFAULT_K1, DEFAULT_B)
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_doc_len
    }

    pub fn doc_lengths(&self) -> &[u32] {
        &self.doc_lengths
    }

    pub fn params(&self) -> (f64, f64) {
        (self.k1, self.b)
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    /// Number of documents containing `term` (already tokenized form).
    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn idf(&self, df: usize) -> f64 {
        let n = self.passages.len() as f64;
        let df = df as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Top-`k` passages by BM25 score, descending, ties broken by ascending
    /// `doc_id`. Documents matching no query term are never returned.
    pub fn search(&self, query: &str, k: usize) -> Vec<SearchHit<'_>> {
        if k == 0 {
            return Vec::new();
        }
        let mut terms = tokenize(query);
        terms.sort();
        terms.dedup();

        let mut scores: BTreeMap<u32, f64> = BTreeMap::new();
        for term in &terms {
            let postings = self.postings(term);
            if postings.is_empty() {
                continue;
            }
            let idf = self.idf(postings.len());
            for p in postings {
                let tf = p.tf as f64;
                let len_norm = 1.0 - self.b + self.b * self.doc_lengths[p.doc as usize] as f64 / self.avg_doc_len;
                *scores.entry(p.doc).or_default() += idf * tf * (self.k1 + 1.0) / (tf + self.k1 * len_norm);
            }
        }

        let mut hits: Vec<SearchHit<'_>> = scores
            .into_iter()
            .filter(|&(_, s)| s > 0.0)
            .map(|(doc, score)| SearchHit {
                passage: &self.passages[doc as usize],
                score,
            })
            .collect();
        hits.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.passage.doc_id.cmp(&b.passage.doc_id))
        });
        hits.truncate(k);
        hits
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn encode(&self) -> Vec<u8> {
        fn put_str(out: &mut Vec<u8>, s: &str) {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&self.k1.to_le_bytes());
        out.extend_from_slice(&self.b.to_le_bytes());
        out.extend_from_slice(&self.avg_doc_len.to_le_bytes());
        out.extend_from_slice(&(self.passages.len() as u64).to_le_bytes());
        for (p, len) in self.passages.iter().zip(&self.doc_lengths) {
            put_str(&mut out, &p.doc_id);
            match &p.title {
                Some(t) => {
                    out.push(1);
                    put_str(&mut out, t);
                }
                None => out.push(0),
            }
            put_str(&mut out, &p.text);
            out.extend_from_slice(&len.to_le_bytes());
        }
        out.extend_from_slice(&(self.postings.len() as u64).to_le_bytes());
        for (term, list) in &self.postings {
            put_str(&mut out, term);
            out.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for p in list {
                out.extend_from_slice(&p.doc.to_le_bytes());
                out.extend_from_slice(&p.tf.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        fn get_str(r: &mut ByteReader<'_>) -> Result<String> {
            let n = r.u32()? as usize;
            String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Corrupt("string is not UTF-8".into()))
        }
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != INDEX_MAGIC {
            return Err(Error::Format("not a BM25 index (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let k1 = r.f64()?;
        let b = r.f64()?;
        let avg_doc_len = r.f64()?;
        let n_docs = r.u64()? as usize;
        let mut passages = Vec::new();
        let mut doc_lengths = Vec::new();
        for _ in 0..n_docs {
            let doc_id = get_str(&mut r)?;
            let title = match r.take(1)?[0] {
                0 => None,
                1 => Some(get_str(&mut r)?),
                other => return Err(Error::Corrupt(format!("bad title flag {other}"))),
            };
            let text = get_str(&mut r)?;
            doc_lengths.push(r.u32()?);
            passages.push(Passage { doc_id, title, text });
        }
        let n_terms = r.u64()?;
        let mut postings = BTreeMap::new();
        for _ in 0..n_terms {
            let term = get_str(&mut r)?;
            let count = r.u32()? as usize;
            let mut list = Vec::with_capacity(count.min(n_docs));
            for _ in 0..count {
                let doc = r.u32()?;
                if doc as usize >= n_docs {
                    return Err(Error::Corrupt(format!("posting references doc {doc} of {n_docs}")));
                }
                list.push(Posting { doc, tf: r.u32()? });
            }
            postings.insert(term, list);
        }
        r.finish()?;
        Ok(Self {
            passages,
            postings,
            doc_lengths,
            avg_doc_len,
            k1,
            b,
        })
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Passage>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let passage: Passage = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(passage);
    }
    Ok(out)
}

pub fn save_corpus(corpus: &[Passage], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for p in corpus {
        text.push_str(&serde_json::to_string(p).expect("Passage serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture() -> Vec<Passage> {
        vec![
            Passage::new("d1", None, "Paris is the capital of France."),
            Passage::new("d2", Some("Germany".into()), "Berlin is the capital of Germany."),
            Passage::new("d3", None, "France borders Spain and Italy, France!"),
        ]
    }

    #[test]
    fn tokenizer_strips_punctuation() {
        assert_eq!(
            tokenize("Héllo, WORLD! U.S.-born"),
            ["héllo", "world", "u", "s", "born"]
        );
        assert!(tokenize("!!! ...").is_empty());
    }

    #[test]
    fn three_doc_fixture_counts() {
        let idx = Bm25Index::with_defaults(fixture()).unwrap();
        assert_eq!(idx.len(), 3);
        // d1: 6 tokens, d2: title + 6 = 7, d3: 6 tokens
        assert_eq!(idx.doc_lengths(), &[6, 7, 6]);
        assert_eq!(idx.avg_doc_len(), 19.0 / 3.0);
        assert_eq!(idx.doc_freq("capital"), 2);
        assert_eq!(idx.doc_freq("france"), 2);
        assert_eq!(idx.doc_freq("germany"), 1);
        assert_eq!(idx.doc_freq("is"), 2);
        assert_eq!(
            idx.postings("france"),
            &[Posting { doc: 0, tf: 1 }, Posting { doc: 2, tf: 2 }]
        );
        assert_eq!(idx.postings("germany"), &[Posting { doc: 1, tf: 2 }]);
    }

    #[test]
    fn fixture_scores_match_hand_formula() {
        let idx = Bm25Index::with_defaults(fixture()).unwrap();
        let hits = idx.search("capital France", 5);
        let avg = 19.0 / 3.0;
        let idf2 = ((3.0f64 - 2.0 + 0.5) / (2.0 + 0.5) + 1.0).ln();
        let term = |tf: f64, len: f64| idf2 * tf * 2.2 / (tf + 1.2 * (0.25 + 0.75 * len / avg));
        let d1 = term(1.0, 6.0) + term(1.0, 6.0);
        let d2 = term(1.0, 7.0);
        let d3 = term(2.0, 6.0);
        let got: Vec<(&str, f64)> = hits.iter().map(|h| (h.passage.doc_id.as_str(), h.score)).collect();
        assert_eq!(got.len(), 3);
        assert_eq!(got[0].0, "d1");
        assert!((got[0].1 - d1).abs() < 1e-12);
        let expect: BTreeMap<&str, f64> = [("d1", d1), ("d2", d2), ("d3", d3)].into();
        for (id, s) in got {
            assert!((s - expect[id]).abs() < 1e-12, "{id}");
        }
    }

    #[test]
    fn single_doc_average_is_its_length() {
        let idx = Bm25Index::with_defaults(vec![Passage::new("a", None, "one two three")]).unwrap();
        assert_eq!(idx.avg_doc_len(), 3.0);
    }

    #[test]
    fn build_rejects_bad_input() {
        assert!(Bm25Index::with_defaults(vec![]).is_err());
        let dup = vec![Passage::new("a", None, "x"), Passage::new("a", None, "y")];
        assert!(Bm25Index::with_defaults(dup).is_err());
        assert!(Bm25Index::build(fixture(), 0.0, 0.5).is_err());
        assert!(Bm25Index::build(fixture(), 1.2, 1.5).is_err());
    }

    #[test]
    fn out_of_vocabulary_and_large_k() {
        let idx = Bm25Index::with_defaults(fixture()).unwrap();
        assert!(idx.search("zebra quokka", 5).is_empty());
        assert!(idx.search("", 5).is_empty());
        assert_eq!(idx.search("is", 100).len(), 2);
    }

    #[test]
    fn ties_break_by_doc_id() {
        let corpus = vec![
            Passage::new("b", None, "alpha beta"),
            Passage::new("a", None, "alpha gamma"),
            Passage::new("c", None, "delta"),
        ];
        let idx = Bm25Index::with_defaults(corpus).unwrap();
        let ids: Vec<_> = idx
            .search("alpha", 5)
            .iter()
            .map(|h| h.passage.doc_id.clone())
            .collect();
        assert_eq!(ids, ["a", "b"]);
    }

    #[test]
    fn persisted_index_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.bin");
        let idx = Bm25Index::with_defaults(fixture()).unwrap();
        idx.save(&path).unwrap();
        let back = Bm25Index::load(&path).unwrap();
        assert_eq!(back, idx);

        let mut bytes = idx.encode();
        bytes.truncate(bytes.len() - 2);
        assert!(matches!(Bm25Index::decode(&bytes), Err(Error::Corrupt(_))));
        let mut bad = idx.encode();
        bad[0] = b'Z';
        assert!(matches!(Bm25Index::decode(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn corpus_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        save_corpus(&fixture(), &path).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), fixture());
    }

    fn arb_corpus() -> impl Strategy<Value = Vec<Passage>> {
        let word = prop::sample::select(vec!["a", "b", "c", "d", "e", "f", "g", "h"]);
        proptest::collection::vec(proptest::collection::vec(word, 1..8), 1..12).prop_map(|docs| {
            docs.into_iter()
                .enumerate()
                .map(|(i, ws)| Passage::new(format!("doc{i:02}"), None, ws.join(" ")))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn top_k_is_a_prefix(corpus in arb_corpus(), q in "[a-h ]{1,10}", k in 1usize..10) {
            let idx = Bm25Index::with_defaults(corpus).unwrap();
            let short: Vec<_> = idx.search(&q, k).iter().map(|h| h.passage.doc_id.clone()).collect();
            let long: Vec<_> = idx.search(&q, k + 1).iter().map(|h| h.passage.doc_id.clone()).collect();
            prop_assert_eq!(&long[..short.len()], &short[..]);
            for h in idx.search(&q, k) {
                prop_assert!(h.score > 0.0);
            }
        }

        #[test]
        fn irrelevant_document_keeps_matched_set(corpus in arb_corpus(), q in "[a-h ]{1,10}") {
            let idx = Bm25Index::with_defaults(corpus.clone()).unwrap();
            let mut extended = corpus;
            extended.push(Passage::new("zz-extra", None, "xylophone quartz"));
            let idx2 = Bm25Index::with_defaults(extended).unwrap();
            let mut a: Vec<_> = idx.search(&q, usize::MAX).iter().map(|h| h.passage.doc_id.clone()).collect();
            let mut b: Vec<_> = idx2.search(&q, usize::MAX).iter().map(|h| h.passage.doc_id.clone()).collect();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }
    }
}
