//! Training labels from paired inference: each question is answered once
//! without and once with retrieved passages, and labelled 1 only when the
//! retrieval run is correct while the closed-book run is not.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{QueryRecord, QuerySet};
use crate::embedding::{
    read_embedding_cache, sentence_embedding, write_embedding_cache, SentenceEmbedding, DEFAULT_LAYER,
};
use crate::error::{Error, Result};
use crate::qa::{answer_query, Backends, QaConfig};

/// Lowercase and collapse whitespace runs to single spaces.
pub fn normalize_answer(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn strip_punctuation(text: &str) -> String {
    let kept: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    normalize_answer(&kept)
}

/// True iff some gold answer occurs inside the prediction after
/// normalization.
pub fn answer_correct(prediction: &str, answers: &[String]) -> bool {
    answer_correct_with(prediction, answers, false)
}

pub fn answer_correct_with(prediction: &str, answers: &[String], ignore_punctuation: bool) -> bool {
    let norm = |s: &str| {
        if ignore_punctuation {
            strip_punctuation(s)
        } else {
            normalize_answer(s)
        }
    };
    let pred = norm(prediction);
    answers
        .iter()
        .map(|a| norm(a))
        .any(|a| !a.is_empty() && pred.contains(&a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correctness {
    /// Correct without retrieval.
    pub nr_correct: bool,
    /// Correct with retrieval.
    pub fr_correct: bool,
}

impl Correctness {
    pub fn label(self) -> u8 {
        u8::from(self.fr_correct && !self.nr_correct)
    }

    pub fn best(self) -> bool {
        self.nr_correct || self.fr_correct
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub query_id: String,
    pub embedding: SentenceEmbedding,
    pub label: u8,
    pub nr_correct: bool,
    pub fr_correct: bool,
}

impl LabeledExample {
    pub fn new(query_id: impl Into<String>, embedding: SentenceEmbedding, c: Correctness) -> Self {
        Self {
            query_id: query_id.into(),
            embedding,
            label: c.label(),
            nr_correct: c.nr_correct,
            fr_correct: c.fr_correct,
        }
    }

    pub fn correctness(&self) -> Correctness {
        Correctness {
            nr_correct: self.nr_correct,
            fr_correct: self.fr_correct,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledSet {
    examples: Vec<LabeledExample>,
}

impl LabeledSet {
    pub fn new(examples: Vec<LabeledExample>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for e in &examples {
            if !seen.insert(e.query_id.as_str()) {
                return Err(Error::Validation(format!("duplicate labeled query {:?}", e.query_id)));
            }
            if e.label != e.correctness().label() {
                return Err(Error::Validation(format!(
                    "label of {:?} disagrees with its correctness bits",
                    e.query_id
                )));
            }
        }
        Ok(Self { examples })
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.examples.iter().filter(|e| e.label == 1).count()
    }

    pub fn correctness_by_id(&self) -> HashMap<String, Correctness> {
        self.examples
            .iter()
            .map(|e| (e.query_id.clone(), e.correctness()))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct LabelConfig {
    pub qa: QaConfig,
    pub layer: u32,
    pub include_bos: bool,
    pub workers: usize,
    /// Abort on the first backend failure instead of skipping the query.
    pub strict: bool,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            qa: QaConfig::default(),
            layer: DEFAULT_LAYER,
            include_bos: false,
            workers: 4,
            strict: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub positive: usize,
    pub negative: usize,
    pub skipped: usize,
}

/// Two generations: closed-book, then with the top-k passages.
pub fn judge(query: &QueryRecord, backends: &Backends, qa: &QaConfig) -> Result<Correctness> {
    let closed = answer_query(query, false, backends, qa).map_err(|e| Error::for_query(&query.id, e))?;
    let open = answer_query(query, true, backends, qa).map_err(|e| Error::for_query(&query.id, e))?;
    Ok(Correctness {
        nr_correct: closed.correct,
        fr_correct: open.correct,
    })
}

pub fn make_label(query: &QueryRecord, backends: &Backends, cfg: &LabelConfig) -> Result<LabeledExample> {
    let c = judge(query, backends, &cfg.qa)?;
    let embedding = sentence_embedding(
        backends.embedder.as_ref(),
        &query.id,
        &query.question,
        cfg.layer,
        cfg.include_bos,
    )
    .map_err(|e| Error::for_query(&query.id, e))?;
    Ok(LabeledExample::new(&query.id, embedding, c))
}

pub(crate) fn run_ordered<T: Send>(
    set: &QuerySet,
    workers: usize,
    strict: bool,
    f: impl Fn(&QueryRecord) -> Result<T> + Sync + Send,
) -> Result<(Vec<(usize, T)>, usize)> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<T>> = pool.install(|| set.records().par_iter().map(&f).collect());
    let mut ok = Vec::with_capacity(results.len());
    let mut skipped = 0;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => ok.push((i, v)),
            Err(e) if !strict => {
                tracing::warn!(error = %e, "skipping query");
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok((ok, skipped))
}

pub fn build_labeled_set(
    train: &QuerySet,
    backends: &Backends,
    cfg: &LabelConfig,
) -> Result<(LabeledSet, LabelSummary)> {
    if train.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let (done, skipped) = run_ordered(train, cfg.workers, cfg.strict, |q| make_label(q, backends, cfg))?;
    if done.is_empty() {
        return Err(Error::Validation(format!(
            "all {skipped} training queries failed to label"
        )));
    }
    let examples: Vec<LabeledExample> = done.into_iter().map(|(_, e)| e).collect();
    let set = LabeledSet::new(examples)?;
    let summary = LabelSummary {
        positive: set.positives(),
        negative: set.len() - set.positives(),
        skipped,
    };
    tracing::info!(?summary, "labeled training set");
    Ok((set, summary))
}

/// Correctness of both retrieval modes for every query, as needed by the
/// oracle router. Failed queries are skipped unless `strict`.
pub fn annotate(
    set: &QuerySet,
    backends: &Backends,
    qa: &QaConfig,
    workers: usize,
    strict: bool,
) -> Result<Vec<(String, Correctness)>> {
    let (done, _) = run_ordered(set, workers, strict, |q| judge(q, backends, qa))?;
    Ok(done
        .into_iter()
        .map(|(i, c)| (set.records()[i].id.clone(), c))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub query_id: String,
    pub label: u8,
    pub nr_correct: bool,
    pub fr_correct: bool,
}

pub fn write_label_records(records: &[LabelRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("label record serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_label_records(path: impl AsRef<Path>) -> Result<Vec<LabelRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        let expected = Correctness {
            nr_correct: rec.nr_correct,
            fr_correct: rec.fr_correct,
        }
        .label();
        if rec.label != expected {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("label {} contradicts correctness bits", rec.label),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn correctness_records(pairs: &[(String, Correctness)]) -> Vec<LabelRecord> {
    pairs
        .iter()
        .map(|(id, c)| LabelRecord {
            query_id: id.clone(),
            label: c.label(),
            nr_correct: c.nr_correct,
            fr_correct: c.fr_correct,
        })
        .collect()
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<HashMap<String, Correctness>> {
    Ok(read_label_records(path)?
        .into_iter()
        .map(|r| {
            (
                r.query_id,
                Correctness {
                    nr_correct: r.nr_correct,
                    fr_correct: r.fr_correct,
                },
            )
        })
        .collect())
}

/// Writes the label JSONL and the embedding cache side by side.
pub fn save_labeled_set(set: &LabeledSet, labels_path: impl AsRef<Path>, cache_path: impl AsRef<Path>) -> Result<()> {
    let records: Vec<LabelRecord> = set
        .examples
        .iter()
        .map(|e| LabelRecord {
            query_id: e.query_id.clone(),
            label: e.label,
            nr_correct: e.nr_correct,
            fr_correct: e.fr_correct,
        })
        .collect();
    write_label_records(&records, labels_path)?;
    let embeddings: Vec<SentenceEmbedding> = set.examples.iter().map(|e| e.embedding.clone()).collect();
    write_embedding_cache(&embeddings, cache_path)
}

pub fn load_labeled_set(labels_path: impl AsRef<Path>, cache_path: impl AsRef<Path>) -> Result<LabeledSet> {
    let records = read_label_records(labels_path)?;
    let mut embeddings: HashMap<String, SentenceEmbedding> = read_embedding_cache(cache_path)?
        .into_iter()
        .map(|e| (e.query_id.clone(), e))
        .collect();
    let examples = records
        .into_iter()
        .map(|r| {
            let embedding = embeddings
                .remove(&r.query_id)
                .ok_or_else(|| Error::Validation(format!("no cached embedding for {:?}", r.query_id)))?;
            Ok(LabeledExample {
                query_id: r.query_id,
                embedding,
                label: r.label,
                nr_correct: r.nr_correct,
                fr_correct: r.fr_correct,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledSet::new(examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::Bm25Index;
    use crate::stub_world::{make_stub_world, StubWorldEntry, StubWorldSpec};
    use proptest::prelude::*;
    use std::sync::Arc;

    #[test]
    fn containment_rules() {
        let gold = vec!["Caroline Benn".to_string()];
        assert!(answer_correct("Caroline Benn.", &gold));
        assert!(answer_correct("caroline  BENN", &gold));
        assert!(!answer_correct("Hilary Mantel", &gold));
        assert!(answer_correct("born in the U.S. in 1950", &["U.S.".to_string()]));
        assert!(!answer_correct("born in the US", &["U.S.".to_string()]));
        assert!(answer_correct_with("born in the US", &["U.S".to_string()], true));
    }

    fn entry(id: &str, knows: bool, in_corpus: bool) -> StubWorldEntry {
        StubWorldEntry {
            id: id.into(),
            question: format!("Who painted the {id} mural?"),
            answers: vec![format!("Painter{id}x")],
            knows_parametric: knows,
            answer_in_corpus: in_corpus,
            entity: None,
            entity_freq: None,
            relation: None,
        }
    }

    fn backends_for(entries: Vec<StubWorldEntry>) -> (Backends, QuerySet) {
        let world = make_stub_world(&StubWorldSpec {
            entries,
            ..Default::default()
        })
        .unwrap();
        let backends = Backends {
            client: world.client.clone(),
            embedder: world.provider.clone(),
            index: Arc::new(Bm25Index::with_defaults(world.corpus).unwrap()),
        };
        (backends, world.queries)
    }

    #[test]
    fn label_rule_on_stub_world() {
        let (backends, queries) = backends_for(vec![
            entry("a", false, true),
            entry("b", true, true),
            entry("c", false, false),
        ]);
        let cfg = LabelConfig::default();
        let labels: Vec<u8> = queries
            .iter()
            .map(|q| make_label(q, &backends, &cfg).unwrap().label)
            .collect();
        assert_eq!(labels, [1, 0, 0]);
        assert_eq!(backends.client.calls(), 6);
        let ex = make_label(&queries.records()[0], &backends, &cfg).unwrap();
        assert_eq!(ex.embedding.layer, 1);
        assert_eq!(ex.embedding.dim(), 16);
    }

    #[test]
    fn ten_query_world_has_four_positives() {
        let flags = [
            (false, true),
            (true, true),
            (false, false),
            (false, true),
            (true, false),
            (false, true),
            (true, true),
            (false, false),
            (false, true),
            (true, false),
        ];
        let entries: Vec<_> = flags
            .iter()
            .enumerate()
            .map(|(i, &(k, c))| entry(&format!("q{i}"), k, c))
            .collect();
        let expected = entries
            .iter()
            .filter(|e| !e.knows_parametric && e.answer_in_corpus)
            .count();
        assert_eq!(expected, 4);
        let (backends, queries) = backends_for(entries);
        let cfg = LabelConfig::default();
        let (set, summary) = build_labeled_set(&queries, &backends, &cfg).unwrap();
        assert_eq!(set.positives(), 4);
        assert_eq!(
            summary,
            LabelSummary {
                positive: 4,
                negative: 6,
                skipped: 0
            }
        );
        assert_eq!(backends.client.calls(), 20);
        let (again, _) = build_labeled_set(&queries, &backends, &cfg).unwrap();
        assert_eq!(set, again);
    }

    #[test]
    fn all_failures_is_an_error() {
        let (mut backends, queries) = backends_for(vec![entry("a", false, true)]);
        backends.embedder = Arc::new(crate::embedding::StubEmbeddingProvider::new(4, 0, 0));
        assert!(build_labeled_set(&queries, &backends, &LabelConfig::default()).is_err());
        let strict = LabelConfig {
            strict: true,
            ..Default::default()
        };
        match build_labeled_set(&queries, &backends, &strict) {
            Err(Error::Query { query_id, .. }) => assert_eq!(query_id, "a"),
            other => panic!("expected query error, got {other:?}"),
        }
    }

    #[test]
    fn labeled_set_persists() {
        let (backends, queries) = backends_for(vec![entry("a", false, true), entry("b", true, false)]);
        let (set, _) = build_labeled_set(&queries, &backends, &LabelConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (l, c) = (dir.path().join("labels.jsonl"), dir.path().join("emb.bin"));
        save_labeled_set(&set, &l, &c).unwrap();
        assert_eq!(load_labeled_set(&l, &c).unwrap(), set);
        let text = fs::read_to_string(&l).unwrap();
        assert!(text.starts_with(r#"{"query_id":"a","label":1,"nr_correct":false,"fr_correct":true}"#));
    }

    #[test]
    fn inconsistent_label_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(
            &path,
            "{\"query_id\":\"a\",\"label\":1,\"nr_correct\":true,\"fr_correct\":true}\n",
        )
        .unwrap();
        assert!(matches!(read_label_records(&path), Err(Error::Parse { line: 1, .. })));
    }

    proptest! {
        #[test]
        fn containment_survives_extension(prefix in "[a-zA-Z ,.]{0,12}", gold in "[a-zA-Z][a-zA-Z .]{0,10}", suffix in "[a-zA-Z ,.]{0,12}", more in "[a-zA-Z ,.]{0,12}") {
            let answers = vec![gold.clone()];
            let p = format!("{prefix} {gold} {suffix}");
            prop_assert!(answer_correct(&p, &answers));
            let extended = format!("{more}{p}{more}");
            prop_assert!(answer_correct(&extended, &answers));
        }

        #[test]
        fn label_is_the_indicator(nr: bool, fr: bool) {
            let c = Correctness { nr_correct: nr, fr_correct: fr };
            prop_assert_eq!(c.label() == 1, fr && !nr);
        }
    }
}
