//! Question sets: the canonical `QueryRecord` form, JSON Lines I/O, relation
//! templates and seeded train/test splitting.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier of the PRNG + shuffle used by [`split_query_set`].
pub const SPLIT_ALGORITHM: &str = "chacha8-fisher-yates";

const TEMPLATE_TABLE: &str = include_str!("../data/relation_templates.tsv");
const SUBJECT_SLOT: &str = "[subj]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_freq: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<String>,
}

impl QueryRecord {
    pub fn new(id: impl Into<String>, question: impl Into<String>, answers: Vec<String>) -> Self {
        Self {
            id: id.into(),
            question: question.into(),
            answers,
            entity: None,
            entity_freq: None,
            relation: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Validation("record id is empty".into()));
        }
        if self.question.trim().is_empty() {
            return Err(Error::Validation(format!("record {}: question is empty", self.id)));
        }
        if self.answers.is_empty() {
            return Err(Error::Validation(format!("record {}: answers is empty", self.id)));
        }
        if let Some(freq) = self.entity_freq {
            if !freq.is_finite() || freq < 0.0 {
                return Err(Error::Validation(format!(
                    "record {}: entity_freq must be finite and >= 0, got {freq}",
                    self.id
                )));
            }
        }
        if let Some(relation) = &self.relation {
            if template_for(relation).is_none() {
                return Err(Error::Validation(format!(
                    "record {}: unknown relation {relation:?}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// An ordered, id-unique collection of records. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    name: String,
    records: Vec<QueryRecord>,
}

impl QuerySet {
    pub fn new(name: impl Into<String>, records: Vec<QueryRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for record in &records {
            record.validate()?;
            if !seen.insert(record.id.as_str()) {
                return Err(Error::Validation(format!("duplicate id {:?}", record.id)));
            }
        }
        Ok(Self {
            name: name.into(),
            records,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn records(&self) -> &[QueryRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&QueryRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &QueryRecord> {
        self.records.iter()
    }
}

/// Reads a JSON Lines query file. Blank lines are skipped; unknown fields are
/// ignored. The set is named after the file stem.
pub fn load_query_set(path: impl AsRef<Path>) -> Result<QuerySet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_query_set(BufReader::new(file), name)
}

pub fn read_query_set(reader: impl BufRead, name: impl Into<String>) -> Result<QuerySet> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: QueryRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        record.validate().map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    QuerySet::new(name, records)
}

pub fn save_query_set(set: &QuerySet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for record in set.iter() {
        let line = serde_json::to_string(record).expect("QueryRecord serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn template_table() -> &'static [(String, String)] {
    static TABLE: OnceLock<Vec<(String, String)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        TEMPLATE_TABLE
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let (rel, tpl) = l.split_once('\t').expect("template rows are tab-separated");
                (rel.to_string(), tpl.to_string())
            })
            .collect()
    })
}

/// The 16 relation names, in table order.
pub fn relation_names() -> impl Iterator<Item = &'static str> {
    template_table().iter().map(|(r, _)| r.as_str())
}

pub fn template_for(relation: &str) -> Option<&'static str> {
    template_table()
        .iter()
        .find(|(r, _)| r == relation)
        .map(|(_, t)| t.as_str())
}

pub fn render_template(relation: &str, subject: &str) -> Result<String> {
    let template = template_for(relation).ok_or_else(|| {
        let valid: Vec<_> = relation_names().collect();
        Error::Validation(format!(
            "unknown relation {relation:?}; valid relations: {}",
            valid.join(", ")
        ))
    })?;
    Ok(template.replacen(SUBJECT_SLOT, subject, 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    #[default]
    Uniform,
    /// Split each relation group separately; records without a relation form
    /// their own group.
    StratifiedByRelation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub algorithm: String,
    pub seed: u64,
    pub strategy: SplitStrategy,
    pub train_fraction: f64,
    pub train: usize,
    pub test: usize,
}

pub fn split_query_set(set: &QuerySet, train_fraction: f64, seed: u64) -> Result<(QuerySet, QuerySet, SplitReport)> {
    split_query_set_with(set, train_fraction, seed, SplitStrategy::Uniform)
}

pub fn split_query_set_with(
    set: &QuerySet,
    train_fraction: f64,
    seed: u64,
    strategy: SplitStrategy,
) -> Result<(QuerySet, QuerySet, SplitReport)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Validation(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    if set.is_empty() {
        return Err(Error::Validation("cannot split an empty query set".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = match strategy {
        SplitStrategy::Uniform => vec![(0..set.len()).collect()],
        SplitStrategy::StratifiedByRelation => {
            let mut by_rel: BTreeMap<Option<&str>, Vec<usize>> = BTreeMap::new();
            for (i, r) in set.iter().enumerate() {
                by_rel.entry(r.relation.as_deref()).or_default().push(i);
            }
            by_rel.into_values().collect()
        }
    };

    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for mut group in groups {
        group.shuffle(&mut rng);
        let cut = (train_fraction * group.len() as f64).round() as usize;
        train_idx.extend_from_slice(&group[..cut]);
        test_idx.extend_from_slice(&group[cut..]);
    }

    let pick = |idx: &[usize]| idx.iter().map(|&i| set.records[i].clone()).collect::<Vec<_>>();
    let train = QuerySet {
        name: format!("{}-train", set.name),
        records: pick(&train_idx),
    };
    let test = QuerySet {
        name: format!("{}-test", set.name),
        records: pick(&test_idx),
    };
    let report = SplitReport {
        algorithm: SPLIT_ALGORITHM.to_string(),
        seed,
        strategy,
        train_fraction,
        train: train.len(),
        test: test.len(),
    };
    Ok((train, test, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn records(n: usize) -> Vec<QueryRecord> {
        (0..n)
            .map(|i| QueryRecord::new(format!("q{i}"), format!("Question {i}?"), vec![format!("a{i}")]))
            .collect()
    }

    #[test]
    fn four_line_fixture_loads_in_order() {
        let text = r#"{"id":"a","question":"Who?","answers":["x"]}
{"id":"b","question":"What?","answers":["y","z"],"relation":"capital","extra":1}
{"id":"c","question":"When?","answers":["w"],"entity":"E","entity_freq":12.5}
{"id":"d","question":"Where?","answers":["v"]}
"#;
        let set = read_query_set(text.as_bytes(), "fixture").unwrap();
        assert_eq!(set.len(), 4);
        let ids: Vec<_> = set.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c", "d"]);
        assert_eq!(set.get("c").unwrap().entity_freq, Some(12.5));
    }

    #[test]
    fn empty_input_is_an_empty_set() {
        let set = read_query_set("".as_bytes(), "empty").unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn missing_answers_reports_line() {
        let text = "{\"id\":\"a\",\"question\":\"Who?\",\"answers\":[\"x\"]}\n{\"id\":\"b\",\"question\":\"What?\"}\n";
        match read_query_set(text.as_bytes(), "bad") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = "{\"id\":\"a\",\"question\":\"Who?\",\"answers\":[\"x\"]}\n{\"id\":\"a\",\"question\":\"What?\",\"answers\":[\"y\"]}\n";
        assert!(matches!(
            read_query_set(text.as_bytes(), "dup"),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn invalid_fields_rejected() {
        let bad_rel = "{\"id\":\"a\",\"question\":\"Who?\",\"answers\":[\"x\"],\"relation\":\"birthplace\"}\n";
        assert!(read_query_set(bad_rel.as_bytes(), "x").is_err());
        let bad_freq = "{\"id\":\"a\",\"question\":\"Who?\",\"answers\":[\"x\"],\"entity_freq\":-1}\n";
        assert!(read_query_set(bad_freq.as_bytes(), "x").is_err());
        let blank_q = "{\"id\":\"a\",\"question\":\"  \",\"answers\":[\"x\"]}\n";
        assert!(read_query_set(blank_q.as_bytes(), "x").is_err());
        let no_answers = "{\"id\":\"a\",\"question\":\"Who?\",\"answers\":[]}\n";
        assert!(read_query_set(no_answers.as_bytes(), "x").is_err());
    }

    #[test]
    fn template_table_has_sixteen_relations() {
        assert_eq!(relation_names().count(), 16);
        assert_eq!(
            render_template("capital", "France").unwrap(),
            "What is the capital of France?"
        );
        assert_eq!(
            render_template("director", "Titanic").unwrap(),
            "Who was the director of Titanic?"
        );
        assert_eq!(
            render_template("occupation", "Ada").unwrap(),
            "What is Ada's occupation?"
        );
        assert_eq!(
            render_template("capital of", "Paris").unwrap(),
            "What is Paris the capital of?"
        );
    }

    #[test]
    fn unknown_relation_lists_valid_ones() {
        let err = render_template("birthplace", "X").unwrap_err().to_string();
        assert!(err.contains("birthplace"));
        assert!(err.contains("place of birth"));
    }

    #[test]
    fn split_sizes() {
        let set = QuerySet::new("s", records(100)).unwrap();
        let (train, test, report) = split_query_set(&set, 0.75, 1).unwrap();
        assert_eq!((train.len(), test.len()), (75, 25));
        assert_eq!(report.algorithm, SPLIT_ALGORITHM);

        let set = QuerySet::new("s", records(3600)).unwrap();
        let (train, test, _) = split_query_set(&set, 0.75, 1).unwrap();
        assert_eq!((train.len(), test.len()), (2700, 900));
    }

    #[test]
    fn split_is_seeded() {
        let set = QuerySet::new("s", records(50)).unwrap();
        let (a, _, _) = split_query_set(&set, 0.6, 42).unwrap();
        let (b, _, _) = split_query_set(&set, 0.6, 42).unwrap();
        let (c, _, _) = split_query_set(&set, 0.6, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let set = QuerySet::new("s", records(10)).unwrap();
        for f in [0.0, 1.0, -0.5, 1.5, f64::NAN] {
            assert!(split_query_set(&set, f, 0).is_err(), "fraction {f}");
        }
        let empty = QuerySet::new("e", vec![]).unwrap();
        assert!(split_query_set(&empty, 0.5, 0).is_err());
    }

    #[test]
    fn stratified_split_covers_every_relation() {
        let mut recs = records(40);
        let rels: Vec<_> = relation_names().take(4).collect();
        for (i, r) in recs.iter_mut().enumerate() {
            r.relation = Some(rels[i % 4].to_string());
        }
        let set = QuerySet::new("s", recs).unwrap();
        let (train, test, report) = split_query_set_with(&set, 0.5, 3, SplitStrategy::StratifiedByRelation).unwrap();
        assert_eq!(report.strategy, SplitStrategy::StratifiedByRelation);
        for rel in rels {
            let count = |s: &QuerySet| s.iter().filter(|r| r.relation.as_deref() == Some(rel)).count();
            assert_eq!(count(&train), 5);
            assert_eq!(count(&test), 5);
        }
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.jsonl");
        let mut recs = records(3);
        recs[1].entity = Some("E".into());
        recs[1].entity_freq = Some(0.1);
        recs[2].relation = Some("sport".into());
        let set = QuerySet::new("set", recs).unwrap();
        save_query_set(&set, &path).unwrap();
        assert_eq!(load_query_set(&path).unwrap(), set);
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 1usize..200, frac in 0.01f64..0.99, seed: u64) {
            let set = QuerySet::new("p", records(n)).unwrap();
            let (train, test, _) = split_query_set(&set, frac, seed).unwrap();
            prop_assert_eq!(train.len(), (frac * n as f64).round() as usize);
            let mut ids: Vec<_> = train.iter().chain(test.iter()).map(|r| r.id.clone()).collect();
            ids.sort();
            let mut expected: Vec<_> = set.iter().map(|r| r.id.clone()).collect();
            expected.sort();
            prop_assert_eq!(ids, expected);
        }

        #[test]
        fn templates_are_injective(a in "[A-Za-z ]{1,12}", b in "[A-Za-z ]{1,12}", rel_idx in 0usize..16) {
            let rel = relation_names().nth(rel_idx).unwrap();
            prop_assume!(a != b);
            prop_assert_ne!(render_template(rel, &a).unwrap(), render_template(rel, &b).unwrap());
        }
    }
}
