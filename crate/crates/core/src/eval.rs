//! End-to-end evaluation of a routing policy and the layer sweep.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::classifier::{init_model, train, TrainConfig, DEFAULT_HIDDEN, DEFAULT_THRESHOLD};
use crate::clock::Clock;
use crate::dataset::QuerySet;
use crate::embedding::sentence_embedding;
use crate::error::{Error, Result};
use crate::labeler::{annotate, run_ordered, Correctness, LabelConfig, LabeledExample, LabeledSet};
use crate::qa::{answer_query, Backends, QaConfig};
use crate::routers::{route, EmbeddingRouter, Router};

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub qa: QaConfig,
    pub workers: usize,
    /// Abort on the first backend failure instead of skipping the query.
    pub strict: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            qa: QaConfig::default(),
            workers: 4,
            strict: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quadrants {
    pub retrieved_correct: usize,
    pub retrieved_incorrect: usize,
    pub skipped_correct: usize,
    pub skipped_incorrect: usize,
}

impl Quadrants {
    pub fn add(&mut self, retrieved: bool, correct: bool) {
        match (retrieved, correct) {
            (true, true) => self.retrieved_correct += 1,
            (true, false) => self.retrieved_incorrect += 1,
            (false, true) => self.skipped_correct += 1,
            (false, false) => self.skipped_incorrect += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.retrieved_correct + self.retrieved_incorrect + self.skipped_correct + self.skipped_incorrect
    }

    pub fn retrieved(&self) -> usize {
        self.retrieved_correct + self.retrieved_incorrect
    }

    pub fn correct(&self) -> usize {
        self.retrieved_correct + self.skipped_correct
    }
}

pub fn percent(count: usize, n: usize) -> f64 {
    100.0 * count as f64 / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub dataset: String,
    pub acc_percent: f64,
    pub por_percent: f64,
    pub mean_decision_latency_ms: f64,
    pub mean_end_to_end_latency_ms: f64,
    pub quadrants: Quadrants,
    pub n: usize,
    /// Decision calls plus answer calls.
    pub generation_calls_total: u64,
    pub decision_generation_calls: u64,
    /// Queries dropped after a backend failure.
    pub skipped: usize,
}

impl EvalReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub query_id: String,
    pub retrieved: bool,
    pub correct: bool,
    pub score: Option<f64>,
    pub decision_ms: f64,
    pub end_to_end_ms: f64,
    pub decision_calls: u32,
}

/// Routes, answers and scores every query of `test`. Per-query outcomes are
/// returned in dataset order.
pub fn evaluate_detailed(
    router: &dyn Router,
    test: &QuerySet,
    backends: &Backends,
    cfg: &EvalConfig,
    clock: &dyn Clock,
) -> Result<(EvalReport, Vec<QueryOutcome>)> {
    let (done, skipped) = run_ordered(test, cfg.workers, cfg.strict, |q| {
        let start = clock.now();
        let decision = route(router, q, clock).map_err(|e| Error::for_query(&q.id, e))?;
        let outcome = answer_query(q, decision.retrieve, backends, &cfg.qa).map_err(|e| Error::for_query(&q.id, e))?;
        let total = clock.now().saturating_sub(start);
        Ok(QueryOutcome {
            query_id: q.id.clone(),
            retrieved: decision.retrieve,
            correct: outcome.correct,
            score: decision.score,
            decision_ms: decision.decision_latency.as_secs_f64() * 1e3,
            end_to_end_ms: total.as_secs_f64() * 1e3,
            decision_calls: decision.generation_calls_used,
        })
    })?;
    let outcomes: Vec<QueryOutcome> = done.into_iter().map(|(_, o)| o).collect();
    if outcomes.is_empty() {
        return Err(Error::Validation(format!(
            "no query of {} could be evaluated ({skipped} failed)",
            test.name()
        )));
    }

    let mut quadrants = Quadrants::default();
    let mut decision_ms = 0.0;
    let mut end_to_end_ms = 0.0;
    let mut decision_calls = 0u64;
    for o in &outcomes {
        quadrants.add(o.retrieved, o.correct);
        decision_ms += o.decision_ms;
        end_to_end_ms += o.end_to_end_ms;
        decision_calls += u64::from(o.decision_calls);
    }
    let n = outcomes.len();
    let report = EvalReport {
        policy: router.policy().to_string(),
        dataset: test.name().to_string(),
        acc_percent: percent(quadrants.correct(), n),
        por_percent: percent(quadrants.retrieved(), n),
        mean_decision_latency_ms: decision_ms / n as f64,
        mean_end_to_end_latency_ms: end_to_end_ms / n as f64,
        quadrants,
        n,
        generation_calls_total: decision_calls + n as u64,
        decision_generation_calls: decision_calls,
        skipped,
    };
    tracing::info!(
        policy = %report.policy,
        acc = report.acc_percent,
        por = report.por_percent,
        n,
        "evaluated"
    );
    Ok((report, outcomes))
}

pub fn evaluate(
    router: &dyn Router,
    test: &QuerySet,
    backends: &Backends,
    cfg: &EvalConfig,
    clock: &dyn Clock,
) -> Result<EvalReport> {
    evaluate_detailed(router, test, backends, cfg, clock).map(|(r, _)| r)
}

/// Writes the side-by-side table with columns `Methods,ACC(%),POR(%)`.
pub fn write_summary_csv(reports: &[EvalReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["Methods", "ACC(%)", "POR(%)"])
        .map_err(|e| csv_error(path, e))?;
    for r in reports {
        w.write_record([
            r.policy.clone(),
            format!("{:.2}", r.acc_percent),
            format!("{:.2}", r.por_percent),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Pairs each correctness annotation with the question's embedding at `layer`.
pub fn embed_annotations(
    queries: &QuerySet,
    annotations: &[(String, Correctness)],
    backends: &Backends,
    layer: u32,
    include_bos: bool,
) -> Result<LabeledSet> {
    let examples = annotations
        .iter()
        .map(|(id, c)| {
            let q = queries
                .get(id)
                .ok_or_else(|| Error::Validation(format!("annotation for unknown query {id}")))?;
            let emb = sentence_embedding(backends.embedder.as_ref(), id, &q.question, layer, include_bos)
                .map_err(|e| Error::for_query(id, e))?;
            Ok(LabeledExample::new(id, emb, *c))
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledSet::new(examples)
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub label: LabelConfig,
    pub train: TrainConfig,
    pub hidden: (usize, usize),
    pub threshold: f64,
    pub eval: EvalConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            label: LabelConfig::default(),
            train: TrainConfig::default(),
            hidden: DEFAULT_HIDDEN,
            threshold: DEFAULT_THRESHOLD,
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layer: u32,
    pub acc_percent: f64,
}

/// Trains and evaluates one embedding router per layer. Training queries
/// are annotated once; every layer sees the same split, labels and seeds.
pub fn sweep_layers(
    layers: &[u32],
    train_set: &QuerySet,
    test_set: &QuerySet,
    backends: &Backends,
    cfg: &SweepConfig,
    clock: &dyn Clock,
) -> Result<Vec<SweepRow>> {
    if layers.is_empty() {
        return Err(Error::Validation("no layers requested".into()));
    }
    let max_layer = backends.embedder.max_layer();
    if let Some(bad) = layers.iter().find(|&&l| l > max_layer) {
        return Err(Error::Validation(format!(
            "layer {bad} is not supported: provider {} exposes layers 0..={max_layer}",
            backends.embedder.name()
        )));
    }
    let annotations = annotate(train_set, backends, &cfg.label.qa, cfg.label.workers, cfg.label.strict)?;
    let mut rows = Vec::with_capacity(layers.len());
    for &layer in layers {
        let labeled = embed_annotations(train_set, &annotations, backends, layer, cfg.label.include_bos)?;
        let init = init_model(backends.embedder.dim(), cfg.hidden.0, cfg.hidden.1, cfg.train.seed)?;
        let (mut model, _) = train(&init, &labeled, &cfg.train)?;
        model.meta.layer = layer;
        let router = EmbeddingRouter::new(Arc::new(model), backends.embedder.clone())?
            .with_layer(layer)
            .with_bos(cfg.label.include_bos)
            .with_threshold(cfg.threshold)?;
        let report = evaluate(&router, test_set, backends, &cfg.eval, clock)?;
        tracing::info!(layer, acc = report.acc_percent, "layer evaluated");
        rows.push(SweepRow {
            layer,
            acc_percent: report.acc_percent,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["layer", "acc_percent"])
        .map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record([r.layer.to_string(), format!("{:.2}", r.acc_percent)])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Correctness annotations keyed by id.
pub fn annotation_map(pairs: &[(String, Correctness)]) -> HashMap<String, Correctness> {
    pairs.iter().cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::FixedClock;
    use crate::retrieval::Bm25Index;
    use crate::routers::{FullRetrieval, NoRetrieval, OracleRouter};
    use crate::stub_world::{make_stub_world, StubWorldEntry, StubWorldSpec};

    fn entry(i: usize, knows: bool, in_corpus: bool) -> StubWorldEntry {
        StubWorldEntry {
            id: format!("q{i}"),
            question: format!("Where was zorblat{i} born?"),
            answers: vec![format!("quimtown{i}")],
            knows_parametric: knows,
            answer_in_corpus: in_corpus,
            entity: None,
            entity_freq: None,
            relation: None,
        }
    }

    fn world(entries: Vec<StubWorldEntry>) -> (Backends, QuerySet) {
        let w = make_stub_world(&StubWorldSpec {
            entries,
            ..Default::default()
        })
        .unwrap();
        let backends = Backends {
            client: w.client.clone(),
            embedder: w.provider.clone(),
            index: Arc::new(Bm25Index::with_defaults(w.corpus.clone()).unwrap()),
        };
        (backends, w.queries)
    }

    #[test]
    fn hand_enumerated_accuracy() {
        // 3 known only, 3 corpus only, 4 neither. Full retrieval answers the
        // 3 corpus ones plus none of the rest; no retrieval answers 3.
        // Oracle answers 6 of 10.
        let mut entries = Vec::new();
        for i in 0..3 {
            entries.push(entry(i, true, false));
        }
        for i in 3..6 {
            entries.push(entry(i, false, true));
        }
        for i in 6..10 {
            entries.push(entry(i, false, false));
        }
        let (backends, queries) = world(entries);
        let clock = FixedClock::default();
        let cfg = EvalConfig::default();
        let all = evaluate(&FullRetrieval, &queries, &backends, &cfg, &clock).unwrap();
        assert_eq!(all.por_percent, 100.0);
        assert_eq!(all.acc_percent, 30.0);
        let none = evaluate(&NoRetrieval, &queries, &backends, &cfg, &clock).unwrap();
        assert_eq!(none.por_percent, 0.0);
        assert_eq!(none.acc_percent, 30.0);
        assert_eq!(none.generation_calls_total, 10);
        assert_eq!(none.decision_generation_calls, 0);

        let ann = annotate(&queries, &backends, &cfg.qa, 2, true).unwrap();
        let oracle = OracleRouter::new(annotation_map(&ann));
        let r = evaluate(&oracle, &queries, &backends, &cfg, &clock).unwrap();
        assert_eq!(r.acc_percent, 60.0);
        assert_eq!(r.por_percent, 30.0);
        assert_eq!(r.quadrants.total(), r.n);
    }

    #[test]
    fn summary_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("summary.csv");
        let report = EvalReport {
            policy: "all".into(),
            dataset: "d".into(),
            acc_percent: 100.0 / 3.0,
            por_percent: 100.0,
            mean_decision_latency_ms: 0.0,
            mean_end_to_end_latency_ms: 0.0,
            quadrants: Quadrants::default(),
            n: 3,
            generation_calls_total: 3,
            decision_generation_calls: 0,
            skipped: 0,
        };
        write_summary_csv(std::slice::from_ref(&report), &path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "Methods,ACC(%),POR(%)\nall,33.33,100.00\n"
        );
        let json = dir.path().join("r.json");
        report.save(&json).unwrap();
        assert_eq!(EvalReport::load(&json).unwrap(), report);
    }

    #[test]
    fn sweep_rejects_unsupported_layer() {
        let (backends, queries) = world((0..4).map(|i| entry(i, i % 2 == 0, true)).collect());
        let err = sweep_layers(
            &[0, 9],
            &queries,
            &queries,
            &backends,
            &SweepConfig::default(),
            &FixedClock::default(),
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("layer 9"), "{err}");
        assert!(err.contains("0..=4"), "{err}");
    }
}
