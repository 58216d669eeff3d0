//! Routing policies deciding, per question, whether to retrieve.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::classifier::{check_threshold, ClassifierModel, DEFAULT_THRESHOLD};
use crate::clock::Clock;
use crate::dataset::{QueryRecord, QuerySet};
use crate::embedding::{sentence_embedding, EmbeddingProvider, DEFAULT_LAYER};
use crate::error::{Error, Result};
use crate::labeler::Correctness;
use crate::llm::{GenerationClient, DECISION_MAX_NEW_TOKENS};

/// Threshold stored for "never retrieve": entity frequencies are >= 0, so
/// `freq < 0` never holds.
pub const NEVER_RETRIEVE: f64 = 0.0;
/// Threshold stored for "always retrieve".
pub const ALWAYS_RETRIEVE: f64 = f64::MAX;

/// What a router concluded, before timing is attached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub retrieve: bool,
    pub score: Option<f64>,
    pub generation_calls: u32,
}

impl Verdict {
    fn plain(retrieve: bool, score: Option<f64>) -> Self {
        Self {
            retrieve,
            score,
            generation_calls: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub retrieve: bool,
    pub score: Option<f64>,
    pub policy: String,
    pub decision_latency: Duration,
    pub generation_calls_used: u32,
}

pub trait Router: Send + Sync {
    fn policy(&self) -> &str;

    fn decide(&self, query: &QueryRecord) -> Result<Verdict>;
}

/// Runs `router` on `query`, timing the call with `clock`.
pub fn route(router: &dyn Router, query: &QueryRecord, clock: &dyn Clock) -> Result<RoutingDecision> {
    let start = clock.now();
    let verdict = router.decide(query)?;
    let decision_latency = clock.now().saturating_sub(start);
    Ok(RoutingDecision {
        retrieve: verdict.retrieve,
        score: verdict.score,
        policy: router.policy().to_string(),
        decision_latency,
        generation_calls_used: verdict.generation_calls,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoRetrieval;

impl Router for NoRetrieval {
    fn policy(&self) -> &str {
        "none"
    }

    fn decide(&self, _query: &QueryRecord) -> Result<Verdict> {
        Ok(Verdict::plain(false, None))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FullRetrieval;

impl Router for FullRetrieval {
    fn policy(&self) -> &str {
        "all"
    }

    fn decide(&self, _query: &QueryRecord) -> Result<Verdict> {
        Ok(Verdict::plain(true, None))
    }
}

pub fn oracle_verdict(correctness: Option<Correctness>) -> Result<bool> {
    let c = correctness.ok_or_else(|| Error::Validation("oracle routing needs correctness annotations".into()))?;
    Ok(c.fr_correct && !c.nr_correct)
}

/// Hindsight policy: retrieve exactly when only the retrieval run is correct.
#[derive(Debug, Clone, Default)]
pub struct OracleRouter {
    annotations: HashMap<String, Correctness>,
}

impl OracleRouter {
    pub fn new(annotations: HashMap<String, Correctness>) -> Self {
        Self { annotations }
    }
}

impl Router for OracleRouter {
    fn policy(&self) -> &str {
        "oracle"
    }

    fn decide(&self, query: &QueryRecord) -> Result<Verdict> {
        let retrieve =
            oracle_verdict(self.annotations.get(&query.id).copied()).map_err(|e| Error::for_query(&query.id, e))?;
        Ok(Verdict::plain(retrieve, None))
    }
}

/// Per-relation entity-frequency thresholds. Serialized as a flat JSON
/// object mapping relation names to numbers plus a `"default"` entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyThresholds {
    pub default: f64,
    #[serde(flatten)]
    pub by_relation: BTreeMap<String, f64>,
}

impl FrequencyThresholds {
    pub fn threshold_for(&self, relation: Option<&str>) -> f64 {
        relation
            .and_then(|r| self.by_relation.get(r))
            .copied()
            .unwrap_or(self.default)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("thresholds serialize");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        if !t.default.is_finite() || t.by_relation.values().any(|v| !v.is_finite()) {
            return Err(Error::Validation("thresholds must be finite".into()));
        }
        Ok(t)
    }
}

/// Best threshold for one group: candidates are every distinct frequency plus
/// the two extremes; the policy retrieves iff `freq < threshold`. Ties go to
/// the smaller threshold.
fn fit_group(rows: &mut [(f64, Correctness)]) -> f64 {
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut acc: i64 = rows.iter().map(|(_, c)| i64::from(c.nr_correct)).sum();
    let mut best = (acc, NEVER_RETRIEVE);
    let mut i = 0;
    while i < rows.len() {
        let freq = rows[i].0;
        // Threshold `freq` retrieves everything strictly below it, which is
        // exactly what has been folded into `acc` so far.
        if acc > best.0 {
            best = (acc, freq);
        }
        while i < rows.len() && rows[i].0 == freq {
            let c = rows[i].1;
            acc += i64::from(c.fr_correct) - i64::from(c.nr_correct);
            i += 1;
        }
    }
    if acc > best.0 {
        best = (acc, ALWAYS_RETRIEVE);
    }
    best.1
}

pub fn fit_frequency_thresholds(
    train: &QuerySet,
    correctness: &HashMap<String, Correctness>,
) -> Result<FrequencyThresholds> {
    let rows: Vec<(Option<&str>, f64, Correctness)> = train
        .iter()
        .filter_map(|q| Some((q.relation.as_deref(), q.entity_freq?, *correctness.get(&q.id)?)))
        .collect();
    if rows.is_empty() {
        return Err(Error::Validation(
            "no training query has both entity_freq and correctness annotations; \
             frequency-threshold routing is not applicable to this dataset"
                .into(),
        ));
    }
    let mut pooled: Vec<(f64, Correctness)> = rows.iter().map(|&(_, f, c)| (f, c)).collect();
    let default = fit_group(&mut pooled);

    let mut groups: BTreeMap<&str, Vec<(f64, Correctness)>> = BTreeMap::new();
    for &(rel, f, c) in &rows {
        if let Some(rel) = rel {
            groups.entry(rel).or_default().push((f, c));
        }
    }
    let by_relation = groups
        .into_iter()
        .map(|(rel, mut group)| (rel.to_string(), fit_group(&mut group)))
        .collect();
    Ok(FrequencyThresholds { default, by_relation })
}

pub fn frequency_verdict(query: &QueryRecord, thresholds: &FrequencyThresholds) -> Result<Verdict> {
    let freq = query
        .entity_freq
        .ok_or_else(|| Error::Validation(format!("query {} has no entity_freq", query.id)))?;
    let threshold = thresholds.threshold_for(query.relation.as_deref());
    Ok(Verdict::plain(freq < threshold, Some(freq)))
}

#[derive(Debug, Clone)]
pub struct FrequencyRouter {
    thresholds: FrequencyThresholds,
}

impl FrequencyRouter {
    pub fn new(thresholds: FrequencyThresholds) -> Self {
        Self { thresholds }
    }
}

impl Router for FrequencyRouter {
    fn policy(&self) -> &str {
        "darag"
    }

    fn decide(&self, query: &QueryRecord) -> Result<Verdict> {
        frequency_verdict(query, &self.thresholds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    Vanilla,
    /// Time-aware: the prompt carries today's date.
    Taare,
}

pub const DEFAULT_VANILLA_TEMPLATE: &str = "Answer the following question with Yes or No: would you need to look up \
external documents to answer it correctly?\nQuestion: {question}\nAnswer:";

pub const DEFAULT_TAARE_TEMPLATE: &str = "Today is {date}. Some facts change over time, and your knowledge may be \
out of date or missing. Answer the following question with Yes or No: would you need to look up external \
documents to answer it correctly?\nQuestion: {question}\nAnswer:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTemplates {
    pub vanilla: String,
    pub taare: String,
}

impl Default for DecisionTemplates {
    fn default() -> Self {
        Self {
            vanilla: DEFAULT_VANILLA_TEMPLATE.to_string(),
            taare: DEFAULT_TAARE_TEMPLATE.to_string(),
        }
    }
}

impl DecisionTemplates {
    pub fn template(&self, variant: PromptVariant) -> &str {
        match variant {
            PromptVariant::Vanilla => &self.vanilla,
            PromptVariant::Taare => &self.taare,
        }
    }

    pub fn read_template(path: impl AsRef<Path>) -> Result<String> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if !text.contains("{question}") {
            return Err(Error::Config(format!("{} has no {{question}} slot", path.display())));
        }
        Ok(text)
    }

    pub fn render(&self, variant: PromptVariant, question: &str, clock: &dyn Clock) -> String {
        self.template(variant)
            .replace("{date}", &clock.today().format("%B %-d, %Y").to_string())
            .replace("{question}", question)
    }
}

/// `true` (retrieve) unless the first yes/no word of the completion is "no".
pub fn parse_decision(completion: &str) -> bool {
    let lowered = completion.to_lowercase();
    let first = lowered
        .split(|c: char| !c.is_alphanumeric())
        .find(|w| *w == "yes" || *w == "no");
    first != Some("no")
}

pub struct PromptingRouter {
    client: Arc<dyn GenerationClient>,
    variant: PromptVariant,
    templates: DecisionTemplates,
    clock: Arc<dyn Clock>,
}

impl PromptingRouter {
    pub fn new(
        client: Arc<dyn GenerationClient>,
        variant: PromptVariant,
        templates: DecisionTemplates,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self {
            client,
            variant,
            templates,
            clock,
        }
    }
}

impl Router for PromptingRouter {
    fn policy(&self) -> &str {
        match self.variant {
            PromptVariant::Vanilla => "parag-vanilla",
            PromptVariant::Taare => "parag-taare",
        }
    }

    fn decide(&self, query: &QueryRecord) -> Result<Verdict> {
        let prompt = self
            .templates
            .render(self.variant, &query.question, self.clock.as_ref());
        let completion = self.client.generate(&prompt, DECISION_MAX_NEW_TOKENS)?;
        Ok(Verdict {
            retrieve: parse_decision(&completion),
            score: None,
            generation_calls: 1,
        })
    }
}

/// Retrieves when the classifier's probability on the question's sentence
/// embedding reaches the threshold.
pub struct EmbeddingRouter {
    model: Arc<ClassifierModel>,
    provider: Arc<dyn EmbeddingProvider>,
    layer: u32,
    include_bos: bool,
    threshold: f64,
}

impl EmbeddingRouter {
    pub fn new(model: Arc<ClassifierModel>, provider: Arc<dyn EmbeddingProvider>) -> Result<Self> {
        if provider.dim() != model.input_dim() {
            return Err(Error::Validation(format!(
                "provider dimension {} does not match model input {}",
                provider.dim(),
                model.input_dim()
            )));
        }
        Ok(Self {
            model,
            provider,
            layer: DEFAULT_LAYER,
            include_bos: false,
            threshold: DEFAULT_THRESHOLD,
        })
    }

    pub fn with_layer(mut self, layer: u32) -> Self {
        self.layer = layer;
        self
    }

    pub fn with_bos(mut self, include_bos: bool) -> Self {
        self.include_bos = include_bos;
        self
    }

    pub fn with_threshold(mut self, threshold: f64) -> Result<Self> {
        check_threshold(threshold)?;
        self.threshold = threshold;
        Ok(self)
    }

    pub fn score_question(&self, id: &str, question: &str) -> Result<f64> {
        let emb = sentence_embedding(self.provider.as_ref(), id, question, self.layer, self.include_bos)?;
        Ok(self.model.forward(&emb)? as f64)
    }
}

impl Router for EmbeddingRouter {
    fn policy(&self) -> &str {
        "ei"
    }

    fn decide(&self, query: &QueryRecord) -> Result<Verdict> {
        let p = self.score_question(&query.id, &query.question)?;
        Ok(Verdict::plain(p >= self.threshold, Some(p)))
    }
}

pub fn route_none(query: &QueryRecord, clock: &dyn Clock) -> RoutingDecision {
    route(&NoRetrieval, query, clock).expect("constant policy cannot fail")
}

pub fn route_all(query: &QueryRecord, clock: &dyn Clock) -> RoutingDecision {
    route(&FullRetrieval, query, clock).expect("constant policy cannot fail")
}

pub fn route_oracle(
    query: &QueryRecord,
    correctness: Option<Correctness>,
    clock: &dyn Clock,
) -> Result<RoutingDecision> {
    let annotations = correctness.map(|c| (query.id.clone(), c)).into_iter().collect();
    route(&OracleRouter::new(annotations), query, clock)
}

pub fn route_frequency(
    query: &QueryRecord,
    thresholds: &FrequencyThresholds,
    clock: &dyn Clock,
) -> Result<RoutingDecision> {
    route(&FrequencyRouter::new(thresholds.clone()), query, clock)
}

pub fn route_prompted(
    query: &QueryRecord,
    client: Arc<dyn GenerationClient>,
    variant: PromptVariant,
    clock: Arc<dyn Clock>,
) -> Result<RoutingDecision> {
    let router = PromptingRouter::new(client, variant, DecisionTemplates::default(), clock.clone());
    route(&router, query, clock.as_ref())
}

pub fn route_embedding(
    query: &QueryRecord,
    model: Arc<ClassifierModel>,
    provider: Arc<dyn EmbeddingProvider>,
    threshold: f64,
    clock: &dyn Clock,
) -> Result<RoutingDecision> {
    let router = EmbeddingRouter::new(model, provider)?.with_threshold(threshold)?;
    route(&router, query, clock)
}
