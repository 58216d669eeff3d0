//! Generation backends and few-shot prompt construction.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{relation_names, QueryRecord, QuerySet};
use crate::error::{Error, Result};
use crate::http::{HttpSettings, JsonTransport};
use crate::retrieval::Passage;
use crate::wire::{GenerateRequest, GenerateResponse};

pub const DEFAULT_SHOTS: usize = 15;
pub const ANSWER_MAX_NEW_TOKENS: usize = 32;
pub const DECISION_MAX_NEW_TOKENS: usize = 5;

/// A greedy text generator. Every call to `generate` bumps `calls()` by one,
/// whether or not it succeeds.
pub trait GenerationClient: Send + Sync {
    fn name(&self) -> &str;

    fn calls(&self) -> u64;

    fn generate(&self, prompt: &str, max_new_tokens: usize) -> Result<String>;
}

#[derive(Debug, Default)]
pub struct CallCounter(AtomicU64);

impl CallCounter {
    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::SeqCst);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

pub(crate) fn check_budget(max_new_tokens: usize) -> Result<()> {
    if max_new_tokens == 0 {
        return Err(Error::Validation("max_new_tokens must be >= 1".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassagePlacement {
    #[default]
    BeforeExemplars,
    AfterExemplars,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSpec {
    pub exemplars: Vec<Exemplar>,
    pub passages: Option<Vec<Passage>>,
    pub question: String,
    pub max_new_tokens: usize,
    pub placement: PassagePlacement,
}

impl PromptSpec {
    pub fn new(question: impl Into<String>) -> Self {
        Self {
            exemplars: Vec::new(),
            passages: None,
            question: question.into(),
            max_new_tokens: ANSWER_MAX_NEW_TOKENS,
            placement: PassagePlacement::default(),
        }
    }
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Renders `Context:` lines, `Q: .. A: ..` exemplar lines and the final
/// `Q: <question> A:` line, newline-separated. An empty passage list is
/// treated like no passages.
pub fn build_prompt(spec: &PromptSpec) -> String {
    let context: Vec<String> = spec
        .passages
        .iter()
        .flatten()
        .map(|p| format!("Context: {}", one_line(&p.text)))
        .collect();
    let shots = spec
        .exemplars
        .iter()
        .map(|e| format!("Q: {} A: {}", one_line(&e.question), one_line(&e.answer)));

    let mut lines: Vec<String> = Vec::new();
    match spec.placement {
        PassagePlacement::BeforeExemplars => {
            lines.extend(context);
            lines.extend(shots);
        }
        PassagePlacement::AfterExemplars => {
            lines.extend(shots);
            lines.extend(context);
        }
    }
    lines.push(format!("Q: {} A:", one_line(&spec.question)));
    lines.join("\n")
}

/// Pulls the target question and any context lines back out of a prompt
/// produced by [`build_prompt`].
pub fn parse_prompt(prompt: &str) -> Option<(String, Vec<String>)> {
    let last = prompt.lines().last()?;
    let question = last.strip_prefix("Q: ")?.strip_suffix(" A:")?.to_string();
    let context = prompt
        .lines()
        .filter_map(|l| l.strip_prefix("Context: "))
        .map(str::to_string)
        .collect();
    Some((question, context))
}

/// Seeded few-shot exemplar selection.
///
/// With relation-tagged training data, one exemplar is drawn per relation and
/// a query sees the exemplars of every relation except its own. Otherwise a
/// single fixed draw of `shots` training records is shared by all queries.
#[derive(Debug, Clone, Default)]
pub struct ExemplarPool {
    shots: usize,
    by_relation: BTreeMap<usize, Exemplar>,
    fixed: Vec<Exemplar>,
}

impl ExemplarPool {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_train(train: &QuerySet, shots: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let to_exemplar = |r: &QueryRecord| Exemplar {
            question: r.question.clone(),
            answer: r.answers[0].clone(),
        };

        let mut grouped: HashMap<&str, Vec<&QueryRecord>> = HashMap::new();
        for r in train.iter() {
            if let Some(rel) = r.relation.as_deref() {
                grouped.entry(rel).or_default().push(r);
            }
        }
        let mut by_relation = BTreeMap::new();
        for (order, rel) in relation_names().enumerate() {
            if let Some(group) = grouped.get(rel) {
                let pick = group.choose(&mut rng).expect("group is non-empty");
                by_relation.insert(order, to_exemplar(pick));
            }
        }

        let mut all: Vec<&QueryRecord> = train.iter().collect();
        all.shuffle(&mut rng);
        let fixed = all.into_iter().take(shots).map(to_exemplar).collect();
        Self {
            shots,
            by_relation,
            fixed,
        }
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    pub fn for_query(&self, query: &QueryRecord) -> Vec<Exemplar> {
        if self.by_relation.is_empty() {
            return self.fixed.clone();
        }
        let own = query
            .relation
            .as_deref()
            .and_then(|rel| relation_names().position(|r| r == rel));
        self.by_relation
            .iter()
            .filter(|(order, _)| Some(**order) != own)
            .map(|(_, e)| e.clone())
            .take(self.shots)
            .collect()
    }
}

/// Test client answering from a prompt → completion table.
#[derive(Debug, Default)]
pub struct ScriptedClient {
    replies: HashMap<String, String>,
    fallback: String,
    counter: CallCounter,
}

impl ScriptedClient {
    pub fn new(fallback: impl Into<String>) -> Self {
        Self {
            fallback: fallback.into(),
            ..Default::default()
        }
    }

    pub fn with_reply(mut self, prompt: impl Into<String>, reply: impl Into<String>) -> Self {
        self.replies.insert(prompt.into(), reply.into());
        self
    }
}

impl GenerationClient for ScriptedClient {
    fn name(&self) -> &str {
        "scripted"
    }

    fn calls(&self) -> u64 {
        self.counter.get()
    }

    fn generate(&self, prompt: &str, max_new_tokens: usize) -> Result<String> {
        self.counter.bump();
        check_budget(max_new_tokens)?;
        Ok(self.replies.get(prompt).unwrap_or(&self.fallback).clone())
    }
}

/// Calls a remote `POST /generate` endpoint with greedy decoding.
pub struct HttpGenerationClient {
    transport: JsonTransport,
    counter: CallCounter,
}

impl HttpGenerationClient {
    pub fn new(settings: &HttpSettings) -> Result<Self> {
        Ok(Self {
            transport: JsonTransport::new(settings)?,
            counter: CallCounter::default(),
        })
    }
}

impl GenerationClient for HttpGenerationClient {
    fn name(&self) -> &str {
        "http"
    }

    fn calls(&self) -> u64 {
        self.counter.get()
    }

    fn generate(&self, prompt: &str, max_new_tokens: usize) -> Result<String> {
        self.counter.bump();
        check_budget(max_new_tokens)?;
        let req = GenerateRequest {
            prompt: prompt.to_string(),
            max_new_tokens,
            greedy: true,
        };
        let resp: GenerateResponse = self.transport.post("/generate", &req)?;
        Ok(resp.text)
    }
}
