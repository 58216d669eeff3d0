//! Deterministic synthetic worlds: a generation stub, an embedding stub and a
//! passage corpus that agree on which questions the "model" already knows and
//! which answers the corpus holds.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{relation_names, render_template, QueryRecord, QuerySet};
use crate::embedding::{fnv1a, normalize_question, StubEmbeddingProvider};
use crate::error::{Error, Result};
use crate::labeler::answer_correct;
use crate::llm::{check_budget, parse_prompt, CallCounter, GenerationClient};
use crate::retrieval::Passage;

/// Completion emitted whenever the stub does not know the answer.
pub const WRONG_ANSWER: &str = "I am not sure.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubWorldEntry {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
    pub knows_parametric: bool,
    pub answer_in_corpus: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_freq: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<String>,
}

impl StubWorldEntry {
    /// Retrieval strictly helps: only the retrieval path yields the gold answer.
    pub fn retrieval_helps(&self) -> bool {
        self.answer_in_corpus && !self.knows_parametric
    }

    pub fn to_record(&self) -> QueryRecord {
        QueryRecord {
            id: self.id.clone(),
            question: self.question.clone(),
            answers: self.answers.clone(),
            entity: self.entity.clone(),
            entity_freq: self.entity_freq,
            relation: self.relation.clone(),
        }
    }
}

/// How the stub answers "do you need retrieval?" prompts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DecisionReplies {
    AlwaysYes,
    AlwaysNo,
    /// Answers "Yes" exactly when the model lacks parametric knowledge.
    SelfAware,
    /// Per-question seeded coin flip.
    Coin {
        p_yes: f64,
        seed: u64,
    },
}

impl Default for DecisionReplies {
    fn default() -> Self {
        DecisionReplies::Coin { p_yes: 0.5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StubEmbeddingSettings {
    pub dim: usize,
    pub max_layer: u32,
    pub seed: u64,
    /// Magnitude of the injected knowledge coordinates.
    pub signal_scale: f32,
    pub context_noise: f32,
    /// Lowest layer carrying the signal.
    pub signal_min_layer: u32,
}

impl Default for StubEmbeddingSettings {
    fn default() -> Self {
        Self {
            dim: 16,
            max_layer: 4,
            seed: 0,
            signal_scale: 3.0,
            context_noise: 0.5,
            signal_min_layer: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StubWorldSpec {
    pub entries: Vec<StubWorldEntry>,
    pub embedding: StubEmbeddingSettings,
    pub decisions: DecisionReplies,
}

pub struct StubWorld {
    pub client: Arc<StubWorldClient>,
    pub provider: Arc<StubEmbeddingProvider>,
    pub corpus: Vec<Passage>,
    pub queries: QuerySet,
}

struct Known {
    answers: Vec<String>,
    knows_parametric: bool,
}

/// Generation stub over a fixed world.
///
/// For a question-answering prompt it returns the gold answer when the prompt
/// has no context and the world says the model knows it, or when some context
/// line contains a gold answer. Every other case yields [`WRONG_ANSWER`].
/// Any other prompt is treated as a retrieval-decision prompt for the world
/// question it mentions.
pub struct StubWorldClient {
    known: HashMap<String, Known>,
    questions: Vec<(String, String)>,
    decisions: DecisionReplies,
    counter: CallCounter,
}

impl StubWorldClient {
    fn answer(&self, question: &str, context: &[String]) -> String {
        let Some(k) = self.known.get(&normalize_question(question)) else {
            return WRONG_ANSWER.to_string();
        };
        let correct = if context.is_empty() {
            k.knows_parametric
        } else {
            context.iter().any(|c| answer_correct(c, &k.answers))
        };
        if correct {
            k.answers[0].clone()
        } else {
            WRONG_ANSWER.to_string()
        }
    }

    fn decide(&self, prompt: &str) -> String {
        let lowered = normalize_question(prompt);
        let mentioned = self
            .questions
            .iter()
            .filter(|(norm, _)| lowered.contains(norm.as_str()))
            .max_by_key(|(norm, _)| norm.len());
        let yes = match (self.decisions, mentioned) {
            (DecisionReplies::AlwaysYes, _) => true,
            (DecisionReplies::AlwaysNo, _) => false,
            (DecisionReplies::SelfAware, Some((norm, _))) => !self.known[norm].knows_parametric,
            (DecisionReplies::Coin { p_yes, seed }, Some((_, id))) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&[b"decide", id.as_bytes()]));
                rng.random::<f64>() < p_yes
            }
            (_, None) => true,
        };
        if yes { "Yes, retrieval is needed." } else { "No." }.to_string()
    }
}

impl GenerationClient for StubWorldClient {
    fn name(&self) -> &str {
        "stub-world"
    }

    fn calls(&self) -> u64 {
        self.counter.get()
    }

    fn generate(&self, prompt: &str, max_new_tokens: usize) -> Result<String> {
        self.counter.bump();
        check_budget(max_new_tokens)?;
        Ok(match parse_prompt(prompt) {
            Some((question, context)) => self.answer(&question, &context),
            None => self.decide(prompt),
        })
    }
}

/// Coordinate 0 encodes parametric knowledge, coordinate 1 corpus coverage.
fn signal_vector(entry: &StubWorldEntry, settings: &StubEmbeddingSettings) -> Vec<f32> {
    let s = settings.signal_scale;
    let sign = |b: bool| if b { s } else { -s };
    let mut v = vec![0.0; settings.dim];
    v[0] = sign(entry.knows_parametric);
    v[1] = sign(entry.answer_in_corpus);
    v
}

pub fn make_stub_world(spec: &StubWorldSpec) -> Result<StubWorld> {
    if spec.embedding.dim < 2 {
        return Err(Error::Validation("stub embedding dim must be >= 2".into()));
    }
    let queries = QuerySet::new(
        "stub-world",
        spec.entries.iter().map(StubWorldEntry::to_record).collect(),
    )?;

    let mut provider = StubEmbeddingProvider::new(spec.embedding.dim, spec.embedding.max_layer, spec.embedding.seed)
        .with_context_noise(spec.embedding.context_noise)
        .with_signal_min_layer(spec.embedding.signal_min_layer);
    let mut known = HashMap::new();
    let mut questions = Vec::new();
    let mut corpus = Vec::new();
    for e in &spec.entries {
        provider.add_signal(&e.question, signal_vector(e, &spec.embedding));
        let norm = normalize_question(&e.question);
        questions.push((norm.clone(), e.id.clone()));
        known.insert(
            norm,
            Known {
                answers: e.answers.clone(),
                knows_parametric: e.knows_parametric,
            },
        );
        let text = if e.answer_in_corpus {
            format!("{} The answer is {}.", e.question, e.answers[0])
        } else {
            format!("{} No record of the answer exists.", e.question)
        };
        corpus.push(Passage::new(format!("doc-{}", e.id), e.entity.clone(), text));
    }

    let client = StubWorldClient {
        known,
        questions,
        decisions: spec.decisions,
        counter: CallCounter::default(),
    };
    Ok(StubWorld {
        client: Arc::new(client),
        provider: Arc::new(provider),
        corpus,
        queries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticWorldConfig {
    pub n: usize,
    pub seed: u64,
    /// Probability that the corpus holds a question's answer.
    pub p_in_corpus: f64,
    /// Centre and spread of ln(entity_freq); knowledge probability rises
    /// logistically with ln(entity_freq) around the centre.
    pub log_freq_mean: f64,
    pub log_freq_std: f64,
    pub knowledge_slope: f64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            seed: 0,
            p_in_corpus: 0.7,
            log_freq_mean: 6.0,
            log_freq_std: 2.0,
            knowledge_slope: 1.5,
        }
    }
}

const SYLLABLES: [&str; 20] = [
    "ba", "ke", "lo", "mu", "ri", "sa", "to", "vu", "ze", "ni", "po", "da", "fe", "gu", "ho", "ju", "wy", "xo", "qe",
    "ty",
];

fn pseudo_word(rng: &mut ChaCha8Rng, taken: &mut HashSet<String>) -> String {
    let banned: Vec<String> = relation_names()
        .filter_map(|r| render_template(r, "").ok())
        .map(|t| t.to_lowercase())
        .collect();
    loop {
        let w: String = (0..4)
            .map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())])
            .collect();
        if banned.iter().any(|t| t.contains(&w)) || !taken.insert(w.clone()) {
            continue;
        }
        let mut chars = w.chars();
        let first = chars.next().unwrap().to_ascii_uppercase();
        return std::iter::once(first).chain(chars).collect();
    }
}

/// Entity-centric synthetic questions over the 16 relation templates.
/// Entities and answers are distinct eight-letter pseudo-words, so no gold
/// answer is a substring of anything else in the world.
pub fn synthetic_entries(cfg: &SyntheticWorldConfig) -> Vec<StubWorldEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let relations: Vec<&str> = relation_names().collect();
    let log_freq = Normal::new(cfg.log_freq_mean, cfg.log_freq_std.max(1e-9)).expect("valid normal");
    let mut taken = HashSet::new();
    (0..cfg.n)
        .map(|i| {
            let relation = relations[i % relations.len()];
            let entity = pseudo_word(&mut rng, &mut taken);
            let answer = pseudo_word(&mut rng, &mut taken);
            let ln_f: f64 = log_freq.sample(&mut rng);
            let p_know = 1.0 / (1.0 + (-(cfg.knowledge_slope * (ln_f - cfg.log_freq_mean))).exp());
            let knows_parametric = rng.random::<f64>() < p_know;
            let answer_in_corpus = rng.random::<f64>() < cfg.p_in_corpus;
            StubWorldEntry {
                id: format!("w{:05}", i),
                question: render_template(relation, &entity).expect("known relation"),
                answers: vec![answer],
                knows_parametric,
                answer_in_corpus,
                entity: Some(entity),
                entity_freq: Some(ln_f.exp().round()),
                relation: Some(relation.to_string()),
            }
        })
        .collect()
}

pub fn synthetic_world_spec(cfg: &SyntheticWorldConfig, embedding: StubEmbeddingSettings) -> StubWorldSpec {
    StubWorldSpec {
        entries: synthetic_entries(cfg),
        embedding,
        decisions: DecisionReplies::Coin {
            p_yes: 0.5,
            seed: cfg.seed,
        },
    }
}

pub fn load_world_entries(path: impl AsRef<Path>) -> Result<Vec<StubWorldEntry>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn save_world_entries(entries: &[StubWorldEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for e in entries {
        text.push_str(&serde_json::to_string(e).expect("entry serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
