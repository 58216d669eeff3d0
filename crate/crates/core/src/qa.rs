//! The shared question-answering path: optionally retrieve, build the
//! few-shot prompt, generate, and score containment.

use std::sync::Arc;

use crate::dataset::QueryRecord;
use crate::embedding::EmbeddingProvider;
use crate::error::Result;
use crate::labeler::answer_correct_with;
use crate::llm::{build_prompt, ExemplarPool, GenerationClient, PassagePlacement, PromptSpec, ANSWER_MAX_NEW_TOKENS};
use crate::retrieval::{Bm25Index, DEFAULT_TOP_K};
use crate::wire::PassageScore;

/// Everything a pipeline talks to. Cheap to clone.
#[derive(Clone)]
pub struct Backends {
    pub client: Arc<dyn GenerationClient>,
    pub embedder: Arc<dyn EmbeddingProvider>,
    pub index: Arc<Bm25Index>,
}

#[derive(Debug, Clone)]
pub struct QaConfig {
    pub exemplars: ExemplarPool,
    pub top_k: usize,
    pub placement: PassagePlacement,
    pub max_new_tokens: usize,
    pub ignore_punctuation: bool,
}

impl Default for QaConfig {
    fn default() -> Self {
        Self {
            exemplars: ExemplarPool::empty(),
            top_k: DEFAULT_TOP_K,
            placement: PassagePlacement::default(),
            max_new_tokens: ANSWER_MAX_NEW_TOKENS,
            ignore_punctuation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaOutcome {
    pub completion: String,
    pub passages: Vec<PassageScore>,
    pub correct: bool,
}

pub fn answer_query(query: &QueryRecord, retrieve: bool, backends: &Backends, cfg: &QaConfig) -> Result<QaOutcome> {
    let mut spec = PromptSpec::new(&query.question);
    spec.exemplars = cfg.exemplars.for_query(query);
    spec.placement = cfg.placement;
    spec.max_new_tokens = cfg.max_new_tokens;

    let mut passages = Vec::new();
    if retrieve {
        let hits = backends.index.search(&query.question, cfg.top_k);
        passages = hits
            .iter()
            .map(|h| PassageScore {
                doc_id: h.passage.doc_id.clone(),
                score: h.score,
            })
            .collect();
        if !hits.is_empty() {
            spec.passages = Some(hits.into_iter().map(|h| h.passage.clone()).collect());
        }
    }

    let completion = backends.client.generate(&build_prompt(&spec), spec.max_new_tokens)?;
    let correct = answer_correct_with(&completion, &query.answers, cfg.ignore_punctuation);
    Ok(QaOutcome {
        completion,
        passages,
        correct,
    })
}
