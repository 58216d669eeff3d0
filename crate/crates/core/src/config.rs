//! TOML configuration, artifact layout, and construction of backends and
//! routers from a configuration.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierModel, TrainConfig, DEFAULT_HIDDEN, DEFAULT_THRESHOLD};
use crate::clock::{Clock, FixedClock, SystemClock};
use crate::dataset::{load_query_set, QuerySet, SplitStrategy};
use crate::embedding::{CachedEmbeddingProvider, EmbeddingProvider, HttpEmbeddingProvider, DEFAULT_LAYER};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::http::HttpSettings;
use crate::labeler::{read_annotations, LabelConfig};
use crate::llm::{ExemplarPool, GenerationClient, HttpGenerationClient, PassagePlacement, DEFAULT_SHOTS};
use crate::qa::{Backends, QaConfig};
use crate::retrieval::{load_corpus, Bm25Index, DEFAULT_B, DEFAULT_K1, DEFAULT_TOP_K};
use crate::routers::{
    DecisionTemplates, EmbeddingRouter, FrequencyRouter, FrequencyThresholds, FullRetrieval, NoRetrieval, OracleRouter,
    PromptVariant, PromptingRouter, Router,
};
use crate::stub_world::{
    load_world_entries, make_stub_world, synthetic_entries, DecisionReplies, StubEmbeddingSettings, StubWorld,
    StubWorldSpec, SyntheticWorldConfig,
};

/// Environment variable naming the default configuration file.
pub const CONFIG_ENV: &str = "EIARAG_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub output_dir: PathBuf,
    pub generation: GenerationSection,
    pub embedding: EmbeddingSection,
    pub world: WorldSection,
    pub data: DataSection,
    pub index: IndexSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub label: LabelSection,
    pub routing: RoutingSection,
    pub service: ServiceSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            generation: GenerationSection::default(),
            embedding: EmbeddingSection::default(),
            world: WorldSection::default(),
            data: DataSection::default(),
            index: IndexSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            label: LabelSection::default(),
            routing: RoutingSection::default(),
            service: ServiceSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenerationKind {
    #[default]
    StubWorld,
    Http,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub kind: GenerationKind,
    pub http: HttpSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    #[default]
    StubWorld,
    Http,
    /// Precomputed sentence embeddings read from `cache`.
    Cache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub kind: EmbeddingKind,
    pub http: HttpSettings,
    /// Hidden size and deepest layer of the remote model.
    pub dim: usize,
    pub max_layer: u32,
    pub cache: Option<PathBuf>,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self {
            kind: EmbeddingKind::default(),
            http: HttpSettings::default(),
            dim: 4096,
            max_layer: 32,
            cache: None,
        }
    }
}

/// The deterministic stand-in world used when a backend kind is `stub-world`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    /// JSONL of world entries; a synthetic world is generated when absent.
    pub entries: Option<PathBuf>,
    pub synthetic: SyntheticWorldConfig,
    pub embedding: StubEmbeddingSettings,
    pub decisions: DecisionReplies,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Full query set; defaults to the stub world's questions.
    pub queries: Option<PathBuf>,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub split: SplitStrategy,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            queries: None,
            train_fraction: 0.75,
            split_seed: 0,
            split: SplitStrategy::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSection {
    /// Prebuilt index file; takes precedence over `corpus`.
    pub path: Option<PathBuf>,
    /// Corpus JSONL to index at startup.
    pub corpus: Option<PathBuf>,
    pub k1: f64,
    pub b: f64,
    pub top_k: usize,
}

impl Default for IndexSection {
    fn default() -> Self {
        Self {
            path: None,
            corpus: None,
            k1: DEFAULT_K1,
            b: DEFAULT_B,
            top_k: DEFAULT_TOP_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub path: Option<PathBuf>,
    pub hidden1: usize,
    pub hidden2: usize,
    pub threshold: f64,
    pub layer: u32,
    pub include_bos: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            path: None,
            hidden1: DEFAULT_HIDDEN.0,
            hidden2: DEFAULT_HIDDEN.1,
            threshold: DEFAULT_THRESHOLD,
            layer: DEFAULT_LAYER,
            include_bos: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelSection {
    pub workers: usize,
    pub strict: bool,
    pub shots: usize,
    pub exemplar_seed: u64,
    pub placement: PassagePlacement,
    pub ignore_punctuation: bool,
}

impl Default for LabelSection {
    fn default() -> Self {
        Self {
            workers: 4,
            strict: false,
            shots: DEFAULT_SHOTS,
            exemplar_seed: 0,
            placement: PassagePlacement::default(),
            ignore_punctuation: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    None,
    All,
    Oracle,
    Darag,
    ParagVanilla,
    ParagTaare,
    #[default]
    Ei,
}

impl Policy {
    pub const ALL: [Policy; 7] = [
        Policy::None,
        Policy::All,
        Policy::Oracle,
        Policy::Darag,
        Policy::ParagVanilla,
        Policy::ParagTaare,
        Policy::Ei,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::None => "none",
            Policy::All => "all",
            Policy::Oracle => "oracle",
            Policy::Darag => "darag",
            Policy::ParagVanilla => "parag-vanilla",
            Policy::ParagTaare => "parag-taare",
            Policy::Ei => "ei",
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<_> = Policy::ALL.iter().map(|p| p.name()).collect();
            Error::Config(format!("unknown policy {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingSection {
    pub policy: Policy,
    pub thresholds: Option<PathBuf>,
    /// Correctness annotations for the oracle.
    pub annotations: Option<PathBuf>,
    pub vanilla_template: Option<PathBuf>,
    pub taare_template: Option<PathBuf>,
    /// Freezes the clock: latencies read zero and prompts see this date.
    pub fixed_date: Option<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub bind: String,
}

impl Default for ServiceSection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
        }
    }
}

/// Well-known file names inside the output directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn train(&self) -> PathBuf {
        self.file("train.jsonl")
    }
    pub fn test(&self) -> PathBuf {
        self.file("test.jsonl")
    }
    pub fn split(&self) -> PathBuf {
        self.file("split.json")
    }
    pub fn corpus(&self) -> PathBuf {
        self.file("corpus.jsonl")
    }
    pub fn index(&self) -> PathBuf {
        self.file("index.bin")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.file("embeddings.bin")
    }
    pub fn labels(&self) -> PathBuf {
        self.file("labels.jsonl")
    }
    pub fn label_embeddings(&self) -> PathBuf {
        self.file("label_embeddings.bin")
    }
    pub fn annotations(&self) -> PathBuf {
        self.file("annotations.jsonl")
    }
    pub fn model(&self) -> PathBuf {
        self.file("model.bin")
    }
    pub fn training_log(&self) -> PathBuf {
        self.file("training_log.json")
    }
    pub fn thresholds(&self) -> PathBuf {
        self.file("thresholds.json")
    }
    pub fn report(&self, policy: Policy) -> PathBuf {
        self.file(&format!("report-{}.json", policy.name()))
    }
    pub fn summary(&self) -> PathBuf {
        self.file("summary.csv")
    }
    pub fn sweep(&self) -> PathBuf {
        self.file("sweep.csv")
    }
    pub fn viz(&self) -> PathBuf {
        self.file("viz.csv")
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Loads `explicit`, else the file named by `EIARAG_CONFIG`, else defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self> {
        match explicit {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(PathBuf::from(p)),
                _ => Ok(Self::default()),
            },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Overrides one dotted key, e.g. `model.threshold=0.7`. The value is
    /// read as a TOML literal, falling back to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .map(|v| match v {
                toml::Value::Datetime(d) => toml::Value::String(d.to_string()),
                other => other,
            })
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));

        let mut root = toml::Value::try_from(&*self).expect("config serializes");
        let parts: Vec<&str> = key.trim().split('.').collect();
        let mut node = &mut root;
        for part in &parts[..parts.len() - 1] {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{key}: {part} is not a section")))?;
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        node.as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: not a section")))?
            .insert(parts[parts.len() - 1].to_string(), value);
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override {key}: {e}")))?;
        Ok(())
    }

    pub fn artifacts(&self) -> Artifacts {
        Artifacts::new(&self.output_dir)
    }

    pub fn clock(&self) -> Arc<dyn Clock> {
        match self.routing.fixed_date {
            Some(date) => Arc::new(FixedClock::new(date)),
            None => Arc::new(SystemClock::default()),
        }
    }

    pub fn qa_config(&self, train: Option<&QuerySet>) -> QaConfig {
        let exemplars = match train {
            Some(t) if self.label.shots > 0 => ExemplarPool::from_train(t, self.label.shots, self.label.exemplar_seed),
            _ => ExemplarPool::empty(),
        };
        QaConfig {
            exemplars,
            top_k: self.index.top_k,
            placement: self.label.placement,
            ignore_punctuation: self.label.ignore_punctuation,
            ..QaConfig::default()
        }
    }

    pub fn label_config(&self, train: Option<&QuerySet>) -> LabelConfig {
        LabelConfig {
            qa: self.qa_config(train),
            layer: self.model.layer,
            include_bos: self.model.include_bos,
            workers: self.label.workers,
            strict: self.label.strict,
        }
    }

    pub fn eval_config(&self, train: Option<&QuerySet>) -> EvalConfig {
        EvalConfig {
            qa: self.qa_config(train),
            workers: self.label.workers,
            strict: self.label.strict,
        }
    }

    fn uses_world(&self) -> bool {
        self.generation.kind == GenerationKind::StubWorld || self.embedding.kind == EmbeddingKind::StubWorld
    }

    pub fn build_world(&self) -> Result<StubWorld> {
        let entries = match &self.world.entries {
            Some(p) => load_world_entries(p)?,
            None => synthetic_entries(&self.world.synthetic),
        };
        make_stub_world(&StubWorldSpec {
            entries,
            embedding: self.world.embedding.clone(),
            decisions: self.world.decisions,
        })
    }
}

/// Backends plus whatever query set the configuration designates.
pub struct Environment {
    pub backends: Backends,
    pub queries: Option<QuerySet>,
}

/// Instantiates generation, embedding and retrieval backends. A stub world
/// supplies default queries and corpus when no files are configured.
pub fn build_environment(cfg: &Config) -> Result<Environment> {
    let world = if cfg.uses_world() {
        Some(cfg.build_world()?)
    } else {
        None
    };

    let queries = match (&cfg.data.queries, &world) {
        (Some(p), _) => Some(load_query_set(p)?),
        (None, Some(w)) => Some(w.queries.clone()),
        (None, None) => None,
    };

    let client: Arc<dyn GenerationClient> = match (cfg.generation.kind, &world) {
        (GenerationKind::StubWorld, Some(w)) => w.client.clone(),
        (GenerationKind::Http, _) => Arc::new(HttpGenerationClient::new(&cfg.generation.http)?),
        (GenerationKind::StubWorld, None) => unreachable!("world is built for stub backends"),
    };

    let embedder: Arc<dyn EmbeddingProvider> = match (cfg.embedding.kind, &world) {
        (EmbeddingKind::StubWorld, Some(w)) => w.provider.clone(),
        (EmbeddingKind::Http, _) => Arc::new(HttpEmbeddingProvider::new(
            &cfg.embedding.http,
            cfg.embedding.dim,
            cfg.embedding.max_layer,
        )?),
        (EmbeddingKind::Cache, _) => {
            let path = cfg
                .embedding
                .cache
                .as_ref()
                .ok_or_else(|| Error::Config("embedding.kind = \"cache\" needs embedding.cache".into()))?;
            let qs = queries
                .as_ref()
                .ok_or_else(|| Error::Config("a cached embedding backend needs data.queries".into()))?;
            Arc::new(CachedEmbeddingProvider::from_file(
                path,
                qs.iter().map(|q| (q.id.as_str(), q.question.as_str())),
            )?)
        }
        (EmbeddingKind::StubWorld, None) => unreachable!("world is built for stub backends"),
    };

    let index = match (&cfg.index.path, &cfg.index.corpus, &world) {
        (Some(p), _, _) => Bm25Index::load(p)?,
        (None, Some(c), _) => Bm25Index::build(load_corpus(c)?, cfg.index.k1, cfg.index.b)?,
        (None, None, Some(w)) => Bm25Index::build(w.corpus.clone(), cfg.index.k1, cfg.index.b)?,
        (None, None, None) => {
            return Err(Error::Config(
                "no retrieval index: set index.path or index.corpus".into(),
            ));
        }
    };

    Ok(Environment {
        backends: Backends {
            client,
            embedder,
            index: Arc::new(index),
        },
        queries,
    })
}

fn decision_templates(cfg: &Config) -> Result<DecisionTemplates> {
    let mut t = DecisionTemplates::default();
    if let Some(p) = &cfg.routing.vanilla_template {
        t.vanilla = DecisionTemplates::read_template(p)?;
    }
    if let Some(p) = &cfg.routing.taare_template {
        t.taare = DecisionTemplates::read_template(p)?;
    }
    Ok(t)
}

pub fn model_path(cfg: &Config) -> PathBuf {
    cfg.model.path.clone().unwrap_or_else(|| cfg.artifacts().model())
}

pub fn load_model(cfg: &Config) -> Result<ClassifierModel> {
    let path = model_path(cfg);
    if !path.exists() {
        return Err(Error::Config(format!("model file {} does not exist", path.display())));
    }
    ClassifierModel::load(&path)
}

/// Builds the router for `policy`, loading whatever artifact it needs.
pub fn build_router(
    policy: Policy,
    cfg: &Config,
    backends: &Backends,
    clock: Arc<dyn Clock>,
) -> Result<Box<dyn Router>> {
    Ok(match policy {
        Policy::None => Box::new(NoRetrieval),
        Policy::All => Box::new(FullRetrieval),
        Policy::Oracle => {
            let path = cfg
                .routing
                .annotations
                .clone()
                .unwrap_or_else(|| cfg.artifacts().annotations());
            let ann: HashMap<_, _> = read_annotations(&path)?;
            Box::new(OracleRouter::new(ann))
        }
        Policy::Darag => {
            let path = cfg
                .routing
                .thresholds
                .clone()
                .unwrap_or_else(|| cfg.artifacts().thresholds());
            Box::new(FrequencyRouter::new(FrequencyThresholds::load(path)?))
        }
        Policy::ParagVanilla | Policy::ParagTaare => {
            let variant = if policy == Policy::ParagVanilla {
                PromptVariant::Vanilla
            } else {
                PromptVariant::Taare
            };
            Box::new(PromptingRouter::new(
                backends.client.clone(),
                variant,
                decision_templates(cfg)?,
                clock,
            ))
        }
        Policy::Ei => {
            let model = load_model(cfg)?;
            let layer = model.meta.layer;
            Box::new(
                EmbeddingRouter::new(Arc::new(model), backends.embedder.clone())?
                    .with_layer(layer)
                    .with_bos(cfg.model.include_bos)
                    .with_threshold(cfg.model.threshold)?,
            )
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = Config::default();
        assert_eq!(Config::parse(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(Config::parse("").unwrap(), cfg);
    }

    #[test]
    fn sections_parse() {
        let cfg = Config::parse(
            r#"
            output_dir = "runs/a"
            [generation]
            kind = "http"
            http = { url = "http://localhost:9000/generate", timeout_ms = 500 }
            [routing]
            policy = "parag-taare"
            fixed_date = "2024-05-01"
            [world.decisions]
            kind = "always_no"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.generation.kind, GenerationKind::Http);
        assert_eq!(cfg.generation.http.timeout_ms, 500);
        assert_eq!(cfg.routing.policy, Policy::ParagTaare);
        assert_eq!(cfg.world.decisions, DecisionReplies::AlwaysNo);
        assert!(Config::parse("bogus = 1").is_err());
    }

    #[test]
    fn dotted_overrides() {
        let mut cfg = Config::default();
        cfg.set("model.threshold=0.7").unwrap();
        cfg.set("routing.policy=darag").unwrap();
        cfg.set("output_dir=/tmp/x").unwrap();
        cfg.set("world.synthetic.n=50").unwrap();
        cfg.set("routing.fixed_date=2023-03-07").unwrap();
        assert_eq!(cfg.routing.fixed_date, NaiveDate::from_ymd_opt(2023, 3, 7));
        assert_eq!(cfg.model.threshold, 0.7);
        assert_eq!(cfg.routing.policy, Policy::Darag);
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.world.synthetic.n, 50);
        assert!(cfg.set("model.nonsense=1").is_err());
        assert!(cfg.set("model.threshold").is_err());
        assert!(cfg.set("model.threshold=\"high\"").is_err());
    }

    #[test]
    fn policy_names_round_trip() {
        for p in Policy::ALL {
            assert_eq!(p.name().parse::<Policy>().unwrap(), p);
        }
        assert!("sometimes".parse::<Policy>().is_err());
    }

    #[test]
    fn stub_environment_has_queries_and_index() {
        let mut cfg = Config::default();
        cfg.world.synthetic.n = 20;
        let env = build_environment(&cfg).unwrap();
        assert_eq!(env.queries.unwrap().len(), 20);
        assert_eq!(env.backends.index.len(), 20);
    }

    #[test]
    fn ei_without_model_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = Config {
            output_dir: dir.path().to_path_buf(),
            ..Config::default()
        };
        cfg.world.synthetic.n = 5;
        let env = build_environment(&cfg).unwrap();
        let err = build_router(Policy::Ei, &cfg, &env.backends, cfg.clock())
            .err()
            .unwrap();
        assert_eq!(err.kind(), "config");
    }
}
