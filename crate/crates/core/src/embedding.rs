//! Token embeddings from pluggable providers, average pooling into sentence
//! embeddings, and the `EIAR` binary embedding cache.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::http::{HttpSettings, JsonTransport};
use crate::wire::{EmbedRequest, EmbedResponse};

/// First contextualized layer.
pub const DEFAULT_LAYER: u32 = 1;

const CACHE_MAGIC: &[u8; 4] = b"EIAR";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingSequence {
    vectors: Vec<Vec<f32>>,
    layer: u32,
}

impl TokenEmbeddingSequence {
    pub fn new(vectors: Vec<Vec<f32>>, layer: u32) -> Result<Self> {
        let dim = vectors.first().map(Vec::len).unwrap_or(0);
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::Validation("token vectors have mixed dimensions".into()));
        }
        if !vectors.is_empty() && dim == 0 {
            return Err(Error::Validation("token vectors have dimension 0".into()));
        }
        Ok(Self { vectors, layer })
    }

    pub fn vectors(&self) -> &[Vec<f32>] {
        &self.vectors
    }

    pub fn layer(&self) -> u32 {
        self.layer
    }

    pub fn token_count(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map(Vec::len).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedding {
    pub query_id: String,
    pub layer: u32,
    pub values: Vec<f32>,
}

impl SentenceEmbedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Source of per-token hidden states. Implementations must be deterministic
/// for a fixed `(text, layer, include_bos)` and safe to call concurrently.
pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    /// Largest layer index this provider can return; layer 0 is the input
    /// embedding lookup.
    fn max_layer(&self) -> u32;

    fn token_embeddings(&self, text: &str, layer: u32, include_bos: bool) -> Result<TokenEmbeddingSequence>;
}

/// Coordinate-wise arithmetic mean over the token axis.
///
/// Each column is summed in ascending order in `f64`, so the result does not
/// depend on token order at all.
pub fn average_pool(seq: &TokenEmbeddingSequence, query_id: impl Into<String>) -> Result<SentenceEmbedding> {
    if seq.token_count() == 0 {
        return Err(Error::Validation("cannot pool an empty token sequence".into()));
    }
    let n = seq.token_count() as f64;
    let mut column = Vec::with_capacity(seq.token_count());
    let values = (0..seq.dim())
        .map(|j| {
            column.clear();
            column.extend(seq.vectors.iter().map(|v| v[j]));
            column.sort_by(f32::total_cmp);
            let sum: f64 = column.iter().map(|&x| x as f64).sum();
            (sum / n) as f32
        })
        .collect();
    Ok(SentenceEmbedding {
        query_id: query_id.into(),
        layer: seq.layer,
        values,
    })
}

pub fn sentence_embedding(
    provider: &dyn EmbeddingProvider,
    query_id: &str,
    question: &str,
    layer: u32,
    include_bos: bool,
) -> Result<SentenceEmbedding> {
    if layer > provider.max_layer() {
        return Err(Error::Validation(format!(
            "layer {layer} out of range; provider {} supports 0..={}",
            provider.name(),
            provider.max_layer()
        )));
    }
    let seq = provider.token_embeddings(question, layer, include_bos)?;
    if seq.dim() != provider.dim() {
        return Err(Error::Validation(format!(
            "provider {} returned dimension {}, declared {}",
            provider.name(),
            seq.dim(),
            provider.dim()
        )));
    }
    let pooled = average_pool(&seq, query_id)?;
    if pooled.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("non-finite embedding for query {query_id}")));
    }
    Ok(pooled)
}

pub fn write_embedding_cache(embeddings: &[SentenceEmbedding], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_cache(embeddings)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_embedding_cache(path: impl AsRef<Path>) -> Result<Vec<SentenceEmbedding>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cache(&bytes)
}

pub fn encode_cache(embeddings: &[SentenceEmbedding]) -> Result<Vec<u8>> {
    let (dim, layer) = embeddings.first().map(|e| (e.dim(), e.layer)).unwrap_or((0, 0));
    if let Some(odd) = embeddings.iter().find(|e| e.dim() != dim || e.layer != layer) {
        return Err(Error::Validation(format!(
            "embedding {} has dim {} layer {}, expected dim {dim} layer {layer}",
            odd.query_id,
            odd.dim(),
            odd.layer
        )));
    }
    let mut out = Vec::with_capacity(24 + embeddings.len() * (8 + dim * 4));
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&layer.to_le_bytes());
    out.extend_from_slice(&(embeddings.len() as u64).to_le_bytes());
    for e in embeddings {
        out.extend_from_slice(&(e.query_id.len() as u32).to_le_bytes());
        out.extend_from_slice(e.query_id.as_bytes());
        for v in &e.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_cache(bytes: &[u8]) -> Result<Vec<SentenceEmbedding>> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != CACHE_MAGIC {
        return Err(Error::Format("not an embedding cache (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CACHE_VERSION {
        return Err(Error::Format(format!("unsupported embedding cache version {version}")));
    }
    let dim = r.u32()? as usize;
    let layer = r.u32()?;
    let count = r.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let id_len = r.u32()? as usize;
        let query_id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|_| Error::Corrupt("query id is not UTF-8".into()))?
            .to_string();
        let values = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        out.push(SentenceEmbedding {
            query_id,
            layer,
            values,
        });
    }
    r.finish()?;
    Ok(out)
}

/// Little-endian cursor that reports truncation as corruption.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after last record",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// 64-bit FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
pub(crate) fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn normalize_question(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Deterministic stand-in for an LLM's hidden states.
///
/// Layer 0 returns a per-token vector that depends only on the token (a
/// static lookup table). Layers at or above one add a per-question context
/// term, and from `signal_min_layer` upward also the question's registered
/// signal vector, so pooled embeddings carry the signal at those layers only.
#[derive(Debug, Clone)]
pub struct StubEmbeddingProvider {
    dim: usize,
    max_layer: u32,
    seed: u64,
    context_noise: f32,
    signal_min_layer: u32,
    signals: HashMap<String, Vec<f32>>,
}

impl StubEmbeddingProvider {
    pub fn new(dim: usize, max_layer: u32, seed: u64) -> Self {
        Self {
            dim,
            max_layer,
            seed,
            context_noise: 0.5,
            signal_min_layer: 1,
            signals: HashMap::new(),
        }
    }

    pub fn with_context_noise(mut self, scale: f32) -> Self {
        self.context_noise = scale;
        self
    }

    pub fn with_signal_min_layer(mut self, layer: u32) -> Self {
        self.signal_min_layer = layer;
        self
    }

    /// Registers a signal vector for a question (matched after whitespace and
    /// case normalization). Must have length `dim`.
    pub fn add_signal(&mut self, question: &str, signal: Vec<f32>) {
        assert_eq!(signal.len(), self.dim, "signal length must equal provider dim");
        self.signals.insert(normalize_question(question), signal);
    }

    fn noise(&self, parts: &[&[u8]]) -> impl Iterator<Item = f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(parts) ^ self.seed);
        (0..self.dim).map(move |_| StandardNormal.sample(&mut rng))
    }
}

impl EmbeddingProvider for StubEmbeddingProvider {
    fn name(&self) -> &str {
        "stub"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn max_layer(&self) -> u32 {
        self.max_layer
    }

    fn token_embeddings(&self, text: &str, layer: u32, include_bos: bool) -> Result<TokenEmbeddingSequence> {
        if layer > self.max_layer {
            return Err(Error::Validation(format!(
                "layer {layer} exceeds stub max {}",
                self.max_layer
            )));
        }
        let key = normalize_question(text);
        let mut tokens: Vec<&str> = key.split(' ').filter(|t| !t.is_empty()).collect();
        if tokens.is_empty() {
            return Err(Error::Validation("text produced no tokens".into()));
        }
        if include_bos {
            tokens.insert(0, "<s>");
        }
        let layer_bytes = layer.to_le_bytes();
        let mut shared = vec![0.0f32; self.dim];
        if layer >= 1 {
            for (s, n) in shared
                .iter_mut()
                .zip(self.noise(&[b"ctx", &layer_bytes, key.as_bytes()]))
            {
                *s = n * self.context_noise;
            }
            if layer >= self.signal_min_layer {
                if let Some(signal) = self.signals.get(&key) {
                    for (s, v) in shared.iter_mut().zip(signal) {
                        *s += v;
                    }
                }
            }
        }
        let vectors = tokens
            .iter()
            .map(|tok| {
                self.noise(&[b"tok", &layer_bytes, tok.as_bytes()])
                    .zip(&shared)
                    .map(|(n, s)| n + s)
                    .collect()
            })
            .collect();
        TokenEmbeddingSequence::new(vectors, layer)
    }
}

/// Serves precomputed sentence embeddings from a cache file. Each question
/// resolves to its query id through the supplied mapping and is returned as a
/// one-token sequence, so pooling is the identity.
pub struct CachedEmbeddingProvider {
    dim: usize,
    layer: u32,
    by_question: HashMap<String, Vec<f32>>,
}

impl CachedEmbeddingProvider {
    pub fn new<'a>(
        embeddings: Vec<SentenceEmbedding>,
        questions: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        let (dim, layer) = embeddings.first().map(|e| (e.dim(), e.layer)).unwrap_or((0, 0));
        let mut by_id: HashMap<String, Vec<f32>> = embeddings.into_iter().map(|e| (e.query_id, e.values)).collect();
        let mut by_question = HashMap::new();
        for (id, question) in questions {
            if let Some(v) = by_id.remove(id) {
                by_question.insert(normalize_question(question), v);
            }
        }
        Ok(Self {
            dim,
            layer,
            by_question,
        })
    }

    pub fn from_file<'a>(
        path: impl AsRef<Path>,
        questions: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        Self::new(read_embedding_cache(path)?, questions)
    }
}

impl EmbeddingProvider for CachedEmbeddingProvider {
    fn name(&self) -> &str {
        "cache"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn max_layer(&self) -> u32 {
        self.layer
    }

    fn token_embeddings(&self, text: &str, layer: u32, _include_bos: bool) -> Result<TokenEmbeddingSequence> {
        if layer != self.layer {
            return Err(Error::Validation(format!(
                "cache holds layer {}, requested {layer}",
                self.layer
            )));
        }
        let v = self
            .by_question
            .get(&normalize_question(text))
            .ok_or_else(|| Error::Validation(format!("question not in embedding cache: {text:?}")))?;
        TokenEmbeddingSequence::new(vec![v.clone()], layer)
    }
}

/// Calls a remote `POST /embed` endpoint.
pub struct HttpEmbeddingProvider {
    transport: JsonTransport,
    dim: usize,
    max_layer: u32,
}

impl HttpEmbeddingProvider {
    pub fn new(settings: &HttpSettings, dim: usize, max_layer: u32) -> Result<Self> {
        Ok(Self {
            transport: JsonTransport::new(settings)?,
            dim,
            max_layer,
        })
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn name(&self) -> &str {
        "http"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn max_layer(&self) -> u32 {
        self.max_layer
    }

    fn token_embeddings(&self, text: &str, layer: u32, include_bos: bool) -> Result<TokenEmbeddingSequence> {
        let req = EmbedRequest {
            text: text.to_string(),
            layer,
            include_bos,
        };
        let resp: EmbedResponse = self.transport.post("/embed", &req)?;
        if resp.layer != layer || resp.dim != self.dim {
            return Err(Error::Validation(format!(
                "embed endpoint answered dim {} layer {}, expected dim {} layer {layer}",
                resp.dim, resp.layer, self.dim
            )));
        }
        TokenEmbeddingSequence::new(resp.vectors, layer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn seq(vectors: Vec<Vec<f32>>) -> TokenEmbeddingSequence {
        TokenEmbeddingSequence::new(vectors, 1).unwrap()
    }

    #[test]
    fn pool_single_vector_is_identity() {
        let e = average_pool(&seq(vec![vec![3.0, -1.0]]), "q").unwrap();
        assert_eq!(e.values, vec![3.0, -1.0]);
        assert_eq!(e.layer, 1);
    }

    #[test]
    fn pool_symmetric_pair() {
        let e = average_pool(&seq(vec![vec![1.0, 0.0], vec![0.0, 1.0]]), "q").unwrap();
        assert_eq!(e.values, vec![0.5, 0.5]);
    }

    #[test]
    fn pool_matches_column_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vectors: Vec<Vec<f32>> = (0..3)
            .map(|_| (0..4).map(|_| rng.random_range(-5.0f32..5.0)).collect())
            .collect();
        let mut expected = [0.0f64; 4];
        for v in &vectors {
            for (e, x) in expected.iter_mut().zip(v) {
                *e += *x as f64;
            }
        }
        let got = average_pool(&seq(vectors), "q").unwrap();
        for (g, e) in got.values.iter().zip(&expected) {
            assert!((*g as f64 - e / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn pool_rejects_empty() {
        let empty = TokenEmbeddingSequence::new(vec![], 0).unwrap();
        assert!(average_pool(&empty, "q").is_err());
    }

    #[test]
    fn mixed_dimensions_rejected() {
        assert!(TokenEmbeddingSequence::new(vec![vec![1.0], vec![1.0, 2.0]], 0).is_err());
    }

    struct FixedProvider;

    impl EmbeddingProvider for FixedProvider {
        fn name(&self) -> &str {
            "fixed"
        }
        fn dim(&self) -> usize {
            2
        }
        fn max_layer(&self) -> u32 {
            2
        }
        fn token_embeddings(&self, _text: &str, layer: u32, include_bos: bool) -> Result<TokenEmbeddingSequence> {
            let mut v = vec![vec![1.0, 2.0], vec![3.0, 6.0]];
            if include_bos {
                v.insert(0, vec![100.0, 100.0]);
            }
            TokenEmbeddingSequence::new(v, layer)
        }
    }

    #[test]
    fn sentence_embedding_pools_provider_output() {
        let e = sentence_embedding(&FixedProvider, "q1", "anything", 1, false).unwrap();
        assert_eq!(e.values, vec![2.0, 4.0]);
        assert_eq!(e.query_id, "q1");
        let with_bos = sentence_embedding(&FixedProvider, "q1", "anything", 1, true).unwrap();
        assert_eq!(with_bos.values, vec![104.0 / 3.0, 108.0 / 3.0]);
    }

    #[test]
    fn sentence_embedding_checks_layer() {
        assert!(matches!(
            sentence_embedding(&FixedProvider, "q", "x", 3, false),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn stub_is_deterministic_and_layered() {
        let mut p = StubEmbeddingProvider::new(8, 4, 11);
        p.add_signal("Who is X?", vec![5.0; 8]);
        let a = sentence_embedding(&p, "q", "Who is X?", 1, false).unwrap();
        let b = sentence_embedding(&p, "q", "who  is x?", 1, false).unwrap();
        assert_eq!(a, b);

        // Layer 0 only looks tokens up; the same token gives the same vector
        // regardless of context.
        let s1 = p.token_embeddings("alpha beta", 0, false).unwrap();
        let s2 = p.token_embeddings("gamma beta", 0, false).unwrap();
        assert_eq!(s1.vectors()[1], s2.vectors()[1]);
        let c1 = p.token_embeddings("alpha beta", 1, false).unwrap();
        let c2 = p.token_embeddings("gamma beta", 1, false).unwrap();
        assert_ne!(c1.vectors()[1], c2.vectors()[1]);

        let plain = StubEmbeddingProvider::new(8, 4, 11);
        let l0 = sentence_embedding(&p, "q", "Who is X?", 0, false).unwrap();
        let l0_plain = sentence_embedding(&plain, "q", "Who is X?", 0, false).unwrap();
        assert_eq!(l0, l0_plain, "signal must not leak into layer 0");
        let l1_plain = sentence_embedding(&plain, "q", "Who is X?", 1, false).unwrap();
        for (s, n) in a.values.iter().zip(&l1_plain.values) {
            assert!((s - n - 5.0).abs() < 1e-5);
        }
    }

    #[test]
    fn cache_round_trip_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let embs = vec![
            SentenceEmbedding {
                query_id: "a".into(),
                layer: 1,
                values: vec![1.5, -0.0, f32::MIN_POSITIVE],
            },
            SentenceEmbedding {
                query_id: "bé".into(),
                layer: 1,
                values: vec![3.25, 1e-30, -7.0],
            },
        ];
        write_embedding_cache(&embs, &path).unwrap();
        let back = read_embedding_cache(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (x, y) in embs.iter().zip(&back) {
            assert_eq!(x.query_id, y.query_id);
            let xb: Vec<u32> = x.values.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }

        write_embedding_cache(&[], &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 0);
        assert!(read_embedding_cache(&path).unwrap().is_empty());
    }

    #[test]
    fn cache_rejects_bad_input() {
        let embs = vec![SentenceEmbedding {
            query_id: "a".into(),
            layer: 1,
            values: vec![1.0, 2.0],
        }];
        let mut bytes = encode_cache(&embs).unwrap();
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_cache(truncated), Err(Error::Corrupt(_))));
        bytes[0] = b'X';
        assert!(matches!(decode_cache(&bytes), Err(Error::Format(_))));

        let mut wrong_version = encode_cache(&embs).unwrap();
        wrong_version[4] = 9;
        assert!(matches!(decode_cache(&wrong_version), Err(Error::Format(_))));

        let mixed = vec![
            embs[0].clone(),
            SentenceEmbedding {
                query_id: "b".into(),
                layer: 2,
                values: vec![1.0, 2.0],
            },
        ];
        assert!(encode_cache(&mixed).is_err());
    }

    #[test]
    fn cached_provider_serves_by_question() {
        let embs = vec![SentenceEmbedding {
            query_id: "a".into(),
            layer: 1,
            values: vec![1.0, 2.0],
        }];
        let p = CachedEmbeddingProvider::new(embs, [("a", "Who is A?")]).unwrap();
        let e = sentence_embedding(&p, "a", "who is a?", 1, false).unwrap();
        assert_eq!(e.values, vec![1.0, 2.0]);
        assert!(sentence_embedding(&p, "b", "Who is B?", 1, false).is_err());
        assert!(p.token_embeddings("Who is A?", 0, false).is_err());
    }

    #[test]
    fn http_provider_reports_attempts_on_unreachable_endpoint() {
        let settings = HttpSettings {
            url: "http://127.0.0.1:9".into(),
            timeout_ms: 500,
            retries: 2,
            max_in_flight: 1,
        };
        let p = HttpEmbeddingProvider::new(&settings, 4, 1).unwrap();
        match p.token_embeddings("x", 1, false) {
            Err(Error::Transport { attempts, .. }) | Err(Error::Timeout { attempts }) => assert_eq!(attempts, 3),
            other => panic!("expected transport error, got {other:?}"),
        }
    }

    fn arb_seq() -> impl Strategy<Value = Vec<Vec<f32>>> {
        (1usize..6, 1usize..8)
            .prop_flat_map(|(d, t)| proptest::collection::vec(proptest::collection::vec(-1e3f32..1e3, d), t))
    }

    proptest! {
        #[test]
        fn pooling_is_permutation_invariant(vectors in arb_seq(), rot in 0usize..8) {
            let mut shuffled = vectors.clone();
            shuffled.reverse();
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            let a = average_pool(&seq(vectors), "q").unwrap();
            let b = average_pool(&seq(shuffled), "q").unwrap();
            prop_assert_eq!(a.values, b.values);
        }

        #[test]
        fn pooling_is_linear(vectors in arb_seq(), c in -10f32..10.0) {
            let scaled: Vec<Vec<f32>> = vectors.iter().map(|v| v.iter().map(|x| x * c).collect()).collect();
            let scale = vectors.iter().flatten().fold(0.0f64, |m, x| m.max((x * c).abs() as f64));
            let a = average_pool(&seq(vectors), "q").unwrap();
            let b = average_pool(&seq(scaled), "q").unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                let want = *x as f64 * c as f64;
                let tol = 1e-6 * scale + 1e-30;
                prop_assert!(((*y as f64) - want).abs() <= tol, "{} vs {}", y, want);
            }
        }

        #[test]
        fn cache_round_trip_is_bitwise(values in proptest::collection::vec(proptest::collection::vec(any::<f32>(), 3), 0..5)) {
            let embs: Vec<_> = values.into_iter().enumerate()
                .map(|(i, v)| SentenceEmbedding { query_id: format!("q{i}"), layer: 2, values: v })
                .collect();
            let back = decode_cache(&encode_cache(&embs).unwrap()).unwrap();
            prop_assert_eq!(back.len(), embs.len());
            for (x, y) in embs.iter().zip(&back) {
                let xb: Vec<u32> = x.values.iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u32> = y.values.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(xb, yb);
            }
        }
    }
}
