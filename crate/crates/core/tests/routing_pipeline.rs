use std::sync::Arc;

use eiarag_core::classifier::init_model;
use eiarag_core::clock::FixedClock;
use eiarag_core::eval::{evaluate, EvalConfig};
use eiarag_core::qa::Backends;
use eiarag_core::retrieval::Bm25Index;
use eiarag_core::routers::{route, EmbeddingRouter, FullRetrieval, NoRetrieval};
use eiarag_core::stub_world::{make_stub_world, synthetic_entries, StubWorld, StubWorldSpec, SyntheticWorldConfig};

fn world(n: usize) -> (StubWorld, Backends) {
    let w = make_stub_world(&StubWorldSpec {
        entries: synthetic_entries(&SyntheticWorldConfig {
            n,
            seed: 21,
            ..Default::default()
        }),
        ..Default::default()
    })
    .unwrap();
    let backends = Backends {
        client: w.client.clone(),
        embedder: w.provider.clone(),
        index: Arc::new(Bm25Index::with_defaults(w.corpus.clone()).unwrap()),
    };
    (w, backends)
}

#[test]
fn constant_policies_on_twenty_queries() {
    let (w, backends) = world(20);
    let cfg = EvalConfig::default();
    let all = evaluate(&FullRetrieval, &w.queries, &backends, &cfg, &FixedClock::default()).unwrap();
    let none = evaluate(&NoRetrieval, &w.queries, &backends, &cfg, &FixedClock::default()).unwrap();
    assert_eq!(all.n, 20);
    assert_eq!(all.por_percent, 100.0);
    assert_eq!(none.por_percent, 0.0);
}

#[test]
fn embedding_decisions_never_call_the_generator() {
    let (w, backends) = world(100);
    let mut model = init_model(16, 8, 4, 2).unwrap();
    model.meta.layer = 1;
    let router = EmbeddingRouter::new(Arc::new(model), backends.embedder.clone()).unwrap();
    let before = backends.client.calls();
    for q in w.queries.iter() {
        let d = route(&router, q, &FixedClock::default()).unwrap();
        assert_eq!(d.generation_calls_used, 0);
        assert!(d.score.is_some());
    }
    assert_eq!(backends.client.calls(), before);
}
