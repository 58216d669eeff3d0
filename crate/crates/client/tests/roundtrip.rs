use std::sync::Arc;

use eiarag_client::{ClientError, ServiceClient};
use eiarag_core::clock::FixedClock;
use eiarag_core::qa::{Backends, QaConfig};
use eiarag_core::retrieval::Bm25Index;
use eiarag_core::routers::FullRetrieval;
use eiarag_core::stub_world::{make_stub_world, synthetic_entries, StubWorld, StubWorldSpec, SyntheticWorldConfig};
use eiarag_service::{serve_on, ServiceState};

async fn start() -> (ServiceClient, StubWorld) {
    let entries = synthetic_entries(&SyntheticWorldConfig {
        n: 10,
        seed: 5,
        ..Default::default()
    });
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
    let state = ServiceState::new(
        Box::new(FullRetrieval),
        backends,
        QaConfig::default(),
        Arc::new(FixedClock::default()),
    )
    .with_queries(&w.queries);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("http://{}/", listener.local_addr().unwrap());
    tokio::spawn(serve_on(listener, Arc::new(state)));
    (ServiceClient::new(&url).unwrap(), w)
}

#[tokio::test]
async fn typed_round_trip() {
    let (client, w) = start().await;
    assert!(!client.base_url().ends_with('/'));
    let health = client.health().await.unwrap();
    assert_eq!(health.policy, "all");

    let q = &w.queries.records()[0];
    let routed = client.route(&q.question).await.unwrap();
    assert!(routed.retrieve);
    assert_eq!(routed.score, None);
    assert_eq!(routed.decision_ms, 0.0);

    let answered = client.answer(&q.question).await.unwrap();
    assert!(answered.retrieved);
    assert!(!answered.passages.is_empty());
}

#[tokio::test]
async fn service_errors_surface_kind() {
    let (client, _) = start().await;
    let err = client.route("").await.unwrap_err();
    match &err {
        ClientError::Api { status, kind, .. } => {
            assert_eq!(*status, 400);
            assert_eq!(kind, "request");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(err.kind(), "request");
}

#[tokio::test]
async fn unreachable_service_is_a_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let err = ServiceClient::new(&url).unwrap().health().await.unwrap_err();
    assert_eq!(err.kind(), "transport");
}
