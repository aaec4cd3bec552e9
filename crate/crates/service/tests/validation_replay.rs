mod common;

use std::path::PathBuf;

use axum::http::StatusCode;
use common::*;
use retgrade_core::io;
use retgrade_core::synth;
use retgrade_service::Submission;

#[tokio::test(flavor = "multi_thread")]
async fn replayed_validation_grades_give_specialist_kappa() {
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/validation");
    let tables = io::load_tables(&fixtures.join("tables.jsonl")).unwrap();
    let design = synth::load_study(&fixtures.join("study.json")).unwrap();
    let replay = synth::validation_replay(&tables, &design).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let h = Harness::open(dir.path(), &replay.specialists, 500);
    let images: Vec<String> = replay.manifest.images.keys().cloned().collect();
    assert_eq!(h.create("validation", &images).await.status, StatusCode::OK);

    let mut events: Vec<_> = replay.events.iter().filter(|e| replay.specialists.contains(&e.grader)).collect();
    events.sort_by_key(|e| e.timestamp);
    for e in events {
        let r = h.submit("validation", &e.grader.id, &Submission::from_event(e)).await;
        assert_eq!(r.status, StatusCode::OK, "{}", r.body);
    }
    let r = h.get("/v1/datasets/validation/reports/kappa", &token(&replay.specialists[0].id)).await;
    assert_eq!(r.body["status"], "ready", "{}", r.body);
    assert_eq!(r.body["kappa_display"], "0.91");
    let kappa = r.body["kappa"].as_f64().unwrap();
    assert!((kappa - 0.91).abs() <= 0.005, "{kappa}");
    assert_eq!(r.body["images"], 1813);
}
