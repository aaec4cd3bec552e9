mod common;

use axum::http::{header, Method, StatusCode};
use common::*;
use retgrade_core::model::{GraderIdentity, GraderRole};
use retgrade_service::store::{self, replay_log};
use serde_json::{json, Value};

fn panel() -> Vec<GraderIdentity> {
    ["rs-a", "rs-b", "rs-c"]
        .into_iter()
        .map(|id| GraderIdentity::new(id, GraderRole::RetinaSpecialist))
        .collect()
}

fn images(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("img-{i:02}")).collect()
}

fn item_ids(r: &Resp) -> Vec<String> {
    r.body["items"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["image_id"].as_str().unwrap().to_string())
        .collect()
}

#[tokio::test]
async fn health_and_auth() {
    let dir = tempfile::tempdir().unwrap();
    let h = Harness::open(dir.path(), &panel(), 100);
    let r = h.request(Method::GET, "/v1/healthz", None, None, None).await;
    assert_eq!((r.status, r.body.clone()), (StatusCode::OK, json!({ "status": "ok" })));

    let meta = json!({ "dataset_id": "d", "images": [{ "image_id": "x" }], "graders": panel() }).to_string();
    let r = h.request(Method::POST, "/v1/datasets", None, Some(meta.clone()), None).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
    let r = h.request(Method::POST, "/v1/datasets", Some(&token("rs-a")), Some(meta.clone()), None).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
    assert_eq!(h.create("d", &images(2)).await.status, StatusCode::OK);
    assert_eq!(h.create("d", &images(2)).await.status, StatusCode::CONFLICT);

    let r = h.request(Method::POST, "/v1/datasets/d/grades", Some(EXPIRED), Some(serde_json::to_string(&grade("img-01", 0, 0, false)).unwrap()), None).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
    let r = h.request(Method::POST, "/v1/datasets/d/grades", Some("nonsense"), Some("{}".into()), None).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
    // admin without a grader binding cannot grade
    let r = h.request(Method::POST, "/v1/datasets/d/grades", Some(ADMIN), Some(serde_json::to_string(&grade("img-01", 0, 0, false)).unwrap()), None).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
    // graders only see their own queue
    assert_eq!(h.get("/v1/datasets/d/assignments?grader=rs-b", &token("rs-a")).await.status, StatusCode::UNAUTHORIZED);
    assert_eq!(h.get("/v1/datasets/d/assignments?grader=rs-b", ADMIN).await.status, StatusCode::OK);
    assert_eq!(h.get("/v1/datasets/missing/assignments", &token("rs-a")).await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn bad_requests_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let h = Harness::open(dir.path(), &panel(), 100);
    h.create("d", &images(2)).await;
    let tok = token("rs-a");
    let post = |body: &str| h.request(Method::POST, "/v1/datasets/d/grades", Some(&tok), Some(body.to_string()), None);

    assert_eq!(post("{not json").await.status, StatusCode::BAD_REQUEST);
    // gradable without a DR grade
    let r = post(r#"{"image_id":"img-01","round":0,"gradability":"fully_gradable"}"#).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    let r = post(r#"{"image_id":"img-01","round":0,"gradability":"fully_gradable","dr":7,"dme":"referable"}"#).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    let r = post(r#"{"image_id":"nope","round":0,"gradability":"not_fully_gradable"}"#).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    // adjudication round before round 0 is complete
    let r = h.submit("d", "rs-a", &grade("img-01", 1, 2, false)).await;
    assert_eq!((r.status, r.body["error"].as_str()), (StatusCode::CONFLICT, Some("round_not_open")));

    assert_eq!(h.submit("d", "rs-a", &grade("img-01", 0, 2, false)).await.status, StatusCode::OK);
    let r = h.submit("d", "rs-a", &grade("img-01", 0, 2, false)).await;
    assert_eq!((r.status, r.body["error"].as_str()), (StatusCode::CONFLICT, Some("duplicate_submission")));

    let bad = json!({ "dataset_id": "../escape", "images": [{ "image_id": "x" }], "graders": panel() }).to_string();
    let r = h.request(Method::POST, "/v1/datasets", Some(ADMIN), Some(bad), None).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn grading_workflow_through_the_api() {
    let dir = tempfile::tempdir().unwrap();
    let h = Harness::open(dir.path(), &panel(), 100);
    h.create("d", &images(3)).await;

    // fresh grader: every image as a round-0 item without peer grades
    let r = h.get("/v1/datasets/d/assignments", &token("rs-a")).await;
    assert_eq!(item_ids(&r), images(3));
    for item in r.body["items"].as_array().unwrap() {
        assert_eq!(item["round"], 0);
        assert!(item["peer_grades"].is_null());
        assert_eq!(item["image_uri"], format!("file:///images/{}.jpg", item["image_id"].as_str().unwrap()));
    }
    assert_eq!(item_ids(&h.get("/v1/datasets/d/assignments?limit=2", &token("rs-a")).await).len(), 2);

    // img-01 unanimous, img-02 disagrees, img-03 unanimous
    for g in ["rs-a", "rs-b"] {
        assert_eq!(h.submit("d", g, &grade("img-01", 0, 1, false)).await.body["phase"], "collecting_independent");
    }
    let r = h.submit("d", "rs-c", &grade("img-01", 0, 1, false)).await;
    assert_eq!(r.body["phase"], "unanimous");
    assert_eq!(r.body["event"]["grader"]["id"], "rs-c");

    h.submit("d", "rs-a", &grade("img-02", 0, 2, false)).await;
    h.submit("d", "rs-b", &grade("img-02", 0, 2, false)).await;
    let r = h.submit("d", "rs-c", &grade("img-02", 0, 3, false)).await;
    assert_eq!((r.body["phase"].as_str(), r.body["current_round"].as_u64()), (Some("needs_adjudication"), Some(1)));

    for g in ["rs-a", "rs-b", "rs-c"] {
        h.submit("d", g, &grade("img-03", 0, 0, false)).await;
    }

    // grader finished round 0 with one disagreement: exactly that item, peers visible
    let r = h.get("/v1/datasets/d/assignments", &token("rs-a")).await;
    assert_eq!(item_ids(&r), vec!["img-02"]);
    let item = &r.body["items"][0];
    assert_eq!(item["round"], 1);
    let peers = item["peer_grades"].as_array().unwrap();
    assert_eq!(peers.len(), 3);
    assert!(peers.iter().any(|p| p["grader"]["id"] == "rs-c" && p["dr"] == 3));

    let r = h.get("/v1/datasets/d/disagreements", &token("rs-b")).await;
    assert_eq!(item_ids(&r), vec!["img-02"]);
    assert_eq!(r.body["items"][0]["awaiting"], json!(["rs-a", "rs-b", "rs-c"]));

    // round 1 without agreement opens round 2; a late round-1 grade is stale
    h.submit("d", "rs-a", &grade("img-02", 1, 2, false)).await;
    h.submit("d", "rs-b", &grade("img-02", 1, 3, false)).await;
    let r = h.submit("d", "rs-c", &grade("img-02", 1, 3, false)).await;
    assert_eq!((r.body["phase"].as_str(), r.body["current_round"].as_u64()), (Some("in_adjudication"), Some(2)));
    let r = h.submit("d", "rs-a", &grade("img-02", 1, 3, false)).await;
    assert_eq!((r.status, r.body["error"].as_str(), r.body["current_round"].as_u64()), (StatusCode::CONFLICT, Some("stale_round"), Some(2)));

    // endorsements carry forward: rs-a alone moving to 3 reaches consensus
    let r = h.submit("d", "rs-a", &grade("img-02", 2, 3, false)).await;
    assert_eq!(r.body["phase"], "consensus");
    assert_eq!(r.body["consensus"]["dr"], 3);
    let r = h.submit("d", "rs-b", &grade("img-02", 2, 3, false)).await;
    assert_eq!((r.status, r.body["error"].as_str()), (StatusCode::CONFLICT, Some("event_after_consensus")));

    assert!(item_ids(&h.get("/v1/datasets/d/assignments", &token("rs-b")).await).is_empty());
    let r = h.get("/v1/datasets/d/reference?method=adjudicated", &token("rs-a")).await;
    assert_eq!(r.body["status"], "ready");
    assert_eq!(r.body["reference"]["entries"]["img-02"]["dr"], 3);
    let r = h.get("/v1/datasets/d/reference?method=majority", &token("rs-a")).await;
    assert_eq!(r.body["reference"]["entries"]["img-02"]["dr"], 2);
    assert_eq!(h.get("/v1/datasets/d/reference?method=vote", &token("rs-a")).await.status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn reports_are_gated_and_version_tagged() {
    let dir = tempfile::tempdir().unwrap();
    let h = Harness::open(dir.path(), &panel(), 100);
    h.create("d", &images(4)).await;
    for g in ["rs-a", "rs-b", "rs-c"] {
        h.submit("d", g, &grade("img-01", 0, 0, false)).await;
    }
    let r = h.get("/v1/datasets/d/reports/kappa", &token("rs-a")).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.body["status"], "not_ready");
    assert_eq!(r.body["pending_images"], 3);
    assert_eq!(r.body["phases"]["collecting_independent"], 3);

    let tag = r.headers[header::ETAG].to_str().unwrap().to_string();
    assert_eq!(tag, "\"v3\"");
    let again = h.request(Method::GET, "/v1/datasets/d/reports/kappa", Some(&token("rs-a")), None, Some(&tag)).await;
    assert_eq!(again.status, StatusCode::NOT_MODIFIED);

    let truth = [(2, 0), (3, 2), (4, 4)];
    for (i, dr) in truth {
        for g in ["rs-a", "rs-b", "rs-c"] {
            h.submit("d", g, &grade(&format!("img-{i:02}"), 0, dr, dr >= 2)).await;
        }
    }
    // stale tag revalidates with a fresh one
    let r = h.request(Method::GET, "/v1/datasets/d/reports/kappa", Some(&token("rs-a")), None, Some(&tag)).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.headers[header::ETAG], "\"v12\"");
    assert_eq!(r.body["status"], "ready");
    assert_eq!(r.body["kappa"], 1.0);
    assert_eq!(r.body["kappa_display"], "1.00");

    let r = h.get("/v1/datasets/d/reports/agreement", &token("rs-a")).await;
    assert_eq!(r.body["summary"]["graders"].as_array().unwrap().len(), 3);
    let r = h.get("/v1/datasets/d/reports/comparison?cutoff=moderate", &token("rs-a")).await;
    assert!(r.body["bundle"]["tables"].as_array().unwrap().iter().any(|t| t["id"] == "majority_vs_adjudicated_metrics"));
    let r = h.get("/v1/datasets/d/reports/progress", &token("rs-a")).await;
    assert_eq!(r.body["phases"]["unanimous"], 4);
    assert_eq!(h.get("/v1/datasets/d/reports/roc", &token("rs-a")).await.status, StatusCode::NOT_FOUND);
}

/// Labels of `image` by graders other than `me` must not appear anywhere in
/// `body` while `me` still owes an independent grade for it.
fn leaks(body: &Value, image: &str, me: &str) -> bool {
    fn walk(v: &Value, image: &str, me: &str, inside: bool) -> bool {
        match v {
            Value::Object(m) => {
                let here = inside || m.get("image_id").and_then(Value::as_str) == Some(image) || m.contains_key(image);
                if here {
                    if let Some(g) = m.get("grader") {
                        let id = g.get("id").and_then(Value::as_str).or(g.as_str());
                        if id.is_some_and(|id| id != me) {
                            return true;
                        }
                    }
                    if m.contains_key("dr") || m.contains_key("contributing_graders") {
                        return true;
                    }
                }
                m.iter().any(|(k, x)| walk(x, image, me, here || k == image))
            }
            Value::Array(a) => a.iter().any(|x| walk(x, image, me, inside)),
            _ => false,
        }
    }
    walk(body, image, me, false)
}

#[tokio::test]
async fn round_zero_grades_never_reach_a_grader_who_still_owes_one() {
    let dir = tempfile::tempdir().unwrap();
    let h = Harness::open(dir.path(), &panel(), 100);
    h.create("d", &images(2)).await;
    // rs-b and rs-c disagree on img-01; rs-a has not graded it yet
    h.submit("d", "rs-b", &grade("img-01", 0, 1, false)).await;
    h.submit("d", "rs-c", &grade("img-01", 0, 4, true)).await;
    for g in ["rs-a", "rs-b", "rs-c"] {
        h.submit("d", g, &grade("img-02", 0, 0, false)).await;
    }
    let probes = [
        "/v1/datasets/d/assignments",
        "/v1/datasets/d/disagreements",
        "/v1/datasets/d/reference?method=majority",
        "/v1/datasets/d/reference?method=adjudicated",
        "/v1/datasets/d/reports/kappa",
        "/v1/datasets/d/reports/agreement",
        "/v1/datasets/d/reports/comparison",
        "/v1/datasets/d/reports/progress",
    ];
    for uri in probes {
        let r = h.get(uri, &token("rs-a")).await;
        assert_eq!(r.status, StatusCode::OK, "{uri}");
        assert!(!leaks(&r.body, "img-01", "rs-a"), "{uri} leaked: {}", r.body);
    }
    let text = h.get("/v1/datasets/d/assignments", &token("rs-a")).await.body.to_string();
    assert!(!text.contains("rs-b") && !text.contains("rs-c"), "{text}");

    // the probe itself is able to spot a leak once grades are visible
    h.submit("d", "rs-a", &grade("img-01", 0, 1, false)).await;
    let r = h.get("/v1/datasets/d/disagreements", &token("rs-a")).await;
    assert!(leaks(&r.body, "img-01", "rs-a"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn racing_submissions_are_both_durable_and_serialized() {
    let dir = tempfile::tempdir().unwrap();
    let h = Harness::open(dir.path(), &panel(), 100);
    h.create("d", &images(1)).await;
    h.submit("d", "rs-a", &grade("img-01", 0, 2, false)).await;
    let (gb, gc) = (grade("img-01", 0, 2, false), grade("img-01", 0, 3, false));
    let (x, y) = tokio::join!(h.submit("d", "rs-b", &gb), h.submit("d", "rs-c", &gc));
    assert_eq!((x.status, y.status), (StatusCode::OK, StatusCode::OK));
    let versions = {
        let mut v = [x.body["version"].as_u64().unwrap(), y.body["version"].as_u64().unwrap()];
        v.sort();
        v
    };
    assert_eq!(versions, [2, 3]);
    // whichever landed last saw the complete round
    let last = if x.body["version"] == 3 { &x } else { &y };
    assert_eq!(last.body["phase"], "needs_adjudication");

    // two graders endorsing the same round concurrently: order is irrelevant
    let endorse = grade("img-01", 1, 3, false);
    let (x, y) = tokio::join!(h.submit("d", "rs-a", &endorse), h.submit("d", "rs-b", &endorse));
    assert_eq!((x.status, y.status), (StatusCode::OK, StatusCode::OK));
    let r = h.submit("d", "rs-c", &grade("img-01", 1, 3, false)).await;
    assert_eq!(r.body["phase"], "consensus");

    let ds = h.service.dataset("d").unwrap();
    let live = ds.view();
    assert_eq!(*live, replay_log(ds.dir()).unwrap());
}

#[tokio::test]
async fn restart_recovers_identical_state() {
    let dir = tempfile::tempdir().unwrap();
    let h = Harness::open(dir.path(), &panel(), 4);
    h.create("d", &images(3)).await;
    for (i, g, dr) in [(1, "rs-a", 0), (1, "rs-b", 1), (1, "rs-c", 0), (2, "rs-a", 2), (2, "rs-b", 2), (3, "rs-a", 4)] {
        assert_eq!(h.submit("d", g, &grade(&format!("img-{i:02}"), 0, dr, false)).await.status, StatusCode::OK);
    }
    h.submit("d", "rs-a", &grade("img-01", 1, 1, false)).await;
    let before = (*h.service.dataset("d").unwrap().view()).clone();
    let data = dir.path().join("d");
    assert!(data.join(store::SNAPSHOT_FILE).exists());

    // crash mid-append: an unterminated line was never acknowledged
    let log = data.join(store::LOG_FILE);
    let clean = std::fs::read(&log).unwrap();
    std::fs::write(&log, [clean.as_slice(), b"{\"image_id\":\"img-03\",\"gra"].concat()).unwrap();

    let h = h.restart();
    let after = (*h.service.dataset("d").unwrap().view()).clone();
    assert_eq!(after, before);
    assert_eq!(std::fs::read(&log).unwrap(), clean);
    // snapshot plus tail agrees with a full replay of the log
    assert_eq!(after, replay_log(&data).unwrap());

    // the recovered service keeps accepting grades in order
    let r = h.submit("d", "rs-b", &grade("img-01", 1, 1, false)).await;
    assert_eq!(r.body["version"], 8);
    let r = h.submit("d", "rs-c", &grade("img-01", 1, 1, false)).await;
    assert_eq!(r.body["phase"], "consensus");
}

#[tokio::test]
async fn facilitator_endorsements_are_opt_in() {
    let dir = tempfile::tempdir().unwrap();
    let h = Harness::open(dir.path(), &panel(), 100);
    h.create("d", &images(1)).await;
    for (g, dr) in [("rs-a", 1), ("rs-b", 2), ("rs-c", 2)] {
        h.submit("d", g, &grade("img-01", 0, dr, false)).await;
    }
    let mut body = serde_json::to_value(grade("img-01", 1, 2, false)).unwrap();
    body["grader_id"] = json!("rs-a");
    let r = h.request(Method::POST, "/v1/datasets/d/grades", Some(ADMIN), Some(body.to_string()), None).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);

    let mut config = h.config.clone();
    config.allow_facilitator_endorsements = true;
    let h = Harness::with_config(config, &panel());
    let r = h.request(Method::POST, "/v1/datasets/d/grades", Some(ADMIN), Some(body.to_string()), None).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.body["event"]["grader"]["id"], "rs-a");
    // never for independent grades
    let mut body0 = serde_json::to_value(grade("img-01", 0, 2, false)).unwrap();
    body0["grader_id"] = json!("rs-a");
    let r = h.request(Method::POST, "/v1/datasets/d/grades", Some(ADMIN), Some(body0.to_string()), None).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
}
