use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use lvtq_review::{router, AppState, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

const FAKE_PNG: &[u8] = b"\x89PNG\r\n\x1a\nfake";

fn write_overlays(root: &Path, patient: &str, slices: u32) {
    let dir = root.join(patient);
    std::fs::create_dir_all(&dir).unwrap();
    for i in 0..slices {
        std::fs::write(dir.join(format!("overlay_{i:03}.png")), FAKE_PNG).unwrap();
    }
}

struct Harness {
    _tmp: tempfile::TempDir,
    db: std::path::PathBuf,
    overlays: std::path::PathBuf,
    state: Arc<AppState>,
}

impl Harness {
    fn new() -> Harness {
        let tmp = tempfile::tempdir().unwrap();
        let db = tmp.path().join("grades.sqlite");
        let overlays = tmp.path().join("overlays");
        let state = AppState::open(&db, ServiceConfig::default()).unwrap();
        Harness {
            db,
            overlays,
            state,
            _tmp: tmp,
        }
    }

    fn restart(&mut self) {
        self.state = AppState::open(&self.db, ServiceConfig::default()).unwrap();
    }

    async fn call(&self, method: &str, uri: &str, reviewer: Option<&str>, body: Option<Value>) -> (StatusCode, Vec<u8>) {
        let mut req = Request::builder().method(method).uri(uri);
        if let Some(r) = reviewer {
            req = req.header("X-Reviewer-Id", r);
        }
        let req = match body {
            Some(b) => req
                .header("content-type", "application/json")
                .body(Body::from(b.to_string()))
                .unwrap(),
            None => req.body(Body::empty()).unwrap(),
        };
        let resp = router(self.state.clone()).oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
        (status, bytes)
    }

    async fn json(&self, method: &str, uri: &str, reviewer: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
        let (s, b) = self.call(method, uri, reviewer, body).await;
        (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
    }

    async fn session(&self, patients: &[&str], seed: u64) -> i64 {
        let (s, v) = self
            .json(
                "POST",
                "/sessions",
                None,
                Some(json!({"patients": patients, "overlay_dir": self.overlays, "seed": seed})),
            )
            .await;
        assert_eq!(s, StatusCode::CREATED, "{v}");
        v["session_id"].as_i64().unwrap()
    }

    async fn grade(&self, session: i64, reviewer: &str, patient: &str, slice: u32, score: f64) -> StatusCode {
        self.call(
            "PUT",
            &format!("/sessions/{session}/grades"),
            Some(reviewer),
            Some(json!({"patient_id": patient, "slice_index": slice, "score": score})),
        )
        .await
        .0
    }

    async fn summary(&self, session: i64, threshold: Option<f64>) -> Value {
        let uri = match threshold {
            Some(t) => format!("/sessions/{session}/summary?threshold={t}"),
            None => format!("/sessions/{session}/summary"),
        };
        let (s, v) = self.json("GET", &uri, None, None).await;
        assert_eq!(s, StatusCode::OK, "{v}");
        v
    }
}

#[tokio::test]
async fn session_enumerates_every_slice_once() {
    let h = Harness::new();
    let patients: Vec<String> = (0..28).map(|i| format!("h{i:02}")).collect();
    let mut expected = 0;
    for (i, p) in patients.iter().enumerate() {
        let n = 3 + (i % 5) as u32;
        write_overlays(&h.overlays, p, n);
        expected += n as usize;
    }
    let refs: Vec<&str> = patients.iter().map(String::as_str).collect();
    let id = h.session(&refs, 11).await;
    let mut seen = std::collections::BTreeSet::new();
    let mut offset = 0;
    loop {
        let (s, page) = h
            .json("GET", &format!("/sessions/{id}/slices?offset={offset}&limit=40"), Some("r1"), None)
            .await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(page["total"], expected);
        let items = page["items"].as_array().unwrap();
        if items.is_empty() {
            break;
        }
        for it in items {
            assert!(seen.insert((it["patient_id"].as_str().unwrap().to_string(), it["slice_index"].as_u64().unwrap())));
        }
        offset += items.len();
    }
    assert_eq!(seen.len(), expected);
}

#[tokio::test]
async fn session_creation_errors() {
    let h = Harness::new();
    let (s, _) = h
        .json("POST", "/sessions", None, Some(json!({"patients": [], "overlay_dir": h.overlays})))
        .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    write_overlays(&h.overlays, "a", 2);
    let (s, v) = h
        .json(
            "POST",
            "/sessions",
            None,
            Some(json!({"patients": ["a", "ghost1", "ghost2"], "overlay_dir": h.overlays})),
        )
        .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["missing"], json!(["ghost1", "ghost2"]));
}

async fn order_for(h: &Harness, id: i64, reviewer: &str) -> Vec<(String, u64)> {
    let (_, page) = h
        .json("GET", &format!("/sessions/{id}/slices?limit=500"), Some(reviewer), None)
        .await;
    page["items"]
        .as_array()
        .unwrap()
        .iter()
        .map(|it| (it["patient_id"].as_str().unwrap().to_string(), it["slice_index"].as_u64().unwrap()))
        .collect()
}

#[tokio::test]
async fn blinded_order_is_seeded_per_reviewer() {
    let h = Harness::new();
    for p in ["a", "b", "c", "d"] {
        write_overlays(&h.overlays, p, 6);
    }
    let s1 = h.session(&["a", "b", "c", "d"], 5).await;
    let s2 = h.session(&["a", "b", "c", "d"], 5).await;
    let r1 = order_for(&h, s1, "r1").await;
    assert_eq!(r1, order_for(&h, s2, "r1").await);
    assert_eq!(r1, order_for(&h, s1, "r1").await);
    assert_ne!(r1, order_for(&h, s1, "r2").await);
    let mut sorted = r1.clone();
    sorted.sort();
    let mut canonical = order_for(&h, s1, "r2").await;
    canonical.sort();
    assert_eq!(sorted, canonical);
}

#[tokio::test]
async fn overlay_is_served_as_png() {
    let h = Harness::new();
    write_overlays(&h.overlays, "a", 2);
    let id = h.session(&["a"], 0).await;
    let req = Request::get(format!("/sessions/{id}/overlays/a/1")).body(Body::empty()).unwrap();
    let resp = router(h.state.clone()).oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "image/png");
    let body = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&body[..], FAKE_PNG);
    let (s, _) = h.call("GET", &format!("/sessions/{id}/overlays/a/9"), None, None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn grade_validation() {
    let h = Harness::new();
    write_overlays(&h.overlays, "a", 2);
    let id = h.session(&["a"], 0).await;
    assert_eq!(h.grade(id, "r1", "a", 0, 4.5).await, StatusCode::OK);
    assert_eq!(h.grade(id, "r1", "a", 0, 3.25).await, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(h.grade(id, "r1", "a", 0, 5.5).await, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(h.grade(id, "r1", "a", 7, 4.0).await, StatusCode::NOT_FOUND);
    assert_eq!(h.grade(id, "r1", "zz", 0, 4.0).await, StatusCode::NOT_FOUND);
    assert_eq!(h.grade(id + 100, "r1", "a", 0, 4.0).await, StatusCode::NOT_FOUND);
    let (s, _) = h
        .call(
            "PUT",
            &format!("/sessions/{id}/grades"),
            None,
            Some(json!({"patient_id": "a", "slice_index": 0, "score": 4.0})),
        )
        .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn upsert_replaces_and_keeps_history() {
    let h = Harness::new();
    write_overlays(&h.overlays, "a", 1);
    let id = h.session(&["a"], 0).await;
    for _ in 0..3 {
        assert_eq!(h.grade(id, "r1", "a", 0, 4.0).await, StatusCode::OK);
    }
    let (_, grades) = h.json("GET", &format!("/sessions/{id}/grades"), None, None).await;
    assert_eq!(grades.as_array().unwrap().len(), 1);
    let once = h.summary(id, None).await;

    assert_eq!(h.grade(id, "r1", "a", 0, 2.0).await, StatusCode::OK);
    let (_, grades) = h.json("GET", &format!("/sessions/{id}/grades"), None, None).await;
    assert_eq!(grades.as_array().unwrap().len(), 1);
    assert_eq!(grades[0]["score"], 2.0);
    let (_, history) = h.json("GET", &format!("/sessions/{id}/history"), None, None).await;
    let scores: Vec<f64> = history.as_array().unwrap().iter().map(|g| g["score"].as_f64().unwrap()).collect();
    assert_eq!(scores, vec![4.0, 4.0, 4.0, 2.0]);

    // Re-sending the same grade leaves the summary unchanged.
    assert_eq!(h.grade(id, "r1", "a", 0, 4.0).await, StatusCode::OK);
    assert_eq!(h.summary(id, None).await, once);
}

#[tokio::test]
async fn grades_survive_restart() {
    let mut h = Harness::new();
    write_overlays(&h.overlays, "a", 3);
    let id = h.session(&["a"], 9).await;
    let order = order_for(&h, id, "r1").await;
    for (i, score) in [5.0, 4.5, 3.0].into_iter().enumerate() {
        assert_eq!(h.grade(id, "r1", "a", i as u32, score).await, StatusCode::OK);
    }
    let before = h.summary(id, None).await;
    h.restart();
    assert_eq!(h.summary(id, None).await, before);
    assert_eq!(order_for(&h, id, "r1").await, order);
    let (_, grades) = h.json("GET", &format!("/sessions/{id}/grades"), None, None).await;
    assert_eq!(grades.as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn summary_hand_cases() {
    let h = Harness::new();
    write_overlays(&h.overlays, "a", 3);
    let id = h.session(&["a"], 0).await;
    let empty = h.summary(id, None).await;
    assert_eq!(empty["empty"], true);

    // Swapped scores on two slices: every difference is 1.
    h.grade(id, "r1", "a", 0, 4.0).await;
    h.grade(id, "r1", "a", 1, 5.0).await;
    h.grade(id, "r2", "a", 0, 5.0).await;
    h.grade(id, "r2", "a", 1, 4.0).await;
    let s = h.summary(id, None).await;
    assert_eq!(s["summary"]["inter_observer_mean_diff"], 1.0);
    assert_eq!(s["summary"]["inter_observer_std_diff"], 0.0);
    assert_eq!(s["summary"]["percent_valid"], 100.0);

    let id2 = h.session(&["a"], 0).await;
    for (i, score) in [3.0, 3.5, 4.0].into_iter().enumerate() {
        h.grade(id2, "r1", "a", i as u32, score).await;
    }
    let s = h.summary(id2, Some(3.5)).await;
    let pv = s["summary"]["percent_valid"].as_f64().unwrap();
    assert!((pv - 66.7).abs() < 0.05, "{pv}");

    let id3 = h.session(&["a"], 0).await;
    for r in ["r1", "r2"] {
        for i in 0..3 {
            h.grade(id3, r, "a", i, 5.0).await;
        }
    }
    let s = h.summary(id3, None).await;
    assert_eq!(s["summary"]["percent_valid"], 100.0);
    assert_eq!(s["summary"]["inter_observer_mean_diff"], 0.0);
    assert_eq!(s["summary"]["inter_observer_std_diff"], 0.0);
}

#[tokio::test]
async fn percent_valid_falls_as_threshold_rises() {
    let h = Harness::new();
    write_overlays(&h.overlays, "a", 9);
    let id = h.session(&["a"], 0).await;
    for i in 0..9u32 {
        h.grade(id, "r1", "a", i, 1.0 + 0.5 * i as f64).await;
    }
    let mut last = f64::INFINITY;
    for k in 0..=10 {
        let t = 0.5 + 0.5 * k as f64;
        let pv = h.summary(id, Some(t)).await["summary"]["percent_valid"].as_f64().unwrap();
        assert!(pv <= last, "threshold {t}: {pv} > {last}");
        assert!((0.0..=100.0).contains(&pv));
        last = pv;
    }
}

#[tokio::test]
async fn page_listing_shows_reviewer_score() {
    let h = Harness::new();
    write_overlays(&h.overlays, "a", 2);
    let id = h.session(&["a"], 0).await;
    h.grade(id, "r1", "a", 1, 3.5).await;
    let (_, page) = h.json("GET", &format!("/sessions/{id}/slices"), Some("r1"), None).await;
    let scored: Vec<&Value> = page["items"].as_array().unwrap().iter().filter(|it| !it["score"].is_null()).collect();
    assert_eq!(scored.len(), 1);
    assert_eq!(scored[0]["slice_index"], 1);
    let (_, page) = h.json("GET", &format!("/sessions/{id}/slices"), Some("r2"), None).await;
    assert!(page["items"].as_array().unwrap().iter().all(|it| it["score"].is_null()));
}
