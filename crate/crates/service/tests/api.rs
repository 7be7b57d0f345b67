use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use efumi_core::efumi::run_efumi;
use efumi_core::influence::{exact_influence_sweep, influence_norm, surrogates, top_k, Restart};
use efumi_core::io::{decode_cube, encode_cube};
use efumi_core::synth::generate_synthetic;
use efumi_core::{Cube, EfumiConfig, LabelMask, Rng, SuperpixelMap, SyntheticConfig, Unit};
use efumi_service::{app, Job, JobState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(app: &Router, method: Method, uri: &str, body: Vec<u8>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).body(Body::from(body)).unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: Method, uri: &str, body: Value) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, serde_json::to_vec(&body).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    call(app, Method::GET, uri, Vec::new()).await
}

async fn wait(app: &Router, job_id: &str) -> Job {
    let start = Instant::now();
    loop {
        let (s, b) = get(app, &format!("/jobs/{job_id}")).await;
        assert_eq!(s, StatusCode::OK);
        let job: Job = serde_json::from_slice(&b).unwrap();
        if matches!(job.state, JobState::Done | JobState::Failed) {
            return job;
        }
        assert!(start.elapsed() < Duration::from_secs(120), "job {job_id} stuck");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

fn scene(seed: u64) -> (Cube, LabelMask) {
    let cfg = SyntheticConfig::new(16, 16, 10, 3).target_fraction(0.05).noise(0.01);
    let (cube, _, mask) = generate_synthetic::<f64>(&cfg, &mut Rng::new(seed)).unwrap();
    // What the service will see after the f32 container.
    let cube = decode_cube(&encode_cube(&cube).unwrap()).unwrap();
    (cube, mask)
}

async fn upload(app: &Router, cube: &Cube, mask: &LabelMask) -> String {
    let (s, b) = call(app, Method::POST, "/datasets", encode_cube(cube).unwrap()).await;
    assert_eq!(s, StatusCode::CREATED, "{}", String::from_utf8_lossy(&b));
    let id = serde_json::from_slice::<Value>(&b).unwrap()["dataset_id"].as_str().unwrap().to_string();
    let (s, _) = call(app, Method::PUT, &format!("/datasets/{id}/bags"), mask.encode().unwrap()).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    id
}

async fn start(app: &Router, uri: &str, body: Value) -> String {
    let (s, v) = call_json(app, Method::POST, uri, body).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    v["job_id"].as_str().unwrap().to_string()
}

async fn run_to_done(app: &Router, dataset: &str, config: Value) -> String {
    let job = start(app, &format!("/datasets/{dataset}/runs"), config).await;
    let done = wait(app, &job).await;
    assert_eq!(done.state, JobState::Done, "{:?}", done.error);
    assert_eq!(done.result_ref.as_deref(), Some(format!("runs/{job}").as_str()));
    job
}

fn config() -> EfumiConfig {
    EfumiConfig {
        m_init: 3,
        ..EfumiConfig::default()
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn full_loop_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 2).unwrap();
    let (cube, mask) = scene(1);
    let bags = mask.to_bags().unwrap();
    let id = upload(&app, &cube, &mask).await;

    let (s, meta) = get(&app, &format!("/datasets/{id}/meta")).await;
    assert_eq!(s, StatusCode::OK);
    let meta: Value = serde_json::from_slice(&meta).unwrap();
    assert_eq!((meta["rows"].as_u64(), meta["bands"].as_u64()), (Some(16), Some(10)));

    let (s, png) = get(&app, &format!("/datasets/{id}/quicklook?bands=7,4,1")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");

    let run = run_to_done(&app, &id, json!({ "m_init": 3 })).await;
    let oracle = run_efumi(&cube, &bags, &config(), None).unwrap();

    let (_, e) = get(&app, &format!("/runs/{run}/endmembers")).await;
    let e: Value = serde_json::from_slice(&e).unwrap();
    let target: Vec<f64> = serde_json::from_value(e["target"].clone()).unwrap();
    assert_eq!(target, oracle.endmembers.target());

    let (_, p) = get(&app, &format!("/runs/{run}/proportions")).await;
    let p: Cube = decode_cube(&p).unwrap();
    assert_eq!(p.bands(), oracle.proportions.n_cols());
    for (a, b) in p.data().iter().zip(oracle.proportions.values()) {
        assert_eq!(*a, *b as f32 as f64);
    }
    let (_, t) = get(&app, &format!("/runs/{run}/target-map")).await;
    assert_eq!(decode_cube::<f64>(&t).unwrap().bands(), 1);

    // Surrogate ranking, top 5 by pt.
    let job = start(&app, &format!("/runs/{run}/influence"), json!({ "method": "pt", "top_k": 5 })).await;
    assert_eq!(wait(&app, &job).await.state, JobState::Done);
    let (_, out) = get(&app, &format!("/influence/{job}")).await;
    let out: Value = serde_json::from_slice(&out).unwrap();
    let (pt, _) = surrogates(&cube, &oracle.endmembers).unwrap();
    let labelled = bags.labeled_pixels();
    let expect = top_k(&pt, &labelled, 5);
    let got: Vec<usize> = out["records"].as_array().unwrap().iter().map(|r| r["unit_id"].as_u64().unwrap() as usize).collect();
    assert_eq!(got, expect);
    assert_eq!(out["n_candidates"].as_u64().unwrap() as usize, labelled.len());

    // Relabel the top 5 and rerun; the shift matches a direct library run
    // and exceeds the shift from relabelling the 5 lowest-ranked pixels.
    let flipped = bags.flip(&got).unwrap();
    let (s, _) = call(&app, Method::PUT, &format!("/datasets/{id}/bags"), flipped.to_json().unwrap().into_bytes()).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let rerun = run_to_done(&app, &id, json!({ "m_init": 3 })).await;
    let (_, e2) = get(&app, &format!("/runs/{rerun}/endmembers")).await;
    let e2: Value = serde_json::from_slice(&e2).unwrap();
    let target2: Vec<f64> = serde_json::from_value(e2["target"].clone()).unwrap();
    let shift = influence_norm(&target, &target2).unwrap();
    let direct = run_efumi(&cube, &flipped, &config(), None).unwrap();
    assert_eq!(shift, influence_norm(oracle.endmembers.target(), direct.endmembers.target()).unwrap());
    let mut by_pt = labelled.clone();
    by_pt.sort_by(|&a, &b| pt[a].total_cmp(&pt[b]).then(a.cmp(&b)));
    let low = run_efumi(&cube, &bags.flip(&by_pt[..5]).unwrap(), &config(), None).unwrap();
    let low_shift = influence_norm(oracle.endmembers.target(), low.endmembers.target()).unwrap();
    assert!(shift > low_shift, "top {shift} low {low_shift}");
    let (s, b) = call(&app, Method::PUT, &format!("/datasets/{id}/bags"), bags.to_json().unwrap().into_bytes()).await;
    assert_eq!(s, StatusCode::NO_CONTENT, "{}", String::from_utf8_lossy(&b));

    // Exact influence of the top 3 equals a direct sweep.
    let job = start(&app, &format!("/runs/{run}/influence"), json!({ "method": "exact", "top_k": 3 })).await;
    assert_eq!(wait(&app, &job).await.state, JobState::Done);
    let (_, out) = get(&app, &format!("/influence/{job}")).await;
    let out: Value = serde_json::from_slice(&out).unwrap();
    let units: Vec<Unit> = top_k(&pt, &labelled, 3).into_iter().map(Unit::pixel).collect();
    let mut direct = exact_influence_sweep(&cube, &bags, &oracle, &units, Restart::Warm).unwrap();
    direct.sort_by(|a, b| b.exact.unwrap().total_cmp(&a.exact.unwrap()).then(a.unit_id.cmp(&b.unit_id)));
    let records = out["records"].as_array().unwrap();
    assert_eq!(records.len(), 3);
    for (r, d) in records.iter().zip(&direct) {
        assert_eq!(r["unit_id"].as_u64().unwrap() as usize, d.unit_id);
        assert_eq!(r["exact"].as_f64(), d.exact);
    }
    let (s, heat) = get(&app, &format!("/influence/{job}/heatmap")).await;
    assert_eq!(s, StatusCode::OK);
    let heat: Cube = decode_cube(&heat).unwrap();
    assert_eq!((heat.rows(), heat.cols(), heat.bands()), (16, 16, 1));
    assert_eq!(heat.data().iter().filter(|&&v| v != 0.0).count(), direct.iter().filter(|d| d.exact != Some(0.0)).count());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn superpixel_influence_uses_latest_map() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 2).unwrap();
    let (cube, mask) = scene(2);
    let id = upload(&app, &cube, &mask).await;
    let run = run_to_done(&app, &id, json!({ "m_init": 3 })).await;

    let (s, v) = call_json(&app, Method::POST, &format!("/runs/{run}/influence"), json!({ "granularity": "superpixel" })).await;
    assert_eq!(s, StatusCode::CONFLICT, "{v}");

    let job = start(&app, &format!("/datasets/{id}/superpixels"), json!({ "target_segments": 16 })).await;
    assert_eq!(wait(&app, &job).await.state, JobState::Done);
    let (s, map) = get(&app, &format!("/datasets/{id}/superpixels")).await;
    assert_eq!(s, StatusCode::OK);
    let map = SuperpixelMap::decode(&map).unwrap();
    assert_eq!((map.rows(), map.cols()), (16, 16));
    assert_eq!(map, efumi_core::superpixel::segment(&cube, 16, 0.5).unwrap());

    let job = start(&app, &format!("/runs/{run}/influence"), json!({ "granularity": "superpixel", "method": "re" })).await;
    assert_eq!(wait(&app, &job).await.state, JobState::Done);
    let (_, out) = get(&app, &format!("/influence/{job}")).await;
    let out: Value = serde_json::from_slice(&out).unwrap();
    let records = out["records"].as_array().unwrap();
    assert!(!records.is_empty());
    let scores: Vec<f64> = records.iter().map(|r| r["region"]["max_re"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn bad_requests_get_specific_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 1).unwrap();
    assert_eq!(get(&app, "/jobs/0123abcd").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/jobs/..%2Fetc").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/datasets/nope/meta").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/runs/nope/endmembers").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/influence/nope").await.0, StatusCode::NOT_FOUND);

    assert_eq!(call(&app, Method::POST, "/datasets", b"not a cube".to_vec()).await.0, StatusCode::BAD_REQUEST);
    let nan = Cube::new(1, 2, 2, vec![0.0, f64::NAN, 1.0, 2.0]).unwrap();
    let (s, b) = call(&app, Method::POST, "/datasets", encode_cube(&nan).unwrap()).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let v: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(v["violations"].as_array().unwrap().len(), 1);

    let (cube, mask) = scene(3);
    let (s, b) = call(&app, Method::POST, "/datasets", encode_cube(&cube).unwrap()).await;
    assert_eq!(s, StatusCode::CREATED);
    let id = serde_json::from_slice::<Value>(&b).unwrap()["dataset_id"].as_str().unwrap().to_string();
    let runs = format!("/datasets/{id}/runs");
    assert_eq!(call_json(&app, Method::POST, &runs, json!({})).await.0, StatusCode::CONFLICT);

    // Positive bags only: a mask is rejected on upload, JSON bags at run time.
    let no_neg: Vec<u16> = mask.codes.iter().map(|&c| if c == 1 { 0 } else { c }).collect();
    let no_neg = LabelMask::new(16, 16, no_neg).unwrap();
    let (s, _) = call(&app, Method::PUT, &format!("/datasets/{id}/bags"), no_neg.encode().unwrap()).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let positives = json!({ "bags": [{ "id": 2, "label": 1, "pixels": [0, 1] }] });
    let (s, _) = call_json(&app, Method::PUT, &format!("/datasets/{id}/bags"), positives).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (s, v) = call_json(&app, Method::POST, &runs, json!({})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"].as_str().unwrap().contains("negative"), "{v}");

    let wrong = LabelMask::new(4, 4, vec![1; 16]).unwrap();
    let (s, _) = call(&app, Method::PUT, &format!("/datasets/{id}/bags"), wrong.encode().unwrap()).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call(&app, Method::PUT, &format!("/datasets/{id}/bags"), b"{oops".to_vec()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, Method::PUT, &format!("/datasets/{id}/bags"), mask.to_bags().unwrap().to_json().unwrap().into_bytes()).await;
    assert_eq!(s, StatusCode::NO_CONTENT);

    assert_eq!(call_json(&app, Method::POST, &runs, json!({ "m_init": 0 })).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(call_json(&app, Method::POST, &runs, json!({ "bogus": 1 })).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(get(&app, &format!("/datasets/{id}/quicklook?bands=1,2")).await.0, StatusCode::BAD_REQUEST);
    let seg = format!("/datasets/{id}/superpixels");
    assert_eq!(call_json(&app, Method::POST, &seg, json!({ "target_segments": 0 })).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_identical_runs_agree() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 2).unwrap();
    let (cube, mask) = scene(4);
    let id = upload(&app, &cube, &mask).await;
    let mut jobs = Vec::new();
    for _ in 0..3 {
        jobs.push(start(&app, &format!("/datasets/{id}/runs"), json!({ "m_init": 3, "seed": 7 })).await);
    }
    let mut targets = Vec::new();
    for job in &jobs {
        assert_eq!(wait(&app, job).await.state, JobState::Done);
        targets.push(get(&app, &format!("/runs/{job}/endmembers")).await.1);
    }
    assert!(targets.windows(2).all(|w| w[0] == w[1]));
    let a = get(&app, &format!("/runs/{}/proportions", jobs[0])).await.1;
    let b = get(&app, &format!("/runs/{}/proportions", jobs[2])).await.1;
    assert_eq!(a, b);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn state_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (run, id) = {
        let app = app(dir.path(), 1).unwrap();
        let (cube, mask) = scene(5);
        let id = upload(&app, &cube, &mask).await;
        (run_to_done(&app, &id, json!({ "m_init": 3 })).await, id)
    };
    // A job that was in flight when the process died.
    let stale = json!({ "id": "deadbeef", "kind": "run", "state": "running", "progress": 0.3, "result_ref": null, "error": null });
    std::fs::write(dir.path().join("jobs/deadbeef.json"), serde_json::to_vec(&stale).unwrap()).unwrap();

    let app = app(dir.path(), 1).unwrap();
    assert_eq!(get(&app, &format!("/runs/{run}/endmembers")).await.0, StatusCode::OK);
    let (s, meta) = get(&app, &format!("/datasets/{id}")).await;
    assert_eq!(s, StatusCode::OK);
    assert!(serde_json::from_slice::<Value>(&meta).unwrap()["bags_version"].is_string());
    let job: Job = serde_json::from_slice(&get(&app, "/jobs/deadbeef").await.1).unwrap();
    assert_eq!(job.state, JobState::Failed);
    assert!(job.result_ref.is_none() && job.error.is_some());
    let done: Job = serde_json::from_slice(&get(&app, &format!("/jobs/{run}")).await.1).unwrap();
    assert_eq!(done.state, JobState::Done);
}
