use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use futures::StreamExt;
use mer_service::{Service, ServiceConfig};
use reqwest::multipart::{Form, Part};
use reqwest::StatusCode;
use serde_json::Value;

fn assets() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/assets")
}

fn golden(name: &str) -> String {
    std::fs::read_to_string(assets().join("golden").join(format!("{name}.ndjson"))).unwrap()
}

fn zip_dir(dir: &Path) -> Vec<u8> {
    let mut zw = zip::ZipWriter::new(std::io::Cursor::new(Vec::new()));
    let opts = zip::write::SimpleFileOptions::default();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let mut entries: Vec<_> = std::fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                zw.start_file(rel, opts).unwrap();
                zw.write_all(&std::fs::read(&p).unwrap()).unwrap();
            }
        }
    }
    zw.finish().unwrap().into_inner()
}

fn fixture_zip(name: &str) -> Vec<u8> {
    zip_dir(&assets().join("fixtures").join(name))
}

struct Server {
    base: String,
    data: tempfile::TempDir,
    client: reqwest::Client,
}

impl Server {
    async fn start_in(data: tempfile::TempDir, tweak: impl FnOnce(&mut ServiceConfig)) -> Server {
        let mut cfg = ServiceConfig {
            bind: "127.0.0.1:0".into(),
            data_dir: data.path().to_path_buf(),
            model: assets().join("reference_model"),
            thresholds: assets().join("thresholds.json"),
            ..ServiceConfig::default()
        };
        tweak(&mut cfg);
        let service = Service::open(cfg).unwrap();
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let router = service.router();
        tokio::spawn(async move { axum::serve(listener, router).await.unwrap() });
        Server { base, data, client: reqwest::Client::new() }
    }

    async fn start(tweak: impl FnOnce(&mut ServiceConfig)) -> Server {
        Self::start_in(tempfile::tempdir().unwrap(), tweak).await
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn upload(&self, fixture: &str) -> String {
        let form = Form::new().part("bundle", Part::bytes(fixture_zip(fixture)).file_name("bundle.zip"));
        let resp = self.client.post(self.url("/api/jobs")).multipart(form).send().await.unwrap();
        assert_eq!(resp.status(), StatusCode::ACCEPTED);
        let body: Value = resp.json().await.unwrap();
        body["job_id"].as_str().unwrap().to_string()
    }

    async fn events(&self, id: &str) -> String {
        let resp = self.client.get(self.url(&format!("/api/jobs/{id}/events"))).send().await.unwrap();
        assert_eq!(resp.status(), StatusCode::OK);
        resp.text().await.unwrap()
    }

    async fn job(&self, id: &str) -> (StatusCode, Value) {
        let resp = self.client.get(self.url(&format!("/api/jobs/{id}"))).send().await.unwrap();
        let status = resp.status();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    async fn wait_state(&self, id: &str, want: &str) -> Value {
        for _ in 0..400 {
            let (status, body) = self.job(id).await;
            if status == StatusCode::OK && body["state"] == want {
                return body;
            }
            tokio::time::sleep(Duration::from_millis(25)).await;
        }
        panic!("job {id} never reached {want}");
    }

    fn job_dir(&self, id: &str) -> PathBuf {
        self.data.path().join("jobs").join(id)
    }
}

#[tokio::test]
async fn health() {
    let s = Server::start(|_| {}).await;
    let body: Value = s.client.get(s.url("/api/health")).send().await.unwrap().json().await.unwrap();
    assert_eq!(body, serde_json::json!({"status": "ok"}));
}

#[tokio::test]
async fn full_lifecycle() {
    let s = Server::start(|_| {}).await;
    let id = s.upload("two_utt").await;
    assert!(id.len() >= 16 && id.chars().all(|c| c.is_ascii_alphanumeric()));
    let log = s.events(&id).await;
    assert_eq!(log, golden("two_utt"));

    let body = s.wait_state(&id, "done").await;
    let final_event: Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    let avg = body["result"]["avg_probs"].as_array().unwrap();
    for (e, v) in mer_core::EMOTIONS.iter().zip(avg) {
        let from_event = final_event["avg_probs"][e].as_f64().unwrap();
        assert!((from_event - v.as_f64().unwrap()).abs() <= 5e-7);
    }
    assert_eq!(body["result"]["utterances"].as_array().unwrap().len(), 2);

    let face = s.client.get(s.url(&format!("/api/jobs/{id}/utterances/1/faces/0.png"))).send().await.unwrap();
    assert_eq!(face.status(), StatusCode::OK);
    assert_eq!(face.headers()["content-type"], "image/png");
    assert_eq!(&face.bytes().await.unwrap()[1..4], b"PNG");
    let audio = s.client.get(s.url(&format!("/api/jobs/{id}/utterances/0/audio.wav"))).send().await.unwrap();
    assert_eq!(audio.status(), StatusCode::OK);
    assert_eq!(&audio.bytes().await.unwrap()[..4], b"RIFF");
    let missing = s.client.get(s.url(&format!("/api/jobs/{id}/utterances/0/faces/9.png"))).send().await.unwrap();
    assert_eq!(missing.status(), StatusCode::NOT_FOUND);

    assert!(s.job_dir(&id).exists());
    let del = s.client.delete(s.url(&format!("/api/jobs/{id}"))).send().await.unwrap();
    assert_eq!(del.status(), StatusCode::NO_CONTENT);
    assert!(!s.job_dir(&id).exists());
    let del = s.client.delete(s.url(&format!("/api/jobs/{id}"))).send().await.unwrap();
    assert_eq!(del.status(), StatusCode::GONE);
    assert_eq!(s.job(&id).await.0, StatusCode::GONE);
    let ev = s.client.get(s.url(&format!("/api/jobs/{id}/events"))).send().await.unwrap();
    assert_eq!(ev.status(), StatusCode::GONE);
}

#[tokio::test]
async fn silence_and_single_utterance() {
    let s = Server::start(|_| {}).await;
    let quiet = s.upload("silence").await;
    let one = s.upload("one_utt").await;
    assert_eq!(s.events(&quiet).await, golden("silence"));
    assert_eq!(s.events(&one).await, golden("one_utt"));
    let body = s.wait_state(&quiet, "done").await;
    assert_eq!(body["result"]["status"], "no_speech");
}

#[tokio::test]
async fn unknown_ids_are_404() {
    let s = Server::start(|_| {}).await;
    for (method, path) in [("GET", "/api/jobs/nope"), ("GET", "/api/jobs/nope/events"), ("DELETE", "/api/jobs/nope")] {
        let req = s.client.request(method.parse().unwrap(), s.url(path));
        assert_eq!(req.send().await.unwrap().status(), StatusCode::NOT_FOUND, "{method} {path}");
    }
}

#[tokio::test]
async fn rejects_bad_uploads() {
    let s = Server::start(|c| c.max_upload_bytes = 64 * 1024).await;
    let post = |form: Form| s.client.post(s.url("/api/jobs")).multipart(form).send();

    let empty = s.client.post(s.url("/api/jobs")).send().await.unwrap();
    assert_eq!(empty.status(), StatusCode::BAD_REQUEST);
    let no_file = post(Form::new().text("config", "{}")).await.unwrap();
    assert_eq!(no_file.status(), StatusCode::BAD_REQUEST);
    let zero = post(Form::new().part("bundle", Part::bytes(Vec::new()).file_name("b.zip"))).await.unwrap();
    assert_eq!(zero.status(), StatusCode::BAD_REQUEST);

    let big = post(Form::new().part("bundle", Part::bytes(vec![7u8; 200 * 1024]).file_name("b.zip"))).await.unwrap();
    assert_eq!(big.status(), StatusCode::PAYLOAD_TOO_LARGE);

    let not_zip = post(Form::new().part("bundle", Part::bytes(b"hello".to_vec()).file_name("b.zip"))).await.unwrap();
    assert_eq!(not_zip.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let media = post(Form::new().part("media", Part::bytes(b"fake mp4".to_vec()).file_name("v.mp4"))).await.unwrap();
    assert_eq!(media.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let bad_cfg = post(Form::new().text("config", "{\"bogus\": 1}").part("bundle", Part::bytes(b"x".to_vec()))).await.unwrap();
    assert_eq!(bad_cfg.status(), StatusCode::BAD_REQUEST);

    let jobs: Vec<_> = std::fs::read_dir(s.data.path().join("jobs")).unwrap().collect();
    assert!(jobs.is_empty(), "rejected uploads must not leave job directories");
}

#[tokio::test]
async fn bundle_zip_with_wrapping_folder_and_missing_audio() {
    let s = Server::start(|_| {}).await;
    let tmp = tempfile::tempdir().unwrap();
    let wrapped = tmp.path().join("outer");
    std::fs::create_dir_all(wrapped.join("clip")).unwrap();
    copy_dir(&assets().join("fixtures/one_utt"), &wrapped.join("clip"));
    let form = Form::new().part("bundle", Part::bytes(zip_dir(&wrapped)).file_name("b.zip"));
    let resp = s.client.post(s.url("/api/jobs")).multipart(form).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::ACCEPTED);

    std::fs::remove_file(wrapped.join("clip/audio.wav")).unwrap();
    let form = Form::new().part("bundle", Part::bytes(zip_dir(&wrapped)).file_name("b.zip"));
    let resp = s.client.post(s.url("/api/jobs")).multipart(form).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let body: Value = resp.json().await.unwrap();
    assert!(body["error"].as_str().unwrap().contains("audio.wav"));
}

fn copy_dir(from: &Path, to: &Path) {
    for e in std::fs::read_dir(from).unwrap() {
        let p = e.unwrap().path();
        let dst = to.join(p.file_name().unwrap());
        if p.is_dir() {
            std::fs::create_dir_all(&dst).unwrap();
            copy_dir(&p, &dst);
        } else {
            std::fs::copy(&p, &dst).unwrap();
        }
    }
}

#[tokio::test]
async fn config_override_changes_the_run() {
    let s = Server::start(|_| {}).await;
    let form = Form::new()
        .text("config", r#"{"stt": "none"}"#)
        .part("bundle", Part::bytes(fixture_zip("one_utt")).file_name("b.zip"));
    let resp = s.client.post(s.url("/api/jobs")).multipart(form).send().await.unwrap();
    let id: Value = resp.json().await.unwrap();
    let log = s.events(id["job_id"].as_str().unwrap()).await;
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["transcript"], "");
    assert_eq!(first["input_summary"]["n_real_tokens"], 0);
}

#[tokio::test]
async fn late_and_mid_subscribers_see_identical_bytes() {
    let s = Server::start(|c| c.utterance_delay_ms = 300).await;
    let id = s.upload("two_utt").await;

    let early = s.client.get(s.url(&format!("/api/jobs/{id}/events"))).send().await.unwrap();
    let mut stream = early.bytes_stream();
    let mut early_bytes = stream.next().await.unwrap().unwrap().to_vec();
    assert_eq!(s.job(&id).await.1["state"], "processing");

    let mid = s.events(&id);
    let rest = async {
        while let Some(chunk) = stream.next().await {
            early_bytes.extend_from_slice(&chunk.unwrap());
        }
        early_bytes
    };
    let (mid, early) = tokio::join!(mid, rest);
    let late = s.events(&id).await;
    let expected = golden("two_utt");
    assert_eq!(String::from_utf8(early).unwrap(), expected);
    assert_eq!(mid, expected);
    assert_eq!(late, expected);
}

#[tokio::test]
async fn delete_while_processing_cancels() {
    let s = Server::start(|c| c.utterance_delay_ms = 400).await;
    let id = s.upload("two_utt").await;
    let resp = s.client.get(s.url(&format!("/api/jobs/{id}/events"))).send().await.unwrap();
    let mut stream = resp.bytes_stream();
    let first = stream.next().await.unwrap().unwrap();
    assert!(first.starts_with(b"{\"type\":\"utterance\",\"index\":0"));

    let del = s.client.delete(s.url(&format!("/api/jobs/{id}"))).send().await.unwrap();
    assert_eq!(del.status(), StatusCode::NO_CONTENT);
    let mut rest = Vec::new();
    while let Some(chunk) = stream.next().await {
        rest.extend_from_slice(&chunk.unwrap());
    }
    assert!(!String::from_utf8_lossy(&rest).contains("\"final\""));
    assert_eq!(s.job(&id).await.0, StatusCode::GONE);
    tokio::time::sleep(Duration::from_millis(900)).await;
    assert!(!s.job_dir(&id).exists(), "cancelled run must not recreate files");
}

#[tokio::test]
async fn eight_concurrent_jobs_are_isolated() {
    let s = Server::start(|_| {}).await;
    let kinds = ["two_utt", "one_utt", "silence", "two_utt", "one_utt", "two_utt", "silence", "one_utt"];
    let ids = futures::future::join_all(kinds.iter().map(|k| s.upload(k))).await;
    let logs = futures::future::join_all(ids.iter().map(|id| s.events(id))).await;
    for ((kind, id), log) in kinds.iter().zip(&ids).zip(&logs) {
        assert_eq!(log, &golden(kind), "{kind}");
        s.wait_state(id, "done").await;
    }
    let unique: std::collections::HashSet<_> = ids.iter().collect();
    assert_eq!(unique.len(), 8);
}

#[tokio::test]
async fn restart_marks_in_flight_jobs_failed() {
    let data = tempfile::tempdir().unwrap();
    let jobs = data.path().join("jobs");
    let partial = golden("two_utt").lines().next().unwrap().to_string() + "\n";
    for (id, state) in [("aaaaaaaaaaaaaaaa0001", "processing"), ("aaaaaaaaaaaaaaaa0002", "queued"), ("aaaaaaaaaaaaaaaa0003", "done")] {
        let dir = jobs.join(id);
        std::fs::create_dir_all(dir.join("input")).unwrap();
        std::fs::write(dir.join("status.json"), format!(r#"{{"id":"{id}","state":"{state}","created_at":1}}"#)).unwrap();
        let log = if state == "done" { golden("two_utt") } else if state == "processing" { partial.clone() } else { String::new() };
        std::fs::write(dir.join("events.ndjson"), log).unwrap();
    }
    let s = Server::start_in(data, |_| {}).await;

    let (status, body) = s.job("aaaaaaaaaaaaaaaa0001").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["state"], "failed");
    let log = s.events("aaaaaaaaaaaaaaaa0001").await;
    assert!(log.starts_with(&partial));
    let last: Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(last["type"], "failed");
    let on_disk: Value =
        serde_json::from_slice(&std::fs::read(jobs.join("aaaaaaaaaaaaaaaa0001/status.json")).unwrap()).unwrap();
    assert_eq!(on_disk["state"], "failed");

    assert_eq!(s.job("aaaaaaaaaaaaaaaa0002").await.1["state"], "failed");
    assert_eq!(s.job("aaaaaaaaaaaaaaaa0003").await.1["state"], "done");
    assert_eq!(s.events("aaaaaaaaaaaaaaaa0003").await, golden("two_utt"));
}
