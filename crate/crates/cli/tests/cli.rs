use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request};
use http_body_util::BodyExt;
use tower::ServiceExt;

use objseek_core::encoder::{EmbeddingFile, Encoder, ToyEncoder};
use objseek_core::eval::{Journal, Judgment, QueryLog, QueryRecord, Verdict};
use objseek_core::pipeline;
use objseek_core::preprocess::AnnotationFile;
use objseek_core::synth::{random_scene, SynthConfig, SyntheticCorpus};
use objseek_core::{Index, SearchMode};
use objseek_service::{AppState, SearchHit, ServiceOptions};

fn objseek(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_objseek"))
        .args(args)
        .env("NO_COLOR", "1")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Scenes {
    dir: tempfile::TempDir,
}

impl Scenes {
    fn new(count: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let scenes = Scenes { dir };
        std::fs::create_dir_all(scenes.images()).unwrap();
        std::fs::create_dir_all(scenes.annotations()).unwrap();
        for i in 0..count {
            scenes.add(&format!("cam_{i:03}"), 300 + i);
        }
        scenes
    }

    fn add(&self, name: &str, seed: u64) {
        let (img, ann) = random_scene(36, 24, 5, seed).unwrap();
        std::fs::write(self.images().join(format!("{name}.png")), pipeline::encode_png(&img).unwrap()).unwrap();
        AnnotationFile::from_annotation(name, &ann)
            .write(&self.annotations().join(format!("{name}.json")))
            .unwrap();
    }

    fn images(&self) -> PathBuf {
        self.dir.path().join("images")
    }

    fn annotations(&self) -> PathBuf {
        self.dir.path().join("annotations")
    }

    fn index(&self) -> PathBuf {
        self.dir.path().join("index")
    }

    fn ingest(&self) -> serde_json::Value {
        let out = objseek(&[
            "ingest",
            "--images",
            s(&self.images()),
            "--annotations",
            s(&self.annotations()),
            "--encoder",
            "toy",
            "--index",
            s(&self.index()),
            "--dim",
            "64",
            "--with-full-image",
            "--workers",
            "2",
        ]);
        serde_json::from_str(&ok(&out)).unwrap()
    }

    fn search(&self, class: &str, query: &str, k: usize, format: &str) -> Output {
        let k = k.to_string();
        objseek(&[
            "search", "--index", s(&self.index()), "--class", class, "--query", query, "--k", &k, "--format", format,
        ])
    }
}

#[test]
fn second_ingest_adds_nothing() {
    let sc = Scenes::new(6);
    let first = sc.ingest();
    assert_eq!(first["added_images"], 6);
    let second = sc.ingest();
    assert_eq!(second["added_images"], 0);
    assert_eq!(second["skipped_duplicates"], 6);
    assert_eq!(second["processed_images"], 0);

    sc.add("late", 999);
    let third = sc.ingest();
    assert_eq!(third["added_images"], 1);
    assert_eq!(Index::load(&sc.index()).unwrap().image_count(), 7);
}

#[test]
fn unknown_class_exits_with_query_error() {
    let sc = Scenes::new(2);
    sc.ingest();
    let out = sc.search("animal", "a dog", 10, "table");
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for class in ["person", "car", "traffic sign", "bicycle"] {
        assert!(err.contains(class), "{err}");
    }
    assert!(out.stdout.is_empty());
}

#[test]
fn io_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = objseek(&["search", "--index", s(&missing), "--class", "car", "--query", "red"]);
    assert_eq!(out.status.code(), Some(1));
}

#[tokio::test]
async fn json_output_round_trips_into_the_service_schema() {
    let sc = Scenes::new(10);
    sc.ingest();
    let stdout = ok(&sc.search("car", "red car", 20, "json"));
    let hits: Vec<SearchHit> = serde_json::from_str(&stdout).unwrap();
    assert!(!hits.is_empty());
    assert_eq!(serde_json::to_string(&hits).unwrap(), stdout.trim_end());

    let index = Index::load(&sc.index()).unwrap();
    let encoder: Arc<dyn Encoder> = Arc::new(ToyEncoder::new(index.dim()).unwrap());
    let state = AppState::new(index, Some(encoder), ServiceOptions::new(sc.dir.path().join("j.jsonl"))).unwrap();
    let app = objseek_service::router(Arc::new(state), None);
    let req = Request::post("/v1/search")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(r#"{"class":"car","text":"red car","k":20,"mode":"object"}"#))
        .unwrap();
    let body = app.oneshot(req).await.unwrap().into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&body[..], stdout.trim_end().as_bytes());
}

#[test]
fn table_and_csv_agree_with_json() {
    let sc = Scenes::new(8);
    sc.ingest();
    let hits: Vec<SearchHit> = serde_json::from_str(&ok(&sc.search("person", "blue", 50, "json"))).unwrap();
    let csv = ok(&sc.search("person", "blue", 50, "csv"));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("rank,image_id,score,best_object_index,x,y,width,height"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), hits.len());
    for (row, hit) in rows.iter().zip(&hits) {
        assert_eq!(row[1], hit.image_id.as_str());
        assert_eq!(row[2].parse::<f32>().unwrap(), hit.score);
        assert_eq!(row[3].parse::<u32>().ok(), hit.best_object_index);
    }
    let table = ok(&sc.search("person", "blue", 50, "table"));
    assert_eq!(table.lines().count(), hits.len() + 1);
    assert!(!table.contains('\x1b'));
}

#[test]
fn police_man_ranks_planted_objects_first() {
    let dir = tempfile::tempdir().unwrap();
    let encoder = ToyEncoder::new(512).unwrap();
    let cfg = SynthConfig {
        images: 400,
        planted: 5,
        ..SynthConfig::default()
    };
    let corpus = SyntheticCorpus::generate(&cfg, &encoder).unwrap();
    let mut index = corpus.empty_index(&encoder).unwrap();
    index.ingest(corpus.batch.clone()).unwrap();
    let path = dir.path().join("idx");
    index.persist(&path).unwrap();

    let out = objseek(&[
        "search", "--index", s(&path), "--class", "person", "--query", "police man", "--k", "100", "--format", "json",
    ]);
    let hits: Vec<SearchHit> = serde_json::from_str(&ok(&out)).unwrap();
    assert_eq!(hits.len(), 100);
    assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
    let mut top: Vec<_> = hits[..5].iter().map(|h| h.image_id.clone()).collect();
    top.sort();
    assert_eq!(top, corpus.planted);
}

#[test]
fn eval_curve_from_journal() {
    let sc = Scenes::new(12);
    sc.ingest();
    let (class, hits) = ["car", "person", "bus", "truck", "rider", "bicycle", "motorcycle", "traffic sign"]
        .iter()
        .find_map(|c| {
            let hits: Vec<SearchHit> = serde_json::from_str(&ok(&sc.search(c, "white", 10, "json"))).unwrap();
            (hits.len() >= 3).then(|| (c.to_string(), hits))
        })
        .expect("a class with three images");

    let journal_path = sc.dir.path().join("judgments.jsonl");
    let record = QueryRecord::new(class, "white", SearchMode::ObjectLevel);
    QueryLog::open(&QueryLog::beside(&journal_path))
        .unwrap()
        .record(record.clone())
        .unwrap();
    let mut journal = Journal::open(&journal_path).unwrap();
    for (hit, v) in hits.iter().zip([Verdict::TruePositive, Verdict::FalsePositive, Verdict::TruePositive]) {
        journal
            .append(Judgment::new(&record.query_id, hit.image_id.clone(), v, "t", "2024-01-01T00:00:00Z"))
            .unwrap();
    }
    let out = objseek(&[
        "eval", "curve", "--index", s(&sc.index()), "--judgments", s(&journal_path), "--query-id", &record.query_id,
        "--n", "4",
    ]);
    assert_eq!(ok(&out), "rank,cumulative_tp\n1,1\n2,1\n3,2\n4,2\n");

    let out = objseek(&[
        "eval", "curve", "--index", s(&sc.index()), "--judgments", s(&journal_path), "--query-id", "0123",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_classify_reports_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let toy = ToyEncoder::new(128).unwrap();
    let labels = ["sedan", "pickup", "convertible", "minivan"];
    let mut file = EmbeddingFile::new(128);
    let mut truth = String::new();
    for round in 0..3 {
        for l in labels {
            let v = toy.encode_text(l).unwrap();
            file.push(format!("{l}_{round}"), v.values().to_vec()).unwrap();
            truth.push_str(l);
            truth.push('\n');
        }
    }
    let emb = dir.path().join("items.sole");
    file.write(&emb).unwrap();
    let labels_path = dir.path().join("labels.txt");
    std::fs::write(&labels_path, labels.join("\n")).unwrap();
    let truth_path = dir.path().join("truth.txt");
    std::fs::write(&truth_path, truth).unwrap();

    let out = objseek(&[
        "eval", "classify", "--embeddings", s(&emb), "--labels", s(&labels_path), "--template", "{label}", "--truth",
        s(&truth_path),
    ]);
    let v: serde_json::Value = serde_json::from_str(&ok(&out)).unwrap();
    assert_eq!(v["accuracy"], 1.0);
    assert_eq!(v["items"], 12);
    assert_eq!(v["assignments"][5]["label"], "pickup");

    let out = objseek(&[
        "eval", "classify", "--embeddings", s(&emb), "--labels", s(&labels_path), "--template", "no placeholder",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn serve_answers_health_checks() {
    let sc = Scenes::new(3);
    sc.ingest();
    let mut child = Command::new(env!("CARGO_BIN_EXE_objseek"))
        .args(["serve", "--index", s(&sc.index()), "--port", "0", "--judgments"])
        .arg(sc.dir.path().join("j.jsonl"))
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stderr = BufReader::new(child.stderr.take().unwrap());
    let mut line = String::new();
    stderr.read_line(&mut line).unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on http://")
        .and_then(|a| a.strip_suffix("/v1"))
        .unwrap_or_else(|| panic!("unexpected banner {line:?}"))
        .to_owned();

    let mut stream = TcpStream::connect(&addr).unwrap();
    write!(stream, "GET /v1/healthz HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut resp = String::new();
    stream.read_to_string(&mut resp).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.contains(r#""encoder_id":"toy-v1""#), "{resp}");
    assert!(resp.contains(r#""status":"ok""#), "{resp}");
}
