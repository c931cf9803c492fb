use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fewshot_ie::backend::{CompletionBackend, CompletionRequest, OracleBackend, API_KEY_ENV};
use fewshot_ie::corpus::{load_split, SplitPart};
use fewshot_ie::prompt::load_grid;
use fewshot_ie::Task;
use fewshot_ie_cli::{dispatch_with_env, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};
use serde_json::{json, Value};
use tempfile::TempDir;

const TRAIN: &[(&str, &[&str])] = &[
    ("Aspirin relieved the pain.", &["Aspirin"]),
    ("Patients took ibuprofen daily.", &["ibuprofen"]),
    ("No drug was given to the control group.", &[]),
    ("Warfarin and heparin thin the blood.", &["Warfarin", "heparin"]),
    ("The nurse checked the chart.", &[]),
    ("Morphine dosage was reduced.", &["Morphine"]),
    ("Caffeine raises alertness.", &["Caffeine"]),
    ("Lithium levels were monitored.", &["Lithium"]),
];
const DEV: &[(&str, &[&str])] = &[("Insulin was injected.", &["Insulin"]), ("The ward was quiet.", &[])];
const TEST: &[(&str, &[&str])] = &[
    ("Codeine caused nausea.", &["Codeine"]),
    ("The weather improved.", &[]),
    ("Naloxone reversed the overdose of fentanyl.", &["Naloxone", "fentanyl"]),
    ("Metformin lowers glucose.", &["Metformin"]),
];

const GRID: &str = r#"
task = "ner"
dataset = "tiny-chem"
shots = [2, 3]

[alternatives]
task_command = ["List the chemicals in the sentence."]
phrase_intro = ["Sentence:", "Text:"]
recovery_message = ["Chemicals:"]
separator = ["; "]
"#;

struct Fixture {
    _tmp: TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = TempDir::new().unwrap();
        let root = tmp.path().to_path_buf();
        let data = root.join("data");
        fs::create_dir_all(&data).unwrap();
        fs::write(
            data.join("manifest.json"),
            json!({"name": "tiny-chem", "task": "ner", "entity_type": "Chemical"}).to_string(),
        )
        .unwrap();
        for (part, rows) in [("train", TRAIN), ("dev", DEV), ("test", TEST)] {
            let body: String = rows
                .iter()
                .enumerate()
                .map(|(i, (text, ents))| format!("{}\n", json!({"id": format!("{part}-{i}"), "text": text, "entities": ents})))
                .collect();
            fs::write(data.join(format!("{part}.jsonl")), body).unwrap();
        }
        fs::write(root.join("grid.toml"), GRID).unwrap();
        Self { _tmp: tmp, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn base(&self, out: &str) -> Vec<String> {
        vec![
            "--dataset".into(),
            s(&self.path("data")),
            "--grid".into(),
            s(&self.path("grid.toml")),
            "--seeds".into(),
            "1,2".into(),
            "--pool-size".into(),
            "6".into(),
            "--threads".into(),
            "2".into(),
            "--out".into(),
            s(&self.path(out)),
        ]
    }

    fn run(&self, cmd: &[&str], out: &str, extra: &[&str], env: &BTreeMap<String, String>) -> i32 {
        let mut argv = vec!["fewshot-ie".to_string()];
        argv.extend(cmd.iter().map(|c| c.to_string()));
        argv.extend(self.base(out));
        argv.extend(extra.iter().map(|c| c.to_string()));
        dispatch_with_env(argv, env)
    }
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn no_env() -> BTreeMap<String, String> {
    BTreeMap::new()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

#[test]
fn oracle_extract_then_evaluate_scores_perfectly() {
    let f = Fixture::new();
    let oracle = ["--backend", "oracle"];
    assert_eq!(f.run(&["extract"], "run", &oracle, &no_env()), EXIT_OK);
    assert!(f.path("run/predictions-seed1.jsonl").exists());
    assert!(f.path("run/predictions-seed2.jsonl").exists());
    assert!(f.path("run/selection-seed1.json").exists());
    assert_eq!(f.run(&["evaluate"], "run", &oracle, &no_env()), EXIT_OK);
    let eval = read_json(&f.path("run/evaluation.json"));
    for m in eval["per_seed"].as_array().unwrap() {
        assert_eq!(m["metrics"]["f1"].as_f64().unwrap(), 1.0, "{m}");
    }
    let table = fs::read_to_string(f.path("run/evaluation.txt")).unwrap();
    assert!(table.contains('±'), "{table}");
    let manifest = read_json(&f.path("run/extract-manifest.json"));
    assert!(manifest["dataset_digest"].is_string());
    assert!(manifest["grid_digest"].is_string());
}

#[test]
fn stats_and_sample_write_artifacts() {
    let f = Fixture::new();
    assert_eq!(f.run(&["stats"], "run", &[], &no_env()), EXIT_OK);
    let stats = read_json(&f.path("run/stats.json"));
    assert_eq!(stats["stats"]["parts"][0]["examples"], 8);
    assert_eq!(f.run(&["sample"], "run", &[], &no_env()), EXIT_OK);
    let pool = fs::read_to_string(f.path("run/pool-seed1.jsonl")).unwrap();
    assert_eq!(pool.lines().count(), 6);
    let test = fs::read_to_string(f.path("run/test-sample.jsonl")).unwrap();
    assert_eq!(test.lines().count(), TEST.len());
}

#[test]
fn selection_reads_only_the_training_split() {
    let f = Fixture::new();
    assert_eq!(f.run(&["select-config"], "run", &["--backend", "oracle"], &no_env()), EXIT_OK);
    let manifest = read_json(&f.path("run/select-config-manifest.json"));
    assert_eq!(manifest["split_access"], json!(["train"]));
    let report = read_json(&f.path("run/selection-seed1.json"));
    assert!(report["chosen_config"].is_string());
}

#[test]
fn exit_codes_follow_the_failure_kind() {
    let f = Fixture::new();
    let argv = |extra: &[&str]| {
        let mut v = vec!["fewshot-ie".to_string()];
        v.extend(extra.iter().map(|x| x.to_string()));
        v
    };
    assert_eq!(dispatch_with_env(argv(&["frobnicate"]), &no_env()), EXIT_USAGE);
    assert_eq!(dispatch_with_env(argv(&["--version"]), &no_env()), EXIT_OK);

    let missing = s(&f.path("no-such-cache"));
    assert_eq!(
        f.run(&["extract"], "run", &["--backend", "replay", "--cache-dir", &missing], &no_env()),
        EXIT_USAGE
    );
    assert_eq!(f.run(&["extract"], "run", &["--backend", "live"], &no_env()), EXIT_USAGE);
    assert_eq!(f.run(&["extract"], "run", &[], &no_env()), EXIT_USAGE, "no backend chosen");
    assert_eq!(f.run(&["evaluate"], "empty", &[], &no_env()), EXIT_FAILURE);

    fs::write(f.path("bad.toml"), "seeds = [1]\nunknown_key = 3\n").unwrap();
    let bad = s(&f.path("bad.toml"));
    assert_eq!(f.run(&["stats"], "run", &["--config", &bad], &no_env()), EXIT_USAGE);
}

#[test]
fn config_file_env_and_flags_layer_in_order() {
    let f = Fixture::new();
    fs::write(f.path("cfg.toml"), "cap = 1\ntest_seed = 4\n").unwrap();
    let cfg = s(&f.path("cfg.toml"));
    let env: BTreeMap<String, String> = [("FEWSHOT_IE_CAP".to_string(), "2".to_string())].into();
    assert_eq!(f.run(&["sample"], "a", &["--config", &cfg], &env), EXIT_OK);
    let m = read_json(&f.path("a/sample-manifest.json"));
    assert_eq!(m["config"]["cap"], 2);
    assert_eq!(m["config"]["test_seed"], 4);
    assert_eq!(f.run(&["sample"], "b", &["--config", &cfg, "--cap", "3"], &env), EXIT_OK);
    assert_eq!(read_json(&f.path("b/sample-manifest.json"))["config"]["cap"], 3);
}

fn handle(stream: std::net::TcpStream, oracle: &OracleBackend) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut len = 0;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            len = v.trim().parse().unwrap();
        }
    }
    let mut buf = vec![0; len];
    reader.read_exact(&mut buf).unwrap();
    let body: Value = serde_json::from_slice(&buf).unwrap();
    let mut req = CompletionRequest::new(body["model"].as_str().unwrap(), body["prompt"].as_str().unwrap());
    req.max_tokens = body["max_tokens"].as_u64().unwrap() as usize;
    req.want_logprobs = body["logprobs"].as_u64().unwrap_or(0) as u8;
    if let Some(stop) = body["stop"].as_array() {
        req.stop = stop.iter().map(|x| x.as_str().unwrap().to_string()).collect();
    }
    let resp = oracle.complete(&req).unwrap();
    let reply = json!({"choices": [{
        "text": resp.text,
        "logprobs": {
            "tokens": resp.tokens,
            "token_logprobs": resp.token_logprobs,
            "top_logprobs": resp.top_logprobs,
        }
    }]})
    .to_string();
    let mut stream = stream;
    let _ = stream.write_all(
        format!(
            "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply}",
            reply.len()
        )
        .as_bytes(),
    );
}

/// An OpenAI-style completions endpoint that answers with gold labels.
fn oracle_server(f: &Fixture) -> String {
    let split = load_split(&f.path("data"), Task::Ner).unwrap();
    let grid = load_grid(&f.path("grid.toml")).unwrap();
    let examples: Vec<_> = SplitPart::ALL.iter().flat_map(|p| split.part(*p).to_vec()).collect();
    let oracle = Arc::new(OracleBackend::new(&grid.templates(), examples.iter()).unwrap());
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
    std::thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let oracle = oracle.clone();
            std::thread::spawn(move || handle(stream, &oracle));
        }
    });
    url
}

#[test]
fn recorded_runs_replay_byte_for_byte() {
    let f = Fixture::new();
    let url = oracle_server(&f);
    let cache = s(&f.path("cache"));
    let env: BTreeMap<String, String> = [(API_KEY_ENV.to_string(), "test-key".to_string())].into();
    let rec = ["--backend", "record", "--cache-dir", &cache, "--endpoint", &url];
    assert_eq!(f.run(&["extract"], "rec", &rec, &env), EXIT_OK);
    let recorded = fs::read_to_string(f.path("rec/predictions-seed1.jsonl")).unwrap();
    let m = read_json(&f.path("rec/extract-manifest.json"));
    assert!(m["cache_entries"].as_u64().unwrap() > 0);
    assert_eq!(m["config"]["api_key_set"], true);
    assert!(!fs::read_to_string(f.path("rec/extract-manifest.json")).unwrap().contains("test-key"));

    // Replay needs neither the key nor the server.
    let replay = ["--backend", "replay", "--cache-dir", &cache];
    for out in ["r1", "r2"] {
        assert_eq!(f.run(&["extract"], out, &replay, &no_env()), EXIT_OK);
        assert_eq!(f.run(&["evaluate"], out, &replay, &no_env()), EXIT_OK);
    }
    for name in ["predictions-seed1.jsonl", "predictions-seed2.jsonl", "evaluation.json", "selection-seed1.json"] {
        let a = fs::read(f.path(&format!("r1/{name}"))).unwrap();
        let b = fs::read(f.path(&format!("r2/{name}"))).unwrap();
        assert_eq!(a, b, "{name} differs between replays");
    }
    assert_eq!(fs::read_to_string(f.path("r1/predictions-seed1.jsonl")).unwrap(), recorded);
    let m1 = read_json(&f.path("r1/extract-manifest.json"));
    let m2 = read_json(&f.path("r2/extract-manifest.json"));
    assert_eq!(m1["cache_digest"], m2["cache_digest"]);
    assert_eq!(m1["cache_digest"], m["cache_digest"]);

    // Entries used by neither run are dropped; used ones survive.
    assert_eq!(dispatch_with_env(["fewshot-ie", "cache", "ls", "--cache-dir", &cache], &no_env()), EXIT_OK);
    assert_eq!(dispatch_with_env(["fewshot-ie", "cache", "gc", "--cache-dir", &cache], &no_env()), EXIT_USAGE);
    let r1 = s(&f.path("r1"));
    assert_eq!(
        dispatch_with_env(["fewshot-ie", "cache", "gc", "--cache-dir", &cache, "--keep-run", &r1], &no_env()),
        EXIT_OK
    );
    assert_eq!(f.run(&["extract"], "r3", &replay, &no_env()), EXIT_OK);
    assert_eq!(fs::read_to_string(f.path("r3/predictions-seed1.jsonl")).unwrap(), recorded);
}

#[test]
fn replay_misses_fail_without_a_network_call() {
    let f = Fixture::new();
    fs::create_dir_all(f.path("cache")).unwrap();
    let cache = s(&f.path("cache"));
    let code = f.run(
        &["extract"],
        "run",
        &["--backend", "replay", "--cache-dir", &cache, "--config-id", "c1"],
        &no_env(),
    );
    assert_eq!(code, EXIT_FAILURE);
}

const KB_SPEC: &str = r#"
domain = "pharmacology"
relation_labels = ["interacts"]

[[ner]]
entity_type = "Chemical"
dataset = "DATA"
grid = "GRID"
config_id = "c1"
"#;

#[test]
fn kb_commands_round_trip() {
    let f = Fixture::new();
    let spec = KB_SPEC
        .replace("DATA", &s(&f.path("data")).replace('\\', "/"))
        .replace("GRID", &s(&f.path("grid.toml")).replace('\\', "/"));
    fs::write(f.path("kb.toml"), spec).unwrap();
    let docs = f.path("docs");
    fs::create_dir_all(&docs).unwrap();
    fs::write(docs.join("a.txt"), "Aspirin relieved the pain.\nMorphine dosage was reduced.\n").unwrap();
    fs::write(docs.join("b.txt"), "Aspirin relieved the pain.\n").unwrap();
    let kb = s(&f.path("kb"));
    let build = [
        "--documents",
        &s(&docs),
        "--spec",
        &s(&f.path("kb.toml")),
        "--kb-dir",
        &kb,
        "--run-id",
        "r1",
        "--timestamp",
        "2026-01-01T00:00:00Z",
        "--backend",
        "oracle",
    ];
    assert_eq!(f.run(&["kb", "build"], "run", &build, &no_env()), EXIT_OK);
    let report = read_json(&f.path("run/kb-build.json"));
    assert_eq!(report["sentences"], 3);
    assert_eq!(report["failures"], json!([]));

    assert_eq!(f.run(&["kb", "verify"], "run", &["--kb-dir", &kb], &no_env()), EXIT_OK);
    assert_eq!(read_json(&f.path("run/kb-verify.json"))["promoted"], 1);

    assert_eq!(f.run(&["kb", "query"], "run", &["--kb-dir", &kb, "--type", "Chemical"], &no_env()), EXIT_OK);
    let q = read_json(&f.path("run/kb-query.json"));
    let entities = q["result"]["entities"].as_array().expect("entity result");
    assert_eq!(entities.len(), 2, "{q}");
    assert_eq!(f.run(&["kb", "query"], "run", &["--kb-dir", &kb], &no_env()), EXIT_USAGE);

    let snap = s(&f.path("export.jsonl"));
    assert_eq!(f.run(&["kb", "export"], "run", &["--kb-dir", &kb, "--file", &snap], &no_env()), EXIT_OK);
    let kb2 = s(&f.path("kb2"));
    assert_eq!(f.run(&["kb", "import"], "run", &["--kb-dir", &kb2, "--file", &snap], &no_env()), EXIT_OK);
    let snap2 = s(&f.path("export2.jsonl"));
    assert_eq!(f.run(&["kb", "export"], "run", &["--kb-dir", &kb2, "--file", &snap2], &no_env()), EXIT_OK);
    assert_eq!(fs::read(&snap).unwrap(), fs::read(&snap2).unwrap());
    assert_ne!(f.run(&["kb", "import"], "run", &["--kb-dir", &kb2, "--file", &snap], &no_env()), EXIT_OK);
    assert_eq!(f.run(&["kb", "verify"], "run", &["--kb-dir", &s(&f.path("nokb"))], &no_env()), EXIT_USAGE);
}
