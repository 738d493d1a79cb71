use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gaterag::corpus::{write_corpus, write_queries, DocChunk, QueryItem};
use gaterag::generate::{render_prompt, script_to_jsonl, ScriptEntry, Scripted, TemplateKind};
use serde_json::Value;

fn gaterag(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gaterag"));
    cmd.args(args);
    for (k, _) in std::env::vars() {
        if k.starts_with("GATERAG_") {
            cmd.env_remove(k);
        }
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

const QUESTIONS: [(&str, &str, f64); 4] = [
    ("Which river crosses the old town?", "the Vltava", 0.0002),
    ("What colour is the lighthouse?", "red", 0.4),
    ("Who founded the orchard?", "the monks", 0.003),
    ("When did the glacier retreat?", "1850", 0.02),
];

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        let docs: Vec<DocChunk> = [
            ("river", "The Vltava river crosses the old town under nine bridges."),
            ("lighthouse", "The lighthouse on the cape is painted red and white."),
            ("orchard", "Monks founded the orchard beside the abbey walls."),
            ("glacier", "The valley glacier began to retreat around 1850."),
            ("harbor", "Fishing boats crowd the harbor every spring."),
        ]
        .iter()
        .map(|(id, text)| DocChunk {
            id: id.to_string(),
            title: String::new(),
            text: text.to_string(),
        })
        .collect();
        write_corpus(&ws.path("corpus.jsonl"), &docs).unwrap();

        let golds = ["river", "lighthouse", "orchard", "glacier"];
        let queries: Vec<QueryItem> = QUESTIONS
            .iter()
            .zip(golds)
            .enumerate()
            .map(|(i, ((q, a, _), g))| QueryItem {
                id: format!("q{i}"),
                question: q.to_string(),
                gold_answers: vec![a.to_string()],
                gold_doc_ids: Some(vec![g.to_string()]),
            })
            .collect();
        write_queries(&ws.path("queries.jsonl"), &queries).unwrap();

        let mut script = Vec::new();
        for (q, a, u) in QUESTIONS {
            let p = |k| render_prompt(k, q, None).unwrap();
            script.push(ScriptEntry::exact(
                p(TemplateKind::AnswerNoRetrieval),
                Scripted::new(if u < 0.001 { a } else { "unsure" }, &[-u]),
            ));
            script.push(ScriptEntry::exact(
                p(TemplateKind::PseudoContext),
                Scripted::new(format!("A passage answering: {q}"), &[]),
            ));
            script.push(ScriptEntry::contains(format!("{q}\n"), Scripted::new(a, &[-0.1])));
        }
        std::fs::write(ws.path("mock.jsonl"), script_to_jsonl(&script)).unwrap();
        std::fs::write(
            ws.path("gaterag.toml"),
            "mode = \"dtr\"\nindex_dir = \"idx\"\nwidth = 2\n\n[generator]\nkind = \"mock\"\nscript = \"mock.jsonl\"\n",
        )
        .unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        s(&self.path(name)).to_string()
    }

    fn build_index(&self) {
        let o = gaterag(&["index", "--corpus", &self.p("corpus.jsonl"), "--out", &self.p("idx")], &[]);
        assert!(o.status.success(), "{}", stderr(&o));
    }

    fn run(&self, out: &str, extra: &[&str], env: &[(&str, &str)]) -> Output {
        let mut args = vec![
            "run",
            "--queries",
            "QUERIES",
            "--config",
            "CONFIG",
            "--out",
            out,
        ];
        let (q, c) = (self.p("queries.jsonl"), self.p("gaterag.toml"));
        args[2] = &q;
        args[4] = &c;
        args.extend_from_slice(extra);
        gaterag(&args, env)
    }
}

fn read_traces(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn index_writes_snapshot() {
    let ws = Workspace::new();
    ws.build_index();
    for f in ["index.bin", "corpus.jsonl", "manifest.json"] {
        assert!(ws.path("idx").join(f).is_file(), "{f}");
    }
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(ws.path("idx/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["docs"], 5);
    assert_eq!(manifest["embedder"], "hashing-256");
}

#[test]
fn run_is_deterministic() {
    let ws = Workspace::new();
    ws.build_index();
    let a = ws.run(&ws.p("a.jsonl"), &[], &[]);
    let b = ws.run(&ws.p("b.jsonl"), &[], &[]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(b.status.success(), "{}", stderr(&b));
    let bytes_a = std::fs::read(ws.path("a.jsonl")).unwrap();
    assert_eq!(bytes_a, std::fs::read(ws.path("b.jsonl")).unwrap());

    let traces = read_traces(&ws.path("a.jsonl"));
    let triggered: Vec<bool> = traces.iter().map(|t| t["triggered"].as_bool().unwrap()).collect();
    assert_eq!(triggered, [false, true, true, true]);
    assert_eq!(traces[0]["final_answer"], "the Vltava");
    assert_eq!(traces[1]["final_answer"], "red");
}

#[test]
fn flags_override_env_override_file() {
    let ws = Workspace::new();
    ws.build_index();
    let out = ws.p("t.jsonl");
    let env = [("GATERAG_MODE", "no_retrieval")];
    assert!(ws.run(&out, &[], &env).status.success());
    assert!(read_traces(&ws.path("t.jsonl")).iter().all(|t| t["mode"] == "no_retrieval"));
    assert!(ws.run(&out, &["--mode", "standard_rag"], &env).status.success());
    assert!(read_traces(&ws.path("t.jsonl")).iter().all(|t| t["mode"] == "standard_rag"));
    // u_threshold from the environment, beaten by the flag.
    let env = [("GATERAG_U_THRESHOLD", "0.5")];
    assert!(ws.run(&out, &[], &env).status.success());
    assert!(read_traces(&ws.path("t.jsonl")).iter().all(|t| t["triggered"] == false));
    assert!(ws.run(&out, &["--u-threshold", "0.01"], &env).status.success());
    let n = read_traces(&ws.path("t.jsonl")).iter().filter(|t| t["triggered"] == true).count();
    assert_eq!(n, 2);
}

#[test]
fn unknown_mode_is_usage_error() {
    let ws = Workspace::new();
    ws.build_index();
    let o = ws.run(&ws.p("t.jsonl"), &["--mode", "turbo"], &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error: usage: "), "{err}");
    assert!(err.contains("dtr_no_ugt") && err.contains("fixed_mix"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
    assert!(!ws.path("t.jsonl").exists());
}

#[test]
fn networked_config_without_endpoint_is_config_error() {
    let ws = Workspace::new();
    ws.build_index();
    std::fs::write(ws.path("gaterag.toml"), "index_dir = \"idx\"\n[generator]\nkind = \"http\"\nmodel = \"m\"\n").unwrap();
    let o = ws.run(&ws.p("t.jsonl"), &[], &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error: config: "));
}

#[test]
fn missing_input_is_data_error_without_output() {
    let ws = Workspace::new();
    ws.build_index();
    std::fs::remove_file(ws.path("queries.jsonl")).unwrap();
    let o = ws.run(&ws.p("t.jsonl"), &[], &[]);
    assert_eq!(o.status.code(), Some(4));
    assert!(!ws.path("t.jsonl").exists());
}

#[test]
fn corrupt_index_leaves_no_output() {
    let ws = Workspace::new();
    ws.build_index();
    std::fs::write(ws.path("idx/index.bin"), b"GRIX\x01\x00").unwrap();
    let o = ws.run(&ws.p("t.jsonl"), &[], &[]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(!ws.path("t.jsonl").exists());
}

#[test]
fn embedder_mismatch_is_config_error() {
    let ws = Workspace::new();
    ws.build_index();
    let mut cfg = std::fs::read_to_string(ws.path("gaterag.toml")).unwrap();
    cfg.push_str("\n[embedder]\ndim = 64\n");
    std::fs::write(ws.path("gaterag.toml"), cfg).unwrap();
    let o = ws.run(&ws.p("t.jsonl"), &[], &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn backend_failures_keep_complete_traces() {
    let ws = Workspace::new();
    ws.build_index();
    std::fs::write(ws.path("mock.jsonl"), "").unwrap();
    let o = ws.run(&ws.p("t.jsonl"), &[], &[]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    let traces = read_traces(&ws.path("t.jsonl"));
    assert_eq!(traces.len(), 4);
    assert!(traces.iter().all(|t| t["error"]["category"] == "backend"));
}

#[test]
fn dry_run_contacts_no_backend() {
    let ws = Workspace::new();
    ws.build_index();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
    std::fs::write(
        ws.path("gaterag.toml"),
        format!("index_dir = \"idx\"\n[generator]\nkind = \"http\"\nendpoint = \"{url}\"\nmodel = \"m\"\n"),
    )
    .unwrap();
    let o = ws.run(&ws.p("t.jsonl"), &["--dry-run"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let plan = String::from_utf8_lossy(&o.stdout);
    assert!(plan.contains("plan: run") && plan.contains(&url), "{plan}");
    let q = ws.p("queries.jsonl");
    let c = ws.p("gaterag.toml");
    let o = gaterag(
        &["--dry-run", "sweep", "--queries", &q, "--config", &c, "--thresholds", "0.001,0.01", "--out", &ws.p("s.json")],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!ws.path("t.jsonl").exists() && !ws.path("s.json").exists());
    match listener.accept() {
        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {}
        other => panic!("backend was contacted: {other:?}"),
    }
}

#[test]
fn eval_and_sweep_reports() {
    let ws = Workspace::new();
    ws.build_index();
    assert!(ws.run(&ws.p("t.jsonl"), &[], &[]).status.success());
    let o = gaterag(
        &[
            "eval", "--traces", &ws.p("t.jsonl"), "--queries", &ws.p("queries.jsonl"),
            "--out", &ws.p("report.json"), "--tsv", &ws.p("report.tsv"),
        ],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(ws.path("report.json")).unwrap()).unwrap();
    assert_eq!(report["summary"]["avg_em"], 100.0);
    assert_eq!(report["summary"]["trigger_ratio"], 75.0);
    assert_eq!(report["records"].as_array().unwrap().len(), 4);
    assert!(std::fs::read_to_string(ws.path("report.tsv")).unwrap().starts_with("mode\t"));

    let o = gaterag(
        &[
            "sweep", "--queries", &ws.p("queries.jsonl"), "--config", &ws.p("gaterag.toml"),
            "--thresholds", "0.001,0.005,0.01", "--out", &ws.p("sweep.json"),
        ],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let sweep: Value = serde_json::from_str(&std::fs::read_to_string(ws.path("sweep.json")).unwrap()).unwrap();
    let ratios: Vec<f64> = sweep["per_threshold"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["trigger_ratio"].as_f64().unwrap())
        .collect();
    assert_eq!(ratios, [75.0, 50.0, 50.0]);
    assert_eq!(sweep["baseline"]["avg_em"], 25.0);
}

#[test]
fn gold_rank_histogram() {
    let ws = Workspace::new();
    ws.build_index();
    let o = gaterag(
        &["gold-rank", "--queries", &ws.p("queries.jsonl"), "--index", &ws.p("idx"), "--out", &ws.p("ranks.json")],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(ws.path("ranks.json")).unwrap()).unwrap();
    let total = ["rank_1_3", "rank_4_10", "rank_11_20", "rank_over_20"]
        .iter()
        .map(|k| r[k].as_u64().unwrap())
        .sum::<u64>();
    assert_eq!(total, 4);
    assert_eq!(r["skipped"], 0);
}
