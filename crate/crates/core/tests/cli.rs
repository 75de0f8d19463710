use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use comve_core::backends::{serve, BigramGenerator, Generator, ServedModels, VocabDistribution};
use comve_core::Error;
use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_comve");

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        ws.write(
            "corpus.txt",
            "he drinks milk .\nshe eats bread .\nan elephant is too big for a fridge .\nbecause it is too big .\n",
        );
        ws.write(
            "a.csv",
            "id,sent0,sent1\n1,He drinks milk,He drinks qqstone\n2,She eats zzrock,She eats bread\n",
        );
        ws.write("a_ans.csv", "1,1\n2,0\n");
        ws.write(
            "c.csv",
            "id,statement\n1,An elephant is in the fridge\n2,He drinks boom\n3,She eats a fridge\n",
        );
        ws.write(
            "c_refs.csv",
            "1,An elephant is too big for a fridge.\n2,You cannot drink that.\n3,A fridge is too big to eat.\n",
        );
        ws
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_env(args, None)
    }

    fn run_env(&self, args: &[&str], out_env: Option<&str>) -> Output {
        let mut cmd = Command::new(BIN);
        cmd.args(args).current_dir(self.path()).env_remove("COMVE_OUT");
        if let Some(o) = out_env {
            cmd.env("COMVE_OUT", o);
        }
        cmd.output().unwrap()
    }

    fn entries(&self, sub: &str) -> Vec<PathBuf> {
        match std::fs::read_dir(self.path().join(sub)) {
            Ok(rd) => rd.map(|e| e.unwrap().path()).collect(),
            Err(_) => Vec::new(),
        }
    }
}

fn ok(out: &Output) -> PathBuf {
    assert_eq!(
        out.status.code(),
        Some(0),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    PathBuf::from(String::from_utf8_lossy(&out.stdout).trim())
}

fn metrics(run: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap()
}

#[test]
fn validate_a_writes_a_complete_run_directory() {
    let ws = Workspace::new();
    let run = ok(&ws.run(&[
        "validate-a",
        "--method",
        "mlm",
        "--backend",
        "count:corpus.txt",
        "--data",
        "a.csv",
        "--answers",
        "a_ans.csv",
        "--out",
        "runs",
    ]));
    assert!(run.starts_with(ws.path().join("runs")));
    assert!(run.file_name().unwrap().to_str().unwrap().starts_with("validate-a-"));
    for f in ["config.snapshot", "log.txt", "predictions.csv", "metrics.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert_eq!(
        std::fs::read_to_string(run.join("predictions.csv")).unwrap(),
        "id,label\n1,1\n2,0\n"
    );
    let m = metrics(&run);
    assert_eq!(m["report"], json!({"correct": 2, "total": 2, "accuracy": 1.0}));
    assert_eq!(m["failures"], json!([]));
}

#[test]
fn usage_errors_exit_2_without_creating_a_run() {
    let ws = Workspace::new();
    let cases: [&[&str]; 5] = [
        &[
            "validate-a",
            "--backend",
            "count:corpus.txt",
            "--data",
            "missing.csv",
            "--out",
            "runs",
        ],
        &[
            "validate-a",
            "--method",
            "identity",
            "--backend",
            "count:corpus.txt",
            "--data",
            "a.csv",
            "--out",
            "runs",
        ],
        &[
            "validate-a",
            "--backend",
            "count:nowhere.txt",
            "--data",
            "a.csv",
            "--out",
            "runs",
        ],
        &[
            "train",
            "--subtask",
            "A",
            "--method",
            "mc",
            "--data",
            "a.csv",
            "--answers",
            "a_ans.csv",
            "--warmup-steps",
            "9999",
            "--out",
            "runs",
        ],
        &["no-such-command"],
    ];
    for args in cases {
        let out = ws.run(args);
        assert_eq!(
            out.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(!out.stderr.is_empty());
    }
    assert!(ws.entries("runs").is_empty());
}

#[test]
fn evaluate_rejects_mismatched_ids() {
    let ws = Workspace::new();
    ws.write("pred.csv", "id,label\n1,1\n3,0\n");
    let out = ws.run(&[
        "evaluate",
        "--subtask",
        "A",
        "--predictions",
        "pred.csv",
        "--gold",
        "a_ans.csv",
    ]);
    assert_ne!(out.status.code(), Some(0));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains('3') || err.contains('2'), "{err}");

    ws.write("pred.csv", "id,label\n2,0\n1,0\n");
    let out = ws.run(&[
        "evaluate",
        "--subtask",
        "A",
        "--predictions",
        "pred.csv",
        "--gold",
        "a_ans.csv",
    ]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report, json!({"correct": 1, "total": 2, "accuracy": 0.5}));
}

#[test]
fn evaluating_a_runs_predictions_reproduces_its_report() {
    let ws = Workspace::new();
    let base = ["--backend", "count:corpus.txt", "--out", "runs"];
    let a = ok(&ws.run(
        &[
            &[
                "validate-a",
                "--method",
                "mc",
                "--data",
                "a.csv",
                "--answers",
                "a_ans.csv",
            ],
            &base[..],
        ]
        .concat(),
    ));
    let c = ok(&ws.run(
        &[
            &[
                "generate-c",
                "--method",
                "lm",
                "--data",
                "c.csv",
                "--answers",
                "c_refs.csv",
            ],
            &base[..],
        ]
        .concat(),
    ));
    for (run, subtask, gold) in [(a, "A", "a_ans.csv"), (c, "C", "c_refs.csv")] {
        let preds = run.join("predictions.csv");
        let out = ws.run(&[
            "evaluate",
            "--subtask",
            subtask,
            "--predictions",
            preds.to_str().unwrap(),
            "--gold",
            gold,
        ]);
        let report: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(report, metrics(&run)["report"], "{subtask}");
    }
}

fn fake_run(ws: &Workspace, name: &str, subtask: &str, accuracy: f64) -> String {
    let dir = ws.path().join("fake").join(name);
    std::fs::create_dir_all(&dir).unwrap();
    let m = json!({
        "command": "validate-a",
        "subtask": subtask,
        "method": "mc",
        "examples": 50,
        "predicted": 50,
        "report": {"correct": (accuracy * 50.0).round() as usize, "total": 50, "accuracy": accuracy},
        "failures": [],
        "elapsed_seconds": 0.1,
        "version": "0.1.0"
    });
    std::fs::write(dir.join("metrics.json"), m.to_string()).unwrap();
    dir.to_str().unwrap().to_owned()
}

#[test]
fn compare_orders_by_headline_metric() {
    let ws = Workspace::new();
    let low = fake_run(&ws, "low", "A", 0.74);
    let high = fake_run(&ws, "high", "A", 0.96);
    let out = ws.run(&["compare", "--json", &low, &high]);
    ok(&out);
    let rows: Vec<Value> = serde_json::from_slice(&out.stdout).unwrap();
    let values: Vec<f64> = rows.iter().map(|r| r["value"].as_f64().unwrap()).collect();
    assert_eq!(values, [0.96, 0.74]);
    assert_eq!(rows[0]["metric"], "accuracy");

    let table = ws.run(&["compare", &low, &high]);
    let text = String::from_utf8_lossy(&table.stdout).into_owned();
    assert!(text.find("0.96").unwrap() < text.find("0.74").unwrap(), "{text}");

    let t1 = fake_run(&ws, "tie1", "A", 0.5);
    let t2 = fake_run(&ws, "tie2", "A", 0.5);
    for (first, second) in [(&t1, &t2), (&t2, &t1)] {
        let out = ws.run(&["compare", "--json", first, second]);
        let rows: Vec<Value> = serde_json::from_slice(&out.stdout).unwrap();
        assert!(rows[0]["run"]
            .as_str()
            .unwrap()
            .ends_with(Path::new(first).file_name().unwrap().to_str().unwrap()));
    }

    assert_eq!(ws.run(&["compare", &low]).status.code(), Some(2));
    assert_eq!(ws.run(&["compare"]).status.code(), Some(2));
    let other = fake_run(&ws, "b", "B", 0.9);
    assert_eq!(ws.run(&["compare", &low, &other]).status.code(), Some(2));
}

#[test]
fn flags_override_the_config_file() {
    let ws = Workspace::new();
    ws.write(
        "run.toml",
        "method = \"mc\"\nnormalization = \"perplexity\"\nbackend = \"count:corpus.txt\"\ndata = \"a.csv\"\nout = \"cfgruns\"\nseed = 3\n",
    );
    let run = ok(&ws.run(&["validate-a", "--config", "run.toml", "--method", "mlm", "--seed", "9"]));
    assert!(run.starts_with(ws.path().join("cfgruns")));
    let snap: toml::Value = toml::from_str(&std::fs::read_to_string(run.join("config.snapshot")).unwrap()).unwrap();
    assert_eq!(snap["method"].as_str(), Some("mlm"));
    assert_eq!(snap["normalization"].as_str(), Some("perplexity"));
    assert_eq!(snap["seed"].as_integer(), Some(9));
    assert_eq!(snap["decode"]["seed"].as_integer(), Some(9));

    // rerunning from the snapshot alone gives the same predictions
    let again = ok(&ws.run(&["validate-a", "--config", run.join("config.snapshot").to_str().unwrap()]));
    assert_ne!(run, again);
    assert_eq!(
        std::fs::read(run.join("predictions.csv")).unwrap(),
        std::fs::read(again.join("predictions.csv")).unwrap()
    );
}

#[test]
fn output_root_comes_from_the_environment() {
    let ws = Workspace::new();
    let args = ["generate-c", "--method", "identity", "--data", "c.csv"];
    let run = ok(&ws.run_env(&args, Some("envruns")));
    assert!(run.starts_with(ws.path().join("envruns")));
    let run = ok(&ws.run_env(&[&args[..], &["--out", "flagruns"]].concat(), Some("envruns")));
    assert!(run.starts_with(ws.path().join("flagruns")));
    let run = ok(&ws.run(&args));
    assert!(run.starts_with(ws.path().join("runs")));
}

/// Bigram model that fails whenever the prompt mentions "boom".
struct Fragile(BigramGenerator);

impl Generator for Fragile {
    fn end_of_text(&self) -> &str {
        self.0.end_of_text()
    }

    fn next_token(&self, prefix: &[String]) -> comve_core::Result<VocabDistribution> {
        if prefix.iter().any(|t| t == "boom") {
            return Err(Error::Backend("model crashed".into()));
        }
        self.0.next_token(prefix)
    }
}

#[test]
fn per_example_failures_exit_1_and_keep_the_rest() {
    let ws = Workspace::new();
    let corpus = std::fs::read_to_string(ws.path().join("corpus.txt")).unwrap();
    let lines: Vec<&str> = corpus.lines().collect();
    let models = ServedModels {
        generator: Some(Arc::new(Fragile(BigramGenerator::train(&lines, 1.0).unwrap()))),
        ..ServedModels::default()
    };
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || serve(listener, Arc::new(models)));

    let backend = format!("service:{addr}");
    let out = ws.run(&[
        "generate-c",
        "--method",
        "lm",
        "--backend",
        &backend,
        "--data",
        "c.csv",
        "--answers",
        "c_refs.csv",
        "--out",
        "runs",
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let run = PathBuf::from(String::from_utf8_lossy(&out.stdout).trim());
    let preds = std::fs::read_to_string(run.join("predictions.csv")).unwrap();
    let ids: Vec<&str> = preds.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids, ["1", "3"]);
    let m = metrics(&run);
    assert_eq!(m["examples"], 3);
    assert_eq!(m["predicted"], 2);
    assert_eq!(m["failures"][0]["id"], "2");
    assert!(m["failures"][0]["error"].as_str().unwrap().contains("model crashed"));
}

#[test]
fn dataset_stats_and_version() {
    let ws = Workspace::new();
    let out = ws.run(&[
        "dataset-stats",
        "--subtask",
        "A",
        "--data",
        "a.csv",
        "--answers",
        "a_ans.csv",
    ]);
    ok(&out);
    let stats: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stats["examples"], 2);
    let v = ws.run(&["--version"]);
    assert_eq!(v.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&v.stdout).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn train_then_use_the_model_as_a_backend() {
    let ws = Workspace::new();
    let run = ok(&ws.run(&[
        "train",
        "--subtask",
        "A",
        "--method",
        "mc",
        "--data",
        "a.csv",
        "--answers",
        "a_ans.csv",
        "--learning-rate",
        "0.1",
        "--batch-size",
        "2",
        "--max-steps",
        "40",
        "--warmup-steps",
        "4",
        "--epochs",
        "40",
        "--weight-decay",
        "0",
        "--out",
        "runs",
    ]));
    for f in ["model.json", "history.csv", "training_summary.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert!(history.starts_with("step,lr,loss\n"));
    assert_eq!(history.lines().count(), 41);

    let backend = format!("linear:{}", run.join("model.json").display());
    let used = ok(&ws.run(&[
        "validate-a",
        "--method",
        "mc",
        "--backend",
        &backend,
        "--data",
        "a.csv",
        "--answers",
        "a_ans.csv",
        "--out",
        "runs",
    ]));
    assert_eq!(metrics(&used)["report"]["accuracy"], 1.0);
}
