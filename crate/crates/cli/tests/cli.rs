use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_covert-leader");

const SMOKE: &str = "\
env.n_agents = 3
env.horizon = 10
ppo.total_iterations = 2
ppo.episodes_per_batch = 4
pipeline.dataset_episodes = 8
pipeline.stage3_iterations = 2
adversary.epochs = 2
eval.episodes = 4
eval.sizes = 3,4
";

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .env_remove("COVERT_LEADER_CONFIG")
        .args(args)
        .output()
        .unwrap()
}

fn smoke_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("smoke.cfg"), SMOKE).unwrap();
    dir
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn eval_without_checkpoint_names_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(dir.path(), &["eval"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--checkpoint"), "{}", stderr(&o));
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "env.no_such_key = 1\n").unwrap();
    let o = cli(dir.path(), &["run-all", "--config", "bad.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    let o = cli(dir.path(), &["run-all", "--set", "env.horizon=abc"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_file_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(dir.path(), &["eval", "--checkpoint", "nope.json"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn verbose_config_round_trips() {
    let dir = smoke_dir();
    let o = cli(dir.path(), &["eval", "--baseline", "idle", "--config", "smoke.cfg", "--set", "env.horizon=7", "--verbose"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    let kv: String = out.lines().take_while(|l| !l.starts_with('{')).map(|l| format!("{l}\n")).collect();
    let cfg = covert_leader::config::RunConfig::parse(&kv).unwrap();
    assert_eq!(cfg.env.horizon, 7);
    assert_eq!(cfg.env.n_agents, 3);
    assert_eq!(cfg.to_kv_string(), kv);
}

#[test]
fn env_var_overrides_config_flag() {
    let dir = smoke_dir();
    std::fs::write(dir.path().join("other.cfg"), "env.horizon = 13\n").unwrap();
    let o = Command::new(BIN)
        .current_dir(dir.path())
        .env("COVERT_LEADER_CONFIG", "other.cfg")
        .args(["eval", "--baseline", "idle", "--config", "smoke.cfg", "--verbose"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(String::from_utf8(o.stdout).unwrap().contains("env.horizon = 13"));
}

#[test]
fn smoke_pipeline_end_to_end() {
    let dir = smoke_dir();
    let d = dir.path();
    let o = cli(d, &["train-hiding", "--config", "smoke.cfg", "--seed", "7", "--run-dir", "run"]);
    assert_eq!(o.status.code(), Some(1), "stage 3 before stage 2 must fail");

    let o = cli(d, &["run-all", "--config", "smoke.cfg", "--seed", "7", "--run-dir", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = covert_leader::pipeline::PipelineManifest::load(&d.join("run")).unwrap().unwrap();
    assert!(manifest.is_complete());

    let base = ["--config", "smoke.cfg", "--seed", "7"];
    let run = |extra: &[&str]| {
        let args: Vec<&str> = extra.iter().chain(&base).copied().collect();
        let o = cli(d, &args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    };
    run(&["eval", "--checkpoint", "run/stage3/policy.json", "--adversary", "run/stage2/adversary.json", "--label", "hiding", "--out", "hiding.json"]);
    run(&["eval", "--baseline", "pd", "--adversary", "run/stage2/adversary.json", "--out", "pd.json"]);
    run(&["sweep-n", "--checkpoint", "run/stage1/policy.json", "--adversary", "run/stage2/adversary.json", "--out", "sweep.json"]);
    run(&["export-traces", "--checkpoint", "run/stage3/policy.json", "--adversary", "run/stage2/adversary.json", "--label", "hiding", "--episodes", "3", "--out", "traces"]);
    run(&["emit-plots", "--reports", "hiding.json", "pd.json", "--sweep", "sweep.json", "--out", "plots"]);
    for stem in covert_leader::evalkit::PLOT_STEMS {
        assert!(d.join(format!("plots/{stem}.svg")).exists());
    }
    let index = covert_leader::evalkit::TraceIndex::load_or_default(&d.join("traces")).unwrap();
    assert_eq!(index.traces.len(), 3);
    assert_eq!(index.traces[0].id, "hiding-n3-000");

    // a checkpoint from another environment is refused
    let o = cli(d, &["eval", "--checkpoint", "run/stage3/policy.json", "--set", "env.horizon=11"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("policy.json"));
}

struct Serving(Child);

impl Drop for Serving {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn http(port: u16, request: &str) -> (u16, String) {
    let mut s = TcpStream::connect(("127.0.0.1", port)).unwrap();
    s.write_all(request.as_bytes()).unwrap();
    let mut buf = String::new();
    s.read_to_string(&mut buf).unwrap();
    let code = buf.split_whitespace().nth(1).unwrap().parse().unwrap();
    let body = buf.split_once("\r\n\r\n").map(|x| x.1.to_string()).unwrap_or_default();
    (code, body)
}

fn get(port: u16, path: &str) -> (u16, String) {
    http(port, &format!("GET {path} HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n"))
}

fn post(port: u16, path: &str, body: &str) -> (u16, String) {
    http(
        port,
        &format!("POST {path} HTTP/1.1\r\nHost: x\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len()),
    )
}

#[test]
fn serve_lists_traces_and_logs_guesses() {
    let dir = smoke_dir();
    let d = dir.path();
    let o = cli(d, &["export-traces", "--baseline", "pd", "--config", "smoke.cfg", "--episodes", "2", "--out", "traces"]);
    assert!(o.status.success(), "{}", stderr(&o));
    std::fs::create_dir(d.join("ui")).unwrap();
    std::fs::write(d.join("ui/index.html"), "<html>hi</html>").unwrap();

    let port = 18_000 + (std::process::id() % 1000) as u16;
    let _server = Serving(
        Command::new(BIN)
            .current_dir(d)
            .args(["serve", "--port", &port.to_string(), "--traces", "traces", "--static", "ui"])
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    let deadline = Instant::now() + Duration::from_secs(10);
    while TcpStream::connect(("127.0.0.1", port)).is_err() {
        assert!(Instant::now() < deadline, "server did not start");
        std::thread::sleep(Duration::from_millis(50));
    }

    let (code, body) = get(port, "/traces/index.json");
    assert_eq!(code, 200);
    let index: serde_json::Value = serde_json::from_str(&body).unwrap();
    let ids: Vec<&str> = index["traces"].as_array().unwrap().iter().map(|t| t["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["scripted-pd-n3-000", "scripted-pd-n3-001"]);
    for t in index["traces"].as_array().unwrap() {
        assert_eq!(t["algorithm"], "scripted-pd");
        assert_eq!((t["n"].as_u64(), t["horizon"].as_u64()), (Some(3), Some(10)));
    }

    let (code, body) = get(port, "/traces/scripted-pd-n3-001.json");
    assert_eq!(code, 200);
    let trace = covert_leader::evalkit::EpisodeTrace::parse(body.as_bytes()).unwrap();
    assert_eq!(trace.steps.len(), 10);

    assert_eq!(get(port, "/").1, "<html>hi</html>");
    assert_eq!(get(port, "/traces/../smoke.cfg").0, 400);
    assert_eq!(get(port, "/traces/missing.json").0, 404);

    let (code, _) = post(port, "/guesses", r#"{"trace_id":"x"}"#);
    assert_eq!(code, 400);

    let threads: Vec<_> = (0..8)
        .map(|k| {
            std::thread::spawn(move || {
                let body = format!(
                    r#"{{"trace_id":"scripted-pd-n3-000","guess_index":{k},"guess_time_step":12,"elapsed_ms":1234.5,"session_id":"s{k}"}}"#
                );
                post(port, "/guesses", &body).0
            })
        })
        .collect();
    for t in threads {
        assert_eq!(t.join().unwrap(), 204);
    }
    let log = std::fs::read_to_string(d.join("traces/guesses.jsonl")).unwrap();
    let mut seen: Vec<u64> = log
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            assert_eq!(v["guess_time_step"], 12);
            v["guess_index"].as_u64().unwrap()
        })
        .collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..8).collect::<Vec<u64>>());
}
