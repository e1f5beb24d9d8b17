use std::io::BufReader;
use std::os::unix::net::UnixStream;
use std::path::Path;
use std::process::{Child, Command, Output};
use std::time::{Duration, Instant};

use hydra_core::proto::{read_msg, write_msg, Msg};
use serde_json::Value;

fn hydra(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hydra")).args(args).current_dir(cwd).output().unwrap()
}

fn ok_json(out: Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn batch_mode_prints_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.ml");
    std::fs::write(&good, "let x: int = 1;\nx = x + 2;\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_minichecker")).arg("--batch").arg(&good).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1);
    let v: Value = serde_json::from_str(&text).unwrap();
    assert!(v["error"].is_null());
    assert_eq!(v["boundaries"].as_array().unwrap().last().unwrap()[1], "eos");

    let bad = dir.path().join("bad.ml");
    std::fs::write(&bad, "let s: str = 1;").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_minichecker")).arg("--batch").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["error"]["off"], 13);
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn connect(path: &Path) -> UnixStream {
    let t0 = Instant::now();
    loop {
        match UnixStream::connect(path) {
            Ok(s) => return s,
            Err(_) if t0.elapsed() < Duration::from_secs(10) => {
                std::thread::sleep(Duration::from_millis(20));
            }
            Err(e) => panic!("cannot connect: {e}"),
        }
    }
}

#[test]
fn listen_mode_speaks_frames_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let sock = dir.path().join("checker.sock");
    let _server = Server(
        Command::new(env!("CARGO_BIN_EXE_minichecker"))
            .args(["--interval", "16", "--listen"])
            .arg(&sock)
            .spawn()
            .unwrap(),
    );

    let conn = connect(&sock);
    let mut rd = BufReader::new(conn.try_clone().unwrap());
    let mut wr = conn;
    write_msg(&mut wr, &Msg::submit("let x: int = 1;\nlet y: int = x + 1;\n")).unwrap();
    let Some(Msg::Init { pid: None, .. }) = read_msg(&mut rd).unwrap() else { panic!("expected init") };
    let mut progress = Vec::new();
    let mut chkpt = None;
    while progress.len() < 2 {
        match read_msg(&mut rd).unwrap().unwrap() {
            Msg::Progress { off, .. } => progress.push(off),
            Msg::Chkpt { off, id, .. } => chkpt = Some((off, id)),
            m => panic!("unexpected {m:?}"),
        }
    }
    assert_eq!(progress, vec![15, 35]);
    // The checkpoint for 35 may follow its progress event.
    while chkpt.is_none_or(|(off, _)| off < 35) {
        if let Msg::Chkpt { off, id, .. } = read_msg(&mut rd).unwrap().unwrap() {
            chkpt = Some((off, id));
        }
    }
    let (coff, cid) = chkpt.unwrap();

    // A second channel continues from the checkpoint with a use of `y`.
    let conn = connect(&sock);
    let mut rd2 = BufReader::new(conn.try_clone().unwrap());
    let mut wr2 = conn;
    write_msg(&mut wr2, &Msg::Resume { chan: hydra_core::minichecker::checkpoint_chan(cid) }).unwrap();
    let Some(Msg::Init { pid, .. }) = read_msg(&mut rd2).unwrap() else { panic!("expected init") };
    assert_eq!(pid, Some(cid));
    write_msg(&mut wr2, &Msg::submit("z = y;\n")).unwrap();
    match read_msg(&mut rd2).unwrap().unwrap() {
        Msg::Error { off, cat, .. } => {
            let full = format!("{}z = y;\n", &"let x: int = 1;\nlet y: int = x + 1;\n"[..coff as usize]);
            let want = hydra_core::minichecker::batch_check(&full).error.unwrap();
            assert_eq!((off, cat.as_str()), (want.off, want.kind.as_str()));
            assert_eq!(cat, "undeclared_identifier");
        }
        m => panic!("unexpected {m:?}"),
    }
}

#[test]
fn run_bench_sweep_and_tune() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = hydra(&["synth", "--out", "corpus", "--n", "4", "--walkthrough"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("corpus/walkthrough.task.json").exists());

    let v = ok_json(hydra(
        &["run", "--task", "corpus/walkthrough.task.json", "--events", "ev.ndjson", "--dump-tree", "tree.json"],
        d,
    ));
    assert_eq!(v["outcome"], "accepted");
    assert_eq!(v["rollouts_spawned"], 3);
    let events = std::fs::read_to_string(d.join("ev.ndjson")).unwrap();
    assert!(events.lines().all(|l| serde_json::from_str::<Value>(l).is_ok()));
    let tree: Value = serde_json::from_str(&std::fs::read_to_string(d.join("tree.json")).unwrap()).unwrap();
    assert!(tree["nodes"].as_array().unwrap().len() > 10);

    let out = hydra(&["dump-tree", "--task", "corpus/walkthrough.task.json", "--out", "t2.json", "--policy", "random"], d);
    assert!(out.status.success());
    assert!(d.join("t2.json").exists());

    let aggs = ok_json(hydra(&["bench", "--corpus", "corpus", "--seeds", "2", "--policies", "tokpol,entropy", "--out", "out"], d));
    assert_eq!(aggs.as_array().unwrap().len(), 2);
    assert_eq!(aggs[0]["runs"], 10);
    for f in ["summary.json", "runs.csv", "events.ndjson", "attempts.json"] {
        assert!(d.join("out").join(f).exists(), "{f}");
    }

    std::fs::write(d.join("grid.json"), r#"{"s_g": [179, 454], "s_c": [3150]}"#).unwrap();
    let cells = ok_json(hydra(&["sweep", "--grid", "grid.json", "--attempts", "out/attempts.json"], d));
    assert_eq!(cells.as_array().unwrap().len(), 2);
    assert!(cells[0]["speedup"].as_f64().unwrap() >= 1.0);

    let samples: Vec<Value> = (0..400).map(|i| serde_json::json!({"c": i * 7, "e": i * 7 + 300})).collect();
    std::fs::write(d.join("samples.json"), serde_json::to_string(&samples).unwrap()).unwrap();
    let choice = ok_json(hydra(&["tune-interval", "--samples", "samples.json", "--Q", "0.9"], d));
    assert!(choice["wilson"].as_f64().unwrap() >= 0.9);
    assert!(choice["f_c"].as_u64().unwrap() >= 16);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = hydra(&["run", "--task", "missing.task.json"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.task.json"));
    std::fs::create_dir(dir.path().join("empty")).unwrap();
    let out = hydra(&["bench", "--corpus", "empty"], dir.path());
    assert!(!out.status.success());
}
