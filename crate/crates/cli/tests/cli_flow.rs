use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_ssibridge");

struct Federation(Child);

impl Drop for Federation {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn run(keydir: &Path, cwd: &Path, args: &[&str]) -> (bool, Value) {
    let out = Command::new(BIN)
        .arg("--json")
        .args(args)
        .env("SSIBRIDGE_KEYDIR", keydir)
        .current_dir(cwd)
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    (out.status.success(), serde_json::from_str(text.trim()).unwrap_or(Value::Null))
}

fn federation_up(keydir: &Path) -> (Federation, String) {
    let mut child = Command::new(BIN)
        .args(["--json", "fed", "up", "--bind", "127.0.0.1:0"])
        .env("SSIBRIDGE_KEYDIR", keydir)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let v: Value = serde_json::from_str(&line).unwrap();
    (Federation(child), v["base_url"].as_str().unwrap().to_string())
}

#[test]
fn holder_flow_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let keys = dir.path().join("keys");
    let cwd = dir.path();
    let (_fed, url) = federation_up(&keys);

    assert!(run(&keys, cwd, &["issuer", "issue", "--itwallet", "it.json"]).0);
    let (ok, err) = run(&keys, cwd, &["itwallet", "export", "--itwallet", "it.json", "--out", "c.sdjwt"]);
    assert!(!ok);
    assert_eq!(err["error"]["code"], "NotAuthenticated");
    assert!(run(&keys, cwd, &["itwallet", "login", "--itwallet", "it.json"]).0);
    assert!(run(&keys, cwd, &["itwallet", "export", "--itwallet", "it.json", "--out", "c.sdjwt"]).0);

    let (ok, v) = run(&keys, cwd, &["wallet", "present", "--out", "p.json"]);
    assert!(!ok, "{v}");

    let (ok, v) = run(&keys, cwd, &["wallet", "attest", "--cred", "c.sdjwt", "--fed", &url]);
    assert!(ok, "{v}");
    assert_eq!(v["outcome"], 1);
    assert!(cwd.join("c.attested.jwt").exists());
    let (ok, v) = run(&keys, cwd, &["wallet", "publish", "--chain", "chain.jsonl"]);
    assert!(ok, "{v}");
    assert_eq!(v["event_ref"]["block_number"], 2);
    let (ok, _) = run(&keys, cwd, &["wallet", "present", "--claims", "given_name", "--out", "p.json"]);
    assert!(ok);

    let (ok, v) = run(&keys, cwd, &["rp", "verify", "--package", "p.json", "--chain", "chain.jsonl"]);
    assert!(ok, "{v}");
    assert_eq!(v["verdict"], "accept");
    assert_eq!(v["claims"]["given_name"], "Ada");
    assert!(v["claims"].get("family_name").is_none());

    let (_, events) = run(&keys, cwd, &["chain", "events", "--chain", "chain.jsonl"]);
    assert_eq!(events.as_array().unwrap().len(), 1);
    assert!(run(&keys, cwd, &["chain", "load", "--chain", "chain.jsonl"]).0);

    // Once every status endpoint is down, a fresh attestation fails but the
    // published package still verifies.
    for e in ["qeaa-provider", "intermediate"] {
        assert!(run(&keys, cwd, &["fed", "outage", e, "--fed", &url]).0);
    }
    assert!(run(&keys, cwd, &["issuer", "issue", "--holder", "did:example:late", "--out", "late.sdjwt"]).0);
    let (ok, v) = run(&keys, cwd, &["wallet", "attest", "--cred", "late.sdjwt", "--fed", &url]);
    assert!(!ok);
    assert_eq!(v["error"]["code"], "PreflightFailed");
    assert!(run(&keys, cwd, &["rp", "verify", "--package", "p.json", "--chain", "chain.jsonl"]).0);

    let late = (ssibridge_core::scenario::SCENARIO_START + 8 * 86_400).to_string();
    let (ok, v) = run(
        &keys,
        cwd,
        &["--now", &late, "rp", "verify", "--package", "p.json", "--chain", "chain.jsonl"],
    );
    assert!(!ok);
    assert_eq!(v["error"]["detail"]["reason"], "stale");
}

#[test]
fn rotated_issuer_key_is_picked_up() {
    let dir = tempfile::tempdir().unwrap();
    let keys = dir.path().join("keys");
    let cwd = dir.path();
    let (_fed, url) = federation_up(&keys);
    let (ok, v) = run(&keys, cwd, &["fed", "rotate", "https://qeaa-provider.example", "--fed", &url]);
    assert!(ok, "{v}");
    let new_kid = v["result"]["new_key"]["key_id"].as_str().unwrap().to_string();
    let deadline = std::time::Instant::now() + std::time::Duration::from_secs(5);
    while !keys.join(format!("{new_kid}.json")).exists() {
        assert!(std::time::Instant::now() < deadline, "rotated key never synced");
        std::thread::sleep(std::time::Duration::from_millis(50));
    }
    assert!(run(&keys, cwd, &["issuer", "issue", "--out", "c.sdjwt"]).0);
    let (ok, v) = run(&keys, cwd, &["wallet", "attest", "--cred", "c.sdjwt", "--fed", &url]);
    assert!(ok, "{v}");
}

#[test]
fn scenario_failure_and_unknown_names_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let (ok, v) = run(dir.path(), dir.path(), &["scenario", "run", "fig9"]);
    assert!(!ok);
    assert!(v["error"]["code"].is_string());
    let (ok, v) = run(dir.path(), dir.path(), &["scenario", "run", "fig3"]);
    assert!(ok, "{v}");
    assert_eq!(v["scenario"], "fig3");
}
