use std::path::Path;
use std::process::{Command, Output};

fn cdfl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdfl"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CDFL_OUT_DIR")
        .output()
        .expect("binary runs")
}

const SMALL: &str = r#"
seed = 3

[data]
clusters = 2
pretrain_samples = 200
proxy_samples = 80
heldout_samples = 80
client_samples_min = 40
client_samples_max = 80
client_test_samples = 30

[simulation]
clients = 3
syncs_per_client = 3
"#;

fn small_config(dir: &Path) -> std::path::PathBuf {
    // start from the printed defaults so every section is complete
    let printed = cdfl(&["config"], dir);
    assert!(printed.status.success());
    let mut cfg: toml::Table = toml::from_str(&String::from_utf8(printed.stdout).unwrap()).unwrap();
    let small: toml::Table = toml::from_str(SMALL).unwrap();
    for (section, value) in small {
        match (cfg.get_mut(&section), value) {
            (Some(toml::Value::Table(t)), toml::Value::Table(patch)) => t.extend(patch),
            (_, v) => {
                cfg.insert(section, v);
            }
        }
    }
    let path = dir.join("small.toml");
    std::fs::write(&path, toml::to_string(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn run_writes_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = cdfl(&["run", cfg.to_str().unwrap(), "--method", "cdfl", "--out", "a"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("cdfl seed 3: 9 syncs"), "{stdout}");
    for f in ["config.toml", "report.json", "uploads.csv", "sessions.csv", "epochs.csv", "records.jsonl", "events.jsonl", "repository.json"] {
        assert!(dir.path().join("a").join(f).exists(), "{f}");
    }

    // same seed, same bytes
    let again = cdfl(&["run", cfg.to_str().unwrap(), "--out", "b"], dir.path());
    assert!(again.status.success());
    let read = |d: &str| std::fs::read(dir.path().join(d).join("uploads.csv")).unwrap();
    assert_eq!(read("a"), read("b"));

    // the written config reproduces the run on its own
    let replay = cdfl(&["run", "a/config.toml", "--out", "c"], dir.path());
    assert!(replay.status.success());
    assert_eq!(read("a"), read("c"));
}

#[test]
fn run_defaults_to_the_out_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = cdfl(&["--out-root", "here", "run", cfg.to_str().unwrap(), "--method", "local", "--seed", "8"], dir.path());
    assert!(out.status.success());
    let run = dir.path().join("here/local-seed8");
    assert!(run.join("uploads.csv").exists());
    assert!(!run.join("repository.json").exists());
}

#[test]
fn compare_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = cdfl(&["compare", cfg.to_str().unwrap(), "--seeds", "1,2", "--out", "cmp"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("cmp/summary.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("cdfl,") && rows[2].starts_with("fedsoft-async,") && rows[3].starts_with("local,"));
    assert!(dir.path().join("cmp/fedsoft-async-seed2/uploads.csv").exists());

    let one = cdfl(&["compare", cfg.to_str().unwrap(), "--seeds", "1"], dir.path());
    assert!(!one.status.success());
}

#[test]
fn unknown_keys_are_rejected_with_their_name() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "seed = 1\n[ratios]\nbeta_zero = 0.5\n").unwrap();
    let out = cdfl(&["run", path.to_str().unwrap()], dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("beta_zero"), "{err}");
    assert!(err.contains("bad.toml"), "{err}");
}

#[test]
fn config_prints_presets() {
    let dir = tempfile::tempdir().unwrap();
    let out = cdfl(&["config", "--preset", "mi6"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg: toml::Table = toml::from_str(&text).unwrap();
    let est = cfg["estimation"].as_table().unwrap();
    assert_eq!(est["a_schedule"].as_array().unwrap().len(), 2);
    assert_eq!(est["c1"].as_float(), Some(0.6));

    let bad = cdfl(&["config", "--preset", "nope"], dir.path());
    assert!(!bad.status.success());
}
