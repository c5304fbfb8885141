use std::path::Path;
use std::process::{Command, Output};

fn ofcre(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ofcre"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"
run_dir = "out"
modes = ["dr_only", "with_ur"]

[experiment]
n_way = 2
k_shot = 5
num_tasks = 2
first_task_shots = 5
test_per_relation = 3
hidden_dim = 8
vocab_size = 256
prompt_n0 = 1
prompt_n1 = 2
prompt_n2 = 3
prompt_n3 = 4
epochs = 2
memory_epochs = 1
learning_rate = 0.05
k_desc = 2
memory_size = 2
seeds = [0, 1]

[data]
source = "synthetic"
"#;

#[test]
fn stage_commands_match_run() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    std::fs::write(dir.path().join("whole.toml"), SMALL.replace("\"out\"", "\"whole\"")).unwrap();

    let o = ofcre(&["build-dataset", "-c", "small.toml"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("dr_count"));
    for stage in ["augment", "train", "evaluate", "report"] {
        let o = ofcre(&[stage, "--config", "small.toml", "--seed", "1"], dir.path());
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    let o = ofcre(&["run", "--config", "whole.toml", "--seed", "1"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("| OFCRE | dr_only |"));
    let report = |d: &str| std::fs::read(dir.path().join(d).join("report.md")).unwrap();
    assert_eq!(report("out"), report("whole"));
    assert!(dir.path().join("whole/manifest.json").exists());
    assert!(!dir.path().join("out/run/0").exists(), "--seed override ignored");

    let o = ofcre(&["stats", "out"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let stats: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(stats["ur_count"].as_u64().unwrap() > 0);
}

#[test]
fn dry_run_touches_nothing() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let o = ofcre(&["run", "--config", "small.toml", "--dry-run"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn failures_exit_nonzero_with_context() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), SMALL.replace("num_tasks = 2", "num_tasks = 9")).unwrap();
    let o = ofcre(&["run", "--config", "bad.toml"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("stage `train` failed"), "{}", stderr(&o));
    assert!(!dir.path().join("out/manifest.json").exists());

    std::fs::write(dir.path().join("small.toml"), SMALL.replace("\"out\"", "\"fresh\"")).unwrap();
    let o = ofcre(&["train", "--config", "small.toml"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("build-dataset"), "{}", stderr(&o));

    let o = ofcre(&["run", "--config", "small.toml", "--backend", "http"], dir.path());
    assert!(!o.status.success());
    let o = ofcre(&["run", "--config", "small.toml", "--mode", "bogus"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unknown mode"), "{}", stderr(&o));
}

#[test]
fn generated_files_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let o = ofcre(&["generate", "--out", "gen"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["sentences.jsonl", "relations.json", "gazetteer.txt", "scripts.jsonl", "config.toml"] {
        assert!(dir.path().join("gen").join(f).exists(), "{f}");
    }
    let config = std::fs::read_to_string(dir.path().join("gen/config.toml")).unwrap();
    let small = config
        .replace("num_tasks = 4", "num_tasks = 2")
        .replace("epochs = 30", "epochs = 2")
        .replace("seeds = [0, 1, 2]", "seeds = [0]");
    std::fs::write(dir.path().join("gen/config.toml"), small).unwrap();
    let o = ofcre(&["run", "--config", "gen/config.toml"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("gen/run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["backend_tags"][0], "mock");
    assert_eq!(manifest["runs"].as_array().unwrap().len(), 1);
}
