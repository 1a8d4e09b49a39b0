use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SPACE: &str = r#"
[[dimensions]]
name = "learning_rate"
kind = "continuous"
lo = 0.01
hi = 1.0
log = true
bins = 3

[[dimensions]]
name = "step_size"
kind = "integer"
lo = 1
hi = 2
bins = 2

[fidelity]
min_rounds = 1
max_rounds = 9
sample_rates = [1.0]
"#;

const TASK: &str = r#"
name = "blobs"
source = "synthetic"
n_samples = 150
n_clients = 4
seed = 3
"#;

fn fedhpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedhpo"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn table_config(dir: &Path) -> std::path::PathBuf {
    let text = format!(
        "algorithm = \"fedavg\"\n\n[space]\n{}\n[task]\n{TASK}\n[table]\nrounds = [1, 3, 9]\nsample_rates = [1.0]\nn_seeds = 1\n",
        SPACE.replace("bins = 3", "bins = 4").replace("[[dimensions]]", "[[space.dimensions]]").replace("[fidelity]", "[space.fidelity]")
    );
    let p = dir.join("table.toml");
    fs::write(&p, text).unwrap();
    p
}

fn study_config(dir: &Path, optimizers: &[&str]) -> std::path::PathBuf {
    let mut text = String::from(
        "name = \"tiny\"\nbudget_seconds = 3000.0\nrepetitions = 2\nseed = 5\nmode = \"tabular\"\n\n[table]\nrounds = [1, 3, 9]\nsample_rates = [1.0]\nn_seeds = 1\n",
    );
    text.push_str(&format!(
        "\n[spaces.fedavg]\n{}",
        SPACE.replace("[[dimensions]]", "[[spaces.fedavg.dimensions]]").replace("[fidelity]", "[spaces.fedavg.fidelity]")
    ));
    text.push_str(&format!("\n[[tasks]]\n{TASK}"));
    for o in optimizers {
        text.push_str(&format!("\n[[optimizers]]\nkind = \"{o}\"\n"));
    }
    let p = dir.join("study.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn gen_table_then_resume_and_fit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = table_config(dir.path());
    let out = dir.path().join("t.csv");
    let o = fedhpo(&["gen-table", "--config", path(&cfg), "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let first = fs::read(&out).unwrap();
    // 8 configs × 3 fidelities plus the header
    assert_eq!(String::from_utf8_lossy(&first).lines().count(), 25);

    let o = fedhpo(&["gen-table", "--config", path(&cfg), "--out", path(&out)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--resume"));

    let o = fedhpo(&["gen-table", "--config", path(&cfg), "--out", path(&out), "--resume"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("0 courses run"));
    assert_eq!(fs::read(&out).unwrap(), first);

    let srg = dir.path().join("t.srg");
    let o = fedhpo(&["fit-surrogate", "--table", path(&out), "--out", path(&srg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("cv_mae="));
    assert!(srg.exists());
}

#[test]
fn gen_table_names_missing_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, format!("algorithm = \"fedavg\"\n\n[task]\n{TASK}")).unwrap();
    let o = fedhpo(&["gen-table", "--config", path(&cfg), "--out", path(&dir.path().join("x.csv"))]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("table"));
}

#[test]
fn run_is_deterministic_and_rejects_unknown_optimizers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = study_config(dir.path(), &["rs"]);
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for out in [&a, &b] {
        let o = fedhpo(&["run", "--config", path(&cfg), "--optimizer", "hb", "--seed", "9", "--out", path(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let log = fs::read(&a).unwrap();
    assert!(!log.is_empty());
    assert_eq!(log, fs::read(&b).unwrap());

    let o = fedhpo(&["run", "--config", path(&cfg), "--optimizer", "grid", "--out", path(&a)]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("grid") && err.contains("bohb"), "{err}");
}

#[test]
fn study_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = study_config(dir.path(), &["rs", "bohb"]);
    let out = dir.path().join("out");
    let o = fedhpo(&["--jobs", "1", "study", "--config", path(&cfg), "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let signs = fs::read_to_string(out.join("sign_tests.csv")).unwrap();
    assert_eq!(signs.lines().count(), 2);

    fs::remove_file(out.join("mean_rank.csv")).unwrap();
    let o = fedhpo(&["report", "--study-dir", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("mean_rank.csv").exists());

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let o = fedhpo(&["report", "--study-dir", path(&empty)]);
    assert!(!o.status.success());
}
