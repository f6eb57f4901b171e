use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diff-ilqr"))
        .args(args)
        .arg("--output")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn header_value<'a>(text: &'a str, key: &str) -> &'a str {
    let prefix = format!("# {key}: ");
    text.lines()
        .find_map(|l| l.strip_prefix(prefix.as_str()))
        .unwrap_or_else(|| panic!("no {key} header"))
}

fn body(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).collect()
}

/// Parsed CSV body: header names and rows.
fn table(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = body(text).into_iter();
    let head = lines.next().expect("column header").split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (head, rows)
}

fn column(head: &[String], name: &str) -> usize {
    head.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

#[test]
fn unknown_model_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--model", "acrobot"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("acrobot"));
}

#[test]
fn bad_config_values_are_configuration_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["benchmark", "--repetitions", "3"], dir.path())), 2);
    assert_eq!(code(&run(&["gradcheck", "--target", "everything"], dir.path())), 2);
    assert_eq!(code(&run(&["gradcheck", "--mode", "sideways"], dir.path())), 2);
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"horizon": 5, "no_such_key": 1}"#).unwrap();
    assert_eq!(code(&run(&["gradcheck", "--config", cfg.to_str().unwrap()], dir.path())), 2);
}

#[test]
fn unconverged_solves_are_solver_failures() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--max-iter", "1"], dir.path());
    assert_eq!(code(&o), 3);
    let text = read(dir.path(), "gradcheck.csv");
    assert!(text.contains("did not converge"));
}

#[test]
fn gradcheck_on_the_linear_model_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &["gradcheck", "--model", "linear-test", "--target", "both", "--seeds", "0,1,2"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (head, rows) = table(&read(dir.path(), "gradcheck.csv"));
    let (ei, eu, st) = (column(&head, "err_implicit"), column(&head, "err_unrolled"), column(&head, "status"));
    assert!(!rows.is_empty());
    for r in &rows {
        assert_eq!(r[st], "ok");
        assert!(r[ei].parse::<f64>().unwrap() < 1e-8, "{r:?}");
        assert!(r[eu].parse::<f64>().unwrap() < 1e-8, "{r:?}");
    }
}

#[test]
fn outputs_carry_provenance_and_are_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["gradcheck", "--seeds", "4", "--horizon", "6"];
    assert_eq!(code(&run(&args, a.path())), 0);
    assert_eq!(code(&run(&args, b.path())), 0);
    let (ta, tb) = (read(a.path(), "gradcheck.csv"), read(b.path(), "gradcheck.csv"));
    assert_eq!(body(&ta), body(&tb));
    assert_eq!(header_value(&ta, "seed"), "4");
    assert!(header_value(&ta, "version").ends_with(env!("CARGO_PKG_VERSION")));
    assert_eq!(header_value(&ta, "config_sha256").len(), 64);
    // Only the output directory differs between the two runs.
    assert_ne!(header_value(&ta, "config_sha256"), header_value(&tb, "config_sha256"));

    let c = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["gradcheck", "--seeds", "5", "--horizon", "6"], c.path())), 0);
    assert_ne!(body(&ta), body(&read(c.path(), "gradcheck.csv")));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"model_id": "cartpole", "horizon": 5, "seeds": [7]}"#).unwrap();
    let o = run(&["gradcheck", "--config", cfg.to_str().unwrap(), "--horizon", "4"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = read(dir.path(), "gradcheck.csv");
    let echoed: serde_json::Value = serde_json::from_str(header_value(&text, "config")).unwrap();
    assert_eq!(echoed["model_id"], "cartpole");
    assert_eq!(echoed["horizon"], 4);
    assert_eq!(echoed["seeds"], serde_json::json!([7]));
    let (head, rows) = table(&text);
    let params: Vec<&str> = rows.iter().map(|r| r[column(&head, "param")].as_str()).collect();
    assert_eq!(params, ["m_c", "m_p", "g", "l"]);
}

#[test]
fn benchmark_rows_have_a_ratio_even_for_one_count() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["benchmark", "--horizon", "5", "--iteration-counts", "10"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (head, rows) = table(&read(dir.path(), "benchmark.csv"));
    assert_eq!(head, ["horizon", "N", "implicit_backward_ms", "unrolled_ms", "ratio"]);
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0][0].as_str(), rows[0][1].as_str()), ("5", "10"));
    assert!(rows[0][4].parse::<f64>().unwrap() > 0.0);
}

#[test]
fn cost_mode_imitation_reports_per_dimension_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "imitate", "--model", "cartpole", "--mode", "cost", "--horizon", "6", "--train-size", "4", "--epochs", "3",
    ];
    let o = run(&args, dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (head, rows) = table(&read(dir.path(), "imitate.csv"));
    for name in (0..5).map(|i| format!("w{i}")).chain((0..5).map(|i| format!("goal{i}"))) {
        column(&head, &name);
    }
    assert_eq!(rows.len(), 4);
    let summary: serde_json::Value = serde_json::from_str(&read(dir.path(), "imitate.json")).unwrap();
    assert_eq!(summary["mode"], "cost");
    assert_eq!(summary["trials"][0]["seed"], 0);
    assert!(summary["trials"][0]["test_loss"].is_number());
    assert!(summary["provenance"]["config_sha256"].is_string());
}

#[test]
fn dataset_feeds_sysid_and_imitation() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["dataset", "--model", "cartpole", "--horizon", "8", "--train-size", "4", "--seeds", "2"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let data = dir.path().join("dataset.jsonl");
    let text = read(dir.path(), "dataset.jsonl");
    assert_eq!(header_value(&text, "seed"), "2");
    assert_eq!(body(&text).len(), diff_ilqr::learning::Split::count_for_train(4));

    let path = data.to_str().unwrap();
    let common = ["--model", "cartpole", "--horizon", "8", "--train-size", "4", "--dataset", path];
    let o = run(&[&["sysid"][..], &common].concat(), dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (head, rows) = table(&read(dir.path(), "sysid.csv"));
    assert_eq!(rows[0][column(&head, "rank")], "4");
    assert!(rows[0][column(&head, "model_loss")].parse::<f64>().unwrap() < 1e-12);

    let o = run(&[&["imitate", "--epochs", "2"][..], &common].concat(), dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    // Records for a different horizon are rejected.
    let o = run(&["imitate", "--model", "cartpole", "--horizon", "9", "--dataset", path], dir.path());
    assert_eq!(code(&o), 2);
}
