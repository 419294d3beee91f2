use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("moo-cli-{}-{}", name, std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn moo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moo"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn csv_body(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn missing_instance_exits_with_input_code_and_names_the_path() {
    let dir = scratch("missing");
    let out = moo(&dir, &["solve", "--instance", "does-not-exist.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does-not-exist.json"));
}

#[test]
fn binary_tree_has_nested_sets_of_halving_size() {
    let dir = scratch("tree");
    assert!(moo(&dir, &["gen", "--kind", "binary-tree", "--levels", "3", "--out-dir", "g"]).status.success());
    assert!(moo(&dir, &["dag", "--instance", "g/instance.json", "--out-dir", "d"]).status.success());
    let nodes = csv_body(&dir.join("d/nodes.csv"));
    assert_eq!(nodes[0], vec!["id", "level", "members"]);
    let mut sizes: Vec<usize> = nodes[1..].iter().map(|r| r[1].parse().unwrap()).collect();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    assert_eq!(sizes, vec![8, 4, 4, 2, 2, 2, 2, 1, 1, 1, 1, 1, 1, 1, 1]);
}

#[test]
fn same_seed_gives_identical_instance_files() {
    let dir = scratch("seed");
    for out in ["a", "b"] {
        assert!(moo(&dir, &["gen", "--kind", "sparse-spike-mixture", "--users", "30", "--seed", "9", "--out-dir", out])
            .status
            .success());
    }
    assert_eq!(
        std::fs::read(dir.join("a/instance.json")).unwrap(),
        std::fs::read(dir.join("b/instance.json")).unwrap()
    );
}

#[test]
fn manifest_records_estimator_and_outputs() {
    let dir = scratch("manifest");
    assert!(moo(&dir, &["gen", "--kind", "uniform", "--users", "20", "--out-dir", "g"]).status.success());
    let out = moo(
        &dir,
        &["solve", "--instance", "g/instance.json", "--sample-size", "10", "--estimator", "mod1", "--out-dir", "s"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("s/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["diagnostics"]["estimator"], "mod1");
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);
    let first = std::fs::read_to_string(dir.join("s/plans.csv")).unwrap();
    assert!(first.starts_with("# manifest: manifest.json"));
}

#[test]
fn recover_reproduces_solve_plans() {
    let dir = scratch("recover");
    assert!(moo(&dir, &["gen", "--kind", "uniform", "--users", "8", "--out-dir", "g"]).status.success());
    assert!(moo(&dir, &["solve", "--instance", "g/instance.json", "--out-dir", "s"]).status.success());
    assert!(moo(&dir, &["recover", "--instance", "g/instance.json", "--duals", "s/duals.csv", "--out-dir", "r"])
        .status
        .success());
    assert_eq!(csv_body(&dir.join("s/plans.csv")), csv_body(&dir.join("r/plans.csv")));
}

#[test]
fn invalid_instance_fails_validation() {
    let dir = scratch("invalid");
    let bad = r#"{"N": 1, "M": 2, "gamma": 1.0, "p": [0.5, 1.5], "r": [0.1, 0.2], "q": [0, 0],
                  "budgets": [], "locals": []}"#;
    std::fs::write(dir.join("bad.json"), bad).unwrap();
    let out = moo(&dir, &["validate", "--instance", "bad.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn experiment_floors_are_enforced() {
    let dir = scratch("floors");
    assert_eq!(moo(&dir, &["variance-table", "--reps", "29"]).status.code(), Some(1));
    assert_eq!(moo(&dir, &["split-curve", "--levels", "3", "--reps", "0"]).status.code(), Some(1));
    assert_eq!(moo(&dir, &["solve", "--instance", "x.json", "--rho", "-1"]).status.code(), Some(1));
}

#[test]
fn split_curve_rows_parse_back_losslessly() {
    let dir = scratch("split");
    assert!(moo(&dir, &["split-curve", "--levels", "3", "--reps", "10", "--out-dir", "c"]).status.success());
    let rows = csv_body(&dir.join("c/split_curve.csv"));
    assert_eq!(rows[0], vec!["split_level", "mse", "online_time_sec"]);
    assert_eq!(rows.len(), 4);
    for row in &rows[1..] {
        let v: f64 = row[1].parse().unwrap();
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.serialize(v).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        assert_eq!(text.trim_end(), row[1]);
    }
    let times: Vec<f64> = rows[1..].iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(times[2] <= times[0] && times[2] <= times[1]);
    let script = moo(&dir, &["plot-script", "--kind", "split-curve", "--csv", "c/split_curve.csv", "--out-dir", "c"]);
    assert!(script.status.success());
    assert!(std::fs::read_to_string(dir.join("c/split_curve.gp")).unwrap().contains("c/split_curve.csv"));
}
