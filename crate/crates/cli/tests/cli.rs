use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn drgp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drgp")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = drgp(args);
    assert!(
        out.status.success(),
        "drgp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_string()
}

fn csv_rows(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines().filter(|l| !l.is_empty());
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap()
}

#[test]
fn generate_then_solve_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let problem = path(&dir, "box.json");
    ok(&["generate", "box3d", "--eps", "0.1", "--out", &problem]);
    let a = path(&dir, "a.json");
    let b = path(&dir, "b.json");
    ok(&["solve", &problem, "--out", &a]);
    ok(&["solve", &problem, "--out", &b]);
    let first = fs::read_to_string(&a).unwrap();
    assert_eq!(first, fs::read_to_string(&b).unwrap());
    let report = drgp::io::parse_solution(&first).unwrap();
    assert!(report.converged());

    let shape = path(&dir, "shape.json");
    ok(&["generate", "shape", "--m", "3", "--ambiguity", "nonneg", "--coupling", "dependent", "--seed", "2", "--out", &shape]);
    let log = path(&dir, "log.csv");
    let c = ok(&["solve", &shape, "--seed", "4", "--iteration-log", &log]);
    let d = ok(&["solve", &shape, "--seed", "4"]);
    assert_eq!(c, d);
    assert!(fs::read_to_string(&log).unwrap().lines().count() > 1);
}

#[test]
fn trajectory_file_is_written_for_convex_programs() {
    let dir = TempDir::new().unwrap();
    let problem = path(&dir, "box.json");
    ok(&["generate", "box3d", "--out", &problem]);
    let traj = path(&dir, "traj.csv");
    ok(&["solve", &problem, "--trajectory", &traj, "--out", &path(&dir, "r.json")]);
    let (header, rows) = csv_rows(&fs::read_to_string(&traj).unwrap());
    assert_eq!(header[0], "t");
    assert!(rows.len() > 2);
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    assert_eq!(drgp(&["solve", &path(&dir, "missing.json")]).status.code(), Some(1));
    let bad = path(&dir, "bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(drgp(&["solve", &bad]).status.code(), Some(1));
    assert_eq!(drgp(&["solve"]).status.code(), Some(1));
    assert_eq!(drgp(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(drgp(&["--help"]).status.code(), Some(0));

    let problem = path(&dir, "box.json");
    ok(&["generate", "box3d", "--out", &problem]);
    assert_eq!(drgp(&["solve", &problem, "--eps", "1.5"]).status.code(), Some(1));
}

#[test]
fn bench_box3d_lands_in_range() {
    let dir = TempDir::new().unwrap();
    let out = path(&dir, "box.csv");
    ok(&["bench", "box3d", "--eps", "0.05", "--out", &out]);
    let (header, rows) = csv_rows(&fs::read_to_string(&out).unwrap());
    assert_eq!(header[0], "schema_version");
    assert_eq!(rows.len(), 2);
    let obj = column(&header, "objective");
    let vs = column(&header, "vs");
    for row in &rows {
        assert_eq!(row[0], "1");
        let value: f64 = row[obj].parse().unwrap();
        assert!((0.27..=0.32).contains(&value), "objective {value}");
        assert_eq!(row[vs], "0");
    }
}

#[test]
fn bench_box3d_sweep_relaxes_with_risk() {
    let stdout = ok(&["bench", "box3d"]);
    let (header, rows) = csv_rows(&stdout);
    let obj = column(&header, "objective");
    let coupling = column(&header, "coupling");
    assert_eq!(rows.len(), 8);
    for name in ["independent", "dependent"] {
        let values: Vec<f64> = rows
            .iter()
            .filter(|r| r[coupling] == name)
            .map(|r| r[obj].parse().unwrap())
            .collect();
        assert_eq!(values.len(), 4);
        assert!(values.windows(2).all(|w| w[1] < w[0]), "{name}: {values:?}");
    }
}

#[test]
fn compare_reports_gap_on_small_sinr() {
    let dir = TempDir::new().unwrap();
    let problem = path(&dir, "sinr.json");
    ok(&["generate", "sinr", "--k", "5", "--seed", "1", "--out", &problem]);
    let stdout = ok(&["compare", &problem, "--seed", "1"]);
    let line = stdout.lines().find(|l| l.starts_with("GAP")).unwrap();
    let gap: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((0.0..=0.10).contains(&gap), "{line}");
}

#[test]
fn robustness_csv_covers_requested_distributions() {
    let dir = TempDir::new().unwrap();
    let problem = path(&dir, "box.json");
    let solution = path(&dir, "sol.json");
    ok(&["generate", "box3d", "--eps", "0.1", "--out", &problem]);
    ok(&["solve", &problem, "--out", &solution]);
    let out = path(&dir, "vs.csv");
    let json = path(&dir, "vs.json");
    ok(&[
        "robustness", &solution, &problem, "--dists", "normal,logistic,gamma", "--n", "200", "--out", &out, "--json", &json,
    ]);
    let (header, rows) = csv_rows(&fs::read_to_string(&out).unwrap());
    assert_eq!(
        header,
        ["schema_version", "distribution", "vs", "violation_rate", "uniform_truncated"]
    );
    let names: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(names.len(), 3);
    for row in &rows {
        let vs: usize = row[2].parse().unwrap();
        let rate: f64 = row[3].parse().unwrap();
        assert!((rate - vs as f64 / 200.0).abs() < 1e-12);
    }
    assert!(Path::new(&json).exists());
}

#[test]
fn batch_writes_one_report_per_problem() {
    let dir = TempDir::new().unwrap();
    let family = path(&dir, "family.json");
    ok(&["generate", "box-family", "--n", "4", "--seed", "3", "--out", &family]);
    let warm = path(&dir, "warm.json");
    let cold = path(&dir, "cold.json");
    ok(&["batch", &family, "--out", &warm]);
    ok(&["batch", &family, "--cold", "--out", &cold]);
    for file in [&warm, &cold] {
        let parsed: drgp::io::BatchReportFile = serde_json::from_str(&fs::read_to_string(file).unwrap()).unwrap();
        assert_eq!(parsed.schema_version, drgp::io::SCHEMA_VERSION);
        assert_eq!(parsed.reports.len(), 4);
        assert!(parsed
            .reports
            .iter()
            .all(|r| matches!(r, drgp::io::BatchEntry::Solved(rep) if rep.converged())));
    }
}
