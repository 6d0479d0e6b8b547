//! End-to-end runs of the `bsde-lab` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsde-lab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_to(dir: &Path, name: &str, args: &[&str]) -> (Output, PathBuf) {
    let out = dir.join(name);
    let mut full: Vec<&str> = args.to_vec();
    let path = out.to_str().unwrap().to_string();
    full.extend(["--out", &path]);
    (run(&full), out)
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn column<'a>(header: &[String], row: &'a [String], name: &str) -> &'a str {
    let i = header
        .iter()
        .position(|h| h == name)
        .unwrap_or_else(|| panic!("no column {name} in {header:?}"));
    &row[i]
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn counterexample_rows_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = run_to(dir.path(), "cx.csv", &["counterexample", "--depths", "8,10,12"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = read_csv(&out);
    assert_eq!(rows.len(), 3);
    assert_eq!(header[0], "N");
    assert!(header.iter().any(|h| h == "rp_2"));

    let meta = std::fs::read_to_string(dir.path().join("cx.csv.meta")).unwrap();
    assert!(meta.contains("command=counterexample"));
    assert!(meta.contains("config.depths=8,10,12"));
    assert!(meta.contains(&format!("version={}", env!("CARGO_PKG_VERSION"))));
    assert!(meta.lines().any(|l| l.starts_with("wall_time_s=")));
}

#[test]
fn oracle_suite_writes_one_row_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = run_to(dir.path(), "lin.csv", &["linear", "--oracle-suite", "--seeds", "12"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = read_csv(&out);
    assert_eq!(rows.len(), 12);
    for row in &rows {
        assert!(column(&header, row, "max_residual").parse::<f64>().unwrap() <= 1e-8);
        assert!(column(&header, row, "max_deviation").parse::<f64>().unwrap() <= 1e-8);
    }
}

#[test]
fn quadratic_cole_hopf_row() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = run_to(dir.path(), "q.csv", &["quadratic", "--driver", "colehopf", "--N", "12"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = read_csv(&out);
    let y0: f64 = column(&header, &rows[0], "Y0").parse().unwrap();
    // ξ = B_T: the scheme gives Z ≡ 1 and Y₀ = T/2 = log E[exp B_T]
    assert!((y0 - 0.5).abs() < 1e-12, "{y0}");
    assert_eq!(column(&header, &rows[0], "triangular"), "true");
    assert_eq!(column(&header, &rows[0], "ab"), "true");
}

#[test]
fn config_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "# norms of a bounded process\nN = 6\ngamma = 2 * cos(b)\ndelta = 0.5, 1, 2\n",
    )
    .unwrap();
    let (o, out) = run_to(
        dir.path(),
        "n.csv",
        &["norms", "--config", cfg.to_str().unwrap(), "--set", "delta=1,2"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = read_csv(&out);
    assert_eq!(rows.len(), 2);
    assert_eq!(column(&header, &rows[0], "N"), "6");
    assert_eq!(column(&header, &rows[1], "delta"), "2");
}

#[test]
fn stability_ratios_are_bounded() {
    let dir = tempfile::tempdir().unwrap();
    for perturbation in ["terminal", "shift"] {
        let (o, out) = run_to(
            dir.path(),
            "s.csv",
            &[
                "stability",
                "--N",
                "8",
                "--terminal",
                "tanh(b)",
                "--perturbation",
                perturbation,
            ],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        let (header, rows) = read_csv(&out);
        assert_eq!(rows.len(), 8);
        for row in &rows {
            let ratio: f64 = column(&header, row, "ratio").parse().unwrap();
            assert!(ratio.is_finite() && ratio <= 10.0, "{perturbation}: {ratio}");
        }
    }
}

#[test]
fn reverse_holder_scalar_source() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = run_to(
        dir.path(),
        "rh.csv",
        &["reverse-holder", "--source", "scalar", "--depths", "6,8", "--p", "2"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = read_csv(&out);
    assert_eq!(rows.len(), 2);
    assert_eq!(column(&header, &rows[0], "source"), "scalar");
}

#[test]
fn upper_plugin_is_flagged_not_triangular() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = run_to(dir.path(), "u.csv", &["quadratic", "--driver", "upper", "--N", "6"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = read_csv(&out);
    assert_eq!(column(&header, &rows[0], "triangular"), "false");
    assert_eq!(column(&header, &rows[0], "ab"), "none");
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 5] = [
        &["norms", "--set", "colour=blue"],
        &["quadratic", "--driver", "nosuch"],
        &["norms", "--d", "3"],
        &["norms", "--gamma", "1 +"],
        &["reverse-holder", "--p", "1"],
    ];
    for args in cases {
        let (o, _) = run_to(dir.path(), "bad.csv", args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).starts_with("error:"));
    }
    let o = run(&["counterexample"]);
    assert_eq!(o.status.code(), Some(2), "missing --out");
}

#[test]
fn solver_errors_exit_with_3_and_name_the_error() {
    let dir = tempfile::tempdir().unwrap();
    let (o, _) = run_to(
        dir.path(),
        "q.csv",
        &[
            "quadratic",
            "--N",
            "3",
            "--terminal",
            "40 * b",
            "--set",
            "k_schedule=2,4",
        ],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("TruncationNotStabilized"), "{}", stderr(&o));
}

#[test]
fn numbers_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = run_to(dir.path(), "cx.csv", &["counterexample", "--depths", "8"]);
    assert!(o.status.success());
    let (header, rows) = read_csv(&out);
    let bmo_z: f64 = column(&header, &rows[0], "bmo_Z").parse().unwrap();
    assert_eq!(bmo_z.to_string(), column(&header, &rows[0], "bmo_Z"));
}
