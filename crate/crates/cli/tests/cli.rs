use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_gfbsde");

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn gfbsde(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("GFBSDE_SEED")
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Problem file with one line replaced.
fn variant(dir: &Path, name: &str, from: &str, to: &str) -> PathBuf {
    let text = std::fs::read_to_string(repo_file("problems/smooth-coupled.toml")).unwrap();
    assert!(text.contains(from));
    let p = dir.join(name);
    std::fs::write(&p, text.replace(from, to)).unwrap();
    p
}

#[test]
fn certify_weakly_coupled_exits_zero_with_contracting_lambda() {
    let o = gfbsde(&["certify", "catalog:weakly-coupled"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["result"]["verdict"], "EXISTS_UNIQUE_P_GE2");
    let lambda = v["result"]["constants"]["lambda_p"]["value"].as_f64().unwrap();
    assert!(lambda < 1.0, "{lambda}");
    assert_eq!(v["header"]["schema"], "certify/1");
    assert_eq!(v["header"]["seed"], 24301);
    assert_eq!(v["header"]["cp-formula"], "(10*p)^(p/2)");
}

#[test]
fn malformed_expression_exits_one_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let bad = variant(dir.path(), "bad.toml", "g = \"0\"", "g = \"1 + * 2\"");
    let o = gfbsde(&["certify", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("line 15, column 10"), "{}", stderr(&o));
}

#[test]
fn malformed_flag_expression_exits_one_with_column() {
    let o = gfbsde(&["gexp", "catalog:convex-terminal", "--payoff", "x^"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("column 3") && stderr(&o).contains("payoff"), "{}", stderr(&o));
}

#[test]
fn compare_initial_theorem_exits_zero_with_battery_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("battery.csv");
    let o = gfbsde(&[
        "compare", "--theorem", "42", "--seeds", "2", "--grids", "8,16", "--paths", "400", "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.contains("# schema: compare/1"));
    assert!(text.contains("# violations: 0"));
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert!(rows[0].starts_with("seed,grid,y0_1,y0_2,margin"));
    assert_eq!(rows.len(), 1 + 4);
    assert!(rows[1..].iter().all(|r| r.contains(",PASS,")));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let o = gfbsde(&["bogus"]);
    assert_eq!(code(&o), 1);

    let o = gfbsde(&["certify", "catalog:weakly-coupled", "--payoff", "x"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("`payoff`"), "{}", stderr(&o));

    let o = gfbsde(&["certify", "catalog:nope"]);
    assert_eq!(code(&o), 1);

    let strong = variant(d, "strong.toml", "L2 = 0.005", "L2 = 0.5");
    let o = gfbsde(&["certify", strong.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let o = gfbsde(&["solve-fbsde", strong.to_str().unwrap()]);
    assert_eq!(code(&o), 2);

    let o = gfbsde(&["solve-fbsde", "catalog:weakly-coupled", "--max-iter", "1", "--paths", "200"]);
    assert_eq!(code(&o), 2);

    let inf = variant(d, "inf.toml", "b = [\"0.05*sin(x) + 0.005*tanh(y)\"]", "b = [\"1/0\"]");
    let o = gfbsde(&["solve-sde", inf.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("grid sizing"), "{}", stderr(&o));

    let o = gfbsde(&["duality", "catalog:decoupled"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("`problem`"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "command = \"certify\"\nproblem = \"catalog:decoupled\"\ncolour = 3\n").unwrap();
    let o = gfbsde(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("colour"));
}

#[test]
fn seed_from_environment_is_used_and_logged() {
    let o = Command::new(BIN)
        .args(["gexp", "catalog:convex-terminal", "--paths", "100", "--n-steps", "20"])
        .env("GFBSDE_SEED", "99")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("# seed: 99\n"));
    assert!(stderr(&o).contains("GFBSDE_SEED"));
    let o = Command::new(BIN)
        .args(["gexp", "catalog:convex-terminal", "--paths", "100", "--n-steps", "20", "--seed", "5"])
        .env("GFBSDE_SEED", "99")
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&o.stdout).contains("# seed: 5\n"));
}

#[test]
fn config_file_matches_flags() {
    let dir = tempfile::tempdir().unwrap();
    let problem = repo_file("problems/smooth-coupled.toml");
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "command = \"solve-fbsde\"\nproblem = {:?}\ntol = 1e-6\npaths = 300\nseed = 7\noutput = \"a.csv\"\n",
            problem.to_str().unwrap()
        ),
    )
    .unwrap();
    let o = gfbsde(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let b = dir.path().join("b.csv");
    let o = gfbsde(&[
        "solve-fbsde",
        problem.to_str().unwrap(),
        "--tol",
        "1e-6",
        "--paths",
        "300",
        "--seed",
        "7",
        "-o",
        b.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_eq!(read("a.csv.trace.csv"), read("b.csv.trace.csv"));
}

/// Each command twice on one thread and once on four; every emitted file
/// must match byte for byte.
#[test]
fn outputs_are_byte_identical_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let smooth = repo_file("problems/smooth-coupled.toml");
    let smooth = smooth.to_str().unwrap();
    let cases: Vec<(&str, Vec<&str>)> = vec![
        ("certify", vec!["certify", "catalog:weakly-coupled"]),
        ("certify-csv", vec!["certify", smooth, "--format", "csv"]),
        ("gexp", vec!["gexp", "catalog:convex-terminal", "--n-steps", "50", "--paths", "2000"]),
        ("sde", vec!["solve-sde", smooth, "--n-steps", "16", "--paths", "500"]),
        ("bsde", vec!["solve-bsde", "catalog:convex-terminal", "--n-steps", "20", "--paths", "500", "--n-space", "401"]),
        ("fbsde", vec!["solve-fbsde", smooth, "--paths", "500"]),
        ("fbsde-paths", vec!["solve-fbsde", "catalog:weakly-coupled", "--backend", "paths", "--n-steps", "16", "--paths", "400"]),
        ("compare", vec!["compare", "--theorem", "41", "--seeds", "2", "--grids", "8,16", "--paths", "300"]),
        ("duality", vec!["duality", "catalog:monotone-pair", "--n-steps", "16", "--paths", "400"]),
    ];
    for (name, args) in &cases {
        let mut files: Vec<Vec<Vec<u8>>> = Vec::new();
        for (run, threads) in ["1", "1", "4"].iter().enumerate() {
            let out = dir.path().join(format!("{name}-{run}.out"));
            let mut a = args.clone();
            a.extend(["--threads", threads, "-o", out.to_str().unwrap()]);
            let o = gfbsde(&a);
            assert!(code(&o) == 0 || code(&o) == 2, "{name}: {}", stderr(&o));
            let mut got = vec![std::fs::read(&out).unwrap()];
            let trace = PathBuf::from(format!("{}.trace.csv", out.display()));
            if trace.exists() {
                got.push(std::fs::read(&trace).unwrap());
            }
            files.push(got);
        }
        assert_eq!(files[0], files[1], "{name}: repeated run differs");
        assert_eq!(files[0], files[2], "{name}: thread count changes output");
    }
}
