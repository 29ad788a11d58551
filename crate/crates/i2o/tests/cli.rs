use std::path::Path;
use std::process::{Command, Output};

use i2o::fixture::{self, Fixture};
use i2o_core::theory::generate;
use i2o_core::SeededSource;

fn i2o(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_i2o"));
    cmd.args(args).env_remove("I2O_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(path: &Path, text: &str) -> String {
    std::fs::write(path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn sweep_writes_csv_and_svg() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = i2o(
        &["sweep", "--seeds", "2", "--out", out.to_str().unwrap()],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(csv.starts_with("seed,n,delta_n,loss_n,loss_n_dn,d_gap,lower_bound\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 221);
    let svg = std::fs::read_to_string(out.join("sweep.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert!(svg.contains("stroke-dasharray"));
}

#[test]
fn output_does_not_depend_on_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(threads);
        let o = i2o(
            &[
                "lowerbound-scan",
                "--seeds",
                "12",
                "--out",
                out.to_str().unwrap(),
            ],
            &[("I2O_THREADS", threads)],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        csvs.push(std::fs::read(out.join("lowerbound.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn invalid_configuration_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    for text in [
        "seeds = [3, 3]",
        "unknown_key = 1",
        "[grid]\nn = []",
        "[grid]\nn = [5]\ndelta_min = -5",
        "[instance]\neta = 0.0",
        "[grid]\nd_theta = []",
    ] {
        let cfg = write(&dir.path().join("bad.toml"), text);
        let command = if text.contains("d_theta") {
            "avgcase"
        } else {
            "sweep"
        };
        let o = i2o(&[command, "--config", &cfg, "--out", out], &[]);
        assert_eq!(code(&o), 1, "{text}: {}", stderr(&o));
        assert!(stderr(&o).contains("invalid configuration"), "{text}");
    }
    let o = i2o(&["sweep", "--config", "/nonexistent/c.toml"], &[]);
    assert_eq!(code(&o), 1);
    let o = i2o(&["sweep", "--out", out], &[("I2O_THREADS", "zero")]);
    assert_eq!(code(&o), 1);
    let blocker = write(&dir.path().join("file"), "");
    let o = i2o(&["sweep", "--out", &format!("{blocker}/sub")], &[]);
    assert_eq!(code(&o), 1);
}

#[test]
fn invariant_violation_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        &dir.path().join("short.toml"),
        "seed_count = 2\n[train]\ntol = 1e-2\n",
    );
    let out = dir.path().join("o");
    let o = i2o(
        &[
            "ift-vs-unroll",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("invariant violation"));
    assert!(out.join("ift_vs_unroll.csv").exists());
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        &dir.path().join("c.toml"),
        &format!(
            "seeds = [1, 2, 3]\nout = \"{}\"\n",
            dir.path().join("from-file").display()
        ),
    );
    let out = dir.path().join("from-flag");
    let o = i2o(
        &[
            "sweep",
            "--config",
            &cfg,
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!dir.path().join("from-file").exists());
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.starts_with("7,")));
}

#[test]
fn validate_accepts_good_and_rejects_bad_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let b = generate::general_valid(&SeededSource::new(3), 6).unwrap();
    let good = dir.path().join("good.txt");
    fixture::problem_to_fixture(&b).save(&good).unwrap();
    let o = i2o(&["validate", "--problem", good.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("valid"));

    let mut f = Fixture::load(&good).unwrap();
    let negated = -f.matrix("k_in").unwrap().clone();
    f.set_matrix("b", negated);
    f.attrs.remove("eta");
    let bad = dir.path().join("bad.txt");
    f.save(&bad).unwrap();
    let o = i2o(&["validate", "--problem", bad.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 1);

    let garbled = write(&dir.path().join("garbled.txt"), "matrix k_in 1 2\n1 oops\n");
    let o = i2o(&["validate", "--problem", &garbled], &[]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("garbled.txt:2"), "{}", stderr(&o));

    let o = i2o(&["validate"], &[]);
    assert_eq!(code(&o), 1);
}

#[test]
fn plot_renders_and_rejects_bad_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("avg");
    let o = i2o(
        &["avgcase", "--seeds", "3", "--out", out.to_str().unwrap()],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let svg = dir.path().join("again.svg");
    let o = i2o(
        &[
            "plot",
            out.join("avgcase.csv").to_str().unwrap(),
            "--out",
            svg.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&svg).unwrap();
    assert_eq!(text.matches("class=\"series\"").count(), 4);
    assert_eq!(
        text,
        std::fs::read_to_string(out.join("avgcase.svg")).unwrap()
    );

    let header_only = write(
        &dir.path().join("empty.csv"),
        "seed,n,delta_n,loss_n,loss_n_dn,d_gap,lower_bound\n",
    );
    let target = dir.path().join("never.svg");
    let o = i2o(
        &["plot", &header_only, "--out", target.to_str().unwrap()],
        &[],
    );
    assert_eq!(code(&o), 1);
    assert!(!target.exists());

    let malformed = write(
        &dir.path().join("bad.csv"),
        "seed,n,delta_n,loss_n,loss_n_dn,d_gap,lower_bound\n0,1,0,1,1,0,0\n0,1,1,1,x,0,0\n",
    );
    let o = i2o(
        &["plot", &malformed, "--out", target.to_str().unwrap()],
        &[],
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bad.csv:3"), "{}", stderr(&o));
    assert!(!target.exists());
}

#[test]
fn imaml_demo_writes_task_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        &dir.path().join("m.toml"),
        "[meta]\ntasks = 2\nconflicting = true\n",
    );
    let out = dir.path().join("o");
    let o = i2o(
        &[
            "imaml-demo",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest = out.join("tasks.txt");
    let tasks = fixture::meta_from_fixture(&Fixture::load(&manifest).unwrap()).unwrap();
    assert_eq!(tasks.tasks().len(), 2);

    let cfg2 = write(
        &dir.path().join("m2.toml"),
        &format!("[meta]\nmanifest = \"{}\"\n", manifest.display()),
    );
    let out2 = dir.path().join("o2");
    let o = i2o(
        &[
            "imaml-demo",
            "--config",
            &cfg2,
            "--out",
            out2.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        std::fs::read(out.join("imaml.csv")).unwrap(),
        std::fs::read(out2.join("imaml.csv")).unwrap()
    );
}
