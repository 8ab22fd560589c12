use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ecotube_core::driver::IdmParams;
use ecotube_core::harness::{synthetic_calibration_case, write_calibration_csv, RunConfig};
use ecotube_core::rng;

fn ecotube(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecotube"))
        .args(args)
        .env("ECOTUBE_OUTPUT_DIR", dir)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ecotube(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(ecotube(dir.path(), &["fly"]).status.code(), Some(1));
    assert_eq!(
        ecotube(dir.path(), &["train", "--method", "greedy"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn mrpi_report_writes_sets_with_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    let o = ecotube(dir.path(), &["mrpi-report"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("mrpi_report.json")).unwrap()).unwrap();
    assert!(v["body"]["invariant"].as_bool().unwrap());
    assert_eq!(v["body"]["horizon"], 20);
    assert_eq!(v["config"]["seed"], v["seed"]);
    let stdout: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stdout["k"], v["body"]["k"]);
}

#[test]
fn oversized_disturbance_is_an_infeasible_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[env.disturbance]\nc_w = 40.0\nsigma = 20.0\n").unwrap();
    let o = ecotube(
        dir.path(),
        &["--config", cfg.to_str().unwrap(), "mrpi-report"],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn config_command_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = ecotube(
        dir.path(),
        &["--seed", "9", "--scenario", "B", "--full-scale", "config"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cfg = RunConfig::from_toml_str(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.episodes, 5000);
    assert_eq!(cfg.rmpc.horizon, 50);
    assert_eq!(cfg.scenario.tag(), "B");
}

#[test]
fn calibrate_recovers_a_distribution_and_rejects_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "t,v_leader,v_follower,gap\n").unwrap();
    let out = dir.path().join("prefs.json");
    let o = ecotube(
        dir.path(),
        &[
            "calibrate",
            "--out",
            out.to_str().unwrap(),
            empty.to_str().unwrap(),
        ],
    );
    assert_eq!(o.status.code(), Some(1));

    let mut r = rng::stream(5, "cli-calibration");
    let mut inputs = Vec::new();
    for (i, t) in [1.0, 1.5, 2.0].iter().enumerate() {
        let rows =
            synthetic_calibration_case(*t, 120, &IdmParams::default(), 0.5, 0.0, 0.0, &mut r)
                .unwrap();
        let p = dir.path().join(format!("case{i}.csv"));
        write_calibration_csv(&p, &rows).unwrap();
        inputs.push(p.to_str().unwrap().to_owned());
    }
    let mut args = vec!["calibrate", "--out", out.to_str().unwrap()];
    args.extend(inputs.iter().map(String::as_str));
    let o = ecotube(dir.path(), &args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let d: serde_json::Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    let entries = d["body"].as_array().unwrap();
    assert!(d["config"].is_object());
    assert_eq!(entries.len(), 3);
}

#[test]
fn plot_data_lists_missing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = ecotube(dir.path(), &["plot-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("trace_C_safe-rl.json"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn train_evaluate_plot_pipeline_is_reproducible() {
    let run = |dir: &Path| {
        let sweep = ["--preferences", "2", "--seeds-per-preference", "1"];
        let o = ecotube(
            dir,
            &[
                "--horizon",
                "10",
                "train",
                "--method",
                "safe-rl",
                "--episodes",
                "2",
            ],
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        for m in ["safe-rl", "rmpc-only"] {
            let mut args = vec!["--horizon", "10", "evaluate", "--method", m];
            args.extend(sweep);
            let o = ecotube(dir, &args);
            assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        }
        let o = ecotube(
            dir,
            &[
                "--horizon",
                "10",
                "train",
                "--method",
                "raw-rl",
                "--episodes",
                "2",
            ],
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let o = ecotube(dir, &["--horizon", "10", "plot-data"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(a.path());
    run(b.path());

    let velocity = fs::read_to_string(a.path().join("plot_velocity_C.csv")).unwrap();
    let mut lines = velocity.lines();
    assert!(lines.next().unwrap().starts_with("# config = {"));
    assert_eq!(lines.next().unwrap(), "step,v_p,v_c,v_h,method");
    let inputs = fs::read_to_string(a.path().join("plot_inputs_C.csv")).unwrap();
    assert!(inputs.lines().nth(1).unwrap().contains("u_l,u_s"));
    let tube = fs::read_to_string(a.path().join("plot_tube_C.csv")).unwrap();
    assert!(tube
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("step,x1,x2,xbar1,xbar2"));

    let mut names: Vec<_> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.len() >= 12);
    for n in names {
        let (x, y) = (
            fs::read(a.path().join(&n)).unwrap(),
            fs::read(b.path().join(&n)).unwrap(),
        );
        let name = n.to_string_lossy();
        if name.ends_with(".csv") {
            // Bodies must match; the header echoes the per-run output directory.
            let body = |v: &[u8]| {
                String::from_utf8_lossy(v)
                    .lines()
                    .skip(1)
                    .collect::<Vec<_>>()
                    .join("\n")
            };
            assert_eq!(body(&x), body(&y), "{name}");
        } else if name.starts_with("checkpoint") {
            assert_eq!(x, y, "{name}");
        }
    }
}
