//! End-to-end tests of the `rotvae` binary: exit codes, stdout contracts,
//! and the train -> translate -> grid -> probe pipeline on a tiny synthetic
//! dataset.

use std::path::Path;
use std::process::{Command, Output};

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rotvae"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary spawns")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "command failed\nstdout:\n{}\nstderr:\n{}",
        stdout(o),
        stderr(o)
    );
}

const TINY_CFG: &str = "\
dataset = synthetic
num_domains = 3
num_styles = 2
image_size = 16
samples_per_cell = 8
test_per_cell = 3
channels = 4,8
dim_l = 6
dim_u = 4
beta = 0.001
learning_rate = 0.002
batch_size = 16
epochs = 2
seed = 7
";

fn write_cfg(dir: &Path) {
    std::fs::write(dir.join("tiny.cfg"), TINY_CFG).unwrap();
}

#[test]
fn usage_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["no-such-subcommand"][..],
        &["priors", "--dim", "4"][..],                   // missing --classes
        &["train", "--config", "x", "--bogus-flag"][..], // unknown flag
        &["translate", "--checkpoint", "c.rvck"][..],    // missing --target-class
    ] {
        let out = run_in(dir.path(), args);
        assert_eq!(
            out.status.code(),
            Some(2),
            "args {:?}\nstderr:\n{}",
            args,
            stderr(&out)
        );
    }
}

#[test]
fn runtime_errors_exit_with_code_1_and_a_class_line() {
    let dir = tempfile::tempdir().unwrap();
    let cases: &[(&[&str], &str)] = &[
        (&["train", "--config", "no-such-preset"], "error: config:"),
        (
            &["grid", "--checkpoint", "missing.rvck", "--out", "g.png"],
            "error: io:",
        ),
        (
            &["train", "--config", "tiny.cfg", "--override", "epochs"],
            "error: config:",
        ),
    ];
    write_cfg(dir.path());
    for (args, prefix) in cases {
        let out = run_in(dir.path(), args);
        assert_eq!(out.status.code(), Some(1), "args {args:?}");
        let err = stderr(&out);
        assert!(
            err.starts_with(prefix),
            "args {args:?}: stderr {err:?} does not start with {prefix:?}"
        );
        assert_eq!(err.lines().count(), 1, "one-line error contract: {err:?}");
    }
}

#[test]
fn priors_reports_geometry_and_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "priors", "--dim", "8", "--classes", "3", "--seed", "7", "--out", "geom.rvps",
        ],
    );
    assert_ok(&out);
    let text = stdout(&out);
    assert!(text.contains("dim_l = 8, classes = 3, seed = 7"), "{text}");
    assert!(text.contains("min pairwise distance"), "{text}");
    assert!(text.contains("transport residual"), "{text}");
    // All three rotations are proper: determinant column prints 1.000000.
    assert_eq!(text.matches("1.000000").count(), 3, "{text}");

    // Inspecting the saved file prints the same diagnostics.
    let again = run_in(dir.path(), &["priors", "--prior-spec", "geom.rvps"]);
    assert_ok(&again);
    let trimmed = text.replace(&format!("saved: geom.rvps\n"), "");
    assert_eq!(stdout(&again), trimmed);
}

#[test]
fn pipeline_train_grid_probe_translate() {
    let dir = tempfile::tempdir().unwrap();
    write_cfg(dir.path());

    // Train.
    let out = run_in(
        dir.path(),
        &["train", "--config", "tiny.cfg", "--out", "run"],
    );
    assert_ok(&out);
    for f in [
        "run/checkpoint.rvck",
        "run/prior.rvps",
        "run/metrics.jsonl",
        "run/eval.jsonl",
    ] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }

    // Re-running the same train command is a no-op, not an error.
    let rerun = run_in(
        dir.path(),
        &["train", "--config", "tiny.cfg", "--out", "run"],
    );
    assert_ok(&rerun);
    assert!(stdout(&rerun).contains("training already complete"));

    // Resume with more epochs picks up from the checkpoint.
    let more = run_in(
        dir.path(),
        &[
            "train",
            "--config",
            "tiny.cfg",
            "--override",
            "epochs=3",
            "--out",
            "run",
        ],
    );
    assert_ok(&more);
    assert!(stdout(&more).contains("resuming from"), "{}", stdout(&more));

    // Grid: 3 classes -> 3 rows x 4 cols of 16x16 cells in (16+2)-pixel tiles.
    let grid = run_in(
        dir.path(),
        &[
            "grid",
            "--checkpoint",
            "run/checkpoint.rvck",
            "--out",
            "grid.png",
        ],
    );
    assert_ok(&grid);
    let img = image::open(dir.path().join("grid.png")).unwrap();
    assert_eq!((img.height(), img.width()), (18 * 3, 18 * 4));

    // Probe: human table plus a JSON line on stdout, appended to probes.json.
    let probe = run_in(dir.path(), &["probe", "--checkpoint", "run/checkpoint.rvck"]);
    assert_ok(&probe);
    let ptext = stdout(&probe);
    let json_line = ptext
        .lines()
        .find(|l| l.starts_with('{'))
        .expect("JSON line on stdout");
    let v: serde_json::Value = serde_json::from_str(json_line).unwrap();
    for key in ["acc_l", "acc_u", "chance"] {
        let pct = v[key].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&pct), "{key} = {pct}");
    }
    assert!((v["chance"].as_f64().unwrap() - 100.0 / 3.0).abs() < 1e-9);
    let appended = std::fs::read_to_string(dir.path().join("run/probes.json")).unwrap();
    assert_eq!(appended.lines().last().unwrap(), json_line);

    // Translate: strips of originals and translated images appear.
    let tr = run_in(
        dir.path(),
        &[
            "translate",
            "--checkpoint",
            "run/checkpoint.rvck",
            "--target-class",
            "2",
            "--out",
            "tr",
        ],
    );
    assert_ok(&tr);
    assert!(dir.path().join("tr/originals.png").exists());
    assert!(dir.path().join("tr/translated-to-2.png").exists());

    // Sample mode is reproducible per seed and changes with it.
    let sample = |out_dir: &str, seed: &str| {
        let o = run_in(
            dir.path(),
            &[
                "translate",
                "--checkpoint",
                "run/checkpoint.rvck",
                "--target-class",
                "1",
                "--mode",
                "sample",
                "--seed",
                seed,
                "--out",
                out_dir,
            ],
        );
        assert_ok(&o);
        std::fs::read(dir.path().join(out_dir).join("translated-to-1.png")).unwrap()
    };
    let a = sample("s1", "5");
    let b = sample("s2", "5");
    let c = sample("s3", "6");
    assert_eq!(a, b, "same seed must reproduce the same bytes");
    assert_ne!(a, c, "different seed should perturb the output");

    // Source-class filtering works with an explicit class.
    let src = run_in(
        dir.path(),
        &[
            "translate",
            "--checkpoint",
            "run/checkpoint.rvck",
            "--target-class",
            "0",
            "--source-class",
            "1",
            "--out",
            "src",
        ],
    );
    assert_ok(&src);
    // test_per_cell = 3 and 2 styles per domain leave 6 class-1 test images.
    assert!(stdout(&src).contains("translated 6 test images to class 0"));
}

#[test]
fn checkpoint_config_can_be_overridden_at_inference() {
    let dir = tempfile::tempdir().unwrap();
    write_cfg(dir.path());
    assert_ok(&run_in(
        dir.path(),
        &["train", "--config", "tiny.cfg", "--out", "run"],
    ));
    // Shrink the held-out split via an override layered on the embedded
    // config: 1 test item per cell and 2 styles leave 2 images of class 1.
    let out = run_in(
        dir.path(),
        &[
            "translate",
            "--checkpoint",
            "run/checkpoint.rvck",
            "--target-class",
            "0",
            "--source-class",
            "1",
            "--override",
            "test_per_cell=1",
            "--out",
            "tr",
        ],
    );
    assert_ok(&out);
    assert!(stdout(&out).contains("translated 2 test images"), "{}", stdout(&out));
}
