use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use texsynth::fixture::texture_fixture;
use texsynth::grid::{encode_label_png, write_grid, GridFormat};
use texsynth::{BinaryMask, LabelMap};

fn texsynth(project: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_texsynth"))
        .arg("--project")
        .arg(project)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(stdout.lines().last().unwrap_or("null")).unwrap_or(Value::Null)
}

fn failure(out: &Output) -> Value {
    assert!(
        !out.status.success(),
        "expected failure, got {}",
        String::from_utf8_lossy(&out.stdout)
    );
    let stderr = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(stderr.lines().last().expect("error on stderr")).expect("structured error")
}

/// A project holding one fixture image, with a short schedule.
fn project_with_image() -> (tempfile::TempDir, std::path::PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("proj");
    ok(&texsynth(
        &dir,
        &["init", "--set", "diffusion.steps=8", "--json"],
    ));
    let png = tmp.path().join("rust.png");
    write_grid(&png, &texture_fixture(2).images[0], GridFormat::Png8).unwrap();
    let added = ok(&texsynth(&dir, &["add", png.to_str().unwrap(), "--json"]));
    assert_eq!(added["image"], "rust");
    (tmp, dir)
}

#[test]
fn same_seed_gives_identical_synthesis() {
    let (tmp, dir) = project_with_image();
    let a = tmp.path().join("a.png");
    let b = tmp.path().join("b.txf1");
    let c = tmp.path().join("c.txf1");
    let run = |out: &Path, seed: &str| {
        ok(&texsynth(
            &dir,
            &[
                "synth",
                "--height",
                "80",
                "--width",
                "120",
                "--seed",
                seed,
                "--out",
                out.to_str().unwrap(),
                "--json",
            ],
        ))
    };
    let first = run(&a, "7");
    assert_eq!(first["seed"], 7);
    assert_eq!(first["state"], "done");
    run(&b, "7");
    let again = tmp.path().join("b2.txf1");
    run(&again, "7");
    assert_eq!(std::fs::read(&b).unwrap(), std::fs::read(&again).unwrap());
    run(&c, "8");
    assert_ne!(std::fs::read(&b).unwrap(), std::fs::read(&c).unwrap());
    let png = texsynth::grid::read_grid(&a, GridFormat::Png8).unwrap();
    assert_eq!(png.shape(), (80, 120, 3));
}

#[test]
fn tile_512_passes_the_seam_check() {
    let (_tmp, dir) = project_with_image();
    let job = ok(&texsynth(
        &dir,
        &[
            "tile", "--height", "512", "--width", "512", "--seed", "3", "--json",
        ],
    ));
    assert_eq!(job["kind"], "tile");
    assert_eq!(
        job["result"]["seam_passes"], true,
        "{}",
        job["result"]["seam"]
    );
}

#[test]
fn edit_needs_a_trajectory() {
    let (tmp, dir) = project_with_image();
    let labels = tmp.path().join("labels.png");
    let mask = tmp.path().join("mask.png");
    std::fs::write(
        &labels,
        encode_label_png(&LabelMap::uniform(96, 96, 2, 1).unwrap()).unwrap(),
    )
    .unwrap();
    let m = BinaryMask::from_fn(96, 96, |y, x| y < 20 && x < 20);
    write_grid(&mask, &m.to_grid(), GridFormat::Png8).unwrap();
    let args = [
        "edit",
        "--image",
        "rust",
        "--labels",
        labels.to_str().unwrap(),
        "--mask",
        mask.to_str().unwrap(),
    ];

    let err = failure(&texsynth(&dir, &args));
    assert_eq!(err["code"], "missing_prerequisite");
    assert_eq!(err["missing_prerequisite"], "invert");
    assert!(
        err["message"].as_str().unwrap().contains("invert first"),
        "{err}"
    );

    let inverted = ok(&texsynth(&dir, &["invert", "--image", "rust", "--json"]));
    assert_eq!(inverted["result"]["steps"], 42);
    let out = tmp.path().join("edited.png");
    let mut with_out = args.to_vec();
    with_out.extend(["--out", out.to_str().unwrap(), "--json"]);
    let edited = ok(&texsynth(&dir, &with_out));
    assert_eq!(edited["result"]["revision"], 1);
    assert!(out.is_file());
}

#[test]
fn errors_are_structured() {
    let (_tmp, dir) = project_with_image();
    let err = failure(&texsynth(&dir, &["segment"]));
    assert_eq!(err["missing_prerequisite"], "detect");
    let err = failure(&texsynth(&dir, &["status", "--set", "diffusion.steps=0"]));
    assert_eq!(err["code"], "invalid");
    let err = failure(&texsynth(&dir, &["invert", "--image", "ghost"]));
    assert_eq!(err["code"], "not_found");
    let err = failure(&texsynth(&dir, &["init"]));
    assert_eq!(err["code"], "conflict");
    let missing = dir.join("nothing-here");
    let err = failure(&texsynth(&missing, &["status"]));
    assert_eq!(err["code"], "not_found");

    let status = ok(&texsynth(&dir, &["status", "--json"]));
    assert_eq!(status["images"]["rust"]["origin"], "source");
    assert_eq!(status["stages"], serde_json::json!({}));
}

#[test]
fn config_file_replaces_the_stored_one_for_a_run() {
    let (tmp, dir) = project_with_image();
    let cfg = tmp.path().join("alt.toml");
    std::fs::write(&cfg, "[edit]\nsteps = 12\n").unwrap();
    let job = ok(&texsynth(
        &dir,
        &[
            "invert",
            "--image",
            "rust",
            "--config",
            cfg.to_str().unwrap(),
            "--json",
        ],
    ));
    assert_eq!(job["result"]["steps"], 12);
    let job = ok(&texsynth(
        &dir,
        &[
            "invert",
            "--image",
            "rust",
            "--set",
            "edit.steps=5",
            "--json",
        ],
    ));
    assert_eq!(job["result"]["steps"], 5);
    let stored = std::fs::read_to_string(dir.join("config.toml")).unwrap();
    assert!(
        stored.contains("steps = 8"),
        "init overrides are persisted:\n{stored}"
    );
}
