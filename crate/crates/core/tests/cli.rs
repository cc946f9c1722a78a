//! End-to-end checks of the command-line surface.

use std::process::{Command, Output};

fn facedet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facedet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn cfg_flags() -> Vec<String> {
    [
        ("synth.train_images", "12"),
        ("synth.val_images", "4"),
        ("optim.iterations", "25"),
        ("image.size", "32"),
        ("backbone.widths", "4,8,8"),
        ("fusion.reducer_channels", "8"),
        ("head.fc_dim", "8"),
        ("roi.pool_size", "3"),
        ("anchors.scales", "1,2"),
        ("rpn.batch", "16"),
        ("head.regions", "16"),
        ("synth.face_min_size", "6"),
        ("synth.face_max_size", "14"),
    ]
    .iter()
    .flat_map(|(k, v)| ["--set".to_string(), format!("{k}={v}")])
    .chain(["--seed".to_string(), "11".to_string()])
    .collect()
}

fn run(parts: &[&str], flags: &[String]) -> Output {
    let mut args: Vec<String> = parts.iter().map(|s| s.to_string()).collect();
    args.extend(flags.iter().cloned());
    Command::new(env!("CARGO_BIN_EXE_facedet"))
        .args(&args)
        .output()
        .expect("binary runs")
}

#[test]
fn gen_train_detect_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let flags = cfg_flags();

    let out = run(&["gen-data", "--out", data.to_str().unwrap()], &flags);
    assert!(out.status.success(), "gen-data failed: {}", stderr(&out));

    let ckpt = dir.path().join("model.ckpt");
    let train_dir = data.join("train");
    let out = run(
        &["train", train_dir.to_str().unwrap(), "--out", ckpt.to_str().unwrap()],
        &flags,
    );
    assert!(out.status.success(), "train failed: {}", stderr(&out));
    let log = stdout(&out);
    assert!(
        log.lines().next().unwrap().starts_with("iter,loss_rpn_cls"),
        "missing log header: {log}"
    );
    assert_eq!(
        log.lines()
            .filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit()))
            .count(),
        25,
        "one log line per iteration"
    );

    let dets = dir.path().join("dets.txt");
    let val_dir = data.join("val");
    let out = run(
        &[
            "detect",
            ckpt.to_str().unwrap(),
            val_dir.to_str().unwrap(),
            "--out",
            dets.to_str().unwrap(),
        ],
        &flags,
    );
    assert!(out.status.success(), "detect failed: {}", stderr(&out));

    let faces = data.join("val/faces.txt");
    let out = run(
        &["eval", dets.to_str().unwrap(), faces.to_str().unwrap()],
        &[],
    );
    assert!(out.status.success(), "eval failed: {}", stderr(&out));
    let text = stdout(&out);
    let last = text.lines().last().unwrap();
    assert!(last.starts_with("AP="), "final stdout line must be AP=: {last}");
}

#[test]
fn detect_with_score_floor_one_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let flags = cfg_flags();

    assert!(run(&["gen-data", "--out", data.to_str().unwrap()], &flags).status.success());
    let ckpt = dir.path().join("model.ckpt");
    let train_dir = data.join("train");
    assert!(run(
        &["train", train_dir.to_str().unwrap(), "--out", ckpt.to_str().unwrap()],
        &flags
    )
    .status
    .success());

    let dets = dir.path().join("dets.txt");
    let val_dir = data.join("val");
    let mut floor_flags = flags.clone();
    floor_flags.extend(["--set".to_string(), "detect.score_floor=1.0".to_string()]);
    assert!(run(
        &[
            "detect",
            ckpt.to_str().unwrap(),
            val_dir.to_str().unwrap(),
            "--out",
            dets.to_str().unwrap(),
        ],
        &floor_flags
    )
    .status
    .success());
    let text = std::fs::read_to_string(&dets).unwrap();
    assert!(
        text.lines().all(|l| l.starts_with('#')),
        "expected header-only detections, got: {text}"
    );
}

#[test]
fn eval_reports_half_ap_for_fp_then_tp() {
    let dir = tempfile::tempdir().unwrap();
    let anns = dir.path().join("faces.txt");
    std::fs::write(&anns, "img.pgm 10 10 10 10\n").unwrap();
    let dets = dir.path().join("dets.txt");
    std::fs::write(
        &dets,
        "img.pgm 0.9 40 40 10 10\nimg.pgm 0.8 10 10 10 10\n",
    )
    .unwrap();
    let out = facedet(&["eval", dets.to_str().unwrap(), anns.to_str().unwrap()]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(
        text.lines().last().unwrap().starts_with("AP=0.5"),
        "want AP=0.5, got: {text}"
    );
}

#[test]
fn eval_perfect_detections_reach_full_ap() {
    let dir = tempfile::tempdir().unwrap();
    let anns = dir.path().join("faces.txt");
    std::fs::write(&anns, "img.pgm 10 10 10 10\nimg.pgm 30 30 8 8\n").unwrap();
    let dets = dir.path().join("dets.txt");
    std::fs::write(
        &dets,
        "img.pgm 0.9 10 10 10 10\nimg.pgm 0.8 30 30 8 8\n",
    )
    .unwrap();
    let out = facedet(&["eval", dets.to_str().unwrap(), anns.to_str().unwrap()]);
    let text = stdout(&out);
    assert!(text.lines().last().unwrap().starts_with("AP=1.0"));

    // Empty detection file scores zero.
    std::fs::write(&dets, "# image score x1 y1 w h\n").unwrap();
    let out = facedet(&["eval", dets.to_str().unwrap(), anns.to_str().unwrap()]);
    let text = stdout(&out);
    assert!(text.lines().last().unwrap().starts_with("AP=0.0"));
}

#[test]
fn eval_rejects_malformed_line_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let anns = dir.path().join("faces.txt");
    std::fs::write(&anns, "img.pgm 10 10 10 10\n").unwrap();
    let dets = dir.path().join("dets.txt");
    std::fs::write(&dets, "img.pgm 0.9 10 10 10 10\nimg.pgm bogus\n").unwrap();
    let out = facedet(&["eval", dets.to_str().unwrap(), anns.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains(":2:"), "missing line number: {err}");
    assert!(err.contains("dets.txt"), "missing file name: {err}");
}

#[test]
fn grad_check_subcommand_passes() {
    let out = facedet(&["grad-check"]);
    assert!(out.status.success(), "grad-check failed: {}", stdout(&out));
    let text = stdout(&out);
    assert!(text.contains("PASS"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn dump_config_shows_published_constants_for_vgg_layout() {
    let out = facedet(&[
        "dump-config",
        "--config",
        concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/vgg16.conf"),
    ]);
    assert!(out.status.success(), "dump-config failed: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("fusion.rpn_scales = 66.84,94.52,94.52"));
    assert!(text.contains("fusion.roi_scales = 57.75,81.67,81.67"));
}

#[test]
fn unknown_config_key_fails_loudly() {
    let out = facedet(&["dump-config", "--set", "nonsense.key=1"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("unknown key"));
}

#[test]
fn checkpoint_guard_blocks_context_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let flags = cfg_flags();

    assert!(run(&["gen-data", "--out", data.to_str().unwrap()], &flags).status.success());
    let ckpt = dir.path().join("model.ckpt");
    let train_dir = data.join("train");
    assert!(run(
        &["train", train_dir.to_str().unwrap(), "--out", ckpt.to_str().unwrap()],
        &flags
    )
    .status
    .success());

    // Context-disabled detect must refuse the context-enabled checkpoint.
    let dets = dir.path().join("dets.txt");
    let val_dir = data.join("val");
    let mut ablated = flags.clone();
    ablated.extend(["--set".to_string(), "context.enabled=false".to_string()]);
    let out = run(
        &[
            "detect",
            ckpt.to_str().unwrap(),
            val_dir.to_str().unwrap(),
            "--out",
            dets.to_str().unwrap(),
        ],
        &ablated,
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("hash mismatch"), "got: {}", stderr(&out));
}

#[test]
fn detect_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let flags = cfg_flags();

    assert!(run(&["gen-data", "--out", data.to_str().unwrap()], &flags).status.success());
    let ckpt = dir.path().join("model.ckpt");
    let train_dir = data.join("train");
    assert!(run(
        &["train", train_dir.to_str().unwrap(), "--out", ckpt.to_str().unwrap()],
        &flags
    )
    .status
    .success());

    let val_dir = data.join("val");
    let run_detect = |name: &str, threads: &str| {
        let path = dir.path().join(name);
        let out = run(
            &[
                "detect",
                ckpt.to_str().unwrap(),
                val_dir.to_str().unwrap(),
                "--threads",
                threads,
                "--out",
                path.to_str().unwrap(),
            ],
            &flags,
        );
        assert!(out.status.success(), "detect failed: {}", stderr(&out));
        std::fs::read(&path).unwrap()
    };
    let a = run_detect("a.txt", "1");
    let b = run_detect("b.txt", "1");
    let c = run_detect("c.txt", "2");
    assert_eq!(a, b, "same-thread reruns must match");
    assert_eq!(a, c, "thread count must not change results");
}
