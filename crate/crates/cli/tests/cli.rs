//! End-to-end checks of the binary: exit codes, determinism, and the
//! synth -> train -> generate -> evaluate -> diagnose pipeline on a tiny
//! model.

use std::path::Path;
use std::process::{Command, Output};

fn facediff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facediff"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// All files under `dir`, as (relative path, bytes), sorted.
fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(dir)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn bad_flags_exit_with_usage_code() {
    assert_code(&facediff(&["frobnicate"]), 2);
    assert_code(&facediff(&["--nope"]), 2);
    assert_code(&facediff(&["synth", "--n"]), 2);
    assert_code(&facediff(&["evaluate"]), 2);
    assert_code(
        &facediff(&["synth", "--n", "1", "--out-dir", "/tmp/x", "--extra"]),
        2,
    );
}

#[test]
fn runtime_failures_exit_one() {
    let out = facediff(&[
        "generate",
        "--audio",
        "/nonexistent/a.msmd",
        "--style",
        "none",
        "--checkpoint",
        "/nonexistent/m.ckpt",
        "--out",
        "/tmp/out.msmd",
    ]);
    assert_code(&out, 1);
    assert!(
        !String::from_utf8_lossy(&out.stderr).is_empty(),
        "error goes to stderr"
    );
}

#[test]
fn synth_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let d1 = tmp.path().join("d1");
    let d2 = tmp.path().join("d2");
    for d in [&d1, &d2] {
        assert_ok(&facediff(&[
            "synth",
            "--n",
            "2",
            "--seed",
            "7",
            "--out-dir",
            d.to_str().unwrap(),
            "--d-motion",
            "8",
            "--min-frames",
            "12",
            "--max-frames",
            "14",
        ]));
    }
    let c1 = dir_contents(&d1);
    let c2 = dir_contents(&d2);
    assert!(!c1.is_empty());
    assert_eq!(
        c1, c2,
        "same seed must produce identical directory contents"
    );
}

#[test]
fn evaluate_zero_on_identical_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_ok(&facediff(&[
        "synth",
        "--n",
        "1",
        "--seed",
        "3",
        "--out-dir",
        data.to_str().unwrap(),
        "--d-motion",
        "8",
        "--min-frames",
        "12",
        "--max-frames",
        "12",
    ]));
    let motion = data.join("motion/syn0000.msmd");
    let out = facediff(&[
        "evaluate",
        "--gt",
        motion.to_str().unwrap(),
        "--gen",
        motion.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let report: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("stdout is a JSON report");
    for key in ["mse", "lve", "fdd", "mod"] {
        assert_eq!(report[key], 0.0, "{key} must be zero on identical inputs");
    }
}

#[test]
fn curate_filters_by_angle() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_ok(&facediff(&[
        "synth",
        "--n",
        "4",
        "--seed",
        "5",
        "--out-dir",
        data.to_str().unwrap(),
        "--d-motion",
        "8",
        "--min-frames",
        "12",
        "--max-frames",
        "12",
    ]));
    // Push one record's head pose out of range.
    let manifest = data.join("manifest.jsonl");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let mut lines: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let n_frames = lines[1]["yaw"].as_array().unwrap().len();
    lines[1]["yaw"] = serde_json::json!(vec![60.0; n_frames]);
    let edited = tmp.path().join("edited.jsonl");
    let body: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
    std::fs::write(&edited, body.join("\n") + "\n").unwrap();

    let kept_path = tmp.path().join("kept.jsonl");
    let out = facediff(&[
        "curate",
        "--manifest",
        edited.to_str().unwrap(),
        "--out",
        kept_path.to_str().unwrap(),
    ]);
    assert_ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("kept 3 of 4"));
    let kept = std::fs::read_to_string(&kept_path).unwrap();
    assert_eq!(kept.lines().count(), 3);
    assert!(
        !kept.contains("syn0001"),
        "the off-angle record must be dropped"
    );
}

#[test]
fn pipeline_train_generate_evaluate_diagnose() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_ok(&facediff(&[
        "synth",
        "--n",
        "4",
        "--seed",
        "11",
        "--out-dir",
        data.to_str().unwrap(),
        "--d-motion",
        "8",
        "--min-frames",
        "14",
        "--max-frames",
        "16",
    ]));

    let config = tmp.path().join("train.cfg");
    std::fs::write(
        &config,
        "lr = 0.002\nbatch = 2\nmax_iters = 30\nval_every = 10\ncheckpoint_every = 10\n\
         patience = 5\ntrain_ratio = 0.75\n\
         model_d_motion = 8\nmodel_d_audio = 6\nmodel_d_style = 3\nmodel_hidden = 8\n\
         model_denoiser_layers = 1\nmodel_denoiser_heads = 2\nmodel_style_layers = 1\n\
         model_style_heads = 2\nmodel_ffn_mult = 2\nmodel_basis_k = 2\nmodel_basis_hidden = 8\n\
         model_window = 6\nmodel_prev_window = 2\nmodel_t_steps = 10\n",
    )
    .unwrap();
    let ckpt_dir = tmp.path().join("ckpt");
    let out = facediff(&[
        "train",
        "--manifest",
        data.join("manifest.jsonl").to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        ckpt_dir.to_str().unwrap(),
        "--seed",
        "1",
    ]);
    assert_ok(&out);
    let ckpt = ckpt_dir.join("final.ckpt");
    assert!(ckpt.exists());

    // Generation is deterministic per seed and changes with it.
    let audio = data.join("audio/syn0000.msmd");
    let style = data.join("motion/syn0001.msmd");
    let gen_a = tmp.path().join("gen_a.msmd");
    let gen_b = tmp.path().join("gen_b.msmd");
    let gen_c = tmp.path().join("gen_c.msmd");
    let alpha = tmp.path().join("alpha.msmd");
    for (path, seed) in [(&gen_a, "9"), (&gen_b, "9"), (&gen_c, "10")] {
        let mut args = vec![
            "generate",
            "--audio",
            audio.to_str().unwrap(),
            "--style",
            style.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--cfg-audio",
            "1.5",
            "--cfg-style",
            "2.0",
            "--seed",
            seed,
            "--out",
            path.to_str().unwrap(),
        ];
        let alpha_s = alpha.display().to_string();
        if path == &gen_a {
            args.extend_from_slice(&["--alpha-out", &alpha_s]);
            assert_ok(&facediff(&args));
        } else {
            assert_ok(&facediff(&args));
        }
    }
    assert_eq!(
        std::fs::read(&gen_a).unwrap(),
        std::fs::read(&gen_b).unwrap()
    );
    assert_ne!(
        std::fs::read(&gen_a).unwrap(),
        std::fs::read(&gen_c).unwrap()
    );
    assert!(alpha.exists());

    let out = facediff(&[
        "evaluate",
        "--gt",
        data.join("motion/syn0000.msmd").to_str().unwrap(),
        "--gen",
        gen_a.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["mse", "lve", "fdd", "mod"] {
        let v = report[key].as_f64().unwrap();
        assert!(v.is_finite() && v >= 0.0, "{key} = {v}");
    }

    let diag = tmp.path().join("diag");
    assert_ok(&facediff(&[
        "diagnose",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--style",
        style.to_str().unwrap(),
        "--audio",
        audio.to_str().unwrap(),
        "--seed",
        "5",
        "--out-dir",
        diag.to_str().unwrap(),
    ]));
    let basis = std::fs::read_to_string(diag.join("basis_vertices.tsv")).unwrap();
    let basis_rows: Vec<&str> = basis
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .collect();
    assert_eq!(basis_rows.len(), 2, "one row per basis vector");
    let alpha_text = std::fs::read_to_string(diag.join("alpha.tsv")).unwrap();
    let alpha_rows: Vec<&str> = alpha_text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .collect();
    let n_frames = std::fs::read_to_string(data.join("manifest.jsonl"))
        .unwrap()
        .lines()
        .next()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["duration_frames"]
                .as_u64()
                .unwrap() as usize
        })
        .unwrap();
    assert_eq!(
        alpha_rows.len(),
        n_frames,
        "one alpha row per generated frame"
    );
    assert!(
        alpha_rows.iter().all(|r| r.split('\t').count() == 2),
        "K columns per row"
    );
}
