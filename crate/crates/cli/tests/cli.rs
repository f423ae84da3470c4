use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use splat_mcmc::img::Image;
use splat_mcmc::scene_io::write_png;

fn splat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splat"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// 24×24 image of soft blobs, written as a PNG.
fn scene_png(dir: &Path) -> PathBuf {
    let mut img = Image::new(24, 24);
    for y in 0..24 {
        for x in 0..24 {
            let (fx, fy) = (x as f64, y as f64);
            let a = (-((fx - 7.0).powi(2) + (fy - 8.0).powi(2)) / 18.0).exp();
            let b = (-((fx - 16.0).powi(2) + (fy - 15.0).powi(2)) / 30.0).exp();
            img.set(x, y, 0, 0.9 * a + 0.1);
            img.set(x, y, 1, 0.8 * b + 0.05);
            img.set(x, y, 2, 0.5 * a + 0.4 * b);
        }
    }
    let path = dir.join("scene.png");
    write_png(&img, &path).unwrap();
    path
}

fn train_args<'a>(scene: &'a str, out: &'a str, iters: &'a str) -> Vec<&'a str> {
    vec![
        "train", "--scene", scene, "--mode", "2d", "--out", out, "--iters", iters,
        "--init-count", "30", "--max-gaussians", "60", "--extent-multiplier", "1",
        "--log-every", "5",
    ]
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn zero_iterations_write_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let scene = scene_png(dir.path());
    let out = dir.path().join("run");
    let r = splat(&train_args(s(&scene), s(&out), "0"));
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    for f in ["checkpoints/final.ply", "checkpoints/final.state.json", "metrics.csv", "config.resolved", "renders/0000.png"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let set = splat_mcmc::scene_io::load_checkpoint(&out.join("checkpoints/final.ply")).unwrap();
    assert_eq!(set.len(), 30);
}

#[test]
fn missing_scene_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let r = splat(&["train", "--out", s(dir.path()), "--iters", "1"]);
    assert_eq!(code(&r), 1);
    assert!(stderr(&r).contains("scene"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let r = splat(&["train", "--no-such-flag"]);
    assert_eq!(code(&r), 1);
}

#[test]
fn inconsistent_settings_are_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let scene = scene_png(dir.path());
    let out = dir.path().join("run");
    let r = splat(&[
        "train", "--scene", s(&scene), "--mode", "2d", "--out", s(&out),
        "--init-count", "50", "--max-gaussians", "10",
    ]);
    assert_eq!(code(&r), 1, "{}", stderr(&r));
}

#[test]
fn missing_scene_file_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let r = splat(&train_args("/nonexistent/scene.png", s(dir.path()), "1"));
    assert_eq!(code(&r), 2);
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let scene = scene_png(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let mut args = train_args(s(&scene), s(out), "40");
        args.extend(["--seed", "7", "--deterministic", "--checkpoint-every", "20"]);
        let r = splat(&args);
        assert_eq!(code(&r), 0, "{}", stderr(&r));
    }
    let files = files_under(&a);
    assert_eq!(files, files_under(&b));
    assert!(files.len() >= 7, "{files:?}");
    for f in files {
        if f == Path::new("config.resolved") {
            continue; // records the output directory
        }
        assert!(fs::read(a.join(&f)).unwrap() == fs::read(b.join(&f)).unwrap(), "{} differs", f.display());
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let scene = scene_png(dir.path());
    let (full, part) = (dir.path().join("full"), dir.path().join("part"));
    let mut args = train_args(s(&scene), s(&full), "30");
    args.extend(["--seed", "3", "--deterministic"]);
    assert_eq!(code(&splat(&args)), 0);

    let mut first = train_args(s(&scene), s(&part), "30");
    first.extend(["--seed", "3", "--deterministic", "--checkpoint-every", "12"]);
    assert_eq!(code(&splat(&first)), 0);
    let sidecar = part.join("checkpoints/iter_000012.state.json");
    let resumed = dir.path().join("resumed");
    let mut second = train_args(s(&scene), s(&resumed), "30");
    second.extend(["--seed", "3", "--deterministic", "--resume", s(&sidecar)]);
    let r = splat(&second);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    for f in ["checkpoints/final.ply", "checkpoints/final.state.json", "renders/0000.png"] {
        assert!(fs::read(full.join(f)).unwrap() == fs::read(resumed.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let scene = scene_png(dir.path());
    let cfg = dir.path().join("train.toml");
    fs::write(
        &cfg,
        format!(
            "scene = {:?}\nmode = \"2d\"\niters = 3\nseed = 5\ninit_count = 10\nmax_gaussians = 20\nlambda_o = 0.02\n",
            s(&scene)
        ),
    )
    .unwrap();
    let out = dir.path().join("run");
    let r = splat(&["train", "--config", s(&cfg), "--out", s(&out), "--seed", "9"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let resolved = fs::read_to_string(out.join("config.resolved")).unwrap();
    let c = splat_mcmc::scene_io::TrainConfig::from_toml(&resolved).unwrap();
    assert_eq!(c.seed, 9);
    assert_eq!(c.iters, 3);
    assert_eq!(c.lambda_o, 0.02);
    assert_eq!(c.lambda_sigma, splat_mcmc::scene_io::TrainConfig::default().lambda_sigma);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.toml");
    fs::write(&cfg, "iterations = 3\n").unwrap();
    let r = splat(&["train", "--config", s(&cfg), "--scene", "x.png", "--out", s(dir.path())]);
    assert_eq!(code(&r), 1);
}

fn last_logged_psnr(metrics: &Path) -> f64 {
    let text = fs::read_to_string(metrics).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "psnr_train_view").unwrap();
    text.lines().last().unwrap().split(',').nth(col).unwrap().parse().unwrap()
}

#[test]
fn eval_reproduces_the_logged_psnr() {
    let dir = tempfile::tempdir().unwrap();
    let scene = scene_png(dir.path());
    let out = dir.path().join("run");
    assert_eq!(code(&splat(&train_args(s(&scene), s(&out), "60"))), 0);
    let logged = last_logged_psnr(&out.join("metrics.csv"));

    let ckpt = out.join("checkpoints/final.ply");
    let r = splat(&["eval", "--checkpoint", s(&ckpt), "--scene", s(&scene), "--mode", "2d"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let text = stdout(&r);
    let mean_line = text.lines().find(|l| l.starts_with("mean")).unwrap();
    let measured: f64 = mean_line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((measured - logged).abs() < 0.01, "eval {measured} vs logged {logged}");

    let renders = dir.path().join("renders");
    let r = splat(&["render", "--checkpoint", s(&ckpt), "--scene", s(&scene), "--mode", "2d", "--out", s(&renders)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    assert!(renders.join("0000.png").is_file());
}

#[test]
fn render_from_a_camera_list() {
    let dir = tempfile::tempdir().unwrap();
    let scene = scene_png(dir.path());
    let out = dir.path().join("run");
    assert_eq!(code(&splat(&train_args(s(&scene), s(&out), "0"))), 0);
    let ckpt = out.join("checkpoints/final.ply");
    let cams = dir.path().join("cams.json");
    fs::write(
        &cams,
        r#"[{"name": "wide", "mode": "identity2d", "width": 40, "height": 30},
            {"mode": "pinhole3d", "width": 20, "height": 20, "fx": 30.0,
             "world_to_camera": [[1,0,0,-12],[0,1,0,-12],[0,0,1,40],[0,0,0,1]]}]"#,
    )
    .unwrap();
    let renders = dir.path().join("renders");
    let r = splat(&["render", "--checkpoint", s(&ckpt), "--cameras", s(&cams), "--out", s(&renders)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let wide = splat_mcmc::scene_io::read_png(&renders.join("wide.png")).unwrap();
    assert_eq!((wide.width, wide.height), (40, 30));
    assert!(renders.join("0001.png").is_file());
}

#[test]
fn empty_camera_list_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let scene = scene_png(dir.path());
    let out = dir.path().join("run");
    assert_eq!(code(&splat(&train_args(s(&scene), s(&out), "0"))), 0);
    let cams = dir.path().join("cams.json");
    fs::write(&cams, "[]").unwrap();
    let renders = dir.path().join("renders");
    let ckpt = out.join("checkpoints/final.ply");
    let r = splat(&["render", "--checkpoint", s(&ckpt), "--cameras", s(&cams), "--out", s(&renders)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    assert!(!renders.exists());
}

#[test]
fn malformed_checkpoint_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.ply");
    fs::write(&ckpt, "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n1.0\n").unwrap();
    let cams = dir.path().join("cams.json");
    fs::write(&cams, "[]").unwrap();
    let r = splat(&["render", "--checkpoint", s(&ckpt), "--cameras", s(&cams), "--out", s(dir.path())]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("unsupported format"), "{}", stderr(&r));
}

#[test]
fn verify_passes_on_this_build() {
    let r = splat(&["verify", "--raster-scenes", "10", "--gradient-scenes", "4", "--relocation-trials", "20"]);
    assert_eq!(code(&r), 0, "{}{}", stdout(&r), stderr(&r));
    assert_eq!(stdout(&r).matches(" pass ").count(), 6);
}

#[test]
fn verify_catches_a_sign_flipped_factor() {
    let r = splat(&[
        "verify", "--inject-sign-flip", "--raster-scenes", "0", "--gradient-scenes", "0",
        "--relocation-trials", "0",
    ]);
    assert_eq!(code(&r), 3);
    assert!(stderr(&r).contains("relocation slice integral"));
}

#[test]
fn verify_writes_one_sweep_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let r = splat(&[
        "verify", "--sweep-csv", s(&csv), "--raster-scenes", "0", "--gradient-scenes", "0",
        "--relocation-trials", "0",
    ]);
    assert_eq!(code(&r), 0);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 10 * 8);
}

#[test]
fn help_exits_zero() {
    let r = splat(&["--help"]);
    assert_eq!(code(&r), 0);
    assert!(stdout(&r).contains("verify"));
}
