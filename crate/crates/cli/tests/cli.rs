use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use man_core::arch::{build_model, count_madds, count_params, ManConfig};
use man_core::config::RunConfig;
use man_core::data::{read_png, synth, write_png};
use man_core::optim::{load_weights, save_weights};
use man_core::tensor::Tensor;

fn man(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_man"))
        .args(args)
        .output()
        .expect("spawn man")
}

fn man_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_man"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn man")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_run(dir: &Path, iters: u64) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(
        &path,
        format!(
            "[model]\nvariant = \"custom\"\nscale = 2\nn_blocks = 1\nwidth = 6\n\
             [train]\ntotal_iters = {iters}\nbatch = 2\npatch = 8\nlr0 = 1e-3\nseed = 4\n\
             checkpoint_every = 5\neval_every = 5\n\
             [data.train_synthetic]\nkind = \"scene\"\ncount = 2\nsize = 32\nseed = 1\n\
             [data.eval_synthetic]\nkind = \"scene\"\ncount = 1\nsize = 32\nseed = 7\n"
        ),
    )
    .unwrap();
    path
}

#[test]
fn missing_config_is_exit_1_naming_the_path() {
    let o = man(&["train", "--config", "/no/such/run.toml", "--out", "/tmp/unused-man-out"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("/no/such/run.toml"));
    assert!(!Path::new("/tmp/unused-man-out").exists());
}

#[test]
fn bad_arguments_and_keys_are_exit_1() {
    assert_eq!(code(&man(&["frobnicate"])), 1);
    assert_eq!(code(&man(&["count"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[model]\nwidht = 12\n").unwrap();
    let o = man(&["count", "--config", s(&cfg)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("widht"));
    let run = small_run(dir.path(), 4);
    let out = dir.path().join("out");
    let o = man(&["train", "--config", s(&run), "--out", s(&out), "--set", "train.bogus=1"]);
    assert_eq!(code(&o), 1);
    assert!(!out.exists());
    assert_eq!(code(&man(&["--help"])), 0);
}

#[test]
fn train_writes_artifacts_and_resume_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let run = small_run(dir.path(), 10);
    let full = dir.path().join("full");
    let o = man(&["train", "--config", s(&run), "--out", s(&full), "--quiet"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["config.toml", "loss.csv", "eval_log.csv", "checkpoint.manc", "final.manw"] {
        assert!(full.join(f).exists(), "{f}");
    }
    let resolved = RunConfig::load(&full.join("config.toml")).unwrap();
    assert_eq!(resolved.train_config().unwrap().total_iters, 10);
    assert_eq!(resolved.man_config().unwrap().width, 6);
    let loss = fs::read_to_string(full.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 11);
    assert_eq!(fs::read_to_string(full.join("eval_log.csv")).unwrap().lines().count(), 3);

    let split = dir.path().join("split");
    let o = man(&["train", "--config", s(&run), "--out", s(&split), "--stop-after", "5", "--quiet"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!split.join("final.manw").exists());
    let ckpt = split.join("checkpoint.manc");
    let o = man(&["train", "--config", s(&run), "--out", s(&split), "--resume", s(&ckpt), "--quiet"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(full.join("final.manw")).unwrap(), fs::read(split.join("final.manw")).unwrap());
    assert_eq!(loss, fs::read_to_string(split.join("loss.csv")).unwrap());
}

#[test]
fn single_threaded_training_matches_default() {
    let dir = tempfile::tempdir().unwrap();
    let run = small_run(dir.path(), 4);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = man(&["train", "--config", s(&run), "--out", s(&a), "--quiet"]);
    assert_eq!(code(&o), 0);
    let o = Command::new(env!("CARGO_BIN_EXE_man"))
        .env("MAN_THREADS", "1")
        .args(["train", "--config", s(&run), "--out", s(&b), "--quiet"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(a.join("final.manw")).unwrap(), fs::read(b.join("final.manw")).unwrap());
}

#[test]
fn overrides_reach_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let run = small_run(dir.path(), 10);
    let out = dir.path().join("out");
    let o = man(&["train", "--config", s(&run), "--out", s(&out), "--set", "train.total_iters=3", "--quiet"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("loss.csv")).unwrap().lines().count(), 4);
}

#[test]
fn diverging_training_is_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let run = small_run(dir.path(), 5);
    let out = dir.path().join("out");
    let o = man(&["train", "--config", s(&run), "--out", s(&out), "--set", "train.lr0=1e30", "--quiet"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn missing_training_data_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[data]\ntrain_dir = \"/no/such/dir\"\n").unwrap();
    let o = man(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn overfit_preset_reaches_low_loss() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = configs().join("tiny_overfit.toml");
    let o = man(&["train", "--config", s(&cfg), "--out", s(&out), "--quiet"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("final loss")).expect("final loss line");
    let loss: f64 = line.split_whitespace().nth(2).unwrap().parse().unwrap();
    assert!(loss < 0.01, "{line}");
}

/// Weights that upsample by pixel replication: the head copies RGB into the
/// first three channels, blocks and tail are zeroed and the reconstruction
/// conv feeds every sub-pixel from its source channel.
fn replicating_weights(scale: usize) -> man_core::arch::ModelState {
    let cfg = ManConfig::custom(1, 3, scale);
    let mut m = build_model(&cfg, 0).unwrap();
    for (_, t) in m.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let head = m.get_mut("head.weight").unwrap();
    for c in 0..3 {
        head.set(c, c, 1, 1, 1.0);
    }
    let recon = m.get_mut("recon.weight").unwrap();
    for c in 0..3 {
        for k in 0..scale * scale {
            recon.set(c * scale * scale + k, c, 1, 1, 1.0);
        }
    }
    m
}

fn replicate(lr: &Tensor<f32>, s: usize) -> Tensor<f32> {
    Tensor::from_fn([1, 3, lr.h() * s, lr.w() * s], |_, c, y, x| lr.at(0, c, y / s, x / s))
}

fn oracle_dataset(dir: &Path, scale: usize, n: usize) {
    fs::create_dir_all(dir.join("HR")).unwrap();
    fs::create_dir_all(dir.join(format!("LRx{scale}"))).unwrap();
    for i in 0..n {
        let lr = man_core::data::quantize(&synth::scene(16, 16, i as u64));
        write_png(&dir.join(format!("LRx{scale}/img{i}.png")), &lr).unwrap();
        write_png(&dir.join(format!("HR/img{i}.png")), &replicate(&lr, scale)).unwrap();
    }
}

#[test]
fn eval_scores_an_oracle_as_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("oracle.manw");
    save_weights(&replicating_weights(2), &weights).unwrap();
    let data = dir.path().join("set");
    oracle_dataset(&data, 2, 2);
    let csv = dir.path().join("report.csv");
    let o = man(&["eval", "--weights", s(&weights), "--data", s(&data), "--csv", s(&csv)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "# y_channel=true,shave=2,scale=2,self_ensemble=false");
    assert_eq!(lines[2], "img0,100.000000,1.000000");
    assert_eq!(lines[3], "img1,100.000000,1.000000");
    assert_eq!(lines[4], "mean,100.000000,1.000000");
    assert!(stdout(&o).contains("mean"));

    let csv2 = dir.path().join("ens.csv");
    let o = man(&[
        "eval", "--weights", s(&weights), "--data", s(&data), "--csv", s(&csv2), "--self-ensemble", "--rgb",
        "--shave", "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text2 = fs::read_to_string(&csv2).unwrap();
    assert_eq!(text2.lines().count(), lines.len());
    assert_eq!(text2.lines().next().unwrap(), "# y_channel=false,shave=1,scale=2,self_ensemble=true");

    let o = man(&["eval", "--weights", s(&weights), "--data", s(&data), "--scale", "4", "--csv", s(&csv2)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_with_wrong_scale_data_or_bad_weights_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("w.manw");
    save_weights(&replicating_weights(2), &weights).unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let csv = dir.path().join("r.csv");
    assert_eq!(code(&man(&["eval", "--weights", s(&weights), "--data", s(&empty), "--csv", s(&csv)])), 2);
    let junk = dir.path().join("junk.manw");
    fs::write(&junk, b"not weights").unwrap();
    assert_eq!(code(&man(&["eval", "--weights", s(&junk), "--data", s(&empty), "--csv", s(&csv)])), 2);
}

#[test]
fn sr_writes_scaled_deterministic_output() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("x4.manw");
    save_weights(&build_model(&ManConfig::custom(1, 6, 4), 2).unwrap(), &weights).unwrap();
    let input = dir.path().join("in.png");
    let img = synth::scene(80, 100, 3);
    write_png(&input, &img).unwrap();
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    assert_eq!(code(&man(&["sr", "--weights", s(&weights), "--in", s(&input), "--out", s(&a)])), 0);
    assert_eq!(code(&man(&["sr", "--weights", s(&weights), "--in", s(&input), "--out", s(&b)])), 0);
    let out = read_png(&a).unwrap();
    assert_eq!((out.w(), out.h()), (400, 320));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let gray = dir.path().join("gray.png");
    image::GrayImage::from_fn(20, 12, |x, y| image::Luma([(x * 10 + y) as u8])).save(&gray).unwrap();
    let g = dir.path().join("g.png");
    assert_eq!(code(&man(&["sr", "--weights", s(&weights), "--in", s(&gray), "--out", s(&g)])), 0);
    assert_eq!(read_png(&g).unwrap().shape(), [1, 3, 48, 80]);

    let missing = dir.path().join("missing.png");
    assert_eq!(code(&man(&["sr", "--weights", s(&weights), "--in", s(&missing), "--out", s(&g)])), 2);
}

fn count_output(config: &str, size: Option<&str>) -> (u64, u64) {
    let path = configs().join(config);
    let mut args = vec!["count", "--config", s(&path)];
    if let Some(sz) = size {
        args.extend(["--out-size", sz]);
    }
    let o = man(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    let field = |prefix: &str| -> u64 {
        let line = text.lines().find(|l| l.starts_with(prefix)).unwrap();
        line.split_whitespace().nth(1).unwrap().parse().unwrap()
    };
    (field("params:"), field("madds@"))
}

#[test]
fn count_matches_library_and_published_scale() {
    let (p, m) = count_output("tiny_x4.toml", None);
    let cfg = ManConfig::tiny(4);
    assert_eq!(p, count_params(&cfg).unwrap());
    assert_eq!(m, count_madds(&cfg, 720, 1280).unwrap().headline());
    assert!((p as f64 / 150e3 - 1.0).abs() <= 0.02, "{p}");

    let (p, m) = count_output("light_x4.toml", Some("1280x720"));
    assert!((p as f64 / 840e3 - 1.0).abs() <= 0.02, "{p}");
    assert!((m as f64 / 47.1e9 - 1.0).abs() <= 0.10, "{m}");

    let (p, _) = count_output("classical_x4.toml", Some("64x64"));
    assert!((p as f64 / 8.7e6 - 1.0).abs() <= 0.02, "{p}");
    assert_eq!(code(&man(&["count", "--config", s(&configs().join("tiny_x4.toml")), "--out-size", "0x4"])), 1);
}

fn gradcheck_error(args: &[&str]) -> (i32, f64) {
    let o = man(args);
    let text = stdout(&o);
    let err = text
        .split("max relative error ")
        .nth(1)
        .and_then(|r| r.split_whitespace().next())
        .and_then(|v| v.parse().ok())
        .unwrap_or(f64::NAN);
    (code(&o), err)
}

#[test]
fn gradcheck_passes_and_catches_a_broken_rule() {
    let mut errs = Vec::new();
    for seed in ["0", "1", "2"] {
        let (c, e) = gradcheck_error(&["gradcheck", "--width", "12", "--blocks", "1", "--seed", seed]);
        assert_eq!(c, 0, "seed {seed}: {e}");
        errs.push(e);
    }
    let lo = errs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = errs.iter().cloned().fold(0.0, f64::max);
    assert!(hi <= 10.0 * lo.max(1e-12), "{errs:?}");

    let o = man(&["gradcheck", "--width", "12", "--blocks", "1", "--corrupt-backward", "gelu"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("gradient mismatch"));
    assert_eq!(code(&man(&["gradcheck", "--width", "32"])), 1);
    assert_eq!(code(&man(&["gradcheck", "--corrupt-backward", "nonsense"])), 1);
}

#[test]
fn degrade_mirrors_stems_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("hr");
    fs::create_dir_all(&input).unwrap();
    for (i, name) in ["a.png", "b.png", "flat.png"].iter().enumerate() {
        let img = if *name == "flat.png" {
            Tensor::full([1, 3, 32, 24], 0.4)
        } else {
            synth::scene(32, 24, i as u64)
        };
        write_png(&input.join(name), &img).unwrap();
    }
    let (o1, o2) = (dir.path().join("lr1"), dir.path().join("lr2"));
    assert_eq!(code(&man(&["degrade", "--in", s(&input), "--out", s(&o1), "--scale", "4"])), 0);
    assert_eq!(code(&man(&["degrade", "--in", s(&input), "--out", s(&o2), "--scale", "4"])), 0);
    for name in ["a.png", "b.png", "flat.png"] {
        let lr = read_png(&o1.join(name)).unwrap();
        assert_eq!((lr.w(), lr.h()), (6, 8));
        assert_eq!(fs::read(o1.join(name)).unwrap(), fs::read(o2.join(name)).unwrap());
    }
    let flat = read_png(&o1.join("flat.png")).unwrap();
    assert!(flat.data().iter().all(|&v| v == flat.data()[0]));
    assert_eq!(flat.data()[0], (0.4f32 * 255.0).round() / 255.0);

    fs::write(input.join("broken.png"), b"nope").unwrap();
    assert_eq!(code(&man(&["degrade", "--in", s(&input), "--out", s(&o1), "--scale", "4"])), 2);
}

#[test]
fn synth_then_eval_bicubic_like_data() {
    let dir = tempfile::tempdir().unwrap();
    let o = man_in(dir.path(), &["synth", "--out", "imgs", "--count", "3", "--size", "24"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let files: Vec<_> = fs::read_dir(dir.path().join("imgs")).unwrap().collect();
    assert_eq!(files.len(), 3);
    let weights = dir.path().join("w.manw");
    save_weights(&build_model(&ManConfig::custom(1, 6, 2), 0).unwrap(), &weights).unwrap();
    let o = man_in(dir.path(), &["eval", "--weights", s(&weights), "--data", "imgs"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(load_weights(&weights).is_ok());
}
