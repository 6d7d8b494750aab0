//! Black-box tests of the `rseed` binary: outputs, artifacts and exit codes.

mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rseed::decoder::{Arch, DecoderWeights};
use rseed::format;
use rseed::image_io::{load_image, save_png};
use rseed::retinex::{GammaParam, RetinexState};
use rseed::tensor::Tensor;

const TINY: [&str; 4] = ["--seed-channels", "4", "--stage-channels", "8,8"];

fn rseed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rseed")).args(args).env_remove("RSEED_THREADS").output().unwrap()
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

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_image(dir: &Path, name: &str, h: usize, w: usize, phase: f32) -> PathBuf {
    let path = dir.join(name);
    let dark = Tensor::from_fn(&[3, h, w], |i| 0.3 * common::pattern(&[3, h, w], phase).data()[i]);
    save_png(&dark, &path).unwrap();
    path
}

/// Runs a tiny RandomAll enhancement with extra flags.
fn enhance_tiny(extra: &[&str]) -> Output {
    let mut args = vec!["enhance", "--init", "random-all", "--log-every", "0"];
    args.extend_from_slice(&TINY);
    args.extend_from_slice(extra);
    rseed(&args)
}

fn sidecar_value<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(" = ")))
        .unwrap_or_else(|| panic!("{key} missing from sidecar"))
}

#[test]
fn print_config_shows_defaults_and_round_trips() {
    let out = rseed(&["enhance", "--print-config"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    for line in [
        "iterations = 2500",
        "lr = 0.01",
        "optimizer = adam",
        "mode = seed",
        "init = pretrained-reflectance",
        "lambda_re = 12",
        "lambda_e = 0.05",
        "lambda_s = 0.03",
        "lambda_i = 0.01",
        "tau = 0.6",
        "exposure = 0.6",
        "gamma_init = 0.5",
        "seed_channels = 32",
        "stage_channels = 64,64,32,16",
    ] {
        assert!(text.lines().any(|l| l == line), "missing {line:?} in\n{text}");
    }

    let dir = tempfile::tempdir().unwrap();
    let custom = rseed(&["enhance", "--print-config", "--preset", "noref", "--lambda-s", "0", "--seed", "9"]);
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(&cfg_path, stdout(&custom)).unwrap();
    let again = rseed(&["enhance", "--print-config", "--config", s(&cfg_path)]);
    assert_eq!(stdout(&again), stdout(&custom));
    assert!(stdout(&again).contains("iterations = 5000") && stdout(&again).contains("tau = 0.2"));

    // Flags override the file.
    let overridden = rseed(&["enhance", "--print-config", "--config", s(&cfg_path), "--iterations", "7"]);
    assert!(stdout(&overridden).lines().any(|l| l == "iterations = 7"));
    assert!(stdout(&overridden).lines().any(|l| l == "lambda_s = 0"));
}

#[test]
fn enhance_writes_image_sidecar_and_run_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_image(dir.path(), "dark.png", 12, 20, 0.5);
    let output = dir.path().join("bright.png");
    let run_dir = dir.path().join("run");
    let out = enhance_tiny(&[
        s(&input),
        "-o",
        s(&output),
        "--iterations",
        "5",
        "--snapshot-every",
        "2",
        "--run-dir",
        s(&run_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(load_image(&output).unwrap().shape(), &[3, 12, 20]);

    let sidecar = std::fs::read_to_string(dir.path().join("bright.png.run.txt")).unwrap();
    assert_eq!(sidecar_value(&sidecar, "iterations_run"), "5");
    assert_eq!(sidecar_value(&sidecar, "weights_r_sha256_before"), sidecar_value(&sidecar, "weights_r_sha256_after"));
    assert_eq!(sidecar_value(&sidecar, "weights_l_sha256_before"), sidecar_value(&sidecar, "weights_l_sha256_after"));
    assert_eq!(sidecar_value(&sidecar, "weights_r_sha256_before").len(), 64);
    assert!(sidecar_value(&sidecar, "mean_iter_seconds").parse::<f64>().unwrap() > 0.0);
    let trace: Vec<&str> = sidecar.lines().filter(|l| l.starts_with("iter=")).collect();
    assert_eq!(trace.len(), 5);
    let keys: Vec<&str> = trace[0].split(' ').map(|kv| kv.split('=').next().unwrap()).collect();
    assert_eq!(keys, ["iter", "l_re", "l_e", "l_s", "l_i", "total", "gamma"]);
    assert!(trace[0].ends_with("gamma=0.500000"), "{}", trace[0]);

    for it in [0, 2, 4] {
        for map in ["enhanced", "reflectance", "illumination"] {
            assert!(run_dir.join(format!("iter{it:06}_{map}.png")).is_file(), "iteration {it} {map}");
        }
    }
    assert!(!run_dir.join("iter000001_enhanced.png").exists());

    // The saved maps recompose to exactly the written image.
    let maps = format::load_maps(&run_dir.join("final.rsmp")).unwrap();
    let gamma = GammaParam::new(maps.gamma).unwrap();
    let composed = RetinexState::new(maps.reflectance, maps.illumination, gamma).unwrap().enhance_compose().unwrap();
    let recomposed = dir.path().join("recomposed.png");
    save_png(&composed, &recomposed).unwrap();
    assert_eq!(load_image(&recomposed).unwrap(), load_image(&output).unwrap());
}

#[test]
fn zero_iterations_still_writes_output() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_image(dir.path(), "x.png", 8, 8, 0.0);
    let out = enhance_tiny(&[s(&input), "--iterations", "0"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(dir.path().join("x_enhanced.png").is_file());
    let sidecar = std::fs::read_to_string(dir.path().join("x_enhanced.png.run.txt")).unwrap();
    assert_eq!(sidecar_value(&sidecar, "iterations_run"), "0");
}

#[test]
fn batch_matches_single_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_image(dir.path(), "a.png", 8, 12, 0.2);
    let b = write_image(dir.path(), "b.png", 16, 8, 1.7);
    let batch_dir = dir.path().join("batch");
    let out = enhance_tiny(&[s(&a), s(&b), "--out-dir", s(&batch_dir), "--iterations", "4", "--jobs", "2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for input in [&a, &b] {
        let single = dir.path().join(format!("single_{}", input.file_name().unwrap().to_str().unwrap()));
        let out = enhance_tiny(&[s(input), "-o", s(&single), "--iterations", "4"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let stem = input.file_stem().unwrap().to_str().unwrap();
        let batched = std::fs::read(batch_dir.join(format!("{stem}_enhanced.png"))).unwrap();
        assert_eq!(batched, std::fs::read(&single).unwrap(), "{stem}");
    }
}

#[test]
fn enhance_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_image(dir.path(), "in.png", 8, 8, 0.0);

    let missing = enhance_tiny(&[s(&dir.path().join("nope.png")), "--iterations", "1"]);
    assert_eq!(code(&missing), 2, "{}", stderr(&missing));
    let garbage = dir.path().join("garbage.png");
    std::fs::write(&garbage, b"not an image").unwrap();
    assert_eq!(code(&enhance_tiny(&[s(&garbage), "--iterations", "1"])), 2);

    assert_eq!(code(&rseed(&["enhance", s(&input), "--no-such-flag"])), 1);
    assert_eq!(code(&enhance_tiny(&[s(&input), "--mode", "sideways"])), 1);
    assert_eq!(code(&enhance_tiny(&[s(&input), "--lambda-s=-1"])), 1);
    // Default init needs a reflectance weight file.
    let no_weights = rseed(&["enhance", s(&input), "--iterations", "1"]);
    assert_eq!(code(&no_weights), 1, "{}", stderr(&no_weights));
    // Too small for four upsampling stages.
    let small = rseed(&["enhance", s(&input), "--init", "random-all", "--iterations", "1"]);
    assert_eq!(code(&small), 1, "{}", stderr(&small));

    // NaN weights abort with the iteration number.
    let arch = Arch::new(4, vec![8, 8], 3).unwrap();
    let w = DecoderWeights::init_random(&arch, 0).unwrap();
    let mut layers = w.layers().to_vec();
    layers[0].1.data_mut()[3] = f32::NAN;
    let nan_path = dir.path().join("nan.rswt");
    format::save_weights(&DecoderWeights::from_layers(arch, layers).unwrap(), &nan_path).unwrap();
    let nan = rseed(&["enhance", s(&input), "--weights-r", s(&nan_path), "--iterations", "3", "--log-every", "0"]);
    assert_eq!(code(&nan), 3, "{}", stderr(&nan));
    assert!(stderr(&nan).contains("iteration 0"), "{}", stderr(&nan));

    let corrupt = dir.path().join("corrupt.rswt");
    std::fs::write(&corrupt, b"XXXX").unwrap();
    assert_eq!(code(&rseed(&["enhance", s(&input), "--weights-r", s(&corrupt)])), 2);
}

#[test]
fn eval_reports_csv_and_table() {
    let dir = tempfile::tempdir().unwrap();
    write_image(dir.path(), "a.png", 16, 16, 0.1);
    write_image(dir.path(), "b.png", 16, 16, 2.0);
    let manifest = dir.path().join("pairs.tsv");
    std::fs::write(&manifest, "# enhanced\treference\na.png\ta.png\n\nb.png\tb.png\n").unwrap();

    let out = rseed(&["eval", s(&manifest), "--format", "csv"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "path,psnr_db,ssim");
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[3], "mean,100.0000,1.000000");

    let table = rseed(&["eval", s(&manifest)]);
    assert_eq!(code(&table), 0);
    assert!(stdout(&table).contains("100.0000"));

    let report = dir.path().join("report.csv");
    assert_eq!(code(&rseed(&["eval", s(&manifest), "--format", "csv", "-o", s(&report)])), 0);
    assert_eq!(std::fs::read_to_string(&report).unwrap(), text);

}

#[test]
fn eval_failures_and_empty_manifests() {
    let dir = tempfile::tempdir().unwrap();
    write_image(dir.path(), "a.png", 16, 16, 0.1);
    write_image(dir.path(), "wide.png", 16, 24, 0.1);
    let manifest = dir.path().join("pairs.tsv");
    std::fs::write(&manifest, "a.png\twide.png\na.png\ta.png\nmissing.png\ta.png\n").unwrap();
    let out = rseed(&["eval", s(&manifest), "--format", "csv"]);
    assert_eq!(code(&out), 4);
    let text = stdout(&out);
    assert_eq!(text.lines().filter(|l| l.contains(",error,error")).count(), 2, "{text}");
    assert!(text.lines().any(|l| l.starts_with("mean,")));

    let empty = dir.path().join("empty.tsv");
    std::fs::write(&empty, "# nothing here\n\n").unwrap();
    assert_eq!(code(&rseed(&["eval", s(&empty)])), 1);
    assert_eq!(code(&rseed(&["eval", s(&dir.path().join("absent.tsv"))])), 2);
}

#[test]
fn gradcheck_is_deterministic_and_catches_faults() {
    let first = rseed(&["gradcheck", "--seed", "7"]);
    let second = rseed(&["gradcheck", "--seed", "7"]);
    assert_eq!(code(&first), 0, "{}", stdout(&first));
    assert_eq!(stdout(&first), stdout(&second));

    let faulty = rseed(&["gradcheck", "--seed", "7", "--instances", "3", "--inject-fault", "sigmoid"]);
    assert_eq!(code(&faulty), 5);
    let report = stdout(&faulty);
    assert!(report.lines().any(|l| l.contains("FAIL") && l.contains("sigmoid")), "{report}");
    assert!(!report.lines().any(|l| l.contains("FAIL") && l.contains("conv2d")), "{report}");
    assert_eq!(code(&rseed(&["gradcheck", "--inject-fault", "bogus"])), 1);
}

#[test]
fn pretrain_command() {
    let dir = tempfile::tempdir().unwrap();
    let missing = rseed(&["pretrain", s(&dir.path().join("absent")), "-o", s(&dir.path().join("w.rswt"))]);
    assert_eq!(code(&missing), 2, "{}", stderr(&missing));

    let corpus = dir.path().join("corpus");
    std::fs::create_dir(&corpus).unwrap();
    for k in 0..4 {
        let img = Tensor::from_fn(&[3, 16, 16], |i| common::pattern(&[3, 16, 16], k as f32).data()[i]);
        save_png(&img, &corpus.join(format!("img{k}.png"))).unwrap();
    }
    std::fs::write(corpus.join("notes.txt"), "ignored").unwrap();
    let weights = dir.path().join("w.rswt");
    let mut args = vec!["pretrain", s(&corpus), "-o", s(&weights), "--epochs", "3", "--resolution", "16"];
    args.extend_from_slice(&TINY);
    let out = rseed(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let w = format::load_weights(&weights).unwrap();
    assert_eq!(w.arch(), &Arch::new(4, vec![8, 8], 3).unwrap());
    let log = std::fs::read_to_string(dir.path().join("w.rswt.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines.iter().enumerate().all(|(e, l)| l.starts_with(&format!("epoch={e} loss="))), "{log}");

    // The weights drive an enhancement run.
    let input = write_image(dir.path(), "in.png", 8, 8, 0.3);
    let run = rseed(&["enhance", s(&input), "--weights-r", s(&weights), "--iterations", "2", "--log-every", "0"]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));

    let single = dir.path().join("single");
    std::fs::create_dir(&single).unwrap();
    std::fs::copy(corpus.join("img0.png"), single.join("img0.png")).unwrap();
    let mut args = vec!["pretrain", s(&single), "-o", s(&weights), "--epochs", "1", "--resolution", "16"];
    args.extend_from_slice(&TINY);
    assert_eq!(code(&rseed(&args)), 1);
}

#[test]
fn fast_preset_brightens_a_dark_synthetic_image() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("r.rswt");
    let pre = rseed(&[
        "pretrain",
        s(&common::train_dir()),
        "-o",
        s(&weights),
        "--epochs",
        "100",
        "--resolution",
        "64",
    ]);
    assert_eq!(code(&pre), 0, "{}", stderr(&pre));

    let input = dir.path().join("dark.png");
    save_png(&common::darken(&common::pattern(&[3, 64, 64], 0.5), 0), &input).unwrap();
    let output = dir.path().join("out.png");
    let run = rseed(&[
        "enhance",
        s(&input),
        "-o",
        s(&output),
        "--preset",
        "fast",
        "--weights-r",
        s(&weights),
        "--log-every",
        "0",
    ]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let mean = load_image(&output).unwrap().mean();
    assert!((mean - 0.6).abs() <= 0.1, "output mean {mean:.3}");
}
