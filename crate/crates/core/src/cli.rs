//! The `rseed` command line: `enhance`, `pretrain`, `eval` and `gradcheck`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::autodiff::OpKind;
use crate::config::EnhanceConfig;
use crate::decoder::Arch;
use crate::error::Error;
use crate::format::{self, RunMaps};
use crate::gradcheck::{run_gradcheck, GradcheckConfig, DEFAULT_INSTANCES};
use crate::image_io::{load_image, save_png};
use crate::losses::LossValues;
use crate::metrics::{psnr, ssim, MetricReport, PairMetrics};
use crate::optimizer::{build_decoders, run_with, EnhanceResult, Snapshot};
use crate::pretrain::{pretrain_with, Corpus, PretrainConfig};

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_UNREADABLE: i32 = 2;
pub const EXIT_NON_FINITE: i32 = 3;
pub const EXIT_EVAL_FAILED: i32 = 4;
pub const EXIT_GRADCHECK_FAILED: i32 = 5;

/// Environment variable capping `--jobs`.
pub const THREADS_ENV: &str = "RSEED_THREADS";

#[derive(Debug, Parser)]
#[command(name = "rseed", version, about = "Zero-shot low-light enhancement by seed optimization of frozen Retinex decoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Enhance one or more low-light images.
    Enhance(EnhanceArgs),
    /// Fit a reflectance decoder to a directory of normal-light images.
    Pretrain(PretrainArgs),
    /// Score enhanced images against references (PSNR, SSIM).
    Eval(EvalArgs),
    /// Check every analytic gradient against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct EnhanceArgs {
    /// Input PNG/JPEG images.
    #[arg(required_unless_present = "print_config")]
    inputs: Vec<PathBuf>,
    /// Output PNG (single input only).
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Directory for outputs when enhancing several images
    /// (default: next to each input, as `<stem>_enhanced.png`).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the effective config and exit.
    #[arg(long)]
    print_config: bool,
    /// paired (2500 iterations, tau 0.6), noref (5000, tau 0.2) or fast (900, tau 0.6).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// adam or gd.
    #[arg(long)]
    optimizer: Option<String>,
    /// seed, params or joint.
    #[arg(long)]
    mode: Option<String>,
    /// pretrained-reflectance, random-all or pretrained-both.
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    weights_r: Option<PathBuf>,
    #[arg(long)]
    weights_l: Option<PathBuf>,
    #[arg(long)]
    lambda_re: Option<f64>,
    #[arg(long)]
    lambda_e: Option<f64>,
    #[arg(long)]
    lambda_s: Option<f64>,
    #[arg(long)]
    lambda_i: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Target mean brightness of the output.
    #[arg(long)]
    exposure: Option<f64>,
    #[arg(long)]
    gamma_init: Option<f64>,
    /// RNG seed for the decoder inputs (and random decoder weights).
    #[arg(long)]
    seed: Option<u64>,
    /// Save maps every N iterations into the run directory.
    #[arg(long)]
    snapshot_every: Option<usize>,
    #[arg(long)]
    seed_channels: Option<usize>,
    /// Comma-separated channel counts of the upsampling stages.
    #[arg(long)]
    stage_channels: Option<String>,
    /// Directory for snapshots and final maps.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Images optimized in parallel (capped by RSEED_THREADS).
    #[arg(short, long, default_value_t = 1)]
    jobs: usize,
    /// Print a loss line every N iterations (0 disables).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    /// Directory of PNG/JPEG training images.
    corpus: PathBuf,
    /// Output weight file.
    #[arg(short, long)]
    output: PathBuf,
    /// Training log (default: `<output>.log`).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Square training resolution; must be a multiple of 2^stages.
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1e-2)]
    seed_lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    seed_channels: usize,
    #[arg(long, default_value = "64,64,32,16")]
    stage_channels: String,
    /// 3 for a reflectance decoder, 1 for an illumination decoder.
    #[arg(long, default_value_t = 3)]
    out_channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EvalFormat {
    Table,
    Csv,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Manifest with one `enhanced<TAB>reference` pair per line; relative
    /// paths are resolved against the manifest's directory.
    manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = EvalFormat::Table)]
    format: EvalFormat,
    /// Write the report here instead of stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per op.
    #[arg(long, default_value_t = DEFAULT_INSTANCES)]
    instances: usize,
    /// Negate the backward of one op kind (self-test of the checker).
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Image { .. } | Error::Format(_) => EXIT_UNREADABLE,
        Error::NonFinite { .. } => EXIT_NON_FINITE,
        Error::Config(_) | Error::Invalid(_) | Error::TooSmall { .. } | Error::Tensor(_) => EXIT_CONFIG,
    }
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Enhance(a) => cmd_enhance(a),
        Command::Pretrain(a) => cmd_pretrain(a).map(|()| 0),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn parse_channels(s: &str) -> Result<Vec<usize>, Error> {
    s.split(',')
        .map(|c| c.trim().parse().map_err(|_| Error::Config(format!("bad channel list {s:?}"))))
        .collect()
}

fn read_text(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), Error> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn build_config(a: &EnhanceArgs) -> Result<EnhanceConfig, Error> {
    let mut cfg = EnhanceConfig::default();
    if let Some(path) = &a.config {
        cfg.apply_text(&read_text(path)?)?;
    }
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let overrides: [(&str, Option<String>); 21] = [
        ("preset", a.preset.clone()),
        ("iterations", a.iterations.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| v.to_string())),
        ("optimizer", a.optimizer.clone()),
        ("mode", a.mode.clone()),
        ("init", a.init.clone()),
        ("weights_r", path(&a.weights_r)),
        ("weights_l", path(&a.weights_l)),
        ("lambda_re", a.lambda_re.map(|v| v.to_string())),
        ("lambda_e", a.lambda_e.map(|v| v.to_string())),
        ("lambda_s", a.lambda_s.map(|v| v.to_string())),
        ("lambda_i", a.lambda_i.map(|v| v.to_string())),
        ("tau", a.tau.map(|v| v.to_string())),
        ("exposure", a.exposure.map(|v| v.to_string())),
        ("gamma_init", a.gamma_init.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("snapshot_every", a.snapshot_every.map(|v| v.to_string())),
        ("seed_channels", a.seed_channels.map(|v| v.to_string())),
        ("stage_channels", a.stage_channels.clone()),
        ("output", path(&a.output)),
        ("run_dir", path(&a.run_dir)),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    Ok(cfg)
}

fn loss_line(t: usize, v: &LossValues, gamma: f32) -> String {
    format!(
        "iter={t} l_re={:.6} l_e={:.6} l_s={:.6} l_i={:.6} total={:.6} gamma={:.6}",
        v.reconstruction, v.consistency, v.smoothness, v.control, v.total, gamma
    )
}

/// Where one input's artifacts go.
struct Job {
    input: PathBuf,
    output: PathBuf,
    sidecar: PathBuf,
    run_dir: Option<PathBuf>,
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

fn plan_jobs(cfg: &EnhanceConfig, inputs: &[PathBuf], out_dir: Option<&Path>) -> Result<Vec<Job>, Error> {
    if cfg.output.is_some() && inputs.len() != 1 {
        return Err(Error::Config("--output takes a single input; use --out-dir for several".into()));
    }
    let mut outputs: Vec<PathBuf> = Vec::new();
    for input in inputs {
        let output = match (&cfg.output, out_dir) {
            (Some(o), _) => o.clone(),
            (None, Some(d)) => d.join(format!("{}_enhanced.png", stem(input))),
            (None, None) => input.with_file_name(format!("{}_enhanced.png", stem(input))),
        };
        if outputs.contains(&output) {
            return Err(Error::Config(format!("two inputs map to the same output {}", output.display())));
        }
        outputs.push(output);
    }
    Ok(inputs
        .iter()
        .zip(outputs)
        .map(|(input, output)| {
            let mut sidecar = output.clone().into_os_string();
            sidecar.push(".run.txt");
            let run_dir = cfg.run_dir.as_ref().map(|d| if inputs.len() == 1 { d.clone() } else { d.join(stem(input)) });
            Job { input: input.clone(), output, sidecar: PathBuf::from(sidecar), run_dir }
        })
        .collect())
}

fn run_record(cfg: &EnhanceConfig, job: &Job, result: &EnhanceResult, lines: &[String]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# rseed run record");
    let _ = writeln!(s, "input = {}", job.input.display());
    let _ = writeln!(s, "output = {}", job.output.display());
    let _ = writeln!(s, "[config]");
    s.push_str(&cfg.to_text());
    let _ = writeln!(s, "[result]");
    let _ = writeln!(s, "gamma_final = {}", result.gamma);
    let _ = writeln!(s, "iterations_run = {}", result.trace.len());
    let _ = writeln!(s, "mean_iter_seconds = {:.6}", result.mean_iter_seconds());
    let _ = writeln!(s, "weights_r_sha256_before = {}", result.hashes_before[0]);
    let _ = writeln!(s, "weights_r_sha256_after = {}", result.hashes_after[0]);
    let _ = writeln!(s, "weights_l_sha256_before = {}", result.hashes_before[1]);
    let _ = writeln!(s, "weights_l_sha256_after = {}", result.hashes_after[1]);
    let _ = writeln!(s, "[trace]");
    for l in lines {
        let _ = writeln!(s, "{l}");
    }
    s
}

fn save_snapshot(dir: &Path, snap: &Snapshot) -> Result<(), Error> {
    let base = format!("iter{:06}", snap.iteration);
    save_png(&snap.enhanced, &dir.join(format!("{base}_enhanced.png")))?;
    save_png(&snap.reflectance, &dir.join(format!("{base}_reflectance.png")))?;
    save_png(&snap.illumination, &dir.join(format!("{base}_illumination.png")))
}

fn enhance_one(cfg: &EnhanceConfig, job: &Job, log_every: usize, label: &str) -> Result<(), Error> {
    let image = load_image(&job.input)?;
    let (wr, wl) = build_decoders(cfg)?;
    if let Some(dir) = &job.run_dir {
        create_dir(dir)?;
    }
    let mut lines = Vec::with_capacity(cfg.iterations);
    let last = cfg.iterations.saturating_sub(1);
    let result = run_with(
        &image,
        &wr,
        &wl,
        cfg,
        |t, v, gamma| {
            let line = loss_line(t, v, gamma);
            if log_every > 0 && (t % log_every == 0 || t == last) {
                eprintln!("{label}{line}");
            }
            lines.push(line);
        },
        |snap| match &job.run_dir {
            Some(dir) => save_snapshot(dir, snap),
            None => Ok(()),
        },
    );
    let result = match result {
        Ok(r) => r,
        Err(e @ Error::NonFinite { .. }) => {
            // Keep the trace up to the failure for diagnosis.
            let mut s = String::new();
            let _ = writeln!(s, "# rseed run record (aborted: {e})");
            s.push_str(&cfg.to_text());
            for l in &lines {
                let _ = writeln!(s, "{l}");
            }
            write_file(&job.sidecar, s.as_bytes())?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    if let Some(parent) = job.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_png(&result.enhanced, &job.output)?;
    if let Some(dir) = &job.run_dir {
        let maps = RunMaps {
            reflectance: result.reflectance.clone(),
            illumination: result.illumination.clone(),
            gamma: result.gamma,
        };
        format::save_maps(&maps, &dir.join("final.rsmp"))?;
        save_png(&result.reflectance, &dir.join("final_reflectance.png"))?;
        save_png(&result.illumination, &dir.join("final_illumination.png"))?;
    }
    write_file(&job.sidecar, run_record(cfg, job, &result, &lines).as_bytes())?;
    eprintln!(
        "{label}wrote {} (gamma={:.4}, {:.2} ms/iter)",
        job.output.display(),
        result.gamma,
        result.mean_iter_seconds() * 1e3
    );
    Ok(())
}

/// `--jobs` capped by `RSEED_THREADS` (when set to a positive integer) and the job count.
fn effective_jobs(requested: usize, n: usize) -> usize {
    let cap = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&v| v > 0);
    requested.max(1).min(cap.unwrap_or(usize::MAX)).min(n.max(1))
}

fn cmd_enhance(a: EnhanceArgs) -> Result<i32, Error> {
    let cfg = build_config(&a)?;
    if a.print_config {
        print!("{}", cfg.to_text());
        return Ok(0);
    }
    cfg.validate()?;
    if let Some(d) = &a.out_dir {
        create_dir(d)?;
    }
    let jobs = plan_jobs(&cfg, &a.inputs, a.out_dir.as_deref())?;
    let workers = effective_jobs(a.jobs, jobs.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<(), Error>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let multi = jobs.len() > 1;
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let label = if multi { format!("[{}] ", stem(&job.input)) } else { String::new() };
                let r = enhance_one(&cfg, job, a.log_every, &label);
                results.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    let mut code = 0;
    for (job, r) in jobs.iter().zip(results.into_inner().expect("result lock")) {
        if let Some(Err(e)) = r {
            if multi {
                eprintln!("error: [{}] {e}", stem(&job.input));
            } else {
                eprintln!("error: {e}");
            }
            if code == 0 {
                code = exit_code(&e);
            }
        }
    }
    Ok(code)
}

fn cmd_pretrain(a: PretrainArgs) -> Result<(), Error> {
    let arch = Arch::new(a.seed_channels, parse_channels(&a.stage_channels)?, a.out_channels)
        .map_err(|e| Error::Config(e.to_string()))?;
    let cfg = PretrainConfig {
        lr: a.lr,
        seed_lr: a.seed_lr,
        epochs: a.epochs,
        batch: a.batch,
        resolution: a.resolution,
        rng_seed: a.seed,
    };
    if !a.corpus.is_dir() {
        return Err(Error::io(&a.corpus, std::io::Error::new(std::io::ErrorKind::NotFound, "corpus directory not found")));
    }
    if a.resolution == 0 || a.resolution % arch.scale() != 0 {
        return Err(Error::Config(format!("resolution {} is not a multiple of {}", a.resolution, arch.scale())));
    }
    let corpus = Corpus::load_dir(&a.corpus, a.resolution)?;
    if corpus.len() < 2 {
        return Err(Error::Config(format!("corpus needs at least 2 images, found {}", corpus.len())));
    }
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.output.clone().into_os_string();
        p.push(".log");
        PathBuf::from(p)
    });
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log_err = None;
    eprintln!("pretraining {arch} on {} images at {}x{}", corpus.len(), a.resolution, a.resolution);
    let report = pretrain_with(&corpus, &arch, &cfg, |epoch, loss| {
        eprintln!("epoch={epoch} loss={loss:.6}");
        if let Err(e) = writeln!(log, "epoch={epoch} loss={loss:.8}") {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(Error::io(&log_path, e));
    }
    format::save_weights(&report.weights, &a.output)?;
    for (path, db) in &report.per_image_psnr {
        eprintln!("reconstruction psnr_db={db:.3} {}", path.display());
    }
    eprintln!("wrote {} ({})", a.output.display(), report.weights.sha256_hex());
    Ok(())
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn score_pair(enhanced: &Path, reference: &Path) -> Result<(f64, f64), Error> {
    let a = load_image(enhanced)?;
    let b = load_image(reference)?;
    if a.shape() != b.shape() {
        return Err(Error::Invalid(format!("dimension mismatch {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok((psnr(&a, &b)?, ssim(&a, &b)?))
}

fn cmd_eval(a: EvalArgs) -> Result<i32, Error> {
    let text = read_text(&a.manifest)?;
    let base = a.manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut pairs = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let Some((e, r)) = line.split_once('\t') else {
            return Err(Error::Config(format!("{}:{}: expected `enhanced<TAB>reference`", a.manifest.display(), no + 1)));
        };
        pairs.push((e.trim().to_string(), r.trim().to_string()));
    }
    if pairs.is_empty() {
        return Err(Error::Config(format!("{}: manifest lists no pairs", a.manifest.display())));
    }
    let mut ok = Vec::new();
    let mut rows = Vec::new();
    let mut failed = 0;
    for (e, r) in &pairs {
        match score_pair(&resolve(&base, e), &resolve(&base, r)) {
            Ok((p, s)) => {
                ok.push(PairMetrics { path: e.clone(), psnr_db: p, ssim: s });
                rows.push((e.clone(), Ok((p, s))));
            }
            Err(err) => {
                failed += 1;
                eprintln!("error: {e}: {err}");
                rows.push((e.clone(), Err(err.to_string())));
            }
        }
    }
    let report = MetricReport::from_pairs(ok);
    let mut out = String::new();
    match a.format {
        EvalFormat::Csv => {
            out.push_str("path,psnr_db,ssim\n");
            for (path, r) in &rows {
                match r {
                    Ok((p, s)) => {
                        let _ = writeln!(out, "{path},{p:.4},{s:.6}");
                    }
                    Err(_) => {
                        let _ = writeln!(out, "{path},error,error");
                    }
                }
            }
            let _ = writeln!(out, "mean,{:.4},{:.6}", report.psnr_db, report.ssim);
        }
        EvalFormat::Table => {
            let width = rows.iter().map(|(p, _)| p.len()).max().unwrap_or(4).max(4);
            let _ = writeln!(out, "{:<width$}  {:>9}  {:>8}", "path", "psnr_db", "ssim");
            for (path, r) in &rows {
                match r {
                    Ok((p, s)) => {
                        let _ = writeln!(out, "{path:<width$}  {p:>9.4}  {s:>8.6}");
                    }
                    Err(msg) => {
                        let _ = writeln!(out, "{path:<width$}  error: {msg}");
                    }
                }
            }
            let _ = writeln!(
                out,
                "{:<width$}  {:>9.4}  {:>8.6}  ({} of {} pairs)",
                "mean",
                report.psnr_db,
                report.ssim,
                report.per_image.len(),
                rows.len()
            );
        }
    }
    match &a.output {
        Some(p) => write_file(p, out.as_bytes())?,
        None => print!("{out}"),
    }
    Ok(if failed > 0 { EXIT_EVAL_FAILED } else { 0 })
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32, Error> {
    let fault = match &a.inject_fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Error::Config(format!("unknown op {name:?}")))?),
        None => None,
    };
    if a.instances == 0 {
        return Err(Error::Config("instances must be positive".into()));
    }
    let report = run_gradcheck(&GradcheckConfig { seed: a.seed, instances: a.instances, fault });
    println!("{report}");
    Ok(if report.passed() { 0 } else { EXIT_GRADCHECK_FAILED })
}
