//! `man` subcommands. Exit codes: 0 success, 1 configuration, 2 I/O or
//! data, 3 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use man_core::arch::{
    build_model, check_network, count_madds, count_params, Attention, LkaSpec, ManConfig, ModelState,
};
use man_core::config::{RunConfig, SynthKind, Synthetic};
use man_core::data::{degrade, load_dataset, read_png, synth, write_png, DatasetMode};
use man_core::metrics::{evaluate, self_ensemble, Protocol, Upscaler};
use man_core::optim::{
    load_checkpoint, load_weights, load_weights_for, save_checkpoint, save_weights, LossLog, Trainer,
};
use man_core::tensor::OpKind;
use man_core::{parallel, Error};

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => EXIT_CONFIG,
            Error::Numeric(_)
            | Error::NonFinite { .. }
            | Error::NotScalar { .. }
            | Error::StaleTensor
            | Error::MissingGrad(_) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(code: i32, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

type Outcome = std::result::Result<(), Failure>;

#[derive(Parser, Debug)]
#[command(name = "man", version, about = "Multi-scale attention network for image super-resolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train from scratch or resume from a checkpoint.
    Train(TrainArgs),
    /// Score weights on a dataset and write a CSV report.
    Eval(EvalArgs),
    /// Super-resolve one PNG.
    Sr(SrArgs),
    /// Print exact parameter and multiply-add counts.
    Count(CountArgs),
    /// Finite-difference gradient check through a small network.
    Gradcheck(GradcheckArgs),
    /// Write bicubic low-resolution copies of a directory of PNGs.
    Degrade(DegradeArgs),
    /// Write procedurally generated test images.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.total_iters=100`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Stop after this many iterations in this invocation, leaving a
    /// checkpoint to resume from.
    #[arg(long)]
    pub stop_after: Option<u64>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Expected model scale; defaults to the scale stored in the weights.
    #[arg(long)]
    pub scale: Option<usize>,
    /// Border pixels removed before scoring; defaults to the scale.
    #[arg(long)]
    pub shave: Option<usize>,
    /// Score the Y channel (the default).
    #[arg(long, conflicts_with = "rgb")]
    pub y_only: bool,
    /// Score all three RGB channels.
    #[arg(long)]
    pub rgb: bool,
    #[arg(long)]
    pub self_ensemble: bool,
    /// Dataset layout; detected from an `LRx{s}` directory when omitted.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<DatasetMode>,
    /// Run config supplying the architecture and `[eval]` defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "eval.csv")]
    pub csv: PathBuf,
}

#[derive(Args, Debug)]
pub struct SrArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub self_ensemble: bool,
}

#[derive(Args, Debug)]
pub struct CountArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "1280x720", value_parser = parse_size)]
    pub out_size: (usize, usize),
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 12)]
    pub width: usize,
    #[arg(long, default_value_t = 1)]
    pub blocks: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub scale: usize,
    /// Side of the random low-resolution input.
    #[arg(long, default_value_t = 6)]
    pub size: usize,
    /// Coordinates perturbed per tensor; 0 checks every coordinate.
    #[arg(long, default_value_t = 16)]
    pub per_param: usize,
    #[arg(long, hide = true)]
    pub corrupt_backward: Option<String>,
}

#[derive(Args, Debug)]
pub struct DegradeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub scale: usize,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value = "scene", value_parser = parse_kind)]
    pub kind: SynthKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WxH")?;
    let w = w.parse::<usize>().map_err(|e| e.to_string())?;
    let h = h.parse::<usize>().map_err(|e| e.to_string())?;
    if w == 0 || h == 0 {
        return Err("sizes must be positive".into());
    }
    Ok((w, h))
}

fn parse_mode(s: &str) -> std::result::Result<DatasetMode, String> {
    match s {
        "paired_dirs" => Ok(DatasetMode::PairedDirs),
        "hr_only" => Ok(DatasetMode::HrOnly),
        _ => Err("expected paired_dirs or hr_only".into()),
    }
}

fn parse_kind(s: &str) -> std::result::Result<SynthKind, String> {
    match s {
        "scene" => Ok(SynthKind::Scene),
        "smooth" => Ok(SynthKind::Smooth),
        _ => Err("expected scene or smooth".into()),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn configure_threads() {
    match std::env::var("MAN_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(0) | None => {}
        Some(1) => parallel::set_enabled(false),
        Some(n) => {
            parallel::set_threads(n);
        }
    }
}

fn dispatch(cmd: Command) -> Outcome {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sr(a) => cmd_sr(a),
        Command::Count(a) => cmd_count(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Degrade(a) => cmd_degrade(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

/// Reads a run config and applies `section.key=value` overrides. Values
/// are TOML literals; bare words are taken as strings.
pub fn load_run_config(path: &Path, overrides: &[String]) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| fail(EXIT_CONFIG, format!("cannot read config {}: {e}", path.display())))?;
    if overrides.is_empty() {
        return RunConfig::parse(&text).map_err(|e| fail(EXIT_CONFIG, format!("{}: {e}", path.display())));
    }
    let mut doc: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| fail(EXIT_CONFIG, format!("{}: {}", path.display(), e.message())))?;
    for o in overrides {
        let (key, value) = o
            .split_once('=')
            .ok_or_else(|| fail(EXIT_CONFIG, format!("override `{o}` is not KEY=VALUE")))?;
        let (section, field) = key
            .trim()
            .split_once('.')
            .ok_or_else(|| fail(EXIT_CONFIG, format!("override key `{key}` must be SECTION.KEY")))?;
        let value = parse_value(value.trim());
        let table = doc
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let table = table
            .as_table_mut()
            .ok_or_else(|| fail(EXIT_CONFIG, format!("`{section}` is not a section")))?;
        table.insert(field.to_string(), value);
    }
    let merged = toml::to_string(&doc).map_err(|e| fail(EXIT_CONFIG, e.to_string()))?;
    RunConfig::parse(&merged).map_err(|e| fail(EXIT_CONFIG, format!("{}: {e}", path.display())))
}

fn parse_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn write_file(path: &Path, contents: &str) -> Outcome {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn create_dir(path: &Path) -> Outcome {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

pub const CHECKPOINT_FILE: &str = "checkpoint.manc";
pub const WEIGHTS_FILE: &str = "final.manw";
pub const LOSS_FILE: &str = "loss.csv";
pub const EVAL_LOG_FILE: &str = "eval_log.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.toml";

fn cmd_train(a: TrainArgs) -> Outcome {
    let run = load_run_config(&a.config, &a.overrides)?;
    let model_cfg = run.man_config()?;
    let train_cfg = run.train_config()?;
    let resolved = run.resolved()?.to_toml()?;
    let protocol = run.protocol();

    let train_set = run.data.train_set(model_cfg.scale)?;
    let eval_set = run.data.eval_set(model_cfg.scale)?;
    let (mut trainer, mut log) = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path, &model_cfg)?;
            let previous = a.out.join(LOSS_FILE);
            let mut log = match fs::read_to_string(&previous) {
                Ok(text) => LossLog::from_csv(&text)?,
                Err(_) => LossLog::default(),
            };
            log.entries.retain(|e| e.iter <= ckpt.step);
            (Trainer::resume(ckpt, train_cfg.clone())?, log)
        }
        None => (
            Trainer::new(build_model(&model_cfg, train_cfg.seed)?, train_cfg.clone())?,
            LossLog::default(),
        ),
    };

    create_dir(&a.out)?;
    write_file(&a.out.join(RESOLVED_CONFIG_FILE), &resolved)?;
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let loss_path = a.out.join(LOSS_FILE);
    let eval_path = a.out.join(EVAL_LOG_FILE);
    let mut eval_log = match (&a.resume, fs::read_to_string(&eval_path)) {
        (Some(_), Ok(text)) => text,
        _ => String::from("iter,psnr,ssim\n"),
    };

    let start = trainer.step_count();
    let end = match a.stop_after {
        Some(n) => start.saturating_add(n).min(train_cfg.total_iters),
        None => train_cfg.total_iters,
    };
    if !a.quiet {
        println!(
            "training {} x{} ({} params) for iterations {}..{} of {}",
            variant_name(&model_cfg),
            model_cfg.scale,
            count_params(&model_cfg)?,
            start + 1,
            end,
            train_cfg.total_iters
        );
    }
    let quiet = a.quiet;
    let every = |k: u64, i: u64| k > 0 && i % k == 0;
    let result = trainer.run_until(&train_set, end, |t, info| {
        log.entries.push(*info);
        if every(train_cfg.checkpoint_every, info.iter) {
            save_checkpoint(&t.checkpoint(), &ckpt_path)?;
            fs::write(&loss_path, log.to_csv()).map_err(|e| Error::Io {
                path: loss_path.clone(),
                source: e,
            })?;
        }
        if let Some(set) = &eval_set {
            if every(train_cfg.eval_every, info.iter) {
                let r = evaluate(&t.state, set, &protocol)?;
                eval_log.push_str(&format!("{},{:.6},{:.6}\n", info.iter, r.mean_psnr, r.mean_ssim));
                if !quiet {
                    println!("iter {:>7}  eval psnr {:.4} dB  ssim {:.5}", info.iter, r.mean_psnr, r.mean_ssim);
                }
            }
        }
        if !quiet && (info.iter % 100 == 0 || info.iter == end) {
            println!("iter {:>7}  loss {:.6}  lr {:.3e}", info.iter, info.loss, info.lr);
        }
        Ok(())
    });
    write_file(&loss_path, &log.to_csv())?;
    if eval_set.is_some() {
        write_file(&eval_path, &eval_log)?;
    }
    result?;

    save_checkpoint(&trainer.checkpoint(), &ckpt_path)?;
    if trainer.is_done() {
        save_weights(&trainer.state, &a.out.join(WEIGHTS_FILE))?;
    }
    match log.last() {
        Some(l) => println!("final loss {l:.6} at iteration {}", trainer.step_count()),
        None => println!("no iterations run"),
    }
    Ok(())
}

fn variant_name(cfg: &ManConfig) -> String {
    format!("{:?}", cfg.variant).to_lowercase()
}

fn load_model(weights: &Path, config: Option<&Path>) -> Result<(ModelState, Option<RunConfig>), Failure> {
    match config {
        Some(c) => {
            let run = load_run_config(c, &[])?;
            let cfg = run.man_config()?;
            Ok((load_weights_for(weights, &cfg)?, Some(run)))
        }
        None => Ok((load_weights(weights)?, None)),
    }
}

fn cmd_eval(a: EvalArgs) -> Outcome {
    let (model, run) = load_model(&a.weights, a.config.as_deref())?;
    let s = model.config().scale;
    if let Some(want) = a.scale {
        if want != s {
            return Err(fail(EXIT_DATA, format!("weights are x{s} but --scale is {want}")));
        }
    }
    let base = run.as_ref().map(|r| r.protocol()).unwrap_or_else(|| Protocol::standard(s));
    let protocol = Protocol {
        y_channel: if a.rgb { false } else { a.y_only || base.y_channel },
        shave: a.shave.or(run.as_ref().and_then(|r| r.eval.shave)).unwrap_or(s),
        scale: s,
        self_ensemble: a.self_ensemble || base.self_ensemble,
    };
    let mode = a.mode.unwrap_or(if a.data.join(format!("LRx{s}")).is_dir() {
        DatasetMode::PairedDirs
    } else {
        DatasetMode::HrOnly
    });
    let data = load_dataset(&a.data, s, mode)?;
    let report = evaluate(&model, &data, &protocol)?;
    print!("{}", report.to_table());
    write_file(&a.csv, &report.to_csv())?;
    Ok(())
}

fn cmd_sr(a: SrArgs) -> Outcome {
    let (model, _) = load_model(&a.weights, a.config.as_deref())?;
    let lr = read_png(&a.input)?;
    let sr = if a.self_ensemble {
        self_ensemble(&model, &lr)?
    } else {
        model.upscale(&lr)?
    };
    write_png(&a.out, &sr)?;
    println!("{}x{} -> {}x{}", lr.w(), lr.h(), sr.w(), sr.h());
    Ok(())
}

/// Engineering notation with a K/M/G/T suffix.
pub fn si(v: u64) -> String {
    let units = [(1e12, "T"), (1e9, "G"), (1e6, "M"), (1e3, "K")];
    let x = v as f64;
    for (scale, suffix) in units {
        if x >= scale {
            return format!("{:.2}{suffix}", x / scale);
        }
    }
    v.to_string()
}

fn cmd_count(a: CountArgs) -> Outcome {
    let run = load_run_config(&a.config, &[])?;
    let cfg = run.man_config()?;
    let (w, h) = a.out_size;
    let params = count_params(&cfg)?;
    let madds = count_madds(&cfg, h, w)?;
    println!(
        "model: {} x{} ({} blocks, width {}, {:?} blocks, {:?} ffn)",
        variant_name(&cfg),
        cfg.scale,
        cfg.n_blocks,
        cfg.width,
        cfg.block_style,
        cfg.ffn
    );
    println!("params: {params} ({})", si(params));
    println!("madds@{w}x{h}: {} ({})", madds.headline(), si(madds.headline()));
    println!(
        "madds detail: conv {} bias {} elementwise {} over {} LR pixels",
        madds.conv, madds.bias, madds.elementwise, madds.lr_pixels
    );
    Ok(())
}

/// Attention split for a checking width: all three groups when the width
/// divides by three, the two smaller groups when it is even, otherwise one.
pub fn gradcheck_config(width: usize, blocks: usize, scale: usize) -> ManConfig {
    let attention = if width % 3 == 0 {
        Attention::MlkaAll
    } else if width % 2 == 0 {
        Attention::MlkaSubset(LkaSpec::PRESETS[..2].to_vec())
    } else {
        Attention::LkaSingle(LkaSpec::PRESETS[1])
    };
    ManConfig {
        attention,
        ..ManConfig::custom(blocks, width, scale)
    }
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn cmd_gradcheck(a: GradcheckArgs) -> Outcome {
    if a.width == 0 || a.width > 16 || a.blocks == 0 {
        return Err(fail(EXIT_CONFIG, "gradcheck needs 1 ≤ width ≤ 16 and at least one block"));
    }
    let fault = match &a.corrupt_backward {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| fail(EXIT_CONFIG, format!("unknown op `{name}`")))?),
        None => None,
    };
    let cfg = gradcheck_config(a.width, a.blocks, a.scale);
    cfg.validate()?;
    let per_param = (a.per_param > 0).then_some(a.per_param);
    let check = check_network(&cfg, a.seed, a.size, per_param, fault)?;
    let r = &check.report;
    println!(
        "checked {} coordinates, max relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
        r.checked, r.max_rel_error, check.worst, r.worst_index, r.analytic, r.numeric
    );
    if r.max_rel_error < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(fail(
            EXIT_NUMERIC,
            format!(
                "gradient mismatch {:.3e} ≥ {GRADCHECK_TOLERANCE:e} in {}",
                r.max_rel_error, check.worst
            ),
        ))
    }
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(fail(EXIT_DATA, format!("no images in {}", dir.display())));
    }
    Ok(files)
}

fn cmd_degrade(a: DegradeArgs) -> Outcome {
    if !(2..=4).contains(&a.scale) {
        return Err(fail(EXIT_CONFIG, format!("scale must be 2, 3 or 4, got {}", a.scale)));
    }
    let files = png_files(&a.input)?;
    create_dir(&a.out)?;
    for f in &files {
        let hr = read_png(f)?;
        let pair = degrade(&hr, a.scale)?;
        let name = f.file_name().expect("listed files have names");
        write_png(&a.out.join(name), &pair.lr)?;
    }
    println!("wrote {} images to {}", files.len(), a.out.display());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Outcome {
    if a.count == 0 || a.size < 8 {
        return Err(fail(EXIT_CONFIG, "synth needs count ≥ 1 and size ≥ 8"));
    }
    let spec = Synthetic {
        kind: a.kind,
        count: a.count,
        size: a.size,
        seed: a.seed,
    };
    create_dir(&a.out)?;
    for i in 0..spec.count {
        let seed = spec.seed.wrapping_add(i as u64);
        let img = match spec.kind {
            SynthKind::Scene => synth::scene(spec.size, spec.size, seed),
            SynthKind::Smooth => synth::smooth(spec.size, spec.size, seed),
        };
        write_png(&a.out.join(format!("synth{i:03}.png")), &img)?;
    }
    println!("wrote {} images to {}", spec.count, a.out.display());
    Ok(())
}
