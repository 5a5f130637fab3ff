use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use s2tdpt::checkpoint;
use s2tdpt::data::{self, DataFormat, Dataset};
use s2tdpt::model::Probe;
use s2tdpt::profiler;
use s2tdpt::sfr::sfr_map;
use s2tdpt::train::{evaluate, train_epoch, MetricsLog, Optimizer};
use s2tdpt::{Error, Model32, RunConfig, Tensor32};

#[derive(Parser)]
#[command(name = "s2tdpt", version, about = "Spiking transformer with STDP attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus per-epoch metrics.
    Train(Common),
    /// Evaluate a checkpoint on the held-out split.
    Eval(Common),
    /// Energy and operation report for a checkpoint.
    Profile(Common),
    /// Spike-firing-rate map of one held-out image.
    ExportSfr(Common),
    /// Dump the attention scores of one held-out image as JSON.
    InspectAttention(Common),
    /// Write the synthetic shape dataset.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_per_class: usize,
        #[arg(long, default_value_t = 100)]
        test_per_class: usize,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key=value` override, repeatable.
    #[arg(long = "set")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Held-out images used to measure firing rates.
    #[arg(long, default_value_t = 32)]
    sample_size: usize,
    /// Held-out image for per-image exports.
    #[arg(long, default_value_t = 0)]
    index: usize,
}

enum Failure {
    Usage(String),
    Config(String),
    Runtime(&'static str, String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) => Failure::Config(msg),
            Error::Contract(_) => Failure::Runtime("CONTRACT", msg),
            Error::NonFinite(_) => Failure::Runtime("NONFINITE", msg),
            Error::Format { .. } => Failure::Runtime("FORMAT", msg),
            Error::Io(_) => Failure::Runtime("IO", msg),
            Error::Json(_) => Failure::Runtime("IO", msg),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime("IO", e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            return report(Failure::Usage(first));
        }
    };
    if let Err(f) = configure_threads() {
        return report(f);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    let (cat, msg, code) = match f {
        Failure::Usage(m) => ("USAGE", m, 2),
        Failure::Config(m) => ("CONFIG", m, 2),
        Failure::Runtime(c, m) => (c, m, 1),
    };
    eprintln!("error[{cat}]: {}", msg.replace('\n', " "));
    ExitCode::from(code)
}

fn configure_threads() -> Outcome {
    let Ok(v) = std::env::var("S2TDPT_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Config(format!("S2TDPT_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime("RUNTIME", e.to_string()))
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::GenData { seed, out, n_per_class, test_per_class } => gen_data(seed, &out, n_per_class, test_per_class),
        Command::Train(c) => train(&c),
        Command::Eval(c) => eval(&c),
        Command::Profile(c) => profile(&c),
        Command::ExportSfr(c) => export_sfr(&c),
        Command::InspectAttention(c) => inspect_attention(&c),
    }
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    p.as_deref().ok_or_else(|| Failure::Config(format!("--{flag} is required for this command")))
}

fn run_config(c: &Common) -> Result<RunConfig, Failure> {
    let mut run = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Config(format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    run.apply_overrides(&c.overrides)?;
    if let Some(s) = c.seed {
        run.train.seed = s;
    }
    run.validate()?;
    Ok(run)
}

/// Checkpoint model, with `--set` overrides limited to non-architectural keys.
fn load_model(c: &Common) -> Result<(Model32, RunConfig), Failure> {
    let path = require(&c.checkpoint, "checkpoint")?;
    if !path.exists() {
        return Err(Failure::Config(format!("checkpoint {} does not exist", path.display())));
    }
    let (model, mut run) = checkpoint::load::<f32>(path)?;
    for o in &c.overrides {
        if o.trim_start().starts_with("model.") || o.trim_start().starts_with("attention.") || o.trim_start().starts_with("lif.") {
            return Err(Failure::Config(format!("override {o:?} would change the checkpoint architecture")));
        }
    }
    run.apply_overrides(&c.overrides)?;
    Ok((model, run))
}

fn load_data(c: &Common, run: &RunConfig) -> Result<(Dataset, Dataset), Failure> {
    let dir = require(&c.data, "data")?;
    let (train, test, warnings) = data::load_split(dir, run.data_format)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    let m = &run.model;
    if (train.channels, train.height, train.width) != (m.in_channels, m.height, m.width) || train.num_classes > m.num_classes {
        return Err(Failure::Config(format!(
            "{} data ({}x{}x{}, {} classes) does not fit the model input ({}x{}x{}, {} classes)",
            run.data_format.name(),
            train.channels,
            train.height,
            train.width,
            train.num_classes,
            m.in_channels,
            m.height,
            m.width,
            m.num_classes
        )));
    }
    Ok((train, test))
}

fn out_dir(c: &Common) -> Result<&Path, Failure> {
    let out = require(&c.out, "out")?;
    fs::create_dir_all(out)?;
    Ok(out)
}

fn gen_data(seed: u64, out: &Path, n: usize, test_n: usize) -> Outcome {
    let (train, test) = data::gen_synthetic_split(seed, n, test_n);
    fs::create_dir_all(out)?;
    fs::write(out.join("train.bin"), train.to_bytes(DataFormat::Synthetic))?;
    fs::write(out.join("test.bin"), test.to_bytes(DataFormat::Synthetic))?;
    fs::write(
        out.join("meta.txt"),
        format!("seed = {seed}\nformat = synthetic\ntrain_per_class = {n}\ntest_per_class = {test_n}\nclasses = {}\n", data::SYNTHETIC_LABELS.join(",")),
    )?;
    println!("wrote {} training and {} held-out images to {}", train.len(), test.len(), out.display());
    Ok(())
}

fn train(c: &Common) -> Outcome {
    let run = run_config(c)?;
    let (train, test) = load_data(c, &run)?;
    let out = out_dir(c)?;
    let mut model = Model32::new(run.model.clone(), run.train.seed)?;
    let mut opt = Optimizer::new(&model, &run.train);
    fs::write(out.join("config.txt"), run.emit())?;
    let metrics_path = out.join("metrics.csv");
    if metrics_path.exists() {
        fs::remove_file(&metrics_path)?;
    }
    let mut log = MetricsLog::open(&metrics_path, run.train.seed)?;
    let start = Instant::now();
    println!("seed {} | {} parameters | {} training images", run.train.seed, model.param_count(), train.len());
    for epoch in 0..run.train.epochs {
        let m = train_epoch(&mut model, &mut opt, &train, &run.train, epoch)?;
        let eval_acc = if test.is_empty() { f64::NAN } else { evaluate(&model, &test, 100)?.top1_accuracy };
        let wall = start.elapsed().as_secs_f64();
        log.append(&m, eval_acc, wall)?;
        println!("epoch {epoch:3} loss {:.4} train {:.4} eval {:.4} ({wall:.1}s)", m.train_loss, m.train_acc, eval_acc);
    }
    checkpoint::save(&out.join("model.ckpt"), &model, &run)?;
    println!("saved {}", out.join("model.ckpt").display());
    Ok(())
}

fn eval(c: &Common) -> Outcome {
    let (model, run) = load_model(c)?;
    let (_, test) = load_data(c, &run)?;
    let report = evaluate(&model, &test, 100)?;
    println!("top1 {:.4} on {} images", report.top1_accuracy, test.len());
    if c.out.is_some() {
        let out = out_dir(c)?;
        let mut json = serde_json::to_value(&report).map_err(Error::from)?;
        json["seed"] = run.train.seed.into();
        fs::write(out.join("eval.json"), serde_json::to_string_pretty(&json).map_err(Error::from)?)?;
        fs::write(out.join("confusion.csv"), format!("# seed = {}\n{}", run.train.seed, report.confusion_csv()))?;
    }
    Ok(())
}

fn sample(test: &Dataset, n: usize) -> Result<Tensor32, Failure> {
    let n = n.min(test.len());
    if n == 0 {
        return Err(Failure::Config("held-out split is empty".into()));
    }
    let idx: Vec<usize> = (0..n).collect();
    Ok(test.batch::<f32>(&idx)?.0)
}

fn profile(c: &Common) -> Outcome {
    let (model, run) = load_model(c)?;
    let (_, test) = load_data(c, &run)?;
    let images = sample(&test, c.sample_size)?;
    let report = profiler::profile(&model, &images)?;
    print!("{}", report.to_table());
    let out = out_dir(c)?;
    let mut json = serde_json::to_value(&report).map_err(Error::from)?;
    json["seed"] = run.train.seed.into();
    json["sample_size"] = images.shape()[0].into();
    fs::write(out.join("energy.json"), serde_json::to_string_pretty(&json).map_err(Error::from)?)?;
    fs::write(out.join("energy.txt"), format!("# seed = {}\n{}", run.train.seed, report.to_table()))?;
    Ok(())
}

fn one_image(c: &Common, test: &Dataset) -> Result<Tensor32, Failure> {
    if c.index >= test.len() {
        return Err(Failure::Config(format!("--index {} is out of range for {} held-out images", c.index, test.len())));
    }
    Ok(test.batch::<f32>(&[c.index])?.0)
}

fn export_sfr(c: &Common) -> Outcome {
    let (model, run) = load_model(c)?;
    let (_, test) = load_data(c, &run)?;
    let img = one_image(c, &test)?;
    let map = sfr_map(&model, &img)?;
    let out = out_dir(c)?;
    fs::write(out.join("sfr.csv"), format!("# seed = {} image = {}\n{}", run.train.seed, c.index, map.to_csv()))?;
    let pgm = map.to_pgm().replacen('\n', &format!("\n# seed = {} image = {}\n", run.train.seed, c.index), 1);
    fs::write(out.join("sfr.pgm"), pgm)?;
    println!("wrote {}x{} firing-rate map to {}", map.height, map.width, out.display());
    Ok(())
}

fn inspect_attention(c: &Common) -> Outcome {
    let (model, run) = load_model(c)?;
    let (_, test) = load_data(c, &run)?;
    let img = one_image(c, &test)?;
    let mut probe = Probe::capturing_attention();
    model.predict(&img, Some(&mut probe))?;
    let maps = probe.attention();
    let shape = maps.first().map(|t| t.shape().to_vec()).unwrap_or_default();
    let mut full = vec![maps.len()];
    full.extend(&shape);
    let values: Vec<f32> = maps.iter().flat_map(|t| t.data().iter().copied()).collect();
    let json = serde_json::json!({
        "seed": run.train.seed,
        "image": c.index,
        "axes": ["layer", "t", "b", "h", "i", "j"],
        "shape": full,
        "values": values,
    });
    let out = out_dir(c)?;
    fs::write(out.join("attention.json"), serde_json::to_string(&json).map_err(Error::from)?)?;
    println!("wrote attention {:?} to {}", full, out.join("attention.json").display());
    Ok(())
}
