//! `mlrn`: generate data, train, evaluate and predict with the micro ResNet.
//!
//! Exit codes: 0 success, 2 usage or validation failure, 3 numeric failure.

mod config;
mod svg;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mlrn::dataset::{generate_synthetic, preprocess, read_bundle, read_ppm, write_bundle, Dataset, SyntheticSpec};
use mlrn::labels::DecisionRule;
use mlrn::metrics::format_metric;
use mlrn::model::Model;
use mlrn::trainer::{evaluate, train_observed};
use mlrn::{checkpoint, Error, Result};

use crate::config::{RunConfig, TrainOverrides};

const BUNDLE_FILE: &str = "dataset.mlds";
const MANIFEST_FILE: &str = "manifest.json";
const CHECKPOINT_FILE: &str = "checkpoint.mlrn";
const REPORT_FILE: &str = "train_report.jsonl";
const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
const METRICS_JSON_FILE: &str = "metrics.json";
const METRICS_TEXT_FILE: &str = "metrics.txt";

#[derive(Parser)]
#[command(name = "mlrn", version, about = "Multilabel image classification with a micro ResNet")]
struct Cli {
    /// Worker threads for intra-op parallelism (falls back to MLRN_THREADS, then 1).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic shapes dataset into a bundle.
    GenData(GenDataArgs),
    /// Train a model and write checkpoint, log and resolved config.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and write metric reports.
    Eval(EvalArgs),
    /// Print the most probable classes for one image.
    Predict(PredictArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Synthetic spec JSON; defaults apply to omitted fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: usize,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "train")]
    split: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Training bundle (overrides the config's `data`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Bundle evaluated during training (overrides the config's `eval_data`).
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Run config JSON; defaults apply to omitted fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// `threshold:<p>` or `topk:<k>`.
    #[arg(long, default_value = "threshold:0.5")]
    rule: DecisionRule,
    #[arg(long)]
    out: PathBuf,
    /// Also draw each PR curve as SVG.
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// A binary PPM file, or an image id inside `--data`.
    #[arg(long)]
    image: String,
    /// Bundle to look `--image` up in.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    top: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(message) = init_threads(cli.threads) {
        eprintln!("error: {message}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train_cmd(args),
        Command::Eval(args) => eval_cmd(args),
        Command::Predict(args) => predict_cmd(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

fn init_threads(flag: Option<usize>) -> std::result::Result<(), String> {
    let threads = match flag {
        Some(n) => n,
        None => match std::env::var("MLRN_THREADS") {
            Ok(v) => v.trim().parse().map_err(|_| format!("MLRN_THREADS must be a positive integer, got {v:?}"))?,
            Err(_) => 1,
        },
    };
    if threads == 0 {
        return Err("thread count must be at least 1".into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| e.to_string())
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &args.spec {
        Some(path) => serde_json::from_str(&read_text(path)?)?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if args.n == 0 {
        return Err(Error::Usage("--n must be at least 1".into()));
    }
    let (manifest, pixels) = generate_synthetic(&spec, args.n, &args.split)?;
    fs::create_dir_all(&args.out)?;
    write_bundle(args.out.join(BUNDLE_FILE), &manifest, &pixels)?;
    fs::write(args.out.join(MANIFEST_FILE), manifest.to_json()?)?;
    println!(
        "wrote {} images ({} classes) to {}",
        manifest.len(),
        manifest.num_classes(),
        args.out.join(BUNDLE_FILE).display()
    );
    Ok(())
}

fn load_dataset(path: &Path, input_size: (usize, usize)) -> Result<Dataset> {
    let (manifest, pixels) = read_bundle(path).map_err(|e| match e {
        Error::Io(io) => Error::Validation(format!("cannot read dataset {}: {io}", path.display())),
        other => other,
    })?;
    Dataset::from_pixels(manifest, &pixels, input_size)
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut run = match &args.config {
        Some(path) => RunConfig::from_json(&read_text(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(data) = args.data {
        run.data = Some(data);
    }
    if let Some(eval) = args.eval_data {
        run.eval_data = Some(eval);
    }
    if let Some(out) = args.out {
        run.out = Some(out);
    }
    args.overrides.apply(&mut run);
    let data = run
        .data
        .clone()
        .ok_or_else(|| Error::Usage("no training data: pass --data or set `data` in the config".into()))?;
    let out = run
        .out
        .clone()
        .ok_or_else(|| Error::Usage("no output directory: pass --out or set `out` in the config".into()))?;

    let train_set = load_dataset(&data, run.model.input_size)?;
    run.adopt_label_space(&train_set.manifest)?;
    run.validate()?;
    let eval_set = match &run.eval_data {
        Some(path) => Some(load_dataset(path, run.model.input_size)?),
        None => None,
    };

    fs::create_dir_all(&out)?;
    fs::write(out.join(RESOLVED_CONFIG_FILE), run.to_json()?)?;
    let mut model = Model::build(run.model.clone())?;
    eprintln!(
        "training {} parameters on {} images for {} epochs",
        model.parameter_count(),
        train_set.len(),
        run.train.epochs
    );
    let mut report = train_observed(&mut model, &train_set, eval_set.as_ref(), &run.train, |e| {
        let map = e.eval.as_ref().map(|m| format!("  mAP {}", format_metric(m.map))).unwrap_or_default();
        eprintln!("epoch {:>3}  loss {:.6}{map}  ({:.1}s)", e.epoch, e.mean_loss, e.wall_seconds);
    })?;
    let ckpt = out.join(CHECKPOINT_FILE);
    checkpoint::save(&model, &ckpt)?;
    report.checkpoint = Some(ckpt);
    report.save_jsonl(out.join(REPORT_FILE))?;

    println!("final loss: {:.6}", report.final_loss().unwrap_or(f64::NAN));
    match report.last_eval() {
        Some(m) => println!("final mAP: {}", format_metric(m.map)),
        None => println!("final mAP: n/a (no eval data)"),
    }
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let model = checkpoint::load(&args.ckpt)?;
    let set = load_dataset(&args.data, model.config().input_size)?;
    if set.manifest.num_classes() != model.num_classes() {
        return Err(Error::Validation(format!(
            "checkpoint predicts {} classes but the dataset has {}",
            model.num_classes(),
            set.manifest.num_classes()
        )));
    }
    let mut report = evaluate(&model, &set, args.rule)?;
    report.class_names = set.manifest.categories.names();

    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join(METRICS_JSON_FILE), report.to_json()?)?;
    let table = report.render_table("Value");
    fs::write(args.out.join(METRICS_TEXT_FILE), &table)?;
    for (class, name) in report.class_names.iter().enumerate() {
        let stem = format!("pr_{}", file_safe(name));
        if let Some(csv) = report.pr_curve_csv(class) {
            fs::write(args.out.join(format!("{stem}.csv")), csv)?;
        }
        if args.svg {
            if let Some(Some(points)) = report.pr_curves.get(class) {
                fs::write(args.out.join(format!("{stem}.svg")), svg::pr_curve(name, points))?;
            }
        }
    }
    println!("decision rule: {}", args.rule);
    print!("{table}");
    Ok(())
}

fn predict_cmd(args: PredictArgs) -> Result<()> {
    let model = checkpoint::load(&args.ckpt)?;
    let (h, w) = model.config().input_size;
    let image = match &args.data {
        Some(bundle) => {
            let (manifest, pixels) = read_bundle(bundle)?;
            let id: u64 = args
                .image
                .parse()
                .map_err(|_| Error::Usage(format!("--image must be an image id when --data is given, got {:?}", args.image)))?;
            let set = Dataset::from_pixels(manifest, &pixels, (h, w))?;
            let row = set
                .manifest
                .images
                .iter()
                .position(|r| r.id == id)
                .ok_or_else(|| Error::Validation(format!("no image with id {id} in {}", bundle.display())))?;
            set.images[row].clone()
        }
        None => {
            let (ih, iw, px) = read_ppm(&args.image).map_err(|e| match e {
                Error::Io(io) => Error::Validation(format!("cannot read image {}: {io}", args.image)),
                other => other,
            })?;
            preprocess(&px, ih, iw, (h, w))?
        }
    };
    let probabilities = model.predict_probabilities(&image)?;
    print!("{}", probabilities.render_table(args.top, 3));
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Validation(format!("cannot read {}: {e}", path.display())))
}

/// Class names become file-name fragments: anything but ASCII alphanumerics turns into `_`.
fn file_safe(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}
