use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dere_grl::harness::{
    compute_metrics, derive_seed, evaluate, gradcheck_suite, prepare_fold, prepare_sample, run_ablation, run_loso,
    train_fold, write_ablation_dir, write_run_dir, DatasetSpec, ExperimentConfig, Fold,
};
use dere_grl::landmark_data::{synthesize_dataset, SynthSpec};
use dere_grl::losses::StepLosses;
use dere_grl::model::{inspect, DereModel, Variant};
use dere_grl::st_graph::{build_graph, default_selection, dump};

#[derive(Parser)]
#[command(name = "dere", version, about = "Landmark-graph micro-expression recognition")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (JSON). Missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON-lines dataset, overriding the configured dataset.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Overrides the configured model variant.
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Overrides the configured epoch count.
    #[arg(long, global = true)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model on the whole dataset and save its checkpoint.
    Train,
    /// Score a checkpoint on a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Leave-one-subject-out cross-validation.
    Loso,
    /// Module and loss ablation tables.
    Ablate,
    /// Central-difference checks of every op, loss and model variant.
    Gradcheck {
        /// Number of random seeds, starting at 0.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Write a synthetic JSON-lines dataset to the `--out` file.
    SynthData(SynthArgs),
    /// Inspect the landmark graph.
    Graph {
        #[command(subcommand)]
        command: GraphCommand,
    },
    /// Inspect the model.
    Model {
        #[command(subcommand)]
        command: ModelCommand,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = SynthSpec::default().classes)]
    classes: usize,
    #[arg(long, default_value_t = SynthSpec::default().subjects)]
    subjects: usize,
    #[arg(long, default_value_t = SynthSpec::default().per_subject)]
    per_subject: usize,
    /// Apex noise standard deviation in pixels.
    #[arg(long, default_value_t = SynthSpec::default().noise_sigma)]
    noise: f64,
    /// Multiplier on the class displacement patterns.
    #[arg(long, default_value_t = SynthSpec::default().amplitude)]
    amplitude: f64,
}

#[derive(Subcommand)]
enum GraphCommand {
    /// Print the selection, edges, adjacency and node features of one sample.
    Dump {
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
}

#[derive(Subcommand)]
enum ModelCommand {
    /// Print parameter shapes and per-module counts.
    Inspect,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    match s {
        "backbone" | "backbone_only" => Ok(Variant::BackboneOnly),
        "adm" | "backbone_adm" => Ok(Variant::BackboneAdm),
        "full" => Ok(Variant::Full),
        _ => Err(format!("unknown variant {s:?}; expected backbone, adm or full")),
    }
}

impl Common {
    fn load_config(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)
                .with_context(|| format!("reading config {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(path) = &self.dataset {
            config.dataset = DatasetSpec::Path(path.clone());
        }
        if let Some(v) = self.variant {
            config.variant = v;
        }
        if let Some(e) = self.epochs {
            config.train.epochs = e;
        }
        Ok(config)
    }

    fn out_dir(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(common: &Common) -> Result<()> {
    let mut config = common.load_config()?;
    let manifest = config.load_dataset()?;
    let out = common.out_dir("runs/train");
    let all = Fold {
        index: 0,
        test_subject: String::new(),
        train: (0..manifest.samples.len()).collect(),
        test: Vec::new(),
    };
    let selection = default_selection();
    let seed = derive_seed(config.seed, &[13]);
    let data = prepare_fold(&manifest, &all, &config, &selection, seed)?;
    let model = DereModel::new(config.model.clone(), selection.clone())?;
    let trained = train_fold(&model, &data.train, &config, seed)?;
    let originals: Vec<_> = data.train.iter().filter(|s| s.copy == 0).cloned().collect();
    let preds = evaluate(&model, &trained.params, &originals, config.variant)?;
    let metrics = compute_metrics(&preds, manifest.num_classes(), config.f1)?;

    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_file(&out.join("config.json"), &config.to_json_pretty()?)?;
    trained.params.save(&out.join("checkpoint.json"))?;
    if let Some(centers) = &trained.centers {
        write_file(&out.join("centers.json"), &serde_json::to_string(centers)?)?;
    }
    let mut curves = format!("{}\n", StepLosses::CSV_HEADER);
    for s in &trained.steps {
        let _ = writeln!(curves, "{}", s.csv_row());
    }
    write_file(&out.join("curves.csv"), &curves)?;
    println!(
        "trained {} on {} samples for {} epochs; train accuracy {:.2}%, F1 {:.4}",
        config.variant.label(),
        data.train.len(),
        trained.epoch_losses.len(),
        100.0 * metrics.accuracy,
        metrics.f1
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_evaluate(common: &Common, checkpoint: &Path) -> Result<()> {
    let mut config = common.load_config()?;
    let manifest = config.load_dataset()?;
    let model = DereModel::new(config.model.clone(), default_selection())?;
    let mut params = model.init_params(0);
    let text = std::fs::read_to_string(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    params.load_json(&text)?;
    let samples = manifest
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| prepare_sample(s, i, &config, model.selection()))
        .collect::<dere_grl::Result<Vec<_>>>()?;
    let preds = evaluate(&model, &params, &samples, config.variant)?;
    let metrics = compute_metrics(&preds, manifest.num_classes(), config.f1)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    if let Some(out) = &common.out {
        write_file(&out.join("predictions.json"), &serde_json::to_string_pretty(&preds)?)?;
        write_file(&out.join("metrics.json"), &serde_json::to_string_pretty(&metrics)?)?;
    }
    Ok(())
}

fn cmd_loso(common: &Common) -> Result<()> {
    let config = common.load_config()?;
    let outcome = run_loso(&config)?;
    let out = common.out_dir("runs/loso");
    write_run_dir(&out, &outcome)?;
    print!("{}", outcome.report.render());
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_ablate(common: &Common) -> Result<()> {
    let config = common.load_config()?;
    let report = run_ablation(&config)?;
    let out = common.out_dir("runs/ablate");
    write_ablation_dir(&out, &report)?;
    print!("{}", report.render());
    println!("wrote {}", out.display());
    Ok(())
}

/// Returns whether every check passed and the negative control was rejected.
fn cmd_gradcheck(common: &Common, seeds: u64) -> Result<bool> {
    if seeds == 0 {
        bail!("--seeds must be positive");
    }
    let seeds: Vec<u64> = (0..seeds).collect();
    let cases = gradcheck_suite::run_suite(&seeds)?;
    let mut table = format!("{:<34} {:>4} {:>12} {:>12} {:>6}\n", "check", "seed", "max rel err", "max abs err", "ok");
    for c in &cases {
        let _ = writeln!(
            table,
            "{:<34} {:>4} {:>12.3e} {:>12.3e} {:>6}",
            c.name,
            c.seed,
            c.report.max_rel_error,
            c.report.max_abs_error,
            c.report.passed()
        );
    }
    let control = gradcheck_suite::negative_control(0)?;
    let _ = writeln!(
        table,
        "{:<34} {:>4} {:>12.3e} {:>12.3e} {:>6}",
        control.name,
        control.seed,
        control.report.max_rel_error,
        control.report.max_abs_error,
        if control.report.passed() { "MISSED" } else { "caught" }
    );
    let failed = cases.iter().filter(|c| !c.report.passed()).count();
    let _ = writeln!(
        table,
        "\n{} checks, {} failed (step {:e}, tolerance {:e})",
        cases.len(),
        failed,
        gradcheck_suite::STEP,
        gradcheck_suite::TOLERANCE
    );
    print!("{table}");
    if let Some(out) = &common.out {
        write_file(&out.join("gradcheck.txt"), &table)?;
    }
    Ok(failed == 0 && !control.report.passed())
}

fn cmd_synth(common: &Common, args: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        classes: args.classes,
        subjects: args.subjects,
        per_subject: args.per_subject,
        noise_sigma: args.noise,
        amplitude: args.amplitude,
        seed: common.seed.unwrap_or(SynthSpec::default().seed),
        ..SynthSpec::default()
    };
    let manifest = synthesize_dataset(&spec)?;
    // Here `--out` names the dataset file rather than a directory.
    let path = common.out.clone().unwrap_or_else(|| PathBuf::from("synthetic.jsonl"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    manifest.save(&path)?;
    println!(
        "wrote {} samples ({} subjects, {} classes) to {}",
        manifest.samples.len(),
        spec.subjects,
        spec.classes,
        path.display()
    );
    Ok(())
}

fn cmd_graph_dump(common: &Common, index: usize) -> Result<()> {
    let mut config = common.load_config()?;
    let manifest = config.load_dataset()?;
    let Some(sample) = manifest.samples.get(index) else {
        bail!("sample {index} out of range: dataset has {} samples", manifest.samples.len());
    };
    let selection = default_selection();
    let graph = build_graph(sample, &selection, config.normalize_coordinates)?;
    let json = serde_json::to_string_pretty(&dump(&graph, &selection))?;
    match &common.out {
        Some(out) => write_file(&out.join(format!("graph_{index}.json")), &json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_model_inspect(common: &Common) -> Result<()> {
    let mut config = common.load_config()?;
    config.load_dataset()?;
    let model = DereModel::new(config.model.clone(), default_selection())?;
    let params = model.init_params(config.seed);
    let rows = inspect(&params);
    println!("{:<26} {:>10} {:>7}", "parameter", "shape", "count");
    for r in &rows {
        let shape = r.shape.iter().map(ToString::to_string).collect::<Vec<_>>().join("x");
        println!("{:<26} {:>10} {:>7}", r.name, shape, r.count);
    }
    println!();
    let mut modules: Vec<(String, usize)> = Vec::new();
    for r in &rows {
        match modules.iter_mut().find(|(m, _)| *m == r.module) {
            Some((_, n)) => *n += r.count,
            None => modules.push((r.module.clone(), r.count)),
        }
    }
    for (m, n) in &modules {
        println!("{m:<26} {n:>18}");
    }
    println!("{:<26} {:>18}", "total", params.num_scalars());
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    let common = &cli.common;
    match &cli.command {
        Command::Train => cmd_train(common)?,
        Command::Evaluate { checkpoint } => cmd_evaluate(common, checkpoint)?,
        Command::Loso => cmd_loso(common)?,
        Command::Ablate => cmd_ablate(common)?,
        Command::Gradcheck { seeds } => return cmd_gradcheck(common, *seeds),
        Command::SynthData(args) => cmd_synth(common, args)?,
        Command::Graph { command: GraphCommand::Dump { sample } } => cmd_graph_dump(common, *sample)?,
        Command::Model { command: ModelCommand::Inspect } => cmd_model_inspect(common)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
