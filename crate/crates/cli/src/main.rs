use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use paqdet::analysis::{count_params, paq_params_closed_form, read_metrics, EpochMetrics};
use paqdet::checkpoint::load_checkpoint;
use paqdet::config::RunConfig;
use paqdet::data::{self, SplitName, CLASS_NAMES};
use paqdet::eval::{self, APResult};
use paqdet::model::{ModelConfig, QueryMode};
use paqdet::train::{self, check_model_gradients, CHECKPOINT_FILE, METRICS_FILE};

mod report;

/// Exit status for bad input: flags, configs, missing or malformed files.
const EXIT_VALIDATION: u8 = 2;
/// Exit status for failures while doing the work.
const EXIT_RUNTIME: u8 = 3;

enum CliError {
    Validation(String),
    Runtime(String),
}

type CliResult = Result<(), CliError>;

fn invalid(msg: impl ToString) -> CliError {
    CliError::Validation(msg.to_string())
}

fn runtime(msg: impl ToString) -> CliError {
    CliError::Runtime(msg.to_string())
}

#[derive(Parser)]
#[command(name = "paqdet", version, about = "Pattern-composed query detector: data, training, evaluation and reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON run configuration (sections: model, train, data, eval, analysis).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Copy, Clone, ValueEnum)]
enum Mode {
    Baseline,
    Paq,
}

impl From<Mode> for QueryMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Baseline => QueryMode::Baseline,
            Mode::Paq => QueryMode::Paq,
        }
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum Scale {
    Tiny,
    Desk,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Dataset seed (overrides data.seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model and write a run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Dataset directory written by gen-data.
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training seed (overrides train.seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Replace a non-empty run directory.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint, or a detections file, on a dataset split.
    Eval {
        #[arg(long, required_unless_present = "detections")]
        checkpoint: Option<PathBuf>,
        /// Score this detections JSON instead of running a model.
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Write the result as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the model's detections here.
        #[arg(long)]
        save_detections: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Per-epoch activation and imbalance curves of a run as CSV.
    Analyze {
        #[arg(long)]
        run_dir: PathBuf,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Side-by-side comparison of two runs.
    AbReport {
        #[arg(long)]
        run_a: PathBuf,
        #[arg(long)]
        run_b: PathBuf,
        /// Also write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective run configuration (defaults, file, overrides) as JSON.
    ShowConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Whole-model finite-difference gradient check.
    Gradcheck {
        #[arg(long, value_enum, default_value = "tiny")]
        scale: Scale,
        #[arg(long, value_enum, default_value = "paq")]
        mode: Mode,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

/// Sets `a.b.c` in a JSON tree; the value is parsed as JSON when possible,
/// otherwise taken as a string.
fn apply_override(root: &mut Value, spec: &str) -> CliResult {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| invalid(format!("override {spec:?} is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| invalid(format!("override {key}: {} is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

fn load_config(args: &ConfigArgs, extra: &[(String, Value)]) -> Result<RunConfig, CliError> {
    let mut tree = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            RunConfig::from_json(&text, &path.display().to_string()).map_err(invalid)?;
            serde_json::from_str::<Value>(&text).map_err(invalid)?
        }
        None => Value::Object(Default::default()),
    };
    for spec in &args.overrides {
        apply_override(&mut tree, spec)?;
    }
    for (key, value) in extra {
        apply_override(&mut tree, &format!("{key}={value}"))?;
    }
    let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| invalid(format!("config: {e}")))?;
    cfg.validate().map_err(invalid)?;
    Ok(cfg)
}

fn prepare_out_dir(dir: &Path, force: bool) -> CliResult {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir).map_err(runtime)?.next().is_some();
        if non_empty && !force {
            return Err(invalid(format!("{} is not empty (use --force to replace it)", dir.display())));
        }
        if non_empty {
            std::fs::remove_dir_all(dir).map_err(runtime)?;
        }
    }
    std::fs::create_dir_all(dir).map_err(runtime)
}

fn write_file(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn cmd_gen_data(cfg: &ConfigArgs, out: &Path, seed: Option<u64>, force: bool) -> CliResult {
    let extra: Vec<(String, Value)> = seed.map(|s| ("data.seed".to_string(), Value::from(s))).into_iter().collect();
    let run = load_config(cfg, &extra)?;
    prepare_out_dir(out, force)?;
    let ds = data::generate_dataset(&run.data).map_err(invalid)?;
    data::save_dataset(out, &ds).map_err(runtime)?;
    write_file(&out.join("dataset_config.json"), &serde_json::to_string_pretty(&run.data).map_err(runtime)?)?;
    print!("{}", report::class_count_table(&ds));
    Ok(())
}

fn cmd_train(
    cfg: &ConfigArgs,
    mode: Option<Mode>,
    data_dir: &Path,
    out: &Path,
    seed: Option<u64>,
    epochs: Option<usize>,
    force: bool,
) -> CliResult {
    let mut extra = Vec::new();
    if let Some(m) = mode {
        extra.push(("train.mode".to_string(), Value::from(QueryMode::from(m).to_string())));
    }
    if let Some(s) = seed {
        extra.push(("train.seed".to_string(), Value::from(s)));
    }
    if let Some(e) = epochs {
        extra.push(("train.epochs".to_string(), Value::from(e)));
    }
    let run = load_config(cfg, &extra)?;
    if !data_dir.join("train").join("annotations.json").is_file() {
        return Err(invalid(format!(
            "no dataset at {} (run gen-data first)",
            data_dir.display()
        )));
    }
    let train_split = data::load_split(data_dir, SplitName::Train).map_err(invalid)?;
    let val_split = data::load_split(data_dir, SplitName::Val).map_err(invalid)?;
    if train_split.is_empty() {
        return Err(invalid("training split is empty"));
    }
    if val_split.is_empty() {
        return Err(invalid("validation split is empty"));
    }
    if let Some(img) = train_split.images.first() {
        if img.size() != run.model.image_size {
            return Err(invalid(format!(
                "dataset images are {0}x{0} but model.image_size is {1}",
                img.size(),
                run.model.image_size
            )));
        }
    }
    prepare_out_dir(out, force)?;
    write_file(&out.join("config.json"), &run.to_json())?;
    let model = run.train.model_config(&run.model);
    let cost = count_params(&model).map_err(runtime)?;
    write_file(&out.join("cost.json"), &serde_json::to_string_pretty(&cost).map_err(runtime)?)?;
    eprintln!(
        "training {} model ({} parameters) for {} epochs on {} images",
        model.mode,
        cost.total_params,
        run.train.epochs,
        train_split.len()
    );
    let result = train::train::<f64>(&run.model, &run.train, &train_split, &val_split, &run.eval, Some(out), |m| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  map50 {:.4}  map50:95 {:.4}  matched {:.2}",
            m.epoch, m.train_loss, m.map50, m.map5095, m.matched_fraction
        );
    });
    match result {
        Ok(_) => {
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Err(e) => Err(runtime(e)),
    }
}

fn eval_json(split: SplitName, r: &APResult, instances: &[usize]) -> Value {
    let classes: Vec<Value> = CLASS_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            serde_json::json!({
                "id": i,
                "name": name,
                "instances": instances.get(i).copied().unwrap_or(0),
                "ap50": r.per_class_ap50.get(&i),
                "ap5095": r.per_class_ap5095.get(&i),
            })
        })
        .collect();
    serde_json::json!({
        "split": split.as_str(),
        "map50": r.map50,
        "map5095": r.map5095,
        "precision": r.precision,
        "recall": r.recall,
        "classes": classes,
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: Option<&Path>,
    detections: Option<&Path>,
    data_dir: &Path,
    split: &str,
    out: Option<&Path>,
    save_dets: Option<&Path>,
    cfg: &ConfigArgs,
) -> CliResult {
    let split_name: SplitName = split.parse().map_err(invalid)?;
    let run = load_config(cfg, &[])?;
    let data = data::load_split(data_dir, split_name).map_err(invalid)?;
    if data.is_empty() || data.class_counts().iter().sum::<usize>() == 0 {
        return Err(invalid(format!("split {split_name} has no annotated objects")));
    }
    let (result, dets) = match (detections, checkpoint) {
        (Some(path), _) => {
            let dets = eval::load_detections(path).map_err(invalid)?;
            (eval::compute_map(&dets, &data.annotations.scenes).map_err(invalid)?, dets)
        }
        (None, Some(path)) => {
            let ck = load_checkpoint::<f64>(path).map_err(invalid)?;
            let mc: &ModelConfig = ck.detector.config();
            if data.images.first().is_some_and(|im| im.size() != mc.image_size) {
                return Err(invalid(format!(
                    "checkpoint expects {0}x{0} images, split has {1}x{1}",
                    mc.image_size,
                    data.images[0].size()
                )));
            }
            if mc.num_classes != data.annotations.categories.len() {
                return Err(invalid(format!(
                    "checkpoint has {} classes, dataset has {}",
                    mc.num_classes,
                    data.annotations.categories.len()
                )));
            }
            eval::evaluate_split(&ck.detector, &data, &run.eval).map_err(runtime)?
        }
        (None, None) => return Err(invalid("either --checkpoint or --detections is required")),
    };
    let counts = data.class_counts();
    print!("{}", report::ap_table(&result, &counts));
    if let Some(path) = out {
        write_file(path, &serde_json::to_string_pretty(&eval_json(split_name, &result, &counts)).map_err(runtime)?)?;
    }
    if let Some(path) = save_dets {
        eval::save_detections(path, &dets).map_err(runtime)?;
    }
    Ok(())
}

fn read_run(dir: &Path) -> Result<(Vec<EpochMetrics>, RunConfig), CliError> {
    let metrics_path = dir.join(METRICS_FILE);
    let metrics = read_metrics(&metrics_path).map_err(|e| invalid(format!("{}: {e}", metrics_path.display())))?;
    if metrics.is_empty() {
        return Err(invalid(format!("{} has no epochs", metrics_path.display())));
    }
    let cfg_path = dir.join("config.json");
    let cfg = RunConfig::load(&cfg_path).map_err(invalid)?;
    Ok((metrics, cfg))
}

fn cmd_analyze(run_dir: &Path, out: Option<&Path>) -> CliResult {
    let (metrics, _) = read_run(run_dir)?;
    let csv = report::activation_csv(&metrics);
    match out {
        Some(path) => write_file(path, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn cmd_ab_report(a: &Path, b: &Path, out: Option<&Path>) -> CliResult {
    let (ma, ca) = read_run(a)?;
    let (mb, cb) = read_run(b)?;
    let side = |m: Vec<EpochMetrics>, c: RunConfig, dir: &Path| -> Result<report::RunSummary, CliError> {
        let model = c.train.model_config(&c.model);
        let cost = count_params(&model).map_err(runtime)?;
        let rare = c.analysis.rare_classes(&c.data.class_probs);
        Ok(report::RunSummary {
            name: dir.display().to_string(),
            last: m.last().cloned().expect("non-empty"),
            closed_form_paq_params: paq_params_closed_form(&model),
            cost,
            rare,
            has_checkpoint: dir.join(CHECKPOINT_FILE).is_file(),
        })
    };
    let (ra, rb) = (side(ma, ca, a)?, side(mb, cb, b)?);
    print!("{}", report::ab_table(&ra, &rb));
    if let Some(path) = out {
        write_file(path, &serde_json::to_string_pretty(&report::ab_json(&ra, &rb)).map_err(runtime)?)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_gradcheck(scale: Scale, mode: Mode, samples: usize, eps: f64, seed: u64, tolerance: f64, corrupt: bool) -> CliResult {
    if samples == 0 {
        return Err(invalid("--samples must be positive"));
    }
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(invalid("--eps must be in (0, 1e-2]"));
    }
    let base = match scale {
        Scale::Tiny => ModelConfig::tiny(),
        Scale::Desk => ModelConfig::default(),
    };
    let cfg = base.with_mode(mode.into());
    let report = check_model_gradients(&cfg, samples, eps, seed, corrupt).map_err(runtime)?;
    println!("{:<28} {:>6} {:>14} {:>14} {:>10}", "parameter", "index", "analytic", "numeric", "rel err");
    for s in &report.samples {
        println!(
            "{:<28} {:>6} {:>14.6e} {:>14.6e} {:>10.2e}",
            s.name, s.index, s.analytic, s.numeric, s.rel_error
        );
    }
    println!("max relative error {:.3e} (tolerance {tolerance:.0e})", report.max_rel_error);
    if !report.stable {
        return Err(runtime("a probe changed the matching or token selection; retry with another --seed or smaller --eps"));
    }
    if report.max_rel_error > tolerance {
        let worst = report
            .samples
            .iter()
            .max_by(|x, y| x.rel_error.total_cmp(&y.rel_error))
            .expect("samples");
        return Err(runtime(format!(
            "gradient check failed: worst offender {}[{}] with relative error {:.3e}",
            worst.name, worst.index, worst.rel_error
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData { cfg, out, seed, force } => cmd_gen_data(&cfg, &out, seed, force),
        Command::Train {
            cfg,
            mode,
            data,
            out,
            seed,
            epochs,
            force,
        } => cmd_train(&cfg, mode, &data, &out, seed, epochs, force),
        Command::Eval {
            checkpoint,
            detections,
            data,
            split,
            out,
            save_detections,
            cfg,
        } => cmd_eval(
            checkpoint.as_deref(),
            detections.as_deref(),
            &data,
            &split,
            out.as_deref(),
            save_detections.as_deref(),
            &cfg,
        ),
        Command::Analyze { run_dir, out } => cmd_analyze(&run_dir, out.as_deref()),
        Command::AbReport { run_a, run_b, out } => cmd_ab_report(&run_a, &run_b, out.as_deref()),
        Command::ShowConfig { cfg } => {
            println!("{}", load_config(&cfg, &[])?.to_json());
            Ok(())
        }
        Command::Gradcheck {
            scale,
            mode,
            samples,
            eps,
            seed,
            tolerance,
            corrupt_gradient,
        } => cmd_gradcheck(scale, mode, samples, eps, seed, tolerance, corrupt_gradient),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
