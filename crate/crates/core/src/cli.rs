//! Command-line front end: `train`, `predict`, `evaluate`, `xval` and
//! `selfcheck`.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::checkpoint;
use crate::corpus::{
    emit_annotations, fold_manifest, make_folds, parse_annotations, parse_tokens, split_dev, Dataset, Instance,
};
use crate::error::{Error, Result};
use crate::evaluation::{bootstrap_significance, MetricsReport};
use crate::lattice::{EdgeRule, TransitionTable};
use crate::selfcheck::{self, SelfCheckOptions};
use crate::training::{cross_validate, predict_dataset, train, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_SELFCHECK: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sentispan", version, about = "Targeted sentiment with latent sentiment spans")]
pub struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Tag sentences with a trained model.
    Predict(PredictArgs),
    /// Score predictions against gold annotations.
    Evaluate(EvaluateArgs),
    /// k-fold cross-validation.
    Xval(XvalArgs),
    /// Check inference against enumeration and gradients against finite differences.
    Selfcheck(SelfcheckArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Annotated training data.
    #[arg(long)]
    pub train: PathBuf,
    /// Annotated dev data; carved from the training data when absent.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub model: PathBuf,
    /// Also write the per-epoch report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint to load.
    #[arg(long)]
    pub model: PathBuf,
    /// Token-per-line input; a tag column is optional.
    #[arg(long)]
    pub input: PathBuf,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Configuration whose dimensions must match the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    /// Print `key=value` lines instead of a table.
    #[arg(long)]
    pub porcelain: bool,
    /// Write the per-length breakdown as CSV.
    #[arg(long)]
    pub lengths_csv: Option<PathBuf>,
    /// Predictions of a second system to test `--pred` against.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub resamples: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct XvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Annotated data to split into folds.
    #[arg(long)]
    pub data: PathBuf,
    /// Overrides the configured number of folds.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Write the fold index lists here.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Random clamped cases to enumerate.
    #[arg(long, default_value_t = 60)]
    pub cases: usize,
    /// Remove one transition family before checking.
    #[arg(long, hide = true)]
    pub corrupt_table: Option<String>,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn read_annotations(path: &Path) -> Result<Dataset> {
    parse_annotations(&read_text(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<i32> {
    let cfg = args.config.load()?;
    let data = read_annotations(&args.train)?;
    let (train_set, dev_set) = match &args.dev {
        Some(dev) => (data, read_annotations(dev)?),
        None => {
            let all: Vec<usize> = (0..data.len()).collect();
            let (t, d) = split_dev(&all, cfg.dev_fraction, cfg.seed);
            (data.subset(&t), data.subset(&d))
        }
    };
    info!("{} training and {} dev sentences", train_set.len(), dev_set.len());
    let (model, report) = train(&train_set, &dev_set, &cfg)?;
    checkpoint::save(&model, &args.model)?;
    info!("selected epoch {}", report.selected_epoch);
    let lines = report.lines();
    if let Some(path) = &args.report {
        std::fs::write(path, &lines)?;
    }
    print!("{lines}");
    Ok(EXIT_OK)
}

fn run_predict(args: &PredictArgs) -> Result<i32> {
    let model = checkpoint::load(&args.model)?;
    if let Some(path) = &args.config {
        let mut expected = TrainConfig::load(path)?.model_config();
        expected.dropout = model.config.dropout;
        if expected != model.config {
            return Err(Error::Checkpoint(format!(
                "checkpoint dimensions {:?} differ from configuration {:?}",
                model.config, expected
            )));
        }
    }
    let input = parse_tokens(&read_text(&args.input)?)?;
    let preds = predict_dataset(&model, &input)?;
    let tagged = Dataset::new(
        input
            .instances
            .into_iter()
            .zip(preds)
            .map(|(inst, spans)| Instance::new(inst.sentence, spans))
            .collect::<Result<_>>()?,
    );
    write_out(args.output.as_deref(), &emit_annotations(&tagged))?;
    Ok(EXIT_OK)
}

fn check_alignment(gold: &Dataset, pred: &Dataset, what: &str) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::Format(format!(
            "gold has {} sentences, {what} has {}",
            gold.len(),
            pred.len()
        )));
    }
    for (i, (g, p)) in gold.instances.iter().zip(&pred.instances).enumerate() {
        if g.sentence.tokens() != p.sentence.tokens() {
            return Err(Error::Format(format!("sentence {} differs between gold and {what}", i + 1)));
        }
    }
    Ok(())
}

fn run_evaluate(args: &EvaluateArgs) -> Result<i32> {
    let gold = read_annotations(&args.gold)?;
    let pred = read_annotations(&args.pred)?;
    check_alignment(&gold, &pred, "predictions")?;
    let golds = gold.spans();
    let preds = pred.spans();
    let report = MetricsReport::compute(&preds, &golds)?;
    let mut out = if args.porcelain { report.porcelain() } else { report.table() };
    if let Some(path) = &args.baseline {
        let base = read_annotations(path)?;
        check_alignment(&gold, &base, "baseline")?;
        let p = bootstrap_significance(&base.spans(), &preds, &golds, args.resamples, args.seed)?;
        out.push_str(&format!("bootstrap_p={p:.4}\n"));
    }
    if let Some(path) = &args.lengths_csv {
        std::fs::write(path, report.length_csv())?;
    }
    print!("{out}");
    Ok(EXIT_OK)
}

fn run_xval(args: &XvalArgs) -> Result<i32> {
    let mut cfg = args.config.load()?;
    if let Some(k) = args.folds {
        cfg.folds = k;
    }
    let data = read_annotations(&args.data)?;
    if let Some(path) = &args.manifest {
        let folds = make_folds(&data, cfg.folds, cfg.dev_fraction, cfg.seed)?;
        std::fs::write(path, fold_manifest(&folds))?;
    }
    let cv = cross_validate(&data, &cfg)?;
    print!("{}", cv.lines());
    Ok(EXIT_OK)
}

fn run_selfcheck(args: &SelfcheckArgs) -> Result<i32> {
    let table = match &args.corrupt_table {
        Some(rule) => {
            warn!("running the self-check with {rule} transitions removed");
            TransitionTable::without(rule.parse::<EdgeRule>()?)
        }
        None => TransitionTable::standard(),
    };
    let report = selfcheck::run(&SelfCheckOptions {
        table,
        cases: args.cases,
        seed: args.seed,
        ..SelfCheckOptions::default()
    })?;
    print!("{}", report.lines());
    Ok(if report.passed() { EXIT_OK } else { EXIT_SELFCHECK })
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Argument(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

pub fn execute(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Predict(a) => run_predict(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Xval(a) => run_xval(a),
        Command::Selfcheck(a) => run_selfcheck(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
