//! Command-line front end: `synth`, `ingest`, `train`, `evaluate`, `ablate`, `gradcheck`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{
    align_pair, ingest_ratings, load_pair_dir, read_alignment, write_pair_dir, write_synthetic_dir,
    generate_synthetic, Axis, CrossDomainMap, DomainPair, RatingFormat, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::eval::{
    run_ablation, run_variants, score_model, AblationGrid, EvalReport, ExperimentConfig, Method,
    Variant,
};
use crate::numerics::{run_suite, Activation};

const PRECEDENCE: &str = "Settings resolve as: command-line flags, then the --config file, \
then the published defaults of the chosen method. The config file is flat TOML whose keys are the \
flag names with underscores (init_epochs = 200), plus seed, jobs and format.";

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_OUTPUT: &str = "cdrec-out";
pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const ABLATION_FILE: &str = "ablation.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    #[default]
    Table,
}

#[derive(Debug, Parser)]
#[command(name = "cdrec", version, about = "Cold-start cross-domain recommendation with coupled autoencoders")]
#[command(after_help = PRECEDENCE)]
pub struct Cli {
    /// Flat TOML file of settings.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for splits and models (the generator seed for `synth`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for repeats; results do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic source/target pair with its ground truth.
    Synth(SynthArgs),
    /// Align two raw rating logs into a pair directory.
    Ingest(IngestArgs),
    /// Train on repeated cold-start splits; write a report and a checkpoint.
    Train(Overrides),
    /// Score a checkpoint on the held-out entities of one split.
    Evaluate(EvaluateArgs),
    /// Compare variants or latent widths.
    Ablate(AblateArgs),
    /// Verify analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
}

/// Settings shared by the config file and the experiment flags. Every field
/// is optional so the two layers can be merged.
#[derive(Clone, Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    /// cacdr, lfacdr or baseline.
    #[arg(long)]
    pub method: Option<Method>,
    /// Shared axis: items or users.
    #[arg(long)]
    pub scenario: Option<Axis>,
    /// Pair directory written by `synth` or `ingest`.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Generate the pair in memory; `default` is the reference spec.
    #[arg(long, value_name = "NAME")]
    pub synth: Option<String>,
    #[arg(long)]
    pub synth_items: Option<usize>,
    #[arg(long)]
    pub synth_users: Option<usize>,
    #[arg(long)]
    pub synth_rank: Option<usize>,
    #[arg(long)]
    pub synth_noise: Option<f64>,
    #[arg(long)]
    pub synth_source_sparsity: Option<f64>,
    #[arg(long)]
    pub synth_target_sparsity: Option<f64>,
    #[arg(long)]
    pub synth_map: Option<CrossDomainMap>,
    #[arg(long)]
    pub synth_seed: Option<u64>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub split_ratio: Option<f64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Encoder widths after the input, comma separated; the last is k.
    #[arg(long, value_delimiter = ',')]
    pub encoder_layers: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub mapper_hidden: Option<Vec<usize>>,
    /// Replaces the last encoder width.
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub init_epochs: Option<usize>,
    #[arg(long)]
    pub init_lr: Option<f64>,
    #[arg(long)]
    pub init_l2: Option<f64>,
    #[arg(long)]
    pub coupled_epochs: Option<usize>,
    #[arg(long)]
    pub coupled_lr: Option<f64>,
    #[arg(long)]
    pub coupled_l2: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// relu or identity.
    #[arg(long)]
    pub output_activation: Option<Activation>,
    #[arg(skip)]
    pub seed: Option<u64>,
    #[arg(skip)]
    pub jobs: Option<usize>,
    #[arg(skip)]
    pub format: Option<Format>,
}

macro_rules! overlay {
    ($hi:expr, $lo:expr, $($field:ident),+) => {
        Overrides { $($field: $hi.$field.or($lo.$field),)+ }
    };
}

impl Overrides {
    /// Fields set in `self` win over those in `lower`. The pair source
    /// (`data` or `synth`) is taken as a unit.
    fn over(self, lower: Overrides) -> Overrides {
        let source_set = self.data.is_some() || self.synth.is_some();
        let (data, synth) = if source_set {
            (self.data.clone(), self.synth.clone())
        } else {
            (lower.data.clone(), lower.synth.clone())
        };
        let merged = overlay!(
            self, lower, method, scenario, data, synth, synth_items, synth_users, synth_rank,
            synth_noise, synth_source_sparsity, synth_target_sparsity, synth_map, synth_seed,
            repeats, split_ratio, out, encoder_layers, mapper_hidden, latent_dim, batch_size,
            init_epochs, init_lr, init_l2, coupled_epochs, coupled_lr, coupled_l2, lambda,
            output_activation, seed, jobs, format
        );
        Overrides { data, synth, ..merged }
    }

    fn synth_spec(&self, scenario: Axis) -> Result<SyntheticSpec> {
        let base = SyntheticSpec::default();
        let spec = SyntheticSpec {
            n_items: self.synth_items.unwrap_or(base.n_items),
            n_users: self.synth_users.unwrap_or(base.n_users),
            rank: self.synth_rank.unwrap_or(base.rank),
            noise: self.synth_noise.unwrap_or(base.noise),
            source_sparsity: self.synth_source_sparsity.unwrap_or(base.source_sparsity),
            target_sparsity: self.synth_target_sparsity.unwrap_or(base.target_sparsity),
            map: self.synth_map.unwrap_or(base.map),
            shared_axis: scenario,
            seed: self.synth_seed.unwrap_or(base.seed),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory to write.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub scenario: Option<Axis>,
    #[arg(long)]
    pub synth_items: Option<usize>,
    #[arg(long)]
    pub synth_users: Option<usize>,
    #[arg(long)]
    pub synth_rank: Option<usize>,
    #[arg(long)]
    pub synth_noise: Option<f64>,
    #[arg(long)]
    pub synth_source_sparsity: Option<f64>,
    #[arg(long)]
    pub synth_target_sparsity: Option<f64>,
    #[arg(long)]
    pub synth_map: Option<CrossDomainMap>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Source-domain rating log (`user,item,rating[,timestamp]`).
    #[arg(long, value_name = "FILE")]
    pub source: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub target: PathBuf,
    #[arg(long, default_value = "items")]
    pub scenario: Axis,
    /// Two-column `source_id,target_id` file; ids match by name without it.
    #[arg(long, value_name = "FILE")]
    pub alignment: Option<PathBuf>,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
    #[arg(long, default_value_t = 5.0)]
    pub max_rating: f64,
    /// Minimum ratings on shared entities for an entity of the other axis.
    #[arg(long, default_value_t = 1)]
    pub min_interactions: usize,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Split repeat whose held-out entities are scored.
    #[arg(long, default_value_t = 0)]
    pub repeat: usize,
    #[command(flatten)]
    pub settings: Overrides,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GridKind {
    Coupled,
    Init,
    Latent,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub grid: GridKind,
    /// Latent widths for `--grid latent`.
    #[arg(long, value_delimiter = ',', value_parser = clap::value_parser!(usize))]
    pub dims: Option<Vec<usize>>,
    #[command(flatten)]
    pub settings: Overrides,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random single networks to check before the stacked composition.
    #[arg(long, default_value_t = 100)]
    pub nets: usize,
    /// Perturb one analytic gradient entry; the check must then fail.
    #[arg(long)]
    pub inject_fault: bool,
}

/// Fully resolved experiment settings, embedded in every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    pub scenario: Axis,
    pub data: Option<PathBuf>,
    pub synth: Option<SyntheticSpec>,
    pub train: TrainConfig,
    pub repeats: usize,
    pub split_ratio: f64,
    pub seed: u64,
    pub output: PathBuf,
    pub format: Format,
    /// Does not affect results, so it stays out of reports.
    #[serde(skip)]
    pub jobs: usize,
}

/// Reads a flat TOML settings file.
pub fn load_config(path: &Path) -> Result<Overrides> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn load_file(path: Option<&Path>) -> Result<Overrides> {
    path.map_or_else(|| Ok(Overrides::default()), load_config)
}

fn method_defaults(method: Method) -> TrainConfig {
    match method {
        Method::Lfacdr => TrainConfig::lfacdr_defaults(),
        Method::Cacdr | Method::Baseline => TrainConfig::cacdr_defaults(),
    }
}

fn globals(cli: &Cli) -> Overrides {
    Overrides {
        seed: cli.seed,
        jobs: cli.jobs,
        format: cli.format,
        ..Overrides::default()
    }
}

/// Merges flags and global options over the `--config` file over the published defaults.
pub fn resolve(cli: &Cli, flags: &Overrides) -> Result<RunConfig> {
    let file = load_file(cli.config.as_deref())?;
    resolve_with(globals(cli).over(flags.clone()), file)
}

/// Merges `flags` over `file` over the published defaults of the chosen method.
pub fn resolve_with(flags: Overrides, file: Overrides) -> Result<RunConfig> {
    let o = flags.over(file);
    let method = o.method.unwrap_or(Method::Cacdr);
    let mut train = method_defaults(method);
    if let Some(v) = &o.encoder_layers {
        train.encoder_layers = v.clone();
    }
    if let Some(v) = &o.mapper_hidden {
        train.mapper_hidden = v.clone();
    }
    if let Some(k) = o.latent_dim {
        train = train.with_latent_dim(k);
    }
    train.batch_size = o.batch_size.unwrap_or(train.batch_size);
    train.init.epochs = o.init_epochs.unwrap_or(train.init.epochs);
    train.init.lr = o.init_lr.unwrap_or(train.init.lr);
    train.init.l2 = o.init_l2.unwrap_or(train.init.l2);
    train.coupled.epochs = o.coupled_epochs.unwrap_or(train.coupled.epochs);
    train.coupled.lr = o.coupled_lr.unwrap_or(train.coupled.lr);
    train.coupled.l2 = o.coupled_l2.unwrap_or(train.coupled.l2);
    train.lambda = o.lambda.unwrap_or(train.lambda);
    train.output_activation = o.output_activation.unwrap_or(train.output_activation);
    let seed = o.seed.unwrap_or(DEFAULT_SEED);
    train.seed = seed;
    train.validate()?;

    let scenario = o.scenario.unwrap_or(Axis::Items);
    let synth = match (&o.data, &o.synth) {
        (Some(_), Some(_)) => {
            return Err(Error::Config("give either a data directory or a synthetic spec, not both".into()))
        }
        (None, None) => return Err(Error::Config("no data: pass --data DIR or --synth default".into())),
        (None, Some(name)) if name == "default" => Some(o.synth_spec(scenario)?),
        (None, Some(name)) => {
            return Err(Error::Config(format!("unknown synthetic spec `{name}` (expected default)")))
        }
        (Some(_), None) => None,
    };
    let repeats = o.repeats.unwrap_or(10);
    if repeats == 0 {
        return Err(Error::Config("repeats must be >= 1".into()));
    }
    let split_ratio = o.split_ratio.unwrap_or(0.8);
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must be in (0, 1), got {split_ratio}")));
    }
    let jobs = o.jobs.unwrap_or(1);
    if jobs == 0 {
        return Err(Error::Config("jobs must be >= 1".into()));
    }
    Ok(RunConfig {
        method,
        scenario,
        data: o.data.clone(),
        synth,
        train,
        repeats,
        split_ratio,
        seed,
        output: o.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT)),
        format: o.format.unwrap_or_default(),
        jobs,
    })
}

impl RunConfig {
    pub fn load_pair(&self) -> Result<DomainPair> {
        if let Some(spec) = &self.synth {
            return Ok(generate_synthetic(spec)?.0);
        }
        let dir = self.data.as_ref().expect("resolved with a pair source");
        let (pair, _) = load_pair_dir(dir)?;
        if pair.shared_axis != self.scenario {
            return Err(Error::Config(format!(
                "{} shares {} but the scenario is {}",
                dir.display(),
                pair.shared_axis,
                self.scenario
            )));
        }
        Ok(pair)
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            method: self.method,
            train: self.train.clone(),
            repeats: self.repeats,
            split_ratio: self.split_ratio,
            seed: self.seed,
            jobs: self.jobs,
        }
    }

    fn echo(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn print_value<T: Serialize>(format: Format, value: &T, table: impl FnOnce() -> String) -> Result<()> {
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(value)?),
        Format::Table => print!("{}", table()),
    }
    Ok(())
}

fn cmd_synth(cli: &Cli, args: &SynthArgs) -> Result<i32> {
    let file = load_file(cli.config.as_deref())?;
    let flags = Overrides {
        scenario: args.scenario,
        synth_items: args.synth_items,
        synth_users: args.synth_users,
        synth_rank: args.synth_rank,
        synth_noise: args.synth_noise,
        synth_source_sparsity: args.synth_source_sparsity,
        synth_target_sparsity: args.synth_target_sparsity,
        synth_map: args.synth_map,
        synth_seed: cli.seed,
        ..Overrides::default()
    };
    let o = flags.over(file);
    let spec = o.synth_spec(o.scenario.unwrap_or(Axis::Items))?;
    let (pair, truth) = generate_synthetic(&spec)?;
    write_synthetic_dir(&args.out, &pair, &truth)?;
    let format = cli.format.or(o.format).unwrap_or_default();
    print_value(format, &spec, || {
        format!(
            "wrote {} (source {} ratings, target {} ratings, shared {})\n",
            args.out.display(),
            pair.source.nnz(),
            pair.target.nnz(),
            spec.shared_axis
        )
    })?;
    Ok(0)
}

fn cmd_ingest(cli: &Cli, args: &IngestArgs) -> Result<i32> {
    let format = RatingFormat {
        delimiter: args.delimiter,
        max_rating: args.max_rating,
    };
    let source = ingest_ratings(&args.source, &format)?;
    let target = ingest_ratings(&args.target, &format)?;
    let alignment = args
        .alignment
        .as_deref()
        .map(|p| read_alignment(p, args.delimiter))
        .transpose()?;
    let (pair, ids) = align_pair(&source, &target, args.scenario, alignment.as_deref(), args.min_interactions)?;
    write_pair_dir(&args.out, &pair, &ids)?;
    let summary = serde_json::json!({
        "out": args.out,
        "shared_axis": pair.shared_axis,
        "shared": pair.shared_count(),
        "source_ratings": pair.source.nnz(),
        "target_ratings": pair.target.nnz(),
    });
    print_value(cli.format.unwrap_or_default(), &summary, || {
        format!(
            "wrote {} ({} shared {}, source {} ratings, target {} ratings)\n",
            args.out.display(),
            pair.shared_count(),
            pair.shared_axis,
            pair.source.nnz(),
            pair.target.nnz()
        )
    })?;
    Ok(0)
}

fn cmd_train(cli: &Cli, flags: &Overrides) -> Result<i32> {
    let run = resolve(cli, flags)?;
    let pair = run.load_pair()?;
    let (mut reports, model) = run_variants(&run.experiment(), &pair, &[Variant::FULL])?;
    let mut report = reports.remove(0);
    report.config = run.echo()?;
    write_json(&run.output.join(REPORT_FILE), &report)?;
    if let Some(model) = model {
        let ckpt = Checkpoint::from_model(&model, &run.experiment().repeat_config(0));
        write_json(&run.output.join(CHECKPOINT_FILE), &ckpt)?;
    }
    print_value(run.format, &report, || report.to_table())?;
    Ok(0)
}

fn cmd_evaluate(cli: &Cli, args: &EvaluateArgs) -> Result<i32> {
    let mut settings = args.settings.clone();
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    settings.method = settings.method.or(Some(ckpt.method));
    settings.scenario = settings.scenario.or(Some(ckpt.shared_axis));
    let run = resolve(cli, &settings)?;
    if run.method != ckpt.method {
        return Err(Error::Config(format!(
            "checkpoint holds a {} model, not {}",
            ckpt.method, run.method
        )));
    }
    let pair = run.load_pair()?;
    let model = ckpt.to_model()?;
    let result = score_model(&model, &pair, run.split_ratio, run.seed, args.repeat)?;
    let report = EvalReport::from_repeats(ckpt.method, Variant::FULL, vec![result], run.echo()?);
    print_value(run.format, &report, || report.to_table())?;
    Ok(0)
}

fn cmd_ablate(cli: &Cli, args: &AblateArgs) -> Result<i32> {
    let grid = match args.grid {
        GridKind::Coupled => AblationGrid::Coupled,
        GridKind::Init => AblationGrid::Init,
        GridKind::Latent => AblationGrid::Latent(
            args.dims.clone().unwrap_or_else(|| AblationGrid::DEFAULT_DIMS.to_vec()),
        ),
    };
    grid.validate()?;
    let run = resolve(cli, &args.settings)?;
    let pair = run.load_pair()?;
    let mut result = run_ablation(&grid, &run.experiment(), &pair)?;
    let echo = run.echo()?;
    for (_, report) in &mut result.cells {
        report.config = echo.clone();
    }
    let document = serde_json::json!({ "config": echo, "ablation": result });
    write_json(&run.output.join(ABLATION_FILE), &document)?;
    print_value(run.format, &document, || result.to_table())?;
    Ok(0)
}

fn cmd_gradcheck(cli: &Cli, args: &GradcheckArgs) -> Result<i32> {
    let file = load_file(cli.config.as_deref())?;
    let seed = cli.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    let report = run_suite(seed, args.nets, args.inject_fault)?;
    let format = cli.format.or(file.format).unwrap_or_default();
    print_value(format, &report, || {
        format!(
            "max relative error {:e} (random nets {:e}, stacked {:e}): {}\n",
            report.max_relative_error(),
            report.random_max,
            report.stacked,
            if report.passed() { "PASS" } else { "FAIL" }
        )
    })?;
    Ok(if report.passed() { 0 } else { 1 })
}

/// Exit status for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() {
        return 3;
    }
    match err {
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Parse { .. } | Error::Data(_) | Error::NoRatings(_) | Error::Serde(_) => 4,
        _ => 1,
    }
}

fn init_logging(quiet: bool) {
    let level = if quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .format_target(false)
        .try_init();
}

pub fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, a),
        Command::Ingest(a) => cmd_ingest(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Evaluate(a) => cmd_evaluate(cli, a),
        Command::Ablate(a) => cmd_ablate(cli, a),
        Command::Gradcheck(a) => cmd_gradcheck(cli, a),
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging(cli.quiet);
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
