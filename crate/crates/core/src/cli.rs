//! Command-line interface.
//!
//! Flags may also come from a TOML file given with `--config`: top-level
//! keys name global flags, and a table per subcommand names that
//! subcommand's flags (`[train] hidden = 64`). File values are applied
//! first, so flags on the command line override them. A flag repeated on
//! the command line keeps its last value.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{gen_discrete_uniform, gen_gmm, load_jsonl, split, write_jsonl, GmmParams, Series, SeriesView, SplitConfig};
use crate::dist::{linspace, C2farDensity, StepDensity, TailShapes};
use crate::error::{Error, Result};
use crate::hbin::BinningSpec;
use crate::metrics::nll_eval;
use crate::model::{C2farRnnConfig, GaussianConfig};
use crate::pipeline::train::validation_windows;
use crate::pipeline::{
    grids_to_csv, load_checkpoint, rolling_evaluate, save_checkpoint, train, window_at, CheckpointManifest, EvalMode, ForecastOptions,
    Forecaster, Learned, ModelConfig, ModelKind, TrainOptions, TrainSchedule, WindowForecaster,
};
use crate::tune::{run_study, PruneConfig, SearchSpace};

#[derive(Debug, Parser)]
#[command(name = "c2far", version, about = "Coarse-to-fine autoregressive forecasting", args_override_self = true)]
pub struct Cli {
    /// TOML file with default flag values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for all outputs.
    #[arg(long, env = "C2FAR_OUT_DIR", default_value = "out", global = true)]
    pub out_dir: PathBuf,
    /// Random seed. Repeating the flag keeps the last value.
    #[arg(long, default_value_t = 0, global = true)]
    pub seed: u64,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset as JSON lines.
    GenSynthetic(GenArgs),
    /// Train a model and save its best checkpoint.
    Train(TrainArgs),
    /// Random search with median pruning.
    Tune(TuneArgs),
    /// Forecast past the end of every series.
    Forecast(ForecastArgs),
    /// Rolling evaluation over the test split.
    Evaluate(EvaluateArgs),
    /// Density and CDF on a grid, as CSV.
    PlotData(PlotArgs),
    /// Teacher-forced test NLL in the normalized domain.
    NllEval(NllArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SyntheticKind {
    Gmm,
    Discrete,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum, default_value = "gmm")]
    pub kind: SyntheticKind,
    #[arg(long, default_value_t = 50)]
    pub n_series: usize,
    #[arg(long, default_value_t = 2000)]
    pub length: usize,
    /// Smallest integer for the discrete set.
    #[arg(long, default_value_t = 1, allow_negative_numbers = true)]
    pub lo: i64,
    /// Largest integer for the discrete set.
    #[arg(long, default_value_t = 10, allow_negative_numbers = true)]
    pub hi: i64,
    /// Output file (default: `<out-dir>/<kind>.jsonl`).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// JSON-lines dataset.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 168)]
    pub cond_len: usize,
    #[arg(long, default_value_t = 24)]
    pub pred_len: usize,
    /// Validation points per series.
    #[arg(long, default_value_t = 24)]
    pub val: usize,
    /// Test points per series.
    #[arg(long, default_value_t = 24)]
    pub test: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ScheduleArgs {
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub ranges_per_checkpoint: Option<usize>,
    #[arg(long)]
    pub validation_eval_period: Option<usize>,
    #[arg(long)]
    pub validation_warmup: Option<usize>,
    #[arg(long)]
    pub stop_evals_no_improve: Option<usize>,
    #[arg(long)]
    pub max_checkpoints: Option<usize>,
    #[arg(long)]
    pub validation_rollouts: Option<usize>,
    #[arg(long)]
    pub test_rollouts: Option<usize>,
    #[arg(long)]
    pub validation_ranges: Option<usize>,
}

impl ScheduleArgs {
    pub fn schedule(&self) -> Result<TrainSchedule> {
        let d = TrainSchedule::default();
        let s = TrainSchedule {
            train_batch_size: self.batch_size.unwrap_or(d.train_batch_size),
            ranges_per_checkpoint: self.ranges_per_checkpoint.unwrap_or(d.ranges_per_checkpoint),
            validation_eval_period: self.validation_eval_period.unwrap_or(d.validation_eval_period),
            validation_warmup: self.validation_warmup.unwrap_or(d.validation_warmup),
            stop_evals_no_improve: self.stop_evals_no_improve.unwrap_or(d.stop_evals_no_improve),
            max_checkpoints: self.max_checkpoints.unwrap_or(d.max_checkpoints),
            validation_rollouts: self.validation_rollouts.unwrap_or(d.validation_rollouts),
            test_rollouts: self.test_rollouts.unwrap_or(d.test_rollouts),
            validation_ranges: self.validation_ranges.unwrap_or(d.validation_ranges),
        };
        s.validate()?;
        Ok(s)
    }
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// c2far-b1, c2far-b2, c2far-b3 or deepar-gaussian.
    #[arg(long, value_parser = parse_kind)]
    pub model: ModelKind,
    /// Bins per level, comma separated (C2FAR only).
    #[arg(long, value_delimiter = ',')]
    pub bins: Option<Vec<usize>>,
    /// Binning extent `lo,hi` in the normalized domain (C2FAR only).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub extent: Option<Vec<f64>>,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub dropout: f64,
}

/// Default bins per level when `--bins` is absent.
pub fn default_bins(kind: ModelKind) -> Option<Vec<usize>> {
    match kind.n_levels()? {
        1 => Some(vec![64]),
        2 => Some(vec![16, 16]),
        _ => Some(vec![8, 8, 8]),
    }
}

impl ModelArgs {
    pub fn model_config(&self, covariate_dim: usize) -> Result<ModelConfig> {
        match self.model.n_levels() {
            Some(b) => {
                let bins = match &self.bins {
                    Some(v) => v.clone(),
                    None => default_bins(self.model).expect("c2far kind"),
                };
                if bins.len() != b {
                    return Err(Error::Config(format!("{} needs {b} bin counts, got {}", self.model, bins.len())));
                }
                let (lo, hi) = extent_pair(self.extent.as_deref())?;
                let spec = BinningSpec::new(bins, lo, hi)?;
                Ok(ModelConfig::C2far(C2farRnnConfig::new(spec, self.hidden, self.dropout, covariate_dim)?))
            }
            None if self.model == ModelKind::DeeparGaussian => {
                if self.bins.is_some() || self.extent.is_some() {
                    return Err(Error::Config("--bins and --extent apply to C2FAR models only".into()));
                }
                Ok(ModelConfig::Gaussian(GaussianConfig::new(self.hidden, self.dropout, covariate_dim)?))
            }
            None => Err(Error::Config(format!("{} is not a trainable model", self.model))),
        }
    }
}

fn extent_pair(v: Option<&[f64]>) -> Result<(f64, f64)> {
    match v {
        None => Ok((-0.01, 1.01)),
        Some([lo, hi]) => Ok((*lo, *hi)),
        Some(_) => Err(Error::Config("--extent takes exactly two values".into())),
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.0)]
    pub wd: f64,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long, value_parser = parse_kind)]
    pub model: ModelKind,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Disable median pruning.
    #[arg(long)]
    pub no_prune: bool,
    /// Finished trials before pruning starts.
    #[arg(long, default_value_t = 5)]
    pub prune_warmup: usize,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub extent: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Args)]
pub struct PredictorArgs {
    /// Trained checkpoint for learned models.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// `naive` or `seasonal-naive` when no checkpoint is given.
    #[arg(long, value_parser = parse_kind)]
    pub model: Option<ModelKind>,
    /// Season length for seasonal-naive (default from the data frequency).
    #[arg(long)]
    pub season: Option<usize>,
    /// Monte Carlo rollouts (default: the test rollouts of the schedule).
    #[arg(long)]
    pub rollouts: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub predictor: PredictorArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub predictor: PredictorArgs,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Grid `lo,hi,n`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub grid: Vec<f64>,
    /// Checkpoint whose next-step density is plotted (C2FAR only).
    #[arg(long, requires = "data")]
    pub checkpoint: Option<PathBuf>,
    /// Dataset supplying the conditioning range.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub series_index: usize,
    #[arg(long, default_value_t = 168)]
    pub cond_len: usize,
    /// Bins per level for the uniform density plotted without a checkpoint.
    #[arg(long, value_delimiter = ',')]
    pub bins: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub extent: Option<Vec<f64>>,
    /// Tail shape for the uniform density.
    #[arg(long, default_value_t = 2.0)]
    pub alpha: f64,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NllArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

const SUBCOMMANDS: [&str; 7] = ["gen-synthetic", "train", "tune", "forecast", "evaluate", "plot-data", "nll-eval"];

fn toml_to_flags(table: &toml::Table, out: &mut Vec<String>) -> Result<()> {
    for (k, v) in table {
        if v.is_table() {
            continue;
        }
        let flag = format!("--{k}");
        match v {
            toml::Value::Boolean(true) => out.push(flag),
            toml::Value::Boolean(false) => {}
            toml::Value::Array(a) => {
                let parts: Vec<String> = a.iter().map(scalar_to_string).collect::<Result<_>>()?;
                out.push(format!("{flag}={}", parts.join(",")));
            }
            other => out.push(format!("{flag}={}", scalar_to_string(other)?)),
        }
    }
    Ok(())
}

fn scalar_to_string(v: &toml::Value) -> Result<String> {
    match v {
        toml::Value::String(s) => Ok(s.clone()),
        toml::Value::Integer(i) => Ok(i.to_string()),
        toml::Value::Float(f) => Ok(f.to_string()),
        toml::Value::Boolean(b) => Ok(b.to_string()),
        other => Err(Error::Config(format!("unsupported config value {other}"))),
    }
}

/// Parses arguments, applying any `--config` file underneath them, and
/// rejects inconsistent flag combinations as usage errors.
pub fn parse<I, S>(argv: I) -> std::result::Result<Cli, clap::Error>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let cli = parse_merged(argv.into_iter().map(Into::into).collect())?;
    cli.check()
        .map_err(|e| clap::Error::raw(clap::error::ErrorKind::ArgumentConflict, format!("{e}\n")))?;
    Ok(cli)
}

fn parse_merged(argv: Vec<String>) -> std::result::Result<Cli, clap::Error> {
    let mut cfg_path = None;
    for (i, a) in argv.iter().enumerate() {
        if a == "--config" {
            cfg_path = argv.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            cfg_path = Some(p.to_string());
        }
    }
    let Some(path) = cfg_path else {
        return Cli::try_parse_from(argv);
    };
    let file = fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read {path}: {e}")))
        .and_then(|s| s.parse::<toml::Table>().map_err(|e| Error::Config(format!("{path}: {e}"))));
    let table = match file {
        Ok(t) => t,
        Err(e) => return Err(clap::Error::raw(clap::error::ErrorKind::Io, format!("{e}\n"))),
    };
    let Some(pos) = argv.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())) else {
        return Cli::try_parse_from(argv);
    };
    let mut merged: Vec<String> = argv[..1].to_vec();
    let mut global = Vec::new();
    let mut local = Vec::new();
    let conv = toml_to_flags(&table, &mut global).and_then(|_| match table.get(&argv[pos]) {
        Some(toml::Value::Table(t)) => toml_to_flags(t, &mut local),
        _ => Ok(()),
    });
    if let Err(e) = conv {
        return Err(clap::Error::raw(clap::error::ErrorKind::InvalidValue, format!("{e}\n")));
    }
    merged.extend(global);
    merged.extend_from_slice(&argv[1..=pos]);
    merged.extend(local);
    merged.extend_from_slice(&argv[pos + 1..]);
    Cli::try_parse_from(merged)
}

fn load(data: &DataArgs) -> Result<Vec<Series>> {
    let series = load_jsonl(&data.data)?;
    if series.is_empty() {
        return Err(Error::Input(format!("{} holds no series", data.data.display())));
    }
    Ok(series)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

impl PredictorArgs {
    fn check(&self) -> Result<()> {
        match (&self.checkpoint, self.model) {
            (Some(_), None) | (None, Some(ModelKind::Naive | ModelKind::SeasonalNaive)) => Ok(()),
            (None, Some(k)) => Err(Error::Config(format!("{k} needs a trained --checkpoint"))),
            (Some(_), Some(_)) => Err(Error::Config("give either --checkpoint or --model, not both".into())),
            (None, None) => Err(Error::Config("--checkpoint or --model is required".into())),
        }
    }
}

impl Cli {
    /// Consistency checks that need more than one flag.
    pub fn check(&self) -> Result<()> {
        match &self.command {
            Command::Train(a) => a.model.model_config(2).map(|_| ()),
            Command::Tune(a) if !a.model.is_learned() => Err(Error::Config(format!("{} has no hyperparameters to tune", a.model))),
            Command::Forecast(ForecastArgs { predictor, .. }) | Command::Evaluate(EvaluateArgs { predictor, .. }) => predictor.check(),
            Command::PlotData(a) if a.grid.len() != 3 => Err(Error::Config("--grid takes lo,hi,n".into())),
            _ => Ok(()),
        }
    }
}

fn build_forecaster(p: &PredictorArgs, series: &[Series]) -> Result<Forecaster> {
    p.check()?;
    match (&p.checkpoint, p.model) {
        (Some(path), _) => Ok(Forecaster::Learned(load_checkpoint(path)?.0)),
        (None, Some(ModelKind::SeasonalNaive)) => Ok(Forecaster::SeasonalNaive {
            season: p.season.unwrap_or(series[0].freq.season_length()),
        }),
        _ => Ok(Forecaster::Naive),
    }
}

fn full_views(series: &[Series]) -> Vec<SeriesView<'_>> {
    series.iter().map(|s| SeriesView { series: s, range: 0..s.len() }).collect()
}

/// Executes a parsed command.
pub fn run(cli: &Cli) -> Result<()> {
    if let Some(w) = cli.workers {
        #[cfg(feature = "parallel")]
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
        #[cfg(not(feature = "parallel"))]
        let _ = w;
    }
    let out = &cli.out_dir;
    match &cli.command {
        Command::GenSynthetic(a) => {
            let (series, name) = match a.kind {
                SyntheticKind::Gmm => (gen_gmm(a.n_series, a.length, &GmmParams::default(), cli.seed)?, "gmm"),
                SyntheticKind::Discrete => (gen_discrete_uniform(a.n_series, a.length, a.lo, a.hi, cli.seed)?, "discrete"),
            };
            let path = a.output.clone().unwrap_or_else(|| out.join(format!("{name}.jsonl")));
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            write_jsonl(&path, &series)?;
            println!("{}", path.display());
        }
        Command::Train(a) => {
            let series = load(&a.data)?;
            let cov = series[0].freq.n_features();
            let cfg = a.model.model_config(cov)?;
            let sp = split(&series, &SplitConfig { validation: a.data.val, test: a.data.test })?;
            fs::create_dir_all(out)?;
            let opts = TrainOptions {
                schedule: a.schedule.schedule()?,
                learning_rate: a.lr,
                weight_decay: a.wd,
                cond_len: a.data.cond_len,
                pred_len: a.data.pred_len,
                seed: cli.seed,
                out_dir: Some(out.clone()),
            };
            let model = Learned::init(&cfg, &mut ChaCha8Rng::seed_from_u64(cli.seed));
            let res = train(model, &sp.train, &sp.validation, &opts, None)?;
            let m = CheckpointManifest::new(&res.model, res.log.best_checkpoint.unwrap_or(res.log.checkpoints.len()), 0, res.log.validation_history());
            save_checkpoint(&out.join("best.ckpt"), &res.model, &m)?;
            write(&out.join("train_log.json"), &serde_json::to_string_pretty(&res.log)?)?;
            println!(
                "trained {} ({} parameters): {} checkpoints, best validation ND {}",
                cfg.kind(),
                cfg.param_count(),
                res.log.checkpoints.len(),
                res.log.best_nd.map_or("n/a".into(), |v| format!("{v:.5}"))
            );
        }
        Command::Tune(a) => {
            let series = load(&a.data)?;
            let sp = split(&series, &SplitConfig { validation: a.data.val, test: a.data.test })?;
            let (lo, hi) = extent_pair(a.extent.as_deref())?;
            let space = SearchSpace {
                extent: (lo, hi),
                covariate_dim: series[0].freq.n_features(),
                ..SearchSpace::default()
            };
            let base = TrainOptions {
                schedule: a.schedule.schedule()?,
                learning_rate: 0.0,
                weight_decay: 0.0,
                cond_len: a.data.cond_len,
                pred_len: a.data.pred_len,
                seed: cli.seed,
                out_dir: None,
            };
            let prune = PruneConfig {
                enabled: !a.no_prune,
                warmup_trials: a.prune_warmup,
            };
            fs::create_dir_all(out)?;
            let res = run_study(&space, a.model, &sp.train, &sp.validation, a.trials, &base, prune, cli.seed, Some(&out.join("study.jsonl")))?;
            let m = CheckpointManifest::new(&res.best_model, 0, 0, res.best.nd_history.clone());
            save_checkpoint(&out.join("best.ckpt"), &res.best_model, &m)?;
            println!("best trial {} with validation ND {:?}", res.best.trial, res.best.best_nd);
        }
        Command::Forecast(a) => {
            let series = load(&a.data)?;
            let f = build_forecaster(&a.predictor, &series)?;
            let (t, n) = (a.data.cond_len, a.data.pred_len);
            let opts = ForecastOptions {
                n_rollouts: a.predictor.rollouts.unwrap_or(TrainSchedule::default().test_rollouts),
                seed: cli.seed,
                ..ForecastOptions::default()
            };
            let mut grids = Vec::new();
            for (i, v) in full_views(&series).iter().enumerate() {
                if v.len() < t {
                    return Err(Error::Input(format!("series {} shorter than {t}", v.series.id)));
                }
                let w = window_at(v, v.len() - t, t, n, i as u64);
                grids.push((i as u64, f.forecast_window(&w, n, &opts)?));
            }
            write(&out.join("forecasts.csv"), &grids_to_csv(&grids))?;
        }
        Command::Evaluate(a) => {
            let series = load(&a.data)?;
            let f = build_forecaster(&a.predictor, &series)?;
            let opts = ForecastOptions {
                n_rollouts: a.predictor.rollouts.unwrap_or(TrainSchedule::default().test_rollouts),
                seed: cli.seed,
                ..ForecastOptions::default()
            };
            let views = full_views(&series);
            let r = rolling_evaluate(&f, &views, a.data.cond_len, a.data.pred_len, EvalMode::Span(a.data.test), &opts)?;
            write(&out.join("metrics.csv"), &r.report.to_csv())?;
            write(&out.join("forecasts.csv"), &grids_to_csv(&r.grids))?;
            println!("nd {:.6} wql {:.6}", r.report.overall.nd, r.report.overall.wql);
        }
        Command::PlotData(a) => run_plot(a, out)?,
        Command::NllEval(a) => {
            let series = load(&a.data)?;
            let (model, _) = load_checkpoint(&a.checkpoint)?;
            let sp = split(&series, &SplitConfig { validation: a.data.val, test: a.data.test })?;
            let windows = validation_windows(&sp.test, a.data.cond_len, a.data.pred_len, usize::MAX, cli.seed);
            let nll = nll_eval(&model, &windows)?;
            write(&out.join("nll.csv"), &format!("metric,scope,horizon,value\nnll,overall,,{nll}\n"))?;
            println!("nll {nll:.6}");
        }
    }
    Ok(())
}

fn run_plot(a: &PlotArgs, out: &Path) -> Result<()> {
    let [lo, hi, n] = a.grid[..] else {
        return Err(Error::Config("--grid takes lo,hi,n".into()));
    };
    if !(n >= 2.0 && n.fract() == 0.0 && lo < hi) {
        return Err(Error::Config("--grid needs lo < hi and an integer n >= 2".into()));
    }
    let grid = linspace(lo, hi, n as usize);
    let (pdf, cdf) = match &a.checkpoint {
        Some(path) => {
            let (model, _) = load_checkpoint(path)?;
            let Learned::C2far(m) = model else {
                return Err(Error::Config("plot-data needs a C2FAR checkpoint".into()));
            };
            let series = load_jsonl(a.data.as_ref().expect("clap requires --data"))?;
            let s = series
                .get(a.series_index)
                .ok_or_else(|| Error::Input(format!("no series at index {}", a.series_index)))?;
            let view = SeriesView { series: s, range: 0..s.len() };
            if s.len() < a.cond_len {
                return Err(Error::Input(format!("series shorter than {}", a.cond_len)));
            }
            let w = window_at(&view, s.len() - a.cond_len, a.cond_len, 1, 0);
            let mut seq = w.to_sequence()?;
            seq.values.truncate(seq.cond_len);
            let next = m.next_step(&seq)?;
            let tails = next.tails()?;
            let d = C2farDensity::new(m.spec(), &next, tails);
            let scale = w.scaler.max - w.scaler.min;
            let norm: Vec<f64> = grid.iter().map(|&x| w.scaler.normalize(x)).collect();
            let pdf = d.pdf_grid(&norm)?.into_iter().map(|p| p / scale).collect();
            (pdf, d.cdf_grid(&norm)?)
        }
        None => {
            let bins = a.bins.clone().unwrap_or_else(|| vec![16, 16]);
            let (elo, ehi) = extent_pair(a.extent.as_deref())?;
            let spec = BinningSpec::new(bins, elo, ehi)?;
            spec.validate_tails()?;
            let tails = TailShapes::new(a.alpha, a.alpha)?;
            let step = StepDensity::uniform(&spec, tails);
            let d = C2farDensity::new(&spec, &step, tails);
            (d.pdf_grid(&grid)?, d.cdf_grid(&grid)?)
        }
    };
    let mut csv = String::from("x,pdf,cdf\n");
    for ((x, p), c) in grid.iter().zip(&pdf).zip(&cdf) {
        csv.push_str(&format!("{x},{p},{c}\n"));
    }
    write(&a.output.clone().unwrap_or_else(|| out.join("density.csv")), &csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_two_level_train() {
        let cli = parse(["c2far", "train", "--data", "d.jsonl", "--model", "c2far-b2", "--bins", "12,35", "--extent", "-0.01,1.01"]).unwrap();
        let Command::Train(t) = &cli.command else { panic!() };
        let ModelConfig::C2far(c) = t.model.model_config(2).unwrap() else { panic!() };
        assert_eq!(c.binning.levels(), &[12, 35]);
        assert_eq!(c.binning.extent(), (-0.01, 1.01));
    }

    #[test]
    fn usage_errors() {
        assert!(parse(["c2far", "train", "--model", "c2far-b2"]).is_err());
        assert!(parse(["c2far", "train", "--data", "d", "--model", "c2far-b2", "--bogus"]).is_err());
        assert!(parse(["c2far", "train", "--data", "d", "--model", "deepar-gaussian", "--bins", "4"]).is_err());
        assert!(parse(["c2far", "train", "--data", "d", "--model", "c2far-b3", "--bins", "4,4"]).is_err());
        assert!(parse(["c2far", "evaluate", "--data", "d", "--model", "c2far-b1"]).is_err());
        assert!(parse(["c2far", "evaluate", "--data", "d"]).is_err());
        assert!(parse(["c2far", "evaluate", "--data", "d", "--model", "naive"]).is_ok());
    }

    #[test]
    fn last_seed_wins() {
        let cli = parse(["c2far", "--seed", "3", "gen-synthetic", "--seed", "7"]).unwrap();
        assert_eq!(cli.seed, 7);
    }

    #[test]
    fn config_file_under_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "seed = 4\n[train]\ndata = \"x.jsonl\"\nmodel = \"c2far-b2\"\nbins = [5, 6]\nhidden = 32\n").unwrap();
        let path = p.to_str().unwrap();
        let cli = parse(["c2far", "--config", path, "train", "--hidden", "9"]).unwrap();
        assert_eq!(cli.seed, 4);
        let Command::Train(t) = &cli.command else { panic!() };
        assert_eq!(t.model.hidden, 9);
        assert_eq!(t.model.bins, Some(vec![5, 6]));
        assert_eq!(t.data.data, PathBuf::from("x.jsonl"));
    }
}
