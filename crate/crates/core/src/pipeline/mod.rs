//! Windowing, min-max normalization, Monte Carlo forecasting and rolling
//! evaluation. Training lives in [`train`], checkpoint files in
//! [`checkpoint`].

pub mod checkpoint;
pub mod train;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{naive_forecast, seasonal_naive_forecast};
use crate::data::SeriesView;
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, QuantileForecasts, DEFAULT_BANDS};
use crate::model::{C2farRnn, C2farRnnConfig, DeepArGaussian, GaussianConfig, Sequence};
use crate::neural::ParamSet;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use train::{train, EvalDecision, TrainLog, TrainOptions, TrainOutcome, TrainSchedule, TrainStatus};

/// Grid quantiles: the nine deciles plus the Cov99 extremes.
pub const DEFAULT_QUANTILES: [f64; 11] = [0.005, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.995];

/// Min-max scaler fitted on a conditioning range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub min: f64,
    pub max: f64,
}

impl Scaler {
    pub fn fit(values: &[f64]) -> Result<Self> {
        let s = Self::fit_lenient(values)?;
        if s.is_constant_fit(values) {
            return Err(Error::Normalization("conditioning range is constant".into()));
        }
        Ok(s)
    }

    /// Like [`Scaler::fit`], but a constant range gets a unit-width scale
    /// starting at its value instead of an error.
    pub fn fit_lenient(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Normalization("empty conditioning range".into()));
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(min.is_finite() && max.is_finite()) {
            return Err(Error::Normalization("non-finite conditioning value".into()));
        }
        Ok(if max > min { Scaler { min, max } } else { Scaler { min, max: min + 1.0 } })
    }

    fn is_constant_fit(&self, values: &[f64]) -> bool {
        values.iter().all(|&v| v == self.min)
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }

    pub fn unnormalize(&self, v: f64) -> f64 {
        v * (self.max - self.min) + self.min
    }
}

fn is_constant(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[0] == w[1])
}

/// One conditioning range, its prediction range when known, and calendar
/// covariates for both (row-major, `cov_dim` per step).
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesWindow {
    pub series_id: String,
    pub window_id: u64,
    /// Offset of the first conditioning point in the source series.
    pub start: usize,
    pub cond: Vec<f64>,
    pub pred: Option<Vec<f64>>,
    pub covariates: Vec<f64>,
    pub cov_dim: usize,
    pub scaler: Scaler,
}

impl SeriesWindow {
    pub fn new(
        series_id: impl Into<String>,
        window_id: u64,
        start: usize,
        cond: Vec<f64>,
        pred: Option<Vec<f64>>,
        covariates: Vec<f64>,
        cov_dim: usize,
    ) -> Self {
        let scaler = Scaler::fit_lenient(&cond).unwrap_or(Scaler { min: 0.0, max: 1.0 });
        SeriesWindow {
            series_id: series_id.into(),
            window_id,
            start,
            cond,
            pred,
            covariates,
            cov_dim,
            scaler,
        }
    }

    pub fn cond_len(&self) -> usize {
        self.cond.len()
    }

    pub fn has_constant_conditioning(&self) -> bool {
        is_constant(&self.cond)
    }

    /// Normalized model input (lenient scaler for constant ranges).
    pub fn to_sequence(&self) -> Result<Sequence> {
        let mut values: Vec<f64> = self.cond.iter().map(|&v| self.scaler.normalize(v)).collect();
        if let Some(p) = &self.pred {
            values.extend(p.iter().map(|&v| self.scaler.normalize(v)));
        }
        Ok(Sequence {
            values,
            covariates: self.covariates.clone(),
            cond_len: self.cond.len(),
        })
    }
}

/// Normalizes a window with the min-max scaler of its conditioning range.
pub fn normalize_window(window: &SeriesWindow) -> Result<(Sequence, Scaler)> {
    let scaler = Scaler::fit(&window.cond)?;
    let mut w = window.clone();
    w.scaler = scaler;
    Ok((w.to_sequence()?, scaler))
}

pub fn unnormalize(scaler: &Scaler, v: f64) -> f64 {
    scaler.unnormalize(v)
}

#[derive(Debug, Clone, Default)]
pub struct WindowSet {
    pub windows: Vec<SeriesWindow>,
    pub skipped_short: usize,
    pub dropped_constant: usize,
}

/// Start offsets (relative to `values`) of every stride-spaced window of
/// length `t + n` whose conditioning range is non-constant.
pub fn window_offsets(values: &[f64], t: usize, n: usize, stride: usize) -> (Vec<usize>, usize) {
    if values.len() < t + n || t == 0 || stride == 0 {
        return (Vec::new(), 0);
    }
    let mut dropped = 0;
    let offsets = (0..=values.len() - t - n)
        .step_by(stride)
        .filter(|&o| {
            let keep = !is_constant(&values[o..o + t]);
            dropped += usize::from(!keep);
            keep
        })
        .collect();
    (offsets, dropped)
}

/// Builds a training or evaluation window of the view's series.
pub fn window_at(view: &SeriesView, start: usize, t: usize, n: usize, window_id: u64) -> SeriesWindow {
    let s = view.series;
    let end = (start + t + n).min(s.len());
    let pred = (end > start + t).then(|| s.values[start + t..end].to_vec());
    SeriesWindow::new(
        s.id.clone(),
        window_id,
        start,
        s.values[start..start + t].to_vec(),
        pred,
        s.covariates(start, t + n),
        s.freq.n_features(),
    )
}

/// All windows inside each view's range, `stride` apart, with constant
/// conditioning ranges dropped. Views shorter than `t + n` are counted in
/// `skipped_short`.
pub fn make_windows(views: &[SeriesView], t: usize, n: usize, stride: usize) -> Result<WindowSet> {
    if t == 0 || stride == 0 {
        return Err(Error::Input("conditioning length and stride must be positive".into()));
    }
    let mut set = WindowSet::default();
    let mut id = 0u64;
    for v in views {
        if v.len() < t + n {
            set.skipped_short += 1;
            continue;
        }
        let (offsets, dropped) = window_offsets(v.values(), t, n, stride);
        set.dropped_constant += dropped;
        for o in offsets {
            set.windows.push(window_at(v, v.range.start + o, t, n, id));
            id += 1;
        }
    }
    if set.skipped_short > 0 {
        log::warn!("{} series shorter than {} points skipped", set.skipped_short, t + n);
    }
    Ok(set)
}

/// Per-horizon quantile values; `values[h][j]` is quantile `quantiles[j]`
/// at horizon `h + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastGrid {
    pub quantiles: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub n_rollouts: usize,
}

/// Linearly interpolated empirical quantile of sorted data.
pub fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let i = pos.floor() as usize;
    if i + 1 >= n {
        return sorted[n - 1];
    }
    let frac = pos - i as f64;
    sorted[i] + frac * (sorted[i + 1] - sorted[i])
}

impl ForecastGrid {
    pub fn degenerate(quantiles: &[f64], point: &[f64]) -> Self {
        ForecastGrid {
            quantiles: quantiles.to_vec(),
            values: point.iter().map(|&p| vec![p; quantiles.len()]).collect(),
            n_rollouts: 1,
        }
    }

    /// Grid from `rollouts[r][h]` sample paths.
    pub fn from_samples(rollouts: &[Vec<f64>], quantiles: &[f64]) -> Result<Self> {
        let first = rollouts
            .first()
            .ok_or_else(|| Error::Input("at least one rollout required".into()))?;
        let n = first.len();
        if rollouts.iter().any(|r| r.len() != n) {
            return Err(Error::Input("rollouts differ in length".into()));
        }
        let mut qs = quantiles.to_vec();
        qs.sort_by(f64::total_cmp);
        let values = (0..n)
            .map(|h| {
                let mut col: Vec<f64> = rollouts.iter().map(|r| r[h]).collect();
                col.sort_by(f64::total_cmp);
                qs.iter().map(|&q| empirical_quantile(&col, q)).collect()
            })
            .collect();
        Ok(ForecastGrid {
            quantiles: qs,
            values,
            n_rollouts: rollouts.len(),
        })
    }

    pub fn horizon(&self) -> usize {
        self.values.len()
    }

    pub fn quantile(&self, q: f64) -> Result<Vec<f64>> {
        let j = self
            .quantiles
            .iter()
            .position(|&x| (x - q).abs() < 1e-9)
            .ok_or_else(|| Error::Input(format!("quantile {q} not in grid")))?;
        Ok(self.values.iter().map(|row| row[j]).collect())
    }

    pub fn median(&self) -> Vec<f64> {
        self.quantile(0.5).unwrap_or_default()
    }

    pub fn is_monotone(&self) -> bool {
        self.values.iter().all(|row| row.windows(2).all(|w| w[0] <= w[1]))
    }
}

/// Forecast grids as CSV with columns `window_id,horizon,quantile,value`.
pub fn grids_to_csv(grids: &[(u64, ForecastGrid)]) -> String {
    let mut out = String::from("window_id,horizon,quantile,value\n");
    for (id, g) in grids {
        for (h, row) in g.values.iter().enumerate() {
            for (q, v) in g.quantiles.iter().zip(row) {
                let _ = writeln!(out, "{id},{},{q},{v}", h + 1);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    C2farB1,
    C2farB2,
    C2farB3,
    DeeparGaussian,
    Naive,
    SeasonalNaive,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::C2farB1,
        ModelKind::C2farB2,
        ModelKind::C2farB3,
        ModelKind::DeeparGaussian,
        ModelKind::Naive,
        ModelKind::SeasonalNaive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::C2farB1 => "c2far-b1",
            ModelKind::C2farB2 => "c2far-b2",
            ModelKind::C2farB3 => "c2far-b3",
            ModelKind::DeeparGaussian => "deepar-gaussian",
            ModelKind::Naive => "naive",
            ModelKind::SeasonalNaive => "seasonal-naive",
        }
    }

    /// Binning depth for C2FAR kinds.
    pub fn n_levels(self) -> Option<usize> {
        match self {
            ModelKind::C2farB1 => Some(1),
            ModelKind::C2farB2 => Some(2),
            ModelKind::C2farB3 => Some(3),
            _ => None,
        }
    }

    pub fn is_learned(self) -> bool {
        !matches!(self, ModelKind::Naive | ModelKind::SeasonalNaive)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ModelConfig {
    C2far(C2farRnnConfig),
    Gaussian(GaussianConfig),
}

impl ModelConfig {
    pub fn param_count(&self) -> usize {
        match self {
            ModelConfig::C2far(c) => c.param_count(),
            ModelConfig::Gaussian(c) => c.param_count(),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::C2far(c) => match c.binning.n_levels() {
                1 => ModelKind::C2farB1,
                2 => ModelKind::C2farB2,
                _ => ModelKind::C2farB3,
            },
            ModelConfig::Gaussian(_) => ModelKind::DeeparGaussian,
        }
    }
}

/// A trainable forecaster in single precision.
#[derive(Debug, Clone, PartialEq)]
pub enum Learned {
    C2far(C2farRnn<f32>),
    Gaussian(DeepArGaussian<f32>),
}

impl ParamSet<f32> for Learned {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ndarray::ArrayViewD<'a, f32>)>) {
        match self {
            Learned::C2far(m) => m.collect(prefix, out),
            Learned::Gaussian(m) => m.collect(prefix, out),
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ndarray::ArrayViewMutD<'a, f32>)>) {
        match self {
            Learned::C2far(m) => m.collect_mut(prefix, out),
            Learned::Gaussian(m) => m.collect_mut(prefix, out),
        }
    }
}

/// Stream key mixing a window id into the global seed.
fn window_seed(seed: u64, window_id: u64) -> u64 {
    let mut z = seed ^ window_id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One independent stream per rollout, keyed by (seed, window, rollout).
pub fn rollout_rngs(seed: u64, window_id: u64, n_rollouts: usize) -> Vec<ChaCha8Rng> {
    let base = window_seed(seed, window_id);
    (0..n_rollouts)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(base);
            rng.set_stream(r as u64);
            rng
        })
        .collect()
}

impl Learned {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        match config {
            ModelConfig::C2far(c) => Learned::C2far(C2farRnn::init(c.clone(), rng)),
            ModelConfig::Gaussian(c) => Learned::Gaussian(DeepArGaussian::init(c.clone(), rng)),
        }
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Learned::C2far(m) => ModelConfig::C2far(m.config.clone()),
            Learned::Gaussian(m) => ModelConfig::Gaussian(m.config.clone()),
        }
    }

    pub fn covariate_dim(&self) -> usize {
        match self {
            Learned::C2far(m) => m.config.covariate_dim,
            Learned::Gaussian(m) => m.config.covariate_dim,
        }
    }

    /// Mean per-point training loss and its gradient.
    pub fn loss_and_grad(&self, batch: &[&Sequence], dropout_seed: Option<u64>) -> Result<(f64, Learned)> {
        match self {
            Learned::C2far(m) => {
                let (l, g) = m.loss_and_grad(batch, dropout_seed, true)?;
                Ok((l.total(), Learned::C2far(g.expect("gradient requested"))))
            }
            Learned::Gaussian(m) => {
                let (l, g) = m.loss_and_grad(batch, dropout_seed, true)?;
                Ok((l, Learned::Gaussian(g.expect("gradient requested"))))
            }
        }
    }

    pub fn nll(&self, batch: &[&Sequence]) -> Result<f64> {
        match self {
            Learned::C2far(m) => m.nll(batch),
            Learned::Gaussian(m) => m.nll(batch),
        }
    }

    /// `n_rollouts` normalized sample paths of length `n` for one sequence.
    pub fn sample_paths(&self, seq: &Sequence, n: usize, n_rollouts: usize, seed: u64, window_id: u64) -> Result<Vec<Vec<f64>>> {
        if n_rollouts < 1 {
            return Err(Error::Input("n_rollouts must be at least 1".into()));
        }
        let dim = self.covariate_dim();
        let t = seq.cond_len;
        if seq.covariates.len() < (t + n) * dim {
            return Err(Error::Input("covariates do not cover the forecast horizon".into()));
        }
        let mut rngs = rollout_rngs(seed, window_id, n_rollouts);
        let mut paths = vec![Vec::with_capacity(n); n_rollouts];
        let cov_rows = |h: usize| -> Vec<f64> {
            let row = seq.covariates_at(t + h, dim);
            row.iter().copied().cycle().take(row.len() * n_rollouts).collect()
        };
        match self {
            Learned::C2far(m) => {
                let mut st = m.encode(&[seq], n_rollouts)?;
                for h in 0..n {
                    for (p, (_, v)) in paths.iter_mut().zip(m.sample_step(&mut st, &cov_rows(h), &mut rngs)?) {
                        p.push(v);
                    }
                }
            }
            Learned::Gaussian(m) => {
                let mut st = m.encode(&[seq], n_rollouts)?;
                for h in 0..n {
                    for (p, v) in paths.iter_mut().zip(m.sample_step(&mut st, &cov_rows(h), &mut rngs)?) {
                        p.push(v);
                    }
                }
            }
        }
        Ok(paths)
    }
}

/// Sampling and quantile options shared by all forecasters.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastOptions {
    pub n_rollouts: usize,
    pub seed: u64,
    pub quantiles: Vec<f64>,
}

impl Default for ForecastOptions {
    fn default() -> Self {
        ForecastOptions {
            n_rollouts: 500,
            seed: 0,
            quantiles: DEFAULT_QUANTILES.to_vec(),
        }
    }
}

/// Anything that turns a window into an `n`-step forecast grid.
pub trait WindowForecaster: Sync {
    fn forecast_window(&self, window: &SeriesWindow, n: usize, opts: &ForecastOptions) -> Result<ForecastGrid>;
}

/// Monte Carlo forecast: encode, sample independent rollouts, unnormalize
/// with the window scaler and take per-horizon empirical quantiles.
pub fn forecast(model: &Learned, window: &SeriesWindow, n: usize, opts: &ForecastOptions) -> Result<ForecastGrid> {
    let mut seq = window.to_sequence()?;
    seq.values.truncate(seq.cond_len);
    let mut paths = model.sample_paths(&seq, n, opts.n_rollouts, opts.seed, window.window_id)?;
    for p in &mut paths {
        for v in p.iter_mut() {
            *v = window.scaler.unnormalize(*v);
        }
    }
    ForecastGrid::from_samples(&paths, &opts.quantiles)
}

impl WindowForecaster for Learned {
    fn forecast_window(&self, window: &SeriesWindow, n: usize, opts: &ForecastOptions) -> Result<ForecastGrid> {
        forecast(self, window, n, opts)
    }
}

/// Every model kind behind one forecasting interface.
#[derive(Debug, Clone, PartialEq)]
pub enum Forecaster {
    Learned(Learned),
    Naive,
    SeasonalNaive { season: usize },
}

impl WindowForecaster for Forecaster {
    fn forecast_window(&self, window: &SeriesWindow, n: usize, opts: &ForecastOptions) -> Result<ForecastGrid> {
        match self {
            Forecaster::Learned(m) => forecast(m, window, n, opts),
            Forecaster::Naive => naive_forecast(window, n, &opts.quantiles),
            Forecaster::SeasonalNaive { season } => seasonal_naive_forecast(window, n, *season, &opts.quantiles),
        }
    }
}

/// Which windows a rolling evaluation forecasts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Every stride-1 window lying fully inside each view; all horizons scored.
    Windows,
    /// Each of the last `span` points of each view is forecast once at every
    /// horizon; conditioning may reach back before the span, and only
    /// targets inside the span are scored.
    Span(usize),
}

#[derive(Debug, Clone)]
pub struct RollingResult {
    pub report: MetricReport,
    pub grids: Vec<(u64, ForecastGrid)>,
    pub windows: Vec<SeriesWindow>,
}

/// Windows for [`EvalMode::Span`]: prediction starts run from
/// `end - span - n + 1` to `end - 1`, truncated at the series end.
pub fn span_windows(view: &SeriesView, span: usize, t: usize, n: usize, first_id: u64) -> Result<Vec<SeriesWindow>> {
    let end = view.range.end;
    if span == 0 || n == 0 {
        return Ok(Vec::new());
    }
    if end < span + n - 1 + t {
        return Err(Error::Input(format!(
            "series {} needs {} points before its end, has {end}",
            view.series.id,
            span + n - 1 + t
        )));
    }
    let first = end + 1 - span - n;
    Ok((first..end)
        .enumerate()
        .map(|(i, p)| window_at(view, p - t, t, n, first_id + i as u64))
        .collect())
}

/// Rolling evaluation over the given views. Windows are forecast in
/// parallel; results do not depend on scheduling.
pub fn rolling_evaluate<F: WindowForecaster + ?Sized>(
    forecaster: &F,
    views: &[SeriesView],
    t: usize,
    n: usize,
    mode: EvalMode,
    opts: &ForecastOptions,
) -> Result<RollingResult> {
    let mut windows = Vec::new();
    let mut spans = Vec::new();
    for v in views {
        let id = windows.len() as u64;
        match mode {
            EvalMode::Windows => {
                if v.len() < t + n {
                    return Err(Error::Input(format!("series {} shorter than {}", v.series.id, t + n)));
                }
                for (i, o) in (v.range.start..=v.range.end - t - n).enumerate() {
                    windows.push(window_at(v, o, t, n, id + i as u64));
                    spans.push(v.range.clone());
                }
            }
            EvalMode::Span(span) => {
                for w in span_windows(v, span, t, n, id)? {
                    windows.push(w);
                    spans.push(v.range.end - span..v.range.end);
                }
            }
        }
    }
    if windows.is_empty() {
        return Err(Error::Input("no evaluation windows".into()));
    }
    let grids = forecast_all(forecaster, &windows, n, opts)?;

    let mut pooled = QuantileForecasts::new(opts.quantiles.clone(), vec![Vec::new(); opts.quantiles.len()])?;
    let mut truths = Vec::new();
    let mut horizons = Vec::new();
    for ((w, g), span) in windows.iter().zip(&grids).zip(&spans) {
        let pred = w.pred.as_deref().unwrap_or(&[]);
        for (h, &z) in pred.iter().enumerate() {
            let pos = w.start + w.cond.len() + h;
            if !span.contains(&pos) {
                continue;
            }
            for (j, q) in g.quantiles.iter().enumerate() {
                let col = opts.quantiles.iter().position(|x| x == q).expect("grid uses requested quantiles");
                pooled.values[col].push(g.values[h][j]);
            }
            truths.push(z);
            horizons.push(h + 1);
        }
    }
    let report = MetricReport::compute(&pooled, &truths, Some(&horizons), &DEFAULT_BANDS)?;
    Ok(RollingResult {
        report,
        grids: windows.iter().map(|w| w.window_id).zip(grids).collect(),
        windows,
    })
}

/// Forecasts every window, in parallel when enabled.
pub fn forecast_all<F: WindowForecaster + ?Sized>(forecaster: &F, windows: &[SeriesWindow], n: usize, opts: &ForecastOptions) -> Result<Vec<ForecastGrid>> {
    let mut opts = opts.clone();
    opts.quantiles.sort_by(f64::total_cmp);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        windows.par_iter().map(|w| forecaster.forecast_window(w, n, &opts)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        windows.iter().map(|w| forecaster.forecast_window(w, n, &opts)).collect()
    }
}
