//! Random hyperparameter search with a hard parameter cap and median
//! pruning. Trials run serially so a study seed fixes every sampled config
//! and every pruning decision.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SeriesView;
use crate::error::{Error, Result};
use crate::hbin::BinningSpec;
use crate::model::{C2farRnnConfig, GaussianConfig};
use crate::pipeline::{train, EvalDecision, Learned, ModelConfig, ModelKind, TrainOptions, TrainStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub n_hidden: (usize, usize),
    pub learning_rate: (f64, f64),
    pub weight_decay: (f64, f64),
    pub flat_bins: (usize, usize),
    pub level_bins: (usize, usize),
    pub param_cap: usize,
    pub extent: (f64, f64),
    pub lstm_dropout: f64,
    pub covariate_dim: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            n_hidden: (16, 288),
            learning_rate: (1e-5, 1e-1),
            weight_decay: (1e-7, 1e-2),
            flat_bins: (4, 1024),
            level_bins: (4, 128),
            param_cap: 1_000_000,
            extent: (-0.01, 1.01),
            lstm_dropout: 1e-3,
            covariate_dim: 2,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let int_ok = |(a, b): (usize, usize)| a >= 1 && a <= b;
        let log_ok = |(a, b): (f64, f64)| a > 0.0 && a <= b && b.is_finite();
        if !int_ok(self.n_hidden) || !int_ok(self.flat_bins) || !int_ok(self.level_bins) {
            return Err(Error::Config("integer ranges must satisfy 1 <= lo <= hi".into()));
        }
        if self.flat_bins.0 < 2 || self.level_bins.0 < 2 {
            return Err(Error::Config("bin counts must be at least 2".into()));
        }
        if !log_ok(self.learning_rate) || !log_ok(self.weight_decay) {
            return Err(Error::Config("log-uniform ranges must be positive and ordered".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

pub fn log_uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

fn model_config(space: &SearchSpace, kind: ModelKind, bins: &[usize], hidden: usize) -> Result<ModelConfig> {
    Ok(match kind.n_levels() {
        Some(_) => {
            let spec = BinningSpec::new(bins.to_vec(), space.extent.0, space.extent.1)?;
            ModelConfig::C2far(C2farRnnConfig::new(spec, hidden, space.lstm_dropout, space.covariate_dim)?)
        }
        None => ModelConfig::Gaussian(GaussianConfig::new(hidden, space.lstm_dropout, space.covariate_dim)?),
    })
}

/// Largest hidden size within the space whose model fits the cap.
fn max_hidden(space: &SearchSpace, kind: ModelKind, bins: &[usize]) -> Result<Option<usize>> {
    let (lo, hi) = space.n_hidden;
    let fits = |h: usize| -> Result<bool> { Ok(model_config(space, kind, bins, h)?.param_count() <= space.param_cap) };
    if !fits(lo)? {
        return Ok(None);
    }
    let (mut ok, mut bad) = (lo, hi + 1);
    while bad - ok > 1 {
        let mid = (ok + bad) / 2;
        if fits(mid)? {
            ok = mid;
        } else {
            bad = mid;
        }
    }
    Ok(Some(ok))
}

/// Draws a configuration: bin counts first, then `n_hidden` uniformly below
/// the cap-implied bound, then log-uniform learning rate and weight decay.
pub fn sample_config<R: Rng + ?Sized>(space: &SearchSpace, kind: ModelKind, rng: &mut R) -> Result<TrialConfig> {
    space.validate()?;
    if !kind.is_learned() {
        return Err(Error::Config(format!("{kind} has no hyperparameters to tune")));
    }
    const MAX_RESAMPLES: usize = 10_000;
    for _ in 0..MAX_RESAMPLES {
        let bins: Vec<usize> = match kind.n_levels() {
            Some(1) => vec![rng.random_range(space.flat_bins.0..=space.flat_bins.1)],
            Some(b) => (0..b).map(|_| rng.random_range(space.level_bins.0..=space.level_bins.1)).collect(),
            None => Vec::new(),
        };
        let Some(h_max) = max_hidden(space, kind, &bins)? else {
            continue;
        };
        let hidden = rng.random_range(space.n_hidden.0..=h_max);
        let learning_rate = log_uniform(rng, space.learning_rate);
        let weight_decay = log_uniform(rng, space.weight_decay);
        return Ok(TrialConfig {
            model: model_config(space, kind, &bins, hidden)?,
            learning_rate,
            weight_decay,
        });
    }
    Err(Error::Config("no configuration fits the parameter cap".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum TrialStatus {
    Completed,
    Pruned { checkpoint: usize },
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub config: TrialConfig,
    pub param_count: usize,
    /// `(checkpoint, nd)` per validation evaluation.
    pub nd_history: Vec<(usize, f64)>,
    pub best_nd: Option<f64>,
    #[serde(flatten)]
    pub status: TrialStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PruneConfig {
    pub enabled: bool,
    /// Finished trials required before pruning activates.
    pub warmup_trials: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            enabled: true,
            warmup_trials: 5,
        }
    }
}

pub struct StudyResult {
    pub best: TrialRecord,
    pub best_model: Learned,
    pub records: Vec<TrialRecord>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs `n_trials` trials. A trial is pruned at evaluation `k` when its ND
/// exceeds the median ND of earlier trials at evaluation `k`. Each record is
/// appended to `log_path` as one JSON line when its trial finishes.
#[allow(clippy::too_many_arguments)]
pub fn run_study(
    space: &SearchSpace,
    kind: ModelKind,
    train_views: &[SeriesView],
    validation_views: &[SeriesView],
    n_trials: usize,
    base: &TrainOptions,
    prune: PruneConfig,
    seed: u64,
    log_path: Option<&Path>,
) -> Result<StudyResult> {
    if n_trials == 0 {
        return Err(Error::Config("n_trials must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records: Vec<TrialRecord> = Vec::with_capacity(n_trials);
    let mut best: Option<(TrialRecord, Learned)> = None;
    let mut log = match log_path {
        Some(p) => Some(OpenOptions::new().create(true).truncate(true).write(true).open(p)?),
        None => None,
    };

    for trial in 0..n_trials {
        let config = sample_config(space, kind, &mut rng)?;
        let trial_seed: u64 = rng.random();
        let model = Learned::init(&config.model, &mut ChaCha8Rng::seed_from_u64(trial_seed));
        let opts = TrainOptions {
            learning_rate: config.learning_rate,
            weight_decay: config.weight_decay,
            seed: trial_seed,
            out_dir: None,
            ..base.clone()
        };
        let prior: Vec<Vec<(usize, f64)>> = records.iter().map(|r| r.nd_history.clone()).collect();
        let active = prune.enabled && records.len() >= prune.warmup_trials;
        let mut hook = |k: usize, _c: usize, nd: f64| {
            if !active {
                return EvalDecision::Continue;
            }
            let at_k: Vec<f64> = prior.iter().filter_map(|h| h.get(k - 1).map(|&(_, v)| v)).collect();
            if !at_k.is_empty() && nd > median(at_k) {
                EvalDecision::Prune
            } else {
                EvalDecision::Continue
            }
        };
        let param_count = config.model.param_count();
        let record = match train(model, train_views, validation_views, &opts, Some(&mut hook)) {
            Ok(out) => {
                let status = match out.log.status {
                    TrainStatus::Pruned { checkpoint } => TrialStatus::Pruned { checkpoint },
                    _ => TrialStatus::Completed,
                };
                let rec = TrialRecord {
                    trial,
                    config,
                    param_count,
                    nd_history: out.log.validation_history(),
                    best_nd: out.log.best_nd,
                    status,
                };
                let better = match (&best, rec.best_nd) {
                    (_, None) => false,
                    (None, Some(_)) => true,
                    (Some((b, _)), Some(v)) => {
                        let b_done = b.status == TrialStatus::Completed;
                        let r_done = rec.status == TrialStatus::Completed;
                        (r_done && !b_done) || (r_done == b_done && b.best_nd.is_none_or(|bv| v < bv))
                    }
                };
                if better {
                    best = Some((rec.clone(), out.model));
                }
                rec
            }
            Err(Error::Diverged(msg)) => {
                log::warn!("trial {trial} diverged: {msg}");
                TrialRecord {
                    trial,
                    config,
                    param_count,
                    nd_history: Vec::new(),
                    best_nd: None,
                    status: TrialStatus::Diverged,
                }
            }
            Err(e) => return Err(e),
        };
        if let Some(f) = log.as_mut() {
            serde_json::to_writer(&mut *f, &record)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        records.push(record);
    }
    let (best, best_model) = best.ok_or_else(|| Error::Study("every trial diverged or produced no validation score".into()))?;
    Ok(StudyResult {
        best,
        best_model,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gmm, split, GmmParams, SplitConfig};
    use crate::pipeline::TrainSchedule;

    #[test]
    fn sampled_configs_respect_cap_and_shape() {
        let space = SearchSpace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in [ModelKind::C2farB1, ModelKind::C2farB2, ModelKind::C2farB3, ModelKind::DeeparGaussian] {
            for _ in 0..100 {
                let c = sample_config(&space, kind, &mut rng).unwrap();
                assert!(c.model.param_count() <= 1_000_000);
                assert!((1e-5..=1e-1).contains(&c.learning_rate));
                assert!((1e-7..=1e-2).contains(&c.weight_decay));
                match (&c.model, kind.n_levels()) {
                    (ModelConfig::C2far(m), Some(b)) => {
                        assert_eq!(m.binning.n_levels(), b);
                        let r = if b == 1 { space.flat_bins } else { space.level_bins };
                        assert!(m.binning.levels().iter().all(|k| (r.0..=r.1).contains(k)));
                        assert!((16..=288).contains(&m.n_hidden));
                    }
                    (ModelConfig::Gaussian(g), None) => assert!((16..=288).contains(&g.n_hidden)),
                    _ => panic!("kind mismatch"),
                }
            }
        }
        assert!(sample_config(&space, ModelKind::Naive, &mut rng).is_err());
    }

    #[test]
    fn hidden_bound_is_tight() {
        let space = SearchSpace::default();
        let bins = [1000];
        let h = max_hidden(&space, ModelKind::C2farB1, &bins).unwrap().unwrap();
        assert!(model_config(&space, ModelKind::C2farB1, &bins, h).unwrap().param_count() <= 1_000_000);
        assert!(model_config(&space, ModelKind::C2farB1, &bins, h + 1).unwrap().param_count() > 1_000_000);
        let tiny = SearchSpace { param_cap: 10, ..space };
        assert_eq!(max_hidden(&tiny, ModelKind::C2farB1, &bins).unwrap(), None);
        assert!(sample_config(&tiny, ModelKind::C2farB1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    fn small_space() -> SearchSpace {
        SearchSpace {
            n_hidden: (4, 10),
            learning_rate: (1e-3, 5e-2),
            flat_bins: (4, 16),
            level_bins: (3, 6),
            ..SearchSpace::default()
        }
    }

    fn base() -> TrainOptions {
        TrainOptions {
            schedule: TrainSchedule {
                train_batch_size: 16,
                ranges_per_checkpoint: 16,
                validation_eval_period: 1,
                validation_warmup: 1,
                stop_evals_no_improve: 2,
                max_checkpoints: 4,
                validation_rollouts: 5,
                test_rollouts: 5,
                validation_ranges: 8,
            },
            learning_rate: 0.0,
            weight_decay: 0.0,
            cond_len: 8,
            pred_len: 4,
            seed: 0,
            out_dir: None,
        }
    }

    #[test]
    fn study_is_reproducible_and_prunes() {
        let data = gen_gmm(2, 80, &GmmParams::default(), 3).unwrap();
        let sp = split(&data, &SplitConfig { validation: 16, test: 8 }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        let prune = PruneConfig {
            enabled: true,
            warmup_trials: 2,
        };
        let s1 = run_study(&small_space(), ModelKind::C2farB2, &sp.train, &sp.validation, 6, &base(), prune, 11, Some(&a)).unwrap();
        let s2 = run_study(&small_space(), ModelKind::C2farB2, &sp.train, &sp.validation, 6, &base(), prune, 11, Some(&b)).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let lines = std::fs::read_to_string(&a).unwrap();
        assert_eq!(lines.lines().count(), 6);
        assert_eq!(s1.records, s2.records);
        let completed: Vec<&TrialRecord> = s1.records.iter().filter(|r| r.status == TrialStatus::Completed).collect();
        assert!(completed.iter().all(|r| s1.best.best_nd.unwrap() <= r.best_nd.unwrap()));
        for r in &s1.records {
            if let TrialStatus::Pruned { checkpoint } = r.status {
                assert_eq!(r.nd_history.last().unwrap().0, checkpoint);
            }
        }
        let one = run_study(&small_space(), ModelKind::DeeparGaussian, &sp.train, &sp.validation, 1, &base(), prune, 4, None).unwrap();
        assert_eq!(one.best.trial, 0);
    }

    #[test]
    fn pruning_does_not_change_an_unprunable_winner() {
        let data = gen_gmm(2, 80, &GmmParams::default(), 5).unwrap();
        let sp = split(&data, &SplitConfig { validation: 16, test: 8 }).unwrap();
        let run = |enabled| {
            let prune = PruneConfig {
                enabled,
                warmup_trials: 1,
            };
            run_study(&small_space(), ModelKind::C2farB1, &sp.train, &sp.validation, 6, &base(), prune, 21, None).unwrap()
        };
        let off = run(false);
        let on = run(true);
        for (a, b) in off.records.iter().zip(&on.records) {
            assert_eq!(a.config, b.config);
        }
        assert!(on.records.iter().any(|r| matches!(r.status, TrialStatus::Pruned { .. })));
        let winner = off.best.trial;
        assert_eq!(on.records[winner].status, TrialStatus::Completed);
        assert_eq!(on.best.config, off.best.config);
        assert_eq!(on.best.best_nd, off.best.best_nd);
    }

    #[test]
    fn log_uniform_is_uniform_in_log_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (lo, hi) = (1e-5f64, 1e-1f64);
        let mut u: Vec<f64> = (0..10_000)
            .map(|_| (log_uniform(&mut rng, (lo, hi)).ln() - lo.ln()) / (hi.ln() - lo.ln()))
            .collect();
        u.sort_by(f64::total_cmp);
        let n = u.len() as f64;
        let d = u
            .iter()
            .enumerate()
            .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
            .fold(0.0, f64::max);
        // 1% critical value of the one-sample KS statistic
        assert!(d < 1.63 / n.sqrt(), "KS distance {d}");
    }

    #[test]
    fn median_of_values() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
