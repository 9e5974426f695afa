//! Checkpointed training with validation-driven early stopping.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forecast_all, save_checkpoint, window_at, window_offsets, CheckpointManifest, ForecastOptions, Learned, SeriesWindow};
use crate::data::SeriesView;
use crate::error::{Error, Result};
use crate::metrics::nd;
use crate::neural::{adam_update, AdamConfig, AdamState, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub train_batch_size: usize,
    pub ranges_per_checkpoint: usize,
    pub validation_eval_period: usize,
    pub validation_warmup: usize,
    pub stop_evals_no_improve: usize,
    pub max_checkpoints: usize,
    pub validation_rollouts: usize,
    pub test_rollouts: usize,
    /// Cap on validation windows per evaluation.
    pub validation_ranges: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            train_batch_size: 1024,
            ranges_per_checkpoint: 32768,
            validation_eval_period: 2,
            validation_warmup: 11,
            stop_evals_no_improve: 37,
            max_checkpoints: 750,
            validation_rollouts: 25,
            test_rollouts: 500,
            validation_ranges: 32768,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("train_batch_size", self.train_batch_size),
            ("ranges_per_checkpoint", self.ranges_per_checkpoint),
            ("validation_eval_period", self.validation_eval_period),
            ("stop_evals_no_improve", self.stop_evals_no_improve),
            ("max_checkpoints", self.max_checkpoints),
            ("validation_rollouts", self.validation_rollouts),
            ("test_rollouts", self.test_rollouts),
            ("validation_ranges", self.validation_ranges),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(Error::Config(format!("{name} must be positive"))),
            None => Ok(()),
        }
    }

    /// Whether checkpoint `c` (1-based) runs a validation evaluation.
    pub fn evaluates_at(&self, c: usize) -> bool {
        c >= self.validation_warmup.max(1) && (c - self.validation_warmup.max(1)) % self.validation_eval_period == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub schedule: TrainSchedule,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub cond_len: usize,
    pub pred_len: usize,
    pub seed: u64,
    /// Where to write `best.ckpt` and `last.ckpt`, if anywhere.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalDecision {
    Continue,
    Prune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum TrainStatus {
    Completed,
    EarlyStopped,
    Pruned { checkpoint: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub index: usize,
    pub windows_seen: usize,
    pub train_nll: f64,
    pub validation_nd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub checkpoints: Vec<CheckpointRecord>,
    pub best_checkpoint: Option<usize>,
    pub best_nd: Option<f64>,
    pub status: TrainStatus,
}

impl TrainLog {
    /// `(checkpoint, nd)` for every evaluated checkpoint.
    pub fn validation_history(&self) -> Vec<(usize, f64)> {
        self.checkpoints
            .iter()
            .filter_map(|c| c.validation_nd.map(|v| (c.index, v)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Learned,
    pub log: TrainLog,
}

/// Validation windows: prediction ranges tile each view in steps of `n`,
/// conditioning on the `t` points before. Windows with constant
/// conditioning are dropped; at most `cap` are kept (seeded subsample).
pub fn validation_windows(views: &[SeriesView], t: usize, n: usize, cap: usize, seed: u64) -> Vec<SeriesWindow> {
    let mut out = Vec::new();
    for v in views {
        let mut p = v.range.start;
        while p + n <= v.range.end {
            if p >= t {
                let w = window_at(v, p - t, t, n, out.len() as u64);
                if !w.has_constant_conditioning() {
                    out.push(w);
                }
            }
            p += n;
        }
    }
    if out.len() > cap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        out.shuffle(&mut rng);
        out.truncate(cap);
        out.sort_by_key(|w| w.window_id);
    }
    out
}

/// Pooled ND of median forecasts over windows with known prediction ranges.
pub fn validation_nd(model: &Learned, windows: &[SeriesWindow], n: usize, opts: &ForecastOptions) -> Result<f64> {
    let grids = forecast_all(model, windows, n, opts)?;
    let mut point = Vec::new();
    let mut truth = Vec::new();
    for (w, g) in windows.iter().zip(&grids) {
        let pred = w.pred.as_deref().unwrap_or(&[]);
        point.extend_from_slice(&g.median()[..pred.len()]);
        truth.extend_from_slice(pred);
    }
    nd(&point, &truth)
}

/// Trains `model` on stride-1 windows of `train_views`. Every
/// `ranges_per_checkpoint` windows form a checkpoint; scheduled checkpoints
/// measure validation ND, and the parameters with the best ND are returned.
/// Without any evaluation the final parameters are returned.
pub fn train(
    mut model: Learned,
    train_views: &[SeriesView],
    validation_views: &[SeriesView],
    opts: &TrainOptions,
    mut hook: Option<&mut dyn FnMut(usize, usize, f64) -> EvalDecision>,
) -> Result<TrainOutcome> {
    let sched = opts.schedule;
    sched.validate()?;
    let (t, n) = (opts.cond_len, opts.pred_len);
    if t == 0 || n == 0 {
        return Err(Error::Config("conditioning and prediction lengths must be positive".into()));
    }
    let index: Vec<(usize, usize)> = train_views
        .iter()
        .enumerate()
        .flat_map(|(i, v)| {
            let (offs, _) = window_offsets(v.values(), t, n, 1);
            offs.into_iter().map(move |o| (i, v.range.start + o))
        })
        .collect();
    if index.is_empty() {
        return Err(Error::Input("no usable training windows".into()));
    }
    let val_windows = validation_windows(validation_views, t, n, sched.validation_ranges, opts.seed);
    let val_opts = ForecastOptions {
        n_rollouts: sched.validation_rollouts,
        seed: opts.seed,
        ..ForecastOptions::default()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..index.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let adam = AdamConfig::new(opts.learning_rate, opts.weight_decay);
    let mut adam_state = AdamState::default();
    let batch_size = sched.train_batch_size.min(index.len());

    let mut log = TrainLog {
        checkpoints: Vec::new(),
        best_checkpoint: None,
        best_nd: None,
        status: TrainStatus::Completed,
    };
    let mut best_model: Option<Learned> = None;
    let mut evals = 0usize;
    let mut since_best = 0usize;
    let mut seen = 0usize;

    for c in 1..=sched.max_checkpoints {
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut in_checkpoint = 0usize;
        while in_checkpoint < sched.ranges_per_checkpoint {
            let mut seqs = Vec::with_capacity(batch_size);
            for _ in 0..batch_size {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let (vi, start) = index[order[cursor]];
                cursor += 1;
                seqs.push(window_at(&train_views[vi], start, t, n, 0).to_sequence()?);
            }
            let refs: Vec<_> = seqs.iter().collect();
            let (loss, grad) = model.loss_and_grad(&refs, Some(rng.random()))?;
            if !loss.is_finite() || !grad.all_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss or gradient at checkpoint {c}, batch {batches}"
                )));
            }
            adam_update(&mut model, &grad, &mut adam_state, &adam);
            loss_sum += loss;
            batches += 1;
            in_checkpoint += batch_size;
        }
        seen += in_checkpoint;
        let mut record = CheckpointRecord {
            index: c,
            windows_seen: seen,
            train_nll: loss_sum / batches as f64,
            validation_nd: None,
        };
        log::info!("checkpoint {c}: train nll {:.5}", record.train_nll);

        let mut prune = false;
        if sched.evaluates_at(c) && !val_windows.is_empty() {
            let v = validation_nd(&model, &val_windows, n, &val_opts)?;
            record.validation_nd = Some(v);
            evals += 1;
            log::info!("checkpoint {c}: validation nd {v:.5}");
            if log.best_nd.is_none_or(|b| v < b) {
                log.best_nd = Some(v);
                log.best_checkpoint = Some(c);
                best_model = Some(model.clone());
                since_best = 0;
            } else {
                since_best += 1;
            }
            if let Some(h) = hook.as_deref_mut() {
                prune = h(evals, c, v) == EvalDecision::Prune;
            }
        }
        log.checkpoints.push(record);
        if let Some(dir) = &opts.out_dir {
            let m = CheckpointManifest::new(&model, c, seen, log.validation_history());
            save_checkpoint(&dir.join("last.ckpt"), &model, &m)?;
            if log.best_checkpoint == Some(c) {
                save_checkpoint(&dir.join("best.ckpt"), &model, &m)?;
            }
        }
        if prune {
            log.status = TrainStatus::Pruned { checkpoint: c };
            break;
        }
        if since_best >= sched.stop_evals_no_improve {
            log.status = TrainStatus::EarlyStopped;
            break;
        }
    }
    Ok(TrainOutcome {
        model: best_model.unwrap_or(model),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gmm, split, GmmParams, SplitConfig};
    use crate::hbin::BinningSpec;
    use crate::model::C2farRnnConfig;
    use crate::pipeline::{load_checkpoint, ModelConfig};

    fn small_schedule() -> TrainSchedule {
        TrainSchedule {
            train_batch_size: 16,
            ranges_per_checkpoint: 32,
            validation_eval_period: 1,
            validation_warmup: 1,
            stop_evals_no_improve: 3,
            max_checkpoints: 8,
            validation_rollouts: 5,
            test_rollouts: 10,
            validation_ranges: 20,
        }
    }

    fn setup() -> (Vec<crate::data::Series>, Learned) {
        let data = gen_gmm(3, 120, &GmmParams::default(), 1).unwrap();
        let spec = BinningSpec::new(vec![5, 4], -0.01, 1.01).unwrap();
        let cfg = ModelConfig::C2far(C2farRnnConfig::new(spec, 8, 0.0, 2).unwrap());
        (data, Learned::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)))
    }

    fn options(schedule: TrainSchedule) -> TrainOptions {
        TrainOptions {
            schedule,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            cond_len: 12,
            pred_len: 4,
            seed: 5,
            out_dir: None,
        }
    }

    #[test]
    fn schedule_defaults() {
        let s = TrainSchedule::default();
        assert_eq!((s.train_batch_size, s.ranges_per_checkpoint, s.max_checkpoints), (1024, 32768, 750));
        assert_eq!((s.validation_eval_period, s.validation_warmup, s.stop_evals_no_improve), (2, 11, 37));
        assert_eq!((s.validation_rollouts, s.test_rollouts), (25, 500));
        assert!(!s.evaluates_at(10) && s.evaluates_at(11) && !s.evaluates_at(12) && s.evaluates_at(13));
        assert!(TrainSchedule { max_checkpoints: 0, ..s }.validate().is_err());
    }

    #[test]
    fn one_checkpoint() {
        let (data, model) = setup();
        let sp = split(&data, &SplitConfig { validation: 24, test: 24 }).unwrap();
        let out = train(model, &sp.train, &sp.validation, &options(TrainSchedule { max_checkpoints: 1, ..small_schedule() }), None).unwrap();
        assert_eq!(out.log.checkpoints.len(), 1);
        assert_eq!(out.log.checkpoints[0].windows_seen, 32);
    }

    #[test]
    fn returns_best_checkpoint_and_writes_files() {
        let (data, model) = setup();
        let sp = split(&data, &SplitConfig { validation: 24, test: 24 }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut opts = options(small_schedule());
        opts.out_dir = Some(dir.path().to_path_buf());
        let out = train(model, &sp.train, &sp.validation, &opts, None).unwrap();
        let hist = out.log.validation_history();
        assert!(!hist.is_empty());
        let best = out.log.best_nd.unwrap();
        assert!(hist.iter().all(|&(_, v)| best <= v));
        let (best_at, _) = hist.iter().copied().fold((0, f64::INFINITY), |a, (c, v)| if v < a.1 { (c, v) } else { a });
        assert_eq!(out.log.best_checkpoint, Some(best_at));

        let (loaded, manifest) = load_checkpoint(&dir.path().join("best.ckpt")).unwrap();
        assert_eq!(loaded, out.model);
        assert_eq!(manifest.checkpoint_index, best_at);
        let val = validation_windows(&sp.validation, 12, 4, 20, 5);
        let vopts = ForecastOptions {
            n_rollouts: 5,
            seed: 5,
            ..ForecastOptions::default()
        };
        assert_eq!(validation_nd(&loaded, &val, 4, &vopts).unwrap(), best);
    }

    #[test]
    fn hook_prunes() {
        let (data, model) = setup();
        let sp = split(&data, &SplitConfig { validation: 24, test: 24 }).unwrap();
        let mut calls = Vec::new();
        let mut hook = |e: usize, c: usize, _v: f64| {
            calls.push((e, c));
            if e == 2 {
                EvalDecision::Prune
            } else {
                EvalDecision::Continue
            }
        };
        let out = train(model, &sp.train, &sp.validation, &options(small_schedule()), Some(&mut hook)).unwrap();
        assert_eq!(out.log.status, TrainStatus::Pruned { checkpoint: 2 });
        assert_eq!(calls, vec![(1, 1), (2, 2)]);
    }

    #[test]
    fn divergence_is_reported() {
        let (data, model) = setup();
        let sp = split(&data, &SplitConfig { validation: 24, test: 24 }).unwrap();
        let mut opts = options(small_schedule());
        opts.learning_rate = f64::INFINITY;
        let err = train(model, &sp.train, &sp.validation, &opts, None).unwrap_err();
        assert!(matches!(err, Error::Diverged(_)), "{err}");
    }
}
