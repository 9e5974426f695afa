//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fail. Pass substrings as arguments to run a subset,
//! e.g. `cargo test --test acceptance -- metric gradient`.

use std::collections::BTreeMap;
use std::time::Instant;

use c2far::baselines::seasonal_naive_forecast;
use c2far::data::{default_start, gen_discrete_uniform, gen_gmm, split, Frequency, GmmParams, Series, SeriesView, SplitConfig};
use c2far::dist::{pareto_survival, C2farDensity, FnConditionals, TailShapes};
use c2far::hbin::BinningSpec;
use c2far::metrics::{nd, nll_eval, pinball, wql, QuantileForecasts, WQL_QUANTILES};
use c2far::model::{C2farRnn, C2farRnnConfig, DeepArGaussian, GaussianConfig, Sequence};
use c2far::neural::{finite_difference_grads, ParamSet};
use c2far::pipeline::train::{train, TrainOptions, TrainSchedule};
use c2far::pipeline::{rolling_evaluate, window_at, EvalMode, ForecastOptions, Forecaster, Learned, ModelConfig, ModelKind, SeriesWindow};
use c2far::tune::{run_study, sample_config, PruneConfig, SearchSpace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

const COND: usize = 48;
const PRED: usize = 24;
const HOLDOUT: usize = 96;

fn recovery_schedule() -> TrainSchedule {
    TrainSchedule {
        train_batch_size: 256,
        ranges_per_checkpoint: 256 * 10,
        validation_eval_period: 2,
        validation_warmup: 10,
        stop_evals_no_improve: 8,
        max_checkpoints: 30,
        validation_rollouts: 25,
        test_rollouts: 25,
        validation_ranges: 200,
    }
}

fn c2far_config(bins: Vec<usize>) -> ModelConfig {
    let spec = BinningSpec::new(bins, -0.01, 1.01).unwrap();
    ModelConfig::C2far(C2farRnnConfig::new(spec, 64, 1e-3, 2).unwrap())
}

fn fit(cfg: &ModelConfig, series: &[Series], seed: u64) -> Learned {
    let sp = split(series, &SplitConfig { validation: HOLDOUT, test: HOLDOUT }).unwrap();
    let opts = TrainOptions {
        schedule: recovery_schedule(),
        learning_rate: 2e-2,
        weight_decay: 1e-6,
        cond_len: COND,
        pred_len: PRED,
        seed,
        out_dir: None,
    };
    let init = Learned::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed));
    let out = train(init, &sp.train, &sp.validation, &opts, None).unwrap();
    eprintln!(
        "  trained {} for {} checkpoints, best validation ND {:?}",
        cfg.kind(),
        out.log.checkpoints.len(),
        out.log.best_nd
    );
    out.model
}

/// Non-overlapping windows whose prediction ranges tile the test span.
fn test_windows(series: &[Series]) -> Vec<SeriesWindow> {
    let mut out = Vec::new();
    for s in series {
        let view = SeriesView { series: s, range: 0..s.len() };
        for k in 0..HOLDOUT / PRED {
            let start = s.len() - HOLDOUT - COND + k * PRED;
            let id = out.len() as u64;
            out.push(window_at(&view, start, COND, PRED, id));
        }
    }
    out
}

/// Forecast samples in original units, pooled over windows and horizons.
fn forecast_samples(model: &Learned, windows: &[SeriesWindow], want: usize) -> Vec<f64> {
    let per_window = want.div_ceil(windows.len() * PRED);
    let mut out = Vec::with_capacity(want);
    for w in windows {
        let mut seq = w.to_sequence().unwrap();
        seq.values.truncate(seq.cond_len);
        for p in model.sample_paths(&seq, PRED, per_window, 99, w.window_id).unwrap() {
            out.extend(p.into_iter().map(|v| w.scaler.unnormalize(v)));
        }
    }
    out.truncate(want);
    out
}

fn gmm_recovery(_: &mut Shared) -> Outcome {
    let params = GmmParams::default();
    let series = gen_gmm(50, 2000, &params, 11).unwrap();
    let model = fit(&c2far_config(vec![20, 20]), &series, 1);
    let mut s = forecast_samples(&model, &test_windows(&series), 100_000);
    s.sort_by(f64::total_cmp);
    let comps: Vec<(f64, Normal)> = params
        .weights
        .iter()
        .zip(&params.means)
        .map(|(&w, &m)| (w, Normal::new(m, params.std).unwrap()))
        .collect();
    let cdf = |x: f64| comps.iter().map(|(w, d)| w * d.cdf(x)).sum::<f64>();
    let n = s.len() as f64;
    let ks = s
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max);
    outcome(ks <= 0.05, format!("KS distance {ks:.4} over {} samples (limit 0.05)", s.len()))
}

#[derive(Default)]
struct Shared {
    discrete_b2: Option<Learned>,
}

fn discrete_series() -> Vec<Series> {
    gen_discrete_uniform(50, 2000, 1, 10, 12).unwrap()
}

fn discrete_recovery(shared: &mut Shared) -> Outcome {
    let series = discrete_series();
    let model = fit(&c2far_config(vec![20, 20]), &series, 2);
    let s = forecast_samples(&model, &test_windows(&series), 100_000);
    let n = s.len() as f64;
    let masses: Vec<f64> = (1..=10)
        .map(|k| s.iter().filter(|&&v| (v - k as f64).abs() <= 0.25).count() as f64 / n)
        .collect();
    shared.discrete_b2 = Some(model);
    let worst = masses.iter().map(|m| (m - 0.1).abs()).fold(0.0, f64::max);
    let shown: Vec<String> = masses.iter().map(|m| format!("{m:.3}")).collect();
    outcome(worst <= 0.02, format!("per-integer mass [{}], worst deviation {worst:.4} (limit 0.02)", shown.join(", ")))
}

fn nll_ordering(shared: &mut Shared) -> Outcome {
    let series = discrete_series();
    let b2 = match shared.discrete_b2.take() {
        Some(m) => m,
        None => fit(&c2far_config(vec![20, 20]), &series, 2),
    };
    let b1 = fit(&c2far_config(vec![60]), &series, 3);
    let gauss = fit(&ModelConfig::Gaussian(GaussianConfig::new(64, 1e-3, 2).unwrap()), &series, 4);
    let windows = test_windows(&series);
    let nll: Vec<f64> = [&b2, &b1, &gauss].iter().map(|m| nll_eval(m, &windows).unwrap()).collect();
    let ok = nll.iter().all(|v| v.is_finite()) && nll[0] < nll[1] && nll[1] < nll[2];
    outcome(
        ok,
        format!("C2FAR-B2 {:.4} < C2FAR-B1 {:.4} < DeepAR-Gaussian {:.4}", nll[0], nll[1], nll[2]),
    )
}

fn metric_identities(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let truths: Vec<f64> = (0..500).map(|_| rng.random_range(-5.0..20.0)).collect();
    let point: Vec<f64> = (0..500).map(|_| rng.random_range(-5.0..20.0)).collect();
    let grid = QuantileForecasts::degenerate(&WQL_QUANTILES, &point);
    let gap = (wql(&grid, &truths).unwrap() - nd(&point, &truths).unwrap()).abs();
    let nd_example = nd(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
    let p1 = pinball(0.9, 5.0, 10.0);
    let p2 = pinball(0.9, 5.0, 3.0);
    let ok = gap <= 1e-12 && nd_example == 0.5 && (p1 - 4.5).abs() < 1e-12 && (p2 - 0.2).abs() < 1e-12 && pinball(0.3, 2.0, 2.0) == 0.0;
    outcome(
        ok,
        format!("|wQL - ND| = {gap:.1e}, ND example {nd_example}, pinball {p1:.3} and {p2:.3}"),
    )
}

fn random_conditionals(spec: &BinningSpec, seed: u64) -> impl Fn(&[usize]) -> Vec<f64> + '_ {
    move |prefix: &[usize]| {
        let key = prefix.iter().fold(seed, |h, &i| h.wrapping_mul(1_000_003).wrapping_add(i as u64 + 1));
        let mut r = ChaCha8Rng::seed_from_u64(key);
        let w: Vec<f64> = (0..spec.levels()[prefix.len()]).map(|_| r.random_range(0.05..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    }
}

fn distribution_suite(_: &mut Shared) -> Outcome {
    let spec = BinningSpec::new(vec![6, 5, 4], -0.01, 1.01).unwrap();
    let cond = FnConditionals(random_conditionals(&spec, 8));
    let tails = TailShapes::new(2.5, 1.7).unwrap();
    let d = C2farDensity::new(&spec, &cond, tails);

    // Midpoint rule on [-3, 4], then analytic Pareto mass beyond.
    let (lo, hi, m) = (-3.0, 4.0, 1_400_000usize);
    let h = (hi - lo) / m as f64;
    let inner: f64 = (0..m).map(|i| d.log_prob(lo + (i as f64 + 0.5) * h).unwrap().exp() * h).sum();
    let top = spec.leaf_interval(spec.n_intervals() - 1);
    let bottom = spec.leaf_interval(0);
    let upper = d.top_path_prob() * pareto_survival(tails.alpha_hi, spec.tail_scale_hi(), hi - top.lo + spec.tail_scale_hi());
    let lower = d.bottom_path_prob() * pareto_survival(tails.alpha_lo, spec.tail_scale_lo(), bottom.hi - lo + spec.tail_scale_lo());
    let total = inner + upper + lower;
    let norm_ok = (total - 1.0).abs() <= 1e-3;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures = 0usize;
    for _ in 0..1_000_000 {
        let v = if rng.random_bool(0.9) {
            rng.random_range(-0.05..1.05)
        } else {
            rng.random_range(-50.0..50.0)
        };
        let path = spec.discretize(v).unwrap();
        let iv = spec.interval_of(&path).unwrap();
        let leaf = spec.leaf_index(&path).unwrap();
        if !iv.contains(v) || spec.path_of_leaf(leaf) != path {
            failures += 1;
        }
    }

    // Sampled histogram against CDF differences on a grid finer than the leaves.
    let mut edges = vec![f64::NEG_INFINITY];
    for j in 0..=spec.n_intervals() - 2 {
        let a = spec.leaf_interval(j).hi;
        let b = spec.leaf_interval(j + 1).hi;
        edges.push(a);
        if b.is_finite() {
            edges.push(0.5 * (a + b));
        }
    }
    edges.extend([1.3, 2.0, f64::INFINITY]);
    edges.insert(1, -0.3);
    edges.insert(1, -1.0);
    edges.sort_by(f64::total_cmp);
    let probs: Vec<f64> = edges.windows(2).map(|w| d.cdf(w[1]).unwrap() - d.cdf(w[0]).unwrap()).collect();
    let n = 400_000;
    let mut counts = vec![0usize; probs.len()];
    for _ in 0..n {
        let (_, v) = d.sample(&mut rng);
        let k = edges.partition_point(|&e| e < v) - 1;
        counts[k.min(probs.len() - 1)] += 1;
    }
    let tv = 0.5 * counts.iter().zip(&probs).map(|(&c, &p)| (c as f64 / n as f64 - p).abs()).sum::<f64>();
    outcome(
        norm_ok && failures == 0 && tv <= 0.02,
        format!("total mass {total:.6}, round-trip failures {failures} of 1000000, sampling TV {tv:.4} over {} cells", probs.len()),
    )
}

/// Largest relative error over tensors whose name satisfies `keep`.
fn rel_error<P: ParamSet<f64>>(analytic: &P, numeric: &[Vec<f64>], keep: impl Fn(&str) -> bool) -> f64 {
    let mut worst: f64 = 0.0;
    for ((name, a), n) in analytic.tensors().iter().zip(numeric) {
        if !keep(name) {
            continue;
        }
        for (&x, &y) in a.iter().zip(n) {
            worst = worst.max((x - y).abs() / (x.abs() + y.abs()).max(1e-6));
        }
    }
    worst
}

fn gradient_checks(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut seqs = Vec::new();
    for vals in [[0.1, 0.7, 1.4, 0.3, -0.2, 0.95, 1.3], [0.5, 0.45, -0.4, 1.2, 0.05, -0.6, 0.33]] {
        let covariates = (0..vals.len() * 2).map(|_| rng.random_range(-0.5..0.5)).collect();
        seqs.push(Sequence { values: vals.to_vec(), covariates, cond_len: 2 });
    }
    let refs: Vec<&Sequence> = seqs.iter().collect();

    let spec = BinningSpec::new(vec![3, 2], -0.01, 1.01).unwrap();
    let mut c2 = C2farRnn::<f64>::init(C2farRnnConfig::new(spec, 4, 0.2, 2).unwrap(), &mut rng);
    let (_, g) = c2.loss_and_grad(&refs, Some(7), true).unwrap();
    let g = g.unwrap();
    let num = finite_difference_grads(&mut c2, 1e-6, |m| m.loss_and_grad(&refs, Some(7), false).unwrap().0.total());
    let categorical = rel_error(&g, &num, |n| n.starts_with("level") && n.contains(".out"));
    let pareto = rel_error(&g, &num, |n| n.starts_with("pareto"));
    let full = rel_error(&g, &num, |_| true);

    let mut gm = DeepArGaussian::<f64>::init(GaussianConfig::new(4, 0.2, 2).unwrap(), &mut rng);
    let (_, gg) = gm.loss_and_grad(&refs, Some(3), true).unwrap();
    let gg = gg.unwrap();
    let gnum = finite_difference_grads(&mut gm, 1e-6, |m| m.loss_and_grad(&refs, Some(3), false).unwrap().0);
    let gaussian = rel_error(&gg, &gnum, |n| n.starts_with("head"));
    let gaussian_full = rel_error(&gg, &gnum, |_| true);

    let worst = [categorical, pareto, gaussian, full, gaussian_full].into_iter().fold(0.0, f64::max);
    outcome(
        worst < 1e-3,
        format!(
            "max relative error: categorical {categorical:.1e}, Pareto {pareto:.1e}, Gaussian {gaussian:.1e}, full C2FAR {full:.1e}, full Gaussian model {gaussian_full:.1e}"
        ),
    )
}

fn median_secs(mut f: impl FnMut(), reps: usize) -> f64 {
    let mut t: Vec<f64> = (0..reps)
        .map(|_| {
            let s = Instant::now();
            f();
            s.elapsed().as_secs_f64()
        })
        .collect();
    t.sort_by(f64::total_cmp);
    t[reps / 2]
}

fn out_proj_params(m: &Learned) -> usize {
    m.tensors()
        .iter()
        .filter(|(n, _)| n.starts_with("level") && n.contains(".out"))
        .map(|(_, a)| a.len())
        .sum()
}

fn complexity_scaling(_: &mut Shared) -> Outcome {
    let (k, h, rollouts, steps) = (16usize, 32usize, 256usize, 8usize);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seq = Sequence {
        values: (0..48).map(|_| rng.random_range(0.0..1.0)).collect(),
        covariates: vec![0.5; (48 + steps) * 2],
        cond_len: 48,
    };
    let mut per_step = Vec::new();
    for b in 1..=3 {
        let spec = BinningSpec::new(vec![k; b], -0.01, 1.01).unwrap();
        let m = C2farRnn::<f32>::init(C2farRnnConfig::new(spec, h, 0.0, 2).unwrap(), &mut rng);
        let cov = vec![0.5; rollouts * 2];
        let secs = median_secs(
            || {
                let mut st = m.encode(&[&seq], rollouts).unwrap();
                let mut rngs: Vec<ChaCha8Rng> = (0..rollouts as u64).map(ChaCha8Rng::seed_from_u64).collect();
                for _ in 0..steps {
                    std::hint::black_box(m.sample_step(&mut st, &cov, &mut rngs).unwrap());
                }
            },
            7,
        );
        let enc = median_secs(
            || {
                std::hint::black_box(m.encode(&[&seq], rollouts).unwrap());
            },
            7,
        );
        per_step.push((secs - enc).max(0.0) / steps as f64);
    }
    let xs = [1.0, 2.0, 3.0];
    let mx = 2.0;
    let my = per_step.iter().sum::<f64>() / 3.0;
    let sxy: f64 = xs.iter().zip(&per_step).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    let ss_res: f64 = xs.iter().zip(&per_step).map(|(x, y)| (y - (my + slope * (x - mx))).powi(2)).sum();
    let ss_tot: f64 = per_step.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = 1.0 - ss_res / ss_tot;

    // Output-projection size: flat with K^B bins versus B levels of K.
    let mut flat = Vec::new();
    let mut tree = Vec::new();
    for b in 1..=3u32 {
        let kb = 8usize.pow(b);
        let f = Learned::init(&c2far_like(vec![kb], h), &mut rng);
        let t = Learned::init(&c2far_like(vec![8; b as usize], h), &mut rng);
        flat.push((kb, out_proj_params(&f)));
        tree.push((b as usize, out_proj_params(&t)));
    }
    let flat_ok = flat.windows(2).all(|w| w[1].1 as f64 / w[0].1 as f64 >= w[1].0 as f64 / w[0].0 as f64 * 0.999);
    let tree_ok = tree.iter().all(|&(b, p)| p == b * (h + 1) * 8);
    let ms: Vec<String> = per_step.iter().map(|s| format!("{:.3}", s * 1e3)).collect();
    outcome(
        r2 > 0.9 && slope > 0.0 && flat_ok && tree_ok,
        format!(
            "per-step ms for B=1,2,3: [{}], R^2 {r2:.4}; output weights flat {:?}, tree {:?}",
            ms.join(", "),
            flat.iter().map(|x| x.1).collect::<Vec<_>>(),
            tree.iter().map(|x| x.1).collect::<Vec<_>>()
        ),
    )
}

fn c2far_like(bins: Vec<usize>, h: usize) -> ModelConfig {
    let spec = BinningSpec::new(bins, -0.01, 1.01).unwrap();
    ModelConfig::C2far(C2farRnnConfig::new(spec, h, 0.0, 2).unwrap())
}

fn baseline_exactness(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cycle: Vec<f64> = (0..24).map(|_| rng.random_range(1.0..50.0)).collect();
    let periodic = Series::new("p", default_start(), Frequency::Hourly, (0..24 * 30).map(|i| cycle[i % 24]).collect()).unwrap();
    let noisy = Series::new("n", default_start(), Frequency::Hourly, (0..24 * 30).map(|_| rng.random_range(1.0..50.0)).collect()).unwrap();
    let opts = ForecastOptions::default();
    let f = Forecaster::SeasonalNaive { season: 24 };

    let exact = rolling_evaluate(&f, &[view(&periodic)], 72, 24, EvalMode::Windows, &opts).unwrap();
    let direct = seasonal_naive_forecast(&window_at(&view(&periodic), 100, 72, 24, 0), 24, 24, &opts.quantiles).unwrap();
    let direct_ok = direct.median().iter().zip(&periodic.values[172..196]).all(|(a, b)| a == b);
    let flat = rolling_evaluate(&f, &[view(&noisy)], 72, 24, EvalMode::Span(96), &opts).unwrap();
    let per_h: Vec<f64> = flat.report.per_horizon.iter().map(|(_, m)| m.nd).collect();
    let spread = per_h.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) - per_h.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    outcome(
        exact.report.overall.nd == 0.0 && direct_ok && spread <= 1e-12 && per_h.len() == 24,
        format!(
            "periodic ND {}, per-horizon ND spread {spread:.1e} across {} horizons (ND {:.4})",
            exact.report.overall.nd,
            per_h.len(),
            per_h[0]
        ),
    )
}

fn view(s: &Series) -> SeriesView<'_> {
    SeriesView { series: s, range: 0..s.len() }
}

fn tuner_contracts(_: &mut Shared) -> Outcome {
    let space = SearchSpace::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut largest = 0;
    let mut draws = 0;
    for kind in [ModelKind::C2farB1, ModelKind::C2farB2, ModelKind::C2farB3, ModelKind::DeeparGaussian] {
        for _ in 0..100 {
            let c = sample_config(&space, kind, &mut rng).unwrap();
            largest = largest.max(c.model.param_count());
            draws += 1;
        }
    }
    let cap_ok = largest <= space.param_cap;

    let series = gen_gmm(4, 160, &GmmParams::default(), 2).unwrap();
    let sp = split(&series, &SplitConfig { validation: 16, test: 16 }).unwrap();
    let base = TrainOptions {
        schedule: TrainSchedule {
            train_batch_size: 8,
            ranges_per_checkpoint: 16,
            validation_eval_period: 1,
            validation_warmup: 1,
            stop_evals_no_improve: 3,
            max_checkpoints: 3,
            validation_rollouts: 5,
            test_rollouts: 5,
            validation_ranges: 8,
        },
        learning_rate: 0.0,
        weight_decay: 0.0,
        cond_len: 16,
        pred_len: 4,
        seed: 0,
        out_dir: None,
    };
    let small = SearchSpace {
        n_hidden: (2, 8),
        flat_bins: (4, 12),
        level_bins: (2, 6),
        ..SearchSpace::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut logs = Vec::new();
    for name in ["a.jsonl", "b.jsonl"] {
        let p = dir.path().join(name);
        run_study(&small, ModelKind::C2farB2, &sp.train, &sp.validation, 8, &base, PruneConfig { enabled: true, warmup_trials: 2 }, 5, Some(&p)).unwrap();
        logs.push(std::fs::read(&p).unwrap());
    }
    let same = logs[0] == logs[1] && !logs[0].is_empty();
    outcome(
        cap_ok && same,
        format!("{draws} draws, largest {largest} parameters (cap {}); study logs identical: {same}", space.param_cap),
    )
}

type Criterion = fn(&mut Shared) -> Outcome;

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, Criterion); 9] = [
        ("metric identities", metric_identities),
        ("distribution correctness", distribution_suite),
        ("gradient checks", gradient_checks),
        ("complexity scaling", complexity_scaling),
        ("baseline exactness", baseline_exactness),
        ("tuner contracts", tuner_contracts),
        ("GMM recovery", gmm_recovery),
        ("discrete-uniform recovery", discrete_recovery),
        ("NLL ordering", nll_ordering),
    ];
    let mut shared = Shared::default();
    let mut results = BTreeMap::new();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let key = name.to_lowercase();
        if !filters.is_empty() && !filters.iter().any(|f| key.contains(&f.to_lowercase())) {
            continue;
        }
        let start = Instant::now();
        let r = run(&mut shared);
        let secs = start.elapsed().as_secs_f64();
        let tag = if r.pass { "PASS" } else { "FAIL" };
        if !r.pass {
            failed += 1;
        }
        println!("{tag} {name}: {} [{secs:.1}s]", r.detail);
        results.insert(i, r.pass);
    }
    println!("{} of {} criteria passed", results.values().filter(|&&p| p).count(), results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
