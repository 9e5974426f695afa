//! The C2FAR-RNN forecaster and the DeepAR-style Gaussian baseline.
//!
//! C2FAR-RNN keeps one two-layer LSTM stack per binning level. At time `t`
//! the level-`i` network sees the one-hot indices of every level of
//! `z_{t-1}`, the one-hot indices of the coarser levels already chosen for
//! `z_t` (zero-padded to a fixed width), the covariates `x_t` and the real
//! value `z_{t-1}`, and emits a softmax over its bins. A small feed-forward
//! head on the deepest level's hidden state produces the two Pareto tail
//! shapes.

use ndarray::{Array2, ArrayView2, ArrayViewD, ArrayViewMutD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use std::borrow::Cow;

use crate::dist::{leaf_log_density, Conditionals, sample_categorical, sample_in_leaf, StepDensity, TailShapes};
use crate::error::{Error, Result};
use crate::hbin::{BinPath, BinningSpec, Interval};
use crate::neural::{cst, sigmoid, softmax_rows, softplus, Linear, LstmStack, LstmState, ParamSet, Scalar, StepInput};

/// Floor applied to the Gaussian head's standard deviation.
pub const MIN_STD: f64 = 1e-6;

/// One normalized series slice: `values` holds the conditioning range
/// followed by the prediction range (if known); `covariates` is row-major
/// with `covariate_dim` entries per timestep and may extend past `values`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub values: Vec<f64>,
    pub covariates: Vec<f64>,
    pub cond_len: usize,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn pred_len(&self) -> usize {
        self.values.len().saturating_sub(self.cond_len)
    }

    pub fn covariates_at(&self, t: usize, dim: usize) -> &[f64] {
        &self.covariates[t * dim..(t + 1) * dim]
    }
}

fn check_batch(batch: &[&Sequence], cov_dim: usize, need_pred: bool) -> Result<(usize, usize)> {
    let first = batch
        .first()
        .ok_or_else(|| Error::Input("empty batch".into()))?;
    let (len, cond) = (first.len(), first.cond_len);
    if cond < 1 {
        return Err(Error::Input("conditioning range must be non-empty".into()));
    }
    if need_pred && len <= cond {
        return Err(Error::Input("sequence has no prediction range".into()));
    }
    for s in batch {
        if s.len() != len || s.cond_len != cond {
            return Err(Error::Input("batch sequences differ in length".into()));
        }
        if s.covariates.len() < len * cov_dim {
            return Err(Error::Input("covariates shorter than values".into()));
        }
        if s.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite value in sequence".into()));
        }
    }
    Ok((len, cond))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct C2farRnnConfig {
    pub binning: BinningSpec,
    pub n_hidden: usize,
    pub lstm_dropout: f64,
    pub covariate_dim: usize,
}

/// Column layout of the per-level input vector.
#[derive(Debug, Clone, PartialEq)]
pub struct InputLayout {
    /// Start of the one-hot block for level `j` of `z_{t-1}`.
    pub prev_offsets: Vec<usize>,
    /// Start of the padded slot for coarser level `j` of `z_t`.
    pub coarse_offsets: Vec<usize>,
    pub n_onehot: usize,
    pub n_dense: usize,
}

impl InputLayout {
    pub fn width(&self) -> usize {
        self.n_onehot + self.n_dense
    }
}

impl C2farRnnConfig {
    pub fn new(binning: BinningSpec, n_hidden: usize, lstm_dropout: f64, covariate_dim: usize) -> Result<Self> {
        binning.validate_tails()?;
        if n_hidden == 0 {
            return Err(Error::Config("n_hidden must be positive".into()));
        }
        if !(0.0..1.0).contains(&lstm_dropout) {
            return Err(Error::Config(format!("lstm_dropout {lstm_dropout} not in [0, 1)")));
        }
        Ok(C2farRnnConfig {
            binning,
            n_hidden,
            lstm_dropout,
            covariate_dim,
        })
    }

    pub fn layout(&self) -> InputLayout {
        let levels = self.binning.levels();
        let mut off = 0;
        let mut prev_offsets = Vec::with_capacity(levels.len());
        for &k in levels {
            prev_offsets.push(off);
            off += k;
        }
        let mut coarse_offsets = Vec::with_capacity(levels.len().saturating_sub(1));
        for &k in &levels[..levels.len() - 1] {
            coarse_offsets.push(off);
            off += k;
        }
        InputLayout {
            prev_offsets,
            coarse_offsets,
            n_onehot: off,
            n_dense: self.covariate_dim + 1,
        }
    }

    /// Exact trainable parameter count, biases included.
    pub fn param_count(&self) -> usize {
        let h = self.n_hidden;
        let d = self.layout().width();
        let per_level: usize = self
            .binning
            .levels()
            .iter()
            .map(|&k| LstmStack::<f32>::param_count(d, h) + Linear::<f32>::param_count(h, k))
            .sum();
        per_level + Linear::<f32>::param_count(h, h) + Linear::<f32>::param_count(h, 2)
    }

    /// Categorical outputs evaluated per timestep: `sum(levels)` here, versus
    /// the product for an equivalent flat binning.
    pub fn output_units(&self) -> usize {
        self.binning.n_outputs()
    }
}

/// Dense feature vector for level `level` (0-based), as fed to its LSTM.
pub fn assemble_level_input(
    config: &C2farRnnConfig,
    level: usize,
    prev_path: &BinPath,
    coarser: &[usize],
    covariates: &[f64],
    prev_value: f64,
) -> Result<Vec<f64>> {
    let b = config.binning.n_levels();
    if level >= b {
        return Err(Error::Input(format!("level {level} out of range for {b} levels")));
    }
    if coarser.len() != level {
        return Err(Error::Input(format!(
            "level {level} needs {level} coarser indices, got {}",
            coarser.len()
        )));
    }
    if covariates.len() != config.covariate_dim {
        return Err(Error::Input("covariate dimension mismatch".into()));
    }
    config.binning.leaf_index(prev_path)?;
    let levels = config.binning.levels();
    if coarser.iter().zip(levels).any(|(&i, &k)| i >= k) {
        return Err(Error::Input("coarser bin index out of range".into()));
    }
    let layout = config.layout();
    let mut x = vec![0.0; layout.width()];
    for (j, &i) in prev_path.indices().iter().enumerate() {
        x[layout.prev_offsets[j] + i] = 1.0;
    }
    for (j, &i) in coarser.iter().enumerate() {
        x[layout.coarse_offsets[j] + i] = 1.0;
    }
    x[layout.n_onehot..layout.n_onehot + covariates.len()].copy_from_slice(covariates);
    x[layout.n_onehot + covariates.len()] = prev_value;
    Ok(x)
}

/// Per-level network: LSTM stack plus softmax projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelNet<T> {
    pub stack: LstmStack<T>,
    pub out: Linear<T>,
}

/// Feed-forward head producing `(alpha_hi, alpha_lo)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParetoHead<T> {
    pub hidden: Linear<T>,
    pub out: Linear<T>,
}

struct ParetoForward<T> {
    act: Array2<T>,
    raw: Array2<T>,
}

impl<T: Scalar> ParetoHead<T> {
    fn forward_full(&self, h: ArrayView2<T>) -> ParetoForward<T> {
        let act = self.hidden.forward(h).mapv(|v| v.tanh());
        let raw = self.out.forward(act.view());
        ParetoForward { act, raw }
    }

    /// Positive shape parameters per row: column 0 is `alpha_hi`, 1 is `alpha_lo`.
    pub fn forward(&self, h: ArrayView2<T>) -> Array2<T> {
        self.forward_full(h).raw.mapv(softplus)
    }

    fn backward(&self, h: ArrayView2<T>, fwd: &ParetoForward<T>, d_alpha: &Array2<T>, grad: &mut ParetoHead<T>) -> Array2<T> {
        let d_raw = crate::neural::zip_map(d_alpha, &fwd.raw, |d, r| d * sigmoid(r));
        let d_act = self.out.backward(fwd.act.view(), d_raw.view(), &mut grad.out);
        let d_pre = crate::neural::zip_map(&d_act, &fwd.act, |d, a| d * (T::one() - a * a));
        self.hidden.backward(h, d_pre.view(), &mut grad.hidden)
    }
}

pub fn pareto_head<T: Scalar>(head: &ParetoHead<T>, final_level_hidden: &[T]) -> (T, T) {
    let h = ArrayView2::from_shape((1, final_level_hidden.len()), final_level_hidden).expect("row vector");
    let a = head.forward(h);
    (a[[0, 0]], a[[0, 1]])
}

impl<T: Scalar> ParamSet<T> for ParetoHead<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        self.hidden.collect(&format!("{prefix}.hidden"), out);
        self.out.collect(&format!("{prefix}.out"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        self.hidden.collect_mut(&format!("{prefix}.hidden"), out);
        self.out.collect_mut(&format!("{prefix}.out"), out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct C2farRnn<T> {
    pub config: C2farRnnConfig,
    pub levels: Vec<LevelNet<T>>,
    pub pareto: ParetoHead<T>,
}

impl<T: Scalar> ParamSet<T> for C2farRnn<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        for (i, l) in self.levels.iter().enumerate() {
            let p = format!("{prefix}level{i}");
            l.stack.collect(&p, out);
            l.out.collect(&format!("{p}.out"), out);
        }
        self.pareto.collect(&format!("{prefix}pareto"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        for (i, l) in self.levels.iter_mut().enumerate() {
            let p = format!("{prefix}level{i}");
            l.stack.collect_mut(&p, out);
            l.out.collect_mut(&format!("{p}.out"), out);
        }
        self.pareto.collect_mut(&format!("{prefix}pareto"), out);
    }
}

/// Per-level categorical NLL and the within-leaf term, each averaged per point.
#[derive(Debug, Clone, PartialEq)]
pub struct NllBreakdown {
    pub per_level: Vec<f64>,
    pub leaf: f64,
}

impl NllBreakdown {
    pub fn total(&self) -> f64 {
        self.per_level.iter().sum::<f64>() + self.leaf
    }
}

/// Recurrent state for sampling: one LSTM state per level, the previous
/// bin path and value of every row.
#[derive(Debug, Clone)]
pub struct C2farState<T> {
    pub levels: Vec<LstmState<T>>,
    pub prev_paths: Vec<Vec<usize>>,
    pub prev_values: Vec<f64>,
}

/// One batch of training inputs shared by all levels.
struct Prepared<T> {
    paths: Vec<Vec<Vec<usize>>>,
    dense: Vec<Array2<T>>,
    steps: usize,
}

impl<T: Scalar> C2farRnn<T> {
    pub fn init<R: Rng + ?Sized>(config: C2farRnnConfig, rng: &mut R) -> Self {
        let layout = config.layout();
        let h = config.n_hidden;
        let levels = config
            .binning
            .levels()
            .iter()
            .map(|&k| LevelNet {
                stack: LstmStack::init(layout.n_onehot, layout.n_dense, h, config.lstm_dropout, rng),
                out: Linear::init(h, k, rng),
            })
            .collect();
        let pareto = ParetoHead {
            hidden: Linear::init(h, h, rng),
            out: Linear::init(h, 2, rng),
        };
        C2farRnn {
            config,
            levels,
            pareto,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    pub fn spec(&self) -> &BinningSpec {
        &self.config.binning
    }

    fn prepare(&self, batch: &[&Sequence], len: usize) -> Result<Prepared<T>> {
        let spec = self.spec();
        let cov = self.config.covariate_dim;
        let paths = batch
            .iter()
            .map(|s| {
                s.values[..len]
                    .iter()
                    .map(|&v| spec.discretize(v).map(|p| p.0))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let steps = len - 1;
        let dense = (1..len)
            .map(|k| {
                let mut d = Array2::zeros((batch.len(), cov + 1));
                for (r, s) in batch.iter().enumerate() {
                    for (j, &x) in s.covariates_at(k, cov).iter().enumerate() {
                        d[[r, j]] = cst(x);
                    }
                    d[[r, cov]] = cst(s.values[k - 1]);
                }
                d
            })
            .collect();
        Ok(Prepared { paths, dense, steps })
    }

    fn level_inputs(&self, level: usize, prep: &Prepared<T>, layout: &InputLayout) -> Vec<StepInput<T>> {
        let b = self.spec().n_levels();
        let n_active = b + level;
        (0..prep.steps)
            .map(|s| {
                let k = s + 1;
                let mut active = Vec::with_capacity(prep.paths.len() * n_active);
                for p in &prep.paths {
                    for j in 0..b {
                        active.push((layout.prev_offsets[j] + p[k - 1][j]) as u32);
                    }
                    for j in 0..level {
                        active.push((layout.coarse_offsets[j] + p[k][j]) as u32);
                    }
                }
                StepInput {
                    active,
                    n_active,
                    dense: prep.dense[s].clone(),
                }
            })
            .collect()
    }

    /// Teacher-forced NLL over the prediction range, averaged per point,
    /// with optional gradients. `dropout_seed` switches on training-mode dropout.
    pub fn loss_and_grad(
        &self,
        batch: &[&Sequence],
        dropout_seed: Option<u64>,
        want_grad: bool,
    ) -> Result<(NllBreakdown, Option<Self>)> {
        let (len, cond) = check_batch(batch, self.config.covariate_dim, true)?;
        let prep = self.prepare(batch, len)?;
        let layout = self.config.layout();
        let spec = self.spec();
        let b = spec.n_levels();
        let n_points = (batch.len() * (len - cond)) as f64;
        let norm: T = cst(1.0 / n_points);
        let mut grad = if want_grad { Some(self.zeros_like()) } else { None };

        let level_result = |i: usize, grad_level: Option<&mut LevelNet<T>>, grad_pareto: Option<&mut ParetoHead<T>>| -> Result<(f64, f64)> {
            let net = &self.levels[i];
            let inputs = self.level_inputs(i, &prep, &layout);
            let mut drop_rng = dropout_seed.map(|s| ChaCha8Rng::seed_from_u64(s.wrapping_add(i as u64 * 0x9E37_79B9)));
            let (outs, _, trace) = net
                .stack
                .forward_seq(&inputs, LstmState::zeros(batch.len(), self.config.n_hidden), drop_rng.as_mut())?;
            let mut d_out: Vec<Option<Array2<T>>> = (0..prep.steps).map(|_| None).collect();
            let mut cat_nll = 0.0;
            let mut leaf_nll = 0.0;
            let mut grad_level = grad_level;
            let mut grad_pareto = grad_pareto;
            for k in cond..len {
                let s = k - 1;
                let h = &outs[s];
                let mut probs = net.out.forward(h.view());
                softmax_rows(&mut probs);
                for (r, p) in prep.paths.iter().enumerate() {
                    let target = p[k][i];
                    let pk = probs[[r, target]].to_f64().unwrap_or(0.0);
                    cat_nll -= pk.max(1e-300).ln();
                }
                let mut dh = None;
                if let Some(g) = grad_level.as_deref_mut() {
                    let mut dlogits = probs;
                    for (r, p) in prep.paths.iter().enumerate() {
                        dlogits[[r, p[k][i]]] -= T::one();
                    }
                    dlogits.mapv_inplace(|v| v * norm);
                    dh = Some(net.out.backward(h.view(), dlogits.view(), &mut g.out));
                }
                if i == b - 1 {
                    let (nll, d_pareto_h) = self.leaf_term(h, &prep.paths, k, batch, norm, grad_pareto.as_deref_mut())?;
                    leaf_nll += nll;
                    if let (Some(d), Some(extra)) = (dh.as_mut(), d_pareto_h) {
                        *d += &extra;
                    }
                }
                d_out[s] = dh;
            }
            if let Some(g) = grad_level {
                net.stack.backward_seq(&inputs, &trace, &d_out, &mut g.stack);
            }
            Ok((cat_nll / n_points, leaf_nll / n_points))
        };

        let mut per_level = vec![0.0; b];
        let mut leaf = 0.0;
        match grad.as_mut() {
            Some(g) => {
                let C2farRnn { levels, pareto, .. } = g;
                let results = run_levels(levels, pareto, b, &level_result)?;
                for (i, (c, l)) in results.into_iter().enumerate() {
                    per_level[i] = c;
                    leaf += l;
                }
            }
            None => {
                for (i, slot) in per_level.iter_mut().enumerate() {
                    let (c, l) = level_result(i, None, None)?;
                    *slot = c;
                    leaf += l;
                }
            }
        }
        Ok((NllBreakdown { per_level, leaf }, grad))
    }

    /// Within-leaf NLL summed over rows at step `k`, plus `dL/dh` through the
    /// Pareto head when gradients are requested.
    fn leaf_term(
        &self,
        h: &Array2<T>,
        paths: &[Vec<Vec<usize>>],
        k: usize,
        batch: &[&Sequence],
        norm: T,
        grad: Option<&mut ParetoHead<T>>,
    ) -> Result<(f64, Option<Array2<T>>)> {
        let spec = self.spec();
        let n = spec.n_intervals();
        let fwd = self.pareto.forward_full(h.view());
        let alphas = fwd.raw.mapv(softplus);
        let mut d_alpha = Array2::<T>::zeros(alphas.dim());
        let mut any_tail = false;
        let mut nll = 0.0;
        for (r, p) in paths.iter().enumerate() {
            let leaf = leaf_of(spec, &p[k]);
            let iv = spec.leaf_interval(leaf);
            let v = batch[r].values[k];
            let tails = TailShapes {
                alpha_hi: alphas[[r, 0]].to_f64().unwrap_or(0.0),
                alpha_lo: alphas[[r, 1]].to_f64().unwrap_or(0.0),
            };
            nll -= leaf_log_density(spec, &iv, tails, v)?;
            if leaf == 0 || leaf + 1 == n {
                any_tail = true;
                let (col, alpha, scale, u) = if leaf + 1 == n {
                    (0, tails.alpha_hi, spec.tail_scale_hi(), v - iv.lo + spec.tail_scale_hi())
                } else {
                    (1, tails.alpha_lo, spec.tail_scale_lo(), iv.hi - v + spec.tail_scale_lo())
                };
                // d/dalpha of -(ln a + a ln s - (a+1) ln u)
                d_alpha[[r, col]] = cst::<T>(-1.0 / alpha - scale.ln() + u.ln()) * norm;
            }
        }
        let dh = match grad {
            Some(g) if any_tail => Some(self.pareto.backward(h.view(), &fwd, &d_alpha, g)),
            _ => None,
        };
        Ok((nll, dh))
    }

    /// Mean per-point NLL, evaluation mode.
    pub fn nll(&self, batch: &[&Sequence]) -> Result<f64> {
        Ok(self.loss_and_grad(batch, None, false)?.0.total())
    }

    /// Distributions realized along the true path at each prediction step
    /// of one sequence (conditionals for each level given the true prefix).
    pub fn step_densities(&self, seq: &Sequence) -> Result<Vec<StepDensity>> {
        let (len, cond) = check_batch(&[seq], self.config.covariate_dim, true)?;
        let prep = self.prepare(&[seq], len)?;
        let layout = self.config.layout();
        let b = self.spec().n_levels();
        let mut level_probs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); len - cond];
        let mut alphas = vec![(0.0, 0.0); len - cond];
        for i in 0..b {
            let net = &self.levels[i];
            let inputs = self.level_inputs(i, &prep, &layout);
            let (outs, _, _) = net
                .stack
                .forward_seq::<ChaCha8Rng>(&inputs, LstmState::zeros(1, self.config.n_hidden), None)?;
            for k in cond..len {
                let mut p = net.out.forward(outs[k - 1].view());
                softmax_rows(&mut p);
                level_probs[k - cond].push(p.row(0).iter().map(|x| x.to_f64().unwrap_or(0.0)).collect());
                if i == b - 1 {
                    let a = self.pareto.forward(outs[k - 1].view());
                    alphas[k - cond] = (a[[0, 0]].to_f64().unwrap_or(0.0), a[[0, 1]].to_f64().unwrap_or(0.0));
                }
            }
        }
        Ok(level_probs
            .into_iter()
            .zip(alphas)
            .map(|(lp, (hi, lo))| StepDensity {
                level_probs: renormalize(lp),
                tails: TailShapes {
                    alpha_hi: hi,
                    alpha_lo: lo,
                },
            })
            .collect())
    }

    /// Runs the conditioning range of each sequence and replicates the
    /// resulting state `repeat` times per sequence.
    pub fn encode(&self, batch: &[&Sequence], repeat: usize) -> Result<C2farState<T>> {
        let cond = batch.first().map(|s| s.cond_len).unwrap_or(0);
        if cond == 0 || batch.iter().any(|s| s.cond_len != cond || s.values.len() < cond) {
            return Err(Error::Input("encode needs equal, non-empty conditioning ranges".into()));
        }
        let trimmed: Vec<Sequence> = batch
            .iter()
            .map(|s| Sequence {
                values: s.values[..cond].to_vec(),
                covariates: s.covariates.clone(),
                cond_len: cond,
            })
            .collect();
        let refs: Vec<&Sequence> = trimmed.iter().collect();
        check_batch(&refs, self.config.covariate_dim, false)?;
        let prep = self.prepare(&refs, cond)?;
        let layout = self.config.layout();
        let mut states = Vec::with_capacity(self.levels.len());
        for (i, net) in self.levels.iter().enumerate() {
            let mut st = LstmState::zeros(batch.len(), self.config.n_hidden);
            for inp in self.level_inputs(i, &prep, &layout) {
                net.stack.step(&inp, &mut st)?;
            }
            states.push(st.repeat_rows(repeat));
        }
        let mut prev_paths = Vec::with_capacity(batch.len() * repeat);
        let mut prev_values = Vec::with_capacity(batch.len() * repeat);
        for (r, s) in refs.iter().enumerate() {
            for _ in 0..repeat {
                prev_paths.push(prep.paths[r][cond - 1].clone());
                prev_values.push(s.values[cond - 1]);
            }
        }
        Ok(C2farState {
            levels: states,
            prev_paths,
            prev_values,
        })
    }

    /// Samples one timestep for every row of `state`. `covariates` holds
    /// `covariate_dim` values per row; `rngs` one stream per row.
    pub fn sample_step(&self, state: &mut C2farState<T>, covariates: &[f64], rngs: &mut [ChaCha8Rng]) -> Result<Vec<(BinPath, f64)>> {
        let rows = state.prev_values.len();
        let cov = self.config.covariate_dim;
        if covariates.len() != rows * cov || rngs.len() != rows {
            return Err(Error::Input("sample_step row counts disagree".into()));
        }
        let spec = self.spec();
        let b = spec.n_levels();
        let layout = self.config.layout();
        let mut dense = Array2::<T>::zeros((rows, cov + 1));
        for r in 0..rows {
            for j in 0..cov {
                dense[[r, j]] = cst(covariates[r * cov + j]);
            }
            dense[[r, cov]] = cst(state.prev_values[r]);
        }
        let mut current: Vec<Vec<usize>> = vec![Vec::with_capacity(b); rows];
        let mut last_h = None;
        for i in 0..b {
            let n_active = b + i;
            let mut active = Vec::with_capacity(rows * n_active);
            for r in 0..rows {
                for j in 0..b {
                    active.push((layout.prev_offsets[j] + state.prev_paths[r][j]) as u32);
                }
                for j in 0..i {
                    active.push((layout.coarse_offsets[j] + current[r][j]) as u32);
                }
            }
            let input = StepInput {
                active,
                n_active,
                dense: dense.clone(),
            };
            let h = self.levels[i].stack.step(&input, &mut state.levels[i])?;
            let mut probs = self.levels[i].out.forward(h.view());
            softmax_rows(&mut probs);
            for r in 0..rows {
                let p: Vec<f64> = probs.row(r).iter().map(|x| x.to_f64().unwrap_or(0.0)).collect();
                current[r].push(sample_categorical(&renormalize_one(p), &mut rngs[r]));
            }
            last_h = Some(h);
        }
        let h = last_h.expect("at least one level");
        let alphas = self.pareto.forward(h.view());
        let mut out = Vec::with_capacity(rows);
        for (r, idx) in current.into_iter().enumerate() {
            let leaf = leaf_of(spec, &idx);
            let iv: Interval = spec.leaf_interval(leaf);
            let tails = TailShapes {
                alpha_hi: alphas[[r, 0]].to_f64().unwrap_or(1.0).max(1e-6),
                alpha_lo: alphas[[r, 1]].to_f64().unwrap_or(1.0).max(1e-6),
            };
            let v = sample_in_leaf(spec, &iv, tails, &mut rngs[r]);
            state.prev_paths[r] = idx.clone();
            state.prev_values[r] = v;
            out.push((BinPath(idx), v));
        }
        Ok(out)
    }
}

/// The model's one-step-ahead distribution after a conditioning range,
/// exposed as per-prefix conditionals for the density routines.
pub struct NextStep<'a, T> {
    model: &'a C2farRnn<T>,
    state: C2farState<T>,
    covariates: Vec<f64>,
}

impl<T: Scalar> NextStep<'_, T> {
    fn level(&self, prefix: &[usize]) -> Result<(Array2<T>, Vec<f64>)> {
        let spec = self.model.spec();
        let i = prefix.len();
        if i >= spec.n_levels() || prefix.iter().zip(spec.levels()).any(|(&p, &k)| p >= k) {
            return Err(Error::Input("prefix does not address a level".into()));
        }
        let layout = self.model.config.layout();
        let cov = self.model.config.covariate_dim;
        let mut active: Vec<u32> = self.state.prev_paths[0]
            .iter()
            .enumerate()
            .map(|(j, &b)| (layout.prev_offsets[j] + b) as u32)
            .collect();
        active.extend(prefix.iter().enumerate().map(|(j, &b)| (layout.coarse_offsets[j] + b) as u32));
        let mut dense = Array2::<T>::zeros((1, cov + 1));
        for (j, &x) in self.covariates.iter().enumerate() {
            dense[[0, j]] = cst(x);
        }
        dense[[0, cov]] = cst(self.state.prev_values[0]);
        let input = StepInput {
            n_active: active.len(),
            active,
            dense,
        };
        let mut st = self.state.levels[i].clone();
        let h = self.model.levels[i].stack.step(&input, &mut st)?;
        let mut p = self.model.levels[i].out.forward(h.view());
        softmax_rows(&mut p);
        Ok((h, renormalize_one(p.row(0).iter().map(|x| x.to_f64().unwrap_or(0.0)).collect())))
    }

    /// Tail shapes from the deepest level's state on the top path (for
    /// `alpha_hi`) and the bottom path (for `alpha_lo`).
    pub fn tails(&self) -> Result<TailShapes> {
        let spec = self.model.spec();
        let b = spec.n_levels();
        let top: Vec<usize> = spec.levels()[..b - 1].iter().map(|k| k - 1).collect();
        let (h_top, _) = self.level(&top)?;
        let (h_bot, _) = self.level(&vec![0; b - 1])?;
        let hi = self.model.pareto.forward(h_top.view())[[0, 0]].to_f64().unwrap_or(1.0);
        let lo = self.model.pareto.forward(h_bot.view())[[0, 1]].to_f64().unwrap_or(1.0);
        TailShapes::new(hi, lo)
    }
}

impl<T: Scalar> Conditionals for NextStep<'_, T> {
    fn probs(&self, prefix: &[usize]) -> Cow<'_, [f64]> {
        Cow::Owned(self.level(prefix).map(|(_, p)| p).expect("valid prefix"))
    }
}

impl<T: Scalar> C2farRnn<T> {
    /// Distribution of the value right after the conditioning range of `seq`.
    pub fn next_step(&self, seq: &Sequence) -> Result<NextStep<'_, T>> {
        let dim = self.config.covariate_dim;
        if seq.covariates.len() < (seq.cond_len + 1) * dim {
            return Err(Error::Input("covariates do not cover the next step".into()));
        }
        Ok(NextStep {
            model: self,
            state: self.encode(&[seq], 1)?,
            covariates: seq.covariates_at(seq.cond_len, dim).to_vec(),
        })
    }
}

fn leaf_of(spec: &BinningSpec, idx: &[usize]) -> usize {
    let mut leaf = 0;
    for (&i, &k) in idx.iter().zip(spec.levels()) {
        leaf = leaf * k + i;
    }
    leaf
}

fn renormalize_one(mut p: Vec<f64>) -> Vec<f64> {
    let z: f64 = p.iter().sum();
    if z > 0.0 {
        p.iter_mut().for_each(|x| *x /= z);
    }
    p
}

fn renormalize(lp: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    lp.into_iter().map(renormalize_one).collect()
}

#[cfg(feature = "parallel")]
fn run_levels<T: Scalar, F>(levels: &mut [LevelNet<T>], pareto: &mut ParetoHead<T>, b: usize, f: &F) -> Result<Vec<(f64, f64)>>
where
    F: Fn(usize, Option<&mut LevelNet<T>>, Option<&mut ParetoHead<T>>) -> Result<(f64, f64)> + Sync,
{
    use rayon::prelude::*;
    let (shallow, deepest) = levels.split_at_mut(b - 1);
    let (mut head, last) = rayon::join(
        || {
            shallow
                .par_iter_mut()
                .enumerate()
                .map(|(i, g)| f(i, Some(g), None))
                .collect::<Result<Vec<_>>>()
        },
        || f(b - 1, Some(&mut deepest[0]), Some(pareto)),
    );
    let mut out = std::mem::take(head.as_mut().map_err(|e| Error::Input(e.to_string()))?);
    out.push(last?);
    Ok(out)
}

#[cfg(not(feature = "parallel"))]
fn run_levels<T: Scalar, F>(levels: &mut [LevelNet<T>], pareto: &mut ParetoHead<T>, b: usize, f: &F) -> Result<Vec<(f64, f64)>>
where
    F: Fn(usize, Option<&mut LevelNet<T>>, Option<&mut ParetoHead<T>>) -> Result<(f64, f64)>,
{
    let (shallow, deepest) = levels.split_at_mut(b - 1);
    let mut out = shallow
        .iter_mut()
        .enumerate()
        .map(|(i, g)| f(i, Some(g), None))
        .collect::<Result<Vec<_>>>()?;
    out.push(f(b - 1, Some(&mut deepest[0]), Some(pareto))?);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianConfig {
    pub n_hidden: usize,
    pub lstm_dropout: f64,
    pub covariate_dim: usize,
}

impl GaussianConfig {
    pub fn new(n_hidden: usize, lstm_dropout: f64, covariate_dim: usize) -> Result<Self> {
        if n_hidden == 0 {
            return Err(Error::Config("n_hidden must be positive".into()));
        }
        if !(0.0..1.0).contains(&lstm_dropout) {
            return Err(Error::Config(format!("lstm_dropout {lstm_dropout} not in [0, 1)")));
        }
        Ok(GaussianConfig {
            n_hidden,
            lstm_dropout,
            covariate_dim,
        })
    }

    pub fn param_count(&self) -> usize {
        LstmStack::<f32>::param_count(self.covariate_dim + 1, self.n_hidden) + Linear::<f32>::param_count(self.n_hidden, 2)
    }
}

/// Mean and standard deviation emitted by the Gaussian head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianHeadOutput {
    pub mean: f64,
    pub std: f64,
}

/// DeepAR-style forecaster with a Gaussian output distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepArGaussian<T> {
    pub config: GaussianConfig,
    pub stack: LstmStack<T>,
    pub head: Linear<T>,
}

impl<T: Scalar> ParamSet<T> for DeepArGaussian<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        self.stack.collect(&format!("{prefix}rnn"), out);
        self.head.collect(&format!("{prefix}head"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        self.stack.collect_mut(&format!("{prefix}rnn"), out);
        self.head.collect_mut(&format!("{prefix}head"), out);
    }
}

#[derive(Debug, Clone)]
pub struct GaussianState<T> {
    pub lstm: LstmState<T>,
    pub prev_values: Vec<f64>,
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

impl<T: Scalar> DeepArGaussian<T> {
    pub fn init<R: Rng + ?Sized>(config: GaussianConfig, rng: &mut R) -> Self {
        let h = config.n_hidden;
        DeepArGaussian {
            stack: LstmStack::init(0, config.covariate_dim + 1, h, config.lstm_dropout, rng),
            head: Linear::init(h, 2, rng),
            config,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    fn inputs(&self, batch: &[&Sequence], len: usize) -> Vec<StepInput<T>> {
        let cov = self.config.covariate_dim;
        (1..len)
            .map(|k| {
                let mut d = Array2::zeros((batch.len(), cov + 1));
                for (r, s) in batch.iter().enumerate() {
                    for (j, &x) in s.covariates_at(k, cov).iter().enumerate() {
                        d[[r, j]] = cst(x);
                    }
                    d[[r, cov]] = cst(s.values[k - 1]);
                }
                StepInput::dense_only(d)
            })
            .collect()
    }

    fn head_params(raw: &Array2<T>, r: usize) -> GaussianHeadOutput {
        let mean = raw[[r, 0]].to_f64().unwrap_or(0.0);
        let std = softplus(raw[[r, 1]]).to_f64().unwrap_or(0.0) + MIN_STD;
        GaussianHeadOutput { mean, std }
    }

    pub fn head_output(&self, hidden: &[T]) -> GaussianHeadOutput {
        let h = ArrayView2::from_shape((1, hidden.len()), hidden).expect("row vector");
        Self::head_params(&self.head.forward(h), 0)
    }

    /// Mean Gaussian NLL per prediction point, with optional gradients.
    pub fn loss_and_grad(&self, batch: &[&Sequence], dropout_seed: Option<u64>, want_grad: bool) -> Result<(f64, Option<Self>)> {
        let (len, cond) = check_batch(batch, self.config.covariate_dim, true)?;
        let inputs = self.inputs(batch, len);
        let mut drop_rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let (outs, _, trace) = self
            .stack
            .forward_seq(&inputs, LstmState::zeros(batch.len(), self.config.n_hidden), drop_rng.as_mut())?;
        let n_points = (batch.len() * (len - cond)) as f64;
        let mut grad = if want_grad { Some(self.zeros_like()) } else { None };
        let mut d_out: Vec<Option<Array2<T>>> = (0..len - 1).map(|_| None).collect();
        let mut nll = 0.0;
        for k in cond..len {
            let h = &outs[k - 1];
            let raw = self.head.forward(h.view());
            let mut d_raw = Array2::<T>::zeros(raw.dim());
            for (r, s) in batch.iter().enumerate() {
                let GaussianHeadOutput { mean, std } = Self::head_params(&raw, r);
                let z = s.values[k];
                let e = z - mean;
                nll += HALF_LN_2PI + std.ln() + e * e / (2.0 * std * std);
                let d_mean = -e / (std * std);
                let d_std = 1.0 / std - e * e / (std * std * std);
                let sig = sigmoid(raw[[r, 1]].to_f64().unwrap_or(0.0));
                d_raw[[r, 0]] = cst(d_mean / n_points);
                d_raw[[r, 1]] = cst(d_std * sig / n_points);
            }
            if let Some(g) = grad.as_mut() {
                d_out[k - 1] = Some(self.head.backward(h.view(), d_raw.view(), &mut g.head));
            }
        }
        if let Some(g) = grad.as_mut() {
            self.stack.backward_seq(&inputs, &trace, &d_out, &mut g.stack);
        }
        Ok((nll / n_points, grad))
    }

    pub fn nll(&self, batch: &[&Sequence]) -> Result<f64> {
        Ok(self.loss_and_grad(batch, None, false)?.0)
    }

    pub fn encode(&self, batch: &[&Sequence], repeat: usize) -> Result<GaussianState<T>> {
        let cond = batch.first().map(|s| s.cond_len).unwrap_or(0);
        if cond == 0 || batch.iter().any(|s| s.cond_len != cond || s.values.len() < cond) {
            return Err(Error::Input("encode needs equal, non-empty conditioning ranges".into()));
        }
        let mut st = LstmState::zeros(batch.len(), self.config.n_hidden);
        for inp in self.inputs(batch, cond) {
            self.stack.step(&inp, &mut st)?;
        }
        let prev_values = batch
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.values[cond - 1], repeat))
            .collect();
        Ok(GaussianState {
            lstm: st.repeat_rows(repeat),
            prev_values,
        })
    }

    pub fn sample_step(&self, state: &mut GaussianState<T>, covariates: &[f64], rngs: &mut [ChaCha8Rng]) -> Result<Vec<f64>> {
        let rows = state.prev_values.len();
        let cov = self.config.covariate_dim;
        if covariates.len() != rows * cov || rngs.len() != rows {
            return Err(Error::Input("sample_step row counts disagree".into()));
        }
        let mut d = Array2::<T>::zeros((rows, cov + 1));
        for r in 0..rows {
            for j in 0..cov {
                d[[r, j]] = cst(covariates[r * cov + j]);
            }
            d[[r, cov]] = cst(state.prev_values[r]);
        }
        let h = self.stack.step(&StepInput::dense_only(d), &mut state.lstm)?;
        let raw = self.head.forward(h.view());
        let mut out = Vec::with_capacity(rows);
        for (r, rng) in rngs.iter_mut().enumerate() {
            let GaussianHeadOutput { mean, std } = Self::head_params(&raw, r);
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            let v = mean + std * z;
            state.prev_values[r] = v;
            out.push(v);
        }
        Ok(out)
    }
}
