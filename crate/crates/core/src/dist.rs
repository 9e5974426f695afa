//! The coarse-to-fine output distribution.
//!
//! The probability of a value is the product of the per-level categorical
//! probabilities along its bin path, times a within-leaf density: uniform
//! on finite leaves and Type I Pareto on the two open-ended extremes.
//!
//! The tail scale is fixed by the extent (`extent_hi` above, `|extent_lo|`
//! below). The Pareto variable is anchored at the leaf's finite edge `a`,
//! i.e. `z - a + s ~ Pareto(s, alpha)` above and `a - z + s ~ Pareto(s, alpha)`
//! below, so its support is exactly the leaf.

use std::borrow::Cow;

use rand::Rng;

use crate::error::{Error, Result};
use crate::hbin::{BinPath, BinningSpec, Interval};

/// Supplies `p(z^i | z^{<i})` for a prefix of length `i`.
pub trait Conditionals {
    fn probs(&self, prefix: &[usize]) -> Cow<'_, [f64]>;
}

/// Wraps a closure computing conditionals from the prefix.
pub struct FnConditionals<F>(pub F);

impl<F> Conditionals for FnConditionals<F>
where
    F: Fn(&[usize]) -> Vec<f64>,
{
    fn probs(&self, prefix: &[usize]) -> Cow<'_, [f64]> {
        Cow::Owned((self.0)(prefix))
    }
}

/// Shape parameters of the two tails.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailShapes {
    pub alpha_hi: f64,
    pub alpha_lo: f64,
}

impl TailShapes {
    pub fn new(alpha_hi: f64, alpha_lo: f64) -> Result<Self> {
        if alpha_hi > 0.0 && alpha_lo > 0.0 && alpha_hi.is_finite() && alpha_lo.is_finite() {
            Ok(TailShapes { alpha_hi, alpha_lo })
        } else {
            Err(Error::Input(format!(
                "tail shapes must be positive, got ({alpha_hi}, {alpha_lo})"
            )))
        }
    }
}

/// One timestep's distribution parameters: one probability vector per
/// level (the conditionals realized along a single path) plus tail shapes.
///
/// As a [`Conditionals`] provider it ignores the prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDensity {
    pub level_probs: Vec<Vec<f64>>,
    pub tails: TailShapes,
}

impl StepDensity {
    pub fn new(spec: &BinningSpec, level_probs: Vec<Vec<f64>>, tails: TailShapes) -> Result<Self> {
        if level_probs.len() != spec.n_levels() {
            return Err(Error::Input(format!(
                "{} probability vectors for a {}-level binning",
                level_probs.len(),
                spec.n_levels()
            )));
        }
        for (i, (p, &k)) in level_probs.iter().zip(spec.levels()).enumerate() {
            if p.len() != k {
                return Err(Error::Input(format!(
                    "level {i} has {} probabilities, expected {k}",
                    p.len()
                )));
            }
            let total: f64 = p.iter().sum();
            if p.iter().any(|&x| !(x >= 0.0)) || (total - 1.0).abs() > 1e-6 {
                return Err(Error::Input(format!(
                    "level {i} probabilities are not a distribution (sum {total})"
                )));
            }
        }
        Ok(StepDensity { level_probs, tails })
    }

    /// Equal probability for every bin at every level.
    pub fn uniform(spec: &BinningSpec, tails: TailShapes) -> Self {
        StepDensity {
            level_probs: spec
                .levels()
                .iter()
                .map(|&k| vec![1.0 / k as f64; k])
                .collect(),
            tails,
        }
    }
}

impl Conditionals for StepDensity {
    fn probs(&self, prefix: &[usize]) -> Cow<'_, [f64]> {
        Cow::Borrowed(&self.level_probs[prefix.len()])
    }
}

/// Log-density of `v` inside leaf `iv`, excluding the path probability.
pub fn leaf_log_density(spec: &BinningSpec, iv: &Interval, tails: TailShapes, v: f64) -> Result<f64> {
    if iv.is_finite() {
        return Ok(-(iv.hi - iv.lo).ln());
    }
    let (alpha, scale, excess) = tail_coords(spec, iv, tails, v);
    if scale <= 0.0 {
        spec.validate_tails()?;
    }
    Ok(pareto_log_density(alpha, scale, excess + scale))
}

fn tail_coords(spec: &BinningSpec, iv: &Interval, tails: TailShapes, v: f64) -> (f64, f64, f64) {
    if iv.hi_open_ended {
        (tails.alpha_hi, spec.tail_scale_hi(), (v - iv.lo).max(0.0))
    } else {
        (tails.alpha_lo, spec.tail_scale_lo(), (iv.hi - v).max(0.0))
    }
}

/// Type I Pareto log-density at `u >= scale`.
pub fn pareto_log_density(alpha: f64, scale: f64, u: f64) -> f64 {
    alpha.ln() + alpha * scale.ln() - (alpha + 1.0) * u.ln()
}

/// `P(U > u)` for a Type I Pareto.
pub fn pareto_survival(alpha: f64, scale: f64, u: f64) -> f64 {
    if u <= scale {
        1.0
    } else {
        (scale / u).powf(alpha)
    }
}

/// Draws one index from a probability vector with a single uniform.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = k;
            acc += p;
            if u < acc {
                return k;
            }
        }
    }
    last_positive
}

/// Draws a value inside a leaf from its within-leaf density.
pub fn sample_in_leaf<R: Rng + ?Sized>(
    spec: &BinningSpec,
    iv: &Interval,
    tails: TailShapes,
    rng: &mut R,
) -> f64 {
    if iv.is_finite() {
        let u: f64 = rng.random();
        let v = iv.lo + u * (iv.hi - iv.lo);
        return if v < iv.hi { v.max(iv.lo) } else { iv.lo };
    }
    // 1 - random() lies in (0, 1]
    let u = 1.0 - rng.random::<f64>();
    let (alpha, scale, _) = tail_coords(spec, iv, tails, 0.0);
    let excess = scale * (u.powf(-1.0 / alpha) - 1.0);
    if iv.hi_open_ended {
        (iv.lo + excess).max(iv.lo)
    } else {
        let v = iv.hi - excess;
        if v < iv.hi {
            v
        } else {
            prev_float(iv.hi)
        }
    }
}

fn prev_float(x: f64) -> f64 {
    if x > 0.0 {
        f64::from_bits(x.to_bits() - 1)
    } else if x < 0.0 {
        f64::from_bits(x.to_bits() + 1)
    } else {
        -f64::MIN_POSITIVE
    }
}

/// A full distribution: binning, conditionals and tail shapes.
pub struct C2farDensity<'a, C: Conditionals + ?Sized> {
    pub spec: &'a BinningSpec,
    pub conditionals: &'a C,
    pub tails: TailShapes,
}

impl<'a, C: Conditionals + ?Sized> C2farDensity<'a, C> {
    pub fn new(spec: &'a BinningSpec, conditionals: &'a C, tails: TailShapes) -> Self {
        C2farDensity {
            spec,
            conditionals,
            tails,
        }
    }

    /// Sum of per-level log-probabilities along `path`.
    pub fn path_log_prob(&self, path: &BinPath) -> f64 {
        let idx = path.indices();
        let mut total = 0.0;
        for i in 0..idx.len() {
            let p = self.conditionals.probs(&idx[..i])[idx[i]];
            if p <= 0.0 {
                return f64::NEG_INFINITY;
            }
            total += p.ln();
        }
        total
    }

    pub fn log_prob(&self, v: f64) -> Result<f64> {
        let path = self.spec.discretize(v)?;
        let lp = self.path_log_prob(&path);
        if lp == f64::NEG_INFINITY {
            return Ok(lp);
        }
        let iv = self.spec.interval_of(&path)?;
        Ok(lp + leaf_log_density(self.spec, &iv, self.tails, v)?)
    }

    pub fn cdf(&self, v: f64) -> Result<f64> {
        if v == f64::INFINITY {
            return Ok(1.0);
        }
        if v == f64::NEG_INFINITY {
            return Ok(0.0);
        }
        let path = self.spec.discretize(v)?;
        let idx = path.indices();
        let mut below = 0.0;
        let mut prefix_mass = 1.0;
        for i in 0..idx.len() {
            let probs = self.conditionals.probs(&idx[..i]);
            below += prefix_mass * probs[..idx[i]].iter().sum::<f64>();
            prefix_mass *= probs[idx[i]];
            if prefix_mass == 0.0 {
                break;
            }
        }
        if prefix_mass == 0.0 {
            return Ok(below.min(1.0));
        }
        let iv = self.spec.interval_of(&path)?;
        let partial = if iv.is_finite() {
            ((v - iv.lo) / (iv.hi - iv.lo)).clamp(0.0, 1.0)
        } else {
            let (alpha, scale, excess) = tail_coords(self.spec, &iv, self.tails, v);
            let survival = pareto_survival(alpha, scale, excess + scale);
            if iv.hi_open_ended {
                1.0 - survival
            } else {
                survival
            }
        };
        Ok((below + prefix_mass * partial).min(1.0))
    }

    pub fn pdf_grid(&self, grid: &[f64]) -> Result<Vec<f64>> {
        if grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Input("pdf grid must be strictly increasing".into()));
        }
        grid.iter().map(|&x| self.log_prob(x).map(f64::exp)).collect()
    }

    pub fn cdf_grid(&self, grid: &[f64]) -> Result<Vec<f64>> {
        grid.iter().map(|&x| self.cdf(x)).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (BinPath, f64) {
        let mut idx = Vec::with_capacity(self.spec.n_levels());
        for _ in 0..self.spec.n_levels() {
            let k = sample_categorical(&self.conditionals.probs(&idx), rng);
            idx.push(k);
        }
        let path = BinPath(idx);
        let iv = self
            .spec
            .interval_of(&path)
            .expect("sampled indices are in range");
        let v = sample_in_leaf(self.spec, &iv, self.tails, rng);
        (path, v)
    }

    /// Probability of the all-max path, the mass of the upper tail leaf.
    pub fn top_path_prob(&self) -> f64 {
        let top = BinPath(self.spec.levels().iter().map(|k| k - 1).collect());
        self.path_log_prob(&top).exp()
    }

    /// Probability of the all-zero path, the mass of the lower tail leaf.
    pub fn bottom_path_prob(&self) -> f64 {
        self.path_log_prob(&BinPath(vec![0; self.spec.n_levels()])).exp()
    }
}

pub fn log_prob<C: Conditionals + ?Sized>(
    spec: &BinningSpec,
    conditionals: &C,
    tails: TailShapes,
    value: f64,
) -> Result<f64> {
    C2farDensity::new(spec, conditionals, tails).log_prob(value)
}

pub fn sample<C: Conditionals + ?Sized, R: Rng + ?Sized>(
    spec: &BinningSpec,
    conditionals: &C,
    tails: TailShapes,
    rng: &mut R,
) -> (BinPath, f64) {
    C2farDensity::new(spec, conditionals, tails).sample(rng)
}

pub fn cdf<C: Conditionals + ?Sized>(
    spec: &BinningSpec,
    conditionals: &C,
    tails: TailShapes,
    value: f64,
) -> Result<f64> {
    C2farDensity::new(spec, conditionals, tails).cdf(value)
}

pub fn pdf_grid<C: Conditionals + ?Sized>(
    spec: &BinningSpec,
    conditionals: &C,
    tails: TailShapes,
    grid: &[f64],
) -> Result<Vec<f64>> {
    C2farDensity::new(spec, conditionals, tails).pdf_grid(grid)
}

/// Evenly spaced grid of `n >= 2` points on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let n = n.max(2);
    (0..n)
        .map(|i| {
            let f = i as f64 / (n - 1) as f64;
            lo * (1.0 - f) + hi * f
        })
        .collect()
}
