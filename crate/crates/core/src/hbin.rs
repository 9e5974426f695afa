//! Hierarchical coarse-to-fine binning.
//!
//! A [`BinningSpec`] splits the normalized extent `[extent_lo, extent_hi]`
//! evenly into `levels[0]` bins, splits each of those evenly into
//! `levels[1]` sub-bins, and so on. A value is represented by its
//! [`BinPath`], one index per level. The lowest and highest leaves are
//! open-ended: they extend to `-inf` and `+inf` respectively.
//!
//! Every edge at every level is also a leaf boundary, so all edges are
//! computed from a single formula over the leaf grid (no cumulative
//! addition), which keeps levels exactly consistent with each other.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Levels, bin counts and the normalized span covered by the finite bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct BinningSpec {
    levels: Vec<usize>,
    extent_lo: f64,
    extent_hi: f64,
    #[serde(skip)]
    strides: Vec<usize>,
}

#[derive(Deserialize)]
struct RawSpec {
    levels: Vec<usize>,
    extent_lo: f64,
    extent_hi: f64,
}

impl TryFrom<RawSpec> for BinningSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        BinningSpec::new(raw.levels, raw.extent_lo, raw.extent_hi)
    }
}

/// One index per level, coarse to fine.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BinPath(pub Vec<usize>);

impl BinPath {
    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A leaf interval. Open-ended sides carry an infinite bound.
///
/// Finite leaves are half-open `[lo, hi)`; the top leaf is `[lo, +inf)`
/// and the bottom leaf is `(-inf, hi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub lo_open_ended: bool,
    pub hi_open_ended: bool,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        (self.lo_open_ended || v >= self.lo) && (self.hi_open_ended || v < self.hi)
    }

    /// Width of a finite leaf, `None` for the open-ended extremes.
    pub fn width(&self) -> Option<f64> {
        if self.lo_open_ended || self.hi_open_ended {
            None
        } else {
            Some(self.hi - self.lo)
        }
    }

    pub fn is_finite(&self) -> bool {
        !(self.lo_open_ended || self.hi_open_ended)
    }

    /// The single finite edge of an open-ended leaf, or the lower edge of a finite one.
    pub fn finite_edge(&self) -> f64 {
        if self.lo_open_ended {
            self.hi
        } else {
            self.lo
        }
    }
}

impl BinningSpec {
    /// Geometry-only constructor: needs `extent_lo < extent_hi` and at least
    /// two bins on every level. Tail densities additionally need
    /// [`BinningSpec::validate_tails`].
    pub fn new(levels: Vec<usize>, extent_lo: f64, extent_hi: f64) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Config("binning needs at least one level".into()));
        }
        if let Some(bad) = levels.iter().find(|&&k| k < 2) {
            return Err(Error::Config(format!(
                "every level needs at least 2 bins, got {bad}"
            )));
        }
        if !(extent_lo.is_finite() && extent_hi.is_finite() && extent_lo < extent_hi) {
            return Err(Error::Config(format!(
                "binning extent [{extent_lo}, {extent_hi}] is not a finite increasing range"
            )));
        }
        let mut total: usize = 1;
        for &k in &levels {
            total = total
                .checked_mul(k)
                .filter(|&t| t as u64 <= 1u64 << 40)
                .ok_or_else(|| Error::Config("too many leaf intervals".into()))?;
        }
        let mut strides = vec![1; levels.len()];
        for i in (0..levels.len() - 1).rev() {
            strides[i] = strides[i + 1] * levels[i + 1];
        }
        Ok(BinningSpec {
            levels,
            extent_lo,
            extent_hi,
            strides,
        })
    }

    /// Requires `extent_lo < 0 < extent_hi` so both Pareto tail scales are positive.
    pub fn validate_tails(&self) -> Result<()> {
        if self.extent_lo < 0.0 && self.extent_hi > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "binning extent [{}, {}] must straddle zero for Pareto tails",
                self.extent_lo, self.extent_hi
            )))
        }
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn extent(&self) -> (f64, f64) {
        (self.extent_lo, self.extent_hi)
    }

    pub fn extent_lo(&self) -> f64 {
        self.extent_lo
    }

    pub fn extent_hi(&self) -> f64 {
        self.extent_hi
    }

    /// Number of leaf intervals, the product of all level counts.
    pub fn n_intervals(&self) -> usize {
        self.strides[0] * self.levels[0]
    }

    /// Total categorical outputs across levels, `sum(levels)`.
    pub fn n_outputs(&self) -> usize {
        self.levels.iter().sum()
    }

    /// Scale of the upper Pareto tail.
    pub fn tail_scale_hi(&self) -> f64 {
        self.extent_hi
    }

    /// Scale of the lower (reflected) Pareto tail.
    pub fn tail_scale_lo(&self) -> f64 {
        -self.extent_lo
    }

    /// Boundary `j` of the leaf grid, `0 <= j <= n_intervals`.
    pub fn leaf_edge(&self, j: usize) -> f64 {
        let n = self.n_intervals();
        if j == 0 {
            return self.extent_lo;
        }
        if j == n {
            return self.extent_hi;
        }
        let frac = j as f64 / n as f64;
        self.extent_lo * (1.0 - frac) + self.extent_hi * frac
    }

    /// Global leaf position of a path in `0..n_intervals`.
    pub fn leaf_index(&self, path: &BinPath) -> Result<usize> {
        self.check_path(path.indices(), true)?;
        Ok(self.prefix_offset(path.indices()))
    }

    pub fn path_of_leaf(&self, mut leaf: usize) -> BinPath {
        let mut idx = Vec::with_capacity(self.levels.len());
        for &s in &self.strides {
            idx.push(leaf / s);
            leaf %= s;
        }
        BinPath(idx)
    }

    fn prefix_offset(&self, prefix: &[usize]) -> usize {
        prefix
            .iter()
            .zip(&self.strides)
            .map(|(&i, &s)| i * s)
            .sum()
    }

    fn check_path(&self, idx: &[usize], full: bool) -> Result<()> {
        if full && idx.len() != self.levels.len() {
            return Err(Error::Input(format!(
                "bin path has {} levels, binning has {}",
                idx.len(),
                self.levels.len()
            )));
        }
        if idx.len() > self.levels.len() {
            return Err(Error::Input("bin path longer than binning".into()));
        }
        for (lvl, (&i, &k)) in idx.iter().zip(&self.levels).enumerate() {
            if i >= k {
                return Err(Error::Input(format!(
                    "bin index {i} out of range at level {lvl} ({k} bins)"
                )));
            }
        }
        Ok(())
    }

    /// Leaf containing `v`; finite leaves use `[lo, hi)`.
    pub fn discretize_leaf(&self, v: f64) -> Result<usize> {
        if !v.is_finite() {
            return Err(Error::Input(format!("cannot discretize non-finite value {v}")));
        }
        let n = self.n_intervals();
        let guess = ((v - self.extent_lo) / (self.extent_hi - self.extent_lo) * n as f64).floor();
        let mut j = if guess < 0.0 {
            0
        } else if guess >= (n - 1) as f64 {
            n - 1
        } else {
            guess as usize
        };
        // Nudge against the exact edge formula so discretize and interval_of agree.
        while j > 0 && v < self.leaf_edge(j) {
            j -= 1;
        }
        while j + 1 < n && v >= self.leaf_edge(j + 1) {
            j += 1;
        }
        Ok(j)
    }

    pub fn discretize(&self, v: f64) -> Result<BinPath> {
        Ok(self.path_of_leaf(self.discretize_leaf(v)?))
    }

    pub fn leaf_interval(&self, leaf: usize) -> Interval {
        let n = self.n_intervals();
        let lo_open_ended = leaf == 0;
        let hi_open_ended = leaf + 1 == n;
        Interval {
            lo: if lo_open_ended {
                f64::NEG_INFINITY
            } else {
                self.leaf_edge(leaf)
            },
            hi: if hi_open_ended {
                f64::INFINITY
            } else {
                self.leaf_edge(leaf + 1)
            },
            lo_open_ended,
            hi_open_ended,
        }
    }

    pub fn interval_of(&self, path: &BinPath) -> Result<Interval> {
        Ok(self.leaf_interval(self.leaf_index(path)?))
    }

    /// Edges of the next level's bins inside the composite bin picked by
    /// `prefix`. Has `levels[prefix.len()] + 1` entries.
    pub fn child_edges(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        if prefix.len() >= self.levels.len() {
            return Err(Error::Input(format!(
                "prefix of length {} leaves no child level in a {}-level binning",
                prefix.len(),
                self.levels.len()
            )));
        }
        self.check_path(prefix, false)?;
        let start = self.prefix_offset(prefix);
        let stride = self.strides[prefix.len()];
        let k = self.levels[prefix.len()];
        Ok((0..=k).map(|c| self.leaf_edge(start + c * stride)).collect())
    }
}

/// Convenience wrapper that also enforces the tail-scale sign rule.
pub fn build_spec(levels: &[usize], extent_lo: f64, extent_hi: f64) -> Result<BinningSpec> {
    let spec = BinningSpec::new(levels.to_vec(), extent_lo, extent_hi)?;
    spec.validate_tails()?;
    Ok(spec)
}

pub fn discretize(spec: &BinningSpec, value: f64) -> Result<BinPath> {
    spec.discretize(value)
}

pub fn interval_of(spec: &BinningSpec, path: &BinPath) -> Result<Interval> {
    spec.interval_of(path)
}

pub fn child_edges(spec: &BinningSpec, prefix: &[usize]) -> Result<Vec<f64>> {
    spec.child_edges(prefix)
}
