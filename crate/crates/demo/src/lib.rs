//! Browser bindings for a handful of c2far primitives: the hierarchical
//! density on a grid, a sampling histogram, and the pinball loss.
//!
//! The density used here is synthetic. Every conditional puts weight on
//! child bins according to a two-bump target shape, so the page can show how
//! the binning resolves it without shipping a trained model.

use c2far::dist::{C2farDensity, FnConditionals, TailShapes};
use c2far::hbin::BinningSpec;
use c2far::metrics::{nd, pinball, wql, QuantileForecasts, WQL_QUANTILES};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Parameters of the synthetic target shape, in the normalized domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub peak: f64,
    pub width: f64,
}

fn bump(x: f64, s: Shape) -> f64 {
    let a = ((x - s.peak) / s.width).powi(2);
    let b = ((x - (1.0 - s.peak)) / (2.0 * s.width)).powi(2);
    (-0.5 * a).exp() + 0.5 * (-0.5 * b).exp() + 1e-3
}

fn conditionals(spec: &BinningSpec, shape: Shape) -> impl Fn(&[usize]) -> Vec<f64> + '_ {
    move |prefix: &[usize]| {
        let edges = spec.child_edges(prefix).expect("valid prefix");
        let (lo, hi) = spec.extent();
        let w: Vec<f64> = edges
            .windows(2)
            .map(|e| {
                // Open-ended children take their mass from just beyond the extent.
                let a = if e[0].is_finite() { e[0] } else { lo - 0.05 };
                let b = if e[1].is_finite() { e[1] } else { hi + 0.05 };
                bump(0.5 * (a + b), shape) * (b - a)
            })
            .collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    }
}

fn spec_of(bins: &[u32]) -> Result<BinningSpec, String> {
    let spec = BinningSpec::new(bins.iter().map(|&b| b as usize).collect(), -0.01, 1.01).map_err(|e| e.to_string())?;
    spec.validate_tails().map_err(|e| e.to_string())?;
    Ok(spec)
}

/// PDF values followed by CDF values on `n` evenly spaced points of `[lo, hi]`.
pub fn density(bins: &[u32], shape: Shape, alpha: f64, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>, String> {
    let spec = spec_of(bins)?;
    if !(lo < hi) || n < 2 {
        return Err("grid needs lo < hi and at least two points".into());
    }
    let cond = FnConditionals(conditionals(&spec, shape));
    let tails = TailShapes::new(alpha, alpha).map_err(|e| e.to_string())?;
    let d = C2farDensity::new(&spec, &cond, tails);
    let grid = c2far::dist::linspace(lo, hi, n);
    let mut out = d.pdf_grid(&grid).map_err(|e| e.to_string())?;
    out.extend(d.cdf_grid(&grid).map_err(|e| e.to_string())?);
    Ok(out)
}

/// Histogram of `samples` draws as densities over `cells` equal cells of
/// `[lo, hi]`, followed by the fraction of draws outside the range.
pub fn histogram(bins: &[u32], shape: Shape, alpha: f64, samples: usize, seed: u64, lo: f64, hi: f64, cells: usize) -> Result<Vec<f64>, String> {
    let spec = spec_of(bins)?;
    if !(lo < hi) || cells == 0 || samples == 0 {
        return Err("histogram needs lo < hi, cells and samples".into());
    }
    let cond = FnConditionals(conditionals(&spec, shape));
    let tails = TailShapes::new(alpha, alpha).map_err(|e| e.to_string())?;
    let d = C2farDensity::new(&spec, &cond, tails);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = (hi - lo) / cells as f64;
    let mut counts = vec![0.0; cells + 1];
    for _ in 0..samples {
        let (_, v) = d.sample(&mut rng);
        let k = ((v - lo) / width).floor();
        if k >= 0.0 && (k as usize) < cells {
            counts[k as usize] += 1.0;
        } else {
            counts[cells] += 1.0;
        }
    }
    let n = samples as f64;
    for c in &mut counts[..cells] {
        *c /= n * width;
    }
    counts[cells] /= n;
    Ok(counts)
}

/// Pinball loss of forecast `q` against truth `z`, for `n` values of `q` on `[lo, hi]`.
pub fn pinball_curve(alpha: f64, z: f64, lo: f64, hi: f64, n: usize) -> Vec<f64> {
    c2far::dist::linspace(lo, hi, n).into_iter().map(|q| pinball(alpha, q, z)).collect()
}

/// `[nd, wql]` of a point forecast repeated as every quantile.
pub fn point_scores(forecasts: &[f64], truths: &[f64]) -> Result<Vec<f64>, String> {
    let grid = QuantileForecasts::degenerate(&WQL_QUANTILES, forecasts);
    let nd = nd(forecasts, truths).map_err(|e| e.to_string())?;
    let wql = wql(&grid, truths).map_err(|e| e.to_string())?;
    Ok(vec![nd, wql])
}

#[wasm_bindgen(js_name = density)]
pub fn density_js(bins: &[u32], peak: f64, width: f64, alpha: f64, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>, JsValue> {
    density(bins, Shape { peak, width }, alpha, lo, hi, n).map_err(|e| JsValue::from_str(&e))
}

#[allow(clippy::too_many_arguments)]
#[wasm_bindgen(js_name = histogram)]
pub fn histogram_js(bins: &[u32], peak: f64, width: f64, alpha: f64, samples: usize, seed: u32, lo: f64, hi: f64, cells: usize) -> Result<Vec<f64>, JsValue> {
    histogram(bins, Shape { peak, width }, alpha, samples, seed as u64, lo, hi, cells).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = pinballCurve)]
pub fn pinball_curve_js(alpha: f64, z: f64, lo: f64, hi: f64, n: usize) -> Vec<f64> {
    pinball_curve(alpha, z, lo, hi, n)
}

#[wasm_bindgen(js_name = pointScores)]
pub fn point_scores_js(forecasts: &[f64], truths: &[f64]) -> Result<Vec<f64>, JsValue> {
    point_scores(forecasts, truths).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SHAPE: Shape = Shape { peak: 0.3, width: 0.08 };

    #[test]
    fn density_integrates_to_cdf() {
        let n = 4001;
        let v = density(&[10, 10], SHAPE, 3.0, -0.5, 1.5, n).unwrap();
        let (pdf, cdf) = v.split_at(n);
        let h = 2.0 / (n - 1) as f64;
        let area: f64 = pdf.windows(2).map(|w| 0.5 * (w[0] + w[1]) * h).sum();
        assert!((area - (cdf[n - 1] - cdf[0])).abs() < 5e-3);
        assert!(cdf.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn histogram_tracks_density() {
        let cells = 20;
        let h = histogram(&[8, 8], SHAPE, 3.0, 200_000, 1, 0.0, 1.0, cells).unwrap();
        let v = density(&[8, 8], SHAPE, 3.0, 0.0, 1.0, cells + 1).unwrap();
        let cdf = &v[cells + 1..];
        for k in 0..cells {
            let expect = (cdf[k + 1] - cdf[k]) * cells as f64;
            assert!((h[k] - expect).abs() < 0.1, "cell {k}: {} vs {expect}", h[k]);
        }
        let outside = 1.0 - (cdf[cells] - cdf[0]);
        assert!((h[cells] - outside).abs() < 0.01);
    }

    #[test]
    fn pinball_and_scores() {
        let c = pinball_curve(0.9, 10.0, 5.0, 15.0, 3);
        assert!((c[0] - 4.5).abs() < 1e-12);
        assert_eq!(c[1], 0.0);
        let s = point_scores(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-12 && (s[1] - 0.5).abs() < 1e-12);
        assert!(point_scores(&[1.0], &[0.0]).is_err());
        assert!(density(&[1], SHAPE, 2.0, 0.0, 1.0, 5).is_err());
    }
}
