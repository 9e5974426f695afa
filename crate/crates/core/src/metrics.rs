//! Forecast accuracy metrics pooled over all (series, time) points:
//! pinball and quantile loss, wQL, ND, interval coverage and sharpness,
//! and teacher-forced NLL.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{Learned, SeriesWindow};

/// Quantiles averaged by wQL.
pub const WQL_QUANTILES: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Default interval bands: Cov80 and Cov99.
pub const DEFAULT_BANDS: [(f64, f64); 2] = [(0.1, 0.9), (0.005, 0.995)];

const Q_TOL: f64 = 1e-9;

pub fn pinball(alpha: f64, q: f64, z: f64) -> f64 {
    let ind = if z < q { 1.0 } else { 0.0 };
    (alpha - ind) * (z - q)
}

fn abs_sum(truths: &[f64]) -> Result<f64> {
    let s: f64 = truths.iter().map(|z| z.abs()).sum();
    if s > 0.0 && s.is_finite() {
        Ok(s)
    } else {
        Err(Error::Metric("sum of absolute truths is zero".into()))
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::Input(format!("{} forecasts for {} truths", a.len(), b.len())))
    }
}

pub fn quantile_loss(alpha: f64, forecasts: &[f64], truths: &[f64]) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Input(format!("quantile level {alpha} not in (0, 1)")));
    }
    same_len(forecasts, truths)?;
    let denom = abs_sum(truths)?;
    let num: f64 = forecasts.iter().zip(truths).map(|(&q, &z)| 2.0 * pinball(alpha, q, z)).sum();
    Ok(num / denom)
}

pub fn nd(forecasts: &[f64], truths: &[f64]) -> Result<f64> {
    same_len(forecasts, truths)?;
    let denom = abs_sum(truths)?;
    let num: f64 = forecasts.iter().zip(truths).map(|(f, z)| (z - f).abs()).sum();
    Ok(num / denom)
}

/// Quantile forecasts for a pooled set of points, one vector per level.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuantileForecasts {
    pub quantiles: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl QuantileForecasts {
    pub fn new(quantiles: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if quantiles.len() != values.len() {
            return Err(Error::Input("one value vector per quantile required".into()));
        }
        if let Some(first) = values.first() {
            if values.iter().any(|v| v.len() != first.len()) {
                return Err(Error::Input("quantile vectors differ in length".into()));
            }
        }
        Ok(QuantileForecasts { quantiles, values })
    }

    /// Every quantile equal to the point forecast.
    pub fn degenerate(quantiles: &[f64], point: &[f64]) -> Self {
        QuantileForecasts {
            quantiles: quantiles.to_vec(),
            values: vec![point.to_vec(); quantiles.len()],
        }
    }

    pub fn n_points(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn has(&self, q: f64) -> bool {
        self.quantiles.iter().any(|&x| (x - q).abs() < Q_TOL)
    }

    pub fn get(&self, q: f64) -> Result<&[f64]> {
        self.quantiles
            .iter()
            .position(|&x| (x - q).abs() < Q_TOL)
            .map(|i| self.values[i].as_slice())
            .ok_or_else(|| Error::Input(format!("quantile {q} missing from forecasts")))
    }

    /// Appends points from another set with identical quantile levels.
    pub fn extend(&mut self, other: &QuantileForecasts) -> Result<()> {
        if self.quantiles.is_empty() && self.values.is_empty() {
            *self = other.clone();
            return Ok(());
        }
        if self.quantiles.len() != other.quantiles.len()
            || self.quantiles.iter().zip(&other.quantiles).any(|(a, b)| (a - b).abs() > Q_TOL)
        {
            return Err(Error::Input("quantile levels differ".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.extend_from_slice(b);
        }
        Ok(())
    }

    fn select(&self, idx: &[usize]) -> QuantileForecasts {
        QuantileForecasts {
            quantiles: self.quantiles.clone(),
            values: self.values.iter().map(|v| idx.iter().map(|&i| v[i]).collect()).collect(),
        }
    }
}

/// Mean of the nine quantile losses at 0.1, ..., 0.9.
pub fn wql(forecasts: &QuantileForecasts, truths: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for q in WQL_QUANTILES {
        total += quantile_loss(q, forecasts.get(q)?, truths)?;
    }
    Ok(total / WQL_QUANTILES.len() as f64)
}

/// Fraction of truths with `lower < z <= upper`, and total band width over
/// the absolute truth sum.
pub fn coverage_sharpness(forecasts: &QuantileForecasts, truths: &[f64], q_l: f64, q_u: f64) -> Result<(f64, f64)> {
    if q_l >= q_u {
        return Err(Error::Input(format!("band ({q_l}, {q_u}) is empty")));
    }
    let lo = forecasts.get(q_l)?;
    let hi = forecasts.get(q_u)?;
    same_len(lo, truths)?;
    if truths.is_empty() {
        return Err(Error::Metric("no points to cover".into()));
    }
    let denom = abs_sum(truths)?;
    let mut inside = 0usize;
    let mut width = 0.0;
    for ((&l, &u), &z) in lo.iter().zip(hi).zip(truths) {
        if l < z && z <= u {
            inside += 1;
        }
        width += (u - l).abs();
    }
    Ok((inside as f64 / truths.len() as f64, width / denom))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandMetrics {
    pub q_l: f64,
    pub q_u: f64,
    pub coverage: f64,
    pub sharpness: f64,
}

impl BandMetrics {
    /// Nominal coverage as a percentage label, e.g. 80 for (0.1, 0.9).
    pub fn label(&self) -> String {
        format!("{}", ((self.q_u - self.q_l) * 100.0).round())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeMetrics {
    pub nd: f64,
    pub wql: f64,
    pub ql: Vec<(f64, f64)>,
    pub bands: Vec<BandMetrics>,
    pub n_points: usize,
}

impl ScopeMetrics {
    pub fn compute(forecasts: &QuantileForecasts, truths: &[f64], bands: &[(f64, f64)]) -> Result<Self> {
        let ql = WQL_QUANTILES
            .iter()
            .map(|&q| Ok((q, quantile_loss(q, forecasts.get(q)?, truths)?)))
            .collect::<Result<Vec<_>>>()?;
        let wql = ql.iter().map(|(_, v)| v).sum::<f64>() / ql.len() as f64;
        let nd = nd(forecasts.get(0.5)?, truths)?;
        let bands = bands
            .iter()
            .filter(|&&(l, u)| forecasts.has(l) && forecasts.has(u))
            .map(|&(l, u)| {
                let (coverage, sharpness) = coverage_sharpness(forecasts, truths, l, u)?;
                Ok(BandMetrics {
                    q_l: l,
                    q_u: u,
                    coverage,
                    sharpness,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ScopeMetrics {
            nd,
            wql,
            ql,
            bands,
            n_points: truths.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub overall: ScopeMetrics,
    /// `(horizon, metrics)` with 1-based horizons.
    pub per_horizon: Vec<(usize, ScopeMetrics)>,
    pub nll: Option<f64>,
}

impl MetricReport {
    /// Overall metrics plus a breakdown by the 1-based horizon of each point.
    pub fn compute(forecasts: &QuantileForecasts, truths: &[f64], horizons: Option<&[usize]>, bands: &[(f64, f64)]) -> Result<Self> {
        same_len(&vec![0.0; forecasts.n_points()], truths)?;
        let overall = ScopeMetrics::compute(forecasts, truths, bands)?;
        let mut per_horizon = Vec::new();
        if let Some(hs) = horizons {
            if hs.len() != truths.len() {
                return Err(Error::Input("one horizon per point required".into()));
            }
            let max_h = hs.iter().copied().max().unwrap_or(0);
            for h in 1..=max_h {
                let idx: Vec<usize> = (0..hs.len()).filter(|&i| hs[i] == h).collect();
                if idx.is_empty() {
                    continue;
                }
                let t: Vec<f64> = idx.iter().map(|&i| truths[i]).collect();
                per_horizon.push((h, ScopeMetrics::compute(&forecasts.select(&idx), &t, bands)?));
            }
        }
        Ok(MetricReport {
            overall,
            per_horizon,
            nll: None,
        })
    }

    /// CSV with columns `metric,scope,horizon,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,scope,horizon,value\n");
        let mut scope = |m: &ScopeMetrics, name: &str, h: String| {
            let _ = writeln!(out, "nd,{name},{h},{}", m.nd);
            let _ = writeln!(out, "wql,{name},{h},{}", m.wql);
            for (q, v) in &m.ql {
                let _ = writeln!(out, "ql{q},{name},{h},{v}");
            }
            for b in &m.bands {
                let _ = writeln!(out, "cov{},{name},{h},{}", b.label(), b.coverage);
                let _ = writeln!(out, "sharp{},{name},{h},{}", b.label(), b.sharpness);
            }
        };
        scope(&self.overall, "overall", String::new());
        for (h, m) in &self.per_horizon {
            scope(m, "horizon", h.to_string());
        }
        if let Some(nll) = self.nll {
            let _ = writeln!(out, "nll,overall,,{nll}");
        }
        out
    }
}

/// Teacher-forced mean NLL per prediction point in the normalized domain,
/// pooled over all windows.
pub fn nll_eval(model: &Learned, windows: &[SeriesWindow]) -> Result<f64> {
    const CHUNK: usize = 256;
    let seqs = windows.iter().map(|w| w.to_sequence()).collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut points = 0usize;
    for chunk in seqs.chunks(CHUNK) {
        let refs: Vec<_> = chunk.iter().collect();
        let n: usize = chunk.iter().map(|s| s.pred_len()).sum();
        total += model.nll(&refs)? * n as f64;
        points += n;
    }
    if points == 0 {
        return Err(Error::Metric("no prediction points to score".into()));
    }
    Ok(total / points as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinball_examples() {
        assert!((pinball(0.9, 5.0, 10.0) - 4.5).abs() < 1e-12);
        assert!((pinball(0.9, 5.0, 3.0) - 0.2).abs() < 1e-12);
        for a in [0.1, 0.5, 0.77] {
            assert_eq!(pinball(a, 2.0, 2.0), 0.0);
        }
    }

    #[test]
    fn quantile_loss_cases() {
        let t = [3.0, -1.0, 7.0];
        assert_eq!(quantile_loss(0.3, &t, &t).unwrap(), 0.0);
        let single = quantile_loss(0.5, &[8.0], &[10.0]).unwrap();
        assert!((single - 0.2).abs() < 1e-12);
        let f = [2.0, 0.5, 9.0];
        let a = quantile_loss(0.8, &f, &t).unwrap();
        let scaled_f: Vec<f64> = f.iter().map(|x| x * 3.5).collect();
        let scaled_t: Vec<f64> = t.iter().map(|x| x * 3.5).collect();
        assert!((a - quantile_loss(0.8, &scaled_f, &scaled_t).unwrap()).abs() < 1e-12);
        assert!(matches!(quantile_loss(0.5, &[1.0], &[0.0]), Err(Error::Metric(_))));
        assert!(quantile_loss(0.0, &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn nd_cases() {
        assert!((nd(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(nd(&[4.0, -2.0], &[4.0, -2.0]).unwrap(), 0.0);
        assert!(nd(&[1.0], &[0.0]).is_err());
        assert!(nd(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn wql_identities() {
        let truths = [1.0, 5.0, -2.0, 8.0, 0.5];
        let point = [1.5, 4.0, -1.0, 9.0, 0.0];
        let grid = QuantileForecasts::degenerate(&WQL_QUANTILES, &point);
        let w = wql(&grid, &truths).unwrap();
        assert!((w - nd(&point, &truths).unwrap()).abs() < 1e-12);

        let exact = QuantileForecasts::degenerate(&WQL_QUANTILES, &truths);
        assert_eq!(wql(&exact, &truths).unwrap(), 0.0);

        // from raw pinball terms
        let values: Vec<Vec<f64>> = WQL_QUANTILES
            .iter()
            .map(|q| point.iter().map(|p| p + (q - 0.5) * 3.0).collect())
            .collect();
        let qf = QuantileForecasts::new(WQL_QUANTILES.to_vec(), values.clone()).unwrap();
        let denom: f64 = truths.iter().map(|z: &f64| z.abs()).sum();
        let mut manual = 0.0;
        for (q, v) in WQL_QUANTILES.iter().zip(&values) {
            let s: f64 = v.iter().zip(&truths).map(|(&f, &z)| 2.0 * pinball(*q, f, z)).sum();
            manual += s / denom;
        }
        manual /= 9.0;
        assert!((wql(&qf, &truths).unwrap() - manual).abs() < 1e-12);

        let missing = QuantileForecasts::degenerate(&[0.1, 0.5, 0.9], &point);
        assert!(matches!(wql(&missing, &truths), Err(Error::Input(_))));
    }

    #[test]
    fn coverage_and_sharpness() {
        let truths = [1.0, 2.0, 3.0, 4.0];
        let inside = QuantileForecasts::new(
            vec![0.1, 0.9],
            vec![truths.iter().map(|z| z - 0.5).collect(), truths.iter().map(|z| z + 0.5).collect()],
        )
        .unwrap();
        let (c, s) = coverage_sharpness(&inside, &truths, 0.1, 0.9).unwrap();
        assert_eq!(c, 1.0);
        assert!((s - 4.0 * 1.0 / 10.0).abs() < 1e-12);

        let zero = QuantileForecasts::degenerate(&[0.1, 0.9], &truths);
        assert_eq!(coverage_sharpness(&zero, &truths, 0.1, 0.9).unwrap(), (0.0, 0.0));
        assert!(coverage_sharpness(&zero, &truths, 0.005, 0.995).is_err());
        assert!(coverage_sharpness(&zero, &truths, 0.9, 0.1).is_err());
    }

    #[test]
    fn report_and_csv() {
        let truths = [2.0, 4.0, 6.0, 8.0];
        let point = [2.0, 5.0, 6.0, 6.0];
        let mut q = WQL_QUANTILES.to_vec();
        q.extend([0.005, 0.995]);
        let grid = QuantileForecasts::degenerate(&q, &point);
        let r = MetricReport::compute(&grid, &truths, Some(&[1, 2, 1, 2]), &DEFAULT_BANDS).unwrap();
        assert!((r.overall.nd - 3.0 / 20.0).abs() < 1e-15);
        assert!((r.overall.nd - r.overall.wql).abs() < 1e-12);
        assert_eq!(r.per_horizon.len(), 2);
        assert!((r.per_horizon[1].1.nd - 3.0 / 12.0).abs() < 1e-15);
        assert_eq!(r.overall.bands.len(), 2);
        let csv = r.to_csv();
        assert!(csv.starts_with("metric,scope,horizon,value\n"));
        assert!(csv.contains("cov80,overall,,0"));
        assert!(csv.contains("cov99,horizon,2,0"));
        assert!(csv.contains("nd,horizon,1,0"));
    }
}
