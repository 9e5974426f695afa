//! Non-learned reference forecasters. Both return degenerate grids in which
//! every quantile equals the point forecast.

use crate::error::{Error, Result};
use crate::pipeline::{ForecastGrid, SeriesWindow};

pub fn naive_forecast(window: &SeriesWindow, n: usize, quantiles: &[f64]) -> Result<ForecastGrid> {
    let last = *window
        .cond
        .last()
        .ok_or_else(|| Error::Input("empty conditioning range".into()))?;
    Ok(ForecastGrid::degenerate(quantiles, &vec![last; n]))
}

/// Horizon `h` (1-based) repeats the value `season * ceil(h / season)` steps
/// before `T + h`.
pub fn seasonal_naive_forecast(window: &SeriesWindow, n: usize, season: usize, quantiles: &[f64]) -> Result<ForecastGrid> {
    let t = window.cond.len();
    if season == 0 {
        return Err(Error::Input("season length must be positive".into()));
    }
    if t < season {
        return Err(Error::Input(format!("conditioning length {t} shorter than season {season}")));
    }
    let point: Vec<f64> = (1..=n)
        .map(|h| {
            let lag = season * h.div_ceil(season);
            window.cond[t + h - lag - 1]
        })
        .collect();
    Ok(ForecastGrid::degenerate(quantiles, &point))
}
