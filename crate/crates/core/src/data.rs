//! Series records, the JSON-lines interchange format, synthetic generators,
//! suffix splits and calendar covariates.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Frequency {
    #[serde(rename = "H")]
    Hourly,
    #[serde(rename = "D")]
    Daily,
}

impl Frequency {
    pub fn step(self) -> Duration {
        match self {
            Frequency::Hourly => Duration::hours(1),
            Frequency::Daily => Duration::days(1),
        }
    }

    /// Seasonal period used by the seasonal-naive baseline.
    pub fn season_length(self) -> usize {
        match self {
            Frequency::Hourly => 24,
            Frequency::Daily => 7,
        }
    }

    pub fn n_features(self) -> usize {
        2
    }
}

impl std::str::FromStr for Frequency {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "H" => Ok(Frequency::Hourly),
            "D" => Ok(Frequency::Daily),
            other => Err(Error::Input(format!("unknown frequency {other:?}"))),
        }
    }
}

mod timestamp {
    use chrono::{NaiveDate, NaiveDateTime};
    use serde::{Deserialize, Deserializer, Serializer};

    const FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

    pub fn parse(s: &str) -> Option<NaiveDateTime> {
        if let Ok(t) = chrono::DateTime::parse_from_rfc3339(s) {
            return Some(t.naive_utc());
        }
        for f in [FORMAT, "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
            if let Ok(t) = NaiveDateTime::parse_from_str(s, f) {
                return Some(t);
            }
        }
        NaiveDate::parse_from_str(s, "%Y-%m-%d")
            .ok()
            .and_then(|d| d.and_hms_opt(0, 0, 0))
    }

    pub fn serialize<S: Serializer>(t: &NaiveDateTime, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&t.format(FORMAT).to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveDateTime, D::Error> {
        let s = String::deserialize(d)?;
        parse(&s).ok_or_else(|| serde::de::Error::custom(format!("invalid timestamp {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub id: String,
    #[serde(with = "timestamp")]
    pub start: NaiveDateTime,
    pub freq: Frequency,
    pub values: Vec<f64>,
}

impl Series {
    pub fn new(id: impl Into<String>, start: NaiveDateTime, freq: Frequency, values: Vec<f64>) -> Result<Self> {
        let s = Series {
            id: id.into(),
            start,
            freq,
            values,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Input(format!("series {} is empty", self.id)));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("series {} has a non-finite value at {i}", self.id)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn timestamp(&self, t: usize) -> NaiveDateTime {
        self.start + self.freq.step() * t as i32
    }

    /// Row-major calendar covariates for `len` steps starting at index `from`.
    pub fn covariates(&self, from: usize, len: usize) -> Vec<f64> {
        (from..from + len)
            .flat_map(|t| time_features(self.timestamp(t), self.freq))
            .collect()
    }
}

/// Default start timestamp for generated series.
pub fn default_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2020, 1, 6)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date")
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Series>> {
    read_jsonl(BufReader::new(File::open(path)?))
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<Series>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: i + 1, msg };
        let s: Series = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        s.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, series: &[Series]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in series {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Mixture parameters for [`gen_gmm`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub std: f64,
}

impl Default for GmmParams {
    fn default() -> Self {
        GmmParams {
            weights: vec![0.3, 0.4, 0.3],
            means: vec![-3.0, 0.0, 3.0],
            std: 0.4,
        }
    }
}

impl GmmParams {
    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.len() != self.means.len() {
            return Err(Error::Config("mixture needs one mean per weight".into()));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("mixture weights must be non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        if !(self.std.is_finite() && self.std > 0.0) || self.means.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("mixture means and std must be finite, std positive".into()));
        }
        Ok(())
    }
}

fn generated(prefix: &str, n_series: usize, length: usize, seed: u64, mut draw: impl FnMut(&mut ChaCha8Rng) -> f64) -> Result<Vec<Series>> {
    if length == 0 {
        return Err(Error::Config("series length must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_series)
        .map(|i| {
            let values = (0..length).map(|_| draw(&mut rng)).collect();
            Series::new(format!("{prefix}-{i}"), default_start(), Frequency::Hourly, values)
        })
        .collect()
}

/// I.i.d. draws from a Gaussian mixture with shared standard deviation.
pub fn gen_gmm(n_series: usize, length: usize, params: &GmmParams, seed: u64) -> Result<Vec<Series>> {
    params.validate()?;
    let normal = Normal::new(0.0, params.std).map_err(|e| Error::Config(e.to_string()))?;
    let cum: Vec<f64> = params
        .weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    generated("gmm", n_series, length, seed, |rng| {
        let u: f64 = rng.random();
        let j = cum.iter().position(|&c| u < c).unwrap_or(cum.len() - 1);
        params.means[j] + normal.sample(rng)
    })
}

/// I.i.d. integers drawn uniformly from `lo..=hi`.
pub fn gen_discrete_uniform(n_series: usize, length: usize, lo: i64, hi: i64, seed: u64) -> Result<Vec<Series>> {
    if lo > hi {
        return Err(Error::Config(format!("lo {lo} exceeds hi {hi}")));
    }
    generated("discrete", n_series, length, seed, |rng| rng.random_range(lo..=hi) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub validation: usize,
    pub test: usize,
}

/// A contiguous slice of one series. `history()` exposes every earlier
/// point too, so validation and test windows can condition on them.
#[derive(Debug, Clone)]
pub struct SeriesView<'a> {
    pub series: &'a Series,
    pub range: Range<usize>,
}

impl<'a> SeriesView<'a> {
    pub fn values(&self) -> &'a [f64] {
        &self.series.values[self.range.clone()]
    }

    pub fn history(&self) -> &'a [f64] {
        &self.series.values[..self.range.end]
    }

    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Splits<'a> {
    pub train: Vec<SeriesView<'a>>,
    pub validation: Vec<SeriesView<'a>>,
    pub test: Vec<SeriesView<'a>>,
}

/// Suffix split: the last `test` points, the `validation` before them, and
/// the rest for training.
pub fn split<'a>(series: &'a [Series], cfg: &SplitConfig) -> Result<Splits<'a>> {
    let mut out = Splits {
        train: Vec::with_capacity(series.len()),
        validation: Vec::with_capacity(series.len()),
        test: Vec::with_capacity(series.len()),
    };
    for s in series {
        let n = s.len();
        if cfg.validation + cfg.test >= n {
            return Err(Error::Input(format!(
                "series {} has {n} points, too few for {} validation + {} test",
                s.id, cfg.validation, cfg.test
            )));
        }
        let a = n - cfg.validation - cfg.test;
        let b = n - cfg.test;
        out.train.push(SeriesView { series: s, range: 0..a });
        out.validation.push(SeriesView { series: s, range: a..b });
        out.test.push(SeriesView { series: s, range: b..n });
    }
    Ok(out)
}

/// Calendar covariates in `[0, 1]`: hour and weekday for hourly data,
/// weekday and day of month for daily data.
pub fn time_features(ts: NaiveDateTime, freq: Frequency) -> [f64; 2] {
    let weekday = ts.weekday().num_days_from_monday() as f64 / 6.0;
    match freq {
        Frequency::Hourly => [ts.hour() as f64 / 23.0, weekday],
        Frequency::Daily => [weekday, (ts.day() - 1) as f64 / 30.0],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn ts(y: i32, m: u32, d: u32, h: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(y, m, d).unwrap().and_hms_opt(h, 0, 0).unwrap()
    }

    #[test]
    fn parses_lines_and_reports_line_numbers() {
        let text = "{\"id\":\"a\",\"start\":\"2021-03-01 00:00:00\",\"freq\":\"H\",\"values\":[1,2.5]}\n\n\
                    {\"id\":\"b\",\"start\":\"2021-03-01\",\"freq\":\"D\",\"values\":[3]}\n";
        let s = read_jsonl(Cursor::new(text)).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].values, vec![1.0, 2.5]);
        assert_eq!(s[1].freq, Frequency::Daily);
        assert!(read_jsonl(Cursor::new("")).unwrap().is_empty());

        let bad = "{\"id\":\"a\",\"start\":\"2021-03-01\",\"freq\":\"H\",\"values\":[1]}\n{\"id\":\"b\",\"start\":\"2021-03-01\",\"freq\":\"W\",\"values\":[1]}\n";
        match read_jsonl(Cursor::new(bad)) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let broken = "not json\n";
        assert!(matches!(read_jsonl(Cursor::new(broken)), Err(Error::Parse { line: 1, .. })));
        let empty = "{\"id\":\"a\",\"start\":\"2021-03-01\",\"freq\":\"H\",\"values\":[]}\n";
        assert!(matches!(read_jsonl(Cursor::new(empty)), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let values: Vec<f64> = (0..500)
            .map(|_| rng.random::<f64>() * 10f64.powi(rng.random_range(-300..300)))
            .chain([0.1, -0.0, 1e-310, f64::MAX, 1.0 / 3.0])
            .collect();
        let s = vec![Series::new("x", ts(2022, 5, 3, 7), Frequency::Hourly, values).unwrap()];
        write_jsonl(&path, &s).unwrap();
        let back = load_jsonl(&path).unwrap();
        assert_eq!(back.len(), 1);
        for (a, b) in s[0].values.iter().zip(&back[0].values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back[0].start, s[0].start);
    }

    #[test]
    fn gmm_moments() {
        let s = gen_gmm(10, 100_000, &GmmParams::default(), 3).unwrap();
        let all: Vec<f64> = s.iter().flat_map(|s| s.values.iter().copied()).collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 4.0 * (5.56f64 / n).sqrt(), "mean {mean}");
        assert!((var / 5.56 - 1.0).abs() < 0.01, "var {var}");
        assert_eq!(gen_gmm(2, 50, &GmmParams::default(), 9).unwrap(), gen_gmm(2, 50, &GmmParams::default(), 9).unwrap());
        let bad = GmmParams {
            weights: vec![0.5, 0.4],
            means: vec![0.0, 1.0],
            std: 1.0,
        };
        assert!(gen_gmm(1, 10, &bad, 0).is_err());
    }

    #[test]
    fn discrete_uniform_frequencies() {
        let s = gen_discrete_uniform(10, 100_000, 1, 10, 4).unwrap();
        let mut counts = [0usize; 10];
        for v in s.iter().flat_map(|s| &s.values) {
            assert!(v.fract() == 0.0 && (1.0..=10.0).contains(v));
            counts[*v as usize - 1] += 1;
        }
        let n: f64 = 1e6;
        let se = (0.1 * 0.9 / n).sqrt();
        for c in counts {
            assert!((c as f64 / n - 0.1).abs() < 4.0 * se);
        }
        let c = gen_discrete_uniform(1, 20, 5, 5, 0).unwrap();
        assert!(c[0].values.iter().all(|&v| v == 5.0));
        assert!(gen_discrete_uniform(1, 20, 6, 5, 0).is_err());
    }

    #[test]
    fn suffix_splits() {
        let s = vec![Series::new("a", default_start(), Frequency::Hourly, (0..100).map(f64::from).collect()).unwrap()];
        let sp = split(&s, &SplitConfig { validation: 10, test: 10 }).unwrap();
        assert_eq!(sp.train[0].len(), 80);
        assert_eq!(sp.validation[0].values()[0], 80.0);
        assert_eq!(sp.test[0].history().len(), 100);
        let joined: Vec<f64> = [&sp.train[0], &sp.validation[0], &sp.test[0]]
            .iter()
            .flat_map(|v| v.values().iter().copied())
            .collect();
        assert_eq!(joined, s[0].values);

        let days = vec![Series::new("d", default_start(), Frequency::Hourly, vec![1.0; 26 * 24]).unwrap()];
        let sp = split(&days, &SplitConfig { validation: 72, test: 72 }).unwrap();
        assert_eq!(sp.train[0].len(), 20 * 24);

        let two = split(&s, &SplitConfig { validation: 0, test: 10 }).unwrap();
        assert!(two.validation[0].is_empty());
        assert!(split(&s, &SplitConfig { validation: 50, test: 50 }).is_err());
    }

    #[test]
    fn calendar_features() {
        // 2024-01-01 is a Monday.
        assert_eq!(time_features(ts(2024, 1, 1, 0), Frequency::Hourly), [0.0, 0.0]);
        assert_eq!(time_features(ts(2024, 1, 1, 23), Frequency::Hourly)[0], 1.0);
        assert_eq!(time_features(ts(2024, 1, 7, 5), Frequency::Daily), [1.0, 6.0 / 30.0]);
        assert_eq!(time_features(ts(2024, 1, 31, 0), Frequency::Daily)[1], 1.0);
        let s = Series::new("a", ts(2024, 1, 1, 22), Frequency::Hourly, vec![0.0; 5]).unwrap();
        let c = s.covariates(1, 3);
        assert_eq!(c.len(), 6);
        assert_eq!(&c[..2], &[1.0, 0.0]);
        assert_eq!(&c[2..4], &[0.0, 1.0 / 6.0]);
    }
}
