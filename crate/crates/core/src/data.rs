//! Core domain types: count and forcing fields, the time axis, anomaly
//! computation, and the response-to-forcing alignment rule.
//!
//! Counts live on a coarse time grid (e.g. yearly survey periods) while the
//! forcing field is sampled on a finer grid (e.g. monthly). [`AlignmentSpec`]
//! maps a response period to the forcing index that serves as the initial
//! condition for its forecast, lagged `tau` forcing periods back.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A calendar stamp with month granularity, stored as months since year 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TimeStamp(pub i64);

impl TimeStamp {
    pub fn from_year_month(year: i64, month: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::Domain(format!("month {month} outside 1..=12")));
        }
        Ok(TimeStamp(year * 12 + (month as i64 - 1)))
    }

    pub fn year(&self) -> i64 {
        self.0.div_euclid(12)
    }

    /// Month of year, 1..=12.
    pub fn month(&self) -> u32 {
        (self.0.rem_euclid(12) + 1) as u32
    }

    /// Month-of-year class used for climatology grouping (0..12).
    pub fn month_class(&self) -> usize {
        self.0.rem_euclid(12) as usize
    }

    pub fn plus_months(&self, months: i64) -> TimeStamp {
        TimeStamp(self.0 + months)
    }

    /// Parse `YYYY-MM` (or bare `YYYY`, meaning January).
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Domain(format!("cannot parse time stamp `{s}` (expected YYYY-MM)"));
        match s.split_once('-') {
            Some((y, m)) => {
                let year: i64 = y.trim().parse().map_err(|_| bad())?;
                let month: u32 = m.trim().parse().map_err(|_| bad())?;
                TimeStamp::from_year_month(year, month)
            }
            None => {
                let year: i64 = s.trim().parse().map_err(|_| bad())?;
                TimeStamp::from_year_month(year, 1)
            }
        }
    }
}

impl std::fmt::Display for TimeStamp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:04}-{:02}", self.year(), self.month())
    }
}

/// Evenly spaced time grid: a first stamp, a step in months, and a length.
///
/// Even spacing holds by construction, which is exactly the field invariant
/// the loaders must guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeAxis {
    pub first: TimeStamp,
    pub step_months: u32,
    pub len: usize,
}

impl TimeAxis {
    pub fn new(first: TimeStamp, step_months: u32, len: usize) -> Result<Self> {
        if step_months == 0 {
            return Err(Error::Domain("time step must be >= 1 month".into()));
        }
        if len == 0 {
            return Err(Error::Domain("time axis must have at least one stamp".into()));
        }
        Ok(TimeAxis { first, step_months, len })
    }

    /// Stamp at index `i`; indices at or beyond `len` extrapolate the grid,
    /// which is how forecast targets past the record end get their stamp.
    pub fn stamp(&self, i: usize) -> TimeStamp {
        self.first.plus_months(i as i64 * self.step_months as i64)
    }

    pub fn last(&self) -> TimeStamp {
        self.stamp(self.len - 1)
    }

    /// Index of `stamp` on the grid, if it falls on it within range.
    pub fn index_of(&self, stamp: TimeStamp) -> Option<usize> {
        let offset = stamp.0 - self.first.0;
        let step = self.step_months as i64;
        if offset < 0 || offset % step != 0 {
            return None;
        }
        let idx = (offset / step) as usize;
        (idx < self.len).then_some(idx)
    }

    pub fn iter(&self) -> impl Iterator<Item = TimeStamp> + '_ {
        (0..self.len).map(|i| self.stamp(i))
    }

    /// Index of the first year equal to `year`, if present.
    pub fn index_of_year(&self, year: i64) -> Option<usize> {
        (0..self.len).find(|&i| self.stamp(i).year() == year)
    }
}

/// Spatial location metadata carried alongside each matrix row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub id: String,
    pub lon: f64,
    pub lat: f64,
}

/// Count-valued response field: `counts[(i, t)]` is the count at location
/// `i` during response period `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CountField {
    pub counts: DMatrix<u64>,
    pub locations: Vec<Location>,
    pub times: TimeAxis,
}

impl CountField {
    pub fn new(counts: DMatrix<u64>, locations: Vec<Location>, times: TimeAxis) -> Result<Self> {
        if counts.nrows() != locations.len() {
            return Err(Error::Dimension(format!(
                "{} count rows but {} locations",
                counts.nrows(),
                locations.len()
            )));
        }
        if counts.ncols() != times.len {
            return Err(Error::Dimension(format!(
                "{} count columns but {} time stamps",
                counts.ncols(),
                times.len
            )));
        }
        if counts.nrows() == 0 || counts.ncols() == 0 {
            return Err(Error::Dimension("count field must be non-empty".into()));
        }
        Ok(CountField { counts, locations, times })
    }

    pub fn n_locations(&self) -> usize {
        self.counts.nrows()
    }

    pub fn n_periods(&self) -> usize {
        self.counts.ncols()
    }

    /// Counts as a float matrix, the form the factorization consumes.
    pub fn to_f64(&self) -> DMatrix<f64> {
        self.counts.map(|v| v as f64)
    }

    /// Restrict to the first `n_periods` periods.
    pub fn truncate_periods(&self, n_periods: usize) -> Result<CountField> {
        if n_periods == 0 || n_periods > self.n_periods() {
            return Err(Error::Dimension(format!(
                "cannot truncate {}-period field to {n_periods} periods",
                self.n_periods()
            )));
        }
        CountField::new(
            self.counts.columns(0, n_periods).into_owned(),
            self.locations.clone(),
            TimeAxis::new(self.times.first, self.times.step_months, n_periods)?,
        )
    }

    /// One period as a count vector.
    pub fn period(&self, t: usize) -> Vec<u64> {
        self.counts.column(t).iter().copied().collect()
    }
}

/// Real-valued forcing (predictor) field on its own, typically finer, grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcingField {
    pub values: DMatrix<f64>,
    pub locations: Vec<Location>,
    pub times: TimeAxis,
}

impl ForcingField {
    pub fn new(values: DMatrix<f64>, locations: Vec<Location>, times: TimeAxis) -> Result<Self> {
        if values.nrows() != locations.len() {
            return Err(Error::Dimension(format!(
                "{} forcing rows but {} locations",
                values.nrows(),
                locations.len()
            )));
        }
        if values.ncols() != times.len {
            return Err(Error::Dimension(format!(
                "{} forcing columns but {} time stamps",
                values.ncols(),
                times.len
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("forcing field contains non-finite values".into()));
        }
        Ok(ForcingField { values, locations, times })
    }

    pub fn n_locations(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_periods(&self) -> usize {
        self.values.ncols()
    }

    /// Number of forcing steps per response step. Errors unless the response
    /// step is an exact positive multiple of the forcing step.
    pub fn periods_per_response(&self, response: &TimeAxis) -> Result<u32> {
        let fs = self.times.step_months;
        let rs = response.step_months;
        if rs % fs != 0 {
            return Err(Error::Dimension(format!(
                "response step of {rs} months is not a multiple of forcing step {fs}"
            )));
        }
        Ok(rs / fs)
    }
}

/// Subtract location-specific month-of-year means computed over a reference
/// window, the standard anomaly construction for climate fields.
///
/// The window `[ref_start, ref_end]` (inclusive) must lie inside the record
/// and cover every month-of-year class that occurs in the data, i.e. span at
/// least one full seasonal cycle.
pub fn anomalize(f: &ForcingField, ref_start: TimeStamp, ref_end: TimeStamp) -> Result<ForcingField> {
    if ref_start > ref_end {
        return Err(Error::Domain(format!(
            "reference window start {ref_start} is after end {ref_end}"
        )));
    }
    if ref_start < f.times.first || ref_end > f.times.last() {
        return Err(Error::Domain(format!(
            "reference window {ref_start}..{ref_end} outside record {}..{}",
            f.times.first,
            f.times.last()
        )));
    }

    let window: Vec<usize> = (0..f.times.len)
        .filter(|&i| {
            let s = f.times.stamp(i);
            s >= ref_start && s <= ref_end
        })
        .collect();

    // Per month-of-year class, the window columns contributing to the mean.
    let mut class_cols: [Vec<usize>; 12] = Default::default();
    for &i in &window {
        class_cols[f.times.stamp(i).month_class()].push(i);
    }
    for i in 0..f.times.len {
        let class = f.times.stamp(i).month_class();
        if class_cols[class].is_empty() {
            return Err(Error::Domain(format!(
                "reference window {ref_start}..{ref_end} has no {:02}-month stamps; \
                 it must span a full seasonal cycle",
                class + 1
            )));
        }
    }

    let n = f.n_locations();
    let mut out = f.values.clone();
    for class in 0..12 {
        let cols = &class_cols[class];
        if cols.is_empty() {
            continue;
        }
        let mut mean = vec![0.0; n];
        for &c in cols {
            for r in 0..n {
                mean[r] += f.values[(r, c)];
            }
        }
        let denom = cols.len() as f64;
        for m in &mut mean {
            *m /= denom;
        }
        for c in 0..f.times.len {
            if f.times.stamp(c).month_class() == class {
                for r in 0..n {
                    out[(r, c)] -= mean[r];
                }
            }
        }
    }

    ForcingField::new(out, f.locations.clone(), f.times)
}

/// How a response stamp maps onto the forcing grid before the `tau` lag is
/// applied. `SameStamp` reads the forcing at the response's own calendar
/// stamp; `OffsetForcingPeriods` shifts that base by a fixed number of
/// forcing periods first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Anchor {
    SameStamp,
    OffsetForcingPeriods(i64),
}

impl Default for Anchor {
    fn default() -> Self {
        Anchor::SameStamp
    }
}

/// Forecast lead and anchor rule tying response periods to forcing indices.
///
/// `tau` counts forcing periods: with yearly May counts, monthly forcing and
/// `tau = 12`, the initial condition for the May-of-year-Y response is May of
/// year Y-1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentSpec {
    pub tau: u32,
    pub anchor: Anchor,
}

impl AlignmentSpec {
    pub fn new(tau: u32) -> Self {
        AlignmentSpec { tau, anchor: Anchor::SameStamp }
    }

    /// Forcing index serving as the initial condition for response index `t`.
    ///
    /// `t` may equal the response length (one step past the record), which is
    /// the out-of-sample forecast target.
    pub fn align(&self, t: usize, response: &TimeAxis, forcing: &TimeAxis) -> Result<usize> {
        if t > response.len {
            return Err(Error::Domain(format!(
                "response index {t} beyond forecast horizon {}",
                response.len
            )));
        }
        let response_stamp = response.stamp(t);
        let step = forcing.step_months as i64;
        let base = match self.anchor {
            Anchor::SameStamp => response_stamp,
            Anchor::OffsetForcingPeriods(k) => response_stamp.plus_months(k * step),
        };
        let target = base.plus_months(-(self.tau as i64) * step);
        let offset = target.0 - forcing.first.0;
        if offset < 0 {
            return Err(Error::InsufficientHistory(format!(
                "response index {t} needs forcing at {target}, before the record start {}",
                forcing.first
            )));
        }
        if offset % step != 0 {
            return Err(Error::Domain(format!(
                "aligned stamp {target} does not fall on the forcing grid"
            )));
        }
        let idx = (offset / step) as usize;
        if idx >= forcing.len {
            return Err(Error::Domain(format!(
                "aligned stamp {target} past the forcing record end {}",
                forcing.last()
            )));
        }
        Ok(idx)
    }
}

/// Alignment spec bundled with the two time axes it maps between; the form
/// the analog machinery consumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeAlignment {
    pub spec: AlignmentSpec,
    pub response: TimeAxis,
    pub forcing: TimeAxis,
}

impl TimeAlignment {
    pub fn align(&self, t: usize) -> Result<usize> {
        self.spec.align(t, &self.response, &self.forcing)
    }

    /// Number of training response periods.
    pub fn n_response(&self) -> usize {
        self.response.len
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis(first: &str, step: u32, len: usize) -> TimeAxis {
        TimeAxis::new(TimeStamp::parse(first).unwrap(), step, len).unwrap()
    }

    fn locs(n: usize) -> Vec<Location> {
        (0..n)
            .map(|i| Location { id: format!("s{i}"), lon: i as f64, lat: -(i as f64) })
            .collect()
    }

    #[test]
    fn stamp_parse_and_display() {
        let s = TimeStamp::parse("1970-05").unwrap();
        assert_eq!(s.year(), 1970);
        assert_eq!(s.month(), 5);
        assert_eq!(s.to_string(), "1970-05");
        assert_eq!(TimeStamp::parse("1970").unwrap().month(), 1);
        assert!(TimeStamp::parse("1970-13").is_err());
        assert!(TimeStamp::parse("May-1970").is_err());
    }

    #[test]
    fn axis_indexing_round_trips() {
        let ax = axis("1970-05", 12, 45);
        assert_eq!(ax.last(), TimeStamp::parse("2014-05").unwrap());
        for i in 0..ax.len {
            assert_eq!(ax.index_of(ax.stamp(i)), Some(i));
        }
        assert_eq!(ax.index_of(TimeStamp::parse("1970-06").unwrap()), None);
        assert_eq!(ax.index_of(TimeStamp::parse("1969-05").unwrap()), None);
        assert_eq!(ax.index_of_year(1999), Some(29));
    }

    #[test]
    fn anomalize_constant_field_is_zero() {
        let ax = axis("1970-01", 1, 48);
        let vals = DMatrix::from_element(2, 48, 3.25);
        let f = ForcingField::new(vals, locs(2), ax).unwrap();
        let a = anomalize(&f, ax.first, ax.last()).unwrap();
        assert!(a.values.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn anomalize_removes_pure_climatology() {
        // Value = month index repeated every year: anomalies vanish.
        let ax = axis("1970-01", 1, 36);
        let vals = DMatrix::from_fn(3, 36, |_, c| (c % 12) as f64);
        let f = ForcingField::new(vals, locs(3), ax).unwrap();
        let a = anomalize(&f, ax.first, ax.last()).unwrap();
        assert!(a.values.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn anomalize_linear_trend_matches_loop_oracle() {
        // 2 locations x 48 months with a linear trend; oracle recomputes the
        // per-location per-month reference means with explicit loops.
        let ax = axis("1970-01", 1, 48);
        let ref_start = TimeStamp::parse("1971-01").unwrap();
        let ref_end = TimeStamp::parse("1972-12").unwrap();
        let vals = DMatrix::from_fn(2, 48, |r, c| 0.5 * c as f64 + 10.0 * r as f64);
        let f = ForcingField::new(vals.clone(), locs(2), ax).unwrap();
        let a = anomalize(&f, ref_start, ref_end).unwrap();

        for r in 0..2 {
            for c in 0..48 {
                let class = ax.stamp(c).month_class();
                let mut sum = 0.0;
                let mut n = 0.0;
                for w in 0..48 {
                    let s = ax.stamp(w);
                    if s >= ref_start && s <= ref_end && s.month_class() == class {
                        sum += vals[(r, w)];
                        n += 1.0;
                    }
                }
                let expect = vals[(r, c)] - sum / n;
                assert!((a.values[(r, c)] - expect).abs() < 1e-10, "({r},{c})");
            }
        }
    }

    #[test]
    fn anomalize_is_idempotent_over_full_record() {
        let ax = axis("1970-01", 1, 60);
        let vals = DMatrix::from_fn(2, 60, |r, c| ((r + 1) * c) as f64 % 7.0 + (c as f64).sin());
        let f = ForcingField::new(vals, locs(2), ax).unwrap();
        let once = anomalize(&f, ax.first, ax.last()).unwrap();
        let twice = anomalize(&once, ax.first, ax.last()).unwrap();
        for (a, b) in once.values.iter().zip(twice.values.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        // Per-location per-month means over the window are zero afterwards.
        for class in 0..12 {
            for r in 0..2 {
                let cols: Vec<usize> =
                    (0..60).filter(|&c| ax.stamp(c).month_class() == class).collect();
                let mean: f64 =
                    cols.iter().map(|&c| once.values[(r, c)]).sum::<f64>() / cols.len() as f64;
                assert!(mean.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn anomalize_rejects_window_outside_record() {
        let ax = axis("1970-01", 1, 24);
        let f = ForcingField::new(DMatrix::zeros(1, 24), locs(1), ax).unwrap();
        let err = anomalize(&f, TimeStamp::parse("1969-01").unwrap(), ax.last());
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    #[test]
    fn anomalize_rejects_partial_cycle_window() {
        let ax = axis("1970-01", 1, 36);
        let f = ForcingField::new(DMatrix::zeros(1, 36), locs(1), ax).unwrap();
        // Six-month window cannot provide means for the other six months.
        let err = anomalize(
            &f,
            TimeStamp::parse("1970-01").unwrap(),
            TimeStamp::parse("1970-06").unwrap(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn align_zero_lead_coincident_grids() {
        let resp = axis("2000-01", 1, 10);
        let forc = axis("2000-01", 1, 10);
        let spec = AlignmentSpec::new(0);
        for t in 0..10 {
            assert_eq!(spec.align(t, &resp, &forc).unwrap(), t);
        }
    }

    #[test]
    fn align_matches_one_year_ahead_forecast_setup() {
        // Yearly May counts 1970..=2014, monthly forcing, tau = 12: the
        // initial condition for the 2014 response is May 2013.
        let resp = axis("1970-05", 12, 45);
        let forc = axis("1968-01", 1, 12 * 47);
        let spec = AlignmentSpec::new(12);
        let t_2014 = resp.index_of_year(2014).unwrap();
        let idx = spec.align(t_2014, &resp, &forc).unwrap();
        assert_eq!(forc.stamp(idx), TimeStamp::parse("2013-05").unwrap());

        // Forecast target one past the record: May 2015 -> May 2014.
        let idx = spec.align(resp.len, &resp, &forc).unwrap();
        assert_eq!(forc.stamp(idx), TimeStamp::parse("2014-05").unwrap());
    }

    #[test]
    fn align_insufficient_history_is_an_error() {
        let resp = axis("1970-05", 12, 5);
        let forc = axis("1970-01", 1, 120);
        // tau = 12 needs May 1969 for t = 0.
        let spec = AlignmentSpec::new(12);
        assert!(matches!(
            spec.align(0, &resp, &forc),
            Err(Error::InsufficientHistory(_))
        ));
    }

    #[test]
    fn align_is_strictly_monotone_in_t() {
        let resp = axis("1980-05", 12, 20);
        let forc = axis("1975-01", 1, 600);
        let spec = AlignmentSpec { tau: 7, anchor: Anchor::OffsetForcingPeriods(-2) };
        let mut prev = None;
        for t in 0..=resp.len {
            let idx = spec.align(t, &resp, &forc).unwrap();
            if let Some(p) = prev {
                assert!(idx > p);
            }
            prev = Some(idx);
        }
    }

    #[test]
    fn periods_per_response_requires_exact_multiple() {
        let forc = ForcingField::new(DMatrix::zeros(1, 24), locs(1), axis("2000-01", 1, 24)).unwrap();
        assert_eq!(forc.periods_per_response(&axis("2000-05", 12, 2)).unwrap(), 12);
        let quarterly =
            ForcingField::new(DMatrix::zeros(1, 8), locs(1), axis("2000-01", 3, 8)).unwrap();
        assert_eq!(quarterly.periods_per_response(&axis("2000-01", 12, 2)).unwrap(), 4);
        assert!(quarterly.periods_per_response(&axis("2000-05", 7, 2)).is_err());
    }

    #[test]
    fn count_field_validates_shapes() {
        let ax = axis("2000-01", 12, 3);
        assert!(CountField::new(DMatrix::zeros(2, 3), locs(2), ax).is_ok());
        assert!(CountField::new(DMatrix::zeros(2, 2), locs(2), ax).is_err());
        assert!(CountField::new(DMatrix::zeros(1, 3), locs(2), ax).is_err());
    }
}
