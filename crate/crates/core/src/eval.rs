//! Forecast scoring (MSPE and Pearson correlation across sites) and the
//! climatology/persistence reference forecasts.

use nalgebra::DVector;

use crate::data::CountField;
use crate::error::{Error, Result};

/// Scores for one forecast against one observed period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Mean over sites of squared (predictive mean - observed count).
    pub mspe: f64,
    /// Pearson correlation across sites; `None` when either vector has zero
    /// variance, where the statistic is undefined.
    pub corr: Option<f64>,
}

pub fn evaluate(predicted: &DVector<f64>, observed: &[u64]) -> Result<Evaluation> {
    if predicted.len() != observed.len() {
        return Err(Error::Dimension(format!(
            "{} predictions vs {} observations",
            predicted.len(),
            observed.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Dimension("empty forecast".into()));
    }
    let n = predicted.len() as f64;
    let obs: Vec<f64> = observed.iter().map(|&v| v as f64).collect();

    let mspe = predicted
        .iter()
        .zip(&obs)
        .map(|(p, o)| (p - o) * (p - o))
        .sum::<f64>()
        / n;

    let mean_p = predicted.sum() / n;
    let mean_o = obs.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_p = 0.0;
    let mut var_o = 0.0;
    for (p, o) in predicted.iter().zip(&obs) {
        cov += (p - mean_p) * (o - mean_o);
        var_p += (p - mean_p) * (p - mean_p);
        var_o += (o - mean_o) * (o - mean_o);
    }
    let corr = if var_p == 0.0 || var_o == 0.0 {
        None
    } else {
        Some(cov / (var_p.sqrt() * var_o.sqrt()))
    };
    Ok(Evaluation { mspe, corr })
}

/// Climatology baseline: per-site mean of the training counts.
pub fn climatology_forecast(training: &CountField) -> DVector<f64> {
    let t = training.n_periods() as f64;
    DVector::from_fn(training.n_locations(), |i, _| {
        training.counts.row(i).iter().map(|&v| v as f64).sum::<f64>() / t
    })
}

/// Persistence baseline: the last training period's counts.
pub fn persistence_forecast(training: &CountField) -> DVector<f64> {
    let last = training.n_periods() - 1;
    DVector::from_fn(training.n_locations(), |i, _| training.counts[(i, last)] as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Location, TimeAxis, TimeStamp};
    use nalgebra::DMatrix;

    fn field(counts: DMatrix<u64>) -> CountField {
        let locs: Vec<Location> = (0..counts.nrows())
            .map(|i| Location { id: format!("s{i}"), lon: 0.0, lat: i as f64 })
            .collect();
        let times = TimeAxis::new(
            TimeStamp::parse("2000-01").unwrap(),
            12,
            counts.ncols(),
        )
        .unwrap();
        CountField::new(counts, locs, times).unwrap()
    }

    #[test]
    fn perfect_forecast_scores_zero_mspe_unit_corr() {
        let obs = [3u64, 8, 1, 12, 5];
        let pred = DVector::from_iterator(5, obs.iter().map(|&v| v as f64));
        let e = evaluate(&pred, &obs).unwrap();
        assert_eq!(e.mspe, 0.0);
        assert!((e.corr.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_shift_gives_squared_constant_mspe() {
        let obs = [3u64, 8, 1, 12, 5];
        let shift = 2.5;
        let pred = DVector::from_iterator(5, obs.iter().map(|&v| v as f64 + shift));
        let e = evaluate(&pred, &obs).unwrap();
        assert!((e.mspe - shift * shift).abs() < 1e-12);
        assert!((e.corr.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_observed_reports_undefined_corr() {
        let obs = [4u64, 4, 4];
        let pred = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let e = evaluate(&pred, &obs).unwrap();
        assert!(e.corr.is_none());
        assert!(e.mspe > 0.0);
    }

    #[test]
    fn scoring_is_symmetric_in_its_arguments() {
        let a = [3u64, 9, 2, 7];
        let b = [5u64, 1, 8, 4];
        let av = DVector::from_iterator(4, a.iter().map(|&v| v as f64));
        let bv = DVector::from_iterator(4, b.iter().map(|&v| v as f64));
        let e1 = evaluate(&av, &b).unwrap();
        let e2 = evaluate(&bv, &a).unwrap();
        assert!((e1.mspe - e2.mspe).abs() < 1e-12);
        assert!((e1.corr.unwrap() - e2.corr.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn baselines_on_constant_counts_are_exact() {
        let counts = DMatrix::from_element(3, 5, 7u64);
        let f = field(counts);
        let clim = climatology_forecast(&f);
        let pers = persistence_forecast(&f);
        let obs = [7u64, 7, 7];
        assert_eq!(evaluate(&clim, &obs).unwrap().mspe, 0.0);
        assert_eq!(evaluate(&pers, &obs).unwrap().mspe, 0.0);
    }

    #[test]
    fn baseline_values_match_definitions() {
        let counts = DMatrix::from_row_slice(2, 3, &[1u64, 2, 6, 10, 20, 30]);
        let f = field(counts);
        let clim = climatology_forecast(&f);
        assert!((clim[0] - 3.0).abs() < 1e-12);
        assert!((clim[1] - 20.0).abs() < 1e-12);
        let pers = persistence_forecast(&f);
        assert_eq!(pers[0], 6.0);
        assert_eq!(pers[1], 30.0);
    }
}
