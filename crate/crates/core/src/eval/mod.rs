//! Simulation, cross-validation and accuracy metrics.

pub mod cv;
pub mod experiment;
pub mod sim;

use crate::error::{invalid, Result};

pub use cv::{cross_validate, cross_validate_folds, default_grid, CvResult};
pub use experiment::{run_experiment, ExperimentOptions, ExperimentResult, Method};
pub use sim::{simulate, simulate_units, SimInstance, SimSpec, UnitSimSpec, WeightScheme};

/// Root mean squared difference, optionally weighted.
pub fn rmse(pred: &[f64], truth: &[f64], weights: Option<&[f64]>) -> Result<f64> {
    if pred.len() != truth.len() || weights.is_some_and(|w| w.len() != pred.len()) {
        return invalid("prediction, truth and weights must have equal length");
    }
    if pred.is_empty() {
        return invalid("rmse of an empty vector");
    }
    let (num, den) = match weights {
        Some(w) => pred
            .iter()
            .zip(truth)
            .zip(w)
            .fold((0.0, 0.0), |(n, d), ((p, t), w)| (n + w * (p - t).powi(2), d + w)),
        None => (
            pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum(),
            pred.len() as f64,
        ),
    };
    Ok((num / den).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0], None).unwrap(), 0.0);
        assert_eq!(rmse(&[3.0, 4.0], &[0.0, 0.0], None).unwrap(), 12.5f64.sqrt());
        assert_eq!(rmse(&[3.0, 4.0], &[0.0, 0.0], Some(&[1.0, 0.0])).unwrap(), 3.0);
        assert!(rmse(&[1.0], &[1.0, 2.0], None).is_err());
        let p = [0.3, -1.2, 2.5, 0.0];
        let t = [1.0, 0.5, -0.5, 0.25];
        let want = ((0.49 + 2.89 + 9.0 + 0.0625) / 4.0f64).sqrt();
        assert!((rmse(&p, &t, None).unwrap() - want).abs() < 1e-15);
    }
}
