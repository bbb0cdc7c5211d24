//! Loss functions as plain batch means over `(target, prediction)` pairs.
//!
//! The graph versions in [`super::Graph`] call into these for the forward
//! value, so both paths agree exactly.

use crate::error::{Error, Result};

fn check(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() || y.is_empty() {
        return Err(Error::Shape(format!(
            "loss needs equal non-empty inputs, got {} and {}",
            y.len(),
            yhat.len()
        )));
    }
    Ok(())
}

fn mean(it: impl Iterator<Item = f64>, n: usize) -> f64 {
    it.sum::<f64>() / n as f64
}

/// Single-residual pseudo-Huber, `delta^2 (sqrt(1 + ((y - yhat)/delta)^2) - 1)`.
pub fn pseudo_huber_term(y: f64, yhat: f64, delta: f64) -> f64 {
    let r = (y - yhat) / delta;
    delta * delta * ((1.0 + r * r).sqrt() - 1.0)
}

pub fn pseudo_huber(y: &[f64], yhat: &[f64], delta: f64) -> Result<f64> {
    check(y, yhat)?;
    if delta <= 0.0 {
        return Err(Error::Domain(format!("pseudo-Huber delta {delta} must be positive")));
    }
    Ok(mean(y.iter().zip(yhat).map(|(a, b)| pseudo_huber_term(*a, *b, delta)), y.len()))
}

pub fn huber(y: &[f64], yhat: &[f64], delta: f64) -> Result<f64> {
    check(y, yhat)?;
    if delta <= 0.0 {
        return Err(Error::Domain(format!("Huber delta {delta} must be positive")));
    }
    Ok(mean(
        y.iter().zip(yhat).map(|(a, b)| {
            let r = (a - b).abs();
            if r <= delta {
                0.5 * r * r
            } else {
                delta * (r - 0.5 * delta)
            }
        }),
        y.len(),
    ))
}

pub fn pinball_term(y: f64, yhat: f64, tau: f64) -> f64 {
    tau * (y - yhat).max(0.0) + (1.0 - tau) * (yhat - y).max(0.0)
}

/// Check loss at quantile level `tau`.
pub fn pinball(y: &[f64], yhat: &[f64], tau: f64) -> Result<f64> {
    check(y, yhat)?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Domain(format!("pinball tau {tau} outside (0,1)")));
    }
    Ok(mean(y.iter().zip(yhat).map(|(a, b)| pinball_term(*a, *b, tau)), y.len()))
}

pub const QUANTILES: [f64; 3] = [0.10, 0.50, 0.90];

/// Mean of the three pinball losses at the 10th, 50th and 90th percentiles.
pub fn quantile3(y: &[f64], q10: &[f64], q50: &[f64], q90: &[f64]) -> Result<f64> {
    Ok((pinball(y, q10, QUANTILES[0])? + pinball(y, q50, QUANTILES[1])? + pinball(y, q90, QUANTILES[2])?) / 3.0)
}

/// Binary cross entropy on probabilities clamped to `[1e-7, 1-1e-7]`.
pub fn binary_cross_entropy(y: &[f64], p: &[f64]) -> Result<f64> {
    check(y, p)?;
    let c = super::graph::BCE_CLAMP;
    Ok(mean(
        y.iter().zip(p).map(|(&t, &q)| {
            let q = q.clamp(c, 1.0 - c);
            -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
        }),
        y.len(),
    ))
}

/// Softmax cross entropy of row-major `[n, classes.len()]` logits.
pub fn cross_entropy(logits: &[f64], n_classes: usize, classes: &[usize]) -> Result<f64> {
    if n_classes == 0 || logits.len() != n_classes * classes.len() || classes.is_empty() {
        return Err(Error::Shape("cross entropy logits/classes mismatch".into()));
    }
    let mut total = 0.0;
    for (row, &k) in logits.chunks(n_classes).zip(classes) {
        if k >= n_classes {
            return Err(Error::Label(format!("class {k} outside 0..{n_classes}")));
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[k];
    }
    Ok(total / classes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pseudo_huber_zero_residual() {
        assert_eq!(pseudo_huber_term(2.0, 2.0, 1.5), 0.0);
    }

    #[test]
    fn pseudo_huber_worked_value() {
        // 4 * (sqrt(1 + 2.25) - 1)
        let v = pseudo_huber_term(3.0, 0.0, 2.0);
        assert!((v - 4.0 * (3.25f64.sqrt() - 1.0)).abs() < 1e-12);
        assert!((v - 3.2111).abs() < 1e-4);
    }

    #[test]
    fn pinball_three_to_one() {
        let under = pinball(&[4.0], &[2.0], 0.75).unwrap();
        let over = pinball(&[2.0], &[4.0], 0.75).unwrap();
        assert_eq!(under, 1.5);
        assert_eq!(over, 0.5);
        assert_eq!(under / over, 3.0);
    }

    #[test]
    fn pinball_rejects_bad_tau() {
        assert!(matches!(pinball(&[1.0], &[1.0], 1.0), Err(Error::Domain(_))));
        assert!(matches!(pinball(&[1.0], &[1.0], 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn quantile3_worked_value() {
        let v = quantile3(&[1.0], &[0.0], &[1.0], &[2.0]).unwrap();
        assert!((v - 0.2 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn huber_branches() {
        assert_eq!(huber(&[0.5], &[0.0], 1.0).unwrap(), 0.125);
        assert_eq!(huber(&[3.0], &[0.0], 1.0).unwrap(), 2.5);
    }

    #[test]
    fn bce_clamps() {
        let v = binary_cross_entropy(&[1.0], &[0.0]).unwrap();
        assert!((v + (1e-7f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_uniform() {
        let v = cross_entropy(&[0.0; 7], 7, &[3]).unwrap();
        assert!((v - 7f64.ln()).abs() < 1e-12);
    }
}
