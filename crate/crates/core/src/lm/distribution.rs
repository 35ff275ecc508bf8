use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numcore::log_sum_exp;

/// Normalization tolerance for [`Distribution::new`].
pub const SUM_TOL: f64 = 1e-9;

/// Probability vector over a vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(invalid("empty distribution"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(invalid("distribution entries must be finite and non-negative"));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > SUM_TOL {
            return Err(invalid(format!("distribution sums to {s}")));
        }
        Ok(Self(probs))
    }

    /// Renormalizes arbitrary non-negative weights.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let s: f64 = weights.iter().sum();
        if !(s > 0.0) || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("weights must be non-negative with positive sum"));
        }
        Self::new(weights.into_iter().map(|w| w / s).collect())
    }

    /// Exponentiates a row of log-probabilities, renormalizing away rounding.
    pub fn from_log_probs(logp: &[f64]) -> Result<Self> {
        let lse = log_sum_exp(logp);
        Self::new(logp.iter().map(|l| (l - lse).exp()).collect())
    }

    pub fn uniform(v: usize) -> Self {
        Self(vec![1.0 / v as f64; v])
    }

    pub fn onehot(v: usize, index: usize) -> Self {
        let mut p = vec![0.0; v];
        p[index] = 1.0;
        Self(p)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn prob(&self, v: usize) -> f64 {
        self.0[v]
    }

    /// Most probable token; ties go to the smallest id.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    /// Token ids of the `k` largest entries, ties by smaller id, in rank order.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.0.len()).collect();
        idx.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]).then(a.cmp(&b)));
        idx.truncate(k);
        idx
    }

    pub fn entropy(&self) -> f64 {
        self.0.iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum()
    }

    /// `CE(self, other) = -Σ self(v) log other(v)`; zero-weight terms vanish.
    pub fn cross_entropy(&self, other: &Distribution) -> f64 {
        self.0.iter().zip(&other.0).filter(|(p, _)| **p > 0.0).map(|(p, q)| -p * q.ln()).sum()
    }

    /// `CE(self, exp(logq))` against a row of log-probabilities.
    pub fn cross_entropy_logp(&self, logq: &[f64]) -> f64 {
        self.0.iter().zip(logq).filter(|(p, _)| **p > 0.0).map(|(p, lq)| -p * lq).sum()
    }
}

/// `(1-ε)·d + ε·Uniform(V)`. Every token then has probability at least ε/V,
/// so its log-loss is at most `log(V/ε)`.
pub fn apply_floor(d: &Distribution, eps: f64) -> Result<Distribution> {
    if !(0.0..=0.01).contains(&eps) {
        return Err(invalid(format!("probability floor {eps} outside [0, 0.01]")));
    }
    if eps == 0.0 {
        return Ok(d.clone());
    }
    let u = eps / d.len() as f64;
    Ok(Distribution(d.0.iter().map(|p| (1.0 - eps) * p + u).collect()))
}

/// Floors a row of log-probabilities in place (log-space form of [`apply_floor`]).
pub(crate) fn floor_log_row(row: &mut [f64], eps: f64) {
    if eps == 0.0 {
        return;
    }
    let u = eps / row.len() as f64;
    for l in row.iter_mut() {
        *l = ((1.0 - eps) * l.exp() + u).ln();
    }
}

/// Teacher temperature scaling: output ∝ `d^ρ`, computed in log space.
pub fn temperature_scale(d: &Distribution, rho: f64) -> Result<Distribution> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(invalid(format!("temperature {rho} must be positive")));
    }
    if d.0.iter().any(|&p| p <= 0.0) {
        return Err(invalid("temperature scaling needs a strictly positive distribution; apply a floor first"));
    }
    if rho == 1.0 {
        return Ok(d.clone());
    }
    let logs: Vec<f64> = d.0.iter().map(|p| rho * p.ln()).collect();
    Distribution::from_log_probs(&logs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_zero_is_identity() {
        let d = Distribution::new(vec![0.2, 0.8]).unwrap();
        assert_eq!(apply_floor(&d, 0.0).unwrap(), d);
    }

    #[test]
    fn floor_on_onehot() {
        let d = Distribution::onehot(10, 3);
        let f = apply_floor(&d, 0.01).unwrap();
        for (i, p) in f.probs().iter().enumerate() {
            let want = if i == 3 { 0.991 } else { 0.001 };
            assert!((p - want).abs() < 1e-15);
        }
    }

    #[test]
    fn floor_out_of_range() {
        assert!(apply_floor(&Distribution::uniform(3), 0.02).is_err());
    }

    #[test]
    fn temperature_examples() {
        let d = Distribution::new(vec![0.8, 0.2]).unwrap();
        let s = temperature_scale(&d, 0.5).unwrap();
        // sqrt(.8)/(sqrt(.8)+sqrt(.2)) = 2/3
        assert!((s.prob(0) - 2.0 / 3.0).abs() < 1e-9);
        assert!((s.prob(1) - 1.0 / 3.0).abs() < 1e-9);
        let same = temperature_scale(&d, 1.0).unwrap();
        assert!(same.probs().iter().zip(d.probs()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(temperature_scale(&d, 0.0).is_err());
        assert!(temperature_scale(&d, -1.0).is_err());
        assert!(temperature_scale(&Distribution::onehot(2, 0), 0.5).is_err());
    }

    #[test]
    fn argmax_tie_breaks_low() {
        assert_eq!(Distribution::uniform(5).argmax(), 0);
        let d = Distribution::new(vec![0.1, 0.4, 0.4, 0.1]).unwrap();
        assert_eq!(d.argmax(), 1);
        assert_eq!(d.top_k(3), vec![1, 2, 0]);
    }

    #[test]
    fn normalization_enforced() {
        assert!(Distribution::new(vec![0.5, 0.6]).is_err());
        assert!(Distribution::new(vec![1.5, -0.5]).is_err());
    }
}
