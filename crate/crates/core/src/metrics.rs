//! Empirical distribution functions, two-sample Kolmogorov–Smirnov distances
//! and moment summaries.

use std::path::Path;

use crate::error::{Error, Result};

/// Probabilities reported by [`summary`].
pub const SUMMARY_PROBS: [f64; 9] = [0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99];

/// Right-continuous step function: `F(x) = heights[k]` for
/// `points[k] <= x < points[k+1]`, and 0 left of the first point.
#[derive(Debug, Clone, PartialEq)]
pub struct EcdfCurve {
    pub points: Vec<f64>,
    pub heights: Vec<f64>,
}

impl EcdfCurve {
    pub fn eval(&self, x: f64) -> f64 {
        let k = self.points.partition_point(|&p| p <= x);
        if k == 0 {
            0.0
        } else {
            self.heights[k - 1]
        }
    }
}

fn sorted(samples: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    if samples.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("samples", "NaN value"));
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

pub fn ecdf(samples: &[f64]) -> Result<EcdfCurve> {
    let v = sorted(samples)?;
    let n = v.len() as f64;
    let mut points = Vec::new();
    let mut heights = Vec::new();
    for (k, &x) in v.iter().enumerate() {
        if k + 1 < v.len() && v[k + 1] == x {
            continue;
        }
        points.push(x);
        heights.push((k + 1) as f64 / n);
    }
    Ok(EcdfCurve { points, heights })
}

/// `sup_x |F_a(x) − F_b(x)|`, computed exactly by a sweep over the merged
/// sorted samples.
pub fn ks_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    let wa = vec![1.0; a.len()];
    let wb = vec![1.0; b.len()];
    ks_distance_weighted(a, &wa, b, &wb)
}

/// KS distance between two weighted empirical distributions. Weights must be
/// nonnegative with a positive sum; they are normalized internally.
pub fn ks_distance_weighted(a: &[f64], wa: &[f64], b: &[f64], wb: &[f64]) -> Result<f64> {
    // raw weights are accumulated and divided at each step, so unit weights
    // give exact k/n heights
    let (pa, ta) = weighted_sorted(a, wa)?;
    let (pb, tb) = weighted_sorted(b, wb)?;
    let (mut i, mut j) = (0, 0);
    let (mut fa, mut fb) = (0.0f64, 0.0f64);
    let mut best = 0.0f64;
    while i < pa.len() || j < pb.len() {
        let x = match (pa.get(i), pb.get(j)) {
            (Some(p), Some(q)) => p.0.min(q.0),
            (Some(p), None) => p.0,
            (None, Some(q)) => q.0,
            (None, None) => unreachable!(),
        };
        while i < pa.len() && pa[i].0 == x {
            fa += pa[i].1;
            i += 1;
        }
        while j < pb.len() && pb[j].0 == x {
            fb += pb[j].1;
            j += 1;
        }
        best = best.max((fa / ta - fb / tb).abs());
    }
    Ok(best.min(1.0))
}

fn weighted_sorted(x: &[f64], w: &[f64]) -> Result<(Vec<(f64, f64)>, f64)> {
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    if x.len() != w.len() {
        return Err(Error::invalid("weights", "length differs from samples"));
    }
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("samples", "NaN value"));
    }
    if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid("weights", "must be finite and >= 0"));
    }
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("weights", "sum must be positive"));
    }
    let mut pairs: Vec<(f64, f64)> = x.iter().zip(w).map(|(&v, &wt)| (v, wt)).collect();
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
    Ok((pairs, total))
}

/// Asymptotic two-sample critical value `c(α)·√((m+n)/(mn))` with
/// `c(α) = √(−ln(α/2)/2)`.
pub fn ks_critical_value(alpha: f64, m: usize, n: usize) -> f64 {
    let c = (-(alpha / 2.0).ln() / 2.0).sqrt();
    c * ((m + n) as f64 / (m as f64 * n as f64)).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    /// Unbiased (`n − 1`) variance; 0 for a single sample.
    pub variance: f64,
    /// Quantiles at [`SUMMARY_PROBS`].
    pub quantiles: Vec<f64>,
}

/// Quantile by linear interpolation between order statistics at position
/// `(n − 1)·p`.
pub fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn summary(samples: &[f64]) -> Result<Summary> {
    let v = sorted(samples)?;
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n as f64;
    let variance = if n > 1 {
        v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Ok(Summary {
        count: n,
        mean,
        variance,
        quantiles: SUMMARY_PROBS.iter().map(|&p| quantile_sorted(&v, p)).collect(),
    })
}

/// Writes `x,F(x)` rows, one per support point.
pub fn write_ecdf_csv(path: &Path, curve: &EcdfCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "F(x)"])?;
    for (x, f) in curve.points.iter().zip(&curve.heights) {
        w.write_record([format!("{x:?}"), format!("{f:?}")])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ecdf_examples() {
        let c = ecdf(&[1.0]).unwrap();
        assert_eq!(c.points, vec![1.0]);
        assert_eq!(c.heights, vec![1.0]);
        assert_eq!(c.eval(0.999), 0.0);
        assert_eq!(c.eval(1.0), 1.0);

        let c = ecdf(&[1.0, 1.0, 2.0]).unwrap();
        assert_eq!(c.points, vec![1.0, 2.0]);
        assert!((c.heights[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.heights[1], 1.0);
        assert_eq!(ecdf(&[2.0, 1.0, 1.0]).unwrap(), c);
        assert!(matches!(ecdf(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn ks_examples() {
        let a = [0.3, -1.0, 2.0];
        assert_eq!(ks_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(ks_distance(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(ks_distance(&[0.0, 1.0], &[0.5, 1.5]).unwrap(), 0.5);
        let doubled: Vec<f64> = a.iter().chain(a.iter()).copied().collect();
        assert_eq!(ks_distance(&a, &doubled).unwrap(), 0.0);
        assert!(ks_distance(&a, &[]).is_err());
    }

    #[test]
    fn weighted_ks_reduces_to_plain() {
        let a = [0.1, 0.4, 0.2, 0.9];
        let b = [0.3, 0.5, 0.05];
        let plain = ks_distance(&a, &b).unwrap();
        let w = ks_distance_weighted(&a, &[2.0; 4], &b, &[0.5; 3]).unwrap();
        assert!((plain - w).abs() < 1e-15);
        // all weight on one atom
        let w = ks_distance_weighted(&[0.0], &[1.0], &[0.0, 5.0], &[1.0, 0.0]).unwrap();
        assert_eq!(w, 0.0);
    }

    #[test]
    fn summary_examples() {
        let s = summary(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!((s.mean, s.variance), (1.0, 0.0));
        let s = summary(&[0.0, 2.0]).unwrap();
        assert_eq!((s.mean, s.variance), (1.0, 2.0));
        let s = summary(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!(s.quantiles[4], 2.0);
        assert!((s.quantiles[0] - 1.02).abs() < 1e-12);
    }

    #[test]
    fn critical_value() {
        // c(0.05) ≈ 1.358
        let v = ks_critical_value(0.05, 100, 100);
        assert!((v - 1.3581 * (0.02f64).sqrt()).abs() < 1e-3);
    }
}
