//! Detection and comparison statistics.

use nalgebra::DVector;
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, Normal};

use crate::{Error, Result};

fn split(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("both classes must be present"));
    }
    Ok((pos, neg))
}

/// Midranks (1-based), ties averaged; returned doubled to stay integral.
fn doubled_ranks(values: &[f64]) -> Vec<u64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0u64; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // Average of (i+1)..=(j+1), doubled.
        let r2 = (i + j + 2) as u64;
        for &k in &idx[i..=j] {
            ranks[k] = r2;
        }
        i = j + 1;
    }
    ranks
}

/// Area under the ROC curve, positives expected to score higher. Ties count
/// one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = split(scores, labels)?;
    let ranks = doubled_ranks(scores);
    let r2: u64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u2 = r2 - (pos * (pos + 1)) as u64;
    Ok(u2 as f64 / (2 * pos * neg) as f64)
}

/// Reference implementation over all pairs.
pub fn auc_pairwise(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = split(scores, labels)?;
    let mut u2 = 0u64;
    for (si, _) in scores.iter().zip(labels).filter(|(_, &l)| l) {
        for (sj, _) in scores.iter().zip(labels).filter(|(_, &l)| !l) {
            if si > sj {
                u2 += 2;
            } else if si == sj {
                u2 += 1;
            }
        }
    }
    Ok(u2 as f64 / (2 * pos * neg) as f64)
}

/// True-positive rate at the smallest score threshold whose false-positive
/// rate is at most `fpr`. A sample is flagged when its score is at least the
/// threshold. With fewer than `1 / fpr` negatives the threshold lies above
/// every negative.
pub fn tpr_at_fpr(scores: &[f64], labels: &[bool], fpr: f64) -> Result<f64> {
    let (pos, neg) = split(scores, labels)?;
    if !(0.0..=1.0).contains(&fpr) {
        return Err(Error::invalid("fpr target must lie in [0, 1]"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut best) = (0usize, 0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut j = i;
        while j < order.len() && scores[order[j]] == s {
            if labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        if fp as f64 <= fpr * neg as f64 {
            best = tp;
        } else {
            break;
        }
        i = j;
    }
    Ok(best as f64 / pos as f64)
}

/// Nearest-training-point distances and the memorization verdicts.
pub fn label_memorized(generated: &[DVector<f64>], train: &[DVector<f64>], tau: f64) -> Result<(Vec<bool>, Vec<f64>)> {
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("tau must be positive"));
    }
    let dists: Vec<f64> = generated
        .iter()
        .map(|g| train.iter().map(|x| (g - x).norm()).fold(f64::INFINITY, f64::min))
        .collect();
    Ok((dists.iter().map(|&d| d <= tau).collect(), dists))
}

/// Threshold in the widest gap of the log-distance histogram.
pub fn valley_tau(dists: &[f64]) -> Result<f64> {
    let mut logs: Vec<f64> = dists.iter().filter(|d| **d > 0.0).map(|d| d.ln()).collect();
    if logs.len() < 2 {
        return Err(Error::invalid("need at least two positive distances"));
    }
    logs.sort_by(f64::total_cmp);
    let (mut gap, mut at) = (f64::NEG_INFINITY, 0);
    for i in 0..logs.len() - 1 {
        if logs[i + 1] - logs[i] > gap {
            gap = logs[i + 1] - logs[i];
            at = i;
        }
    }
    Ok(((logs[at] + logs[at + 1]) / 2.0).exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MannWhitney {
    /// Count of pairs with `a > b`, ties as one half.
    pub u: f64,
    pub z: f64,
    /// One-sided p-value for `a` tending to be smaller than `b`.
    pub p_less: f64,
    pub p_greater: f64,
}

/// Normal approximation with tie and continuity corrections.
pub fn mann_whitney(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("both samples must be nonempty"));
    }
    let mut all = a.to_vec();
    all.extend_from_slice(b);
    if all.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("samples contain NaN"));
    }
    let ranks = doubled_ranks(&all);
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let r1: f64 = ranks[..a.len()].iter().map(|&r| r as f64 / 2.0).sum();
    let u = r1 - n1 * (n1 + 1.0) / 2.0;
    let n = n1 + n2;
    let mut sorted = all.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)).max(1.0));
    let mean = n1 * n2 / 2.0;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    if !(var > 0.0) {
        return Ok(MannWhitney { u, z: 0.0, p_less: 1.0, p_greater: 1.0 });
    }
    let sd = var.sqrt();
    let z = (u - mean) / sd;
    let p_greater = 1.0 - normal.cdf((u - mean - 0.5) / sd);
    let p_less = normal.cdf((u - mean + 0.5) / sd);
    Ok(MannWhitney { u, z, p_less, p_greater })
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("pearson needs two equal-length samples of size >= 2"));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("pearson is undefined for a constant sample"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// One-sided exact sign test on discordant pairs: probability of at least
/// `improved` successes out of `improved + worsened` fair coin flips.
pub fn sign_test(improved: u64, worsened: u64) -> f64 {
    let n = improved + worsened;
    if n == 0 || improved == 0 {
        return 1.0;
    }
    let b = Binomial::new(0.5, n).expect("valid binomial");
    1.0 - b.cdf(improved - 1)
}

/// Mean and its standard error.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, f64::NAN);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

pub fn median(v: &[f64]) -> Result<f64> {
    crate::metrics::quantile(v, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_fixtures() {
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 6], &[true, false, true, false, true, false]).unwrap(), 0.5);
        assert!(auc(&[1.0, 2.0], &[true, true]).is_err());
    }

    #[test]
    fn tpr_edges() {
        let labels = [true, true, false, false];
        assert_eq!(tpr_at_fpr(&[0.9, 0.8, 0.2, 0.1], &labels, 0.01).unwrap(), 1.0);
        assert_eq!(tpr_at_fpr(&[0.9, 0.1, 0.5, 0.2], &labels, 0.01).unwrap(), 0.5);
        assert_eq!(tpr_at_fpr(&[0.1, 0.1, 0.5, 0.2], &labels, 0.01).unwrap(), 0.0);
    }

    #[test]
    fn memorized_labels() {
        let train = vec![DVector::from_vec(vec![0.0, 0.0]), DVector::from_vec(vec![3.0, 4.0])];
        let gen = vec![DVector::from_vec(vec![3.0, 4.0]), DVector::from_vec(vec![1.0, 0.0])];
        let (l, d) = label_memorized(&gen, &train, 1e-12).unwrap();
        assert_eq!(l, vec![true, false]);
        assert_eq!(d, vec![0.0, 1.0]);
        assert!(label_memorized(&gen, &[], 1.0).is_err());
    }

    #[test]
    fn valley_between_clusters() {
        let tau = valley_tau(&[0.01, 0.012, 0.011, 2.0, 3.0, 2.5]).unwrap();
        assert!(tau > 0.012 && tau < 2.0);
    }

    #[test]
    fn mann_whitney_direction() {
        let a: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..30).map(|i| i as f64 + 100.0).collect();
        let r = mann_whitney(&a, &b).unwrap();
        assert_eq!(r.u, 0.0);
        assert!(r.p_less < 1e-9 && r.p_greater > 0.99);
    }

    #[test]
    fn sign_test_values() {
        assert!((sign_test(1, 0) - 0.5).abs() < 1e-15);
        assert!((sign_test(10, 0) - 0.5f64.powi(10)).abs() < 1e-15);
        assert_eq!(sign_test(0, 4), 1.0);
    }

    #[test]
    fn pearson_line() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.5]).unwrap() - 0.9986).abs() < 1e-3);
        assert!(pearson(&[1.0, 1.0], &[0.0, 1.0]).is_err());
    }
}
