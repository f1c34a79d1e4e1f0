//! Resampling confidence intervals and the feature-pull statistic.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, STREAM_EVAL};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
}

impl Interval {
    pub fn excludes_zero_above(&self) -> bool {
        self.lo > 0.0
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos - pos.floor());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

/// Percentile bootstrap of `stat` over `n` items resampled with replacement.
/// `stat` receives the resampled indices; the estimate uses `0..n`.
pub fn bootstrap(
    n: usize,
    resamples: usize,
    level: f64,
    seed: u64,
    mut stat: impl FnMut(&[usize]) -> f64,
) -> Result<Interval> {
    if n < 2 || resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!(
            "bootstrap needs n >= 2 and a level in (0, 1), got n = {n}, level = {level}"
        )));
    }
    let identity: Vec<usize> = (0..n).collect();
    let estimate = stat(&identity);
    let mut rng = stream(seed, STREAM_EVAL + 1);
    let mut idx = vec![0usize; n];
    let mut values = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        idx.iter_mut().for_each(|i| *i = rng.random_range(0..n));
        let v = stat(&idx);
        if v.is_finite() {
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(Error::invalid("bootstrap statistic was never finite"));
    }
    values.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(Interval { estimate, lo: quantile(&values, tail), hi: quantile(&values, 1.0 - tail), level })
}

/// Bootstrap interval for the mean of paired differences `a[i] - b[i]`.
pub fn paired_bootstrap(a: &[f64], b: &[f64], resamples: usize, level: f64, seed: u64) -> Result<Interval> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch { op: "paired_bootstrap", lhs: vec![a.len()], rhs: vec![b.len()] });
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    bootstrap(d.len(), resamples, level, seed, |idx| idx.iter().map(|&i| d[i]).sum::<f64>() / idx.len() as f64)
}

/// Fraction of pairs where `a` strictly exceeds `b`.
pub fn win_rate(a: &[f64], b: &[f64]) -> f64 {
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    wins as f64 / a.len().max(1) as f64
}

pub fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn std_dev(v: &[f64]) -> Option<f64> {
    let m = mean(v)?;
    (v.len() >= 2).then(|| (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
}

fn centroid(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut c = vec![0.0; rows[0].len()];
    for r in rows {
        c.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    c.iter_mut().for_each(|a| *a /= rows.len() as f64);
    c
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean distance from each blended row to the nearest single-modality
/// centroid, divided by the mean pairwise distance between centroids.
pub fn feature_pull_statistic(single: &[Vec<Vec<f64>>], blended: &[Vec<f64>]) -> Result<f64> {
    if single.len() < 2 {
        return Err(Error::invalid("feature pull needs at least two single-modality clusters"));
    }
    let width = blended.first().map(Vec::len).unwrap_or(0);
    let all_rows = single.iter().flatten().chain(blended);
    if single.iter().any(|c| c.len() < 2)
        || blended.len() < 2
        || width == 0
        || all_rows.clone().any(|r| r.len() != width)
    {
        return Err(Error::invalid("feature pull needs at least two rows per set and one shared width"));
    }
    let centroids: Vec<Vec<f64>> = single.iter().map(|c| centroid(c)).collect();
    let mut pair_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            pair_sum += dist(&centroids[i], &centroids[j]);
            pairs += 1;
        }
    }
    let spread = pair_sum / pairs as f64;
    if spread.is_nan() || spread <= 0.0 {
        return Err(Error::invalid("single-modality centroids coincide"));
    }
    let near: f64 =
        blended.iter().map(|r| centroids.iter().map(|c| dist(r, c)).fold(f64::INFINITY, f64::min)).sum::<f64>()
            / blended.len() as f64;
    Ok(near / spread)
}
