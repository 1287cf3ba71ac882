//! Scalar k-means with the first centroid pinned at zero.

use rand::Rng;

use crate::error::{Error, Result};

/// Nearest-centroid lookup over a sorted copy of the centroids.
///
/// Ties between equally distant centroids resolve to the lowest original
/// index, matching a brute-force `argmin` scan.
pub(crate) struct NearestIndex {
    values: Vec<f64>,
    index: Vec<u16>,
}

impl NearestIndex {
    pub(crate) fn new(centroids: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..centroids.len()).collect();
        order.sort_by(|&a, &b| centroids[a].total_cmp(&centroids[b]).then(a.cmp(&b)));
        let mut values = Vec::with_capacity(order.len());
        let mut index = Vec::with_capacity(order.len());
        for j in order {
            // Equal values collapse onto the first (lowest) index.
            if values.last() == Some(&centroids[j]) {
                continue;
            }
            values.push(centroids[j]);
            index.push(j as u16);
        }
        Self { values, index }
    }

    pub(crate) fn nearest(&self, x: f64) -> u16 {
        self.resolve(self.values.partition_point(|v| *v < x), x)
    }

    /// Assigns every `theta[i]`, visiting them in ascending order so the
    /// search position only moves forward. Returns whether any entry of
    /// `assign` changed.
    fn assign_sorted(&self, theta: &[f64], ascending: &[usize], assign: &mut [u16]) -> bool {
        let mut pos = 0;
        let mut changed = false;
        for &i in ascending {
            let x = theta[i];
            while pos < self.values.len() && self.values[pos] < x {
                pos += 1;
            }
            let j = self.resolve(pos, x);
            if assign[i] != j {
                assign[i] = j;
                changed = true;
            }
        }
        changed
    }

    /// `pos` is the first slot whose value is not below `x`.
    fn resolve(&self, pos: usize, x: f64) -> u16 {
        if pos == 0 {
            return self.index[0];
        }
        if pos == self.values.len() {
            return self.index[pos - 1];
        }
        let below = x - self.values[pos - 1];
        let above = self.values[pos] - x;
        if below < above {
            self.index[pos - 1]
        } else if above < below {
            self.index[pos]
        } else {
            self.index[pos - 1].min(self.index[pos])
        }
    }
}

pub(crate) fn distortion(theta: &[f64], centroids: &[f64], assign: &[u16]) -> f64 {
    theta
        .iter()
        .zip(assign)
        .map(|(x, a)| {
            let d = x - centroids[*a as usize];
            d * d
        })
        .sum()
}

/// Initial centroids by k-means++ seeding around the pinned zero: each of
/// the `K−1` free centroids is a layer value drawn with probability
/// proportional to its squared distance from the centroids chosen so far.
/// When the layer has fewer than `K−1` distinct nonzero values, all of them
/// are used and the rest is padded with the maximum.
pub(crate) fn seeded_init<R: Rng + ?Sized>(theta: &[f64], k: usize, rng: &mut R) -> Vec<f64> {
    let mut distinct: Vec<f64> = theta.iter().copied().filter(|v| *v != 0.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let want = k - 1;
    let mut mu = Vec::with_capacity(k);
    mu.push(0.0);
    if distinct.len() <= want {
        let pad = theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = if pad.is_finite() { pad } else { 0.0 };
        mu.extend(distinct.iter().copied());
        mu.resize(k, pad);
        return mu;
    }
    let mut d2: Vec<f64> = theta.iter().map(|x| x * x).collect();
    for _ in 0..want {
        let total: f64 = d2.iter().sum();
        let mut r = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, w) in d2.iter().enumerate() {
            if *w > 0.0 {
                pick = Some(i);
                if r < *w {
                    break;
                }
                r -= w;
            }
        }
        let c = theta[pick.expect("a value away from every centroid remains")];
        mu.push(c);
        for (x, w) in theta.iter().zip(d2.iter_mut()) {
            *w = w.min((x - c) * (x - c));
        }
    }
    mu[1..].sort_by(f64::total_cmp);
    mu
}

#[derive(Debug, Clone, PartialEq)]
pub struct LloydOutcome {
    pub centroids: Vec<f64>,
    pub assign: Vec<u16>,
    pub iterations: usize,
    pub converged: bool,
    /// Distortion after each assignment + update pass.
    pub trace: Vec<f64>,
}

impl LloydOutcome {
    pub fn final_distortion(&self) -> f64 {
        self.trace.last().copied().unwrap_or(f64::INFINITY)
    }
}

/// Runs Lloyd iterations from `init` (whose slot 0 is forced to zero).
///
/// Stops after `t_max` passes or once an assignment pass changes nothing.
/// Empty clusters keep their previous centroid. The distortion is checked
/// to be non-increasing after every pass.
pub fn lloyd(theta: &[f64], init: Vec<f64>, t_max: usize) -> Result<LloydOutcome> {
    let k = init.len();
    let mut mu = init;
    mu[0] = 0.0;
    let mut assign = vec![0u16; theta.len()];
    let mut trace = Vec::with_capacity(t_max);
    let mut converged = false;
    let mut iterations = 0;
    let mut counts = vec![0usize; k];
    let mut refs = vec![0.0f64; k];
    let mut sums = vec![0.0f64; k];
    let mut prev = f64::INFINITY;
    let mut ascending: Vec<usize> = (0..theta.len()).collect();
    ascending.sort_unstable_by(|&a, &b| theta[a].total_cmp(&theta[b]));

    for t in 0..t_max {
        let changed = NearestIndex::new(&mu).assign_sorted(theta, &ascending, &mut assign);
        if t > 0 && !changed {
            converged = true;
            break;
        }
        iterations += 1;

        counts.iter_mut().for_each(|c| *c = 0);
        sums.iter_mut().for_each(|s| *s = 0.0);
        for (x, a) in theta.iter().zip(&assign) {
            let j = *a as usize;
            if counts[j] == 0 {
                refs[j] = *x;
            }
            counts[j] += 1;
            sums[j] += x - refs[j];
        }
        for j in 1..k {
            if counts[j] > 0 {
                // Shifted mean: exact when every member is identical.
                mu[j] = refs[j] + sums[j] / counts[j] as f64;
            }
        }
        mu[0] = 0.0;

        let d = distortion(theta, &mu, &assign);
        if d > prev * (1.0 + 1e-12) + 1e-300 {
            return Err(Error::Invariant(format!(
                "Lloyd distortion increased at pass {t}: {prev} -> {d}"
            )));
        }
        prev = d;
        trace.push(d);
    }

    Ok(LloydOutcome { centroids: mu, assign, iterations, converged, trace })
}
