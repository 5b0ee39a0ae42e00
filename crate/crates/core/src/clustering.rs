//! Deterministic 1-D k-means with k = 3.
//!
//! Values are sorted once; every cluster is then a contiguous run of the
//! sorted array, so Lloyd's assignment step reduces to two binary searches
//! and the update step to prefix-sum lookups. Working on the sorted copy makes
//! the result a function of the multiset of values, independent of order.

use crate::error::{Error, Result};

pub const CLUSTERS: usize = 3;
pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

/// Lower / middle / upper partition of a set of scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    /// Strictly increasing.
    pub centroids: [f64; CLUSTERS],
    /// Midpoints of adjacent centroids: label 0 iff `x <= t0`, 1 iff `t0 < x <= t1`, else 2.
    pub boundaries: [f64; CLUSTERS - 1],
    /// Cluster index per input element, in input order.
    pub labels: Vec<u8>,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
    pub iterations: usize,
}

impl ClusterAssignment {
    pub fn label_of(&self, x: f32) -> u8 {
        label_for(x as f64, &self.boundaries)
    }

    pub fn counts(&self) -> [usize; CLUSTERS] {
        let mut c = [0; CLUSTERS];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }
}

#[inline]
fn label_for(x: f64, b: &[f64; 2]) -> u8 {
    if x <= b[0] {
        0
    } else if x <= b[1] {
        1
    } else {
        2
    }
}

fn boundaries_of(c: &[f64; 3]) -> [f64; 2] {
    [(c[0] + c[1]) / 2.0, (c[1] + c[2]) / 2.0]
}

/// Number of numerically distinct values (`-0.0 == 0.0`).
pub fn distinct_count(values: &[f32]) -> usize {
    let mut s: Vec<f32> = values.to_vec();
    s.sort_by(f32::total_cmp);
    s.dedup_by(|a, b| a == b);
    s.len()
}

fn sorted_checked(values: &[f32]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::DegenerateInput("no values to cluster".into()));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Argument(format!("cannot cluster non-finite value {bad}")));
    }
    let mut sorted: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let distinct = 1 + sorted.windows(2).filter(|w| w[0] != w[1]).count();
    if distinct < CLUSTERS {
        return Err(Error::DegenerateInput(format!(
            "{distinct} distinct value(s), need at least {CLUSTERS}"
        )));
    }
    Ok(sorted)
}

/// Sorted values plus prefix sums of values and squares.
struct Sorted {
    x: Vec<f64>,
    p1: Vec<f64>,
    p2: Vec<f64>,
}

impl Sorted {
    fn new(x: Vec<f64>) -> Self {
        let mut p1 = Vec::with_capacity(x.len() + 1);
        let mut p2 = Vec::with_capacity(x.len() + 1);
        let (mut s1, mut s2) = (0.0, 0.0);
        p1.push(0.0);
        p2.push(0.0);
        for &v in &x {
            s1 += v;
            s2 += v * v;
            p1.push(s1);
            p2.push(s2);
        }
        Sorted { x, p1, p2 }
    }

    fn len(&self) -> usize {
        self.x.len()
    }

    /// Cluster runs `[0, c0), [c0, c1), [c1, n)` induced by the centroids.
    fn assign(&self, c: &[f64; 3]) -> [usize; 2] {
        let b = boundaries_of(c);
        [
            self.x.partition_point(|&v| v <= b[0]),
            self.x.partition_point(|&v| v <= b[1]),
        ]
    }

    fn runs(&self, cuts: [usize; 2]) -> [(usize, usize); 3] {
        [(0, cuts[0]), (cuts[0], cuts[1]), (cuts[1], self.len())]
    }

    fn run_inertia(&self, (a, b): (usize, usize), c: f64) -> f64 {
        let m = (b - a) as f64;
        let s1 = self.p1[b] - self.p1[a];
        let s2 = self.p2[b] - self.p2[a];
        (s2 - 2.0 * c * s1 + m * c * c).max(0.0)
    }

    fn inertia(&self, cuts: [usize; 2], c: &[f64; 3]) -> f64 {
        self.runs(cuts)
            .iter()
            .zip(c)
            .map(|(&r, &c)| self.run_inertia(r, c))
            .sum()
    }

    /// Two-pass inertia, used for the reported value.
    fn exact_inertia(&self, cuts: [usize; 2], c: &[f64; 3]) -> f64 {
        self.runs(cuts)
            .iter()
            .zip(c)
            .map(|(&(a, b), &c)| self.x[a..b].iter().map(|v| (v - c) * (v - c)).sum::<f64>())
            .sum()
    }

    /// Adds centroids at the value farthest from its nearest existing
    /// centroid until there are three distinct ones.
    fn repair(&self, mut centroids: Vec<f64>) -> [f64; 3] {
        centroids.sort_by(f64::total_cmp);
        centroids.dedup();
        while centroids.len() < CLUSTERS {
            let mut best = (f64::NEG_INFINITY, 0.0);
            for &v in &self.x {
                let d = centroids
                    .iter()
                    .map(|c| (v - c).abs())
                    .fold(f64::INFINITY, f64::min);
                if d > best.0 {
                    best = (d, v);
                }
            }
            centroids.push(best.1);
            centroids.sort_by(f64::total_cmp);
        }
        [centroids[0], centroids[1], centroids[2]]
    }

    fn initial_centroids(&self) -> [f64; 3] {
        let n = self.len();
        let seeds = (0..CLUSTERS)
            .map(|j| self.x[((2 * j + 1) * n / (2 * CLUSTERS)).min(n - 1)])
            .collect();
        self.repair(seeds)
    }

    fn update(&self, cuts: [usize; 2]) -> [f64; 3] {
        let means = self
            .runs(cuts)
            .iter()
            .filter(|(a, b)| b > a)
            .map(|&(a, b)| (self.p1[b] - self.p1[a]) / (b - a) as f64)
            .collect();
        self.repair(means)
    }
}

fn has_empty_run(cuts: [usize; 2], n: usize) -> bool {
    cuts[0] == 0 || cuts[1] == cuts[0] || cuts[1] == n
}

/// Number of cut positions per axis in the restart grid.
const RESTART_GRID: usize = 16;

struct Run {
    centroids: [f64; 3],
    cuts: [usize; 2],
    inertia: f64,
    iterations: usize,
    trace: Vec<f64>,
}

impl Sorted {
    fn lloyd(&self, start: [f64; 3], max_iter: usize, tol: f64) -> Run {
        let mut centroids = start;
        let mut cuts = self.assign(&centroids);
        let mut inertia = self.inertia(cuts, &centroids);
        let mut trace = vec![inertia];
        let mut iterations = 0;
        while iterations < max_iter {
            let next = self.update(cuts);
            let next_cuts = self.assign(&next);
            let next_inertia = self.inertia(next_cuts, &next);
            iterations += 1;
            trace.push(next_inertia);
            debug_assert!(
                next_inertia <= inertia * (1.0 + 1e-9) + 1e-12,
                "inertia rose from {inertia} to {next_inertia}"
            );
            let improvement = if inertia > 0.0 {
                (inertia - next_inertia) / inertia
            } else {
                0.0
            };
            centroids = next;
            cuts = next_cuts;
            inertia = next_inertia;
            if improvement < tol && !has_empty_run(cuts, self.len()) {
                break;
            }
        }
        Run {
            centroids,
            cuts,
            inertia,
            iterations,
            trace,
        }
    }

    /// Starting centroids from the run means of every pair of candidate
    /// cuts: an even grid plus powers of two from either end, so that small
    /// tail clusters get a start of their own. With at most `RESTART_GRID`
    /// values every contiguous partition is tried.
    fn grid_starts(&self) -> Vec<[f64; 3]> {
        let n = self.len();
        let mut pos: Vec<usize> = (1..RESTART_GRID).map(|k| k * n / RESTART_GRID).collect();
        let mut tail = 1;
        while tail < n {
            pos.extend([tail, n - tail]);
            tail *= 2;
        }
        pos.retain(|&p| p > 0 && p < n);
        pos.sort_unstable();
        pos.dedup();
        let mut starts = Vec::new();
        for (i, &a) in pos.iter().enumerate() {
            for &b in &pos[i + 1..] {
                starts.push(self.update([a, b]));
            }
        }
        starts
    }
}

/// Lloyd's k-means with k = 3, returning the per-iteration inertia trace of
/// the run that was kept.
///
/// The first run starts from the 1/6, 3/6 and 5/6 quantiles. Further runs
/// start from a fixed grid of contiguous partitions and replace the kept run
/// only when strictly better, which guards against poor local minima. Each
/// run stops when the relative inertia improvement drops below `tol` (with no
/// empty cluster) or after `max_iter` updates.
pub fn kmeans3_traced(values: &[f32], max_iter: usize, tol: f64) -> Result<(ClusterAssignment, Vec<f64>)> {
    let s = Sorted::new(sorted_checked(values)?);
    let mut best = s.lloyd(s.initial_centroids(), max_iter, tol);
    for start in s.grid_starts() {
        let run = s.lloyd(start, max_iter, tol);
        if run.inertia < best.inertia * (1.0 - 1e-12) {
            best = run;
        }
    }

    let boundaries = boundaries_of(&best.centroids);
    let labels = values.iter().map(|&v| label_for(v as f64, &boundaries)).collect();
    let assignment = ClusterAssignment {
        centroids: best.centroids,
        boundaries,
        labels,
        inertia: s.exact_inertia(best.cuts, &best.centroids),
        iterations: best.iterations,
    };
    Ok((assignment, best.trace))
}

pub fn kmeans3(values: &[f32], max_iter: usize, tol: f64) -> Result<ClusterAssignment> {
    kmeans3_traced(values, max_iter, tol).map(|(a, _)| a)
}

/// `kmeans3` with the default iteration cap and tolerance.
pub fn kmeans3_default(values: &[f32]) -> Result<ClusterAssignment> {
    kmeans3(values, DEFAULT_MAX_ITER, DEFAULT_TOL)
}

pub const ORACLE_MAX_LEN: usize = 64;

/// Globally optimal 3-clustering by exhaustive search over contiguous
/// partitions of the sorted values. Only for small inputs.
pub fn kmeans3_oracle(values: &[f32]) -> Result<ClusterAssignment> {
    if values.len() > ORACLE_MAX_LEN {
        return Err(Error::Argument(format!(
            "oracle limited to {ORACLE_MAX_LEN} values, got {}",
            values.len()
        )));
    }
    let x = sorted_checked(values)?;
    let n = x.len();
    let cost = |r: &[f64]| {
        let m = r.iter().sum::<f64>() / r.len() as f64;
        (m, r.iter().map(|v| (v - m) * (v - m)).sum::<f64>())
    };
    let mut best: Option<(f64, [f64; 3])> = None;
    for i in 1..n - 1 {
        for j in i + 1..n {
            let parts = [cost(&x[..i]), cost(&x[i..j]), cost(&x[j..])];
            let total: f64 = parts.iter().map(|p| p.1).sum();
            if best.is_none_or(|(b, _)| total < b) {
                best = Some((total, [parts[0].0, parts[1].0, parts[2].0]));
            }
        }
    }
    let (inertia, centroids) = best.expect("at least three values");
    let boundaries = boundaries_of(&centroids);
    Ok(ClusterAssignment {
        centroids,
        boundaries,
        labels: values.iter().map(|&v| label_for(v as f64, &boundaries)).collect(),
        inertia,
        iterations: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-6
    }

    #[test]
    fn three_well_separated_pairs() {
        let a = kmeans3_default(&[1.0, 1.1, 5.0, 5.1, 9.0, 9.2]).unwrap();
        assert!(close(a.centroids[0], 1.05) && close(a.centroids[1], 5.05) && close(a.centroids[2], 9.1));
        assert_eq!(a.labels, vec![0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn all_equal_is_degenerate() {
        assert!(matches!(
            kmeans3_default(&[2.5; 4]),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(kmeans3_default(&[]), Err(Error::DegenerateInput(_))));
        assert!(matches!(
            kmeans3_default(&[1.0, 2.0, 1.0, 2.0]),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(
            kmeans3_oracle(&[3.0; 5]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            kmeans3_default(&[1.0, f32::NAN, 2.0, 3.0]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn oracle_small_cases() {
        let a = kmeans3_oracle(&[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(a.inertia, 0.0);
        assert_eq!(a.labels, vec![0, 1, 2]);

        // Three placements: {0}{.1}{.2,10}, {0}{.1,.2}{10}, {0,.1}{.2}{10};
        // the last two tie at 0.005 and keep 10 on its own.
        let a = kmeans3_oracle(&[0.0, 0.1, 0.2, 10.0]).unwrap();
        assert!((a.inertia - 0.005).abs() < 1e-6);
        assert_eq!(a.labels[3], 2);
        assert_eq!(a.counts()[2], 1);

        let a = kmeans3_oracle(&[-4.0, 7.5, 0.25]).unwrap();
        assert_eq!(a.inertia, 0.0);
    }

    #[test]
    fn duplicate_heavy_input_still_gets_three_clusters() {
        let mut v = vec![0.0f32; 50];
        v.extend([1.0, 2.0]);
        let a = kmeans3_default(&v).unwrap();
        assert!(a.centroids[0] < a.centroids[1] && a.centroids[1] < a.centroids[2]);
        assert_eq!(a.counts(), [50, 1, 1]);
        assert_eq!(a.inertia, 0.0);
    }

    #[test]
    fn permutation_invariance() {
        let v: Vec<f32> = (0..40).map(|i| ((i * 37 % 41) as f32).sin() * 3.0).collect();
        let mut r = v.clone();
        r.reverse();
        let (a, b) = (kmeans3_default(&v).unwrap(), kmeans3_default(&r).unwrap());
        assert_eq!(a.centroids, b.centroids);
        assert_eq!(a.inertia.to_bits(), b.inertia.to_bits());
        let mut lb = b.labels.clone();
        lb.reverse();
        assert_eq!(a.labels, lb);
    }
}
