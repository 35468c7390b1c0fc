//! Seeded Lloyd's k-means with farthest-point initialisation.
//!
//! The first restart picks each new centre as the point farthest from the
//! chosen ones. Later restarts draw it with probability proportional to that
//! squared distance, so they explore different starts on small inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TtaError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Stop once the relative inertia change falls below this.
    pub tol: f64,
    /// Independent restarts; the best by inertia is kept.
    pub restarts: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self { k, max_iter: 100, tol: 1e-6, restarts: 10, seed }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Sum of squared distances from each point to its cluster mean.
pub fn inertia_of(points: &[Vec<f64>], assignments: &[usize], k: usize) -> f64 {
    let centroids = centroids_of(points, assignments, k);
    points.iter().zip(assignments).map(|(p, &a)| sq_dist(p, &centroids[a])).sum()
}

fn centroids_of(points: &[Vec<f64>], assignments: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    sums
}

fn farthest_point_init(points: &[Vec<f64>], k: usize, first: usize) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[first].clone()];
    let mut gap: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centroids.len() < k {
        let (idx, _) = gap
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &d)| if d > b.1 { (i, d) } else { b });
        let c = points[idx].clone();
        for (g, p) in gap.iter_mut().zip(points) {
            *g = g.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn weighted_farthest_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let first = rng.random_range(0..points.len());
    let mut centroids = vec![points[first].clone()];
    let mut gap: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centroids.len() < k {
        let total: f64 = gap.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            gap.iter().position(|&g| {
                u -= g;
                u < 0.0
            })
            .unwrap_or(points.len() - 1)
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[idx].clone();
        for (g, p) in gap.iter_mut().zip(points) {
            *g = g.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, cfg: &KMeansConfig) -> KMeansResult {
    let k = cfg.k;
    let mut assignments = vec![usize::MAX; points.len()];
    let mut prev_inertia = f64::INFINITY;
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut changed = false;
        for (a, p) in assignments.iter_mut().zip(points) {
            let (j, _) = nearest(p, &centroids);
            changed |= *a != j;
            *a = j;
        }
        repair_empty(points, &mut assignments, &centroids, k);
        centroids = centroids_of(points, &assignments, k);
        let inertia: f64 = points.iter().zip(&assignments).map(|(p, &a)| sq_dist(p, &centroids[a])).sum();
        let rel = if prev_inertia.is_finite() && prev_inertia > 0.0 {
            (prev_inertia - inertia).abs() / prev_inertia
        } else if prev_inertia == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        prev_inertia = inertia;
        if !changed || rel < cfg.tol || iterations >= cfg.max_iter {
            return KMeansResult { assignments, centroids, inertia, iterations };
        }
    }
}

/// Gives every empty cluster the point farthest from its current centroid,
/// taking donors only from clusters with more than one member.
fn repair_empty(points: &[Vec<f64>], assignments: &mut [usize], centroids: &[Vec<f64>], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else { return };
        let donor = points
            .iter()
            .enumerate()
            .filter(|(i, _)| counts[assignments[*i]] > 1)
            .map(|(i, p)| (i, sq_dist(p, &centroids[assignments[i]])))
            .fold((usize::MAX, f64::NEG_INFINITY), |b, (i, d)| if d > b.1 { (i, d) } else { b });
        if donor.0 == usize::MAX {
            return;
        }
        assignments[donor.0] = empty;
    }
}

/// Clusters `points` into `cfg.k` groups; the best of `cfg.restarts` runs by
/// inertia is returned. Deterministic for a given seed.
pub fn kmeans(points: &[Vec<f64>], cfg: &KMeansConfig) -> Result<KMeansResult> {
    if cfg.k == 0 || cfg.k > points.len() {
        return Err(TtaError::Clustering(format!("k = {} for {} points", cfg.k, points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
        return Err(TtaError::Clustering("points must be finite and equally sized".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<KMeansResult> = None;
    for restart in 0..cfg.restarts.max(1) {
        let init = if restart == 0 {
            let first = rng.random_range(0..points.len());
            farthest_point_init(points, cfg.k, first)
        } else {
            weighted_farthest_init(points, cfg.k, &mut rng)
        };
        let run = lloyd(points, init, cfg);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");
    let mut counts = vec![0usize; cfg.k];
    best.assignments.iter().for_each(|&a| counts[a] += 1);
    if counts.contains(&0) {
        return Err(TtaError::Clustering("empty cluster after repair".into()));
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn two_blobs_split() {
        let pts = line(&[0.0, 0.1, 0.2, 0.3, 10.0, 10.1, 10.2, 10.3]);
        let r = kmeans(&pts, &KMeansConfig::new(2, 3)).unwrap();
        let a = &r.assignments;
        assert!(a[..4].iter().all(|&x| x == a[0]));
        assert!(a[4..].iter().all(|&x| x == a[4]));
        assert_ne!(a[0], a[4]);
        assert!((r.inertia - 0.1).abs() < 1e-9);
    }

    #[test]
    fn k_equals_n_is_exact() {
        let pts = line(&[1.0, 5.0, 2.5]);
        let r = kmeans(&pts, &KMeansConfig::new(3, 0)).unwrap();
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn duplicate_points_do_not_leave_empty_clusters() {
        let pts = line(&[1.0, 1.0, 1.0, 4.0]);
        let r = kmeans(&pts, &KMeansConfig::new(3, 0)).unwrap();
        let mut seen = [false; 3];
        r.assignments.iter().for_each(|&a| seen[a] = true);
        assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn deterministic_under_seed() {
        let pts: Vec<Vec<f64>> = (0..40).map(|i| vec![(i * 7 % 13) as f64, (i * 3 % 11) as f64]).collect();
        let a = kmeans(&pts, &KMeansConfig::new(4, 9)).unwrap();
        let b = kmeans(&pts, &KMeansConfig::new(4, 9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_k() {
        assert!(kmeans(&line(&[1.0]), &KMeansConfig::new(2, 0)).is_err());
        assert!(kmeans(&line(&[1.0]), &KMeansConfig::new(0, 0)).is_err());
    }
}
