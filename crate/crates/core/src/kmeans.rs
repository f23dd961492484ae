//! Seeded k-means with k-means++ seeding and restarts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig { k, max_iters: 100, restarts: 10, seed }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centers: Mat,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centers: &Mat) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centers.rows() {
        let d = sq_dist(x, centers.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus(points: &Mat, k: usize, rng: &mut ChaCha8Rng) -> Mat {
    let n = points.rows();
    let mut centers = Mat::zeros(k, points.cols());
    centers.row_mut(0).copy_from_slice(points.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), centers.row(c)));
        }
    }
    centers
}

fn lloyd(points: &Mat, mut centers: Mat, max_iters: usize) -> KMeansResult {
    let (n, d, k) = (points.rows(), points.cols(), centers.rows());
    let mut labels = vec![usize::MAX; n];
    for _ in 0..max_iters {
        let mut changed = false;
        for (i, l) in labels.iter_mut().enumerate() {
            let (c, _) = nearest(points.row(i), &centers);
            if *l != c {
                *l = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Mat::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, v) in sums.row_mut(l).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            // Empty clusters keep their previous center.
            if counts[c] > 0 {
                for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
    }
    let inertia = (0..n).map(|i| sq_dist(points.row(i), centers.row(labels[i]))).sum();
    KMeansResult { labels, centers, inertia }
}

/// Cluster the rows of `points`, keeping the restart with the lowest inertia.
pub fn kmeans(points: &Mat, cfg: &KMeansConfig) -> Result<KMeansResult> {
    if cfg.k == 0 {
        return Err(Error::arg("K must be at least 1"));
    }
    if cfg.k > points.rows() {
        return Err(Error::arg(format!("K = {} exceeds the {} locations", cfg.k, points.rows())));
    }
    if !points.is_finite() {
        return Err(Error::arg("k-means input is not finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..cfg.restarts.max(1) {
        let init = plus_plus(points, cfg.k, &mut rng);
        let r = lloyd(points, init, cfg.max_iters.max(1));
        if best.as_ref().is_none_or(|b| r.inertia < b.inertia) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cluster() {
        let p = Mat::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0], vec![5.0, 5.0]]);
        let r = kmeans(&p, &KMeansConfig::new(1, 0)).unwrap();
        assert_eq!(r.labels, vec![0, 0, 0]);
    }

    #[test]
    fn separated_regions_are_recovered() {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = Normal::new(0.0, 0.05).unwrap();
        // Left half of an 8x8 grid near +1, right half near -1.
        let rows: Vec<Vec<f64>> = (0..64)
            .map(|i| {
                let base = if i % 8 < 4 { 1.0 } else { -1.0 };
                (0..4).map(|_| base + noise.sample(&mut rng)).collect()
            })
            .collect();
        let r = kmeans(&Mat::from_rows(&rows), &KMeansConfig::new(2, 3)).unwrap();
        for i in 0..64 {
            assert_eq!(r.labels[i] == r.labels[0], i % 8 < 4);
        }
        let again = kmeans(&Mat::from_rows(&rows), &KMeansConfig::new(2, 3)).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn too_many_clusters() {
        let p = Mat::zeros(3, 2);
        assert!(kmeans(&p, &KMeansConfig::new(4, 0)).is_err());
        assert!(kmeans(&p, &KMeansConfig::new(0, 0)).is_err());
        assert!(kmeans(&p, &KMeansConfig::new(3, 0)).is_ok());
    }
}
