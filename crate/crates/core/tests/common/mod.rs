//! Independent reference implementations shared by the integration suites.
#![allow(dead_code)]

use edadet::boxes::BoxXyxy;
use edadet::proposals::Proposal;
use edadet::{BoxCxcywh, Mat};
use rand::Rng;

/// Bilinear interpolation written as a tent-kernel sum over every cell.
pub fn bilinear_tent(map: &Mat, h: usize, w: usize, y: f64, x: f64) -> Vec<f64> {
    let mut out = vec![0.0; map.cols()];
    for cy in 0..h {
        for cx in 0..w {
            let wt = (1.0 - (y - cy as f64).abs()).max(0.0) * (1.0 - (x - cx as f64).abs()).max(0.0);
            if wt > 0.0 {
                for (o, v) in out.iter_mut().zip(map.row(cy * w + cx)) {
                    *o += wt * v;
                }
            }
        }
    }
    out
}

/// RoIAlign by brute force: one sample per output bin center in cell
/// coordinates (cell `i` centered at `i`), clamped to the grid.
pub fn roi_align_oracle(map: &Mat, h: usize, w: usize, roi: &BoxXyxy, out: (usize, usize)) -> Mat {
    let (oh, ow) = out;
    let mut res = Mat::zeros(oh * ow, map.cols());
    for i in 0..oh {
        for j in 0..ow {
            let py = roi.y1 * h as f64 + (i as f64 + 0.5) / oh as f64 * roi.height() * h as f64;
            let px = roi.x1 * w as f64 + (j as f64 + 0.5) / ow as f64 * roi.width() * w as f64;
            let y = (py - 0.5).clamp(0.0, (h - 1) as f64);
            let x = (px - 0.5).clamp(0.0, (w - 1) as f64);
            res.row_mut(i * ow + j).copy_from_slice(&bilinear_tent(map, h, w, y, x));
        }
    }
    res
}

/// Mean of the `k` largest entries of each column, by full sort.
pub fn topk_mean_oracle(m: &Mat, k: usize) -> Vec<f64> {
    (0..m.cols())
        .map(|c| {
            let mut col: Vec<f64> = (0..m.rows()).map(|r| m.get(r, c)).collect();
            col.sort_by(|a, b| b.partial_cmp(a).unwrap());
            col[..k].iter().sum::<f64>() / k as f64
        })
        .collect()
}

/// Minimum total cost over all injective assignments of the smaller side
/// into the larger.
pub fn exhaustive_min_cost(cost: &[Vec<f64>]) -> f64 {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let transpose = rows > cols;
    let (small, large) = if transpose { (cols, rows) } else { (rows, cols) };
    let at = |s: usize, l: usize| if transpose { cost[l][s] } else { cost[s][l] };
    fn rec(i: usize, small: usize, large: usize, used: &mut Vec<bool>, at: &dyn Fn(usize, usize) -> f64) -> f64 {
        if i == small {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for l in 0..large {
            if !used[l] {
                used[l] = true;
                best = best.min(at(i, l) + rec(i + 1, small, large, used, at));
                used[l] = false;
            }
        }
        best
    }
    rec(0, small, large, &mut vec![false; large], &at)
}

pub fn random_box<R: Rng>(rng: &mut R) -> BoxXyxy {
    let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
    let (c, d) = (rng.random::<f64>(), rng.random::<f64>());
    let (x1, x2) = (a.min(b), a.max(b).max(a.min(b) + 0.02));
    let (y1, y2) = (c.min(d), c.max(d).max(c.min(d) + 0.02));
    BoxXyxy::new(x1, y1, x2.min(1.0), y2.min(1.0))
}

pub fn random_proposal<R: Rng>(rng: &mut R) -> Proposal {
    let b = random_box(rng);
    let BoxCxcywh { cx, cy, w, h } = b.to_cxcywh();
    Proposal { bbox: BoxCxcywh { cx, cy, w, h }, objectness: rng.random_range(0.01..0.99) }
}

/// Uniform random row-stochastic matrix.
pub fn random_probs<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for r in 0..rows {
        let v: Vec<f64> = (0..cols).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = v.iter().sum();
        for (c, x) in v.iter().enumerate() {
            m.set(r, c, x / s);
        }
    }
    m
}

/// Central finite-difference check of `f` at `x` against `grad`; returns the
/// worst relative error `|g - fd| / max(|g|, |fd|, 1e-4)` over entries.
pub fn finite_difference_error(x: &Mat, grad: &Mat, step: f64, f: &dyn Fn(&Mat) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..x.data().len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let fd = (f(&plus) - f(&minus)) / (2.0 * step);
        let g = grad.data()[i];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-4);
        worst = worst.max(rel);
    }
    worst
}
