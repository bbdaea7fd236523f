//! Monte-Carlo checks of the transport perturbation bounds.
//!
//! Two empirical studies over synthetic Gaussian point clouds:
//!
//! * [`lemma1_check`] — compares the exact empirical 2-Wasserstein distance
//!   between two clouds before and after adding per-point Gaussian noise.
//!   A trial passes when `W_sigma <= W + slack` and
//!   `W <= W_sigma + sqrt(d * (sigma_s^2 + sigma_q^2)) + slack`, where the
//!   slack absorbs finite-sample estimator noise (three bootstrap standard
//!   deviations of `W`).
//! * [`thm_err_scaling`] — measures how far barycentric images of the source
//!   points move when the transport plan is recomputed on noisy clouds, and
//!   correlates that displacement with `sqrt(2 * d) * sigma` across a noise
//!   grid.
//!
//! Distances come from [`empirical_w2`], an exact assignment solver
//! (cubic-time shortest augmenting paths), not from the entropic
//! approximation — these checks are oracle-grade by construction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::ot::{barycentric_map, sinkhorn, uniform_weights, SinkhornParams};
use crate::rng::{substream_rng, Rng};
use crate::tensor::Tensor;
use crate::{Error, Result};
// Required for no_std builds; when dev-dependencies pull std into the crate
// graph, std's inherent float methods shadow the trait and the import idles.
#[allow(unused_imports)]
use num_traits::Float;

/// Largest cloud size accepted by the exact solver.
pub const MAX_ASSIGNMENT_SIZE: usize = 256;

/// Bootstrap resamples used to estimate the sampling noise of `W`.
pub const BOOTSTRAP_RESAMPLES: usize = 50;

/// Minimum-cost perfect matching on a square cost matrix via shortest
/// augmenting paths with potentials. Returns the column assigned to each row
/// and the total matched cost.
pub fn min_cost_assignment(cost: &Tensor) -> Result<(Vec<usize>, f64)> {
    if cost.rank() != 2 || cost.shape()[0] != cost.shape()[1] {
        return Err(Error::Shape(format!(
            "assignment needs a square cost matrix, got {:?}",
            cost.shape()
        )));
    }
    let n = cost.shape()[0];
    if n == 0 || n > MAX_ASSIGNMENT_SIZE {
        return Err(Error::Config(format!(
            "assignment size must lie in 1..={MAX_ASSIGNMENT_SIZE}, got {n}"
        )));
    }
    let row_to_col = assignment_flat(cost.data(), n);
    let total: f64 = row_to_col.iter().enumerate().map(|(i, &j)| cost.at2(i, j)).sum();
    Ok((row_to_col, total))
}

/// Shortest-augmenting-path assignment on a flat row-major `n`x`n` matrix.
/// Internal 1-indexed formulation with dual potentials `u`, `v`. Unassigned
/// columns live in a dense shrinking list so each path step touches only the
/// columns that can still be reached, and column duals start at the column
/// minima, which shortens the early augmenting paths.
fn assignment_flat(cost: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    for j in 1..=n {
        let mut mn = inf;
        for i in 0..n {
            let c = cost[i * n + j - 1];
            if c < mn {
                mn = c;
            }
        }
        v[j] = mn;
    }
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j (0 = free)
    let mut way = vec![0usize; n + 1];
    let mut free: Vec<usize> = Vec::with_capacity(n);
    let mut minv_f: Vec<f64> = Vec::with_capacity(n);
    let mut used_cols: Vec<usize> = Vec::with_capacity(n + 1);
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        free.clear();
        free.extend(1..=n);
        minv_f.clear();
        minv_f.resize(n, inf);
        used_cols.clear();
        used_cols.push(0);
        loop {
            let i0 = p[j0];
            let base = (i0 - 1) * n;
            let off = u[i0];
            let mut delta = inf;
            let mut pos = 0usize;
            for (k, &j) in free.iter().enumerate() {
                let cur = cost[base + j - 1] - off - v[j];
                if cur < minv_f[k] {
                    minv_f[k] = cur;
                    way[j] = j0;
                }
                if minv_f[k] < delta {
                    delta = minv_f[k];
                    pos = k;
                }
            }
            for &j in &used_cols {
                u[p[j]] += delta;
                v[j] -= delta;
            }
            for m in minv_f.iter_mut() {
                *m -= delta;
            }
            let j1 = free.swap_remove(pos);
            minv_f.swap_remove(pos);
            used_cols.push(j1);
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

fn check_cloud(pts: &[Tensor], side: &str) -> Result<usize> {
    if pts.is_empty() {
        return Err(Error::Shape(format!("{side} cloud is empty")));
    }
    let d = pts[0].len();
    for p in pts {
        if p.rank() != 1 || p.len() != d {
            return Err(Error::Shape(format!(
                "{side} cloud must hold rank-1 points of dimension {d}, got {:?}",
                p.shape()
            )));
        }
    }
    Ok(d)
}

/// Exact empirical 2-Wasserstein distance between two equally sized,
/// uniformly weighted point clouds: the square root of the mean matched
/// squared distance under the optimal assignment. Matched pair costs are
/// sorted before summation so the result is bitwise symmetric in its
/// arguments.
pub fn empirical_w2(xs: &[Tensor], ys: &[Tensor]) -> Result<f64> {
    let dx = check_cloud(xs, "first")?;
    let dy = check_cloud(ys, "second")?;
    if dx != dy {
        return Err(Error::Domain(format!(
            "cloud dimensions differ: {dx} vs {dy}"
        )));
    }
    if xs.len() != ys.len() {
        return Err(Error::Domain(format!(
            "clouds must be equally sized, got {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len();
    if n > MAX_ASSIGNMENT_SIZE {
        return Err(Error::Config(format!(
            "cloud size {n} exceeds the exact-solver cap {MAX_ASSIGNMENT_SIZE}"
        )));
    }
    let mut cost = Vec::with_capacity(n * n);
    for x in xs {
        for y in ys {
            cost.push(sq_dist(x.data(), y.data()));
        }
    }
    Ok(w2_from_flat(&cost, n))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Assignment + sorted reduction on a flat cost matrix.
fn w2_from_flat(cost: &[f64], n: usize) -> f64 {
    let row_to_col = assignment_flat(cost, n);
    let mut matched: Vec<f64> = row_to_col
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .collect();
    matched.sort_by(|a, b| a.partial_cmp(b).expect("finite costs"));
    let total: f64 = matched.iter().sum();
    (total / n as f64).sqrt()
}

/// One row of a [`LemmaReport`].
#[derive(Debug, Clone, Serialize)]
pub struct LemmaTrial {
    /// Distance between the clean clouds.
    pub w: f64,
    /// Distance between the noise-perturbed clouds.
    pub w_sigma: f64,
    /// `sqrt(d * (sigma_s^2 + sigma_q^2))`.
    pub bound_rhs: f64,
    /// Three bootstrap standard deviations of `w`.
    pub slack: f64,
    pub pass: bool,
}

/// Outcome of [`lemma1_check`].
#[derive(Debug, Clone, Serialize)]
pub struct LemmaReport {
    pub d: usize,
    pub n: usize,
    pub sigma_s: f64,
    pub sigma_q: f64,
    pub trials: usize,
    pub pass_fraction: f64,
    pub per_trial: Vec<LemmaTrial>,
}

/// Sample an `n`-point standard normal cloud in `d` dimensions, shifted by
/// `shift` along the first axis.
fn gaussian_cloud(n: usize, d: usize, shift: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..d)
                .map(|k| {
                    let z: f64 = rng.sample(StandardNormal);
                    if k == 0 {
                        z + shift
                    } else {
                        z
                    }
                })
                .collect()
        })
        .collect()
}

fn flat_cost(xs: &[Vec<f64>], ys: &[Vec<f64>], out: &mut Vec<f64>) {
    out.clear();
    for x in xs {
        for y in ys {
            out.push(sq_dist(x, y));
        }
    }
}

/// Run one trial of the noise-perturbation study; see [`lemma1_check`].
/// Trials are independent (seeded by `master` and `trial`), so callers may
/// distribute them over threads and assemble the report themselves.
pub fn lemma1_trial(
    d: usize,
    n: usize,
    sigma_s: f64,
    sigma_q: f64,
    master: u64,
    trial: u64,
) -> Result<LemmaTrial> {
    if d == 0 || n < 2 || n > MAX_ASSIGNMENT_SIZE {
        return Err(Error::Config(format!(
            "trial needs d >= 1 and 2 <= n <= {MAX_ASSIGNMENT_SIZE}, got d={d}, n={n}"
        )));
    }
    if sigma_s < 0.0 || sigma_q < 0.0 {
        return Err(Error::Domain("noise levels must be non-negative".into()));
    }
    let mut rng = substream_rng(master, "lemma1-trial", trial);
    let xs = gaussian_cloud(n, d, 0.0, &mut rng);
    let ys = gaussian_cloud(n, d, 2.0, &mut rng);
    let xs_noisy: Vec<Vec<f64>> = xs
        .iter()
        .map(|p| {
            p.iter()
                .map(|&v| v + sigma_s * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let ys_noisy: Vec<Vec<f64>> = ys
        .iter()
        .map(|p| {
            p.iter()
                .map(|&v| v + sigma_q * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();

    let mut cost = Vec::with_capacity(n * n);
    flat_cost(&xs, &ys, &mut cost);
    let w = w2_from_flat(&cost, n);
    let mut cost_noisy = Vec::with_capacity(n * n);
    flat_cost(&xs_noisy, &ys_noisy, &mut cost_noisy);
    let w_sigma = w2_from_flat(&cost_noisy, n);

    // Bootstrap the clean estimate: resample rows and columns of the cached
    // cost matrix with replacement and redo the matching on the submatrix.
    let mut sub = vec![0.0; n * n];
    let mut values = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let cols: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        for (ri, &r) in rows.iter().enumerate() {
            for (ci, &c) in cols.iter().enumerate() {
                sub[ri * n + ci] = cost[r * n + c];
            }
        }
        values.push(w2_from_flat(&sub, n));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (values.len() - 1) as f64;
    let slack = 3.0 * var.sqrt();

    let bound_rhs = (d as f64 * (sigma_s * sigma_s + sigma_q * sigma_q)).sqrt();
    let pass = w_sigma <= w + slack && w <= w_sigma + bound_rhs + slack;
    Ok(LemmaTrial {
        w,
        w_sigma,
        bound_rhs,
        slack,
        pass,
    })
}

/// Monte-Carlo study of the transport-cost perturbation bound.
///
/// Each trial samples two unit-covariance Gaussian clouds with means two
/// apart, adds `sigma_s` / `sigma_q` Gaussian noise per point, and tests the
/// two-sided bound described in the module docs. Trials are seeded
/// independently from `master`.
pub fn lemma1_check(
    d: usize,
    n: usize,
    sigma_s: f64,
    sigma_q: f64,
    trials: usize,
    master: u64,
) -> Result<LemmaReport> {
    if trials < 10 {
        return Err(Error::Config(format!("at least 10 trials required, got {trials}")));
    }
    let mut per_trial = Vec::with_capacity(trials);
    for t in 0..trials {
        per_trial.push(lemma1_trial(d, n, sigma_s, sigma_q, master, t as u64)?);
    }
    let passes = per_trial.iter().filter(|t| t.pass).count();
    Ok(LemmaReport {
        d,
        n,
        sigma_s,
        sigma_q,
        trials,
        pass_fraction: passes as f64 / trials as f64,
        per_trial,
    })
}

/// Outcome of [`thm_err_scaling`].
#[derive(Debug, Clone, Serialize)]
pub struct ScalingReport {
    pub d: usize,
    pub n: usize,
    pub trials: usize,
    pub sigma_grid: Vec<f64>,
    /// Mean barycentric displacement per noise level (averaged over trials).
    pub mean_error: Vec<f64>,
    /// `sqrt(2 * d) * sigma` per noise level.
    pub predicted: Vec<f64>,
    /// Pearson correlation between `mean_error` and `predicted`.
    pub pearson: f64,
    /// Fraction of trials whose per-trial error is non-decreasing in sigma.
    pub monotone_fraction: f64,
    /// Per-trial, per-sigma displacement, row-major `trials x grid`.
    pub per_trial_error: Vec<Vec<f64>>,
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    num / (va * vb).sqrt()
}

/// Measure how the barycentric images of the source points move when the
/// entropic plan is recomputed on noise-perturbed clouds.
///
/// For every trial the clean clouds and the standard-normal noise directions
/// are drawn once; each grid value `sigma` scales the same noise, so
/// displacement curves are comparable within a trial. The displacement for
/// one trial and noise level is the mean Euclidean distance between the
/// clean-plan and noisy-plan barycentric images of the source points.
pub fn thm_err_scaling(
    d: usize,
    n: usize,
    sigma_grid: &[f64],
    trials: usize,
    master: u64,
) -> Result<ScalingReport> {
    if sigma_grid.len() < 3 {
        return Err(Error::Config(format!(
            "noise grid needs at least 3 values, got {}",
            sigma_grid.len()
        )));
    }
    for w in sigma_grid.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::Config("noise grid must be strictly increasing".into()));
        }
    }
    if sigma_grid[0] < 0.0 {
        return Err(Error::Domain("noise levels must be non-negative".into()));
    }
    if d == 0 || n < 2 || trials == 0 {
        return Err(Error::Config(format!(
            "need d >= 1, n >= 2, trials >= 1; got d={d}, n={n}, trials={trials}"
        )));
    }
    let params = SinkhornParams::default();
    let weights = uniform_weights(n);
    let mut per_trial_error = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = substream_rng(master, "plan-shift-trial", t as u64);
        let xs = gaussian_cloud(n, d, 0.0, &mut rng);
        let ys = gaussian_cloud(n, d, 2.0, &mut rng);
        let nx = gaussian_cloud(n, d, 0.0, &mut rng);
        let ny = gaussian_cloud(n, d, 0.0, &mut rng);

        let xs_t: Vec<Tensor> = xs.iter().map(|p| Tensor::from_vec(&[d], p.clone()).unwrap()).collect();
        let ys_t: Vec<Tensor> = ys.iter().map(|p| Tensor::from_vec(&[d], p.clone()).unwrap()).collect();
        let clean_cost = crate::ot::cost_matrix(&xs_t, &ys_t)?;
        let clean_plan = sinkhorn(&clean_cost, &weights, &weights, &params)?;
        let clean_mapped = barycentric_map(&clean_plan.pi, &ys_t)?;

        let mut row = Vec::with_capacity(sigma_grid.len());
        for &sigma in sigma_grid {
            if sigma == 0.0 {
                row.push(0.0);
                continue;
            }
            let xs_n: Vec<Tensor> = xs
                .iter()
                .zip(&nx)
                .map(|(p, e)| {
                    let v: Vec<f64> = p.iter().zip(e).map(|(&a, &b)| a + sigma * b).collect();
                    Tensor::from_vec(&[d], v).unwrap()
                })
                .collect();
            let ys_n: Vec<Tensor> = ys
                .iter()
                .zip(&ny)
                .map(|(p, e)| {
                    let v: Vec<f64> = p.iter().zip(e).map(|(&a, &b)| a + sigma * b).collect();
                    Tensor::from_vec(&[d], v).unwrap()
                })
                .collect();
            let noisy_cost = crate::ot::cost_matrix(&xs_n, &ys_n)?;
            let noisy_plan = sinkhorn(&noisy_cost, &weights, &weights, &params)?;
            let noisy_mapped = barycentric_map(&noisy_plan.pi, &ys_n)?;
            let mean_disp = clean_mapped
                .iter()
                .zip(&noisy_mapped)
                .map(|(a, b)| sq_dist(a.data(), b.data()).sqrt())
                .sum::<f64>()
                / n as f64;
            row.push(mean_disp);
        }
        per_trial_error.push(row);
    }

    let g = sigma_grid.len();
    let mean_error: Vec<f64> = (0..g)
        .map(|k| per_trial_error.iter().map(|r| r[k]).sum::<f64>() / trials as f64)
        .collect();
    let predicted: Vec<f64> = sigma_grid.iter().map(|&s| (2.0 * d as f64).sqrt() * s).collect();
    let monotone = per_trial_error
        .iter()
        .filter(|r| r.windows(2).all(|w| w[1] >= w[0] - 1e-12))
        .count();
    Ok(ScalingReport {
        d,
        n,
        trials,
        sigma_grid: sigma_grid.to_vec(),
        pearson: pearson(&mean_error, &predicted),
        mean_error,
        predicted,
        monotone_fraction: monotone as f64 / trials as f64,
        per_trial_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::exact_ot_bruteforce;
    use crate::rng::component_rng;

    fn cloud_tensors(pts: &[Vec<f64>]) -> Vec<Tensor> {
        pts.iter()
            .map(|p| Tensor::from_vec(&[p.len()], p.clone()).unwrap())
            .collect()
    }

    #[test]
    fn assignment_hand_cases() {
        // 2x2: diagonal is cheaper.
        let c = Tensor::from_vec(&[2, 2], vec![1.0, 10.0, 10.0, 1.0]).unwrap();
        let (cols, total) = min_cost_assignment(&c).unwrap();
        assert_eq!(cols, vec![0, 1]);
        assert!((total - 2.0).abs() < 1e-12);
        // 3x3 with a forced crossing.
        let c = Tensor::from_vec(&[3, 3], vec![4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0]).unwrap();
        let (_, total) = min_cost_assignment(&c).unwrap();
        assert!((total - 5.0).abs() < 1e-12, "optimal is 1 + 2 + 2 = 5, got {total}");
    }

    #[test]
    fn assignment_matches_bruteforce() {
        let mut rng = component_rng(5, "theory-test");
        for _ in 0..10 {
            let n = 4;
            let data: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>() * 3.0).collect();
            let c = Tensor::from_vec(&[n, n], data).unwrap();
            let (_, total) = min_cost_assignment(&c).unwrap();
            let u = uniform_weights(n);
            let exact = exact_ot_bruteforce(&c, &u, &u).unwrap();
            assert!(
                (total / n as f64 - exact).abs() < 1e-9,
                "assignment {} vs transport oracle {exact}",
                total / n as f64
            );
        }
    }

    #[test]
    fn w2_basic_identities() {
        let mut rng = component_rng(7, "theory-test");
        let xs = cloud_tensors(&gaussian_cloud(12, 3, 0.0, &mut rng));
        assert_eq!(empirical_w2(&xs, &xs).unwrap(), 0.0);
        // Two single points three apart.
        let a = [Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap()];
        let b = [Tensor::from_vec(&[2], vec![3.0, 0.0]).unwrap()];
        assert!((empirical_w2(&a, &b).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn w2_is_bitwise_symmetric() {
        let mut rng = component_rng(11, "theory-test");
        for _ in 0..5 {
            let xs = cloud_tensors(&gaussian_cloud(20, 4, 0.0, &mut rng));
            let ys = cloud_tensors(&gaussian_cloud(20, 4, 1.0, &mut rng));
            let ab = empirical_w2(&xs, &ys).unwrap();
            let ba = empirical_w2(&ys, &xs).unwrap();
            assert_eq!(ab.to_bits(), ba.to_bits());
        }
    }

    #[test]
    fn w2_triangle_inequality_spot_checks() {
        let mut rng = component_rng(13, "theory-test");
        for _ in 0..5 {
            let xs = cloud_tensors(&gaussian_cloud(10, 3, 0.0, &mut rng));
            let ys = cloud_tensors(&gaussian_cloud(10, 3, 1.0, &mut rng));
            let zs = cloud_tensors(&gaussian_cloud(10, 3, -1.0, &mut rng));
            let xy = empirical_w2(&xs, &ys).unwrap();
            let yz = empirical_w2(&ys, &zs).unwrap();
            let xz = empirical_w2(&xs, &zs).unwrap();
            assert!(xz <= xy + yz + 1e-9);
        }
    }

    #[test]
    fn w2_size_checks() {
        let a = cloud_tensors(&vec![vec![0.0, 0.0]]);
        let b = cloud_tensors(&vec![vec![0.0, 0.0], vec![1.0, 1.0]]);
        assert!(empirical_w2(&a, &b).is_err());
    }

    #[test]
    fn zero_noise_trial_is_tight() {
        let t = lemma1_trial(4, 24, 0.0, 0.0, 99, 0).unwrap();
        assert_eq!(t.w, t.w_sigma);
        assert_eq!(t.bound_rhs, 0.0);
        assert!(t.pass);
    }

    #[test]
    fn bound_rhs_arithmetic() {
        let t = lemma1_trial(8, 16, 0.3, 0.3, 1, 0).unwrap();
        assert!((t.bound_rhs - (8.0f64 * 0.18).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn small_lemma_study_mostly_passes() {
        let report = lemma1_check(4, 32, 0.1, 0.1, 10, 2024).unwrap();
        assert_eq!(report.per_trial.len(), 10);
        assert!(
            report.pass_fraction >= 0.8,
            "small study pass fraction {}",
            report.pass_fraction
        );
        assert!(lemma1_check(4, 32, 0.1, 0.1, 5, 0).is_err(), "too few trials");
    }

    #[test]
    fn scaling_study_shape_and_zero_floor() {
        let grid = [0.0, 0.1, 0.3];
        let report = thm_err_scaling(4, 24, &grid, 4, 7).unwrap();
        assert_eq!(report.mean_error.len(), 3);
        assert_eq!(report.per_trial_error.len(), 4);
        assert_eq!(report.mean_error[0], 0.0, "zero noise leaves the plan unchanged");
        assert!(report.mean_error[2] > report.mean_error[0]);
        for (p, s) in report.predicted.iter().zip(grid.iter()) {
            assert!((p - (8.0f64).sqrt() * s).abs() < 1e-12);
        }
        assert!(thm_err_scaling(4, 24, &[0.2, 0.1, 0.3], 4, 7).is_err(), "non-increasing grid");
    }

    #[test]
    fn trials_are_reproducible_and_independent() {
        let a = lemma1_trial(4, 16, 0.2, 0.2, 5, 3).unwrap();
        let b = lemma1_trial(4, 16, 0.2, 0.2, 5, 3).unwrap();
        assert_eq!(a.w.to_bits(), b.w.to_bits());
        assert_eq!(a.w_sigma.to_bits(), b.w_sigma.to_bits());
        let c = lemma1_trial(4, 16, 0.2, 0.2, 5, 4).unwrap();
        assert_ne!(a.w.to_bits(), c.w.to_bits());
    }
}
