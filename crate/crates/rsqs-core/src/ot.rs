//! Entropic optimal transport between weighted point clouds.
//!
//! The solver minimises `beta * <cost, plan> + (1 - beta) * sum(plan * ln plan)`
//! over couplings with fixed marginals, which is ordinary entropic transport
//! with regularisation strength `lambda = (1 - beta) / beta`. `beta = 0.5`
//! gives `lambda = 1`; `beta -> 1` approaches the unregularised problem and
//! `lambda` is floored at [`LAMBDA_MIN`] so the iteration stays stable.
//!
//! [`sinkhorn`] runs the scaling iteration in the log domain on a cost matrix
//! divided by its median entry (the reported cost is against the original,
//! unscaled matrix). [`exact_ot_bruteforce`] solves tiny instances exactly and
//! serves as the oracle the iterative solver is checked against.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;
use crate::{Error, Result};
// Required for no_std builds; when dev-dependencies pull std into the crate
// graph, std's inherent float methods shadow the trait and the import idles.
#[allow(unused_imports)]
use num_traits::Float;

/// Smallest regularisation strength used by [`sinkhorn`]; `beta` values close
/// to 1 are solved at this floor instead of the exact limit.
pub const LAMBDA_MIN: f64 = 1e-3;

/// Settings for [`sinkhorn`].
#[derive(Debug, Clone, Copy)]
pub struct SinkhornParams {
    /// Trade-off between transport cost and plan entropy, in `(0, 1]`.
    pub beta: f64,
    /// Iteration cap.
    pub max_iter: usize,
    /// Stop once the worst marginal violation drops below this.
    pub tol: f64,
}

impl Default for SinkhornParams {
    fn default() -> SinkhornParams {
        SinkhornParams {
            beta: 0.5,
            max_iter: 1000,
            tol: 1e-6,
        }
    }
}

/// Result of a [`sinkhorn`] run.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    /// Coupling matrix of shape `(n, m)`; rows sum to `a`, columns to `b`.
    pub pi: Tensor,
    /// Transport cost `<pi, cost>` against the original (unscaled) matrix.
    pub cost: f64,
    /// Iterations actually run.
    pub iterations: usize,
    /// Whether the marginal violation reached `tol` within `max_iter`.
    pub converged: bool,
    /// Final worst-case absolute marginal violation.
    pub marginal_violation: f64,
}

/// `n` equal weights summing to one.
pub fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Pairwise squared Euclidean distances between two rank-1 point collections;
/// returns an `(xs.len(), ys.len())` matrix.
pub fn cost_matrix(xs: &[Tensor], ys: &[Tensor]) -> Result<Tensor> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::Shape("cost matrix needs non-empty point sets".into()));
    }
    let d = xs[0].len();
    for (side, set) in [("first", xs), ("second", ys)] {
        for p in set {
            if p.rank() != 1 || p.len() != d {
                return Err(Error::Shape(format!(
                    "cost matrix: {side} set must hold rank-1 points of dimension {d}, got {:?}",
                    p.shape()
                )));
            }
        }
    }
    let (n, m) = (xs.len(), ys.len());
    let mut data = Vec::with_capacity(n * m);
    for x in xs {
        for y in ys {
            let mut s = 0.0;
            for (xv, yv) in x.data().iter().zip(y.data()) {
                let dvi = xv - yv;
                s += dvi * dvi;
            }
            data.push(s);
        }
    }
    Tensor::from_vec(&[n, m], data)
}

fn validate_weights(w: &[f64], side: &str, len: usize) -> Result<()> {
    if w.len() != len {
        return Err(Error::Shape(format!(
            "{side} marginal has {} weights for {len} points",
            w.len()
        )));
    }
    let mut total = 0.0;
    for &v in w {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Domain(format!("{side} marginal weights must be positive, got {v}")));
        }
        total += v;
    }
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("{side} marginal sums to {total}, expected 1")));
    }
    Ok(())
}

fn check_cost(cost: &Tensor) -> Result<(usize, usize)> {
    if cost.rank() != 2 {
        return Err(Error::Shape(format!("cost must be rank-2, got {:?}", cost.shape())));
    }
    if cost.data().iter().any(|&c| c < 0.0) {
        return Err(Error::Domain("cost entries must be non-negative".into()));
    }
    Ok((cost.shape()[0], cost.shape()[1]))
}

/// Median of the cost entries, used to normalise the scale of the problem
/// before exponentiation. Degenerate (all-tiny) matrices fall back to 1.
fn median_scale(cost: &Tensor) -> f64 {
    let mut v: Vec<f64> = cost.data().to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite costs"));
    let n = v.len();
    let med = if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    };
    if med > 1e-300 {
        med
    } else {
        1.0
    }
}

fn lse(buf: &[f64]) -> f64 {
    let mx = buf.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = buf.iter().map(|&v| (v - mx).exp()).sum();
    mx + s.ln()
}

/// Entropy-regularised transport via log-domain scaling iterations.
///
/// `a` and `b` are strictly positive marginals summing to one over the rows
/// and columns of `cost`. Column marginals are matched exactly after every
/// sweep; iteration stops when the worst row violation is below `tol`.
pub fn sinkhorn(cost: &Tensor, a: &[f64], b: &[f64], params: &SinkhornParams) -> Result<TransportPlan> {
    let (n, m) = check_cost(cost)?;
    validate_weights(a, "row", n)?;
    validate_weights(b, "column", m)?;
    if !(params.beta > 0.0 && params.beta <= 1.0) {
        return Err(Error::Domain(format!("beta must lie in (0, 1], got {}", params.beta)));
    }
    if params.max_iter == 0 {
        return Err(Error::Config("max_iter must be positive".into()));
    }
    let lambda = ((1.0 - params.beta) / params.beta).max(LAMBDA_MIN);
    let scale = median_scale(cost);
    let cs: Vec<f64> = cost.data().iter().map(|&c| c / scale).collect();

    let ln_a: Vec<f64> = a.iter().map(|&v| v.ln()).collect();
    let ln_b: Vec<f64> = b.iter().map(|&v| v.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut buf = vec![0.0; n.max(m)];

    let mut iterations = 0;
    let mut converged = false;
    let mut violation = f64::INFINITY;
    for it in 1..=params.max_iter {
        iterations = it;
        for i in 0..n {
            for j in 0..m {
                buf[j] = (g[j] - cs[i * m + j]) / lambda;
            }
            f[i] = lambda * (ln_a[i] - lse(&buf[..m]));
        }
        for j in 0..m {
            for i in 0..n {
                buf[i] = (f[i] - cs[i * m + j]) / lambda;
            }
            g[j] = lambda * (ln_b[j] - lse(&buf[..n]));
        }
        // After the column sweep the column marginals hold exactly, so the
        // row residual is the convergence measure.
        violation = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..m {
                row += ((f[i] + g[j] - cs[i * m + j]) / lambda).exp();
            }
            violation = violation.max((row - a[i]).abs());
        }
        if violation <= params.tol {
            converged = true;
            break;
        }
    }

    let mut pi = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            pi.push(((f[i] + g[j] - cs[i * m + j]) / lambda).exp());
        }
    }
    let transported: f64 = pi.iter().zip(cost.data()).map(|(&p, &c)| p * c).sum();
    if !transported.is_finite() {
        return Err(Error::NonFinite("sinkhorn transport cost"));
    }
    let pi = Tensor::from_vec(&[n, m], pi)?;
    Ok(TransportPlan {
        pi,
        cost: transported,
        iterations,
        converged,
        marginal_violation: violation,
    })
}

/// Map each source point to the plan-weighted average of the targets:
/// row `i` of the result is `sum_j pi[i][j] * targets[j] / sum_j pi[i][j]`.
/// A row with no mass cannot be mapped and is an error.
pub fn barycentric_map(pi: &Tensor, targets: &[Tensor]) -> Result<Vec<Tensor>> {
    let (n, m) = check_cost(pi)?;
    if targets.len() != m {
        return Err(Error::Shape(format!(
            "plan has {m} columns but {} target points were given",
            targets.len()
        )));
    }
    let d = targets[0].len();
    for t in targets {
        if t.rank() != 1 || t.len() != d {
            return Err(Error::Shape(format!(
                "targets must be rank-1 points of dimension {d}, got {:?}",
                t.shape()
            )));
        }
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &pi.data()[i * m..(i + 1) * m];
        let mass: f64 = row.iter().sum();
        if !(mass > 1e-300) {
            return Err(Error::Numeric(format!(
                "plan row {i} carries no mass; barycentric image is undefined"
            )));
        }
        let mut p = vec![0.0; d];
        for (j, t) in targets.iter().enumerate() {
            let w = row[j] / mass;
            for (pv, tv) in p.iter_mut().zip(t.data()) {
                *pv += w * tv;
            }
        }
        out.push(Tensor::from_vec(&[d], p)?);
    }
    Ok(out)
}

/// Shannon entropy `-sum(pi * ln pi)` of a coupling; zero-mass entries
/// contribute zero. Lies in `[0, ln(n * m)]` for plans with total mass one.
pub fn plan_entropy(pi: &Tensor) -> Result<f64> {
    check_cost(pi)?;
    let mut h = 0.0;
    for &p in pi.data() {
        if p > 1e-300 {
            h -= p * p.ln();
        }
    }
    if !h.is_finite() {
        return Err(Error::NonFinite("plan entropy"));
    }
    Ok(h)
}

/// Exact minimal transport cost for tiny instances, by exhaustive search.
///
/// Two regimes are supported:
/// * uniform marginals with `n == m <= 6` — minimum over all permutation
///   couplings, which contain an optimal solution in this case;
/// * any marginals with `n * m <= 12` — enumeration of all basic feasible
///   solutions (spanning-tree bases of the transportation polytope).
pub fn exact_ot_bruteforce(cost: &Tensor, a: &[f64], b: &[f64]) -> Result<f64> {
    let (n, m) = check_cost(cost)?;
    validate_weights(a, "row", n)?;
    validate_weights(b, "column", m)?;
    let uniform_square = n == m
        && a.iter().all(|&v| (v - 1.0 / n as f64).abs() <= 1e-12)
        && b.iter().all(|&v| (v - 1.0 / n as f64).abs() <= 1e-12);
    if uniform_square && n <= 6 {
        return Ok(permutation_min(cost, n));
    }
    if n * m <= 12 {
        return vertex_enumeration_min(cost, a, b);
    }
    Err(Error::Config(format!(
        "exact transport solver handles uniform square problems up to 6x6 \
         or general problems with at most 12 cells, got {n}x{m}"
    )))
}

/// Minimum of `(1/n) * sum_i cost[i][perm(i)]` over all permutations.
fn permutation_min(cost: &Tensor, n: usize) -> f64 {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    heap_permutations(&mut perm, n, &mut |p| {
        let total: f64 = p.iter().enumerate().map(|(i, &j)| cost.at2(i, j)).sum();
        if total < best {
            best = total;
        }
    });
    best / n as f64
}

fn heap_permutations(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == 1 {
        visit(items);
        return;
    }
    for i in 0..k {
        heap_permutations(items, k - 1, visit);
        if k % 2 == 0 {
            items.swap(i, k - 1);
        } else {
            items.swap(0, k - 1);
        }
    }
}

/// Every vertex of the transportation polytope is the unique flow on some
/// spanning tree of the bipartite supply/demand graph with `n + m - 1` cells.
/// Enumerate all cell subsets of that size, solve each by leaf peeling, keep
/// feasible ones, and take the cheapest.
fn vertex_enumeration_min(cost: &Tensor, a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len();
    let m = b.len();
    let cells = n * m;
    let k = n + m - 1;
    let mut best = f64::INFINITY;
    for mask in 0u32..(1u32 << cells) {
        if mask.count_ones() as usize != k {
            continue;
        }
        if let Some(costv) = solve_basis(cost, a, b, mask) {
            if costv < best {
                best = costv;
            }
        }
    }
    if best.is_finite() {
        Ok(best)
    } else {
        Err(Error::Numeric("no feasible basic solution found".into()))
    }
}

/// Solve the flow on one candidate basis by repeatedly assigning the single
/// remaining cell of a degree-one row or column. Returns the transport cost
/// if the basis is a tree and the flow is non-negative.
fn solve_basis(cost: &Tensor, a: &[f64], b: &[f64], mask: u32) -> Option<f64> {
    let n = a.len();
    let m = b.len();
    let mut active = mask;
    let mut r: Vec<f64> = a.to_vec();
    let mut c: Vec<f64> = b.to_vec();
    let mut total = 0.0;
    loop {
        if active == 0 {
            break;
        }
        let mut progressed = false;
        // Degree-one rows.
        for i in 0..n {
            let row_bits = (active >> (i * m)) & ((1u32 << m) - 1);
            if row_bits.count_ones() == 1 {
                let j = row_bits.trailing_zeros() as usize;
                let flow = r[i];
                if flow < -1e-9 {
                    return None;
                }
                total += flow.max(0.0) * cost.at2(i, j);
                c[j] -= flow;
                r[i] = 0.0;
                active &= !(1u32 << (i * m + j));
                progressed = true;
            }
        }
        // Degree-one columns.
        for j in 0..m {
            let mut count = 0;
            let mut last = 0;
            for i in 0..n {
                if active & (1u32 << (i * m + j)) != 0 {
                    count += 1;
                    last = i;
                }
            }
            if count == 1 {
                let flow = c[j];
                if flow < -1e-9 {
                    return None;
                }
                total += flow.max(0.0) * cost.at2(last, j);
                r[last] -= flow;
                c[j] = 0.0;
                active &= !(1u32 << (last * m + j));
                progressed = true;
            }
        }
        if !progressed {
            // Remaining cells form a cycle: not a tree basis.
            return None;
        }
    }
    if r.iter().chain(c.iter()).any(|&v| v.abs() > 1e-9) {
        return None;
    }
    Some(total)
}
