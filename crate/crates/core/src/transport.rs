//! Exact optimal transport between uniform point clouds with squared
//! Euclidean cost.

use crate::error::{Error, Result};
use crate::gaussian::GaussianFit;
use crate::rng;
use rand::seq::index;

/// Pairwise squared distances, row-major `n x m`.
pub fn sq_dist_matrix(u: &[f64], v: &[f64], dim: usize) -> Vec<f64> {
    let n = u.len() / dim;
    let m = v.len() / dim;
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let a = &u[i * dim..(i + 1) * dim];
        for j in 0..m {
            let b = &v[j * dim..(j + 1) * dim];
            out[i * m + j] = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        }
    }
    out
}

/// Minimum-cost perfect matching on a square cost matrix (shortest
/// augmenting paths with potentials). Returns `col[i]` for each row.
pub fn assignment(cost: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
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
    let mut col = vec![0; n];
    for j in 1..=n {
        col[p[j] - 1] = j - 1;
    }
    col
}

/// Transport with `n` sources of supply `m` and `m` sinks of demand `n`
/// (uniform marginals with denominators cleared), solved by successive
/// shortest paths. Returns the optimal total cost of the integer flow.
fn min_cost_flow(cost: &[f64], n: usize, m: usize) -> f64 {
    // node layout: rows 0..n, columns n..n+m
    let nodes = n + m;
    let mut flow = vec![0u64; n * m];
    let mut supply = vec![m as u64; n];
    let mut demand = vec![n as u64; m];
    let mut pot = vec![0.0; nodes];
    let mut remaining = (n * m) as u64;
    while remaining > 0 {
        // Dijkstra from every row with spare supply, over reduced costs.
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev = vec![usize::MAX; nodes];
        let mut done = vec![false; nodes];
        for i in 0..n {
            if supply[i] > 0 {
                dist[i] = 0.0;
            }
        }
        loop {
            let mut best = usize::MAX;
            let mut bd = f64::INFINITY;
            for k in 0..nodes {
                if !done[k] && dist[k] < bd {
                    bd = dist[k];
                    best = k;
                }
            }
            if best == usize::MAX {
                break;
            }
            done[best] = true;
            if best < n {
                let i = best;
                for j in 0..m {
                    let to = n + j;
                    let rc = (cost[i * m + j] + pot[i] - pot[to]).max(0.0);
                    if dist[i] + rc < dist[to] {
                        dist[to] = dist[i] + rc;
                        prev[to] = i;
                    }
                }
            } else {
                let j = best - n;
                for i in 0..n {
                    if flow[i * m + j] > 0 {
                        let rc = (-cost[i * m + j] + pot[best] - pot[i]).max(0.0);
                        if dist[best] + rc < dist[i] {
                            dist[i] = dist[best] + rc;
                            prev[i] = best;
                        }
                    }
                }
            }
        }
        // cheapest column that still has demand
        let target = (0..m)
            .filter(|&j| demand[j] > 0)
            .min_by(|&a, &b| dist[n + a].total_cmp(&dist[n + b]))
            .expect("demand remains while flow remains");
        let end = n + target;
        // bottleneck along the path
        let mut amount = demand[target];
        let mut k = end;
        while prev[k] != usize::MAX {
            let p = prev[k];
            if p >= n {
                // column p -> row k reverses flow on (k, p)
                amount = amount.min(flow[k * m + (p - n)]);
            }
            k = p;
        }
        amount = amount.min(supply[k]);
        let start = k;
        let mut k = end;
        while prev[k] != usize::MAX {
            let p = prev[k];
            if p < n {
                flow[p * m + (k - n)] += amount;
            } else {
                flow[k * m + (p - n)] -= amount;
            }
            k = p;
        }
        supply[start] -= amount;
        demand[target] -= amount;
        remaining -= amount;
        for (pk, dk) in pot.iter_mut().zip(&dist) {
            if dk.is_finite() {
                *pk += dk;
            }
        }
    }
    let mut total = 0.0;
    for (f, c) in flow.iter().zip(cost) {
        if *f > 0 {
            total += *f as f64 * c;
        }
    }
    total
}

/// Optimal transport cost between uniform distributions on the rows of `u`
/// and `v`, with cost `|u_i - v_j|^2` (no square root is taken).
pub fn wasserstein_point_clouds(u: &[f64], v: &[f64], dim: usize) -> Result<f64> {
    if dim == 0 || u.is_empty() || v.is_empty() || u.len() % dim != 0 || v.len() % dim != 0 {
        return Err(Error::shape("point clouds must be non-empty whole rows"));
    }
    let n = u.len() / dim;
    let m = v.len() / dim;
    let cost = sq_dist_matrix(u, v, dim);
    if n == m {
        let col = assignment(&cost, n);
        let total: f64 = (0..n).map(|i| cost[i * n + col[i]]).sum();
        Ok(total / n as f64)
    } else {
        Ok(min_cost_flow(&cost, n, m) / (n * m) as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WassersteinError {
    pub e_w: f64,
    pub w_diag: f64,
    pub w_full: f64,
    pub n_points: usize,
}

/// `W(samples, diag draws) - W(samples, full draws)` on equal-size clouds.
///
/// At most `n_draws` samples are used (a seeded subset when there are more),
/// and both fits are sampled from the same normal noise.
pub fn wasserstein_error(
    samples: &[f64],
    dim: usize,
    full: &GaussianFit,
    diag: &GaussianFit,
    n_draws: usize,
    seed: u64,
) -> Result<WassersteinError> {
    if full.dim() != dim || diag.dim() != dim {
        return Err(Error::shape("fits do not match the sample dimension"));
    }
    let n = samples.len() / dim;
    if n == 0 || n_draws == 0 {
        return Err(Error::invalid("need samples and draws"));
    }
    let k = n.min(n_draws);
    let cloud: Vec<f64> = if k < n {
        let mut picks = index::sample(&mut rng::keyed(seed, 0), n, k).into_vec();
        picks.sort_unstable();
        picks.iter().flat_map(|&i| samples[i * dim..(i + 1) * dim].iter().copied()).collect()
    } else {
        samples.to_vec()
    };
    let draw_seed = rng::derive_seed(seed, 1);
    let w_diag = wasserstein_point_clouds(&cloud, &diag.sample(k, draw_seed)?, dim)?;
    let w_full = wasserstein_point_clouds(&cloud, &full.sample(k, draw_seed)?, dim)?;
    Ok(WassersteinError {
        e_w: w_diag - w_full,
        w_diag,
        w_full,
        n_points: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(cost: &[f64], n: usize) -> f64 {
        fn rec(cost: &[f64], n: usize, row: usize, used: &mut [bool], chosen: &mut Vec<usize>, best: &mut f64) {
            if row == n {
                let s: f64 = chosen.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
                if s < *best {
                    *best = s;
                }
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    chosen.push(j);
                    rec(cost, n, row + 1, used, chosen, best);
                    chosen.pop();
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, n, 0, &mut vec![false; n], &mut Vec::new(), &mut best);
        best / n as f64
    }

    fn cloud(n: usize, dim: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::keyed(seed, 0);
        (0..n * dim).map(|_| rng::std_normal(&mut r)).collect()
    }

    #[test]
    fn trivial_cases() {
        let u = cloud(5, 3, 1);
        assert_eq!(wasserstein_point_clouds(&u, &u, 3).unwrap(), 0.0);
        assert_eq!(wasserstein_point_clouds(&[0.0, 0.0], &[3.0, 4.0], 2).unwrap(), 25.0);
    }

    #[test]
    fn assignment_equals_brute_force() {
        for s in 0..30 {
            let u = cloud(6, 2, 2 * s);
            let v = cloud(6, 2, 2 * s + 1);
            let cost = sq_dist_matrix(&u, &v, 2);
            assert_eq!(wasserstein_point_clouds(&u, &v, 2).unwrap(), brute_force(&cost, 6));
        }
    }

    #[test]
    fn unequal_sizes_match_replicated_assignment() {
        for s in 0..20 {
            let (n, m) = (2 + s as usize % 3, 3);
            let u = cloud(n, 2, 100 + s);
            let v = cloud(m, 2, 200 + s);
            let l = n * m / gcd(n, m);
            let rep = |c: &[f64], k: usize| -> Vec<f64> {
                c.chunks(2).flat_map(|p| std::iter::repeat_n(p, l / k).flatten().copied()).collect()
            };
            let (ur, vr) = (rep(&u, n), rep(&v, m));
            let cost = sq_dist_matrix(&ur, &vr, 2);
            let want = if l <= 6 { brute_force(&cost, l) } else { wasserstein_point_clouds(&ur, &vr, 2).unwrap() };
            let got = wasserstein_point_clouds(&u, &v, 2).unwrap();
            assert!((got - want).abs() <= 1e-12 * want.max(1.0), "{n}x{m}: {got} vs {want}");
        }
    }

    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 { a } else { gcd(b, a % b) }
    }

    #[test]
    fn identical_fits_give_zero_error() {
        let g = GaussianFit::diagonal(vec![0.0, 0.0], vec![1.0, 2.0]).unwrap();
        let xs = g.sample(50, 9).unwrap();
        let e = wasserstein_error(&xs, 2, &g, &g, 50, 3).unwrap();
        assert_eq!(e.e_w, 0.0);
    }
}
