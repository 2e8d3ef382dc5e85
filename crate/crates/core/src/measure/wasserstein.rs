//! Exact Wasserstein-2 distances between empirical measures.
//!
//! Solver selection:
//! - `d = 1`: monotone (quantile) coupling, any weights;
//! - equal atom counts with uniform weights: optimal assignment (Hungarian);
//! - otherwise: discrete optimal transport by successive shortest paths,
//!   limited to [`MAX_TRANSPORT_ATOMS`] atoms per side.

use super::EmpiricalMeasure;
use crate::error::{Error, Result};
use crate::stats::pairwise_sum;

pub const MAX_TRANSPORT_ATOMS: usize = 64;

/// Which exact algorithm produced a distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum W2Method {
    Quantile,
    Assignment,
    Transport,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `W_2(mu, nu)` by the exact optimal coupling.
pub fn wasserstein2(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    wasserstein2_with_method(mu, nu).map(|(d, _)| d)
}

/// `W_2(mu, nu)` together with the method used.
pub fn wasserstein2_with_method(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
) -> Result<(f64, W2Method)> {
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch {
            context: "wasserstein2",
            expected: mu.dim(),
            found: nu.dim(),
        });
    }
    let equal_uniform = mu.len() == nu.len() && mu.is_uniform() && nu.is_uniform();
    let (cost, method) = if mu.dim() == 1 {
        (quantile_cost(mu, nu, equal_uniform), W2Method::Quantile)
    } else if equal_uniform {
        let n = mu.len();
        let cost = cost_matrix(mu, nu);
        let (_, total) = assignment(&cost, n);
        (total / n as f64, W2Method::Assignment)
    } else {
        if mu.len() > MAX_TRANSPORT_ATOMS || nu.len() > MAX_TRANSPORT_ATOMS {
            return Err(Error::Unsupported(format!(
                "general-weight transport limited to {MAX_TRANSPORT_ATOMS} atoms per side \
                 (got {} and {})",
                mu.len(),
                nu.len()
            )));
        }
        let cost = cost_matrix(mu, nu);
        (
            transport_cost(mu.weights(), nu.weights(), &cost)?,
            W2Method::Transport,
        )
    };
    Ok((cost.max(0.0).sqrt(), method))
}

fn cost_matrix(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Vec<f64> {
    let mut cost = Vec::with_capacity(mu.len() * nu.len());
    for (x, _) in mu.atoms() {
        for (y, _) in nu.atoms() {
            cost.push(squared_distance(x, y));
        }
    }
    cost
}

fn quantile_cost(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, equal_uniform: bool) -> f64 {
    let sorted = |m: &EmpiricalMeasure| {
        let mut atoms: Vec<(f64, f64)> = m.atoms().map(|(x, w)| (x[0], w)).collect();
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        atoms
    };
    let a = sorted(mu);
    let b = sorted(nu);
    if equal_uniform {
        let terms: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x.0 - y.0).powi(2)).collect();
        return pairwise_sum(&terms) / a.len() as f64;
    }
    // walk both quantile functions, pairing overlapping mass
    let mut terms = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    while i < a.len() && j < b.len() {
        let m = ra.min(rb);
        terms.push(m * (a[i].0 - b[j].0).powi(2));
        ra -= m;
        rb -= m;
        if ra <= 0.0 {
            i += 1;
            if i < a.len() {
                ra = a[i].1;
            }
        }
        if rb <= 0.0 {
            j += 1;
            if j < b.len() {
                rb = b[j].1;
            }
        }
    }
    pairwise_sum(&terms)
}

/// Minimum-cost perfect assignment on a row-major `n x n` cost matrix.
/// Returns `(column assigned to each row, total cost)`.
pub fn assignment(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    // potentials (u rows, v columns), 1-based with a sentinel column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let cur = cost[(r - 1) * n + (col - 1)] - u[r] - v[col];
                if cur < minv[col] {
                    minv[col] = cur;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            owner[col0] = owner[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assigned = vec![0usize; n];
    for col in 1..=n {
        assigned[owner[col] - 1] = col - 1;
    }
    let terms: Vec<f64> = assigned
        .iter()
        .enumerate()
        .map(|(r, &c)| cost[r * n + c])
        .collect();
    (assigned, pairwise_sum(&terms))
}

/// Reference optimum by enumerating all permutations (Heap's algorithm).
/// Intended for `n <= 8`; used to validate [`assignment`].
pub fn brute_force_assignment_cost(cost: &[f64], n: usize) -> f64 {
    assert_eq!(cost.len(), n * n);
    let mut perm: Vec<usize> = (0..n).collect();
    let eval = |p: &[usize]| {
        let terms: Vec<f64> = p.iter().enumerate().map(|(r, &c)| cost[r * n + c]).collect();
        pairwise_sum(&terms)
    };
    let mut best = eval(&perm);
    let mut c = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(eval(&perm));
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

const MASS_EPS: f64 = 1e-14;

/// Optimal transport cost between probability vectors `supply` and `demand`
/// with row-major cost matrix, by successive shortest augmenting paths.
pub fn transport_cost(supply: &[f64], demand: &[f64], cost: &[f64]) -> Result<f64> {
    let (n, m) = (supply.len(), demand.len());
    if cost.len() != n * m {
        return Err(Error::DimensionMismatch {
            context: "transport_cost",
            expected: n * m,
            found: cost.len(),
        });
    }
    let mut left = supply.to_vec();
    let mut right = demand.to_vec();
    let mut flow = vec![0.0; n * m];
    // node layout: sources 0..n, sinks n..n+m
    let nodes = n + m;
    let max_rounds = 10 * (n + m) * (n + m) + 10;
    for _ in 0..max_rounds {
        if left.iter().all(|s| *s <= MASS_EPS) || right.iter().all(|d| *d <= MASS_EPS) {
            let terms: Vec<f64> = flow.iter().zip(cost).map(|(f, c)| f * c).collect();
            return Ok(pairwise_sum(&terms));
        }
        // Bellman-Ford from every source with remaining supply
        let mut dist = vec![f64::INFINITY; nodes];
        let mut pred = vec![usize::MAX; nodes];
        for (i, s) in left.iter().enumerate() {
            if *s > MASS_EPS {
                dist[i] = 0.0;
            }
        }
        for _ in 0..nodes {
            let mut changed = false;
            for i in 0..n {
                if dist[i].is_finite() {
                    for j in 0..m {
                        let cand = dist[i] + cost[i * m + j];
                        if cand < dist[n + j] - 1e-15 {
                            dist[n + j] = cand;
                            pred[n + j] = i;
                            changed = true;
                        }
                    }
                }
            }
            for j in 0..m {
                if dist[n + j].is_finite() {
                    for i in 0..n {
                        if flow[i * m + j] > MASS_EPS {
                            let cand = dist[n + j] - cost[i * m + j];
                            if cand < dist[i] - 1e-15 {
                                dist[i] = cand;
                                pred[i] = n + j;
                                changed = true;
                            }
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let target = (0..m)
            .filter(|&j| right[j] > MASS_EPS && dist[n + j].is_finite())
            .min_by(|&a, &b| dist[n + a].total_cmp(&dist[n + b]));
        let Some(j_end) = target else {
            return Err(Error::Data("transport problem has no augmenting path".into()));
        };
        // walk back to the originating source, collecting the bottleneck
        let mut path = Vec::new();
        let mut node = n + j_end;
        let mut bottleneck = right[j_end];
        loop {
            let p = pred[node];
            if node >= n {
                // forward edge source p -> sink
                path.push((p, node - n, 1.0));
            } else {
                // backward edge sink p -> source node cancels existing flow
                let j = p - n;
                bottleneck = bottleneck.min(flow[node * m + j]);
                path.push((node, j, -1.0));
            }
            node = p;
            if node < n && pred[node] == usize::MAX {
                break;
            }
        }
        let source = node;
        bottleneck = bottleneck.min(left[source]);
        for (i, j, dir) in path {
            flow[i * m + j] += dir * bottleneck;
            if flow[i * m + j] < 0.0 {
                flow[i * m + j] = 0.0;
            }
        }
        left[source] -= bottleneck;
        right[j_end] -= bottleneck;
    }
    Err(Error::Data("transport solver did not terminate".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w2(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
        wasserstein2(mu, nu).unwrap()
    }

    #[test]
    fn identity_and_translation() {
        let mu = EmpiricalMeasure::from_scalars(&[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(w2(&mu, &mu), 0.0);
        let a = EmpiricalMeasure::dirac(&[0.0]).unwrap();
        let b = EmpiricalMeasure::dirac(&[2.0]).unwrap();
        assert_eq!(w2(&a, &b), 2.0);
    }

    #[test]
    fn two_point_example() {
        let mu = EmpiricalMeasure::from_scalars(&[0.0, 1.0]).unwrap();
        let nu = EmpiricalMeasure::from_scalars(&[1.0, 3.0]).unwrap();
        assert!((w2(&mu, &nu) - 2.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = EmpiricalMeasure::dirac(&[0.0]).unwrap();
        let b = EmpiricalMeasure::dirac(&[0.0, 1.0]).unwrap();
        assert!(matches!(
            wasserstein2(&a, &b),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn method_selection() {
        let a = EmpiricalMeasure::uniform(2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let b = EmpiricalMeasure::uniform(2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(wasserstein2_with_method(&a, &b).unwrap().1, W2Method::Assignment);
        let c = EmpiricalMeasure::new(2, vec![0.0, 0.0, 1.0, 1.0], vec![0.3, 0.7]).unwrap();
        assert_eq!(wasserstein2_with_method(&a, &c).unwrap().1, W2Method::Transport);
        let d = EmpiricalMeasure::from_scalars(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(wasserstein2_with_method(&d, &d).unwrap().1, W2Method::Quantile);
    }

    #[test]
    fn transport_matches_assignment_on_uniform_weights() {
        let cost = vec![4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let (_, best) = assignment(&cost, 3);
        let w = vec![1.0 / 3.0; 3];
        let t = transport_cost(&w, &w, &cost).unwrap();
        assert!((t - best / 3.0).abs() < 1e-14);
        assert_eq!(best, brute_force_assignment_cost(&cost, 3));
    }

    #[test]
    fn weighted_quantile_coupling_splits_mass() {
        // mass 1 at 0 against {1: 1/2, 3: 1/2}: cost (1 + 9)/2
        let a = EmpiricalMeasure::dirac(&[0.0]).unwrap();
        let b = EmpiricalMeasure::from_scalars(&[1.0, 3.0]).unwrap();
        assert!((w2(&a, &b) - 5.0f64.sqrt()).abs() < 1e-15);
        let c = EmpiricalMeasure::new(1, vec![0.0, 2.0], vec![0.25, 0.75]).unwrap();
        let d = EmpiricalMeasure::new(1, vec![1.0], vec![1.0]).unwrap();
        assert!((w2(&c, &d) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn general_transport_splits_mass_in_two_dimensions() {
        let a = EmpiricalMeasure::dirac(&[0.0, 0.0]).unwrap();
        let b = EmpiricalMeasure::new(2, vec![1.0, 0.0, 0.0, 2.0], vec![0.5, 0.5]).unwrap();
        assert!((w2(&a, &b) - 2.5f64.sqrt()).abs() < 1e-14);
    }
}
