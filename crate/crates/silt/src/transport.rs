//! Exact discrete optimal transport by successive shortest paths.
//!
//! The transportation problem between two atomic measures is solved as a
//! min-cost flow on the complete bipartite graph with Johnson potentials, so
//! every Dijkstra pass runs on nonnegative reduced costs. Augmentations
//! saturate a supply or a demand, keeping the iteration count near m + n.
//! Used by the bounded-Wasserstein metric for small atom counts; callers
//! fall back to a greedy feasible coupling above the exact threshold.

const EPS_MASS: f64 = 1e-15;

/// Minimal total cost moving `supply` onto `demand` under `cost[i][j]`.
/// Requires equal totals (caller checks) and nonnegative costs.
pub(crate) fn min_cost_transport(
    supply: &[f64],
    demand: &[f64],
    cost: &dyn Fn(usize, usize) -> f64,
) -> f64 {
    let m = supply.len();
    let n = demand.len();
    if m == 0 || n == 0 {
        return 0.0;
    }
    let total: f64 = supply.iter().sum();
    let tol = EPS_MASS * total.max(1.0);

    let mut remaining_supply = supply.to_vec();
    let mut remaining_demand = demand.to_vec();
    // flow kept sparse per source: (sink, amount)
    let mut flow: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
    // potentials: sources then sinks
    let mut pot = vec![0.0f64; m + n];

    let mut total_cost = 0.0;
    let max_iters = 4 * (m + n) + 64;
    for _ in 0..max_iters {
        if remaining_supply.iter().all(|&s| s <= tol) {
            break;
        }
        // Dijkstra over m + n nodes; dense relaxation.
        let inf = f64::INFINITY;
        let mut dist = vec![inf; m + n];
        let mut prev: Vec<Option<usize>> = vec![None; m + n];
        let mut done = vec![false; m + n];
        for (i, &s) in remaining_supply.iter().enumerate() {
            if s > tol {
                dist[i] = 0.0;
            }
        }
        loop {
            let mut u = usize::MAX;
            let mut best = inf;
            for v in 0..m + n {
                if !done[v] && dist[v] < best {
                    best = dist[v];
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u < m {
                // forward edges source u -> every sink
                for j in 0..n {
                    let v = m + j;
                    if done[v] {
                        continue;
                    }
                    let rc = (cost(u, j) + pot[u] - pot[v]).max(0.0);
                    if dist[u] + rc < dist[v] {
                        dist[v] = dist[u] + rc;
                        prev[v] = Some(u);
                    }
                }
            } else {
                // backward edges sink -> sources with positive flow
                let j = u - m;
                for (i, entries) in flow.iter().enumerate() {
                    if done[i] {
                        continue;
                    }
                    if entries.iter().any(|&(jj, f)| jj == j && f > tol) {
                        let rc = (-cost(i, j) + pot[u] - pot[i]).max(0.0);
                        if dist[u] + rc < dist[i] {
                            dist[i] = dist[u] + rc;
                            prev[i] = Some(u);
                        }
                    }
                }
            }
        }
        // nearest unsaturated sink
        let mut target = None;
        let mut best = inf;
        for (j, &d) in remaining_demand.iter().enumerate() {
            if d > tol && dist[m + j] < best {
                best = dist[m + j];
                target = Some(m + j);
            }
        }
        let Some(target) = target else { break };

        // bottleneck along the predecessor path
        let mut bottleneck = remaining_demand[target - m];
        let mut v = target;
        while let Some(u) = prev[v] {
            if u >= m {
                // backward edge (sink u) -> (source v): limited by its flow
                let j = u - m;
                let f = flow[v].iter().find(|&&(jj, _)| jj == j).map_or(0.0, |&(_, f)| f);
                bottleneck = bottleneck.min(f);
            }
            v = u;
        }
        bottleneck = bottleneck.min(remaining_supply[v]);
        if bottleneck <= tol {
            break;
        }

        // apply the augmentation
        let mut v = target;
        while let Some(u) = prev[v] {
            if u < m {
                // forward: source u -> sink v
                let j = v - m;
                total_cost += bottleneck * cost(u, j);
                match flow[u].iter_mut().find(|(jj, _)| *jj == j) {
                    Some((_, f)) => *f += bottleneck,
                    None => flow[u].push((j, bottleneck)),
                }
            } else {
                // backward: remove flow source v -> sink u
                let j = u - m;
                total_cost -= bottleneck * cost(v, j);
                if let Some((_, f)) = flow[v].iter_mut().find(|(jj, _)| *jj == j) {
                    *f -= bottleneck;
                }
                flow[v].retain(|&(_, f)| f > tol);
            }
            v = u;
        }
        remaining_supply[v] -= bottleneck;
        remaining_demand[target - m] -= bottleneck;

        // potential update keeps reduced costs nonnegative
        let dt = dist[target];
        for v in 0..m + n {
            pot[v] += if dist[v].is_finite() { dist[v].min(dt) } else { dt };
        }
    }
    total_cost
}

/// Feasible (upper-bound) coupling: each source pushes its mass to the
/// nearest sinks with remaining capacity, in source order.
pub(crate) fn greedy_transport(
    supply: &[f64],
    demand: &[f64],
    cost: &dyn Fn(usize, usize) -> f64,
) -> f64 {
    let mut remaining: Vec<f64> = demand.to_vec();
    let mut total_cost = 0.0;
    for (i, &s) in supply.iter().enumerate() {
        let mut left = s;
        while left > EPS_MASS {
            let mut best = None;
            let mut best_cost = f64::INFINITY;
            for (j, &r) in remaining.iter().enumerate() {
                if r > EPS_MASS {
                    let c = cost(i, j);
                    if c < best_cost {
                        best_cost = c;
                        best = Some(j);
                    }
                }
            }
            let Some(j) = best else { break };
            let amount = left.min(remaining[j]);
            total_cost += amount * best_cost;
            remaining[j] -= amount;
            left -= amount;
        }
    }
    total_cost
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_assignment_on_permutation_cases() {
        // 3x3 uniform: compare against the best of the 6 permutations
        let cost_matrix = [
            [0.4, 0.9, 0.2],
            [0.7, 0.1, 0.5],
            [0.3, 0.8, 0.6],
        ];
        let cost = |i: usize, j: usize| cost_matrix[i][j];
        let got = min_cost_transport(&[1.0; 3], &[1.0; 3], &cost);
        let perms: [[usize; 3]; 6] =
            [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let best = perms
            .iter()
            .map(|p| (0..3).map(|i| cost_matrix[i][p[i]]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        assert!((got - best).abs() < 1e-12, "got {got}, best {best}");
    }

    #[test]
    fn splits_mass_when_cheaper() {
        // one source must split between two sinks
        let cost = |_i: usize, j: usize| if j == 0 { 1.0 } else { 2.0 };
        let got = min_cost_transport(&[3.0], &[1.0, 2.0], &cost);
        assert!((got - (1.0 + 4.0)).abs() < 1e-12);
    }

    #[test]
    fn greedy_is_feasible_upper_bound() {
        let cost_matrix = [[0.4, 0.9, 0.2], [0.7, 0.1, 0.5], [0.3, 0.8, 0.6]];
        let cost = |i: usize, j: usize| cost_matrix[i][j];
        let exact = min_cost_transport(&[1.0, 2.0, 0.5], &[1.5, 1.0, 1.0], &cost);
        let greedy = greedy_transport(&[1.0, 2.0, 0.5], &[1.5, 1.0, 1.0], &cost);
        assert!(greedy >= exact - 1e-12, "greedy {greedy} < exact {exact}");
    }
}
