//! Independent brute-force oracles shared by unit and integration tests.
//! Nothing here calls into the library's numerical code paths.
#![allow(dead_code)]

/// Exact discrete OT cost between two uniform empirical measures on the
/// line with squared cost, via min-cost flow (successive shortest paths,
/// Bellman-Ford). Each `a` atom supplies `m` units and each `b` atom
/// demands `n` units; the cost is normalized by `n * m`.
pub fn discrete_ot(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let source = n + m;
    let sink = source + 1;
    let mut g = FlowGraph::new(n + m + 2);
    for i in 0..n {
        g.add_edge(source, i, m as i64, 0.0);
        for j in 0..m {
            g.add_edge(i, n + j, (n * m) as i64, (a[i] - b[j]).powi(2));
        }
    }
    for j in 0..m {
        g.add_edge(n + j, sink, n as i64, 0.0);
    }
    let (flow, cost) = g.min_cost_flow(source, sink);
    assert_eq!(flow, (n * m) as i64);
    cost / (n * m) as f64
}

struct Edge {
    to: usize,
    cap: i64,
    cost: f64,
}

struct FlowGraph {
    edges: Vec<Edge>,
    adj: Vec<Vec<usize>>,
}

impl FlowGraph {
    fn new(nodes: usize) -> Self {
        Self { edges: Vec::new(), adj: vec![Vec::new(); nodes] }
    }

    fn add_edge(&mut self, from: usize, to: usize, cap: i64, cost: f64) {
        self.adj[from].push(self.edges.len());
        self.edges.push(Edge { to, cap, cost });
        self.adj[to].push(self.edges.len());
        self.edges.push(Edge { to: from, cap: 0, cost: -cost });
    }

    fn min_cost_flow(&mut self, s: usize, t: usize) -> (i64, f64) {
        let nodes = self.adj.len();
        let (mut flow, mut cost) = (0i64, 0.0);
        loop {
            let mut dist = vec![f64::INFINITY; nodes];
            let mut via: Vec<Option<usize>> = vec![None; nodes];
            dist[s] = 0.0;
            for _ in 0..nodes {
                let mut changed = false;
                for u in 0..nodes {
                    if !dist[u].is_finite() {
                        continue;
                    }
                    for &e in &self.adj[u] {
                        let edge = &self.edges[e];
                        if edge.cap > 0 && dist[u] + edge.cost < dist[edge.to] - 1e-12 {
                            dist[edge.to] = dist[u] + edge.cost;
                            via[edge.to] = Some(e);
                            changed = true;
                        }
                    }
                }
                if !changed {
                    break;
                }
            }
            if !dist[t].is_finite() {
                return (flow, cost);
            }
            let mut push = i64::MAX;
            let mut v = t;
            while let Some(e) = via[v] {
                push = push.min(self.edges[e].cap);
                v = self.edges[e ^ 1].to;
            }
            let mut v = t;
            while let Some(e) = via[v] {
                self.edges[e].cap -= push;
                self.edges[e ^ 1].cap += push;
                cost += push as f64 * self.edges[e].cost;
                v = self.edges[e ^ 1].to;
            }
            flow += push;
        }
    }
}

/// KS statistic by counting at every pooled atom; returns the exact gap
/// numerator `|c_a m - c_b n|` together with `n m`.
pub fn ks_brute_counts(a: &[f64], b: &[f64]) -> (u64, u64) {
    let (n, m) = (a.len() as u64, b.len() as u64);
    let mut best = 0u64;
    for &x in a.iter().chain(b) {
        let ca = a.iter().filter(|&&v| v <= x).count() as u64;
        let cb = b.iter().filter(|&&v| v <= x).count() as u64;
        best = best.max((ca * m).abs_diff(cb * n));
    }
    (best, n * m)
}

pub fn ks_brute(a: &[f64], b: &[f64]) -> f64 {
    let (gap, nm) = ks_brute_counts(a, b);
    gap as f64 / nm as f64
}

/// Minimum spanning-tree weight by enumerating every (n-1)-subset of the
/// complete graph's edges and keeping the acyclic ones.
pub fn mst_weight_exhaustive(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    if n <= 1 {
        return 0.0;
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            edges.push((i, j, d));
        }
    }
    let mut best = f64::INFINITY;
    let mut chosen = Vec::with_capacity(n - 1);
    enumerate_subsets(&edges, 0, n - 1, &mut chosen, n, &mut best);
    best
}

fn enumerate_subsets(
    edges: &[(usize, usize, f64)],
    start: usize,
    remaining: usize,
    chosen: &mut Vec<usize>,
    n: usize,
    best: &mut f64,
) {
    if remaining == 0 {
        if is_spanning_tree(edges, chosen, n) {
            let w: f64 = chosen.iter().map(|&e| edges[e].2).sum();
            if w < *best {
                *best = w;
            }
        }
        return;
    }
    for e in start..edges.len() {
        if edges.len() - e < remaining {
            break;
        }
        chosen.push(e);
        enumerate_subsets(edges, e + 1, remaining - 1, chosen, n, best);
        chosen.pop();
    }
}

fn is_spanning_tree(edges: &[(usize, usize, f64)], chosen: &[usize], n: usize) -> bool {
    // n - 1 edges and connected via DFS
    let mut adj = vec![Vec::new(); n];
    for &e in chosen {
        adj[edges[e].0].push(edges[e].1);
        adj[edges[e].1].push(edges[e].0);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen.iter().all(|&s| s)
}

/// Count of spanning trees found by exhaustive enumeration (Cayley check).
pub fn count_spanning_trees(n: usize) -> usize {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            edges.push((i, j, 0.0));
        }
    }
    let mut count = 0;
    let mut chosen = Vec::new();
    count_rec(&edges, 0, n - 1, &mut chosen, n, &mut count);
    count
}

fn count_rec(
    edges: &[(usize, usize, f64)],
    start: usize,
    remaining: usize,
    chosen: &mut Vec<usize>,
    n: usize,
    count: &mut usize,
) {
    if remaining == 0 {
        if is_spanning_tree(edges, chosen, n) {
            *count += 1;
        }
        return;
    }
    for e in start..edges.len() {
        chosen.push(e);
        count_rec(edges, e + 1, remaining - 1, chosen, n, count);
        chosen.pop();
    }
}

/// Naive soft-min `-eps log(mean_m exp((v_m - (y - s_m)^2) / eps))` without
/// any max-shift stabilization.
pub fn c_transform_naive(v: &[f64], samples: &[f64], y: f64, eps: f64) -> f64 {
    let mean = v
        .iter()
        .zip(samples)
        .map(|(&vm, &sm)| ((vm - (y - sm).powi(2)) / eps).exp())
        .sum::<f64>()
        / v.len() as f64;
    -eps * mean.ln()
}

/// Entropic OT primal `<C, P> + eps KL(P || mu x nu)` minimized by brute
/// force over a 3x3 coupling: the coupling has four free entries once the
/// marginals are fixed; a coarse grid search followed by successive local
/// refinement over those four entries.
pub fn eot_primal_3x3_grid(mu: &[f64; 3], nu: &[f64; 3], x: &[f64; 3], y: &[f64; 3], eps: f64) -> f64 {
    let objective = |p: &[f64; 4]| -> f64 {
        let (p00, p01, p10, p11) = (p[0], p[1], p[2], p[3]);
        let p02 = mu[0] - p00 - p01;
        let p12 = mu[1] - p10 - p11;
        let p20 = nu[0] - p00 - p10;
        let p21 = nu[1] - p01 - p11;
        let p22 = mu[2] - p20 - p21;
        let plan = [[p00, p01, p02], [p10, p11, p12], [p20, p21, p22]];
        let mut total = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let pij = plan[i][j];
                if pij < 0.0 {
                    return f64::INFINITY;
                }
                total += pij * (x[i] - y[j]).powi(2);
                if pij > 0.0 {
                    total += eps * pij * (pij / (mu[i] * nu[j])).ln();
                }
            }
        }
        total
    };
    // start from the product coupling, refine with shrinking grid steps
    let mut best_p = [mu[0] * nu[0], mu[0] * nu[1], mu[1] * nu[0], mu[1] * nu[1]];
    let mut best = objective(&best_p);
    let mut step = 0.05;
    while step > 1e-9 {
        let mut improved = true;
        while improved {
            improved = false;
            for k in 0..4 {
                for dir in [-1.0, 1.0] {
                    for l in 0..4 {
                        for dir2 in [-1.0, 0.0, 1.0] {
                            let mut cand = best_p;
                            cand[k] += dir * step;
                            if l != k {
                                cand[l] += dir2 * step;
                            }
                            let val = objective(&cand);
                            if val < best - 1e-16 {
                                best = val;
                                best_p = cand;
                                improved = true;
                            }
                        }
                    }
                }
            }
        }
        step *= 0.5;
    }
    best
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Componentwise relative error with an absolute floor for tiny entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}
