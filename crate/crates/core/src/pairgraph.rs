//! Directed pair set over training covariates: a Euclidean minimum spanning
//! tree rooted at one node, every edge oriented child -> parent so that each
//! node is the tail of at most one edge.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Above this many points the candidate edges come from a k-nearest-neighbour
/// graph instead of the complete graph.
pub const EXACT_MST_LIMIT: usize = 5000;
pub const KNN_CANDIDATES: usize = 16;

/// Disjoint-set forest with path halving and union by size.
#[derive(Clone, Debug)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns `false` if `a` and `b` were already connected.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeEdge {
    /// Smaller endpoint index.
    pub a: usize,
    /// Larger endpoint index.
    pub b: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanningTree {
    pub n_nodes: usize,
    pub edges: Vec<TreeEdge>,
    pub total_weight: f64,
    /// True when candidate edges were restricted to a k-NN graph.
    pub approximate: bool,
}

fn distance<S: Real>(p: &[S], q: &[S]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| (a - b) * (a - b))
        .fold(S::zero(), |acc, t| acc + t)
        .sqrt()
        .to_f64_lossy()
}

fn edge_order(x: &TreeEdge, y: &TreeEdge) -> Ordering {
    x.weight
        .total_cmp(&y.weight)
        .then(x.a.cmp(&y.a))
        .then(x.b.cmp(&y.b))
}

fn edge(i: usize, j: usize, weight: f64) -> TreeEdge {
    TreeEdge {
        a: i.min(j),
        b: i.max(j),
        weight,
    }
}

/// Kruskal's algorithm over Euclidean distances. Ties are broken by
/// `(weight, smaller index, larger index)`.
pub fn build_mst<S: Real>(points: &[Vec<S>]) -> Result<SpanningTree> {
    let n = points.len();
    if n == 0 {
        return Err(Error::invalid("cannot build a spanning tree over zero points"));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::invalid("points have inconsistent dimensions"));
    }
    let approximate = n > EXACT_MST_LIMIT;
    let mut candidates = if approximate {
        knn_candidates(points, KNN_CANDIDATES)
    } else {
        let mut all = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                all.push(edge(i, j, distance(&points[i], &points[j])));
            }
        }
        all
    };
    candidates.sort_by(edge_order);

    let mut uf = UnionFind::new(n);
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    for e in candidates {
        if uf.union(e.a, e.b) {
            edges.push(e);
            if edges.len() + 1 == n {
                break;
            }
        }
    }
    if edges.len() + 1 < n {
        join_components(points, &mut uf, &mut edges);
    }
    let total_weight = edges.iter().map(|e| e.weight).sum();
    Ok(SpanningTree {
        n_nodes: n,
        edges,
        total_weight,
        approximate,
    })
}

fn knn_candidates<S: Real>(points: &[Vec<S>], k: usize) -> Vec<TreeEdge> {
    let n = points.len();
    let mut out = Vec::with_capacity(n * k);
    let mut row: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        row.clear();
        row.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (distance(&points[i], &points[j]), j)),
        );
        let k = k.min(row.len());
        if k == 0 {
            continue;
        }
        row.select_nth_unstable_by(k - 1, |x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        out.extend(row[..k].iter().map(|&(w, j)| edge(i, j, w)));
    }
    out.sort_by(edge_order);
    out.dedup_by(|x, y| x.a == y.a && x.b == y.b);
    out
}

/// Borůvka-style repair when the k-NN graph is disconnected: repeatedly add
/// the cheapest edge leaving each component.
fn join_components<S: Real>(points: &[Vec<S>], uf: &mut UnionFind, edges: &mut Vec<TreeEdge>) {
    let n = points.len();
    while edges.len() + 1 < n {
        let roots: Vec<usize> = (0..n).map(|i| uf.find(i)).collect();
        let mut best: Vec<Option<TreeEdge>> = vec![None; n];
        for i in 0..n {
            for j in i + 1..n {
                if roots[i] == roots[j] {
                    continue;
                }
                let e = edge(i, j, distance(&points[i], &points[j]));
                for r in [roots[i], roots[j]] {
                    if best[r].is_none_or(|b| edge_order(&e, &b) == Ordering::Less) {
                        best[r] = Some(e);
                    }
                }
            }
        }
        let mut picks: Vec<TreeEdge> = best.into_iter().flatten().collect();
        picks.sort_by(edge_order);
        for e in picks {
            if uf.union(e.a, e.b) {
                edges.push(e);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectedEdge {
    pub tail: usize,
    pub head: usize,
}

/// Oriented tree edges; `head_of[i]` is the unique head paired with tail `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectedPairSet {
    pub n_nodes: usize,
    pub root: usize,
    /// Sorted by tail.
    pub edges: Vec<DirectedEdge>,
    #[serde(default)]
    pub approximate: bool,
}

impl DirectedPairSet {
    /// Head of the edge whose tail is `tail`, if any.
    pub fn head_of(&self, tail: usize) -> Option<usize> {
        self.edges
            .binary_search_by_key(&tail, |e| e.tail)
            .ok()
            .map(|k| self.edges[k].head)
    }

    pub fn contains(&self, tail: usize, head: usize) -> bool {
        self.head_of(tail) == Some(head)
    }

    /// Dense lookup table `tail -> head`.
    pub fn head_table(&self) -> Vec<Option<usize>> {
        let mut table = vec![None; self.n_nodes];
        for e in &self.edges {
            if e.tail < self.n_nodes {
                table[e.tail] = Some(e.head);
            }
        }
        table
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Roots the tree at `root` and orients every edge child -> parent.
pub fn orient(tree: &SpanningTree, root: usize) -> Result<DirectedPairSet> {
    let n = tree.n_nodes;
    if root >= n {
        return Err(Error::invalid(format!("root {root} out of range for {n} nodes")));
    }
    let mut adj = vec![Vec::new(); n];
    for e in &tree.edges {
        if e.a >= n || e.b >= n {
            return Err(Error::invalid("tree edge endpoint out of range"));
        }
        adj[e.a].push(e.b);
        adj[e.b].push(e.a);
    }
    let mut parent: Vec<Option<usize>> = vec![None; n];
    let mut seen = vec![false; n];
    seen[root] = true;
    let mut queue = std::collections::VecDeque::from([root]);
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                parent[v] = Some(u);
                queue.push_back(v);
            }
        }
    }
    if seen.iter().any(|&s| !s) || tree.edges.len() + 1 != n {
        return Err(Error::invalid("edge list is not a spanning tree (disconnected or cyclic)"));
    }
    let edges = parent
        .iter()
        .enumerate()
        .filter_map(|(tail, p)| p.map(|head| DirectedEdge { tail, head }))
        .collect();
    Ok(DirectedPairSet {
        n_nodes: n,
        root,
        edges,
        approximate: tree.approximate,
    })
}

/// True iff the undirected edges form a spanning tree, no node is the tail
/// of two edges, and the root is never a tail.
pub fn validate(pairs: &DirectedPairSet) -> bool {
    let n = pairs.n_nodes;
    if n == 0 || pairs.root >= n || pairs.edges.len() + 1 != n {
        return false;
    }
    let mut is_tail = vec![false; n];
    let mut uf = UnionFind::new(n);
    for e in &pairs.edges {
        if e.tail >= n || e.head >= n || e.tail == e.head || e.tail == pairs.root {
            return false;
        }
        if std::mem::replace(&mut is_tail[e.tail], true) {
            return false;
        }
        if !uf.union(e.tail, e.head) {
            return false;
        }
    }
    // n - 1 acyclic edges on n nodes form a spanning tree
    true
}

/// Index of the largest count, lowest index on ties.
pub fn choose_root(counts: &[usize]) -> Option<usize> {
    counts
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.cmp(b).then(j.cmp(i)))
        .map(|(i, _)| i)
}

/// MST over `points`, rooted at the node with the most observations.
pub fn build_pair_set<S: Real>(points: &[Vec<S>], counts: &[usize]) -> Result<DirectedPairSet> {
    if counts.len() != points.len() {
        return Err(Error::invalid("counts and points differ in length"));
    }
    let tree = build_mst(points)?;
    let root = choose_root(counts).expect("nonempty");
    orient(&tree, root)
}

#[cfg(test)]
#[path = "../tests/support/oracles.rs"]
mod oracles;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pts(v: &[&[f64]]) -> Vec<Vec<f64>> {
        v.iter().map(|p| p.to_vec()).collect()
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn two_points() {
        let t = build_mst(&pts(&[&[0.0], &[2.0]])).unwrap();
        assert_eq!(t.edges.len(), 1);
        assert_eq!((t.edges[0].a, t.edges[0].b), (0, 1));
        assert_eq!(t.total_weight, 2.0);
    }

    #[test]
    fn single_point_and_empty() {
        let t = build_mst(&pts(&[&[1.0, 1.0]])).unwrap();
        assert!(t.edges.is_empty());
        let p = orient(&t, 0).unwrap();
        assert!(p.edges.is_empty() && validate(&p));
        assert!(build_mst::<f64>(&[]).is_err());
    }

    #[test]
    fn collinear_points() {
        let t = build_mst(&pts(&[&[0.0], &[1.0], &[3.0]])).unwrap();
        let e: Vec<(usize, usize)> = t.edges.iter().map(|e| (e.a, e.b)).collect();
        assert_eq!(e, vec![(0, 1), (1, 2)]);
        assert_eq!(t.total_weight, 3.0);
    }

    #[test]
    fn cayley_count_and_six_point_enumeration() {
        assert_eq!(oracles::count_spanning_trees(6), 1296);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let p = random_points(&mut rng, 6, 2);
            let got = build_mst(&p).unwrap().total_weight;
            let want = oracles::mst_weight_exhaustive(&p);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn orient_path_and_star() {
        let path = SpanningTree {
            n_nodes: 3,
            edges: vec![edge(0, 1, 1.0), edge(1, 2, 1.0)],
            total_weight: 2.0,
            approximate: false,
        };
        let p = orient(&path, 0).unwrap();
        assert_eq!(
            p.edges,
            vec![
                DirectedEdge { tail: 1, head: 0 },
                DirectedEdge { tail: 2, head: 1 }
            ]
        );
        assert!(validate(&p));
        assert_eq!(p.head_of(2), Some(1));
        assert_eq!(p.head_of(0), None);

        let star = SpanningTree {
            n_nodes: 4,
            edges: vec![edge(0, 1, 1.0), edge(0, 2, 1.0), edge(0, 3, 1.0)],
            total_weight: 3.0,
            approximate: false,
        };
        let s = orient(&star, 0).unwrap();
        assert!(s.edges.iter().all(|e| e.head == 0));
        assert_eq!(s.edges.len(), 3);
    }

    #[test]
    fn orient_rejects_disconnected() {
        let broken = SpanningTree {
            n_nodes: 4,
            edges: vec![edge(0, 1, 1.0), edge(2, 3, 1.0)],
            total_weight: 2.0,
            approximate: false,
        };
        assert!(orient(&broken, 0).is_err());
    }

    #[test]
    fn validate_rejects_bad_sets() {
        let dup_tail = DirectedPairSet {
            n_nodes: 3,
            root: 0,
            edges: vec![
                DirectedEdge { tail: 1, head: 0 },
                DirectedEdge { tail: 1, head: 2 },
            ],
            approximate: false,
        };
        assert!(!validate(&dup_tail));
        // 1 -> 2 -> 3 -> 1 is a cycle; node 0 is disconnected
        let cycle = DirectedPairSet {
            n_nodes: 4,
            root: 0,
            edges: vec![
                DirectedEdge { tail: 1, head: 2 },
                DirectedEdge { tail: 2, head: 3 },
                DirectedEdge { tail: 3, head: 1 },
            ],
            approximate: false,
        };
        assert!(!validate(&cycle));
    }

    #[test]
    fn root_is_most_observed_lowest_index() {
        assert_eq!(choose_root(&[1, 5, 3, 5]), Some(1));
        assert_eq!(choose_root(&[2]), Some(0));
    }

    #[test]
    fn knn_path_spans_and_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // two far-apart clusters so the 16-NN graph is disconnected
        let mut p = random_points(&mut rng, EXACT_MST_LIMIT / 2 + 1, 2);
        p.extend(
            random_points(&mut rng, EXACT_MST_LIMIT / 2 + 1, 2)
                .into_iter()
                .map(|q| vec![q[0] + 100.0, q[1]]),
        );
        let t = build_mst(&p).unwrap();
        assert!(t.approximate);
        assert_eq!(t.edges.len(), p.len() - 1);
        let o = orient(&t, 0).unwrap();
        assert!(o.approximate && validate(&o));
    }

    #[test]
    fn tail_uniqueness_by_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = random_points(&mut rng, 40, 3);
        let o = build_pair_set(&p, &vec![1; 40]).unwrap();
        let mut counts = vec![0; 40];
        for e in &o.edges {
            counts[e.tail] += 1;
        }
        assert!(counts.iter().all(|&c| c <= 1));
        assert_eq!(counts[o.root], 0);
        let json = o.to_json().unwrap();
        let back: DirectedPairSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, o);
    }

    proptest! {
        #[test]
        fn mst_matches_enumeration(seed in 0u64..10_000, n in 1usize..=7, d in 1usize..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_points(&mut rng, n, d);
            let t = build_mst(&p).unwrap();
            prop_assert!((t.total_weight - oracles::mst_weight_exhaustive(&p)).abs() < 1e-12);
            let root = rng.random_range(0..n);
            prop_assert!(validate(&orient(&t, root).unwrap()));
        }

        #[test]
        fn mst_permutation_invariant(seed in 0u64..10_000, n in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_points(&mut rng, n, 2);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let q: Vec<Vec<f64>> = perm.iter().map(|&i| p[i].clone()).collect();
            let set = |t: &SpanningTree, map: &dyn Fn(usize) -> usize| {
                let mut e: Vec<(usize, usize)> = t.edges.iter()
                    .map(|e| { let (a, b) = (map(e.a), map(e.b)); (a.min(b), a.max(b)) })
                    .collect();
                e.sort();
                e
            };
            let tp = build_mst(&p).unwrap();
            let tq = build_mst(&q).unwrap();
            // continuous random points have distinct distances almost surely
            prop_assert_eq!(set(&tp, &|i| i), set(&tq, &|i| perm[i]));
        }
    }
}
