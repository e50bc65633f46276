//! Synthetic Triangle/Pentagon dataset generator.
//!
//! Positives plant `NumSubgraph` motif cycles, augment each to `SubgraphSize`
//! with pendant nodes, inter-connect motif pairs with probability `ProbConn`,
//! and then join leftover components with a random spanning chain. Edge
//! additions that would close an accidental motif cycle are rejected and
//! resampled, so the planted motifs are the only motif instances anywhere in
//! a positive graph. Negatives break every planted motif by removing one
//! random motif edge each. Node features are Laplacian eigenvector positional
//! encodings.

use crate::graph::Graph;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("subgraph size range ({0}, {1}) below motif size {2}")]
    SubgraphTooSmall(usize, usize, usize),
    #[error("empty range: {0}")]
    EmptyRange(&'static str),
    #[error("positive fraction {0} must lie strictly between 0 and 1")]
    BadPositiveFraction(f64),
    #[error("num_subgraph range must start at 1 or more")]
    ZeroMotifs,
    #[error("could not place edge without creating an accidental motif after {0} attempts")]
    PlacementExhausted(usize),
    #[error("make_negative requires a positive graph with an annotation mask")]
    NotAPositive,
    #[error("laplacian_pe: k = {0} must be below the node count {1}")]
    TooManyEigenvectors(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Motif {
    Triangle,
    Pentagon,
}

impl Motif {
    pub fn base_size(self) -> usize {
        match self {
            Motif::Triangle => 3,
            Motif::Pentagon => 5,
        }
    }
}

/// Sampling ranges for one generated split. Integer ranges are inclusive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSpec {
    pub motif: Motif,
    pub prob_conn: (f64, f64),
    pub num_subgraph: (usize, usize),
    pub subgraph_size: (usize, usize),
    pub num_samples: usize,
    pub positive_fraction: f64,
    pub feature_dim: usize,
    pub rng_seed: u64,
}

impl GenSpec {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.prob_conn.0 > self.prob_conn.1 {
            return Err(GenError::EmptyRange("prob_conn"));
        }
        if self.num_subgraph.0 > self.num_subgraph.1 {
            return Err(GenError::EmptyRange("num_subgraph"));
        }
        if self.subgraph_size.0 > self.subgraph_size.1 {
            return Err(GenError::EmptyRange("subgraph_size"));
        }
        if self.num_subgraph.0 == 0 {
            return Err(GenError::ZeroMotifs);
        }
        if self.subgraph_size.0 < self.motif.base_size() {
            return Err(GenError::SubgraphTooSmall(
                self.subgraph_size.0,
                self.subgraph_size.1,
                self.motif.base_size(),
            ));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return Err(GenError::BadPositiveFraction(self.positive_fraction));
        }
        Ok(())
    }
}

/// Enumerate every simple cycle of length `len`, each exactly once, as sorted
/// node lists. Canonical traversal: the cycle starts at its smallest node and
/// the second node is smaller than the last.
pub fn enumerate_cycles(num_nodes: usize, adj: &[Vec<usize>], len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut path = Vec::with_capacity(len);
    let mut on_path = vec![false; num_nodes];
    for start in 0..num_nodes {
        path.push(start);
        on_path[start] = true;
        dfs_cycles(adj, start, len, &mut path, &mut on_path, &mut out);
        on_path[start] = false;
        path.pop();
    }
    out
}

fn dfs_cycles(
    adj: &[Vec<usize>],
    start: usize,
    len: usize,
    path: &mut Vec<usize>,
    on_path: &mut [bool],
    out: &mut Vec<Vec<usize>>,
) {
    let last = *path.last().unwrap();
    if path.len() == len {
        // close the cycle; canonical direction: path[1] < path[len-1]
        if adj[last].contains(&start) && path[1] < path[len - 1] {
            let mut cyc = path.clone();
            cyc.sort_unstable();
            out.push(cyc);
        }
        return;
    }
    for &next in &adj[last] {
        if next <= start || on_path[next] {
            continue;
        }
        path.push(next);
        on_path[next] = true;
        dfs_cycles(adj, start, len, path, on_path, out);
        on_path[next] = false;
        path.pop();
    }
}

/// Would adding undirected edge `(u, v)` close a new cycle of length `len`?
/// True iff a simple path of `len - 1` edges joins `u` and `v`.
fn closes_cycle(adj: &[Vec<usize>], u: usize, v: usize, len: usize) -> bool {
    fn path_exists(
        adj: &[Vec<usize>],
        cur: usize,
        target: usize,
        steps_left: usize,
        visited: &mut Vec<bool>,
    ) -> bool {
        if steps_left == 0 {
            return cur == target;
        }
        for &next in &adj[cur] {
            if visited[next] || (next == target && steps_left > 1) {
                continue;
            }
            if next == target && steps_left == 1 {
                return true;
            }
            if next != target {
                visited[next] = true;
                if path_exists(adj, next, target, steps_left - 1, visited) {
                    visited[next] = false;
                    return true;
                }
                visited[next] = false;
            }
        }
        false
    }
    let mut visited = vec![false; adj.len()];
    visited[u] = true;
    path_exists(adj, u, v, len - 1, &mut visited)
}

struct Builder {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    adj: Vec<Vec<usize>>,
    motif_len: usize,
}

impl Builder {
    fn new(motif_len: usize) -> Self {
        Builder {
            num_nodes: 0,
            edges: Vec::new(),
            adj: Vec::new(),
            motif_len,
        }
    }

    fn add_node(&mut self) -> usize {
        self.num_nodes += 1;
        self.adj.push(Vec::new());
        self.num_nodes - 1
    }

    fn add_edge_unchecked(&mut self, u: usize, v: usize) {
        self.edges.push((u, v));
        self.adj[u].push(v);
        self.adj[v].push(u);
    }

    fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adj[u].contains(&v)
    }

    /// Add `(u, v)` only if it is new and closes no motif-length cycle.
    fn try_add_edge(&mut self, u: usize, v: usize) -> bool {
        if u == v || self.has_edge(u, v) {
            return false;
        }
        if closes_cycle(&self.adj, u, v, self.motif_len) {
            return false;
        }
        self.add_edge_unchecked(u, v);
        true
    }
}

/// A positive sample plus the planted motif node groups (base cycle nodes).
pub struct PositiveSample {
    pub graph: Graph,
    pub motifs: Vec<Vec<usize>>,
}

pub fn generate_positive(spec: &GenSpec, rng: &mut ChaCha8Rng) -> Result<PositiveSample, GenError> {
    spec.validate()?;
    let base = spec.motif.base_size();
    let num_motifs = rng.random_range(spec.num_subgraph.0..=spec.num_subgraph.1);
    let subgraph_size = rng.random_range(spec.subgraph_size.0..=spec.subgraph_size.1);
    let prob_conn = if spec.prob_conn.0 == spec.prob_conn.1 {
        spec.prob_conn.0
    } else {
        rng.random_range(spec.prob_conn.0..spec.prob_conn.1)
    };

    let mut b = Builder::new(base);
    let mut motifs: Vec<Vec<usize>> = Vec::with_capacity(num_motifs);
    let mut groups: Vec<Vec<usize>> = Vec::with_capacity(num_motifs);

    for _ in 0..num_motifs {
        let cycle: Vec<usize> = (0..base).map(|_| b.add_node()).collect();
        for i in 0..base {
            b.add_edge_unchecked(cycle[i], cycle[(i + 1) % base]);
        }
        let mut group = cycle.clone();
        for _ in base..subgraph_size {
            let extra = b.add_node();
            let anchor = group[rng.random_range(0..group.len())];
            // a pendant node never closes a cycle
            b.add_edge_unchecked(extra, anchor);
            group.push(extra);
        }
        motifs.push(cycle);
        groups.push(group);
    }

    // inter-connect motif groups
    const MAX_ATTEMPTS: usize = 64;
    for i in 0..num_motifs {
        for j in (i + 1)..num_motifs {
            if rng.random::<f64>() >= prob_conn {
                continue;
            }
            let mut placed = false;
            for _ in 0..MAX_ATTEMPTS {
                let u = groups[i][rng.random_range(0..groups[i].len())];
                let v = groups[j][rng.random_range(0..groups[j].len())];
                if b.try_add_edge(u, v) {
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(GenError::PlacementExhausted(MAX_ATTEMPTS));
            }
        }
    }

    // spanning chain over whatever components remain
    loop {
        let g = Graph::new(b.num_nodes, b.edges.clone(), 0);
        let comps = g.components();
        if comps.len() <= 1 {
            break;
        }
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let a = &comps[0];
            let c = &comps[1];
            let u = a[rng.random_range(0..a.len())];
            let v = c[rng.random_range(0..c.len())];
            // an edge between two components can never close a cycle, but the
            // guard also rejects duplicates
            if b.try_add_edge(u, v) {
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(GenError::PlacementExhausted(MAX_ATTEMPTS));
        }
    }

    let mut graph = Graph::new(b.num_nodes, b.edges, 0);
    let mut mask = vec![0u8; graph.num_nodes];
    for cycle in &motifs {
        for &v in cycle {
            mask[v] = 1;
        }
    }
    graph.annotation = Some(mask);
    graph.label = 1;
    graph.props.insert("ProbConn".into(), prob_conn);
    graph
        .props
        .insert("NumSubgraph".into(), num_motifs as f64);
    graph
        .props
        .insert("SubgraphSize".into(), subgraph_size as f64);
    Ok(PositiveSample { graph, motifs })
}

/// Recover the planted motif cycles of a positive graph: by construction they
/// are exactly the motif-length cycles induced by the annotated nodes.
pub fn planted_motifs(g: &Graph, motif: Motif) -> Result<Vec<Vec<usize>>, GenError> {
    let mask = g.annotation.as_ref().ok_or(GenError::NotAPositive)?;
    if g.label != 1 {
        return Err(GenError::NotAPositive);
    }
    let keep: Vec<bool> = mask.iter().map(|&m| m == 1).collect();
    let mut adj = vec![Vec::new(); g.num_nodes];
    for &(u, v) in &g.edges {
        if keep[u] && keep[v] {
            adj[u].push(v);
            adj[v].push(u);
        }
    }
    Ok(enumerate_cycles(g.num_nodes, &adj, motif.base_size()))
}

/// Break every planted motif by removing one random motif edge. The result is
/// labeled negative with an all-zero annotation mask, and is checked to carry
/// no remaining motif-length cycle among the formerly annotated nodes.
pub fn make_negative(
    positive: &Graph,
    motif: Motif,
    rng: &mut ChaCha8Rng,
) -> Result<Graph, GenError> {
    let cycles = planted_motifs(positive, motif)?;
    let base = motif.base_size();
    let mut g = positive.clone();
    for cyc in &cycles {
        // edges of this cycle present in the graph
        let cycle_edges: Vec<usize> = g
            .edges
            .iter()
            .enumerate()
            .filter(|(_, &(u, v))| {
                cyc.contains(&u) && cyc.contains(&v)
            })
            .map(|(i, _)| i)
            .collect();
        debug_assert_eq!(cycle_edges.len(), base);
        let victim = cycle_edges[rng.random_range(0..cycle_edges.len())];
        g.edges.swap_remove(victim);
    }
    g.label = 0;
    let former: Vec<bool> = positive
        .annotation
        .as_ref()
        .unwrap()
        .iter()
        .map(|&m| m == 1)
        .collect();
    let mut adj = vec![Vec::new(); g.num_nodes];
    for &(u, v) in &g.edges {
        if former[u] && former[v] {
            adj[u].push(v);
            adj[v].push(u);
        }
    }
    debug_assert!(
        enumerate_cycles(g.num_nodes, &adj, base).is_empty(),
        "negative retained a motif cycle"
    );
    g.annotation = Some(vec![0u8; g.num_nodes]);
    Ok(g)
}

/// Laplacian eigenvector positional encoding: eigenvectors of the
/// symmetric-normalized Laplacian for the `k` smallest nonzero eigenvalues,
/// sign-fixed (first nonzero entry positive), zero-padded when the spectrum
/// has fewer than `k` nonzero eigenvalues. Returns a row-major `[n, k]` array.
pub fn laplacian_pe(g: &Graph, k: usize) -> Result<Vec<f64>, GenError> {
    let n = g.num_nodes;
    if k >= n {
        return Err(GenError::TooManyEigenvectors(k, n));
    }
    let deg = g.degrees();
    let inv_sqrt: Vec<f64> = deg
        .iter()
        .map(|&d| if d > 0 { 1.0 / (d as f64).sqrt() } else { 0.0 })
        .collect();
    let mut lap = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        lap[(i, i)] = if deg[i] > 0 { 1.0 } else { 0.0 };
    }
    for &(u, v) in &g.edges {
        let w = inv_sqrt[u] * inv_sqrt[v];
        lap[(u, v)] -= w;
        lap[(v, u)] -= w;
    }
    let eig = SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .expect("finite eigenvalues")
    });

    const ZERO_TOL: f64 = 1e-8;
    let nonzero: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| eig.eigenvalues[i] > ZERO_TOL)
        .collect();

    let mut out = vec![0.0; n * k];
    for (col, &ei) in nonzero.iter().take(k).enumerate() {
        let v = eig.eigenvectors.column(ei);
        let flip = match v.iter().find(|x| x.abs() > 1e-9) {
            Some(&first) if first < 0.0 => -1.0,
            _ => 1.0,
        };
        for row in 0..n {
            out[row * k + col] = flip * v[row];
        }
    }
    Ok(out)
}

/// Normalized-Laplacian eigenvalues in ascending order (exposed for tests and
/// diagnostics).
pub fn laplacian_eigenvalues(g: &Graph) -> Vec<f64> {
    let n = g.num_nodes;
    let deg = g.degrees();
    let inv_sqrt: Vec<f64> = deg
        .iter()
        .map(|&d| if d > 0 { 1.0 / (d as f64).sqrt() } else { 0.0 })
        .collect();
    let mut lap = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        lap[(i, i)] = if deg[i] > 0 { 1.0 } else { 0.0 };
    }
    for &(u, v) in &g.edges {
        let w = inv_sqrt[u] * inv_sqrt[v];
        lap[(u, v)] -= w;
        lap[(v, u)] -= w;
    }
    let eig = SymmetricEigen::new(lap);
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    vals
}

/// Generate one split: `num_samples` graphs at `positive_fraction` positives,
/// features filled with Laplacian positional encodings, deterministic under
/// the spec seed.
pub fn generate_split_dataset(spec: &GenSpec) -> Result<Vec<Graph>, GenError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let n_pos = (spec.num_samples as f64 * spec.positive_fraction).round() as usize;
    let n_neg = spec.num_samples - n_pos;
    let mut graphs = Vec::with_capacity(spec.num_samples);
    for _ in 0..n_pos {
        graphs.push(generate_positive(spec, &mut rng)?.graph);
    }
    for _ in 0..n_neg {
        let pos = generate_positive(spec, &mut rng)?.graph;
        graphs.push(make_negative(&pos, spec.motif, &mut rng)?);
    }
    for g in &mut graphs {
        let k = spec.feature_dim.min(g.num_nodes.saturating_sub(1));
        let pe = laplacian_pe(g, k)?;
        // pad to the requested feature dim when the graph is tiny
        g.feature_dim = spec.feature_dim;
        g.features = vec![0.0; g.num_nodes * spec.feature_dim];
        for row in 0..g.num_nodes {
            g.features[row * spec.feature_dim..row * spec.feature_dim + k]
                .copy_from_slice(&pe[row * k..(row + 1) * k]);
        }
        debug_assert!(g.validate().is_ok());
    }
    Ok(graphs)
}

/// Table-style split ranges for one property axis, leaving the other two
/// hyperparameters at their defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitProperty {
    ProbConn,
    NumSubgraph,
    SubgraphSize,
}

impl SplitProperty {
    pub fn name(self) -> &'static str {
        match self {
            SplitProperty::ProbConn => "ProbConn",
            SplitProperty::NumSubgraph => "NumSubgraph",
            SplitProperty::SubgraphSize => "SubgraphSize",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ProbConn" => Some(SplitProperty::ProbConn),
            "NumSubgraph" => Some(SplitProperty::NumSubgraph),
            "SubgraphSize" => Some(SplitProperty::SubgraphSize),
            _ => None,
        }
    }
}

/// Per-split sampling ranges for the varied property; the remaining two stay
/// at the dataset defaults (the mildest split's ranges).
pub fn split_ranges(motif: Motif, prop: SplitProperty) -> [[f64; 2]; 4] {
    match (prop, motif) {
        (SplitProperty::ProbConn, _) => [[0.05, 0.2], [0.3, 0.4], [0.6, 0.7], [0.9, 1.0]],
        (SplitProperty::NumSubgraph, Motif::Triangle) => {
            [[2.0, 3.0], [6.0, 7.0], [9.0, 10.0], [12.0, 13.0]]
        }
        (SplitProperty::NumSubgraph, Motif::Pentagon) => {
            [[2.0, 3.0], [5.0, 6.0], [8.0, 9.0], [11.0, 12.0]]
        }
        (SplitProperty::SubgraphSize, Motif::Triangle) => {
            [[3.0, 4.0], [6.0, 7.0], [9.0, 10.0], [12.0, 13.0]]
        }
        (SplitProperty::SubgraphSize, Motif::Pentagon) => {
            [[6.0, 7.0], [9.0, 10.0], [12.0, 13.0], [15.0, 16.0]]
        }
    }
}

/// GenSpec for one OOD split of a synthetic dataset: the varied property is
/// sampled from its split range, the other two from their mildest range.
pub fn split_spec(
    motif: Motif,
    prop: SplitProperty,
    split_index: usize,
    num_samples: usize,
    feature_dim: usize,
    rng_seed: u64,
) -> GenSpec {
    let ranges = split_ranges(motif, prop);
    let r = ranges[split_index];
    let defaults = |p: SplitProperty| split_ranges(motif, p)[0];
    let pc = defaults(SplitProperty::ProbConn);
    let ns = defaults(SplitProperty::NumSubgraph);
    let ss = defaults(SplitProperty::SubgraphSize);
    let mut spec = GenSpec {
        motif,
        prob_conn: (pc[0], pc[1]),
        num_subgraph: (ns[0] as usize, ns[1] as usize),
        subgraph_size: (ss[0] as usize, ss[1] as usize),
        num_samples,
        positive_fraction: 0.5,
        feature_dim,
        rng_seed,
    };
    match prop {
        SplitProperty::ProbConn => spec.prob_conn = (r[0], r[1]),
        SplitProperty::NumSubgraph => spec.num_subgraph = (r[0] as usize, r[1] as usize),
        SplitProperty::SubgraphSize => spec.subgraph_size = (r[0] as usize, r[1] as usize),
    }
    spec
}

pub fn props_map(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs
        .iter()
        .map(|&(k, v)| (k.to_string(), v))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(motif: Motif, num: (usize, usize), size: (usize, usize)) -> GenSpec {
        GenSpec {
            motif,
            prob_conn: (0.3, 0.4),
            num_subgraph: num,
            subgraph_size: size,
            num_samples: 10,
            positive_fraction: 0.5,
            feature_dim: 4,
            rng_seed: 1,
        }
    }

    /// Test-side oracle: all k-subsets that induce a k-cycle, found by
    /// exhaustive subset enumeration (independent of the DFS enumerator).
    fn exhaustive_cycle_subsets(g: &Graph, k: usize) -> Vec<Vec<usize>> {
        fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
            let mut out = Vec::new();
            let mut cur = Vec::new();
            fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
                if cur.len() == k {
                    out.push(cur.clone());
                    return;
                }
                for i in start..n {
                    cur.push(i);
                    rec(i + 1, n, k, cur, out);
                    cur.pop();
                }
            }
            rec(0, n, k, &mut cur, &mut out);
            out
        }
        let adj = g.adjacency();
        subsets(g.num_nodes, k)
            .into_iter()
            .filter(|set| {
                // the induced subgraph on `set` contains a k-cycle iff some
                // Hamiltonian cycle over `set` exists
                fn ham(
                    adj: &[Vec<usize>],
                    set: &[usize],
                    path: &mut Vec<usize>,
                    used: &mut Vec<bool>,
                ) -> bool {
                    if path.len() == set.len() {
                        return adj[*path.last().unwrap()].contains(&path[0]);
                    }
                    for (i, &v) in set.iter().enumerate() {
                        if used[i] || !adj[*path.last().unwrap()].contains(&v) {
                            continue;
                        }
                        used[i] = true;
                        path.push(v);
                        if ham(adj, set, path, used) {
                            return true;
                        }
                        path.pop();
                        used[i] = false;
                    }
                    false
                }
                let mut path = vec![set[0]];
                let mut used = vec![false; set.len()];
                used[0] = true;
                ham(&adj, set, &mut path, &mut used)
            })
            .collect()
    }

    #[test]
    fn forced_single_triangle() {
        let s = spec(Motif::Triangle, (1, 1), (3, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pos = generate_positive(&s, &mut rng).unwrap();
        assert_eq!(pos.graph.num_nodes, 3);
        let adj = pos.graph.adjacency();
        assert_eq!(enumerate_cycles(3, &adj, 3).len(), 1);
        assert_eq!(pos.graph.annotation.as_ref().unwrap(), &vec![1, 1, 1]);
    }

    #[test]
    fn triangle_counts_match_sampled_range() {
        // Table-range check: NumSubgraph in (2, 3), SubgraphSize in (3, 4)
        let s = spec(Motif::Triangle, (2, 3), (3, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let pos = generate_positive(&s, &mut rng).unwrap();
            let n_motifs = pos.graph.props["NumSubgraph"] as usize;
            assert!(n_motifs == 2 || n_motifs == 3);
            assert_eq!(pos.motifs.len(), n_motifs);
            let adj = pos.graph.adjacency();
            let cycles = enumerate_cycles(pos.graph.num_nodes, &adj, 3);
            assert_eq!(cycles.len(), n_motifs, "accidental triangle slipped in");
            let annotated: usize = pos
                .graph
                .annotation
                .as_ref()
                .unwrap()
                .iter()
                .map(|&m| m as usize)
                .sum();
            assert_eq!(annotated, 3 * n_motifs);
        }
    }

    #[test]
    fn pentagon_sizes_carry_extras() {
        let s = spec(Motif::Pentagon, (1, 2), (6, 7));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let pos = generate_positive(&s, &mut rng).unwrap();
            let size = pos.graph.props["SubgraphSize"] as usize;
            assert!(size == 6 || size == 7);
            let extras = size - 5;
            assert!(extras == 1 || extras == 2);
            let n_motifs = pos.motifs.len();
            assert_eq!(pos.graph.num_nodes, n_motifs * size);
        }
    }

    #[test]
    fn negative_breaks_every_motif() {
        let s = spec(Motif::Triangle, (2, 2), (4, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pos = generate_positive(&s, &mut rng).unwrap();
        let neg = make_negative(&pos.graph, Motif::Triangle, &mut rng).unwrap();
        assert_eq!(neg.label, 0);
        assert_eq!(pos.graph.edges.len() - neg.edges.len(), 2);
        assert!(neg.annotation.as_ref().unwrap().iter().all(|&m| m == 0));
        // independent oracle: exhaustive 3-subset enumeration finds no triangle
        assert!(exhaustive_cycle_subsets(&neg, 3).is_empty());
    }

    #[test]
    fn negative_single_triangle_leaves_a_path() {
        let s = spec(Motif::Triangle, (1, 1), (3, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pos = generate_positive(&s, &mut rng).unwrap();
        let neg = make_negative(&pos.graph, Motif::Triangle, &mut rng).unwrap();
        assert_eq!(neg.edges.len(), 2);
        let deg = neg.degrees();
        let mut sorted = deg.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![1, 1, 2]);
    }

    #[test]
    fn k3_laplacian_eigenvalues() {
        let g = Graph::new(3, vec![(0, 1), (1, 2), (0, 2)], 0);
        let vals = laplacian_eigenvalues(&g);
        assert!(vals[0].abs() < 1e-10);
        assert!((vals[1] - 1.5).abs() < 1e-10);
        assert!((vals[2] - 1.5).abs() < 1e-10);
    }

    #[test]
    fn laplacian_pe_columns_orthonormal() {
        // path + chord graph, 6 nodes, simple spectrum
        let g = Graph::new(6, vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (1, 4)], 0);
        let k = 3;
        let pe = laplacian_pe(&g, k).unwrap();
        for a in 0..k {
            for b in 0..k {
                let dot: f64 = (0..6).map(|r| pe[r * k + a] * pe[r * k + b]).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-8, "col {a} . col {b} = {dot}");
            }
        }
    }

    #[test]
    fn laplacian_pe_is_permutation_equivariant() {
        // P6 has a simple spectrum, so sign-fixed eigenvectors permute rows
        let g = Graph::new(6, vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)], 0);
        let k = 3;
        let pe = laplacian_pe(&g, k).unwrap();
        let perm = vec![3, 0, 5, 1, 4, 2];
        let pg = g.permuted(&perm);
        let ppe = laplacian_pe(&pg, k).unwrap();
        for new in 0..6 {
            let old = perm[new];
            for c in 0..k {
                assert!(
                    (ppe[new * k + c] - pe[old * k + c]).abs() < 1e-8,
                    "row {new} col {c}"
                );
            }
        }
    }

    #[test]
    fn split_dataset_counts_and_determinism() {
        let mut s = spec(Motif::Triangle, (2, 3), (3, 4));
        s.num_samples = 40;
        let data = generate_split_dataset(&s).unwrap();
        assert_eq!(data.len(), 40);
        let positives = data.iter().filter(|g| g.label == 1).count();
        assert_eq!(positives, 20);
        let again = generate_split_dataset(&s).unwrap();
        assert_eq!(data, again);
    }

    #[test]
    fn table_ranges_for_extreme_split() {
        // 76to100 NumSubgraph split for Triangle: every positive has 12 or 13 motifs
        let s = split_spec(Motif::Triangle, SplitProperty::NumSubgraph, 3, 10, 4, 77);
        assert_eq!(s.num_subgraph, (12, 13));
        let data = generate_split_dataset(&s).unwrap();
        for g in data.iter().filter(|g| g.label == 1) {
            let m = planted_motifs(g, Motif::Triangle).unwrap();
            assert!(m.len() == 12 || m.len() == 13, "found {} motifs", m.len());
        }
    }

    #[test]
    fn infeasible_spec_rejected() {
        let s = spec(Motif::Pentagon, (1, 1), (3, 3));
        assert!(matches!(
            s.validate(),
            Err(GenError::SubgraphTooSmall(3, 3, 5))
        ));
    }

    #[test]
    fn enumerator_agrees_with_exhaustive_subsets() {
        let s = spec(Motif::Triangle, (2, 3), (3, 5));
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let pos = generate_positive(&s, &mut rng).unwrap();
            let adj = pos.graph.adjacency();
            let mut fast = enumerate_cycles(pos.graph.num_nodes, &adj, 3);
            let mut slow = exhaustive_cycle_subsets(&pos.graph, 3);
            fast.sort();
            slow.sort();
            fast.dedup();
            assert_eq!(fast, slow);
        }
    }
}
