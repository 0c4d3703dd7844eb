//! Dependency-tree computations: distances to the target, syntax-based
//! possibility scores, the binary adjacency matrix, tree paths and the
//! target-oriented pruned adjacency matrices.
//!
//! Trees are undirected for every distance and path computation. Distance is
//! an edge count, so the target itself sits at distance 0.

use std::collections::VecDeque;

use ndarray::Array2;
use serde::Serialize;

use crate::corpus::{Sentence, Span};
use crate::error::{Error, Result};

/// `n × n` nonnegative weights.
pub type AdjMatrix = Array2<f64>;

/// A validated single-rooted dependency tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepTree {
    heads: Vec<Option<usize>>,
    neighbors: Vec<Vec<usize>>,
    root: usize,
}

impl DepTree {
    pub fn new(heads: &[Option<usize>]) -> Result<Self> {
        let n = heads.len();
        if n == 0 {
            return Err(Error::Tree("empty tree".into()));
        }
        let roots: Vec<usize> = (0..n).filter(|&i| heads[i].is_none()).collect();
        match roots.len() {
            0 => return Err(Error::Tree("no root".into())),
            1 => {}
            k => return Err(Error::Tree(format!("{k} roots"))),
        }
        if let Some(i) = (0..n).find(|&i| heads[i].is_some_and(|h| h >= n)) {
            return Err(Error::Tree(format!("head of token {i} out of range")));
        }
        // walking up from every node must reach the root; colour nodes already
        // known to do so to keep this linear
        let mut state = vec![0u8; n]; // 0 unseen, 1 on current walk, 2 reaches root
        for start in 0..n {
            let mut walk = Vec::new();
            let mut cur = start;
            loop {
                match state[cur] {
                    2 => break,
                    1 => return Err(Error::Tree("cyclic heads".into())),
                    _ => {}
                }
                state[cur] = 1;
                walk.push(cur);
                match heads[cur] {
                    Some(h) => cur = h,
                    None => break,
                }
            }
            for v in walk {
                state[v] = 2;
            }
        }
        let mut neighbors = vec![Vec::new(); n];
        for (i, h) in heads.iter().enumerate() {
            if let Some(h) = *h {
                neighbors[i].push(h);
                neighbors[h].push(i);
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Ok(DepTree { heads: heads.to_vec(), neighbors, root: roots[0] })
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn head(&self, i: usize) -> Option<usize> {
        self.heads[i]
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.heads.iter().enumerate().filter_map(|(i, h)| h.map(|h| (i, h)))
    }

    /// BFS edge counts from a set of sources.
    fn bfs(&self, sources: impl IntoIterator<Item = usize>) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.len()];
        let mut queue = VecDeque::new();
        for s in sources {
            dist[s] = 0;
            queue.push_back(s);
        }
        while let Some(u) = queue.pop_front() {
            for &v in &self.neighbors[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn distances_from(&self, i: usize) -> Vec<usize> {
        self.bfs([i])
    }

    fn depth(&self, mut i: usize) -> usize {
        let mut d = 0;
        while let Some(h) = self.heads[i] {
            i = h;
            d += 1;
        }
        d
    }

    /// Token of `span` closest to the root (earliest on ties); used wherever a
    /// single target position is read out.
    pub fn anchor(&self, span: Span) -> usize {
        span.indices().min_by_key(|&i| (self.depth(i), i)).expect("spans are nonempty")
    }
}

/// Edge count from every token to the nearest target-span token.
pub fn tree_distances(tree: &DepTree, target: Span) -> Vec<usize> {
    tree.bfs(target.indices())
}

/// `softmax(-d)`.
pub fn syntax_scores(distances: &[usize]) -> Vec<f64> {
    let neg: Vec<f64> = distances.iter().map(|&d| -(d as f64)).collect();
    softmax(&neg)
}

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Binary undirected adjacency with self-loops.
pub fn dep_adjacency(tree: &DepTree) -> AdjMatrix {
    let mut a = Array2::eye(tree.len());
    for (i, h) in tree.edges() {
        a[[i, h]] = 1.0;
        a[[h, i]] = 1.0;
    }
    a
}

/// Nodes on the unique tree path between `from` and `to`, ascending.
pub fn path_nodes(tree: &DepTree, from: usize, to: usize) -> Vec<usize> {
    let (mut a, mut b) = (from, to);
    let (mut da, mut db) = (tree.depth(a), tree.depth(b));
    let mut nodes = vec![a, b];
    while da > db {
        a = tree.heads[a].expect("non-root has a head");
        da -= 1;
        nodes.push(a);
    }
    while db > da {
        b = tree.heads[b].expect("non-root has a head");
        db -= 1;
        nodes.push(b);
    }
    while a != b {
        a = tree.heads[a].expect("non-root has a head");
        b = tree.heads[b].expect("non-root has a head");
        nodes.push(a);
        nodes.push(b);
    }
    nodes.sort_unstable();
    nodes.dedup();
    nodes
}

/// Membership mask of the pruned node set K: the union of tree paths from the
/// target to every word of `words`. Each path starts at the target-span token
/// nearest to the word; for multi-token targets the path from the span anchor
/// to that token is included too, so the anchor stays connected to K.
pub fn pruned_nodes(tree: &DepTree, target: Span, words: &[usize]) -> Vec<bool> {
    let mut keep = vec![false; tree.len()];
    if words.is_empty() {
        return keep;
    }
    let anchor = tree.anchor(target);
    let from_target: Vec<Vec<usize>> = target.indices().map(|t| tree.distances_from(t)).collect();
    for &w in words {
        let nearest = target
            .indices()
            .zip(&from_target)
            .min_by_key(|(t, d)| (d[w], *t))
            .map(|(t, _)| t)
            .expect("spans are nonempty");
        for i in path_nodes(tree, nearest, w).into_iter().chain(path_nodes(tree, anchor, nearest)) {
            keep[i] = true;
        }
    }
    keep
}

/// 0/1 matrix selecting `K × K`.
pub fn prune_mask(tree: &DepTree, target: Span, words: &[usize]) -> AdjMatrix {
    let keep = pruned_nodes(tree, target, words);
    let n = tree.len();
    Array2::from_shape_fn((n, n), |(i, j)| if keep[i] && keep[j] { 1.0 } else { 0.0 })
}

/// Keeps `a[i][j]` when both tokens lie on some target-to-word path; zeroes
/// the rest without re-indexing.
pub fn pruned_adjacency(a: &AdjMatrix, tree: &DepTree, target: Span, words: &[usize]) -> AdjMatrix {
    a * &prune_mask(tree, target, words)
}

/// Everything the model needs from the tree of one example.
#[derive(Clone, Debug)]
pub struct SyntaxView {
    pub tree: DepTree,
    pub distances: Vec<usize>,
    pub syn_scores: Vec<f64>,
    pub adj_dep: AdjMatrix,
    pub anchor: usize,
}

impl SyntaxView {
    pub fn new(sentence: &Sentence) -> Self {
        let tree = sentence.tree();
        let distances = tree_distances(&tree, sentence.target);
        let syn_scores = syntax_scores(&distances);
        let adj_dep = dep_adjacency(&tree);
        let anchor = tree.anchor(sentence.target);
        SyntaxView { tree, distances, syn_scores, adj_dep, anchor }
    }
}

/// JSON dump produced by the `inspect` command.
#[derive(Clone, Debug, Serialize)]
pub struct InspectDump {
    pub distances: Vec<usize>,
    pub syn_scores: Vec<f64>,
    pub adj_dep: Vec<Vec<f64>>,
    pub adj_combined: Vec<Vec<f64>>,
    pub adj_opinion: Vec<Vec<f64>>,
    pub adj_other: Vec<Vec<f64>>,
}

pub fn matrix_rows(a: &AdjMatrix) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}
