//! Exact log-space dynamic programming over a [`Lattice`]: log-partition,
//! edge marginals and Viterbi decoding.
//!
//! Node ids are a topological order, so each pass is a single sweep over
//! node ids (forward) or its reverse (backward). Cost is linear in the
//! number of edges, which is at most a constant times the sentence length.

use crate::error::{Error, Result};
use crate::lattice::{Lattice, Node, Path};

/// One natural-log score per lattice edge, indexed like `lattice.edges()`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeScores(Vec<f64>);

impl EdgeScores {
    pub fn new(lattice: &Lattice, values: Vec<f64>) -> Result<Self> {
        if values.len() != lattice.edges().len() {
            return Err(Error::Argument(format!(
                "{} scores for {} edges",
                values.len(),
                lattice.edges().len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("score of edge {i} is not finite")));
        }
        Ok(EdgeScores(values))
    }

    pub fn zeros(lattice: &Lattice) -> Self {
        EdgeScores(vec![0.0; lattice.edges().len()])
    }

    pub fn from_fn(lattice: &Lattice, mut f: impl FnMut(usize) -> f64) -> Self {
        EdgeScores((0..lattice.edges().len()).map(&mut f).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for EdgeScores {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[derive(Clone, Debug)]
pub struct InferenceResult {
    pub log_partition: f64,
    /// Indexed like `lattice.edges()`.
    pub edge_marginals: Vec<f64>,
    /// Indexed by node id.
    pub node_marginals: Vec<f64>,
    pub best: Option<(Path, f64)>,
}

/// `log(sum(exp(xs)))` without overflow; `-inf` for an empty input.
pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Sum of edge scores along `path`.
pub fn path_score(lattice: &Lattice, path: &[Node], scores: &EdgeScores) -> Result<f64> {
    Ok(lattice.path_edges(path)?.iter().map(|&e| scores[e]).sum())
}

/// Log of the summed exponentiated scores of all paths reaching each node.
pub fn forward(lattice: &Lattice, scores: &EdgeScores) -> Vec<f64> {
    let edges = lattice.edges();
    let mut alpha = vec![f64::NEG_INFINITY; lattice.nodes().len()];
    for v in 0..alpha.len() {
        if lattice.is_start(v) {
            alpha[v] = 0.0;
            continue;
        }
        let terms = lattice
            .incoming(v)
            .map(|e| alpha[edges[e].source] + scores[e]);
        alpha[v] = log_sum_exp(terms);
    }
    alpha
}

/// Log of the summed exponentiated scores of all paths from each node to an end.
pub fn backward(lattice: &Lattice, scores: &EdgeScores) -> Vec<f64> {
    let edges = lattice.edges();
    let mut beta = vec![f64::NEG_INFINITY; lattice.nodes().len()];
    for u in (0..beta.len()).rev() {
        if lattice.is_end(u) {
            beta[u] = 0.0;
            continue;
        }
        let terms = lattice
            .outgoing(u)
            .iter()
            .map(|&e| scores[e] + beta[edges[e].target]);
        beta[u] = log_sum_exp(terms);
    }
    beta
}

pub fn log_partition(lattice: &Lattice, scores: &EdgeScores) -> f64 {
    let alpha = forward(lattice, scores);
    log_sum_exp(lattice.ends().iter().map(|&v| alpha[v]))
}

pub fn marginals(lattice: &Lattice, scores: &EdgeScores) -> InferenceResult {
    let alpha = forward(lattice, scores);
    let beta = backward(lattice, scores);
    let log_z = log_sum_exp(lattice.ends().iter().map(|&v| alpha[v]));
    let edge_marginals = lattice
        .edges()
        .iter()
        .enumerate()
        .map(|(i, e)| (alpha[e.source] + scores[i] + beta[e.target] - log_z).exp())
        .collect();
    let node_marginals = alpha
        .iter()
        .zip(&beta)
        .map(|(a, b)| (a + b - log_z).exp())
        .collect();
    InferenceResult {
        log_partition: log_z,
        edge_marginals,
        node_marginals,
        best: None,
    }
}

/// Posterior probability of each edge; equals the derivative of the
/// log-partition with respect to that edge's score.
pub fn edge_marginals(lattice: &Lattice, scores: &EdgeScores) -> Vec<f64> {
    marginals(lattice, scores).edge_marginals
}

/// Highest-scoring path and its score. Among equal scores the predecessor
/// (and final node) with the lowest node id wins, which prefers tags in the
/// order `B < E_B < E_M < E_E < E_S < A` and polarities `+ < - < 0`.
pub fn viterbi(lattice: &Lattice, scores: &EdgeScores) -> (Path, f64) {
    let edges = lattice.edges();
    let len = lattice.nodes().len();
    let mut best = vec![f64::NEG_INFINITY; len];
    let mut back: Vec<Option<usize>> = vec![None; len];
    for v in 0..len {
        if lattice.is_start(v) {
            best[v] = 0.0;
            continue;
        }
        for e in lattice.incoming(v) {
            let s = best[edges[e].source] + scores[e];
            if s > best[v] {
                best[v] = s;
                back[v] = Some(edges[e].source);
            }
        }
    }
    let mut end = lattice.ends()[0];
    for &v in lattice.ends() {
        if best[v] > best[end] {
            end = v;
        }
    }
    let mut ids = vec![end];
    while let Some(prev) = back[*ids.last().unwrap()] {
        ids.push(prev);
    }
    ids.reverse();
    (ids.into_iter().map(|v| lattice.node(v)).collect(), best[end])
}
