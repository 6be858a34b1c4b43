#![allow(dead_code)]

use rand::Rng;
use sentispan::corpus::{Polarity, SpanLabel};
use sentispan::inference::EdgeScores;
use sentispan::lattice::{Lattice, Node, SubTag, Tag};
use sentispan::training::TrainConfig;

/// One label per word: a word before its target, a target word, or a word
/// after its target. Each maximal group `pre* target post*` is one
/// sentiment span.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WordLabel {
    Pre(Polarity),
    In(SubTag, Polarity),
    Post(Polarity),
}

fn polarity(l: WordLabel) -> Polarity {
    match l {
        WordLabel::Pre(p) | WordLabel::In(_, p) | WordLabel::Post(p) => p,
    }
}

fn may_follow(prev: Option<WordLabel>, next: WordLabel) -> bool {
    use SubTag::*;
    use WordLabel::*;
    let segment_start = matches!(next, Pre(_) | In(Begin | Single, _));
    match prev {
        None => segment_start,
        Some(Pre(p)) => matches!(next, Pre(q) | In(Begin | Single, q) if q == p),
        Some(In(Begin | Middle, p)) => matches!(next, In(Middle | End, q) if q == p),
        Some(In(End | Single, p)) | Some(Post(p)) => matches!(next, Post(q) if q == p) || segment_start,
    }
}

fn all_word_labels() -> Vec<WordLabel> {
    let mut out = Vec::new();
    for p in Polarity::ALL {
        out.push(WordLabel::Pre(p));
        for e in SubTag::ALL {
            out.push(WordLabel::In(e, p));
        }
        out.push(WordLabel::Post(p));
    }
    out
}

/// Every valid word-label sequence of length `n`.
pub fn word_label_sequences(n: usize) -> Vec<Vec<WordLabel>> {
    fn go(n: usize, cur: &mut Vec<WordLabel>, labels: &[WordLabel], out: &mut Vec<Vec<WordLabel>>) {
        if cur.len() == n {
            if matches!(cur.last(), Some(WordLabel::In(SubTag::End | SubTag::Single, _) | WordLabel::Post(_))) {
                out.push(cur.clone());
            }
            return;
        }
        for &l in labels {
            if may_follow(cur.last().copied(), l) {
                cur.push(l);
                go(n, cur, labels, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(n, &mut Vec::new(), &all_word_labels(), &mut out);
    out
}

pub fn targets_of(labels: &[WordLabel]) -> Vec<SpanLabel> {
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, l) in labels.iter().enumerate() {
        if let WordLabel::In(e, p) = *l {
            if matches!(e, SubTag::Begin | SubTag::Single) {
                start = i + 1;
            }
            if matches!(e, SubTag::End | SubTag::Single) {
                spans.push(SpanLabel::new(start, i + 1, p));
            }
        }
    }
    spans
}

/// Lattice node path of a word-label sequence: a `B` node on every word
/// up to and including the target start, `E` nodes on target words, and an
/// `A` node on the target end and every following word of the span.
pub fn node_path(labels: &[WordLabel]) -> Vec<Node> {
    let mut path = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        let k = i + 1;
        let p = polarity(l);
        match l {
            WordLabel::Pre(_) => path.push(Node::new(k, Tag::Before(p))),
            WordLabel::In(e, _) => {
                if matches!(e, SubTag::Begin | SubTag::Single) {
                    path.push(Node::new(k, Tag::Before(p)));
                }
                path.push(Node::new(k, Tag::Target(e, p)));
                if matches!(e, SubTag::End | SubTag::Single) {
                    path.push(Node::new(k, Tag::After(p)));
                }
            }
            WordLabel::Post(_) => path.push(Node::new(k, Tag::After(p))),
        }
    }
    path
}

/// Edge ids along `path`, or `None` if the lattice lacks a node or edge.
pub fn edge_ids(lattice: &Lattice, path: &[Node]) -> Option<Vec<usize>> {
    let ids: Option<Vec<usize>> = path.iter().map(|&n| lattice.node_id(n)).collect();
    let ids = ids?;
    ids.windows(2).map(|w| lattice.find_edge(w[0], w[1])).collect()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Brute-force log-partition, best score and edge marginals over `paths`.
pub struct Enumerated {
    pub log_partition: f64,
    pub best: f64,
    pub edge_marginals: Vec<f64>,
}

pub fn enumerate(lattice: &Lattice, paths: &[Vec<Node>], scores: &EdgeScores) -> Option<Enumerated> {
    let edges: Option<Vec<Vec<usize>>> = paths.iter().map(|p| edge_ids(lattice, p)).collect();
    let edges = edges?;
    let totals: Vec<f64> = edges.iter().map(|es| es.iter().map(|&e| scores[e]).sum()).collect();
    let log_partition = log_sum_exp(&totals);
    let mut edge_marginals = vec![0.0; lattice.edges().len()];
    for (es, t) in edges.iter().zip(&totals) {
        for &e in es {
            edge_marginals[e] += (t - log_partition).exp();
        }
    }
    Some(Enumerated {
        log_partition,
        best: totals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        edge_marginals,
    })
}

pub fn random_polarity(rng: &mut impl Rng) -> Polarity {
    Polarity::ALL[rng.gen_range(0..3)]
}

/// Sorted disjoint spans over `n` words, at least one.
pub fn random_spans(n: usize, rng: &mut impl Rng) -> Vec<SpanLabel> {
    loop {
        let mut spans = Vec::new();
        let mut pos = 1;
        while pos <= n {
            if rng.gen_bool(0.35) {
                let end = (pos + rng.gen_range(0..3)).min(n);
                spans.push(SpanLabel::new(pos, end, random_polarity(rng)));
                pos = end + 1;
            } else {
                pos += 1;
            }
        }
        if !spans.is_empty() {
            return spans;
        }
    }
}

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        word_dim: 3,
        char_dim: 2,
        char_emb_dim: 2,
        hidden_dim: 2,
        attention_dim: 3,
        dropout: 0.0,
        ..TrainConfig::default()
    }
}

/// Twenty sentences whose polarity is given by an unambiguous cue word.
pub fn overfit_corpus() -> String {
    let people = [
        ("Alice", None),
        ("Bob", Some("Marley")),
        ("Carol", None),
        ("Dan", Some("Brown")),
        ("Erin", None),
        ("Frank", Some("Ocean")),
        ("Grace", None),
        ("Hugo", Some("Boss")),
        ("Iris", None),
        ("Jack", Some("White")),
    ];
    let cues = [("is", "wonderful", "POS"), ("is", "terrible", "NEG"), ("visited", "today", "NEU")];
    let mut out = String::new();
    for (i, (first, last)) in people.iter().enumerate() {
        for j in 0..2 {
            let (verb, cue, pol) = cues[(i + j) % 3];
            if j == 1 {
                out.push_str("yesterday\tO\n");
            }
            out.push_str(&format!("{first}\tB-{pol}\n"));
            if let Some(last) = last {
                out.push_str(&format!("{last}\tI-{pol}\n"));
            }
            out.push_str(&format!("{verb}\tO\n{cue}\tO\n\n"));
        }
    }
    out
}
