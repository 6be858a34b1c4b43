//! Brute-force reference enumerations used by the self-check and tests.
//!
//! Label sequences are generated constructively from what the tags mean
//! (targets, polarities and the split point inside every gap between two
//! targets), not from the transition table, so they give an independent
//! view of the lattice path sets.

use crate::corpus::{Polarity, SpanLabel};
use crate::lattice::{Node, Path, SubTag, Tag};

/// Every non-empty list of sorted, disjoint, polarized targets over `n` words.
pub fn all_outputs(n: usize) -> Vec<Vec<SpanLabel>> {
    fn go(pos: usize, n: usize, cur: &mut Vec<SpanLabel>, out: &mut Vec<Vec<SpanLabel>>) {
        if !cur.is_empty() {
            out.push(cur.clone());
        }
        for start in pos..=n {
            for end in start..=n {
                for p in Polarity::ALL {
                    cur.push(SpanLabel::new(start, end, p));
                    go(end + 1, n, cur, out);
                    cur.pop();
                }
            }
        }
    }
    let mut out = Vec::new();
    go(1, n, &mut Vec::new(), &mut out);
    out
}

/// Every label sequence whose targets are `spans`: one per choice of how
/// many words of each inter-target gap go to the preceding span.
pub fn label_sequences(n: usize, spans: &[SpanLabel]) -> Vec<Path> {
    if spans.is_empty() {
        return Vec::new();
    }
    let gaps: Vec<usize> = spans.windows(2).map(|w| w[1].start - w[0].end - 1).collect();
    let mut splits = vec![0usize; gaps.len()];
    let mut out = Vec::new();
    loop {
        out.push(sequence_for(n, spans, &splits));
        // odometer over split choices
        let mut i = 0;
        loop {
            if i == splits.len() {
                return out;
            }
            if splits[i] < gaps[i] {
                splits[i] += 1;
                break;
            }
            splits[i] = 0;
            i += 1;
        }
    }
}

/// `splits[i]` gap words after target `i` are tagged `A`; the rest are `B`
/// of target `i + 1`.
fn sequence_for(n: usize, spans: &[SpanLabel], splits: &[usize]) -> Path {
    let mut path = Vec::new();
    for (j, s) in spans.iter().enumerate() {
        let p = s.polarity;
        let first_b = if j == 0 { 1 } else { spans[j - 1].end + 1 + splits[j - 1] };
        for k in first_b..=s.start {
            path.push(Node::new(k, Tag::Before(p)));
        }
        for k in s.start..=s.end {
            let e = SubTag::for_offset(k - s.start, s.len());
            path.push(Node::new(k, Tag::Target(e, p)));
        }
        let last_a = if j + 1 == spans.len() { n } else { s.end + splits[j] };
        for k in s.end..=last_a {
            path.push(Node::new(k, Tag::After(p)));
        }
    }
    path
}

/// All label sequences for a sentence of `n` words.
pub fn all_label_sequences(n: usize) -> Vec<Path> {
    all_outputs(n)
        .iter()
        .flat_map(|spans| label_sequences(n, spans))
        .collect()
}
