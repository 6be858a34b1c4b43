//! Tag lattices over sentiment spans.
//!
//! Every token carries one or more tags. `B_p` marks words of a sentiment
//! span before its target (and the first target word), `A_p` words after it
//! (and the last target word), and `E_{ε,p}` the target words themselves,
//! with `ε` the BMES position inside the target. A path through the lattice
//! fixes both the targets with their polarities (the output) and the span
//! boundaries between targets (the latent part).
//!
//! Nodes are numbered in topological order: position-major, then by tag
//! index, which orders `B < E_B < E_M < E_E < E_S < A` and polarities
//! `+ < - < 0`. All same-position edges go from a lower to a higher tag
//! index, so a single left-to-right sweep over node ids visits every edge
//! after its source.

use std::fmt;

use crate::corpus::{validate_spans, Polarity, SpanLabel};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SubTag {
    Begin,
    Middle,
    End,
    Single,
}

impl SubTag {
    pub const ALL: [SubTag; 4] = [SubTag::Begin, SubTag::Middle, SubTag::End, SubTag::Single];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Sub-tag of the `offset`-th (0-based) word of a target of `len` words.
    pub fn for_offset(offset: usize, len: usize) -> SubTag {
        match (offset, len) {
            (_, 1) => SubTag::Single,
            (0, _) => SubTag::Begin,
            (o, l) if o + 1 == l => SubTag::End,
            _ => SubTag::Middle,
        }
    }

    fn letter(self) -> char {
        match self {
            SubTag::Begin => 'B',
            SubTag::Middle => 'M',
            SubTag::End => 'E',
            SubTag::Single => 'S',
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tag {
    /// Inside a sentiment span, before the target or at its first word.
    Before(Polarity),
    /// Part of the target.
    Target(SubTag, Polarity),
    /// Inside a sentiment span, after the target or at its last word.
    After(Polarity),
}

pub const TAGS_PER_POSITION: usize = 18;

impl Tag {
    pub fn index(self) -> usize {
        match self {
            Tag::Before(p) => p.index(),
            Tag::Target(e, p) => 3 + 3 * e.index() + p.index(),
            Tag::After(p) => 15 + p.index(),
        }
    }

    pub fn from_index(i: usize) -> Tag {
        match i {
            0..=2 => Tag::Before(Polarity::from_index(i)),
            3..=14 => Tag::Target(SubTag::ALL[(i - 3) / 3], Polarity::from_index((i - 3) % 3)),
            15..=17 => Tag::After(Polarity::from_index(i - 15)),
            _ => panic!("tag index {i} out of range"),
        }
    }

    pub fn all() -> impl Iterator<Item = Tag> {
        (0..TAGS_PER_POSITION).map(Tag::from_index)
    }

    pub fn polarity(self) -> Polarity {
        match self {
            Tag::Before(p) | Tag::Target(_, p) | Tag::After(p) => p,
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::Before(p) => write!(f, "B{}", p.symbol()),
            Tag::Target(e, p) => write!(f, "E{}{}", e.letter(), p.symbol()),
            Tag::After(p) => write!(f, "A{}", p.symbol()),
        }
    }
}

/// A tag at a 1-based token position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Node {
    pub position: usize,
    pub tag: Tag,
}

impl Node {
    pub fn new(position: usize, tag: Tag) -> Self {
        Node { position, tag }
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.position, self.tag)
    }
}

/// Which scoring rule applies to an edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EdgeRule {
    /// `E_{ε,p}@k -> E_{ε',p}@k+1`
    TargetCont,
    /// `E_{ε,p}@k -> A_p@k`
    TargetEnd,
    /// `B_p@k -> B_p@k+1`
    SentBB,
    /// `A_p@k -> A_p@k+1`
    SentAA,
    /// `A_p@k -> B_p'@k+1`
    SentAB,
    /// `B_p@k -> E_{ε,p}@k`
    AttnBegin,
}

impl EdgeRule {
    pub fn name(self) -> &'static str {
        match self {
            EdgeRule::TargetCont => "TARGET_CONT",
            EdgeRule::TargetEnd => "TARGET_END",
            EdgeRule::SentBB => "SENT_BB",
            EdgeRule::SentAA => "SENT_AA",
            EdgeRule::SentAB => "SENT_AB",
            EdgeRule::AttnBegin => "ATTN_BEGIN",
        }
    }

    pub const ALL: [EdgeRule; 6] = [
        EdgeRule::TargetCont,
        EdgeRule::TargetEnd,
        EdgeRule::SentBB,
        EdgeRule::SentAA,
        EdgeRule::SentAB,
        EdgeRule::AttnBegin,
    ];
}

impl std::str::FromStr for EdgeRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EdgeRule::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Argument(format!("unknown edge rule {s:?}")))
    }
}

/// The valid-transition table. `standard()` is the only table used for
/// modelling; other tables exist to exercise the self-check.
#[derive(Clone, Debug, Default)]
pub struct TransitionTable {
    disabled: Vec<EdgeRule>,
}

impl TransitionTable {
    pub fn standard() -> Self {
        TransitionTable::default()
    }

    /// A table with one family of transitions removed.
    pub fn without(rule: EdgeRule) -> Self {
        TransitionTable {
            disabled: vec![rule],
        }
    }

    /// Rule for an edge `from@k -> to@k'`, with `advance = k' - k`.
    pub fn rule(&self, from: Tag, to: Tag, advance: usize) -> Option<EdgeRule> {
        use SubTag::*;
        use Tag::*;
        let rule = match (from, to, advance) {
            (Before(p), Before(q), 1) if p == q => EdgeRule::SentBB,
            (Before(p), Target(Begin | Single, q), 0) if p == q => EdgeRule::AttnBegin,
            (Target(Begin | Middle, p), Target(Middle | End, q), 1) if p == q => {
                EdgeRule::TargetCont
            }
            (Target(End | Single, p), After(q), 0) if p == q => EdgeRule::TargetEnd,
            (After(p), After(q), 1) if p == q => EdgeRule::SentAA,
            (After(_), Before(_), 1) => EdgeRule::SentAB,
            _ => return None,
        };
        (!self.disabled.contains(&rule)).then_some(rule)
    }
}

/// An edge between two node ids of a lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub rule: EdgeRule,
}

pub type Path = Vec<Node>;

#[derive(Clone, Debug)]
pub struct Lattice {
    n: usize,
    nodes: Vec<Node>,
    /// `(position - 1) * 18 + tag index` to node id.
    lookup: Vec<Option<usize>>,
    /// Sorted by (target, source).
    edges: Vec<Edge>,
    in_offsets: Vec<usize>,
    out_offsets: Vec<usize>,
    out_edges: Vec<usize>,
    starts: Vec<usize>,
    ends: Vec<usize>,
}

impl Lattice {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> Node {
        self.nodes[id]
    }

    pub fn node_id(&self, node: Node) -> Option<usize> {
        if node.position == 0 || node.position > self.n {
            return None;
        }
        self.lookup[(node.position - 1) * TAGS_PER_POSITION + node.tag.index()]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Ids of edges entering node `v`, in ascending source order.
    pub fn incoming(&self, v: usize) -> std::ops::Range<usize> {
        self.in_offsets[v]..self.in_offsets[v + 1]
    }

    /// Ids of edges leaving node `u`, in ascending target order.
    pub fn outgoing(&self, u: usize) -> &[usize] {
        &self.out_edges[self.out_offsets[u]..self.out_offsets[u + 1]]
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn ends(&self) -> &[usize] {
        &self.ends
    }

    pub fn is_start(&self, id: usize) -> bool {
        self.starts.binary_search(&id).is_ok()
    }

    pub fn is_end(&self, id: usize) -> bool {
        self.ends.binary_search(&id).is_ok()
    }

    pub fn find_edge(&self, source: usize, target: usize) -> Option<usize> {
        self.outgoing(source)
            .iter()
            .copied()
            .find(|&e| self.edges[e].target == target)
    }

    /// Converts a node path to edge ids, failing if any step is not an edge
    /// or the path does not run from a start node to an end node.
    pub fn path_edges(&self, path: &[Node]) -> Result<Vec<usize>> {
        let ids = path
            .iter()
            .map(|&node| {
                self.node_id(node)
                    .ok_or_else(|| Error::Argument(format!("node {node} is not in the lattice")))
            })
            .collect::<Result<Vec<_>>>()?;
        match (ids.first(), ids.last()) {
            (Some(&s), Some(&e)) if self.is_start(s) && self.is_end(e) => {}
            _ => return Err(Error::Argument("path must run from a start to an end node".into())),
        }
        ids.windows(2)
            .map(|w| {
                self.find_edge(w[0], w[1]).ok_or_else(|| {
                    Error::Argument(format!(
                        "no edge {} -> {}",
                        self.nodes[w[0]], self.nodes[w[1]]
                    ))
                })
            })
            .collect()
    }

    /// Text listing of all edges, one `k:tag -> k':tag' RULE` per line.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for e in &self.edges {
            out.push_str(&format!(
                "{} -> {} {}\n",
                self.nodes[e.source],
                self.nodes[e.target],
                e.rule.name()
            ));
        }
        out
    }
}

fn build(
    n: usize,
    table: &TransitionTable,
    node_ok: impl Fn(usize, Tag) -> bool,
    edge_ok: impl Fn(Node, Node) -> bool,
) -> Lattice {
    let slots = n * TAGS_PER_POSITION;
    let slot = |pos: usize, tag: Tag| (pos - 1) * TAGS_PER_POSITION + tag.index();
    let candidate: Vec<bool> = (0..slots)
        .map(|s| node_ok(s / TAGS_PER_POSITION + 1, Tag::from_index(s % TAGS_PER_POSITION)))
        .collect();

    // Candidate edges as slot pairs; slots are already topologically ordered.
    let moves: Vec<Vec<(usize, Tag, EdgeRule)>> = Tag::all()
        .map(|from| {
            (0..=1)
                .flat_map(|advance| Tag::all().map(move |to| (advance, to)))
                .filter_map(|(advance, to)| Some((advance, to, table.rule(from, to, advance)?)))
                .collect()
        })
        .collect();
    let mut cand_edges: Vec<(u32, u32, EdgeRule)> = Vec::with_capacity(slots * 3);
    for s in (0..slots).filter(|&s| candidate[s]) {
        let pos = s / TAGS_PER_POSITION + 1;
        let from = Tag::from_index(s % TAGS_PER_POSITION);
        for &(advance, to, rule) in &moves[from.index()] {
            let to_pos = pos + advance;
            if to_pos > n {
                continue;
            }
            let t = slot(to_pos, to);
            if candidate[t] && edge_ok(Node::new(pos, from), Node::new(to_pos, to)) {
                cand_edges.push((s as u32, t as u32, rule));
            }
        }
    }

    let is_start = |s: usize| s < TAGS_PER_POSITION && matches!(Tag::from_index(s), Tag::Before(_));
    let is_end = |s: usize| {
        s >= (n - 1) * TAGS_PER_POSITION && matches!(Tag::from_index(s % TAGS_PER_POSITION), Tag::After(_))
    };

    // Candidates are in ascending source order, which is topological.
    let mut fwd: Vec<bool> = (0..slots).map(|s| candidate[s] && is_start(s)).collect();
    for &(s, t, _) in &cand_edges {
        if fwd[s as usize] {
            fwd[t as usize] = true;
        }
    }
    let mut bwd: Vec<bool> = (0..slots).map(|s| candidate[s] && is_end(s)).collect();
    for &(s, t, _) in cand_edges.iter().rev() {
        if bwd[t as usize] {
            bwd[s as usize] = true;
        }
    }

    let mut lookup = vec![None; slots];
    let mut nodes = Vec::new();
    for s in 0..slots {
        if fwd[s] && bwd[s] {
            lookup[s] = Some(nodes.len());
            nodes.push(Node::new(s / TAGS_PER_POSITION + 1, Tag::from_index(s % TAGS_PER_POSITION)));
        }
    }

    let kept = || {
        cand_edges.iter().filter_map(|&(s, t, rule)| {
            Some(Edge {
                source: lookup[s as usize]?,
                target: lookup[t as usize]?,
                rule,
            })
        })
    };

    let mut in_offsets = vec![0; nodes.len() + 1];
    let mut out_offsets = vec![0; nodes.len() + 1];
    for e in kept() {
        in_offsets[e.target + 1] += 1;
        out_offsets[e.source + 1] += 1;
    }
    for i in 0..nodes.len() {
        in_offsets[i + 1] += in_offsets[i];
        out_offsets[i + 1] += out_offsets[i];
    }
    // Stable bucketing by target keeps sources ascending within a target.
    let placeholder = Edge {
        source: 0,
        target: 0,
        rule: EdgeRule::SentBB,
    };
    let mut edges = vec![placeholder; in_offsets[nodes.len()]];
    let mut fill = in_offsets.clone();
    for e in kept() {
        edges[fill[e.target]] = e;
        fill[e.target] += 1;
    }
    let mut fill = out_offsets.clone();
    let mut out_edges = vec![0; edges.len()];
    for (i, e) in edges.iter().enumerate() {
        out_edges[fill[e.source]] = i;
        fill[e.source] += 1;
    }

    let starts = (0..slots).filter(|&s| is_start(s)).filter_map(|s| lookup[s]).collect();
    let ends = (0..slots).filter(|&s| is_end(s)).filter_map(|s| lookup[s]).collect();

    Lattice {
        n,
        nodes,
        lookup,
        edges,
        in_offsets,
        out_offsets,
        out_edges,
        starts,
        ends,
    }
}

/// Lattice over every valid label sequence of a length-`n` sentence.
pub fn build_unconstrained(n: usize) -> Result<Lattice> {
    build_unconstrained_with(n, &TransitionTable::standard())
}

pub fn build_unconstrained_with(n: usize, table: &TransitionTable) -> Result<Lattice> {
    if n == 0 {
        return Err(Error::Argument("lattice length must be at least 1".into()));
    }
    Ok(build(n, table, |_, _| true, |_, _| true))
}

/// What a position may carry given the clamping spans. `B` nodes belong to
/// the next target starting at or after them and `A` nodes to the last
/// target ending at or before them.
struct SpanLayout<'a> {
    spans: &'a [SpanLabel],
}

impl SpanLayout<'_> {
    /// Index of the target whose sentiment span a `B` at `pos` belongs to.
    fn before_owner(&self, pos: usize) -> Option<usize> {
        let j = self.spans.iter().position(|s| s.start >= pos)?;
        let prev_end = if j == 0 { 0 } else { self.spans[j - 1].end };
        (pos > prev_end).then_some(j)
    }

    fn after_owner(&self, pos: usize) -> Option<usize> {
        let j = self.spans.iter().rposition(|s| s.end <= pos)?;
        let next_start = self.spans.get(j + 1).map_or(usize::MAX, |s| s.start);
        (pos < next_start).then_some(j)
    }

    fn target_at(&self, pos: usize) -> Option<(usize, Tag)> {
        let j = self.spans.iter().position(|s| s.start <= pos && pos <= s.end)?;
        let s = self.spans[j];
        Some((j, Tag::Target(SubTag::for_offset(pos - s.start, s.len()), s.polarity)))
    }

    fn owner(&self, node: Node) -> Option<usize> {
        match node.tag {
            Tag::Before(p) => self.before_owner(node.position).filter(|&j| self.spans[j].polarity == p),
            Tag::After(p) => self.after_owner(node.position).filter(|&j| self.spans[j].polarity == p),
            tag @ Tag::Target(..) => self
                .target_at(node.position)
                .filter(|&(_, t)| t == tag)
                .map(|(j, _)| j),
        }
    }

    fn edge_ok(&self, from: Node, to: Node) -> bool {
        let (Some(a), Some(b)) = (self.owner(from), self.owner(to)) else {
            return false;
        };
        match (from.tag, to.tag) {
            (Tag::After(_), Tag::Before(_)) => b == a + 1,
            (Tag::Before(_), Tag::Target(..)) => a == b && from.position == self.spans[a].start,
            (Tag::Target(..), Tag::After(_)) => a == b && from.position == self.spans[a].end,
            _ => a == b,
        }
    }
}

/// Lattice over every latent span-boundary choice consistent with `spans`.
pub fn build_clamped(n: usize, spans: &[SpanLabel]) -> Result<Lattice> {
    build_clamped_with(n, spans, &TransitionTable::standard())
}

pub fn build_clamped_with(n: usize, spans: &[SpanLabel], table: &TransitionTable) -> Result<Lattice> {
    if n == 0 {
        return Err(Error::Argument("lattice length must be at least 1".into()));
    }
    if spans.is_empty() {
        return Err(Error::UnsupportedOutput(
            "the lattice cannot encode a sentence without targets".into(),
        ));
    }
    validate_spans(n, spans)?;
    let layout = SpanLayout { spans };
    Ok(build(
        n,
        table,
        |pos, tag| layout.owner(Node::new(pos, tag)).is_some(),
        |from, to| layout.edge_ok(from, to),
    ))
}

/// Number of start-to-end paths, saturating at `u128::MAX`.
pub fn count_paths(lattice: &Lattice) -> u128 {
    let mut ways = vec![0u128; lattice.nodes().len()];
    for v in 0..ways.len() {
        let mut w: u128 = if lattice.is_start(v) { 1 } else { 0 };
        for e in lattice.incoming(v) {
            w = w.saturating_add(ways[lattice.edges()[e].source]);
        }
        ways[v] = w;
    }
    lattice
        .ends()
        .iter()
        .fold(0u128, |acc, &v| acc.saturating_add(ways[v]))
}

/// Reads the targets off a full path. Each maximal run of `E` nodes becomes
/// one span; the BMES sub-tags must agree with the run.
pub fn decode_spans(path: &[Node]) -> Result<Vec<SpanLabel>> {
    let table = TransitionTable::standard();
    let (Some(first), Some(last)) = (path.first(), path.last()) else {
        return Err(Error::Argument("empty path".into()));
    };
    if first.position != 1 || !matches!(first.tag, Tag::Before(_)) {
        return Err(Error::Argument(format!("path starts at {first}")));
    }
    if !matches!(last.tag, Tag::After(_)) {
        return Err(Error::Argument(format!("path ends at {last}")));
    }
    for w in path.windows(2) {
        let advance = w[1].position.wrapping_sub(w[0].position);
        if advance > 1 || table.rule(w[0].tag, w[1].tag, advance).is_none() {
            return Err(Error::Argument(format!("invalid step {} -> {}", w[0], w[1])));
        }
    }

    let mut spans = Vec::new();
    let mut i = 0;
    while i < path.len() {
        if let Tag::Target(_, p) = path[i].tag {
            let mut j = i;
            while j + 1 < path.len() && matches!(path[j + 1].tag, Tag::Target(..)) {
                j += 1;
            }
            let len = j - i + 1;
            for (offset, node) in path[i..=j].iter().enumerate() {
                let expected = Tag::Target(SubTag::for_offset(offset, len), p);
                if node.tag != expected {
                    return Err(Error::Argument(format!("{node} should be {expected}")));
                }
            }
            spans.push(SpanLabel::new(path[i].position, path[j].position, p));
            i = j + 1;
        } else {
            i += 1;
        }
    }
    Ok(spans)
}

/// Canonical path for `spans` where every gap word is tagged `A` of the
/// preceding target (or `B` before the first target).
pub fn canonical_path(n: usize, spans: &[SpanLabel]) -> Result<Path> {
    if spans.is_empty() {
        return Err(Error::UnsupportedOutput("no targets".into()));
    }
    validate_spans(n, spans)?;
    let mut path = Vec::new();
    let mut pos = 1;
    for (j, s) in spans.iter().enumerate() {
        let p = s.polarity;
        // after the first target, `pos` is already the target start
        for k in pos..=s.start {
            path.push(Node::new(k, Tag::Before(p)));
        }
        for k in s.start..=s.end {
            path.push(Node::new(k, Tag::Target(SubTag::for_offset(k - s.start, s.len()), p)));
        }
        let stop = spans.get(j + 1).map_or(n, |next| next.start - 1);
        for k in s.end..=stop {
            path.push(Node::new(k, Tag::After(p)));
        }
        pos = stop + 1;
    }
    Ok(path)
}
