//! Span-level metrics: exact and partial match, subjectivity, per-length
//! breakdown and paired bootstrap significance.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::SpanLabel;
use crate::error::{Error, Result};

/// Precision, recall and F1 as percentages, with the counts behind them.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matched: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Prf {
    pub fn from_counts(matched: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
        let precision = ratio(matched, predicted);
        let recall = ratio(matched, gold);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
            matched,
            predicted,
            gold,
        }
    }
}

/// Whether polarity must agree for a match.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchMode {
    /// Boundaries only.
    Target,
    /// Boundaries and polarity.
    Targeted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubjectivityMode {
    /// Polarity collapsed to subjective (+ or −) versus neutral.
    Subjectivity,
    /// Only + and − spans, exact polarity.
    NonNeutral,
}

fn check_aligned(preds: &[Vec<SpanLabel>], golds: &[Vec<SpanLabel>]) -> Result<()> {
    if preds.len() != golds.len() {
        return Err(Error::Argument(format!(
            "{} predicted sentences but {} gold sentences",
            preds.len(),
            golds.len()
        )));
    }
    Ok(())
}

/// Greedy one-to-one matching: each prediction, in order, takes the first
/// unused gold span it matches.
fn count_matches(pred: &[SpanLabel], gold: &[SpanLabel], matches: impl Fn(&SpanLabel, &SpanLabel) -> bool) -> usize {
    let mut used = vec![false; gold.len()];
    let mut matched = 0;
    for p in pred {
        if let Some(i) = (0..gold.len()).find(|&i| !used[i] && matches(p, &gold[i])) {
            used[i] = true;
            matched += 1;
        }
    }
    matched
}

fn corpus_prf(
    preds: &[Vec<SpanLabel>],
    golds: &[Vec<SpanLabel>],
    keep: impl Fn(&SpanLabel) -> bool,
    matches: impl Fn(&SpanLabel, &SpanLabel) -> bool,
) -> Result<Prf> {
    check_aligned(preds, golds)?;
    let (mut m, mut p, mut g) = (0, 0, 0);
    for (pred, gold) in preds.iter().zip(golds) {
        let pred: Vec<SpanLabel> = pred.iter().copied().filter(&keep).collect();
        let gold: Vec<SpanLabel> = gold.iter().copied().filter(&keep).collect();
        m += count_matches(&pred, &gold, &matches);
        p += pred.len();
        g += gold.len();
    }
    Ok(Prf::from_counts(m, p, g))
}

fn same_boundary(a: &SpanLabel, b: &SpanLabel) -> bool {
    a.start == b.start && a.end == b.end
}

fn polarity_ok(mode: MatchMode, a: &SpanLabel, b: &SpanLabel) -> bool {
    mode == MatchMode::Target || a.polarity == b.polarity
}

pub fn exact_prf(preds: &[Vec<SpanLabel>], golds: &[Vec<SpanLabel>], mode: MatchMode) -> Result<Prf> {
    corpus_prf(preds, golds, |_| true, |a, b| same_boundary(a, b) && polarity_ok(mode, a, b))
}

/// A prediction matches a gold span sharing at least one token.
pub fn partial_prf(preds: &[Vec<SpanLabel>], golds: &[Vec<SpanLabel>], mode: MatchMode) -> Result<Prf> {
    corpus_prf(preds, golds, |_| true, |a, b| a.overlaps(b) && polarity_ok(mode, a, b))
}

pub fn subjectivity_prf(preds: &[Vec<SpanLabel>], golds: &[Vec<SpanLabel>], mode: SubjectivityMode) -> Result<Prf> {
    match mode {
        SubjectivityMode::Subjectivity => corpus_prf(
            preds,
            golds,
            |_| true,
            |a, b| same_boundary(a, b) && a.polarity.is_subjective() == b.polarity.is_subjective(),
        ),
        SubjectivityMode::NonNeutral => corpus_prf(
            preds,
            golds,
            |s| s.polarity.is_subjective(),
            |a, b| same_boundary(a, b) && a.polarity == b.polarity,
        ),
    }
}

pub const LENGTH_BUCKETS: [&str; 4] = ["1", "2", "3", ">=4"];

pub fn length_bucket(span: &SpanLabel) -> usize {
    span.len().min(4) - 1
}

/// Exact targeted scores restricted to each target length bucket. A false
/// positive is charged to the bucket of its own length.
pub fn length_breakdown(preds: &[Vec<SpanLabel>], golds: &[Vec<SpanLabel>]) -> Result<[Prf; 4]> {
    let mut out = [Prf::default(); 4];
    for (b, slot) in out.iter_mut().enumerate() {
        *slot = corpus_prf(
            preds,
            golds,
            |s| length_bucket(s) == b,
            |a, g| same_boundary(a, g) && a.polarity == g.polarity,
        )?;
    }
    Ok(out)
}

/// Fraction of bootstrap resamples (sentences drawn with replacement) in
/// which system B's exact targeted F1 is at least system A's.
pub fn bootstrap_significance(
    preds_a: &[Vec<SpanLabel>],
    preds_b: &[Vec<SpanLabel>],
    golds: &[Vec<SpanLabel>],
    resamples: usize,
    seed: u64,
) -> Result<f64> {
    check_aligned(preds_a, golds)?;
    check_aligned(preds_b, golds)?;
    if resamples < 100 {
        return Err(Error::Argument(format!("need at least 100 resamples, got {resamples}")));
    }
    if golds.is_empty() {
        return Err(Error::Argument("cannot resample an empty corpus".into()));
    }
    let counts = |preds: &[Vec<SpanLabel>]| -> Vec<[usize; 3]> {
        preds
            .iter()
            .zip(golds)
            .map(|(p, g)| {
                let m = count_matches(p, g, |a, b| same_boundary(a, b) && a.polarity == b.polarity);
                [m, p.len(), g.len()]
            })
            .collect()
    };
    let a = counts(preds_a);
    let b = counts(preds_b);
    let n = golds.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wins = 0;
    for _ in 0..resamples {
        let (mut sa, mut sb) = ([0; 3], [0; 3]);
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            for c in 0..3 {
                sa[c] += a[i][c];
                sb[c] += b[i][c];
            }
        }
        let fa = Prf::from_counts(sa[0], sa[1], sa[2]).f1;
        let fb = Prf::from_counts(sb[0], sb[1], sb[2]).f1;
        if fb >= fa {
            wins += 1;
        }
    }
    Ok(wins as f64 / resamples as f64)
}

/// Every metric for one prediction/gold pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub exact_target: Prf,
    pub exact_targeted: Prf,
    pub partial_target: Prf,
    pub partial_targeted: Prf,
    pub subjectivity: Prf,
    pub nonneutral: Prf,
    pub lengths: [Prf; 4],
}

impl MetricsReport {
    pub fn compute(preds: &[Vec<SpanLabel>], golds: &[Vec<SpanLabel>]) -> Result<Self> {
        Ok(MetricsReport {
            exact_target: exact_prf(preds, golds, MatchMode::Target)?,
            exact_targeted: exact_prf(preds, golds, MatchMode::Targeted)?,
            partial_target: partial_prf(preds, golds, MatchMode::Target)?,
            partial_targeted: partial_prf(preds, golds, MatchMode::Targeted)?,
            subjectivity: subjectivity_prf(preds, golds, SubjectivityMode::Subjectivity)?,
            nonneutral: subjectivity_prf(preds, golds, SubjectivityMode::NonNeutral)?,
            lengths: length_breakdown(preds, golds)?,
        })
    }

    fn rows(&self) -> [(&'static str, &Prf); 6] {
        [
            ("target", &self.exact_target),
            ("targeted", &self.exact_targeted),
            ("partial_target", &self.partial_target),
            ("partial_targeted", &self.partial_targeted),
            ("subjectivity", &self.subjectivity),
            ("nonneutral", &self.nonneutral),
        ]
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<18} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}", "metric", "P", "R", "F1", "match", "pred", "gold").unwrap();
        let mut row = |name: &str, p: &Prf| {
            writeln!(
                out,
                "{:<18} {:>7.2} {:>7.2} {:>7.2} {:>7} {:>7} {:>7}",
                name, p.precision, p.recall, p.f1, p.matched, p.predicted, p.gold
            )
            .unwrap();
        };
        for (name, p) in self.rows() {
            row(name, p);
        }
        for (name, p) in LENGTH_BUCKETS.iter().zip(&self.lengths) {
            row(&format!("length {name}"), p);
        }
        out
    }

    /// `key=value` lines such as `targeted_f1=63.48`.
    pub fn porcelain(&self) -> String {
        let mut out = String::new();
        for (name, p) in self.rows() {
            writeln!(out, "{name}_p={:.2}", p.precision).unwrap();
            writeln!(out, "{name}_r={:.2}", p.recall).unwrap();
            writeln!(out, "{name}_f1={:.2}", p.f1).unwrap();
        }
        for (name, p) in ["length_1", "length_2", "length_3", "length_4plus"].iter().zip(&self.lengths) {
            writeln!(out, "{name}_f1={:.2}", p.f1).unwrap();
            writeln!(out, "{name}_gold={}", p.gold).unwrap();
        }
        out
    }

    /// `bucket,precision,recall,f1,matched,predicted,gold` rows with a header.
    pub fn length_csv(&self) -> String {
        let mut out = String::from("bucket,precision,recall,f1,matched,predicted,gold\n");
        for (name, p) in LENGTH_BUCKETS.iter().zip(&self.lengths) {
            writeln!(
                out,
                "{name},{:.2},{:.2},{:.2},{},{},{}",
                p.precision, p.recall, p.f1, p.matched, p.predicted, p.gold
            )
            .unwrap();
        }
        out
    }
}
