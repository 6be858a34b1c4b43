//! Numerical self-check: lattice inference against brute-force enumeration
//! and model gradients against central differences, at tiny scale.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{parse_annotations, Polarity, SpanLabel};
use crate::encoder::Ablation;
use crate::error::Result;
use crate::inference::{log_sum_exp, marginals, viterbi, EdgeScores};
use crate::lattice::{build_clamped_with, build_unconstrained_with, count_paths, Lattice, Path, TransitionTable};
use crate::oracle::{all_label_sequences, label_sequences};
use crate::training::{gradient_check, init_model, TrainConfig};

pub const ENUMERATION_TOLERANCE: f64 = 1e-8;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SelfCheckOptions {
    pub table: TransitionTable,
    pub cases: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SelfCheckOptions {
    fn default() -> Self {
        SelfCheckOptions {
            table: TransitionTable::standard(),
            cases: 60,
            max_len: 4,
            seed: 1,
        }
    }
}

/// Largest absolute disagreement between lattice inference and enumeration
/// over `paths`. Infinite when the path sets differ.
pub fn enumeration_error(lattice: &Lattice, paths: &[Path], scores: &EdgeScores) -> f64 {
    if paths.is_empty() || count_paths(lattice) != paths.len() as u128 {
        return f64::INFINITY;
    }
    let mut edge_lists = Vec::with_capacity(paths.len());
    for p in paths {
        match lattice.path_edges(p) {
            Ok(e) => edge_lists.push(e),
            Err(_) => return f64::INFINITY,
        }
    }
    let path_scores: Vec<f64> = edge_lists.iter().map(|es| es.iter().map(|&e| scores[e]).sum()).collect();
    let log_z = log_sum_exp(path_scores.iter().copied());
    let best = path_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut edge_mass = vec![0.0; lattice.edges().len()];
    for (es, s) in edge_lists.iter().zip(&path_scores) {
        let p = (s - log_z).exp();
        for &e in es {
            edge_mass[e] += p;
        }
    }

    let inf = marginals(lattice, scores);
    let (_, vit) = viterbi(lattice, scores);
    let marg_err = inf
        .edge_marginals
        .iter()
        .zip(&edge_mass)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    (inf.log_partition - log_z).abs().max((vit - best).abs()).max(marg_err)
}

fn random_spans(n: usize, rng: &mut impl Rng) -> Vec<SpanLabel> {
    loop {
        let mut spans = Vec::new();
        let mut pos = 1;
        while pos <= n {
            if rng.gen_bool(0.4) {
                let end = rng.gen_range(pos..=n);
                spans.push(SpanLabel::new(pos, end, Polarity::from_index(rng.gen_range(0..3))));
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

#[derive(Clone, Debug)]
pub struct SelfCheckReport {
    pub enumeration_cases: usize,
    pub enumeration_max_error: f64,
    pub gradients: Vec<(Ablation, f64, String)>,
    pub failures: Vec<String>,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn lines(&self) -> String {
        let mut out = String::new();
        writeln!(out, "enumeration_cases={}", self.enumeration_cases).unwrap();
        writeln!(out, "enumeration_max_error={:e}", self.enumeration_max_error).unwrap();
        for (ablation, err, worst) in &self.gradients {
            let name = format!("{ablation:?}").to_lowercase();
            writeln!(out, "gradient_max_rel_error_{name}={err:e} worst={worst}").unwrap();
        }
        let max = self.gradients.iter().map(|g| g.1).fold(0.0, f64::max);
        writeln!(out, "gradient_max_rel_error={max:e}").unwrap();
        for f in &self.failures {
            writeln!(out, "FAIL {f}").unwrap();
        }
        writeln!(out, "selfcheck={}", if self.passed() { "pass" } else { "fail" }).unwrap();
        out
    }
}

const GRADIENT_FIXTURE: &str = "Shim\tB-POS\nLim\tI-POS\nrocks\tO\n\n\
                                I\tO\nhate\tO\nBob\tB-NEG\n";

pub fn run(options: &SelfCheckOptions) -> Result<SelfCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut failures = Vec::new();
    let mut max_err: f64 = 0.0;
    let mut cases = 0;
    for n in 1..=options.max_len {
        let lattice = build_unconstrained_with(n, &options.table)?;
        let scores = EdgeScores::from_fn(&lattice, |_| rng.gen_range(-2.0..2.0));
        let err = enumeration_error(&lattice, &all_label_sequences(n), &scores);
        cases += 1;
        max_err = max_err.max(err);
        if !(err <= ENUMERATION_TOLERANCE) {
            failures.push(format!("unconstrained n={n}: error {err:e}"));
        }
    }
    for _ in 0..options.cases {
        let n = rng.gen_range(1..=options.max_len.max(1) + 1);
        let spans = random_spans(n, &mut rng);
        let lattice = build_clamped_with(n, &spans, &options.table)?;
        let scores = EdgeScores::from_fn(&lattice, |_| rng.gen_range(-2.0..2.0));
        let err = enumeration_error(&lattice, &label_sequences(n, &spans), &scores);
        cases += 1;
        max_err = max_err.max(err);
        if !(err <= ENUMERATION_TOLERANCE) {
            failures.push(format!("clamped n={n} spans={spans:?}: error {err:e}"));
        }
    }

    let data = parse_annotations(GRADIENT_FIXTURE)?;
    let mut gradients = Vec::new();
    for ablation in [Ablation::Full, Ablation::NoAttention, Ablation::NoBmes] {
        let cfg = TrainConfig {
            word_dim: 3,
            char_dim: 2,
            char_emb_dim: 2,
            hidden_dim: 2,
            attention_dim: 3,
            ablation,
            seed: options.seed,
            ..TrainConfig::default()
        };
        let model = init_model(&data, &cfg)?;
        let mut worst = (0.0, String::new());
        for inst in &data.instances {
            let g = gradient_check(&model, inst, 1e-4)?;
            if g.max_relative_error >= worst.0 {
                worst = (g.max_relative_error, g.worst);
            }
        }
        if !(worst.0 <= GRADIENT_TOLERANCE) {
            failures.push(format!("gradient {ablation:?}: relative error {:e} at {}", worst.0, worst.1));
        }
        gradients.push((ablation, worst.0, worst.1));
    }

    Ok(SelfCheckReport {
        enumeration_cases: cases,
        enumeration_max_error: max_err,
        gradients,
        failures,
    })
}
