//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any fails.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use sentispan::checkpoint;
use sentispan::corpus::{emit_annotations, parse_annotations, Dataset, Instance, Sentence, SpanLabel};
use sentispan::encoder::{score_edges, Ablation, PositionScores};
use sentispan::evaluation::{
    exact_prf, length_breakdown, partial_prf, subjectivity_prf, MatchMode, Prf, SubjectivityMode,
};
use sentispan::inference::{log_partition, marginals, viterbi, EdgeScores};
use sentispan::lattice::{build_clamped, build_unconstrained, count_paths, decode_spans, Node};
use sentispan::training::{gradient_check, init_model, predict_dataset, train, TrainConfig};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, started: Instant) -> Result<(), String> {
    let t = started.elapsed();
    if t > limit {
        return Err(format!("took {:.1}s, limit {}s", t.as_secs_f64(), limit.as_secs()));
    }
    Ok(())
}

fn enumeration_equivalence() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut max_err: f64 = 0.0;
    for case in 0..200 {
        let n = rng.gen_range(1..=5);
        let all = word_label_sequences(n);
        let (lattice, labels) = if case % 4 == 0 {
            (build_unconstrained(n).unwrap(), all)
        } else {
            let spans = random_spans(n, &mut rng);
            let keep = all.into_iter().filter(|l| targets_of(l) == spans).collect();
            (build_clamped(n, &spans).unwrap(), keep)
        };
        let paths: Vec<Vec<Node>> = labels.iter().map(|l| node_path(l)).collect();
        if count_paths(&lattice) != paths.len() as u128 {
            return Err(format!("case {case}: {} lattice paths, {} enumerated", count_paths(&lattice), paths.len()));
        }
        let scores = EdgeScores::from_fn(&lattice, |_| rng.gen_range(-3.0..3.0));
        let Some(brute) = enumerate(&lattice, &paths, &scores) else {
            return Err(format!("case {case}: an enumerated path is missing from the lattice"));
        };
        let inf = marginals(&lattice, &scores);
        let (_, best) = viterbi(&lattice, &scores);
        max_err = max_err
            .max((inf.log_partition - brute.log_partition).abs())
            .max((best - brute.best).abs());
        for (a, b) in inf.edge_marginals.iter().zip(&brute.edge_marginals) {
            max_err = max_err.max((a - b).abs());
        }
    }
    within(Duration::from_secs(30), started)?;
    ensure(max_err <= 1e-8, format!("200 cases, max error {max_err:.2e} (tol 1e-8)"))
}

fn normalization() -> Outcome {
    let mut worst: f64 = 0.0;
    let words = ["Shim", "Lim", "rocks", "awful", "Bob"];
    let data = parse_annotations("Shim\tB-POS\nLim\tI-POS\nrocks\tO\nawful\tO\nBob\tB-NEG\n").unwrap();
    for seed in 0..3u64 {
        let cfg = TrainConfig { seed, ..tiny_config() };
        let model = init_model(&data, &cfg).unwrap();
        for n in 1..=4 {
            let sentence = Sentence::new(words[..n].iter().copied()).unwrap();
            let trace = model.forward(&sentence, None);
            let full = build_unconstrained(n).unwrap();
            let log_z = log_partition(&full, &score_edges(&full, &trace.scores).unwrap());
            let outputs: BTreeSet<Vec<(usize, usize, usize)>> = word_label_sequences(n)
                .iter()
                .map(|l| targets_of(l).iter().map(|s| (s.start, s.end, s.polarity.index())).collect())
                .collect();
            let total: f64 = outputs
                .iter()
                .map(|y| {
                    let spans: Vec<SpanLabel> = y
                        .iter()
                        .map(|&(a, b, p)| SpanLabel::new(a, b, sentispan::corpus::Polarity::from_index(p)))
                        .collect();
                    let clamped = build_clamped(n, &spans).unwrap();
                    (log_partition(&clamped, &score_edges(&clamped, &trace.scores).unwrap()) - log_z).exp()
                })
                .sum();
            worst = worst.max((total - 1.0).abs());
        }
    }
    ensure(worst <= 1e-6, format!("n<=4, 3 models, max |sum p - 1| = {worst:.2e} (tol 1e-6)"))
}

fn path_counting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..100 {
        let n = rng.gen_range(1..=30);
        let spans = random_spans(n, &mut rng);
        let expected: u128 = spans.windows(2).map(|w| (w[1].start - w[0].end) as u128).product();
        let got = count_paths(&build_clamped(n, &spans).unwrap());
        if got != expected {
            return Err(format!("case {case}: {spans:?} has {got} paths, expected {expected}"));
        }
    }
    use sentispan::corpus::Polarity::*;
    let figure = [SpanLabel::new(1, 1, Positive), SpanLabel::new(3, 4, Positive), SpanLabel::new(9, 9, Neutral)];
    let got = count_paths(&build_clamped(10, &figure).unwrap());
    ensure(got == 10, format!("100 random configurations match; worked example has {got} paths (expected 10)"))
}

fn gradient_fidelity() -> Outcome {
    let started = Instant::now();
    let data = parse_annotations(
        "great\tB-NEG\n\n\
         Shim\tB-POS\nLim\tI-POS\n\n\
         I\tO\nhate\tO\nBob\tB-NEG\n\n\
         Ann\tB-NEU\nand\tO\nBo\tB-POS\nsang\tO\n",
    )
    .unwrap();
    let mut lines = Vec::new();
    let mut overall: f64 = 0.0;
    for ablation in [Ablation::Full, Ablation::NoAttention, Ablation::NoBmes] {
        let mut worst: f64 = 0.0;
        for seed in 1..=2 {
            let cfg = TrainConfig { ablation, seed, ..tiny_config() };
            let model = init_model(&data, &cfg).unwrap();
            for inst in &data.instances {
                let g = gradient_check(&model, inst, 1e-4).map_err(|e| e.to_string())?;
                worst = worst.max(g.max_relative_error);
            }
        }
        overall = overall.max(worst);
        lines.push(format!("{ablation:?}={worst:.2e}"));
    }
    within(Duration::from_secs(60), started)?;
    ensure(overall <= 1e-4, format!("max relative error {} (tol 1e-4)", lines.join(" ")))
}

fn overfit_config() -> TrainConfig {
    TrainConfig {
        epochs: 50,
        learning_rate: 1e-2,
        dropout: 0.0,
        word_dim: 16,
        char_dim: 8,
        char_emb_dim: 8,
        hidden_dim: 16,
        attention_dim: 8,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn overfit() -> Outcome {
    let started = Instant::now();
    let data = parse_annotations(&overfit_corpus()).unwrap();
    let (model, report) = train(&data, &data, &overfit_config()).map_err(|e| e.to_string())?;
    let preds = predict_dataset(&model, &data).map_err(|e| e.to_string())?;
    let f1 = exact_prf(&preds, &data.spans(), MatchMode::Targeted).unwrap().f1;
    let first = report.epochs.iter().find(|e| e.dev_f1_sent == 100.0).map(|e| e.epoch);
    within(Duration::from_secs(300), started)?;
    ensure(
        data.len() == 20 && f1 == 100.0 && first.is_some(),
        format!(
            "{} sentences, training-set targeted F1 {f1:.2}, first perfect epoch {first:?}",
            data.len()
        ),
    )
}

fn random_position_scores(n: usize, rng: &mut impl Rng) -> PositionScores {
    let mut rows = |w: usize| (0..n).map(|_| (0..w).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    PositionScores {
        target: rows(4),
        sentiment: rows(3),
        span: Some(rows(3)),
    }
}

fn decode(scores: &PositionScores) -> usize {
    let lattice = build_unconstrained(scores.len()).unwrap();
    let edges = score_edges(&lattice, scores).unwrap();
    let (path, _) = viterbi(&lattice, &edges);
    decode_spans(&path).unwrap().len()
}

fn linear_time() -> Outcome {
    let sizes = [20usize, 40, 80, 160, 320];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs: Vec<PositionScores> = sizes.iter().map(|&n| random_position_scores(n, &mut rng)).collect();
    let mut samples = vec![Vec::new(); sizes.len()];
    let mut sink = 0;
    for i in 0..sizes.len() {
        sink += decode(&inputs[i]);
    }
    for _ in 0..21 {
        for (i, &n) in sizes.iter().enumerate() {
            let reps = 12_800 / n;
            let t = Instant::now();
            for _ in 0..reps {
                sink += decode(&inputs[i]);
            }
            samples[i].push(t.elapsed().as_secs_f64() / reps as f64);
        }
    }
    let medians: Vec<f64> = samples
        .iter_mut()
        .map(|s| {
            s.sort_by(f64::total_cmp);
            s[s.len() / 2]
        })
        .collect();
    let ns: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    let c = ns.iter().zip(&medians).map(|(n, t)| n * t).sum::<f64>() / ns.iter().map(|n| n * n).sum::<f64>();
    let ratios: Vec<f64> = ns.iter().zip(&medians).map(|(n, t)| t / (c * n)).collect();
    let ok = ratios.iter().all(|r| (1.0 / 1.5..=1.5).contains(r));
    let shown: Vec<String> = sizes
        .iter()
        .zip(&medians)
        .zip(&ratios)
        .map(|((n, t), r)| format!("n={n}:{:.1}us({r:.2})", t * 1e6))
        .collect();
    ensure(ok && sink > 0, format!("t/(c*n) per size {} (band 1/1.5..1.5)", shown.join(" ")))
}

fn metric_fixture() -> (Vec<Vec<SpanLabel>>, Vec<Vec<SpanLabel>>) {
    use sentispan::corpus::Polarity::{Negative as N, Neutral as Z, Positive as P};
    let s = SpanLabel::new;
    let gold = vec![
        vec![s(1, 1, P)],
        vec![s(2, 3, N)],
        vec![s(1, 2, Z)],
        vec![s(3, 4, P)],
        vec![s(1, 1, P), s(3, 3, N)],
        vec![s(2, 5, P)],
        vec![s(1, 1, Z)],
        vec![s(2, 2, N)],
        vec![s(1, 3, P)],
        vec![s(5, 5, N)],
    ];
    let pred = vec![
        vec![s(1, 1, P)],
        vec![s(2, 3, P)],
        vec![s(1, 2, Z)],
        vec![s(4, 5, P)],
        vec![s(1, 1, P)],
        vec![s(2, 5, P)],
        vec![s(1, 1, N)],
        vec![s(2, 2, N), s(4, 4, Z)],
        vec![s(1, 1, P)],
        vec![s(1, 1, P)],
    ];
    (pred, gold)
}

/// Checks counts and recomputes P/R/F1 from them.
fn prf_is(name: &str, got: Prf, matched: usize, predicted: usize, gold: usize) -> Result<(), String> {
    let pct = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
    let f1 = if matched == 0 { 0.0 } else { 200.0 * matched as f64 / (predicted + gold) as f64 };
    let ok = (got.matched, got.predicted, got.gold) == (matched, predicted, gold)
        && (got.precision - pct(matched, predicted)).abs() < 1e-9
        && (got.recall - pct(matched, gold)).abs() < 1e-9
        && (got.f1 - f1).abs() < 1e-9;
    if ok {
        Ok(())
    } else {
        Err(format!("{name}: got {got:?}, expected counts ({matched},{predicted},{gold})"))
    }
}

fn metrics() -> Outcome {
    let (pred, gold) = metric_fixture();
    prf_is("exact target", exact_prf(&pred, &gold, MatchMode::Target).unwrap(), 7, 11, 11)?;
    prf_is("exact targeted", exact_prf(&pred, &gold, MatchMode::Targeted).unwrap(), 5, 11, 11)?;
    prf_is("partial target", partial_prf(&pred, &gold, MatchMode::Target).unwrap(), 9, 11, 11)?;
    prf_is("partial targeted", partial_prf(&pred, &gold, MatchMode::Targeted).unwrap(), 7, 11, 11)?;
    prf_is(
        "subjectivity",
        subjectivity_prf(&pred, &gold, SubjectivityMode::Subjectivity).unwrap(),
        6,
        11,
        11,
    )?;
    prf_is("nonneutral", subjectivity_prf(&pred, &gold, SubjectivityMode::NonNeutral).unwrap(), 4, 9, 9)?;
    let b = length_breakdown(&pred, &gold).unwrap();
    prf_is("length 1", b[0], 3, 7, 6)?;
    prf_is("length 2", b[1], 1, 3, 3)?;
    prf_is("length 3", b[2], 0, 0, 1)?;
    prf_is("length >=4", b[3], 1, 1, 1)?;

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for corpus in 0..1000 {
        let sentences = rng.gen_range(1..=8);
        let mut golds = Vec::new();
        let mut preds = Vec::new();
        for _ in 0..sentences {
            let n = rng.gen_range(1..=10);
            golds.push(if rng.gen_bool(0.1) { Vec::new() } else { random_spans(n, &mut rng) });
            preds.push(random_spans(n, &mut rng));
        }
        for mode in [MatchMode::Target, MatchMode::Targeted] {
            let e = exact_prf(&preds, &golds, mode).unwrap();
            let p = partial_prf(&preds, &golds, mode).unwrap();
            let bounded = [e, p]
                .iter()
                .all(|x| [x.precision, x.recall, x.f1].iter().all(|v| (0.0..=100.0).contains(v)) && x.matched <= x.predicted.min(x.gold));
            if p.f1 < e.f1 || !bounded {
                return Err(format!("corpus {corpus} {mode:?}: exact {e:?} partial {p:?}"));
            }
        }
        let target = exact_prf(&preds, &golds, MatchMode::Target).unwrap();
        let targeted = exact_prf(&preds, &golds, MatchMode::Targeted).unwrap();
        let buckets: usize = length_breakdown(&preds, &golds).unwrap().iter().map(|b| b.gold).sum();
        if targeted.f1 > target.f1 || buckets != target.gold {
            return Err(format!("corpus {corpus}: targeted {targeted:?} target {target:?} bucket gold {buckets}"));
        }
    }
    Ok("10-sentence fixture matches hand counts; 1000 random corpora satisfy partial>=exact, targeted<=target".into())
}

fn random_dataset(rng: &mut impl Rng) -> Dataset {
    let vocab = ["the", "Apple", "iPhone", "is", "great", ",", "Bob", "hates", "it", "naïve", "Zoë"];
    let instances = (0..rng.gen_range(1..6))
        .map(|_| {
            let n = rng.gen_range(1..9);
            let words: Vec<&str> = (0..n).map(|_| vocab[rng.gen_range(0..vocab.len())]).collect();
            let spans = if rng.gen_bool(0.2) { Vec::new() } else { random_spans(n, rng) };
            Instance::new(Sentence::new(words).unwrap(), spans).unwrap()
        })
        .collect();
    Dataset::new(instances)
}

fn roundtrips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..200 {
        let d = random_dataset(&mut rng);
        let text = emit_annotations(&d);
        let back = parse_annotations(&text).map_err(|e| format!("case {case}: {e}"))?;
        if back != d || emit_annotations(&back) != text {
            return Err(format!("case {case}: annotation roundtrip changed the data"));
        }
    }
    let data = parse_annotations(&overfit_corpus()).unwrap();
    let cfg = TrainConfig { epochs: 2, ..overfit_config() };
    let (model, _) = train(&data, &data, &cfg).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.json");
    checkpoint::save(&model, &path).map_err(|e| e.to_string())?;
    let loaded = checkpoint::load(&path).map_err(|e| e.to_string())?;
    let mut scalars = 0;
    for ((name, a), (_, b)) in model.params.named().iter().zip(loaded.params.named()) {
        let same = a.value.len() == b.value.len() && a.value.iter().zip(&b.value).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            return Err(format!("tensor {name} changed across save/load"));
        }
        scalars += a.value.len();
    }
    let again = dir.path().join("again.json");
    checkpoint::save(&loaded, &again).map_err(|e| e.to_string())?;
    let same_bytes = std::fs::read(&path).unwrap() == std::fs::read(&again).unwrap();
    ensure(
        same_bytes && loaded.vocab == model.vocab && loaded.config == model.config,
        format!("200 annotation roundtrips; checkpoint restores {scalars} scalars bitwise"),
    )
}

fn determinism() -> Outcome {
    let data = parse_annotations(&overfit_corpus()).unwrap();
    let cfg = TrainConfig { epochs: 4, dropout: 0.5, ..overfit_config() };
    let run = || {
        let (model, report) = train(&data, &data, &cfg).unwrap();
        let preds = predict_dataset(&model, &data).unwrap();
        (report.lines(), checkpoint::to_json(&model).unwrap(), preds)
    };
    let a = run();
    let b = run();
    ensure(
        a == b,
        format!("two seeded runs: reports equal={}, checkpoints equal={}, predictions equal={}", a.0 == b.0, a.1 == b.1, a.2 == b.2),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("enumeration equivalence", enumeration_equivalence),
        ("normalization", normalization),
        ("path counting", path_counting),
        ("gradient fidelity", gradient_fidelity),
        ("overfit sanity", overfit),
        ("linear-time inference", linear_time),
        ("metric correctness", metrics),
        ("format roundtrips", roundtrips),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
