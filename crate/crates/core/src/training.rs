//! Maximum marginal-likelihood training with Adam, dev-based model
//! selection, cross-validation and a finite-difference gradient check.
//!
//! The loss of one sentence is `logZ(unconstrained) - logZ(clamped)`. Its
//! gradient with respect to an edge score is the unconstrained edge marginal
//! minus the clamped one, which is then backpropagated through the encoder.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{load_embeddings, Dataset, Instance, Sentence, SpanLabel, Vocabulary};
use crate::encoder::{
    backprop_edges, score_edges, Ablation, AttentionFallback, Model, ModelConfig, ModelParams, PositionScores,
};
use crate::error::{Error, Result};
use crate::evaluation::{exact_prf, MatchMode, Prf};
use crate::inference::{marginals, viterbi};
use crate::lattice::{build_clamped, build_unconstrained, decode_spans};

/// Dev metric used to pick the returned epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMetric {
    Targeted,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub dropout: f64,
    pub seed: u64,
    pub dev_fraction: f64,
    pub folds: usize,
    pub word_dim: usize,
    pub char_dim: usize,
    pub char_emb_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub layers: usize,
    pub ablation: Ablation,
    pub attention_fallback: AttentionFallback,
    pub inter_layer_dropout: bool,
    pub selection: SelectionMetric,
    /// Global gradient-norm limit; off when absent.
    pub clip_norm: Option<f64>,
    /// Word-vector text file; random vectors when absent.
    pub embeddings: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        TrainConfig {
            epochs: 6,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            dropout: m.dropout,
            seed: 1,
            dev_fraction: 0.1,
            folds: 10,
            word_dim: m.word_dim,
            char_dim: m.char_dim,
            char_emb_dim: m.char_emb_dim,
            hidden_dim: m.hidden_dim,
            attention_dim: m.attention_dim,
            layers: m.layers,
            ablation: m.ablation,
            attention_fallback: m.attention_fallback,
            inter_layer_dropout: m.inter_layer_dropout,
            selection: SelectionMetric::Targeted,
            clip_norm: None,
            embeddings: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(emb), Some(dir)) = (&cfg.embeddings, path.parent()) {
            if emb.is_relative() {
                cfg.embeddings = Some(dir.join(emb));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("learning_rate must be positive and betas in [0,1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(Error::Config(format!("dev_fraction {} not in [0,1)", self.dev_fraction)));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            word_dim: self.word_dim,
            char_dim: self.char_dim,
            char_emb_dim: self.char_emb_dim,
            hidden_dim: self.hidden_dim,
            attention_dim: self.attention_dim,
            layers: self.layers,
            ablation: self.ablation,
            attention_fallback: self.attention_fallback,
            dropout: self.dropout,
            inter_layer_dropout: self.inter_layer_dropout,
        }
    }
}

/// Adam with bias correction, one moment pair per parameter scalar.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: &TrainConfig, params: &ModelParams) -> Self {
        let shapes: Vec<usize> = params.named().iter().map(|(_, p)| p.len()).collect();
        Adam {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for ((p, m), v) in params.params_mut().into_iter().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.value[i] -= self.learning_rate * mh / (vh.sqrt() + self.epsilon);
            }
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(params: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = params
        .params_mut()
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in params.params_mut() {
            p.grad.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

fn loss_from_scores(instance: &Instance, scores: &PositionScores, grads: Option<&mut PositionScores>) -> Result<f64> {
    let n = instance.sentence.len();
    let full = build_unconstrained(n)?;
    let clamped = build_clamped(n, &instance.spans)?;
    let sf = score_edges(&full, scores)?;
    let sc = score_edges(&clamped, scores)?;
    let mf = marginals(&full, &sf);
    let mc = marginals(&clamped, &sc);
    if let Some(g) = grads {
        backprop_edges(&full, &mf.edge_marginals, 1.0, g);
        backprop_edges(&clamped, &mc.edge_marginals, -1.0, g);
    }
    Ok(mf.log_partition - mc.log_partition)
}

/// Negative log-likelihood of the gold spans. Dropout is applied iff
/// `dropout_rng` is given. Fails with [`Error::UnsupportedOutput`] when the
/// instance has no spans.
pub fn nll(model: &Model, instance: &Instance, dropout_rng: Option<&mut ChaCha8Rng>) -> Result<f64> {
    let trace = model.forward(&instance.sentence, dropout_rng);
    loss_from_scores(instance, &trace.scores, None)
}

/// [`nll`] that also adds its gradient into the parameter gradient slots.
pub fn nll_and_grad(model: &mut Model, instance: &Instance, dropout_rng: Option<&mut ChaCha8Rng>) -> Result<f64> {
    let trace = model.forward(&instance.sentence, dropout_rng);
    let mut grads = PositionScores::zeros_like(&trace.scores);
    let loss = loss_from_scores(instance, &trace.scores, Some(&mut grads))?;
    model.backward(&trace, &grads);
    Ok(loss)
}

/// Highest-scoring span set; always contains at least one span.
pub fn predict(model: &Model, sentence: &Sentence) -> Result<Vec<SpanLabel>> {
    let trace = model.forward(sentence, None);
    let lattice = build_unconstrained(sentence.len())?;
    let scores = score_edges(&lattice, &trace.scores)?;
    let (path, _) = viterbi(&lattice, &scores);
    decode_spans(&path)
}

pub fn predict_dataset(model: &Model, dataset: &Dataset) -> Result<Vec<Vec<SpanLabel>>> {
    dataset.instances.iter().map(|i| predict(model, &i.sentence)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub dev_f1_target: f64,
    pub dev_f1_sent: f64,
    /// Wall-clock seconds; excluded from [`TrainReport::lines`].
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based.
    pub selected_epoch: usize,
    /// Training sentences without any target.
    pub skipped: usize,
}

impl TrainReport {
    /// `epoch i loss L devF1_target X devF1_sent Y`, one line per epoch.
    pub fn lines(&self) -> String {
        let mut out = String::new();
        for r in &self.epochs {
            writeln!(
                out,
                "epoch {} loss {:.6} devF1_target {:.2} devF1_sent {:.2}",
                r.epoch, r.loss, r.dev_f1_target, r.dev_f1_sent
            )
            .unwrap();
        }
        out
    }
}

/// Exact target and targeted F1 of `model` on `dataset`.
pub fn evaluate_f1(model: &Model, dataset: &Dataset) -> Result<(Prf, Prf)> {
    let preds = predict_dataset(model, dataset)?;
    let golds = dataset.spans();
    Ok((
        exact_prf(&preds, &golds, MatchMode::Target)?,
        exact_prf(&preds, &golds, MatchMode::Targeted)?,
    ))
}

/// Builds the vocabulary and initial parameters for `train`.
pub fn init_model(train: &Dataset, config: &TrainConfig) -> Result<Model> {
    config.validate()?;
    let vocab = Vocabulary::from_dataset(train);
    let model_config = config.model_config();
    let pretrained = match &config.embeddings {
        Some(path) => {
            let table = load_embeddings(path, &vocab, config.seed)?;
            if table.dim != config.word_dim {
                return Err(Error::Config(format!(
                    "embedding file has dimension {}, word_dim is {}",
                    table.dim, config.word_dim
                )));
            }
            info!("pretrained vectors cover {}/{} words", table.covered, vocab.num_words());
            Some(table)
        }
        None => {
            warn!("no embedding file configured; word vectors are randomly initialized");
            None
        }
    };
    let params = ModelParams::init(
        &model_config,
        vocab.num_words(),
        vocab.num_chars(),
        pretrained.as_ref(),
        config.seed,
    )?;
    Ok(Model::new(model_config, vocab, params))
}

/// Trains for `config.epochs` epochs and returns the parameters of the epoch
/// with the best dev score (the latest one among ties).
pub fn train(train: &Dataset, dev: &Dataset, config: &TrainConfig) -> Result<(Model, TrainReport)> {
    let mut model = init_model(train, config)?;
    let trainable: Vec<usize> = (0..train.len()).filter(|&i| !train.instances[i].spans.is_empty()).collect();
    if trainable.is_empty() {
        return Err(Error::Config("no training sentence contains a target".into()));
    }
    let skipped = train.len() - trainable.len();
    if skipped > 0 {
        info!("skipping {skipped} training sentences without targets");
    }

    let mut adam = Adam::new(config, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut order = trainable;
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            model.params.zero_grad();
            total += nll_and_grad(&mut model, &train.instances[i], Some(&mut rng))?;
            if let Some(max) = config.clip_norm {
                clip_gradients(&mut model.params, max);
            }
            adam.step(&mut model.params);
        }
        let loss = total / order.len() as f64;
        let (target, targeted) = evaluate_f1(&model, dev)?;
        let seconds = started.elapsed().as_secs_f64();
        info!(
            "epoch {epoch} loss {loss:.6} devF1_target {:.2} devF1_sent {:.2} ({seconds:.2}s)",
            target.f1, targeted.f1
        );
        let score = match config.selection {
            SelectionMetric::Targeted => targeted.f1,
            SelectionMetric::Target => target.f1,
        };
        if best.as_ref().is_none_or(|(s, _, _)| score >= *s) {
            best = Some((score, epoch, model.params.clone()));
        }
        records.push(EpochRecord {
            epoch,
            loss,
            dev_f1_target: target.f1,
            dev_f1_sent: targeted.f1,
            seconds,
        });
    }
    let (_, selected_epoch, mut params) = best.expect("at least one epoch");
    params.zero_grad();
    model.params = params;
    Ok((
        model,
        TrainReport {
            epochs: records,
            selected_epoch,
            skipped,
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub target: Prf,
    pub targeted: Prf,
    pub report: TrainReport,
}

/// Unweighted means of precision, recall and F1 over folds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MeanPrf {
    fn of<'a>(prfs: impl Iterator<Item = &'a Prf> + Clone) -> Self {
        let n = prfs.clone().count() as f64;
        MeanPrf {
            precision: prfs.clone().map(|p| p.precision).sum::<f64>() / n,
            recall: prfs.clone().map(|p| p.recall).sum::<f64>() / n,
            f1: prfs.map(|p| p.f1).sum::<f64>() / n,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossValidation {
    pub folds: Vec<FoldResult>,
    pub target: MeanPrf,
    pub targeted: MeanPrf,
}

impl CrossValidation {
    /// Per-fold and mean lines in `key=value` form.
    pub fn lines(&self) -> String {
        let mut out = String::new();
        for (i, f) in self.folds.iter().enumerate() {
            writeln!(
                out,
                "fold={i} target_p={:.2} target_r={:.2} target_f1={:.2} targeted_p={:.2} targeted_r={:.2} targeted_f1={:.2}",
                f.target.precision, f.target.recall, f.target.f1, f.targeted.precision, f.targeted.recall, f.targeted.f1
            )
            .unwrap();
        }
        writeln!(
            out,
            "mean target_p={:.2} target_r={:.2} target_f1={:.2} targeted_p={:.2} targeted_r={:.2} targeted_f1={:.2}",
            self.target.precision,
            self.target.recall,
            self.target.f1,
            self.targeted.precision,
            self.targeted.recall,
            self.targeted.f1
        )
        .unwrap();
        out
    }
}

/// Trains one model per fold and scores it on that fold's test part.
pub fn cross_validate(dataset: &Dataset, config: &TrainConfig) -> Result<CrossValidation> {
    config.validate()?;
    let folds = crate::corpus::make_folds(dataset, config.folds, config.dev_fraction, config.seed)?;
    let mut results = Vec::with_capacity(folds.len());
    for (i, fold) in folds.iter().enumerate() {
        let mut fold_config = config.clone();
        fold_config.seed = config.seed.wrapping_add(i as u64);
        let (model, report) = train(&dataset.subset(&fold.train), &dataset.subset(&fold.dev), &fold_config)?;
        let (target, targeted) = evaluate_f1(&model, &dataset.subset(&fold.test))?;
        info!("fold {i}: target F1 {:.2}, targeted F1 {:.2}", target.f1, targeted.f1);
        results.push(FoldResult {
            target,
            targeted,
            report,
        });
    }
    Ok(CrossValidation {
        target: MeanPrf::of(results.iter().map(|r| &r.target)),
        targeted: MeanPrf::of(results.iter().map(|r| &r.targeted)),
        folds: results,
    })
}

/// Gradients below this magnitude are compared absolutely.
pub const GRADIENT_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADIENT_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    /// `name[index]` of the worst scalar.
    pub worst: String,
    pub checked: usize,
}

/// Compares the analytic gradient of the eval-mode NLL with central
/// differences of step `delta`, over every parameter scalar.
pub fn gradient_check(model: &Model, instance: &Instance, delta: f64) -> Result<GradientCheck> {
    let mut work = model.clone();
    work.params.zero_grad();
    nll_and_grad(&mut work, instance, None)?;
    let analytic: Vec<Vec<f64>> = work.params.named().iter().map(|(_, p)| p.grad.clone()).collect();
    let names: Vec<String> = work.params.named().into_iter().map(|(n, _)| n).collect();

    let mut result = GradientCheck {
        max_relative_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (t, name) in names.iter().enumerate() {
        for i in 0..analytic[t].len() {
            let original = work.params.params_mut()[t].value[i];
            work.params.params_mut()[t].value[i] = original + delta;
            let plus = nll(&work, instance, None)?;
            work.params.params_mut()[t].value[i] = original - delta;
            let minus = nll(&work, instance, None)?;
            work.params.params_mut()[t].value[i] = original;
            let numeric = (plus - minus) / (2.0 * delta);
            let err = relative_error(analytic[t][i], numeric);
            result.checked += 1;
            if err >= result.max_relative_error {
                result.max_relative_error = err;
                result.worst = format!("{name}[{i}]");
            }
        }
    }
    Ok(result)
}
