//! Neural edge scoring.
//!
//! Each token gets `e_k = [w_k; c_k]` (word vector and the two end states
//! of a character BiLSTM). A two-layer BiLSTM over `e` gives `h_k`, and a
//! self-attention layer over `e` gives `a_k`. Three linear heads turn these
//! into per-position scores that [`score_edges`] spreads over the lattice:
//!
//! | rule          | score                               |
//! |---------------|-------------------------------------|
//! | `TARGET_CONT` | `f_t(h_k)[ε]`                       |
//! | `TARGET_END`  | `f_t(h_k)[ε] + g_s(a_k)[p]`         |
//! | `SENT_BB`     | `f_s(h_k)[p]`                       |
//! | `SENT_AA`     | `f_s(h_k)[p]`                       |
//! | `SENT_AB`     | `f_s(h_k)[p]` (source polarity)     |
//! | `ATTN_BEGIN`  | `g_s(a_k)[p]`                       |
//!
//! where `k` is the source position of the edge.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{init_range, EmbeddingTable, Sentence, Vocabulary};
use crate::error::{Error, Result};
use crate::inference::EdgeScores;
use crate::lattice::{EdgeRule, Lattice, Tag};
use crate::nn::{
    apply_mask, dropout_mask, matvec_acc, matvec_t_acc, outer_acc, BiLstm, BiLstmTrace, Linear,
    Lstm, LstmTrace, Param,
};

/// Model variants: the full model, one without self-attention, and one
/// without BMES sub-tags in the target scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    NoAttention,
    NoBmes,
}

/// What replaces `g_s(a_k)` when attention is ablated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionFallback {
    /// Apply `g_s` to the BiLSTM state `h_k`.
    Hidden,
    /// Drop those scores to zero.
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub word_dim: usize,
    /// Output width of the character encoder; half per direction.
    pub char_dim: usize,
    pub char_emb_dim: usize,
    /// Hidden size of each direction of the word BiLSTM.
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub layers: usize,
    pub ablation: Ablation,
    pub attention_fallback: AttentionFallback,
    pub dropout: f64,
    pub inter_layer_dropout: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            word_dim: 100,
            char_dim: 50,
            char_emb_dim: 25,
            hidden_dim: 500,
            attention_dim: 300,
            layers: 2,
            ablation: Ablation::Full,
            attention_fallback: AttentionFallback::Hidden,
            dropout: 0.5,
            inter_layer_dropout: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("word_dim", self.word_dim),
            ("char_dim", self.char_dim),
            ("char_emb_dim", self.char_emb_dim),
            ("hidden_dim", self.hidden_dim),
            ("attention_dim", self.attention_dim),
            ("layers", self.layers),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.char_dim.is_multiple_of(2) {
            return Err(Error::Config("char_dim must be even".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0,1)", self.dropout)));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        self.word_dim + self.char_dim
    }

    pub fn context_dim(&self) -> usize {
        2 * self.hidden_dim
    }

    fn target_outputs(&self) -> usize {
        match self.ablation {
            Ablation::NoBmes => 1,
            _ => 4,
        }
    }

    fn uses_attention(&self) -> bool {
        self.ablation != Ablation::NoAttention
    }

    /// Input width of `g_s`, or `None` when its scores are dropped.
    fn span_head_input(&self) -> Option<usize> {
        match (self.ablation, self.attention_fallback) {
            (Ablation::NoAttention, AttentionFallback::Zero) => None,
            (Ablation::NoAttention, AttentionFallback::Hidden) => Some(self.context_dim()),
            _ => Some(self.embedding_dim()),
        }
    }
}

/// `β_{k,j} = Uᵀ ReLU(W [e_k; e_j] + b)`, `α_k = softmax(β_k)`,
/// `a_k = Σ_j α_{k,j} e_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttention {
    pub w: Param,
    pub b: Param,
    pub u: Param,
}

#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    /// `W[:, :d] e_k + b`
    left: Vec<Vec<f64>>,
    /// `W[:, d:] e_j`
    right: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
}

impl SelfAttention {
    pub fn zeros(dim: usize, attention_dim: usize) -> Self {
        SelfAttention {
            w: Param::zeros(attention_dim, 2 * dim),
            b: Param::zeros(attention_dim, 1),
            u: Param::zeros(attention_dim, 1),
        }
    }

    pub fn xavier(dim: usize, attention_dim: usize, rng: &mut impl Rng) -> Self {
        SelfAttention {
            w: Param::xavier(attention_dim, 2 * dim, rng),
            b: Param::zeros(attention_dim, 1),
            u: Param::xavier(attention_dim, 1, rng),
        }
    }

    pub fn forward(&self, es: &[Vec<f64>]) -> (Vec<Vec<f64>>, AttentionTrace) {
        let n = es.len();
        let d = es[0].len();
        let cols = self.w.cols;
        let left: Vec<Vec<f64>> = es
            .iter()
            .map(|e| {
                let mut v = self.b.value.clone();
                matvec_acc(&self.w.value, cols, 0, e, &mut v);
                v
            })
            .collect();
        let right: Vec<Vec<f64>> = es
            .iter()
            .map(|e| {
                let mut v = vec![0.0; self.w.rows];
                matvec_acc(&self.w.value, cols, d, e, &mut v);
                v
            })
            .collect();
        let mut alpha = Vec::with_capacity(n);
        let mut beta = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for l in &left {
            let row: Vec<f64> = right
                .iter()
                .map(|r| {
                    l.iter()
                        .zip(r)
                        .zip(&self.u.value)
                        .map(|((a, b), u)| u * (a + b).max(0.0))
                        .sum()
                })
                .collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = row.iter().map(|b| (b - max).exp()).collect();
            let total: f64 = exp.iter().sum();
            let a: Vec<f64> = exp.iter().map(|x| x / total).collect();
            let mut ak = vec![0.0; d];
            for (w, e) in a.iter().zip(es) {
                for (o, x) in ak.iter_mut().zip(e) {
                    *o += w * x;
                }
            }
            out.push(ak);
            alpha.push(a);
            beta.push(row);
        }
        (
            out,
            AttentionTrace {
                left,
                right,
                alpha,
                beta,
            },
        )
    }

    /// Adds the gradient with respect to every `e_j` into `de`.
    pub fn backward(&mut self, es: &[Vec<f64>], trace: &AttentionTrace, dout: &[Vec<f64>], de: &mut [Vec<f64>]) {
        let n = es.len();
        let d = es[0].len();
        let da = self.w.rows;
        let cols = self.w.cols;
        let mut dleft = vec![vec![0.0; da]; n];
        let mut dright = vec![vec![0.0; da]; n];
        for k in 0..n {
            let alpha = &trace.alpha[k];
            let dalpha: Vec<f64> = es
                .iter()
                .map(|e| e.iter().zip(&dout[k]).map(|(a, b)| a * b).sum())
                .collect();
            let mean: f64 = alpha.iter().zip(&dalpha).map(|(a, g)| a * g).sum();
            for j in 0..n {
                for (x, g) in de[j].iter_mut().zip(&dout[k]) {
                    *x += alpha[j] * g;
                }
                let dbeta = alpha[j] * (dalpha[j] - mean);
                if dbeta == 0.0 {
                    continue;
                }
                for i in 0..da {
                    let z = trace.left[k][i] + trace.right[j][i];
                    if z > 0.0 {
                        self.u.grad[i] += dbeta * z;
                        let dz = dbeta * self.u.value[i];
                        dleft[k][i] += dz;
                        dright[j][i] += dz;
                    }
                }
            }
        }
        for k in 0..n {
            for (g, x) in self.b.grad.iter_mut().zip(&dleft[k]) {
                *g += x;
            }
            outer_acc(&mut self.w.grad, cols, 0, &dleft[k], &es[k]);
            outer_acc(&mut self.w.grad, cols, d, &dright[k], &es[k]);
            matvec_t_acc(&self.w.value, cols, 0, &dleft[k], &mut de[k]);
            let mut tmp = vec![0.0; d];
            matvec_t_acc(&self.w.value, cols, d, &dright[k], &mut tmp);
            for (x, t) in de[k].iter_mut().zip(&tmp) {
                *x += t;
            }
        }
    }
}

/// Every learnable tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub word_emb: Param,
    pub char_emb: Param,
    pub char_fwd: Lstm,
    pub char_bwd: Lstm,
    pub layers: Vec<BiLstm>,
    pub attention: Option<SelfAttention>,
    /// `f_t`: BMES scores (a single shared score without sub-tags).
    pub target_head: Linear,
    /// `f_s`: per-polarity sentiment scores.
    pub sentiment_head: Linear,
    /// `g_s`: per-polarity scores at target boundaries.
    pub span_head: Option<Linear>,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig, num_words: usize, num_chars: usize) -> Self {
        let ch = config.char_dim / 2;
        let layers = (0..config.layers)
            .map(|l| {
                let input = if l == 0 { config.embedding_dim() } else { config.context_dim() };
                BiLstm::zeros(input, config.hidden_dim)
            })
            .collect();
        ModelParams {
            word_emb: Param::zeros(num_words, config.word_dim),
            char_emb: Param::zeros(num_chars, config.char_emb_dim),
            char_fwd: Lstm::zeros(config.char_emb_dim, ch),
            char_bwd: Lstm::zeros(config.char_emb_dim, ch),
            layers,
            attention: config
                .uses_attention()
                .then(|| SelfAttention::zeros(config.embedding_dim(), config.attention_dim)),
            target_head: Linear::zeros(config.context_dim(), config.target_outputs()),
            sentiment_head: Linear::zeros(config.context_dim(), 3),
            span_head: config.span_head_input().map(|i| Linear::zeros(i, 3)),
        }
    }

    /// Xavier weights, zero biases, embeddings uniform in `±sqrt(3/d)`.
    /// Rows of `pretrained` replace the random word vectors.
    pub fn init(
        config: &ModelConfig,
        num_words: usize,
        num_chars: usize,
        pretrained: Option<&EmbeddingTable>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = config.char_dim / 2;
        let mut word_emb = Param::uniform(num_words, config.word_dim, init_range(config.word_dim), &mut rng);
        if let Some(table) = pretrained {
            if table.dim != config.word_dim || table.vectors.len() != num_words {
                return Err(Error::Config(format!(
                    "pretrained table is {}x{}, model expects {}x{}",
                    table.vectors.len(),
                    table.dim,
                    num_words,
                    config.word_dim
                )));
            }
            for (r, v) in table.vectors.iter().enumerate() {
                word_emb.value[r * config.word_dim..(r + 1) * config.word_dim].copy_from_slice(v);
            }
        }
        let char_emb = Param::uniform(num_chars, config.char_emb_dim, init_range(config.char_emb_dim), &mut rng);
        let char_fwd = Lstm::xavier(config.char_emb_dim, ch, &mut rng);
        let char_bwd = Lstm::xavier(config.char_emb_dim, ch, &mut rng);
        let layers = (0..config.layers)
            .map(|l| {
                let input = if l == 0 { config.embedding_dim() } else { config.context_dim() };
                BiLstm::xavier(input, config.hidden_dim, &mut rng)
            })
            .collect();
        let attention = config
            .uses_attention()
            .then(|| SelfAttention::xavier(config.embedding_dim(), config.attention_dim, &mut rng));
        let target_head = Linear::xavier(config.context_dim(), config.target_outputs(), &mut rng);
        let sentiment_head = Linear::xavier(config.context_dim(), 3, &mut rng);
        let span_head = config.span_head_input().map(|i| Linear::xavier(i, 3, &mut rng));
        Ok(ModelParams {
            word_emb,
            char_emb,
            char_fwd,
            char_bwd,
            layers,
            attention,
            target_head,
            sentiment_head,
            span_head,
        })
    }

    /// Named view of every parameter in a fixed order.
    pub fn named(&self) -> Vec<(String, &Param)> {
        let mut out: Vec<(String, &Param)> = vec![
            ("word_emb".into(), &self.word_emb),
            ("char_emb".into(), &self.char_emb),
            ("char_fwd.weight".into(), &self.char_fwd.weight),
            ("char_fwd.bias".into(), &self.char_fwd.bias),
            ("char_bwd.weight".into(), &self.char_bwd.weight),
            ("char_bwd.bias".into(), &self.char_bwd.bias),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("lstm{l}.fwd.weight"), &layer.fwd.weight));
            out.push((format!("lstm{l}.fwd.bias"), &layer.fwd.bias));
            out.push((format!("lstm{l}.bwd.weight"), &layer.bwd.weight));
            out.push((format!("lstm{l}.bwd.bias"), &layer.bwd.bias));
        }
        if let Some(a) = &self.attention {
            out.push(("attention.w".into(), &a.w));
            out.push(("attention.b".into(), &a.b));
            out.push(("attention.u".into(), &a.u));
        }
        out.push(("target_head.weight".into(), &self.target_head.weight));
        out.push(("target_head.bias".into(), &self.target_head.bias));
        out.push(("sentiment_head.weight".into(), &self.sentiment_head.weight));
        out.push(("sentiment_head.bias".into(), &self.sentiment_head.bias));
        if let Some(h) = &self.span_head {
            out.push(("span_head.weight".into(), &h.weight));
            out.push(("span_head.bias".into(), &h.bias));
        }
        out
    }

    /// Same order as [`ModelParams::named`].
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = vec![
            &mut self.word_emb,
            &mut self.char_emb,
            &mut self.char_fwd.weight,
            &mut self.char_fwd.bias,
            &mut self.char_bwd.weight,
            &mut self.char_bwd.bias,
        ];
        for layer in &mut self.layers {
            out.push(&mut layer.fwd.weight);
            out.push(&mut layer.fwd.bias);
            out.push(&mut layer.bwd.weight);
            out.push(&mut layer.bwd.bias);
        }
        if let Some(a) = &mut self.attention {
            out.push(&mut a.w);
            out.push(&mut a.b);
            out.push(&mut a.u);
        }
        out.push(&mut self.target_head.weight);
        out.push(&mut self.target_head.bias);
        out.push(&mut self.sentiment_head.weight);
        out.push(&mut self.sentiment_head.bias);
        if let Some(h) = &mut self.span_head {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, p)| p.len()).sum()
    }
}

/// Per-position head outputs. `span` is `None` when `g_s` is dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionScores {
    pub target: Vec<Vec<f64>>,
    pub sentiment: Vec<Vec<f64>>,
    pub span: Option<Vec<Vec<f64>>>,
}

impl PositionScores {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn zeros_like(other: &PositionScores) -> Self {
        let z = |v: &Vec<Vec<f64>>| v.iter().map(|r| vec![0.0; r.len()]).collect::<Vec<_>>();
        PositionScores {
            target: z(&other.target),
            sentiment: z(&other.sentiment),
            span: other.span.as_ref().map(z),
        }
    }

    fn target_at(&self, k: usize, tag: Tag) -> f64 {
        match tag {
            Tag::Target(e, _) => {
                let row = &self.target[k];
                row[e.index().min(row.len() - 1)]
            }
            _ => unreachable!("target score requested for {tag}"),
        }
    }

    fn span_at(&self, k: usize, p: usize) -> f64 {
        self.span.as_ref().map_or(0.0, |s| s[k][p])
    }
}

/// Assigns every lattice edge its score from the head outputs.
pub fn score_edges(lattice: &Lattice, scores: &PositionScores) -> Result<EdgeScores> {
    if lattice.len() > scores.len() {
        return Err(Error::Argument(format!(
            "lattice of length {} but only {} scored positions",
            lattice.len(),
            scores.len()
        )));
    }
    let values = lattice
        .edges()
        .iter()
        .map(|e| {
            let src = lattice.node(e.source);
            let k = src.position - 1;
            let p = src.tag.polarity().index();
            match e.rule {
                EdgeRule::TargetCont => scores.target_at(k, src.tag),
                EdgeRule::TargetEnd => scores.target_at(k, src.tag) + scores.span_at(k, p),
                EdgeRule::SentBB | EdgeRule::SentAA | EdgeRule::SentAB => scores.sentiment[k][p],
                EdgeRule::AttnBegin => scores.span_at(k, p),
            }
        })
        .collect();
    EdgeScores::new(lattice, values)
}

/// Adds `weight · d(loss)/d(edge)` back onto the head outputs.
pub fn backprop_edges(lattice: &Lattice, edge_grads: &[f64], weight: f64, grads: &mut PositionScores) {
    for (e, &g) in lattice.edges().iter().zip(edge_grads) {
        let g = g * weight;
        let src = lattice.node(e.source);
        let k = src.position - 1;
        let p = src.tag.polarity().index();
        let add_target = |grads: &mut PositionScores| {
            if let Tag::Target(sub, _) = src.tag {
                let row = &mut grads.target[k];
                let i = sub.index().min(row.len() - 1);
                row[i] += g;
            }
        };
        match e.rule {
            EdgeRule::TargetCont => add_target(grads),
            EdgeRule::TargetEnd => {
                add_target(grads);
                if let Some(s) = grads.span.as_mut() {
                    s[k][p] += g;
                }
            }
            EdgeRule::SentBB | EdgeRule::SentAA | EdgeRule::SentAB => grads.sentiment[k][p] += g,
            EdgeRule::AttnBegin => {
                if let Some(s) = grads.span.as_mut() {
                    s[k][p] += g;
                }
            }
        }
    }
}

/// A trained or freshly initialized model with its vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams,
}

/// Intermediate values of one forward pass, consumed by [`Model::backward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    word_ids: Vec<usize>,
    char_ids: Vec<Vec<usize>>,
    char_traces: Vec<(LstmTrace, LstmTrace)>,
    /// `e_k`
    pub embeddings: Vec<Vec<f64>>,
    emb_mask: Option<Vec<Vec<f64>>>,
    layer_traces: Vec<BiLstmTrace>,
    layer_masks: Vec<Option<Vec<Vec<f64>>>>,
    /// `h_k` before dropout.
    pub context: Vec<Vec<f64>>,
    head_mask: Option<Vec<Vec<f64>>>,
    head_input: Vec<Vec<f64>>,
    attention: Option<AttentionTrace>,
    /// `a_k`
    pub attended: Option<Vec<Vec<f64>>>,
    pub scores: PositionScores,
}

fn mask_all(xs: &[Vec<f64>], rate: f64, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let masks: Vec<Vec<f64>> = xs.iter().map(|x| dropout_mask(x.len(), rate, rng)).collect();
    let out = xs.iter().zip(&masks).map(|(x, m)| apply_mask(x, m)).collect();
    (out, masks)
}

fn unmask(grads: &mut [Vec<f64>], masks: &Option<Vec<Vec<f64>>>) {
    if let Some(masks) = masks {
        for (g, m) in grads.iter_mut().zip(masks) {
            for (a, b) in g.iter_mut().zip(m) {
                *a *= b;
            }
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary, params: ModelParams) -> Self {
        Model {
            config,
            vocab,
            params,
        }
    }

    /// Character encoding `c_k` of one token: final forward state and final
    /// backward state.
    fn encode_chars(&self, ids: &[usize]) -> (Vec<f64>, (LstmTrace, LstmTrace)) {
        let xs: Vec<Vec<f64>> = ids.iter().map(|&c| self.params.char_emb.row(c).to_vec()).collect();
        let rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
        let f = self.params.char_fwd.forward(&xs);
        let b = self.params.char_bwd.forward(&rev);
        let mut c = f.last().to_vec();
        c.extend_from_slice(b.last());
        (c, (f, b))
    }

    /// `e_k = [w_k; c_k]` for every token.
    pub fn embed(&self, sentence: &Sentence) -> Vec<Vec<f64>> {
        self.forward(sentence, None).embeddings
    }

    /// Runs the encoder and heads. Dropout is active iff `dropout_rng` is given.
    pub fn forward(&self, sentence: &Sentence, mut dropout_rng: Option<&mut ChaCha8Rng>) -> ForwardTrace {
        let cfg = &self.config;
        let rate = cfg.dropout;
        let word_ids: Vec<usize> = sentence.tokens().iter().map(|t| self.vocab.word_id(t)).collect();
        let char_ids: Vec<Vec<usize>> = sentence
            .tokens()
            .iter()
            .map(|t| t.chars().map(|c| self.vocab.char_id(c)).collect())
            .collect();

        let mut embeddings = Vec::with_capacity(word_ids.len());
        let mut char_traces = Vec::with_capacity(word_ids.len());
        for (&w, cs) in word_ids.iter().zip(&char_ids) {
            let (c, tr) = self.encode_chars(cs);
            let mut e = self.params.word_emb.row(w).to_vec();
            e.extend(c);
            embeddings.push(e);
            char_traces.push(tr);
        }

        let active = |rng: &Option<&mut ChaCha8Rng>| rng.is_some() && rate > 0.0;
        let (mut input, emb_mask) = match dropout_rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => {
                let (x, m) = mask_all(&embeddings, rate, rng);
                (x, Some(m))
            }
            _ => (embeddings.clone(), None),
        };

        let mut layer_traces = Vec::with_capacity(cfg.layers);
        let mut layer_masks = Vec::with_capacity(cfg.layers);
        for (l, layer) in self.params.layers.iter().enumerate() {
            let (out, tr) = layer.forward(&input);
            input = out;
            layer_traces.push(tr);
            let last = l + 1 == cfg.layers;
            if !last && cfg.inter_layer_dropout && active(&dropout_rng) {
                let (x, m) = mask_all(&input, rate, dropout_rng.as_deref_mut().unwrap());
                input = x;
                layer_masks.push(Some(m));
            } else {
                layer_masks.push(None);
            }
        }
        let context = input;
        let (head_input, head_mask) = match dropout_rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => {
                let (x, m) = mask_all(&context, rate, rng);
                (x, Some(m))
            }
            _ => (context.clone(), None),
        };

        let (attended, attention) = match &self.params.attention {
            Some(att) => {
                let (a, tr) = att.forward(&embeddings);
                (Some(a), Some(tr))
            }
            None => (None, None),
        };

        let target = head_input.iter().map(|h| self.params.target_head.forward(h)).collect();
        let sentiment = head_input.iter().map(|h| self.params.sentiment_head.forward(h)).collect();
        let span = self.params.span_head.as_ref().map(|g| {
            let src = attended.as_ref().unwrap_or(&head_input);
            src.iter().map(|x| g.forward(x)).collect()
        });

        ForwardTrace {
            word_ids,
            char_ids,
            char_traces,
            embeddings,
            emb_mask,
            layer_traces,
            layer_masks,
            context,
            head_mask,
            head_input,
            attention,
            attended,
            scores: PositionScores {
                target,
                sentiment,
                span,
            },
        }
    }

    /// Backpropagates gradients of the head outputs into every parameter.
    pub fn backward(&mut self, trace: &ForwardTrace, grads: &PositionScores) {
        let n = trace.embeddings.len();
        let params = &mut self.params;
        let mut d_head = vec![vec![0.0; self.config.context_dim()]; n];
        for k in 0..n {
            params.target_head.backward(&trace.head_input[k], &grads.target[k], &mut d_head[k]);
            params.sentiment_head.backward(&trace.head_input[k], &grads.sentiment[k], &mut d_head[k]);
        }
        let mut d_emb = vec![vec![0.0; self.config.embedding_dim()]; n];
        if let (Some(g), Some(dspan)) = (params.span_head.as_mut(), grads.span.as_ref()) {
            match &trace.attended {
                Some(a) => {
                    let mut d_att = vec![vec![0.0; a[0].len()]; n];
                    for k in 0..n {
                        g.backward(&a[k], &dspan[k], &mut d_att[k]);
                    }
                    let att = params.attention.as_mut().expect("attention trace without parameters");
                    att.backward(&trace.embeddings, trace.attention.as_ref().unwrap(), &d_att, &mut d_emb);
                }
                None => {
                    for k in 0..n {
                        g.backward(&trace.head_input[k], &dspan[k], &mut d_head[k]);
                    }
                }
            }
        }

        unmask(&mut d_head, &trace.head_mask);
        let mut d = d_head;
        for l in (0..params.layers.len()).rev() {
            unmask(&mut d, &trace.layer_masks[l]);
            d = params.layers[l].backward(&trace.layer_traces[l], &d);
        }
        unmask(&mut d, &trace.emb_mask);
        for (a, b) in d_emb.iter_mut().zip(&d) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }

        let wd = self.config.word_dim;
        let ch = self.config.char_dim / 2;
        for k in 0..n {
            for (g, x) in params.word_emb.grad_row_mut(trace.word_ids[k]).iter_mut().zip(&d_emb[k][..wd]) {
                *g += x;
            }
            let (ftr, btr) = &trace.char_traces[k];
            let len = trace.char_ids[k].len();
            let mut dh_f = vec![vec![0.0; ch]; len];
            dh_f[len - 1].copy_from_slice(&d_emb[k][wd..wd + ch]);
            let mut dh_b = vec![vec![0.0; ch]; len];
            dh_b[len - 1].copy_from_slice(&d_emb[k][wd + ch..]);
            let dx_f = params.char_fwd.backward(ftr, &dh_f);
            let dx_b = params.char_bwd.backward(btr, &dh_b);
            for (t, &c) in trace.char_ids[k].iter().enumerate() {
                let row = params.char_emb.grad_row_mut(c);
                for ((g, a), b) in row.iter_mut().zip(&dx_f[t]).zip(&dx_b[len - 1 - t]) {
                    *g += a + b;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_annotations, Polarity};
    use crate::lattice::{build_unconstrained, Node, SubTag};

    pub(crate) fn tiny_config(ablation: Ablation) -> ModelConfig {
        ModelConfig {
            word_dim: 3,
            char_dim: 2,
            char_emb_dim: 2,
            hidden_dim: 2,
            attention_dim: 3,
            layers: 2,
            ablation,
            attention_fallback: AttentionFallback::Hidden,
            dropout: 0.0,
            inter_layer_dropout: false,
        }
    }

    fn tiny_model(ablation: Ablation, seed: u64) -> Model {
        let d = parse_annotations("Shim\tB-POS\nLim\tI-POS\nis\tO\ngreat\tO\n").unwrap();
        let vocab = Vocabulary::from_dataset(&d);
        let cfg = tiny_config(ablation);
        let params = ModelParams::init(&cfg, vocab.num_words(), vocab.num_chars(), None, seed).unwrap();
        Model::new(cfg, vocab, params)
    }

    fn sentence(words: &[&str]) -> Sentence {
        Sentence::new(words.iter().copied()).unwrap()
    }

    #[test]
    fn zero_params_give_zero_char_encoding() {
        let mut m = tiny_model(Ablation::Full, 0);
        m.params = ModelParams::zeros(&m.config, m.vocab.num_words(), m.vocab.num_chars());
        let e = m.embed(&sentence(&["x"]));
        assert_eq!(e[0].len(), 5);
        assert_eq!(&e[0][3..], &[0.0, 0.0]);
        let tr = m.forward(&sentence(&["a", "b", "c"]), None);
        assert!(tr.context.iter().flatten().all(|&v| v == 0.0));
        assert!(tr.scores.target.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn shapes_and_weight_sharing() {
        let m = tiny_model(Ablation::Full, 1);
        let tr = m.forward(&sentence(&["great", "great", "Lim"]), None);
        assert_eq!(tr.embeddings[0], tr.embeddings[1]);
        assert!(tr.embeddings.iter().all(|e| e.len() == 5));
        assert!(tr.context.iter().all(|h| h.len() == 4));
        assert!(tr.scores.target.iter().all(|t| t.len() == 4));
        assert!(tr.scores.sentiment.iter().all(|t| t.len() == 3));
    }

    #[test]
    fn single_token_attention_is_identity() {
        let m = tiny_model(Ablation::Full, 2);
        let tr = m.forward(&sentence(&["Shim"]), None);
        let att = tr.attention.as_ref().unwrap();
        assert_eq!(att.alpha[0], [1.0]);
        assert_eq!(tr.attended.as_ref().unwrap()[0], tr.embeddings[0]);
    }

    #[test]
    fn uniform_attention_averages() {
        let mut m = tiny_model(Ablation::Full, 3);
        m.params.attention.as_mut().unwrap().u.value.fill(0.0);
        let tr = m.forward(&sentence(&["Shim", "Lim", "is"]), None);
        let a = tr.attended.unwrap();
        for k in 0..3 {
            for i in 0..5 {
                let mean = (0..3).map(|j| tr.embeddings[j][i]).sum::<f64>() / 3.0;
                assert!((a[k][i] - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_matches_dense_reference() {
        let att = SelfAttention::xavier(2, 3, &mut ChaCha8Rng::seed_from_u64(11));
        let es = vec![vec![0.2, -0.4], vec![1.0, 0.3], vec![-0.7, 0.9]];
        let (out, tr) = att.forward(&es);
        for k in 0..3 {
            let beta: Vec<f64> = (0..3)
                .map(|j| {
                    let cat = [es[k][0], es[k][1], es[j][0], es[j][1]];
                    (0..3)
                        .map(|i| {
                            let mut z = att.b.value[i];
                            for c in 0..4 {
                                z += att.w.value[i * 4 + c] * cat[c];
                            }
                            att.u.value[i] * z.max(0.0)
                        })
                        .sum()
                })
                .collect();
            let total: f64 = beta.iter().map(|b| b.exp()).sum();
            for j in 0..3 {
                let alpha = beta[j].exp() / total;
                assert!((tr.alpha[k][j] - alpha).abs() < 1e-12);
                assert!((tr.beta[k][j] - beta[j]).abs() < 1e-12);
            }
            for i in 0..2 {
                let a: f64 = (0..3).map(|j| beta[j].exp() / total * es[j][i]).sum();
                assert!((out[k][i] - a).abs() < 1e-10);
            }
            assert!((tr.alpha[k].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reversed_sentence_swaps_directions() {
        let m = tiny_model(Ablation::Full, 4);
        let words = ["Shim", "Lim", "is", "great"];
        let fwd = m.forward(&sentence(&words), None);
        let rev_words: Vec<&str> = words.iter().rev().copied().collect();
        // swap the two directions of every layer
        let mut swapped = m.clone();
        for l in &mut swapped.params.layers {
            std::mem::swap(&mut l.fwd, &mut l.bwd);
        }
        // layer 2 sees its input halves in the other order, so permute its columns
        let h = m.config.hidden_dim;
        let l2 = &mut swapped.params.layers[1];
        for lstm in [&mut l2.fwd, &mut l2.bwd] {
            let cols = lstm.weight.cols;
            for r in 0..lstm.weight.rows {
                let row = &mut lstm.weight.value[r * cols..r * cols + 2 * h];
                let (a, b) = row.split_at_mut(h);
                a.swap_with_slice(b);
            }
        }
        let rev = swapped.forward(&sentence(&rev_words), None);
        let n = words.len();
        for k in 0..n {
            let a = &fwd.context[k];
            let b = &rev.context[n - 1 - k];
            for i in 0..h {
                assert!((a[i] - b[h + i]).abs() < 1e-12);
                assert!((a[h + i] - b[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn distant_token_changes_attention_not_chars() {
        let m = tiny_model(Ablation::Full, 5);
        let a = m.forward(&sentence(&["Shim", "Lim", "is", "great"]), None);
        let b = m.forward(&sentence(&["Shim", "Lim", "is", "Lim"]), None);
        assert_eq!(a.embeddings[0], b.embeddings[0]);
        assert_ne!(a.attended.as_ref().unwrap()[0], b.attended.as_ref().unwrap()[0]);
    }

    #[test]
    fn one_word_edge_scores() {
        let m = tiny_model(Ablation::Full, 6);
        let tr = m.forward(&sentence(&["great"]), None);
        let l = build_unconstrained(1).unwrap();
        let scores = score_edges(&l, &tr.scores).unwrap();
        let span = tr.scores.span.as_ref().unwrap();
        for p in Polarity::ALL {
            let path = [
                Node::new(1, Tag::Before(p)),
                Node::new(1, Tag::Target(SubTag::Single, p)),
                Node::new(1, Tag::After(p)),
            ];
            let s = crate::inference::path_score(&l, &path, &scores).unwrap();
            let expected = span[0][p.index()] + tr.scores.target[0][3] + span[0][p.index()];
            assert!((s - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_heads_zero_scores() {
        let mut m = tiny_model(Ablation::Full, 7);
        m.params.target_head = Linear::zeros(4, 4);
        m.params.sentiment_head = Linear::zeros(4, 3);
        m.params.span_head = Some(Linear::zeros(5, 3));
        let tr = m.forward(&sentence(&["Shim", "is", "great"]), None);
        let s = score_edges(&build_unconstrained(3).unwrap(), &tr.scores).unwrap();
        assert!(s.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn no_bmes_shares_one_target_score() {
        let m = tiny_model(Ablation::NoBmes, 8);
        let tr = m.forward(&sentence(&["Shim", "Lim", "great"]), None);
        assert!(tr.scores.target.iter().all(|t| t.len() == 1));
        let l = build_unconstrained(3).unwrap();
        let s = score_edges(&l, &tr.scores).unwrap();
        for (i, e) in l.edges().iter().enumerate() {
            if e.rule == EdgeRule::TargetCont {
                let k = l.node(e.source).position - 1;
                assert_eq!(s[i], tr.scores.target[k][0]);
            }
        }
    }

    #[test]
    fn no_attention_variants() {
        let m = tiny_model(Ablation::NoAttention, 9);
        assert!(m.params.attention.is_none());
        assert_eq!(m.params.span_head.as_ref().unwrap().input_dim(), 4);
        let mut cfg = tiny_config(Ablation::NoAttention);
        cfg.attention_fallback = AttentionFallback::Zero;
        let p = ModelParams::init(&cfg, 3, 3, None, 0).unwrap();
        assert!(p.span_head.is_none());
    }

    #[test]
    fn scoring_is_pure() {
        let m = tiny_model(Ablation::Full, 10);
        let s = sentence(&["Shim", "Lim", "is", "great"]);
        let l = build_unconstrained(4).unwrap();
        let a = score_edges(&l, &m.forward(&s, None).scores).unwrap();
        let b = score_edges(&l, &m.forward(&s, None).scores).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_only_with_rng() {
        let mut m = tiny_model(Ablation::Full, 11);
        m.config.dropout = 0.5;
        let s = sentence(&["Shim", "Lim", "is", "great"]);
        let eval_a = m.forward(&s, None).scores;
        let eval_b = m.forward(&s, None).scores;
        assert_eq!(eval_a, eval_b);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let train = m.forward(&s, Some(&mut rng)).scores;
        assert_ne!(train, eval_a);
    }

    #[test]
    fn mismatched_lattice_rejected() {
        let m = tiny_model(Ablation::Full, 12);
        let tr = m.forward(&sentence(&["a"]), None);
        assert!(score_edges(&build_unconstrained(2).unwrap(), &tr.scores).is_err());
    }
}
