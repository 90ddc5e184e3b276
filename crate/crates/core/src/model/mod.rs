//! The breakpoint transformer: a shared bidirectional encoder for stories and
//! propositions, breakpoint pooling with a future-masked breakpoint
//! self-attention stream, a bilinear three-way scorer, a conditioned decoder,
//! and the multi-pass and proposition-only baselines.

pub mod checkpoint;

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{cst, Graph, Mask, ParamSet, Real, Var};
use crate::corpus::{Example, TruthLabel, Vocab, BOS_ID, EOS_ID, MARK_ID, PROP_ID};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input of {len} tokens exceeds max_len {max}")]
    Overlength { len: usize, max: usize },
    #[error("{count} breakpoints exceed the supported {max}")]
    TooManyBreakpoints { count: usize, max: usize },
    #[error("position {position} is outside a sequence of {len}")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("cannot normalize a zero vector at breakpoint {0}")]
    ZeroNorm(usize),
    #[error("empty proposition")]
    EmptyProposition,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("query refers to breakpoint {index} of a story with {count}")]
    BadQuery { index: usize, count: usize },
    #[error("empty conditioning")]
    EmptyConditioning,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where a proposition's vector is read from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropPooling {
    /// Hidden state of the `[PROP]` prefix token.
    #[default]
    Prefix,
    /// Mean over the proposition's own tokens.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub decoder_layers: usize,
    pub brk_self_attn: bool,
    pub prop_pooling: PropPooling,
    /// Size of the learned breakpoint-ordinal embedding table.
    pub max_breakpoints: usize,
    pub max_decode_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ffn: 512,
            dropout: 0.1,
            max_len: 256,
            decoder_layers: 2,
            brk_self_attn: true,
            prop_pooling: PropPooling::Prefix,
            max_breakpoints: 64,
            max_decode_len: 16,
        }
    }
}

impl ModelConfig {
    /// The smallest config used for gradient checking.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ffn: 16,
            dropout: 0.0,
            max_len: 256,
            decoder_layers: 1,
            max_breakpoints: 32,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.n_layers == 0 || self.d_ffn == 0 || self.max_len == 0 || self.max_breakpoints == 0 {
            return bad("layer count, ffn width, max_len and max_breakpoints must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BeliefDistribution {
    /// Probabilities of (ENTAILED, CONTRADICTED, UNKNOWN).
    pub probs: [f64; 3],
}

impl BeliefDistribution {
    pub fn from_logits(logits: [f64; 3]) -> Self {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e = logits.map(|l| (l - max).exp());
        let s: f64 = e.iter().sum();
        BeliefDistribution { probs: e.map(|x| x / s) }
    }

    /// Argmax with ties resolved E < C < U.
    pub fn label(&self) -> TruthLabel {
        let mut best = 0;
        for i in 1..3 {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        TruthLabel::from_index(best).unwrap()
    }

    pub fn prob(&self, l: TruthLabel) -> f64 {
        self.probs[l.index()]
    }
}

/// Which belief head answers proposition queries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    SingleRead,
    MultiPass,
    PropOnly,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::SingleRead => "single_read",
            Mode::MultiPass => "multi_pass",
            Mode::PropOnly => "prop_only",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "single_read" | "single" => Ok(Mode::SingleRead),
            "multi_pass" | "multipass" => Ok(Mode::MultiPass),
            "prop_only" => Ok(Mode::PropOnly),
            _ => Err(format!("unknown mode '{s}'")),
        }
    }
}

/// Encoder invocations made by one prediction call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallStats {
    pub story_encodes: usize,
    pub prop_encodes: usize,
    pub cache_hits: usize,
}

impl std::ops::AddAssign for CallStats {
    fn add_assign(&mut self, o: CallStats) {
        self.story_encodes += o.story_encodes;
        self.prop_encodes += o.prop_encodes;
        self.cache_hits += o.cache_hits;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub beliefs: Vec<BeliefDistribution>,
    pub stats: CallStats,
}

impl Predictions {
    pub fn labels(&self) -> Vec<TruthLabel> {
        self.beliefs.iter().map(BeliefDistribution::label).collect()
    }
}

/// What the decoder cross-attends to.
#[derive(Clone, Debug)]
pub enum Conditioning<F> {
    /// Every encoder token state (question answering).
    Tokens(Array2<F>),
    /// One or two raw breakpoint states, averaged into a single memory row.
    Breakpoints(Vec<Array1<F>>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    pub tokens: Vec<String>,
    /// Hit the length limit before emitting `[EOS]`.
    pub truncated: bool,
}

/// Token budget of one packed proposition chunk.
const PACK_LEN: usize = 64;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub g: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Attn {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncBlock {
    pub ln1: Norm,
    pub attn: Attn,
    pub ln2: Norm,
    pub ffn: Ffn,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecBlock {
    pub ln1: Norm,
    pub self_attn: Attn,
    pub ln2: Norm,
    pub cross: Attn,
    pub ln3: Norm,
    pub ffn: Ffn,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamIds {
    pub tok_emb: usize,
    pub enc: Vec<EncBlock>,
    pub enc_ln: Norm,
    pub proj: Linear,
    pub brk_pos: usize,
    pub brk: EncBlock,
    pub bilinear: [usize; 3],
    pub bilinear_bias: usize,
    pub dec: Vec<DecBlock>,
    pub dec_ln: Norm,
    pub dec_out: Linear,
    pub mp_hidden: Linear,
    pub mp_out: Linear,
    pub po_hidden: Linear,
    pub po_out: Linear,
}

struct Init<'a, F: Real> {
    params: &'a mut ParamSet<F>,
    rng: ChaCha8Rng,
}

impl<F: Real> Init<'_, F> {
    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> usize {
        let dist = Normal::new(0.0, std).unwrap();
        let t = Array2::from_shape_fn((rows, cols), |_| cst::<F>(dist.sample(&mut self.rng)));
        self.params.add(name, t)
    }

    fn fill(&mut self, name: String, rows: usize, cols: usize, v: f64) -> usize {
        self.params.add(name, Array2::from_elem((rows, cols), cst::<F>(v)))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        Linear { w: self.normal(format!("{name}.w"), fan_in, fan_out, std), b: self.fill(format!("{name}.b"), 1, fan_out, 0.0) }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm { g: self.fill(format!("{name}.g"), 1, d, 1.0), b: self.fill(format!("{name}.b"), 1, d, 0.0) }
    }

    fn attn(&mut self, name: &str, d: usize) -> Attn {
        Attn {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, f: usize) -> Ffn {
        Ffn { up: self.linear(&format!("{name}.up"), d, f), down: self.linear(&format!("{name}.down"), f, d) }
    }

    fn enc_block(&mut self, name: &str, d: usize, f: usize) -> EncBlock {
        EncBlock {
            ln1: self.norm(&format!("{name}.ln1"), d),
            attn: self.attn(&format!("{name}.attn"), d),
            ln2: self.norm(&format!("{name}.ln2"), d),
            ffn: self.ffn(&format!("{name}.ffn"), d, f),
        }
    }
}

fn build_params<F: Real>(cfg: &ModelConfig, vocab_size: usize, seed: u64) -> (ParamSet<F>, ParamIds) {
    let mut params = ParamSet::default();
    let (d, f) = (cfg.d_model, cfg.d_ffn);
    let mut init = Init { params: &mut params, rng: ChaCha8Rng::seed_from_u64(seed) };
    let tok_emb = init.normal("tok_emb".into(), vocab_size, d, 1.0);
    let enc = (0..cfg.n_layers).map(|l| init.enc_block(&format!("enc.{l}"), d, f)).collect();
    let enc_ln = init.norm("enc.ln", d);
    let proj = init.linear("proj", d, d);
    let brk_pos = init.normal("brk.pos".into(), cfg.max_breakpoints, d, 0.02);
    let brk = init.enc_block("brk", d, f);
    let bstd = (1.0 / (2 * d * d) as f64).sqrt() * (d as f64).sqrt();
    let bilinear = TruthLabel::ALL.map(|l| init.normal(format!("bilinear.{}", l.predicate()), 2 * d, d, bstd));
    let bilinear_bias = init.fill("bilinear.bias".into(), 1, 3, 0.0);
    let dec = (0..cfg.decoder_layers)
        .map(|l| {
            let name = format!("dec.{l}");
            DecBlock {
                ln1: init.norm(&format!("{name}.ln1"), d),
                self_attn: init.attn(&format!("{name}.self"), d),
                ln2: init.norm(&format!("{name}.ln2"), d),
                cross: init.attn(&format!("{name}.cross"), d),
                ln3: init.norm(&format!("{name}.ln3"), d),
                ffn: init.ffn(&format!("{name}.ffn"), d, f),
            }
        })
        .collect();
    let dec_ln = init.norm("dec.ln", d);
    let dec_out = init.linear("dec.out", d, vocab_size);
    let mp_hidden = init.linear("multipass.hidden", 4 * d, d);
    let mp_out = init.linear("multipass.out", d, 3);
    let po_hidden = init.linear("prop_only.hidden", d, d);
    let po_out = init.linear("prop_only.out", d, 3);
    let ids = ParamIds {
        tok_emb,
        enc,
        enc_ln,
        proj,
        brk_pos,
        brk,
        bilinear,
        bilinear_bias,
        dec,
        dec_ln,
        dec_out,
        mp_hidden,
        mp_out,
        po_hidden,
        po_out,
    };
    (params, ids)
}

/// Sinusoidal position encodings for the given positions.
pub fn sinusoidal<F: Real>(positions: &[usize], d: usize) -> Array2<F> {
    Array2::from_shape_fn((positions.len(), d), |(r, c)| {
        let pos = positions[r] as f64;
        let rate = 1.0 / 10000f64.powf((2 * (c / 2)) as f64 / d as f64);
        cst(if c % 2 == 0 { (pos * rate).sin() } else { (pos * rate).cos() })
    })
}

/// Inverted dropout with its own stream; rate 0 is the identity.
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Dropout { rate, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn off() -> Self {
        Dropout::new(0.0, 0)
    }

    pub fn apply<F: Real>(&mut self, g: &mut Graph<F>, x: Var) -> Var {
        if self.rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let scale = cst::<F>(1.0 / keep);
        let mask = Array2::from_shape_fn(g.shape(x), |_| if self.rng.random::<f64>() < keep { scale } else { F::zero() });
        let m = g.input(mask, false);
        g.mul(x, m)
    }
}

/// Breakpoint-side tensors of one story inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct StoryVars {
    /// n×d token states.
    pub states: Var,
    /// m×d raw `[B]` hidden states.
    pub raw: Var,
    /// m×d unit-norm initial embeddings.
    pub initial: Var,
    /// m×d masked breakpoint self-attention stream.
    pub contextual: Var,
    /// m×2d concatenation of the two.
    pub final_: Var,
}

#[derive(Clone, Debug)]
pub struct Model<F: Real> {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamSet<F>,
    pub(crate) ids: ParamIds,
    /// Free-form provenance stored in checkpoints (JSON by convention).
    pub meta: String,
}

impl<F: Real> Model<F> {
    pub fn new(cfg: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (params, ids) = build_params(&cfg, vocab.len(), seed);
        Ok(Model { cfg, vocab, params, ids, meta: String::new() })
    }

    /// Same architecture over a different element type.
    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            cfg: self.cfg.clone(),
            vocab: self.vocab.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
            meta: self.meta.clone(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn token_ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        self.vocab.encode(tokens).into_iter().map(|i| i as usize).collect()
    }

    // -- graph building blocks --------------------------------------------

    fn linear(&self, g: &mut Graph<F>, x: Var, l: Linear) -> Var {
        let (w, b) = (g.param(l.w), g.param(l.b));
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    fn norm(&self, g: &mut Graph<F>, x: Var, n: Norm) -> Var {
        let (gain, bias) = (g.param(n.g), g.param(n.b));
        g.layer_norm(x, gain, bias)
    }

    fn attention(&self, g: &mut Graph<F>, a: &Attn, xq: Var, xkv: Var, mask: &Mask, heads: usize) -> Var {
        let d = g.shape(xq).1;
        let dh = d / heads;
        let q = self.linear(g, xq, a.q);
        let q = g.scale(q, cst::<F>(1.0 / (dh as f64).sqrt()));
        let k = self.linear(g, xkv, a.k);
        let v = self.linear(g, xkv, a.v);
        let out = if heads == 1 {
            let s = g.matmul_nt(q, k);
            let p = g.softmax(s, mask.clone());
            g.matmul(p, v)
        } else {
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let (lo, hi) = (h * dh, (h + 1) * dh);
                let qh = g.slice_cols(q, lo, hi);
                let kh = g.slice_cols(k, lo, hi);
                let vh = g.slice_cols(v, lo, hi);
                let s = g.matmul_nt(qh, kh);
                let p = g.softmax(s, mask.clone());
                outs.push(g.matmul(p, vh));
            }
            g.concat_cols(&outs)
        };
        self.linear(g, out, a.o)
    }

    fn ffn(&self, g: &mut Graph<F>, x: Var, f: &Ffn) -> Var {
        let h = self.linear(g, x, f.up);
        let h = g.gelu(h);
        self.linear(g, h, f.down)
    }

    fn block(&self, g: &mut Graph<F>, x: Var, b: &EncBlock, mask: &Mask, heads: usize, drop: &mut Dropout) -> Var {
        let h = self.norm(g, x, b.ln1);
        let h = self.attention(g, &b.attn, h, h, mask, heads);
        let h = drop.apply(g, h);
        let x = g.add(x, h);
        let h = self.norm(g, x, b.ln2);
        let h = self.ffn(g, h, &b.ffn);
        let h = drop.apply(g, h);
        g.add(x, h)
    }

    /// Shared encoder over token ids at the given positions.
    pub fn encode_ids(&self, g: &mut Graph<F>, ids: &[usize], positions: &[usize], mask: Mask, drop: &mut Dropout) -> Var {
        let table = g.param(self.ids.tok_emb);
        let x = g.embed(table, ids);
        let pe = g.input(sinusoidal(positions, self.cfg.d_model), false);
        let mut x = g.add(x, pe);
        x = drop.apply(g, x);
        for b in &self.ids.enc {
            x = self.block(g, x, b, &mask, self.cfg.n_heads, drop);
        }
        self.norm(g, x, self.ids.enc_ln)
    }

    /// Bidirectional encoding of a whole story.
    pub fn story_states(&self, g: &mut Graph<F>, tokens: &[String], drop: &mut Dropout) -> Result<Var, ModelError> {
        if tokens.len() > self.cfg.max_len {
            return Err(ModelError::Overlength { len: tokens.len(), max: self.cfg.max_len });
        }
        if tokens.is_empty() {
            return Err(ModelError::DimensionMismatch("empty story".into()));
        }
        let ids = self.token_ids(tokens);
        let pos: Vec<usize> = (0..ids.len()).collect();
        Ok(self.encode_ids(g, &ids, &pos, Mask::Full, drop))
    }

    /// Projects the `[B]` states at `positions` and normalizes them.
    pub fn pool(&self, g: &mut Graph<F>, states: Var, positions: &[usize]) -> Result<(Var, Var), ModelError> {
        let n = g.shape(states).0;
        if let Some(&p) = positions.iter().find(|&&p| p >= n) {
            return Err(ModelError::PositionOutOfRange { position: p, len: n });
        }
        let raw = g.select_rows(states, positions);
        let projected = self.linear(g, raw, self.ids.proj);
        let zero = |v: &Array2<F>| v.outer_iter().position(|r| r.iter().all(|x| *x == F::zero()));
        if let Some(j) = zero(g.value(raw)).or_else(|| zero(g.value(projected))) {
            return Err(ModelError::ZeroNorm(j + 1));
        }
        Ok((raw, g.l2_normalize(projected)))
    }

    /// Single-head, strictly causal transformer block over the breakpoint
    /// sequence; zeros when the stream is ablated.
    pub fn breakpoint_stream(&self, g: &mut Graph<F>, initial: Var, drop: &mut Dropout) -> Result<Var, ModelError> {
        let m = g.shape(initial).0;
        if m > self.cfg.max_breakpoints {
            return Err(ModelError::TooManyBreakpoints { count: m, max: self.cfg.max_breakpoints });
        }
        if !self.cfg.brk_self_attn {
            return Ok(g.input(Array2::zeros((m, self.cfg.d_model)), false));
        }
        let table = g.param(self.ids.brk_pos);
        let ordinals: Vec<usize> = (0..m).collect();
        let pos = g.embed(table, &ordinals);
        let x = g.add(initial, pos);
        let brk = self.ids.brk;
        Ok(self.block(g, x, &brk, &Mask::Causal, 1, drop))
    }

    pub fn story_vars(&self, g: &mut Graph<F>, tokens: &[String], drop: &mut Dropout) -> Result<StoryVars, ModelError> {
        let states = self.story_states(g, tokens, drop)?;
        let positions = crate::corpus::marker_positions(tokens);
        if positions.is_empty() {
            let d = self.cfg.d_model;
            let empty = g.input(Array2::zeros((0, d)), false);
            let final_ = g.input(Array2::zeros((0, 2 * d)), false);
            return Ok(StoryVars { states, raw: empty, initial: empty, contextual: empty, final_ });
        }
        let (raw, initial) = self.pool(g, states, &positions)?;
        let contextual = self.breakpoint_stream(g, initial, drop)?;
        let final_ = g.concat_cols(&[initial, contextual]);
        Ok(StoryVars { states, raw, initial, contextual, final_ })
    }

    /// Encodes `[PROP]`-prefixed propositions packed into block-diagonal
    /// chunks; returns the P×d unit-norm matrix in input order.
    pub fn prop_vectors(&self, g: &mut Graph<F>, props: &[Vec<String>], drop: &mut Dropout) -> Result<Var, ModelError> {
        if props.is_empty() {
            return Err(ModelError::EmptyProposition);
        }
        let mut chunks: Vec<Vec<usize>> = vec![Vec::new()];
        let mut used = 0;
        for (i, p) in props.iter().enumerate() {
            if p.is_empty() {
                return Err(ModelError::EmptyProposition);
            }
            let len = p.len() + 1;
            if len > self.cfg.max_len {
                return Err(ModelError::Overlength { len, max: self.cfg.max_len });
            }
            if used + len > PACK_LEN.max(len) && !chunks.last().unwrap().is_empty() {
                chunks.push(Vec::new());
                used = 0;
            }
            chunks.last_mut().unwrap().push(i);
            used += len;
        }
        let mut pooled = Vec::with_capacity(chunks.len());
        for chunk in &chunks {
            let (mut ids, mut pos, mut seg, mut starts) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (s, &i) in chunk.iter().enumerate() {
                starts.push(ids.len());
                ids.push(PROP_ID as usize);
                ids.extend(self.token_ids(&props[i]));
                pos.extend(0..=props[i].len());
                seg.resize(ids.len(), s as u32);
            }
            let h = self.encode_ids(g, &ids, &pos, Mask::Segments(Arc::new(seg)), drop);
            let v = match self.cfg.prop_pooling {
                PropPooling::Prefix => g.select_rows(h, &starts),
                PropPooling::Mean => {
                    let mut avg = Array2::zeros((chunk.len(), ids.len()));
                    for (s, &i) in chunk.iter().enumerate() {
                        let k = cst::<F>(1.0 / props[i].len() as f64);
                        for t in 1..=props[i].len() {
                            avg[[s, starts[s] + t]] = k;
                        }
                    }
                    let a = g.input(avg, false);
                    g.matmul(a, h)
                }
            };
            pooled.push(v);
        }
        let all = if pooled.len() == 1 { pooled[0] } else { g.concat_rows(&pooled) };
        let projected = self.linear(g, all, self.ids.proj);
        if let Some(r) = g.value(projected).outer_iter().position(|r| r.iter().all(|x| *x == F::zero())) {
            return Err(ModelError::ZeroNorm(r + 1));
        }
        Ok(g.l2_normalize(projected))
    }

    /// Bilinear logits for `queries` of (breakpoint row, proposition row):
    /// k×3 with columns (E, C, U).
    pub fn score(&self, g: &mut Graph<F>, final_: Var, props: Var, queries: &[(usize, usize)]) -> Var {
        let mut cols = Vec::with_capacity(3);
        for y in 0..3 {
            let m = g.param(self.ids.bilinear[y]);
            let t = g.matmul(final_, m);
            let s = g.matmul_nt(t, props);
            cols.push(g.gather(s, queries));
        }
        let logits = g.concat_cols(&cols);
        let a = g.param(self.ids.bilinear_bias);
        g.add_row(logits, a)
    }

    /// Multi-pass features for one marked encoding against k proposition
    /// rows: k×3 logits.
    pub fn multipass_logits(&self, g: &mut Graph<F>, states: Var, props: Var, rows: &[usize]) -> Var {
        let u = g.mean_rows(states);
        let u = g.select_rows(u, &vec![0; rows.len()]);
        let v = g.select_rows(props, rows);
        let diff = g.sub(u, v);
        let diff = g.abs(diff);
        let prod = g.mul(u, v);
        let feats = g.concat_cols(&[u, v, diff, prod]);
        let h = self.linear(g, feats, self.ids.mp_hidden);
        let h = g.gelu(h);
        self.linear(g, h, self.ids.mp_out)
    }

    pub fn prop_only_logits(&self, g: &mut Graph<F>, props: Var) -> Var {
        let h = self.linear(g, props, self.ids.po_hidden);
        let h = g.gelu(h);
        self.linear(g, h, self.ids.po_out)
    }

    /// Teacher-forced decoder logits for `input` (starting with `[BOS]`)
    /// cross-attending to `memory`.
    pub fn decoder_logits(&self, g: &mut Graph<F>, memory: Var, input: &[usize], drop: &mut Dropout) -> Var {
        let table = g.param(self.ids.tok_emb);
        let x = g.embed(table, input);
        let pos: Vec<usize> = (0..input.len()).collect();
        let pe = g.input(sinusoidal(&pos, self.cfg.d_model), false);
        let mut x = g.add(x, pe);
        let heads = self.cfg.n_heads;
        for b in &self.ids.dec {
            let h = self.norm(g, x, b.ln1);
            let h = self.attention(g, &b.self_attn, h, h, &Mask::Causal, heads);
            let h = drop.apply(g, h);
            x = g.add(x, h);
            let h = self.norm(g, x, b.ln2);
            let h = self.attention(g, &b.cross, h, memory, &Mask::Full, heads);
            let h = drop.apply(g, h);
            x = g.add(x, h);
            let h = self.norm(g, x, b.ln3);
            let h = self.ffn(g, h, &b.ffn);
            let h = drop.apply(g, h);
            x = g.add(x, h);
        }
        let x = self.norm(g, x, self.ids.dec_ln);
        self.linear(g, x, self.ids.dec_out)
    }

    /// Decoder input and per-position targets for `prompt` followed by
    /// `target` and `[EOS]`; prompt positions carry no target.
    pub fn teacher_forcing(&self, prompt: &[String], target: &[String]) -> (Vec<usize>, Vec<Option<usize>>) {
        let mut input = vec![BOS_ID as usize];
        input.extend(self.token_ids(prompt));
        let answer: Vec<usize> =
            self.token_ids(target).into_iter().chain(std::iter::once(EOS_ID as usize)).collect();
        let mut targets = vec![None; input.len() - 1];
        targets.push(Some(answer[0]));
        for w in answer.windows(2) {
            input.push(w[0]);
            targets.push(Some(w[1]));
        }
        (input, targets)
    }

    // -- inference entry points ---------------------------------------------

    pub fn encode_story(&self, tokens: &[String]) -> Result<Array2<F>, ModelError> {
        let mut g = Graph::new(&self.params);
        let v = self.story_states(&mut g, tokens, &mut Dropout::off())?;
        Ok(g.value(v).clone())
    }

    pub fn pool_breakpoints(&self, states: &Array2<F>, positions: &[usize]) -> Result<Array2<F>, ModelError> {
        let mut g = Graph::new(&self.params);
        let s = g.input(states.clone(), false);
        let (_, v) = self.pool(&mut g, s, positions)?;
        Ok(g.value(v).clone())
    }

    pub fn self_attend_breakpoints(&self, initials: &Array2<F>) -> Result<Array2<F>, ModelError> {
        let mut g = Graph::new(&self.params);
        let x = g.input(initials.clone(), false);
        let v = self.breakpoint_stream(&mut g, x, &mut Dropout::off())?;
        Ok(g.value(v).clone())
    }

    pub fn encode_proposition(&self, tokens: &[String]) -> Result<Array1<F>, ModelError> {
        Ok(self.encode_propositions(&[tokens.to_vec()])?.row(0).to_owned())
    }

    pub fn encode_propositions(&self, props: &[Vec<String>]) -> Result<Array2<F>, ModelError> {
        let mut g = Graph::new(&self.params);
        let v = self.prop_vectors(&mut g, props, &mut Dropout::off())?;
        Ok(g.value(v).clone())
    }

    /// Logits of one (final breakpoint embedding, proposition vector) pair.
    pub fn score_proposition(&self, final_: ArrayView1<F>, c: ArrayView1<F>) -> Result<[F; 3], ModelError> {
        let d = self.cfg.d_model;
        if final_.len() != 2 * d || c.len() != d {
            return Err(ModelError::DimensionMismatch(format!(
                "expected 2d={} and d={d}, got {} and {}",
                2 * d,
                final_.len(),
                c.len()
            )));
        }
        let a = self.params.get(self.ids.bilinear_bias);
        let mut out = [F::zero(); 3];
        for (y, o) in out.iter_mut().enumerate() {
            let m = self.params.get(self.ids.bilinear[y]);
            *o = final_.dot(&m.dot(&c)) + a[[0, y]];
        }
        Ok(out)
    }

    /// Unique proposition texts of `queries` and each query's row.
    fn dedupe<'q>(queries: &'q [(usize, Vec<String>)]) -> (Vec<Vec<String>>, Vec<usize>, usize) {
        let mut rows: HashMap<&'q [String], usize> = HashMap::new();
        let mut uniq = Vec::new();
        let mut idx = Vec::with_capacity(queries.len());
        for (_, p) in queries {
            let r = *rows.entry(p.as_slice()).or_insert_with(|| {
                uniq.push(p.clone());
                uniq.len() - 1
            });
            idx.push(r);
        }
        let hits = queries.len() - uniq.len();
        (uniq, idx, hits)
    }

    fn check_queries(ex: &Example, queries: &[(usize, Vec<String>)]) -> Result<(), ModelError> {
        let m = ex.breakpoints.len();
        match queries.iter().find(|(j, _)| *j == 0 || *j > m) {
            Some((j, _)) => Err(ModelError::BadQuery { index: *j, count: m }),
            None => Ok(()),
        }
    }

    /// Single read: one story encode, one encode per distinct proposition.
    /// Breakpoint indices are 1-based.
    pub fn predict_beliefs(&self, ex: &Example, queries: &[(usize, Vec<String>)]) -> Result<Predictions, ModelError> {
        Ok(self.predict_with_states(ex, queries)?.0)
    }

    /// [`Self::predict_beliefs`] that also hands back the story's token
    /// states from the same encoder call.
    pub fn predict_with_states(
        &self,
        ex: &Example,
        queries: &[(usize, Vec<String>)],
    ) -> Result<(Predictions, Array2<F>), ModelError> {
        Self::check_queries(ex, queries)?;
        let mut g = Graph::new(&self.params);
        let drop = &mut Dropout::off();
        let sv = self.story_vars(&mut g, &ex.story_tokens, drop)?;
        let mut stats = CallStats { story_encodes: 1, ..Default::default() };
        let mut beliefs = Vec::new();
        if !queries.is_empty() {
            let (uniq, rows, hits) = Self::dedupe(queries);
            let props = self.prop_vectors(&mut g, &uniq, drop)?;
            let pairs: Vec<(usize, usize)> = queries.iter().zip(&rows).map(|((j, _), r)| (j - 1, *r)).collect();
            let logits = self.score(&mut g, sv.final_, props, &pairs);
            beliefs = to_beliefs(g.value(logits));
            stats.prop_encodes = uniq.len();
            stats.cache_hits = hits;
        }
        Ok((Predictions { beliefs, stats }, g.value(sv.states).clone()))
    }

    /// Re-encodes the story once per queried breakpoint with that marker
    /// replaced by `[MARK]`.
    pub fn multipass_predict(&self, ex: &Example, queries: &[(usize, Vec<String>)]) -> Result<Predictions, ModelError> {
        Self::check_queries(ex, queries)?;
        let mut out = vec![BeliefDistribution::default(); queries.len()];
        let mut stats = CallStats::default();
        if queries.is_empty() {
            return Ok(Predictions { beliefs: out, stats });
        }
        let mut g = Graph::new(&self.params);
        let drop = &mut Dropout::off();
        let (uniq, rows, hits) = Self::dedupe(queries);
        let props = self.prop_vectors(&mut g, &uniq, drop)?;
        stats.prop_encodes = uniq.len();
        stats.cache_hits = hits;
        let mut by_bp: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (q, (j, _)) in queries.iter().enumerate() {
            by_bp.entry(*j).or_default().push(q);
        }
        for (j, qs) in by_bp {
            let states = self.marked_states(&mut g, ex, j, drop)?;
            stats.story_encodes += 1;
            let r: Vec<usize> = qs.iter().map(|q| rows[*q]).collect();
            let logits = self.multipass_logits(&mut g, states, props, &r);
            for (q, b) in qs.iter().zip(to_beliefs(g.value(logits))) {
                out[*q] = b;
            }
        }
        Ok(Predictions { beliefs: out, stats })
    }

    /// Story states with breakpoint `j` (1-based) marked.
    pub fn marked_states(&self, g: &mut Graph<F>, ex: &Example, j: usize, drop: &mut Dropout) -> Result<Var, ModelError> {
        let tokens = marked_story(ex, j);
        if tokens.len() > self.cfg.max_len {
            return Err(ModelError::Overlength { len: tokens.len(), max: self.cfg.max_len });
        }
        let mut ids = self.token_ids(&tokens);
        ids[ex.breakpoints[j - 1].token_position] = MARK_ID as usize;
        let pos: Vec<usize> = (0..ids.len()).collect();
        Ok(self.encode_ids(g, &ids, &pos, Mask::Full, drop))
    }

    pub fn predict(&self, ex: &Example, queries: &[(usize, Vec<String>)], mode: Mode) -> Result<Predictions, ModelError> {
        match mode {
            Mode::SingleRead => self.predict_beliefs(ex, queries),
            Mode::MultiPass => self.multipass_predict(ex, queries),
            Mode::PropOnly => {
                Self::check_queries(ex, queries)?;
                let (uniq, rows, hits) = Self::dedupe(queries);
                let mut g = Graph::new(&self.params);
                if uniq.is_empty() {
                    return Ok(Predictions { beliefs: vec![], stats: CallStats::default() });
                }
                let props = self.prop_vectors(&mut g, &uniq, &mut Dropout::off())?;
                let logits = self.prop_only_logits(&mut g, props);
                let all = to_beliefs(g.value(logits));
                Ok(Predictions {
                    beliefs: rows.iter().map(|r| all[*r]).collect(),
                    stats: CallStats { story_encodes: 0, prop_encodes: uniq.len(), cache_hits: hits },
                })
            }
        }
    }

    pub fn prop_only_predict(&self, tokens: &[String]) -> Result<BeliefDistribution, ModelError> {
        let mut g = Graph::new(&self.params);
        let v = self.prop_vectors(&mut g, &[tokens.to_vec()], &mut Dropout::off())?;
        let logits = self.prop_only_logits(&mut g, v);
        Ok(to_beliefs(g.value(logits))[0])
    }

    /// Greedy decoding until `[EOS]` or the length limit.
    pub fn decode_text(&self, conditioning: &Conditioning<F>, prompt: &[String]) -> Result<Decoded, ModelError> {
        let memory = match conditioning {
            Conditioning::Tokens(t) if t.nrows() > 0 => t.clone(),
            Conditioning::Breakpoints(v) if !v.is_empty() && v.len() <= 2 => {
                let mut mean = Array2::zeros((1, self.cfg.d_model));
                for b in v {
                    if b.len() != self.cfg.d_model {
                        return Err(ModelError::DimensionMismatch("breakpoint vector width".into()));
                    }
                    mean.row_mut(0).zip_mut_with(b, |m, &x| *m += x);
                }
                mean.mapv_inplace(|x: F| x / F::from_usize(v.len()).unwrap());
                mean
            }
            _ => return Err(ModelError::EmptyConditioning),
        };
        let mut input = vec![BOS_ID as usize];
        input.extend(self.token_ids(prompt));
        let mut out = Vec::new();
        for _ in 0..self.cfg.max_decode_len {
            let mut g = Graph::new(&self.params);
            let mem = g.input(memory.clone(), false);
            let logits = self.decoder_logits(&mut g, mem, &input, &mut Dropout::off());
            let last = g.value(logits).row(input.len() - 1).to_owned();
            let mut best = 0;
            for (i, v) in last.iter().enumerate() {
                if *v > last[best] {
                    best = i;
                }
            }
            if best == EOS_ID as usize {
                return Ok(Decoded { tokens: out, truncated: false });
            }
            out.push(self.vocab.token(best as u32).to_string());
            input.push(best);
        }
        Ok(Decoded { tokens: out, truncated: true })
    }

    /// QA answer for `question` over the story's token states.
    pub fn answer(&self, ex: &Example, question: &[String]) -> Result<Decoded, ModelError> {
        let states = self.encode_story(&ex.story_tokens)?;
        self.decode_text(&Conditioning::Tokens(states), question)
    }
}

/// Proposition texts are stored pre-tokenized and space-separated.
pub fn prop_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Every annotated (breakpoint, proposition) query of an example.
pub fn annotated_queries(ex: &Example) -> Vec<(usize, Vec<String>)> {
    ex.breakpoints
        .iter()
        .flat_map(|b| b.propositions.iter().map(move |p| (b.index, prop_tokens(&p.text))))
        .collect()
}

/// Story tokens with breakpoint `j` (1-based) replaced by `[MARK]`.
pub fn marked_story(ex: &Example, j: usize) -> Vec<String> {
    let mut t = ex.story_tokens.clone();
    t[ex.breakpoints[j - 1].token_position] = crate::corpus::MARK.to_string();
    t
}

fn to_beliefs<F: Real>(logits: &Array2<F>) -> Vec<BeliefDistribution> {
    logits
        .outer_iter()
        .map(|r| BeliefDistribution::from_logits([0, 1, 2].map(|i| r[i].to_f64().unwrap())))
        .collect()
}

#[cfg(test)]
mod tests;
