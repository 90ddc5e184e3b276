//! Multi-task training: proposition classification, question answering and
//! auxiliary generation, optimized with Adam on per-story-pair gradients.

mod gradcheck;

pub use gradcheck::{grad_check, GradCheckReport, TensorCheck};

use std::collections::HashMap;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{cst, Grads, Graph, ParamSet, Real, Var, PROB_FLOOR};
use crate::corpus::{Dataset, Example, TruthLabel, ABSTRACT_PROMPT, EVENT_PROMPT};
use crate::eval;
use crate::exec::Exec;
use crate::model::{prop_tokens, BeliefDistribution, Dropout, Mode, Model, ModelError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite { epoch: usize, step: usize, detail: String },
    #[error("empty training set")]
    EmptyData,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_prop: f64,
    pub lambda_qa: f64,
    pub lambda_gen: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub warmup_steps: usize,
    /// Epochs trained without the proposition loss when QA is on.
    pub qa_warmup_epochs: usize,
    pub weight_decay: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub mode: Mode,
    pub event_gen: bool,
    pub abstraction: bool,
    /// Stop after this many seconds of wall-clock, finishing the epoch's
    /// dev evaluation.
    pub time_budget_s: Option<f64>,
    /// Dev stories evaluated per epoch; all when unset.
    pub dev_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_prop: 1.0,
            lambda_qa: 1.0,
            lambda_gen: 0.1,
            learning_rate: 3e-4,
            batch_size: 8,
            max_epochs: 30,
            warmup_steps: 500,
            qa_warmup_epochs: 5,
            weight_decay: 0.001,
            early_stop_patience: 5,
            seed: 0,
            mode: Mode::SingleRead,
            event_gen: true,
            abstraction: true,
            time_budget_s: None,
            dev_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        let ws = [self.lambda_prop, self.lambda_qa, self.lambda_gen];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("loss weights must be finite and non-negative");
        }
        if ws.iter().all(|w| *w == 0.0) {
            return bad("at least one loss weight must be positive");
        }
        if self.lambda_gen > 0.0 && !self.event_gen && !self.abstraction && ws[..2].iter().all(|w| *w == 0.0) {
            return bad("generation is the only weighted loss but both generation tasks are off");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive");
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return bad("learning_rate must be positive and weight_decay non-negative");
        }
        Ok(())
    }

    /// Loss weights in force during `epoch` (0-based).
    pub fn weights(&self, epoch: usize) -> Weights {
        let warm = self.lambda_qa > 0.0 && epoch < self.qa_warmup_epochs;
        Weights {
            prop: if warm { 0.0 } else { self.lambda_prop },
            qa: self.lambda_qa,
            gen: if self.event_gen || self.abstraction { self.lambda_gen } else { 0.0 },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub prop: f64,
    pub qa: f64,
    pub gen: f64,
}

/// Summed loss components and the counts behind them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub prop: f64,
    pub qa: f64,
    pub gen: f64,
    pub total: f64,
    pub n_prop: usize,
    pub n_qa_tokens: usize,
    pub n_gen_tokens: usize,
    /// Gold probabilities clamped at the floor.
    pub clamped: usize,
    pub story_encodes: usize,
    pub prop_encodes: usize,
}

impl LossBreakdown {
    pub fn prop_mean(&self) -> f64 {
        if self.n_prop == 0 {
            0.0
        } else {
            self.prop / self.n_prop as f64
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.prop, self.qa, self.gen, self.total].iter().all(|x| x.is_finite())
    }
}

impl std::ops::AddAssign for LossBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.prop += o.prop;
        self.qa += o.qa;
        self.gen += o.gen;
        self.total += o.total;
        self.n_prop += o.n_prop;
        self.n_qa_tokens += o.n_qa_tokens;
        self.n_gen_tokens += o.n_gen_tokens;
        self.clamped += o.clamped;
        self.story_encodes += o.story_encodes;
        self.prop_encodes += o.prop_encodes;
    }
}

/// Sum of negative log gold probabilities, floored at 1e-12.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PropLoss {
    pub sum: f64,
    pub mean: f64,
    pub clamped: usize,
}

pub fn prop_loss(dists: &[BeliefDistribution], gold: &[TruthLabel]) -> Result<PropLoss, TrainError> {
    if dists.len() != gold.len() {
        return Err(TrainError::InvalidConfig(format!("{} distributions for {} labels", dists.len(), gold.len())));
    }
    let mut sum = 0.0;
    let mut clamped = 0;
    for (d, y) in dists.iter().zip(gold) {
        let p = d.prob(*y);
        if p < PROB_FLOOR {
            clamped += 1;
        }
        sum -= p.max(PROB_FLOOR).ln();
    }
    let mean = if gold.is_empty() { 0.0 } else { sum / gold.len() as f64 };
    Ok(PropLoss { sum, mean, clamped })
}

/// Token cross-entropy summed over positions with a target.
pub fn sequence_loss(logits: &Array2<f64>, targets: &[Option<usize>]) -> f64 {
    let mut sum = 0.0;
    for (row, t) in logits.outer_iter().zip(targets) {
        let Some(t) = t else { continue };
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let p = (row[*t] - max).exp() / z;
        sum -= p.max(PROB_FLOOR).ln();
    }
    sum
}

pub fn qa_loss(logits: &Array2<f64>, targets: &[Option<usize>]) -> f64 {
    sequence_loss(logits, targets)
}

pub fn gen_loss(logits: &Array2<f64>, targets: &[Option<usize>]) -> f64 {
    sequence_loss(logits, targets)
}

/// `λ_prop·prop + λ_qa·qa + λ_gen·gen`.
pub fn weighted_total(w: Weights, prop: f64, qa: f64, gen: f64) -> f64 {
    let mut t = 0.0;
    for (l, x) in [(w.prop, prop), (w.qa, qa), (w.gen, gen)] {
        if l != 0.0 {
            t += l * x;
        }
    }
    t
}

/// Auxiliary generation targets for one batch, by index into the batch.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GenTargets {
    /// (story, breakpoint) whose raw state regenerates the event that
    /// ends at that breakpoint.
    pub events: Vec<(usize, usize)>,
    /// (story a, breakpoint, story b, breakpoint) with identical abstracted
    /// events; the mean of both raw states generates the abstraction.
    pub abstractions: Vec<(usize, usize, usize, usize)>,
}

/// One event target per story and one abstraction target per consecutive
/// story pair whose events share an abstraction.
pub fn sample_gen_targets(batch: &[&Example], event_gen: bool, abstraction: bool, rng: &mut impl Rng) -> GenTargets {
    let mut out = GenTargets::default();
    if event_gen {
        for (i, ex) in batch.iter().enumerate() {
            if !ex.breakpoints.is_empty() {
                out.events.push((i, rng.random_range(1..=ex.breakpoints.len())));
            }
        }
    }
    if abstraction {
        for a in (0..batch.len().saturating_sub(1)).step_by(2) {
            let (ea, eb) = (batch[a], batch[a + 1]);
            if !ea.has_entity_types() || !eb.has_entity_types() {
                continue;
            }
            let mut order: Vec<usize> = (1..=ea.breakpoints.len()).collect();
            order.shuffle(rng);
            for ja in order {
                let target = ea.abstract_tokens(ea.event_tokens(ja));
                let matches: Vec<usize> = (1..=eb.breakpoints.len())
                    .filter(|&jb| eb.abstract_tokens(eb.event_tokens(jb)) == target)
                    .collect();
                if !matches.is_empty() {
                    out.abstractions.push((a, ja, a + 1, matches[rng.random_range(0..matches.len())]));
                    break;
                }
            }
        }
    }
    out
}

/// Distinct proposition texts of a batch and their rows.
pub fn batch_props(batch: &[&Example]) -> (Vec<Vec<String>>, HashMap<String, usize>) {
    let mut rows = HashMap::new();
    let mut uniq = Vec::new();
    for ex in batch {
        for bp in &ex.breakpoints {
            for p in &bp.propositions {
                rows.entry(p.text.clone()).or_insert_with(|| {
                    uniq.push(prop_tokens(&p.text));
                    uniq.len() - 1
                });
            }
        }
    }
    (uniq, rows)
}

fn decoder_loss<F: Real>(
    model: &Model<F>,
    g: &mut Graph<F>,
    memory: Var,
    prompt: &[String],
    target: &[String],
    drop: &mut Dropout,
) -> (Var, usize) {
    let (input, targets) = model.teacher_forcing(prompt, target);
    let logits = model.decoder_logits(g, memory, &input, drop);
    let n = targets.iter().filter(|t| t.is_some()).count();
    (g.cross_entropy(logits, &targets), n)
}

/// Builds the weighted loss of `stories` (a work unit) into `g`, reading
/// proposition vectors from `props` rows.
#[allow(clippy::too_many_arguments)]
pub fn unit_loss<F: Real>(
    model: &Model<F>,
    g: &mut Graph<F>,
    stories: &[&Example],
    props: Option<(Var, &HashMap<String, usize>)>,
    gen: &GenTargets,
    w: Weights,
    mode: Mode,
    drop: &mut Dropout,
) -> Result<(Option<Var>, LossBreakdown), ModelError> {
    let mut bd = LossBreakdown::default();
    let need_story = (w.prop > 0.0 && mode == Mode::SingleRead) || w.qa > 0.0 || w.gen > 0.0;
    let clamped_before = g.clamped;
    let mut vars = Vec::with_capacity(stories.len());
    for ex in stories {
        vars.push(if need_story {
            bd.story_encodes += 1;
            Some(model.story_vars(g, &ex.story_tokens, drop)?)
        } else {
            None
        });
    }
    let mut parts: Vec<(f64, Var)> = Vec::new();

    if w.prop > 0.0 {
        let (pv, rows) = props.expect("proposition vectors are required when the proposition loss is on");
        let mut terms = Vec::new();
        for (s, ex) in stories.iter().enumerate() {
            let mut pairs = Vec::new();
            let mut gold = Vec::new();
            for bp in &ex.breakpoints {
                for p in &bp.propositions {
                    pairs.push((bp.index - 1, rows[&p.text]));
                    gold.push(Some(p.label.index()));
                }
            }
            if pairs.is_empty() {
                continue;
            }
            bd.n_prop += pairs.len();
            let logits = match mode {
                Mode::SingleRead => model.score(g, vars[s].unwrap().final_, pv, &pairs),
                Mode::PropOnly => {
                    let r: Vec<usize> = pairs.iter().map(|p| p.1).collect();
                    let sel = g.select_rows(pv, &r);
                    model.prop_only_logits(g, sel)
                }
                Mode::MultiPass => {
                    let mut per_bp = Vec::new();
                    let mut order = Vec::new();
                    for bp in &ex.breakpoints {
                        if bp.propositions.is_empty() {
                            continue;
                        }
                        let states = model.marked_states(g, ex, bp.index, drop)?;
                        bd.story_encodes += 1;
                        let r: Vec<usize> = bp.propositions.iter().map(|p| rows[&p.text]).collect();
                        per_bp.push(model.multipass_logits(g, states, pv, &r));
                        order.extend(bp.propositions.iter().map(|p| Some(p.label.index())));
                    }
                    gold = order;
                    g.concat_rows(&per_bp)
                }
            };
            terms.push(g.cross_entropy(logits, &gold));
        }
        if let Some(t) = sum_vars(g, &terms) {
            bd.prop = g.scalar(t).to_f64().unwrap();
            parts.push((w.prop, t));
        }
    }

    if w.qa > 0.0 {
        let mut terms = Vec::new();
        for (s, ex) in stories.iter().enumerate() {
            let states = vars[s].unwrap().states;
            for qa in &ex.qa {
                let (l, n) = decoder_loss(model, g, states, &prop_tokens(&qa.question), &prop_tokens(&qa.answer), drop);
                bd.n_qa_tokens += n;
                terms.push(l);
            }
        }
        if let Some(t) = sum_vars(g, &terms) {
            bd.qa = g.scalar(t).to_f64().unwrap();
            parts.push((w.qa, t));
        }
    }

    if w.gen > 0.0 {
        let mut terms = Vec::new();
        let event_prompt = vec![EVENT_PROMPT.to_string()];
        for &(s, j) in &gen.events {
            let mem = g.select_rows(vars[s].unwrap().raw, &[j - 1]);
            let (l, n) = decoder_loss(model, g, mem, &event_prompt, stories[s].event_tokens(j), drop);
            bd.n_gen_tokens += n;
            terms.push(l);
        }
        let abstract_prompt = vec![ABSTRACT_PROMPT.to_string()];
        for &(a, ja, b, jb) in &gen.abstractions {
            let ra = g.select_rows(vars[a].unwrap().raw, &[ja - 1]);
            let rb = g.select_rows(vars[b].unwrap().raw, &[jb - 1]);
            let both = g.concat_rows(&[ra, rb]);
            let mem = g.mean_rows(both);
            let target = stories[a].abstract_tokens(stories[a].event_tokens(ja));
            let (l, n) = decoder_loss(model, g, mem, &abstract_prompt, &target, drop);
            bd.n_gen_tokens += n;
            terms.push(l);
        }
        if let Some(t) = sum_vars(g, &terms) {
            bd.gen = g.scalar(t).to_f64().unwrap();
            parts.push((w.gen, t));
        }
    }

    bd.clamped = g.clamped - clamped_before;
    bd.total = weighted_total(w, bd.prop, bd.qa, bd.gen);
    let mut total = None;
    for (l, v) in parts {
        let s = g.scale(v, cst(l));
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s),
        });
    }
    Ok((total, bd))
}

fn sum_vars<F: Real>(g: &mut Graph<F>, vs: &[Var]) -> Option<Var> {
    let mut it = vs.iter().copied();
    let first = it.next()?;
    Some(it.fold(first, |a, b| g.add(a, b)))
}

/// Seed of an independent stream for (epoch, step, slot).
fn stream_seed(seed: u64, epoch: usize, step: usize, slot: usize) -> u64 {
    let mut x = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [epoch as u64, step as u64, slot as u64] {
        x = (x ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x ^= x >> 31;
    }
    x
}

/// Loss and parameter gradients of one batch. Proposition vectors are
/// computed once for the batch; each story pair is differentiated on its
/// own with those vectors as inputs, and their input gradients are pushed
/// back through the shared proposition graph.
pub fn batch_gradients<F: Real>(
    model: &Model<F>,
    batch: &[&Example],
    gen: &GenTargets,
    w: Weights,
    mode: Mode,
    dropout: Option<(f64, u64)>,
    exec: Exec,
) -> Result<(LossBreakdown, Grads<F>), ModelError> {
    let drop_for = |slot: usize| match dropout {
        Some((rate, seed)) => Dropout::new(rate, stream_seed(seed, 0, 0, slot)),
        None => Dropout::off(),
    };
    let n_params = model.params.len();
    let (uniq, rows) = if w.prop > 0.0 { batch_props(batch) } else { Default::default() };
    let use_props = !uniq.is_empty();
    let mut g0 = Graph::new(&model.params);
    let c = if use_props { Some(model.prop_vectors(&mut g0, &uniq, &mut drop_for(0))?) } else { None };
    let c_value = c.map(|c| g0.value(c).clone());

    let units: Vec<(usize, &[&Example])> = batch.chunks(2).enumerate().map(|(u, s)| (u, s)).collect();
    let results = exec.map(&units, |&(u, stories)| -> Result<_, ModelError> {
        let mut g = Graph::new(&model.params);
        let local = GenTargets {
            events: gen.events.iter().filter(|e| e.0 / 2 == u).map(|&(s, j)| (s - 2 * u, j)).collect(),
            abstractions: gen
                .abstractions
                .iter()
                .filter(|a| a.0 / 2 == u)
                .map(|&(a, ja, b, jb)| (a - 2 * u, ja, b - 2 * u, jb))
                .collect(),
        };
        let cv = c_value.as_ref().map(|v| g.input(v.clone(), true));
        let (loss, bd) = unit_loss(model, &mut g, stories, cv.map(|v| (v, &rows)), &local, w, mode, &mut drop_for(u + 1))?;
        let Some(loss) = loss else {
            return Ok((bd, Grads::zeros_like(n_params), None));
        };
        let back = g.backward(loss);
        let dc = cv.and_then(|v| back.input_grad(v).cloned());
        Ok((bd, back.params, dc))
    });
    let mut bd = LossBreakdown { prop_encodes: uniq.len(), ..Default::default() };
    let mut grads = Grads::zeros_like(n_params);
    let mut dc_total: Option<Array2<F>> = None;
    for r in results {
        let (b, gr, dc) = r?;
        bd += b;
        grads = grads.merge(gr);
        if let Some(dc) = dc {
            dc_total = Some(match dc_total {
                None => dc,
                Some(t) => t + dc,
            });
        }
    }
    if let (Some(c), Some(dc)) = (c, dc_total) {
        let d = g0.input(dc, false);
        let prod = g0.mul(c, d);
        let surrogate = g0.sum_all(prod);
        grads = grads.merge(g0.backward(surrogate).params);
    }
    Ok((bd, grads))
}

/// Forward-only loss of a batch in a single graph.
pub fn batch_loss<F: Real>(
    model: &Model<F>,
    batch: &[&Example],
    gen: &GenTargets,
    w: Weights,
    mode: Mode,
) -> Result<LossBreakdown, ModelError> {
    let mut g = Graph::new(&model.params);
    let drop = &mut Dropout::off();
    let (uniq, rows) = if w.prop > 0.0 { batch_props(batch) } else { Default::default() };
    let c = if uniq.is_empty() { None } else { Some(model.prop_vectors(&mut g, &uniq, drop)?) };
    let mut total = LossBreakdown { prop_encodes: uniq.len(), ..Default::default() };
    for (u, stories) in batch.chunks(2).enumerate() {
        let local = GenTargets {
            events: gen.events.iter().filter(|e| e.0 / 2 == u).map(|&(s, j)| (s - 2 * u, j)).collect(),
            abstractions: gen
                .abstractions
                .iter()
                .filter(|a| a.0 / 2 == u)
                .map(|&(a, ja, b, jb)| (a - 2 * u, ja, b - 2 * u, jb))
                .collect(),
        };
        let (_, bd) = unit_loss(model, &mut g, stories, c.map(|c| (c, &rows)), &local, w, mode, drop)?;
        total += bd;
    }
    Ok(total)
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Array2<f32>>,
    v: Vec<Array2<f32>>,
}

impl Adam {
    pub fn new(params: &ParamSet<f32>, weight_decay: f64) -> Self {
        let zeros: Vec<Array2<f32>> = params.tensors().iter().map(|t| Array2::zeros(t.raw_dim())).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &Grads<f32>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let decay = (1.0 - lr * self.weight_decay) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for id in 0..params.len() {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let p = params.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p = *p * decay - step * *m / (v.sqrt() + eps);
            });
        }
    }
}

/// Linear warmup to `base` over `warmup` steps, then constant.
pub fn learning_rate(base: f64, warmup: usize, step: u64) -> f64 {
    if warmup == 0 {
        base
    } else {
        base * ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub weights: Weights,
    /// Per-proposition mean of the proposition loss.
    pub prop_loss_mean: f64,
    pub loss: LossBreakdown,
    pub dev: eval::DevMetrics,
    pub wall_clock_s: f64,
    pub best: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
    TimeBudget,
}

pub struct TrainOutcome {
    /// Parameters of the best dev epoch.
    pub model: Model<f32>,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub stop: StopReason,
    pub wall_clock_s: f64,
}

/// Dev selection score: proposition accuracy, or QA exact match when the
/// proposition loss is off entirely.
fn selection_score(cfg: &TrainConfig, dev: &eval::DevMetrics) -> f64 {
    if cfg.lambda_prop > 0.0 {
        dev.prop_accuracy
    } else if cfg.lambda_qa > 0.0 {
        dev.em_accuracy.unwrap_or(0.0)
    } else {
        -dev.prop_loss_mean
    }
}

pub fn train(
    train_set: &Dataset,
    dev_set: &Dataset,
    mut model: Model<f32>,
    cfg: &TrainConfig,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let start = Instant::now();
    let mut opt = Adam::new(&model.params, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, usize::MAX, 0, 0));
    let dev: Vec<&Example> = dev_set.examples.iter().take(cfg.dev_limit.unwrap_or(usize::MAX)).collect();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ParamSet<f32>)> = None;
    let mut since_best = 0;
    let mut stop = StopReason::MaxEpochs;
    let dropout = model.cfg.dropout;
    for epoch in 0..cfg.max_epochs {
        let w = cfg.weights(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = LossBreakdown::default();
        let mut out_of_time = false;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = idx.iter().map(|&i| &train_set.examples[i]).collect();
            let gen = sample_gen_targets(&batch, cfg.event_gen, cfg.abstraction, &mut rng);
            let drop = (dropout > 0.0).then(|| (dropout, stream_seed(cfg.seed, epoch, step, 1)));
            let (bd, grads) = batch_gradients(&model, &batch, &gen, w, cfg.mode, drop, exec)?;
            if !bd.is_finite() || !grads.global_norm().is_finite() {
                return Err(TrainError::NonFinite { epoch, step, detail: format!("{bd:?}") });
            }
            epoch_loss += bd;
            let lr = learning_rate(cfg.learning_rate, cfg.warmup_steps, opt.steps());
            opt.step(&mut model.params, &grads, lr);
            if cfg.time_budget_s.is_some_and(|b| start.elapsed().as_secs_f64() > b) {
                out_of_time = true;
                break;
            }
        }
        if epoch_loss.clamped > 0 {
            log::warn!("epoch {epoch}: {} gold probabilities clamped", epoch_loss.clamped);
        }
        let dev_metrics = eval::dev_metrics(&model, &dev, cfg.mode, cfg.lambda_qa > 0.0, exec)?;
        let score = selection_score(cfg, &dev_metrics);
        let warming = w.prop == 0.0 && cfg.lambda_prop > 0.0;
        let improved = !warming && best.as_ref().is_none_or(|b| score > b.0);
        if improved {
            best = Some((score, epoch, model.params.clone()));
            since_best = 0;
        } else if !warming {
            since_best += 1;
        }
        let rec = EpochRecord {
            epoch,
            steps: opt.steps(),
            learning_rate: learning_rate(cfg.learning_rate, cfg.warmup_steps, opt.steps().saturating_sub(1)),
            weights: w,
            prop_loss_mean: epoch_loss.prop_mean(),
            loss: epoch_loss,
            dev: dev_metrics,
            wall_clock_s: start.elapsed().as_secs_f64(),
            best: improved,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} prop/tok {:.4} dev acc {:.4} rho {:.3}",
            rec.loss.total,
            rec.prop_loss_mean,
            rec.dev.prop_accuracy,
            rec.dev.rho
        );
        on_epoch(&rec);
        log.push(rec);
        if out_of_time {
            stop = StopReason::TimeBudget;
            break;
        }
        if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
            stop = StopReason::EarlyStop;
            break;
        }
    }
    let (best_score, best_epoch) = match best {
        Some((s, e, p)) => {
            model.params = p;
            (s, e)
        }
        None => (selection_score(cfg, &log.last().unwrap().dev), log.len() - 1),
    };
    Ok(TrainOutcome { model, log, best_epoch, best_score, stop, wall_clock_s: start.elapsed().as_secs_f64() })
}

#[cfg(test)]
mod tests;
