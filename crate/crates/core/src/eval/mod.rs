//! Metrics over prediction dumps: proposition accuracy, exact match, global
//! consistency, the tiered conflict metrics, encoder-call accounting,
//! learning curves and ablations.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{story_violations, Assignment, ConstraintError};
use crate::corpus::{Dataset, Example, TruthLabel, Vocab};
use crate::exec::Exec;
use crate::model::{annotated_queries, prop_tokens, BeliefDistribution, Conditioning, Mode, Model, ModelConfig, ModelError};
use crate::training::{prop_loss, train, TrainConfig, TrainError};
use crate::worldgen::RelevantProposition;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("missing prediction: {0}")]
    Missing(String),
    #[error("no conflict pairs to evaluate")]
    NoPairs,
    #[error("empty candidate list")]
    NoCandidates,
    #[error("encoder call count mismatch on {id}: {detail}")]
    CounterMismatch { id: String, detail: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropPrediction {
    pub breakpoint: usize,
    pub text: String,
    pub label: TruthLabel,
    /// Probabilities of (true, false, unknown).
    pub probs: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPrediction {
    pub question: String,
    pub answer: String,
    #[serde(default)]
    pub truncated: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExampleDump {
    pub id: String,
    pub props: Vec<PropPrediction>,
    pub qa: Vec<QaPrediction>,
    /// Story encodes made to score propositions.
    pub story_encodes: usize,
    pub prop_encodes: usize,
    pub cache_hits: usize,
    /// Extra story encodes made only to answer questions.
    #[serde(default)]
    pub qa_encodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint_hash: String,
    pub dataset_hash: String,
    pub mode: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionDump {
    pub provenance: Provenance,
    pub examples: Vec<ExampleDump>,
}

impl PredictionDump {
    fn by_id(&self) -> HashMap<&str, &ExampleDump> {
        self.examples.iter().map(|e| (e.id.as_str(), e)).collect()
    }

    /// JSON Lines: a provenance header, then one line per example.
    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<(), EvalError> {
        serde_json::to_writer(&mut *w, &serde_json::json!({ "provenance": self.provenance }))?;
        writeln!(w)?;
        for e in &self.examples {
            serde_json::to_writer(&mut *w, e)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self, EvalError> {
        let mut lines = r.lines();
        let header: serde_json::Value =
            serde_json::from_str(&lines.next().ok_or_else(|| EvalError::Invalid("empty dump".into()))??)?;
        let provenance = serde_json::from_value(header["provenance"].clone())?;
        let mut examples = Vec::new();
        for line in lines {
            let line = line?;
            if !line.trim().is_empty() {
                examples.push(serde_json::from_str(&line)?);
            }
        }
        Ok(PredictionDump { provenance, examples })
    }
}

pub fn normalize_answer(s: &str) -> String {
    s.trim().to_lowercase()
}

fn predict_example(model: &Model<f32>, ex: &Example, mode: Mode, with_qa: bool) -> Result<ExampleDump, EvalError> {
    let queries = annotated_queries(ex);
    let (pred, states) = if mode == Mode::SingleRead {
        let (p, s) = model.predict_with_states(ex, &queries)?;
        (p, Some(s))
    } else {
        (model.predict(ex, &queries, mode)?, None)
    };
    let props = queries
        .iter()
        .zip(ex.breakpoints.iter().flat_map(|b| b.propositions.iter()))
        .zip(&pred.beliefs)
        .map(|(((j, _), p), b)| PropPrediction { breakpoint: *j, text: p.text.clone(), label: b.label(), probs: b.probs })
        .collect();
    let stats = pred.stats;
    let mut qa_encodes = 0;
    let mut qa = Vec::new();
    if with_qa && !ex.qa.is_empty() {
        let states = match states {
            Some(s) => s,
            None => {
                qa_encodes += 1;
                model.encode_story(&ex.story_tokens)?
            }
        };
        let cond = Conditioning::Tokens(states);
        for q in &ex.qa {
            let out = model.decode_text(&cond, &prop_tokens(&q.question))?;
            qa.push(QaPrediction { question: q.question.clone(), answer: out.tokens.join(" "), truncated: out.truncated });
        }
    }
    Ok(ExampleDump {
        id: ex.id.clone(),
        props,
        qa,
        story_encodes: stats.story_encodes,
        prop_encodes: stats.prop_encodes,
        cache_hits: stats.cache_hits,
        qa_encodes,
    })
}

/// Predictions for every annotated proposition (and QA pair when asked),
/// with the wall-clock it took.
pub fn predict_dataset(
    model: &Model<f32>,
    data: &Dataset,
    mode: Mode,
    with_qa: bool,
    exec: Exec,
) -> Result<(PredictionDump, f64), EvalError> {
    let start = Instant::now();
    let examples: Result<Vec<_>, _> = exec.map(&data.examples, |ex| predict_example(model, ex, mode, with_qa)).into_iter().collect();
    let wall = start.elapsed().as_secs_f64();
    let provenance =
        Provenance { checkpoint_hash: model.content_hash(), dataset_hash: data.content_hash(), mode: mode.as_str().into() };
    Ok((PredictionDump { provenance, examples: examples? }, wall))
}

/// Gold labels and answers dressed as predictions.
pub fn gold_dump(data: &Dataset) -> PredictionDump {
    let examples = data
        .examples
        .iter()
        .map(|ex| ExampleDump {
            id: ex.id.clone(),
            props: ex
                .breakpoints
                .iter()
                .flat_map(|b| {
                    b.propositions.iter().map(move |p| {
                        let mut probs = [0.0; 3];
                        probs[p.label.index()] = 1.0;
                        PropPrediction { breakpoint: b.index, text: p.text.clone(), label: p.label, probs }
                    })
                })
                .collect(),
            qa: ex
                .qa
                .iter()
                .map(|q| QaPrediction { question: q.question.clone(), answer: q.answer.clone(), truncated: false })
                .collect(),
            ..Default::default()
        })
        .collect();
    PredictionDump {
        provenance: Provenance { checkpoint_hash: "gold".into(), dataset_hash: data.content_hash(), mode: "gold".into() },
        examples,
    }
}

fn predicted_assignment(d: &ExampleDump) -> Assignment {
    let mut a = Assignment::new();
    for p in &d.props {
        a.insert(p.breakpoint, &p.text, p.label);
    }
    a
}

fn dump_for<'d>(by_id: &HashMap<&str, &'d ExampleDump>, id: &str) -> Result<&'d ExampleDump, EvalError> {
    by_id.get(id).copied().ok_or_else(|| EvalError::Missing(format!("example {id}")))
}

/// Micro-averaged accuracy over every gold (breakpoint, proposition) pair;
/// `None` when the data has no propositions.
pub fn prop_accuracy(dump: &PredictionDump, data: &Dataset) -> Result<Option<f64>, EvalError> {
    let by_id = dump.by_id();
    let (mut correct, mut total) = (0usize, 0usize);
    for ex in &data.examples {
        let gold = ex.gold_assignment();
        if gold.is_empty() {
            continue;
        }
        let pred = predicted_assignment(dump_for(&by_id, &ex.id)?);
        for bp in &ex.breakpoints {
            for p in &bp.propositions {
                let got = pred
                    .get(bp.index, &p.text)
                    .ok_or_else(|| EvalError::Missing(format!("{} @{} '{}'", ex.id, bp.index, p.text)))?;
                total += 1;
                correct += (got == p.label) as usize;
            }
        }
    }
    Ok((total > 0).then(|| correct as f64 / total as f64))
}

/// Fraction of exact matches after trimming and case-folding.
pub fn em_accuracy(pred: &[&str], gold: &[&str]) -> Result<f64, EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::Missing(format!("{} answers for {} questions", pred.len(), gold.len())));
    }
    if gold.is_empty() {
        return Err(EvalError::Invalid("no questions".into()));
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| !p.trim().is_empty() && normalize_answer(p) == normalize_answer(g)).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Exact match over every QA pair of `data`; `None` when there are none.
pub fn dump_em_accuracy(dump: &PredictionDump, data: &Dataset) -> Result<Option<f64>, EvalError> {
    let by_id = dump.by_id();
    let (mut pred, mut gold) = (Vec::new(), Vec::new());
    for ex in data.examples.iter().filter(|e| !e.qa.is_empty()) {
        let d = dump_for(&by_id, &ex.id)?;
        if d.qa.len() != ex.qa.len() {
            return Err(EvalError::Missing(format!("QA answers of {}", ex.id)));
        }
        for (p, g) in d.qa.iter().zip(&ex.qa) {
            pred.push(p.answer.as_str());
            gold.push(g.answer.as_str());
        }
    }
    if gold.is_empty() {
        return Ok(None);
    }
    em_accuracy(&pred, &gold).map(Some)
}

/// Fraction of constrained stories whose predicted labels violate at least
/// one constraint; 0 when no story carries constraints.
pub fn global_consistency(dump: &PredictionDump, data: &Dataset) -> Result<f64, EvalError> {
    let by_id = dump.by_id();
    let (mut violated, mut constrained) = (0usize, 0usize);
    for ex in data.examples.iter().filter(|e| !e.constraints.is_empty()) {
        let a = predicted_assignment(dump_for(&by_id, &ex.id)?);
        let (v, _) = story_violations(ex, &a)?;
        constrained += 1;
        violated += (v > 0) as usize;
    }
    Ok(if constrained == 0 { 0.0 } else { violated as f64 / constrained as f64 })
}

/// Index of the candidate with the highest probability of being true;
/// ties go to the lowest index.
pub fn kclass_resolve(candidates: &[(String, BeliefDistribution)]) -> Result<usize, EvalError> {
    if candidates.is_empty() {
        return Err(EvalError::NoCandidates);
    }
    let mut best = 0;
    for (i, (_, d)) in candidates.iter().enumerate() {
        if d.prob(TruthLabel::Entailed) > candidates[best].1.prob(TruthLabel::Entailed) {
            best = i;
        }
    }
    Ok(best)
}

/// Per-pair correctness of the three conflict tasks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub plausible_chosen: bool,
    pub conflict_found: bool,
    pub states_correct: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tiered {
    pub plausibility: f64,
    pub consistency: f64,
    pub verifiability: f64,
}

/// Each tier counts only pairs that also pass every lower tier.
pub fn tiered_eval(pairs: &[PairOutcome]) -> Result<Tiered, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::NoPairs);
    }
    let n = pairs.len() as f64;
    let t1 = pairs.iter().filter(|p| p.plausible_chosen).count();
    let t2 = pairs.iter().filter(|p| p.plausible_chosen && p.conflict_found).count();
    let t3 = pairs.iter().filter(|p| p.plausible_chosen && p.conflict_found && p.states_correct).count();
    Ok(Tiered { plausibility: t1 as f64 / n, consistency: t2 as f64 / n, verifiability: t3 as f64 / n })
}

/// Reads the three task outcomes of every conflict pair in `data` off the
/// dump.
pub fn pair_outcomes(dump: &PredictionDump, data: &Dataset) -> Result<Vec<PairOutcome>, EvalError> {
    let by_id = dump.by_id();
    let mut pairs: BTreeMap<&str, (Option<&Example>, Option<&Example>)> = BTreeMap::new();
    for ex in &data.examples {
        let (Some(pair), Some(role)) = (ex.meta.get("pair"), ex.meta.get("role")) else { continue };
        let slot = pairs.entry(pair.as_str()).or_default();
        match role.as_str() {
            "choice" => slot.0 = Some(ex),
            "implausible" => slot.1 = Some(ex),
            _ => {}
        }
    }
    let answer = |ex: &Example| -> Result<bool, EvalError> {
        let d = dump_for(&by_id, &ex.id)?;
        let (p, g) = (d.qa.first(), ex.qa.first());
        match (p, g) {
            (Some(p), Some(g)) => Ok(normalize_answer(&p.answer) == normalize_answer(&g.answer)),
            _ => Err(EvalError::Missing(format!("task answer of {}", ex.id))),
        }
    };
    let mut out = Vec::new();
    for (id, slot) in pairs {
        let (Some(choice), Some(bad)) = slot else {
            return Err(EvalError::Missing(format!("member of pair {id}")));
        };
        let relevant: Vec<RelevantProposition> = serde_json::from_str(
            bad.meta.get("relevant").ok_or_else(|| EvalError::Missing(format!("relevant states of {id}")))?,
        )?;
        let pred = predicted_assignment(dump_for(&by_id, &bad.id)?);
        let mut states_correct = true;
        for r in &relevant {
            let got = pred
                .get(r.breakpoint, &r.text)
                .ok_or_else(|| EvalError::Missing(format!("{} @{} '{}'", bad.id, r.breakpoint, r.text)))?;
            states_correct &= got == r.label;
        }
        out.push(PairOutcome { plausible_chosen: answer(choice)?, conflict_found: answer(bad)?, states_correct });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub n_examples: usize,
    pub prop_accuracy: Option<f64>,
    pub em_accuracy: Option<f64>,
    pub rho: f64,
    pub tiered: Option<Tiered>,
    pub story_encodes_per_example: f64,
    pub prop_encodes_per_example: f64,
    pub cache_hit_rate: f64,
    /// Left out unless asked for, so reports are byte-reproducible.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_clock_s: Option<f64>,
    pub provenance: Provenance,
}

pub fn metrics_report(dump: &PredictionDump, data: &Dataset, wall_clock_s: Option<f64>) -> Result<MetricsReport, EvalError> {
    let n = data.len().max(1) as f64;
    let sum = |f: fn(&ExampleDump) -> usize| dump.examples.iter().map(f).sum::<usize>() as f64;
    let queries = dump.examples.iter().map(|e| e.props.len()).sum::<usize>();
    let has_pairs = data.examples.iter().any(|e| e.meta.get("role").is_some_and(|r| r == "choice"));
    Ok(MetricsReport {
        mode: dump.provenance.mode.clone(),
        n_examples: data.len(),
        prop_accuracy: prop_accuracy(dump, data)?,
        em_accuracy: dump_em_accuracy(dump, data)?,
        rho: global_consistency(dump, data)?,
        tiered: if has_pairs { Some(tiered_eval(&pair_outcomes(dump, data)?)?) } else { None },
        story_encodes_per_example: sum(|e| e.story_encodes) / n,
        prop_encodes_per_example: sum(|e| e.prop_encodes) / n,
        cache_hit_rate: if queries == 0 { 0.0 } else { sum(|e| e.cache_hits) / queries as f64 },
        wall_clock_s,
        provenance: dump.provenance.clone(),
    })
}

/// What training checks on the dev set after every epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DevMetrics {
    pub prop_accuracy: f64,
    pub rho: f64,
    pub em_accuracy: Option<f64>,
    pub prop_loss_mean: f64,
    pub story_encodes: usize,
    pub n_props: usize,
}

pub fn dev_metrics(model: &Model<f32>, dev: &[&Example], mode: Mode, with_qa: bool, exec: Exec) -> Result<DevMetrics, ModelError> {
    struct One {
        correct: usize,
        total: usize,
        loss: f64,
        violated: Option<bool>,
        em: (usize, usize),
        encodes: usize,
    }
    let per = exec.map(dev, |ex| -> Result<One, ModelError> {
        let queries = annotated_queries(ex);
        let (pred, states) = if mode == Mode::SingleRead {
            let (p, s) = model.predict_with_states(ex, &queries)?;
            (p, Some(s))
        } else {
            (model.predict(ex, &queries, mode)?, None)
        };
        let gold: Vec<TruthLabel> = ex.breakpoints.iter().flat_map(|b| b.propositions.iter().map(|p| p.label)).collect();
        let labels = pred.labels();
        let correct = labels.iter().zip(&gold).filter(|(a, b)| a == b).count();
        let loss = prop_loss(&pred.beliefs, &gold).map(|l| l.sum).unwrap_or(f64::NAN);
        let mut a = Assignment::new();
        for ((j, _), (p, l)) in
            queries.iter().zip(ex.breakpoints.iter().flat_map(|b| b.propositions.iter()).zip(&labels))
        {
            a.insert(*j, &p.text, *l);
        }
        let violated = if ex.constraints.is_empty() {
            None
        } else {
            Some(story_violations(ex, &a).map(|(v, _)| v > 0).unwrap_or(true))
        };
        let mut em = (0, 0);
        if with_qa && !ex.qa.is_empty() {
            let states = match states {
                Some(s) => s,
                None => model.encode_story(&ex.story_tokens)?,
            };
            let cond = Conditioning::Tokens(states);
            for q in &ex.qa {
                let out = model.decode_text(&cond, &prop_tokens(&q.question))?;
                em.0 += (normalize_answer(&out.tokens.join(" ")) == normalize_answer(&q.answer)) as usize;
                em.1 += 1;
            }
        }
        Ok(One { correct, total: gold.len(), loss, violated, em, encodes: pred.stats.story_encodes })
    });
    let (mut correct, mut total, mut loss, mut viol, mut constrained, mut em, mut enc) = (0, 0, 0.0, 0, 0, (0, 0), 0);
    for r in per {
        let r = r?;
        correct += r.correct;
        total += r.total;
        loss += r.loss;
        if let Some(v) = r.violated {
            constrained += 1;
            viol += v as usize;
        }
        em.0 += r.em.0;
        em.1 += r.em.1;
        enc += r.encodes;
    }
    Ok(DevMetrics {
        prop_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        rho: if constrained == 0 { 0.0 } else { viol as f64 / constrained as f64 },
        em_accuracy: (em.1 > 0).then(|| em.0 as f64 / em.1 as f64),
        prop_loss_mean: if total == 0 { 0.0 } else { loss / total as f64 },
        story_encodes: enc,
        n_props: total,
    })
}

/// Encoder calls and wall-clock of one prediction mode over a split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeCost {
    pub story_encodes_per_example: f64,
    pub prop_encodes_per_example: f64,
    pub cache_hit_rate: f64,
    pub wall_clock_s: f64,
    pub per_example_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub single_read: ModeCost,
    pub multi_pass: ModeCost,
}

fn mode_cost(dump: &PredictionDump, n: usize, wall: f64) -> ModeCost {
    let q: usize = dump.examples.iter().map(|e| e.props.len()).sum();
    let hits: usize = dump.examples.iter().map(|e| e.cache_hits).sum();
    let n = n.max(1) as f64;
    ModeCost {
        story_encodes_per_example: dump.examples.iter().map(|e| e.story_encodes).sum::<usize>() as f64 / n,
        prop_encodes_per_example: dump.examples.iter().map(|e| e.prop_encodes).sum::<usize>() as f64 / n,
        cache_hit_rate: if q == 0 { 0.0 } else { hits as f64 / q as f64 },
        wall_clock_s: wall,
        per_example_s: wall / n,
    }
}

/// Runs both modes over `data` and checks that single-read encodes each
/// story once and multi-pass once per queried breakpoint.
pub fn efficiency_report(model: &Model<f32>, data: &Dataset, exec: Exec) -> Result<EfficiencyReport, EvalError> {
    let (single, ws) = predict_dataset(model, data, Mode::SingleRead, false, exec)?;
    let (multi, wm) = predict_dataset(model, data, Mode::MultiPass, false, exec)?;
    for ((ex, s), m) in data.examples.iter().zip(&single.examples).zip(&multi.examples) {
        let queried = ex.breakpoints.iter().filter(|b| !b.propositions.is_empty()).count();
        if s.story_encodes != 1 || m.story_encodes != queried {
            return Err(EvalError::CounterMismatch {
                id: ex.id.clone(),
                detail: format!("single-read {} (want 1), multi-pass {} (want {queried})", s.story_encodes, m.story_encodes),
            });
        }
    }
    Ok(EfficiencyReport { single_read: mode_cost(&single, data.len(), ws), multi_pass: mode_cost(&multi, data.len(), wm) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub fraction: f64,
    pub n_train: usize,
    pub prop_accuracy: f64,
    pub rho: f64,
    pub best_epoch: usize,
}

/// Indices of the first `fraction` of a seeded shuffle, in dataset order.
pub fn fraction_subset(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n);
    let mut keep = idx[..k].to_vec();
    keep.sort_unstable();
    keep
}

fn train_and_score(
    train_set: &Dataset,
    dev: &Dataset,
    model_cfg: &ModelConfig,
    vocab: &Vocab,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<(DevMetrics, usize), EvalError> {
    let model = Model::<f32>::new(model_cfg.clone(), vocab.clone(), cfg.seed)?;
    let out = train(train_set, dev, model, cfg, exec, |_| {})?;
    let dev_refs: Vec<&Example> = dev.examples.iter().collect();
    let m = dev_metrics(&out.model, &dev_refs, cfg.mode, false, exec)?;
    Ok((m, out.best_epoch))
}

pub fn learning_curve(
    train_set: &Dataset,
    dev: &Dataset,
    model_cfg: &ModelConfig,
    vocab: &Vocab,
    cfg: &TrainConfig,
    fractions: &[f64],
    exec: Exec,
) -> Result<Vec<CurveRow>, EvalError> {
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(EvalError::Invalid(format!("fraction {f} is outside (0, 1]")));
    }
    let mut rows = Vec::new();
    for &fraction in fractions {
        let keep = fraction_subset(train_set.len(), fraction, cfg.seed);
        let subset = Dataset {
            examples: keep.iter().map(|&i| train_set.examples[i].clone()).collect(),
            vocab: train_set.vocab.clone(),
            meta: train_set.meta.clone(),
        };
        let (m, best_epoch) = train_and_score(&subset, dev, model_cfg, vocab, cfg, exec)?;
        rows.push(CurveRow { fraction, n_train: subset.len(), prop_accuracy: m.prop_accuracy, rho: m.rho, best_epoch });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    BrkSelfAttn,
    EventGen,
    Abstraction,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::BrkSelfAttn, Ablation::EventGen, Ablation::Abstraction];

    pub fn row_name(self) -> &'static str {
        match self {
            Ablation::BrkSelfAttn => "- brk self-attn",
            Ablation::EventGen => "- event generation",
            Ablation::Abstraction => "- abstraction",
        }
    }

    pub fn apply(self, model: &mut ModelConfig, train: &mut TrainConfig) {
        match self {
            Ablation::BrkSelfAttn => model.brk_self_attn = false,
            Ablation::EventGen => train.event_gen = false,
            Ablation::Abstraction => train.abstraction = false,
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "brk_self_attn" => Ok(Ablation::BrkSelfAttn),
            "event_gen" => Ok(Ablation::EventGen),
            "abstraction" => Ok(Ablation::Abstraction),
            _ => Err(format!("unknown ablation '{s}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub prop_accuracy: f64,
    pub rho: f64,
    /// Ablated minus base; negative accuracy deltas mean worse.
    pub delta_accuracy: f64,
    pub delta_rho: f64,
}

/// Base row first, then one row per toggle, all trained with the same seed.
pub fn ablation_suite(
    train_set: &Dataset,
    dev: &Dataset,
    model_cfg: &ModelConfig,
    vocab: &Vocab,
    cfg: &TrainConfig,
    toggles: &[Ablation],
    exec: Exec,
) -> Result<Vec<AblationRow>, EvalError> {
    let (base, _) = train_and_score(train_set, dev, model_cfg, vocab, cfg, exec)?;
    let mut rows = vec![AblationRow {
        name: "base".into(),
        prop_accuracy: base.prop_accuracy,
        rho: base.rho,
        delta_accuracy: 0.0,
        delta_rho: 0.0,
    }];
    for t in toggles {
        let (mut mc, mut tc) = (model_cfg.clone(), cfg.clone());
        t.apply(&mut mc, &mut tc);
        let (m, _) = train_and_score(train_set, dev, &mc, vocab, &tc, exec)?;
        rows.push(ablation_row(t.row_name(), &m, &base));
    }
    Ok(rows)
}

pub fn ablation_row(name: &str, m: &DevMetrics, base: &DevMetrics) -> AblationRow {
    AblationRow {
        name: name.into(),
        prop_accuracy: m.prop_accuracy,
        rho: m.rho,
        delta_accuracy: m.prop_accuracy - base.prop_accuracy,
        delta_rho: m.rho - base.rho,
    }
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("fraction,n_train,prop_accuracy,rho,best_epoch\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.6},{:.6},{}\n", r.fraction, r.n_train, r.prop_accuracy, r.rho, r.best_epoch));
    }
    s
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,prop_accuracy,rho,delta_accuracy,delta_rho\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:+.6},{:+.6}\n",
            r.name, r.prop_accuracy, r.rho, r.delta_accuracy, r.delta_rho
        ));
    }
    s
}

#[cfg(test)]
mod tests;
