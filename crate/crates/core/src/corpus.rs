//! Annotated stories and their JSON Lines serialization.
//!
//! A story is a flat token sequence with in-line `[B]` markers. Every marker
//! owns a [`BreakpointAnnotation`] holding the propositions whose truth value
//! is known at that point. The marker positions are cached on the annotation
//! so downstream code never re-scans the token sequence.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::constraints::{self, Assignment};

pub const BREAKPOINT: &str = "[B]";
pub const MARK: &str = "[MARK]";

/// Tokens that build the prompt of the auxiliary generation tasks.
pub const EVENT_PROMPT: &str = "$event";
pub const ABSTRACT_PROMPT: &str = "$abstract";

/// Meta keys listing the entity names of a story by type.
pub const PERSON_KEY: &str = "entities.person";
pub const OBJECT_KEY: &str = "entities.object";
pub const LOCATION_KEY: &str = "entities.location";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("example {id}: {}", violations.join("; "))]
    Invalid { id: String, violations: Vec<String> },
    #[error("duplicate example id {0}")]
    DuplicateId(String),
    #[error("cannot build a vocabulary from an empty dataset")]
    EmptyDataset,
    #[error("split policy leaves the train split empty")]
    EmptyTrainSplit,
}

/// Gold truth value of a proposition at a breakpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TruthLabel {
    #[serde(rename = "true")]
    Entailed,
    #[serde(rename = "false")]
    Contradicted,
    #[serde(rename = "unknown")]
    Unknown,
}

impl TruthLabel {
    /// Class order used by every classifier head: E, C, U.
    pub const ALL: [TruthLabel; 3] = [TruthLabel::Entailed, TruthLabel::Contradicted, TruthLabel::Unknown];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<TruthLabel> {
        Self::ALL.get(i).copied()
    }

    /// Predicate letter of the constraint language.
    pub fn predicate(self) -> &'static str {
        match self {
            TruthLabel::Entailed => "E",
            TruthLabel::Contradicted => "C",
            TruthLabel::Unknown => "U",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TruthLabel::Entailed => "true",
            TruthLabel::Contradicted => "false",
            TruthLabel::Unknown => "unknown",
        }
    }
}

impl fmt::Display for TruthLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposition {
    pub text: String,
    pub label: TruthLabel,
}

impl Proposition {
    pub fn new(text: impl Into<String>, label: TruthLabel) -> Self {
        Proposition { text: text.into(), label }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BreakpointAnnotation {
    /// 1-based ordinal.
    pub index: usize,
    /// 0-based position of the marker in `story_tokens`.
    pub token_position: usize,
    pub propositions: Vec<Proposition>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub story_tokens: Vec<String>,
    pub breakpoints: Vec<BreakpointAnnotation>,
    /// Constraint source strings in the s-expression language of
    /// [`crate::constraints`].
    pub constraints: Vec<String>,
    pub qa: Vec<QaPair>,
    pub meta: BTreeMap<String, String>,
}

impl Example {
    /// Builds an example from story tokens and per-marker propositions,
    /// filling in the marker positions.
    pub fn from_parts(
        id: impl Into<String>,
        story_tokens: Vec<String>,
        propositions: Vec<Vec<Proposition>>,
    ) -> Example {
        let positions = marker_positions(&story_tokens);
        let breakpoints = propositions
            .into_iter()
            .enumerate()
            .map(|(i, props)| BreakpointAnnotation {
                index: i + 1,
                token_position: positions.get(i).copied().unwrap_or(usize::MAX),
                propositions: props,
            })
            .collect();
        Example {
            id: id.into(),
            story_tokens,
            breakpoints,
            constraints: Vec::new(),
            qa: Vec::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn story_text(&self) -> String {
        self.story_tokens.join(" ")
    }

    pub fn marker_positions(&self) -> Vec<usize> {
        self.breakpoints.iter().map(|b| b.token_position).collect()
    }

    /// Tokens of the sentence that ends at breakpoint `index` (1-based),
    /// without the closing period.
    pub fn event_tokens(&self, index: usize) -> &[String] {
        let end = self.breakpoints[index - 1].token_position;
        let start = if index == 1 { 0 } else { self.breakpoints[index - 2].token_position + 1 };
        let mut seg = &self.story_tokens[start..end];
        while let Some(last) = seg.last() {
            if last == "." {
                seg = &seg[..seg.len() - 1];
            } else {
                break;
            }
        }
        seg
    }

    /// Gold labels of every (breakpoint, proposition) pair.
    pub fn gold_assignment(&self) -> Assignment {
        let mut a = Assignment::new();
        for bp in &self.breakpoints {
            for p in &bp.propositions {
                a.insert(bp.index, &p.text, p.label);
            }
        }
        a
    }

    pub fn num_propositions(&self) -> usize {
        self.breakpoints.iter().map(|b| b.propositions.len()).sum()
    }

    fn entity_list(&self, key: &str) -> Vec<&str> {
        self.meta.get(key).map(|s| s.split_whitespace().collect()).unwrap_or_default()
    }

    /// Replaces entity mentions by their type tag, e.g.
    /// `John moved to the kitchen` becomes `PERSON moved to the LOCATION`.
    pub fn abstract_tokens(&self, tokens: &[String]) -> Vec<String> {
        let persons = self.entity_list(PERSON_KEY);
        let objects = self.entity_list(OBJECT_KEY);
        let locations = self.entity_list(LOCATION_KEY);
        tokens
            .iter()
            .map(|t| {
                let t = t.as_str();
                let tag = if persons.contains(&t) || t == "he" || t == "she" {
                    "PERSON"
                } else if objects.contains(&t) {
                    "OBJECT"
                } else if locations.contains(&t) {
                    "LOCATION"
                } else {
                    t
                };
                tag.to_string()
            })
            .collect()
    }

    /// Whether abstraction targets are defined for this example.
    pub fn has_entity_types(&self) -> bool {
        self.meta.contains_key(PERSON_KEY)
    }
}

/// 0-based positions of every `[B]` token.
pub fn marker_positions(tokens: &[String]) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.as_str() == BREAKPOINT)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub vocab: Option<Vocab>,
    pub meta: BTreeMap<String, String>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Self {
        Dataset { examples, vocab: None, meta: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Hex SHA-256 of the serialized examples.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for ex in &self.examples {
            hasher.update(example_to_line(ex).as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }

    pub fn check_unique_ids(&self) -> Result<(), CorpusError> {
        let mut seen = HashSet::new();
        for ex in &self.examples {
            if !seen.insert(ex.id.as_str()) {
                return Err(CorpusError::DuplicateId(ex.id.clone()));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Serialization

#[derive(Serialize, Deserialize)]
struct BreakpointRecord {
    index: usize,
    propositions: Vec<Proposition>,
}

#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    id: String,
    story: String,
    breakpoints: Vec<BreakpointRecord>,
    #[serde(default)]
    constraints: Vec<String>,
    #[serde(default)]
    qa: Vec<QaPair>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

/// The per-sentence list layout used by the physical-commonsense recast:
/// one proposition list and one label list per breakpoint.
#[derive(Deserialize)]
struct SentenceListRecord {
    #[serde(rename = "example id", alias = "id")]
    id: String,
    question: String,
    #[serde(default)]
    answer: Option<String>,
    proposition_lists: Vec<Vec<String>>,
    labels: Vec<Vec<TruthLabel>>,
}

fn example_to_record(ex: &Example) -> ExampleRecord {
    ExampleRecord {
        id: ex.id.clone(),
        story: ex.story_text(),
        breakpoints: ex
            .breakpoints
            .iter()
            .map(|b| BreakpointRecord { index: b.index, propositions: b.propositions.clone() })
            .collect(),
        constraints: ex.constraints.clone(),
        qa: ex.qa.clone(),
        meta: ex.meta.clone(),
    }
}

fn example_to_line(ex: &Example) -> String {
    serde_json::to_string(&example_to_record(ex)).expect("example records always serialize")
}

fn split_story(story: &str) -> Vec<String> {
    story.split_whitespace().map(str::to_string).collect()
}

fn record_to_example(rec: ExampleRecord) -> Result<Example, String> {
    let story_tokens = split_story(&rec.story);
    let positions = marker_positions(&story_tokens);
    let mut breakpoints = Vec::with_capacity(rec.breakpoints.len());
    for (i, b) in rec.breakpoints.into_iter().enumerate() {
        breakpoints.push(BreakpointAnnotation {
            index: b.index,
            token_position: positions.get(i).copied().unwrap_or(usize::MAX),
            propositions: b.propositions,
        });
    }
    Ok(Example {
        id: rec.id,
        story_tokens,
        breakpoints,
        constraints: rec.constraints,
        qa: rec.qa,
        meta: rec.meta,
    })
}

fn sentence_lists_to_example(rec: SentenceListRecord) -> Result<Example, String> {
    if rec.proposition_lists.len() != rec.labels.len() {
        return Err(format!(
            "{} proposition lists but {} label lists",
            rec.proposition_lists.len(),
            rec.labels.len()
        ));
    }
    let mut tokens = split_story(&rec.question);
    // Trailing `$task` tokens are the text2text prompt, not story content.
    let mut prompt = Vec::new();
    while tokens.last().is_some_and(|t| t.starts_with('$')) {
        prompt.insert(0, tokens.pop().unwrap());
    }
    let mut props = Vec::with_capacity(rec.proposition_lists.len());
    for (i, (texts, labels)) in rec.proposition_lists.into_iter().zip(rec.labels).enumerate() {
        if texts.len() != labels.len() {
            return Err(format!(
                "sentence {i}: {} propositions but {} labels",
                texts.len(),
                labels.len()
            ));
        }
        props.push(texts.into_iter().zip(labels).map(|(t, l)| Proposition::new(t, l)).collect());
    }
    let mut ex = Example::from_parts(rec.id, tokens, props);
    if let Some(answer) = rec.answer {
        let question = if prompt.is_empty() { "?".to_string() } else { prompt.join(" ") };
        ex.qa.push(QaPair { question, answer });
    }
    Ok(ex)
}

/// Parses one JSON line into an example without validating it.
pub fn parse_example_line(line: &str) -> Result<Example, String> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if value.get("proposition_lists").is_some() {
        let rec: SentenceListRecord = serde_json::from_value(value).map_err(|e| e.to_string())?;
        sentence_lists_to_example(rec)
    } else {
        let rec: ExampleRecord = serde_json::from_value(value).map_err(|e| e.to_string())?;
        record_to_example(rec)
    }
}

/// Reads a JSON Lines dataset, validating every example.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut examples = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex = parse_example_line(&line).map_err(|message| CorpusError::Parse { line: i + 1, message })?;
        let violations = validate_example(&ex);
        if !violations.is_empty() {
            return Err(CorpusError::Invalid { id: ex.id, violations });
        }
        if !seen.insert(ex.id.clone()) {
            return Err(CorpusError::DuplicateId(ex.id));
        }
        examples.push(ex);
    }
    Ok(Dataset::new(examples))
}

/// Writes one example per line with a fixed key order.
pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(d, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_dataset(d: &Dataset, w: &mut impl Write) -> Result<(), CorpusError> {
    for ex in &d.examples {
        w.write_all(example_to_line(ex).as_bytes())?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Checks every example invariant, returning one description per violation.
pub fn validate_example(e: &Example) -> Vec<String> {
    let mut out = Vec::new();
    if e.id.is_empty() {
        out.push("empty id".to_string());
    }
    let positions = marker_positions(&e.story_tokens);
    if positions.len() != e.breakpoints.len() {
        out.push(format!(
            "story has {} breakpoint markers but {} breakpoint annotations",
            positions.len(),
            e.breakpoints.len()
        ));
    }
    for (i, bp) in e.breakpoints.iter().enumerate() {
        if bp.index != i + 1 {
            out.push(format!("breakpoint {} listed at ordinal {}", bp.index, i + 1));
        }
        if positions.get(i) != Some(&bp.token_position) {
            out.push(format!("breakpoint {} does not point at its marker", bp.index));
        }
        if bp.propositions.is_empty() && e.qa.is_empty() {
            out.push(format!("breakpoint {} has no propositions and the example has no QA", bp.index));
        }
        for p in &bp.propositions {
            if p.text.trim().is_empty() {
                out.push(format!("breakpoint {}: empty proposition", bp.index));
            } else if p.text.split_whitespace().any(|t| t == BREAKPOINT) {
                out.push(format!("breakpoint {}: proposition '{}' contains a marker", bp.index, p.text));
            }
        }
    }
    for qa in &e.qa {
        if qa.answer.trim().is_empty() {
            out.push(format!("question '{}' has an empty answer", qa.question));
        }
    }
    let gold = e.gold_assignment();
    let m = e.breakpoints.len();
    for src in &e.constraints {
        let expr = match constraints::parse_constraint(src) {
            Ok(expr) => expr,
            Err(err) => {
                out.push(format!("constraint {src}: {err}"));
                continue;
            }
        };
        let mut ok = true;
        for atom in expr.atoms() {
            if atom.breakpoint > m {
                out.push(format!("constraint {src}: breakpoint {} out of range (m = {m})", atom.breakpoint));
                ok = false;
            } else if gold.get(atom.breakpoint, &atom.text).is_none() {
                out.push(format!(
                    "constraint {src}: proposition '{}' absent at breakpoint {}",
                    atom.text, atom.breakpoint
                ));
                ok = false;
            }
        }
        if ok {
            match constraints::eval_constraint(&expr, &gold) {
                Ok(true) => {}
                Ok(false) => out.push(format!("gold labels violate constraint {src}")),
                Err(err) => out.push(format!("constraint {src}: {err}")),
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Vocabulary and tokenization

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
pub const BRK_ID: u32 = 4;
pub const MARK_ID: u32 = 5;
pub const PROP_ID: u32 = 6;
pub const RESERVED_TOKENS: [&str; 7] = ["[PAD]", "[UNK]", "[BOS]", "[EOS]", BREAKPOINT, MARK, "[PROP]"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRecord", into = "VocabRecord")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabRecord {
    tokens: Vec<String>,
}

impl From<VocabRecord> for Vocab {
    fn from(r: VocabRecord) -> Self {
        Vocab::from_tokens(r.tokens)
    }
}

impl From<Vocab> for VocabRecord {
    fn from(v: Vocab) -> Self {
        VocabRecord { tokens: v.tokens }
    }
}

impl Vocab {
    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.get(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(RESERVED_TOKENS[UNK_ID as usize])
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        self.encode(&text.split_whitespace().collect::<Vec<_>>())
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Hex SHA-256 over the id-ordered token list.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tokens {
            hasher.update(t.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }
}

/// Vocabulary over story, proposition, question and answer tokens plus the
/// generation targets derived from them. Ids follow the reserved block and
/// are ordered by descending frequency, then lexicographically.
pub fn build_vocab(d: &Dataset) -> Result<Vocab, CorpusError> {
    build_vocab_from(d.examples.iter())
}

pub fn build_vocab_from<'a>(examples: impl Iterator<Item = &'a Example>) -> Result<Vocab, CorpusError> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut bump = |t: &str| {
        if !RESERVED_TOKENS.contains(&t) {
            *counts.entry(t.to_string()).or_default() += 1;
        }
    };
    let mut any = false;
    for ex in examples {
        any = true;
        ex.story_tokens.iter().for_each(|t| bump(t));
        for bp in &ex.breakpoints {
            for p in &bp.propositions {
                p.text.split_whitespace().for_each(&mut bump);
            }
        }
        for qa in &ex.qa {
            qa.question.split_whitespace().for_each(&mut bump);
            qa.answer.split_whitespace().for_each(&mut bump);
        }
        if ex.has_entity_types() {
            for j in 1..=ex.breakpoints.len() {
                ex.abstract_tokens(ex.event_tokens(j)).iter().for_each(|t| bump(t));
            }
        }
    }
    if !any {
        return Err(CorpusError::EmptyDataset);
    }
    for t in [EVENT_PROMPT, ABSTRACT_PROMPT] {
        counts.entry(t.to_string()).or_insert(0);
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = RESERVED_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _)| t))
        .collect();
    Ok(Vocab::from_tokens(tokens))
}

/// Whitespace and punctuation splitter that lower-cases everything except
/// known entity names.
#[derive(Clone, Debug, Default)]
pub struct Tokenizer {
    entities: HashMap<String, String>,
}

impl Tokenizer {
    pub fn new<I, S>(entities: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let entities = entities
            .into_iter()
            .map(Into::into)
            .map(|e: String| (e.to_lowercase(), e))
            .collect();
        Tokenizer { entities }
    }

    /// Treats every vocabulary token containing an upper-case letter as an
    /// entity name.
    pub fn from_vocab(vocab: &Vocab) -> Self {
        Tokenizer::new(
            vocab
                .tokens()
                .iter()
                .filter(|t| !t.starts_with('[') && t.chars().any(char::is_uppercase))
                .cloned(),
        )
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            if RESERVED_TOKENS.contains(&word) || word.starts_with('$') {
                out.push(word.to_string());
                continue;
            }
            let mut current = String::new();
            let mut chars = word.chars().peekable();
            while let Some(c) = chars.next() {
                if c == '\'' && chars.peek() == Some(&'s') {
                    self.flush(&mut current, &mut out);
                    chars.next();
                    out.push("'s".to_string());
                } else if c.is_ascii_punctuation() && c != '-' {
                    self.flush(&mut current, &mut out);
                    out.push(c.to_string());
                } else {
                    current.push(c);
                }
            }
            self.flush(&mut current, &mut out);
        }
        out
    }

    fn flush(&self, current: &mut String, out: &mut Vec<String>) {
        if current.is_empty() {
            return;
        }
        let lower = current.to_lowercase();
        let tok = self.entities.get(&lower).cloned().unwrap_or(lower);
        out.push(tok);
        current.clear();
    }
}

// ---------------------------------------------------------------------------
// Splitting

#[derive(Clone, Debug, PartialEq)]
pub enum SplitPolicy {
    /// Seeded i.i.d. partition; fractions are normalized and the remainder
    /// after rounding goes to test.
    Ratio { train: f64, dev: f64, test: f64, seed: u64 },
    /// Examples whose `meta[key]` is in `held_out` go to test; the rest are
    /// split i.i.d. into train and dev.
    MetaKey { key: String, held_out: Vec<String>, dev_fraction: f64, seed: u64 },
}

pub fn split_dataset(d: &Dataset, policy: &SplitPolicy) -> Result<(Dataset, Dataset, Dataset), CorpusError> {
    let n = d.examples.len();
    let (mut train, mut dev, mut test) = (Vec::new(), Vec::new(), Vec::new());
    match policy {
        SplitPolicy::Ratio { train: a, dev: b, test: c, seed } => {
            let total = a + b + c;
            let n_train = ((a / total) * n as f64).round() as usize;
            let n_dev = (((b / total) * n as f64).round() as usize).min(n - n_train.min(n));
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
            train.extend_from_slice(&order[..n_train.min(n)]);
            dev.extend_from_slice(&order[n_train.min(n)..(n_train + n_dev).min(n)]);
            test.extend_from_slice(&order[(n_train + n_dev).min(n)..]);
        }
        SplitPolicy::MetaKey { key, held_out, dev_fraction, seed } => {
            let mut rest = Vec::new();
            for (i, ex) in d.examples.iter().enumerate() {
                match ex.meta.get(key) {
                    Some(v) if held_out.contains(v) => test.push(i),
                    _ => rest.push(i),
                }
            }
            rest.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
            let n_dev = (dev_fraction * rest.len() as f64).round() as usize;
            dev.extend_from_slice(&rest[..n_dev.min(rest.len())]);
            train.extend_from_slice(&rest[n_dev.min(rest.len())..]);
        }
    }
    if train.is_empty() {
        return Err(CorpusError::EmptyTrainSplit);
    }
    let take = |mut idx: Vec<usize>| {
        idx.sort_unstable();
        Dataset {
            examples: idx.into_iter().map(|i| d.examples[i].clone()).collect(),
            vocab: d.vocab.clone(),
            meta: d.meta.clone(),
        }
    };
    Ok((take(train), take(dev), take(test)))
}
