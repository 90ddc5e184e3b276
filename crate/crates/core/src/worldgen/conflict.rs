//! Plausible/implausible story pairs: the implausible member swaps one
//! event for one whose precondition contradicts an earlier sentence.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::microworld::{
    had_prop, has_prop, loc_prop, oracle as world, replay, sample_story, was_in_prop, Event, EventKind,
    MicroworldConfig, Story,
};
use super::{example_rng, WorldgenError};
use crate::corpus::{Example, QaPair, TruthLabel, BREAKPOINT};

pub const PLAUSIBLE_PROMPT: &str = "$plaus";
pub const CONFLICT_PROMPT: &str = "$conflict";

/// A proposition that explains the conflict, at a 1-based breakpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevantProposition {
    pub breakpoint: usize,
    pub text: String,
    pub label: TruthLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConflictPair {
    pub plausible: Example,
    pub implausible: Example,
    /// 1-based sentence indices (i, j), i < j.
    pub conflict: (usize, usize),
    pub relevant: Vec<RelevantProposition>,
}

struct Injection {
    j: usize,
    event: Event,
    /// Fluent established at i that the replacement contradicts.
    effect: String,
    precondition: String,
}

/// Replacement candidates at position `j` whose precondition fails in the
/// state before `j`.
fn injections(cfg: &MicroworldConfig, story: &Story, j: usize) -> Vec<Injection> {
    let pre = &story.states[j - 1];
    let mut out = Vec::new();
    for (o, h) in &pre.holder {
        for q in cfg.persons.iter().map(|p| &p.name).filter(|q| *q != h) {
            let effect = has_prop(h, o);
            out.push(Injection {
                j,
                event: Event::Drop { person: q.clone(), object: o.clone() },
                effect: effect.clone(),
                precondition: had_prop(q, o),
            });
            for r in cfg.persons.iter().map(|p| &p.name).filter(|r| *r != q) {
                out.push(Injection {
                    j,
                    event: Event::Give { person: q.clone(), recipient: r.clone(), object: o.clone() },
                    effect: effect.clone(),
                    precondition: had_prop(q, o),
                });
            }
        }
        let here = &pre.person_location[h];
        for (r, there) in &pre.person_location {
            if r != h && there != here {
                out.push(Injection {
                    j,
                    event: Event::Give { person: h.clone(), recipient: r.clone(), object: o.clone() },
                    effect: loc_prop(r, there),
                    precondition: was_in_prop(r, here),
                });
            }
        }
    }
    out
}

/// Latest sentence before `j` after which `effect` holds and before which it
/// did not.
fn establishing_sentence(cfg: &MicroworldConfig, story: &Story, j: usize, effect: &str) -> Option<usize> {
    let holds = |t: usize| {
        let s = &story.states[t];
        let dummy = (story.records[t.max(1) - 1].event.clone(), false);
        world::label_of(cfg, effect, s, s, &dummy, false) == Some(TruthLabel::Entailed)
    };
    (1..j).rev().find(|&i| holds(i) && !holds(i - 1))
}

fn with_sentence_numbers(ex: &Example) -> Example {
    let mut out = ex.clone();
    let mut tokens = Vec::with_capacity(ex.story_tokens.len() + ex.breakpoints.len());
    let mut n = 1;
    let mut at_start = true;
    for t in &ex.story_tokens {
        if at_start {
            tokens.push(n.to_string());
            n += 1;
        }
        at_start = t == BREAKPOINT;
        tokens.push(t.clone());
    }
    let props = ex.breakpoints.iter().map(|b| b.propositions.clone()).collect();
    let rebuilt = Example::from_parts(ex.id.clone(), tokens, props);
    out.story_tokens = rebuilt.story_tokens;
    out.breakpoints = rebuilt.breakpoints;
    out
}

pub fn gen_conflict_pair(cfg: &MicroworldConfig, index: u64) -> Result<ConflictPair, WorldgenError> {
    cfg.validate()?;
    let mut mix = cfg.event_mix.clone();
    // Plain events only; coreference is orthogonal to this task.
    mix.retain(|k, _| !k.is_coref());
    if mix.values().sum::<f64>() <= 0.0 {
        mix.insert(EventKind::Move, 1.0);
    }
    let mut rng = example_rng(cfg.seed, "conflict", index);
    for _ in 0..=cfg.max_retries {
        let story = sample_story(cfg, &mix, &mut rng)?;
        let mut candidates: Vec<Injection> = (2..=story.records.len()).flat_map(|j| injections(cfg, &story, j)).collect();
        candidates.shuffle(&mut rng);
        for inj in candidates {
            let Some(i) = establishing_sentence(cfg, &story, inj.j, &inj.effect) else { continue };
            let mut events: Vec<(Event, bool, String)> = story
                .records
                .iter()
                .map(|r| (r.event.clone(), r.pronoun, r.template.clone()))
                .collect();
            let template = match inj.event {
                Event::Drop { .. } => "{P} dropped the {O}",
                _ => "{P} gave the {O} to {Q}",
            };
            events[inj.j - 1] = (inj.event.clone(), false, template.to_string());
            let Ok(bad) = replay(cfg, &events, Some(inj.j)) else { continue };
            return Ok(assemble(cfg, &story, &bad, (i, inj.j), &inj, index, &mut rng));
        }
    }
    Err(WorldgenError::RetriesExhausted(cfg.max_retries))
}

fn assemble(
    cfg: &MicroworldConfig,
    good: &Story,
    bad: &Story,
    (i, j): (usize, usize),
    inj: &Injection,
    index: u64,
    rng: &mut ChaCha8Rng,
) -> ConflictPair {
    let id = format!("conflict-{}-{index}", cfg.seed);
    // Same annotation stream for both members, so the shared prefix carries
    // identical propositions.
    let mut rng_b = rng.clone();
    let mut plausible = super::microworld::story_to_example(cfg, good, format!("{id}-p"), rng, false);
    let mut implausible = super::microworld::story_to_example(cfg, bad, format!("{id}-b"), &mut rng_b, false);
    for ex in [&mut plausible, &mut implausible] {
        ex.meta.insert("task".into(), "conflict".into());
        ex.meta.insert("pair".into(), id.clone());
    }
    plausible.meta.insert("role".into(), "plausible".into());
    implausible.meta.insert("role".into(), "implausible".into());
    let relevant = vec![
        RelevantProposition { breakpoint: i, text: inj.effect.clone(), label: TruthLabel::Entailed },
        RelevantProposition { breakpoint: j, text: inj.precondition.clone(), label: TruthLabel::Contradicted },
    ];
    implausible.meta.insert("conflict".into(), format!("{i} {j}"));
    implausible.meta.insert("relevant".into(), serde_json::to_string(&relevant).expect("serializable"));
    ConflictPair { plausible, implausible, conflict: (i, j), relevant }
}

impl ConflictPair {
    /// Dataset rows: the annotated plausible story, the two-story
    /// plausibility prompt, and the numbered implausible story with the
    /// conflict-localization prompt.
    pub fn to_examples(&self, b_first: bool) -> Vec<Example> {
        let pair_id = self.plausible.meta["pair"].clone();
        let surface = |ex: &Example| {
            ex.story_tokens.iter().filter(|t| *t != BREAKPOINT).cloned().collect::<Vec<_>>()
        };
        let (first, second) =
            if b_first { (&self.implausible, &self.plausible) } else { (&self.plausible, &self.implausible) };
        let mut tokens = vec!["(A)".to_string()];
        tokens.extend(surface(first));
        tokens.push("(B)".into());
        tokens.extend(surface(second));
        let mut choose = Example::from_parts(format!("{pair_id}-a"), tokens, vec![]);
        choose.qa.push(QaPair {
            question: PLAUSIBLE_PROMPT.into(),
            answer: if b_first { "B" } else { "A" }.into(),
        });
        choose.meta = self.implausible.meta.clone();
        choose.meta.insert("role".into(), "choice".into());

        let mut locate = with_sentence_numbers(&self.implausible);
        locate.qa.push(QaPair {
            question: CONFLICT_PROMPT.into(),
            answer: format!("{} , {}", self.conflict.0, self.conflict.1),
        });
        vec![self.plausible.clone(), choose, locate]
    }
}

/// Independent check of a pair: both members re-derive under the world
/// oracle, the plausible member executes cleanly, the implausible member
/// first fails at j, and the relevant propositions carry their labels.
pub fn oracle_check_pair(pair: &ConflictPair) -> Result<(), WorldgenError> {
    let mismatch = |detail: String| WorldgenError::OracleMismatch { id: pair.implausible.id.clone(), detail };
    world::check_example(&pair.plausible)?;
    world::check_example(&pair.implausible)?;
    let cfg = MicroworldConfig::from_entity_meta(&pair.implausible.meta)?;
    let good = world::parse_events(&cfg, &pair.plausible)?;
    let (_, good_failed) = world::trace(&cfg, &good);
    if good_failed.iter().any(|f| *f) {
        return Err(mismatch("plausible story violates a precondition".into()));
    }
    let bad = world::parse_events(&cfg, &pair.implausible)?;
    let (states, failed) = world::trace(&cfg, &bad);
    let (i, j) = pair.conflict;
    if failed.iter().position(|f| *f) != Some(j - 1) || failed.iter().filter(|f| **f).count() != 1 {
        return Err(mismatch(format!("expected the only failing event at {j}")));
    }
    for r in &pair.relevant {
        let e = &bad[r.breakpoint - 1];
        let derived = world::label_of(
            &cfg,
            &r.text,
            &states[r.breakpoint - 1],
            &states[r.breakpoint],
            e,
            failed[r.breakpoint - 1],
        );
        if derived != Some(r.label) {
            return Err(mismatch(format!("relevant '{}' derives {:?}", r.text, derived)));
        }
    }
    let effect = &pair.relevant[0].text;
    let holds = |t: usize| {
        world::label_of(&cfg, effect, &states[t], &states[t], &bad[t.max(1) - 1], false) == Some(TruthLabel::Entailed)
    };
    if !(holds(i) && !holds(i - 1) && (i..j).all(holds)) {
        return Err(mismatch(format!("sentence {i} does not establish '{effect}' through {j}")));
    }
    for (a, b) in pair.plausible.breakpoints.iter().zip(&pair.implausible.breakpoints).take(j - 1) {
        if a.propositions != b.propositions {
            return Err(mismatch("shared prefix annotations differ".into()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::validate_example;
    use crate::worldgen::microworld::simulate_state;

    #[test]
    fn generated_pairs_pass_the_oracle() {
        let cfg = MicroworldConfig { n_events: 10, ..Default::default() };
        for k in 0..40 {
            let pair = gen_conflict_pair(&cfg, k).unwrap();
            let (i, j) = pair.conflict;
            assert!(i < j && j <= 10);
            oracle_check_pair(&pair).unwrap();
            assert!(validate_example(&pair.plausible).is_empty());
            assert!(validate_example(&pair.implausible).is_empty(), "{:?}", validate_example(&pair.implausible));
            // Past tense precondition, present tense effect.
            assert!(pair.relevant[1].text.contains(" had ") || pair.relevant[1].text.contains(" was "));
            assert!(pair.relevant[0].text.contains(" has ") || pair.relevant[0].text.contains(" is "));
            let n = pair.plausible.story_tokens.iter().position(|t| t == BREAKPOINT).unwrap();
            assert_eq!(pair.plausible.story_tokens[..n], pair.implausible.story_tokens[..n]);
            for ex in pair.to_examples(k % 2 == 0) {
                assert!(validate_example(&ex).is_empty(), "{}: {:?}", ex.id, validate_example(&ex));
            }
        }
    }

    #[test]
    fn grab_then_foreign_drop() {
        // Mary grabs the apple at 2; John drops it at 4.
        let cfg = MicroworldConfig::default();
        let ev = |e: Event, t: &str| (e, false, t.to_string());
        let events = vec![
            ev(Event::Move { person: "Mary".into(), location: "kitchen".into() }, "{P} went to the {L}"),
            ev(Event::Grab { person: "Mary".into(), object: "apple".into() }, "{P} grabbed the {O}"),
            ev(Event::Move { person: "John".into(), location: "garden".into() }, "{P} went to the {L}"),
            ev(Event::Drop { person: "John".into(), object: "apple".into() }, "{P} dropped the {O}"),
        ];
        let bad = replay(&cfg, &events, Some(4)).unwrap();
        assert_eq!(establishing_sentence(&cfg, &bad, 4, "Mary has the apple"), Some(2));
        let err = simulate_state(&cfg, &bad.records, 4).unwrap_err();
        assert!(matches!(err, WorldgenError::Precondition { index: 4, .. }));
        let inj = Injection {
            j: 4,
            event: events[3].0.clone(),
            effect: "Mary has the apple".into(),
            precondition: "John had the apple".into(),
        };
        let mut rng = example_rng(0, "t", 0);
        let pair = assemble(&cfg, &bad_prefix_story(&cfg), &bad, (2, 4), &inj, 0, &mut rng);
        assert_eq!(pair.conflict, (2, 4));
        oracle_check_pair(&pair).unwrap();
        let label = |bp: usize, t: &str| {
            pair.implausible.breakpoints[bp - 1].propositions.iter().find(|p| p.text == t).map(|p| p.label)
        };
        assert_eq!(label(2, "Mary has the apple"), Some(TruthLabel::Entailed));
        assert_eq!(label(4, "John had the apple"), Some(TruthLabel::Contradicted));
        assert_eq!(label(4, "John dropped something"), None);
    }

    fn bad_prefix_story(cfg: &MicroworldConfig) -> Story {
        let ev = |e: Event, t: &str| (e, false, t.to_string());
        replay(
            cfg,
            &[
                ev(Event::Move { person: "Mary".into(), location: "kitchen".into() }, "{P} went to the {L}"),
                ev(Event::Grab { person: "Mary".into(), object: "apple".into() }, "{P} grabbed the {O}"),
                ev(Event::Move { person: "John".into(), location: "garden".into() }, "{P} went to the {L}"),
                ev(Event::Drop { person: "Mary".into(), object: "apple".into() }, "{P} dropped the {O}"),
            ],
            None,
        )
        .unwrap()
    }
}
