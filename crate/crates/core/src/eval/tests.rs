use super::*;
use crate::corpus::Proposition;
use TruthLabel::*;

fn story(id: &str, labels: &[(&str, TruthLabel)]) -> Example {
    let tokens = ["John", "moved", "to", "the", "kitchen", ".", "[B]"].map(String::from).to_vec();
    let props = labels.iter().map(|(t, l)| Proposition::new(*t, *l)).collect();
    let mut ex = Example::from_parts(id, tokens, vec![props]);
    ex.constraints.push(r#"(implies (E 1 "a") (E 1 "b"))"#.into());
    ex
}

fn four_stories() -> Dataset {
    Dataset::new((0..4).map(|i| story(&format!("s{i}"), &[("a", Entailed), ("b", Entailed)])).collect())
}

fn flip(dump: &mut PredictionDump, id: &str, text: &str, to: TruthLabel) {
    let e = dump.examples.iter_mut().find(|e| e.id == id).unwrap();
    let p = e.props.iter_mut().find(|p| p.text == text).unwrap();
    p.label = to;
}

#[test]
fn accuracy_counts_every_pair() {
    let data = Dataset::new(vec![story("x", &[("a", Entailed), ("b", Entailed), ("c", Contradicted), ("d", Entailed)])]);
    let mut dump = gold_dump(&data);
    assert_eq!(prop_accuracy(&dump, &data).unwrap(), Some(1.0));
    flip(&mut dump, "x", "c", Entailed);
    assert_eq!(prop_accuracy(&dump, &data).unwrap(), Some(0.75));
    dump.examples[0].props.pop();
    assert!(matches!(prop_accuracy(&dump, &data), Err(EvalError::Missing(_))));
}

#[test]
fn majority_predictor_scores_the_majority_share() {
    let data = Dataset::new(vec![
        story("x", &[("a", Entailed), ("b", Contradicted), ("c", Entailed)]),
        story("y", &[("a", Entailed), ("b", Contradicted)]),
    ]);
    let mut dump = gold_dump(&data);
    for e in &mut dump.examples {
        for p in &mut e.props {
            p.label = Entailed;
        }
    }
    assert_eq!(prop_accuracy(&dump, &data).unwrap(), Some(3.0 / 5.0));
}

#[test]
fn exact_match_normalization() {
    assert_eq!(em_accuracy(&["kitchen", "garden"], &["kitchen", "hallway"]).unwrap(), 0.5);
    assert_eq!(em_accuracy(&["Kitchen "], &["kitchen"]).unwrap(), 1.0);
    assert_eq!(em_accuracy(&[""], &["kitchen"]).unwrap(), 0.0);
    assert!(em_accuracy(&["a"], &[]).is_err());
}

#[test]
fn rho_of_gold_is_zero_and_one_flip_in_four_is_a_quarter() {
    let data = four_stories();
    let mut dump = gold_dump(&data);
    assert_eq!(global_consistency(&dump, &data).unwrap(), 0.0);
    flip(&mut dump, "s2", "b", Contradicted);
    assert_eq!(global_consistency(&dump, &data).unwrap(), 0.25);
    // An unknown antecedent makes the implication vacuous again.
    flip(&mut dump, "s2", "a", Unknown);
    assert_eq!(global_consistency(&dump, &data).unwrap(), 0.0);
}

#[test]
fn rho_of_gold_is_zero_on_generated_data() {
    use crate::worldgen::{gen_kinship_example, gen_microworld_example, KinshipConfig, MicroworldConfig};
    let mw = MicroworldConfig::default();
    let kin = KinshipConfig { k: 4, ..Default::default() };
    let mut examples: Vec<Example> = (0..10).map(|i| gen_microworld_example(&mw, i).unwrap()).collect();
    examples.extend((0..10).map(|i| gen_kinship_example(&kin, i).unwrap()));
    let data = Dataset::new(examples);
    assert_eq!(global_consistency(&gold_dump(&data), &data).unwrap(), 0.0);
}

fn dist(e: f64) -> BeliefDistribution {
    BeliefDistribution { probs: [e, (1.0 - e) / 2.0, (1.0 - e) / 2.0] }
}

#[test]
fn kclass_takes_the_most_entailed_candidate() {
    let c = |es: &[f64]| es.iter().map(|e| (String::new(), dist(*e))).collect::<Vec<_>>();
    assert_eq!(kclass_resolve(&c(&[0.2, 0.7, 0.1])).unwrap(), 1);
    assert_eq!(kclass_resolve(&c(&[0.3])).unwrap(), 0);
    assert_eq!(kclass_resolve(&c(&[0.5, 0.5])).unwrap(), 0);
    assert!(matches!(kclass_resolve(&[]), Err(EvalError::NoCandidates)));
    let raw = [0.12, 0.44, 0.43, 0.05];
    let squashed: Vec<f64> = raw.iter().map(|x| x * x * 0.5).collect();
    assert_eq!(kclass_resolve(&c(&raw)).unwrap(), kclass_resolve(&c(&squashed)).unwrap());
}

#[test]
fn tiers_gate_on_lower_tiers() {
    let pair = |a, b, c| PairOutcome { plausible_chosen: a, conflict_found: b, states_correct: c };
    let t = tiered_eval(&[pair(true, true, true), pair(true, false, false)]).unwrap();
    assert_eq!((t.plausibility, t.consistency, t.verifiability), (1.0, 0.5, 0.5));
    let t = tiered_eval(&[pair(false, true, true), pair(true, true, false)]).unwrap();
    assert_eq!((t.plausibility, t.consistency, t.verifiability), (0.5, 0.5, 0.0));
    assert!(matches!(tiered_eval(&[]), Err(EvalError::NoPairs)));
}

#[test]
fn conflict_pairs_are_read_off_the_dump() {
    use crate::worldgen::{gen_conflict_pair, MicroworldConfig};
    let cfg = MicroworldConfig { n_events: 8, ..Default::default() };
    let mut examples = Vec::new();
    for i in 0..3 {
        examples.extend(gen_conflict_pair(&cfg, i).unwrap().to_examples(i % 2 == 1));
    }
    let data = Dataset::new(examples);
    let mut dump = gold_dump(&data);
    let t = tiered_eval(&pair_outcomes(&dump, &data).unwrap()).unwrap();
    assert_eq!((t.plausibility, t.consistency, t.verifiability), (1.0, 1.0, 1.0));
    let locate = data.examples.iter().find(|e| e.meta.get("role").is_some_and(|r| r == "implausible")).unwrap();
    let d = dump.examples.iter_mut().find(|d| d.id == locate.id).unwrap();
    d.qa[0].answer = "1 , 2".into();
    if locate.qa[0].answer == "1 , 2" {
        d.qa[0].answer = "1 , 3".into();
    }
    let t = tiered_eval(&pair_outcomes(&dump, &data).unwrap()).unwrap();
    assert!((t.consistency - 2.0 / 3.0).abs() < 1e-12);
    assert!(t.verifiability <= t.consistency && t.consistency <= t.plausibility);
    let report = metrics_report(&dump, &data, None).unwrap();
    assert!(report.tiered.is_some());
}

#[test]
fn dump_round_trips_through_jsonl() {
    let data = four_stories();
    let dump = gold_dump(&data);
    let mut buf = Vec::new();
    dump.write_jsonl(&mut buf).unwrap();
    assert_eq!(PredictionDump::read_jsonl(buf.as_slice()).unwrap(), dump);
}

#[test]
fn fraction_subsets_are_seeded_prefixes() {
    assert_eq!(fraction_subset(10, 1.0, 3), (0..10).collect::<Vec<_>>());
    let a = fraction_subset(10, 0.4, 3);
    assert_eq!(a.len(), 4);
    assert_eq!(a, fraction_subset(10, 0.4, 3));
    let b = fraction_subset(10, 0.6, 3);
    assert!(a.iter().all(|i| b.contains(i)));
}

#[test]
fn ablation_deltas_are_ablated_minus_base() {
    let base = DevMetrics { prop_accuracy: 0.9, rho: 0.1, ..Default::default() };
    let abl = DevMetrics { prop_accuracy: 0.85, rho: 0.2, ..Default::default() };
    let r = ablation_row("- brk self-attn", &abl, &base);
    assert!((r.delta_accuracy - -0.05).abs() < 1e-12);
    assert!((r.delta_rho - 0.1).abs() < 1e-12);
    let csv = ablation_csv(&[r]);
    assert!(csv.starts_with("variant,prop_accuracy,rho,delta_accuracy,delta_rho\n- brk self-attn,0.850000"));
}
