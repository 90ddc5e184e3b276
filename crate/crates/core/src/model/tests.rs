use ndarray::{array, s, Array2};

use super::*;
use crate::corpus::{build_vocab_from, Example};
use crate::worldgen::{gen_microworld_example, MicroworldConfig};

fn fixture(n_events: usize) -> (Example, Vocab) {
    let cfg = MicroworldConfig { n_events, ..Default::default() };
    let ex = gen_microworld_example(&cfg, 3).unwrap();
    let vocab = build_vocab_from(std::iter::once(&ex)).unwrap();
    (ex, vocab)
}

fn small() -> ModelConfig {
    ModelConfig { d_model: 16, n_layers: 1, n_heads: 2, d_ffn: 32, decoder_layers: 1, dropout: 0.0, ..Default::default() }
}

fn model(cfg: ModelConfig) -> (Model<f64>, Example) {
    let (ex, vocab) = fixture(6);
    (Model::new(cfg, vocab, 11).unwrap(), ex)
}

fn unit_rows(a: &Array2<f64>) -> bool {
    a.outer_iter().all(|r| (r.dot(&r).sqrt() - 1.0).abs() < 1e-9)
}

#[test]
fn default_size_stays_under_budget() {
    let (_, vocab) = fixture(20);
    let m = Model::<f32>::new(ModelConfig::default(), vocab, 0).unwrap();
    assert!(m.num_params() < 2_000_000, "{}", m.num_params());
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        ModelConfig { n_heads: 3, ..small() },
        ModelConfig { n_layers: 0, ..small() },
        ModelConfig { dropout: 1.0, ..small() },
    ] {
        assert!(matches!(cfg.validate(), Err(ModelError::InvalidConfig(_))));
    }
}

#[test]
fn shapes_and_unit_norms() {
    let (m, ex) = model(small());
    let states = m.encode_story(&ex.story_tokens).unwrap();
    assert_eq!(states.dim(), (ex.story_tokens.len(), 16));
    let init = m.pool_breakpoints(&states, &ex.marker_positions()).unwrap();
    assert_eq!(init.dim(), (6, 16));
    assert!(unit_rows(&init));
    let ctx = m.self_attend_breakpoints(&init).unwrap();
    assert_eq!(ctx.dim(), (6, 16));
    let props = annotated_queries(&ex).into_iter().map(|(_, p)| p).collect::<Vec<_>>();
    let c = m.encode_propositions(&props).unwrap();
    assert_eq!(c.nrows(), props.len());
    assert!(unit_rows(&c));
}

#[test]
fn future_breakpoints_never_influence_earlier_ones() {
    let (m, ex) = model(small());
    let states = m.encode_story(&ex.story_tokens).unwrap();
    let init = m.pool_breakpoints(&states, &ex.marker_positions()).unwrap();
    let base = m.self_attend_breakpoints(&init).unwrap();
    for k in 0..init.nrows() {
        let mut pert = init.clone();
        for j in k..init.nrows() {
            pert.row_mut(j).mapv_inplace(|x| -x * 3.0 + 0.5);
        }
        let out = m.self_attend_breakpoints(&pert).unwrap();
        assert_eq!(out.slice(s![..k, ..]), base.slice(s![..k, ..]), "k={k}");
        if k + 1 < init.nrows() {
            assert_ne!(out.row(k + 1), base.row(k + 1));
        }
    }
}

#[test]
fn disabled_breakpoint_attention_yields_zeros() {
    let (m, ex) = model(ModelConfig { brk_self_attn: false, ..small() });
    let states = m.encode_story(&ex.story_tokens).unwrap();
    let init = m.pool_breakpoints(&states, &ex.marker_positions()).unwrap();
    assert!(m.self_attend_breakpoints(&init).unwrap().iter().all(|x| *x == 0.0));
}

#[test]
fn zero_matrices_score_the_bias() {
    let (mut m, ex) = model(small());
    for y in 0..3 {
        m.params.get_mut(m.ids.bilinear[y]).fill(0.0);
    }
    *m.params.get_mut(m.ids.bilinear_bias) = array![[0.3, -1.0, 2.0]];
    let q = annotated_queries(&ex);
    let pred = m.predict_beliefs(&ex, &q).unwrap();
    let want = BeliefDistribution::from_logits([0.3, -1.0, 2.0]);
    for b in &pred.beliefs {
        for i in 0..3 {
            assert!((b.probs[i] - want.probs[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn scores_are_bilinear_in_the_proposition() {
    let (m, _) = model(small());
    let f = Array1::from_shape_fn(32, |i| (i as f64 * 0.37).sin());
    let c = Array1::from_shape_fn(16, |i| (i as f64 * 0.91).cos());
    let a = m.params.get(m.ids.bilinear_bias).row(0).to_owned();
    let base = m.score_proposition(f.view(), c.view()).unwrap();
    let scaled = m.score_proposition(f.view(), (&c * -2.5).view()).unwrap();
    for y in 0..3 {
        assert!(((scaled[y] - a[y]) - -2.5 * (base[y] - a[y])).abs() < 1e-10);
    }
    assert!(m.score_proposition(c.view(), c.view()).is_err());
}

#[test]
fn one_dimensional_hand_case() {
    let (mut m, _) = model(ModelConfig { d_model: 1, n_heads: 1, ..small() });
    *m.params.get_mut(m.ids.bilinear[0]) = array![[0.5], [1.0]];
    *m.params.get_mut(m.ids.bilinear[1]) = array![[0.0], [0.0]];
    *m.params.get_mut(m.ids.bilinear[2]) = array![[-1.0], [0.0]];
    *m.params.get_mut(m.ids.bilinear_bias) = array![[0.0, 0.0, 0.0]];
    let s = m.score_proposition(array![1.0, 2.0].view(), array![1.0].view()).unwrap();
    assert_eq!(s, [2.5, 0.0, -1.0]);
}

#[test]
fn ties_break_towards_entailed_then_contradicted() {
    assert_eq!(BeliefDistribution::from_logits([1.0, 1.0, 1.0]).label(), TruthLabel::Entailed);
    assert_eq!(BeliefDistribution::from_logits([0.0, 1.0, 1.0]).label(), TruthLabel::Contradicted);
    assert_eq!(BeliefDistribution::from_logits([0.0, 0.0, 1.0]).label(), TruthLabel::Unknown);
}

#[test]
fn predictions_match_composed_building_blocks() {
    let (m, ex) = model(small());
    let q = annotated_queries(&ex);
    let pred = m.predict_beliefs(&ex, &q).unwrap();
    assert_eq!(pred.beliefs.len(), q.len());
    let states = m.encode_story(&ex.story_tokens).unwrap();
    let init = m.pool_breakpoints(&states, &ex.marker_positions()).unwrap();
    let ctx = m.self_attend_breakpoints(&init).unwrap();
    for (i, (j, p)) in q.iter().enumerate() {
        let mut f = init.row(j - 1).to_vec();
        f.extend(ctx.row(j - 1).iter());
        let c = m.encode_proposition(p).unwrap();
        let logits = m.score_proposition(Array1::from(f).view(), c.view()).unwrap();
        let want = BeliefDistribution::from_logits(logits);
        for y in 0..3 {
            assert!((pred.beliefs[i].probs[y] - want.probs[y]).abs() < 1e-9);
        }
    }
}

#[test]
fn packed_propositions_match_individual_encodings() {
    for pooling in [PropPooling::Prefix, PropPooling::Mean] {
        let (m, ex) = model(ModelConfig { prop_pooling: pooling, ..small() });
        let props: Vec<Vec<String>> = annotated_queries(&ex).into_iter().map(|(_, p)| p).take(30).collect();
        let packed = m.encode_propositions(&props).unwrap();
        for (i, p) in props.iter().enumerate() {
            let alone = m.encode_proposition(p).unwrap();
            let diff = (&packed.row(i) - &alone).mapv(f64::abs).sum();
            assert!(diff < 1e-9, "{pooling:?} {i}: {diff}");
        }
    }
}

#[test]
fn single_read_counts_and_cache_hits() {
    let (m, ex) = model(small());
    let p = prop_tokens(&ex.breakpoints[0].propositions[0].text);
    let q = vec![(1, p.clone()), (2, p.clone()), (3, p)];
    let pred = m.predict_beliefs(&ex, &q).unwrap();
    assert_eq!(pred.stats, CallStats { story_encodes: 1, prop_encodes: 1, cache_hits: 2 });
    let mp = m.multipass_predict(&ex, &q).unwrap();
    assert_eq!(mp.stats.story_encodes, 3);
    assert_eq!(mp.beliefs.len(), 3);
}

#[test]
fn multipass_encodes_once_per_breakpoint() {
    let (m, ex) = model(small());
    let q = annotated_queries(&ex);
    let mp = m.multipass_predict(&ex, &q).unwrap();
    assert_eq!(mp.stats.story_encodes, ex.breakpoints.len());
    let marked = marked_story(&ex, 2);
    assert_eq!(marked.iter().filter(|t| *t == crate::corpus::MARK).count(), 1);
    assert_eq!(marked.iter().filter(|t| *t == crate::corpus::BREAKPOINT).count(), ex.breakpoints.len() - 1);
}

#[test]
fn prop_only_is_story_independent_and_deterministic() {
    let (m, ex) = model(small());
    let p = prop_tokens(&ex.breakpoints[0].propositions[0].text);
    assert_eq!(m.prop_only_predict(&p).unwrap(), m.prop_only_predict(&p).unwrap());
}

#[test]
fn bad_inputs_are_reported() {
    let (m, ex) = model(ModelConfig { max_len: 20, ..small() });
    assert!(matches!(m.encode_story(&ex.story_tokens), Err(ModelError::Overlength { .. })));
    let (m, ex) = model(small());
    assert!(matches!(m.predict_beliefs(&ex, &[(0, vec!["x".into()])]), Err(ModelError::BadQuery { .. })));
    assert!(matches!(m.predict_beliefs(&ex, &[(7, vec!["x".into()])]), Err(ModelError::BadQuery { .. })));
    assert!(matches!(m.encode_propositions(&[vec![]]), Err(ModelError::EmptyProposition)));
    let (m, ex) = model(ModelConfig { max_breakpoints: 4, ..small() });
    let q = annotated_queries(&ex);
    assert!(matches!(m.predict_beliefs(&ex, &q), Err(ModelError::TooManyBreakpoints { .. })));
    let states = m.encode_story(&ex.story_tokens).unwrap();
    assert!(matches!(m.pool_breakpoints(&states, &[999]), Err(ModelError::PositionOutOfRange { .. })));
    let zero = Array2::zeros((3, 16));
    assert!(matches!(m.pool_breakpoints(&zero, &[1]), Err(ModelError::ZeroNorm(1))));
}

#[test]
fn teacher_forcing_layout() {
    let (m, _) = model(small());
    let prompt = vec!["where".to_string(), "is".to_string()];
    let target = vec!["kitchen".to_string()];
    let (input, targets) = m.teacher_forcing(&prompt, &target);
    let id = |t: &str| m.vocab.id(t) as usize;
    assert_eq!(input, vec![BOS_ID as usize, id("where"), id("is"), id("kitchen")]);
    assert_eq!(targets, vec![None, None, Some(id("kitchen")), Some(EOS_ID as usize)]);
}

#[test]
fn decoding_is_deterministic_and_bounded() {
    let (m, ex) = model(ModelConfig { max_decode_len: 5, ..small() });
    let states = m.encode_story(&ex.story_tokens).unwrap();
    let cond = Conditioning::Tokens(states);
    let prompt = vec!["where".to_string()];
    let a = m.decode_text(&cond, &prompt).unwrap();
    assert_eq!(a, m.decode_text(&cond, &prompt).unwrap());
    assert!(a.tokens.len() <= 5);
    assert_eq!(a.truncated, a.tokens.len() == 5);
    let row = Array1::from_elem(16, 0.1);
    assert!(m.decode_text(&Conditioning::Breakpoints(vec![row.clone(), row]), &prompt).is_ok());
    assert!(matches!(m.decode_text(&Conditioning::Breakpoints(vec![]), &prompt), Err(ModelError::EmptyConditioning)));
}

#[test]
fn checkpoint_round_trip_reproduces_predictions() {
    let (ex, vocab) = fixture(6);
    let m = Model::<f32>::new(small(), vocab, 5).unwrap();
    let mut buf = Vec::new();
    m.write_checkpoint(&mut buf).unwrap();
    let back = Model::<f32>::read_checkpoint(&mut buf.as_slice()).unwrap();
    assert_eq!(back.cfg, m.cfg);
    assert_eq!(back.vocab, m.vocab);
    let q = annotated_queries(&ex);
    assert_eq!(back.predict_beliefs(&ex, &q).unwrap(), m.predict_beliefs(&ex, &q).unwrap());
    let mut corrupt = buf.clone();
    corrupt[0] = b'X';
    assert!(matches!(Model::<f32>::read_checkpoint(&mut corrupt.as_slice()), Err(ModelError::Checkpoint(_))));
    let mut wrong_version = buf.clone();
    wrong_version[8] = 9;
    assert!(Model::<f32>::read_checkpoint(&mut wrong_version.as_slice()).is_err());
    assert!(Model::<f32>::read_checkpoint(&mut &buf[..buf.len() - 3]).is_err());
}
