//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//!
//! Training budgets can be shortened for quick looks with
//! `BPT_ACCEPT_TRAIN_S` (learnability and joint-training runs, default 1800)
//! and `BPT_ACCEPT_ABLATION_S` (each ablation run, default 300).
//!
//! The process fails when a property criterion fails. The two learnability
//! criteria (6 and 7) report their outcome without failing the process.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use bpt_core::constraints::{brute_force_eval, eval_constraint, Assignment, ConstraintExpr};
use bpt_core::corpus::{Dataset, Example, Proposition, TruthLabel};
use bpt_core::eval::{
    self, ablation_suite, efficiency_report, global_consistency, gold_dump, pair_outcomes, predict_dataset,
    prop_accuracy, tiered_eval, Ablation, PairOutcome, PredictionDump,
};
use bpt_core::exec::Exec;
use bpt_core::model::{BeliefDistribution, Mode, Model, ModelConfig};
use bpt_core::training::{grad_check, prop_loss, train, TrainConfig, Weights};
use bpt_core::worldgen::{
    conflict::oracle_check_pair, gen_conflict_pair, gen_kinship_example, gen_microworld_example, kinship, microworld,
    KinshipConfig, MicroworldConfig,
};
use sha2::{Digest, Sha256};

use TruthLabel::*;

struct Report {
    hard_failures: Vec<usize>,
}

impl Report {
    fn line(&mut self, n: usize, name: &str, pass: bool, hard: bool, detail: String) {
        println!("criterion {n:>2} {name:<34} {} ({detail})", if pass { "PASS" } else { "FAIL" });
        if hard && !pass {
            self.hard_failures.push(n);
        }
    }
}

fn env_secs(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn micro(n_events: usize, range: std::ops::Range<u64>) -> Dataset {
    let cfg = MicroworldConfig { n_events, ..Default::default() };
    Dataset::new(Exec::default().map(&range.collect::<Vec<_>>(), |i| gen_microworld_example(&cfg, *i).unwrap()))
}

// ---------------------------------------------------------------------------

fn generator_soundness(r: &mut Report) -> (Dataset, Dataset, Dataset) {
    let exec = Exec::default();
    let start = Instant::now();
    let idx: Vec<u64> = (0..1000).collect();
    let kin_cfg = |i: u64| KinshipConfig { k: 2 + (i % 4) as usize, ..Default::default() };
    let kin: Vec<Example> = exec.map(&idx, |i| gen_kinship_example(&kin_cfg(*i), *i).unwrap());
    let kin_bad = exec.map(&idx, |i| kinship::oracle::check_example(&kin_cfg(*i), &kin[*i as usize]).is_err());
    let mw = micro(20, 0..1000);
    let mw_bad = exec.map(&mw.examples, |e| microworld::oracle::check_example(e).is_err());
    let mw_cfg = MicroworldConfig { n_events: 8, ..Default::default() };
    let pairs = exec.map(&idx, |i| gen_conflict_pair(&mw_cfg, *i).unwrap());
    let pair_bad = exec.map(&pairs, |p| oracle_check_pair(p).is_err());
    let secs = start.elapsed().as_secs_f64();
    let bad = [kin_bad, mw_bad, pair_bad].iter().map(|v| v.iter().filter(|b| **b).count()).collect::<Vec<_>>();
    let conflict = Dataset::new(pairs.iter().enumerate().flat_map(|(i, p)| p.to_examples(i % 2 == 1)).collect());
    r.line(
        1,
        "generator/oracle soundness",
        bad.iter().all(|b| *b == 0) && secs < 120.0,
        true,
        format!("disagreements kinship {} microworld {} conflict {}; {secs:.1}s for 3x1000", bad[0], bad[1], bad[2]),
    );
    (Dataset::new(kin), mw, conflict)
}

fn constraint_equivalence(r: &mut Report) {
    let props = ["p", "q", "r", "s"];
    let atoms: Vec<ConstraintExpr> =
        props.iter().flat_map(|p| TruthLabel::ALL.map(|l| ConstraintExpr::atom(l, 1, *p))).collect();
    let mut level2 = atoms.clone();
    level2.extend(atoms.iter().map(|x| ConstraintExpr::not(x.clone())));
    for x in &atoms {
        for y in &atoms {
            level2.push(ConstraintExpr::And(vec![x.clone(), y.clone()]));
            level2.push(ConstraintExpr::Or(vec![x.clone(), y.clone()]));
            level2.push(ConstraintExpr::implies(x.clone(), y.clone()));
        }
    }
    // Depth-3 formulas are built on the fly: level2, its negations, and every
    // binary combination of two level2 formulas.
    let n = level2.len();
    let total = 2 * n + 3 * n * n;
    let build = |i: usize| -> ConstraintExpr {
        if i < n {
            return level2[i].clone();
        }
        if i < 2 * n {
            return ConstraintExpr::not(level2[i - n].clone());
        }
        let k = i - 2 * n;
        let (x, y) = (level2[(k % (n * n)) / n].clone(), level2[k % n].clone());
        match k / (n * n) {
            0 => ConstraintExpr::And(vec![x, y]),
            1 => ConstraintExpr::Or(vec![x, y]),
            _ => ConstraintExpr::implies(x, y),
        }
    };
    let assignments: Vec<Assignment> = (0..81)
        .map(|code: usize| {
            let mut a = Assignment::new();
            for (k, p) in props.iter().enumerate() {
                a.insert(1, p, TruthLabel::ALL[(code / 3usize.pow(k as u32)) % 3]);
            }
            a
        })
        .collect();
    let per_formula = Exec::default().map_range(total, |i| {
        let f = build(i);
        let in_scope = f.depth() <= 3 && f.atoms().len() <= 4;
        (in_scope, assignments.iter().filter(|a| eval_constraint(&f, a) != brute_force_eval(&f, a)).count())
    });
    let in_scope = per_formula.iter().filter(|p| p.0).count();
    let mismatches: usize = per_formula.iter().map(|p| p.1).sum();
    r.line(
        2,
        "constraint evaluator equivalence",
        mismatches == 0 && in_scope == total,
        true,
        format!("{in_scope} formulas x 81 assignments, {mismatches} mismatches"),
    );
}

fn gradient_check(r: &mut Report) {
    let rep = grad_check(&ModelConfig::tiny(), Weights { prop: 1.0, qa: 1.0, gen: 0.1 }, Mode::SingleRead, usize::MAX);
    let entries: usize = rep.tensors.iter().map(|t| t.entries).sum();
    let worst = rep.worst().map(|t| t.name.clone()).unwrap_or_default();
    r.line(
        3,
        "gradient check",
        rep.max_rel_err < 1e-4,
        true,
        format!("max rel err {:.2e} on {worst}; {} tensors, {entries} entries", rep.max_rel_err, rep.tensors.len()),
    );
}

fn future_mask(r: &mut Report, model: &Model<f32>) {
    use rand::{Rng, SeedableRng};
    let stories = micro(20, 5000..5100);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let (mut checks, mut changed) = (0usize, 0usize);
    for ex in &stories.examples {
        let states = model.encode_story(&ex.story_tokens).unwrap();
        let initial = model.pool_breakpoints(&states, &ex.marker_positions()).unwrap();
        let base = model.self_attend_breakpoints(&initial).unwrap();
        let m = initial.nrows();
        let j = rng.random_range(1..m);
        let mut perturbed = initial.clone();
        for row in j..m {
            for x in perturbed.row_mut(row) {
                *x += rng.random_range(-5.0..5.0);
            }
        }
        let after = model.self_attend_breakpoints(&perturbed).unwrap();
        checks += 1;
        if (0..j).any(|row| base.row(row) != after.row(row)) {
            changed += 1;
        }
    }
    r.line(4, "future-mask invariance", changed == 0, true, format!("{checks} stories, {changed} with any change at rows <= j"));
}

fn efficiency(r: &mut Report, model: &Model<f32>, dev: &Dataset) {
    match efficiency_report(model, dev, Exec::Sequential) {
        Ok(e) => {
            let faster = e.single_read.per_example_s < e.multi_pass.per_example_s;
            r.line(
                5,
                "single-read efficiency",
                faster,
                true,
                format!(
                    "encodes/example {} vs {}; {:.4}s vs {:.4}s per example",
                    e.single_read.story_encodes_per_example,
                    e.multi_pass.story_encodes_per_example,
                    e.single_read.per_example_s,
                    e.multi_pass.per_example_s
                ),
            );
        }
        Err(err) => r.line(5, "single-read efficiency", false, true, err.to_string()),
    }
}

/// Architecture and optimizer settings of the learnability runs.
fn learn_model_config() -> ModelConfig {
    ModelConfig { d_model: 64, n_layers: 2, n_heads: 4, d_ffn: 256, dropout: 0.1, decoder_layers: 1, ..Default::default() }
}

fn learn_train_config(lambda_qa: f64, budget: f64) -> TrainConfig {
    TrainConfig {
        lambda_prop: 1.0,
        lambda_qa,
        lambda_gen: 0.1,
        learning_rate: 1e-3,
        batch_size: 4,
        max_epochs: 10_000,
        warmup_steps: 100,
        weight_decay: 0.01,
        early_stop_patience: 10,
        seed: 0,
        time_budget_s: Some(budget),
        ..Default::default()
    }
}

struct Learned {
    test_accuracy: f64,
    dev_rho: f64,
    epochs: usize,
    secs: f64,
}

fn train_and_measure(train_set: &Dataset, dev: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Learned {
    let vocab = bpt_core::corpus::build_vocab(train_set).unwrap();
    let model = Model::<f32>::new(learn_model_config(), vocab, cfg.seed).unwrap();
    let start = Instant::now();
    let mut epochs = 0;
    let out = train(train_set, dev, model, cfg, Exec::default(), |rec| {
        epochs = rec.epoch + 1;
        eprintln!("  [lambda_qa {}] epoch {} dev accuracy {:.4} rho {:.3}", cfg.lambda_qa, rec.epoch, rec.dev.prop_accuracy, rec.dev.rho);
    })
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let (td, _) = predict_dataset(&out.model, test, Mode::SingleRead, false, Exec::default()).unwrap();
    let (dd, _) = predict_dataset(&out.model, dev, Mode::SingleRead, false, Exec::default()).unwrap();
    Learned {
        test_accuracy: prop_accuracy(&td, test).unwrap().unwrap_or(0.0),
        dev_rho: global_consistency(&dd, dev).unwrap(),
        epochs,
        secs,
    }
}

fn loss_fidelity(r: &mut Report) {
    let half = BeliefDistribution { probs: [0.5, 0.5, 0.0] };
    let third = BeliefDistribution { probs: [1.0 / 3.0; 3] };
    let a = prop_loss(&[half], &[Entailed]).unwrap().sum;
    let b = prop_loss(&[third; 4], &[Entailed, Contradicted, Unknown, Entailed]).unwrap().sum;
    let (ea, eb) = (2f64.ln(), 4.0 * 3f64.ln());
    let err = (a - ea).abs().max((b - eb).abs());
    r.line(8, "proposition loss fidelity", err < 1e-9, true, format!("ln 2 case {a:.12}, 4 ln 3 case {b:.12}, max err {err:.1e}"));
}

fn tiered(r: &mut Report, conflict: &Dataset, model: &Model<f32>) {
    let pair = |a, b, c| PairOutcome { plausible_chosen: a, conflict_found: b, states_correct: c };
    let t = tiered_eval(&[pair(true, true, true), pair(true, false, false)]).unwrap();
    let fixture = (t.plausibility, t.consistency, t.verifiability) == (1.0, 0.5, 0.5);
    let small = Dataset::new(conflict.examples[..60].to_vec());
    let mut dumps: Vec<PredictionDump> = vec![gold_dump(&small)];
    dumps.push(predict_dataset(model, &small, Mode::SingleRead, true, Exec::default()).unwrap().0);
    let mut broken = gold_dump(&small);
    for (i, e) in broken.examples.iter_mut().enumerate() {
        if let Some(q) = e.qa.first_mut() {
            if i % 3 != 0 {
                q.answer = "nothing".into();
            }
        }
        if i % 2 == 0 {
            for p in &mut e.props {
                p.label = Unknown;
            }
        }
    }
    dumps.push(broken);
    let mut gated = true;
    let mut seen = Vec::new();
    for d in &dumps {
        let t = tiered_eval(&pair_outcomes(d, &small).unwrap()).unwrap();
        gated &= t.verifiability <= t.consistency && t.consistency <= t.plausibility;
        seen.push(format!("({:.2}, {:.2}, {:.2})", t.plausibility, t.consistency, t.verifiability));
    }
    r.line(
        9,
        "tiered metrics",
        fixture && gated,
        true,
        format!("fixture ({}, {}, {}); gated on {} dumps {}", t.plausibility, t.consistency, t.verifiability, dumps.len(), seen.join(" ")),
    );
}

fn rho_correctness(r: &mut Report, sets: &[(&str, &Dataset)]) {
    let mut all_zero = true;
    let mut detail = Vec::new();
    for (name, d) in sets {
        let rho = global_consistency(&gold_dump(d), d).unwrap();
        all_zero &= rho == 0.0;
        detail.push(format!("{name} {rho}"));
    }
    let story = |id: &str| {
        let tokens = ["John", "moved", "to", "the", "kitchen", ".", "[B]"].map(String::from).to_vec();
        let mut ex = Example::from_parts(id, tokens, vec![vec![Proposition::new("a", Entailed), Proposition::new("b", Entailed)]]);
        ex.constraints.push(r#"(implies (E 1 "a") (E 1 "b"))"#.into());
        ex
    };
    let four = Dataset::new((0..4).map(|i| story(&format!("s{i}"))).collect());
    let mut dump = gold_dump(&four);
    dump.examples[2].props[1].label = Contradicted;
    let flipped = global_consistency(&dump, &four).unwrap();
    r.line(
        10,
        "rho correctness",
        all_zero && flipped == 0.25,
        true,
        format!("gold rho: {}; single flip {flipped}", detail.join(", ")),
    );
}

fn ablations(r: &mut Report, train_set: &Dataset, dev: &Dataset) {
    let budget = env_secs("BPT_ACCEPT_ABLATION_S", 300.0);
    let vocab = bpt_core::corpus::build_vocab(train_set).unwrap();
    let cfg = learn_train_config(0.0, budget);
    match ablation_suite(train_set, dev, &learn_model_config(), &vocab, &cfg, &Ablation::ALL, Exec::default()) {
        Ok(rows) => {
            print!("{}", eval::ablation_csv(&rows));
            let brk = rows.iter().find(|r| r.name == Ablation::BrkSelfAttn.row_name());
            let complete = rows.len() == 4 && rows.iter().all(|r| r.prop_accuracy.is_finite());
            let direction = match brk {
                Some(b) if b.delta_accuracy < 0.0 => "worse than base, as expected",
                Some(_) => "not worse than base (soft expectation missed)",
                None => "missing",
            };
            r.line(
                11,
                "ablation harness",
                complete,
                true,
                format!(
                    "{} rows at {budget:.0}s each; - brk self-attn accuracy {:.4}, {direction}",
                    rows.len(),
                    brk.map_or(f64::NAN, |b| b.prop_accuracy)
                ),
            );
        }
        Err(e) => r.line(11, "ablation harness", false, true, e.to_string()),
    }
}

fn determinism(r: &mut Report) {
    let bin = env!("CARGO_BIN_EXE_bpt");
    let tmp = tempfile::tempdir().unwrap();
    // Both runs use identical relative flags from their own working directory.
    let run_all = |root: &Path| -> Vec<(String, String)> {
        fs::create_dir_all(root).unwrap();
        fs::write(root.join("story.txt"), "John went to the kitchen . [B] he took the apple . [B]\n").unwrap();
        fs::write(root.join("curve.csv"), "fraction,n_train,prop_accuracy,rho,best_epoch\n0.5,4,0.6,0.5,1\n1,8,0.7,0.4,1\n").unwrap();
        let steps = [
            "generate microworld --out data --train 8 --dev 4 --test 4 --n-events 6",
            "generate kinship --out kin --train 8 --dev 4 --test 4",
            "generate conflict --out conflict --train 4 --dev 2 --test 2",
            "train --data data --ckpt-out m.ckpt --d-model 8 --n-layers 1 --n-heads 2 --d-ffn 16 --decoder-layers 1 \
             --max-epochs 2 --batch-size 2 --warmup-steps 2 --qa-warmup-epochs 1 --fractions 0.5,1 --ablate brk_self_attn \
             --curve-csv c.csv --ablation-csv a.csv",
            "eval --data data --ckpt m.ckpt --out eval",
            "eval --data data --ckpt m.ckpt --mode multipass --out eval_mp",
            "eval --data conflict --gold-as-pred --out eval_conflict",
            "report --curve-csv curve.csv --out-svg curve.svg",
            "report --ablation-csv a.csv --out-svg a.svg",
            "report --metrics eval/metrics.json --out-svg metrics.svg",
        ];
        for step in steps {
            let args: Vec<&str> = step.split_whitespace().collect();
            let out = Command::new(bin).args(&args).current_dir(root).env("RUST_LOG", "warn").output().unwrap();
            assert!(out.status.success(), "{step}: {}", String::from_utf8_lossy(&out.stderr));
        }
        let probe = Command::new(bin)
            .args(["probe", "--ckpt", "m.ckpt", "--story-file", "story.txt"])
            .current_dir(root)
            .stdin(std::process::Stdio::piped())
            .stdout(std::process::Stdio::piped())
            .spawn()
            .and_then(|mut c| {
                use std::io::Write;
                c.stdin.take().unwrap().write_all(b"1 John is in the kitchen\n2 John has the apple\n:quit\n")?;
                c.wait_with_output()
            })
            .unwrap();
        fs::write(root.join("probe.txt"), &probe.stdout).unwrap();
        let mut files = Vec::new();
        for entry in walk(root) {
            let rel = entry.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            let mut bytes = fs::read(&entry).unwrap();
            // Training logs carry wall-clock seconds; everything else must match byte for byte.
            if rel.ends_with(".log.jsonl") {
                bytes = strip_wall_clock(&bytes);
            }
            files.push((rel, hex::encode(Sha256::digest(&bytes))));
        }
        files.sort();
        files
    };
    let a = run_all(&tmp.path().join("a"));
    let b = run_all(&tmp.path().join("b"));
    let differing: Vec<&String> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| &x.0).collect();
    r.line(
        12,
        "determinism",
        a.len() == b.len() && differing.is_empty(),
        true,
        format!("{} output files across generate/train/eval/probe/report; differing: {differing:?}", a.len()),
    );
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn strip_wall_clock(bytes: &[u8]) -> Vec<u8> {
    let text = String::from_utf8_lossy(bytes);
    let mut out = String::new();
    for line in text.lines() {
        let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
        v.as_object_mut().unwrap().remove("wall_clock_s");
        out.push_str(&v.to_string());
        out.push('\n');
    }
    out.into_bytes()
}

fn main() -> ExitCode {
    let budget = env_secs("BPT_ACCEPT_TRAIN_S", 1800.0);
    let mut r = Report { hard_failures: Vec::new() };
    let (kin, mw, conflict) = generator_soundness(&mut r);
    constraint_equivalence(&mut r);
    gradient_check(&mut r);

    let train_set = micro(20, 0..500);
    let dev = micro(20, 500..600);
    let test = micro(20, 600..700);
    let vocab = bpt_core::corpus::build_vocab(&train_set).unwrap();
    let fresh = Model::<f32>::new(learn_model_config(), vocab, 0).unwrap();
    future_mask(&mut r, &fresh);
    efficiency(&mut r, &fresh, &dev);

    let params = fresh.num_params();
    let solo = train_and_measure(&train_set, &dev, &test, &learn_train_config(0.0, budget));
    r.line(
        6,
        "desk-scale learnability",
        params <= 2_000_000 && solo.test_accuracy >= 0.90 && solo.dev_rho <= 0.10 && solo.secs <= 1800.0 + 60.0,
        false,
        format!(
            "{params} params; test accuracy {:.4} (>= 0.90), dev rho {:.3} (<= 0.10); {} epochs in {:.0}s",
            solo.test_accuracy, solo.dev_rho, solo.epochs, solo.secs
        ),
    );
    let joint = train_and_measure(&train_set, &dev, &test, &learn_train_config(1.0, budget));
    let drop = solo.test_accuracy - joint.test_accuracy;
    r.line(
        7,
        "joint training non-interference",
        drop <= 0.03,
        false,
        format!("prop-only {:.4}, with QA {:.4}, drop {:+.4} (<= 0.03) at {budget:.0}s each", solo.test_accuracy, joint.test_accuracy, drop),
    );

    loss_fidelity(&mut r);
    tiered(&mut r, &conflict, &fresh);
    rho_correctness(&mut r, &[("kinship", &kin), ("microworld", &mw), ("conflict", &conflict), ("train", &train_set)]);
    ablations(&mut r, &train_set, &dev);
    determinism(&mut r);

    if r.hard_failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed property criteria: {:?}", r.hard_failures);
        ExitCode::FAILURE
    }
}
