use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use bpt_core::corpus::{build_vocab, load_dataset, save_dataset, CorpusError, Dataset, Example, Tokenizer};
use bpt_core::eval::{self, Ablation, EvalError};
use bpt_core::exec::Exec;
use bpt_core::model::{Mode, Model, ModelConfig, ModelError, PropPooling};
use bpt_core::training::{self, TrainConfig, TrainError};
use bpt_core::worldgen::{
    conflict, gen_conflict_pair, gen_hard_split, gen_kinship_example, gen_microworld_example, kinship, microworld,
    KinshipConfig, MicroworldConfig, WorldgenError,
};
use log::info;
use serde_json::json;

use crate::{svg, CliError, EvalArgs, GenerateArgs, ModelArgs, ProbeArgs, ReportArgs, Task, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

fn exec_for(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::default()
    }
}

fn io_err(path: &Path, e: io::Error) -> CliError {
    CliError::Other(format!("{}: {e}", path.display()))
}

impl From<WorldgenError> for CliError {
    fn from(e: WorldgenError) -> Self {
        match e {
            WorldgenError::OracleMismatch { .. } => CliError::Oracle(e.to_string()),
            WorldgenError::RetriesExhausted(_) => CliError::Other(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io(_) => CliError::Other(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_) => CliError::Other(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::NonFinite(e.to_string()),
            TrainError::Model(m) => m.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            EvalError::Model(m) => m.into(),
            EvalError::Io(_) => CliError::Other(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn pretty(v: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

// ---------------------------------------------------------------------------
// generate

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| CliError::Validation(format!("bad {what} '{x}'"))))
        .collect()
}

fn collect<T>(items: Vec<std::result::Result<T, WorldgenError>>) -> Result<Vec<T>> {
    items.into_iter().map(|r| r.map_err(CliError::from)).collect()
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let exec = exec_for(a.sequential);
    if a.train == 0 {
        return Err(CliError::Validation("--train must be at least 1".into()));
    }
    let (n_tr, n_dev, n_te) = (a.train, a.dev, a.test);
    let mut splits: Vec<(&str, Vec<Example>)> = Vec::new();
    let mut config = BTreeMap::new();
    config.insert("task", json!(format!("{:?}", a.task).to_lowercase()));
    config.insert("seed", json!(a.seed));
    match a.task {
        Task::Microworld => {
            let cfg = MicroworldConfig { seed: a.seed, n_events: a.n_events.unwrap_or(20), n_qa: a.n_qa, ..Default::default() };
            cfg.validate()?;
            config.insert("n_events", json!(cfg.n_events));
            config.insert("n_qa", json!(cfg.n_qa));
            if let Some(held) = &a.held_out {
                config.insert("held_out", json!(held));
                let d = gen_hard_split(&cfg, held, n_tr + n_dev + n_te, a.hard)?;
                let (iid, hard): (Vec<Example>, Vec<Example>) =
                    d.examples.into_iter().partition(|e| e.meta.get("split").is_some_and(|s| s == "train"));
                let mut iid = iid.into_iter();
                splits.push(("train", iid.by_ref().take(n_tr).collect()));
                splits.push(("dev", iid.by_ref().take(n_dev).collect()));
                splits.push(("test", iid.collect()));
                splits.push(("hardqa", hard));
            } else {
                let gen = |lo: usize, n: usize| collect(exec.map_range(n, |i| gen_microworld_example(&cfg, (lo + i) as u64)));
                splits.push(("train", gen(0, n_tr)?));
                splits.push(("dev", gen(n_tr, n_dev)?));
                splits.push(("test", gen(n_tr + n_dev, n_te)?));
            }
            let all: Vec<&Example> = splits.iter().flat_map(|(_, v)| v).collect();
            collect(exec.map(&all, |e| microworld::oracle::check_example(e)))?;
        }
        Task::Kinship => {
            let ks: Vec<usize> = parse_list(&a.k, "k")?;
            config.insert("k", json!(ks));
            let cfg_for = |i: usize, split: &str| KinshipConfig {
                k: ks[i % ks.len()],
                seed: a.seed,
                split: split.into(),
                ..Default::default()
            };
            for k in &ks {
                KinshipConfig { k: *k, ..Default::default() }.validate()?;
            }
            // Test stories draw from the held-out name pool.
            let gen = |lo: usize, n: usize, split: &str| {
                collect(exec.map_range(n, |i| gen_kinship_example(&cfg_for(lo + i, split), (lo + i) as u64)))
            };
            splits.push(("train", gen(0, n_tr, "train")?));
            splits.push(("dev", gen(n_tr, n_dev, "train")?));
            splits.push(("test", gen(n_tr + n_dev, n_te, "test")?));
            for (name, v) in &splits {
                let split = if *name == "test" { "test" } else { "train" };
                let lo = match *name {
                    "train" => 0,
                    "dev" => n_tr,
                    _ => n_tr + n_dev,
                };
                let idx: Vec<usize> = (0..v.len()).collect();
                collect(exec.map(&idx, |&i| kinship::oracle::check_example(&cfg_for(lo + i, split), &v[i])))?;
            }
        }
        Task::Conflict => {
            let cfg = MicroworldConfig { seed: a.seed, n_events: a.n_events.unwrap_or(8), ..Default::default() };
            cfg.validate()?;
            config.insert("n_events", json!(cfg.n_events));
            let gen = |lo: usize, n: usize| -> Result<Vec<Example>> {
                let pairs = collect(exec.map_range(n, |i| gen_conflict_pair(&cfg, (lo + i) as u64)))?;
                collect(exec.map(&pairs, conflict::oracle_check_pair))?;
                Ok(pairs.iter().enumerate().flat_map(|(i, p)| p.to_examples((lo + i) % 2 == 1)).collect())
            };
            splits.push(("train", gen(0, n_tr)?));
            splits.push(("dev", gen(n_tr, n_dev)?));
            splits.push(("test", gen(n_tr + n_dev, n_te)?));
        }
    }

    let datasets: Vec<(&str, Dataset)> = splits.into_iter().map(|(n, v)| (n, Dataset::new(v))).collect();
    for (name, d) in &datasets {
        d.check_unique_ids()?;
        // Gold labels must satisfy every constraint they ship with.
        let rho = eval::global_consistency(&eval::gold_dump(d), d)?;
        if rho != 0.0 {
            return Err(CliError::Oracle(format!("{name}: gold labels violate their own constraints (rho {rho})")));
        }
    }
    let vocab = build_vocab(&datasets[0].1)?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let mut counts = BTreeMap::new();
    for (name, d) in &datasets {
        let path = a.out.join(format!("{name}.jsonl"));
        save_dataset(d, &path)?;
        counts.insert(*name, json!({ "examples": d.len(), "content_hash": d.content_hash() }));
        info!("wrote {} ({} examples)", path.display(), d.len());
    }
    let meta = json!({ "config": config, "splits": counts, "vocab_hash": vocab.hash(), "vocab_size": vocab.len() });
    write_file(&a.out.join("meta.json"), pretty(&meta))
}

// ---------------------------------------------------------------------------
// train

fn model_config(m: &ModelArgs) -> Result<ModelConfig> {
    let prop_pooling = match m.prop_pooling.as_str() {
        "prefix" => PropPooling::Prefix,
        "mean" => PropPooling::Mean,
        other => return Err(CliError::Validation(format!("unknown --prop-pooling '{other}'"))),
    };
    let cfg = ModelConfig {
        d_model: m.d_model,
        n_layers: m.n_layers,
        n_heads: m.n_heads,
        d_ffn: m.d_ffn,
        dropout: m.dropout,
        max_len: m.max_len,
        decoder_layers: m.decoder_layers,
        brk_self_attn: !m.no_brk_self_attn,
        prop_pooling,
        max_breakpoints: m.max_breakpoints,
        ..Default::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mode = if a.multipass {
        Mode::MultiPass
    } else if a.prop_only {
        Mode::PropOnly
    } else {
        Mode::SingleRead
    };
    let cfg = TrainConfig {
        lambda_prop: a.lambda_prop,
        lambda_qa: a.lambda_qa,
        lambda_gen: a.lambda_gen,
        learning_rate: a.learning_rate,
        batch_size: a.batch_size,
        max_epochs: a.max_epochs,
        warmup_steps: a.warmup_steps,
        qa_warmup_epochs: a.qa_warmup_epochs,
        weight_decay: a.weight_decay,
        early_stop_patience: a.early_stop_patience,
        seed: a.seed,
        mode,
        event_gen: !a.no_event_gen,
        abstraction: !a.no_abstraction,
        time_budget_s: a.time_budget_s,
        dev_limit: a.dev_limit,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_split(dir: &Path, split: &str) -> Result<Dataset> {
    let path = dir.join(format!("{split}.jsonl"));
    if !path.is_file() {
        return Err(CliError::Validation(format!("{} does not exist", path.display())));
    }
    Ok(load_dataset(&path)?)
}

/// Flag echo stored in the checkpoint header.
fn train_meta(a: &TrainArgs, mc: &ModelConfig, tc: &TrainConfig, data: &Dataset) -> String {
    json!({
        "data": a.data.display().to_string(),
        "train_hash": data.content_hash(),
        "model": mc,
        "lambda_prop": tc.lambda_prop,
        "lambda_qa": tc.lambda_qa,
        "lambda_gen": tc.lambda_gen,
        "learning_rate": tc.learning_rate,
        "batch_size": tc.batch_size,
        "max_epochs": tc.max_epochs,
        "warmup_steps": tc.warmup_steps,
        "qa_warmup_epochs": tc.qa_warmup_epochs,
        "weight_decay": tc.weight_decay,
        "early_stop_patience": tc.early_stop_patience,
        "seed": tc.seed,
        "mode": tc.mode.as_str(),
        "event_gen": tc.event_gen,
        "abstraction": tc.abstraction,
        "time_budget_s": tc.time_budget_s,
        "dev_limit": tc.dev_limit,
    })
    .to_string()
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mc = model_config(&a.model)?;
    let tc = train_config(&a)?;
    let fractions: Option<Vec<f64>> = a.fractions.as_deref().map(|s| parse_list(s, "fraction")).transpose()?;
    let toggles: Option<Vec<Ablation>> = a
        .ablate
        .as_deref()
        .map(|s| s.split(',').map(|t| t.trim().parse::<Ablation>().map_err(CliError::Validation)).collect())
        .transpose()?;
    let train_set = load_split(&a.data, "train")?;
    let dev_set = load_split(&a.data, "dev")?;
    let vocab = build_vocab(&train_set)?;
    let exec = exec_for(a.sequential);

    let ckpt = a.ckpt_out.clone().unwrap_or_else(|| PathBuf::from("model.ckpt"));
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = ckpt.clone().into_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_err(&log_path, e))?);
    let mut log_err = None;

    let model = Model::<f32>::new(mc.clone(), vocab.clone(), tc.seed)?;
    info!("training {} parameters on {} stories ({})", model.num_params(), train_set.len(), tc.mode.as_str());
    let outcome = training::train(&train_set, &dev_set, model, &tc, exec, |r| {
        info!(
            "epoch {} loss {:.4} dev accuracy {:.4} rho {:.3}{}",
            r.epoch,
            r.loss.total,
            r.dev.prop_accuracy,
            r.dev.rho,
            if r.best { " *" } else { "" }
        );
        if log_err.is_none() {
            if let Err(e) = serde_json::to_writer(&mut log, r).map_err(io::Error::from).and_then(|_| writeln!(log)) {
                log_err = Some(e);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(io_err(&log_path, e));
    }
    log.flush().map_err(|e| io_err(&log_path, e))?;
    let mut best = outcome.model;
    best.meta = train_meta(&a, &mc, &tc, &train_set);
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    best.save(&ckpt)?;
    info!("best epoch {} ({:?}); wrote {}", outcome.best_epoch, outcome.stop, ckpt.display());

    if let Some(fr) = fractions {
        let rows = eval::learning_curve(&train_set, &dev_set, &mc, &vocab, &tc, &fr, exec)?;
        write_file(&a.curve_csv, eval::curve_csv(&rows))?;
    }
    if let Some(t) = toggles {
        let rows = eval::ablation_suite(&train_set, &dev_set, &mc, &vocab, &tc, &t, exec)?;
        write_file(&a.ablation_csv, eval::ablation_csv(&rows))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

fn parse_mode(s: &str) -> Result<Mode> {
    s.parse().map_err(CliError::Validation)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mode = parse_mode(&a.mode)?;
    let (path, dir) = if a.data.is_dir() {
        (a.data.join(format!("{}.jsonl", a.split)), a.data.clone())
    } else {
        (a.data.clone(), a.data.parent().map(Path::to_path_buf).unwrap_or_default())
    };
    if !path.is_file() {
        return Err(CliError::Validation(format!("{} does not exist", path.display())));
    }
    let data = load_dataset(&path)?;
    let exec = exec_for(a.sequential);
    let (dump, efficiency) = if a.gold_as_pred {
        (eval::gold_dump(&data), None)
    } else {
        let ckpt = a.ckpt.as_ref().ok_or_else(|| CliError::Validation("--ckpt is required without --gold-as-pred".into()))?;
        let model = Model::<f32>::load(ckpt)?;
        check_vocab(&model, &dir)?;
        let (dump, _) = eval::predict_dataset(&model, &data, mode, !a.no_qa, exec)?;
        let eff = if a.efficiency { Some(eval::efficiency_report(&model, &data, exec)?) } else { None };
        (dump, eff)
    };
    let wall = efficiency.map(|e| match mode {
        Mode::MultiPass => e.multi_pass.wall_clock_s,
        _ => e.single_read.wall_clock_s,
    });
    let report = eval::metrics_report(&dump, &data, wall)?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    write_file(&a.out.join("metrics.json"), pretty(&report))?;
    let mut buf = Vec::new();
    dump.write_jsonl(&mut buf)?;
    write_file(&a.out.join("predictions.jsonl"), buf)?;
    if let Some(e) = efficiency {
        write_file(&a.out.join("efficiency.json"), pretty(&e))?;
        info!(
            "per-example wall-clock: single-read {:.4}s, multi-pass {:.4}s",
            e.single_read.per_example_s, e.multi_pass.per_example_s
        );
    }
    match report.prop_accuracy {
        Some(acc) => info!("proposition accuracy {acc:.4}, rho {:.4}", report.rho),
        None => info!("rho {:.4}", report.rho),
    }
    Ok(())
}

/// The dataset's training vocabulary must be the one the checkpoint was
/// trained with.
fn check_vocab(model: &Model<f32>, dir: &Path) -> Result<()> {
    let meta_path = dir.join("meta.json");
    let Ok(text) = fs::read_to_string(&meta_path) else { return Ok(()) };
    let meta: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", meta_path.display())))?;
    match meta["vocab_hash"].as_str() {
        Some(h) if h != model.vocab.hash() => Err(CliError::Validation(format!(
            "vocabulary hash mismatch: checkpoint {} vs dataset {h}",
            model.vocab.hash()
        ))),
        _ => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// probe

pub fn probe(a: ProbeArgs) -> Result<()> {
    let mode = parse_mode(&a.mode)?;
    let model = Model::<f32>::load(&a.ckpt)?;
    let text = fs::read_to_string(&a.story_file).map_err(|e| io_err(&a.story_file, e))?;
    let tok = Tokenizer::from_vocab(&model.vocab);
    let tokens = tok.tokenize(&text);
    let n = bpt_core::corpus::marker_positions(&tokens).len();
    if n == 0 {
        return Err(CliError::Validation(format!("{} contains no [B] markers", a.story_file.display())));
    }
    let ex = Example::from_parts("probe", tokens, vec![Vec::new(); n]);
    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line.map_err(|e| CliError::Other(e.to_string()))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == ":quit" {
            break;
        }
        let reply = probe_line(&model, &tok, &ex, n, mode, line);
        writeln!(out, "{reply}").and_then(|_| out.flush()).map_err(|e| CliError::Other(e.to_string()))?;
    }
    Ok(())
}

fn probe_line(model: &Model<f32>, tok: &Tokenizer, ex: &Example, n: usize, mode: Mode, line: &str) -> String {
    let Some((j, prop)) = line.split_once(char::is_whitespace) else {
        return "error: expected '<breakpoint> <proposition>'".into();
    };
    let j = match j.parse::<usize>() {
        Ok(j) if (1..=n).contains(&j) => j,
        Ok(j) => return format!("error: breakpoint {j} is out of range 1..={n}"),
        Err(_) => return format!("error: '{j}' is not a breakpoint number"),
    };
    let prop = tok.tokenize(prop);
    match model.predict(ex, &[(j, prop)], mode) {
        Ok(p) => {
            let d = &p.beliefs[0];
            format!("{}\tE={:.4} C={:.4} U={:.4}", d.label(), d.probs[0], d.probs[1], d.probs[2])
        }
        Err(e) => format!("error: {e}"),
    }
}

// ---------------------------------------------------------------------------
// report

pub fn report(a: ReportArgs) -> Result<()> {
    let read = |p: &PathBuf| fs::read_to_string(p).map_err(|e| io_err(p, e));
    let doc = if let Some(p) = &a.curve_csv {
        svg::curve(&read(p)?)
    } else if let Some(p) = &a.ablation_csv {
        svg::ablation(&read(p)?)
    } else if let Some(p) = &a.metrics {
        svg::metrics(&read(p)?)
    } else {
        return Err(CliError::Validation("one of --curve-csv, --ablation-csv or --metrics is required".into()));
    };
    write_file(&a.out_svg, doc.map_err(CliError::Validation)?)
}
