use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::json;
use vibtag::analysis::{curve_json, curve_tsv, dump_tags, estimate_bounds, probe, tradeoff_curve};
use vibtag::annealing::{anneal, export_tree};
use vibtag::checkpoint;
use vibtag::data::{describe_embeddings, read_conllu, read_embeddings, write_conllu, write_embeddings, Dataset};
use vibtag::objective::{evaluate, train, Evaluation};
use vibtag::parser::paired_permutation_test;
use vibtag::synthetic::{embedding_records, generate};
use vibtag::ModelParams;

use crate::config::RunConfig;
use crate::data::{Loader, Split};
use crate::error::CliError;
use crate::{manifest, Cli, Command, ModelFlags, SplitArg};

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

fn apply(flags: &ModelFlags, cfg: &mut RunConfig) {
    let m = &mut cfg.model;
    if let Some(k) = flags.kind {
        m.kind = k;
    }
    if let Some(mode) = flags.mode {
        m.mode = mode;
    }
    if let Some(b) = flags.beta {
        m.beta = b;
    }
    if flags.gamma.is_some() {
        m.gamma = flags.gamma;
    }
    if let Some(e) = flags.epochs {
        m.epochs = e;
    }
    if let Some(s) = flags.seed {
        m.seed = s;
    }
    if let Some(lr) = flags.learning_rate {
        m.optimizer.learning_rate = lr;
    }
}

/// Resolves the configuration, validates it, and dispatches.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Train(flags) => apply(flags, &mut cfg),
        Command::Curve { betas, model } => {
            apply(model, &mut cfg);
            if let Some(b) = betas {
                cfg.curve.betas = b.clone();
            }
        }
        Command::Anneal {
            model,
            beta_start,
            beta_min,
            merge_threshold,
            max_clusters,
        } => {
            apply(model, &mut cfg);
            let a = &mut cfg.anneal;
            a.beta_start = beta_start.unwrap_or(a.beta_start);
            a.beta_min = beta_min.unwrap_or(a.beta_min);
            a.merge_threshold = merge_threshold.unwrap_or(a.merge_threshold);
            a.max_clusters = max_clusters.unwrap_or(a.max_clusters);
        }
        Command::Eval { samples: Some(s), .. } => cfg.eval.samples = *s,
        Command::Compare {
            iterations: Some(n), ..
        } => cfg.compare.iterations = *n,
        _ => {}
    }
    cfg.validate()?;

    let out = cli.out.as_path();
    fs::create_dir_all(out)?;
    let mut loader = Loader::new(&cfg, cli.demo);
    let name = match &cli.command {
        Command::Train(_) => cmd_train(&cfg, &mut loader, out)?,
        Command::Eval { model, split, .. } => cmd_eval(&cfg, &mut loader, out, model, (*split).into())?,
        Command::Curve { .. } => cmd_curve(&cfg, &mut loader, out)?,
        Command::Anneal { .. } => cmd_anneal(&cfg, &mut loader, out)?,
        Command::Probe { model, column } => cmd_probe(&cfg, &mut loader, out, model, column)?,
        Command::Dump { model, split } => cmd_dump(&mut loader, out, model, (*split).into())?,
        Command::Compare { a, b, split, .. } => cmd_compare(&cfg, &mut loader, out, a, b, (*split).into())?,
        Command::FmtEmb { file, conllu } => return cmd_fmt_emb(file, conllu.as_deref()),
        Command::DemoData => cmd_demo_data(&cfg, out)?,
    };
    manifest::write(out, name, &cfg, &loader.inputs, cli.demo)?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    fs::write(path, text + "\n")?;
    Ok(())
}

fn load_model(path: &Path, loader: &mut Loader) -> Result<ModelParams, CliError> {
    let params = checkpoint::load(path)?;
    loader.inputs.push(path.to_path_buf());
    Ok(params)
}

fn cmd_train(cfg: &RunConfig, loader: &mut Loader, out: &Path) -> Result<&'static str, CliError> {
    let layer = cfg.model.token_layer;
    let train_set = loader.require(Split::Train, layer)?;
    let dev = loader.load(Split::Dev, layer)?;
    let outcome = train(&train_set, dev.as_ref(), &cfg.model)?;
    checkpoint::save(&outcome.params, out.join("model.ckpt"))?;
    fs::write(out.join("history.jsonl"), outcome.history_jsonl())?;
    let best = outcome.history.iter().find(|r| r.epoch == outcome.best_epoch);
    let summary = json!({
        "checkpoint": out.join("model.ckpt"),
        "epochs": outcome.history.len(),
        "best_epoch": outcome.best_epoch,
        "best": best,
    });
    println!("{summary}");
    Ok("train")
}

fn eval_json(
    cfg: &RunConfig,
    params: &ModelParams,
    ds: &Dataset,
    ev: &Evaluation,
    split: Split,
) -> Result<serde_json::Value, CliError> {
    let scores = ev.counts.scores();
    let bounds = estimate_bounds(ds, params, cfg.eval.samples, cfg.eval.seed)?;
    Ok(json!({
        "split": split.name(),
        "sentences": ds.len(),
        "tokens": ev.counts.tokens,
        "uas": scores.uas,
        "las": scores.las,
        "bounds": bounds,
    }))
}

fn cmd_eval(
    cfg: &RunConfig,
    loader: &mut Loader,
    out: &Path,
    model: &Path,
    split: Split,
) -> Result<&'static str, CliError> {
    let params = load_model(model, loader)?;
    let ds = loader.require(split, params.config.token_layer)?;
    let ev = evaluate(&params, &ds, cfg.eval.seed)?;
    let predicted: Vec<(Vec<usize>, Vec<String>)> = ev
        .predictions
        .iter()
        .map(|t| {
            let labels = t.labels.iter().map(|&l| params.labels.name(l).to_string()).collect();
            (t.heads.clone(), labels)
        })
        .collect();
    let sentences: Vec<_> = ds.sentences().cloned().collect();
    let mut w = BufWriter::new(fs::File::create(out.join("predictions.conllu"))?);
    write_conllu(&mut w, &sentences, Some(&predicted))?;
    w.flush()?;
    let report = eval_json(cfg, &params, &ds, &ev, split)?;
    write_json(&out.join("eval.json"), &report)?;
    println!("{report}");
    Ok("eval")
}

fn cmd_curve(cfg: &RunConfig, loader: &mut Loader, out: &Path) -> Result<&'static str, CliError> {
    let layer = cfg.model.token_layer;
    let train_set = loader.require(Split::Train, layer)?;
    let dev = loader.load(Split::Dev, layer)?;
    let test = loader.require(Split::Test, layer)?;
    let entries = tradeoff_curve(&train_set, dev.as_ref(), &test, &cfg.model, &cfg.curve.betas)?;
    fs::write(out.join("curve.tsv"), curve_tsv(&entries))?;
    write_json(&out.join("curve.json"), &curve_json(&entries))?;
    let failed = entries.iter().filter(|e| e.point.is_none()).count();
    for e in entries.iter().filter(|e| e.error.is_some()) {
        log::warn!("β = {}: {}", e.beta, e.error.as_deref().unwrap_or_default());
    }
    if failed == entries.len() {
        return Err(CliError::Data("every point of the curve failed".into()));
    }
    println!("{}", out.join("curve.tsv").display());
    Ok("curve")
}

fn cmd_anneal(cfg: &RunConfig, loader: &mut Loader, out: &Path) -> Result<&'static str, CliError> {
    let train_set = loader.require(Split::Train, cfg.model.token_layer)?;
    let outcome = anneal(&train_set, &cfg.anneal, &cfg.model)?;
    export_tree(&outcome.tree, out.join("tree.json"))?;
    checkpoint::save(&outcome.params, out.join("model.ckpt"))?;
    for (i, step) in outcome.steps.iter().enumerate() {
        let mut lines = String::new();
        for rec in &step.history {
            lines.push_str(&serde_json::to_string(rec)?);
            lines.push('\n');
        }
        fs::write(out.join(format!("history_step{i:03}.jsonl")), lines)?;
    }
    write_json(&out.join("steps.json"), &serde_json::to_value(&outcome.steps)?)?;
    let summary = json!({
        "steps": outcome.steps.len(),
        "leaves": outcome.tree.n_leaves(),
        "tree": out.join("tree.json"),
    });
    println!("{summary}");
    Ok("anneal")
}

fn cmd_probe(
    cfg: &RunConfig,
    loader: &mut Loader,
    out: &Path,
    model: &Path,
    column: &vibtag::analysis::LabelColumn,
) -> Result<&'static str, CliError> {
    let params = load_model(model, loader)?;
    let layer = params.config.token_layer;
    let train_set = loader.require(Split::Train, layer)?;
    let test = loader.require(Split::Test, layer)?;
    let result = probe(&train_set, &test, &params, column, &cfg.probe)?;
    let report = json!({ "column": column, "result": result });
    write_json(&out.join("probe.json"), &report)?;
    println!("{report}");
    Ok("probe")
}

fn cmd_dump(loader: &mut Loader, out: &Path, model: &Path, split: Split) -> Result<&'static str, CliError> {
    let params = load_model(model, loader)?;
    let ds = loader.require(split, params.config.token_layer)?;
    let path = out.join("tags.tsv");
    let mut w = BufWriter::new(fs::File::create(&path)?);
    dump_tags(&ds, &params, &mut w)?;
    w.flush()?;
    println!("{}", path.display());
    Ok("dump")
}

/// Per-sentence labeled-correct counts and the corpus LAS.
fn per_sentence_las(params: &ModelParams, ds: &Dataset, seed: u64) -> Result<(Vec<f64>, f64), CliError> {
    let ev = evaluate(params, ds, seed)?;
    let correct = ev.per_sentence.iter().map(|c| c.labeled_correct as f64).collect();
    Ok((correct, ev.counts.scores().las))
}

fn cmd_compare(
    cfg: &RunConfig,
    loader: &mut Loader,
    out: &Path,
    a: &Path,
    b: &Path,
    split: Split,
) -> Result<&'static str, CliError> {
    let pa = load_model(a, loader)?;
    let pb = load_model(b, loader)?;
    let ds_a = loader.require(split, pa.config.token_layer)?;
    let ds_b = if pb.config.token_layer == pa.config.token_layer {
        ds_a.clone()
    } else {
        loader.require(split, pb.config.token_layer)?
    };
    let ids = |d: &Dataset| d.sentences().map(|s| s.id).collect::<Vec<_>>();
    if ids(&ds_a) != ids(&ds_b) {
        return Err(CliError::Data("the two models see different sentences".into()));
    }
    let (sa, las_a) = per_sentence_las(&pa, &ds_a, cfg.eval.seed)?;
    let (sb, las_b) = per_sentence_las(&pb, &ds_b, cfg.eval.seed)?;
    let p = paired_permutation_test(&sa, &sb, cfg.compare.iterations, cfg.compare.seed)?;
    let report = json!({
        "split": split.name(),
        "sentences": sa.len(),
        "las_a": las_a,
        "las_b": las_b,
        "p_value": p,
        "iterations": cfg.compare.iterations,
    });
    write_json(&out.join("compare.json"), &report)?;
    println!("{report}");
    Ok("compare")
}

/// Validation only: prints a description and writes nothing.
fn cmd_fmt_emb(file: &Path, conllu: Option<&Path>) -> Result<(), CliError> {
    let (header, tokens) = describe_embeddings(file)?;
    let mut report = json!({
        "file": file,
        "valid": true,
        "header": header,
        "tokens": tokens,
    });
    if let Some(c) = conllu {
        let bank = read_conllu(c)?;
        let records = read_embeddings(file)?;
        let mut matched = 0usize;
        let mut missing = 0usize;
        for s in &bank.sentences {
            match records.get(&s.id) {
                Some(r) if r.n_tokens() == s.len() => matched += 1,
                Some(r) => {
                    return Err(vibtag::Error::Alignment {
                        sentence_id: s.id,
                        treebank: s.len(),
                        embeddings: r.n_tokens(),
                    }
                    .into())
                }
                None => missing += 1,
            }
        }
        let ids: std::collections::BTreeSet<u64> = bank.sentences.iter().map(|s| s.id).collect();
        let extra = records.keys().filter(|k| !ids.contains(k)).count();
        report["conllu"] = json!({
            "file": c,
            "sentences": bank.sentences.len(),
            "dropped": bank.dropped,
            "matched": matched,
            "missing_embeddings": missing,
            "unused_records": extra,
        });
    }
    println!("{report}");
    Ok(())
}

/// Writes `{train,dev,test}.conllu`, the matching `.emb` files, and
/// `data.toml` pointing at them.
fn cmd_demo_data(cfg: &RunConfig, out: &Path) -> Result<&'static str, CliError> {
    let corpus = generate(&cfg.demo)?;
    let mut data = String::from("[data]\n");
    for (name, ds) in [("train", &corpus.train), ("dev", &corpus.dev), ("test", &corpus.test)] {
        // Readers number sentences by file position, so ids restart per split.
        let mut sentences: Vec<_> = ds.sentences().cloned().collect();
        let mut records = embedding_records(ds);
        for (i, (s, r)) in sentences.iter_mut().zip(&mut records).enumerate() {
            s.id = i as u64;
            r.sentence_id = i as u64;
        }
        let conllu = out.join(format!("{name}.conllu"));
        let emb = out.join(format!("{name}.emb"));
        let mut w = BufWriter::new(fs::File::create(&conllu)?);
        write_conllu(&mut w, &sentences, None)?;
        w.flush()?;
        write_embeddings(&emb, &records)?;
        data.push_str(&format!("{name}_conllu = {:?}\n{name}_emb = {:?}\n", conllu, emb));
    }
    fs::write(out.join("data.toml"), data)?;
    println!("{}", out.join("data.toml").display());
    Ok("demo-data")
}
