//! Subcommand implementations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use docvqa::checkpoint::{load_checkpoint, save_checkpoint};
use docvqa::data::{gen_synthetic, load_split_dir, split, write_split_dir};
use docvqa::eval::{read_results, write_results};
use docvqa::training::{train_stage1, train_stage2, EpochEvent, OptimizerKind};
use docvqa::{
    Checkpoint, Dataset, Document, MetricsReport, Model, PageRef, Pipeline, Scorer, ScorerConfig,
    TrainConfig,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::RunManifest;
use crate::{
    AnswerArgs, Command, EvalArgs, GenArgs, ReportArgs, ScorerFlags, SweepArgs, TrainFlags, TrainScorerArgs,
    TrainVqaArgs, UsageError,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const TRAIN_LOG: &str = "train.log";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TXT: &str = "metrics.txt";

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen(a) => gen(a),
        Command::TrainVqa(a) => train_vqa(a),
        Command::TrainScorer(a) => train_scorer(a),
        Command::Eval(a) => eval(a),
        Command::Answer(a) => answer(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
    }
}

fn usage(message: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(message.into()))
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} is not a directory", path.display())))
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    if let Some(p) = path {
        require_file(p, "config file")?;
    }
    RunConfig::load(path).map_err(|e| usage(format!("{e:#}")))
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_split(dir: &Path) -> Result<Dataset> {
    require_dir(dir, "split directory")?;
    load_split_dir(dir).with_context(|| format!("loading {}", dir.display()))
}

fn apply_train_flags(cfg: &mut TrainConfig, f: &TrainFlags) -> Result<()> {
    if let Some(v) = f.seed {
        cfg.seed = v;
    }
    if let Some(v) = f.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = f.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = f.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = f.patience {
        cfg.early_stop_patience = v;
    }
    if let Some(o) = &f.optimizer {
        cfg.optimizer = match o.to_ascii_lowercase().as_str() {
            "sgd" => OptimizerKind::Sgd,
            "adam" => OptimizerKind::Adam,
            other => return Err(usage(format!("unknown optimizer `{other}`"))),
        };
    }
    Ok(())
}

fn apply_scorer_flags(cfg: &mut ScorerConfig, train: &mut TrainConfig, f: &ScorerFlags) {
    if let Some(v) = f.layers {
        cfg.n_sa_layers = v;
    }
    if let Some(v) = f.heads {
        cfg.n_heads = v;
    }
    if let Some(v) = f.aggregation {
        cfg.aggregation = v;
    }
    if let Some(v) = f.dropout {
        cfg.dropout_p = v;
    }
    if let Some(v) = f.init_seed {
        cfg.seed = v;
    }
    if let Some(v) = f.eps {
        train.label_smooth_eps = v;
    }
}

// ---------------------------------------------------------------------------
// gen

fn gen(a: GenArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    let s = &mut cfg.synth;
    if let Some(v) = a.seed {
        s.seed = v;
        cfg.split.seed = v;
    }
    if let Some(v) = a.docs {
        s.n_documents = v;
    }
    if let Some((lo, hi)) = a.pages {
        s.min_pages = lo;
        s.max_pages = hi;
    }
    if let Some(v) = a.facts {
        s.facts_per_page = v;
    }
    if let Some(v) = a.questions {
        s.questions_per_doc = v;
    }
    if let Some(v) = a.split {
        cfg.split.fractions = v;
    }
    if let Some(v) = a.split_seed {
        cfg.split.seed = v;
    }
    let corpus = gen_synthetic(&cfg.synth).map_err(|e| usage(e.to_string()))?;
    create_out(&a.out)?;
    let parts: Vec<Dataset> = if a.no_split {
        vec![corpus.clone()]
    } else {
        split(&corpus, cfg.split.fractions, cfg.split.seed)
            .map_err(|e| usage(e.to_string()))?
            .into()
    };
    for part in &parts {
        let dir = a.out.join(part.split());
        write_split_dir(part, &dir).with_context(|| format!("writing {}", dir.display()))?;
        println!(
            "{:<6} {:>4} documents {:>5} questions",
            part.split(),
            part.documents().len(),
            part.len()
        );
    }
    println!("pages  documents");
    for (pages, docs) in corpus.page_histogram() {
        println!("{pages:<6} {docs:>9}");
    }
    let mut m = RunManifest::new("gen", &a.out)
        .section("synth", &cfg.synth)
        .seed("synth", cfg.synth.seed);
    if !a.no_split {
        m = m.section("split", &cfg.split).seed("split", cfg.split.seed);
    }
    m.write()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// training

/// Plain-text log plus one JSON line per epoch.
struct TrainLog {
    log: fs::File,
    history: fs::File,
    started: Instant,
}

impl TrainLog {
    fn create(dir: &Path) -> Result<Self> {
        let open = |name: &str| fs::File::create(dir.join(name)).with_context(|| format!("creating {name}"));
        Ok(TrainLog {
            log: open(TRAIN_LOG)?,
            history: open(HISTORY_FILE)?,
            started: Instant::now(),
        })
    }

    fn line(&mut self, text: &str) -> Result<()> {
        println!("{text}");
        writeln!(self.log, "{text}")?;
        Ok(())
    }

    fn epoch(&mut self, metric: &str, e: &EpochEvent<'_, f64>) -> Result<()> {
        let r = e.record;
        self.line(&format!(
            "epoch {:>3}  train_loss {:.6}  {metric} {:.4}{}  pairs +{}/-{}  {:.1}s (elapsed {:.0}s)",
            r.epoch,
            r.train_loss,
            r.valid_metric,
            if e.is_best { "  [best]" } else { "" },
            r.positive_pairs,
            r.negative_pairs,
            e.seconds,
            self.started.elapsed().as_secs_f64()
        ))?;
        writeln!(self.history, "{}", serde_json::to_string(r)?)?;
        Ok(())
    }
}

fn train_vqa(a: TrainVqaArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    apply_train_flags(&mut cfg.stage1, &a.train)?;
    let m = &mut cfg.model;
    for (slot, flag) in [
        (&mut m.d_model, a.d_model),
        (&mut m.n_heads, a.model_heads),
        (&mut m.n_enc_layers, a.enc_layers),
        (&mut m.n_dec_layers, a.dec_layers),
        (&mut m.max_patches, a.max_patches),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if let Some(v) = a.init_seed {
        m.seed = v;
    }
    cfg.model.validate().map_err(|e| usage(e.to_string()))?;
    cfg.stage1.validate(1).map_err(|e| usage(e.to_string()))?;
    let train = load_split(&a.data.join("train"))?;
    let valid = load_split(&a.data.join("valid"))?;
    create_out(&a.out)?;

    let mut model = Model::new(cfg.model.clone())?;
    let ckpt = a.out.join(CHECKPOINT_FILE);
    let mut log = TrainLog::create(&a.out)?;
    log.line(&format!(
        "stage 1: {} train / {} valid questions, {} parameters",
        train.len(),
        valid.len(),
        model.params().scalar_count()
    ))?;
    let model_cfg = cfg.model.clone();
    let history = train_stage1(&mut model, &train, &valid, &cfg.stage1, &mut |e| {
        log.epoch("valid_anls", e).map_err(|err| docvqa::Error::Contract(err.to_string()))?;
        if e.is_best {
            let snapshot = Model::from_params(model_cfg.clone(), e.params.clone())?;
            save_checkpoint(&snapshot, None, &ckpt)?;
        }
        Ok(())
    })?;
    save_checkpoint(&model, None, &ckpt)?;
    log.line(&format!(
        "best epoch {} with valid ANLS {:.4}; checkpoint {}",
        history.best_epoch,
        history.best_metric,
        ckpt.display()
    ))?;
    RunManifest::new("train-vqa", &a.out)
        .section("model", &cfg.model)
        .section("stage1", &cfg.stage1)
        .seed("init", cfg.model.seed)
        .seed("train", cfg.stage1.seed)
        .input("data", &a.data)
        .checkpoint(&ckpt)
        .write()?;
    Ok(())
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    require_file(path, "checkpoint")?;
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn train_scorer(a: TrainScorerArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    let Checkpoint { model, .. } = load_ckpt(&a.checkpoint)?;
    if a.config.is_none() || cfg.scorer.head_dims[0] != model.config().d_model {
        // size the head to the loaded model unless configured explicitly
        let d = model.config().d_model;
        cfg.scorer.head_dims = ScorerConfig::for_width(d).head_dims;
    }
    apply_train_flags(&mut cfg.stage2, &a.train)?;
    apply_scorer_flags(&mut cfg.scorer, &mut cfg.stage2, &a.scorer);
    cfg.stage2.validate(2).map_err(|e| usage(e.to_string()))?;
    cfg.scorer
        .validate(model.config().d_model)
        .map_err(|e| usage(e.to_string()))?;
    let train = load_split(&a.data.join("train"))?;
    let valid = load_split(&a.data.join("valid"))?;
    create_out(&a.out)?;

    let mut scorer = Scorer::new(cfg.scorer.clone(), model.config().d_model)?;
    let ckpt = a.out.join(CHECKPOINT_FILE);
    let mut log = TrainLog::create(&a.out)?;
    log.line(&format!(
        "stage 2: {} train / {} valid questions, {} scorer parameters ({} layer(s), {} heads, {})",
        train.len(),
        valid.len(),
        scorer.params().scalar_count(),
        cfg.scorer.n_sa_layers,
        cfg.scorer.n_heads,
        cfg.scorer.aggregation
    ))?;
    let scorer_cfg = cfg.scorer.clone();
    let d = model.config().d_model;
    let history = train_stage2(&model, &mut scorer, &train, &valid, &cfg.stage2, &mut |e| {
        log.epoch("valid_page_acc", e)
            .map_err(|err| docvqa::Error::Contract(err.to_string()))?;
        if e.is_best {
            let snapshot = Scorer::from_params(scorer_cfg.clone(), d, e.params.clone())?;
            save_checkpoint(&model, Some(&snapshot), &ckpt)?;
        }
        Ok(())
    })?;
    save_checkpoint(&model, Some(&scorer), &ckpt)?;
    log.line(&format!(
        "best epoch {} with valid page accuracy {:.2}%; checkpoint {}",
        history.best_epoch,
        history.best_metric,
        ckpt.display()
    ))?;
    RunManifest::new("train-scorer", &a.out)
        .section("model", model.config())
        .section("scorer", &cfg.scorer)
        .section("stage2", &cfg.stage2)
        .seed("init", cfg.scorer.seed)
        .seed("train", cfg.stage2.seed)
        .input("data", &a.data)
        .input("stage1_checkpoint", &a.checkpoint)
        .checkpoint(&ckpt)
        .write()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluation

fn stage2_artifacts(path: &Path) -> Result<(Model, Scorer)> {
    let ck = load_ckpt(path)?;
    let scorer = ck
        .scorer
        .ok_or_else(|| anyhow!("{} holds no scorer; run train-scorer first", path.display()))?;
    Ok((ck.model, scorer))
}

fn write_metrics(dir: &Path, report: &MetricsReport) -> Result<()> {
    write_json(&dir.join(METRICS_JSON), report)?;
    fs::write(dir.join(METRICS_TXT), report.to_string()).context("writing metrics table")?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, scorer) = stage2_artifacts(&a.checkpoint)?;
    let data = load_split(&a.data)?;
    create_out(&a.out)?;
    let pipe = Pipeline::new(&model, &scorer)?;
    let started = Instant::now();
    let results = pipe.evaluate(&data)?;
    write_results(&results, &a.out.join(RESULTS_FILE))?;
    let report = MetricsReport::from_results(&results)?;
    write_metrics(&a.out, &report)?;
    print!("{report}");
    println!("evaluated {} questions in {:.1}s", results.len(), started.elapsed().as_secs_f64());
    RunManifest::new("eval", &a.out)
        .section("model", model.config())
        .section("scorer", scorer.config())
        .input("data", &a.data)
        .checkpoint(&a.checkpoint)
        .write()?;
    Ok(())
}

/// Orders names so that embedded numbers compare numerically (`p2` < `p10`).
fn natural_key(name: &str) -> Vec<(String, u64)> {
    let mut out = Vec::new();
    let mut text = String::new();
    let mut digits = String::new();
    for c in name.chars() {
        if c.is_ascii_digit() {
            digits.push(c);
        } else {
            if !digits.is_empty() {
                out.push((std::mem::take(&mut text), digits.parse().unwrap_or(u64::MAX)));
                digits.clear();
            }
            text.push(c);
        }
    }
    out.push((text, digits.parse().unwrap_or(0)));
    out
}

fn document_from_dir(dir: &Path) -> Result<Document> {
    require_dir(dir, "document")?;
    let mut pages: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| ["pgm", "ppm", "png", "jpg", "jpeg"].contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    if pages.is_empty() {
        return Err(usage(format!("{} contains no page images", dir.display())));
    }
    pages.sort_by_key(|p| natural_key(&p.file_stem().unwrap_or_default().to_string_lossy()));
    let refs = pages
        .into_iter()
        .map(|p| {
            let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            PageRef::file(id, p)
        })
        .collect();
    let id = dir.file_name().map_or_else(|| "document".into(), |n| n.to_string_lossy().into_owned());
    Ok(Document::new(id, refs)?)
}

fn answer(a: AnswerArgs) -> Result<()> {
    let (model, scorer) = stage2_artifacts(&a.checkpoint)?;
    let doc = document_from_dir(&a.doc)?;
    let pipe = Pipeline::new(&model, &scorer)?;
    let max_len = a.max_len.unwrap_or(model.config().max_answer_len);
    let ans = pipe.answer_question(&a.question, &doc, max_len)?;
    println!("page {}", ans.page);
    println!("page_id {}", doc.pages()[ans.page].id());
    println!("answer {}", ans.answer);
    if a.scores {
        for (p, s) in doc.pages().iter().zip(&ans.scores.scores) {
            println!("score {} {:.6}", p.id(), s.value());
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Debug, Serialize)]
struct SweepCell {
    layers: usize,
    heads: usize,
    best_epoch: usize,
    valid_page_accuracy_pct: f64,
    page_accuracy_pct: f64,
    anls: f64,
}

fn sweep_table(cells: &[SweepCell], layers: &[usize], heads: &[usize]) -> String {
    let mut s = format!("{:<8}", "layers");
    for h in heads {
        s += &format!(" {:>18}", format!("{h} heads"));
    }
    s += "\n";
    for &l in layers {
        s += &format!("{l:<8}");
        for &h in heads {
            let c = cells.iter().find(|c| c.layers == l && c.heads == h).expect("cell computed");
            s += &format!(" {:>18}", format!("{:.2}% / {:.4}", c.page_accuracy_pct, c.anls));
        }
        s += "\n";
    }
    s + "cells: page accuracy / ANLS\n"
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    apply_train_flags(&mut cfg.stage2, &a.train)?;
    let Checkpoint { model, .. } = load_ckpt(&a.checkpoint)?;
    let d = model.config().d_model;
    let mut base = cfg.scorer.clone();
    base.head_dims = ScorerConfig::for_width(d).head_dims;
    if let Some(agg) = a.aggregation {
        base.aggregation = agg;
    }
    for &h in &a.heads {
        if h == 0 || d % h != 0 {
            return Err(usage(format!("{h} heads do not divide the model width {d}")));
        }
    }
    cfg.stage2.validate(2).map_err(|e| usage(e.to_string()))?;
    let train = load_split(&a.data.join("train"))?;
    let valid = load_split(&a.data.join("valid"))?;
    let test = load_split(&a.data.join(&a.eval_split))?;
    create_out(&a.out)?;

    let mut cells = Vec::new();
    for &l in &a.layers {
        for &h in &a.heads {
            let sc = ScorerConfig {
                n_sa_layers: l,
                n_heads: h,
                ..base.clone()
            };
            let mut scorer = Scorer::new(sc, d).map_err(|e| usage(e.to_string()))?;
            let started = Instant::now();
            let hist = train_stage2(&model, &mut scorer, &train, &valid, &cfg.stage2, &mut docvqa::training::silent)?;
            let results = Pipeline::new(&model, &scorer)?.evaluate(&test)?;
            let report = MetricsReport::from_results(&results)?;
            println!(
                "layers {l} heads {h:>2}: page accuracy {:.2}%  ANLS {:.4}  (best epoch {}, {:.0}s)",
                report.page_accuracy_pct,
                report.anls,
                hist.best_epoch,
                started.elapsed().as_secs_f64()
            );
            cells.push(SweepCell {
                layers: l,
                heads: h,
                best_epoch: hist.best_epoch,
                valid_page_accuracy_pct: hist.best_metric,
                page_accuracy_pct: report.page_accuracy_pct,
                anls: report.anls,
            });
        }
    }
    let table = sweep_table(&cells, &a.layers, &a.heads);
    print!("{table}");
    fs::write(a.out.join("sweep.txt"), &table)?;
    write_json(&a.out.join("sweep.json"), &cells)?;
    RunManifest::new("sweep", &a.out)
        .section("model", model.config())
        .section("scorer", &base)
        .section("stage2", &cfg.stage2)
        .seed("init", base.seed)
        .seed("train", cfg.stage2.seed)
        .input("data", &a.data)
        .input("stage1_checkpoint", &a.checkpoint)
        .write()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// report

fn report(a: ReportArgs) -> Result<()> {
    require_file(&a.results, "results file")?;
    let results = read_results(&a.results)?;
    if results.is_empty() {
        bail!("{} holds no results", a.results.display());
    }
    let report = MetricsReport::from_results(&results)?;
    print!("{report}");
    if let Some(out) = &a.out {
        create_out(out)?;
        write_json(&out.join("report.json"), &report)?;
        fs::write(out.join("report.txt"), report.to_string())?;
        RunManifest::new("report", out).input("results", &a.results).write()?;
    }
    Ok(())
}
