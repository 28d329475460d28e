use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use nsm_core::instructor::tokenize;
use nsm_core::machine::ModelInput;
use nsm_core::synthgen::{
    build_splits, load_split, save_split, Dataset, DatasetConfig, Split, SplitMode, SplitSpec,
};
use nsm_core::trainer::{
    ablate_graphs, evaluate, run_experiment, save_json, AblationMode, Checkpoint, EvalReport,
    MetricsLog, Prepared, TrainConfig,
};
use nsm_core::worldgraph::load_graph;
use serde_json::{json, Map, Value};

use crate::settings::Settings;

pub const CHECKPOINT_FILE: &str = "checkpoint.nsm";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const EVAL_CSV_FILE: &str = "eval_metrics.csv";
pub const EVAL_JSON_FILE: &str = "eval.json";
pub const SWEEP_CSV_FILE: &str = "steps_sweep.csv";
pub const SWEEP_JSON_FILE: &str = "steps_sweep.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const ABLATION_RUNS_FILE: &str = "ablation_runs.csv";
pub const ABLATION_TABLE_FILE: &str = "ablation_table.csv";

fn data_dir(s: &Settings) -> PathBuf {
    PathBuf::from(s.raw("data_dir"))
}

fn out_dir(s: &Settings) -> Result<PathBuf> {
    let dir = PathBuf::from(s.raw("out_dir"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn dataset_config(s: &Settings) -> Result<DatasetConfig> {
    let mut c = DatasetConfig {
        seed: s.get("seed")?,
        n_scenes: s.get("n_scenes")?,
        n_questions: s.get("n_questions")?,
        dim: s.get("dim")?,
        embedding_std: s.get("embedding_std")?,
        dense_features: s.get("dense_features")?,
        ..DatasetConfig::default()
    };
    let templates = s.list("templates");
    if !templates.is_empty() {
        c.templates = templates;
    }
    Ok(c)
}

fn split_spec(s: &Settings) -> Result<SplitSpec> {
    Ok(SplitSpec {
        mode: s.get::<SplitMode>("split")?,
        holdout: s.list("holdout"),
        seed: s.get("seed")?,
    })
}

fn train_config(s: &Settings) -> Result<TrainConfig> {
    let c = TrainConfig {
        learning_rate: s.get("learning_rate")?,
        batch_size: s.get("batch_size")?,
        grad_clip_norm: s.get("grad_clip_norm")?,
        ema_decay: s.get("ema_decay")?,
        dropout: s.get("dropout")?,
        dim: s.get("dim")?,
        steps: s.get("steps")?,
        seed: s.get("seed")?,
        max_epochs: s.get("max_epochs")?,
        early_stop_patience: s.get("patience")?,
        validation_fraction: s.get("validation_fraction")?,
    };
    c.validate()?;
    Ok(c)
}

fn load_data(s: &Settings) -> Result<(Dataset, Split)> {
    let dir = data_dir(s);
    let data =
        Dataset::load(&dir).with_context(|| format!("loading dataset from {}", dir.display()))?;
    let split =
        load_split(&dir).with_context(|| format!("loading split from {}", dir.display()))?;
    Ok((data, split))
}

fn count_templates<'a>(
    data: &Dataset,
    ids: impl Iterator<Item = &'a usize>,
) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for &id in ids {
        *out.entry(data.questions[id].template.clone()).or_insert(0) += 1;
    }
    out
}

pub fn gen_data(s: &Settings) -> Result<()> {
    let config = dataset_config(s)?;
    let spec = split_spec(s)?;
    let data = Dataset::generate(&config)?;
    let split = build_splits(&data.questions, &data.scenes, &data.ontology, &spec)?;
    let dir = data_dir(s);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    data.save(&dir)?;
    save_split(&dir, &split)?;
    s.write_resolved(&dir)?;

    let reloaded = Dataset::load(&dir)?;
    reloaded.verify_answers()?;
    ensure!(
        reloaded.questions == data.questions && load_split(&dir)? == split,
        "written dataset does not read back identically"
    );

    let summary = data.summary();
    println!(
        "wrote {} scenes and {} questions to {}",
        summary.scenes,
        summary.questions,
        dir.display()
    );
    let train = count_templates(&data, split.train.iter());
    let test = count_templates(&data, split.test.iter());
    println!(
        "{:<20} {:>7} {:>7} {:>7}",
        "template", "total", "train", "test"
    );
    for (t, n) in &summary.per_template {
        println!(
            "{:<20} {:>7} {:>7} {:>7}",
            t,
            n,
            train.get(t).copied().unwrap_or(0),
            test.get(t).copied().unwrap_or(0)
        );
    }
    println!(
        "{:<20} {:>7} {:>7} {:>7}",
        "all",
        summary.questions,
        split.train.len(),
        split.test.len()
    );
    Ok(())
}

fn report_json(report: &EvalReport) -> Value {
    serde_json::to_value(report).expect("report serializes")
}

pub fn train(s: &Settings) -> Result<()> {
    let tc = train_config(s)?;
    let ablation: AblationMode = s.get("ablation")?;
    let (data, split) = load_data(s)?;
    let out = out_dir(s)?;
    s.write_resolved(&out)?;
    let result = run_experiment(&data, &split, &tc, ablation)?;
    let o = &result.outcome;

    let ckpt_path = out.join(CHECKPOINT_FILE);
    o.checkpoint.save(&ckpt_path)?;
    ensure!(
        Checkpoint::load(&ckpt_path)? == o.checkpoint,
        "checkpoint {} does not read back identically",
        ckpt_path.display()
    );
    let mut metrics = o.history.clone();
    metrics.extend(&result.test.to_metrics(o.epochs_run, "test"));
    metrics.save_csv(&out.join(METRICS_FILE))?;
    save_json(
        &out.join(SUMMARY_FILE),
        &json!({
            "ablation": ablation.as_str(),
            "best_epoch": o.best_epoch,
            "best_valid_accuracy": o.best_valid_accuracy,
            "epochs_run": o.epochs_run,
            "optimizer_steps": o.optimizer_steps,
            "test": report_json(&result.test),
        }),
    )?;
    println!(
        "{ablation}: {} epochs (best {}), valid {:.4}, test {:.4} on {} questions",
        o.epochs_run,
        o.best_epoch,
        o.best_valid_accuracy,
        result.test.accuracy(),
        result.test.overall.total
    );
    println!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

pub fn eval(s: &Settings, checkpoint: Option<PathBuf>, raw: bool) -> Result<()> {
    let sweep: Vec<usize> = s.list_of("steps_sweep")?;
    let (data, split) = load_data(s)?;
    let out = out_dir(s)?;
    s.write_resolved(&out)?;
    if !sweep.is_empty() {
        return steps_sweep(s, &data, &split, &sweep, &out);
    }
    let path = checkpoint.unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    let ckpt = Checkpoint::load(&path)?;
    let report = score_checkpoint(&ckpt, &data, &split.test, !raw)?;
    report
        .to_metrics(0, "test")
        .save_csv(&out.join(EVAL_CSV_FILE))?;
    save_json(&out.join(EVAL_JSON_FILE), &report)?;
    println!(
        "{}: test accuracy {:.4} on {} questions",
        path.display(),
        report.accuracy(),
        report.overall.total
    );
    for (h, a) in &report.by_hop {
        println!("  hop {h}: {:.4} ({}/{})", a.accuracy, a.correct, a.total);
    }
    Ok(())
}

/// Scores a checkpoint on dataset questions `ids`.
pub fn score_checkpoint(
    ckpt: &Checkpoint,
    data: &Dataset,
    ids: &[usize],
    ema: bool,
) -> Result<EvalReport> {
    let prepared = Prepared::new(data, &ckpt.train_config, ckpt.model_config.ablation)?;
    ensure!(
        prepared.model_config.answers == ckpt.model_config.answers,
        "checkpoint answer vocabulary does not match the dataset"
    );
    let examples = prepared.examples(data, ids)?;
    let model = ckpt.model()?;
    Ok(evaluate(&model, ckpt.eval_params(ema), &examples)?)
}

fn steps_sweep(
    s: &Settings,
    data: &Dataset,
    split: &Split,
    sweep: &[usize],
    out: &Path,
) -> Result<()> {
    let base = train_config(s)?;
    let ablation: AblationMode = s.get("ablation")?;
    let mut log = MetricsLog::default();
    let mut rows = Vec::new();
    println!("{:>6} {:>9} {:>9}", "steps", "accuracy", "epochs");
    for &n in sweep {
        let tc = TrainConfig {
            steps: n,
            ..base.clone()
        };
        let r = run_experiment(data, split, &tc, ablation)?;
        log.extend(&r.test.to_metrics(n, "test"));
        println!(
            "{:>6} {:>9.4} {:>9}",
            n,
            r.test.accuracy(),
            r.outcome.epochs_run
        );
        rows.push(
            json!({"steps": n, "epochs_run": r.outcome.epochs_run, "test": report_json(&r.test)}),
        );
    }
    log.save_csv(&out.join(SWEEP_CSV_FILE))?;
    save_json(&out.join(SWEEP_JSON_FILE), &rows)?;
    Ok(())
}

pub struct TraceRequest {
    pub checkpoint: Option<PathBuf>,
    pub question_ids: Vec<usize>,
    pub graph: Option<PathBuf>,
    pub question: Option<String>,
    pub top_k: usize,
}

/// Question id, tokens, gold answer and model input.
type TraceItem = (Option<usize>, Vec<String>, Option<String>, ModelInput);

pub fn trace(s: &Settings, req: TraceRequest) -> Result<()> {
    let dir = data_dir(s);
    let data =
        Dataset::load(&dir).with_context(|| format!("loading dataset from {}", dir.display()))?;
    let out = out_dir(s)?;
    s.write_resolved(&out)?;
    let path = req.checkpoint.unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    let ckpt = Checkpoint::load(&path)?;
    let ablation = ckpt.model_config.ablation;
    let prepared = Prepared::new(&data, &ckpt.train_config, ablation)?;
    let model = ckpt.model()?;

    let mut items: Vec<TraceItem> = Vec::new();
    if let Some(graph_path) = &req.graph {
        let text = tokenize(req.question.as_deref().unwrap_or_default());
        let graph = load_graph(graph_path)
            .with_context(|| format!("loading graph {}", graph_path.display()))?;
        graph.check_vocab(&prepared.vocab)?;
        let relations = *ckpt.model_config.group_sizes.last().unwrap_or(&0);
        let graph = ablate_graphs(&[graph], ablation, relations)?.remove(0);
        let input = ModelInput::new(&prepared.lexicon, &prepared.vocab, &text, &graph)?;
        items.push((None, text, None, input));
    } else {
        if req.question_ids.is_empty() {
            bail!("trace needs --question-ids or --graph with --question");
        }
        for ex in prepared.examples(&data, &req.question_ids)? {
            let text = data.questions[ex.id].text.clone();
            items.push((Some(ex.id), text, Some(ex.answer), ex.input));
        }
    }

    let mut lines = String::new();
    for (id, text, answer, input) in &items {
        let t = model.trace_with(&ckpt.ema, input, req.top_k)?;
        let mut obj = Map::new();
        obj.insert("question_id".into(), json!(id));
        obj.insert("question".into(), json!(text.join(" ")));
        obj.insert("answer".into(), json!(answer));
        if let Value::Object(rest) = serde_json::to_value(&t)? {
            obj.extend(rest);
        }
        writeln!(lines, "{}", Value::Object(obj)).expect("string write");
        let correct = answer.as_ref().map(|a| {
            if *a == t.predicted {
                " (correct)"
            } else {
                " (wrong)"
            }
        });
        println!(
            "{}: predicted {}{}",
            text.join(" "),
            t.predicted,
            correct.unwrap_or("")
        );
    }
    let trace_path = out.join(TRACE_FILE);
    fs::write(&trace_path, lines).with_context(|| format!("writing {}", trace_path.display()))?;
    println!("{} traces written to {}", items.len(), trace_path.display());
    Ok(())
}

/// Accuracy over questions that need at least one relation hop.
pub fn relational_accuracy(report: &EvalReport) -> f64 {
    let (mut correct, mut total) = (0, 0);
    for (_, a) in report.by_hop.range(1..) {
        correct += a.correct;
        total += a.total;
    }
    if total == 0 {
        f64::NAN
    } else {
        correct as f64 / total as f64
    }
}

pub fn ablate(s: &Settings) -> Result<()> {
    let base = train_config(s)?;
    let seeds: u64 = s.get("seeds")?;
    ensure!(seeds > 0, "seeds must be positive");
    let (data, split) = load_data(s)?;
    let out = out_dir(s)?;
    s.write_resolved(&out)?;

    let mut runs = String::from("seed,ablation,accuracy,relational_accuracy,epochs_run\n");
    let mut sums: BTreeMap<AblationMode, (f64, f64)> = BTreeMap::new();
    for seed in base.seed..base.seed + seeds {
        for mode in AblationMode::all() {
            let tc = TrainConfig {
                seed,
                ..base.clone()
            };
            let r = run_experiment(&data, &split, &tc, mode)?;
            let (acc, rel) = (r.test.accuracy(), relational_accuracy(&r.test));
            writeln!(runs, "{seed},{mode},{acc},{rel},{}", r.outcome.epochs_run)
                .expect("string write");
            println!("seed {seed} {mode}: accuracy {acc:.4}, relational {rel:.4}");
            let e = sums.entry(mode).or_insert((0.0, 0.0));
            e.0 += acc;
            e.1 += rel;
        }
    }
    let runs_path = out.join(ABLATION_RUNS_FILE);
    fs::write(&runs_path, runs).with_context(|| format!("writing {}", runs_path.display()))?;

    let mut table = String::from("ablation,seeds,mean_accuracy,mean_relational_accuracy\n");
    println!("{:<14} {:>10} {:>12}", "ablation", "accuracy", "relational");
    for mode in AblationMode::all() {
        let (acc, rel) = sums[&mode];
        let (acc, rel) = (acc / seeds as f64, rel / seeds as f64);
        writeln!(table, "{mode},{seeds},{acc},{rel}").expect("string write");
        println!("{:<14} {:>10.4} {:>12.4}", mode.as_str(), acc, rel);
    }
    let table_path = out.join(ABLATION_TABLE_FILE);
    fs::write(&table_path, table).with_context(|| format!("writing {}", table_path.display()))?;
    Ok(())
}
