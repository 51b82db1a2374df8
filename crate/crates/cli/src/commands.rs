//! Subcommand implementations. Every input is loaded and cross-checked
//! before any training or evaluation starts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use kern_core::dataset::{read_annotations, validate_dataset, write_annotations, AnnotatedImage, DatasetSchema};
use kern_core::knowledge::{count_knowledge, Ablation, KnowledgeBase, KnowledgeCounts};
use kern_core::metrics::{evaluate, format_reports, EvalReport};
use kern_core::model::{Model, ModelSpec, Task};
use kern_core::relation_router::{read_predictions, write_predictions, PairPrediction, PredictedGraph};
use kern_core::synth::{build_process, generate_range};
use kern_core::tensor::{write_atomic, ParameterSet};
use kern_core::trainer::{self, format_log, predict_dataset, BEST_CHECKPOINT, MODEL_SPEC};
use kern_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{Cli, Command, TaskArg};

pub const KB_FILE: &str = "kb.bin";
pub const SCHEMA_FILE: &str = "schema.json";
pub const PROCESS_FILE: &str = "process.json";

pub struct Produced {
    pub outputs: Vec<PathBuf>,
    pub report: String,
}

type Inputs = BTreeMap<String, PathBuf>;

fn required<'a>(value: &'a Option<PathBuf>, flag: &str, cmd: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Validation(format!("{cmd} needs --{flag}")))
}

fn note(inputs: &mut Inputs, name: &str, path: &Path) {
    inputs.insert(name.to_string(), path.to_path_buf());
}

pub fn dispatch(cli: &Cli, cfg: &RunConfig, out: &Path, inputs: &mut Inputs) -> Result<Produced> {
    let c = &cli.common;
    let cmd = cli.command.name();
    match &cli.command {
        Command::Stats { annotations } => {
            let schema = required(&c.schema, "schema", cmd)?;
            note(inputs, "annotations", annotations);
            note(inputs, "schema", schema);
            cmd_stats(annotations, schema, out)
        }
        Command::Synth { .. } => cmd_synth(cfg, out),
        Command::Train { train, val, .. } => {
            let (schema, kb) = (required(&c.schema, "schema", cmd)?, required(&c.kb, "kb", cmd)?);
            for (n, p) in [("train", train.as_path()), ("val", val), ("schema", schema), ("kb", kb)] {
                note(inputs, n, p);
            }
            cmd_train(train, val, schema, kb, cfg, out)
        }
        Command::Eval {
            annotations,
            model_dir,
            predictions,
            task,
            per_predicate,
        } => {
            let schema = required(&c.schema, "schema", cmd)?;
            note(inputs, "annotations", annotations);
            note(inputs, "schema", schema);
            let source = match (model_dir, predictions) {
                (Some(dir), None) => {
                    let kb = required(&c.kb, "kb", cmd)?;
                    note(inputs, "model_dir", dir);
                    note(inputs, "kb", kb);
                    Source::Model { dir, kb }
                }
                (None, Some(p)) => {
                    note(inputs, "predictions", p);
                    Source::File(p)
                }
                _ => {
                    return Err(Error::Validation(
                        "eval needs exactly one of --model-dir or --predictions".into(),
                    ))
                }
            };
            cmd_eval(annotations, schema, source, *task, *per_predicate, cfg, out)
        }
        Command::Freq {
            annotations,
            per_predicate,
        } => {
            let (schema, kb) = (required(&c.schema, "schema", cmd)?, required(&c.kb, "kb", cmd)?);
            for (n, p) in [("annotations", annotations.as_path()), ("schema", schema), ("kb", kb)] {
                note(inputs, n, p);
            }
            cmd_freq(annotations, schema, kb, *per_predicate, cfg, out)
        }
        Command::Ablate { train, val, test, .. } => {
            let (schema, kb) = (required(&c.schema, "schema", cmd)?, required(&c.kb, "kb", cmd)?);
            for (n, p) in [
                ("train", train.as_path()),
                ("val", val),
                ("test", test),
                ("schema", schema),
                ("kb", kb),
            ] {
                note(inputs, n, p);
            }
            cmd_ablate(train, val, test, schema, kb, cfg, out)
        }
    }
}

/// Annotations validated against `schema`, plus their common feature length.
pub fn load_dataset(path: &Path, schema: &DatasetSchema) -> Result<(Vec<AnnotatedImage>, Option<usize>)> {
    let images = read_annotations(path)?;
    let d_f = validate_dataset(&images, schema)?;
    Ok((images, d_f))
}

/// Knowledge base whose category and predicate names match `schema`.
pub fn load_kb(path: &Path, schema: &DatasetSchema) -> Result<KnowledgeBase> {
    let kb = KnowledgeBase::load(path)?;
    if kb.schema() != schema {
        return Err(Error::Validation(format!(
            "knowledge base is C={}, K={} but schema is C={}, K={} (or names differ)",
            kb.num_categories(),
            kb.num_predicates(),
            schema.num_categories(),
            schema.num_predicates()
        )));
    }
    Ok(kb)
}

fn feature_dim(d_f: Option<usize>, what: &str) -> Result<usize> {
    match d_f {
        Some(d) if d > 0 => Ok(d),
        _ => Err(Error::Validation(format!("{what} has no region features"))),
    }
}

pub fn cmd_stats(annotations: &Path, schema_path: &Path, out: &Path) -> Result<Produced> {
    let schema = DatasetSchema::load(schema_path)?;
    let (images, _) = load_dataset(annotations, &schema)?;
    let counts = count_knowledge(&images, &schema)?;
    let kb = counts.finish(&schema)?;
    let kb_path = out.join(KB_FILE);
    kb.save(&kb_path)?;
    let report = stats_summary(&kb, &counts);
    let summary_path = out.join("stats.txt");
    write_atomic(&summary_path, report.as_bytes())?;
    Ok(Produced {
        outputs: vec![kb_path, summary_path],
        report,
    })
}

/// Strongest off-diagonal co-occurrences and a histogram of the entropy of
/// every observed predicate fiber.
pub fn stats_summary(kb: &KnowledgeBase, counts: &KnowledgeCounts) -> String {
    let schema = kb.schema();
    let (c, k) = (kb.num_categories(), kb.num_predicates());
    let mut s = String::new();
    let _ = writeln!(s, "images {}  categories {c}  predicates {k}", counts.images());
    let mut pairs: Vec<(f64, usize, usize)> = (0..c)
        .flat_map(|a| (0..c).map(move |b| (a, b)))
        .filter(|(a, b)| a != b)
        .map(|(a, b)| (kb.cooccurrence_at(a, b), a, b))
        .filter(|(v, _, _)| *v > 0.0)
        .collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    let _ = writeln!(s, "top co-occurrences P(row present | col present):");
    for (v, a, b) in pairs.iter().take(10) {
        let _ = writeln!(s, "  {:<20} | {:<20} {v:.3}", schema.categories[*a], schema.categories[*b]);
    }
    let entropies = kb.fiber_entropies();
    let max = (k as f64).ln();
    let bins = 10;
    let mut hist = vec![0usize; bins];
    let mut observed = 0;
    for a in 0..c {
        for b in 0..c {
            if counts.pair_total(a, b) == 0 {
                continue;
            }
            observed += 1;
            let e = entropies[a * c + b];
            let idx = if max > 0.0 { ((e / max) * bins as f64) as usize } else { 0 };
            hist[idx.min(bins - 1)] += 1;
        }
    }
    let _ = writeln!(s, "predicate fiber entropy, {observed} of {} fibers observed (nats):", c * c);
    for (i, n) in hist.iter().enumerate() {
        let lo = max * i as f64 / bins as f64;
        let hi = max * (i + 1) as f64 / bins as f64;
        let _ = writeln!(s, "  [{lo:.2}, {hi:.2}) {n}");
    }
    s
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<Produced> {
    let s = &cfg.synth;
    let process = build_process(s)?;
    let schema_path = out.join(SCHEMA_FILE);
    s.schema().save(&schema_path)?;
    let process_path = out.join(PROCESS_FILE);
    process.save(&process_path)?;
    let mut outputs = vec![schema_path, process_path];
    let mut start = 0;
    let mut report = String::new();
    for (name, count) in [
        ("train", s.images),
        ("val", cfg.splits.val_images),
        ("test", cfg.splits.test_images),
    ] {
        let images = generate_range(&process, s, start, count)?;
        start += count;
        let path = out.join(format!("{name}.jsonl"));
        write_annotations(&path, &images)?;
        let triplets: usize = images.iter().map(|i| i.triplets.len()).sum();
        let _ = writeln!(report, "{name}: {count} images, {triplets} triplets -> {}", path.display());
        outputs.push(path);
    }
    Ok(Produced { outputs, report })
}

pub fn cmd_train(train: &Path, val: &Path, schema_path: &Path, kb_path: &Path, cfg: &RunConfig, out: &Path) -> Result<Produced> {
    let schema = DatasetSchema::load(schema_path)?;
    let kb = load_kb(kb_path, &schema)?;
    let (train_set, d_train) = load_dataset(train, &schema)?;
    let (val_set, d_val) = load_dataset(val, &schema)?;
    let d_f = feature_dim(d_train, "training split")?;
    if d_val.is_some_and(|d| d != d_f) {
        return Err(Error::Validation(format!(
            "validation features have length {:?}, training {d_f}",
            d_val
        )));
    }
    let spec = ModelSpec::new(&schema, d_f, cfg.model);
    let outcome = trainer::train(&train_set, &val_set, &kb, spec, &cfg.train, Some(out))?;
    let mut report = format_log(&outcome.log);
    let _ = writeln!(report, "best epoch {}", outcome.best_epoch);
    Ok(Produced {
        outputs: [MODEL_SPEC, BEST_CHECKPOINT, trainer::LAST_CHECKPOINT, trainer::TRAIN_LOG]
            .iter()
            .map(|f| out.join(f))
            .collect(),
        report,
    })
}

pub fn load_model(dir: &Path) -> Result<Model> {
    let spec = ModelSpec::load(&dir.join(MODEL_SPEC))?;
    let params = ParameterSet::load(&dir.join(BEST_CHECKPOINT))?;
    Model::from_params(spec, params)
}

pub enum Source<'a> {
    Model { dir: &'a Path, kb: &'a Path },
    File(&'a Path),
}

fn tasks(arg: TaskArg) -> Vec<Task> {
    match arg {
        TaskArg::Predcls => vec![Task::PredCls],
        TaskArg::Sgcls => vec![Task::SgCls],
        TaskArg::Both => vec![Task::PredCls, Task::SgCls],
    }
}

fn task_tag(t: Task) -> &'static str {
    match t {
        Task::PredCls => "predcls",
        Task::SgCls => "sgcls",
    }
}

/// Rejects predictions whose distributions do not fit the schema.
pub fn check_predictions(preds: &[PredictedGraph], schema: &DatasetSchema) -> Result<()> {
    let (c, k) = (schema.num_categories(), schema.num_predicates());
    for p in preds {
        if let Some(o) = p.objects.iter().find(|o| o.len() != c) {
            return Err(Error::Validation(format!(
                "image {}: object distribution of length {} for {c} categories",
                p.image_id,
                o.len()
            )));
        }
        if let Some(pp) = p.pairs.iter().find(|pp| pp.probs.len() != k) {
            return Err(Error::Validation(format!(
                "image {}: predicate distribution of length {} for {k} predicates",
                p.image_id,
                pp.probs.len()
            )));
        }
    }
    Ok(())
}

fn write_eval(out: &Path, tag: &str, reports: &[EvalReport], outputs: &mut Vec<PathBuf>) -> Result<()> {
    let path = out.join(format!("eval_{tag}.json"));
    let text = serde_json::to_string_pretty(reports).expect("reports serialize");
    write_atomic(&path, (text + "\n").as_bytes())?;
    outputs.push(path);
    Ok(())
}

pub fn cmd_eval(
    annotations: &Path,
    schema_path: &Path,
    source: Source<'_>,
    task: TaskArg,
    per_predicate: bool,
    cfg: &RunConfig,
    out: &Path,
) -> Result<Produced> {
    let schema = DatasetSchema::load(schema_path)?;
    let (images, d_f) = load_dataset(annotations, &schema)?;
    let mut outputs = Vec::new();
    let mut report = String::new();
    match source {
        Source::File(path) => {
            let [t] = tasks(task)[..] else {
                return Err(Error::Validation("scoring a predictions file needs a single --task".into()));
            };
            let preds = read_predictions(path)?;
            check_predictions(&preds, &schema)?;
            let reports = evaluate(&images, &preds, t, &cfg.eval.ks, schema.num_predicates(), cfg.eval.options())?;
            write_eval(out, task_tag(t), &reports, &mut outputs)?;
            report += &format_reports(&reports, &schema, per_predicate);
        }
        Source::Model { dir, kb } => {
            let kb = load_kb(kb, &schema)?;
            let model = load_model(dir)?;
            if model.spec.num_categories != schema.num_categories() || model.spec.num_predicates != schema.num_predicates() {
                return Err(Error::Validation("model and schema disagree on C or K".into()));
            }
            if d_f.is_some_and(|d| d != model.spec.feature_dim) {
                return Err(Error::Validation(format!(
                    "annotations have features of length {d_f:?}, model expects {}",
                    model.spec.feature_dim
                )));
            }
            for t in tasks(task) {
                let preds = predict_dataset(&model, &kb, &images, t)?;
                let pred_path = out.join(format!("predictions_{}.jsonl", task_tag(t)));
                write_predictions(&pred_path, &preds)?;
                outputs.push(pred_path);
                let reports = evaluate(&images, &preds, t, &cfg.eval.ks, schema.num_predicates(), cfg.eval.options())?;
                write_eval(out, task_tag(t), &reports, &mut outputs)?;
                report += &format_reports(&reports, &schema, per_predicate);
            }
        }
    }
    Ok(Produced { outputs, report })
}

/// FREQ predictions: annotated labels, and for every ordered pair the
/// knowledge-base fiber of its label pair.
pub fn freq_predictions(images: &[AnnotatedImage], kb: &KnowledgeBase) -> Result<Vec<PredictedGraph>> {
    let c = kb.num_categories();
    images
        .iter()
        .map(|img| {
            let n = img.regions.len();
            let objects = img
                .regions
                .iter()
                .map(|r| {
                    let mut p = vec![0.0; c];
                    p[r.label] = 1.0;
                    p
                })
                .collect();
            let mut pairs = Vec::with_capacity(n * n.saturating_sub(1));
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        pairs.push(PairPrediction {
                            subj: i,
                            obj: j,
                            probs: kb.freq_predict(img.regions[i].label, img.regions[j].label, false)?,
                        });
                    }
                }
            }
            Ok(PredictedGraph {
                image_id: img.image_id.clone(),
                objects,
                pairs,
                boxes: None,
            })
        })
        .collect()
}

pub fn cmd_freq(annotations: &Path, schema_path: &Path, kb_path: &Path, per_predicate: bool, cfg: &RunConfig, out: &Path) -> Result<Produced> {
    let schema = DatasetSchema::load(schema_path)?;
    let kb = load_kb(kb_path, &schema)?;
    let (images, _) = load_dataset(annotations, &schema)?;
    let preds = freq_predictions(&images, &kb)?;
    let pred_path = out.join("predictions_freq.jsonl");
    write_predictions(&pred_path, &preds)?;
    let reports = evaluate(&images, &preds, Task::PredCls, &cfg.eval.ks, schema.num_predicates(), cfg.eval.options())?;
    let mut outputs = vec![pred_path];
    write_eval(out, "freq", &reports, &mut outputs)?;
    Ok(Produced {
        outputs,
        report: format_reports(&reports, &schema, per_predicate),
    })
}

pub const VARIANTS: [(&str, &str, Option<Ablation>); 3] = [
    ("full", "full", None),
    ("w/o rk", "no-rk", Some(Ablation::Relation)),
    ("w/o rk & ok", "no-rk-ok", Some(Ablation::RelationAndObject)),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub best_epoch: usize,
    /// `[with constraint, without]`.
    pub predcls: Vec<EvalReport>,
    pub sgcls: Vec<EvalReport>,
}

/// Seed-averaged scores with the graph constraint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// SGCls mR@50, mR@100, PredCls mR@50, mR@100.
    pub mean_recall: [f64; 4],
    pub mean_mr: f64,
    /// SGCls R@50, R@100, PredCls R@50, R@100.
    pub recall: [f64; 4],
    pub mean_r: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<AblationRun>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn runs_of(&self, variant: &str) -> Vec<&AblationRun> {
        self.runs.iter().filter(|r| r.variant == variant).collect()
    }

    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

fn cell(r: &EvalReport, k: usize, mean: bool) -> f64 {
    let v = if mean { r.mean_recall_at(k) } else { r.recall_at(k) };
    v.expect("ablation evaluates K = 50 and 100")
}

/// `[SGCls@50, SGCls@100, PredCls@50, PredCls@100]` with constraint.
pub fn table_cells(run: &AblationRun, mean: bool) -> [f64; 4] {
    [
        cell(&run.sgcls[0], 50, mean),
        cell(&run.sgcls[0], 100, mean),
        cell(&run.predcls[0], 50, mean),
        cell(&run.predcls[0], 100, mean),
    ]
}

pub fn summarise_ablation(seeds: Vec<u64>, runs: Vec<AblationRun>) -> AblationReport {
    let rows = VARIANTS
        .iter()
        .map(|(variant, _, _)| {
            let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == *variant).collect();
            let avg = |mean: bool| {
                let mut acc = [0.0; 4];
                for r in &mine {
                    for (a, v) in acc.iter_mut().zip(table_cells(r, mean)) {
                        *a += v / mine.len() as f64;
                    }
                }
                acc
            };
            let (mr, r) = (avg(true), avg(false));
            AblationRow {
                variant: variant.to_string(),
                mean_recall: mr,
                mean_mr: mr.iter().sum::<f64>() / 4.0,
                recall: r,
                mean_r: r.iter().sum::<f64>() / 4.0,
            }
        })
        .collect();
    AblationReport { seeds, runs, rows }
}

pub fn format_ablation(report: &AblationReport) -> String {
    let mut s = String::new();
    let header = |s: &mut String, what: &str| {
        let _ = writeln!(
            s,
            "{:<14} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "", "SGCls", "", "PredCls", "", ""
        );
        let _ = writeln!(
            s,
            "{:<14} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "method",
            format!("{what}@50"),
            format!("{what}@100"),
            format!("{what}@50"),
            format!("{what}@100"),
            format!("Mean {what}")
        );
    };
    let _ = writeln!(s, "with graph constraint, averaged over seeds {:?}", report.seeds);
    for mean in [true, false] {
        header(&mut s, if mean { "mR" } else { "R" });
        for row in &report.rows {
            let (cells, m) = if mean {
                (row.mean_recall, row.mean_mr)
            } else {
                (row.recall, row.mean_r)
            };
            let _ = write!(s, "{:<14}", row.variant);
            for v in cells.iter().chain([&m]) {
                let _ = write!(s, " {:>9.2}", 100.0 * v);
            }
            s.push('\n');
        }
        s.push('\n');
    }
    let _ = writeln!(s, "PredCls mR@50 per seed:");
    for (variant, _, _) in VARIANTS {
        let _ = write!(s, "  {variant:<14}");
        for r in report.runs_of(variant) {
            let _ = write!(s, " {:>7.2}", 100.0 * cell(&r.predcls[0], 50, true));
        }
        s.push('\n');
    }
    s
}

pub fn cmd_ablate(
    train: &Path,
    val: &Path,
    test: &Path,
    schema_path: &Path,
    kb_path: &Path,
    cfg: &RunConfig,
    out: &Path,
) -> Result<Produced> {
    let schema = DatasetSchema::load(schema_path)?;
    let kb = load_kb(kb_path, &schema)?;
    let (train_set, d_f) = load_dataset(train, &schema)?;
    let (val_set, _) = load_dataset(val, &schema)?;
    let (test_set, _) = load_dataset(test, &schema)?;
    let d_f = feature_dim(d_f, "training split")?;
    let spec = ModelSpec::new(&schema, d_f, cfg.model);
    let mut ks = cfg.eval.ks.clone();
    ks.extend([50, 100]);
    ks.sort_unstable();
    ks.dedup();

    let mut runs = Vec::new();
    let mut outputs = Vec::new();
    for &seed in &cfg.ablate.seeds {
        for (variant, dir_name, ablation) in VARIANTS {
            let variant_kb = ablation.map_or_else(|| kb.clone(), |a| kb.make_uniform_ablation(a));
            let dir = out.join(dir_name).join(format!("seed{seed}"));
            let train_cfg = trainer::TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let outcome = trainer::train(&train_set, &val_set, &variant_kb, spec, &train_cfg, Some(&dir))?;
            let eval = |task| -> Result<Vec<EvalReport>> {
                let preds = predict_dataset(&outcome.best, &variant_kb, &test_set, task)?;
                evaluate(&test_set, &preds, task, &ks, schema.num_predicates(), cfg.eval.options())
            };
            runs.push(AblationRun {
                variant: variant.to_string(),
                seed,
                best_epoch: outcome.best_epoch,
                predcls: eval(Task::PredCls)?,
                sgcls: eval(Task::SgCls)?,
            });
            outputs.push(dir);
        }
    }
    let report = summarise_ablation(cfg.ablate.seeds.clone(), runs);
    let json_path = out.join("ablation.json");
    write_atomic(
        &json_path,
        (serde_json::to_string_pretty(&report).expect("report serializes") + "\n").as_bytes(),
    )?;
    let text = format_ablation(&report);
    let text_path = out.join("ablation.txt");
    write_atomic(&text_path, text.as_bytes())?;
    outputs.extend([json_path, text_path]);
    Ok(Produced { outputs, report: text })
}
