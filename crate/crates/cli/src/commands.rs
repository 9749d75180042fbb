//! Subcommand implementations.
//!
//! Run directory layout:
//!
//! ```text
//! config.json            effective config saved by `pretrain`
//! corpus.jsonl           every document, tagged with its split
//! splits.json            forget batches / retain / held-out ids
//! model.ckpt             pretrained checkpoint
//! pretrain.csv           epoch, loss
//! pretrain.json          loss curve and memorization checks
//! thresholds.json
//! unlearn/<tag>/         model.ckpt, summary.json, trace-b<k>.json, trace-b<k>.csv
//! extraction-<name>.json / .csv
//! report/                summary.txt, CSVs and SVG charts
//! metadata/<command>.json   timestamps and arguments (the only non-reproducible files)
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use seqforget::corpus::{read_jsonl, write_jsonl, SplitManifest};
use seqforget::experiment::{extraction_eval, pretrain_until_memorized, ExperimentConfig, ExtractionReport};
use seqforget::lm::{init_params, load_checkpoint, save_checkpoint};
use seqforget::metrics::{compute_thresholds, paper_reference};
use seqforget::unlearn::{retention_probe, sequential_unlearn, StopMetrics};
use seqforget::{CorpusSplit, Error, ForgettingThresholds, Method, ModelParams, StopReason, TokenSeq, UnlearnTrace};

use crate::config::{resolve, SAVED_CONFIG};
use crate::output::{write_bytes, write_csv, write_json, RunMeta};
use crate::svg::{self, Chart, Series};
use crate::Global;

const MODEL: &str = "model.ckpt";
const CORPUS: &str = "corpus.jsonl";
const SPLITS: &str = "splits.json";
const THRESHOLDS: &str = "thresholds.json";

fn validated(cfg: ExperimentConfig) -> Result<ExperimentConfig> {
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<ModelParams> {
    let (p, _) = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(p)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn load_split(run: &Path, cfg: &ExperimentConfig) -> Result<CorpusSplit> {
    let tok = cfg.tokenizer();
    let corpus = read_jsonl(&run.join(CORPUS), &tok).with_context(|| format!("reading {}", run.join(CORPUS).display()))?;
    let manifest: SplitManifest = read_json(&run.join(SPLITS))?;
    Ok(CorpusSplit::from_manifest(&corpus, &manifest)?)
}

fn display(run: &Path, p: &Path) -> String {
    p.strip_prefix(run).unwrap_or(p).display().to_string()
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Train exactly this many epochs, ignoring the memorization target.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Upper bound on epochs when training towards the target.
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Stop once every forget batch has mean MA at least this.
    #[arg(long)]
    pub target_ma: Option<f64>,
    /// JSON Lines corpus (`id`, `text`) instead of the synthetic one.
    #[arg(long, value_name = "FILE")]
    pub corpus: Option<PathBuf>,
}

#[derive(Serialize)]
struct CurveRow {
    epoch: usize,
    loss: f64,
}

pub fn pretrain(g: &Global, a: PretrainArgs) -> Result<()> {
    let meta = RunMeta::start("pretrain");
    let (run, mut cfg) = resolve(g, false)?;
    let p = &mut cfg.pretrain;
    if let Some(v) = a.max_epochs {
        p.max_epochs = v;
    }
    if let Some(v) = a.lr {
        p.lr = v;
    }
    if let Some(v) = a.batch_size {
        p.batch_size = v;
    }
    if let Some(v) = a.target_ma {
        p.target_forget_ma = Some(v);
    }
    if let Some(v) = a.epochs {
        p.max_epochs = v;
        p.target_forget_ma = None;
    }
    if let Some(path) = a.corpus {
        cfg.corpus.path = Some(path);
    }
    cfg.out_dir = None;
    let cfg = validated(cfg)?;

    let corpus = cfg.load_corpus().context("loading corpus")?;
    let split = cfg.split(&corpus)?;
    let mut params = init_params(&cfg.model, cfg.seed)?;
    let report = pretrain_until_memorized(&mut params, &split.pretraining_data(), &split.forget_batches, &cfg.pretrain, cfg.seed)?;
    if report.curve.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numerical("pretraining loss became non-finite".into()).into());
    }

    let mut tagged: Vec<TokenSeq> = split.forget().chain(&split.retain_pool).chain(&split.heldout).cloned().collect();
    tagged.sort_by(|x, y| x.id.cmp(&y.id));
    let mut jsonl = Vec::new();
    write_jsonl(&mut jsonl, &tagged, &cfg.tokenizer())?;
    let rows: Vec<CurveRow> = report.curve.iter().enumerate().map(|(i, &loss)| CurveRow { epoch: i + 1, loss }).collect();

    write_json(&run.join(SAVED_CONFIG), &cfg)?;
    write_bytes(&run.join(CORPUS), &jsonl)?;
    write_json(&run.join(SPLITS), &split.manifest(cfg.seed))?;
    write_csv(&run.join("pretrain.csv"), &rows)?;
    write_json(&run.join("pretrain.json"), &report)?;
    save_checkpoint(&run.join(MODEL), &params, None)?;

    let last = report.checks.last().map(|c| c.1).unwrap_or(f64::NAN);
    println!(
        "pretrained {} epochs; worst forget-batch MA {last:.3}{}",
        report.curve.len(),
        match (cfg.pretrain.target_forget_ma, report.reached_target) {
            (Some(t), false) => format!(" (target {t} not reached)"),
            _ => String::new(),
        }
    );
    let outputs = [SAVED_CONFIG, CORPUS, SPLITS, "pretrain.csv", "pretrain.json", MODEL].map(String::from);
    meta.finish(&run, &outputs)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct ThresholdsArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Held-out JSON Lines file; defaults to the run's held-out split.
    #[arg(long, value_name = "FILE")]
    pub heldout: Option<PathBuf>,
    /// Extraction-likelihood n-gram order.
    #[arg(long, short = 'n')]
    pub el_order: Option<usize>,
    /// Emit a published reference instead of measuring (e.g. opt-125m).
    #[arg(long, value_name = "MODEL")]
    pub paper_reference: Option<String>,
}

pub fn thresholds(g: &Global, a: ThresholdsArgs) -> Result<()> {
    let meta = RunMeta::start("thresholds");
    let (run, cfg) = resolve(g, true)?;
    let th = match &a.paper_reference {
        Some(name) => paper_reference(name)?,
        None => {
            let cfg = validated(cfg)?;
            let model = load_model(&a.checkpoint.unwrap_or_else(|| run.join(MODEL)))?;
            let heldout = match &a.heldout {
                Some(path) => read_jsonl(path, &cfg.tokenizer()).with_context(|| format!("reading {}", path.display()))?,
                None => load_split(&run, &cfg)?.heldout,
            };
            let n = a.el_order.unwrap_or(cfg.unlearn.el_order);
            compute_thresholds(&model, &heldout, n, "heldout")?
        }
    };
    write_json(&run.join(THRESHOLDS), &th)?;
    println!("thresholds {th}");
    meta.finish(&run, &[THRESHOLDS.to_string()])
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct UnlearnArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub thresholds: Option<PathBuf>,
    /// ul, pop_flat or pop.
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub retain_sample_size: Option<usize>,
    /// Which metrics gate stopping: all, el, ma or rma.
    #[arg(long, value_parser = parse_stop_metrics)]
    pub stop_metrics: Option<StopMetrics>,
    /// Forget batch indices, comma separated; several run sequentially.
    /// Defaults to every batch.
    #[arg(long, value_delimiter = ',')]
    pub batches: Vec<usize>,
    /// Output subdirectory under `unlearn/`; defaults to the method name.
    #[arg(long)]
    pub tag: Option<String>,
}

fn parse_stop_metrics(s: &str) -> Result<StopMetrics, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
        .map_err(|_| format!("unknown stop metrics {s:?} (expected all, el, ma or rma)"))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UnlearnSummary {
    pub tag: String,
    pub method: Method,
    pub batches: Vec<usize>,
    pub stop_reasons: Vec<StopReason>,
    pub epochs: Vec<usize>,
    /// Held-out perplexity before the first batch and after each batch.
    pub heldout_ppl: Vec<f64>,
    pub heldout_acc: Vec<f64>,
}

pub fn unlearn(g: &Global, a: UnlearnArgs) -> Result<()> {
    let meta = RunMeta::start("unlearn");
    let (run, mut cfg) = resolve(g, true)?;
    let thresholds: ForgettingThresholds = read_json(&a.thresholds.unwrap_or_else(|| run.join(THRESHOLDS)))?;
    thresholds.validate()?;
    let u = &mut cfg.unlearn;
    u.el_order = thresholds.n;
    if let Some(v) = a.method {
        u.method = v;
    }
    if let Some(v) = a.lambda {
        u.lambda = v;
    }
    if let Some(v) = a.lr {
        u.lr = v;
    }
    if let Some(v) = a.max_epochs {
        u.max_epochs = v;
    }
    if let Some(v) = a.retain_sample_size {
        u.retain_sample_size = v;
    }
    if let Some(v) = a.stop_metrics {
        u.stop_metrics = v;
    }
    let cfg = validated(cfg)?;
    let split = load_split(&run, &cfg)?;
    let params = load_model(&a.checkpoint.unwrap_or_else(|| run.join(MODEL)))?;

    let batches: Vec<usize> = if a.batches.is_empty() { (0..split.forget_batches.len()).collect() } else { a.batches };
    let forget: Vec<Vec<TokenSeq>> = batches
        .iter()
        .map(|&b| {
            split.forget_batches.get(b).cloned().ok_or_else(|| {
                Error::InvalidInput(format!("forget batch {b} does not exist ({} batches)", split.forget_batches.len()))
            })
        })
        .collect::<Result<_, _>>()?;

    let before = retention_probe(&params, &split.heldout)?;
    let (final_params, traces) =
        sequential_unlearn(params, &forget, &split.retain_pool, &split.heldout, &thresholds, &cfg.unlearn)?;

    let tag = a.tag.unwrap_or_else(|| cfg.unlearn.method.to_string());
    let dir = run.join("unlearn").join(&tag);
    let mut outputs = Vec::new();
    for (t, b) in traces.iter().zip(&batches) {
        let json = dir.join(format!("trace-b{b}.json"));
        let csv = dir.join(format!("trace-b{b}.csv"));
        write_json(&json, t)?;
        write_csv(&csv, &t.rows())?;
        outputs.push(display(&run, &json));
        outputs.push(display(&run, &csv));
    }
    let summary = UnlearnSummary {
        tag: tag.clone(),
        method: cfg.unlearn.method,
        batches: batches[..traces.len()].to_vec(),
        stop_reasons: traces.iter().map(|t| t.stop_reason).collect(),
        epochs: traces.iter().map(|t| t.epochs()).collect(),
        heldout_ppl: std::iter::once(before.perplexity).chain(traces.iter().map(|t| t.last().retention.perplexity)).collect(),
        heldout_acc: std::iter::once(before.accuracy).chain(traces.iter().map(|t| t.last().retention.accuracy)).collect(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    save_checkpoint(&dir.join(MODEL), &final_params, None)?;
    outputs.push(display(&run, &dir.join("summary.json")));
    outputs.push(display(&run, &dir.join(MODEL)));

    for (t, b) in traces.iter().zip(&batches) {
        let m = &t.last().forget;
        println!(
            "batch {b}: {:?} after {} epochs; EL {:.3} MA {:.3} RMA {:.3}; held-out ppl {:.3} acc {:.3}",
            t.stop_reason,
            t.epochs(),
            m.el,
            m.ma,
            m.rma,
            t.last().retention.perplexity,
            t.last().retention.accuracy
        );
    }
    meta.finish(&run, &outputs)?;
    if traces.iter().any(|t| t.stop_reason == StopReason::NumericalFailure) {
        return Err(Error::Numerical(format!("unlearning diverged; partial traces written to {}", dir.display())).into());
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Targets as JSON Lines; defaults to forget batch `--batch`.
    #[arg(long, value_name = "FILE")]
    pub targets: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub batch: usize,
    /// Nucleus thresholds, comma separated.
    #[arg(long = "p", value_delimiter = ',')]
    pub p_values: Vec<f64>,
    /// Samples per target and p.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Output name: writes `extraction-<name>.json` and `.csv`.
    #[arg(long, default_value = "model")]
    pub name: String,
}

#[derive(Serialize)]
struct ExtractionCsvRow<'a> {
    target_id: &'a str,
    p: Option<f64>,
    sample: usize,
    bleu_tokens: Option<f64>,
    chrf_text: Option<f64>,
    warning: Option<&'a str>,
}

pub fn extract_eval(g: &Global, a: ExtractArgs) -> Result<()> {
    let meta = RunMeta::start("extract-eval");
    let (run, mut cfg) = resolve(g, true)?;
    if !a.p_values.is_empty() {
        cfg.extraction.p_values = a.p_values;
    }
    if let Some(s) = a.samples {
        cfg.extraction.samples = s;
    }
    let cfg = validated(cfg)?;
    let model = load_model(&a.checkpoint.unwrap_or_else(|| run.join(MODEL)))?;
    let targets = match &a.targets {
        Some(path) => read_jsonl(path, &cfg.tokenizer()).with_context(|| format!("reading {}", path.display()))?,
        None => {
            let split = load_split(&run, &cfg)?;
            split.forget_batches.get(a.batch).cloned().ok_or_else(|| {
                Error::InvalidInput(format!("forget batch {} does not exist ({} batches)", a.batch, split.forget_batches.len()))
            })?
        }
    };
    let report = extraction_eval(&model, &targets, &cfg.tokenizer(), &cfg.extraction, cfg.seed)?;
    let rows: Vec<ExtractionCsvRow> = report
        .rows
        .iter()
        .map(|r| ExtractionCsvRow {
            target_id: &r.target_id,
            p: r.p,
            sample: r.sample,
            bleu_tokens: r.bleu,
            chrf_text: r.chrf,
            warning: r.warning.as_deref(),
        })
        .collect();
    let json = format!("extraction-{}.json", a.name);
    let csv = format!("extraction-{}.csv", a.name);
    write_json(&run.join(&json), &report)?;
    write_csv(&run.join(&csv), &rows)?;
    for agg in &report.aggregates {
        let fmt = |s: &Option<seqforget::experiment::ScoreStats>| match s {
            Some(s) => format!("{:.3} [{:.3}, {:.3}]", s.mean, s.min, s.max),
            None => "n/a".into(),
        };
        println!("p={}: {} samples, BLEU {}, chrF {}", agg.p, agg.count, fmt(&agg.bleu), fmt(&agg.chrf));
    }
    meta.finish(&run, &[json, csv])
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct ReportArgs {}

/// One plotted point of a metric-vs-epoch chart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub batch: usize,
    pub epoch: usize,
    /// Epochs since the start of the whole sequence.
    pub step: usize,
    pub el: f64,
    pub ma: f64,
    pub rma: f64,
}

/// One plotted point of the retention-vs-batch chart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionPoint {
    pub tag: String,
    /// Batches unlearned so far (0 = before unlearning).
    pub batches_done: usize,
    pub heldout_ppl: f64,
    pub heldout_acc: f64,
}

fn list_dir(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir).map(|it| it.filter_map(|e| e.ok().map(|e| e.path())).collect()).unwrap_or_default();
    v.sort();
    v
}

fn load_traces(dir: &Path) -> Result<Vec<(usize, UnlearnTrace)>> {
    let mut out = Vec::new();
    for p in list_dir(dir) {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(b) = name.strip_prefix("trace-b").and_then(|r| r.strip_suffix(".json")) {
            if let Ok(b) = b.parse::<usize>() {
                out.push((b, read_json::<UnlearnTrace>(&p)?));
            }
        }
    }
    Ok(out)
}

pub fn report(g: &Global, _a: ReportArgs) -> Result<()> {
    let meta = RunMeta::start("report");
    let (run, _) = resolve(g, true)?;
    let mut runs = Vec::new();
    for dir in list_dir(&run.join("unlearn")).into_iter().filter(|d| d.is_dir()) {
        let summary_path = dir.join("summary.json");
        if !summary_path.exists() {
            continue;
        }
        let summary: UnlearnSummary = read_json(&summary_path)?;
        let mut traces = load_traces(&dir)?;
        // keep the order in which batches were run
        traces.sort_by_key(|(b, _)| summary.batches.iter().position(|x| x == b).unwrap_or(usize::MAX));
        if !traces.is_empty() {
            runs.push((summary, traces));
        }
    }
    if runs.is_empty() {
        bail!(
            "no unlearning traces in {}; expected {}/unlearn/<tag>/summary.json with trace-b<k>.json files (run `seqforget unlearn` first)",
            run.display(),
            run.display()
        );
    }

    let out = run.join("report");
    let mut outputs = Vec::new();
    let mut text = String::new();
    let mut retention = Vec::new();
    for (summary, traces) in &runs {
        text.push_str(&format!("run {} (method {})\n", summary.tag, summary.method));
        text.push_str("batch  epochs  stop              EL      MA      RMA     ppl      acc\n");
        let mut points = Vec::new();
        let mut offset = 0;
        for (b, t) in traces {
            let last = t.last();
            text.push_str(&format!(
                "{b:<6} {:<7} {:<17} {:<7.4} {:<7.4} {:<7.4} {:<8.4} {:.4}\n",
                t.epochs(),
                serde_json::to_value(t.stop_reason)?.as_str().unwrap_or_default(),
                last.forget.el,
                last.forget.ma,
                last.forget.rma,
                last.retention.perplexity,
                last.retention.accuracy
            ));
            for r in t.rows() {
                points.push(MetricPoint { batch: *b, epoch: r.epoch, step: offset + r.epoch, el: r.el, ma: r.ma, rma: r.rma });
            }
            offset += t.epochs();
        }
        text.push('\n');
        for (i, (ppl, acc)) in summary.heldout_ppl.iter().zip(&summary.heldout_acc).enumerate() {
            retention.push(RetentionPoint { tag: summary.tag.clone(), batches_done: i, heldout_ppl: *ppl, heldout_acc: *acc });
        }

        let th = &traces[0].1.thresholds;
        let metrics_csv = out.join(format!("{}-metrics.csv", summary.tag));
        write_csv(&metrics_csv, &points)?;
        let chart = Chart {
            title: format!("{}: forget-set metrics", summary.tag),
            x_label: "epoch (cumulative over batches)".into(),
            y_label: "metric".into(),
            series: ["el", "ma", "rma"]
                .iter()
                .map(|&m| Series {
                    name: m.to_uppercase(),
                    points: points
                        .iter()
                        .map(|p| (p.step as f64, match m { "el" => p.el, "ma" => p.ma, _ => p.rma }))
                        .collect(),
                })
                .collect(),
            hlines: vec![("EL threshold".into(), th.el), ("MA threshold".into(), th.ma), ("RMA threshold".into(), th.rma)],
            metadata: serde_json::to_string(&points)?,
        };
        let metrics_svg = out.join(format!("{}-metrics.svg", summary.tag));
        write_bytes(&metrics_svg, svg::render(&chart).as_bytes())?;
        outputs.push(display(&run, &metrics_csv));
        outputs.push(display(&run, &metrics_svg));
    }

    let retention_csv = out.join("retention-vs-batch.csv");
    write_csv(&retention_csv, &retention)?;
    let chart = Chart {
        title: "held-out perplexity after each batch".into(),
        x_label: "batches unlearned".into(),
        y_label: "perplexity".into(),
        series: runs
            .iter()
            .map(|(s, _)| Series {
                name: s.tag.clone(),
                points: retention.iter().filter(|r| r.tag == s.tag).map(|r| (r.batches_done as f64, r.heldout_ppl)).collect(),
            })
            .collect(),
        hlines: Vec::new(),
        metadata: serde_json::to_string(&retention)?,
    };
    let retention_svg = out.join("retention-vs-batch.svg");
    write_bytes(&retention_svg, svg::render(&chart).as_bytes())?;
    outputs.push(display(&run, &retention_csv));
    outputs.push(display(&run, &retention_svg));

    for p in list_dir(&run) {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if name.starts_with("extraction-") && name.ends_with(".json") {
            let rep: ExtractionReport = read_json(&p)?;
            text.push_str(&format!("{name}\n"));
            for agg in &rep.aggregates {
                let mean = |s: &Option<seqforget::experiment::ScoreStats>| s.as_ref().map_or("n/a".into(), |s| format!("{:.4}", s.mean));
                text.push_str(&format!("  p={:<5} n={:<5} BLEU {}  chrF {}\n", agg.p, agg.count, mean(&agg.bleu), mean(&agg.chrf)));
            }
        }
    }

    let summary_txt = out.join("summary.txt");
    write_bytes(&summary_txt, text.as_bytes())?;
    outputs.push(display(&run, &summary_txt));
    print!("{text}");
    meta.finish(&run, &outputs)
}
