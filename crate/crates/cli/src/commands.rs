//! Subcommand implementations. Every command writes its resolved config
//! as `<out>/<command>_config.txt` next to its outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use quadmask_core::detector::{detector_metrics, oracle_targets};
use quadmask_core::io::{read_pgm, write_atomic, write_pgm, Manifest, ManifestEntry, Split};
use quadmask_core::metrics::{
    bench_table, default_band, downsample_to, flops_model, incoherence_stats, mask_iou, memory_model,
    oracle_fill_study, BenchRow, EvalRecord, EvalSummary, REFERENCE_TOKENS,
};
use quadmask_core::pipeline::{infer, Models, Propagation, DEFAULT_DEPTH};
use quadmask_core::quadtree::PointQuadtree;
use quadmask_core::refiner::{train, ModelKind};
use quadmask_core::synth::{generate_dataset, generate_sample, load_sample, Sample};
use quadmask_core::{Error, Result};

use crate::config::RunConfig;

/// Samples that could not be processed; a non-zero count makes the command
/// exit with the data-error code after writing its report.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Outcome {
    pub skipped: usize,
}

/// Closed oracle pyramid at full depth, keeping the first `depth` levels
/// (the same truncation inference applies to detections).
fn oracle_at(gt: &quadmask_core::BinaryMask, depth: usize) -> Result<quadmask_core::IncoherencePyramid> {
    Ok(oracle_targets(gt, DEFAULT_DEPTH)?.truncated(depth))
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("report values serialize")
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

fn echo_config(cfg: &RunConfig, command: &str) -> Result<()> {
    write_atomic(&cfg.out.join(format!("{command}_config.txt")), cfg.to_text().as_bytes())
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| Error::Config(format!("{what} not given (argument or `{what}=` key)")))
}

/// Maps `f` over `items` on `jobs` threads; results keep input order.
fn par_map<T: Sync, U: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Result<Vec<U>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("jobs: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(f).collect()))
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<Outcome> {
    let manifest = generate_dataset(&cfg.out, &cfg.synth(), cfg.seed)?;
    echo_config(cfg, "synth")?;
    let train = manifest.split(Split::Train).count();
    println!(
        "{} ({} train / {} test)",
        cfg.out.join("manifest.tsv").display(),
        train,
        manifest.entries.len() - train
    );
    Ok(Outcome::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeLine {
    pub id: String,
    pub split: String,
    pub area_fraction: f64,
    pub finest_fraction: f64,
    pub err_recall: f64,
    pub err_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeSummary {
    pub samples: usize,
    pub skipped: usize,
    pub area_fraction: Option<f64>,
    pub finest_fraction: Option<f64>,
    pub err_recall: Option<f64>,
    pub err_acc: Option<f64>,
}

fn load_or_report(manifest: &Manifest, e: &ManifestEntry) -> Option<Sample> {
    match load_sample(manifest, e) {
        Ok(s) => Some(s),
        Err(err) => {
            eprintln!("skipping {}: {err}", e.id);
            None
        }
    }
}

/// Incoherence statistics per sample of every split, then one summary line.
pub fn cmd_analyze(cfg: &RunConfig) -> Result<Outcome> {
    let manifest = Manifest::read(require(&cfg.manifest, "manifest")?)?;
    let results = par_map(cfg.jobs, &manifest.entries, |e| -> Option<Result<AnalyzeLine>> {
        let s = load_or_report(&manifest, e)?;
        Some(incoherence_stats(&s.gt, &s.coarse, DEFAULT_DEPTH).map(|st| AnalyzeLine {
            id: e.id.clone(),
            split: e.split.as_str().to_string(),
            area_fraction: st.area_fraction,
            finest_fraction: st.finest_fraction,
            err_recall: st.err_recall,
            err_acc: st.err_acc,
        }))
    })?;
    let skipped = results.iter().filter(|r| r.is_none()).count();
    let lines: Vec<AnalyzeLine> = results.into_iter().flatten().collect::<Result<_>>()?;
    let summary = AnalyzeSummary {
        samples: lines.len(),
        skipped,
        area_fraction: mean(lines.iter().map(|l| l.area_fraction)),
        finest_fraction: mean(lines.iter().map(|l| l.finest_fraction)),
        err_recall: mean(lines.iter().map(|l| l.err_recall)),
        err_acc: mean(lines.iter().map(|l| l.err_acc)),
    };
    let mut out: Vec<String> = lines.iter().map(json).collect();
    out.push(json(&serde_json::json!({ "summary": summary })));
    write_lines(&cfg.out.join("analyze.jsonl"), &out)?;
    echo_config(cfg, "analyze")?;
    println!("{}", out.last().expect("summary line"));
    Ok(Outcome { skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleLine {
    pub id: String,
    pub source: String,
    pub iou_coarse: f64,
    pub iou_filled: f64,
}

/// Ground-truth fill of the incoherent tree, from the oracle or a trained detector.
pub fn cmd_oracle(cfg: &RunConfig, detector: Option<&Path>) -> Result<Outcome> {
    let manifest = Manifest::read(require(&cfg.manifest, "manifest")?)?;
    let models = detector.map(Models::load).transpose()?;
    let source = if models.is_some() { "detector" } else { "oracle" };
    let results = par_map(cfg.jobs, &manifest.entries, |e| -> Option<Result<OracleLine>> {
        let s = load_or_report(&manifest, e)?;
        let run = || {
            let det = match &models {
                Some(m) => m.detector.detect(&m.detector_params, &s.features, &s.coarse)?.masks.truncated(cfg.depth),
                None => oracle_at(&s.gt, cfg.depth)?,
            };
            let r = oracle_fill_study(&s.gt, &s.coarse, &det, 112)?;
            Ok(OracleLine {
                id: e.id.clone(),
                source: source.to_string(),
                iou_coarse: r.iou_coarse,
                iou_filled: r.iou_filled,
            })
        };
        Some(run())
    })?;
    let skipped = results.iter().filter(|r| r.is_none()).count();
    let lines: Vec<OracleLine> = results.into_iter().flatten().collect::<Result<_>>()?;
    let improved = lines.iter().filter(|l| l.iou_filled > l.iou_coarse).count();
    let summary = serde_json::json!({ "summary": {
        "samples": lines.len(),
        "skipped": skipped,
        "source": source,
        "iou_coarse": mean(lines.iter().map(|l| l.iou_coarse)),
        "iou_filled": mean(lines.iter().map(|l| l.iou_filled)),
        "improved_fraction": if lines.is_empty() { None } else { Some(improved as f64 / lines.len() as f64) },
    }});
    let mut out: Vec<String> = lines.iter().map(json).collect();
    out.push(json(&summary));
    write_lines(&cfg.out.join("oracle.jsonl"), &out)?;
    echo_config(cfg, "oracle")?;
    println!("{}", out.last().expect("summary line"));
    Ok(Outcome { skipped })
}

fn load_split_strict(manifest: &Manifest, split: Split) -> Result<Vec<Sample>> {
    manifest.split(split).map(|e| load_sample(manifest, e)).collect()
}

/// Trains detector and refiner; writes `checkpoint/` and `train_log.jsonl`.
pub fn cmd_train(cfg: &RunConfig) -> Result<Outcome> {
    let manifest = Manifest::read(require(&cfg.manifest, "manifest")?)?;
    let train_set = load_split_strict(&manifest, Split::Train)?;
    let val = load_split_strict(&manifest, Split::Test)?;
    if let Some(s) = train_set.first() {
        if s.features.channels() != cfg.channels {
            return Err(Error::Config(format!(
                "channels: config says {} but the dataset has {}",
                cfg.channels,
                s.features.channels()
            )));
        }
    }
    let outcome = train(&train_set, &val, &cfg.train())?;
    outcome.models.save(&cfg.out.join("checkpoint"))?;
    let log: Vec<String> = outcome.log.iter().map(|l| l.to_json()).collect();
    write_lines(&cfg.out.join("train_log.jsonl"), &log)?;
    echo_config(cfg, "train")?;
    for l in &log {
        println!("{l}");
    }
    if let Some(msg) = outcome.aborted {
        return Err(Error::NonFinite(format!("training stopped: {msg}; last finite epoch saved")));
    }
    Ok(Outcome::default())
}

/// Sidecar line written by `refine` next to each mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineLine {
    pub id: String,
    pub depth: usize,
    pub propagation: Propagation,
    pub nodes: usize,
    pub tokens: usize,
    pub flops: u64,
    pub memory_bytes: u64,
    pub recall: f64,
    pub accuracy: f64,
}

pub fn parse_split(s: &str) -> Result<Option<Split>> {
    match s {
        "all" => Ok(None),
        other => other
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("split: unknown {other:?} (train|test|all)"))),
    }
}

fn entries_of(manifest: &Manifest, split: Option<Split>) -> Vec<ManifestEntry> {
    manifest
        .entries
        .iter()
        .filter(|e| split.is_none_or(|s| e.split == s))
        .cloned()
        .collect()
}

/// Refined 112×112 masks as `masks/<id>.pgm`, plus `masks/refine.jsonl`.
pub fn cmd_refine(cfg: &RunConfig, split: Option<Split>) -> Result<Outcome> {
    let models = Models::load(require(&cfg.checkpoint, "checkpoint")?)?;
    let manifest = Manifest::read(require(&cfg.manifest, "manifest")?)?;
    if cfg.depth > models.spec.depth {
        return Err(Error::Config(format!(
            "depth: {} exceeds the checkpoint's {}",
            cfg.depth, models.spec.depth
        )));
    }
    let dir = cfg.out.join("masks");
    let entries = entries_of(&manifest, split);
    let results = par_map(cfg.jobs, &entries, |e| -> Option<Result<RefineLine>> {
        let s = load_or_report(&manifest, e)?;
        let run = || {
            let out = infer(&models, &s.features, &s.coarse, cfg.depth, cfg.propagation)?;
            write_pgm(&dir.join(format!("{}.pgm", e.id)), &out.mask)?;
            let m = detector_metrics(&out.detection, &oracle_at(&s.gt, cfg.depth)?)?;
            let nodes = out.tree.len();
            let tokens = match models.spec.refiner.kind {
                ModelKind::Transformer => nodes + REFERENCE_TOKENS,
                ModelKind::Mlp => nodes,
            };
            let cost = models.refiner.cost_config(tokens);
            Ok(RefineLine {
                id: e.id.clone(),
                depth: cfg.depth,
                propagation: cfg.propagation,
                nodes,
                tokens,
                flops: flops_model(&cost),
                memory_bytes: memory_model(&cost),
                recall: m.recall,
                accuracy: m.accuracy,
            })
        };
        Some(run())
    })?;
    let skipped = results.iter().filter(|r| r.is_none()).count();
    let lines: Vec<RefineLine> = results.into_iter().flatten().collect::<Result<_>>()?;
    write_lines(&dir.join("refine.jsonl"), &lines.iter().map(json).collect::<Vec<_>>())?;
    echo_config(cfg, "refine")?;
    println!("{} masks in {}", lines.len(), dir.display());
    Ok(Outcome { skipped })
}

fn read_sidecar(dir: &Path) -> Result<Vec<RefineLine>> {
    let path = dir.join("refine.jsonl");
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Config(format!("{}: {e}", path.display()))))
        .collect()
}

/// Scores `<pred_dir>/<id>.pgm` against the manifest's ground truth.
pub fn cmd_eval(cfg: &RunConfig, predictions: &Path, split: Option<Split>) -> Result<Outcome> {
    let manifest = Manifest::read(require(&cfg.manifest, "manifest")?)?;
    let sidecar = read_sidecar(predictions)?;
    let entries = entries_of(&manifest, split);
    let results = par_map(cfg.jobs, &entries, |e| -> Option<Result<EvalRecord>> {
        let s = load_or_report(&manifest, e)?;
        let pred = match read_pgm(&predictions.join(format!("{}.pgm", e.id))) {
            Ok(p) => p,
            Err(err) => {
                eprintln!("skipping {}: {err}", e.id);
                return None;
            }
        };
        let run = || {
            let truth = downsample_to(&s.gt, pred.height())?;
            let band = default_band(pred.height(), pred.width());
            let side = sidecar.iter().find(|l| l.id == e.id);
            Ok(EvalRecord {
                id: e.id.clone(),
                mask_iou: mask_iou(&pred, &truth)?,
                boundary_iou: quadmask_core::metrics::boundary_iou(&pred, &truth, band)?,
                band,
                recall: side.map(|l| l.recall),
                accuracy: side.map(|l| l.accuracy),
                area_fraction: incoherence_stats(&s.gt, &s.coarse, DEFAULT_DEPTH)?.area_fraction,
                nodes: side.map_or(0, |l| l.nodes),
                flops: side.map_or(0, |l| l.flops),
                memory_bytes: side.map_or(0, |l| l.memory_bytes),
            })
        };
        Some(run())
    })?;
    let skipped = results.iter().filter(|r| r.is_none()).count();
    let records: Vec<EvalRecord> = results.into_iter().flatten().collect::<Result<_>>()?;
    let mut out: Vec<String> = records.iter().map(json).collect();
    out.push(json(&serde_json::json!({ "summary": EvalSummary::of(&records), "skipped": skipped })));
    write_lines(&cfg.out.join("eval.jsonl"), &out)?;
    echo_config(cfg, "eval")?;
    println!("{}", out.last().expect("summary line"));
    Ok(Outcome { skipped })
}

/// Per-sample node counts: learned detection when a checkpoint is given,
/// otherwise the closed oracle tree.
pub fn node_counts(cfg: &RunConfig, samples: &[Sample], models: Option<&Models>) -> Result<Vec<usize>> {
    par_map(cfg.jobs, samples, |s| -> Result<usize> {
        Ok(match models {
            Some(m) => infer(m, &s.features, &s.coarse, cfg.depth, Propagation::Full)?.tree.len(),
            None => PointQuadtree::build(&oracle_at(&s.gt, cfg.depth)?)?.len(),
        })
    })?
    .into_iter()
    .collect()
}

/// Held-out samples: from the manifest when given, otherwise generated in memory.
fn bench_samples(cfg: &RunConfig) -> Result<Vec<Sample>> {
    match &cfg.manifest {
        Some(p) => load_split_strict(&Manifest::read(p)?, Split::Test),
        None => {
            let synth = cfg.synth();
            let ids: Vec<usize> = (synth.train_count()..synth.count).collect();
            par_map(cfg.jobs, &ids, |&i| generate_sample(i, &synth, cfg.seed))?.into_iter().collect()
        }
    }
}

pub fn format_bench_table(rows: &[BenchRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<9} {:>9} {:>9} {:>7} {:>14} {:>14} {:>8} {:>8}",
        "model", "nodes", "tokens", "max_t", "flops_max", "memory_max", "flops_r", "mem_r"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<9} {:>9.1} {:>9.1} {:>7} {:>14} {:>14} {:>8.4} {:>8.4}",
            r.model, r.nodes_mean, r.tokens_mean, r.tokens_max, r.flops_max, r.memory_max, r.flops_ratio, r.memory_ratio
        );
    }
    s
}

/// Analytic FLOPs / memory of the sparse refiner, the MLP and dense grids
/// at `bench_dim` channels, for measured node counts.
pub fn cmd_bench(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    let samples = bench_samples(cfg)?;
    let models = cfg.checkpoint.as_deref().map(Models::load).transpose()?;
    let counts = node_counts(cfg, &samples, models.as_ref())?;
    let rows = bench_table(&counts, cfg.cost_shape());
    write_lines(&cfg.out.join("bench.jsonl"), &rows.iter().map(json).collect::<Vec<_>>())?;
    echo_config(cfg, "bench")?;
    print!("{}", format_bench_table(&rows));
    Ok(rows)
}

/// `--depth` / `--propagation` overrides for `refine`.
pub fn apply_refine_flags(cfg: &mut RunConfig, depth: Option<usize>, propagation: Option<Propagation>) -> Result<()> {
    if let Some(d) = depth {
        cfg.set("depth", &d.to_string())?;
    }
    if let Some(p) = propagation {
        cfg.propagation = p;
    }
    cfg.validate()
}
