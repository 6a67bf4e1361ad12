//! Phase commands behind the `cfdiff` binary. Every command reads a
//! [`RunConfig`] and writes only below the configured directories.

pub mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use cfdiff::checkpoint::{load_table, save_table};
use cfdiff::config::RunConfig;
use cfdiff::data::io::{load_dataset, load_png, save_dataset, save_png, sha256_hex};
use cfdiff::data::nets::{
    accuracy, identity_accuracy, oracle_accuracy, train_attribute_oracle, train_classifier,
    train_identity_embedder, train_self_supervised_encoder, AttributeOracle, Embedder, TrainedClassifier,
};
use cfdiff::data::{generate_dataset, DatasetSplits, SyntheticSpec};
use cfdiff::denoiser::{train_denoiser, NoisePredictor, UnetDenoiser};
use cfdiff::distill::{
    prompt_losses, render_prompt, train_class_embeddings, train_context_embeddings, EmbeddingTable,
    PromptTemplate, TokenMode,
};
use cfdiff::metrics::{evaluate, rows_to_csv, Evaluators, MetricReport};
use cfdiff::pipeline::{
    run_benchmark, serve_classifier, verify_artifacts, BenchmarkOptions, BenchmarkRecord, BlackBoxClassifier,
    ClassPrompts, CounterfactualResult, Explainer, PipeClassifier,
};

pub const DENOISER: &str = "denoiser";
pub const CLASSIFIER: &str = "classifier";
pub const ORACLE: &str = "attribute_oracle";
pub const IDENTITY: &str = "identity_embedder";
pub const ENCODER: &str = "self_supervised_encoder";
pub const VOCABULARY: &str = "vocabulary";

/// How the target classifier is reached during explanation.
#[derive(Clone, Debug)]
pub enum ClassifierBackend {
    InProcess,
    /// A `classifier-serve` child of the given executable.
    Process(PathBuf),
}

impl ClassifierBackend {
    pub fn open(&self, cfg: &RunConfig) -> Result<Box<dyn BlackBoxClassifier>> {
        let path = require(cfg, CLASSIFIER, "train")?;
        Ok(match self {
            Self::InProcess => Box::new(TrainedClassifier::load(&path)?),
            Self::Process(exe) => {
                let mut cmd = Command::new(exe);
                cmd.arg("classifier-serve").arg("--checkpoint").arg(&path);
                Box::new(PipeClassifier::spawn(cmd)?)
            }
        })
    }
}

fn require(cfg: &RunConfig, name: &str, phase: &str) -> Result<PathBuf> {
    let p = cfg.checkpoint(name);
    if !p.exists() {
        bail!("missing {name} checkpoint at {}; run `cfdiff {phase}` first", p.display());
    }
    Ok(p)
}

/// Name of the embedding checkpoint for the configured token mode.
pub fn embeddings_name(cfg: &RunConfig) -> String {
    let tokens = match cfg.distill.tokens {
        TokenMode::Multi => "multi",
        TokenMode::Single => "single",
    };
    let ctx = if cfg.distill.use_context { "ctx" } else { "noctx" };
    format!("embeddings-{tokens}-{ctx}")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(path, &bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(bytes)
}

pub fn load_data(cfg: &RunConfig) -> Result<(SyntheticSpec, DatasetSplits)> {
    let manifest = cfg.paths.data_dir.join("manifest.json");
    if !manifest.exists() {
        bail!("no dataset at {}; run `cfdiff gen-data` first", cfg.paths.data_dir.display());
    }
    let (spec, splits) = load_dataset(&cfg.paths.data_dir)?;
    if spec != cfg.data {
        bail!(
            "dataset at {} was rendered from a different data config; rerun `cfdiff gen-data`",
            cfg.paths.data_dir.display()
        );
    }
    Ok((spec, splits))
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let splits = generate_dataset(&cfg.data)?;
    std::fs::create_dir_all(&cfg.paths.data_dir)?;
    save_dataset(&cfg.paths.data_dir, &cfg.data, &splits)?;
    log::info!(
        "wrote {} / {} / {} images to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        cfg.paths.data_dir.display()
    );
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub denoiser_losses: Vec<f64>,
    pub heldout_loss_trained: f64,
    pub heldout_loss_untrained: f64,
    pub classifier_test_accuracy: f64,
    pub oracle_test_accuracy: Vec<f64>,
    pub identity_test_accuracy: f64,
}

/// Mean null-prompt loss on up to 256 validation images with fixed draws.
pub fn heldout_loss<D: NoisePredictor<f32> + ?Sized>(
    denoiser: &D,
    cfg: &RunConfig,
    vocabulary: &EmbeddingTable,
    splits: &DatasetSplits,
) -> Result<f64> {
    let n = splits.val.len().min(256);
    let idx: Vec<usize> = (0..n).collect();
    let images = splits.val.images.select(&idx);
    let sched = cfg.schedule.build()?;
    let null = render_prompt(&PromptTemplate::null(), vocabulary)?;
    let l = prompt_losses(&images, denoiser, &sched, &null, 2, 0xbeef)?;
    Ok(l.iter().sum::<f64>() / l.len().max(1) as f64)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    let (_, splits) = load_data(cfg)?;
    let sched = cfg.schedule.build()?;
    let vocabulary = EmbeddingTable::with_vocabulary(cfg.unet.cond_dim, cfg.data.num_attributes, cfg.data.seed);
    save_table(&cfg.checkpoint(VOCABULARY), &vocabulary, cfg.data.seed)?;

    log::info!("training denoiser");
    let (denoiser, dr) = train_denoiser(&splits.train, &sched, &cfg.denoiser, &cfg.unet, &vocabulary)?;
    denoiser.save(&cfg.checkpoint(DENOISER), cfg.denoiser.train.seed)?;
    let untrained = UnetDenoiser::<f32>::new(cfg.unet.clone(), cfg.denoiser.train.seed, sched.t_train());

    log::info!("training classifier");
    let classifier = train_classifier(&splits.train, &cfg.aux.classifier)?;
    classifier.save(&cfg.checkpoint(CLASSIFIER), cfg.aux.classifier.train.seed)?;
    log::info!("training attribute oracle");
    let oracle = train_attribute_oracle(&splits.train, &cfg.aux.oracle)?;
    oracle.save(&cfg.checkpoint(ORACLE), cfg.aux.oracle.train.seed)?;
    log::info!("training identity embedder");
    let identity = train_identity_embedder(&splits.train, &cfg.aux.identity)?;
    identity.save(&cfg.checkpoint(IDENTITY), cfg.aux.identity.train.seed)?;
    log::info!("training self-supervised encoder");
    let encoder = train_self_supervised_encoder(&splits.train, &cfg.aux.encoder)?;
    encoder.save(&cfg.checkpoint(ENCODER), cfg.aux.encoder.train.seed)?;

    let report = TrainReport {
        heldout_loss_trained: heldout_loss(&denoiser, cfg, &vocabulary, &splits)?,
        heldout_loss_untrained: heldout_loss(&untrained, cfg, &vocabulary, &splits)?,
        denoiser_losses: dr.losses,
        classifier_test_accuracy: accuracy(&classifier, &splits.test)?,
        oracle_test_accuracy: oracle_accuracy(&oracle, &splits.test)?,
        identity_test_accuracy: identity_accuracy(&identity, &splits.test)?,
    };
    log::info!(
        "held-out loss {:.2} (untrained {:.2}); classifier accuracy {:.3}; oracle {:?}; identity {:.3}",
        report.heldout_loss_trained,
        report.heldout_loss_untrained,
        report.classifier_test_accuracy,
        report.oracle_test_accuracy,
        report.identity_test_accuracy
    );
    write_json(&cfg.paths.checkpoint_dir.join("train_report.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistillSummary {
    pub context_losses: Vec<f64>,
    pub class_losses: Vec<Vec<f64>>,
    pub class_subset_sizes: Vec<usize>,
}

pub fn load_denoiser(cfg: &RunConfig) -> Result<UnetDenoiser<f32>> {
    Ok(UnetDenoiser::load(&require(cfg, DENOISER, "train")?)?)
}

pub fn cmd_distill(cfg: &RunConfig) -> Result<DistillSummary> {
    let (_, splits) = load_data(cfg)?;
    let sched = cfg.schedule.build()?;
    let denoiser = load_denoiser(cfg)?;
    let classifier = TrainedClassifier::load(&require(cfg, CLASSIFIER, "train")?)?;
    let mut table = load_table(&require(cfg, VOCABULARY, "train")?)?;
    let mut summary = DistillSummary {
        context_losses: Vec::new(),
        class_losses: Vec::new(),
        class_subset_sizes: Vec::new(),
    };
    if cfg.distill.use_context {
        log::info!("distilling context tokens");
        let (t, r) = train_context_embeddings(&splits.train, &denoiser, &sched, &cfg.distill, &table)?;
        table = t;
        summary.context_losses = r.losses;
    }
    for class in 0..classifier.num_classes() {
        log::info!("distilling class {class} tokens");
        let (t, r) = train_class_embeddings(&splits.train, &classifier, class, &denoiser, &sched, &cfg.distill, &table)?;
        table = t;
        summary.class_losses.push(r.losses);
        summary.class_subset_sizes.push(r.subset_size);
    }
    let name = embeddings_name(cfg);
    save_table(&cfg.checkpoint(&name), &table, cfg.distill.seed)?;
    write_json(&cfg.paths.checkpoint_dir.join(format!("{name}.report.json")), &summary)?;
    Ok(summary)
}

/// Rendered class prompts for the configured token mode.
pub fn load_prompts(cfg: &RunConfig, num_classes: usize) -> Result<ClassPrompts> {
    let table = load_table(&require(cfg, &embeddings_name(cfg), "distill")?)?;
    Ok(ClassPrompts::render(&table, &cfg.distill, num_classes)?)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExplainOutput {
    pub original: PathBuf,
    pub counterfactual: PathBuf,
    pub source_class: usize,
    pub target_class: usize,
    pub flipped: bool,
    pub used_tuple: Option<(usize, f64)>,
    pub attempts: Vec<cfdiff::pipeline::AttemptRecord>,
    pub classifier_queries: u64,
    pub denoiser_calls: u64,
}

pub fn cmd_explain(cfg: &RunConfig, image: &Path, target: usize, backend: &ClassifierBackend) -> Result<ExplainOutput> {
    let x = load_png(image, cfg.data.image_shape.channels)
        .with_context(|| format!("reading {}", image.display()))?;
    if x.shape() != cfg.data.image_shape {
        bail!("{} is {:?}, expected {:?}", image.display(), x.shape(), cfg.data.image_shape);
    }
    let sched = cfg.schedule.build()?;
    let denoiser = load_denoiser(cfg)?;
    let classifier = backend.open(cfg)?;
    let prompts = load_prompts(cfg, classifier.num_classes())?;
    let explainer = Explainer {
        denoiser: &denoiser,
        schedule: &sched,
        prompts: &prompts,
        escalation: &cfg.explain.escalation,
        p: cfg.explain.p,
        mode: cfg.explain.mode,
    };
    let r = explainer.generate_counterfactual(&x, target, classifier.as_ref())?;
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let dir = cfg.paths.output_dir.join("explain");
    let original = dir.join(format!("{stem}_original.png"));
    let counterfactual = dir.join(format!("{stem}_cf.png"));
    save_png(&original, &r.original)?;
    save_png(&counterfactual, &r.explanation)?;
    let out = ExplainOutput {
        original,
        counterfactual,
        source_class: r.source_class,
        target_class: r.target_class,
        flipped: r.flipped,
        used_tuple: r.used_tuple,
        attempts: r.attempts,
        classifier_queries: r.classifier_queries,
        denoiser_calls: r.denoiser_calls,
    };
    write_json(&dir.join(format!("{stem}_attempts.json")), &out)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub schema_version: u32,
    /// The run configuration without its filesystem paths.
    pub config: serde_json::Value,
    pub records: Vec<BenchmarkRecord>,
    pub metrics: MetricReport,
    /// SHA-256 of the checkpoints and per-run files this benchmark used or
    /// produced, keyed by name.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Timing {
    pub started_unix_seconds: u64,
    pub finished_unix_seconds: u64,
    pub generation_seconds: f64,
    pub mean_seconds_per_explanation: f64,
    pub total_seconds: f64,
}

pub struct EvaluateOutput {
    pub dir: PathBuf,
    pub manifest: BenchmarkManifest,
    pub results: Vec<CounterfactualResult>,
}

/// Directory name that distinguishes ablation runs sharing one output dir.
pub fn run_tag(cfg: &RunConfig) -> String {
    let mode = match cfg.explain.mode {
        cfdiff::guidance::GuidanceMode::Cfg => "cfg",
        cfdiff::guidance::GuidanceMode::Negative => "ng",
    };
    let tuples: Vec<String> = cfg
        .explain
        .escalation
        .tuples
        .iter()
        .map(|(t, w)| format!("t{t}w{w}"))
        .collect();
    format!("{mode}-{}-{}", embeddings_name(cfg).trim_start_matches("embeddings-"), tuples.join("_"))
}

fn config_echo(cfg: &RunConfig) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(cfg)?;
    if let Some(m) = v.as_object_mut() {
        m.remove("paths");
    }
    Ok(v)
}

fn file_sha(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).with_context(|| format!("reading {}", path.display()))?))
}

pub fn cmd_evaluate(cfg: &RunConfig, backend: &ClassifierBackend, run_dir: Option<&Path>) -> Result<EvaluateOutput> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let (_, splits) = load_data(cfg)?;
    let sched = cfg.schedule.build()?;
    let denoiser = load_denoiser(cfg)?;
    let classifier = backend.open(cfg)?;
    let prompts = load_prompts(cfg, classifier.num_classes())?;
    let oracle = AttributeOracle::load(&require(cfg, ORACLE, "train")?)?;
    let identity = Embedder::load_identity(&require(cfg, IDENTITY, "train")?)?;
    let encoder = Embedder::load_encoder(&require(cfg, ENCODER, "train")?)?;
    let test = match cfg.explain.limit {
        Some(n) if n < splits.test.len() => splits.test.subset(&(0..n).collect::<Vec<_>>()),
        _ => splits.test.clone(),
    };
    let dir = run_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.output_dir.join(run_tag(cfg)));
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    let explainer = Explainer {
        denoiser: &denoiser,
        schedule: &sched,
        prompts: &prompts,
        escalation: &cfg.explain.escalation,
        p: cfg.explain.p,
        mode: cfg.explain.mode,
    };
    let opts = BenchmarkOptions {
        workers: cfg.explain.workers,
        chunk_size: cfg.explain.chunk_size,
    };
    let run = run_benchmark(&test, classifier.as_ref(), &explainer, &dir, &opts)?;
    log::info!("generated {} counterfactuals in {:.1}s", run.results.len(), run.wall_seconds);

    let flops = denoiser.flops_per_image(prompts.classes.iter().map(|c| c.len()).max().unwrap_or(1));
    let ev = Evaluators {
        classifier: classifier.as_ref(),
        oracle: &oracle,
        identity: &identity,
        encoder: &encoder,
        cout_steps: cfg.explain.cout_steps,
        sfid_seed: cfg.explain.sfid_seed,
    };
    let (metrics, rows) = evaluate(&run.results, &ev, flops, run.wall_seconds)?;
    let metrics_bytes = write_json(&dir.join("metrics.json"), &metrics)?;
    let csv = rows_to_csv(&rows);
    std::fs::write(dir.join("metrics.csv"), &csv)?;

    let mut artifacts = BTreeMap::new();
    for name in [DENOISER, CLASSIFIER, ORACLE, IDENTITY, ENCODER] {
        artifacts.insert(format!("{name}.ckpt"), file_sha(&cfg.checkpoint(name))?);
    }
    let emb = embeddings_name(cfg);
    artifacts.insert(format!("{emb}.ckpt"), file_sha(&cfg.checkpoint(&emb))?);
    artifacts.insert("records.jsonl".into(), file_sha(&dir.join("records.jsonl"))?);
    artifacts.insert("metrics.json".into(), sha256_hex(&metrics_bytes));
    artifacts.insert("metrics.csv".into(), sha256_hex(csv.as_bytes()));
    let manifest = BenchmarkManifest {
        schema_version: cfdiff::config::SCHEMA_VERSION,
        config: config_echo(cfg)?,
        records: run.records,
        metrics,
        artifacts,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    verify_artifacts(&dir, &manifest.records)?;

    let unix = |t: SystemTime| t.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let timing = Timing {
        started_unix_seconds: unix(started),
        finished_unix_seconds: unix(SystemTime::now()),
        generation_seconds: run.wall_seconds,
        mean_seconds_per_explanation: manifest.metrics.mean_wall_seconds,
        total_seconds: clock.elapsed().as_secs_f64(),
    };
    write_json(&dir.join("timing.json"), &timing)?;
    Ok(EvaluateOutput {
        dir,
        manifest,
        results: run.results,
    })
}

pub fn read_manifest(path: &Path) -> Result<BenchmarkManifest> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Answers predict requests on stdin/stdout with a saved classifier.
pub fn cmd_classifier_serve(checkpoint: &Path) -> Result<()> {
    let clf = TrainedClassifier::load(checkpoint)?;
    serve_classifier(&clf, std::io::stdin().lock(), std::io::stdout().lock())?;
    Ok(())
}
