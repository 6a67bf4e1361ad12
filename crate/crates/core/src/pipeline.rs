//! Counterfactual generation against a black-box classifier.
//!
//! The classifier is reached only through [`BlackBoxClassifier::predict`].
//! For every input the source class is the classifier's own prediction;
//! the image is inverted under the source prompt and regenerated under
//! the target prompt, walking an escalation list of `(τ, w)` tuples until
//! the prediction flips.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::io::{image_to_bytes, sha256_hex};
use crate::data::nets::argmax;
use crate::data::LabeledDataset;
use crate::denoiser::{CountingDenoiser, NoisePredictor};
use crate::diffusion::NoiseSchedule;
use crate::distill::{render_prompt, ConditioningSequence, DistillConfig, EmbeddingTable, PromptTemplate};
use crate::edict::{denoise, invert, EdictConfig, Prompts};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, GuidanceMode};
use crate::tensor::{ImageShape, LatentBatch, LatentImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: usize,
    pub probs: Vec<f64>,
}

impl Prediction {
    /// Label is the arg-max, lower index on ties.
    pub fn from_probs(probs: Vec<f64>) -> Self {
        Self {
            label: argmax(&probs),
            probs,
        }
    }
}

/// The only surface through which explanations touch the model.
pub trait BlackBoxClassifier: Send + Sync {
    fn num_classes(&self) -> usize;

    fn predict(&self, images: &LatentBatch<f32>) -> Result<Vec<Prediction>>;
}

/// Counts queried images.
pub struct CountingClassifier<'a> {
    inner: &'a dyn BlackBoxClassifier,
    queries: AtomicU64,
}

impl<'a> CountingClassifier<'a> {
    pub fn new(inner: &'a dyn BlackBoxClassifier) -> Self {
        Self {
            inner,
            queries: AtomicU64::new(0),
        }
    }

    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::SeqCst)
    }
}

impl BlackBoxClassifier for CountingClassifier<'_> {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn predict(&self, images: &LatentBatch<f32>) -> Result<Vec<Prediction>> {
        self.queries.fetch_add(images.len() as u64, Ordering::SeqCst);
        self.inner.predict(images)
    }
}

const PIPE_MAGIC: &[u8; 8] = b"CFPIPE01";
const PIPE_ERROR: u64 = u64::MAX;

/// Answers predict requests on `input`/`output` until the input closes.
///
/// Wire format (little-endian): the server first sends the magic bytes and
/// a `u32` class count. Each request is `u64 n, u32 c, u32 h, u32 w`
/// followed by `n·c·h·w` `f32` pixels; the reply is `u64 n` followed by
/// `n·classes` `f64` probabilities, or `u64::MAX`, a `u32` length and a
/// UTF-8 message on failure.
pub fn serve_classifier<R: Read, W: Write>(
    classifier: &dyn BlackBoxClassifier,
    input: R,
    output: W,
) -> Result<()> {
    let mut r = BufReader::new(input);
    let mut w = BufWriter::new(output);
    w.write_all(PIPE_MAGIC)?;
    w.write_all(&(classifier.num_classes() as u32).to_le_bytes())?;
    w.flush()?;
    loop {
        let mut head = [0u8; 20];
        match r.read_exact(&mut head) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e.into()),
        }
        let n = u64::from_le_bytes(head[0..8].try_into().expect("8 bytes")) as usize;
        let dims: Vec<usize> = head[8..20]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        let shape = ImageShape::new(dims[0], dims[1], dims[2]);
        let mut raw = vec![0u8; 4 * n * shape.numel()];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let reply = LatentBatch::new(n, shape, data).and_then(|b| classifier.predict(&b));
        match reply {
            Ok(preds) => {
                w.write_all(&(preds.len() as u64).to_le_bytes())?;
                for p in preds {
                    for v in p.probs {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
            Err(e) => {
                let msg = e.to_string();
                w.write_all(&PIPE_ERROR.to_le_bytes())?;
                w.write_all(&(msg.len() as u32).to_le_bytes())?;
                w.write_all(msg.as_bytes())?;
            }
        }
        w.flush()?;
    }
}

struct PipeEnds {
    stdin: BufWriter<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

/// A classifier running in another process, reached over its standard
/// input and output with the protocol of [`serve_classifier`].
pub struct PipeClassifier {
    child: Child,
    ends: Mutex<Option<PipeEnds>>,
    classes: usize,
}

impl PipeClassifier {
    pub fn spawn(mut cmd: Command) -> Result<Self> {
        let mut child = cmd
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Classifier(format!("cannot start classifier process: {e}")))?;
        let stdin = BufWriter::new(child.stdin.take().expect("piped"));
        let mut stdout = BufReader::new(child.stdout.take().expect("piped"));
        let mut hello = [0u8; 12];
        stdout
            .read_exact(&mut hello)
            .map_err(|e| Error::Classifier(format!("classifier process did not answer: {e}")))?;
        if &hello[..8] != PIPE_MAGIC {
            return Err(Error::Classifier("classifier process spoke an unknown protocol".into()));
        }
        let classes = u32::from_le_bytes(hello[8..12].try_into().expect("4 bytes")) as usize;
        Ok(Self {
            child,
            ends: Mutex::new(Some(PipeEnds { stdin, stdout })),
            classes,
        })
    }

    fn exchange(ends: &mut PipeEnds, images: &LatentBatch<f32>, classes: usize) -> std::io::Result<Result<Vec<Prediction>>> {
        let s = images.shape();
        let w = &mut ends.stdin;
        w.write_all(&(images.len() as u64).to_le_bytes())?;
        for d in [s.channels, s.height, s.width] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in images.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        let r = &mut ends.stdout;
        let mut n = [0u8; 8];
        r.read_exact(&mut n)?;
        let n = u64::from_le_bytes(n);
        if n == PIPE_ERROR {
            let mut len = [0u8; 4];
            r.read_exact(&mut len)?;
            let mut msg = vec![0u8; u32::from_le_bytes(len) as usize];
            r.read_exact(&mut msg)?;
            return Ok(Err(Error::Classifier(String::from_utf8_lossy(&msg).into_owned())));
        }
        let mut raw = vec![0u8; 8 * n as usize * classes];
        r.read_exact(&mut raw)?;
        let probs: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Ok(probs
            .chunks(classes)
            .map(|p| Prediction::from_probs(p.to_vec()))
            .collect()))
    }
}

impl BlackBoxClassifier for PipeClassifier {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn predict(&self, images: &LatentBatch<f32>) -> Result<Vec<Prediction>> {
        let mut guard = self.ends.lock().map_err(|_| Error::Classifier("pipe lock poisoned".into()))?;
        let ends = guard
            .as_mut()
            .ok_or_else(|| Error::Classifier("classifier process is gone".into()))?;
        match Self::exchange(ends, images, self.classes) {
            Ok(r) => r,
            Err(e) => {
                *guard = None;
                Err(Error::Classifier(format!("classifier pipe failed: {e}")))
            }
        }
    }
}

impl Drop for PipeClassifier {
    fn drop(&mut self) {
        if let Ok(mut g) = self.ends.lock() {
            g.take();
        }
        let _ = self.child.wait();
    }
}

/// Ordered `(τ, w)` tuples tried until the prediction flips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EscalationSchedule {
    pub tuples: Vec<(usize, f64)>,
}

impl EscalationSchedule {
    pub fn new(tuples: Vec<(usize, f64)>) -> Result<Self> {
        let s = Self { tuples };
        if s.tuples.is_empty() {
            return Err(Error::Config("escalation schedule is empty".into()));
        }
        Ok(s)
    }

    /// `(25, 3), (30, 4), (35, 4), (35, 6)`.
    pub fn smile() -> Self {
        Self {
            tuples: vec![(25, 3.0), (30, 4.0), (35, 4.0), (35, 6.0)],
        }
    }

    /// `(30, 4), (30, 6), (35, 4), (35, 6)`.
    pub fn age() -> Self {
        Self {
            tuples: vec![(30, 4.0), (30, 6.0), (35, 4.0), (35, 6.0)],
        }
    }

    pub fn single(tau: usize, w: f64) -> Self {
        Self {
            tuples: vec![(tau, w)],
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.tuples.is_empty() {
            return Err(Error::Config("escalation schedule is empty".into()));
        }
        for &(tau, w) in &self.tuples {
            if tau == 0 || tau > schedule.num_inference_steps() || !(w >= 0.0) {
                return Err(Error::Config(format!("invalid escalation tuple ({tau}, {w})")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub tau: usize,
    pub w: f64,
    pub flipped: bool,
    pub target_probability: f64,
    /// SHA-256 of the attempt's output as little-endian `f32` pixels.
    pub output_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualResult {
    pub original: LatentImage<f32>,
    /// Output of the last attempt, flipped or not.
    pub explanation: LatentImage<f32>,
    pub source_class: usize,
    pub target_class: usize,
    pub flipped: bool,
    pub used_tuple: Option<(usize, f64)>,
    pub attempts: Vec<AttemptRecord>,
    pub classifier_queries: u64,
    pub denoiser_calls: u64,
}

/// Rendered prompts for every class plus the null prompt.
#[derive(Clone, Debug)]
pub struct ClassPrompts {
    pub classes: Vec<ConditioningSequence<f32>>,
    pub null: ConditioningSequence<f32>,
}

impl ClassPrompts {
    pub fn render(table: &EmbeddingTable, distill: &DistillConfig, num_classes: usize) -> Result<Self> {
        let classes = (0..num_classes)
            .map(|c| render_prompt(&distill.class_template(c), table))
            .collect::<Result<_>>()?;
        Ok(Self {
            classes,
            null: render_prompt(&PromptTemplate::null(), table)?,
        })
    }
}

/// Everything the generator needs besides the classifier.
pub struct Explainer<'a, D: ?Sized> {
    pub denoiser: &'a D,
    pub schedule: &'a NoiseSchedule,
    pub prompts: &'a ClassPrompts,
    pub escalation: &'a EscalationSchedule,
    pub p: f64,
    pub mode: GuidanceMode,
}

impl<D: NoisePredictor<f32> + ?Sized> Explainer<'_, D> {
    /// Explains one image; the target must differ from the classifier's
    /// current prediction.
    pub fn generate_counterfactual(
        &self,
        x: &LatentImage<f32>,
        target: usize,
        classifier: &dyn BlackBoxClassifier,
    ) -> Result<CounterfactualResult> {
        let batch = LatentBatch::stack(std::slice::from_ref(x))?;
        let mut out = self.generate(&batch, &[Some(target)], classifier)?;
        Ok(out.remove(0))
    }

    /// Explains a batch. `targets[i] = None` picks the other class of a
    /// binary classifier. Images still unflipped after an attempt move on
    /// to the next tuple together.
    pub fn generate(
        &self,
        images: &LatentBatch<f32>,
        targets: &[Option<usize>],
        classifier: &dyn BlackBoxClassifier,
    ) -> Result<Vec<CounterfactualResult>> {
        self.escalation.validate(self.schedule)?;
        let n = images.len();
        if targets.len() != n {
            return Err(Error::Shape("one target per image".into()));
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        let k = classifier.num_classes();
        if self.prompts.classes.len() < k {
            return Err(Error::Config(format!(
                "prompts exist for {} classes but the classifier has {k}",
                self.prompts.classes.len()
            )));
        }
        let initial = classifier.predict(&images.clamp(-1.0, 1.0))?;
        let mut sources = Vec::with_capacity(n);
        let mut tgts = Vec::with_capacity(n);
        for (i, p) in initial.iter().enumerate() {
            let target = match targets[i] {
                Some(t) => t,
                None if k == 2 => 1 - p.label,
                None => return Err(Error::Precondition("target required for more than two classes".into())),
            };
            if target >= k {
                return Err(Error::Precondition(format!("target class {target} out of range")));
            }
            if target == p.label {
                return Err(Error::Precondition(format!(
                    "image {i} is already classified as the target class {target}"
                )));
            }
            sources.push(p.label);
            tgts.push(target);
        }
        let mut results: Vec<CounterfactualResult> = (0..n)
            .map(|i| CounterfactualResult {
                original: images.image(i),
                explanation: images.image(i),
                source_class: sources[i],
                target_class: tgts[i],
                flipped: false,
                used_tuple: None,
                attempts: Vec::new(),
                classifier_queries: 1,
                denoiser_calls: 0,
            })
            .collect();
        let mut active: Vec<usize> = (0..n).collect();
        let counter = CountingDenoiser::new(self.denoiser);
        for &(tau, w) in &self.escalation.tuples {
            if active.is_empty() {
                break;
            }
            let x0 = images.select(&active);
            let src: Vec<&ConditioningSequence<f32>> =
                active.iter().map(|&i| &self.prompts.classes[sources[i]]).collect();
            let tgt: Vec<&ConditioningSequence<f32>> =
                active.iter().map(|&i| &self.prompts.classes[tgts[i]]).collect();
            let cfg = EdictConfig {
                p: self.p,
                tau,
                guidance: GuidanceConfig::new(self.mode, w)?,
            };
            let before = counter.calls();
            let inv_prompts = Prompts {
                pos: &src,
                neg: &tgt,
                null: &self.prompts.null,
            };
            let state = invert(&x0, &counter, inv_prompts, &cfg, self.schedule)?;
            let den_prompts = Prompts {
                pos: &tgt,
                neg: &src,
                null: &self.prompts.null,
            };
            let out = denoise(&state, &counter, den_prompts, &cfg, self.schedule)?;
            let per_image = 8 * tau as u64;
            let used = counter.calls() - before;
            if used != per_image * active.len() as u64 {
                return Err(Error::Step(format!(
                    "expected {} denoiser evaluations, counted {used}",
                    per_image * active.len() as u64
                )));
            }
            let preds = classifier.predict(&out)?;
            let mut still = Vec::new();
            for (j, &i) in active.iter().enumerate() {
                let r = &mut results[i];
                let flipped = preds[j].label == r.target_class;
                r.explanation = out.image(j);
                r.classifier_queries += 1;
                r.denoiser_calls += per_image;
                r.attempts.push(AttemptRecord {
                    tau,
                    w,
                    flipped,
                    target_probability: preds[j].probs[r.target_class],
                    output_sha256: crate::data::digest_f32(out.image_data(j)),
                });
                if flipped {
                    r.flipped = true;
                    r.used_tuple = Some((tau, w));
                } else {
                    still.push(i);
                }
            }
            active = still;
        }
        Ok(results)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub index: usize,
    pub original: String,
    pub explanation: String,
    pub original_sha256: String,
    pub explanation_sha256: String,
    pub dataset_label: usize,
    pub source_class: usize,
    pub target_class: usize,
    pub flipped: bool,
    pub used_tuple: Option<(usize, f64)>,
    pub attempts: Vec<AttemptRecord>,
    pub classifier_queries: u64,
    pub denoiser_calls: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkOptions {
    pub workers: usize,
    /// Images generated together in one batched trajectory.
    pub chunk_size: usize,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            chunk_size: 25,
        }
    }
}

/// Output of [`run_benchmark`]: per-image records in dataset order and the
/// generated images (kept for metric computation).
pub struct BenchmarkRun {
    pub records: Vec<BenchmarkRecord>,
    pub results: Vec<CounterfactualResult>,
    pub wall_seconds: f64,
}

/// Explains every image of `dataset` towards the opposite class, writing
/// `images/<index>_original.png`, `images/<index>_cf.png` and a line of
/// `records.jsonl` per image under `out_dir`. Lines are appended in
/// dataset order as soon as a prefix of chunks is complete.
pub fn run_benchmark<D: NoisePredictor<f32> + ?Sized>(
    dataset: &LabeledDataset,
    classifier: &dyn BlackBoxClassifier,
    explainer: &Explainer<'_, D>,
    out_dir: &Path,
    opts: &BenchmarkOptions,
) -> Result<BenchmarkRun> {
    let start = std::time::Instant::now();
    std::fs::create_dir_all(out_dir.join("images"))?;
    let records_path = out_dir.join("records.jsonl");
    let file = std::fs::File::create(&records_path)?;
    let n = dataset.len();
    let chunk = opts.chunk_size.max(1);
    let chunks: Vec<(usize, usize)> = (0..n).step_by(chunk).map(|s| (s, (s + chunk).min(n))).collect();
    let next = AtomicUsize::new(0);
    struct Shared {
        done: BTreeMap<usize, Vec<(BenchmarkRecord, CounterfactualResult)>>,
        flushed: usize,
        writer: BufWriter<std::fs::File>,
        out: Vec<(BenchmarkRecord, CounterfactualResult)>,
        error: Option<Error>,
    }
    let shared = Mutex::new(Shared {
        done: BTreeMap::new(),
        flushed: 0,
        writer: BufWriter::new(file),
        out: Vec::with_capacity(n),
        error: None,
    });
    let work = || loop {
        let c = next.fetch_add(1, Ordering::SeqCst);
        if c >= chunks.len() {
            return;
        }
        if shared.lock().map(|s| s.error.is_some()).unwrap_or(true) {
            return;
        }
        let (s, e) = chunks[c];
        let res = process_chunk(dataset, classifier, explainer, out_dir, s, e);
        let mut g = shared.lock().expect("benchmark lock");
        match res {
            Ok(rows) => {
                g.done.insert(c, rows);
                while let Some(rows) = {
                    let f = g.flushed;
                    g.done.remove(&f)
                } {
                    for (rec, _) in &rows {
                        let line = serde_json::to_string(rec).expect("record serializes");
                        if let Err(err) = writeln!(g.writer, "{line}").and_then(|_| g.writer.flush()) {
                            g.error = Some(err.into());
                        }
                    }
                    g.out.extend(rows);
                    g.flushed += 1;
                }
            }
            Err(err) => {
                if g.error.is_none() {
                    g.error = Some(err);
                }
            }
        }
    };
    let workers = opts.workers.max(1).min(chunks.len().max(1));
    std::thread::scope(|sc| {
        for _ in 1..workers {
            sc.spawn(work);
        }
        work();
    });
    let shared = shared.into_inner().map_err(|_| Error::Precondition("worker panicked".into()))?;
    if let Some(e) = shared.error {
        return Err(e);
    }
    let (records, results) = shared.out.into_iter().unzip();
    Ok(BenchmarkRun {
        records,
        results,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

fn process_chunk<D: NoisePredictor<f32> + ?Sized>(
    dataset: &LabeledDataset,
    classifier: &dyn BlackBoxClassifier,
    explainer: &Explainer<'_, D>,
    out_dir: &Path,
    start: usize,
    end: usize,
) -> Result<Vec<(BenchmarkRecord, CounterfactualResult)>> {
    let idx: Vec<usize> = (start..end).collect();
    let images = dataset.images.select(&idx);
    let results = explainer.generate(&images, &vec![None; idx.len()], classifier)?;
    let mut rows = Vec::with_capacity(idx.len());
    for (i, r) in idx.into_iter().zip(results) {
        let original = format!("images/{i:04}_original.png");
        let explanation = format!("images/{i:04}_cf.png");
        let ob = image_to_bytes(&r.original)?;
        let eb = image_to_bytes(&r.explanation)?;
        std::fs::write(out_dir.join(&original), &ob)?;
        std::fs::write(out_dir.join(&explanation), &eb)?;
        rows.push((
            BenchmarkRecord {
                index: i,
                original,
                explanation,
                original_sha256: sha256_hex(&ob),
                explanation_sha256: sha256_hex(&eb),
                dataset_label: dataset.labels[i],
                source_class: r.source_class,
                target_class: r.target_class,
                flipped: r.flipped,
                used_tuple: r.used_tuple,
                attempts: r.attempts.clone(),
                classifier_queries: r.classifier_queries,
                denoiser_calls: r.denoiser_calls,
            },
            r,
        ));
    }
    Ok(rows)
}

/// Checks that every image referenced by `records` exists under `dir` and
/// matches its recorded hash.
pub fn verify_artifacts(dir: &Path, records: &[BenchmarkRecord]) -> Result<()> {
    for r in records {
        for (file, hash) in [(&r.original, &r.original_sha256), (&r.explanation, &r.explanation_sha256)] {
            let p: PathBuf = dir.join(file);
            let bytes = std::fs::read(&p)?;
            if &sha256_hex(&bytes) != hash {
                return Err(Error::Precondition(format!("{} does not match its recorded hash", p.display())));
            }
        }
    }
    Ok(())
}
