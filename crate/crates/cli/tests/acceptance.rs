//! End-to-end acceptance run on the toy benchmark.
//!
//! Trained artifacts are cached under `target/tmp/acceptance-artifacts/<key>`
//! where the key hashes the training-relevant configuration. Set
//! `CFDIFF_ACCEPTANCE_FRESH=1` to retrain from scratch. Prints one
//! PASS/FAIL line per criterion and exits non-zero if any fails.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use cfdiff::checkpoint::load_table;
use cfdiff::config::RunConfig;
use cfdiff::data::io::sha256_hex;
use cfdiff::data::nets::{AttributeOracle, Embedder, TrainedClassifier};
use cfdiff::denoiser::{CountingDenoiser, NoisePredictor, UnetDenoiser};
use cfdiff::diffusion::{gaussian_batch, NoiseSchedule};
use cfdiff::distill::{prompt_losses, render_prompt, tokens, ConditioningSequence, PromptTemplate, TokenMode};
use cfdiff::edict::{denoise_unclamped, invert, EdictConfig, Prompts};
use cfdiff::guidance::{cfg_combine, guided_score, negative_combine, GuidanceConfig, GuidanceMode};
use cfdiff::metrics::{evaluate, fid_features, Evaluators};
use cfdiff::nn::unet::UnetConfig;
use cfdiff::pipeline::{
    BlackBoxClassifier, ClassPrompts, CountingClassifier, CounterfactualResult, EscalationSchedule, Explainer,
};
use cfdiff::scalar::Scalar;
use cfdiff::tensor::{ImageShape, LatentBatch, LatentImage};
use cfdiff_cli::{cmd_distill, cmd_evaluate, cmd_gen_data, cmd_train, load_data, ClassifierBackend};

/// Bump to invalidate cached artifacts after behaviour changes.
const ARTIFACT_VERSION: u32 = 1;
const GRID_TAUS: [usize; 3] = [15, 20, 25];
const GRID_WS: [f64; 3] = [2.0, 4.0, 6.0];

struct Outcome {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn stage(msg: &str) {
    eprintln!("[acceptance] {msg}");
}

fn cache_root(cfg: &RunConfig) -> PathBuf {
    let mut echo = cfg.clone();
    echo.paths = Default::default();
    let key = format!("v{ARTIFACT_VERSION}\n{}", echo.to_toml().expect("config serializes"));
    let hash = &sha256_hex(key.as_bytes())[..16];
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-artifacts").join(hash)
}

fn with_root(mut cfg: RunConfig, root: &Path) -> RunConfig {
    cfg.paths.data_dir = root.join("data");
    cfg.paths.checkpoint_dir = root.join("checkpoints");
    cfg.paths.output_dir = root.join("output");
    cfg
}

fn prepare(cfg: &RunConfig, fresh: bool) -> Result<()> {
    if fresh || !cfg.paths.data_dir.join("manifest.json").exists() {
        stage("rendering dataset");
        cmd_gen_data(cfg)?;
    }
    if fresh || !cfg.paths.checkpoint_dir.join("train_report.json").exists() {
        stage("training denoiser and auxiliary networks");
        cmd_train(cfg)?;
    }
    Ok(())
}

fn ensure_distilled(cfg: &RunConfig, fresh: bool) -> Result<()> {
    let name = cfdiff_cli::embeddings_name(cfg);
    if fresh || !cfg.checkpoint(&name).exists() {
        stage(&format!("distilling {name}"));
        cmd_distill(cfg)?;
    }
    Ok(())
}

fn random_sequence<T: Scalar>(rng: &mut ChaCha8Rng, len: usize, dim: usize, scale: f64) -> ConditioningSequence<T> {
    let data = (0..len * dim)
        .map(|_| T::lit(scale * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    ConditioningSequence::new(vec![tokens::context(0); len], dim, data).expect("valid sequence")
}

fn criterion_1(cfg: &RunConfig, sched: &NoiseSchedule, den: &UnetDenoiser<f32>, test: &LatentBatch<f32>) -> Result<Outcome> {
    let start = Instant::now();
    let table = load_table(&cfg.checkpoint(cfdiff_cli::VOCABULARY))?;
    let scale = table.fixed_rms();
    let n = 32.min(test.len());
    let x0 = test.select(&(0..n).collect::<Vec<_>>());
    let den64 = den.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let dim = cfg.unet.cond_dim;
    let pos32: Vec<ConditioningSequence<f32>> = (0..n).map(|_| random_sequence(&mut rng, 10, dim, scale)).collect();
    let neg32: Vec<ConditioningSequence<f32>> = (0..n).map(|_| random_sequence(&mut rng, 10, dim, scale)).collect();
    let null32 = render_prompt::<f32>(&PromptTemplate::null(), &table)?;
    let pos64: Vec<ConditioningSequence<f64>> = pos32.iter().map(|c| c.cast()).collect();
    let neg64: Vec<ConditioningSequence<f64>> = neg32.iter().map(|c| c.cast()).collect();
    let null64 = null32.cast::<f64>();
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    let mut detail = String::new();
    for &tau in &[10usize, 25] {
        for &w in &[0.0, 3.0, 6.0] {
            let ec = EdictConfig {
                p: 0.93,
                tau,
                guidance: GuidanceConfig::new(GuidanceMode::Negative, w)?,
            };
            let p32: Vec<&ConditioningSequence<f32>> = pos32.iter().collect();
            let q32: Vec<&ConditioningSequence<f32>> = neg32.iter().collect();
            let pr32 = Prompts { pos: &p32, neg: &q32, null: &null32 };
            let st = invert(&x0, den, pr32, &ec, sched)?;
            let e32 = denoise_unclamped(&st, den, pr32, &ec, sched)?.max_abs_diff(&x0);
            let x64 = x0.cast::<f64>();
            let p64: Vec<&ConditioningSequence<f64>> = pos64.iter().collect();
            let q64: Vec<&ConditioningSequence<f64>> = neg64.iter().collect();
            let pr64 = Prompts { pos: &p64, neg: &q64, null: &null64 };
            let st = invert(&x64, &den64, pr64, &ec, sched)?;
            let e64 = denoise_unclamped(&st, &den64, pr64, &ec, sched)?.max_abs_diff(&x64);
            stage(&format!("round trip tau={tau} w={w}: f32 {e32:.2e}, f64 {e64:.2e}"));
            write!(detail, "(τ={tau},w={w}) f32 {e32:.1e} f64 {e64:.1e}; ")?;
            worst32 = worst32.max(e32);
            worst64 = worst64.max(e64);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(Outcome {
        id: 1,
        name: "EDICT exact invertibility",
        passed: worst32 <= 1e-3 && worst64 <= 1e-6 && secs <= 300.0,
        detail: format!("max f32 {worst32:.2e} (≤1e-3), max f64 {worst64:.2e} (≤1e-6), {secs:.0}s (≤300s); {detail}"),
    })
}

fn criterion_2(cfg: &RunConfig, sched: &NoiseSchedule, den: &UnetDenoiser<f32>, test: &LatentBatch<f32>) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut failures = 0usize;
    let trials = 2000;
    for _ in 0..trials {
        let len = rng.random_range(1..64);
        let shape = ImageShape::new(1, 1, len);
        let mut draw = || {
            let data: Vec<f32> = (0..len)
                .map(|_| rng.sample::<f32, _>(StandardNormal) * 10f32.powi(rng.random_range(-3..4)))
                .collect();
            LatentImage::new(shape, data).expect("shape")
        };
        let a = draw();
        let b = draw();
        let w = rng.random_range(0.0..10.0);
        if cfg_combine(&a, &b, 0.0)?.data() != a.data() {
            failures += 1;
        }
        if negative_combine(&a, &a, w)?.data() != a.data() {
            failures += 1;
        }
    }
    let table = load_table(&cfg.checkpoint(cfdiff_cli::VOCABULARY))?;
    let null = render_prompt::<f32>(&PromptTemplate::null(), &table)?;
    let n = 8.min(test.len());
    let x = test.select(&(0..n).collect::<Vec<_>>());
    let mut model_checks = 0;
    for &(t_pos, w) in &[(10usize, 0.5), (25, 3.0), (40, 6.0)] {
        let pos: Vec<ConditioningSequence<f32>> =
            (0..n).map(|_| random_sequence(&mut rng, 10, cfg.unet.cond_dim, table.fixed_rms())).collect();
        let p: Vec<&ConditioningSequence<f32>> = pos.iter().collect();
        let nulls = vec![&null; n];
        let t = sched.step_at(t_pos);
        let ng = guided_score(den, &x, t, &p, &nulls, &null, &GuidanceConfig::new(GuidanceMode::Negative, w)?)?;
        let cf = guided_score(den, &x, t, &p, &p, &null, &GuidanceConfig::new(GuidanceMode::Cfg, w)?)?;
        if ng.data() != cf.data() {
            failures += 1;
        }
        model_checks += 1;
    }
    Ok(Outcome {
        id: 2,
        name: "Guidance algebra",
        passed: failures == 0,
        detail: format!("{trials} randomized tensor pairs × 2 identities, {model_checks} denoiser checks of ng(∅) = cfg; {failures} bitwise mismatches"),
    })
}

fn criterion_3(
    sched: &NoiseSchedule,
    den: &UnetDenoiser<f32>,
    prompts: &ClassPrompts,
    clf: &dyn BlackBoxClassifier,
    test: &LatentBatch<f32>,
) -> Result<Outcome> {
    let x = test.select(&[0, 1, 2]);
    let mut ok = true;
    let mut detail = String::new();
    for &tau in &[1usize, 5, 25] {
        let counted = CountingDenoiser::new(den);
        let queried = CountingClassifier::new(clf);
        let esc = EscalationSchedule::single(tau, 3.0);
        let ex = Explainer {
            denoiser: &counted,
            schedule: sched,
            prompts,
            escalation: &esc,
            p: 0.93,
            mode: GuidanceMode::Negative,
        };
        let res = ex.generate(&x, &[None, None, None], &queried)?;
        let per_image_calls = counted.calls() as f64 / x.len() as f64;
        let per_image_queries = queried.queries() as f64 / x.len() as f64;
        let records_ok = res
            .iter()
            .all(|r| r.attempts.len() == 1 && r.denoiser_calls == 8 * tau as u64 && r.classifier_queries == 2);
        ok &= per_image_calls == (8 * tau) as f64 && per_image_queries <= 2.0 && records_ok;
        write!(detail, "τ={tau}: {per_image_calls} evals (8τ={}), {per_image_queries} queries; ", 8 * tau)?;
    }
    Ok(Outcome {
        id: 3,
        name: "Call accounting",
        passed: ok,
        detail,
    })
}

fn criterion_4() -> Result<Outcome> {
    let d = UnetDenoiser::<f64>::new(UnetConfig::tiny(), 7, 1000);
    let params = d.params().len();
    let shape = d.input_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let n = 2;
    let xt = gaussian_batch::<f64, _>(&mut rng, n, shape);
    let eps = gaussian_batch::<f64, _>(&mut rng, n, shape);
    let t = [137usize, 611];
    let dim = d.cond_dim();
    let fixed = random_sequence::<f64>(&mut rng, 4, dim, 1.0);
    let mut seq = random_sequence::<f64>(&mut rng, 6, dim, 1.0);
    // Rows 4.. of the prompt are the learnable token rows.
    let build = |s: &ConditioningSequence<f64>| {
        let mut data = fixed.data().to_vec();
        data.extend_from_slice(s.data());
        ConditioningSequence::new(vec![tokens::class(0, 0); 10], dim, data).expect("sequence")
    };
    let full = build(&seq);
    let (_, grads) = d.loss_and_cond_grad(&xt, &t, &[&full, &full], &eps)?;
    let mut worst = 0.0f64;
    let h = 1e-5;
    for k in 0..seq.data().len() {
        let analytic: f64 = grads.iter().map(|g| g[4 * dim + k]).sum();
        let orig = seq.data()[k];
        seq.data_mut()[k] = orig + h;
        let up = build(&seq);
        let (lp, _) = d.loss_and_cond_grad(&xt, &t, &[&up, &up], &eps)?;
        seq.data_mut()[k] = orig - h;
        let dn = build(&seq);
        let (lm, _) = d.loss_and_cond_grad(&xt, &t, &[&dn, &dn], &eps)?;
        seq.data_mut()[k] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(Outcome {
        id: 4,
        name: "Embedding-gradient correctness",
        passed: params <= 10_000 && worst <= 1e-3,
        detail: format!("{params} parameters, {} learnable coordinates, max relative error {worst:.2e} (≤1e-3)", seq.data().len()),
    })
}

fn criterion_5(
    cfg: &RunConfig,
    sched: &NoiseSchedule,
    den: &UnetDenoiser<f32>,
    prompts: &ClassPrompts,
    clf: &dyn BlackBoxClassifier,
    val: &LatentBatch<f32>,
) -> Result<Outcome> {
    let preds = clf.predict(val)?;
    let k = clf.num_classes();
    let mut ok = cfg.distill.iterations == 800
        && cfg.distill.batch_size == 64
        && cfg.distill.learning_rate == 0.01
        && cfg.distill.weight_decay == 1e-4
        && cfg.distill.tokens.count() == 3;
    let report: cfdiff_cli::TrainReport =
        serde_json::from_slice(&read(&cfg.paths.checkpoint_dir.join("train_report.json"))?)?;
    let mut detail = format!(
        "held-out denoiser loss {:.2} vs untrained {:.2}; ",
        report.heldout_loss_trained, report.heldout_loss_untrained
    );
    for i in 0..k {
        let idx: Vec<usize> = preds.iter().enumerate().filter(|(_, p)| p.label == i).map(|(j, _)| j).take(256).collect();
        let imgs = val.select(&idx);
        let own = prompt_losses(&imgs, den, sched, &prompts.classes[i], 4, 505 + i as u64)?;
        let mut gaps = Vec::new();
        for j in (0..k).filter(|&j| j != i) {
            let other = prompt_losses(&imgs, den, sched, &prompts.classes[j], 4, 505 + i as u64)?;
            let gap = other.iter().zip(&own).map(|(o, s)| o - s).sum::<f64>() / own.len().max(1) as f64;
            gaps.push(gap);
            write!(detail, "class {i} vs {j}: n={} paired gap {gap:.3}; ", idx.len())?;
        }
        ok &= idx.len() >= 64 && gaps.iter().all(|g| *g > 0.0);
    }
    Ok(Outcome {
        id: 5,
        name: "Distillation efficacy",
        passed: ok,
        detail,
    })
}

fn success_rate(
    sched: &NoiseSchedule,
    den: &UnetDenoiser<f32>,
    prompts: &ClassPrompts,
    clf: &dyn BlackBoxClassifier,
    test: &LatentBatch<f32>,
    tau: usize,
    w: f64,
    mode: GuidanceMode,
) -> Result<f64> {
    let esc = EscalationSchedule::single(tau, w);
    let ex = Explainer {
        denoiser: den,
        schedule: sched,
        prompts,
        escalation: &esc,
        p: 0.93,
        mode,
    };
    let mut flipped = 0usize;
    for start in (0..test.len()).step_by(25) {
        let idx: Vec<usize> = (start..(start + 25).min(test.len())).collect();
        let res = ex.generate(&test.select(&idx), &vec![None; idx.len()], clf)?;
        flipped += res.iter().filter(|r| r.flipped).count();
    }
    Ok(flipped as f64 / test.len() as f64)
}

fn criteria_6_7(
    sched: &NoiseSchedule,
    den: &UnetDenoiser<f32>,
    prompts: &ClassPrompts,
    clf: &dyn BlackBoxClassifier,
    test: &LatentBatch<f32>,
) -> Result<(Outcome, Outcome)> {
    let start = Instant::now();
    let mut sr = [[0.0f64; 3]; 3];
    for (i, &tau) in GRID_TAUS.iter().enumerate() {
        for (j, &w) in GRID_WS.iter().enumerate() {
            sr[i][j] = success_rate(sched, den, prompts, clf, test, tau, w, GuidanceMode::Negative)?;
            stage(&format!("grid τ={tau} w={w}: SR {:.3}", sr[i][j]));
        }
    }
    let grid_secs = start.elapsed().as_secs_f64();
    let mut inversions = Vec::new();
    for i in 0..3 {
        for j in 0..3 {
            if i + 1 < 3 && sr[i + 1][j] < sr[i][j] {
                inversions.push(format!("τ {}→{} at w={}: {:.3}→{:.3}", GRID_TAUS[i], GRID_TAUS[i + 1], GRID_WS[j], sr[i][j], sr[i + 1][j]));
            }
            if j + 1 < 3 && sr[i][j + 1] < sr[i][j] {
                inversions.push(format!("w {}→{} at τ={}: {:.3}→{:.3}", GRID_WS[j], GRID_WS[j + 1], GRID_TAUS[i], sr[i][j], sr[i][j + 1]));
            }
        }
    }
    let top = sr[2][2];
    let mut table = String::new();
    for (i, row) in sr.iter().enumerate() {
        write!(table, "τ={}: {:.3}/{:.3}/{:.3}; ", GRID_TAUS[i], row[0], row[1], row[2])?;
    }
    let c6 = Outcome {
        id: 6,
        name: "SR trend over (τ, w)",
        passed: inversions.len() <= 2 && top >= 0.80 && grid_secs <= 7200.0,
        detail: format!(
            "{table}w=2/4/6; {} inversions (≤2) {:?}; SR(25,6)={top:.3} (≥0.80); {grid_secs:.0}s",
            inversions.len(),
            inversions
        ),
    };
    let ng = sr[1][1];
    let cfg_sr = success_rate(sched, den, prompts, clf, test, GRID_TAUS[1], GRID_WS[1], GuidanceMode::Cfg)?;
    let c7 = Outcome {
        id: 7,
        name: "Negative guidance vs CFG",
        passed: ng >= cfg_sr,
        detail: format!("at (τ=20, w=4): SR negative {ng:.3}, SR cfg {cfg_sr:.3}"),
    };
    Ok((c6, c7))
}

fn criterion_8(cfg: &RunConfig, fresh: bool, main_sr: f64) -> Result<Outcome> {
    let mut detail = format!("main SR {main_sr:.3}; ");
    let mut ok = true;
    for (label, tokens, ctx) in [("context off", TokenMode::Multi, false), ("single token", TokenMode::Single, true)] {
        let mut c = cfg.clone();
        c.distill.tokens = tokens;
        c.distill.use_context = ctx;
        let run = ensure_distilled(&c, fresh).and_then(|_| cmd_evaluate(&c, &ClassifierBackend::InProcess, None));
        match run {
            Ok(out) => {
                let sr = out.manifest.metrics.sr;
                let delta = sr - main_sr;
                let dir = if delta > 0.0 { "up" } else if delta < 0.0 { "down" } else { "flat" };
                write!(detail, "{label}: SR {sr:.3} (Δ {delta:+.3}, {dir}); ")?;
            }
            Err(e) => {
                ok = false;
                write!(detail, "{label}: failed: {e:#}; ")?;
            }
        }
    }
    Ok(Outcome {
        id: 8,
        name: "Ablation flags run end-to-end",
        passed: ok,
        detail,
    })
}

fn criterion_9(
    den_flops: u64,
    clf: &dyn BlackBoxClassifier,
    oracle: &AttributeOracle,
    identity: &Embedder,
    encoder: &Embedder,
    test: &LatentBatch<f32>,
) -> Result<Outcome> {
    let preds = clf.predict(test)?;
    let results: Vec<CounterfactualResult> = (0..test.len())
        .map(|i| {
            let source = preds[i].label;
            let target = 1 - source;
            CounterfactualResult {
                original: test.image(i),
                explanation: test.image(i),
                source_class: source,
                target_class: target,
                flipped: preds[i].label == target,
                used_tuple: None,
                attempts: Vec::new(),
                classifier_queries: 1,
                denoiser_calls: 0,
            }
        })
        .collect();
    let ev = Evaluators {
        classifier: clf,
        oracle,
        identity,
        encoder,
        cout_steps: 11,
        sfid_seed: 0,
    };
    let (m, _) = evaluate(&results, &ev, den_flops, 0.0)?;
    let feats = oracle.model().features(test)?;
    let fid_self = fid_features(&feats, &feats)?;
    let cd = m.cd.unwrap_or(f64::NAN);
    let passed = m.mnac == 0.0
        && cd == 0.0
        && (m.fs - 1.0).abs() <= 1e-9
        && m.fva == 1.0
        && m.cout <= 0.0
        && (m.s3 - 1.0).abs() <= 1e-9
        && m.sr == 0.0
        && fid_self <= 1e-6;
    Ok(Outcome {
        id: 9,
        name: "Metric identity battery",
        passed,
        detail: format!(
            "MNAC {} CD {} FS {:.12} S3 {:.12} FVA {} COUT {:.4} SR {} fid(S,S) {:.2e} (n={})",
            m.mnac, cd, m.fs, m.s3, m.fva, m.cout, m.sr, fid_self, m.n_images
        ),
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn criteria_10_11(cfg: &RunConfig, baseline: &Path, fresh: bool) -> Result<(Outcome, Outcome)> {
    let exe = PathBuf::from(env!("CARGO_BIN_EXE_cfdiff"));
    let piped_dir = cfg.paths.output_dir.join("bridge");
    let piped = cmd_evaluate(cfg, &ClassifierBackend::Process(exe), Some(&piped_dir))?;
    let a = read(&baseline.join("manifest.json"))?;
    let b = read(&piped.dir.join("manifest.json"))?;
    let c10 = Outcome {
        id: 10,
        name: "Black-box integrity",
        passed: a == b,
        detail: format!(
            "in-process manifest sha256 {} vs bridged {} ({} records)",
            &sha256_hex(&a)[..12],
            &sha256_hex(&b)[..12],
            piped.manifest.records.len()
        ),
    };

    // Rerun of the main benchmark, plus two complete small pipelines from
    // scratch (data, training, distillation, evaluation).
    let again_dir = cfg.paths.output_dir.join("rerun");
    cmd_evaluate(cfg, &ClassifierBackend::InProcess, Some(&again_dir))?;
    let same_main = read(&baseline.join("manifest.json"))? == read(&again_dir.join("manifest.json"))?
        && read(&baseline.join("metrics.json"))? == read(&again_dir.join("metrics.json"))?;
    let small = small_config();
    let base = cache_root(&small).join("determinism");
    if fresh || base.exists() {
        let _ = std::fs::remove_dir_all(&base);
    }
    let mut hashes = Vec::new();
    for run in ["a", "b"] {
        let c = with_root(small.clone(), &base.join(run));
        stage(&format!("small full pipeline run {run}"));
        cmd_gen_data(&c)?;
        cmd_train(&c)?;
        cmd_distill(&c)?;
        let out = cmd_evaluate(&c, &ClassifierBackend::InProcess, None)?;
        hashes.push((
            sha256_hex(&read(&out.dir.join("manifest.json"))?),
            sha256_hex(&read(&out.dir.join("metrics.json"))?),
        ));
    }
    let same_small = hashes[0] == hashes[1];
    let c11 = Outcome {
        id: 11,
        name: "Determinism",
        passed: same_main && same_small,
        detail: format!(
            "main benchmark rerun identical: {same_main}; small full pipeline ×2 identical: {same_small} (manifest {} / {})",
            &hashes[0].0[..12],
            &hashes[1].0[..12]
        ),
    };
    Ok((c10, c11))
}

/// A complete but small pipeline for the from-scratch determinism check.
fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.data.train_samples = 300;
    c.data.val_samples = 64;
    c.data.test_samples = 12;
    c.denoiser.train.iterations = 60;
    for a in [&mut c.aux.classifier, &mut c.aux.oracle, &mut c.aux.identity, &mut c.aux.encoder] {
        a.train.iterations = 40;
    }
    c.distill.iterations = 10;
    c.distill.batch_size = 16;
    c.explain.escalation = EscalationSchedule::new(vec![(3, 2.0), (5, 4.0)]).expect("tuples");
    c.explain.chunk_size = 5;
    c
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let fresh = std::env::var("CFDIFF_ACCEPTANCE_FRESH").is_ok_and(|v| v == "1");
    let started = Instant::now();
    match run(fresh) {
        Ok(outcomes) => {
            println!();
            let mut failed = 0;
            for o in &outcomes {
                let tag = if o.passed { "PASS" } else { "FAIL" };
                println!("{tag} [{}] {}: {}", o.id, o.name, o.detail);
                failed += usize::from(!o.passed);
            }
            println!(
                "acceptance: {} passed, {failed} failed in {:.0}s",
                outcomes.len() - failed,
                started.elapsed().as_secs_f64()
            );
            if failed > 0 {
                std::process::exit(1);
            }
        }
        Err(e) => {
            println!("FAIL acceptance run aborted: {e:#}");
            std::process::exit(1);
        }
    }
}

fn run(fresh: bool) -> Result<Vec<Outcome>> {
    let cfg = RunConfig::default();
    let cfg = with_root(cfg.clone(), &cache_root(&cfg));
    stage(&format!("artifacts in {}", cfg.paths.data_dir.parent().unwrap_or(Path::new(".")).display()));
    prepare(&cfg, fresh)?;
    ensure_distilled(&cfg, fresh)?;

    let (_, splits) = load_data(&cfg)?;
    let sched = cfg.schedule.build()?;
    let den = cfdiff_cli::load_denoiser(&cfg)?;
    let clf = TrainedClassifier::load(&cfg.checkpoint(cfdiff_cli::CLASSIFIER))?;
    let oracle = AttributeOracle::load(&cfg.checkpoint(cfdiff_cli::ORACLE))?;
    let identity = Embedder::load_identity(&cfg.checkpoint(cfdiff_cli::IDENTITY))?;
    let encoder = Embedder::load_encoder(&cfg.checkpoint(cfdiff_cli::ENCODER))?;
    let prompts = cfdiff_cli::load_prompts(&cfg, clf.num_classes())?;
    let test = &splits.test.images;

    let mut out = Vec::new();
    let mut record = |o: Outcome| {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        stage(&format!("{tag} [{}] {}", o.id, o.name));
        out.push(o);
    };
    stage("criterion 1");
    record(criterion_1(&cfg, &sched, &den, test)?);
    stage("criterion 2");
    record(criterion_2(&cfg, &sched, &den, test)?);
    stage("criterion 3");
    record(criterion_3(&sched, &den, &prompts, &clf, test)?);
    stage("criterion 4");
    record(criterion_4()?);
    stage("criterion 5");
    record(criterion_5(&cfg, &sched, &den, &prompts, &clf, &splits.val.images)?);
    stage("criteria 6 and 7");
    let (c6, c7) = criteria_6_7(&sched, &den, &prompts, &clf, test)?;
    record(c6);
    record(c7);
    stage("main benchmark");
    let main = cmd_evaluate(&cfg, &ClassifierBackend::InProcess, None)?;
    stage("criterion 8");
    record(criterion_8(&cfg, fresh, main.manifest.metrics.sr)?);
    stage("criterion 9");
    let flops = den.flops_per_image(prompts.classes.iter().map(|c| c.len()).max().unwrap_or(1));
    record(criterion_9(flops, &clf, &oracle, &identity, &encoder, test)?);
    stage("criteria 10 and 11");
    let (c10, c11) = criteria_10_11(&cfg, &main.dir, fresh)?;
    record(c10);
    record(c11);
    out.sort_by_key(|o| o.id);
    Ok(out)
}
