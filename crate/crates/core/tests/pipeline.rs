use std::sync::atomic::{AtomicUsize, Ordering};

use cfdiff::data::{generate_split, Split, SyntheticSpec};
use cfdiff::denoiser::{CountingDenoiser, NoisePredictor};
use cfdiff::diffusion::ScheduleConfig;
use cfdiff::distill::ConditioningSequence;
use cfdiff::error::{Error, Result};
use cfdiff::guidance::GuidanceMode;
use cfdiff::metrics::efficiency;
use cfdiff::pipeline::{
    run_benchmark, verify_artifacts, BenchmarkOptions, BlackBoxClassifier, ClassPrompts, CountingClassifier,
    EscalationSchedule, Explainer, Prediction,
};
use cfdiff::tensor::{ImageShape, LatentBatch};

const SHAPE: ImageShape = ImageShape::new(1, 32, 32);

/// Predicts `0.05·x + c₀` where `c₀` is the first conditioning value.
struct Drift;

impl NoisePredictor<f32> for Drift {
    fn input_shape(&self) -> ImageShape {
        SHAPE
    }

    fn cond_dim(&self) -> usize {
        2
    }

    fn max_cond_len(&self) -> usize {
        4
    }

    fn flops_per_image(&self, _cond_len: usize) -> u64 {
        1000
    }

    fn predict_batch(
        &self,
        x: &LatentBatch<f32>,
        _t: &[usize],
        conds: &[&ConditioningSequence<f32>],
    ) -> Result<LatentBatch<f32>> {
        let data = (0..x.len())
            .flat_map(|i| x.image_data(i).iter().map(move |&v| 0.05 * v + conds[i].data()[0]))
            .collect();
        LatentBatch::new(x.len(), x.shape(), data)
    }
}

/// Class 1 when the mean pixel is above `threshold`.
struct Brightness {
    threshold: f32,
}

impl BlackBoxClassifier for Brightness {
    fn num_classes(&self) -> usize {
        2
    }

    fn predict(&self, x: &LatentBatch<f32>) -> Result<Vec<Prediction>> {
        Ok((0..x.len())
            .map(|i| {
                let m = x.image_data(i).iter().sum::<f32>() / x.shape().numel() as f32;
                let p1 = 1.0 / (1.0 + (-(20.0 * (m - self.threshold)) as f64).exp());
                Prediction::from_probs(vec![1.0 - p1, p1])
            })
            .collect())
    }
}

/// Class 0 on its first call and `later` afterwards.
struct Scripted {
    calls: AtomicUsize,
    later: usize,
}

impl BlackBoxClassifier for Scripted {
    fn num_classes(&self) -> usize {
        2
    }

    fn predict(&self, x: &LatentBatch<f32>) -> Result<Vec<Prediction>> {
        let first = self.calls.fetch_add(1, Ordering::SeqCst) == 0;
        let label = if first { 0 } else { self.later };
        let mut probs = vec![0.0; 2];
        probs[label] = 1.0;
        Ok(vec![Prediction::from_probs(probs); x.len()])
    }
}

fn prompts() -> ClassPrompts {
    let seq = |v: f32| ConditioningSequence::new(vec![1, 2], 2, vec![v, 0.0, 0.0, 0.0]).unwrap();
    ClassPrompts {
        classes: vec![seq(0.2), seq(-0.2)],
        null: ConditioningSequence::new(vec![0], 2, vec![0.0, 0.0]).unwrap(),
    }
}

fn images(n: usize) -> LatentBatch<f32> {
    let spec = SyntheticSpec {
        test_samples: n,
        ..SyntheticSpec::default()
    };
    generate_split(&spec, Split::Test).unwrap().images
}

#[test]
fn an_immediate_flip_costs_one_attempt() {
    let sched = ScheduleConfig::default().build().unwrap();
    let den = CountingDenoiser::new(&Drift);
    let prompts = prompts();
    let esc = EscalationSchedule::smile();
    let ex = Explainer {
        denoiser: &den,
        schedule: &sched,
        prompts: &prompts,
        escalation: &esc,
        p: 0.93,
        mode: GuidanceMode::Negative,
    };
    let clf = Scripted {
        calls: AtomicUsize::new(0),
        later: 1,
    };
    let r = ex.generate_counterfactual(&images(1).image(0), 1, &clf).unwrap();
    assert!(r.flipped);
    assert_eq!(r.attempts.len(), 1);
    assert_eq!(r.used_tuple, Some((25, 3.0)));
    assert_eq!(r.classifier_queries, 2);
    assert_eq!(r.denoiser_calls, 200);
    assert_eq!(den.calls(), 200);
    let e = efficiency(&[r], 1000, 1.0).unwrap();
    assert_eq!(e.mean_calls, 200.0);
    assert_eq!(e.flops_estimate, 200_000.0);
}

#[test]
fn a_stubborn_classifier_exhausts_the_schedule() {
    let sched = ScheduleConfig::default().build().unwrap();
    let den = CountingDenoiser::new(&Drift);
    let prompts = prompts();
    let esc = EscalationSchedule::smile();
    let ex = Explainer {
        denoiser: &den,
        schedule: &sched,
        prompts: &prompts,
        escalation: &esc,
        p: 0.93,
        mode: GuidanceMode::Cfg,
    };
    let clf = Scripted {
        calls: AtomicUsize::new(0),
        later: 0,
    };
    let counted = CountingClassifier::new(&clf);
    let x = images(3);
    let res = ex.generate(&x, &[None; 3], &counted).unwrap();
    let taus: usize = esc.tuples.iter().map(|t| t.0).sum();
    for r in &res {
        assert!(!r.flipped);
        assert_eq!(r.used_tuple, None);
        assert_eq!(r.attempts.len(), esc.tuples.len());
        assert_eq!(r.classifier_queries, 1 + esc.tuples.len() as u64);
        assert_eq!(r.denoiser_calls, 8 * taus as u64);
    }
    assert_eq!(den.calls(), 3 * 8 * taus as u64);
    // Each image is queried once up front and once per attempt.
    assert_eq!(counted.queries(), 3 * (1 + esc.tuples.len() as u64));
}

#[test]
fn targeting_the_current_class_is_rejected() {
    let sched = ScheduleConfig::default().build().unwrap();
    let prompts = prompts();
    let esc = EscalationSchedule::single(5, 1.0);
    let ex = Explainer {
        denoiser: &Drift,
        schedule: &sched,
        prompts: &prompts,
        escalation: &esc,
        p: 0.93,
        mode: GuidanceMode::Negative,
    };
    let clf = Brightness { threshold: 10.0 };
    let err = ex.generate_counterfactual(&images(1).image(0), 0, &clf).unwrap_err();
    assert!(matches!(err, Error::Precondition(_)), "{err}");
    assert!(ex.generate_counterfactual(&images(1).image(0), 5, &clf).is_err());
}

#[test]
fn benchmark_is_independent_of_worker_count() {
    let sched = ScheduleConfig::default().build().unwrap();
    let prompts = prompts();
    let esc = EscalationSchedule::new(vec![(3, 1.0), (6, 4.0)]).unwrap();
    let ex = Explainer {
        denoiser: &Drift,
        schedule: &sched,
        prompts: &prompts,
        escalation: &esc,
        p: 0.93,
        mode: GuidanceMode::Negative,
    };
    let spec = SyntheticSpec {
        test_samples: 9,
        ..SyntheticSpec::default()
    };
    let data = generate_split(&spec, Split::Test).unwrap();
    let mean = data.images.data().iter().sum::<f32>() / data.images.data().len() as f32;
    let clf = Brightness { threshold: mean };
    let dir = tempfile::tempdir().unwrap();
    let one = run_benchmark(&data, &clf, &ex, &dir.path().join("one"), &BenchmarkOptions { workers: 1, chunk_size: 4 })
        .unwrap();
    let three = run_benchmark(&data, &clf, &ex, &dir.path().join("three"), &BenchmarkOptions { workers: 3, chunk_size: 2 })
        .unwrap();
    assert_eq!(one.records, three.records);
    assert_eq!(
        std::fs::read(dir.path().join("one/records.jsonl")).unwrap(),
        std::fs::read(dir.path().join("three/records.jsonl")).unwrap()
    );
    verify_artifacts(&dir.path().join("one"), &one.records).unwrap();
    assert_eq!(one.records.len(), 9);
    assert!(one.records.iter().all(|r| r.classifier_queries == 1 + r.attempts.len() as u64));

    std::fs::write(dir.path().join("one").join(&one.records[0].explanation), b"tampered").unwrap();
    assert!(verify_artifacts(&dir.path().join("one"), &one.records).is_err());
}
