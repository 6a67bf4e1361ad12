//! Evaluation suite: validity, proximity, sparsity, realism and cost.
//!
//! CD and COUT use this crate's own definitions: CD is the mean absolute
//! change of pairwise Pearson correlations between oracle attributes of
//! the originals and of the counterfactuals, and COUT is the trapezoidal
//! area under `p_target − p_source` along the straight path from the
//! original to the counterfactual.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::nets::{AttributeOracle, Embedder};
use crate::data::AttributeVector;
use crate::error::{Error, Result};
use crate::pipeline::{BlackBoxClassifier, CounterfactualResult};
use crate::tensor::{LatentBatch, LatentImage};

pub fn success_rate(results: &[CounterfactualResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Metric("success rate of an empty result list".into()));
    }
    Ok(results.iter().filter(|r| r.flipped).count() as f64 / results.len() as f64)
}

/// Mean and unbiased covariance of row features, summed in row order.
pub fn gaussian_fit(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Metric(format!("need at least 2 feature vectors, got {n}")));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Metric("feature vectors differ in length".into()));
    }
    let mut mu = DVector::zeros(d);
    for f in features {
        for (m, v) in mu.iter_mut().zip(f) {
            *m += v;
        }
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in features {
        let c = DVector::from_iterator(d, f.iter().zip(mu.iter()).map(|(v, m)| v - m));
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= (n - 1) as f64;
    Ok((mu, cov))
}

/// Symmetrizes and clamps negative eigenvalues to zero before the square
/// root.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let ra = psd_sqrt(a);
    let m = &ra * b * &ra;
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, ca) = gaussian_fit(a)?;
    let (mb, cb) = gaussian_fit(b)?;
    if ma.len() != mb.len() {
        return Err(Error::Metric("feature sets differ in dimension".into()));
    }
    let mean = (&ma - &mb).norm_squared();
    let tr = ca.trace() + cb.trace() - 2.0 * trace_sqrt_product(&ca, &cb);
    Ok((mean + tr).max(0.0))
}

pub fn fid(a: &LatentBatch<f32>, b: &LatentBatch<f32>, encoder: &AttributeOracle) -> Result<f64> {
    fid_features(&encoder.model().features(a)?, &encoder.model().features(b)?)
}

/// Seeded 50/50 split of `0..n`.
pub fn split_halves(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let b = idx.split_off(n / 2);
    (idx, b)
}

/// Mean of the two crosswise distances between one half of the real
/// features and the counterfactual features of the other half.
/// `keep[i]` marks counterfactuals that take part (the valid ones).
pub fn sfid_features(real: &[Vec<f64>], cf: &[Vec<f64>], keep: &[bool], seed: u64) -> Result<f64> {
    if real.len() != cf.len() || keep.len() != cf.len() {
        return Err(Error::Metric("real and counterfactual sets must be paired".into()));
    }
    let (a, b) = split_halves(real.len(), seed);
    let pick = |idx: &[usize], src: &[Vec<f64>], filter: bool| -> Vec<Vec<f64>> {
        idx.iter()
            .filter(|&&i| !filter || keep[i])
            .map(|&i| src[i].clone())
            .collect()
    };
    let ab = fid_features(&pick(&a, real, false), &pick(&b, cf, true))?;
    let ba = fid_features(&pick(&b, real, false), &pick(&a, cf, true))?;
    Ok(0.5 * (ab + ba))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Metric("zero-norm embedding".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity of embeddings, one value per pair.
pub fn fs(x: &LatentBatch<f32>, cf: &LatentBatch<f32>, embedder: &Embedder) -> Result<Vec<f64>> {
    if x.len() != cf.len() {
        return Err(Error::Metric("fs needs paired batches".into()));
    }
    let ex = embedder.embed(x)?;
    let ec = embedder.embed(cf)?;
    ex.iter().zip(&ec).map(|(a, b)| cosine(a, b)).collect()
}

pub fn fva_indicator(similarity: f64) -> f64 {
    if similarity > 0.5 {
        1.0
    } else {
        0.0
    }
}

pub fn fva(x: &LatentBatch<f32>, cf: &LatentBatch<f32>, embedder: &Embedder) -> Result<Vec<f64>> {
    Ok(fs(x, cf, embedder)?.into_iter().map(fva_indicator).collect())
}

pub fn attributes_changed(a: &AttributeVector, b: &AttributeVector) -> usize {
    a.bits().iter().zip(b.bits()).filter(|(x, y)| x != y).count()
}

/// Mean number of oracle attributes that differ within a pair.
pub fn mnac(original: &[AttributeVector], counterfactual: &[AttributeVector]) -> Result<f64> {
    if original.len() != counterfactual.len() || original.is_empty() {
        return Err(Error::Metric("mnac needs a nonempty paired list".into()));
    }
    let total: usize = original
        .iter()
        .zip(counterfactual)
        .map(|(a, b)| attributes_changed(a, b))
        .sum();
    Ok(total as f64 / original.len() as f64)
}

pub const CD_MIN_PAIRS: usize = 30;

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

fn correlations(attrs: &[AttributeVector], k: usize) -> Vec<Vec<Option<f64>>> {
    let cols: Vec<Vec<f64>> = (0..k)
        .map(|a| attrs.iter().map(|v| v.get(a) as f64).collect())
        .collect();
    (0..k)
        .map(|a| (0..k).map(|b| pearson(&cols[a], &cols[b])).collect())
        .collect()
}

/// Correlation difference over ordered attribute pairs `a ≠ b`.
pub fn cd(original: &[AttributeVector], counterfactual: &[AttributeVector]) -> Result<f64> {
    let n = original.len();
    if n != counterfactual.len() {
        return Err(Error::Metric("cd needs a paired list".into()));
    }
    if n < CD_MIN_PAIRS {
        return Err(Error::Metric(format!("cd needs at least {CD_MIN_PAIRS} pairs, got {n}")));
    }
    let k = original[0].len();
    if k < 2 {
        return Err(Error::Metric("cd needs at least two attributes".into()));
    }
    let ro = correlations(original, k);
    let rc = correlations(counterfactual, k);
    let mut sum = 0.0;
    let mut constant = false;
    for a in 0..k {
        for b in 0..k {
            if a == b {
                continue;
            }
            match (ro[a][b], rc[a][b]) {
                (Some(x), Some(y)) => sum += (x - y).abs(),
                _ => constant = true,
            }
        }
    }
    if constant {
        log::warn!("cd: constant attribute column, affected pairs contribute 0");
    }
    Ok(sum / (k * (k - 1)) as f64)
}

/// Trapezoidal mean of samples on a uniform grid over `[0, 1]`.
pub fn trapezoid_mean(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return v.first().copied().unwrap_or(0.0);
    }
    let inner: f64 = v[1..n - 1].iter().sum();
    (0.5 * (v[0] + v[n - 1]) + inner) / (n - 1) as f64
}

/// Area between the target and source probability curves along
/// `(1 − λ)·x + λ·cf`.
pub fn cout_from_curves(p_target: &[f64], p_source: &[f64]) -> f64 {
    (trapezoid_mean(p_target) - trapezoid_mean(p_source)).clamp(-1.0, 1.0)
}

pub fn cout(
    x: &LatentImage<f32>,
    cf: &LatentImage<f32>,
    source: usize,
    target: usize,
    classifier: &dyn BlackBoxClassifier,
    n_steps: usize,
) -> Result<f64> {
    Ok(cout_batch(&[(x, cf, source, target)], classifier, n_steps)?[0])
}

/// COUT for many pairs; each path is one classifier call of `n_steps`
/// images.
pub fn cout_batch(
    pairs: &[(&LatentImage<f32>, &LatentImage<f32>, usize, usize)],
    classifier: &dyn BlackBoxClassifier,
    n_steps: usize,
) -> Result<Vec<f64>> {
    if n_steps < 2 {
        return Err(Error::Metric("cout needs at least 2 interpolation steps".into()));
    }
    let mut out = Vec::with_capacity(pairs.len());
    for &(x, cf, source, target) in pairs {
        let path: Vec<LatentImage<f32>> = (0..n_steps)
            .map(|s| {
                let l = s as f32 / (n_steps - 1) as f32;
                let data = x
                    .data()
                    .iter()
                    .zip(cf.data())
                    .map(|(a, b)| (1.0 - l) * a + l * b)
                    .collect();
                LatentImage::new(x.shape(), data)
            })
            .collect::<Result<_>>()?;
        let preds = classifier.predict(&LatentBatch::stack(&path)?)?;
        let pt: Vec<f64> = preds.iter().map(|p| p.probs[target]).collect();
        let ps: Vec<f64> = preds.iter().map(|p| p.probs[source]).collect();
        out.push(cout_from_curves(&pt, &ps));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    pub mean_calls: f64,
    pub mean_seconds: f64,
    pub flops_estimate: f64,
}

/// Denoiser calls are exact; FLOPs are calls times the per-image estimate.
pub fn efficiency(results: &[CounterfactualResult], flops_per_call: u64, wall_seconds: f64) -> Result<Efficiency> {
    if results.is_empty() {
        return Err(Error::Metric("efficiency of an empty result list".into()));
    }
    let n = results.len() as f64;
    let mean_calls = results.iter().map(|r| r.denoiser_calls as f64).sum::<f64>() / n;
    Ok(Efficiency {
        mean_calls,
        mean_seconds: wall_seconds / n,
        flops_estimate: mean_calls * flops_per_call as f64,
    })
}

/// Networks the suite measures with.
pub struct Evaluators<'a> {
    pub classifier: &'a dyn BlackBoxClassifier,
    /// Attribute oracle; its penultimate features are the FID encoder.
    pub oracle: &'a AttributeOracle,
    pub identity: &'a Embedder,
    pub encoder: &'a Embedder,
    pub cout_steps: usize,
    pub sfid_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sr: f64,
    /// `None` when fewer than two counterfactuals are valid.
    pub fid: Option<f64>,
    pub sfid: Option<f64>,
    pub fva: f64,
    pub fs: f64,
    pub s3: f64,
    pub mnac: f64,
    /// `None` below the minimum pair count.
    pub cd: Option<f64>,
    pub cout: f64,
    pub mean_denoiser_calls: f64,
    pub mean_classifier_queries: f64,
    pub flops_per_explanation: f64,
    /// Kept out of the serialized report so reruns compare byte for byte.
    #[serde(skip)]
    pub mean_wall_seconds: f64,
    pub n_images: usize,
    pub n_valid: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerImageMetrics {
    pub index: usize,
    pub flipped: bool,
    pub fs: f64,
    pub s3: f64,
    pub attributes_changed: usize,
    pub cout: f64,
    pub denoiser_calls: u64,
    pub classifier_queries: u64,
}

/// Scores a benchmark. Proximity, sparsity and COUT average over every
/// pair; FID and sFID use only flipped counterfactuals.
pub fn evaluate(
    results: &[CounterfactualResult],
    ev: &Evaluators<'_>,
    flops_per_call: u64,
    wall_seconds: f64,
) -> Result<(MetricReport, Vec<PerImageMetrics>)> {
    let n = results.len();
    let sr = success_rate(results)?;
    let x = LatentBatch::stack(&results.iter().map(|r| r.original.clone()).collect::<Vec<_>>())?;
    let cf = LatentBatch::stack(&results.iter().map(|r| r.explanation.clone()).collect::<Vec<_>>())?;
    let valid: Vec<bool> = results.iter().map(|r| r.flipped).collect();
    let n_valid = valid.iter().filter(|v| **v).count();

    let fs_v = fs(&x, &cf, ev.identity)?;
    let s3_v = fs(&x, &cf, ev.encoder)?;
    let ax = ev.oracle.predict(&x)?;
    let ac = ev.oracle.predict(&cf)?;
    let pairs: Vec<_> = results
        .iter()
        .map(|r| (&r.original, &r.explanation, r.source_class, r.target_class))
        .collect();
    let cout_v = cout_batch(&pairs, ev.classifier, ev.cout_steps)?;

    let fx = ev.oracle.model().features(&x)?;
    let fc = ev.oracle.model().features(&cf)?;
    let valid_cf: Vec<Vec<f64>> = fc.iter().zip(&valid).filter(|(_, v)| **v).map(|(f, _)| f.clone()).collect();
    let fid_v = if n_valid >= 2 { Some(fid_features(&fx, &valid_cf)?) } else { None };
    let sfid_v = sfid_features(&fx, &fc, &valid, ev.sfid_seed).ok();
    let cd_v = if n >= CD_MIN_PAIRS { Some(cd(&ax, &ac)?) } else { None };
    let eff = efficiency(results, flops_per_call, wall_seconds)?;

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let report = MetricReport {
        sr,
        fid: fid_v,
        sfid: sfid_v,
        fva: mean(&fs_v.iter().map(|s| fva_indicator(*s)).collect::<Vec<_>>()),
        fs: mean(&fs_v),
        s3: mean(&s3_v),
        mnac: mnac(&ax, &ac)?,
        cd: cd_v,
        cout: mean(&cout_v),
        mean_denoiser_calls: eff.mean_calls,
        mean_classifier_queries: results.iter().map(|r| r.classifier_queries as f64).sum::<f64>() / n as f64,
        flops_per_explanation: eff.flops_estimate,
        mean_wall_seconds: eff.mean_seconds,
        n_images: n,
        n_valid,
    };
    let rows = (0..n)
        .map(|i| PerImageMetrics {
            index: i,
            flipped: valid[i],
            fs: fs_v[i],
            s3: s3_v[i],
            attributes_changed: attributes_changed(&ax[i], &ac[i]),
            cout: cout_v[i],
            denoiser_calls: results[i].denoiser_calls,
            classifier_queries: results[i].classifier_queries,
        })
        .collect();
    Ok((report, rows))
}

impl MetricReport {
    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        let rows = [
            ("SR", format!("{:.4}", self.sr)),
            ("FID", opt(self.fid)),
            ("sFID", opt(self.sfid)),
            ("FVA", format!("{:.4}", self.fva)),
            ("FS", format!("{:.4}", self.fs)),
            ("S3", format!("{:.4}", self.s3)),
            ("MNAC", format!("{:.4}", self.mnac)),
            ("CD", opt(self.cd)),
            ("COUT", format!("{:.4}", self.cout)),
            ("denoiser calls", format!("{:.1}", self.mean_denoiser_calls)),
            ("classifier queries", format!("{:.2}", self.mean_classifier_queries)),
            ("FLOPs / explanation", format!("{:.3e}", self.flops_per_explanation)),
            ("seconds / explanation", format!("{:.3}", self.mean_wall_seconds)),
            ("images", self.n_images.to_string()),
            ("valid", self.n_valid.to_string()),
        ];
        let mut s = String::new();
        for (k, v) in rows {
            s.push_str(&format!("{k:<22}{v:>14}\n"));
        }
        s
    }
}

pub fn rows_to_csv(rows: &[PerImageMetrics]) -> String {
    let mut s = String::from("index,flipped,fs,s3,attributes_changed,cout,denoiser_calls,classifier_queries\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.index, r.flipped, r.fs, r.s3, r.attributes_changed, r.cout, r.denoiser_calls, r.classifier_queries
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect()
    }

    #[test]
    fn fid_of_a_set_with_itself_is_zero() {
        let a = gaussian_rows(200, 8, 1);
        assert!(fid_features(&a, &a).unwrap() < 1e-6);
    }

    #[test]
    fn fid_is_symmetric() {
        let a = gaussian_rows(150, 6, 2);
        let b: Vec<Vec<f64>> = gaussian_rows(120, 6, 3)
            .into_iter()
            .map(|r| r.into_iter().map(|v| 1.5 * v + 0.3).collect())
            .collect();
        let ab = fid_features(&a, &b).unwrap();
        let ba = fid_features(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-6, "{ab} vs {ba}");
    }

    #[test]
    fn fid_one_dimensional_shift() {
        // Exactly zero-mean, unit-variance samples and the same shifted by one.
        let a: Vec<Vec<f64>> = [-1.0, 1.0, -1.0, 1.0].iter().map(|v| vec![v * (3f64 / 4.0).sqrt()]).collect();
        let b: Vec<Vec<f64>> = a.iter().map(|r| vec![r[0] + 1.0]).collect();
        assert!((fid_features(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fid_rejects_tiny_sets() {
        assert!(fid_features(&[vec![1.0]], &[vec![1.0], vec![2.0]]).is_err());
    }

    #[test]
    fn sfid_of_identity_is_the_inter_half_fid() {
        let a = gaussian_rows(100, 4, 4);
        let keep = vec![true; 100];
        let s = sfid_features(&a, &a, &keep, 9).unwrap();
        let (h1, h2) = split_halves(100, 9);
        let pa: Vec<_> = h1.iter().map(|&i| a[i].clone()).collect();
        let pb: Vec<_> = h2.iter().map(|&i| a[i].clone()).collect();
        let f = 0.5 * (fid_features(&pa, &pb).unwrap() + fid_features(&pb, &pa).unwrap());
        assert!((s - f).abs() < 1e-9);
    }

    #[test]
    fn fva_threshold_is_strict() {
        assert_eq!(fva_indicator(0.5), 0.0);
        assert_eq!(fva_indicator(0.5000001), 1.0);
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(cosine(&[0.0, 0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mnac_examples() {
        let a: Vec<_> = (0..10).map(|i| AttributeVector::from_index(i, 6)).collect();
        assert_eq!(mnac(&a, &a).unwrap(), 0.0);
        let b: Vec<_> = a.iter().map(|v| v.with(0, 1 - v.get(0))).collect();
        assert_eq!(mnac(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn cd_examples() {
        let a: Vec<_> = (0..64).map(|i| AttributeVector::from_index(i, 6)).collect();
        assert_eq!(cd(&a, &a).unwrap(), 0.0);
        assert!(cd(&a[..10], &a[..10]).is_err());
        // Copy bit 0 into bit 1 in the counterfactuals: a correlation appears.
        let b: Vec<_> = a.iter().map(|v| v.with(1, v.get(0))).collect();
        assert!(cd(&a, &b).unwrap() > 0.0);
    }

    #[test]
    fn cout_curves() {
        let up: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
        let down: Vec<f64> = up.iter().map(|v| 1.0 - v).collect();
        assert!(cout_from_curves(&up, &down).abs() < 1e-12);
        assert_eq!(cout_from_curves(&[0.0; 5], &[1.0; 5]), -1.0);
        assert_eq!(trapezoid_mean(&[0.0, 1.0]), 0.5);
    }

    proptest::proptest! {
        #[test]
        fn cout_is_bounded(pt in proptest::collection::vec(0.0f64..=1.0, 2..20)) {
            let ps: Vec<f64> = pt.iter().map(|v| 1.0 - v).collect();
            let c = cout_from_curves(&pt, &ps);
            proptest::prop_assert!((-1.0..=1.0).contains(&c));
        }

        #[test]
        fn cd_ignores_pair_order(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<_> = (0..40).map(|_| AttributeVector::from_index(rng.random_range(0..64), 6)).collect();
            let b: Vec<_> = (0..40).map(|_| AttributeVector::from_index(rng.random_range(0..64), 6)).collect();
            let mut idx: Vec<usize> = (0..40).collect();
            idx.shuffle(&mut rng);
            let pa: Vec<_> = idx.iter().map(|&i| a[i].clone()).collect();
            let pb: Vec<_> = idx.iter().map(|&i| b[i].clone()).collect();
            proptest::prop_assert!((cd(&a, &b).unwrap() - cd(&pa, &pb).unwrap()).abs() < 1e-12);
        }
    }
}
