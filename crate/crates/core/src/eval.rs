//! Metrics and diagnostics: thresholded classification, per-class accuracy,
//! HOS, score histograms, and a numerical probe of the claim that features
//! with near-one-hot softmax outputs concentrate near well-trained source
//! features in cosine distance.

use std::path::Path;

use crate::autodiff::softmax_row;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::TwoHeadModel;
use crate::rng::substream;
use crate::scoring::{iscore, score_rows, ScoreKind};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

/// Decision for one sample: a source class or the virtual unknown class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Known(usize),
    Unknown,
}

/// Probability pairs → decision: reject as unknown when the consistency score
/// falls below w₀, otherwise take the argmax of the mean head probabilities
/// (ties to the lowest index). w₀ = 0 disables rejection.
pub fn decide(p1: &[f64], p2: &[f64], w0: f64) -> Decision {
    decide_kind(ScoreKind::InnerProduct, p1, p2, w0)
}

pub fn decide_kind(kind: ScoreKind, p1: &[f64], p2: &[f64], w0: f64) -> Decision {
    if crate::scoring::alt_score(kind, p1, p2) < w0 {
        return Decision::Unknown;
    }
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, (a, b)) in p1.iter().zip(p2).enumerate() {
        let m = 0.5 * (a + b);
        if m > best_v {
            best_v = m;
            best = i;
        }
    }
    Decision::Known(best)
}

/// Classify a single input through an eval-mode snapshot.
pub fn classify(model: &TwoHeadModel, x: &[f64], w0: f64) -> Result<Decision> {
    let t = Tensor::new(vec![1, x.len()], x.to_vec())?;
    let (p1, p2) = model.eval_probs(&t)?;
    Ok(decide(p1.row(0), p2.row(0), w0))
}

/// Harmonic mean of the known-class and unknown-class accuracies (percent).
/// Defined as 0 when both inputs are 0.
pub fn hos(acc_kn: f64, acc_ukn: f64) -> f64 {
    debug_assert!((0.0..=100.0).contains(&acc_kn) && (0.0..=100.0).contains(&acc_ukn));
    if acc_kn == 0.0 && acc_ukn == 0.0 {
        return 0.0;
    }
    2.0 * acc_kn * acc_ukn / (acc_kn + acc_ukn)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PerClassAccuracy {
    pub class: usize,
    pub accuracy: f64,
    pub count: usize,
}

/// Binned consistency scores, split by ground-truth known/unknown. Bins are
/// equal width over [0,1]; a score of exactly 1 lands in the last bin.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScoreHistogram {
    pub bins: usize,
    pub known: Vec<usize>,
    pub unknown: Vec<usize>,
}

impl ScoreHistogram {
    /// Two-column table (bin lower edge, count) for external plotting.
    pub fn save_group(&self, counts: &[usize], path: &Path) -> Result<()> {
        use std::fmt::Write as _;
        let mut out = String::from("bin_lo\tcount\n");
        for (i, c) in counts.iter().enumerate() {
            let _ = writeln!(out, "{}\t{}", i as f64 / self.bins as f64, c);
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Full evaluation artifact: accuracies, HOS, confusion counts, histogram,
/// and the configuration fingerprint of the run that produced it.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdaptationReport {
    pub schema_version: u32,
    /// Mean per-class accuracy over known classes (percent).
    pub acc_kn: f64,
    /// Accuracy on ground-truth unknown samples (percent); absent when the
    /// target contains no unknown-class samples (partial-set and closed-set).
    pub acc_ukn: Option<f64>,
    pub hos: Option<f64>,
    pub per_class: Vec<PerClassAccuracy>,
    /// (K+1)×(K+1) counts; row/column K is the unknown class.
    pub confusion: Vec<Vec<usize>>,
    pub histogram: ScoreHistogram,
    pub w0: f64,
    pub config_fingerprint: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<RunConfig>,
}

impl AdaptationReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::invalid_input(format!("report serialization: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::malformed(path.display().to_string(), e.to_string()))
    }
}

/// Evaluate a snapshot on a labeled target bundle. `known_set` is the set of
/// classes shared by both domains; target labels outside it count as
/// ground-truth unknown.
pub fn evaluate(
    model: &TwoHeadModel,
    target: &crate::datagen::DatasetBundle,
    w0: f64,
    known_set: &[usize],
    bins: usize,
    fingerprint: &str,
) -> Result<AdaptationReport> {
    if bins < 2 {
        return Err(Error::invalid_config("histogram needs bins >= 2"));
    }
    let k = model.k;
    let (p1, p2) = model.eval_probs(&target.x)?;
    let mut confusion = vec![vec![0usize; k + 1]; k + 1];
    let mut hist = ScoreHistogram {
        bins,
        known: vec![0; bins],
        unknown: vec![0; bins],
    };

    let mut known_any = false;
    let mut unknown_total = 0usize;
    let mut unknown_rejected = 0usize;
    let mut per_class_counts: Vec<(usize, usize)> = known_set.iter().map(|&c| (c, 0)).collect();
    let mut per_class_hits: Vec<usize> = vec![0; known_set.len()];

    for i in 0..target.n() {
        let truth = target.y[i];
        let is_known = known_set.contains(&truth);
        let decision = decide(p1.row(i), p2.row(i), w0);

        let s = iscore(p1.row(i), p2.row(i));
        let bin = ((s * bins as f64) as usize).min(bins - 1);
        if is_known {
            hist.known[bin] += 1;
        } else {
            hist.unknown[bin] += 1;
        }

        let row = if is_known { truth } else { k };
        let col = match decision {
            Decision::Known(c) => c,
            Decision::Unknown => k,
        };
        confusion[row][col] += 1;

        if is_known {
            known_any = true;
            let slot = known_set.iter().position(|&c| c == truth).unwrap();
            per_class_counts[slot].1 += 1;
            if decision == Decision::Known(truth) {
                per_class_hits[slot] += 1;
            }
        } else {
            unknown_total += 1;
            if decision == Decision::Unknown {
                unknown_rejected += 1;
            }
        }
    }

    if !known_any && unknown_total == 0 {
        return Err(Error::invalid_input(
            "evaluation needs at least one known or unknown sample",
        ));
    }

    let per_class: Vec<PerClassAccuracy> = per_class_counts
        .iter()
        .zip(&per_class_hits)
        .filter(|((_, n), _)| *n > 0)
        .map(|(&(class, n), &hits)| PerClassAccuracy {
            class,
            accuracy: 100.0 * hits as f64 / n as f64,
            count: n,
        })
        .collect();
    let acc_kn = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|p| p.accuracy).sum::<f64>() / per_class.len() as f64
    };
    let acc_ukn = if unknown_total > 0 {
        Some(100.0 * unknown_rejected as f64 / unknown_total as f64)
    } else {
        None
    };
    let hos_value = acc_ukn.map(|u| hos(acc_kn, u));

    Ok(AdaptationReport {
        schema_version: 1,
        acc_kn,
        acc_ukn,
        hos: hos_value,
        per_class,
        confusion,
        histogram: hist,
        w0,
        config_fingerprint: fingerprint.to_string(),
        config: None,
    })
}

/// Histogram of consistency scores through a snapshot, grouped by
/// ground-truth known/unknown membership.
pub fn score_histogram(
    model: &TwoHeadModel,
    target: &crate::datagen::DatasetBundle,
    known_set: &[usize],
    bins: usize,
) -> Result<ScoreHistogram> {
    if bins < 2 {
        return Err(Error::invalid_config("histogram needs bins >= 2"));
    }
    let (p1, p2) = model.eval_probs(&target.x)?;
    let scores = score_rows(ScoreKind::InnerProduct, &p1, &p2);
    let mut hist = ScoreHistogram {
        bins,
        known: vec![0; bins],
        unknown: vec![0; bins],
    };
    for (i, &s) in scores.iter().enumerate() {
        let bin = ((s * bins as f64) as usize).min(bins - 1);
        if known_set.contains(&target.y[i]) {
            hist.known[bin] += 1;
        } else {
            hist.unknown[bin] += 1;
        }
    }
    Ok(hist)
}

/// Mean consistency scores of ground-truth known and unknown target samples.
pub fn mean_scores_by_truth(
    model: &TwoHeadModel,
    target: &crate::datagen::DatasetBundle,
    known_set: &[usize],
) -> Result<(f64, f64)> {
    let (p1, p2) = model.eval_probs(&target.x)?;
    let mut known = (0.0, 0usize);
    let mut unknown = (0.0, 0usize);
    for i in 0..target.n() {
        let s = iscore(p1.row(i), p2.row(i));
        if known_set.contains(&target.y[i]) {
            known = (known.0 + s, known.1 + 1);
        } else {
            unknown = (unknown.0 + s, unknown.1 + 1);
        }
    }
    Ok((
        if known.1 > 0 { known.0 / known.1 as f64 } else { f64::NAN },
        if unknown.1 > 0 { unknown.0 / unknown.1 as f64 } else { f64::NAN },
    ))
}

// ── linear-classifier geometry probe ────────────────────────────────────

/// Softmax-output membership cutoff for the "well-trained" source feature set.
pub const WELL_TRAINED_NORM: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LemmaProbeRow {
    pub threshold: f64,
    /// Mean over kept probes of the min cosine distance to the well-trained
    /// source features; absent when no probe passed the threshold.
    pub mean_distance: Option<f64>,
    pub kept: usize,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LemmaProbeReport {
    pub rows: Vec<LemmaProbeRow>,
    /// Flagged when the top threshold kept no probes.
    pub top_threshold_empty: bool,
}

/// Non-negative cosine distance 1 − ⟨a,b⟩/(‖a‖‖b‖).
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

/// Min cosine distance from a point to a feature set (rows).
pub fn min_cosine_distance(z: &[f64], feats: &Tensor) -> f64 {
    (0..feats.rows())
        .map(|i| cosine_distance(z, feats.row(i)))
        .fold(f64::INFINITY, f64::min)
}

fn softmax_output_norm(w: &Tensor, z: &[f64]) -> f64 {
    let k = w.shape()[1];
    let mut logits = vec![0.0; k];
    for (j, l) in logits.iter_mut().enumerate() {
        for (c, &zc) in z.iter().enumerate() {
            *l += w.data()[c * k + j] * zc;
        }
    }
    let mut p = vec![0.0; k];
    softmax_row(&logits, &mut p);
    p.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// For each confidence threshold, sample random probe features, keep those
/// whose softmax-output 2-norm through `w` reaches the threshold, and report
/// the mean min-cosine-distance to the well-trained source features.
pub fn lemma_probe(
    w: &Tensor,
    source_feats: &Tensor,
    thresholds: &[f64],
    n_probes: usize,
    seed: u64,
) -> Result<LemmaProbeReport> {
    if w.shape().len() != 2 || source_feats.cols() != w.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "lemma_probe",
            lhs: source_feats.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    if thresholds.is_empty() || n_probes == 0 {
        return Err(Error::invalid_input("lemma_probe needs thresholds and probes"));
    }
    let d = w.shape()[0];
    let k = w.shape()[1];
    let top = thresholds.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    // well-trained subset of the source features
    let mut kept_rows = Vec::new();
    let mut class_covered = vec![false; k];
    for i in 0..source_feats.rows() {
        let z = source_feats.row(i);
        let norm = softmax_output_norm(w, z);
        if norm >= WELL_TRAINED_NORM {
            kept_rows.push(i);
        }
        if norm >= top {
            let mut logits = vec![0.0; k];
            for (j, l) in logits.iter_mut().enumerate() {
                for (c, &zc) in z.iter().enumerate() {
                    *l += w.data()[c * k + j] * zc;
                }
            }
            let argmax = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            class_covered[argmax] = true;
        }
    }
    if let Some(c) = class_covered.iter().position(|&v| !v) {
        return Err(Error::invalid_input(format!(
            "source features contain no class-{c} point with softmax norm >= {top}"
        )));
    }
    let well_trained = source_feats.select_rows(&kept_rows)?;

    // random probes with mixed magnitudes so every confidence level occurs
    let mut rng = substream(seed, "lemma-probes");
    let mut probes = Vec::with_capacity(n_probes);
    for _ in 0..n_probes {
        let dir: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let radius: f64 = rng.gen_range(0.0..10.0);
        let z: Vec<f64> = dir.iter().map(|v| radius * v / norm).collect();
        let conf = softmax_output_norm(w, &z);
        probes.push((z, conf));
    }

    let mut rows = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let kept: Vec<&(Vec<f64>, f64)> = probes.iter().filter(|(_, c)| *c >= t).collect();
        let mean = if kept.is_empty() {
            None
        } else {
            Some(
                kept.iter()
                    .map(|(z, _)| min_cosine_distance(z, &well_trained))
                    .sum::<f64>()
                    / kept.len() as f64,
            )
        };
        rows.push(LemmaProbeRow {
            threshold: t,
            mean_distance: mean,
            kept: kept.len(),
        });
    }
    let top_threshold_empty = rows
        .iter()
        .filter(|r| r.threshold == top)
        .all(|r| r.kept == 0);
    Ok(LemmaProbeReport {
        rows,
        top_threshold_empty,
    })
}

/// Seeded default probe setup: a 4-dimensional feature space, three classes
/// with well-separated weight columns, and dense per-class source features of
/// mixed confidence.
pub fn lemma_probe_default(seed: u64) -> Result<LemmaProbeReport> {
    let (d, k) = (4, 3);
    let mut rng = substream(seed, "lemma-setup");
    // well-separated class directions: random orthonormal-ish columns, scaled
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < k {
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let v: Vec<f64> = v.iter().map(|x| x / norm).collect();
        if cols
            .iter()
            .all(|c| c.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>().abs() < 0.5)
        {
            cols.push(v);
        }
    }
    let mut w = vec![0.0; d * k];
    for (j, col) in cols.iter().enumerate() {
        for (c, &v) in col.iter().enumerate() {
            w[c * k + j] = 2.0 * v;
        }
    }
    let w = Tensor::new(vec![d, k], w)?;

    let per_class = 500;
    let mut feats = Vec::with_capacity(k * per_class * d);
    for col in &cols {
        for _ in 0..per_class {
            let scale: f64 = rng.gen_range(2.0..12.0);
            for &v in col {
                feats.push(scale * (v + 0.35 * rng.sample::<f64, _>(StandardNormal)));
            }
        }
    }
    let source_feats = Tensor::new(vec![k * per_class, d], feats)?;
    lemma_probe(&w, &source_feats, &[0.7, 0.8, 0.9, 0.95, 0.99], 2000, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{Domain, DatasetBundle};

    #[test]
    fn decide_examples() {
        let k = 3;
        let u = vec![1.0 / k as f64; k];
        // uniform outputs score 1/K < w0
        assert_eq!(decide(&u, &u, 0.5), Decision::Unknown);

        let one_hot = vec![0.0, 1.0, 0.0];
        assert_eq!(decide(&one_hot, &one_hot, 0.9), Decision::Known(1));

        let p1 = vec![0.6, 0.4];
        let p2 = vec![0.7, 0.3];
        // iscore = 0.42 + 0.12 = 0.54 >= 0.5
        assert_eq!(decide(&p1, &p2, 0.5), Decision::Known(0));
        assert_eq!(decide(&p1, &p2, 0.55), Decision::Unknown);
    }

    #[test]
    fn decide_is_head_symmetric() {
        let p1 = vec![0.2, 0.5, 0.3];
        let p2 = vec![0.4, 0.4, 0.2];
        assert_eq!(decide(&p1, &p2, 0.3), decide(&p2, &p1, 0.3));
    }

    #[test]
    fn hos_examples() {
        for x in [0.0, 37.5, 100.0] {
            assert!((hos(x, x) - x).abs() < 1e-12);
        }
        assert!((hos(80.0, 90.0) - 84.70588235294117).abs() < 1e-9);
        assert_eq!(hos(100.0, 0.0), 0.0);
        assert_eq!(hos(0.0, 0.0), 0.0);
    }

    proptest::proptest! {
        #[test]
        fn hos_symmetric_and_bounded(a in 0.0_f64..100.0, b in 0.0_f64..100.0) {
            proptest::prop_assert!((hos(a, b) - hos(b, a)).abs() < 1e-9);
            proptest::prop_assert!(hos(a, b) <= 2.0 * a.min(b) + 1e-9);
        }
    }

    fn toy_bundle() -> DatasetBundle {
        // 2 known classes (0, 1) and one unknown class (3) whose points sit
        // on the head decision boundary, where confidence stays low
        DatasetBundle {
            x: Tensor::from_rows(&[
                vec![1.0, 0.0],
                vec![1.0, 0.1],
                vec![0.0, 1.0],
                vec![0.1, 1.0],
                vec![-1.0, -1.0],
                vec![-1.2, -1.2],
            ])
            .unwrap(),
            y: vec![0, 0, 1, 1, 3, 3],
            label_set: vec![0, 1, 3],
            domain: Domain::Target,
        }
    }

    fn identity_model(k: usize) -> TwoHeadModel {
        let mut m = TwoHeadModel::new(2, &[], 2, k, 0).unwrap();
        m.layers[0].weight = Tensor::eye(2).with_grad();
        m.layers[0].bias = Tensor::zeros(vec![1, 2]).with_grad();
        m.bn.running_mean = vec![0.0, 0.0];
        m.bn.running_var = vec![1.0 - m.bn.eps, 1.0 - m.bn.eps];
        m
    }

    #[test]
    fn evaluate_with_confident_scaled_heads() {
        // scaled identity heads make class-aligned inputs confident and
        // consistent; the off-cluster unknown points stay uncertain
        let mut m = identity_model(2);
        let scale = 6.0;
        m.w1 = Tensor::from_rows(&[vec![scale, 0.0], vec![0.0, scale]]).unwrap().with_grad();
        m.w2 = m.w1.clone();
        // unknown points land at uniform output (iscore exactly 1/K = 0.5),
        // so any threshold strictly above 0.5 rejects them
        let bundle = toy_bundle();
        let report = evaluate(&m, &bundle, 0.6, &[0, 1], 10, "fp").unwrap();
        assert_eq!(report.acc_kn, 100.0);
        assert_eq!(report.acc_ukn, Some(100.0));
        assert_eq!(report.hos, Some(100.0));
        // confusion marginals match the per-class counts
        assert_eq!(report.confusion[0][0], 2);
        assert_eq!(report.confusion[1][1], 2);
        assert_eq!(report.confusion[2][2], 2);
        let total: usize = report.confusion.iter().flatten().sum();
        assert_eq!(total, bundle.n());
        let known_total: usize = report.histogram.known.iter().sum();
        let unknown_total: usize = report.histogram.unknown.iter().sum();
        assert_eq!(known_total, 4);
        assert_eq!(unknown_total, 2);
    }

    #[test]
    fn evaluate_always_unknown_gives_zero_hos() {
        // w0 above the max possible score rejects everything
        let mut m = identity_model(2);
        m.w1 = Tensor::zeros(vec![2, 2]).with_grad();
        m.w2 = Tensor::zeros(vec![2, 2]).with_grad();
        let report = evaluate(&m, &toy_bundle(), 1.0, &[0, 1], 10, "fp").unwrap();
        assert_eq!(report.acc_kn, 0.0);
        assert_eq!(report.acc_ukn, Some(100.0));
        assert_eq!(report.hos, Some(0.0));
    }

    #[test]
    fn evaluate_per_class_mean_is_unweighted() {
        // choose w0 = 0 (never reject); heads always predict class 0, so
        // class 0 scores 100, class 1 scores 0, and the unknown class is
        // never rejected
        let mut m = identity_model(2);
        m.w1 = Tensor::from_rows(&[vec![5.0, 0.0], vec![5.0, 0.0]]).unwrap().with_grad();
        m.w2 = m.w1.clone();
        let report = evaluate(&m, &toy_bundle(), 0.0, &[0, 1], 10, "fp").unwrap();
        assert_eq!(report.acc_kn, 50.0);
        assert_eq!(report.acc_ukn, Some(0.0));
        assert_eq!(report.hos, Some(0.0));
    }

    #[test]
    fn report_round_trips_through_json() {
        let m = identity_model(2);
        let report = evaluate(&m, &toy_bundle(), 0.4, &[0, 1], 5, "fingerprint").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        report.save(&path).unwrap();
        let loaded = AdaptationReport::load(&path).unwrap();
        assert_eq!(report, loaded);
    }

    #[test]
    fn histogram_conserves_counts_and_handles_score_one() {
        let mut m = identity_model(2);
        let scale = 40.0; // saturates the softmax: iscore rounds to 1.0
        m.w1 = Tensor::from_rows(&[vec![scale, 0.0], vec![0.0, scale]]).unwrap().with_grad();
        m.w2 = m.w1.clone();
        let bundle = toy_bundle();
        let h = score_histogram(&m, &bundle, &[0, 1], 4).unwrap();
        assert_eq!(h.known.iter().sum::<usize>(), 4);
        assert_eq!(h.unknown.iter().sum::<usize>(), 2);
    }

    #[test]
    fn histogram_of_identical_scores_fills_one_bin() {
        let mut m = identity_model(2);
        m.w1 = Tensor::zeros(vec![2, 2]).with_grad();
        m.w2 = Tensor::zeros(vec![2, 2]).with_grad();
        let h = score_histogram(&m, &toy_bundle(), &[0, 1], 8).unwrap();
        let nonzero_known = h.known.iter().filter(|&&c| c > 0).count();
        let nonzero_unknown = h.unknown.iter().filter(|&&c| c > 0).count();
        assert_eq!(nonzero_known, 1);
        assert_eq!(nonzero_unknown, 1);
    }

    #[test]
    fn cosine_distance_basics() {
        let a = vec![1.0, 0.0];
        assert!(cosine_distance(&a, &a).abs() < 1e-15);
        let b = vec![0.0, 2.0];
        assert!((cosine_distance(&a, &b) - 1.0).abs() < 1e-15);
        // self-membership gives zero min distance
        let feats = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(min_cosine_distance(&a, &feats).abs() < 1e-15);
    }

    #[test]
    fn lemma_probe_default_is_monotone_and_tight_at_top() {
        let report = lemma_probe_default(0).unwrap();
        assert!(!report.top_threshold_empty);
        let means: Vec<f64> = report
            .rows
            .iter()
            .map(|r| r.mean_distance.expect("all thresholds keep probes"))
            .collect();
        for w in means.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-12,
                "mean distances must be non-increasing: {means:?}"
            );
        }
        assert!(
            means.last().unwrap() < &0.05,
            "top threshold mean {means:?}"
        );
    }

    #[test]
    fn lemma_probe_rejects_uncovered_classes() {
        // features clustered on one class direction only
        let w = Tensor::from_rows(&[vec![3.0, 0.0, 0.0], vec![0.0, 3.0, 0.0]]).unwrap();
        let feats = Tensor::from_rows(&[vec![9.0, 0.0], vec![8.0, 0.1]]).unwrap();
        let err = lemma_probe(&w, &feats, &[0.7, 0.99], 100, 0).unwrap_err();
        assert!(err.to_string().contains("no class-"), "{err}");
    }
}
