//! Uncertainty scoring and threshold machinery.
//!
//! The default score is the inner product of the two heads' softmax outputs
//! (high for confident, consistent predictions — likely known samples).
//! Alternative scores are oriented the same way: higher means more known.
//! The rejection threshold w₀ is estimated once, before adaptation, as the
//! mean score of synthetic "negative" samples built by 0.5/0.5 input mixup;
//! a slack band (w₀−ρ, w₀+ρ) is ignored during adaptation.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::TwoHeadModel;
use crate::rng::substream;
use crate::tensor::Tensor;
use rand::Rng;

/// Known/unknown/ignored partition thresholds: scores above w₀+ρ are treated
/// as known, below w₀−ρ as unknown, the band in between is ignored.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ThresholdBand {
    pub w0: f64,
    pub rho: f64,
}

impl ThresholdBand {
    /// Band over inner-product scores: requires 0 ≤ w₀ ≤ 1, ρ ≥ 0, and
    /// w₀ − ρ ≥ 0. w₀ = 0 switches rejection off (no score falls below 0).
    pub fn new(w0: f64, rho: f64) -> Result<Self> {
        if !w0.is_finite() || !rho.is_finite() || rho < 0.0 {
            return Err(Error::invalid_config(format!(
                "band needs finite w0 and rho >= 0 (got w0={w0}, rho={rho})"
            )));
        }
        if !(0.0..=1.0).contains(&w0) || w0 - rho < 0.0 {
            return Err(Error::invalid_config(format!(
                "band needs 0 <= w0 <= 1 and w0 - rho >= 0 (got w0={w0}, rho={rho})"
            )));
        }
        Ok(ThresholdBand { w0, rho })
    }

    /// Band for alternative score kinds whose range is not [0,1].
    pub fn unbounded(w0: f64, rho: f64) -> Result<Self> {
        if !w0.is_finite() || !rho.is_finite() || rho < 0.0 {
            return Err(Error::invalid_config(format!(
                "band needs finite w0 and rho >= 0 (got w0={w0}, rho={rho})"
            )));
        }
        Ok(ThresholdBand { w0, rho })
    }
}

/// Uncertainty score family. `InnerProduct` is the default; the others exist
/// for ablations and are negated where needed so higher always means more
/// known.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    InnerProduct,
    L2Distance,
    CosineDistance,
    MeanEntropy,
}

impl Default for ScoreKind {
    fn default() -> Self {
        ScoreKind::InnerProduct
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ScoreKind::InnerProduct => "inner_product",
            ScoreKind::L2Distance => "l2_distance",
            ScoreKind::CosineDistance => "cosine_distance",
            ScoreKind::MeanEntropy => "mean_entropy",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ScoreKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inner_product" => Ok(ScoreKind::InnerProduct),
            "l2_distance" => Ok(ScoreKind::L2Distance),
            "cosine_distance" => Ok(ScoreKind::CosineDistance),
            "mean_entropy" => Ok(ScoreKind::MeanEntropy),
            other => Err(Error::invalid_config(format!(
                "unknown score kind {other:?} (expected inner_product, l2_distance, cosine_distance, or mean_entropy)"
            ))),
        }
    }
}

/// Informative consistency score ⟨p¹, p²⟩ ∈ [0,1]; 1/K at double-uniform,
/// 1 at matched one-hots.
pub fn iscore(p1: &[f64], p2: &[f64]) -> f64 {
    debug_assert_eq!(p1.len(), p2.len());
    p1.iter().zip(p2).map(|(a, b)| a * b).sum()
}

/// Alternative uncertainty scores, oriented so that higher = more known.
pub fn alt_score(kind: ScoreKind, p1: &[f64], p2: &[f64]) -> f64 {
    match kind {
        ScoreKind::InnerProduct => iscore(p1, p2),
        ScoreKind::L2Distance => {
            let d2: f64 = p1.iter().zip(p2).map(|(a, b)| (a - b) * (a - b)).sum();
            -d2.sqrt()
        }
        ScoreKind::CosineDistance => {
            let dot = iscore(p1, p2);
            let n1: f64 = p1.iter().map(|v| v * v).sum::<f64>().sqrt();
            let n2: f64 = p2.iter().map(|v| v * v).sum::<f64>().sqrt();
            dot / (n1 * n2)
        }
        ScoreKind::MeanEntropy => {
            let h = |p: &[f64]| -> f64 {
                -p.iter()
                    .filter(|&&v| v > 0.0)
                    .map(|&v| v * v.ln())
                    .sum::<f64>()
            };
            -0.5 * (h(p1) + h(p2))
        }
    }
}

/// Score every row pair of two probability matrices.
pub fn score_rows(kind: ScoreKind, p1: &Tensor, p2: &Tensor) -> Vec<f64> {
    (0..p1.rows())
        .map(|r| alt_score(kind, p1.row(r), p2.row(r)))
        .collect()
}

/// Mean score of `pairs` random 0.5/0.5 input mixtures of distinct target
/// samples, scored through the model in eval mode. The result serves as w₀.
pub fn estimate_threshold(
    model: &TwoHeadModel,
    target_x: &Tensor,
    pairs: usize,
    seed: u64,
) -> Result<f64> {
    estimate_threshold_kind(ScoreKind::InnerProduct, model, target_x, pairs, seed)
}

pub fn estimate_threshold_kind(
    kind: ScoreKind,
    model: &TwoHeadModel,
    target_x: &Tensor,
    pairs: usize,
    seed: u64,
) -> Result<f64> {
    let n = target_x.rows();
    if n < 2 {
        return Err(Error::invalid_input(format!(
            "threshold estimation needs at least 2 target samples, got {n}"
        )));
    }
    if pairs == 0 {
        return Err(Error::invalid_input("threshold estimation needs pairs >= 1"));
    }
    let d = target_x.cols();
    let mut rng = substream(seed, "mixup");
    let mut mixed = vec![0.0; pairs * d];
    for p in 0..pairs {
        let i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let (ri, rj) = (target_x.row(i), target_x.row(j));
        for c in 0..d {
            mixed[p * d + c] = 0.5 * ri[c] + 0.5 * rj[c];
        }
    }
    let mx = Tensor::new(vec![pairs, d], mixed)?;
    let (p1, p2) = model.eval_probs(&mx)?;
    let scores = score_rows(kind, &p1, &p2);
    Ok(scores.iter().sum::<f64>() / pairs as f64)
}

/// Index partition by strict band inequalities; boundary ties fall into the
/// ignored band. The three sets are disjoint and exhaustive.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Partition {
    pub plus: Vec<usize>,
    pub minus: Vec<usize>,
    pub band: Vec<usize>,
}

pub fn partition(scores: &[f64], band: &ThresholdBand) -> Partition {
    let mut out = Partition::default();
    for (i, &s) in scores.iter().enumerate() {
        if s > band.w0 + band.rho {
            out.plus.push(i);
        } else if s < band.w0 - band.rho {
            out.minus.push(i);
        } else {
            out.band.push(i);
        }
    }
    out
}

/// ρ = ratio·w₀ (default ratio 0.1).
pub fn slack_from_threshold(w0: f64, ratio: f64) -> f64 {
    debug_assert!(w0 >= 0.0 && ratio >= 0.0);
    ratio * w0
}

/// Partition tag attached to each record of a score dump.
fn tag(p: &Partition, i: usize) -> &'static str {
    if p.plus.contains(&i) {
        "+"
    } else if p.minus.contains(&i) {
        "-"
    } else {
        "band"
    }
}

/// One record per target sample: index, score, partition tag. Tab-delimited
/// with a versioned header.
pub fn write_score_dump(
    path: &Path,
    scores: &[f64],
    band: &ThresholdBand,
) -> Result<()> {
    use std::fmt::Write as _;
    let p = partition(scores, band);
    let mut out = String::new();
    out.push_str("# shiftlab-scores v1\n");
    let _ = writeln!(out, "# w0\t{}", band.w0);
    let _ = writeln!(out, "# rho\t{}", band.rho);
    out.push_str("index\tscore\ttag\n");
    for (i, s) in scores.iter().enumerate() {
        let _ = writeln!(out, "{}\t{}\t{}", i, s, tag(&p, i));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}
