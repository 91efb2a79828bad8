//! Reproducible synthetic datasets with domain shift and category shift.
//!
//! Class prototypes sit evenly spaced on a circle of radius `class_sep`
//! embedded in the first two feature dimensions (remaining dimensions are
//! pure noise); the rotation offset of the circle is drawn from the seed.
//! Source samples are prototype + Gaussian noise. Target samples come from
//! the same prototypes pushed through an affine shift (rotation in the
//! prototype plane, per-axis scale, translation), restricted to the target
//! label set. Target-private "unknown" classes use prototypes at further
//! angles on the same circle, so rejection has to come from the score, not
//! from geometry alone.
//!
//! Global class ids: shared classes first, then source-private, then
//! target-private — source labels are therefore contiguous in 0..K.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// Class-overlap structure between the source and target label sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    /// |C_s ∩ C_t|
    pub shared: usize,
    /// |C_s − C_t|
    pub src_private: usize,
    /// |C_t − C_s|
    pub tgt_private: usize,
}

impl SplitSpec {
    pub fn new(shared: usize, src_private: usize, tgt_private: usize) -> Result<Self> {
        let s = SplitSpec {
            shared,
            src_private,
            tgt_private,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shared == 0 {
            return Err(Error::invalid_config(
                "split needs at least one shared class",
            ));
        }
        Ok(())
    }

    /// Number of source classes K.
    pub fn k(&self) -> usize {
        self.shared + self.src_private
    }

    /// Total distinct classes across both domains.
    pub fn total_classes(&self) -> usize {
        self.shared + self.src_private + self.tgt_private
    }

    pub fn source_labels(&self) -> Vec<usize> {
        (0..self.k()).collect()
    }

    pub fn target_labels(&self) -> Vec<usize> {
        let mut l: Vec<usize> = (0..self.shared).collect();
        l.extend(self.k()..self.total_classes());
        l
    }
}

/// Covariate-shift parameters plus base sampling geometry.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ShiftSpec {
    /// Rotation (radians) applied to prototypes in the first two dimensions.
    pub rotation: f64,
    /// Per-axis translation of prototypes; shorter vectors are zero-padded.
    pub translation: Vec<f64>,
    /// Per-axis scale factors; shorter vectors are one-padded.
    pub scale: Vec<f64>,
    pub noise_sigma: f64,
    pub class_sep: f64,
    /// Feature dimension D.
    pub dims: usize,
    /// Samples per class per domain.
    pub per_class_n: usize,
}

impl Default for ShiftSpec {
    /// The reference desk-scale shift used throughout the test suite.
    fn default() -> Self {
        ShiftSpec {
            rotation: std::f64::consts::PI / 8.0,
            translation: vec![0.5, 0.5],
            scale: vec![],
            noise_sigma: 0.35,
            class_sep: 2.0,
            dims: 8,
            per_class_n: 100,
        }
    }
}

impl ShiftSpec {
    pub fn identity(dims: usize, per_class_n: usize) -> Self {
        ShiftSpec {
            rotation: 0.0,
            translation: vec![],
            scale: vec![],
            noise_sigma: 0.35,
            class_sep: 2.0,
            dims,
            per_class_n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims < 2 {
            return Err(Error::invalid_config("shift needs dims >= 2"));
        }
        if self.per_class_n == 0 {
            return Err(Error::invalid_config("per_class_n must be positive"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::invalid_config("noise_sigma must be >= 0"));
        }
        if self.class_sep <= 0.0 {
            return Err(Error::invalid_config("class_sep must be > 0"));
        }
        if self.translation.len() > self.dims || self.scale.len() > self.dims {
            return Err(Error::invalid_config(
                "translation/scale longer than feature dimension",
            ));
        }
        Ok(())
    }

    /// Apply rotation, then per-axis scale, then translation to a point.
    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        let mut out = p.to_vec();
        let (c, s) = (self.rotation.cos(), self.rotation.sin());
        let (x, y) = (out[0], out[1]);
        out[0] = c * x - s * y;
        out[1] = s * x + c * y;
        for (i, &f) in self.scale.iter().enumerate() {
            out[i] *= f;
        }
        for (i, &t) in self.translation.iter().enumerate() {
            out[i] += t;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

/// Feature matrix with ground-truth labels and the declared label set of the
/// domain. Training code must only see `x` for target bundles; labels stay
/// for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub label_set: Vec<usize>,
    pub domain: Domain,
}

impl DatasetBundle {
    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// The unlabeled view handed to adaptation code.
    pub fn unlabeled(&self) -> &Tensor {
        &self.x
    }

    fn validate(&self) -> Result<()> {
        if self.y.len() != self.x.rows() {
            return Err(Error::invalid_input(format!(
                "bundle has {} rows but {} labels",
                self.x.rows(),
                self.y.len()
            )));
        }
        for &y in &self.y {
            if !self.label_set.contains(&y) {
                return Err(Error::invalid_input(format!(
                    "label {y} outside declared label set {:?}",
                    self.label_set
                )));
            }
        }
        Ok(())
    }
}

/// Prototype positions for every global class, deterministic from the seed.
fn prototypes(split: &SplitSpec, shift: &ShiftSpec, seed: u64) -> Vec<Vec<f64>> {
    let total = split.total_classes();
    let mut rng = substream(seed, "prototypes");
    let offset: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (0..total)
        .map(|c| {
            let angle = offset + std::f64::consts::TAU * c as f64 / total as f64;
            let mut p = vec![0.0; shift.dims];
            p[0] = shift.class_sep * angle.cos();
            p[1] = shift.class_sep * angle.sin();
            p
        })
        .collect()
}

fn sample_class(
    proto: &[f64],
    n: usize,
    sigma: f64,
    rng: &mut ChaCha12Rng,
    x: &mut Vec<f64>,
) {
    for _ in 0..n {
        for &p in proto {
            x.push(p + sigma * rng.sample::<f64, _>(StandardNormal));
        }
    }
}

/// Generate a (source, target) pair. Deterministic: a fixed seed yields
/// byte-identical datasets.
pub fn generate(
    split: &SplitSpec,
    shift: &ShiftSpec,
    seed: u64,
) -> Result<(DatasetBundle, DatasetBundle)> {
    split.validate()?;
    shift.validate()?;
    let protos = prototypes(split, shift, seed);
    let n = shift.per_class_n;

    let mut src_rng = substream(seed, "source-noise");
    let mut x = Vec::with_capacity(split.k() * n * shift.dims);
    let mut y = Vec::with_capacity(split.k() * n);
    for c in split.source_labels() {
        sample_class(&protos[c], n, shift.noise_sigma, &mut src_rng, &mut x);
        y.extend(std::iter::repeat(c).take(n));
    }
    let source = DatasetBundle {
        x: Tensor::new(vec![y.len(), shift.dims], x)?,
        y,
        label_set: split.source_labels(),
        domain: Domain::Source,
    };

    let mut tgt_rng = substream(seed, "target-noise");
    let mut x = Vec::new();
    let mut y = Vec::new();
    for c in split.target_labels() {
        let moved = shift.apply(&protos[c]);
        sample_class(&moved, n, shift.noise_sigma, &mut tgt_rng, &mut x);
        y.extend(std::iter::repeat(c).take(n));
    }
    let target = DatasetBundle {
        x: Tensor::new(vec![y.len(), shift.dims], x)?,
        y,
        label_set: split.target_labels(),
        domain: Domain::Target,
    };
    Ok((source, target))
}

// ── dataset files ───────────────────────────────────────────────────────
//
// Tab-delimited text, shortest round-trip floats:
//
//   shiftlab-dataset v1
//   D	<dims>
//   N	<rows>
//   domain	<source|target>
//   labels	<comma separated label set>
//   <D feature values>	<label>     (N rows)

pub fn save_dataset(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    bundle.validate()?;
    let mut out = String::new();
    out.push_str("shiftlab-dataset v1\n");
    let _ = writeln!(out, "D\t{}", bundle.dim());
    let _ = writeln!(out, "N\t{}", bundle.n());
    let _ = writeln!(out, "domain\t{}", bundle.domain);
    let labels: Vec<String> = bundle.label_set.iter().map(|l| l.to_string()).collect();
    let _ = writeln!(out, "labels\t{}", labels.join(","));
    for (i, &label) in bundle.y.iter().enumerate() {
        for v in bundle.x.row(i) {
            let _ = write!(out, "{v}\t");
        }
        let _ = writeln!(out, "{label}");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_dataset(path: &Path) -> Result<DatasetBundle> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let p = path.display().to_string();
    let bad = |reason: String| Error::malformed(p.clone(), reason);
    let mut lines = text.lines();

    if lines.next() != Some("shiftlab-dataset v1") {
        return Err(bad("missing or unsupported header".into()));
    }
    let mut field = |name: &str| -> Result<String> {
        let line = lines
            .next()
            .ok_or_else(|| bad(format!("truncated header: missing {name}")))?;
        let (k, v) = line
            .split_once('\t')
            .ok_or_else(|| bad(format!("bad header line {line:?}")))?;
        if k != name {
            return Err(bad(format!("expected header field {name}, got {k}")));
        }
        Ok(v.to_string())
    };
    let d: usize = field("D")?
        .parse()
        .map_err(|_| bad("bad D field".into()))?;
    let n: usize = field("N")?
        .parse()
        .map_err(|_| bad("bad N field".into()))?;
    let domain = match field("domain")?.as_str() {
        "source" => Domain::Source,
        "target" => Domain::Target,
        other => return Err(bad(format!("unknown domain {other:?}"))),
    };
    let label_set: Vec<usize> = field("labels")?
        .split(',')
        .map(|t| t.parse().map_err(|_| bad(format!("bad label {t:?}"))))
        .collect::<Result<_>>()?;

    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| bad(format!("truncated data: expected {n} rows, got {i}")))?;
        let tokens: Vec<&str> = line.split('\t').collect();
        if tokens.len() != d + 1 {
            return Err(bad(format!(
                "row {i}: expected {} fields, got {}",
                d + 1,
                tokens.len()
            )));
        }
        for t in &tokens[..d] {
            let v: f64 = t.parse().map_err(|_| bad(format!("row {i}: bad float {t:?}")))?;
            if !v.is_finite() {
                return Err(bad(format!("row {i}: non-finite feature")));
            }
            x.push(v);
        }
        let label: usize = tokens[d]
            .parse()
            .map_err(|_| bad(format!("row {i}: bad label {:?}", tokens[d])))?;
        if !label_set.contains(&label) {
            return Err(bad(format!(
                "row {i}: label {label} outside declared label set {label_set:?}"
            )));
        }
        y.push(label);
    }

    Ok(DatasetBundle {
        x: Tensor::new(vec![n, d], x)?,
        y,
        label_set,
        domain,
    })
}

// ── batching ────────────────────────────────────────────────────────────

/// Endless class-balanced batch stream over a labeled bundle: per-batch class
/// counts differ by at most one, classes are cycled with per-class shuffles,
/// and which classes receive the remainder rotates batch by batch.
pub struct BalancedBatches {
    per_class: Vec<Vec<usize>>, // sample indexes grouped by class
    cursors: Vec<usize>,
    rng: ChaCha12Rng,
    batch_size: usize,
    rotation: usize,
}

/// Class-balanced sampler for source training.
pub fn class_balanced_batches(
    bundle: &DatasetBundle,
    batch_size: usize,
    seed: u64,
) -> Result<BalancedBatches> {
    if batch_size == 0 {
        return Err(Error::invalid_config("batch_size must be positive"));
    }
    let mut per_class: Vec<Vec<usize>> = bundle
        .label_set
        .iter()
        .map(|&c| {
            bundle
                .y
                .iter()
                .enumerate()
                .filter(|(_, &y)| y == c)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    if let Some(pos) = per_class.iter().position(Vec::is_empty) {
        return Err(Error::invalid_input(format!(
            "class {} has no samples",
            bundle.label_set[pos]
        )));
    }
    let mut rng = substream(seed, "batching-source");
    for c in per_class.iter_mut() {
        c.shuffle(&mut rng);
    }
    let cursors = vec![0; per_class.len()];
    Ok(BalancedBatches {
        per_class,
        cursors,
        rng,
        batch_size,
        rotation: 0,
    })
}

impl Iterator for BalancedBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let k = self.per_class.len();
        let base = self.batch_size / k;
        let rem = self.batch_size % k;
        let mut batch = Vec::with_capacity(self.batch_size);
        for c in 0..k {
            let extra = ((c + k - self.rotation % k) % k < rem) as usize;
            for _ in 0..base + extra {
                if self.cursors[c] == self.per_class[c].len() {
                    self.per_class[c].shuffle(&mut self.rng);
                    self.cursors[c] = 0;
                }
                batch.push(self.per_class[c][self.cursors[c]]);
                self.cursors[c] += 1;
            }
        }
        self.rotation += 1;
        Some(batch)
    }
}

/// Endless uniform batch stream (epoch shuffles, no class balancing); an
/// epoch whose remaining tail would be a single sample reshuffles early so
/// every yielded batch has at least two samples whenever n >= 2.
pub struct UniformBatches {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha12Rng,
    batch_size: usize,
}

pub fn uniform_batches(n: usize, batch_size: usize, seed: u64) -> Result<UniformBatches> {
    if n == 0 {
        return Err(Error::EmptyBatch("uniform_batches"));
    }
    if batch_size == 0 {
        return Err(Error::invalid_config("batch_size must be positive"));
    }
    let mut rng = substream(seed, "batching-target");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    Ok(UniformBatches {
        order,
        cursor: 0,
        rng,
        batch_size,
    })
}

impl Iterator for UniformBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let n = self.order.len();
        if self.cursor >= n || n - self.cursor < 2.min(n) {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(n);
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(batch)
    }
}
