//! End-to-end orchestration: generate → train source → estimate threshold →
//! adapt → evaluate, per seed, with stable output file names under a run
//! directory. The CLI is a thin wrapper over these functions.

use std::path::Path;

use crate::config::RunConfig;
use crate::datagen::{generate, DatasetBundle};
use crate::error::{Error, Result};
use crate::eval::{evaluate, mean_scores_by_truth, AdaptationReport};
use crate::model::{save_checkpoint, TwoHeadModel};
use crate::scoring::{
    estimate_threshold_kind, score_rows, slack_from_threshold, write_score_dump, ScoreKind,
    ThresholdBand,
};
use crate::tensor::Tensor;
use crate::train::{adapt_target, train_source, AdaptOptions, OptimConfig, TrainLog};

/// Stable artifact names for one seed of a run.
pub fn file_names(seed: u64) -> FileNames {
    FileNames {
        source_data: format!("source_seed{seed}.tsv"),
        target_data: format!("target_seed{seed}.tsv"),
        source_ckpt: format!("source_model_seed{seed}.ckpt"),
        source_log: format!("train_source_seed{seed}.tsv"),
        adapted_ckpt: format!("adapted_model_seed{seed}.ckpt"),
        adapt_log: format!("adapt_log_seed{seed}.tsv"),
        scores: format!("scores_seed{seed}.tsv"),
        band: format!("band_seed{seed}.tsv"),
        report: format!("report_seed{seed}.json"),
        hist_known: format!("hist_known_seed{seed}.tsv"),
        hist_unknown: format!("hist_unknown_seed{seed}.tsv"),
    }
}

pub struct FileNames {
    pub source_data: String,
    pub target_data: String,
    pub source_ckpt: String,
    pub source_log: String,
    pub adapted_ckpt: String,
    pub adapt_log: String,
    pub scores: String,
    pub band: String,
    pub report: String,
    pub hist_known: String,
    pub hist_unknown: String,
}

/// Everything produced by one seeded end-to-end run.
pub struct SeedOutcome {
    pub seed: u64,
    pub band: ThresholdBand,
    pub source_model: TwoHeadModel,
    pub adapted_model: TwoHeadModel,
    pub source_log: TrainLog,
    pub adapt_log: TrainLog,
    /// Evaluation of the source model (no adaptation), same threshold.
    pub report_before: AdaptationReport,
    pub report_after: AdaptationReport,
    /// Mean iscore of ground-truth known/unknown target samples through the
    /// source model and the adapted model.
    pub mean_scores_before: (f64, f64),
    pub mean_scores_after: (f64, f64),
    pub source: DatasetBundle,
    pub target: DatasetBundle,
}

impl SeedOutcome {
    /// HOS when unknown samples exist, otherwise the known-class accuracy
    /// (the partial-set and closed-set metric).
    pub fn metric_after(&self) -> f64 {
        self.report_after.hos.unwrap_or(self.report_after.acc_kn)
    }

    pub fn metric_before(&self) -> f64 {
        self.report_before.hos.unwrap_or(self.report_before.acc_kn)
    }
}

fn optim_for(cfg: &RunConfig, iters: usize, seed: u64) -> OptimConfig {
    OptimConfig {
        lr0: cfg.optim.lr0,
        momentum: cfg.optim.momentum,
        weight_decay: cfg.optim.weight_decay,
        max_iters: iters,
        batch_size: cfg.optim.batch_size,
        new_layer_lr_mult: cfg.optim.new_layer_lr_mult,
        seed,
    }
}

/// Build the model for a config and seed.
pub fn init_model(cfg: &RunConfig, seed: u64) -> Result<TwoHeadModel> {
    TwoHeadModel::new(cfg.shift.dims, &cfg.hidden, cfg.bottleneck, cfg.k(), seed)
}

/// Resolve the threshold band for a trained source model: fixed overrides
/// win, partial/closed scenarios force w₀ = 0, otherwise mixup estimation.
pub fn resolve_band(
    cfg: &RunConfig,
    model: &TwoHeadModel,
    target_x: &Tensor,
    seed: u64,
) -> Result<ThresholdBand> {
    if !cfg.scenario.rejection_enabled() {
        return ThresholdBand::new(0.0, 0.0);
    }
    let w0 = match cfg.band.fixed_w0 {
        Some(w0) => w0,
        None => {
            let pairs = cfg.band.mixup_pairs.unwrap_or(target_x.rows());
            estimate_threshold_kind(cfg.band.score, model, target_x, pairs, seed)?
        }
    };
    let rho = match cfg.band.fixed_rho {
        Some(rho) => rho,
        None => slack_from_threshold(w0.max(0.0), cfg.band.rho_ratio),
    };
    match cfg.band.score {
        ScoreKind::InnerProduct => ThresholdBand::new(w0, rho),
        _ => ThresholdBand::unbounded(w0, rho),
    }
}

/// Known classes (shared across domains) of a config.
pub fn known_set(cfg: &RunConfig) -> Vec<usize> {
    (0..cfg.split.shared).collect()
}

/// One full seeded run. When `out` is given, every artifact is also written
/// under it with the stable names from [`file_names`].
pub fn run_seed(cfg: &RunConfig, seed: u64, out: Option<&Path>) -> Result<SeedOutcome> {
    cfg.validate()?;
    let names = file_names(seed);
    let fingerprint = cfg.fingerprint();
    let known = known_set(cfg);

    let (source, target) = generate(&cfg.split, &cfg.shift, seed)?;
    let mut model = init_model(cfg, seed)?;
    let source_log = train_source(
        &mut model,
        &source,
        &cfg.loss,
        &optim_for(cfg, cfg.source_iters, seed),
    )?;
    let source_model = model.clone();

    let band = resolve_band(cfg, &source_model, &target.x, seed)?;
    let mut report_before = evaluate(
        &source_model,
        &target,
        band.w0,
        &known,
        cfg.histogram_bins,
        &fingerprint,
    )?;
    report_before.config = Some(cfg.clone());
    let mean_scores_before = mean_scores_by_truth(&source_model, &target, &known)?;

    let adapt_log = adapt_target(
        &mut model,
        &target.x,
        &band,
        &cfg.loss,
        &optim_for(cfg, cfg.adapt_iters, seed),
        &AdaptOptions {
            score: cfg.band.score,
            reestimate: cfg.band.reestimate,
        },
    )?;
    let mut report_after = evaluate(
        &model,
        &target,
        band.w0,
        &known,
        cfg.histogram_bins,
        &fingerprint,
    )?;
    report_after.config = Some(cfg.clone());
    let mean_scores_after = mean_scores_by_truth(&model, &target, &known)?;

    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        crate::datagen::save_dataset(&source, &dir.join(&names.source_data))?;
        crate::datagen::save_dataset(&target, &dir.join(&names.target_data))?;
        save_checkpoint(&source_model, &cfg.loss, &dir.join(&names.source_ckpt))?;
        source_log.save(&dir.join(&names.source_log))?;
        save_checkpoint(&model, &cfg.loss, &dir.join(&names.adapted_ckpt))?;
        adapt_log.save(&dir.join(&names.adapt_log))?;
        write_band(&band, &dir.join(&names.band))?;
        write_source_scores(&source_model, &target.x, &band, cfg.band.score, &dir.join(&names.scores))?;
        report_after.save(&dir.join(&names.report))?;
        let h = &report_after.histogram;
        h.save_group(&h.known, &dir.join(&names.hist_known))?;
        h.save_group(&h.unknown, &dir.join(&names.hist_unknown))?;
    }

    Ok(SeedOutcome {
        seed,
        band,
        source_model,
        adapted_model: model,
        source_log,
        adapt_log,
        report_before,
        report_after,
        mean_scores_before,
        mean_scores_after,
        source,
        target,
    })
}

/// Run every configured seed; outcomes come back in seed order.
pub fn run_all_seeds(cfg: &RunConfig, out: Option<&Path>) -> Result<Vec<SeedOutcome>> {
    cfg.seeds
        .iter()
        .map(|&seed| run_seed(cfg, seed, out))
        .collect()
}

/// Score dump of the pre-adaptation scores that defined the partitions.
pub fn write_source_scores(
    source_model: &TwoHeadModel,
    target_x: &Tensor,
    band: &ThresholdBand,
    kind: ScoreKind,
    path: &Path,
) -> Result<()> {
    let (p1, p2) = source_model.eval_probs(target_x)?;
    let scores = score_rows(kind, &p1, &p2);
    write_score_dump(path, &scores, band)
}

pub fn write_band(band: &ThresholdBand, path: &Path) -> Result<()> {
    let text = format!("w0\t{}\nrho\t{}\n", band.w0, band.rho);
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_band(path: &Path) -> Result<ThresholdBand> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w0 = None;
    let mut rho = None;
    for line in text.lines() {
        match line.split_once('\t') {
            Some(("w0", v)) => w0 = v.parse().ok(),
            Some(("rho", v)) => rho = v.parse().ok(),
            _ => {}
        }
    }
    match (w0, rho) {
        (Some(w0), Some(rho)) => ThresholdBand::unbounded(w0, rho),
        _ => Err(Error::malformed(
            path.display().to_string(),
            "expected w0 and rho lines",
        )),
    }
}

// ── sweeps ──────────────────────────────────────────────────────────────

/// Sweep axis over full pipeline runs.
#[derive(Clone, Debug, PartialEq)]
pub enum SweepAxis {
    UnknownClasses(Vec<usize>),
    RhoRatio(Vec<f64>),
    Temperature(Vec<f64>),
    ScoreKind(Vec<ScoreKind>),
}

impl SweepAxis {
    pub fn parse(axis: &str, values: &str) -> Result<Self> {
        let parts: Vec<&str> = values.split(',').filter(|s| !s.is_empty()).collect();
        if parts.is_empty() {
            return Err(Error::invalid_config("sweep needs at least one value"));
        }
        match axis {
            "unknown_classes" => Ok(SweepAxis::UnknownClasses(
                parts
                    .iter()
                    .map(|p| {
                        p.parse()
                            .map_err(|_| Error::invalid_config(format!("bad count {p:?}")))
                    })
                    .collect::<Result<_>>()?,
            )),
            "rho_ratio" => Ok(SweepAxis::RhoRatio(parse_f64s(&parts)?)),
            "T" => Ok(SweepAxis::Temperature(parse_f64s(&parts)?)),
            "score_kind" => Ok(SweepAxis::ScoreKind(
                parts.iter().map(|p| p.parse()).collect::<Result<_>>()?,
            )),
            other => Err(Error::invalid_config(format!(
                "unknown sweep axis {other:?} (expected unknown_classes, rho_ratio, T, or score_kind)"
            ))),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SweepAxis::UnknownClasses(v) => v.len(),
            SweepAxis::RhoRatio(v) => v.len(),
            SweepAxis::Temperature(v) => v.len(),
            SweepAxis::ScoreKind(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, i: usize) -> String {
        match self {
            SweepAxis::UnknownClasses(v) => v[i].to_string(),
            SweepAxis::RhoRatio(v) => v[i].to_string(),
            SweepAxis::Temperature(v) => v[i].to_string(),
            SweepAxis::ScoreKind(v) => v[i].to_string(),
        }
    }

    fn apply(&self, cfg: &RunConfig, i: usize) -> Result<RunConfig> {
        let mut c = cfg.clone();
        match self {
            SweepAxis::UnknownClasses(v) => {
                c.split.tgt_private = v[i];
                if v[i] == 0 && c.scenario.rejection_enabled() {
                    return Err(Error::invalid_config(
                        "unknown_classes sweep values must be > 0 for open-set scenarios",
                    ));
                }
            }
            SweepAxis::RhoRatio(v) => {
                if v[i] < 0.0 {
                    return Err(Error::invalid_config("rho_ratio must be >= 0"));
                }
                c.band.rho_ratio = v[i];
            }
            SweepAxis::Temperature(v) => {
                if !(0.0..=1.0).contains(&v[i]) {
                    return Err(Error::invalid_config("T must be in [0,1]"));
                }
                c.loss.t = v[i];
            }
            SweepAxis::ScoreKind(v) => c.band.score = v[i],
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub mean_metric: f64,
    pub per_seed: Vec<f64>,
}

/// Full pipeline per (value, seed); rows ordered by value, seeds ascending.
pub fn run_sweep(cfg: &RunConfig, axis: &SweepAxis) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(axis.len());
    for i in 0..axis.len() {
        let cfg_i = axis.apply(cfg, i)?;
        cfg_i.validate()?;
        let mut per_seed = Vec::with_capacity(cfg_i.seeds.len());
        for &seed in &cfg_i.seeds {
            let outcome = run_seed(&cfg_i, seed, None)?;
            per_seed.push(outcome.metric_after());
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        rows.push(SweepRow {
            value: axis.label(i),
            mean_metric: mean,
            per_seed,
        });
    }
    Ok(rows)
}

/// Tab-delimited sweep table: value, mean metric, then one column per seed.
pub fn write_sweep_table(rows: &[SweepRow], seeds: &[u64], path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::from("# shiftlab-sweep v1\nvalue\tmean_metric");
    for s in seeds {
        let _ = write!(out, "\tseed{s}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{}\t{}", r.value, r.mean_metric);
        for v in &r.per_seed {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

fn parse_f64s(parts: &[&str]) -> Result<Vec<f64>> {
    parts
        .iter()
        .map(|p| {
            p.parse()
                .map_err(|_| Error::invalid_config(format!("bad number {p:?}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_axis_parsing() {
        let t = SweepAxis::parse("T", "0.0,0.5,1.0").unwrap();
        assert_eq!(t.len(), 3);
        let u = SweepAxis::parse("unknown_classes", "1,3,5").unwrap();
        assert_eq!(u.len(), 3);
        assert!(SweepAxis::parse("bogus", "1").is_err());
        assert!(SweepAxis::parse("T", "").is_err());
        assert!(SweepAxis::parse("score_kind", "inner_product,mean_entropy").is_ok());
    }

    #[test]
    fn sweep_axis_apply_mutates_one_field() {
        let cfg = RunConfig::default();
        let axis = SweepAxis::parse("rho_ratio", "0.2").unwrap();
        let c = axis.apply(&cfg, 0).unwrap();
        assert_eq!(c.band.rho_ratio, 0.2);
        assert_eq!(c.loss, cfg.loss);
    }

    #[test]
    fn band_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let band = ThresholdBand::new(0.37, 0.037).unwrap();
        let path = dir.path().join("band.tsv");
        write_band(&band, &path).unwrap();
        let loaded = read_band(&path).unwrap();
        assert_eq!(band, loaded);
    }
}
