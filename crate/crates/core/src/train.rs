//! Mini-batch SGD and the two training loops: supervised source training and
//! source-free target adaptation with frozen heads.

use std::collections::HashMap;
use std::path::Path;

use crate::autodiff::Tape;
use crate::datagen::{class_balanced_batches, uniform_batches, DatasetBundle};
use crate::error::{Error, Result};
use crate::losses::{lmi_loss, source_loss, unk_loss};
use crate::model::{LossConfig, ParamId, TwoHeadModel};
use crate::scoring::{
    estimate_threshold_kind, score_rows, slack_from_threshold, partition, ScoreKind,
    ThresholdBand,
};
use crate::tensor::Tensor;

/// Optimizer settings. Defaults follow the reference recipe: momentum 0.9,
/// weight decay 1e-3, batch size 64, 3000 iterations (run configs scale the
/// iteration count down to desk size).
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_iters: usize,
    pub batch_size: usize,
    /// Learning-rate multiplier for the bottleneck, batch norm, and heads.
    pub new_layer_lr_mult: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-3,
            max_iters: 3000,
            batch_size: 64,
            new_layer_lr_mult: 1.0,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::invalid_config(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid_config(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid_config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.max_iters == 0 || self.batch_size == 0 {
            return Err(Error::invalid_config("max_iters and batch_size must be positive"));
        }
        Ok(())
    }
}

/// η(p) = lr0 · (1 + 10p)^(−0.75), monotone non-increasing on p ∈ [0,1].
pub fn lr_schedule(lr0: f64, progress: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&progress));
    lr0 * (1.0 + 10.0 * progress).powf(-0.75)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Per-iteration trace of a training run plus the final parameter digest.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainLog {
    pub records: Vec<IterRecord>,
    pub final_checksum: String,
    /// Threshold the adaptation run partitioned against (adaptation only).
    pub w0: Option<f64>,
    pub rho: Option<f64>,
    /// Set when a full epoch of iterations produced no usable gradient batch
    /// because every sample fell inside the ignored score band.
    pub degenerate_band: bool,
    /// Iterations skipped for lack of a usable gradient batch.
    pub skipped_iters: usize,
}

impl TrainLog {
    /// Tab-delimited export with a versioned header.
    pub fn save(&self, path: &Path) -> Result<()> {
        use std::fmt::Write as _;
        let mut out = String::new();
        out.push_str("# shiftlab-trainlog v1\n");
        if let Some(w0) = self.w0 {
            let _ = writeln!(out, "# w0\t{w0}");
        }
        if let Some(rho) = self.rho {
            let _ = writeln!(out, "# rho\t{rho}");
        }
        let _ = writeln!(out, "# degenerate_band\t{}", self.degenerate_band);
        let _ = writeln!(out, "# skipped_iters\t{}", self.skipped_iters);
        let _ = writeln!(out, "# final_checksum\t{}", self.final_checksum);
        out.push_str("iter\tloss\tlr\n");
        for r in &self.records {
            let _ = writeln!(out, "{}\t{}\t{}", r.iter, r.loss, r.lr);
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Momentum buffers keyed by parameter.
#[derive(Default)]
pub struct SgdState {
    velocity: HashMap<ParamId, Vec<f64>>,
}

impl SgdState {
    pub fn new() -> Self {
        SgdState::default()
    }
}

/// Classic SGD with momentum and coupled weight decay:
/// v ← m·v + g + wd·θ;  θ ← θ − lr·v.
pub fn sgd_step(
    param: &mut Tensor,
    grad: &[f64],
    velocity: &mut Vec<f64>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grad.len() != param.numel() {
        return Err(Error::ShapeMismatch {
            op: "sgd_step",
            lhs: param.shape().to_vec(),
            rhs: vec![grad.len()],
        });
    }
    if velocity.is_empty() {
        velocity.resize(param.numel(), 0.0);
    }
    if velocity.len() != param.numel() {
        return Err(Error::ShapeMismatch {
            op: "sgd_step",
            lhs: param.shape().to_vec(),
            rhs: vec![velocity.len()],
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            iter: 0,
            value: f64::NAN,
        });
    }
    let data = param.data_mut();
    for ((p, &g), v) in data.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

fn apply_grads(
    model: &mut TwoHeadModel,
    tape: &Tape,
    params: &[(ParamId, crate::autodiff::Val)],
    state: &mut SgdState,
    cfg: &OptimConfig,
    lr: f64,
    skip_heads: bool,
) -> Result<()> {
    for &(id, val) in params {
        if skip_heads && matches!(id, ParamId::Head1 | ParamId::Head2) {
            continue;
        }
        let grad = tape
            .grad(val)
            .ok_or_else(|| Error::invalid_input("missing gradient for parameter"))?
            .to_vec();
        let mult = if model.is_new_layer(id) {
            cfg.new_layer_lr_mult
        } else {
            1.0
        };
        let velocity = state.velocity.entry(id).or_default();
        sgd_step(
            model.param_mut(id),
            &grad,
            velocity,
            lr * mult,
            cfg.momentum,
            cfg.weight_decay,
        )?;
    }
    Ok(())
}

/// Supervised source training: class-balanced batches, smoothed co-training
/// loss, updates to every parameter. Deterministic given the seed.
pub fn train_source(
    model: &mut TwoHeadModel,
    source: &DatasetBundle,
    loss_cfg: &LossConfig,
    optim: &OptimConfig,
) -> Result<TrainLog> {
    optim.validate()?;
    loss_cfg.validate()?;
    if source.label_set.len() != model.k {
        return Err(Error::invalid_config(format!(
            "model has {} classes but source declares {}",
            model.k,
            source.label_set.len()
        )));
    }
    let mut batches = class_balanced_batches(source, optim.batch_size, optim.seed)?;
    let mut state = SgdState::new();
    let mut log = TrainLog::default();

    for iter in 0..optim.max_iters {
        let lr = lr_schedule(optim.lr0, iter as f64 / optim.max_iters as f64);
        let idx = batches.next().expect("balanced batches are endless");
        let x = source.x.select_rows(&idx)?;
        let ys: Vec<usize> = idx.iter().map(|&i| source.y[i]).collect();

        let mut tape = Tape::new();
        let (loss, fwd) = source_loss(&mut tape, model, &x, &ys, loss_cfg)?;
        let loss_value = tape.scalar_value(loss);
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                iter,
                value: loss_value,
            });
        }
        tape.backward(loss)?;
        apply_grads(model, &tape, &fwd.params, &mut state, optim, lr, false)?;
        log.records.push(IterRecord {
            iter,
            loss: loss_value,
            lr,
        });
    }
    log.final_checksum = model.checksum();
    Ok(log)
}

/// Behavior switches for target adaptation.
#[derive(Clone, Copy, Debug)]
pub struct AdaptOptions {
    pub score: ScoreKind,
    /// Re-estimate w₀ from the adapting model at every epoch boundary
    /// (experimental; default keeps the initial threshold fixed).
    pub reestimate: bool,
}

impl Default for AdaptOptions {
    fn default() -> Self {
        AdaptOptions {
            score: ScoreKind::InnerProduct,
            reestimate: false,
        }
    }
}

/// Source-free target adaptation: freezes both heads, fine-tunes the feature
/// path (batch norm runs in train mode). Each iteration forwards one uniform
/// target batch, scores it, partitions by the band, and minimizes
/// `unk_loss` on the low side minus `lmi_loss` on the high side of that same
/// forward pass. Iterations whose partition leaves fewer than two usable
/// samples are skipped (batch-norm statistics still update).
pub fn adapt_target(
    model: &mut TwoHeadModel,
    target_x: &Tensor,
    band: &ThresholdBand,
    loss_cfg: &LossConfig,
    optim: &OptimConfig,
    opts: &AdaptOptions,
) -> Result<TrainLog> {
    optim.validate()?;
    loss_cfg.validate()?;
    let n = target_x.rows();
    let mut batches = uniform_batches(n, optim.batch_size, optim.seed)?;
    let mut state = SgdState::new();
    let mut log = TrainLog {
        w0: Some(band.w0),
        rho: Some(band.rho),
        ..TrainLog::default()
    };
    let epoch_len = n.div_ceil(optim.batch_size).max(1);
    let rho_ratio = if band.w0 > 0.0 { band.rho / band.w0 } else { 0.0 };
    let mut active_band = *band;
    let mut empty_streak = 0usize;

    for iter in 0..optim.max_iters {
        if opts.reestimate && iter > 0 && iter % epoch_len == 0 {
            let w0 = estimate_threshold_kind(opts.score, model, target_x, n, optim.seed)?;
            active_band = ThresholdBand::unbounded(w0, slack_from_threshold(w0.max(0.0), rho_ratio))?;
        }
        let lr = lr_schedule(optim.lr0, iter as f64 / optim.max_iters as f64);
        let idx = batches.next().expect("uniform batches are endless");
        if idx.len() < 2 {
            log.skipped_iters += 1;
            continue;
        }
        let x = target_x.select_rows(&idx)?;

        let mut tape = Tape::new();
        let fwd = model.forward_train_on_tape(&mut tape, &x, false)?;
        let b = idx.len();
        let k = model.k;
        let p1 = Tensor::new(vec![b, k], tape.value(fwd.p1).to_vec())?;
        let p2 = Tensor::new(vec![b, k], tape.value(fwd.p2).to_vec())?;
        let scores = score_rows(opts.score, &p1, &p2);
        let part = partition(&scores, &active_band);

        if part.plus.len() + part.minus.len() == 0 {
            empty_streak += 1;
            log.skipped_iters += 1;
            if empty_streak >= epoch_len {
                log.degenerate_band = true;
            }
            continue;
        }
        empty_streak = 0;

        let mut loss: Option<crate::autodiff::Val> = None;
        if !part.minus.is_empty() {
            let p1m = tape.select_rows(fwd.p1, &part.minus)?;
            let p2m = tape.select_rows(fwd.p2, &part.minus)?;
            loss = Some(unk_loss(&mut tape, p1m, p2m)?);
        }
        if !part.plus.is_empty() {
            let p1p = tape.select_rows(fwd.p1, &part.plus)?;
            let p2p = tape.select_rows(fwd.p2, &part.plus)?;
            let lmi = lmi_loss(&mut tape, p1p, p2p, loss_cfg.t)?;
            let neg = tape.scale(lmi, -1.0);
            loss = Some(match loss {
                Some(l) => tape.add(l, neg)?,
                None => neg,
            });
        }
        let loss = loss.expect("partition has a usable side");
        let loss_value = tape.scalar_value(loss);
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                iter,
                value: loss_value,
            });
        }
        tape.backward(loss)?;
        apply_grads(model, &tape, &fwd.params, &mut state, optim, lr, true)?;
        log.records.push(IterRecord {
            iter,
            loss: loss_value,
            lr,
        });
    }
    log.final_checksum = model.checksum();
    Ok(log)
}
