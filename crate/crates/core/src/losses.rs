//! Training objectives.
//!
//! Source side: label-smoothed cross entropy averaged over both heads plus a
//! weighted Frobenius penalty on W1ᵀW2 that keeps the heads distinct.
//!
//! Target side: an entropic open-set loss pushes low-score samples toward the
//! uniform prediction, while a localized mutual information term pulls
//! high-score samples toward confident, batch-diverse predictions. The
//! diversity target Q̂ is the flattened batch-mean prediction, treated as a
//! constant (no gradient flows into it).

use crate::autodiff::{Tape, Val, LOG_CLAMP};
use crate::error::{Error, Result};
use crate::model::{LossConfig, TapeForward, TwoHeadModel};
use crate::tensor::Tensor;

/// Smoothed one-of-K encoding: entry `y` gets (1−α)+α/K, the rest α/K.
pub fn smoothed_labels(y: usize, k: usize, alpha: f64) -> Result<Tensor> {
    if y >= k {
        return Err(Error::invalid_input(format!(
            "label {y} out of range for {k} classes"
        )));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::invalid_input(format!(
            "alpha must be in [0,1), got {alpha}"
        )));
    }
    let mut q = vec![alpha / k as f64; k];
    q[y] += 1.0 - alpha;
    Tensor::new(vec![k], q)
}

/// Row-stacked smoothed labels for a batch.
pub fn smoothed_label_matrix(ys: &[usize], k: usize, alpha: f64) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ys.len() * k);
    for &y in ys {
        data.extend_from_slice(smoothed_labels(y, k, alpha)?.data());
    }
    Tensor::new(vec![ys.len(), k], data)
}

/// ‖W1ᵀW2‖_F as a plain value.
pub fn orth_penalty(w1: &Tensor, w2: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(w1.shape().to_vec(), w1.data().to_vec());
    let b = tape.constant(w2.shape().to_vec(), w2.data().to_vec());
    let v = orth_penalty_on_tape(&mut tape, a, b)?;
    Ok(tape.scalar_value(v))
}

/// ‖W1ᵀW2‖_F on a tape (differentiable; subgradient 0 at the origin).
pub fn orth_penalty_on_tape(tape: &mut Tape, w1: Val, w2: Val) -> Result<Val> {
    if tape.shape(w1) != tape.shape(w2) {
        return Err(Error::ShapeMismatch {
            op: "orth_penalty",
            lhs: tape.shape(w1).to_vec(),
            rhs: tape.shape(w2).to_vec(),
        });
    }
    let cross = tape.matmul_tn(w1, w2)?;
    Ok(tape.frobenius_norm(cross))
}

/// Regularized co-training loss: mean over samples and heads of the smoothed
/// cross entropy, plus λ·‖W1ᵀW2‖_F. Heads are weighted equally.
pub fn source_loss(
    tape: &mut Tape,
    model: &mut TwoHeadModel,
    x: &Tensor,
    ys: &[usize],
    cfg: &LossConfig,
) -> Result<(Val, TapeForward)> {
    if x.rows() == 0 || ys.is_empty() {
        return Err(Error::EmptyBatch("source_loss"));
    }
    if x.rows() != ys.len() {
        return Err(Error::ShapeMismatch {
            op: "source_loss",
            lhs: x.shape().to_vec(),
            rhs: vec![ys.len()],
        });
    }
    cfg.validate()?;
    let k = model.k;
    let b = x.rows();
    let q = smoothed_label_matrix(ys, k, cfg.alpha)?;
    let fwd = model.forward_train_on_tape(tape, x, true)?;

    let qc = tape.constant(q.shape().to_vec(), q.data().to_vec());
    let mut ce_terms = Vec::with_capacity(2);
    for p in [fwd.p1, fwd.p2] {
        let logp = tape.log(p);
        let s = tape.dot(qc, logp)?;
        ce_terms.push(tape.scale(s, -1.0 / b as f64));
    }
    let ce_sum = tape.add(ce_terms[0], ce_terms[1])?;
    let ce = tape.scale(ce_sum, 0.5);

    let w1 = fwd
        .params
        .iter()
        .find(|(id, _)| *id == crate::model::ParamId::Head1)
        .map(|(_, v)| *v)
        .expect("heads are trainable in source training");
    let w2 = fwd
        .params
        .iter()
        .find(|(id, _)| *id == crate::model::ParamId::Head2)
        .map(|(_, v)| *v)
        .expect("heads are trainable in source training");
    let orth = orth_penalty_on_tape(tape, w1, w2)?;
    let orth_weighted = tape.scale(orth, cfg.lambda);
    let loss = tape.add(ce, orth_weighted)?;
    Ok((loss, fwd))
}

/// Temperature-power renormalization of a probability vector:
/// out_i = p_i^T / Σ_j p_j^T. T = 1 returns `p` unchanged; T = 0 returns the
/// uniform distribution over the support of `p` (0⁰ := 0).
pub fn flatten(p: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid_input(format!(
            "flattening temperature must be in [0,1], got {t}"
        )));
    }
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid_input(format!(
            "flatten expects a probability vector (sum {sum})"
        )));
    }
    if p.iter().all(|&v| v == 0.0) {
        return Err(Error::invalid_input("flatten: all-zero input"));
    }
    if t == 1.0 {
        return Ok(p.to_vec());
    }
    let powered: Vec<f64> = p
        .iter()
        .map(|&v| if v == 0.0 { 0.0 } else { v.powf(t) })
        .collect();
    let z: f64 = powered.iter().sum();
    Ok(powered.iter().map(|v| v / z).collect())
}

/// Per-head localized mutual information: mean per-sample negentropy minus
/// KL(Q ‖ Q̂) where Q is the batch-mean prediction and Q̂ = Flatten(Q, T) is
/// gradient-blocked.
pub fn lmi_loss_single(tape: &mut Tape, p: Val, t: f64) -> Result<Val> {
    let shape = tape.shape(p).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::EmptyBatch("lmi_loss"));
    }
    let (b, k) = (shape[0], shape[1]);

    let logp = tape.log(p);
    let plogp = tape.mul(p, logp)?;
    let negent_sum = tape.sum(plogp);
    let negent = tape.scale(negent_sum, 1.0 / b as f64);

    let q = tape.mean_rows(p)?; // [1,k], gradient flows through p
    let qhat = flatten(tape.value(q), t)?; // detached
    let log_qhat: Vec<f64> = qhat.iter().map(|v| v.max(LOG_CLAMP).ln()).collect();
    let log_qhat_c = tape.constant(vec![1, k], log_qhat);
    let logq = tape.log(q);
    let diff = tape.sub(logq, log_qhat_c)?;
    let kl_terms = tape.mul(q, diff)?;
    let kl = tape.sum(kl_terms);

    tape.sub(negent, kl)
}

/// Localized mutual information averaged over both heads. Returned value is
/// meant to be maximized; the target objective minimizes its negation.
pub fn lmi_loss(tape: &mut Tape, p1: Val, p2: Val, t: f64) -> Result<Val> {
    let l1 = lmi_loss_single(tape, p1, t)?;
    let l2 = lmi_loss_single(tape, p2, t)?;
    let s = tape.add(l1, l2)?;
    Ok(tape.scale(s, 0.5))
}

/// Entropic open-set loss: cross entropy against the uniform distribution,
/// averaged over batch and heads. Minimum log K, reached on uniform rows.
pub fn unk_loss(tape: &mut Tape, p1: Val, p2: Val) -> Result<Val> {
    let mut terms = Vec::with_capacity(2);
    for p in [p1, p2] {
        let shape = tape.shape(p).to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::EmptyBatch("unk_loss"));
        }
        let (b, k) = (shape[0], shape[1]);
        let logp = tape.log(p);
        let s = tape.sum(logp);
        terms.push(tape.scale(s, -1.0 / (b * k) as f64));
    }
    let sum = tape.add(terms[0], terms[1])?;
    Ok(tape.scale(sum, 0.5))
}

/// Probability handles from a target-loss forward pass, for oracle checks.
pub struct TargetForward {
    pub p1: Val,
    pub p2: Val,
    pub n_plus: usize,
    pub n_minus: usize,
    pub fwd: TapeForward,
}

/// Target adaptation objective: `unk_loss` over the low-score batch minus
/// `lmi_loss` over the high-score batch. Both sides pass through the model in
/// one train-mode forward (plus rows first); an empty side contributes zero.
/// Heads enter as constants — the trainer freezes them.
pub fn target_loss(
    tape: &mut Tape,
    model: &mut TwoHeadModel,
    batch_plus: Option<&Tensor>,
    batch_minus: Option<&Tensor>,
    cfg: &LossConfig,
) -> Result<(Val, TargetForward)> {
    let n_plus = batch_plus.map_or(0, Tensor::rows);
    let n_minus = batch_minus.map_or(0, Tensor::rows);
    if n_plus + n_minus == 0 {
        return Err(Error::EmptyBatch("target_loss: both score-band sides"));
    }
    let x = match (batch_plus, batch_minus) {
        (Some(p), Some(m)) => Tensor::vstack(p, m)?,
        (Some(p), None) => p.clone(),
        (None, Some(m)) => m.clone(),
        (None, None) => unreachable!(),
    };
    cfg.validate()?;
    let fwd = model.forward_train_on_tape(tape, &x, false)?;

    let plus_idx: Vec<usize> = (0..n_plus).collect();
    let minus_idx: Vec<usize> = (n_plus..n_plus + n_minus).collect();

    let mut loss: Option<Val> = None;
    if n_minus > 0 {
        let p1m = tape.select_rows(fwd.p1, &minus_idx)?;
        let p2m = tape.select_rows(fwd.p2, &minus_idx)?;
        loss = Some(unk_loss(tape, p1m, p2m)?);
    }
    if n_plus > 0 {
        let p1p = tape.select_rows(fwd.p1, &plus_idx)?;
        let p2p = tape.select_rows(fwd.p2, &plus_idx)?;
        let lmi = lmi_loss(tape, p1p, p2p, cfg.t)?;
        let neg = tape.scale(lmi, -1.0);
        loss = Some(match loss {
            Some(l) => tape.add(l, neg)?,
            None => neg,
        });
    }
    let loss = loss.expect("at least one side is non-empty");
    Ok((
        loss,
        TargetForward {
            p1: fwd.p1,
            p2: fwd.p2,
            n_plus,
            n_minus,
            fwd,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn prob_rows(rng: &mut ChaCha12Rng, b: usize, k: usize) -> Tensor {
        let mut data = vec![0.0; b * k];
        for r in 0..b {
            let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
            crate::autodiff::softmax_row(&logits, &mut data[r * k..(r + 1) * k]);
        }
        Tensor::new(vec![b, k], data).unwrap()
    }

    fn entropy(p: &[f64]) -> f64 {
        -p.iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| v * v.ln())
            .sum::<f64>()
    }

    #[test]
    fn smoothed_labels_examples() {
        let q = smoothed_labels(2, 5, 0.1).unwrap();
        assert_eq!(q.data(), &[0.02, 0.02, 0.92, 0.02, 0.02]);
        let one_hot = smoothed_labels(1, 3, 0.0).unwrap();
        assert_eq!(one_hot.data(), &[0.0, 1.0, 0.0]);
        let half = smoothed_labels(0, 2, 0.5).unwrap();
        assert_eq!(half.data(), &[0.75, 0.25]);
        assert!(smoothed_labels(5, 5, 0.1).is_err());
        let sum: f64 = smoothed_labels(3, 7, 0.1).unwrap().data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-15);
    }

    #[test]
    fn orth_penalty_examples() {
        // columns of W1 orthogonal to all columns of W2
        let w1 = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let w2 = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, -2.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(orth_penalty(&w1, &w2).unwrap(), 0.0);

        let i2 = Tensor::eye(2);
        assert!((orth_penalty(&i2, &i2).unwrap() - 2.0_f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn orth_penalty_matches_sum_of_squares_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let w1 = Tensor::new(vec![3, 2], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w2 = Tensor::new(vec![3, 2], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        // brute force: entries of W1ᵀW2 by explicit loops, then sqrt of squares
        let mut ss = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let mut e = 0.0;
                for l in 0..3 {
                    e += w1.get(l, i) * w2.get(l, j);
                }
                ss += e * e;
            }
        }
        let expected = ss.sqrt();
        let got = orth_penalty(&w1, &w2).unwrap();
        assert!(((got - expected) / expected).abs() <= 1e-12);
    }

    #[test]
    fn orth_penalty_symmetry_and_scaling() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let w1 = Tensor::new(vec![4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w2 = Tensor::new(vec![4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let a = orth_penalty(&w1, &w2).unwrap();
        let b = orth_penalty(&w2, &w1).unwrap();
        assert!((a - b).abs() < 1e-12);
        let c = -2.5;
        let w1s = Tensor::new(vec![4, 3], w1.data().iter().map(|v| c * v).collect()).unwrap();
        let scaled = orth_penalty(&w1s, &w2).unwrap();
        assert!((scaled - c.abs() * a).abs() < 1e-12);
    }

    #[test]
    fn source_loss_uniform_outputs_gives_log_k() {
        // zero heads force uniform predictions; λ = 0
        let mut m = TwoHeadModel::new(3, &[], 2, 4, 0).unwrap();
        m.w1 = Tensor::zeros(vec![2, 4]).with_grad();
        m.w2 = Tensor::zeros(vec![2, 4]).with_grad();
        let x = Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![-1.0, 0.5, 0.0]]).unwrap();
        let cfg = LossConfig {
            lambda: 0.0,
            alpha: 0.1,
            t: 0.1,
        };
        let mut tape = Tape::new();
        let (loss, _) = source_loss(&mut tape, &mut m, &x, &[0, 3], &cfg).unwrap();
        assert!((tape.scalar_value(loss) - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn source_loss_at_exact_smoothed_targets_is_target_entropy() {
        // identity features (batch-norm affine chosen to undo the batch
        // statistics of this specific batch), head rows = ln q_j, so the
        // softmax output for class j is exactly q_j.
        let k = 3;
        let alpha = 0.1;
        let x = Tensor::eye(k);
        let ys: Vec<usize> = (0..k).collect();

        let mut m = TwoHeadModel::new(k, &[], k, k, 0).unwrap();
        m.layers[0].weight = Tensor::eye(k).with_grad();
        m.layers[0].bias = Tensor::zeros(vec![1, k]).with_grad();
        // batch stats of eye(k): mean 1/k, biased var (k-1)/k²
        let mu = 1.0 / k as f64;
        let var = (k as f64 - 1.0) / (k as f64 * k as f64);
        m.bn.gamma = Tensor::full(vec![1, k], (var + m.bn.eps).sqrt()).with_grad();
        m.bn.beta = Tensor::full(vec![1, k], mu).with_grad();
        let mut w = vec![0.0; k * k];
        for j in 0..k {
            let q = smoothed_labels(j, k, alpha).unwrap();
            for c in 0..k {
                w[j * k + c] = q.data()[c].ln();
            }
        }
        m.w1 = Tensor::new(vec![k, k], w.clone()).unwrap().with_grad();
        m.w2 = Tensor::new(vec![k, k], w).unwrap().with_grad();

        let cfg = LossConfig {
            lambda: 0.0,
            alpha,
            t: 0.1,
        };
        let mut tape = Tape::new();
        let (loss, fwd) = source_loss(&mut tape, &mut m, &x, &ys, &cfg).unwrap();
        // confirm the construction: p equals q row by row
        for (r, &y) in ys.iter().enumerate() {
            let q = smoothed_labels(y, k, alpha).unwrap();
            for (a, b) in tape.value(fwd.p1)[r * k..(r + 1) * k].iter().zip(q.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let expected = entropy(smoothed_labels(0, k, alpha).unwrap().data());
        assert!((tape.scalar_value(loss) - expected).abs() < 1e-10);
    }

    #[test]
    fn source_loss_matches_scalar_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let mut m = TwoHeadModel::new(4, &[5], 3, 3, 21).unwrap();
        let b = 6;
        let x = Tensor::new(
            vec![b, 4],
            (0..b * 4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let ys: Vec<usize> = (0..b).map(|_| rng.gen_range(0..3)).collect();
        let cfg = LossConfig {
            lambda: 0.013,
            alpha: 0.1,
            t: 0.1,
        };
        let mut tape = Tape::new();
        let (loss, fwd) = source_loss(&mut tape, &mut m, &x, &ys, &cfg).unwrap();

        // oracle: assemble the loss term by term from the probabilities
        let (p1, p2) = (tape.value(fwd.p1).to_vec(), tape.value(fwd.p2).to_vec());
        let mut ce = 0.0;
        for (r, &y) in ys.iter().enumerate() {
            let q = smoothed_labels(y, 3, cfg.alpha).unwrap();
            for head in [&p1, &p2] {
                for c in 0..3 {
                    ce -= q.data()[c] * head[r * 3 + c].max(LOG_CLAMP).ln();
                }
            }
        }
        ce /= 2.0 * b as f64;
        let expected = ce + cfg.lambda * orth_penalty(&m.w1, &m.w2).unwrap();
        let got = tape.scalar_value(loss);
        assert!(
            ((got - expected) / expected).abs() <= 1e-10,
            "{got} vs {expected}"
        );
    }

    #[test]
    fn flatten_examples() {
        let u = vec![0.25; 4];
        for t in [0.0, 0.3, 1.0] {
            let f = flatten(&u, t).unwrap();
            for (a, b) in f.iter().zip(&u) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        let f = flatten(&[0.9, 0.1], 0.5).unwrap();
        assert!((f[0] - 0.75).abs() < 1e-12 && (f[1] - 0.25).abs() < 1e-12);

        let f0 = flatten(&[0.5, 0.5, 0.0], 0.0).unwrap();
        assert_eq!(f0, vec![0.5, 0.5, 0.0]);

        assert!(flatten(&[0.0, 0.0], 0.5).is_err());
        // T = 1 must return the input bit-for-bit
        let p = vec![0.123456789, 0.876543211];
        assert_eq!(flatten(&p, 1.0).unwrap(), p);
    }

    #[test]
    fn lmi_loss_one_hot_rows_is_zero() {
        let mut tape = Tape::new();
        let rows = Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let p = tape.constant(rows.shape().to_vec(), rows.data().to_vec());
        let l = lmi_loss(&mut tape, p, p, 0.5).unwrap();
        assert!(tape.scalar_value(l).abs() < 1e-12);
    }

    #[test]
    fn lmi_loss_uniform_rows_is_minus_log_k() {
        let k = 5;
        let mut tape = Tape::new();
        let p = tape.constant(vec![3, k], vec![1.0 / k as f64; 3 * k]);
        let l = lmi_loss(&mut tape, p, p, 0.1).unwrap();
        assert!((tape.scalar_value(l) + (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn lmi_at_t0_equals_mutual_information_minus_log_k() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..50 {
            let b = rng.gen_range(2..8);
            let k = rng.gen_range(2..6);
            let p = prob_rows(&mut rng, b, k);
            let mut tape = Tape::new();
            let pv = tape.constant(p.shape().to_vec(), p.data().to_vec());
            let l = lmi_loss_single(&mut tape, pv, 0.0).unwrap();
            // independent mutual information computation
            let mut q = vec![0.0; k];
            for r in 0..b {
                for c in 0..k {
                    q[c] += p.get(r, c) / b as f64;
                }
            }
            let mean_h: f64 = (0..b).map(|r| entropy(p.row(r))).sum::<f64>() / b as f64;
            let mi = entropy(&q) - mean_h;
            let expected = mi - (k as f64).ln();
            assert!(
                (tape.scalar_value(l) - expected).abs() < 1e-9,
                "{} vs {}",
                tape.scalar_value(l),
                expected
            );
        }
    }

    #[test]
    fn lmi_at_t1_is_pure_negentropy() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..50 {
            let b = rng.gen_range(2..8);
            let k = rng.gen_range(2..6);
            let p = prob_rows(&mut rng, b, k);
            let mut tape = Tape::new();
            let pv = tape.constant(p.shape().to_vec(), p.data().to_vec());
            let l = lmi_loss_single(&mut tape, pv, 1.0).unwrap();
            let negent: f64 = -(0..b).map(|r| entropy(p.row(r))).sum::<f64>() / b as f64;
            assert!((tape.scalar_value(l) - negent).abs() < 1e-12);
        }
    }

    #[test]
    fn unk_loss_examples() {
        let k = 4;
        let mut tape = Tape::new();
        let u = tape.constant(vec![2, k], vec![1.0 / k as f64; 2 * k]);
        let l = unk_loss(&mut tape, u, u).unwrap();
        assert!((tape.scalar_value(l) - (k as f64).ln()).abs() < 1e-12);

        let mut tape = Tape::new();
        let p = tape.constant(vec![1, 2], vec![0.7, 0.3]);
        let l = unk_loss(&mut tape, p, p).unwrap();
        let expected = -0.5 * (0.7_f64.ln() + 0.3_f64.ln());
        assert!((tape.scalar_value(l) - expected).abs() < 1e-12);
        assert!((tape.scalar_value(l) - 0.7803238741) .abs() < 1e-8);
    }

    #[test]
    fn unk_loss_gradient_through_softmax_is_zero_at_uniform() {
        let k = 5;
        let logits = Tensor::zeros(vec![3, k]).with_grad();
        let mut tape = Tape::new();
        let z = tape.leaf(&logits);
        let p = tape.softmax(z);
        let l = unk_loss(&mut tape, p, p).unwrap();
        tape.backward(l).unwrap();
        for &g in tape.grad(z).unwrap() {
            assert!(g.abs() < 1e-9);
        }
    }

    #[test]
    fn unk_loss_is_minimized_only_at_uniform() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let k = 4;
        for _ in 0..100 {
            let p = prob_rows(&mut rng, 1, k);
            let max_dev = p
                .data()
                .iter()
                .map(|v| (v - 0.25).abs())
                .fold(0.0, f64::max);
            let mut tape = Tape::new();
            let pv = tape.constant(vec![1, k], p.data().to_vec());
            let l = unk_loss(&mut tape, pv, pv).unwrap();
            let v = tape.scalar_value(l);
            if max_dev > 1e-6 {
                assert!(v > (k as f64).ln());
            }
        }
    }

    #[test]
    fn target_loss_with_empty_minus_is_negated_lmi() {
        let mut m = TwoHeadModel::new(3, &[], 2, 3, 7).unwrap();
        let plus = Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![1.0, -1.0, 0.5]]).unwrap();
        let cfg = LossConfig::default();

        let mut tape = Tape::new();
        let (loss, tf) = target_loss(&mut tape, &mut m.clone(), Some(&plus), None, &cfg).unwrap();
        assert_eq!(tf.n_minus, 0);

        let mut tape2 = Tape::new();
        let fwd = m
            .forward_train_on_tape(&mut tape2, &plus, false)
            .unwrap();
        let lmi = lmi_loss(&mut tape2, fwd.p1, fwd.p2, cfg.t).unwrap();
        assert!((tape.scalar_value(loss) + tape2.scalar_value(lmi)).abs() < 1e-12);
    }

    #[test]
    fn target_loss_uniform_minus_only_gives_log_k() {
        let k = 3;
        let mut m = TwoHeadModel::new(3, &[], 2, k, 7).unwrap();
        m.w1 = Tensor::zeros(vec![2, k]).with_grad();
        m.w2 = Tensor::zeros(vec![2, k]).with_grad();
        let minus = Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![1.0, -1.0, 0.5]]).unwrap();
        let mut tape = Tape::new();
        let (loss, _) =
            target_loss(&mut tape, &mut m, None, Some(&minus), &LossConfig::default()).unwrap();
        assert!((tape.scalar_value(loss) - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn target_loss_requires_a_non_empty_side() {
        let mut m = TwoHeadModel::new(3, &[], 2, 3, 7).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(
            target_loss(&mut tape, &mut m, None, None, &LossConfig::default()),
            Err(Error::EmptyBatch(_))
        ));
    }

    #[test]
    fn target_loss_matches_scalar_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let mut m = TwoHeadModel::new(4, &[6], 3, 4, 31).unwrap();
        let plus = Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let minus = Tensor::new(vec![2, 4], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let cfg = LossConfig {
            lambda: 0.01,
            alpha: 0.1,
            t: 0.37,
        };
        let mut tape = Tape::new();
        let (loss, tf) = target_loss(&mut tape, &mut m, Some(&plus), Some(&minus), &cfg).unwrap();

        let k = 4;
        let p1 = tape.value(tf.p1).to_vec();
        let p2 = tape.value(tf.p2).to_vec();
        let row = |p: &[f64], r: usize| p[r * k..(r + 1) * k].to_vec();

        // oracle unk: mean over minus rows and heads of -(1/K) Σ log p
        let mut unk = 0.0;
        for r in tf.n_plus..tf.n_plus + tf.n_minus {
            for p in [&p1, &p2] {
                for &v in &row(p, r) {
                    unk -= v.max(LOG_CLAMP).ln() / k as f64;
                }
            }
        }
        unk /= 2.0 * tf.n_minus as f64;

        // oracle lmi per head on plus rows
        let mut lmi = 0.0;
        for p in [&p1, &p2] {
            let rows: Vec<Vec<f64>> = (0..tf.n_plus).map(|r| row(p, r)).collect();
            let negent: f64 = rows
                .iter()
                .map(|r| r.iter().map(|&v| v * v.max(LOG_CLAMP).ln()).sum::<f64>())
                .sum::<f64>()
                / tf.n_plus as f64;
            let mut q = vec![0.0; k];
            for r in &rows {
                for c in 0..k {
                    q[c] += r[c] / tf.n_plus as f64;
                }
            }
            let qhat = flatten(&q, cfg.t).unwrap();
            let kl: f64 = q
                .iter()
                .zip(&qhat)
                .map(|(&a, &b)| a * (a.max(LOG_CLAMP).ln() - b.max(LOG_CLAMP).ln()))
                .sum();
            lmi += 0.5 * (negent - kl);
        }

        let expected = unk - lmi;
        let got = tape.scalar_value(loss);
        assert!(
            ((got - expected) / expected.abs().max(1e-12)).abs() <= 1e-10,
            "{got} vs {expected}"
        );
    }

    #[test]
    fn source_loss_gradient_matches_central_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let m = TwoHeadModel::new(3, &[4], 3, 3, 77).unwrap();
        let b = 5;
        let x = Tensor::new(vec![b, 3], (0..b * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let ys: Vec<usize> = (0..b).map(|_| rng.gen_range(0..3)).collect();
        let cfg = LossConfig::default();

        let ids = m.param_ids(true);
        let (theta, layout) = crate::losses::tests::pack_params(&m, &ids);
        let eval = |p: &[f64]| -> (f64, Vec<f64>) {
            let mut mm = m.clone();
            crate::losses::tests::unpack_params(&mut mm, &ids, &layout, p);
            let mut tape = Tape::new();
            let (loss, fwd) = source_loss(&mut tape, &mut mm, &x, &ys, &cfg).unwrap();
            let v = tape.scalar_value(loss);
            tape.backward(loss).unwrap();
            let mut g = Vec::with_capacity(p.len());
            for (id, val) in &fwd.params {
                let _ = id;
                g.extend_from_slice(tape.grad(*val).unwrap());
            }
            (v, g)
        };
        let (_, analytic) = eval(&theta);
        let err = finite_diff_check(|p| eval(p).0, &analytic, &theta, 1e-5);
        assert!(err <= 1e-4, "max relative error {err}");
    }

    pub(crate) fn pack_params(
        m: &TwoHeadModel,
        ids: &[crate::model::ParamId],
    ) -> (Vec<f64>, Vec<usize>) {
        let mut theta = Vec::new();
        let mut layout = Vec::new();
        for &id in ids {
            let t = m.param(id);
            layout.push(t.numel());
            theta.extend_from_slice(t.data());
        }
        (theta, layout)
    }

    pub(crate) fn unpack_params(
        m: &mut TwoHeadModel,
        ids: &[crate::model::ParamId],
        layout: &[usize],
        theta: &[f64],
    ) {
        let mut off = 0;
        for (&id, &n) in ids.iter().zip(layout) {
            m.param_mut(id).data_mut().copy_from_slice(&theta[off..off + n]);
            off += n;
        }
    }
}
