//! Two-head classifier: a small feature MLP ending in a batch-normalized
//! bottleneck of width `d`, feeding two bias-free linear heads of shape d×K.
//!
//! Train-mode forward normalizes by batch statistics (gradients flow through
//! them) and updates the running statistics; eval-mode forward is a
//! deterministic per-row function of the input and the running statistics, so
//! frozen snapshots are freely shareable across threads.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{Tape, Val};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Forward mode: train couples the batch through batch-norm statistics and
/// updates running stats; eval uses running stats only.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Affine layer, input [B,in] → [B,out].
#[derive(Clone, Debug)]
pub struct Affine {
    pub weight: Tensor, // [in,out]
    pub bias: Tensor,   // [1,out]
}

/// Batch normalization over the bottleneck features.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Tensor, // [1,d]
    pub beta: Tensor,  // [1,d]
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    fn new(d: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(vec![1, d], 1.0).with_grad(),
            beta: Tensor::zeros(vec![1, d]).with_grad(),
            running_mean: vec![0.0; d],
            running_var: vec![1.0; d],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }
}

/// Identifies one parameter tensor of the model; the trainer keys optimizer
/// state by this.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum ParamId {
    LayerWeight(usize),
    LayerBias(usize),
    BnGamma,
    BnBeta,
    Head1,
    Head2,
}

/// Tape handles produced by a train-mode forward pass.
pub struct TapeForward {
    pub p1: Val,
    pub p2: Val,
    /// Bottleneck features after batch norm.
    pub features: Val,
    /// (parameter id, tape leaf) for every parameter that can receive a
    /// gradient on this tape.
    pub params: Vec<(ParamId, Val)>,
}

#[derive(Clone, Debug)]
pub struct TwoHeadModel {
    pub layers: Vec<Affine>, // ReLU after each layer except the last (bottleneck)
    pub bn: BatchNorm,
    pub w1: Tensor, // [d,K], bias-free
    pub w2: Tensor, // [d,K], bias-free
    pub input_dim: usize,
    pub d: usize,
    pub k: usize,
}

impl TwoHeadModel {
    /// Random init: He-scaled normal feature weights, zero biases, and two
    /// independently seeded heads drawn from the same distribution.
    pub fn new(input_dim: usize, hidden: &[usize], d: usize, k: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || d == 0 || k < 2 {
            return Err(Error::invalid_config(format!(
                "model dims must satisfy input_dim>0, d>0, k>=2 (got {input_dim}, {d}, {k})"
            )));
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(d);

        let mut rng = substream(seed, "init-features");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            layers.push(Affine {
                weight: Tensor::new(vec![fan_in, fan_out], data)?.with_grad(),
                bias: Tensor::zeros(vec![1, fan_out]).with_grad(),
            });
        }

        let head = |label: &str| -> Tensor {
            let mut rng = substream(seed, label);
            let std = 1.0 / (d as f64).sqrt();
            let data: Vec<f64> = (0..d * k)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Tensor::new(vec![d, k], data).unwrap().with_grad()
        };

        Ok(TwoHeadModel {
            layers,
            bn: BatchNorm::new(d),
            w1: head("init-head1"),
            w2: head("init-head2"),
            input_dim,
            d,
            k,
        })
    }

    pub fn param_ids(&self, include_heads: bool) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for i in 0..self.layers.len() {
            ids.push(ParamId::LayerWeight(i));
            ids.push(ParamId::LayerBias(i));
        }
        ids.push(ParamId::BnGamma);
        ids.push(ParamId::BnBeta);
        if include_heads {
            ids.push(ParamId::Head1);
            ids.push(ParamId::Head2);
        }
        ids
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        match id {
            ParamId::LayerWeight(i) => &self.layers[i].weight,
            ParamId::LayerBias(i) => &self.layers[i].bias,
            ParamId::BnGamma => &self.bn.gamma,
            ParamId::BnBeta => &self.bn.beta,
            ParamId::Head1 => &self.w1,
            ParamId::Head2 => &self.w2,
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        match id {
            ParamId::LayerWeight(i) => &mut self.layers[i].weight,
            ParamId::LayerBias(i) => &mut self.layers[i].bias,
            ParamId::BnGamma => &mut self.bn.gamma,
            ParamId::BnBeta => &mut self.bn.beta,
            ParamId::Head1 => &mut self.w1,
            ParamId::Head2 => &mut self.w2,
        }
    }

    /// True for the bottleneck layer, batch norm, and heads — the layers the
    /// reference training recipe treats as "new" (non-backbone).
    pub fn is_new_layer(&self, id: ParamId) -> bool {
        match id {
            ParamId::LayerWeight(i) | ParamId::LayerBias(i) => i + 1 == self.layers.len(),
            _ => true,
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.input_dim {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: x.shape().to_vec(),
                rhs: vec![x.rows(), self.input_dim],
            });
        }
        Ok(())
    }

    /// Train-mode forward on a tape. Updates running batch-norm statistics.
    /// With `heads_trainable == false` the heads enter as constants, so the
    /// feature path alone receives gradients.
    pub fn forward_train_on_tape(
        &mut self,
        tape: &mut Tape,
        x: &Tensor,
        heads_trainable: bool,
    ) -> Result<TapeForward> {
        self.check_input(x)?;
        let b = x.rows();
        if b < 2 {
            return Err(Error::invalid_input(format!(
                "train-mode forward needs a batch of at least 2 (got {b}); batch-norm variance is undefined"
            )));
        }

        let mut params = Vec::new();
        let mut h = tape.constant(x.shape().to_vec(), x.data().to_vec());
        let n_layers = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.leaf(&layer.weight);
            let bias = tape.leaf(&layer.bias);
            params.push((ParamId::LayerWeight(i), w));
            params.push((ParamId::LayerBias(i), bias));
            let prod = tape.matmul(h, w)?;
            let bias_b = tape.broadcast_rows(bias, b)?;
            h = tape.add(prod, bias_b)?;
            if i + 1 < n_layers {
                h = tape.relu(h);
            }
        }

        // batch norm over the bottleneck, composed from primitives so
        // gradients flow through the batch statistics
        let d = self.d;
        let mu = tape.mean_rows(h)?; // [1,d]
        let mu_b = tape.broadcast_rows(mu, b)?;
        let centered = tape.sub(h, mu_b)?;
        let sq = tape.mul(centered, centered)?;
        let var = tape.mean_rows(sq)?; // biased batch variance, [1,d]
        let eps = tape.constant(vec![1, d], vec![self.bn.eps; d]);
        let var_eps = tape.add(var, eps)?;
        let inv_std = tape.powf(var_eps, -0.5)?;
        let inv_std_b = tape.broadcast_rows(inv_std, b)?;
        let normed = tape.mul(centered, inv_std_b)?;
        let gamma = tape.leaf(&self.bn.gamma);
        let beta = tape.leaf(&self.bn.beta);
        params.push((ParamId::BnGamma, gamma));
        params.push((ParamId::BnBeta, beta));
        let gamma_b = tape.broadcast_rows(gamma, b)?;
        let beta_b = tape.broadcast_rows(beta, b)?;
        let scaled = tape.mul(normed, gamma_b)?;
        let features = tape.add(scaled, beta_b)?;

        // running statistics track the batch statistics with momentum
        let m = self.bn.momentum;
        let mu_v = tape.value(mu).to_vec();
        let var_v = tape.value(var).to_vec();
        for j in 0..d {
            self.bn.running_mean[j] = (1.0 - m) * self.bn.running_mean[j] + m * mu_v[j];
            self.bn.running_var[j] = (1.0 - m) * self.bn.running_var[j] + m * var_v[j];
        }

        let (h1, h2) = if heads_trainable {
            let w1 = tape.leaf(&self.w1);
            let w2 = tape.leaf(&self.w2);
            params.push((ParamId::Head1, w1));
            params.push((ParamId::Head2, w2));
            (w1, w2)
        } else {
            (
                tape.constant(self.w1.shape().to_vec(), self.w1.data().to_vec()),
                tape.constant(self.w2.shape().to_vec(), self.w2.data().to_vec()),
            )
        };
        let z1 = tape.matmul(features, h1)?;
        let z2 = tape.matmul(features, h2)?;
        let p1 = tape.softmax(z1);
        let p2 = tape.softmax(z2);

        Ok(TapeForward {
            p1,
            p2,
            features,
            params,
        })
    }

    /// Eval-mode probabilities: deterministic per-row, using running stats.
    pub fn eval_probs(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let f = self.eval_features(x)?;
        let b = f.rows();
        let mut p1 = vec![0.0; b * self.k];
        let mut p2 = vec![0.0; b * self.k];
        for i in 0..b {
            let feat = f.row(i);
            let z1 = head_logits(feat, &self.w1, self.k);
            let z2 = head_logits(feat, &self.w2, self.k);
            crate::autodiff::softmax_row(&z1, &mut p1[i * self.k..(i + 1) * self.k]);
            crate::autodiff::softmax_row(&z2, &mut p2[i * self.k..(i + 1) * self.k]);
        }
        Ok((
            Tensor::new(vec![b, self.k], p1)?,
            Tensor::new(vec![b, self.k], p2)?,
        ))
    }

    /// Eval-mode bottleneck features (running-stat batch norm).
    pub fn eval_features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let b = x.rows();
        let n_layers = self.layers.len();
        let mut h = x.data().to_vec();
        let mut width = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            let out_w = layer.weight.shape()[1];
            let mut next =
                crate::autodiff::matmul_data(&h, layer.weight.data(), b, width, out_w);
            for r in 0..b {
                for c in 0..out_w {
                    next[r * out_w + c] += layer.bias.data()[c];
                    if i + 1 < n_layers && next[r * out_w + c] < 0.0 {
                        next[r * out_w + c] = 0.0;
                    }
                }
            }
            h = next;
            width = out_w;
        }
        debug_assert_eq!(width, self.d);
        for r in 0..b {
            for j in 0..self.d {
                let inv = 1.0 / (self.bn.running_var[j] + self.bn.eps).sqrt();
                let v = (h[r * self.d + j] - self.bn.running_mean[j]) * inv;
                h[r * self.d + j] = v * self.bn.gamma.data()[j] + self.bn.beta.data()[j];
            }
        }
        Tensor::new(vec![b, self.d], h)
    }

    /// Row-wise softmax outputs of both heads over shared features.
    pub fn forward_probs(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        match mode {
            Mode::Eval => self.eval_probs(x),
            Mode::Train => {
                let mut tape = Tape::new();
                let fwd = self.forward_train_on_tape(&mut tape, x, true)?;
                let b = x.rows();
                Ok((
                    Tensor::new(vec![b, self.k], tape.value(fwd.p1).to_vec())?,
                    Tensor::new(vec![b, self.k], tape.value(fwd.p2).to_vec())?,
                ))
            }
        }
    }

    /// Hex digest over shapes, parameters, and running stats.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        fn feed(h: &mut Sha256, t: &Tensor) {
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        let mut h = Sha256::new();
        for l in &self.layers {
            feed(&mut h, &l.weight);
            feed(&mut h, &l.bias);
        }
        feed(&mut h, &self.bn.gamma);
        feed(&mut h, &self.bn.beta);
        for &v in self.bn.running_mean.iter().chain(&self.bn.running_var) {
            h.update(v.to_le_bytes());
        }
        feed(&mut h, &self.w1);
        feed(&mut h, &self.w2);
        hex(&h.finalize())
    }
}

fn head_logits(feat: &[f64], w: &Tensor, k: usize) -> Vec<f64> {
    debug_assert_eq!(feat.len(), w.shape()[0]);
    let mut z = vec![0.0; k];
    for (j, zj) in z.iter_mut().enumerate() {
        for (l, &f) in feat.iter().enumerate() {
            *zj += f * w.data()[l * k + j];
        }
    }
    z
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

// ── checkpoint format ───────────────────────────────────────────────────
//
// Versioned line-based text. Floats are written in shortest round-trip form,
// so save → load is value-exact and identical parameters produce identical
// bytes. Grammar:
//
//   shiftlab-checkpoint v1
//   input_dim <n>
//   d <n>
//   k <n>
//   loss.lambda <f>  / loss.alpha <f> / loss.t <f>
//   bn.momentum <f> / bn.eps <f>
//   tensor <name> <rows> <cols>
//   <rows*cols floats, space separated, one line>
//   vec <name> <len>
//   <len floats>
//   end

/// Loss hyperparameters carried with a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Head-orthogonality weight λ ≥ 0.
    pub lambda: f64,
    /// Label smoothing α ∈ [0,1).
    pub alpha: f64,
    /// Flattening temperature T ∈ [0,1].
    pub t: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.01,
            alpha: 0.1,
            t: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::invalid_config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::invalid_config(format!("alpha must be in [0,1), got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.t) {
            return Err(Error::invalid_config(format!("T must be in [0,1], got {}", self.t)));
        }
        Ok(())
    }
}

pub fn save_checkpoint(model: &TwoHeadModel, loss: &LossConfig, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("shiftlab-checkpoint v1\n");
    let _ = writeln!(out, "input_dim {}", model.input_dim);
    let _ = writeln!(out, "d {}", model.d);
    let _ = writeln!(out, "k {}", model.k);
    let _ = writeln!(out, "loss.lambda {}", loss.lambda);
    let _ = writeln!(out, "loss.alpha {}", loss.alpha);
    let _ = writeln!(out, "loss.t {}", loss.t);
    let _ = writeln!(out, "bn.momentum {}", model.bn.momentum);
    let _ = writeln!(out, "bn.eps {}", model.bn.eps);
    let tensor_line = |name: String, t: &Tensor, out: &mut String| {
        let _ = writeln!(out, "tensor {} {} {}", name, t.rows(), t.cols());
        out.push_str(&join_floats(t.data()));
        out.push('\n');
    };
    for (i, l) in model.layers.iter().enumerate() {
        tensor_line(format!("layer.{i}.weight"), &l.weight, &mut out);
        tensor_line(format!("layer.{i}.bias"), &l.bias, &mut out);
    }
    tensor_line("bn.gamma".into(), &model.bn.gamma, &mut out);
    tensor_line("bn.beta".into(), &model.bn.beta, &mut out);
    let _ = writeln!(out, "vec bn.running_mean {}", model.bn.running_mean.len());
    out.push_str(&join_floats(&model.bn.running_mean));
    out.push('\n');
    let _ = writeln!(out, "vec bn.running_var {}", model.bn.running_var.len());
    out.push_str(&join_floats(&model.bn.running_var));
    out.push('\n');
    tensor_line("head.1".into(), &model.w1, &mut out);
    tensor_line("head.2".into(), &model.w2, &mut out);
    out.push_str("end\n");
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<(TwoHeadModel, LossConfig)> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let p = path.display().to_string();
    let mut lines = text.lines();
    let bad = |reason: &str| Error::malformed(p.clone(), reason.to_string());

    if lines.next() != Some("shiftlab-checkpoint v1") {
        return Err(bad("missing or unsupported header"));
    }

    let mut scalars = std::collections::HashMap::new();
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    let mut vecs: Vec<(String, Vec<f64>)> = Vec::new();
    let mut saw_end = false;

    while let Some(line) = lines.next() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["end"] => {
                saw_end = true;
                break;
            }
            ["tensor", name, r, c] => {
                let r: usize = r.parse().map_err(|_| bad("bad tensor rows"))?;
                let c: usize = c.parse().map_err(|_| bad("bad tensor cols"))?;
                let data = parse_floats(lines.next().ok_or_else(|| bad("truncated tensor"))?)
                    .map_err(|m| bad(&m))?;
                if data.len() != r * c {
                    return Err(bad(&format!(
                        "tensor {name}: expected {} values, got {}",
                        r * c,
                        data.len()
                    )));
                }
                tensors.push((name.to_string(), Tensor::new(vec![r, c], data)?));
            }
            ["vec", name, n] => {
                let n: usize = n.parse().map_err(|_| bad("bad vec len"))?;
                let data = parse_floats(lines.next().ok_or_else(|| bad("truncated vec"))?)
                    .map_err(|m| bad(&m))?;
                if data.len() != n {
                    return Err(bad(&format!("vec {name}: expected {n} values")));
                }
                vecs.push((name.to_string(), data));
            }
            [key, value] => {
                scalars.insert(key.to_string(), value.to_string());
            }
            _ => return Err(bad(&format!("unrecognized line: {line}"))),
        }
    }
    if !saw_end {
        return Err(bad("missing end marker (truncated file)"));
    }

    let usize_of = |k: &str| -> Result<usize> {
        scalars
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(&format!("missing field {k}")))
    };
    let f64_of = |k: &str| -> Result<f64> {
        scalars
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(&format!("missing field {k}")))
    };
    let input_dim = usize_of("input_dim")?;
    let d = usize_of("d")?;
    let k = usize_of("k")?;
    let loss = LossConfig {
        lambda: f64_of("loss.lambda")?,
        alpha: f64_of("loss.alpha")?,
        t: f64_of("loss.t")?,
    };

    let take_tensor = |name: &str| -> Result<Tensor> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| bad(&format!("missing tensor {name}")))
    };
    let take_vec = |name: &str| -> Result<Vec<f64>> {
        vecs.iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| bad(&format!("missing vec {name}")))
    };

    let n_layers = tensors
        .iter()
        .filter(|(n, _)| n.starts_with("layer.") && n.ends_with(".weight"))
        .count();
    if n_layers == 0 {
        return Err(bad("no feature layers"));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        layers.push(Affine {
            weight: take_tensor(&format!("layer.{i}.weight"))?.with_grad(),
            bias: take_tensor(&format!("layer.{i}.bias"))?.with_grad(),
        });
    }

    let model = TwoHeadModel {
        layers,
        bn: BatchNorm {
            gamma: take_tensor("bn.gamma")?.with_grad(),
            beta: take_tensor("bn.beta")?.with_grad(),
            running_mean: take_vec("bn.running_mean")?,
            running_var: take_vec("bn.running_var")?,
            momentum: f64_of("bn.momentum")?,
            eps: f64_of("bn.eps")?,
        },
        w1: take_tensor("head.1")?.with_grad(),
        w2: take_tensor("head.2")?.with_grad(),
        input_dim,
        d,
        k,
    };
    if model.w1.shape() != [d, k] || model.w2.shape() != [d, k] {
        return Err(bad("head shapes disagree with d/k"));
    }
    Ok((model, loss))
}

pub(crate) fn join_floats(v: &[f64]) -> String {
    let mut s = String::new();
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{x}");
    }
    s
}

pub(crate) fn parse_floats(line: &str) -> std::result::Result<Vec<f64>, String> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| format!("bad float token {t:?}"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(k: usize) -> Vec<f64> {
        vec![1.0 / k as f64; k]
    }

    #[test]
    fn zero_heads_give_uniform_probs_in_both_modes() {
        let mut m = TwoHeadModel::new(3, &[5], 4, 4, 0).unwrap();
        m.w1 = Tensor::zeros(vec![4, 4]).with_grad();
        m.w2 = Tensor::zeros(vec![4, 4]).with_grad();
        let x = Tensor::from_rows(&[vec![0.3, -0.2, 1.0], vec![2.0, 0.1, -0.4]]).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let (p1, p2) = m.forward_probs(&x, mode).unwrap();
            for r in 0..2 {
                assert_eq!(p1.row(r), &uniform(4)[..]);
                assert_eq!(p2.row(r), &uniform(4)[..]);
            }
        }
    }

    #[test]
    fn eval_mode_is_deterministic_per_row() {
        let m = TwoHeadModel::new(4, &[6], 3, 5, 9).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 0.2, 0.3, 0.4], vec![0.1, 0.2, 0.3, 0.4]]).unwrap();
        let (p1, _) = m.eval_probs(&x).unwrap();
        assert_eq!(p1.row(0), p1.row(1));
        let (q1, _) = m.eval_probs(&x).unwrap();
        assert_eq!(p1.data(), q1.data());
    }

    #[test]
    fn hand_built_identity_net_matches_direct_softmax() {
        // single identity layer, identity-configured batch norm, W1 = I
        let mut m = TwoHeadModel::new(2, &[], 2, 2, 0).unwrap();
        m.layers[0].weight = Tensor::eye(2).with_grad();
        m.layers[0].bias = Tensor::zeros(vec![1, 2]).with_grad();
        m.bn.running_mean = vec![0.0, 0.0];
        m.bn.running_var = vec![1.0 - m.bn.eps, 1.0 - m.bn.eps];
        m.w1 = Tensor::eye(2).with_grad();
        m.w2 = Tensor::eye(2).with_grad();
        let x = Tensor::from_rows(&[vec![3.0_f64.ln(), 0.0]]).unwrap();
        let (p1, _) = m.eval_probs(&x).unwrap();
        assert!((p1.get(0, 0) - 0.75).abs() < 1e-12);
        assert!((p1.get(0, 1) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn train_mode_rejects_batch_of_one() {
        let mut m = TwoHeadModel::new(3, &[], 2, 2, 0).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(m.forward_probs(&x, Mode::Train).is_err());
        assert!(m.forward_probs(&x, Mode::Eval).is_ok());
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let mut m = TwoHeadModel::new(3, &[], 2, 2, 0).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(m.forward_probs(&x, Mode::Train).is_err());
    }

    #[test]
    fn probs_rows_sum_to_one_and_positive() {
        let mut m = TwoHeadModel::new(5, &[7], 4, 6, 3).unwrap();
        let x = Tensor::from_rows(&[
            vec![0.5, 1.0, -0.5, 0.2, 0.0],
            vec![-1.0, 0.3, 0.8, -0.2, 0.4],
            vec![2.0, -0.3, 0.1, 0.9, -1.2],
        ])
        .unwrap();
        let (p1, p2) = m.forward_probs(&x, Mode::Train).unwrap();
        for p in [&p1, &p2] {
            for r in 0..3 {
                let s: f64 = p.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(p.row(r).iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let mut m = TwoHeadModel::new(3, &[], 2, 2, 1).unwrap();
        let before = m.bn.running_mean.clone();
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 2.0]]).unwrap();
        m.forward_probs(&x, Mode::Train).unwrap();
        assert_ne!(before, m.bn.running_mean);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_stable_and_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = TwoHeadModel::new(4, &[5], 3, 4, 17).unwrap();
        // scramble running stats so they are not defaults
        let x = Tensor::from_rows(&[vec![0.1, 0.7, -0.3, 0.9], vec![1.0, -0.5, 0.2, 0.3]]).unwrap();
        m.forward_probs(&x, Mode::Train).unwrap();
        let cfg = LossConfig::default();

        let p1 = dir.path().join("a.ckpt");
        save_checkpoint(&m, &cfg, &p1).unwrap();
        let (m2, cfg2) = load_checkpoint(&p1).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(m.checksum(), m2.checksum());

        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&m2, &cfg2, &p2).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap(),
            "identical parameters must serialize to identical bytes"
        );
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = TwoHeadModel::new(4, &[5], 3, 4, 17).unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&m, &LossConfig::default(), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let truncated = &text[..text.len() / 2];
        std::fs::write(&p, truncated).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(Error::MalformedFile { .. })
        ));
    }
}
