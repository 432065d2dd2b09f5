//! Contrastive and classification losses plus gradient-driven loss scaling.
//!
//! The contrastive family: a plain supervised contrastive loss, a
//! distributionally-robust variant that reweights each contrastive candidate
//! with a Gaussian kernel on its similarity, and a covariance-trace
//! regularizer that keeps embeddings compact. The scaling half turns the
//! previous step's global gradient norm into the pair of loss weights used
//! by the combined objective.

use crate::graph::{EngineError, Graph, NodeId, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Loss-side configuration. `tau` and `eta` default to 0.07 and 0.2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DsmConfig {
    /// Similarity temperature.
    pub tau: f64,
    /// Center (and width scale) of the Gaussian reweighting kernel.
    pub eta: f64,
    /// Coefficient of the covariance-trace regularizer.
    pub beta_ib: f64,
    /// Base scale of the classification weight.
    pub alpha_base: f64,
    /// Base scale of the contrastive weight.
    pub beta_base: f64,
    /// Ablation switch: all contrastive weights forced to one.
    pub uniform_weights: bool,
    /// Let gradients flow through the Gaussian weights instead of treating
    /// them as constants.
    pub differentiable_weights: bool,
}

impl Default for DsmConfig {
    fn default() -> Self {
        DsmConfig {
            tau: 0.07,
            eta: 0.2,
            beta_ib: 0.01,
            alpha_base: 1.0,
            beta_base: 1.0,
            uniform_weights: false,
            differentiable_weights: false,
        }
    }
}

impl DsmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(EngineError::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.eta > 0.0) {
            return Err(EngineError::InvalidConfig(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.beta_ib >= 0.0) {
            return Err(EngineError::InvalidConfig(format!(
                "beta_ib must be nonnegative, got {}",
                self.beta_ib
            )));
        }
        if !(self.alpha_base > 0.0) || !(self.beta_base > 0.0) {
            return Err(EngineError::InvalidConfig(format!(
                "base scales must be positive, got alpha {} beta {}",
                self.alpha_base, self.beta_base
            )));
        }
        Ok(())
    }
}

/// A batch of unit-norm embeddings with integer class labels.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch<T> {
    z: Tensor<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> EmbeddingBatch<T> {
    pub fn new(z: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if z.rank() != 2 || z.shape()[0] != labels.len() {
            return Err(EngineError::ShapeMismatch {
                op: "embedding_batch",
                details: format!("embeddings {:?} vs {} labels", z.shape(), labels.len()),
            });
        }
        if z.shape()[0] < 2 {
            return Err(EngineError::InvalidConfig(
                "contrastive evaluation needs at least two embeddings".into(),
            ));
        }
        let (n, d) = (z.shape()[0], z.shape()[1]);
        for i in 0..n {
            let mut s = 0.0f64;
            for j in 0..d {
                let v = z.data()[i * d + j].to_f64();
                s += v * v;
            }
            if (s.sqrt() - 1.0).abs() > 1e-5 {
                return Err(EngineError::InvalidConfig(format!(
                    "embedding row {} has norm {:.6}, expected 1",
                    i,
                    s.sqrt()
                )));
            }
        }
        Ok(EmbeddingBatch { z, labels })
    }

    pub fn z(&self) -> &Tensor<T> {
        &self.z
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

// ---- masks -----------------------------------------------------------------

fn positive_mask<T: Scalar>(labels: &[usize]) -> (Tensor<T>, Vec<usize>) {
    let n = labels.len();
    let mut m = Tensor::zeros(&[n, n]);
    let mut counts = vec![0usize; n];
    for i in 0..n {
        for j in 0..n {
            if i != j && labels[i] == labels[j] {
                m.data_mut()[i * n + j] = T::ONE;
                counts[i] += 1;
            }
        }
    }
    (m, counts)
}

// ---- similarity and weights ------------------------------------------------

/// Pairwise scaled similarities `z_i . z_j / tau`, shape `[N, N]`.
pub fn similarity<T: Scalar>(g: &mut Graph<T>, z: NodeId, tau: f64) -> Result<NodeId> {
    let s = g.matmul_nt(z, z)?;
    Ok(g.scale(s, T::from_f64(1.0 / tau)))
}

/// Gaussian robust weights on a similarity matrix:
/// `w = exp(-(s - eta)^2 / (2 eta^2))`, elementwise in `(0, 1]`.
pub fn gaussian_weights<T: Scalar>(s: &Tensor<T>, eta: f64) -> Tensor<T> {
    let inv = -1.0 / (2.0 * eta * eta);
    s.map(|v| T::from_f64(((v.to_f64() - eta) * (v.to_f64() - eta) * inv).exp()))
}

/// Host-side similarity matrix of an embedding batch.
pub fn similarity_matrix<T: Scalar>(batch: &EmbeddingBatch<T>, tau: f64) -> Tensor<T> {
    let mut g = Graph::new();
    let z = g.constant(batch.z().clone());
    let s = similarity(&mut g, z, tau).expect("square similarity is always valid");
    g.value(s).clone()
}

// ---- contrastive losses ------------------------------------------------------

/// Mean over valid anchors of `logsumexp_a(adjusted_ia) - mean_p s_ip`,
/// where `adjusted = s + log(weight)` carries `-inf` at excluded entries.
/// Shared tail of both contrastive losses; the log-domain evaluation keeps
/// heavily down-weighted denominators finite.
fn anchor_mean<T: Scalar>(
    g: &mut Graph<T>,
    s: NodeId,
    adjusted: NodeId,
    labels: &[usize],
) -> Result<(NodeId, bool)> {
    let n = labels.len();
    let (pos, counts) = positive_mask::<T>(labels);

    // stable log-sum-exp along each row; the shift's gradient cancels
    let m = g.max_reduce(adjusted, &[1])?;
    let m_b = g.expand(m, &[n, n], &[0])?;
    let shifted = g.sub(adjusted, m_b)?;
    let e = g.exp(shifted);
    let sum_e = g.sum(e, &[1])?;
    let log_sum = g.log(sum_e);
    let log_denom = g.add(m, log_sum)?;

    let pos_node = g.constant(pos);
    let pos_sims = g.mul(s, pos_node)?;
    let pos_sum = g.sum(pos_sims, &[1])?;
    let count_guarded: Vec<T> =
        counts.iter().map(|&c| T::from_usize(c.max(1))).collect();
    let counts_node = g.constant(Tensor::from_vec(&[n], count_guarded));
    let pos_mean = g.div(pos_sum, counts_node)?;

    let per_anchor = g.sub(log_denom, pos_mean)?;
    let n_valid = counts.iter().filter(|&&c| c > 0).count();
    let valid: Vec<T> =
        counts.iter().map(|&c| if c > 0 { T::ONE } else { T::ZERO }).collect();
    let valid_node = g.constant(Tensor::from_vec(&[n], valid));
    let masked = g.mul(per_anchor, valid_node)?;
    let total = g.sum(masked, &[0])?;
    Ok((g.scale(total, T::from_f64(1.0 / n_valid as f64)), false))
}

fn no_positive_anchor(labels: &[usize]) -> bool {
    labels
        .iter()
        .enumerate()
        .all(|(i, l)| !labels.iter().enumerate().any(|(j, m)| i != j && l == m))
}

/// Log-domain exclusion mask: zero off the diagonal, `-inf` on it.
fn log_mask<T: Scalar>(n: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        m.data_mut()[i * n + i] = T::from_f64(f64::NEG_INFINITY);
    }
    m
}

/// Supervised contrastive loss: mean over anchors with a non-empty positive
/// set of `-log(exp(s_ip) / sum_{a != i} exp(s_ia))`, averaged over each
/// anchor's positives. Returns the scalar node and a degenerate-batch flag
/// (true when no anchor has a positive; the loss is then zero).
pub fn scl_loss<T: Scalar>(
    g: &mut Graph<T>,
    z: NodeId,
    labels: &[usize],
    tau: f64,
) -> Result<(NodeId, bool)> {
    if no_positive_anchor(labels) {
        return Ok((g.scalar(T::ZERO), true));
    }
    let n = labels.len();
    let s = similarity(g, z, tau)?;
    let mask = g.constant(log_mask::<T>(n));
    let adjusted = g.add(s, mask)?;
    anchor_mean(g, s, adjusted, labels)
}

/// Log-domain Gaussian weights `-(s - eta)^2 / (2 eta^2)` of a similarity
/// matrix; the stable counterpart of [`gaussian_weights`].
pub fn gaussian_log_weights<T: Scalar>(s: &Tensor<T>, eta: f64) -> Tensor<T> {
    let inv = -1.0 / (2.0 * eta * eta);
    s.map(|v| {
        let d = v.to_f64() - eta;
        T::from_f64(d * d * inv)
    })
}

/// Distributionally-robust contrastive loss: as [`scl_loss`] but every
/// candidate in the denominator carries its Gaussian similarity weight.
/// Weights are constants under backpropagation unless
/// `differentiable_weights` is set.
pub fn dsc_loss<T: Scalar>(
    g: &mut Graph<T>,
    z: NodeId,
    labels: &[usize],
    cfg: &DsmConfig,
) -> Result<(NodeId, bool)> {
    if no_positive_anchor(labels) {
        return Ok((g.scalar(T::ZERO), true));
    }
    let n = labels.len();
    let s = similarity(g, z, cfg.tau)?;
    let adjusted = if cfg.uniform_weights {
        let mask = g.constant(log_mask::<T>(n));
        g.add(s, mask)?
    } else if cfg.differentiable_weights {
        let centered = g.add_const(s, T::from_f64(-cfg.eta));
        let sq = g.square(centered)?;
        let log_w = g.scale(sq, T::from_f64(-1.0 / (2.0 * cfg.eta * cfg.eta)));
        let weighted = g.add(s, log_w)?;
        let mask = g.constant(log_mask::<T>(n));
        g.add(weighted, mask)?
    } else {
        // weights from the current similarities, constant to backprop
        let log_w = gaussian_log_weights(g.value(s), cfg.eta);
        add_frozen_weights(g, s, log_w)?
    };
    anchor_mean(g, s, adjusted, labels)
}

/// Robust loss with an externally fixed log-weight matrix. This is the
/// function the default (constant-weight) mode actually differentiates, so
/// finite-difference checks of that mode must difference it with the same
/// frozen weights.
pub fn dsc_loss_frozen<T: Scalar>(
    g: &mut Graph<T>,
    z: NodeId,
    labels: &[usize],
    tau: f64,
    log_w: &Tensor<T>,
) -> Result<(NodeId, bool)> {
    if no_positive_anchor(labels) {
        return Ok((g.scalar(T::ZERO), true));
    }
    let s = similarity(g, z, tau)?;
    let adjusted = add_frozen_weights(g, s, log_w.clone())?;
    anchor_mean(g, s, adjusted, labels)
}

fn add_frozen_weights<T: Scalar>(
    g: &mut Graph<T>,
    s: NodeId,
    mut log_w: Tensor<T>,
) -> Result<NodeId> {
    let n = g.shape(s)[0];
    for i in 0..n {
        log_w.data_mut()[i * n + i] = T::from_f64(f64::NEG_INFINITY);
    }
    let lw = g.constant(log_w);
    g.add(s, lw)
}

/// Trace of the biased covariance of the embedding rows; equals the mean
/// squared distance of rows to their mean. Nonnegative, zero iff all rows
/// are identical.
pub fn ib_penalty<T: Scalar>(g: &mut Graph<T>, z: NodeId) -> Result<NodeId> {
    let shape = g.shape(z).to_vec();
    let (n, _d) = (shape[0], shape[1]);
    let mean = g.mean(z, &[0])?;
    let mean_b = g.expand(mean, &shape, &[1])?;
    let centered = g.sub(z, mean_b)?;
    let sq = g.square(centered)?;
    let total = g.sum(sq, &[0, 1])?;
    Ok(g.scale(total, T::from_f64(1.0 / n as f64)))
}

/// Robust contrastive loss plus the weighted covariance-trace penalty.
pub fn ib_dsc_loss<T: Scalar>(
    g: &mut Graph<T>,
    z: NodeId,
    labels: &[usize],
    cfg: &DsmConfig,
) -> Result<(NodeId, bool)> {
    let (dsc, degenerate) = dsc_loss(g, z, labels, cfg)?;
    let ib = ib_penalty(g, z)?;
    let ib_scaled = g.scale(ib, T::from_f64(cfg.beta_ib));
    Ok((g.add(dsc, ib_scaled)?, degenerate))
}

/// Mean cross-entropy of logits `[B, K]` against integer labels.
pub fn cross_entropy<T: Scalar>(
    g: &mut Graph<T>,
    logits: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    let shape = g.shape(logits).to_vec();
    let (b, k) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(EngineError::ShapeMismatch {
            op: "cross_entropy",
            details: format!("logits {:?} vs {} labels", shape, labels.len()),
        });
    }
    for &l in labels {
        if l >= k {
            return Err(EngineError::InvalidConfig(format!("label {l} out of range for {k} classes")));
        }
    }
    // shift by the row max; the shift's gradient contributions cancel exactly
    let m = g.max_reduce(logits, &[1])?;
    let m_b = g.expand(m, &shape, &[0])?;
    let shifted = g.sub(logits, m_b)?;
    let exp_s = g.exp(shifted);
    let sum_exp = g.sum(exp_s, &[1])?;
    let log_sum = g.log(sum_exp);

    let mut onehot = Tensor::zeros(&shape);
    for (i, &l) in labels.iter().enumerate() {
        onehot.data_mut()[i * k + l] = T::ONE;
    }
    let oh = g.constant(onehot);
    let picked = g.mul(shifted, oh)?;
    let picked_sum = g.sum(picked, &[1])?;
    let per_sample = g.sub(log_sum, picked_sum)?;
    g.mean(per_sample, &[0])
}

// ---- host-side wrappers ------------------------------------------------------

fn eval_scalar<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    f: impl FnOnce(&mut Graph<T>, NodeId) -> Result<(NodeId, bool)>,
) -> Result<(T, bool)> {
    let mut g = Graph::new();
    let z = g.constant(batch.z().clone());
    let (node, flag) = f(&mut g, z)?;
    Ok((g.value(node).item(), flag))
}

pub fn scl_loss_value<T: Scalar>(batch: &EmbeddingBatch<T>, tau: f64) -> Result<(T, bool)> {
    eval_scalar(batch, |g, z| scl_loss(g, z, batch.labels(), tau))
}

pub fn dsc_loss_value<T: Scalar>(batch: &EmbeddingBatch<T>, cfg: &DsmConfig) -> Result<(T, bool)> {
    eval_scalar(batch, |g, z| dsc_loss(g, z, batch.labels(), cfg))
}

pub fn ib_penalty_value<T: Scalar>(batch: &EmbeddingBatch<T>) -> Result<T> {
    let mut g = Graph::new();
    let z = g.constant(batch.z().clone());
    let node = ib_penalty(&mut g, z)?;
    Ok(g.value(node).item())
}

pub fn ib_dsc_loss_value<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    cfg: &DsmConfig,
) -> Result<(T, bool)> {
    eval_scalar(batch, |g, z| ib_dsc_loss(g, z, batch.labels(), cfg))
}

// ---- gradient-driven scaling ---------------------------------------------------

/// The loss-weight pair derived from a gradient norm. The stored weights
/// always satisfy `lambda_ce = g/(g+1) * alpha` and
/// `lambda_sc = 1/(g+1) * beta` for the stored `g`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingState {
    pub g: f64,
    pub lambda_ce: f64,
    pub lambda_sc: f64,
}

impl ScalingState {
    fn from_norm(g: f64, cfg: &DsmConfig) -> Self {
        ScalingState {
            g,
            lambda_ce: g / (g + 1.0) * cfg.alpha_base,
            lambda_sc: 1.0 / (g + 1.0) * cfg.beta_base,
        }
    }

    /// Step-zero state: the gradient norm is defined as one, so the first
    /// step weighs both losses at half their base scale.
    pub fn initial(cfg: &DsmConfig) -> Self {
        Self::from_norm(1.0, cfg)
    }

    /// Advances the stale-by-one scheme: the weights for this step come from
    /// the previous step's gradient norm of the total objective.
    pub fn update(&self, grad_norm_prev: f64, cfg: &DsmConfig) -> Result<ScalingState> {
        if !grad_norm_prev.is_finite() || grad_norm_prev < 0.0 {
            return Err(EngineError::InvalidConfig(format!(
                "gradient norm must be finite and nonnegative, got {grad_norm_prev}"
            )));
        }
        Ok(Self::from_norm(grad_norm_prev, cfg))
    }

    /// Recomputes the weights from the stored norm; bitwise-equal to the
    /// stored fields by construction.
    pub fn consistent_with(&self, cfg: &DsmConfig) -> bool {
        let again = Self::from_norm(self.g, cfg);
        again.lambda_ce.to_bits() == self.lambda_ce.to_bits()
            && again.lambda_sc.to_bits() == self.lambda_sc.to_bits()
    }
}

/// Combined objective value on the host.
pub fn total_loss(ce: f64, ib_dsc: f64, state: &ScalingState) -> f64 {
    state.lambda_ce * ce + state.lambda_sc * ib_dsc
}

/// Combined objective on the tape; the weights enter as constants, so no
/// gradient flows through the scaling itself.
pub fn total_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    ce: NodeId,
    ib_dsc: NodeId,
    state: &ScalingState,
) -> Result<NodeId> {
    let ce_w = g.scale(ce, T::from_f64(state.lambda_ce));
    let sc_w = g.scale(ib_dsc, T::from_f64(state.lambda_sc));
    g.add(ce_w, sc_w)
}
