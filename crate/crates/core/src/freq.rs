//! Frequency attention branch.
//!
//! Pipeline per batch: framewise DCT + learnable channel mixing, a
//! distribution-aware adversarial perturbation of the spectral features, a
//! variance-adaptive `tanh` fitting stage, spatial self-attention over each
//! frame, and a sigmoid-gated residual merge with the input.

use std::sync::Arc;

use crate::dct::DctPlan;
use crate::graph::{Graph, NodeId, Result};
use crate::init;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Numerical floor inside the variance-adaptive scaling.
pub const DYN_FIT_EPS: f64 = 1e-5;

/// Intermediates of one branch evaluation, as tape handles.
#[derive(Debug)]
pub struct FreqState {
    pub f_dct: NodeId,
    pub f_adv: NodeId,
    pub f_dyn: NodeId,
    pub f_att: NodeId,
    pub x_s: NodeId,
    /// Per-sample spectral deviation scalars `[B]` feeding the global shift.
    pub sample_dev: NodeId,
}

/// Configuration + parameter naming for the branch. Parameters live in a
/// [`ParamStore`]; this struct is stateless during evaluation and safe to
/// share across threads.
pub struct FreqBranch<T: Scalar> {
    channels: usize,
    plan: Arc<DctPlan<T>>,
    prefix: String,
    /// Fixed adversarial budget; never a learnable parameter.
    pub epsilon_adv: f64,
    /// Variance granularity for the fitting stage: per frame `(b, t)` over
    /// `(C, H, W)` when true (default), per sample `b` over `(T, C, H, W)`
    /// when false.
    pub variance_per_frame: bool,
}

impl<T: Scalar> FreqBranch<T> {
    pub fn new(prefix: &str, channels: usize, height: usize, width: usize) -> Self {
        FreqBranch {
            channels,
            plan: DctPlan::new(height, width),
            prefix: prefix.to_string(),
            epsilon_adv: 0.03,
            variance_per_frame: true,
        }
    }

    fn name(&self, field: &str) -> String {
        format!("{}.{}", self.prefix, field)
    }

    pub fn param_names(&self) -> Vec<String> {
        ["alpha_adv", "beta_adv", "alpha_dyn", "gamma_dyn", "beta_dyn", "mix", "attn_q", "attn_k", "attn_v"]
            .iter()
            .map(|f| self.name(f))
            .collect()
    }

    /// Registers the branch parameters, starting near an identity residual:
    /// small perturbation weights, neutral fitting affine, identity mixing,
    /// small random attention projections.
    pub fn register(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        let c = self.channels;
        store.register(&self.name("alpha_adv"), Tensor::scalar(T::from_f64(0.1)))?;
        store.register(&self.name("beta_adv"), Tensor::scalar(T::from_f64(0.01)))?;
        store.register(&self.name("alpha_dyn"), Tensor::scalar(T::ONE))?;
        store.register(&self.name("gamma_dyn"), Tensor::scalar(T::ONE))?;
        store.register(&self.name("beta_dyn"), Tensor::scalar(T::ZERO))?;
        store.register(&self.name("mix"), init::eye_like(c, c))?;
        for proj in ["attn_q", "attn_k", "attn_v"] {
            let name = self.name(proj);
            let mut rng = init::rng_for(seed, &name);
            store.register(&name, init::normal_tensor(&mut rng, &[c, c], 0.02))?;
        }
        Ok(())
    }

    /// Framewise DCT followed by learnable 1x1 channel mixing.
    pub fn extract_freq(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let spec = g.dct_frames(x, &self.plan)?;
        let mix = g.param(store, &self.name("mix"))?;
        g.channel_mix(spec, mix)
    }

    /// Mini-batch mean of the spectral features over the batch axis.
    pub fn batch_mean(&self, g: &mut Graph<T>, f_dct: NodeId) -> Result<NodeId> {
        g.mean(f_dct, &[0])
    }

    /// Adversarial feature: sign-directed budget plus a per-sample global
    /// deviation shift. Returns the perturbed features and the `[B]`
    /// deviation scalars. With a single-sample batch the deviation is zero.
    pub fn perturb(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        f_dct: NodeId,
        batch_mean: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let shape = g.shape(f_dct).to_vec();
        let sign_f = g.sign(f_dct);

        let mean_b = g.expand(batch_mean, &shape, &[1, 2, 3, 4])?;
        let centered = g.sub(f_dct, mean_b)?;
        let dev = g.l2_norm(centered, &[1, 2, 3, 4])?;
        let dev_b = g.expand(dev, &shape, &[0])?;

        let alpha = g.param(store, &self.name("alpha_adv"))?;
        let alpha_b = g.expand(alpha, &shape, &[])?;
        let sign_scaled = g.scale(sign_f, T::from_f64(self.epsilon_adv));
        let budget = g.mul(alpha_b, sign_scaled)?;

        let beta = g.param(store, &self.name("beta_adv"))?;
        let beta_b = g.expand(beta, &shape, &[])?;
        let shift_dir = g.mul(sign_f, dev_b)?;
        let shift = g.mul(beta_b, shift_dir)?;

        let stepped = g.add(f_dct, budget)?;
        let f_adv = g.add(stepped, shift)?;
        Ok((f_adv, dev))
    }

    /// Variance-adaptive activation: `tanh(alpha / sqrt(var + eps) * x) *
    /// gamma + beta`.
    pub fn dyn_fit(&self, g: &mut Graph<T>, store: &ParamStore<T>, f_adv: NodeId) -> Result<NodeId> {
        let shape = g.shape(f_adv).to_vec();
        let (axes, map): (&[usize], &[usize]) = if self.variance_per_frame {
            (&[2, 3, 4], &[0, 1])
        } else {
            (&[1, 2, 3, 4], &[0])
        };
        let var = g.variance(f_adv, axes)?;
        let var_eps = g.add_const(var, T::from_f64(DYN_FIT_EPS));
        let log_v = g.log(var_eps);
        let neg_half_log = g.scale(log_v, T::from_f64(-0.5));
        let inv_std = g.exp(neg_half_log);
        let inv_std_b = g.expand(inv_std, &shape, map)?;

        let alpha = g.param(store, &self.name("alpha_dyn"))?;
        let alpha_b = g.expand(alpha, &shape, &[])?;
        let gain = g.mul(alpha_b, inv_std_b)?;
        let scaled = g.mul(gain, f_adv)?;
        let t = g.tanh(scaled);

        let gamma = g.param(store, &self.name("gamma_dyn"))?;
        let gamma_b = g.expand(gamma, &shape, &[])?;
        let stretched = g.mul(t, gamma_b)?;
        let beta = g.param(store, &self.name("beta_dyn"))?;
        let beta_b = g.expand(beta, &shape, &[])?;
        g.add(stretched, beta_b)
    }

    /// Single-head scaled dot-product self-attention over the H*W spatial
    /// tokens of each frame, embedding dimension C.
    pub fn attention(&self, g: &mut Graph<T>, store: &ParamStore<T>, f_dyn: NodeId) -> Result<NodeId> {
        let shape = g.shape(f_dyn).to_vec();
        let (b, t, c, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
        let tokens_late = g.permute(f_dyn, &[0, 1, 3, 4, 2])?;
        let tokens = g.reshape(tokens_late, &[b * t, h * w, c])?;

        let wq = g.param(store, &self.name("attn_q"))?;
        let wk = g.param(store, &self.name("attn_k"))?;
        let wv = g.param(store, &self.name("attn_v"))?;
        let q = g.matmul(tokens, wq)?;
        let k = g.matmul(tokens, wk)?;
        let v = g.matmul(tokens, wv)?;

        let scores = g.matmul_nt(q, k)?;
        let scaled = g.scale(scores, T::from_f64(1.0 / (c as f64).sqrt()));
        let attn = g.softmax(scaled, 2)?;
        let mixed = g.matmul(attn, v)?;

        let back = g.reshape(mixed, &[b, t, h, w, c])?;
        g.permute(back, &[0, 1, 4, 2, 3])
    }

    /// Full branch: returns the gated residual output and all intermediates.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<(NodeId, FreqState)> {
        let f_dct = self.extract_freq(g, store, x)?;
        let mean = self.batch_mean(g, f_dct)?;
        let (f_adv, sample_dev) = self.perturb(g, store, f_dct, mean)?;
        let f_dyn = self.dyn_fit(g, store, f_adv)?;
        let f_att = self.attention(g, store, f_dyn)?;
        let gate = g.sigmoid(f_att);
        let gated = g.mul(x, gate)?;
        let x_s = g.add(gated, x)?;
        Ok((x_s, FreqState { f_dct, f_adv, f_dyn, f_att, x_s, sample_dev }))
    }
}
