//! Temporal attention branch.
//!
//! Per-frame pooled descriptors feed a deviation analysis: an absolute
//! distance to the sequence mean flags drifting frames, while the local
//! frame-to-frame difference compensates so genuine transitions are not
//! suppressed. A learnable gate combines both with the normalized
//! descriptors; self-attention over temporal tokens refines the gate into
//! the final per-frame attention scores used in the residual merge.

use crate::graph::{Graph, NodeId, Result};
use crate::init;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Sequences with descriptor std below this are treated as constant and
/// z-score to exactly zero.
pub const ZSCORE_STD_GUARD: f64 = 1e-6;

#[derive(Debug)]
pub struct TemporalState {
    /// Mean-pooled descriptor per frame `[B, T]`.
    pub a_avg: NodeId,
    /// Max-pooled descriptor per frame `[B, T]`.
    pub a_max: NodeId,
    /// Absolute deviation from the sequence mean `[B, T]`.
    pub w_global: NodeId,
    /// Absolute frame-to-frame difference, zero at the first frame `[B, T]`.
    pub d_local: NodeId,
    /// Pre-attention sigmoid gate `[B, T]`.
    pub gate: NodeId,
    /// Final per-frame attention scores `[B, T]`.
    pub ta: NodeId,
    pub x_t: NodeId,
}

pub struct TemporalBranch {
    channels: usize,
    prefix: String,
}

impl TemporalBranch {
    pub fn new(prefix: &str, channels: usize) -> Self {
        TemporalBranch { channels, prefix: prefix.to_string() }
    }

    fn name(&self, field: &str) -> String {
        format!("{}.{}", self.prefix, field)
    }

    pub fn param_names(&self) -> Vec<String> {
        ["alpha", "beta", "gamma", "delta", "attn_q", "attn_k", "attn_v"]
            .iter()
            .map(|f| self.name(f))
            .collect()
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        store.register(&self.name("alpha"), Tensor::scalar(T::ONE))?;
        store.register(&self.name("beta"), Tensor::scalar(T::ONE))?;
        store.register(&self.name("gamma"), Tensor::scalar(T::ONE))?;
        store.register(&self.name("delta"), Tensor::scalar(T::from_f64(0.5)))?;
        let c = self.channels;
        for proj in ["attn_q", "attn_k", "attn_v"] {
            let name = self.name(proj);
            let mut rng = init::rng_for(seed, &name);
            store.register(&name, init::normal_tensor(&mut rng, &[c, c], 0.02))?;
        }
        Ok(())
    }

    /// Global average and max pooling over `(C, H, W)` per frame.
    pub fn descriptors<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let a_avg = g.mean(x, &[2, 3, 4])?;
        let a_max = g.max_reduce(x, &[2, 3, 4])?;
        Ok((a_avg, a_max))
    }

    /// Deviation terms from the averaged descriptors: distance to the
    /// sequence mean, and the local temporal difference (zero at t = 0).
    pub fn deviations<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        a_avg: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let shape = g.shape(a_avg).to_vec();
        let (b, t) = (shape[0], shape[1]);

        let mean_t = g.mean(a_avg, &[1])?;
        let mean_b = g.expand(mean_t, &[b, t], &[0])?;
        let centered = g.sub(a_avg, mean_b)?;
        let w_global = g.abs(centered)?;

        let d_local = if t == 1 {
            g.constant(Tensor::zeros(&[b, 1]))
        } else {
            let prev = g.slice(a_avg, 1, 0, t - 1)?;
            let cur = g.slice(a_avg, 1, 1, t - 1)?;
            let diff = g.sub(cur, prev)?;
            let mag = g.abs(diff)?;
            let zero_col = g.constant(Tensor::zeros(&[b, 1]));
            g.concat(&[zero_col, mag], 1)?
        };
        Ok((w_global, d_local))
    }

    /// Per-sequence z-score over the time axis. Sequences whose descriptor
    /// std falls under the guard normalize to exactly zero.
    fn zscore<T: Scalar>(&self, g: &mut Graph<T>, v: NodeId) -> Result<NodeId> {
        let shape = g.shape(v).to_vec();
        let (b, t) = (shape[0], shape[1]);
        let mean = g.mean(v, &[1])?;
        let mean_b = g.expand(mean, &[b, t], &[0])?;
        let centered = g.sub(v, mean_b)?;

        let var = g.variance(v, &[1])?;
        let mask_vals: Vec<T> = g
            .value(var)
            .data()
            .iter()
            .map(|&vv| {
                if vv.to_f64().sqrt() >= ZSCORE_STD_GUARD { T::ONE } else { T::ZERO }
            })
            .collect();
        let complement: Vec<T> =
            mask_vals.iter().map(|&m| T::ONE - m).collect();
        let mask = g.constant(Tensor::from_vec(&[b], mask_vals));
        let off = g.constant(Tensor::from_vec(&[b], complement));

        let var_guarded = g.add_const(var, T::from_f64(1e-12));
        let log_v = g.log(var_guarded);
        let half_log = g.scale(log_v, T::from_f64(0.5));
        let std = g.exp(half_log);
        // masked lanes divide by one and multiply by zero: exact zeros with
        // zero gradient, no blowup from the tiny std
        let std_masked = g.mul(std, mask)?;
        let denom = g.add(std_masked, off)?;
        let denom_b = g.expand(denom, &[b, t], &[0])?;
        let z = g.div(centered, denom_b)?;
        let mask_b = g.expand(mask, &[b, t], &[0])?;
        g.mul(z, mask_b)
    }

    /// The sigmoid gate combining normalized descriptors with the deviation
    /// terms: `sigmoid(gamma (alpha z(avg) + beta z(max)) + delta w - d)`.
    pub fn temporal_gate<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        a_avg: NodeId,
        a_max: NodeId,
        w_global: NodeId,
        d_local: NodeId,
    ) -> Result<NodeId> {
        let shape = g.shape(a_avg).to_vec();
        let z_avg = self.zscore(g, a_avg)?;
        let z_max = self.zscore(g, a_max)?;

        let alpha = g.param(store, &self.name("alpha"))?;
        let alpha_b = g.expand(alpha, &shape, &[])?;
        let beta = g.param(store, &self.name("beta"))?;
        let beta_b = g.expand(beta, &shape, &[])?;
        let gamma = g.param(store, &self.name("gamma"))?;
        let gamma_b = g.expand(gamma, &shape, &[])?;
        let delta = g.param(store, &self.name("delta"))?;
        let delta_b = g.expand(delta, &shape, &[])?;

        let wa = g.mul(alpha_b, z_avg)?;
        let wm = g.mul(beta_b, z_max)?;
        let mix = g.add(wa, wm)?;
        let scaled = g.mul(gamma_b, mix)?;
        let glob = g.mul(delta_b, w_global)?;
        let with_glob = g.add(scaled, glob)?;
        let inner = g.sub(with_glob, d_local)?;
        Ok(g.sigmoid(inner))
    }

    /// Self-attention over gated temporal tokens, reduced back to one score
    /// per frame.
    pub fn attention<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        gate: NodeId,
    ) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        let (b, t, c) = (shape[0], shape[1], shape[2]);
        let pooled = g.mean(x, &[3, 4])?;
        let gate_b = g.expand(gate, &[b, t, c], &[0, 1])?;
        let tokens = g.mul(pooled, gate_b)?;

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
        g.mean(mixed, &[2])
    }

    /// Full branch: gated residual merge `x * sigmoid(scores) + x`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<(NodeId, TemporalState)> {
        let shape = g.shape(x).to_vec();
        let (a_avg, a_max) = self.descriptors(g, x)?;
        let (w_global, d_local) = self.deviations(g, a_avg)?;
        let gate = self.temporal_gate(g, store, a_avg, a_max, w_global, d_local)?;
        let ta = self.attention(g, store, x, gate)?;
        let ta_b = g.expand(ta, &shape, &[0, 1])?;
        let sig = g.sigmoid(ta_b);
        let gated = g.mul(x, sig)?;
        let x_t = g.add(gated, x)?;
        Ok((x_t, TemporalState { a_avg, a_max, w_global, d_local, gate, ta, x_t }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{rng_for, uniform01};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| 2.0 * uniform01(rng) - 1.0).collect())
    }

    fn branch_and_store(c: usize) -> (TemporalBranch, ParamStore<f64>) {
        let branch = TemporalBranch::new("temporal", c);
        let mut store = ParamStore::new();
        branch.register(&mut store, 13).unwrap();
        (branch, store)
    }

    #[test]
    fn constant_batch_descriptors_equal_the_constant() {
        let (branch, _) = branch_and_store(2);
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[2, 3, 2, 2, 2], 0.7), false);
        let (a_avg, a_max) = branch.descriptors(&mut g, x).unwrap();
        assert!(g.value(a_avg).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert!(g.value(a_max).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn max_descriptor_finds_known_maximum() {
        let (branch, _) = branch_and_store(1);
        let mut data = vec![0.0; 8];
        data[5] = 1.0;
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[1, 1, 1, 2, 4], data), false);
        let (_, a_max) = branch.descriptors(&mut g, x).unwrap();
        assert_eq!(g.value(a_max).data()[0], 1.0);
    }

    #[test]
    fn descriptors_match_naive_pooling() {
        let (branch, _) = branch_and_store(3);
        let mut rng = rng_for(1, "pool");
        let x = rand_tensor(&mut rng, &[2, 4, 3, 4, 4]);
        let mut g = Graph::new();
        let xn = g.input(x.clone(), false);
        let (a_avg, a_max) = branch.descriptors(&mut g, xn).unwrap();
        let per_frame = 3 * 4 * 4;
        for b in 0..2 {
            for t in 0..4 {
                let s = &x.data()[(b * 4 + t) * per_frame..(b * 4 + t + 1) * per_frame];
                let mean: f64 = s.iter().sum::<f64>() / per_frame as f64;
                let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!((g.value(a_avg).data()[b * 4 + t] - mean).abs() < 1e-12);
                assert_eq!(g.value(a_max).data()[b * 4 + t], max);
            }
        }
    }

    #[test]
    fn constant_sequence_has_zero_deviations() {
        let (branch, _) = branch_and_store(1);
        let mut g = Graph::new();
        let a = g.input(Tensor::full(&[2, 5], 1.3), false);
        let (w, d) = branch.deviations(&mut g, a).unwrap();
        assert!(g.value(w).data().iter().all(|&v| v == 0.0));
        assert!(g.value(d).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_point_sequence_deviations() {
        let (branch, _) = branch_and_store(1);
        let mut g = Graph::new();
        let a = g.input(Tensor::from_vec(&[1, 2], vec![0.0, 2.0]), false);
        let (w, d) = branch.deviations(&mut g, a).unwrap();
        assert_eq!(g.value(w).data(), &[1.0, 1.0]);
        assert_eq!(g.value(d).data(), &[0.0, 2.0]);
    }

    #[test]
    fn deviations_match_direct_formula_on_random_descriptors() {
        let (branch, _) = branch_and_store(1);
        let mut rng = rng_for(2, "dev");
        let a = rand_tensor(&mut rng, &[3, 6]);
        let mut g = Graph::new();
        let an = g.input(a.clone(), false);
        let (w, d) = branch.deviations(&mut g, an).unwrap();
        for b in 0..3 {
            let row = &a.data()[b * 6..(b + 1) * 6];
            let mean: f64 = row.iter().sum::<f64>() / 6.0;
            for t in 0..6 {
                assert!((g.value(w).data()[b * 6 + t] - (row[t] - mean).abs()).abs() < 1e-12);
                let expect_d = if t == 0 { 0.0 } else { (row[t] - row[t - 1]).abs() };
                assert!((g.value(d).data()[b * 6 + t] - expect_d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permuting_frames_permutes_w_global_identically() {
        let (branch, _) = branch_and_store(1);
        let mut rng = rng_for(3, "perm");
        let a = rand_tensor(&mut rng, &[1, 5]);
        let perm = [3usize, 0, 4, 1, 2];
        let permuted =
            Tensor::from_vec(&[1, 5], perm.iter().map(|&p| a.data()[p]).collect());
        let eval = |t: &Tensor<f64>| {
            let mut g = Graph::new();
            let an = g.input(t.clone(), false);
            let (w, _) = branch.deviations(&mut g, an).unwrap();
            g.value(w).data().to_vec()
        };
        let w0 = eval(&a);
        let w1 = eval(&permuted);
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(w1[i].to_bits(), w0[p].to_bits());
        }
    }

    #[test]
    fn constant_sequence_gates_at_one_half() {
        let (branch, store) = branch_and_store(2);
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[2, 4, 2, 2, 2], 0.9), false);
        let (a_avg, a_max) = branch.descriptors(&mut g, x).unwrap();
        let (w, d) = branch.deviations(&mut g, a_avg).unwrap();
        let gate = branch.temporal_gate(&mut g, &store, a_avg, a_max, w, d).unwrap();
        assert!(g.value(gate).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn gate_with_only_local_difference_matches_sigmoid() {
        // gamma = 0 and delta = 0 leaves gate = sigmoid(-d_local)
        let (branch, mut store) = branch_and_store(1);
        store.get_mut("temporal.gamma").unwrap().value.data_mut()[0] = 0.0;
        store.get_mut("temporal.delta").unwrap().value.data_mut()[0] = 0.0;
        let mut g = Graph::new();
        let a_avg = g.input(Tensor::from_vec(&[1, 2], vec![0.0, 2.0]), false);
        let a_max = g.input(Tensor::from_vec(&[1, 2], vec![0.0, 2.0]), false);
        let (w, d) = branch.deviations(&mut g, a_avg).unwrap();
        let gate = branch.temporal_gate(&mut g, &store, a_avg, a_max, w, d).unwrap();
        assert_eq!(g.value(gate).data()[0], 0.5);
        let expect = 1.0 / (1.0 + 2.0f64.exp());
        assert!((g.value(gate).data()[1] - expect).abs() < 1e-12);
        assert!((g.value(gate).data()[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn gate_matches_direct_composition_on_random_input() {
        let (branch, mut store) = branch_and_store(1);
        let mut rng = rng_for(4, "gate-oracle");
        for (name, v) in
            [("alpha", 0.8), ("beta", -0.5), ("gamma", 1.3), ("delta", 0.9)]
        {
            store.get_mut(&format!("temporal.{name}")).unwrap().value.data_mut()[0] = v;
        }
        let a_avg = rand_tensor(&mut rng, &[2, 5]);
        let a_max = rand_tensor(&mut rng, &[2, 5]);
        let mut g = Graph::new();
        let avg_n = g.input(a_avg.clone(), false);
        let max_n = g.input(a_max.clone(), false);
        let (w, d) = branch.deviations(&mut g, avg_n).unwrap();
        let gate = branch.temporal_gate(&mut g, &store, avg_n, max_n, w, d).unwrap();

        // scalar reference composition
        let zscore = |row: &[f64]| -> Vec<f64> {
            let m: f64 = row.iter().sum::<f64>() / row.len() as f64;
            let var: f64 = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / row.len() as f64;
            let std = (var + 1e-12).sqrt();
            if var.sqrt() < ZSCORE_STD_GUARD {
                vec![0.0; row.len()]
            } else {
                row.iter().map(|v| (v - m) / std).collect()
            }
        };
        for b in 0..2 {
            let avg_row = &a_avg.data()[b * 5..(b + 1) * 5];
            let max_row = &a_max.data()[b * 5..(b + 1) * 5];
            let za = zscore(avg_row);
            let zm = zscore(max_row);
            let mean: f64 = avg_row.iter().sum::<f64>() / 5.0;
            for t in 0..5 {
                let wg = (avg_row[t] - mean).abs();
                let dl = if t == 0 { 0.0 } else { (avg_row[t] - avg_row[t - 1]).abs() };
                let inner = 1.3 * (0.8 * za[t] - 0.5 * zm[t]) + 0.9 * wg - dl;
                let expect = 1.0 / (1.0 + (-inner).exp());
                let got = g.value(gate).data()[b * 5 + t];
                assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
            }
        }
    }

    #[test]
    fn gate_monotonicity_in_the_deviation_terms() {
        let (branch, store) = branch_and_store(1);
        let mut rng = rng_for(5, "monotone");
        let a_avg = rand_tensor(&mut rng, &[1, 4]);
        let a_max = rand_tensor(&mut rng, &[1, 4]);
        let w0 = Tensor::from_vec(&[1, 4], vec![0.3, 0.1, 0.5, 0.2]);
        let d0 = Tensor::from_vec(&[1, 4], vec![0.0, 0.4, 0.3, 0.6]);
        let eval = |w: &Tensor<f64>, d: &Tensor<f64>| -> Vec<f64> {
            let mut g = Graph::new();
            let avg_n = g.input(a_avg.clone(), false);
            let max_n = g.input(a_max.clone(), false);
            let wn = g.input(w.clone(), false);
            let dn = g.input(d.clone(), false);
            let gate = branch.temporal_gate(&mut g, &store, avg_n, max_n, wn, dn).unwrap();
            g.value(gate).data().to_vec()
        };
        let base = eval(&w0, &d0);
        let mut d_up = d0.clone();
        d_up.data_mut()[2] += 0.5;
        let with_d = eval(&w0, &d_up);
        assert!(with_d[2] < base[2]);
        let mut w_up = w0.clone();
        w_up.data_mut()[2] += 0.5;
        let with_w = eval(&w_up, &d0);
        // default delta is positive
        assert!(with_w[2] > base[2]);
    }

    #[test]
    fn zero_value_projection_gives_one_and_a_half_x() {
        let (branch, mut store) = branch_and_store(2);
        for v in store.get_mut("temporal.attn_v").unwrap().value.data_mut() {
            *v = 0.0;
        }
        let mut rng = rng_for(6, "residual");
        let x = rand_tensor(&mut rng, &[2, 4, 2, 3, 3]);
        let mut g = Graph::new();
        let xn = g.input(x.clone(), false);
        let (x_t, state) = branch.forward(&mut g, &store, xn).unwrap();
        assert!(g.value(state.ta).data().iter().all(|&v| v == 0.0));
        for (a, &b) in g.value(x_t).data().iter().zip(x.data()) {
            assert!((a - 1.5 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_input_stays_zero_and_bound_holds() {
        let (branch, store) = branch_and_store(2);
        let mut g = Graph::new();
        let xn = g.input(Tensor::zeros(&[1, 3, 2, 2, 2]), false);
        let (x_t, _) = branch.forward(&mut g, &store, xn).unwrap();
        assert!(g.value(x_t).data().iter().all(|&v| v == 0.0));

        for seed in 0..4 {
            let mut rng = rng_for(seed, "bound");
            let x = rand_tensor(&mut rng, &[2, 4, 2, 3, 3]);
            let mut g = Graph::new();
            let xn = g.input(x.clone(), false);
            let (x_t, state) = branch.forward(&mut g, &store, xn).unwrap();
            assert!(g.value(x_t).max_abs() <= 2.0 * x.max_abs() + 1e-12);
            assert!(g.value(state.gate).data().iter().all(|&v| v > 0.0 && v < 1.0));
            assert!(g.value(state.w_global).data().iter().all(|&v| v >= 0.0));
            assert!(g.value(state.d_local).data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn residual_matches_separately_computed_scores() {
        let (branch, store) = branch_and_store(2);
        let mut rng = rng_for(7, "oracle");
        let x = rand_tensor(&mut rng, &[2, 3, 2, 2, 2]);
        let mut g = Graph::new();
        let xn = g.input(x.clone(), false);
        let (x_t, state) = branch.forward(&mut g, &store, xn).unwrap();
        let ta = g.value(state.ta).data().to_vec();
        let per_frame = 2 * 2 * 2;
        for b in 0..2 {
            for t in 0..3 {
                let gate = 1.0 / (1.0 + (-ta[b * 3 + t]).exp());
                for i in 0..per_frame {
                    let idx = (b * 3 + t) * per_frame + i;
                    let expect = x.data()[idx] * gate + x.data()[idx];
                    assert!((g.value(x_t).data()[idx] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn every_parameter_gets_gradient_on_a_generic_batch() {
        let (branch, store) = branch_and_store(2);
        let mut rng = rng_for(8, "alive");
        let x = rand_tensor(&mut rng, &[3, 4, 2, 3, 3]);
        let w = rand_tensor(&mut rng, &[3, 4, 2, 3, 3]);
        let mut g = Graph::new();
        let xn = g.input(x, false);
        let (x_t, _) = branch.forward(&mut g, &store, xn).unwrap();
        let wn = g.constant(w);
        let weighted = g.mul(x_t, wn).unwrap();
        let out = g.sum(weighted, &[0, 1, 2, 3, 4]).unwrap();
        let grads = g.backward(out).unwrap();
        for name in branch.param_names() {
            assert!(grads[&name].max_abs() > 0.0, "parameter {name} has zero gradient");
        }
    }

    #[test]
    fn branch_gradients_match_finite_differences() {
        let (branch, store) = branch_and_store(2);
        let mut rng = rng_for(9, "fd");
        let x = rand_tensor(&mut rng, &[2, 3, 2, 2, 2]);
        let report = crate::graph::grad_check(&store, 1e-4, |g, s| {
            let xn = g.input(x.clone(), false);
            let (x_t, _) = branch.forward(g, s, xn)?;
            g.sum(x_t, &[0, 1, 2, 3, 4])
        })
        .unwrap();
        assert!(report.all_pass(), "{report}");
    }
}
