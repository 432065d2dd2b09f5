//! Adaptive fusion of the temporal and frequency branch outputs.
//!
//! Each branch is pooled to a per-sample channel descriptor, projected to a
//! sigmoid gate, and the two gates are renormalized to sum to one. The fused
//! feature is the per-sample convex combination of the branches.

use crate::graph::{Graph, NodeId, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct FusionGate {
    channels: usize,
    prefix: String,
    /// Alternative normalization: a two-logit softmax over the raw gate
    /// logits instead of renormalized sigmoids.
    pub softmax_weights: bool,
}

/// Per-sample fusion weights as tape handles, each `[B]`.
#[derive(Debug)]
pub struct FusionWeights {
    pub lambda_t: NodeId,
    pub lambda_s: NodeId,
}

impl FusionGate {
    pub fn new(prefix: &str, channels: usize) -> Self {
        FusionGate { channels, prefix: prefix.to_string(), softmax_weights: false }
    }

    fn name(&self, field: &str) -> String {
        format!("{}.{}", self.prefix, field)
    }

    pub fn param_names(&self) -> Vec<String> {
        ["w_t", "b_t", "w_s", "b_s"].iter().map(|f| self.name(f)).collect()
    }

    /// Zero initialization: both gates start at 0.5.
    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.register(&self.name("w_t"), Tensor::zeros(&[self.channels]))?;
        store.register(&self.name("b_t"), Tensor::scalar(T::ZERO))?;
        store.register(&self.name("w_s"), Tensor::zeros(&[self.channels]))?;
        store.register(&self.name("b_s"), Tensor::scalar(T::ZERO))?;
        Ok(())
    }

    fn gate_logit<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        w_name: &str,
        b_name: &str,
    ) -> Result<NodeId> {
        let b_dim = g.shape(x)[0];
        let pooled = g.mean(x, &[1, 3, 4])?;
        let w = g.param(store, w_name)?;
        let w_col = g.reshape(w, &[self.channels, 1])?;
        let proj = g.matmul(pooled, w_col)?;
        let flat = g.reshape(proj, &[b_dim])?;
        let b = g.param(store, b_name)?;
        let b_b = g.expand(b, &[b_dim], &[])?;
        g.add(flat, b_b)
    }

    /// Fuses the branches: `lambda_t * x_t + lambda_s * x_s` with per-sample
    /// weights normalized to sum to one.
    pub fn fuse<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x_t: NodeId,
        x_s: NodeId,
    ) -> Result<(NodeId, FusionWeights)> {
        let shape = g.shape(x_t).to_vec();
        let b_dim = shape[0];
        let logit_t = self.gate_logit(g, store, x_t, &self.name("w_t"), &self.name("b_t"))?;
        let logit_s = self.gate_logit(g, store, x_s, &self.name("w_s"), &self.name("b_s"))?;

        let (lambda_t, lambda_s) = if self.softmax_weights {
            let lt = g.reshape(logit_t, &[b_dim, 1])?;
            let ls = g.reshape(logit_s, &[b_dim, 1])?;
            let both = g.concat(&[lt, ls], 1)?;
            let soft = g.softmax(both, 1)?;
            let wt = g.slice(soft, 1, 0, 1)?;
            let ws = g.slice(soft, 1, 1, 1)?;
            (g.reshape(wt, &[b_dim])?, g.reshape(ws, &[b_dim])?)
        } else {
            let raw_t = g.sigmoid(logit_t);
            let raw_s = g.sigmoid(logit_s);
            // both sigmoids are positive, so the normalizer never vanishes
            let total = g.add(raw_t, raw_s)?;
            (g.div(raw_t, total)?, g.div(raw_s, total)?)
        };

        let lt_b = g.expand(lambda_t, &shape, &[0])?;
        let ls_b = g.expand(lambda_s, &shape, &[0])?;
        let wt = g.mul(lt_b, x_t)?;
        let ws = g.mul(ls_b, x_s)?;
        let fused = g.add(wt, ws)?;
        Ok((fused, FusionWeights { lambda_t, lambda_s }))
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

    fn gate_and_store(c: usize) -> (FusionGate, ParamStore<f64>) {
        let gate = FusionGate::new("fuse", c);
        let mut store = ParamStore::new();
        gate.register(&mut store).unwrap();
        (gate, store)
    }

    fn randomize(store: &mut ParamStore<f64>, seed: u64) {
        for name in ["fuse.w_t", "fuse.b_t", "fuse.w_s", "fuse.b_s"] {
            let mut rng = rng_for(seed, name);
            for v in store.get_mut(name).unwrap().value.data_mut() {
                *v = 2.0 * uniform01(&mut rng) - 1.0;
            }
        }
    }

    #[test]
    fn equal_inputs_fuse_to_themselves() {
        let (gate, mut store) = gate_and_store(3);
        randomize(&mut store, 1);
        let mut rng = rng_for(2, "equal");
        let x = rand_tensor(&mut rng, &[2, 2, 3, 2, 2]);
        let mut g = Graph::new();
        let xn = g.input(x.clone(), false);
        let (fused, _) = gate.fuse(&mut g, &store, xn, xn).unwrap();
        for (a, &b) in g.value(fused).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_parameters_give_half_half_weights() {
        let (gate, mut store) = gate_and_store(2);
        // w_t = w_s, b_t = b_s (nonzero to make it non-trivial)
        let mut rng = rng_for(3, "sym");
        let shared = rand_tensor(&mut rng, &[2]);
        store.get_mut("fuse.w_t").unwrap().value = shared.clone();
        store.get_mut("fuse.w_s").unwrap().value = shared;
        store.get_mut("fuse.b_t").unwrap().value.data_mut()[0] = 0.3;
        store.get_mut("fuse.b_s").unwrap().value.data_mut()[0] = 0.3;
        let x = rand_tensor(&mut rng, &[3, 2, 2, 2, 2]);
        let mut g = Graph::new();
        let xn = g.input(x, false);
        let (_, w) = gate.fuse(&mut g, &store, xn, xn).unwrap();
        for &v in g.value(w.lambda_t).data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
        for &v in g.value(w.lambda_s).data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_evaluation_with_explicit_normalization() {
        let (gate, mut store) = gate_and_store(2);
        randomize(&mut store, 4);
        let mut rng = rng_for(5, "oracle");
        let x_t = rand_tensor(&mut rng, &[2, 3, 2, 2, 2]);
        let x_s = rand_tensor(&mut rng, &[2, 3, 2, 2, 2]);
        let mut g = Graph::new();
        let tn = g.input(x_t.clone(), false);
        let sn = g.input(x_s.clone(), false);
        let (fused, w) = gate.fuse(&mut g, &store, tn, sn).unwrap();

        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        let pool = |x: &Tensor<f64>, b: usize| -> Vec<f64> {
            // mean over (T, H, W) for each channel
            let mut acc = vec![0.0; 2];
            for t in 0..3 {
                for c in 0..2 {
                    for p in 0..4 {
                        acc[c] += x.data()[((b * 3 + t) * 2 + c) * 4 + p];
                    }
                }
            }
            acc.iter().map(|v| v / 12.0).collect()
        };
        for b in 0..2 {
            let pt = pool(&x_t, b);
            let ps = pool(&x_s, b);
            let wt = store.get("fuse.w_t").unwrap().value.data();
            let ws = store.get("fuse.w_s").unwrap().value.data();
            let raw_t = sigmoid(
                pt.iter().zip(wt).map(|(a, b)| a * b).sum::<f64>()
                    + store.get("fuse.b_t").unwrap().value.item(),
            );
            let raw_s = sigmoid(
                ps.iter().zip(ws).map(|(a, b)| a * b).sum::<f64>()
                    + store.get("fuse.b_s").unwrap().value.item(),
            );
            let lt = raw_t / (raw_t + raw_s);
            let ls = raw_s / (raw_t + raw_s);
            assert!((g.value(w.lambda_t).data()[b] - lt).abs() < 1e-12);
            assert!((g.value(w.lambda_s).data()[b] - ls).abs() < 1e-12);
            for t in 0..3 {
                for i in 0..8 {
                    let idx = (b * 3 + t) * 8 + i;
                    let expect = lt * x_t.data()[idx] + ls * x_s.data()[idx];
                    assert!((g.value(fused).data()[idx] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn weights_sum_to_one_and_live_in_the_open_interval() {
        for softmax in [false, true] {
            let (mut gate, mut store) = gate_and_store(2);
            gate.softmax_weights = softmax;
            randomize(&mut store, 6);
            let mut rng = rng_for(7, "norm");
            let x_t = rand_tensor(&mut rng, &[4, 2, 2, 2, 2]);
            let x_s = rand_tensor(&mut rng, &[4, 2, 2, 2, 2]);
            let mut g = Graph::new();
            let tn = g.input(x_t, false);
            let sn = g.input(x_s, false);
            let (_, w) = gate.fuse(&mut g, &store, tn, sn).unwrap();
            for b in 0..4 {
                let lt = g.value(w.lambda_t).data()[b];
                let ls = g.value(w.lambda_s).data()[b];
                assert!(lt > 0.0 && lt < 1.0);
                assert!(ls > 0.0 && ls < 1.0);
                assert!((lt + ls - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fused_output_is_elementwise_convex() {
        let (gate, mut store) = gate_and_store(2);
        randomize(&mut store, 8);
        let mut rng = rng_for(9, "convex");
        let x_t = rand_tensor(&mut rng, &[3, 2, 2, 2, 2]);
        let x_s = rand_tensor(&mut rng, &[3, 2, 2, 2, 2]);
        let mut g = Graph::new();
        let tn = g.input(x_t.clone(), false);
        let sn = g.input(x_s.clone(), false);
        let (fused, _) = gate.fuse(&mut g, &store, tn, sn).unwrap();
        for i in 0..x_t.numel() {
            let lo = x_t.data()[i].min(x_s.data()[i]);
            let hi = x_t.data()[i].max(x_s.data()[i]);
            let v = g.value(fused).data()[i];
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn swapping_branches_and_parameters_swaps_weights() {
        let (gate, mut store) = gate_and_store(2);
        randomize(&mut store, 10);
        let mut rng = rng_for(11, "swap");
        let x_t = rand_tensor(&mut rng, &[2, 2, 2, 2, 2]);
        let x_s = rand_tensor(&mut rng, &[2, 2, 2, 2, 2]);

        let mut g = Graph::new();
        let tn = g.input(x_t.clone(), false);
        let sn = g.input(x_s.clone(), false);
        let (fused, w) = gate.fuse(&mut g, &store, tn, sn).unwrap();

        // swap the gate parameter pairs and the branch order
        let mut swapped = ParamStore::new();
        swapped.register("fuse.w_t", store.get("fuse.w_s").unwrap().value.clone()).unwrap();
        swapped.register("fuse.b_t", store.get("fuse.b_s").unwrap().value.clone()).unwrap();
        swapped.register("fuse.w_s", store.get("fuse.w_t").unwrap().value.clone()).unwrap();
        swapped.register("fuse.b_s", store.get("fuse.b_t").unwrap().value.clone()).unwrap();
        let mut g2 = Graph::new();
        let sn2 = g2.input(x_s, false);
        let tn2 = g2.input(x_t, false);
        let (fused2, w2) = gate.fuse(&mut g2, &swapped, sn2, tn2).unwrap();

        for b in 0..2 {
            assert_eq!(
                g.value(w.lambda_t).data()[b].to_bits(),
                g2.value(w2.lambda_s).data()[b].to_bits()
            );
        }
        for (a, b) in g.value(fused).data().iter().zip(g2.value(fused2).data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (gate, mut store) = gate_and_store(2);
        randomize(&mut store, 12);
        let mut rng = rng_for(13, "fd");
        let x_t = rand_tensor(&mut rng, &[2, 2, 2, 2, 2]);
        let x_s = rand_tensor(&mut rng, &[2, 2, 2, 2, 2]);
        let report = crate::graph::grad_check(&store, 1e-4, |g, s| {
            let tn = g.input(x_t.clone(), false);
            let sn = g.input(x_s.clone(), false);
            let (fused, _) = gate.fuse(g, s, tn, sn)?;
            g.sum(fused, &[0, 1, 2, 3, 4])
        })
        .unwrap();
        assert!(report.all_pass(), "{report}");
    }
}
