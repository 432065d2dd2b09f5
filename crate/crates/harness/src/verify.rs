//! Gradient verification suite: analytic gradients against central finite
//! differences, in f64, for the contrastive losses, the combined objective,
//! and the full toy model. Used by both the `grad-check` subcommand and the
//! acceptance tests.

use heterovid_core::graph::{GradCheckReport, grad_check};
use heterovid_core::init::{rng_for, standard_normal};
use heterovid_core::loss::{
    self, DsmConfig, ScalingState, dsc_loss, dsc_loss_frozen, gaussian_log_weights, ib_dsc_loss,
    scl_loss, similarity,
};
use heterovid_core::model::{Model, ModelConfig};
use heterovid_core::params::ParamStore;
use heterovid_core::tensor::{Tensor, VideoBatch};
use heterovid_core::{Graph, NodeId};

use crate::Result;

fn unit_rows(seed: u64, n: usize, d: usize) -> Tensor<f64> {
    let mut rng = rng_for(seed, "verify-embeddings");
    let mut t = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let row: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..d {
            t.data_mut()[i * d + j] = row[j] / norm;
        }
    }
    t
}

fn normalize_rows(
    g: &mut Graph<f64>,
    s: &ParamStore<f64>,
    name: &str,
) -> heterovid_core::graph::Result<NodeId> {
    let raw = g.param(s, name)?;
    let shape = g.shape(raw).to_vec();
    let norms = g.l2_norm(raw, &[1])?;
    let norms_eps = g.add_const(norms, 1e-12);
    let norms_b = g.expand(norms_eps, &shape, &[0])?;
    g.div(raw, norms_b)
}

/// One named gradient check.
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

/// Contrastive-objective gradients w.r.t. the embeddings, `instances` random
/// batches each: the plain loss, the robust loss with frozen weights (the
/// function the default mode differentiates), the robust loss with
/// weight gradients enabled, and the regularized combination.
pub fn loss_gradient_suite(instances: usize, tolerance: f64) -> Result<Vec<SuiteEntry>> {
    let mut entries = Vec::new();
    for i in 0..instances {
        let n = 4 + (i % 3);
        let d = 6;
        let labels: Vec<usize> = (0..n).map(|j| j % 2).collect();
        let z = unit_rows(1000 + i as u64, n, d);
        let mut store = ParamStore::new();
        store.register("raw", z.clone()).unwrap();

        let cfg_diff = DsmConfig { differentiable_weights: true, ..DsmConfig::default() };
        let cfg_plain = DsmConfig::default();
        let batch = loss::EmbeddingBatch::new(z, labels.clone())?;
        let log_w =
            gaussian_log_weights(&loss::similarity_matrix(&batch, cfg_plain.tau), cfg_plain.eta);

        let checks: Vec<(String, Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> heterovid_core::graph::Result<NodeId>>)> = vec![
            (
                format!("contrastive[{i}]"),
                Box::new({
                    let labels = labels.clone();
                    let tau = cfg_plain.tau;
                    move |g, s| {
                        let z = normalize_rows(g, s, "raw")?;
                        Ok(scl_loss(g, z, &labels, tau)?.0)
                    }
                }),
            ),
            (
                format!("robust-frozen[{i}]"),
                Box::new({
                    let labels = labels.clone();
                    let tau = cfg_plain.tau;
                    let log_w = log_w.clone();
                    move |g, s| {
                        let z = normalize_rows(g, s, "raw")?;
                        Ok(dsc_loss_frozen(g, z, &labels, tau, &log_w)?.0)
                    }
                }),
            ),
            (
                format!("robust-differentiable[{i}]"),
                Box::new({
                    let labels = labels.clone();
                    move |g, s| {
                        let z = normalize_rows(g, s, "raw")?;
                        Ok(dsc_loss(g, z, &labels, &cfg_diff)?.0)
                    }
                }),
            ),
            (
                format!("robust-regularized[{i}]"),
                Box::new({
                    let labels = labels.clone();
                    move |g, s| {
                        let z = normalize_rows(g, s, "raw")?;
                        Ok(ib_dsc_loss(g, z, &labels, &cfg_diff)?.0)
                    }
                }),
            ),
        ];
        for (name, build) in checks {
            let report = grad_check(&store, tolerance, |g, s| build(g, s))?;
            entries.push(SuiteEntry { name, report });
        }
    }
    Ok(entries)
}

fn verify_model_cfg() -> ModelConfig {
    ModelConfig {
        time_steps: 3,
        in_channels: 1,
        height: 4,
        width: 4,
        stage_channels: vec![2],
        embed_dim: 3,
        num_classes: 2,
        ..ModelConfig::default()
    }
}

/// End-to-end gradient of the combined objective through the full toy model
/// on `instances` random inputs. Parameters are re-randomized to healthy
/// magnitudes so every gradient path sits above the differencing noise
/// floor, and weight gradients are enabled so the differenced function is
/// the taped one.
pub fn model_gradient_suite(instances: usize, tolerance: f64) -> Result<Vec<SuiteEntry>> {
    let cfg = verify_model_cfg();
    let model: Model<f64> = Model::new(cfg.clone())?;
    let dsm = DsmConfig { differentiable_weights: true, tau: 0.5, eta: 0.4, ..DsmConfig::default() };
    let state = ScalingState::initial(&dsm);

    let mut entries = Vec::new();
    for i in 0..instances {
        let mut store = model.init_store(5 + i as u64)?;
        for (name, p) in store.iter_mut() {
            let mut rng = rng_for(200 + i as u64, name);
            for v in p.value.data_mut() {
                *v = 0.4 * standard_normal(&mut rng);
            }
        }
        let b = 3;
        let mut rng = rng_for(300 + i as u64, "verify-input");
        let shape = [b, cfg.time_steps, cfg.in_channels, cfg.height, cfg.width];
        let n: usize = shape.iter().product();
        let x = VideoBatch::new(Tensor::from_vec(
            &shape,
            (0..n).map(|_| standard_normal(&mut rng)).collect(),
        ));
        let labels: Vec<usize> = (0..b).map(|j| j % cfg.num_classes).collect();

        let report = grad_check(&store, tolerance, |g, s| {
            let fwd = model.forward(g, s, &x)?;
            let ce = loss::cross_entropy(g, fwd.logits, &labels)?;
            let (ib_dsc, _) = ib_dsc_loss(g, fwd.embeddings.unwrap(), &labels, &dsm)?;
            loss::total_loss_node(g, ce, ib_dsc, &state)
        })?;
        entries.push(SuiteEntry { name: format!("toy-model[{i}]"), report });
    }
    Ok(entries)
}

/// A few structural identities that do not need finite differences: the
/// similarity diagonal and the gradient map of an unused parameter.
pub fn structural_checks() -> Result<Vec<(String, bool)>> {
    let mut out = Vec::new();

    let z = unit_rows(1, 4, 5);
    let mut g = Graph::new();
    let zn = g.constant(z);
    let s = similarity(&mut g, zn, 0.07)?;
    let diag_ok = (0..4).all(|i| (g.value(s).data()[i * 4 + i] - 1.0 / 0.07).abs() < 1e-9);
    out.push(("similarity diagonal is 1/tau".to_string(), diag_ok));

    let mut store = ParamStore::<f64>::new();
    store.register("used", Tensor::scalar(2.0))?;
    store.register("unused", Tensor::scalar(1.0))?;
    let mut g = Graph::new();
    let u = g.param(&store, "used")?;
    let _v = g.param(&store, "unused")?;
    let y = g.square(u)?;
    let grads = g.backward(y)?;
    out.push((
        "unused parameters receive zero gradient".to_string(),
        grads["used"].item() == 4.0 && grads["unused"].item() == 0.0,
    ));
    Ok(out)
}
