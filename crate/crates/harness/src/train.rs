//! Training and evaluation loops.
//!
//! The optimizer is decoupled-weight-decay Adam with a linear warm-up into
//! a cosine schedule. When the scaled objective is active, the global
//! gradient norm of each step feeds the loss weights of the next one
//! (stale-by-one), starting from a norm of one.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use heterovid_core::loss::{self, DsmConfig, ScalingState};
use heterovid_core::model::{Model, ModelConfig};
use heterovid_core::params::ParamStore;
use heterovid_core::{EngineError, Graph};

use heterovid_core::init::rng_for;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::Rng;

use crate::config::{OptimConfig, RunConfig};
use crate::dataset::stack;
use crate::metrics::{MetricsReport, compute_metrics};
use crate::synth::Dataset;
use crate::{HarnessError, Result};

/// Decoupled weight-decay Adam. Moments are kept in f64 regardless of the
/// parameter precision.
pub struct AdamW {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    step: u64,
    cfg: OptimConfig,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Self {
        AdamW { m: BTreeMap::new(), v: BTreeMap::new(), step: 0, cfg }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, p) in store.iter_mut() {
            let n = p.value.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for i in 0..n {
                let g = p.grad.data()[i] as f64;
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let w = p.value.data()[i] as f64;
                let update = m_hat / (v_hat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * w;
                p.value.data_mut()[i] = (w - lr * update) as f32;
            }
        }
    }
}

/// Linear warm-up from the floor to the peak, then cosine back down.
pub fn lr_at_epoch(epoch: usize, cfg: &OptimConfig) -> f64 {
    let (lo, hi) = (cfg.min_learning_rate, cfg.learning_rate);
    if epoch < cfg.warmup_epochs {
        return lo + (hi - lo) * (epoch + 1) as f64 / cfg.warmup_epochs as f64;
    }
    let span = (cfg.epochs - cfg.warmup_epochs).max(1) as f64;
    let progress = (epoch - cfg.warmup_epochs) as f64 / span;
    lo + 0.5 * (hi - lo) * (1.0 + (std::f64::consts::PI * progress).cos())
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng: ChaCha8Rng = rng_for(seed, &format!("shuffle.epoch{epoch}"));
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        idx.swap(i, j);
    }
    idx
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub record: String,
    pub step: u64,
    pub epoch: usize,
    /// Global gradient norm of this step's total loss.
    pub g: f64,
    /// Loss weights used for this step (from the previous norm).
    pub lambda_ce: f64,
    pub lambda_sc: f64,
    pub loss: f64,
    pub ce: f64,
    pub contrastive: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub record: String,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_ce: f64,
    pub train_contrastive: f64,
    pub grad_norm_mean: f64,
    pub degenerate_batches: usize,
    pub eval_on: String,
    pub war: f64,
    pub uar: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub record: String,
    pub epochs: usize,
    pub steps: u64,
    pub parameters: usize,
    pub war: f64,
    pub uar: f64,
}

pub struct TrainResult {
    pub model_cfg: ModelConfig,
    pub store: ParamStore<f32>,
    pub epoch_records: Vec<EpochRecord>,
    pub step_records: Vec<StepRecord>,
    pub summary: SummaryRecord,
    pub final_metrics: MetricsReport,
    /// Set when training stopped early on a non-finite loss; the store is
    /// then the last epoch-end snapshot.
    pub aborted: Option<String>,
}

/// Greedy argmax per row, first maximum wins.
fn argmax_rows(values: &[f32], rows: usize, cols: usize) -> Vec<usize> {
    (0..rows)
        .map(|r| {
            let row = &values[r * cols..(r + 1) * cols];
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn evaluate(
    model: &Model<f32>,
    store: &ParamStore<f32>,
    data: &Dataset,
    batch_size: usize,
) -> Result<(Vec<usize>, MetricsReport)> {
    let n = data.len();
    let k = data.spec.num_classes;
    let mut predictions = Vec::with_capacity(n);
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size) {
        let (batch, _) = stack(data, chunk);
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, store, &batch)?;
        let logits = g.value(fwd.logits);
        predictions.extend(argmax_rows(logits.data(), chunk.len(), k));
    }
    let labels: Vec<usize> = data.samples.iter().map(|s| s.label).collect();
    let report = compute_metrics(&predictions, &labels, k)?;
    Ok((predictions, report))
}

pub fn train(run: &RunConfig, data: &Dataset, eval_data: Option<&Dataset>) -> Result<TrainResult> {
    let model_cfg = run.resolve_with_data(data)?;
    let model: Model<f32> = Model::new(model_cfg.clone())?;
    let mut store = model.init_store(run.seed)?;
    let mut optimizer = AdamW::new(run.optim);
    let dsm: DsmConfig = run.dsm;
    let mut scaling = ScalingState::initial(&dsm);
    let use_dsm = model_cfg.dsm_enabled;

    let mut epoch_records = Vec::new();
    let mut step_records = Vec::new();
    let mut last_good = store.clone();
    let mut step: u64 = 0;
    let mut aborted = None;

    'epochs: for epoch in 0..run.optim.epochs {
        let lr = lr_at_epoch(epoch, &run.optim);
        let order = shuffled_indices(data.len(), run.seed, epoch);
        let mut loss_sum = 0.0;
        let mut ce_sum = 0.0;
        let mut sc_sum = 0.0;
        let mut g_sum = 0.0;
        let mut batches = 0usize;
        let mut degenerate_batches = 0usize;

        for chunk in order.chunks(run.batch_size) {
            // a lone sample cannot form contrastive pairs
            if chunk.len() < 2 {
                continue;
            }
            let (batch, labels) = stack(data, chunk);
            let mut g = Graph::new();
            let outcome = (|| -> Result<(f64, f64, f64), EngineError> {
                let fwd = model.forward(&mut g, &store, &batch)?;
                let ce = loss::cross_entropy(&mut g, fwd.logits, &labels)?;
                let (total, sc_value, degen) = if use_dsm {
                    let z = fwd.embeddings.expect("projection head exists when scaled");
                    let (ib_dsc, degen) = loss::ib_dsc_loss(&mut g, z, &labels, &dsm)?;
                    let total = loss::total_loss_node(&mut g, ce, ib_dsc, &scaling)?;
                    (total, g.value(ib_dsc).item() as f64, degen)
                } else {
                    (ce, 0.0, false)
                };
                if degen {
                    degenerate_batches += 1;
                }
                let loss_value = g.value(total).item() as f64;
                if !loss_value.is_finite() {
                    return Err(EngineError::NonFinite("total loss".into()));
                }
                let grads = g.backward(total)?;
                store.accumulate(&grads)?;
                Ok((loss_value, g.value(ce).item() as f64, sc_value))
            })();

            let (loss_value, ce_value, sc_value) = match outcome {
                Ok(v) => v,
                Err(EngineError::NonFinite(stage)) => {
                    aborted = Some(format!(
                        "non-finite values at '{stage}' (epoch {epoch}, step {step}); \
                         restored the last epoch-end parameters"
                    ));
                    store = last_good.clone();
                    break 'epochs;
                }
                Err(e) => return Err(e.into()),
            };

            let grad_norm = store.grad_norm() as f64;
            optimizer.step(&mut store, lr);
            store.zero_grads();
            step += 1;
            step_records.push(StepRecord {
                record: "step".into(),
                step,
                epoch,
                g: grad_norm,
                lambda_ce: if use_dsm { scaling.lambda_ce } else { 1.0 },
                lambda_sc: if use_dsm { scaling.lambda_sc } else { 0.0 },
                loss: loss_value,
                ce: ce_value,
                contrastive: sc_value,
            });
            if use_dsm {
                scaling = scaling.update(grad_norm, &dsm)?;
            }
            loss_sum += loss_value;
            ce_sum += ce_value;
            sc_sum += sc_value;
            g_sum += grad_norm;
            batches += 1;
        }

        if aborted.is_some() {
            break;
        }
        last_good = store.clone();

        let (eval_on, eval_set) = match eval_data {
            Some(d) => ("test", d),
            None => ("train", data),
        };
        let (_, report) = evaluate(&model, &store, eval_set, run.batch_size)?;
        let nb = batches.max(1) as f64;
        epoch_records.push(EpochRecord {
            record: "epoch".into(),
            epoch,
            lr,
            train_loss: loss_sum / nb,
            train_ce: ce_sum / nb,
            train_contrastive: sc_sum / nb,
            grad_norm_mean: g_sum / nb,
            degenerate_batches,
            eval_on: eval_on.into(),
            war: report.war,
            uar: report.uar,
        });
    }

    let (eval_on, eval_set) = match eval_data {
        Some(d) => ("test", d),
        None => ("train", data),
    };
    let (_, final_metrics) = evaluate(&model, &store, eval_set, run.batch_size)?;
    let _ = eval_on;
    let summary = SummaryRecord {
        record: "summary".into(),
        epochs: epoch_records.len(),
        steps: step,
        parameters: store.scalar_count(),
        war: final_metrics.war,
        uar: final_metrics.uar,
    };
    Ok(TrainResult {
        model_cfg,
        store,
        epoch_records,
        step_records,
        summary,
        final_metrics,
        aborted,
    })
}

/// Serializes records as line-delimited JSON.
pub fn records_to_jsonl<S: Serialize>(records: &[S]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(
            &serde_json::to_string(r).map_err(|e| HarnessError::Data(e.to_string()))?,
        );
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{SyntheticSpec, generate};

    fn tiny_run() -> (RunConfig, Dataset) {
        let mut run = RunConfig::default();
        run.model.stage_channels = vec![2, 3];
        run.model.embed_dim = 4;
        run.optim.epochs = 2;
        run.optim.warmup_epochs = 1;
        run.batch_size = 6;
        run.seed = 5;
        let mut spec = SyntheticSpec::desk_default(6, 5);
        spec.time_steps = 4;
        spec.height = 8;
        spec.width = 8;
        let data = generate(&spec).unwrap();
        (run, data)
    }

    #[test]
    fn schedule_warms_up_then_decays_to_the_floor() {
        let cfg = OptimConfig { epochs: 10, warmup_epochs: 2, ..OptimConfig::default() };
        assert!(lr_at_epoch(0, &cfg) < lr_at_epoch(1, &cfg));
        assert!((lr_at_epoch(2, &cfg) - cfg.learning_rate).abs() < 1e-12);
        let near_end = lr_at_epoch(9, &cfg);
        assert!(near_end < cfg.learning_rate && near_end >= cfg.min_learning_rate);
    }

    #[test]
    fn adamw_with_zero_gradient_is_pure_decay() {
        let cfg = OptimConfig::default();
        let mut store = ParamStore::<f32>::new();
        store
            .register("w", heterovid_core::tensor::Tensor::from_vec(&[2], vec![1.0f32, -2.0]))
            .unwrap();
        let mut opt = AdamW::new(cfg);
        opt.step(&mut store, 0.01);
        let w = store.get("w").unwrap().value.data();
        let shrink = 1.0 - 0.01 * cfg.weight_decay;
        assert!((w[0] - shrink as f32).abs() < 1e-6);
        assert!((w[1] + 2.0 * shrink as f32).abs() < 1e-6);
    }

    #[test]
    fn shuffling_is_a_seeded_permutation() {
        let a = shuffled_indices(10, 3, 0);
        let b = shuffled_indices(10, 3, 0);
        assert_eq!(a, b);
        let c = shuffled_indices(10, 3, 1);
        assert_ne!(a, c);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn one_classification_step_decreases_the_loss() {
        // the clean descent check: no contrastive term, no reweighting
        let (mut run, data) = tiny_run();
        run.model.dsm_enabled = false;
        run.optim.warmup_epochs = 0;
        for lr in [1e-3, 1e-4] {
            run.optim.learning_rate = lr;
            run.optim.epochs = 1;
            run.batch_size = data.len();
            let result = train(&run, &data, None).unwrap();
            let first = &result.step_records[0];
            let model: Model<f32> = Model::new(result.model_cfg.clone()).unwrap();
            let order = shuffled_indices(data.len(), run.seed, 0);
            let (batch, labels) = stack(&data, &order);
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, &result.store, &batch).unwrap();
            let ce = loss::cross_entropy(&mut g, fwd.logits, &labels).unwrap();
            let after = g.value(ce).item() as f64;
            assert!(
                after < first.loss,
                "loss did not decrease at lr {lr}: {after} vs {}",
                first.loss
            );
        }
    }

    #[test]
    fn one_scaled_step_decreases_the_objective_it_follows() {
        // with constant reweighting, the optimizer descends the total loss
        // at the step's frozen weights; measure that function before/after
        let (mut run, data) = tiny_run();
        run.optim.warmup_epochs = 0;
        run.batch_size = data.len();
        for lr in [1e-3, 1e-4] {
            let model_cfg = run.resolve_with_data(&data).unwrap();
            let model: Model<f32> = Model::new(model_cfg).unwrap();
            let mut store = model.init_store(run.seed).unwrap();
            let indices: Vec<usize> = (0..data.len()).collect();
            let (batch, labels) = stack(&data, &indices);
            let state = ScalingState::initial(&run.dsm);

            let eval_frozen = |store: &heterovid_core::ParamStore<f32>,
                               log_w: Option<&heterovid_core::Tensor<f32>>| {
                let mut g = Graph::new();
                let fwd = model.forward(&mut g, store, &batch).unwrap();
                let z = fwd.embeddings.unwrap();
                let ce = loss::cross_entropy(&mut g, fwd.logits, &labels).unwrap();
                let lw = match log_w {
                    Some(w) => w.clone(),
                    None => {
                        let s = loss::similarity(&mut g, z, run.dsm.tau).unwrap();
                        loss::gaussian_log_weights(g.value(s), run.dsm.eta)
                    }
                };
                let (dsc, _) =
                    loss::dsc_loss_frozen(&mut g, z, &labels, run.dsm.tau, &lw).unwrap();
                let ib = loss::ib_penalty(&mut g, z).unwrap();
                let ib_s = g.scale(ib, run.dsm.beta_ib as f32);
                let ib_dsc = g.add(dsc, ib_s).unwrap();
                let total = loss::total_loss_node(&mut g, ce, ib_dsc, &state).unwrap();
                (g, total, lw)
            };

            let (mut g, total, log_w) = eval_frozen(&store, None);
            let before = g.value(total).item() as f64;
            let grads = g.backward(total).unwrap();
            store.accumulate(&grads).unwrap();
            let mut opt = AdamW::new(run.optim);
            opt.step(&mut store, lr);
            store.zero_grads();

            let (g2, total2, _) = eval_frozen(&store, Some(&log_w));
            let after = g2.value(total2).item() as f64;
            assert!(after < before, "lr {lr}: {after} !< {before}");
        }
    }

    #[test]
    fn training_is_deterministic_and_emits_consistent_records() {
        let (run, data) = tiny_run();
        let eval = generate(&data.spec.eval_spec(3)).unwrap();
        let r1 = train(&run, &data, Some(&eval)).unwrap();
        let r2 = train(&run, &data, Some(&eval)).unwrap();
        assert_eq!(
            records_to_jsonl(&r1.epoch_records).unwrap(),
            records_to_jsonl(&r2.epoch_records).unwrap()
        );
        assert_eq!(
            records_to_jsonl(&r1.step_records).unwrap(),
            records_to_jsonl(&r2.step_records).unwrap()
        );
        assert_eq!(r1.final_metrics, r2.final_metrics);
        // the scaling identity holds at every step
        for s in &r1.step_records {
            let identity = s.lambda_ce / run.dsm.alpha_base + s.lambda_sc / run.dsm.beta_base;
            assert!((identity - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_parameters_abort_with_the_last_good_state() {
        let (mut run, data) = tiny_run();
        // a hopeless learning rate blows the parameters up quickly
        run.optim.learning_rate = 1e28;
        run.optim.min_learning_rate = 1e27;
        run.optim.warmup_epochs = 0;
        run.optim.epochs = 4;
        let result = train(&run, &data, None).unwrap();
        assert!(result.aborted.is_some(), "expected an abort diagnostic");
        assert!(result.store.all_finite(), "restored parameters must be finite");
    }
}
