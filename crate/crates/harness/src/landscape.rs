//! Loss surface slices along two fixed random directions.
//!
//! Directions are drawn per parameter tensor and filter-normalized: each
//! tensor's direction is rescaled to the norm of the parameter itself, so
//! the slice is comparable across checkpoints with different weight scales.
//! The loss is evaluated on one fixed batch over a square displacement grid.

use serde::{Deserialize, Serialize};

use heterovid_core::Graph;
use heterovid_core::init::{rng_for, standard_normal};
use heterovid_core::loss::{self, DsmConfig, ScalingState};
use heterovid_core::model::Model;
use heterovid_core::params::ParamStore;
use heterovid_core::tensor::VideoBatch;

use crate::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LandscapeLoss {
    /// Cross-entropy only; comparable across checkpoints regardless of how
    /// they were trained.
    Ce,
    /// The combined objective at its step-zero weights.
    Total,
}

impl std::str::FromStr for LandscapeLoss {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LandscapeLoss::Ce),
            "total" => Ok(LandscapeLoss::Total),
            other => Err(HarnessError::Config(format!("unknown landscape loss '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LandscapePoint {
    pub x: f64,
    pub y: f64,
    pub loss: f64,
}

fn direction(store: &ParamStore<f32>, seed: u64, tag: &str) -> ParamStore<f32> {
    let mut dir = store.clone();
    for (name, p) in dir.iter_mut() {
        let mut rng = rng_for(seed, &format!("{tag}.{name}"));
        let mut norm_d = 0.0f64;
        let raw: Vec<f64> = (0..p.value.numel())
            .map(|_| {
                let v = standard_normal(&mut rng);
                norm_d += v * v;
                v
            })
            .collect();
        let norm_d = norm_d.sqrt();
        let norm_p = p.value.l2_norm() as f64;
        // zero-norm tensors stay fixed, matching the filter-norm convention
        let scale = if norm_d > 0.0 { norm_p / norm_d } else { 0.0 };
        for (dst, v) in p.value.data_mut().iter_mut().zip(raw) {
            *dst = (v * scale) as f32;
        }
    }
    dir
}

pub fn eval_loss(
    model: &Model<f32>,
    store: &ParamStore<f32>,
    batch: &VideoBatch<f32>,
    labels: &[usize],
    dsm: &DsmConfig,
    kind: LandscapeLoss,
) -> Result<f64> {
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, store, batch)?;
    let ce = loss::cross_entropy(&mut g, fwd.logits, labels)?;
    let node = match kind {
        LandscapeLoss::Ce => ce,
        LandscapeLoss::Total => {
            let z = fwd.embeddings.ok_or_else(|| {
                HarnessError::Config(
                    "total-loss slices need a checkpoint with a projection head".into(),
                )
            })?;
            let (ib_dsc, _) = loss::ib_dsc_loss(&mut g, z, labels, dsm)?;
            let state = ScalingState::initial(dsm);
            loss::total_loss_node(&mut g, ce, ib_dsc, &state)?
        }
    };
    Ok(g.value(node).item() as f64)
}

/// Evaluates the loss on `resolution^2` grid points with displacements in
/// `[-extent, extent]` along both directions. The `(0, 0)` entry is the
/// unperturbed checkpoint loss.
#[allow(clippy::too_many_arguments)]
pub fn landscape_slice(
    model: &Model<f32>,
    store: &ParamStore<f32>,
    batch: &VideoBatch<f32>,
    labels: &[usize],
    dsm: &DsmConfig,
    extent: f64,
    resolution: usize,
    seed: u64,
    kind: LandscapeLoss,
) -> Result<Vec<LandscapePoint>> {
    if resolution == 0 || extent <= 0.0 {
        return Err(HarnessError::Config("need positive extent and resolution".into()));
    }
    let d1 = direction(store, seed, "dir1");
    let d2 = direction(store, seed, "dir2");
    let coord = |i: usize| -> f64 {
        if resolution == 1 {
            0.0
        } else {
            -extent + 2.0 * extent * i as f64 / (resolution - 1) as f64
        }
    };

    let mut out = Vec::with_capacity(resolution * resolution);
    let mut shifted = store.clone();
    for yi in 0..resolution {
        let y = coord(yi);
        for xi in 0..resolution {
            let x = coord(xi);
            for (name, p) in shifted.iter_mut() {
                let base = store.get(name).unwrap();
                let e1 = d1.get(name).unwrap();
                let e2 = d2.get(name).unwrap();
                for i in 0..p.value.numel() {
                    p.value.data_mut()[i] = base.value.data()[i]
                        + (x as f32) * e1.value.data()[i]
                        + (y as f32) * e2.value.data()[i];
                }
            }
            let loss = eval_loss(model, &shifted, batch, labels, dsm, kind)?;
            out.push(LandscapePoint { x, y, loss });
        }
    }
    Ok(out)
}

/// Mean loss increase over the center among grid points at maximal radius;
/// a crude flatness score (lower is flatter).
pub fn rim_increase(points: &[LandscapePoint]) -> f64 {
    let center = points
        .iter()
        .find(|p| p.x == 0.0 && p.y == 0.0)
        .map(|p| p.loss)
        .unwrap_or(f64::NAN);
    let max_r2 = points.iter().map(|p| p.x * p.x + p.y * p.y).fold(0.0, f64::max);
    let rim: Vec<f64> = points
        .iter()
        .filter(|p| (p.x * p.x + p.y * p.y - max_r2).abs() < 1e-9)
        .map(|p| p.loss)
        .collect();
    rim.iter().sum::<f64>() / rim.len() as f64 - center
}

pub fn to_csv(points: &[LandscapePoint]) -> String {
    let mut out = String::from("x,y,loss\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.x, p.y, p.loss));
    }
    out
}
