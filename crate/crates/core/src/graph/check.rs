//! Central finite-difference verification of analytic gradients.
//!
//! Runs in 64-bit only; the default step of 1e-5 needs the headroom.

use super::{Graph, NodeId, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a small floor so exact-zero pairs compare as zero
/// and finite-difference noise on near-zero gradients is not amplified.
/// Below the floor the comparison is effectively absolute at floor scale:
/// at the 1e-4 tolerance a sub-floor gradient still must agree to 1e-9.
pub fn relative_error(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs()).max(1e-5);
    (a - n).abs() / denom
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{} {:<40} max_rel_err {:.3e} (abs {:.3e})",
                if e.pass { "ok  " } else { "FAIL" },
                e.name,
                e.max_rel_err,
                e.max_abs_err
            )?;
        }
        write!(f, "tolerance {:.1e}: {}", self.tolerance, if self.all_pass() { "pass" } else { "FAIL" })
    }
}

/// Compares analytic gradients against central finite differences for every
/// parameter in `store`. `build` must construct the same scalar function of
/// the store each time it is called.
pub fn grad_check<F>(store: &ParamStore<f64>, tolerance: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let out = build(&mut g, store)?;
    let grads = g.backward(out)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = build(&mut g, s)?;
        Ok(g.value(out).item())
    };

    let mut work = store.clone();
    let mut entries = Vec::new();
    for name in store.names() {
        let n_elems = store.get(&name).unwrap().value.numel();
        let analytic = grads
            .get(&name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(&name).unwrap().value.shape()));
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for idx in 0..n_elems {
            let orig = work.get(&name).unwrap().value.data()[idx];
            // evaluate at the rounded points and divide by their exact
            // distance, so a linear function differentiates exactly
            let x_up = orig + FD_STEP;
            let x_down = orig - FD_STEP;
            work.get_mut(&name).unwrap().value.data_mut()[idx] = x_up;
            let up = eval(&work)?;
            work.get_mut(&name).unwrap().value.data_mut()[idx] = x_down;
            let down = eval(&work)?;
            work.get_mut(&name).unwrap().value.data_mut()[idx] = orig;
            let numeric = (up - down) / (x_up - x_down);
            let a = analytic.data()[idx];
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        entries.push(GradCheckEntry {
            name,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            pass: max_rel < tolerance,
        });
    }
    Ok(GradCheckReport { tolerance, entries })
}
