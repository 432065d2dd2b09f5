//! Ablation runner: the four module settings plus the branch sub-variants,
//! each trained on identically generated data with shared initialization
//! for the parameters the settings have in common.

use serde::{Deserialize, Serialize};

use heterovid_core::model::AblationSetting;

use crate::config::RunConfig;
use crate::synth::{SyntheticSpec, generate};
use crate::train::train;
use crate::{HarnessError, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub table: String,
    pub setting: String,
    pub attention: bool,
    pub scaling: bool,
    pub freq: bool,
    pub temporal: bool,
    pub seeds: Vec<u64>,
    pub war: f64,
    pub uar: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub module_rows: Vec<AblationRow>,
    pub branch_rows: Vec<AblationRow>,
    /// Per-seed UAR of the baseline and the full stack.
    pub baseline_uar_per_seed: Vec<f64>,
    pub full_uar_per_seed: Vec<f64>,
}

impl AblationReport {
    pub fn baseline_mean_uar(&self) -> f64 {
        mean(&self.baseline_uar_per_seed)
    }

    pub fn full_mean_uar(&self) -> f64 {
        mean(&self.full_uar_per_seed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("Ablation of the two modules\n");
        out.push_str("Setting  Attn  Scal  |   WAR     UAR\n");
        for r in &self.module_rows {
            out.push_str(&format!(
                "{:<7}  {:^4}  {:^4}  | {:6.2}  {:6.2}\n",
                r.setting,
                mark(r.attention),
                mark(r.scaling),
                r.war,
                r.uar
            ));
        }
        if !self.branch_rows.is_empty() {
            out.push_str("\nAblation of the attention branches (scaling on)\n");
            out.push_str("Setting  Fre.  Tim.  |   WAR     UAR\n");
            for r in &self.branch_rows {
                out.push_str(&format!(
                    "{:<7}  {:^4}  {:^4}  | {:6.2}  {:6.2}\n",
                    r.setting,
                    mark(r.freq),
                    mark(r.temporal),
                    r.war,
                    r.uar
                ));
            }
        }
        out.push_str(&format!(
            "\nmean UAR over {} seed(s): baseline {:.2}, full {:.2}\n",
            self.baseline_uar_per_seed.len(),
            self.baseline_mean_uar(),
            self.full_mean_uar()
        ));
        out
    }
}

fn mark(on: bool) -> &'static str {
    if on { "\u{2713}" } else { "\u{2717}" }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

#[derive(Clone)]
struct Job {
    table: &'static str,
    setting: String,
    attention: bool,
    scaling: bool,
    freq: bool,
    temporal: bool,
    seed: u64,
}

fn job_config(base: &RunConfig, job: &Job) -> RunConfig {
    let mut run = base.clone();
    run.model.dam_enabled = job.attention && (job.freq || job.temporal);
    run.model.freq_enabled = job.attention && job.freq;
    run.model.temporal_enabled = job.attention && job.temporal;
    run.model.dsm_enabled = job.scaling;
    run.seed = job.seed;
    run
}

fn run_job(base: &RunConfig, data_spec: &SyntheticSpec, test_per_class: usize, job: &Job) -> Result<(f64, f64)> {
    let mut spec = data_spec.clone();
    spec.seed = job.seed;
    let train_data = generate(&spec)?;
    let test_data = generate(&spec.eval_spec(test_per_class))?;
    let run = job_config(base, job);
    let result = train(&run, &train_data, Some(&test_data))?;
    if let Some(reason) = result.aborted {
        return Err(HarnessError::TrainingAborted {
            stage: format!("{} seed {}", job.setting, job.seed),
            reason,
        });
    }
    Ok((result.final_metrics.war, result.final_metrics.uar))
}

/// Runs the module table (settings a-d) and optionally the branch table.
/// The baseline and the full stack run once per seed; the intermediate
/// settings run on the first seed. Jobs execute on up to `threads` workers;
/// each job is internally deterministic, so the schedule cannot change
/// results.
pub fn run_ablation(
    base: &RunConfig,
    data_spec: &SyntheticSpec,
    test_per_class: usize,
    seeds: &[u64],
    branch_table: bool,
    threads: usize,
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(HarnessError::Config("need at least one seed".into()));
    }
    let first = seeds[0];
    let mut jobs: Vec<Job> = Vec::new();
    for setting in AblationSetting::all() {
        let on_all_seeds = matches!(setting, AblationSetting::A | AblationSetting::D);
        let job_seeds: &[u64] = if on_all_seeds { seeds } else { &seeds[..1] };
        for &seed in job_seeds {
            jobs.push(Job {
                table: "modules",
                setting: setting.as_str().to_string(),
                attention: setting.attention_on(),
                scaling: setting.scaling_on(),
                freq: setting.attention_on(),
                temporal: setting.attention_on(),
                seed,
            });
        }
    }
    if branch_table {
        // the all-off and all-on rows reuse module results c and d
        for (setting, freq, temporal) in [("b", true, false), ("c", false, true)] {
            jobs.push(Job {
                table: "branches",
                setting: setting.to_string(),
                attention: true,
                scaling: true,
                freq,
                temporal,
                seed: first,
            });
        }
    }

    let mut results: Vec<Option<Result<(f64, f64)>>> = (0..jobs.len()).map(|_| None).collect();
    let workers = threads.max(1);
    for chunk_start in (0..jobs.len()).step_by(workers) {
        let chunk_end = (chunk_start + workers).min(jobs.len());
        let slots = std::thread::scope(|scope| {
            let handles: Vec<_> = jobs[chunk_start..chunk_end]
                .iter()
                .map(|job| scope.spawn(move || run_job(base, data_spec, test_per_class, job)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect::<Vec<_>>()
        });
        for (offset, r) in slots.into_iter().enumerate() {
            results[chunk_start + offset] = Some(r);
        }
    }

    let mut outcomes = Vec::with_capacity(jobs.len());
    for r in results {
        outcomes.push(r.expect("every job ran")?);
    }

    let collect_rows = |table: &str| -> Vec<AblationRow> {
        let mut rows: Vec<AblationRow> = Vec::new();
        for (job, &(war, uar)) in jobs.iter().zip(&outcomes) {
            if job.table != table {
                continue;
            }
            match rows.iter_mut().find(|r| r.setting == job.setting) {
                Some(row) => {
                    row.seeds.push(job.seed);
                    row.war += war;
                    row.uar += uar;
                }
                None => rows.push(AblationRow {
                    table: table.to_string(),
                    setting: job.setting.clone(),
                    attention: job.attention,
                    scaling: job.scaling,
                    freq: job.freq,
                    temporal: job.temporal,
                    seeds: vec![job.seed],
                    war,
                    uar,
                }),
            }
        }
        for row in &mut rows {
            let n = row.seeds.len() as f64;
            row.war /= n;
            row.uar /= n;
        }
        rows
    };

    let module_rows = collect_rows("modules");
    let mut branch_rows = Vec::new();
    if branch_table {
        let module = |setting: &str| module_rows.iter().find(|r| r.setting == setting).unwrap();
        let clone_as = |src: &AblationRow, setting: &str, freq: bool, temporal: bool| AblationRow {
            table: "branches".to_string(),
            setting: setting.to_string(),
            attention: freq || temporal,
            scaling: true,
            freq,
            temporal,
            seeds: src.seeds.clone(),
            war: src.war,
            uar: src.uar,
        };
        branch_rows.push(clone_as(module("c"), "a", false, false));
        branch_rows.extend(collect_rows("branches"));
        branch_rows.push(clone_as(module("d"), "d", true, true));
    }

    let per_seed = |setting: &str| -> Vec<f64> {
        jobs.iter()
            .zip(&outcomes)
            .filter(|(j, _)| j.table == "modules" && j.setting == setting)
            .map(|(_, &(_, uar))| uar)
            .collect()
    };
    Ok(AblationReport {
        module_rows,
        branch_rows,
        baseline_uar_per_seed: per_seed("a"),
        full_uar_per_seed: per_seed("d"),
    })
}
