use std::path::PathBuf;

use anyhow::{Context, Result, bail};
use clap::{Parser, Subcommand};

use heterovid::ablate::run_ablation;
use heterovid::config::{RunConfig, checkpoint_header, from_checkpoint_header};
use heterovid::dataset;
use heterovid::export::export_embeddings;
use heterovid::landscape::{LandscapeLoss, landscape_slice, rim_increase, to_csv};
use heterovid::synth::{SyntheticSpec, derive_styles, generate};
use heterovid::train::{records_to_jsonl, train};
use heterovid::verify;
use heterovid_core::checkpoint;
use heterovid_core::model::Model;

#[derive(Parser)]
#[command(
    name = "heterovid",
    about = "Heterogeneity-robust video sequence classification at desk scale",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Config file of `key value` lines with dotted keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, e.g. --set dsm.tau=0.1 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut run = RunConfig::default();
        if let Some(path) = &self.config {
            run.apply_file(path).with_context(|| format!("reading {}", path.display()))?;
        }
        run.apply_overrides(&self.overrides)?;
        Ok(run)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic heterogeneous dataset directory
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Samples per class: one count, or a comma list for imbalance
        #[arg(long, default_value = "150")]
        per_class: String,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 3)]
        sources: usize,
        #[arg(long, default_value_t = 1.25)]
        style_shift: f64,
        #[arg(long, default_value_t = 0.5)]
        drift: f64,
        #[arg(long, default_value_t = 0.2)]
        hard_fraction: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train a model and write checkpoint plus metric records
    Train {
        /// Training dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Held-out dataset for per-epoch metrics
        #[arg(long)]
        test_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint on a dataset
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the report here as JSON
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Run the module and branch ablations and emit comparison tables
    Ablate {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds; baseline and full run on every seed
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        #[arg(long, default_value_t = 150)]
        train_per_class: usize,
        #[arg(long, default_value_t = 50)]
        test_per_class: usize,
        /// Skip the frequency/temporal branch table
        #[arg(long)]
        no_branch_table: bool,
        #[arg(long, default_value_t = 2)]
        threads: usize,
        #[arg(long, default_value_t = 1.25)]
        style_shift: f64,
        #[arg(long, default_value_t = 0.5)]
        drift: f64,
        #[arg(long, default_value_t = 0.2)]
        hard_fraction: f64,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Loss values over a 2D grid of filter-normalized parameter shifts
    Landscape {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        extent: f64,
        #[arg(long, default_value_t = 21)]
        resolution: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Which loss to slice: ce or total
        #[arg(long, default_value = "ce")]
        loss: String,
        /// Samples from the head of the dataset forming the fixed batch
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Write one CSV row per sample: embedding vector, label, source
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Verify analytic gradients against central finite differences
    GradCheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Random instances per checked objective
        #[arg(long, default_value_t = 3)]
        instances: usize,
    },
    /// Print every config key with its documentation and default
    DumpConfig,
}

fn parse_seed_list(text: &str) -> Result<Vec<u64>> {
    text.split(',')
        .map(|s| s.trim().parse::<u64>().with_context(|| format!("bad seed '{s}'")))
        .collect()
}

fn load_model(path: &PathBuf) -> Result<(Model<f32>, heterovid_core::ParamStore<f32>, heterovid_core::loss::DsmConfig)> {
    let (header, store) = checkpoint::load::<f32>(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    let (model_cfg, dsm) = from_checkpoint_header(&header)?;
    let model = Model::new(model_cfg)?;
    Ok((model, store, dsm))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData {
            out,
            classes,
            per_class,
            frames,
            channels,
            height,
            width,
            sources,
            style_shift,
            drift,
            hard_fraction,
            seed,
        } => {
            let counts: Vec<usize> = per_class
                .split(',')
                .map(|v| v.trim().parse().with_context(|| format!("bad count '{v}'")))
                .collect::<Result<Vec<usize>>>()?;
            let per_class = if counts.len() == 1 {
                vec![counts[0]; classes]
            } else {
                counts
            };
            let spec = SyntheticSpec {
                num_classes: classes,
                per_class,
                time_steps: frames,
                channels,
                height,
                width,
                num_sources: sources,
                style_shift,
                styles: derive_styles(sources, seed),
                temporal_drift: drift,
                hard_fraction,
                seed,
            };
            let data = generate(&spec)?;
            dataset::save(&out, &data)?;
            println!(
                "wrote {} samples ({} classes, {} sources) to {}",
                data.len(),
                spec.num_classes,
                spec.num_sources,
                out.display()
            );
        }

        Command::Train { data, test_data, out, config } => {
            let run = config.build()?;
            let train_data = dataset::load(&data)?;
            let eval_data = test_data.map(|p| dataset::load(&p)).transpose()?;
            let result = train(&run, &train_data, eval_data.as_ref())?;

            std::fs::create_dir_all(&out)?;
            let header = checkpoint_header(&result.model_cfg, &run.dsm, run.seed);
            checkpoint::save(&out.join("checkpoint.ckpt"), &header, &result.store)?;
            let mut metrics_text = records_to_jsonl(&result.epoch_records)?;
            metrics_text.push_str(&records_to_jsonl(&[result.summary.clone()])?);
            std::fs::write(out.join("metrics.jsonl"), metrics_text)?;
            std::fs::write(out.join("scaling.jsonl"), records_to_jsonl(&result.step_records)?)?;

            if let Some(reason) = result.aborted {
                eprintln!("training aborted: {reason}");
                eprintln!("last good checkpoint written to {}", out.display());
                std::process::exit(2);
            }
            println!(
                "trained {} epochs ({} steps, {} parameters): WAR {:.2} UAR {:.2}",
                result.summary.epochs,
                result.summary.steps,
                result.summary.parameters,
                result.summary.war,
                result.summary.uar
            );
        }

        Command::Eval { checkpoint, data, out, batch_size } => {
            let (model, store, _) = load_model(&checkpoint)?;
            let data = dataset::load(&data)?;
            let (_, report) = heterovid::train::evaluate(&model, &store, &data, batch_size)?;
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(path) = out {
                std::fs::write(&path, format!("{text}\n"))?;
            }
            println!("{text}");
        }

        Command::Ablate {
            out,
            seeds,
            train_per_class,
            test_per_class,
            no_branch_table,
            threads,
            style_shift,
            drift,
            hard_fraction,
            config,
        } => {
            let run = config.build()?;
            let seeds = parse_seed_list(&seeds)?;
            let mut spec = SyntheticSpec::desk_default(train_per_class, seeds[0]);
            spec.style_shift = style_shift;
            spec.temporal_drift = drift;
            spec.hard_fraction = hard_fraction;
            let report =
                run_ablation(&run, &spec, test_per_class, &seeds, !no_branch_table, threads)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("ablation.txt"), report.render())?;
            let mut rows = report.module_rows.clone();
            rows.extend(report.branch_rows.clone());
            std::fs::write(out.join("ablation.jsonl"), records_to_jsonl(&rows)?)?;
            print!("{}", report.render());
        }

        Command::Landscape {
            checkpoint,
            data,
            out,
            extent,
            resolution,
            seed,
            loss,
            batch_size,
        } => {
            let (model, store, dsm) = load_model(&checkpoint)?;
            let data = dataset::load(&data)?;
            let kind: LandscapeLoss = loss.parse()?;
            let n = batch_size.min(data.len());
            let indices: Vec<usize> = (0..n).collect();
            let (batch, labels) = dataset::stack(&data, &indices);
            let points = landscape_slice(
                &model, &store, &batch, &labels, &dsm, extent, resolution, seed, kind,
            )?;
            std::fs::write(&out, to_csv(&points))?;
            println!(
                "wrote {} grid points to {}; rim increase over center: {:.6}",
                points.len(),
                out.display(),
                rim_increase(&points)
            );
        }

        Command::ExportEmbeddings { checkpoint, data, out, batch_size } => {
            let (model, store, _) = load_model(&checkpoint)?;
            let data = dataset::load(&data)?;
            let csv = export_embeddings(&model, &store, &data, batch_size)?;
            let rows = csv.lines().count() - 1;
            std::fs::write(&out, csv)?;
            println!("wrote {rows} embedding rows to {}", out.display());
        }

        Command::GradCheck { tolerance, instances } => {
            let mut all_ok = true;
            for (name, ok) in verify::structural_checks()? {
                println!("{} {}", if ok { "ok  " } else { "FAIL" }, name);
                all_ok &= ok;
            }
            let mut entries = verify::loss_gradient_suite(instances, tolerance)?;
            entries.extend(verify::model_gradient_suite(instances, tolerance)?);
            for e in entries {
                let ok = e.report.all_pass();
                println!(
                    "{} {:<28} worst relative error {:.3e}",
                    if ok { "ok  " } else { "FAIL" },
                    e.name,
                    e.report.worst()
                );
                if !ok {
                    println!("{}", e.report);
                }
                all_ok &= ok;
            }
            if !all_ok {
                bail!("gradient verification failed");
            }
            println!("all gradient checks passed at tolerance {tolerance:.1e}");
        }

        Command::DumpConfig => {
            print!("{}", RunConfig::default().dump());
        }
    }
    Ok(())
}
