//! `cfbt`: synthesize data, train, track, evaluate, audit and verify.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::DType;
use clap::{Args, Parser, Subcommand};

use cfbt_core::ablation::{component_lattice, format_table, layer_schedules, run_ablation};
use cfbt_core::checkpoint::Checkpoint;
use cfbt_core::data::{load_dataset, RgbtSequence};
use cfbt_core::eval::{evaluate_sequence, merge_reports, read_results};
use cfbt_core::nn::ParamGroup;
use cfbt_core::plot::emit_plots;
use cfbt_core::synth::generate_dataset;
use cfbt_core::tracking::{track_sequence, write_results};
use cfbt_core::train::Trainer;
use cfbt_core::verify::{run_all, VerifyOptions};
use cfbt_core::{CfbtError, CfbtModel, Result};

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "cfbt", version, about = "Cross-fusion dual-branch RGB-T tracker")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// `key = value` run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one entry, e.g. `--set train.batch_size=4` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (default `runs/<command>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for training, sampling and synthesis.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic RGB-T dataset.
    Synth,
    /// Train the fusion modules on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Track every sequence of a dataset and write result files.
    Track {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Emit the ground truth instead of running the model.
        #[arg(long)]
        oracle: bool,
    },
    /// Score result files against a dataset's ground truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        results: PathBuf,
    },
    /// Print the parameter audit table (paper-scale preset by default).
    Params,
    /// Train every component and layer-schedule variant briefly.
    Ablate {
        /// Dataset to train on; a synthetic one is rendered when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Training steps per variant.
        #[arg(long, default_value_t = 20)]
        steps: usize,
    },
    /// Run the invariant and oracle suite.
    Verify {
        /// Include the desk-scale training checks.
        #[arg(long)]
        full: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train { .. } => "train",
            Command::Track { .. } => "track",
            Command::Eval { .. } => "eval",
            Command::Params => "params",
            Command::Ablate { .. } => "ablate",
            Command::Verify { .. } => "verify",
        }
    }

    fn default_preset(&self) -> &'static str {
        match self {
            Command::Params => "paper",
            _ => "desk",
        }
    }
}

fn load_sequences(root: &Path) -> Result<Vec<RgbtSequence>> {
    let report = load_dataset(root)?;
    for e in &report.errors {
        log::warn!("skipped sequence {}: {}", e.name, e.reason);
    }
    if report.sequences.is_empty() {
        return Err(CfbtError::Data(format!("no usable sequences under {}", root.display())));
    }
    Ok(report.sequences)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CfbtError::io(path, e))
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let seqs = generate_dataset(&cfg.synth, out, cfg.synth_count)?;
    println!("wrote {} sequences to {}", seqs.len(), out.display());
    Ok(())
}

fn train(cfg: &RunConfig, data: &Path, resume: Option<&Path>, out: &Path) -> Result<()> {
    let dataset = load_sequences(data)?;
    let (model, ck) = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            (ck.model(DType::F32)?, Some(ck))
        }
        None => (CfbtModel::new(&cfg.model, DType::F32, Some(cfg.train.seed))?, None),
    };
    let mut trainer = match &ck {
        Some(ck) => Trainer::resume(&model, &dataset, &cfg.train, ck)?,
        None => Trainer::new(&model, &dataset, &cfg.train)?,
    };
    let logs = trainer.run(Some(out))?;
    if let Some(last) = logs.last() {
        println!("step {} total loss {:.4}", last.step + 1, last.total);
    }
    println!("checkpoint {}", Trainer::final_checkpoint_path(out).display());
    Ok(())
}

fn track(cfg: &RunConfig, data: &Path, checkpoint: Option<&Path>, oracle: bool, out: &Path) -> Result<()> {
    let dataset = load_sequences(data)?;
    let model = if oracle {
        None
    } else {
        Some(match checkpoint {
            Some(p) => {
                let ck = Checkpoint::load(p)?;
                let mut mc = ck.model(DType::F32)?.config().clone();
                cfbt_core::kv::apply_all(&mut mc, &cfg.model_overrides)?;
                mc.validate()?;
                let model = CfbtModel::new(&mc, DType::F32, None)?;
                ck.apply_to(&model)?;
                model
            }
            None => {
                log::warn!("no checkpoint given; tracking with freshly initialized fusion modules");
                CfbtModel::new(&cfg.model, DType::F32, Some(cfg.train.seed))?
            }
        })
    };
    let mut summary = String::from("sequence\tframes\tflagged\tupdates\n");
    for seq in &dataset {
        let (boxes, flagged, updates) = match &model {
            None => ((0..seq.len()).map(|i| seq.gt(i)).collect(), 0, 0),
            Some(m) => {
                let o = track_sequence(m, seq.frames(), &seq.gt(0))?;
                (o.boxes, o.flagged.len(), o.updates.len())
            }
        };
        write_results(&out.join(format!("{}.txt", seq.name)), &boxes)?;
        let _ = writeln!(summary, "{}\t{}\t{flagged}\t{updates}", seq.name, boxes.len());
        log::info!("tracked {} ({} frames)", seq.name, boxes.len());
    }
    write(&out.join("track_summary.tsv"), &summary)?;
    println!("wrote results for {} sequences to {}", dataset.len(), out.display());
    Ok(())
}

fn eval(data: &Path, results: &Path, out: &Path) -> Result<()> {
    let dataset = load_sequences(data)?;
    let mut reports = Vec::new();
    let mut table = String::from("sequence\tframes\tpr20\tnpr\tsr\tmpr20\tmsr\n");
    for seq in &dataset {
        let pred = read_results(&results.join(format!("{}.txt", seq.name)))?;
        let r = evaluate_sequence(&pred, seq)?;
        let _ = writeln!(table, "{}\t{}\t{}\t{}\t{}\t{}\t{}", seq.name, r.frames, r.pr, r.npr, r.sr, r.mpr, r.msr);
        reports.push(r);
    }
    let merged = merge_reports(&reports);
    write(&out.join("per_sequence.tsv"), &table)?;
    let artifacts = emit_plots(&merged, out)?;
    println!(
        "PR {:.4} NPR {:.4} SR {:.4} MPR {:.4} MSR {:.4} over {} frames",
        merged.pr, merged.npr, merged.sr, merged.mpr, merged.msr, merged.frames
    );
    println!("report {}", artifacts.report.display());
    Ok(())
}

/// Published trainable budgets of the component rows, in millions.
const PUBLISHED: [(&str, Option<f64>); 5] = [
    ("baseline", None),
    ("+cstaf", Some(0.090)),
    ("+cstcf", Some(0.090)),
    ("+cstaf+cstcf", Some(0.180)),
    ("full", Some(0.259)),
];

fn params(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut table = String::from("row\tcstaf\tcstcf\tdsta\ttrainable\ttrainable_M\tpublished_M\tdeviation\ttotal\ttrainable_fraction\n");
    for (v, (name, published)) in component_lattice(&cfg.model).iter().zip(PUBLISHED) {
        debug_assert_eq!(v.name, name);
        let model = CfbtModel::new(&v.apply(&cfg.model), DType::F32, None)?;
        let c = model.count_parameters();
        let m = c.trainable as f64 / 1e6;
        let (pub_s, dev_s) = match published {
            Some(p) => (format!("{p:.3}"), format!("{:+.2}%", 100.0 * (m - p) / p)),
            None => ("-".into(), "-".into()),
        };
        let _ = writeln!(
            table,
            "{name}\t{}\t{}\t{}\t{}\t{m:.3}\t{pub_s}\t{dev_s}\t{}\t{:.4}%",
            c.group(ParamGroup::Cstaf),
            c.group(ParamGroup::Cstcf),
            c.group(ParamGroup::Dsta),
            c.trainable,
            c.total,
            100.0 * c.trainable_fraction()
        );
    }
    print!("{table}");
    write(&out.join("params.tsv"), &table)?;
    CfbtModel::new(&cfg.model, DType::F32, None)?.write_manifest(&out.join("manifest.tsv"))?;
    Ok(())
}

fn ablate(cfg: &RunConfig, data: Option<&Path>, steps: usize, out: &Path) -> Result<()> {
    let dataset = match data {
        Some(d) => load_sequences(d)?,
        None => generate_dataset(&cfg.synth, &out.join("data"), cfg.synth_count)?,
    };
    let train = cfbt_core::train::TrainConfig {
        max_steps: steps,
        ..cfg.train.clone()
    };
    let mut variants = component_lattice(&cfg.model);
    variants.extend(layer_schedules());
    let rows = run_ablation(&variants, &cfg.model, &dataset, &train)?;
    let table = format_table(&rows);
    print!("{table}");
    write(&out.join("ablation.tsv"), &table)
}

/// Returns whether every check passed.
fn verify(full: bool, seed: Option<u64>, out: &Path) -> Result<bool> {
    let mut opts = VerifyOptions {
        full,
        ..VerifyOptions::default()
    };
    if let Some(s) = seed {
        opts.seeds = vec![s, s + 1, s + 2];
    }
    let scratch = out.join("scratch");
    let checks = run_all(&opts, &scratch);
    let _ = fs::remove_dir_all(&scratch);
    let mut text = String::new();
    for c in &checks {
        println!("{}", c.line());
        let _ = writeln!(text, "{}", c.line());
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    let _ = writeln!(text, "{} checks, {failed} failed", checks.len());
    println!("{} checks, {failed} failed", checks.len());
    write(&out.join("verify.txt"), &text)?;
    Ok(failed == 0)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cmd = cli.command;
    let c = cli.common;
    let cfg = RunConfig::resolve(cmd.default_preset(), c.config.as_deref(), &c.overrides, c.seed)?;
    let out = c.out.unwrap_or_else(|| PathBuf::from("runs").join(cmd.name()));
    cfg.write_snapshot(&out, cmd.name())?;
    match &cmd {
        Command::Synth => synth(&cfg, &out)?,
        Command::Train { data, resume } => train(&cfg, data, resume.as_deref(), &out)?,
        Command::Track { data, checkpoint, oracle } => track(&cfg, data, checkpoint.as_deref(), *oracle, &out)?,
        Command::Eval { data, results } => eval(data, results, &out)?,
        Command::Params => params(&cfg, &out)?,
        Command::Ablate { data, steps } => ablate(&cfg, data.as_deref(), *steps, &out)?,
        Command::Verify { full } => {
            if !verify(*full, c.seed, &out)? {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(i) => i,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
