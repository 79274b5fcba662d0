use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use circuitseek::experiments::{
    self, exit_code, meets_thresholds, DesiderataChoice, ExperimentConfig, Task, EXIT_OK,
    EXIT_THRESHOLD,
};
use circuitseek::tasks::{load_training_state, train_toy_model_resume, TrainOutcome};
use circuitseek::Error;

#[derive(Parser)]
#[command(name = "circuitseek", version, about = "Learn sparse activation-patching masks from causal desiderata")]
struct Cli {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Exit with code 4 when a threshold is not met or a report row is missing.
    #[arg(long, global = true)]
    strict: bool,
    /// Which desiderata discovery optimizes: full, vd-only or oi-only.
    #[arg(long, global = true)]
    desiderata: Option<DesiderataChoice>,
    /// Task: arithmetic or recall.
    #[arg(long, global = true, value_parser = parse_task)]
    task: Option<Task>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test tuple sets and their manifest.
    GenData,
    /// Train the arithmetic model.
    TrainModel {
        /// Save full optimizer state here after this many steps and stop.
        #[arg(long)]
        pause_at: Option<usize>,
        /// Continue from a saved training state directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Build the hand-wired recall model and its ground truth.
    BuildPlanted,
    /// Learn a mask from the training split.
    Discover {
        /// Run label; defaults to the desiderata selection.
        #[arg(long)]
        label: Option<String>,
        /// Sparsity weight; overrides the config.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Score a mask on the held-out sets. Without --mask, scores the unpatched model.
    Eval {
        /// Mask JSON written by discover.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Run label; results go to runs/<label>/.
        #[arg(long)]
        label: Option<String>,
    },
    /// Discovery and evaluation for each lambda.
    Sweep {
        /// Comma-separated lambda values; defaults to the config list.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
    },
    /// Consolidate evaluated runs into report.md and results.csv.
    Report,
}

fn parse_task(s: &str) -> Result<Task, String> {
    match s {
        "arithmetic" => Ok(Task::Arithmetic),
        "recall" => Ok(Task::Recall),
        _ => Err(format!("unknown task {s:?}")),
    }
}

fn default_label(choice: DesiderataChoice) -> &'static str {
    match choice {
        DesiderataChoice::Full => "full",
        DesiderataChoice::VdOnly => "vd_only",
        DesiderataChoice::OiOnly => "oi_only",
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(d) = cli.desiderata {
        cfg.desiderata = d;
    }
    if let Some(t) = cli.task {
        cfg.task = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<i32, Error> {
    let mut cfg = load_config(cli)?;
    let out: &Path = &cfg.out_dir.clone();
    let strict_fail = |ok: bool| if cli.strict && !ok { EXIT_THRESHOLD } else { EXIT_OK };
    match &cli.cmd {
        Command::GenData => {
            let m = experiments::gen_data(&cfg, out)?;
            for f in &m.files {
                println!("{:<16} {:?} {:>4} tuples  {}", f.name, f.split, f.count, &f.sha256[..12]);
            }
            Ok(EXIT_OK)
        }
        Command::TrainModel { pause_at, resume } => {
            if pause_at.is_some() || resume.is_some() {
                let state = match resume {
                    Some(dir) => Some(load_training_state(dir, &cfg.model.train.model)?),
                    None => None,
                };
                match train_toy_model_resume(&cfg.model.train, state, *pause_at)? {
                    TrainOutcome::Paused(state) => {
                        let dir = out.join("model").join("state");
                        state.save(&dir)?;
                        println!("paused at step {}; state in {}", state.step, dir.display());
                        return Ok(EXIT_OK);
                    }
                    TrainOutcome::Finished(params, report) => {
                        circuitseek::transformer::save_checkpoint(
                            &params,
                            out.join("model").join("model.ckpt"),
                        )?;
                        println!("held-out accuracy {:.4} after {} steps", report.heldout_accuracy, report.steps);
                        return Ok(strict_fail(report.reached_target));
                    }
                }
            }
            let (_, report) = experiments::train_model(&cfg, out)?;
            println!("held-out accuracy {:.4} after {} steps", report.heldout_accuracy, report.steps);
            for (op, acc) in &report.per_op_accuracy {
                println!("  {op}: {acc:.4}");
            }
            Ok(strict_fail(report.reached_target))
        }
        Command::BuildPlanted => {
            let spec = experiments::build_planted(out)?;
            println!(
                "accuracy {:.3}, ablated designated head {:.3}, {} components",
                spec.report.accuracy, spec.report.designated_ablation_accuracy, spec.report.n_components
            );
            Ok(EXIT_OK)
        }
        Command::Discover { label, lambda } => {
            if let Some(l) = lambda {
                cfg.discovery.lambda = *l;
                cfg.validate()?;
            }
            let label = label.clone().unwrap_or_else(|| default_label(cfg.desiderata).to_string());
            let result = experiments::discover(&cfg, out, &label)?;
            let names: Vec<String> = result.binary.patched.iter().map(|c| c.to_string()).collect();
            println!("{label}: {} patched [{}]", names.len(), names.join(", "));
            Ok(EXIT_OK)
        }
        Command::Eval { mask, label } => {
            let label = label.clone().unwrap_or_else(|| {
                if mask.is_some() { default_label(cfg.desiderata) } else { "clean" }.to_string()
            });
            let row = experiments::eval_command(&cfg, out, mask.as_deref(), &label)?;
            println!("{}", serde_json::to_string(&row).map_err(Error::from)?);
            Ok(strict_fail(mask.is_none() || meets_thresholds(&row, &cfg.thresholds)))
        }
        Command::Sweep { lambdas } => {
            let lambdas = lambdas.clone().unwrap_or_else(|| cfg.sweep_lambdas.clone());
            let s = experiments::sweep(&cfg, out, &lambdas)?;
            for r in &s.rows {
                println!("lambda {:<8} patched {:>3}  vd {:?}  oi {:?}", r.lambda, r.patched, r.vd_acc, r.oi_acc);
            }
            println!("spearman {:?}", s.spearman_lambda_patched);
            Ok(strict_fail(s.weakly_decreasing))
        }
        Command::Report => {
            let r = experiments::report(out)?;
            print!("{}", r.markdown);
            for m in &r.missing {
                eprintln!("missing run: {m}");
            }
            Ok(strict_fail(r.missing.is_empty()))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
