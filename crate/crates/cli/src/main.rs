use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dualfuse_cli::pipeline::{self, EvalPlan};
use dualfuse_cli::report;
use dualfuse_cli::{CliError, CliResult, ExperimentConfig};
use dualfuse_core::fusion::{FusionDesign, ModelVariant, VariantKind};

#[derive(Parser)]
#[command(
    name = "dualfuse",
    version,
    about = "Audiovisual fusion experiments on a synthetic speech task"
)]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct VariantArgs {
    /// audio_only, early, middle or dual_use.
    #[arg(long)]
    variant: String,
    /// Encoder fusion design: add or concat.
    #[arg(long, default_value = "add")]
    fusion: String,
    /// Visual encoder block to tap; defaults to the last.
    #[arg(long)]
    tap: Option<usize>,
}

impl VariantArgs {
    fn resolve(&self, cfg: &ExperimentConfig) -> CliResult<ModelVariant> {
        let kind: VariantKind = self.variant.parse()?;
        let fusion: FusionDesign = self.fusion.parse()?;
        Ok(ModelVariant {
            kind,
            fusion_design: fusion,
            visual_tap_block: self.tap.unwrap_or(cfg.model.n_enc_visual),
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the corpus and noise pool manifests.
    GenData,
    /// Train one variant for one stage.
    Train {
        #[command(flatten)]
        variant: VariantArgs,
        #[arg(long)]
        stage: u8,
    },
    /// Evaluate a checkpoint under clean and babble conditions.
    Eval {
        #[command(flatten)]
        variant: VariantArgs,
        #[arg(long, default_value_t = 2)]
        stage: u8,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Sweep fusion design and visual tap block for the dual-use model.
    Ablate {
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Random instances per primitive op.
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Render results files as a markdown table and plot data.
    Report {
        /// Results files; defaults to the results file in the output directory.
        files: Vec<PathBuf>,
        #[arg(long)]
        allow_mixed: bool,
    },
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config PATH is required".into()))?;
    let cfg = ExperimentConfig::load(path)?
        .with_seed(cli.seed)
        .with_out_dir(cli.out.clone());
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::GenData => {
            let out = pipeline::gen_data(&cfg)?;
            println!("corpus: {}", out.corpus.display());
            for m in &out.manifests {
                println!("manifest: {}", m.display());
            }
            println!("config digest: {}", cfg.digest());
        }
        Command::Train { variant, stage } => {
            let v = variant.resolve(&cfg)?;
            let out = pipeline::train_stage(&cfg, v, *stage)?;
            println!(
                "{} stage {}: {} steps, final loss {}",
                out.sidecar.label,
                stage,
                out.trace.len(),
                out.sidecar.final_loss.map_or("-".into(), |l| format!("{l:.4}"))
            );
            println!("checkpoint: {}", out.paths.params.display());
        }
        Command::Eval { variant, stage, beam } => {
            let v = variant.resolve(&cfg)?;
            let plan = EvalPlan::from_config(&cfg, *beam)?;
            let rows = pipeline::eval_checkpoint(&cfg, v, *stage, &plan)?;
            for r in &rows {
                println!(
                    "{} {} {} {}: {:.2}",
                    r.variant,
                    r.split.as_str(),
                    r.noise_pool,
                    r.snr_db,
                    r.wer
                );
            }
            println!("results: {}", cfg.results_path().display());
        }
        Command::Ablate { beam } => {
            let rows = pipeline::ablate(&cfg, *beam, |label| eprintln!("ablation: {label}"))?;
            for r in &rows {
                println!(
                    "{} {} {}: {:.2} ({} params)",
                    r.variant, r.noise_pool, r.snr_db, r.wer, r.params
                );
            }
            println!("results: {}", cfg.ablation_path().display());
        }
        Command::Gradcheck { instances } => {
            let rep = pipeline::gradcheck(&cfg, *instances)?;
            for r in &rep.results {
                let status = if r.passed() { "ok" } else { "FAILED" };
                println!("{:<28} {:.3e} (< {:.0e}) {status}", r.name, r.max_rel_err, r.tolerance);
            }
            if !rep.passed() {
                return Err(CliError::Numeric("gradient check failed".into()));
            }
        }
        Command::Report { files, allow_mixed } => {
            let files = if files.is_empty() {
                vec![cfg.results_path()]
            } else {
                files.clone()
            };
            let refs: Vec<&std::path::Path> = files.iter().map(PathBuf::as_path).collect();
            let rep = report::report_files(&refs, *allow_mixed)?;
            std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::io(&cfg.out_dir, e))?;
            let md = cfg.out_dir.join("report.md");
            std::fs::write(&md, &rep.markdown).map_err(|e| CliError::io(&md, e))?;
            let plot = cfg.out_dir.join("plot_data.csv");
            std::fs::write(&plot, &rep.plot_csv).map_err(|e| CliError::io(&plot, e))?;
            print!("{}", rep.markdown);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
