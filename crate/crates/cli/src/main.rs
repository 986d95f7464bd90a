use std::path::PathBuf;

use anyhow::{bail, Result};
use aoept_cli::pipeline::{self, Run, Variant};
use aoept_cli::RunConfig;
use aoept_core::mcp::McpMethod;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "aoept", about = "Missing-modality prompt tuning on a frozen multimodal transformer")]
struct Cli {
    /// INI config. `gen-data` starts the run from it; other commands only
    /// use it to find the run directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory (defaults to `out_dir` from the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Train a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// MCP construction method.
    #[arg(long, global = true, value_enum)]
    method: Option<MethodArg>,
    /// Training missing rate in percent.
    #[arg(long, global = true)]
    eta: Option<f64>,
    /// Test missing rate in percent.
    #[arg(long, global = true)]
    eta_test: Option<f64>,
    /// Missing modality name, or `both`.
    #[arg(long, global = true)]
    kind: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Attention,
    Mlp,
    Init,
}

impl From<MethodArg> for McpMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Attention => McpMethod::Attention,
            MethodArg::Mlp => McpMethod::Mlp,
            MethodArg::Init => McpMethod::Init,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PromptVariant {
    /// Full method with instance-aware instantiation.
    Full,
    /// MCPs inserted directly.
    NoInst,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineVariant {
    Random,
    LowerBound,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the config and draw the synthetic splits.
    GenData,
    /// Pretrain and freeze the backbone.
    Pretrain,
    /// Build and refine layer-wise collections from the training tables.
    BuildCollections,
    /// Tune prompts for every seed and missing table.
    Train {
        #[arg(long, value_enum, default_value = "full")]
        variant: PromptVariant,
    },
    /// Train the random-prompt baseline or the frozen lower bound.
    TrainBaseline {
        #[arg(long, value_enum, default_value = "random")]
        variant: BaselineVariant,
    },
    /// Evaluate trained models on the test tables.
    Eval,
    /// Compute NM²I for the trained prompt models.
    Nm2i,
    /// Sweep the training missing rate at a fixed test rate.
    ScalingSweep,
    /// Merge reports into summary.md and summary.csv.
    Report,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let file_cfg = match &cli.config {
        Some(p) => Some(RunConfig::load(p)?),
        None => None,
    };
    let dir = match (&cli.out, &file_cfg) {
        (Some(d), _) => d.clone(),
        (None, Some(c)) => c.out_dir.clone(),
        (None, None) => RunConfig::default().out_dir,
    };
    let mut run = match cli.cmd {
        Cmd::GenData => {
            let mut cfg = file_cfg.unwrap_or_default();
            cfg.out_dir = dir.clone();
            Run::create(&dir, cfg)?
        }
        _ => Run::open(&dir)?,
    };
    if let Some(s) = cli.seed {
        run.cfg.seeds = vec![s];
    }
    if let Some(m) = cli.method {
        run.cfg.method = m.into();
    }
    if let Some(e) = cli.eta {
        run.cfg.eta_train = e;
    }
    if let Some(e) = cli.eta_test {
        run.cfg.eta_test = e;
    }
    if let Some(k) = cli.kind {
        run.cfg.kind = k;
    }
    if let Err(e) = run.cfg.validate() {
        bail!("invalid override: {e}");
    }
    let scenario = run.scenario();
    match cli.cmd {
        Cmd::GenData => {
            pipeline::gen_data(&run)?;
            println!("wrote data to {}", run.dir.join("data").display());
        }
        Cmd::Pretrain => {
            let r = pipeline::pretrain(&run)?;
            println!(
                "pretrained backbone: train accuracy {:.4}, checksum {}",
                r.train_accuracy, r.checksum
            );
        }
        Cmd::BuildCollections => {
            pipeline::build_collections(&run, scenario.eta_train, &scenario.kind, None)?;
            println!("collections built for η = {} ({})", scenario.eta_train, scenario.kind);
        }
        Cmd::Train { variant } => {
            let v = match variant {
                PromptVariant::Full => Variant::Aoept(run.cfg.method),
                PromptVariant::NoInst => Variant::NoInst(run.cfg.method),
            };
            report_training(&pipeline::train_variant(&run, v, &scenario, None)?);
        }
        Cmd::TrainBaseline { variant } => {
            let v = match variant {
                BaselineVariant::Random => Variant::Random,
                BaselineVariant::LowerBound => Variant::LowerBound,
            };
            report_training(&pipeline::train_variant(&run, v, &scenario, None)?);
        }
        Cmd::Eval => {
            for (tag, a) in pipeline::eval(&run, &scenario)? {
                println!(
                    "{tag}: accuracy {:.4} (range {:.4}-{:.4}), macro-F1 {:.4} over {} runs",
                    a.mean_accuracy,
                    a.min_accuracy,
                    a.max_accuracy,
                    a.mean_macro_f1,
                    a.runs.len()
                );
            }
        }
        Cmd::Nm2i => {
            for (tag, a) in pipeline::nm2i(&run, &scenario)? {
                let layers: Vec<String> = a.per_layer.iter().map(|l| format!("{:.4}", l.nm2i)).collect();
                println!("{tag}: NM²I {:.4} per layer [{}]", a.mean, layers.join(", "));
            }
        }
        Cmd::ScalingSweep => {
            let rows = pipeline::scaling_sweep(&run)?;
            for (tag, pts) in pipeline::sweep_means(&rows) {
                let cells: Vec<String> = pts.iter().map(|(e, a)| format!("{e}:{a:.4}")).collect();
                println!("{tag}: {}", cells.join(" "));
            }
        }
        Cmd::Report => {
            print!("{}", pipeline::report(&run)?);
        }
    }
    Ok(())
}

fn report_training(records: &[pipeline::TrainRecord]) {
    for r in records {
        println!(
            "{} seed {} table {}: best val accuracy {:.4} at epoch {} ({} trainable / {} backbone params)",
            r.tag,
            r.seed,
            r.table,
            r.outcome.best_val_acc,
            r.outcome.best_epoch,
            r.outcome.trainable_params,
            r.outcome.backbone_params
        );
    }
}
