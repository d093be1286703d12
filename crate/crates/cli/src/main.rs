mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::Config;
use crate::error::CliError;

/// Midstream module zoo: train modules on a frozen backbone, manage zoos,
/// transfer downstream through aggregated modules.
#[derive(Parser, Debug)]
#[command(name = "vimctl", version)]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Root for run directories [env: VIM_OUTPUT_ROOT, default: runs].
    #[arg(long, global = true)]
    output_root: Option<PathBuf>,
    /// Exact run directory, overriding the generated name.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Warm up a backbone on the rotation pretext and freeze it.
    Pretrain(Common),
    /// Train one module on a midstream task and append it to a zoo.
    TrainMid(Common),
    /// Inspect and edit zoo files.
    Zoo {
        #[command(subcommand)]
        command: ZooCommand,
    },
    /// Transfer to a downstream task through the aggregated zoo.
    TrainDown(Down),
    /// Re-evaluate a finished downstream run.
    Eval(RunRef),
    /// Write agg_weights.csv / agg_weights.json for a downstream run.
    ExportWeights(RunRef),
    /// Ablation grid over one axis with several seeds.
    Sweep(Sweep),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Frozen backbone file (default: preset's random initialization).
    #[arg(long)]
    backbone: Option<String>,
    /// Backbone preset: toy, tiny, micro, vit-b16.
    #[arg(long)]
    preset: Option<String>,
    /// Task as family:vVARIANT, e.g. shape-cls:v0.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    zoo: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
}

#[derive(Args, Debug)]
struct Down {
    #[command(flatten)]
    common: Common,
    /// ensemble or reparam.
    #[arg(long)]
    strategy: Option<String>,
    /// Active modules per site: an integer or `all`.
    #[arg(long)]
    topk: Option<String>,
    /// Weight provider: vector, linear, mlp.
    #[arg(long)]
    weights: Option<String>,
    /// Weight sharing: per-site or global.
    #[arg(long)]
    share: Option<String>,
    /// Keep zoo modules fixed; train only weights and head.
    #[arg(long)]
    freeze_modules: bool,
    /// Keep the zero module fixed.
    #[arg(long)]
    freeze_zero_module: bool,
}

#[derive(Args, Debug)]
struct RunRef {
    /// Directory of a finished downstream run.
    #[arg(long)]
    run: PathBuf,
    /// Where to write outputs (default: the run directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Sweep {
    #[command(flatten)]
    down: Down,
    /// zoo-size, top-k, weights, strategy or empty.
    #[arg(long)]
    axis: Option<String>,
    /// Comma-separated axis values.
    #[arg(long, alias = "sizes")]
    values: Option<String>,
    /// Number of seeds per value, starting at train.seed.
    #[arg(long)]
    seeds: Option<String>,
}

#[derive(Subcommand, Debug)]
enum ZooCommand {
    /// Print the zoo's modules.
    List {
        #[arg(long)]
        zoo: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Append modules from another zoo file, validating each.
    Add {
        #[arg(long)]
        zoo: PathBuf,
        #[arg(long)]
        from: PathBuf,
        /// Only these module ids.
        #[arg(long)]
        ids: Option<String>,
        /// Validate without writing.
        #[arg(long)]
        report_only: bool,
    },
    /// Write a zoo holding the zero module plus a selection.
    Subset {
        #[arg(long)]
        zoo: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        ids: Option<String>,
        /// Keep the first N trained modules.
        #[arg(long)]
        first: Option<usize>,
        /// Keep modules whose task name starts with this prefix.
        #[arg(long)]
        task: Option<String>,
    },
    /// Check structure, geometry and optionally the backbone binding.
    Validate {
        #[arg(long)]
        zoo: PathBuf,
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
}

fn apply_common(cfg: &mut Config, c: &Common) -> Result<(), CliError> {
    let pairs = [
        ("backbone", &c.backbone),
        ("backbone.preset", &c.preset),
        ("task", &c.task),
        ("zoo", &c.zoo),
        ("train.seed", &c.seed),
        ("train.steps", &c.steps),
        ("train.batch_size", &c.batch_size),
        ("train.lr", &c.lr),
    ];
    for (k, v) in pairs {
        if let Some(v) = v {
            cfg.set(k, v.as_str())?;
        }
    }
    Ok(())
}

fn apply_down(cfg: &mut Config, d: &Down) -> Result<(), CliError> {
    apply_common(cfg, &d.common)?;
    for (k, v) in [
        ("agg.strategy", &d.strategy),
        ("agg.top_k", &d.topk),
        ("agg.weights", &d.weights),
        ("agg.share", &d.share),
    ] {
        if let Some(v) = v {
            cfg.set(k, v.as_str())?;
        }
    }
    if d.freeze_modules {
        cfg.set("down.freeze_modules", "true")?;
    }
    if d.freeze_zero_module {
        cfg.set("down.freeze_zero_module", "true")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = Config::default();
    if let Some(path) = &cli.config {
        cfg.merge_file(path)?;
    }
    for pair in &cli.set {
        cfg.set_pair(pair)?;
    }
    let output_root = cli
        .output_root
        .or_else(|| std::env::var_os("VIM_OUTPUT_ROOT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let out = commands::Output {
        root: output_root,
        run_dir: cli.run_dir,
    };
    match cli.command {
        Command::Pretrain(c) => {
            apply_common(&mut cfg, &c)?;
            cfg.absolutize_paths()?;
            commands::pretrain(&cfg, &out)
        }
        Command::TrainMid(c) => {
            apply_common(&mut cfg, &c)?;
            cfg.absolutize_paths()?;
            commands::train_mid(&cfg, &out)
        }
        Command::TrainDown(d) => {
            apply_down(&mut cfg, &d)?;
            cfg.absolutize_paths()?;
            commands::train_down(&cfg, &out)
        }
        Command::Eval(r) => commands::eval(&r.run, r.out.as_deref()),
        Command::ExportWeights(r) => commands::export_weights(&r.run, r.out.as_deref()),
        Command::Sweep(s) => {
            apply_down(&mut cfg, &s.down)?;
            for (k, v) in [("sweep.axis", &s.axis), ("sweep.values", &s.values), ("sweep.seeds", &s.seeds)] {
                if let Some(v) = v {
                    cfg.set(k, v.as_str())?;
                }
            }
            cfg.absolutize_paths()?;
            commands::sweep(&cfg, &out)
        }
        Command::Zoo { command } => match command {
            ZooCommand::List { zoo, json } => commands::zoo_list(&zoo, json),
            ZooCommand::Add {
                zoo,
                from,
                ids,
                report_only,
            } => commands::zoo_add(&zoo, &from, ids.as_deref(), report_only),
            ZooCommand::Subset {
                zoo,
                output,
                ids,
                first,
                task,
            } => commands::zoo_subset(&zoo, &output, ids.as_deref(), first, task.as_deref()),
            ZooCommand::Validate { zoo, backbone } => commands::zoo_validate(&zoo, backbone.as_deref()),
        },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::Usage(first).to_line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::from(e.code())
        }
    }
}
