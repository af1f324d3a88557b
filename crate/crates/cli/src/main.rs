//! `fedmcp`: run experiments, the ablation matrix, parameter accounting and
//! dataset export from a TOML config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedmcp_core::data::{build_federation, write_records};
use fedmcp_core::experiment::{
    accounting, accounting_table, run_ablation, run_experiment, ExperimentConfig, Method,
};
use fedmcp_core::Error;

/// Environment variable that relocates relative output directories.
const OUTPUT_ROOT_ENV: &str = "FEDMCP_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "fedmcp", version, about = "Personalized federated adapter tuning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured method for every seed and write a report directory.
    Run(RunArgs),
    /// Run the ablation matrix and write a comparison table.
    Ablate(RunArgs),
    /// Print total, trainable and communicated parameter counts per method.
    Params(ConfigArg),
    /// Write every client's splits as `ids<TAB>label` lines.
    ExportData(RunArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// TOML config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory (overrides `output_dir` from the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds (overrides `seeds` from the config).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Run seeds concurrently.
    #[arg(long)]
    parallel_seeds: bool,
}

fn load(arg: &ConfigArg) -> fedmcp_core::Result<ExperimentConfig> {
    match &arg.config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn resolve_out(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}

impl RunArgs {
    fn config(&self) -> fedmcp_core::Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = load(&self.config)?;
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        cfg.validate()?;
        let out = resolve_out(&cfg.output_dir);
        Ok((cfg, out))
    }
}

fn cmd_run(args: &RunArgs) -> fedmcp_core::Result<()> {
    let (cfg, out) = args.config()?;
    let report = run_experiment(&cfg, &out, args.parallel_seeds)?;
    let s = &report.summary;
    println!("method {} | seeds {:?} | final round {}", cfg.method.as_str(), s.seeds, s.final_round);
    println!("| client | final test acc (%) |\n|---|---|");
    for c in &s.per_client {
        println!("| {} | {} |", c.client_id, c.final_test_accuracy);
    }
    println!("| avg | {} |", s.average);
    println!("report: {}", out.display());
    Ok(())
}

fn cmd_ablate(args: &RunArgs) -> fedmcp_core::Result<()> {
    let (cfg, out) = args.config()?;
    let report = run_ablation(&cfg, &out, args.parallel_seeds)?;
    print!("{}", report.table);
    println!("report: {}", out.display());
    Ok(())
}

fn cmd_params(arg: &ConfigArg) -> fedmcp_core::Result<()> {
    let cfg = load(arg)?;
    let classes = cfg.federation.task_kinds().first().map_or(2, |k| k.num_classes());
    let rows = accounting(&cfg, classes)?;
    print!("{}", accounting_table(&rows));
    if let Some(r) = rows.iter().find(|r| r.method == Method::Fedmcp) {
        println!(
            "fedmcp communicated / trainable adapters = {}",
            r.communicated_over_trainable_adapters
        );
    }
    Ok(())
}

fn cmd_export(args: &RunArgs) -> fedmcp_core::Result<()> {
    let (cfg, out) = args.config()?;
    for &seed in &cfg.seeds {
        // Same data stream as an experiment run with this seed.
        let specs = cfg
            .federation
            .client_specs(fedmcp_core::derive_seed(seed, 1), cfg.model.vocab_size);
        let clients = build_federation(&specs)?;
        for (k, (spec, data)) in specs.iter().zip(&clients).enumerate() {
            let dir = out
                .join(format!("seed_{seed}"))
                .join(format!("client_{k}_{}", spec.task_kind.as_str()));
            write_records(&dir.join("train.txt"), &data.train)?;
            write_records(&dir.join("validation.txt"), &data.validation)?;
            write_records(&dir.join("test.txt"), &data.test)?;
        }
    }
    println!("datasets: {}", out.display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Params(a) => cmd_params(a),
        Command::ExportData(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                eprintln!("diagnostics: see diagnostics_seed_*.json in the report directory");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
