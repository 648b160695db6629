use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use promptforge_cli::commands::{self, report_file, SweepTable};
use promptforge_cli::{CliError, CliResult, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "promptforge",
    version,
    about = "Prompt-learning detector for synthetic images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Resolve the concept bank and tokenize the class prompts.
    BuildPrompts(StageArgs),
    /// Scan the data roots and cache image embeddings.
    BuildCache(StageArgs),
    /// Stage-1 training of the prompt context.
    Train(StageArgs),
    /// Pseudo-label the test cache and tune the context on it.
    Ttp(StageArgs),
    /// Write the per-subset AUC/OA report.
    Eval(StageArgs),
    /// Vary one test-time hyper-parameter at a time and tabulate AUC/OA.
    Sweep(StageArgs),
    /// Print the resolved configuration.
    ShowConfig(StageArgs),
}

#[derive(Debug, clap::Args)]
struct StageArgs {
    /// Flat `key = value` config file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Overrides as `--key value` pairs, e.g. `--ttp.top_k 64`.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "--KEY VALUE"
    )]
    overrides: Vec<String>,
}

impl StageArgs {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut pairs = Vec::new();
        let mut it = self.overrides.iter();
        while let Some(flag) = it.next() {
            let key = flag
                .strip_prefix("--")
                .ok_or_else(|| CliError::Config(format!("expected `--key value`, got `{flag}`")))?;
            let (key, value) = match key.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| CliError::Config(format!("`--{key}` needs a value")))?;
                    (key.to_string(), v.clone())
                }
            };
            pairs.push((key, value));
        }
        RunConfig::resolve(self.config.as_deref(), &pairs)
    }
}

fn print_sweep(tables: &[SweepTable]) {
    for t in tables {
        println!("{} (monotone counts: {})", t.param, t.monotone);
        println!("  value\treal\tfake\tauc\toa");
        for r in &t.rows {
            let auc = r
                .macro_auc
                .map_or("undefined".to_string(), |a| format!("{a:.4}"));
            println!(
                "  {}\t{}\t{}\t{auc}\t{:.4}",
                r.value, r.selected_real, r.selected_fake, r.macro_oa
            );
        }
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::BuildPrompts(a) => {
            let s = commands::cmd_build_prompts(&a.resolve()?)?;
            println!("{} fake concepts ({} retrieved)", s.concepts, s.retrieved);
        }
        Command::BuildCache(a) => {
            for s in commands::cmd_build_cache(&a.resolve()?)? {
                println!(
                    "{}: {} of {} images cached, {} skipped",
                    s.split,
                    s.cached,
                    s.entries,
                    s.skipped.len()
                );
            }
        }
        Command::Train(a) => {
            let r = commands::cmd_train(&a.resolve()?)?;
            let last = r.epoch_losses.last().copied().unwrap_or(f64::NAN);
            println!("{} steps, final epoch loss {last:.6}", r.steps.len());
        }
        Command::Ttp(a) => {
            let s = commands::cmd_ttp(&a.resolve()?)?;
            println!(
                "pseudo-labels: {} real, {} fake; {}",
                s.selected_real,
                s.selected_fake,
                if s.tuned {
                    "context tuned"
                } else {
                    "tuning skipped"
                }
            );
        }
        Command::Eval(a) => {
            let cfg = a.resolve()?;
            let r = commands::cmd_eval(&cfg)?;
            for m in &r.subsets {
                let auc = m.auc.map_or("undefined".to_string(), |v| format!("{v:.4}"));
                println!("{}: n={} auc={auc} oa={:.4}", m.subset, m.count, m.oa);
            }
            println!(
                "report: {}",
                cfg.artifact(&report_file(cfg.eval_stage)).display()
            );
        }
        Command::Sweep(a) => print_sweep(&commands::cmd_sweep(&a.resolve()?)?),
        Command::ShowConfig(a) => {
            let mut out = std::io::stdout().lock();
            for (k, v) in a.resolve()?.resolved() {
                // a closed pipe (e.g. `| head`) just ends the listing
                if writeln!(out, "{k} = {v}").is_err() {
                    break;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
