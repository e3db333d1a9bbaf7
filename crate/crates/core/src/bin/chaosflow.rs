use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use chaosflow::harness::{
    evaluate, generate_scenarios, reanalyze, run_batch, ArchiveStore, Catalog, GeneratorConfig, HarnessError, RunContext,
    RunMode,
};
use chaosflow::topology::load_topology;

#[derive(Parser)]
#[command(name = "chaosflow", version, about = "Chaos experiments over a simulated service mesh")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the scenario list for a config, one JSON object per line.
    Gen {
        #[arg(long)]
        config: PathBuf,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute baseline and chaos runs and write archives.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Only these scenario ids; repeatable. Defaults to all.
        #[arg(long)]
        scenario: Vec<String>,
        #[arg(long, default_value = "archives")]
        out: PathBuf,
    },
    /// Re-run detection and ranking on an archived chaos run.
    Rca {
        /// Directory holding archive.json.
        #[arg(long)]
        archive: PathBuf,
        /// Config naming the topology and flows; bundled assets otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compute metrics over a directory of archives.
    Eval {
        #[arg(long)]
        archives: PathBuf,
        /// Also write the markdown report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Topology utilities.
    Topo {
        #[command(subcommand)]
        command: TopoCommand,
    },
}

#[derive(Subcommand)]
enum TopoCommand {
    /// Validate a topology document.
    Check { path: PathBuf },
}

#[derive(Debug)]
enum CliError {
    Harness(HarnessError),
    Other(String),
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        CliError::Harness(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Harness(e) => write!(f, "{e}"),
            CliError::Other(s) => f.write_str(s),
        }
    }
}

fn load(config: &Path) -> Result<(GeneratorConfig, Catalog), CliError> {
    let cfg = GeneratorConfig::load(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let catalog = Catalog::load(&cfg, base)?;
    Ok((cfg, catalog))
}

fn write_out(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| CliError::Other(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { config, out } => {
            let (cfg, catalog) = load(&config)?;
            let mut text = String::new();
            for s in generate_scenarios(&cfg, &catalog)? {
                text.push_str(&serde_json::to_string(&s).expect("scenario serializes"));
                text.push('\n');
            }
            write_out(out.as_deref(), &text)
        }
        Command::Run { config, scenario, out } => {
            let (cfg, catalog) = load(&config)?;
            let mut scenarios = generate_scenarios(&cfg, &catalog)?;
            if !scenario.is_empty() {
                if let Some(missing) = scenario.iter().find(|id| !scenarios.iter().any(|s| &s.id == *id)) {
                    return Err(CliError::Other(format!("unknown scenario `{missing}`")));
                }
                scenarios.retain(|s| scenario.contains(&s.id));
            }
            let store = ArchiveStore::open(&out)?;
            let ctx = RunContext::from_config(&catalog, &cfg);
            for pair in run_batch(&scenarios, &ctx, Some(&store))? {
                for a in [&pair.baseline, &pair.chaos] {
                    println!("{}\t{}\t{}\t{}", a.run_id, a.scenario.id, a.result.verdict, a.digest);
                }
            }
            Ok(())
        }
        Command::Rca { archive, config } => {
            let (cfg, catalog) = match &config {
                Some(c) => {
                    let (cfg, cat) = load(c)?;
                    (Some(cfg), cat)
                }
                None => (None, Catalog::builtin()),
            };
            let target = ArchiveStore::read(&archive)?;
            if target.mode != RunMode::Chaos {
                return Err(CliError::Other(format!("{} is a baseline run", target.run_id)));
            }
            let siblings = archive.parent().map(ArchiveStore::load_all).transpose()?.unwrap_or_default();
            let ctx = match &cfg {
                Some(c) => RunContext::from_config(&catalog, c),
                None => RunContext::new(&catalog),
            };
            let ranking = reanalyze(&target, &ctx, &siblings)?;
            print!("{}", ranking.to_jsonl());
            Ok(())
        }
        Command::Eval { archives, out } => {
            let all = ArchiveStore::load_all(&archives)?;
            let report = evaluate(&all)?;
            let md = report.to_markdown();
            if let Some(p) = &out {
                write_out(Some(p), &md)?;
            } else {
                println!("{md}");
            }
            print!("{}", report.metric_lines());
            Ok(())
        }
        Command::Topo { command: TopoCommand::Check { path } } => {
            let text = fs::read_to_string(&path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
            let t = load_topology(&text).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
            println!("ok {} services={} edges={} entry_points={}", t.name, t.services.len(), t.edges().count(), t.entry_points.len());
            Ok(())
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
