//! `arbor`: generate research ideas, run the staged experiment search on
//! one of them, and export the resulting tree.
//!
//! Exit codes: 0 success, 1 validation error, 2 aborted run,
//! 3 infrastructure error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use arbor_core::checkpoint::{CheckpointError, RunStatus};
use arbor_core::config::{ConfigError, RunConfig};
use arbor_core::export::{export, ExportFormat};
use arbor_core::ideation::{generate_ideas, Idea, IdeationError};
use arbor_core::orchestrator::{self, RunError};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "arbor", version, about = "Staged tree search over generated ML experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate research ideas for a topic description.
    Ideate {
        /// Topic description file (markdown or plain text).
        #[arg(long)]
        topic: PathBuf,
        /// Number of ideas to generate.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for the idea files.
        #[arg(long, default_value = "ideas")]
        out: PathBuf,
        /// Run configuration supplying the backend; defaults to the mock.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the four experiment stages and the writeup for an idea file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// A single idea object or the ideas.json list written by `ideate`.
        #[arg(long)]
        idea: PathBuf,
        /// Continue from the latest checkpoint of the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Export the tree of a run directory.
    Export {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "json")]
        format: String,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const EXIT_VALIDATION: u8 = 1;
const EXIT_ABORTED: u8 = 2;
const EXIT_INFRA: u8 = 3;

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn validation(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    fn infra(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_INFRA,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Backend(_) => Failure::infra(e.to_string()),
            _ => Failure::validation(e.to_string()),
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(c) => c.into(),
            RunError::InvalidIdea(_) | RunError::RunExists(_) => Failure::validation(e.to_string()),
            RunError::Checkpoint(CheckpointError::MissingCheckpoint(_)) => Failure::validation(e.to_string()),
            _ => Failure::infra(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ideate {
            topic,
            count,
            seed,
            out,
            config,
        } => cmd_ideate(&topic, count, seed, &out, config.as_deref()),
        Command::Run { config, idea, resume } => cmd_run(&config, &idea, resume),
        Command::Export { run, format, out } => cmd_export(&run, &format, out.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::infra(format!("cannot write {}: {e}", path.display())))
}

fn cmd_ideate(
    topic: &Path,
    count: Option<usize>,
    seed: Option<u64>,
    out: &Path,
    config: Option<&Path>,
) -> Result<u8, Failure> {
    let config = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let text = std::fs::read_to_string(topic)
        .map_err(|e| Failure::validation(format!("topic file {}: {e}", topic.display())))?;
    let ideation = config.ideation_config(count, seed);
    let gateway = config.gateway()?;
    let literature = config.literature()?;
    let report = generate_ideas(&text, &ideation, &gateway, literature.as_ref()).map_err(|e| match e {
        IdeationError::Gateway(_) => Failure::infra(e.to_string()),
        _ => Failure::validation(e.to_string()),
    })?;
    std::fs::create_dir_all(out).map_err(|e| Failure::infra(format!("cannot create {}: {e}", out.display())))?;
    for idea in &report.ideas {
        write_file(
            &out.join(format!("{}.json", idea.name)),
            &serde_json::to_string_pretty(idea).expect("idea serializes"),
        )?;
    }
    write_file(
        &out.join("ideas.json"),
        &serde_json::to_string_pretty(&report.ideas).expect("ideas serialize"),
    )?;
    write_file(
        &out.join("transcripts.json"),
        &serde_json::to_string_pretty(&report.transcripts).expect("transcripts serialize"),
    )?;
    for (i, idea) in report.ideas.iter().enumerate() {
        println!("[{i}] {}: {}", idea.name, idea.title);
    }
    for (slot, reason) in &report.skipped {
        eprintln!("slot {slot} produced no idea: {reason}");
    }
    Ok(0)
}

/// Reads one idea object or a list of them.
fn load_ideas(path: &Path) -> Result<Vec<Idea>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::validation(format!("idea file {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Failure::validation(format!("idea file {}: {e}", path.display())))?;
    let ideas: Vec<Idea> = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|i| vec![i])
    }
    .map_err(|e| Failure::validation(format!("idea file {}: {e}", path.display())))?;
    for idea in &ideas {
        idea.validate()
            .map_err(|e| Failure::validation(format!("idea file {}: {e}", path.display())))?;
    }
    Ok(ideas)
}

fn cmd_run(config_path: &Path, idea_path: &Path, resume: bool) -> Result<u8, Failure> {
    let config = RunConfig::load(config_path)?;
    let ideas = load_ideas(idea_path)?;
    let selected: Vec<&Idea> = ideas
        .iter()
        .enumerate()
        .filter(|(i, _)| ideas.len() == 1 || config.idea_selection.includes(*i))
        .map(|(_, idea)| idea)
        .collect();
    if selected.is_empty() {
        return Err(Failure::validation("idea_selection matches no idea in the file"));
    }
    let mut code = 0;
    for idea in selected {
        let outcome = orchestrator::run(&config, idea, resume)?;
        let dir = outcome.run_dir.display();
        match outcome.status {
            RunStatus::Done => println!("{}: done ({dir})", outcome.run_id),
            RunStatus::Aborted => {
                println!(
                    "{}: aborted: {} ({dir})",
                    outcome.run_id,
                    outcome.reason.as_deref().unwrap_or("unknown reason")
                );
                code = EXIT_ABORTED;
            }
            status if outcome.halted => {
                println!("{}: stopped after checkpoint in {status:?} ({dir})", outcome.run_id)
            }
            status => println!("{}: ended in {status:?} ({dir})", outcome.run_id),
        }
    }
    Ok(code)
}

fn cmd_export(run: &Path, format: &str, out: Option<&Path>) -> Result<u8, Failure> {
    let format: ExportFormat = format.parse().map_err(Failure::validation)?;
    let text = export(run, format).map_err(|e| match e {
        CheckpointError::MissingCheckpoint(_) => Failure::validation(e.to_string()),
        _ => Failure::infra(e.to_string()),
    })?;
    match out {
        Some(path) => write_file(path, &text)?,
        None => print!("{text}"),
    }
    Ok(0)
}
