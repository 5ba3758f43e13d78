//! `viva`: run examinations, grade transcripts, analyse councils.
//!
//! Exit codes: 0 success, 1 user error (bad input or configuration),
//! 2 internal failure (backend errors, aborted grading).

mod analyze;
mod config;
mod exam;
mod grade;

use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use viva_core::cases::{distribution_report, select_case};
use viva_core::guard::{first_question, validate_examiner_turn, ClarificationPatterns};

#[derive(Debug)]
pub enum CliError {
    User(anyhow::Error),
    Internal(anyhow::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Internal(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Marks an error as caused by the caller's input.
pub trait UserContext<T> {
    fn user(self, what: impl std::fmt::Display) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> UserContext<T> for Result<T, E> {
    fn user(self, what: impl std::fmt::Display) -> CliResult<T> {
        self.map_err(|e| CliError::User(e.into().context(what.to_string())))
    }
}

/// Paths shared by most commands.
#[derive(Debug, Clone, Args)]
pub struct Paths {
    /// Directory with auth.txt, project.txt, case.txt and grading/.
    #[arg(long, default_value = "prompts")]
    pub prompts: PathBuf,
    #[arg(long, default_value = "cases.json")]
    pub cases: PathBuf,
    #[arg(long, default_value = "backends.json")]
    pub backends: PathBuf,
    /// Data root: <session>/{transcript.json, council.json, captures/} and audit/.
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    /// Replace every backend with scripted mocks from this file.
    #[arg(long)]
    pub mock_script: Option<PathBuf>,
}

/// Session settings for `exam` and `serve`.
#[derive(Debug, Clone, Args)]
pub struct SessionArgs {
    /// File of authorised student ids, one per line.
    #[arg(long)]
    pub roster: Option<PathBuf>,
    #[arg(long)]
    pub project_questions: Option<u32>,
    #[arg(long)]
    pub case_questions: Option<u32>,
    /// Seconds of silence before the examiner nudges.
    #[arg(long)]
    pub silence_deadline: Option<f64>,
    /// Clarification pattern file, re-read when it changes.
    #[arg(long)]
    pub patterns: Option<PathBuf>,
}

#[derive(Debug, Parser)]
#[command(name = "viva", version, about = "AI oral examinations: examine, grade, analyse")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a text-mode examination over stdin/stdout.
    Exam(exam::ExamArgs),
    /// Grade one transcript or a directory of transcripts.
    Grade(grade::GradeArgs),
    /// Reliability report over stored council results.
    Analyze(analyze::AnalyzeArgs),
    /// Show which case a seed selects.
    SelectCase {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "cases.json")]
        cases: PathBuf,
        /// Case ids to leave out.
        #[arg(long)]
        exclude: Vec<String>,
        /// Also report the selection distribution over seeds 0..N.
        #[arg(long)]
        distribution: Option<u64>,
    },
    /// Run the turn guard on an examiner message (argument or stdin).
    CheckTurn {
        text: Option<String>,
        /// Treat the text as a student utterance and test for a clarification request.
        #[arg(long)]
        clarification: bool,
        #[arg(long)]
        patterns: Option<PathBuf>,
    },
    /// Serve the session and audit HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: std::net::SocketAddr,
        #[command(flatten)]
        paths: Paths,
        #[command(flatten)]
        session: SessionArgs,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Exam(args) => exam::run(args),
        Command::Grade(args) => grade::run(args),
        Command::Analyze(args) => analyze::run(args),
        Command::SelectCase {
            seed,
            cases,
            exclude,
            distribution,
        } => {
            let catalog = config::load_catalog(&cases)?.excluding(exclude);
            let selection = select_case(seed, &catalog).user("selecting a case")?;
            println!("{}\t{}\t{}", selection.index, selection.case.id, selection.case.title);
            if let Some(draws) = distribution {
                let seeds: Vec<u64> = (0..draws).collect();
                let report = distribution_report(&catalog, &seeds).user("distribution")?;
                for (id, count) in &report.counts {
                    println!("{id}\t{count}");
                }
                println!(
                    "draws {}\tchi-square {:.3}\tdf {}\tp {:.4}",
                    report.draws, report.chi_square, report.degrees_of_freedom, report.p_value
                );
            }
            Ok(())
        }
        Command::CheckTurn {
            text,
            clarification,
            patterns,
        } => {
            let text = match text {
                Some(t) => t,
                None => {
                    let mut buf = String::new();
                    std::io::stdin().read_to_string(&mut buf).user("reading stdin")?;
                    buf
                }
            };
            if clarification {
                let patterns = match patterns {
                    Some(p) => ClarificationPatterns::load(&p).user(format!("loading {}", p.display()))?,
                    None => ClarificationPatterns::default(),
                };
                let hit = patterns.is_clarification_request(&text);
                println!("{}", serde_json::json!({ "clarification_request": hit }));
                return Ok(());
            }
            let verdict = validate_examiner_turn(&text);
            println!(
                "{}",
                serde_json::json!({
                    "accepted": verdict.accepted(),
                    "reason": format!("{:?}", verdict.reason),
                    "question_count": verdict.question_count,
                    "first_question": first_question(&text),
                })
            );
            if verdict.accepted() {
                Ok(())
            } else {
                Err(CliError::User(anyhow::anyhow!("turn rejected by the guard")))
            }
        }
        Command::Serve { addr, paths, session } => {
            let state = config::server_state(&paths, &session)?;
            let runtime = tokio::runtime::Runtime::new().map_err(anyhow::Error::from)?;
            runtime
                .block_on(viva_server::serve(addr, std::sync::Arc::new(state)))
                .map_err(|e| CliError::Internal(e.into()))
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(tracing::Level::WARN)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = err.code();
            let (CliError::User(e) | CliError::Internal(e)) = err;
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
