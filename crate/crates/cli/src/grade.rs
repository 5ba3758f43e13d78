use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use clap::Args;
use viva_core::backend::{usage_ledger, CaptureLog, UsageEntry};
use viva_core::council::{Council, CouncilError, GradingPrompts, Rater};
use viva_core::model::{Rubric, Transcript};
use viva_core::orchestrator::{Clock, SystemClock};
use viva_core::storage::{AuditQueue, Store, StoreError, COUNCIL_FILE, TRANSCRIPT_FILE};

use crate::{config, CliError, CliResult, Paths, UserContext};

#[derive(Debug, Args)]
pub struct GradeArgs {
    /// A transcript file, or a directory of `*.json` and `*/transcript.json` files.
    pub path: PathBuf,
    #[command(flatten)]
    pub paths: Paths,
    /// Rubric JSON; the built-in standard rubric when absent.
    #[arg(long)]
    pub rubric: Option<PathBuf>,
    /// Replace existing council results.
    #[arg(long)]
    pub overwrite: bool,
}

/// Outcome class of one transcript.
#[derive(Debug, PartialEq, Eq, PartialOrd, Ord, Clone, Copy)]
enum Status {
    Ok,
    BadInput,
    Aborted,
}

pub fn run(args: GradeArgs) -> CliResult<()> {
    let backends = config::load_backends(&args.paths.backends)?;
    let mocks = config::load_mocks(args.paths.mock_script.as_deref())?;
    let rubric = match &args.rubric {
        Some(path) => config::read_json(path)?,
        None => Rubric::standard(),
    };
    let grading_dir = args.paths.prompts.join("grading");
    let prompts = if grading_dir.is_dir() {
        GradingPrompts::load_dir(&grading_dir).user(format!("loading {}", grading_dir.display()))?
    } else {
        GradingPrompts::default()
    };
    let store = Store::open(&args.paths.data).user(format!("opening {}", args.paths.data.display()))?;
    let queue = AuditQueue::open(store.clone());
    let files = discover(&args.path)?;
    if files.is_empty() {
        return Err(CliError::User(anyhow!("no transcripts under {}", args.path.display())));
    }

    let prices: BTreeMap<_, _> = backends
        .council
        .iter()
        .filter_map(|s| s.prices.map(|p| (s.rater_id.clone(), p)))
        .collect();
    let mut usage: Vec<UsageEntry> = Vec::new();
    let mut worst = Status::Ok;
    let mut graded = 0usize;

    for file in &files {
        let transcript: Transcript = match config::read_json(file) {
            Ok(t) => t,
            Err(CliError::User(e) | CliError::Internal(e)) => {
                println!("{}\tunreadable\t{e:#}", file.display());
                worst = worst.max(Status::BadInput);
                continue;
            }
        };
        // Fresh backends per transcript so scripted mocks replay identically.
        let raters = backends
            .council
            .iter()
            .map(|spec| Ok(Rater::new(spec.clone(), config::backend(spec, mocks.as_ref())?)))
            .collect::<CliResult<Vec<_>>>()?;
        let capture = CaptureLog::in_memory();
        let council = Council::new(raters, rubric.clone())
            .user("council configuration")?
            .with_prompts(prompts.clone())
            .with_capture(capture.clone());
        let sid = transcript.session_id.clone();
        let outcome = council.grade(&transcript);
        let captures = store.captures_dir(&sid).map_err(anyhow::Error::from)?;
        capture.persist(&captures).map_err(anyhow::Error::from)?;
        match outcome {
            Ok(outcome) => {
                store_input(&store, &transcript, file, args.overwrite)?;
                store.store_council(&outcome.result, args.overwrite).map_err(store_error)?;
                let item = queue
                    .enqueue_flags(&outcome.result, SystemClock.now_ms())
                    .map_err(anyhow::Error::from)?;
                usage.extend(outcome.usage);
                graded += 1;
                println!(
                    "{sid}\ttotal {}/20\tflags {}{}",
                    outcome.result.chair.total,
                    outcome.result.flags.len(),
                    item.map(|i| format!("\taudit {}", i.id)).unwrap_or_default()
                );
            }
            Err(err) => {
                worst = worst.max(Status::Aborted);
                let partial = match &err {
                    CouncilError::ChairFailed { partial, .. } => Some(serde_json::to_value(partial.as_ref())),
                    _ => None,
                };
                let record = serde_json::json!({
                    "transcript_ref": sid,
                    "error": err.to_string(),
                    "partial": partial.transpose().map_err(anyhow::Error::from)?,
                });
                let dir = store.session_dir(&sid).map_err(anyhow::Error::from)?;
                std::fs::create_dir_all(&dir).map_err(anyhow::Error::from)?;
                let out = dir.join("council.partial.json");
                let mut bytes = serde_json::to_vec_pretty(&record).map_err(anyhow::Error::from)?;
                bytes.push(b'\n');
                std::fs::write(&out, bytes).map_err(anyhow::Error::from)?;
                println!("{sid}\taborted\t{err}\tpartial {}", out.display());
            }
        }
    }

    if !usage.is_empty() && prices.len() == backends.council.len() {
        match usage_ledger(&usage, &prices) {
            Ok(cost) => eprintln!(
                "cost: {} micro-units ({})",
                cost.total_micro,
                cost.per_backend
                    .iter()
                    .map(|(k, v)| format!("{k} {v}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
            Err(e) => eprintln!("cost: {e}"),
        }
    }
    eprintln!("graded {graded} of {} transcripts", files.len());
    match worst {
        Status::Ok => Ok(()),
        Status::BadInput => Err(CliError::User(anyhow!("some transcripts could not be read"))),
        Status::Aborted => Err(CliError::Internal(anyhow!("grading aborted for some transcripts"))),
    }
}

fn store_error(e: StoreError) -> CliError {
    match e {
        StoreError::Collision(_) => {
            CliError::User(anyhow::Error::from(e).context("result exists (use --overwrite to replace)"))
        }
        other => CliError::Internal(other.into()),
    }
}

/// Copies the transcript into the store unless it already is the stored copy.
fn store_input(store: &Store, transcript: &Transcript, source: &Path, overwrite: bool) -> CliResult<()> {
    let target = store
        .session_dir(&transcript.session_id)
        .map_err(anyhow::Error::from)?
        .join(TRANSCRIPT_FILE);
    let same = match (source.canonicalize(), target.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    if !same {
        store.store_transcript(transcript, overwrite).map_err(store_error)?;
    }
    Ok(())
}

fn discover(path: &Path) -> CliResult<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = std::fs::read_dir(path).user(format!("reading {}", path.display()))?;
    let mut files = Vec::new();
    for entry in entries {
        let p = entry.map_err(anyhow::Error::from)?.path();
        if p.is_dir() {
            let t = p.join(TRANSCRIPT_FILE);
            if t.is_file() {
                files.push(t);
            }
        } else if p.extension().is_some_and(|e| e == "json")
            && p.file_name().is_some_and(|n| n != COUNCIL_FILE && n != "report.json")
        {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}
