use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::anyhow;
use clap::Args;
use viva_core::backend::CaptureLog;
use viva_core::model::{Role, StudentContext};
use viva_core::orchestrator::{Clock, SessionError, SessionState, SimClock, SystemClock};
use viva_core::storage::Store;

use crate::{config, CliError, CliResult, Paths, SessionArgs, UserContext};

#[derive(Debug, Args)]
pub struct ExamArgs {
    /// Student context JSON (student_id, display_name, project_summary).
    #[arg(long)]
    pub student: PathBuf,
    #[command(flatten)]
    pub paths: Paths,
    #[command(flatten)]
    pub session: SessionArgs,
    /// Case-selection seed; derived from the session id when absent.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub session_id: Option<String>,
    /// Deterministic clock starting at 0 and advancing one second per reading.
    #[arg(long)]
    pub sim_clock: bool,
    /// Replace an existing transcript for this session.
    #[arg(long)]
    pub overwrite: bool,
}

const HELP: &str = "commands: /silence SECONDS, /resume, /quit";

/// Reads student turns from stdin, one per line, and prints examiner and
/// system turns to stdout. EOF or `/quit` ends the session.
pub fn run(args: ExamArgs) -> CliResult<()> {
    let student: StudentContext = config::read_json(&args.student)?;
    let clock: Arc<dyn Clock> = if args.sim_clock {
        Arc::new(SimClock::new(0, 1000))
    } else {
        Arc::new(SystemClock)
    };
    let capture = CaptureLog::in_memory();
    let orch = config::orchestrator(&args.paths, &args.session)?
        .with_clock(clock)
        .with_capture(capture.clone());
    let mut session = config::session_config(&args.session)?;
    session.session_id = args.session_id.clone();
    session.seed = args.seed;
    let store = Store::open(&args.paths.data).user(format!("opening {}", args.paths.data.display()))?;

    let (mut state, _) = orch.start_session(student, session).user("starting the session")?;
    let mut out = std::io::stdout().lock();
    let mut printed = 0;
    print_new(&mut out, &state, &mut printed)?;

    let stdin = std::io::stdin();
    for line in stdin.lock().lines() {
        let line = line.user("reading stdin")?;
        let input = line.trim();
        if input.is_empty() {
            continue;
        }
        if input == "/quit" {
            break;
        }
        if let Some(rest) = input.strip_prefix("/silence") {
            let secs: f64 = match rest.trim().parse() {
                Ok(v) => v,
                Err(_) => {
                    eprintln!("{HELP}");
                    continue;
                }
            };
            orch.on_silence(&mut state, secs);
        } else if input == "/resume" {
            if let Err(e) = orch.resume(&mut state) {
                report(&e);
            }
        } else if input.starts_with('/') {
            eprintln!("{HELP}");
            continue;
        } else if let Err(e) = orch.advance(&mut state, input) {
            report(&e);
        }
        print_new(&mut out, &state, &mut printed)?;
        if state.is_ended() {
            break;
        }
    }
    let failure = (state.suspended && !state.is_ended())
        .then(|| anyhow!("session ended while suspended after a backend failure"));

    let transcript = orch.end_session(&mut state);
    print_new(&mut out, &state, &mut printed)?;
    let path = store.store_transcript(&transcript, args.overwrite).map_err(|e| match e {
        viva_core::storage::StoreError::Collision(_) | viva_core::storage::StoreError::InvalidId(_) => {
            CliError::User(anyhow::Error::from(e).context("storing the transcript (use --overwrite to replace)"))
        }
        other => CliError::Internal(other.into()),
    })?;
    let captures = store.captures_dir(&transcript.session_id).map_err(anyhow::Error::from)?;
    capture.persist(&captures).map_err(anyhow::Error::from)?;
    eprintln!(
        "transcript: {} ({:?}, {} turns)",
        path.display(),
        transcript.termination,
        transcript.turns.len()
    );
    match failure {
        Some(e) => Err(CliError::Internal(e)),
        None => Ok(()),
    }
}

fn report(err: &SessionError) {
    eprintln!("! {err}");
}

fn print_new(out: &mut impl Write, state: &SessionState, printed: &mut usize) -> CliResult<()> {
    for turn in &state.turns[*printed..] {
        let who = match turn.role {
            Role::Examiner => "examiner",
            Role::System => "system",
            Role::Student => continue,
        };
        writeln!(out, "{who}> {}", turn.text).map_err(anyhow::Error::from)?;
    }
    *printed = state.turns.len();
    out.flush().map_err(anyhow::Error::from)?;
    Ok(())
}
