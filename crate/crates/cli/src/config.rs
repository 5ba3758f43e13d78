use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use anyhow::anyhow;
use viva_core::backend::{instantiate, Backend, BackendSpec, BackendsConfig, MockScriptSet};
use viva_core::cases::CaseCatalog;
use viva_core::guard::PatternFile;
use viva_core::model::{from_canonical_json, Validate};
use viva_core::orchestrator::{Orchestrator, PhaseTemplates, SessionConfig, SystemClock};
use viva_core::storage::Store;

use crate::{CliError, CliResult, Paths, SessionArgs, UserContext};

pub fn read_json<T: serde::de::DeserializeOwned + Validate>(path: &Path) -> CliResult<T> {
    let bytes = std::fs::read(path).user(format!("reading {}", path.display()))?;
    from_canonical_json(&bytes).user(format!("parsing {}", path.display()))
}

pub fn load_catalog(path: &Path) -> CliResult<CaseCatalog> {
    read_json(path)
}

pub fn load_mocks(path: Option<&Path>) -> CliResult<Option<MockScriptSet>> {
    path.map(read_json).transpose()
}

pub fn load_backends(path: &Path) -> CliResult<BackendsConfig> {
    read_json(path)
}

/// Examiner spec: from the backends file when present, otherwise a
/// placeholder named `examiner` that only a mock script can serve.
pub fn examiner_spec(paths: &Paths, mocks: Option<&MockScriptSet>) -> CliResult<BackendSpec> {
    if paths.backends.exists() {
        let config = load_backends(&paths.backends)?;
        if let Some(spec) = config.examiner {
            return Ok(spec);
        }
        if mocks.is_none() {
            return Err(CliError::User(anyhow!(
                "{} has no `examiner` entry",
                paths.backends.display()
            )));
        }
    } else if mocks.is_none() {
        return Err(CliError::User(anyhow!(
            "{} not found; pass --backends or --mock-script",
            paths.backends.display()
        )));
    }
    Ok(BackendSpec {
        rater_id: "examiner".into(),
        family_label: "mock".into(),
        endpoint: None,
        sampling: Default::default(),
        is_chair: false,
        prices: None,
    })
}

pub fn backend(spec: &BackendSpec, mocks: Option<&MockScriptSet>) -> CliResult<Arc<dyn Backend>> {
    instantiate(spec, mocks).user(format!("backend `{}`", spec.rater_id))
}

pub fn load_roster(path: &Path) -> CliResult<BTreeSet<String>> {
    let text = std::fs::read_to_string(path).user(format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

pub fn session_config(args: &SessionArgs) -> CliResult<SessionConfig> {
    let mut config = SessionConfig::default();
    if let Some(path) = &args.roster {
        config.roster = Some(load_roster(path)?);
    }
    if let Some(n) = args.project_questions {
        config.project_questions = n;
    }
    if let Some(n) = args.case_questions {
        config.case_questions = n;
    }
    if let Some(secs) = args.silence_deadline {
        config.silence_deadline_secs = secs;
    }
    config.validate().user("session settings")?;
    Ok(config)
}

/// Orchestrator without a clock; callers attach the one they need.
pub fn orchestrator(paths: &Paths, args: &SessionArgs) -> CliResult<Orchestrator> {
    let templates = PhaseTemplates::load_dir(&paths.prompts)
        .user(format!("loading prompts from {}", paths.prompts.display()))?;
    let catalog = load_catalog(&paths.cases)?;
    let mocks = load_mocks(paths.mock_script.as_deref())?;
    let spec = examiner_spec(paths, mocks.as_ref())?;
    let mut orch = Orchestrator::new(templates, catalog, backend(&spec, mocks.as_ref())?);
    if let Some(path) = &args.patterns {
        let file = PatternFile::open(path).user(format!("loading {}", path.display()))?;
        orch = orch.with_pattern_file(Arc::new(file));
    }
    Ok(orch)
}

pub fn server_state(paths: &Paths, args: &SessionArgs) -> CliResult<viva_server::AppState> {
    let clock = Arc::new(SystemClock);
    let orch = orchestrator(paths, args)?.with_clock(clock.clone());
    let store = Store::open(&paths.data).user(format!("opening {}", paths.data.display()))?;
    Ok(viva_server::AppState::new(orch, clock, store, session_config(args)?))
}
