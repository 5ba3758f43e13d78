use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use clap::{Args, ValueEnum};
use viva_core::model::{CouncilResult, Transcript};
use viva_core::reliability::{Metric, ReliabilityReport};
use viva_core::storage::{COUNCIL_FILE, TRANSCRIPT_FILE};

use crate::{config, CliError, CliResult, UserContext};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MetricArg {
    Ordinal,
    Interval,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Searched recursively for council.json files.
    #[arg(long, default_value = "data")]
    pub council_dir: PathBuf,
    /// Markdown output; a JSON twin is written next to it.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ordinal")]
    pub metric: MetricArg,
}

pub fn run(args: AnalyzeArgs) -> CliResult<()> {
    let mut files = Vec::new();
    collect(&args.council_dir, &mut files).user(format!("scanning {}", args.council_dir.display()))?;
    files.sort();
    if files.is_empty() {
        return Err(CliError::User(anyhow!(
            "no {COUNCIL_FILE} files under {}",
            args.council_dir.display()
        )));
    }
    let mut councils: Vec<CouncilResult> = Vec::new();
    let mut durations = BTreeMap::new();
    for file in &files {
        let council: CouncilResult = config::read_json(file)?;
        let sibling = file.with_file_name(TRANSCRIPT_FILE);
        if sibling.is_file() {
            let transcript: Transcript = config::read_json(&sibling)?;
            durations.insert(council.transcript_ref.clone(), transcript.duration_ms() as f64 / 1000.0);
        }
        councils.push(council);
    }
    let metric = match args.metric {
        MetricArg::Ordinal => Metric::Ordinal,
        MetricArg::Interval => Metric::Interval,
    };
    let report = ReliabilityReport::build(&councils, &durations, metric).user("computing statistics")?;
    let md_path = args.report.unwrap_or_else(|| args.council_dir.join("report.md"));
    let json_path = md_path.with_extension("json");
    std::fs::write(&md_path, report.to_markdown()).user(format!("writing {}", md_path.display()))?;
    let mut json = serde_json::to_vec_pretty(&report).map_err(anyhow::Error::from)?;
    json.push(b'\n');
    std::fs::write(&json_path, json).user(format!("writing {}", json_path.display()))?;
    println!(
        "{} councils, {} flagged; report {} and {}",
        report.councils,
        report.flags_summary.flagged_councils,
        md_path.display(),
        json_path.display()
    );
    Ok(())
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == COUNCIL_FILE) {
            out.push(path);
        }
    }
    Ok(())
}
