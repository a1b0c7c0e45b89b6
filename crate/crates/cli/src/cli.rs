//! Command-line dispatch. Exit codes: 0 success, 1 operation error,
//! 2 usage error.

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use logtalk::eval::{self, AnswerLabel, UnderstandingLabel};
use logtalk::llm;
use logtalk::ontology::{Category, EntrySource, OntologyEntry};
use logtalk::orchestrator::{AnswerOutcome, AnswerStatus, Orchestrator};

use crate::api::{self, EvalRunRequest, IngestRequest};
use crate::config::AppConfig;
use crate::error::ApiError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Default config file looked up in the working directory.
pub const CONFIG_FILE: &str = "logtalk.toml";

#[derive(Debug, Parser)]
#[command(name = "logtalk", version, about = "Ask questions about a process-mining event log in plain language")]
pub struct Cli {
    /// TOML config; `logtalk.toml` in the working directory when present.
    #[arg(long, global = true, env = "LOGTALK_CONFIG")]
    pub config: Option<PathBuf>,
    /// Store file, overriding the config.
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a CSV event log, replacing the current one.
    Ingest(IngestArgs),
    /// Answer a question.
    Ask {
        question: String,
        /// Session id to use instead of a generated one.
        #[arg(long)]
        session: Option<String>,
        /// Ask for clarification on the terminal when the answer needs it.
        #[arg(short, long)]
        interactive: bool,
        /// Print the outcome as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Resume a session that awaits clarification.
    Feedback {
        session: String,
        text: String,
        #[arg(long)]
        json: bool,
    },
    /// Serve the HTTP API.
    Serve {
        /// Address to bind, overriding the config.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Manage the context ontology.
    #[command(subcommand)]
    Ontology(OntologyCommand),
    /// Run and label question corpora.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Print a session's transcript as JSON.
    Transcript { session: String },
    /// Print the cost ledger of every recorded call.
    Costs {
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    pub csv: PathBuf,
    #[arg(long, default_value = "case:concept:name")]
    pub case_col: String,
    #[arg(long, default_value = "concept:name")]
    pub activity_col: String,
    #[arg(long, default_value = "time:timestamp")]
    pub timestamp_col: String,
    #[arg(long)]
    pub resource_col: Option<String>,
    /// `iso8601` or a strftime pattern.
    #[arg(long, default_value = "iso8601")]
    pub timestamp_format: String,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CategoryArg {
    Domain,
    ProcessMining,
    Dataset,
    Mapping,
}

impl From<CategoryArg> for Category {
    fn from(c: CategoryArg) -> Self {
        match c {
            CategoryArg::Domain => Category::Domain,
            CategoryArg::ProcessMining => Category::ProcessMining,
            CategoryArg::Dataset => Category::Dataset,
            CategoryArg::Mapping => Category::Mapping,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum OntologyCommand {
    /// List every entry.
    List {
        #[arg(long)]
        json: bool,
    },
    /// Add or update a reviewed expert entry.
    Add {
        #[arg(long)]
        term: String,
        #[arg(long, value_enum)]
        category: CategoryArg,
        #[arg(long)]
        definition: String,
        /// SQL expression linking the term to the data.
        #[arg(long)]
        mapping: Option<String>,
    },
    /// Mark an entry as reviewed so prompts may use it.
    Review { id: i64 },
    Delete { id: i64 },
    /// Write the ontology as JSON to a file or stdout.
    Export { file: Option<PathBuf> },
    /// Merge entries from a JSON file.
    Import { file: PathBuf },
    /// Ask the model to propose unreviewed entries from the schema.
    Bootstrap,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Answer every question of a corpus; reruns skip finished questions.
    Run {
        corpus: PathBuf,
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
        /// Replace years in the questions with this one.
        #[arg(long)]
        rewrite_year: Option<i32>,
    },
    /// Record a label; the newest label of a question counts.
    Label {
        run_id: String,
        question_id: String,
        /// fully-answered, partially-answered or wrong.
        answer: String,
        /// understood, partially-understood or not-understood.
        understanding: String,
        #[arg(long, default_value = "")]
        labeler: String,
        #[arg(long, default_value = "")]
        notes: String,
    },
    /// Summarise the labels of a run.
    Report {
        run_id: String,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
    },
    /// List run ids.
    Runs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    Csv,
    Json,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Api(#[from] ApiError),
    #[error(transparent)]
    Serve(#[from] api::ServeError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// What a finished command reports to the shell.
enum Done {
    Ok,
    Failed,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                EXIT_USAGE
            } else {
                let _ = write!(out, "{text}");
                EXIT_OK
            };
        }
    };
    match dispatch(cli, input, out) {
        Ok(Done::Ok) => EXIT_OK,
        Ok(Done::Failed) => EXIT_FAILURE,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<AppConfig, CliError> {
    let mut config = match &cli.config {
        Some(p) => AppConfig::load(p)?,
        None if std::path::Path::new(CONFIG_FILE).exists() => AppConfig::load(std::path::Path::new(CONFIG_FILE))?,
        None => AppConfig::default(),
    };
    if let Some(store) = &cli.store {
        config.store = store.clone();
    }
    Ok(config)
}

fn json_line(out: &mut dyn Write, v: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(|e| ApiError::internal(e.to_string()))?;
    writeln!(out, "{text}")?;
    Ok(())
}

fn dispatch(cli: Cli, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<Done, CliError> {
    let config = load_config(&cli)?;
    if let Command::Serve { bind } = &cli.command {
        let orch = config.open()?;
        let addr = bind.clone().unwrap_or(config.server.bind.clone());
        let rt = tokio::runtime::Runtime::new()?;
        rt.block_on(api::serve(orch, &addr))?;
        return Ok(Done::Ok);
    }
    let o = config.open()?;
    match cli.command {
        Command::Serve { .. } => unreachable!("handled above"),
        Command::Ingest(a) => {
            let req = IngestRequest {
                path: Some(a.csv),
                csv: None,
                case_col: Some(a.case_col),
                activity_col: Some(a.activity_col),
                timestamp_col: Some(a.timestamp_col),
                resource_col: a.resource_col,
                timestamp_format: Some(a.timestamp_format),
            };
            let report = api::ingest_with(&o, &req)?;
            writeln!(out, "loaded {} rows, rejected {}", report.rows_loaded, report.rows_rejected)?;
            writeln!(out, "table {} ({} rows)", report.schema.table_name, report.schema.row_count)?;
            for c in &report.schema.columns {
                writeln!(out, "  {} {}", c.name, c.datatype.as_str())?;
            }
        }
        Command::Ask {
            question,
            session,
            interactive,
            json,
        } => {
            let outcome = match session {
                Some(id) => o.answer_as(&id, &question),
                None => o.answer(&question),
            }
            .map_err(ApiError::from)?;
            return converse(&o, outcome, interactive, json, input, out);
        }
        Command::Feedback { session, text, json } => {
            let outcome = o.resume_with_feedback(&session, &text).map_err(ApiError::from)?;
            return converse(&o, outcome, false, json, input, out);
        }
        Command::Ontology(cmd) => ontology(&o, cmd, out)?,
        Command::Eval(cmd) => return evaluate(&o, cmd, out),
        Command::Transcript { session } => {
            let rec = o
                .session(&session)
                .map_err(ApiError::from)?
                .ok_or_else(|| ApiError::from(logtalk::orchestrator::OrchestratorError::UnknownSession(session)))?;
            json_line(out, &rec)?;
        }
        Command::Costs { json } => {
            let ledger = llm::stored_ledger(o.db()).map_err(ApiError::from)?;
            if json {
                json_line(out, &ledger)?;
            } else {
                writeln!(out, "{}", ledger.to_text())?;
            }
        }
    }
    Ok(Done::Ok)
}

/// Prints the outcome; in interactive mode keeps asking for clarification
/// until the session is answered or the user enters nothing.
fn converse(
    o: &Orchestrator,
    mut outcome: AnswerOutcome,
    interactive: bool,
    json: bool,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
) -> Result<Done, CliError> {
    loop {
        if json {
            json_line(out, &outcome)?;
        } else {
            print_outcome(&outcome, out)?;
        }
        if outcome.status != AnswerStatus::NeedsUserFeedback {
            break;
        }
        if !interactive {
            if !json {
                writeln!(
                    out,
                    "Resume with: logtalk feedback {} \"<clarification>\"",
                    outcome.session_id
                )?;
            }
            break;
        }
        write!(out, "clarification> ")?;
        out.flush()?;
        let mut line = String::new();
        if input.read_line(&mut line)? == 0 || line.trim().is_empty() {
            writeln!(out)?;
            break;
        }
        outcome = o
            .resume_with_feedback(&outcome.session_id, line.trim())
            .map_err(ApiError::from)?;
    }
    Ok(match outcome.status {
        AnswerStatus::Failed => Done::Failed,
        AnswerStatus::Answered | AnswerStatus::NeedsUserFeedback => Done::Ok,
    })
}

fn print_outcome(o: &AnswerOutcome, out: &mut dyn Write) -> Result<(), CliError> {
    match o.status {
        AnswerStatus::Answered if o.cache_hit => writeln!(out, "Answered from the cache (session {})", o.session_id)?,
        AnswerStatus::Answered => {
            let stage = o.stage.map(|s| s.to_string()).unwrap_or_default();
            writeln!(
                out,
                "Answered at {stage} after {} attempt(s) (session {})",
                o.attempts_used, o.session_id
            )?
        }
        AnswerStatus::NeedsUserFeedback => writeln!(
            out,
            "No valid answer after {} attempt(s); the question needs clarification (session {})",
            o.attempts_used, o.session_id
        )?,
        AnswerStatus::Failed => writeln!(out, "Failed (session {})", o.session_id)?,
    }
    if let Some(r) = &o.result {
        writeln!(out, "\n{}", r.to_text())?;
    }
    if let Some(sql) = &o.sql {
        writeln!(out, "\nSQL:\n{sql}")?;
    }
    if let Some(reasoning) = o.reasoning.as_deref().filter(|r| !r.trim().is_empty()) {
        writeln!(out, "\nReasoning:\n{reasoning}")?;
    }
    if o.status != AnswerStatus::Answered {
        if let Some(e) = &o.last_error {
            writeln!(out, "\nLast error: {e}")?;
        }
    }
    Ok(())
}

fn ontology(o: &Orchestrator, cmd: OntologyCommand, out: &mut dyn Write) -> Result<(), CliError> {
    let ont = o.ontology();
    match cmd {
        OntologyCommand::List { json } => {
            let entries = ont.list().map_err(ApiError::from)?;
            if json {
                json_line(out, &entries)?;
            }
            for e in entries.iter().filter(|_| !json) {
                let flag = if e.reviewed { "" } else { " [pending review]" };
                writeln!(out, "{:>4} {:<15} {}{flag}", e.id.unwrap_or_default(), e.category.as_str(), e.term)?;
                writeln!(out, "     {}", e.definition)?;
                if let Some(m) = &e.data_mapping {
                    writeln!(out, "     mapping: {m}")?;
                }
            }
        }
        OntologyCommand::Add {
            term,
            category,
            definition,
            mapping,
        } => {
            let entry = OntologyEntry {
                id: None,
                term,
                category: category.into(),
                definition,
                data_mapping: mapping,
                reviewed: true,
                source: EntrySource::Expert,
            };
            let id = ont.upsert(&entry).map_err(ApiError::from)?;
            writeln!(out, "stored entry {id}")?;
        }
        OntologyCommand::Review { id } => {
            let e = ont.review(id).map_err(ApiError::from)?;
            writeln!(out, "reviewed {} ({})", e.term, e.category.as_str())?;
        }
        OntologyCommand::Delete { id } => {
            if !ont.delete(id).map_err(ApiError::from)? {
                return Err(ApiError::from(logtalk::ontology::OntologyError::UnknownEntry(id)).into());
            }
            writeln!(out, "deleted entry {id}")?;
        }
        OntologyCommand::Export { file } => {
            let json = ont.export_json().map_err(ApiError::from)?;
            match file {
                Some(path) => std::fs::write(path, json)?,
                None => writeln!(out, "{json}")?,
            }
        }
        OntologyCommand::Import { file } => {
            let text = std::fs::read_to_string(&file)?;
            let n = ont.import_json(&text).map_err(ApiError::from)?;
            writeln!(out, "imported {n} entries")?;
        }
        OntologyCommand::Bootstrap => {
            let schema = o
                .event_log()
                .derive_schema_context(o.config().sample_values)
                .map_err(|e| ApiError::from(logtalk::orchestrator::OrchestratorError::from(e)))?;
            let report = ont
                .bootstrap_proposals(&schema, o.gateway(), o.templates())
                .map_err(ApiError::from)?;
            for e in &report.stored {
                writeln!(out, "proposed {} ({}): {}", e.term, e.category.as_str(), e.definition)?;
            }
            for w in &report.warnings {
                writeln!(out, "warning: {}", w.message)?;
            }
            writeln!(out, "{} proposal(s) await review", report.stored.len())?;
        }
    }
    Ok(())
}

fn evaluate(o: &Orchestrator, cmd: EvalCommand, out: &mut dyn Write) -> Result<Done, CliError> {
    match cmd {
        EvalCommand::Run {
            corpus,
            run_id,
            parallelism,
            rewrite_year,
        } => {
            let mut questions = eval::load_corpus(&corpus).map_err(|e| ApiError::from(eval::EvalError::from(e)))?;
            if let Some(y) = rewrite_year {
                questions = eval::rewrite_years(&questions, y);
            }
            let req = EvalRunRequest {
                questions: Some(questions),
                corpus_path: None,
                run_id,
                parallelism: Some(parallelism),
            };
            let s = api::run_eval_with(o, &req)?;
            writeln!(
                out,
                "run {}: {} answered, {} need clarification, {} failed ({} run now, {} already done)",
                s.run_id, s.answered, s.needs_user_feedback, s.failed, s.executed, s.skipped
            )?;
            writeln!(out, "{}", s.ledger.to_text())?;
        }
        EvalCommand::Label {
            run_id,
            question_id,
            answer,
            understanding,
            labeler,
            notes,
        } => {
            let a: AnswerLabel = answer.parse().map_err(ApiError::from)?;
            let u: UnderstandingLabel = understanding.parse().map_err(ApiError::from)?;
            let v = eval::record_label(o.db(), &run_id, &question_id, a, u, &labeler, &notes).map_err(ApiError::from)?;
            writeln!(out, "label version {v} recorded for {run_id}/{question_id}")?;
        }
        EvalCommand::Report { run_id, format } => {
            let report = api::report_with(o, &run_id)?;
            match format {
                ReportFormat::Json => json_line(out, &report)?,
                ReportFormat::Csv => {
                    write!(out, "{}", report.ratios.to_csv())?;
                    writeln!(out)?;
                    write!(out, "{}", report.stages.to_csv())?;
                }
                ReportFormat::Text => {
                    writeln!(out, "{}\n", report.ratios.to_text())?;
                    writeln!(out, "{}\n", report.stages.to_text())?;
                    writeln!(out, "{}", report.ledger.to_text())?;
                }
            }
        }
        EvalCommand::Runs => {
            for id in eval::runs(o.db()).map_err(ApiError::from)? {
                writeln!(out, "{id}")?;
            }
        }
    }
    Ok(Done::Ok)
}

/// Runs with the process arguments and standard streams.
pub fn main_exit_code() -> i32 {
    let stdin = std::io::stdin();
    let mut input = stdin.lock();
    let mut out = std::io::stdout();
    let mut err = std::io::stderr();
    run(std::env::args_os(), &mut input, &mut out, &mut err)
}
