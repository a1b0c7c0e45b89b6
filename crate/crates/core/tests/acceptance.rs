//! End-to-end acceptance checks. Each criterion prints one PASS or FAIL
//! line; the process exits non-zero when any criterion fails.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::NaiveDateTime;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rust_decimal::Decimal;

use logtalk::cache::{cosine, Vector};
use logtalk::clock::StepClock;
use logtalk::db::Db;
use logtalk::eval::{self, AnswerLabel, RatioTable, RunOptions, StageTable, UnderstandingLabel};
use logtalk::eventlog::{ColumnMapping, EventLog, SchemaContext, TimestampFormat, Value, DEFAULT_ROW_CAP};
use logtalk::guard::{self, GuardError};
use logtalk::llm::{
    ChatProvider, ChatRequest, ChatResponse, Gateway, GatewayConfig, ModelTier, ProviderError, ScriptedProvider, Tier,
};
use logtalk::orchestrator::{AnswerStatus, Orchestrator, OrchestratorConfig, ShotMode, Stage, StepEvent};

const TOY: &str = include_str!("fixtures/toy_log.csv");
const CORPUS: &str = include_str!("fixtures/corpus_10.csv");
const DETERMINISM_SCRIPT: &str = include_str!("fixtures/determinism_script.json");
const ESCALATION_SCRIPT: &str = include_str!("fixtures/escalation_script.json");
const CASE_COUNT_SQL: &str = include_str!("fixtures/reference_sql/case_count.sql");
const VARIANT_COUNT_SQL: &str = include_str!("fixtures/reference_sql/variant_count.sql");
const CASE_DURATIONS_SQL: &str = include_str!("fixtures/reference_sql/case_durations.sql");
const BOTTLENECK_SQL: &str = include_str!("fixtures/reference_sql/bottleneck.sql");

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let criteria: [(&str, fn() -> Check); 8] = [
        ("table-1 ratio arithmetic", table_one),
        ("table-2 stage sums", table_two),
        ("cache shortcut at threshold 0.9", cache_shortcut),
        ("tier escalation and clarification", escalation),
        ("guard soundness on 1000 statements", guard_soundness),
        ("toy log oracle equivalence", oracle_equivalence),
        ("deterministic corpus runs", determinism),
        ("ledger decimal arithmetic", ledger_arithmetic),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let ms = start.elapsed().as_millis();
        match outcome {
            Ok(detail) => println!("PASS {name} ({ms} ms): {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name} ({ms} ms): {reason}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn mapping() -> ColumnMapping {
    ColumnMapping {
        resource: Some("org:resource".into()),
        ..ColumnMapping::xes()
    }
}

fn toy_db() -> Db {
    let db = Db::in_memory().expect("in-memory store");
    EventLog::new(db.clone())
        .ingest_csv_bytes(TOY.as_bytes(), &mapping(), &TimestampFormat::default())
        .expect("toy log ingests");
    db
}

fn orchestrator(gateway: Gateway, config: OrchestratorConfig) -> Orchestrator {
    Orchestrator::new(toy_db(), gateway, config)
        .expect("valid configuration")
        .with_clock(Arc::new(StepClock::default()))
}

fn scripted(script: &str, config: GatewayConfig) -> Gateway {
    Gateway::scripted(ScriptedProvider::from_json(script).expect("script parses"), config)
}

fn no_context() -> OrchestratorConfig {
    OrchestratorConfig {
        context_gathering: false,
        ..OrchestratorConfig::default()
    }
}

fn repeat<T: Clone>(v: T, n: usize) -> impl Iterator<Item = T> {
    std::iter::repeat_n(v, n)
}

fn table_one() -> Check {
    use AnswerLabel::*;
    use UnderstandingLabel::*;
    let start = Instant::now();
    // 795 questions: 285 fully, 254 partially, 256 wrong; 155 understood,
    // 459 partially understood, 181 not understood.
    let answers: Vec<AnswerLabel> = repeat(FullyAnswered, 285)
        .chain(repeat(PartiallyAnswered, 254))
        .chain(repeat(Wrong, 256))
        .collect();
    let understanding: Vec<UnderstandingLabel> = repeat(Understood, 155)
        .chain(repeat(PartiallyUnderstood, 459))
        .chain(repeat(NotUnderstood, 181))
        .collect();
    let t = RatioTable::from_labels(answers.into_iter().zip(understanding));
    let elapsed = start.elapsed();
    ensure!(t.total == 795, "total {}", t.total);
    let expect = [
        ("FullyAnswered", 285, 36),
        ("PartiallyAnswered", 254, 32),
        ("Understood", 155, 19),
        ("PartiallyUnderstood", 459, 58),
    ];
    for (label, count, percent) in expect {
        let row = t.row(label).ok_or(format!("no row {label}"))?;
        ensure!(
            row.count == count && row.percent == percent,
            "{label}: {} / {}%, expected {count} / {percent}%",
            row.count,
            row.percent
        );
    }
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok("285/254/155/459 of 795 give 36%/32%/19%/58%".into())
}

fn table_two() -> Check {
    use AnswerLabel::*;
    let cell = |tier, mode, partially: usize, fully: usize| {
        let s = Some(Stage::new(tier, mode));
        repeat((s, PartiallyAnswered), partially).chain(repeat((s, FullyAnswered), fully))
    };
    let labels = cell(Tier::Tier1, ShotMode::ZeroShot, 49, 61)
        .chain(cell(Tier::Tier1, ShotMode::FewShot, 12, 46))
        .chain(cell(Tier::Tier2, ShotMode::ZeroShot, 0, 0))
        .chain(cell(Tier::Tier2, ShotMode::FewShot, 193, 178))
        .chain(repeat((None, Wrong), 256));
    let t = StageTable::from_labels(labels);
    let (t1, t2) = (t.tier_total(Tier::Tier1), t.tier_total(Tier::Tier2));
    let got = [t1.partially, t1.fully, t1.answered(), t2.partially, t2.fully, t2.answered()];
    ensure!(got == [61, 107, 168, 193, 178, 371], "stage sums {got:?}");
    // The staged answers account for every answered question of table 1.
    ensure!(t.marginal().answered() == 285 + 254, "marginal {}", t.marginal().answered());
    let text = t.to_text();
    ensure!(
        text.lines().any(|l| l.starts_with("Sum (partially and fully answered)") && l.ends_with("168     371")),
        "rendered table:\n{text}"
    );
    Ok("tier1 61/107/168, tier2 193/178/371".into())
}

fn cache_shortcut() -> Check {
    const STORED: &str = "How many cases does the log hold? (stored)";
    const NEAR: &str = "How many cases does the log hold? (near)";
    const FAR: &str = "How many cases does the log hold? (far)";
    let script = serde_json::json!({
        "chat": [{ "response": "1. Count the case ids.\n```sql\nSELECT COUNT(DISTINCT case_concept_name) AS cases FROM eventlog\n```" }],
        "embeddings": [
            { "match": { "substring": "(stored)" }, "vector": [1, 0, 0, 0, 0] },
            { "match": { "substring": "(near)" }, "vector": [95, 31, 3, 2, 1] },
            { "match": { "substring": "(far)" }, "vector": [89, 45, 7, 2, 1] }
        ]
    });
    let o = orchestrator(scripted(&script.to_string(), GatewayConfig::default()), no_context());
    ensure!(o.config().similarity_threshold == 0.9, "threshold {}", o.config().similarity_threshold);

    // Both query vectors have norm exactly 100 (95²+31²+3²+2²+1² = 89²+45²+7²+2²+1²
    // = 10000) and the stored vector is a unit axis, so the cosines are 95/100
    // and 89/100.
    let stored = Vector::new(vec![1.0, 0.0, 0.0, 0.0, 0.0]).map_err(|e| e.to_string())?;
    for (v, expected) in [([95.0, 31.0, 3.0, 2.0, 1.0], 0.95), ([89.0, 45.0, 7.0, 2.0, 1.0], 0.89)] {
        let norm_sq: f64 = v.iter().map(|x| x * x).sum();
        ensure!(norm_sq == 10_000.0, "norm² {norm_sq}");
        let c = cosine(&stored, &Vector::new(v.to_vec()).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        ensure!((c - expected).abs() < 1e-12, "cosine {c}, expected {expected}");
    }

    let emb = o.gateway().embed_text(STORED).map_err(|e| e.to_string())?;
    o.cache()
        .store(
            STORED,
            &emb,
            Some("SELECT COUNT(DISTINCT case_concept_name) AS cases FROM eventlog"),
            true,
            Some("cases = 3"),
        )
        .map_err(|e| e.to_string())?;

    let near = o.answer(NEAR).map_err(|e| e.to_string())?;
    ensure!(near.status == AnswerStatus::Answered, "near status {:?}", near.status);
    ensure!(near.cache_hit, "near question missed the cache");
    let calls = o.gateway().chat_call_count();
    ensure!(calls == 0, "{calls} chat calls after the cache hit");
    ensure!(near.result.as_ref().map(|r| r.rows.clone()) == Some(vec![vec![Value::Integer(3)]]), "near result");

    let far = o.answer(FAR).map_err(|e| e.to_string())?;
    ensure!(!far.cache_hit, "far question hit the cache");
    let calls = o.gateway().chat_call_count();
    ensure!(calls >= 1, "far question made no chat calls");
    ensure!(far.status == AnswerStatus::Answered, "far status {:?}", far.status);
    Ok(format!("cosine 0.95 hit with 0 calls, cosine 0.89 ran the pipeline with {calls} call(s)"))
}

/// Forwards to a scripted provider and keeps every request.
struct Recorder {
    inner: ScriptedProvider,
    requests: Mutex<Vec<ChatRequest>>,
}

impl ChatProvider for Recorder {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        self.requests.lock().unwrap().push(request.clone());
        self.inner.complete(request)
    }
}

fn escalation_config() -> OrchestratorConfig {
    // Two tier1 attempts so the third request is the first tier2 one; the
    // loop limit stays at five.
    OrchestratorConfig {
        tier1_attempts: 2,
        tier2_attempts: 2,
        ..no_context()
    }
}

fn escalation() -> Check {
    let recorder = Arc::new(Recorder {
        inner: ScriptedProvider::from_json(ESCALATION_SCRIPT).map_err(|e| e.to_string())?,
        requests: Mutex::new(Vec::new()),
    });
    let gateway = Gateway::builder(recorder.clone()).config(GatewayConfig::default()).build();
    let o = orchestrator(gateway, escalation_config());
    ensure!(o.config().loop_limit() == 5, "loop limit {}", o.config().loop_limit());

    let out = o.answer("How many events happened in department A?").map_err(|e| e.to_string())?;
    ensure!(out.status == AnswerStatus::NeedsUserFeedback, "status {:?}", out.status);
    ensure!(out.attempts_used == 5, "attempts {}", out.attempts_used);
    let rec = o.session(&out.session_id).map_err(|e| e.to_string())?.ok_or("session missing")?;
    let errors: Vec<String> = rec
        .state
        .transcript
        .iter()
        .filter_map(|r| match &r.event {
            StepEvent::ValidationFailed { error } | StepEvent::ExecFailed { error } => Some(error.clone()),
            _ => None,
        })
        .collect();
    ensure!(errors.len() == 5, "{} failures recorded", errors.len());

    let requests = recorder.requests.lock().unwrap().clone();
    ensure!(requests.len() == 5, "{} requests", requests.len());
    let models: Vec<&str> = requests.iter().map(|r| r.model_id.as_str()).collect();
    ensure!(models[..2] == ["gpt-3.5-turbo"; 2], "tier1 models {models:?}");
    ensure!(requests[2].tier == Tier::Tier2 && requests[2].model_id == "gpt-4", "third request {models:?}");
    let third: String = requests[2].messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n");
    for e in &errors[..2] {
        ensure!(third.contains(e.as_str()), "third prompt lacks `{e}`");
    }

    let resumed = o
        .resume_with_feedback(&out.session_id, "department A means column org_unit = 'A'")
        .map_err(|e| e.to_string())?;
    ensure!(resumed.status == AnswerStatus::Answered, "resumed status {:?}", resumed.status);
    let rows = resumed.result.map(|r| r.rows).unwrap_or_default();
    ensure!(rows == vec![vec![Value::Integer(4)]], "resumed rows {rows:?}");
    Ok(format!("models {models:?}, both tier1 errors quoted, resumed answer 4 events"))
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Kind {
    Valid,
    Hallucinated,
    Write,
}

const KNOWN: [&str; 6] = ["case_concept_name", "activity", "timestamp", "timestamp_epoch", "resource", "org_unit"];
const INVENTED: [&str; 8] = ["department", "dept", "employee", "duration", "task_name", "case_id", "cost", "org_units"];

fn valid_select(rng: &mut ChaCha8Rng, a: &str, b: &str) -> String {
    match rng.random_range(0..8) {
        0 => format!("SELECT {a} FROM eventlog WHERE {b} IS NOT NULL"),
        1 => format!("SELECT {a}, COUNT(*) AS n FROM eventlog GROUP BY {a} ORDER BY n DESC"),
        2 => format!("SELECT e.{a}, e.{b} FROM eventlog AS e LIMIT 5"),
        3 => format!("WITH t AS (SELECT {a} AS x FROM eventlog) SELECT x FROM t"),
        4 => format!("SELECT MAX({a}) AS hi, MIN({b}) AS lo FROM eventlog"),
        5 => format!("SELECT {a} FROM (SELECT {a}, {b} FROM eventlog) AS s WHERE {b} IS NOT NULL"),
        6 => format!("SELECT DISTINCT {a} FROM eventlog ORDER BY {a}"),
        _ => format!("SELECT {a} FROM eventlog WHERE {b} IN (SELECT {b} FROM eventlog WHERE {a} IS NOT NULL)"),
    }
}

fn write_statement(rng: &mut ChaCha8Rng, a: &str, select: &str) -> String {
    match rng.random_range(0..14) {
        0 => format!("DELETE FROM eventlog WHERE {a} IS NULL"),
        1 => format!("UPDATE eventlog SET {a} = NULL"),
        2 => format!("INSERT INTO eventlog ({a}) VALUES ('x')"),
        3 => "INSERT INTO eventlog SELECT * FROM eventlog".into(),
        4 => "DROP TABLE eventlog".into(),
        5 => format!("CREATE TABLE copy AS {select}"),
        6 => "ALTER TABLE eventlog ADD COLUMN extra TEXT".into(),
        7 => format!("REPLACE INTO eventlog ({a}) VALUES ('x')"),
        8 => format!("{select}; DELETE FROM eventlog"),
        9 => "PRAGMA writable_schema = 1".into(),
        10 => "ATTACH DATABASE 'other.db' AS other".into(),
        11 => format!("CREATE INDEX idx ON eventlog ({a})"),
        12 => "WITH t AS (SELECT 1) DELETE FROM eventlog".into(),
        _ => "VACUUM".into(),
    }
}

fn generate(rng: &mut ChaCha8Rng) -> (Kind, String) {
    let a = *KNOWN.choose(rng).unwrap();
    let b = *KNOWN.choose(rng).unwrap();
    let select = valid_select(rng, a, b);
    match rng.random_range(0..10) {
        0..=3 => (Kind::Valid, select),
        4..=6 => {
            let fake = *INVENTED.choose(rng).unwrap();
            let target = if rng.random_bool(0.5) { a } else { b };
            // Replace one whole-word occurrence, keeping the rest intact.
            let re = regex::Regex::new(&format!(r"\b{target}\b")).unwrap();
            let mutated = re.replace(&select, fake).into_owned();
            // Templates that do not mention the target stay valid.
            let kind = if mutated == select { Kind::Valid } else { Kind::Hallucinated };
            (kind, mutated)
        }
        _ => (Kind::Write, write_statement(rng, a, &select)),
    }
}

fn guard_soundness() -> Check {
    let start = Instant::now();
    let log = EventLog::new(toy_db());
    let schema: SchemaContext = log.derive_schema_context(3).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut tally: BTreeMap<(&str, bool), usize> = BTreeMap::new();
    for _ in 0..1000 {
        let (kind, sql) = generate(&mut rng);
        let verdict = guard::validate_statements(&[sql.as_str()], &schema);
        let name = match kind {
            Kind::Valid => "valid",
            Kind::Hallucinated => "hallucinated",
            Kind::Write => "write",
        };
        *tally.entry((name, verdict.is_ok())).or_default() += 1;
        match (kind, verdict) {
            (Kind::Write, Ok(_)) => return Err(format!("write statement accepted: {sql}")),
            (Kind::Valid, Err(e)) => return Err(format!("valid statement rejected: {sql}: {e}")),
            (_, Ok(v)) => {
                if let Err(e) = log.execute_readonly(&v, DEFAULT_ROW_CAP) {
                    ensure!(
                        !e.message.contains("no such column"),
                        "accepted statement hit an unknown column: {sql}: {}",
                        e.message
                    );
                }
            }
            (Kind::Hallucinated, Err(e)) => {
                ensure!(
                    matches!(e, GuardError::UnknownColumn { .. } | GuardError::UnknownTable { .. }),
                    "unexpected rejection for {sql}: {e}"
                );
            }
            (Kind::Write, Err(_)) => {}

        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    let summary = tally
        .iter()
        .map(|((k, ok), n)| format!("{k} {} {n}", if *ok { "accepted" } else { "rejected" }))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(summary)
}

struct Event {
    case: String,
    activity: String,
    at: NaiveDateTime,
}

fn toy_events() -> Vec<Event> {
    let mut r = csv::Reader::from_reader(TOY.as_bytes());
    r.records()
        .map(|rec| {
            let rec = rec.expect("fixture row");
            Event {
                case: rec[0].to_string(),
                activity: rec[1].to_string(),
                at: NaiveDateTime::from_str(&rec[2]).expect("fixture timestamp"),
            }
        })
        .collect()
}

/// Events grouped per case in time order.
fn traces(events: &[Event]) -> BTreeMap<&str, Vec<&Event>> {
    let mut by_case: BTreeMap<&str, Vec<&Event>> = BTreeMap::new();
    for e in events {
        by_case.entry(e.case.as_str()).or_default().push(e);
    }
    for t in by_case.values_mut() {
        t.sort_by_key(|e| e.at);
    }
    by_case
}

fn run_sql(log: &EventLog, schema: &SchemaContext, sql: &str) -> Result<Vec<Vec<Value>>, String> {
    let v = guard::validate_statements(&[sql], schema).map_err(|e| e.to_string())?;
    log.execute_readonly(&v, DEFAULT_ROW_CAP).map(|t| t.rows).map_err(|e| e.message)
}

fn oracle_equivalence() -> Check {
    let events = toy_events();
    ensure!(events.len() == 8, "{} events", events.len());
    let traces = traces(&events);
    let cases = traces.len() as i64;
    let variants = traces
        .values()
        .map(|t| t.iter().map(|e| e.activity.as_str()).collect::<Vec<_>>())
        .collect::<BTreeSet<_>>()
        .len() as i64;
    let durations: Vec<(String, f64)> = traces
        .iter()
        .map(|(c, t)| (c.to_string(), (t[t.len() - 1].at - t[0].at).num_seconds() as f64 / 3600.0))
        .collect();
    let mut gaps: HashMap<(&str, &str), Vec<f64>> = HashMap::new();
    for t in traces.values() {
        for w in t.windows(2) {
            let hours = (w[1].at - w[0].at).num_seconds() as f64 / 3600.0;
            gaps.entry((w[0].activity.as_str(), w[1].activity.as_str())).or_default().push(hours);
        }
    }
    let ((src, dst), mean) = gaps
        .iter()
        .map(|(k, v)| (*k, v.iter().sum::<f64>() / v.len() as f64))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or("no transitions")?;
    ensure!(cases == 3 && variants == 2, "oracle gave {cases} cases, {variants} variants");
    ensure!((src, dst) == ("Approve", "Pay"), "oracle bottleneck {src}->{dst}");

    let db = toy_db();
    let log = EventLog::new(db);
    let schema = log.derive_schema_context(3).map_err(|e| e.to_string())?;
    ensure!(schema.row_count == 8, "schema row count {}", schema.row_count);

    let got = run_sql(&log, &schema, CASE_COUNT_SQL)?;
    ensure!(got == vec![vec![Value::Integer(cases)]], "case count {got:?}");
    let got = run_sql(&log, &schema, VARIANT_COUNT_SQL)?;
    ensure!(got == vec![vec![Value::Integer(variants)]], "variant count {got:?}");
    let got = run_sql(&log, &schema, CASE_DURATIONS_SQL)?;
    ensure!(got.len() == durations.len(), "{} duration rows", got.len());
    for (row, (case, hours)) in got.iter().zip(&durations) {
        ensure!(row[0].as_str() == Some(case.as_str()), "duration row {row:?}");
        let h = row[1].as_f64().ok_or("duration is not numeric")?;
        ensure!((h - hours).abs() < 1e-9, "case {case}: sql {h}, oracle {hours}");
    }
    let got = run_sql(&log, &schema, BOTTLENECK_SQL)?;
    let row = got.first().ok_or("no bottleneck row")?;
    ensure!(row[0].as_str() == Some(src) && row[1].as_str() == Some(dst), "bottleneck row {row:?}");
    let h = row[2].as_f64().ok_or("mean gap is not numeric")?;
    ensure!((h - mean).abs() < 1e-9, "mean gap sql {h}, oracle {mean}");
    let d = durations.iter().map(|(c, h)| format!("{c}={h}h")).collect::<Vec<_>>().join(" ");
    Ok(format!("{cases} cases, {variants} variants, {d}, bottleneck {src}->{dst} {mean}h"))
}

fn corpus_run() -> Result<(String, eval::RunSummary, logtalk::llm::CostLedger), String> {
    let corpus = eval::parse_corpus(CORPUS).map_err(|e| e.to_string())?;
    let o = orchestrator(scripted(DETERMINISM_SCRIPT, GatewayConfig::default()), OrchestratorConfig::default());
    let summary = eval::run_corpus(&o, &corpus, &RunOptions::default()).map_err(|e| e.to_string())?;
    let results = eval::results(o.db(), &summary.run_id).map_err(|e| e.to_string())?;
    let transcripts: Vec<_> = results.iter().map(|r| (&r.question_id, &r.transcript)).collect();
    let bytes = serde_json::to_string(&transcripts).map_err(|e| e.to_string())?;
    Ok((bytes, summary, o.gateway().ledger()))
}

fn determinism() -> Check {
    let (a, sa, la) = corpus_run()?;
    let (b, sb, lb) = corpus_run()?;
    ensure!(a == b, "transcripts differ ({} vs {} bytes)", a.len(), b.len());
    ensure!(sa.ledger == sb.ledger && la == lb, "ledgers differ");
    ensure!(sa == sb, "run summaries differ");
    ensure!(sa.answered + sa.needs_user_feedback + sa.failed == 10, "summary {sa:?}");
    Ok(format!(
        "{} transcript bytes identical; {} answered, {} need feedback; {} chat calls in both runs",
        a.len(),
        sa.answered,
        sa.needs_user_feedback,
        la.chat_calls()
    ))
}

fn dec(s: &str) -> Decimal {
    Decimal::from_str(s).expect("decimal literal")
}

fn ledger_arithmetic() -> Check {
    let config = GatewayConfig {
        tier1: ModelTier::new(Tier::Tier1, "gpt-3.5-turbo").with_prices(dec("0.0015"), dec("0.002")),
        tier2: ModelTier::new(Tier::Tier2, "gpt-4").with_prices(dec("0.03"), dec("0.06")),
        ..GatewayConfig::default()
    };
    let o = orchestrator(scripted(ESCALATION_SCRIPT, config), escalation_config());
    let out = o.answer("How many events happened in department A?").map_err(|e| e.to_string())?;
    let out = o
        .resume_with_feedback(&out.session_id, "department A means column org_unit = 'A'")
        .map_err(|e| e.to_string())?;
    ensure!(out.status == AnswerStatus::Answered, "status {:?}", out.status);

    // Scripted token counts: tier1 400+500 prompt, 2×30 completion; tier2
    // 600+700+800+900 prompt, 3×30+40 completion. Prices are per 1K tokens.
    let k = dec("1000");
    let tier1 = dec("900") * dec("0.0015") / k + dec("60") * dec("0.002") / k;
    let tier2 = dec("3000") * dec("0.03") / k + dec("130") * dec("0.06") / k;
    let expected = tier1 + tier2;
    ensure!(expected == dec("0.09927"), "hand total {expected}");

    let ledger = o.gateway().ledger();
    ensure!(ledger.line("tier1").cost == tier1, "tier1 cost {}", ledger.line("tier1").cost);
    ensure!(ledger.line("tier2").cost == tier2, "tier2 cost {}", ledger.line("tier2").cost);
    ensure!(ledger.total_cost == expected, "total {}", ledger.total_cost);
    let line_sum: Decimal = ledger.lines.values().map(|l| l.cost).sum();
    ensure!(line_sum == ledger.total_cost, "line sum {line_sum} vs total {}", ledger.total_cost);
    let session = o.session(&out.session_id).map_err(|e| e.to_string())?.ok_or("session missing")?;
    ensure!(session.ledger.total_cost == expected, "session total {}", session.ledger.total_cost);
    Ok(format!("tier1 {tier1} + tier2 {tier2} = {expected} exactly"))
}
