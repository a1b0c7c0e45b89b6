use crate::eventlog::{SchemaContext, ACTIVITY_COLUMN, CASE_COLUMN, RESOURCE_COLUMN, TIMESTAMP_COLUMN};

const MAX_EDIT_DISTANCE: usize = 3;

// Names models commonly invent for the event-log role columns.
const ROLE_SYNONYMS: &[(&str, &[&str])] = &[
    (
        ACTIVITY_COLUMN,
        &[
            "task", "task_name", "activity_name", "activity_id", "event", "event_name",
            "concept_name", "step", "step_name", "action", "action_name",
        ],
    ),
    (
        CASE_COLUMN,
        &[
            "case", "case_id", "caseid", "case_name", "case_key", "trace_id", "instance_id",
            "process_instance", "process_instance_id", "concept_case_name",
        ],
    ),
    (
        TIMESTAMP_COLUMN,
        &[
            "time", "ts", "event_time", "event_timestamp", "time_timestamp", "datetime",
            "date", "event_date", "start_time", "end_time", "created_at",
        ],
    ),
    (
        RESOURCE_COLUMN,
        &["user", "user_id", "performer", "actor", "employee", "org_resource", "agent"],
    ),
];

/// Closest real column for an unknown name: a known role synonym first,
/// else the nearest column within edit distance 3.
pub fn suggest_column(unknown: &str, schema: &SchemaContext) -> Option<String> {
    let bare = unknown
        .rsplit('.')
        .next()
        .unwrap_or(unknown)
        .to_ascii_lowercase();
    for (target, synonyms) in ROLE_SYNONYMS {
        if synonyms.contains(&bare.as_str()) && schema.column(target).is_some() {
            return Some((*target).to_string());
        }
    }
    schema
        .columns
        .iter()
        .map(|c| (strsim::levenshtein(&bare, &c.name), &c.name))
        .filter(|(d, _)| *d <= MAX_EDIT_DISTANCE)
        .min_by_key(|(d, _)| *d)
        .map(|(_, n)| n.clone())
}
