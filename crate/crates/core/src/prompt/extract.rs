//! Pulling SQL and reasoning out of a model response.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedSql {
    pub raw_response: String,
    pub statements: Vec<String>,
    /// Response text outside the code fences (the numbered reasoning steps).
    pub reasoning: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExtractError {
    #[error("no SQL found in the response; respond with SQL in a fenced block (```sql ... ```)")]
    NoSqlFound,
}

struct Fence {
    info: String,
    body: String,
}

/// Statements come from fenced blocks labelled `sql` (or from every fenced
/// block when none is labelled), split on top-level semicolons.
pub fn extract_sql(raw_response: &str) -> Result<GeneratedSql, ExtractError> {
    let (fences, outside) = scan_fences(raw_response);
    let labelled: Vec<&Fence> = fences
        .iter()
        .filter(|f| f.info.eq_ignore_ascii_case("sql") || f.info.to_ascii_lowercase().starts_with("sql "))
        .collect();
    let chosen: Vec<&Fence> = if labelled.is_empty() {
        fences.iter().collect()
    } else {
        labelled
    };
    let statements: Vec<String> = chosen
        .iter()
        .flat_map(|f| split_statements(&f.body))
        .collect();
    if statements.is_empty() {
        return Err(ExtractError::NoSqlFound);
    }
    Ok(GeneratedSql {
        raw_response: raw_response.to_string(),
        statements,
        reasoning: outside.trim().to_string(),
    })
}

fn scan_fences(text: &str) -> (Vec<Fence>, String) {
    let mut fences = Vec::new();
    let mut outside = String::new();
    let mut current: Option<(String, String, usize)> = None;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim_start();
        let ticks = trimmed.chars().take_while(|c| *c == '`').count();
        match &mut current {
            None if ticks >= 3 => {
                let info = trimmed[ticks..].trim().to_string();
                current = Some((info, String::new(), ticks));
            }
            None => outside.push_str(line),
            Some((_, _, open)) if ticks >= *open && trimmed[ticks..].trim().is_empty() => {
                let (info, body, _) = current.take().unwrap();
                fences.push(Fence { info, body });
            }
            Some((_, body, _)) => body.push_str(line),
        }
    }
    // An unterminated fence runs to the end of the response.
    if let Some((info, body, _)) = current {
        fences.push(Fence { info, body });
    }
    (fences, outside)
}

/// Splits on semicolons that are not inside quotes, brackets or comments.
/// Empty statements are dropped; each statement is trimmed.
pub fn split_statements(sql: &str) -> Vec<String> {
    #[derive(PartialEq)]
    enum St {
        Normal,
        Single,
        Double,
        Backtick,
        Bracket,
        LineComment,
        BlockComment,
    }
    let chars: Vec<char> = sql.chars().collect();
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut st = St::Normal;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let next = chars.get(i + 1).copied();
        match st {
            St::Normal => match c {
                ';' => {
                    push_stmt(&mut out, &mut cur);
                    i += 1;
                    continue;
                }
                '\'' => st = St::Single,
                '"' => st = St::Double,
                '`' => st = St::Backtick,
                '[' => st = St::Bracket,
                '-' if next == Some('-') => st = St::LineComment,
                '/' if next == Some('*') => {
                    st = St::BlockComment;
                    cur.push_str("/*");
                    i += 2;
                    continue;
                }
                _ => {}
            },
            // Doubled quotes are escapes; they toggle out and back in.
            St::Single if c == '\'' => st = St::Normal,
            St::Double if c == '"' => st = St::Normal,
            St::Backtick if c == '`' => st = St::Normal,
            St::Bracket if c == ']' => st = St::Normal,
            St::LineComment if c == '\n' => st = St::Normal,
            St::BlockComment if c == '*' && next == Some('/') => {
                st = St::Normal;
                cur.push_str("*/");
                i += 2;
                continue;
            }
            _ => {}
        }
        cur.push(c);
        i += 1;
    }
    push_stmt(&mut out, &mut cur);
    out
}

fn push_stmt(out: &mut Vec<String>, cur: &mut String) {
    let s = cur.trim();
    if !s.is_empty() && !is_only_comments(s) {
        out.push(s.to_string());
    }
    cur.clear();
}

fn is_only_comments(s: &str) -> bool {
    let mut rest = s.trim();
    loop {
        if rest.is_empty() {
            return true;
        }
        if let Some(r) = rest.strip_prefix("--") {
            rest = r.split_once('\n').map(|(_, t)| t).unwrap_or("").trim();
        } else if let Some(r) = rest.strip_prefix("/*") {
            match r.split_once("*/") {
                Some((_, t)) => rest = t.trim(),
                None => return true,
            }
        } else {
            return false;
        }
    }
}
