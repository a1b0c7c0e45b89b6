use std::collections::BTreeMap;

use rusqlite::params;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use crate::db::{Db, DbError};

pub(super) const EMBEDDING_LINE: &str = "embedding";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub call_count: u64,
    pub cost: Decimal,
}

/// Token and cost accumulators keyed by ledger line (`tier1`, `tier2`,
/// `embedding`). `total_cost` always equals the sum of the line costs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub lines: BTreeMap<String, LineUsage>,
    pub total_cost: Decimal,
}

impl CostLedger {
    pub fn add(&mut self, line: &str, prompt_tokens: u64, completion_tokens: u64, cost: Decimal) {
        let u = self.lines.entry(line.to_string()).or_default();
        u.prompt_tokens += prompt_tokens;
        u.completion_tokens += completion_tokens;
        u.call_count += 1;
        u.cost += cost;
        self.total_cost += cost;
    }

    pub fn add_exchange(&mut self, ex: &super::ChatExchange) {
        self.add(
            ex.request.tier.as_str(),
            ex.response.prompt_tokens,
            ex.response.completion_tokens,
            ex.cost,
        );
    }

    pub fn merge(&mut self, other: &CostLedger) {
        for (line, u) in &other.lines {
            let mine = self.lines.entry(line.clone()).or_default();
            mine.prompt_tokens += u.prompt_tokens;
            mine.completion_tokens += u.completion_tokens;
            mine.call_count += u.call_count;
            mine.cost += u.cost;
        }
        self.total_cost += other.total_cost;
    }

    pub fn line(&self, line: &str) -> LineUsage {
        self.lines.get(line).cloned().unwrap_or_default()
    }

    /// Chat-completion calls across both tiers.
    pub fn chat_calls(&self) -> u64 {
        self.lines
            .iter()
            .filter(|(k, _)| k.as_str() != EMBEDDING_LINE)
            .map(|(_, u)| u.call_count)
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// Aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<10} {:>7} {:>12} {:>12} {:>12}\n",
            "line", "calls", "prompt_tok", "complet_tok", "cost"
        );
        for (line, u) in &self.lines {
            out.push_str(&format!(
                "{:<10} {:>7} {:>12} {:>12} {:>12}\n",
                line, u.call_count, u.prompt_tokens, u.completion_tokens, u.cost
            ));
        }
        out.push_str(&format!("{:<10} {:>46}\n", "total", self.total_cost));
        out
    }
}

pub(super) fn persist_call(
    db: &Db,
    line: &str,
    model_id: &str,
    prompt: u64,
    completion: u64,
    cost: Decimal,
) -> Result<(), DbError> {
    db.write(|c| {
        c.execute(
            "INSERT INTO llm_calls (line, model_id, prompt_tokens, completion_tokens, cost) VALUES (?1, ?2, ?3, ?4, ?5)",
            params![line, model_id, prompt as i64, completion as i64, cost.to_string()],
        )
    })?;
    Ok(())
}

pub(super) fn load(db: &Db) -> Result<CostLedger, DbError> {
    let rows = db.write(|c| {
        let mut stmt = c.prepare("SELECT line, prompt_tokens, completion_tokens, cost FROM llm_calls ORDER BY seq")?;
        let rows = stmt.query_map([], |r| {
            Ok((
                r.get::<_, String>(0)?,
                r.get::<_, i64>(1)?,
                r.get::<_, i64>(2)?,
                r.get::<_, String>(3)?,
            ))
        })?;
        rows.collect::<rusqlite::Result<Vec<_>>>()
    })?;
    let mut ledger = CostLedger::default();
    for (line, p, c, cost) in rows {
        let cost: Decimal = cost
            .parse()
            .map_err(|_| DbError::Corrupt(format!("unparseable cost `{cost}` in llm_calls")))?;
        ledger.add(&line, p as u64, c as u64, cost);
    }
    Ok(ledger)
}
