//! Label summaries: overall ratios and the answer-by-stage cross tab.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{AnswerLabel, UnderstandingLabel};
use crate::llm::Tier;
use crate::orchestrator::{ShotMode, Stage};

/// `count / total` as a whole percent, halves rounded up; 0 when `total`
/// is 0. Exact integer arithmetic: floor((200 * count + total) / (2 * total)).
pub fn percent_half_up(count: u64, total: u64) -> u64 {
    if total == 0 {
        return 0;
    }
    (200 * count + total) / (2 * total)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatioRow {
    pub label: String,
    pub count: u64,
    pub percent: u64,
}

/// Counts and whole-percent ratios of every answer and understanding label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatioTable {
    pub total: u64,
    pub answer: Vec<RatioRow>,
    pub understanding: Vec<RatioRow>,
}

impl RatioTable {
    pub fn from_labels(labels: impl IntoIterator<Item = (AnswerLabel, UnderstandingLabel)>) -> Self {
        let mut a = [0u64; 3];
        let mut u = [0u64; 3];
        for (x, y) in labels {
            a[x as usize] += 1;
            u[y as usize] += 1;
        }
        let total = a.iter().sum();
        let rows = |names: [&str; 3], counts: [u64; 3]| -> Vec<RatioRow> {
            names
                .iter()
                .zip(counts)
                .map(|(n, count)| RatioRow {
                    label: n.to_string(),
                    count,
                    percent: percent_half_up(count, total),
                })
                .collect()
        };
        Self {
            total,
            answer: rows(AnswerLabel::ALL.map(AnswerLabel::as_str), a),
            understanding: rows(UnderstandingLabel::ALL.map(UnderstandingLabel::as_str), u),
        }
    }

    pub fn row(&self, label: &str) -> Option<&RatioRow> {
        self.answer.iter().chain(&self.understanding).find(|r| r.label == label)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<22} {:>7} {:>6}\n", "Result", "Count", "Ratio");
        for (i, group) in [&self.answer, &self.understanding].into_iter().enumerate() {
            if i > 0 {
                s.push('\n');
            }
            for r in group {
                let _ = writeln!(s, "{:<22} {:>7} {:>5}%", r.label, r.count, r.percent);
            }
        }
        let _ = write!(s, "\n{:<22} {:>7}", "Total", self.total);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["group", "label", "count", "percent"]).expect("in-memory write");
        for (group, rows) in [("answer", &self.answer), ("understanding", &self.understanding)] {
            for r in rows {
                w.write_record([group, &r.label, &r.count.to_string(), &r.percent.to_string()])
                    .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCell {
    pub partially: u64,
    pub fully: u64,
    pub wrong: u64,
}

impl StageCell {
    fn add(&mut self, label: AnswerLabel) {
        match label {
            AnswerLabel::FullyAnswered => self.fully += 1,
            AnswerLabel::PartiallyAnswered => self.partially += 1,
            AnswerLabel::Wrong => self.wrong += 1,
        }
    }

    fn merge(&mut self, o: &StageCell) {
        self.partially += o.partially;
        self.fully += o.fully;
        self.wrong += o.wrong;
    }

    pub fn answered(&self) -> u64 {
        self.partially + self.fully
    }
}

/// Answer labels crossed with the stage the answer was produced at.
/// Transcripts without a stage (cache hits, unanswered questions) are
/// counted apart.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTable {
    #[serde(with = "cell_rows")]
    pub cells: BTreeMap<Stage, StageCell>,
    pub unstaged: StageCell,
}

const STAGES: [Stage; 4] = [
    Stage::new(Tier::Tier1, ShotMode::ZeroShot),
    Stage::new(Tier::Tier1, ShotMode::FewShot),
    Stage::new(Tier::Tier2, ShotMode::ZeroShot),
    Stage::new(Tier::Tier2, ShotMode::FewShot),
];

impl StageTable {
    pub fn from_labels(labels: impl IntoIterator<Item = (Option<Stage>, AnswerLabel)>) -> Self {
        let mut t = StageTable::default();
        for s in STAGES {
            t.cells.insert(s, StageCell::default());
        }
        for (stage, label) in labels {
            match stage {
                Some(s) => t.cells.entry(s).or_default().add(label),
                None => t.unstaged.add(label),
            }
        }
        t
    }

    pub fn cell(&self, tier: Tier, shot_mode: ShotMode) -> StageCell {
        self.cells.get(&Stage::new(tier, shot_mode)).copied().unwrap_or_default()
    }

    /// Column sum over both shot modes of `tier`.
    pub fn tier_total(&self, tier: Tier) -> StageCell {
        let mut c = StageCell::default();
        for (s, cell) in &self.cells {
            if s.tier == tier {
                c.merge(cell);
            }
        }
        c
    }

    /// Every cell plus the unstaged ones; equals the overall label counts.
    pub fn marginal(&self) -> StageCell {
        let mut c = self.unstaged;
        for cell in self.cells.values() {
            c.merge(cell);
        }
        c
    }

    pub fn to_text(&self) -> String {
        let (t1, t2) = (self.tier_total(Tier::Tier1), self.tier_total(Tier::Tier2));
        let mut s = format!("{:<40} {:>7} {:>7}\n", "Zero vs few shot", "tier1", "tier2");
        let mut line = |label: &str, a: u64, b: u64| {
            let _ = writeln!(s, "{label:<40} {a:>7} {b:>7}");
        };
        let z = ShotMode::ZeroShot;
        let f = ShotMode::FewShot;
        let c = |t, m| self.cell(t, m);
        line("Zero shot", c(Tier::Tier1, z).partially, c(Tier::Tier2, z).partially);
        line("Few shot", c(Tier::Tier1, f).partially, c(Tier::Tier2, f).partially);
        line("Sum (partially answered)", t1.partially, t2.partially);
        line("Zero shot", c(Tier::Tier1, z).fully, c(Tier::Tier2, z).fully);
        line("Few shot", c(Tier::Tier1, f).fully, c(Tier::Tier2, f).fully);
        line("Sum (fully answered)", t1.fully, t2.fully);
        line("Sum (partially and fully answered)", t1.answered(), t2.answered());
        if self.unstaged.answered() > 0 {
            let _ = writeln!(
                s,
                "Answered without a stage (cache): {} partially, {} fully",
                self.unstaged.partially, self.unstaged.fully
            );
        }
        s.trim_end().to_string()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["tier", "shot_mode", "partially_answered", "fully_answered", "wrong"])
            .expect("in-memory write");
        for (s, c) in &self.cells {
            w.write_record([
                s.tier.as_str(),
                s.shot_mode.as_str(),
                &c.partially.to_string(),
                &c.fully.to_string(),
                &c.wrong.to_string(),
            ])
            .expect("in-memory write");
        }
        let u = self.unstaged;
        w.write_record(["none", "none", &u.partially.to_string(), &u.fully.to_string(), &u.wrong.to_string()])
            .expect("in-memory write");
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
    }
}

/// JSON object keys must be strings, so cells travel as a list of rows.
mod cell_rows {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::StageCell;
    use crate::orchestrator::Stage;

    #[derive(Serialize, Deserialize)]
    struct Row {
        #[serde(flatten)]
        stage: Stage,
        #[serde(flatten)]
        cell: StageCell,
    }

    pub fn serialize<S: Serializer>(cells: &BTreeMap<Stage, StageCell>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Row> = cells.iter().map(|(stage, cell)| Row { stage: *stage, cell: *cell }).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<Stage, StageCell>, D::Error> {
        let rows = Vec::<Row>::deserialize(d)?;
        Ok(rows.into_iter().map(|r| (r.stage, r.cell)).collect())
    }
}
