//! `{{placeholder}}` templates, built in or loaded from a directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

const USER_PLACEHOLDERS: &[&str] = &[
    "question",
    "clarifications",
    "schema",
    "ontology",
    "analysis",
    "few_shots",
    "feedback",
    "format_instructions",
];

/// Template texts by role. In a template directory they are the files
/// `<role>.system.txt`, `<role>.user.txt` and `format_instructions.txt`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Templates {
    pub data_engineer_system: String,
    pub data_engineer_user: String,
    pub process_analyst_system: String,
    pub process_analyst_user: String,
    pub domain_expert_system: String,
    pub domain_expert_user: String,
    pub format_instructions: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
    #[error("template {file}: unknown placeholder `{{{{{name}}}}}`")]
    UnknownPlaceholder { file: String, name: String },
    #[error("template {file}: unterminated placeholder")]
    Unterminated { file: String },
}

const FILES: &[&str] = &[
    "data_engineer.system.txt",
    "data_engineer.user.txt",
    "process_analyst.system.txt",
    "process_analyst.user.txt",
    "domain_expert.system.txt",
    "domain_expert.user.txt",
    "format_instructions.txt",
];

impl Templates {
    pub fn builtin() -> Self {
        Self {
            data_engineer_system: include_str!("../../templates/data_engineer.system.txt").trim_end().into(),
            data_engineer_user: include_str!("../../templates/data_engineer.user.txt").trim_end().into(),
            process_analyst_system: include_str!("../../templates/process_analyst.system.txt").trim_end().into(),
            process_analyst_user: include_str!("../../templates/process_analyst.user.txt").trim_end().into(),
            domain_expert_system: include_str!("../../templates/domain_expert.system.txt").trim_end().into(),
            domain_expert_user: include_str!("../../templates/domain_expert.user.txt").trim_end().into(),
            format_instructions: include_str!("../../templates/format_instructions.txt").trim_end().into(),
        }
    }

    /// Built-in templates overridden by whichever files exist in `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let dir = dir.as_ref();
        let mut t = Self::builtin();
        for file in FILES {
            let path = dir.join(file);
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| TemplateError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            *t.slot(file) = text.trim_end().to_string();
        }
        t.check()?;
        Ok(t)
    }

    fn slot(&mut self, file: &str) -> &mut String {
        match file {
            "data_engineer.system.txt" => &mut self.data_engineer_system,
            "data_engineer.user.txt" => &mut self.data_engineer_user,
            "process_analyst.system.txt" => &mut self.process_analyst_system,
            "process_analyst.user.txt" => &mut self.process_analyst_user,
            "domain_expert.system.txt" => &mut self.domain_expert_system,
            "domain_expert.user.txt" => &mut self.domain_expert_user,
            _ => &mut self.format_instructions,
        }
    }

    /// Every placeholder in a user template is a known one; system texts
    /// and format instructions take none.
    pub fn check(&self) -> Result<(), TemplateError> {
        let mut copy = self.clone();
        for file in FILES {
            let text = copy.slot(file).clone();
            let allowed: &[&str] = if file.ends_with(".user.txt") { USER_PLACEHOLDERS } else { &[] };
            for name in placeholders(&text).map_err(|_| TemplateError::Unterminated { file: file.to_string() })? {
                if !allowed.contains(&name.as_str()) {
                    return Err(TemplateError::UnknownPlaceholder {
                        file: file.to_string(),
                        name,
                    });
                }
            }
        }
        Ok(())
    }
}

fn placeholders(text: &str) -> Result<Vec<String>, ()> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(i) = rest.find("{{") {
        let after = &rest[i + 2..];
        let j = after.find("}}").ok_or(())?;
        out.push(after[..j].trim().to_string());
        rest = &after[j + 2..];
    }
    Ok(out)
}

/// Replaces `{{name}}` with `lookup(name)` in one pass, so substituted text
/// is never rescanned. A line holding only a placeholder whose value is
/// empty is removed together with one blank line after it. Unknown names
/// are left as written.
pub(super) fn substitute(template: &str, lookup: impl Fn(&str) -> Option<String>) -> String {
    let mut out = String::new();
    let mut skip_blank = false;
    for line in template.split('\n') {
        if skip_blank {
            skip_blank = false;
            if line.trim().is_empty() {
                continue;
            }
        }
        let t = line.trim();
        if let Some(name) = t.strip_prefix("{{").and_then(|s| s.strip_suffix("}}")) {
            if !name.contains("{{") && lookup(name.trim()).is_some_and(|v| v.is_empty()) {
                skip_blank = true;
                continue;
            }
        }
        let mut rest = line;
        while let Some(i) = rest.find("{{") {
            out.push_str(&rest[..i]);
            let after = &rest[i + 2..];
            match after.find("}}") {
                Some(j) => {
                    let name = after[..j].trim();
                    match lookup(name) {
                        Some(v) => out.push_str(&v),
                        None => out.push_str(&rest[i..i + 2 + j + 2]),
                    }
                    rest = &after[j + 2..];
                }
                None => {
                    out.push_str(&rest[i..]);
                    rest = "";
                }
            }
        }
        out.push_str(rest);
        out.push('\n');
    }
    out.trim_end().to_string()
}
