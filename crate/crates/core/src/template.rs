//! Prompt templates with `{name}` placeholders.
//!
//! A template file holds an optional `[system]` section and a `[user]`
//! section. Placeholders are `{identifier}`; `{{` and `}}` produce literal
//! braces. Any other brace is kept verbatim, so JSON snippets in prompts
//! need no escaping.
//!
//! Built-in defaults are compiled in. A template directory can override any
//! of them with a file named `<template>.txt`; the SHORT-mode exemplars live
//! in `short_exemplars.txt`, separated by lines consisting of
//! [`EXEMPLAR_MARKER`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;

pub const EXEMPLAR_MARKER: &str = "=====";

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template `{template}`: missing value for placeholder `{placeholder}`")]
    MissingValue {
        template: String,
        placeholder: String,
    },
    #[error("template `{0}` has no [user] section")]
    NoUserSection(String),
    #[error("unknown template `{0}`")]
    Unknown(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("exemplar file has {found} exemplars, need at least {needed}")]
    TooFewExemplars { found: usize, needed: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    pieces: Vec<Piece>,
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

impl Template {
    pub fn parse(name: &str, text: &str) -> Template {
        let mut pieces = Vec::new();
        let mut lit = String::new();
        let chars: Vec<char> = text.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c == '{' && chars.get(i + 1) == Some(&'{') {
                lit.push('{');
                i += 2;
                continue;
            }
            if c == '}' && chars.get(i + 1) == Some(&'}') {
                lit.push('}');
                i += 2;
                continue;
            }
            if c == '{' && chars.get(i + 1).copied().is_some_and(is_ident_start) {
                let mut j = i + 1;
                while j < chars.len() && is_ident_char(chars[j]) {
                    j += 1;
                }
                if chars.get(j) == Some(&'}') {
                    if !lit.is_empty() {
                        pieces.push(Piece::Text(std::mem::take(&mut lit)));
                    }
                    pieces.push(Piece::Slot(chars[i + 1..j].iter().collect()));
                    i = j + 1;
                    continue;
                }
            }
            lit.push(c);
            i += 1;
        }
        if !lit.is_empty() {
            pieces.push(Piece::Text(lit));
        }
        Template {
            name: name.to_string(),
            pieces,
        }
    }

    pub fn placeholders(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for p in &self.pieces {
            if let Piece::Slot(s) = p {
                if !out.contains(&s.as_str()) {
                    out.push(s);
                }
            }
        }
        out
    }

    /// Substitute every placeholder. Values are inserted verbatim; extra
    /// values are ignored.
    pub fn render(&self, vars: &[(&str, &str)]) -> Result<String, TemplateError> {
        let mut out = String::new();
        for p in &self.pieces {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(name) => {
                    let value = vars
                        .iter()
                        .find(|(k, _)| k == name)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| TemplateError::MissingValue {
                            template: self.name.clone(),
                            placeholder: name.clone(),
                        })?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }
}

/// A system + user prompt template pair.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub system: Template,
    pub user: Template,
}

pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
}

impl PromptTemplate {
    pub fn parse(name: &str, text: &str) -> Result<PromptTemplate, TemplateError> {
        let mut system = String::new();
        let mut user = String::new();
        let mut section: Option<&str> = None;
        let mut saw_user = false;
        for line in text.split_inclusive('\n') {
            match line.trim_end() {
                "[system]" => {
                    section = Some("system");
                    continue;
                }
                "[user]" => {
                    section = Some("user");
                    saw_user = true;
                    continue;
                }
                _ => {}
            }
            match section {
                Some("system") => system.push_str(line),
                Some(_) => user.push_str(line),
                None => {}
            }
        }
        if !saw_user {
            return Err(TemplateError::NoUserSection(name.to_string()));
        }
        Ok(PromptTemplate {
            system: Template::parse(name, system.trim()),
            user: Template::parse(name, user.trim()),
        })
    }

    pub fn render(&self, vars: &[(&str, &str)]) -> Result<RenderedPrompt, TemplateError> {
        Ok(RenderedPrompt {
            system: self.system.render(vars)?,
            user: self.user.render(vars)?,
        })
    }
}

/// Names of every template the pipeline uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TemplateName {
    Generate,
    Match,
    A2qNegation,
    A2qAntonym,
    A2qQuestion,
    A2qCoherence,
    A2qConsistency,
    A2qFaithfulness,
    T2qSummarize,
    T2qKeyPoints,
    T2qQa,
    Reflect,
    Rewrite,
    Annotate,
    Judge,
}

impl TemplateName {
    pub const ALL: [TemplateName; 15] = [
        TemplateName::Generate,
        TemplateName::Match,
        TemplateName::A2qNegation,
        TemplateName::A2qAntonym,
        TemplateName::A2qQuestion,
        TemplateName::A2qCoherence,
        TemplateName::A2qConsistency,
        TemplateName::A2qFaithfulness,
        TemplateName::T2qSummarize,
        TemplateName::T2qKeyPoints,
        TemplateName::T2qQa,
        TemplateName::Reflect,
        TemplateName::Rewrite,
        TemplateName::Annotate,
        TemplateName::Judge,
    ];

    pub fn file_stem(self) -> &'static str {
        match self {
            TemplateName::Generate => "generate",
            TemplateName::Match => "match",
            TemplateName::A2qNegation => "a2q_negation",
            TemplateName::A2qAntonym => "a2q_antonym",
            TemplateName::A2qQuestion => "a2q_question",
            TemplateName::A2qCoherence => "a2q_check_coherence",
            TemplateName::A2qConsistency => "a2q_check_consistency",
            TemplateName::A2qFaithfulness => "a2q_check_faithfulness",
            TemplateName::T2qSummarize => "t2q_summarize",
            TemplateName::T2qKeyPoints => "t2q_key_points",
            TemplateName::T2qQa => "t2q_qa",
            TemplateName::Reflect => "reflect",
            TemplateName::Rewrite => "rewrite",
            TemplateName::Annotate => "annotate",
            TemplateName::Judge => "judge",
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            TemplateName::Generate => include_str!("../templates/generate.txt"),
            TemplateName::Match => include_str!("../templates/match.txt"),
            TemplateName::A2qNegation => include_str!("../templates/a2q_negation.txt"),
            TemplateName::A2qAntonym => include_str!("../templates/a2q_antonym.txt"),
            TemplateName::A2qQuestion => include_str!("../templates/a2q_question.txt"),
            TemplateName::A2qCoherence => include_str!("../templates/a2q_check_coherence.txt"),
            TemplateName::A2qConsistency => {
                include_str!("../templates/a2q_check_consistency.txt")
            }
            TemplateName::A2qFaithfulness => {
                include_str!("../templates/a2q_check_faithfulness.txt")
            }
            TemplateName::T2qSummarize => include_str!("../templates/t2q_summarize.txt"),
            TemplateName::T2qKeyPoints => include_str!("../templates/t2q_key_points.txt"),
            TemplateName::T2qQa => include_str!("../templates/t2q_qa.txt"),
            TemplateName::Reflect => include_str!("../templates/reflect.txt"),
            TemplateName::Rewrite => include_str!("../templates/rewrite.txt"),
            TemplateName::Annotate => include_str!("../templates/annotate.txt"),
            TemplateName::Judge => include_str!("../templates/judge.txt"),
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_stem())
    }
}

const BUILTIN_EXEMPLARS: &str = include_str!("../templates/short_exemplars.txt");

/// Split an exemplar file on marker lines, dropping blank entries.
pub fn parse_exemplars(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for line in text.lines() {
        if line.trim() == EXEMPLAR_MARKER {
            if !cur.trim().is_empty() {
                out.push(cur.trim().to_string());
            }
            cur.clear();
        } else {
            cur.push_str(line);
            cur.push('\n');
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

/// Every prompt template plus the SHORT-mode exemplars.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateName, PromptTemplate>,
    exemplars: Vec<String>,
}

impl TemplateSet {
    pub fn builtin() -> TemplateSet {
        let templates = TemplateName::ALL
            .into_iter()
            .map(|n| {
                let t = PromptTemplate::parse(n.file_stem(), n.builtin())
                    .expect("builtin templates are well-formed");
                (n, t)
            })
            .collect();
        TemplateSet {
            templates,
            exemplars: parse_exemplars(BUILTIN_EXEMPLARS),
        }
    }

    /// Builtins, overridden by any `<name>.txt` present in `dir`.
    pub fn load(dir: Option<&Path>) -> Result<TemplateSet, TemplateError> {
        let mut set = TemplateSet::builtin();
        let Some(dir) = dir else { return Ok(set) };
        for name in TemplateName::ALL {
            let path = dir.join(format!("{}.txt", name.file_stem()));
            if path.exists() {
                let text = read(&path)?;
                set.templates
                    .insert(name, PromptTemplate::parse(name.file_stem(), &text)?);
            }
        }
        let ex = dir.join("short_exemplars.txt");
        if ex.exists() {
            set.exemplars = parse_exemplars(&read(&ex)?);
        }
        Ok(set)
    }

    pub fn get(&self, name: TemplateName) -> &PromptTemplate {
        &self.templates[&name]
    }

    pub fn render(
        &self,
        name: TemplateName,
        vars: &[(&str, &str)],
    ) -> Result<RenderedPrompt, TemplateError> {
        self.get(name).render(vars)
    }

    pub fn exemplars(&self) -> &[String] {
        &self.exemplars
    }

    pub fn with_exemplars(mut self, exemplars: Vec<String>) -> Self {
        self.exemplars = exemplars;
        self
    }
}

fn read(path: &Path) -> Result<String, TemplateError> {
    std::fs::read_to_string(path).map_err(|source| TemplateError::Io {
        path: path.display().to_string(),
        source,
    })
}
