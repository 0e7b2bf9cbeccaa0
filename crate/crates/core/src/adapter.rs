//! Teacher input adapter: turns a recorded module call into the sub-question
//! and sub-image handed to the teacher.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::StepRecord;
use crate::lexicon::Lexicon;
use crate::registry::{ModuleKind, SubTaskInput};
use crate::scene::ScenePatch;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AdapterError {
    #[error("empty {0}")]
    EmptyToken(&'static str),
    #[error("best_text_match needs at least two options, got {0}")]
    TooFewOptions(usize),
    #[error("options mix nouns and attributes: {0:?}")]
    MixedOptions(Vec<String>),
    #[error("`{0}` calls are not distilled")]
    NotDistillable(ModuleKind),
    #[error("step operands are not well typed")]
    IllTyped,
    #[error("simple_query question is empty")]
    EmptyQuestion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSource {
    pub question_id: String,
    pub step_index: usize,
    pub module_kind: ModuleKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherInput {
    pub sub_question: String,
    pub sub_image: ScenePatch,
    pub source: StepSource,
}

/// `Is this {object_name} {attribute}?`
pub fn adapt_verify_property(object_name: &str, attribute: &str) -> Result<String, AdapterError> {
    let object_name = object_name.trim();
    let attribute = attribute.trim();
    if object_name.is_empty() {
        return Err(AdapterError::EmptyToken("object name"));
    }
    if attribute.is_empty() {
        return Err(AdapterError::EmptyToken("attribute"));
    }
    Ok(format!("Is this {object_name} {attribute}?"))
}

fn article(word: &str) -> &'static str {
    match word.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// Options count as attributes iff every one is in the attribute vocabulary.
pub fn adapt_best_text_match(
    options: &[String],
    center_word: Option<&str>,
    plural: bool,
    lex: &Lexicon,
) -> Result<String, AdapterError> {
    let options: Vec<&str> = options.iter().map(|o| o.trim()).collect();
    if options.len() < 2 {
        return Err(AdapterError::TooFewOptions(options.len()));
    }
    if options.iter().any(|o| o.is_empty()) {
        return Err(AdapterError::EmptyToken("option"));
    }
    let adjectives = options.iter().filter(|o| lex.is_attribute(o)).count();
    if adjectives != 0 && adjectives != options.len() {
        return Err(AdapterError::MixedOptions(
            options.iter().map(|o| o.to_string()).collect(),
        ));
    }
    let joined = options.join(" or ");
    let lead = if plural { "Are these" } else { "Is this" };
    let center = center_word.map(str::trim).filter(|c| !c.is_empty());
    Ok(match (adjectives > 0, plural, center) {
        (true, _, Some(c)) => format!("{lead} {c} {joined}?"),
        (true, _, None) | (false, true, _) => format!("{lead} {joined}?"),
        (false, false, _) => format!("Is this {} {joined}?", article(options[0])),
    })
}

/// Passes the question through, ending it with exactly one `?`. Empty input
/// stays empty.
pub fn adapt_simple_query(question: &str) -> String {
    let core = question
        .trim()
        .trim_end_matches(|c: char| c == '?' || c.is_whitespace());
    if core.is_empty() {
        return String::new();
    }
    format!("{core}?")
}

/// The sub-question for a distillable backend input.
pub fn sub_question(input: &SubTaskInput, lex: &Lexicon) -> Result<String, AdapterError> {
    match input {
        SubTaskInput::VerifyProperty {
            object_name, attribute, ..
        } => adapt_verify_property(object_name, attribute),
        SubTaskInput::BestTextMatch {
            center_word, options, ..
        } => {
            let plural = center_word.as_deref().is_some_and(Lexicon::is_plural);
            adapt_best_text_match(options, center_word.as_deref(), plural, lex)
        }
        SubTaskInput::SimpleQuery { question, .. } => {
            let q = adapt_simple_query(question);
            if q.is_empty() {
                Err(AdapterError::EmptyQuestion)
            } else {
                Ok(q)
            }
        }
        SubTaskInput::Find { .. } | SubTaskInput::Exists { .. } => Err(AdapterError::NotDistillable(input.kind())),
    }
}

pub fn adapt_step(step: &StepRecord, question_id: &str, lex: &Lexicon) -> Result<TeacherInput, AdapterError> {
    if !step.module_kind.is_distillable() {
        return Err(AdapterError::NotDistillable(step.module_kind));
    }
    let input = step.sub_task_input().ok_or(AdapterError::IllTyped)?;
    let sub_question = sub_question(&input, lex)?;
    let sub_image = input.patch().cloned().ok_or(AdapterError::IllTyped)?;
    Ok(TeacherInput {
        sub_question,
        sub_image,
        source: StepSource {
            question_id: question_id.to_string(),
            step_index: step.step_index,
            module_kind: step.module_kind,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub source: StepSource,
    pub sub_question: Option<String>,
    pub warning: Option<String>,
}

/// Optional JSONL stream of adapter decisions.
pub struct AuditLog<W: Write> {
    out: W,
}

impl<W: Write> AuditLog<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn record(&mut self, source: &StepSource, result: &Result<TeacherInput, AdapterError>) -> io::Result<()> {
        let rec = AuditRecord {
            source: source.clone(),
            sub_question: result.as_ref().ok().map(|t| t.sub_question.clone()),
            warning: result.as_ref().err().map(|e| e.to_string()),
        };
        serde_json::to_writer(&mut self.out, &rec)?;
        self.out.write_all(b"\n")
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::WorldConfig;

    fn lex() -> Lexicon {
        Lexicon::new(&WorldConfig::default())
    }

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn verify_template() {
        assert_eq!(adapt_verify_property("flower", "red").unwrap(), "Is this flower red?");
        assert_eq!(adapt_verify_property("door", "open").unwrap(), "Is this door open?");
        assert_eq!(
            adapt_verify_property("tv", "turned on").unwrap(),
            "Is this tv turned on?"
        );
        assert_eq!(
            adapt_verify_property("", "red"),
            Err(AdapterError::EmptyToken("object name"))
        );
    }

    #[test]
    fn choice_templates() {
        let lx = lex();
        assert_eq!(
            adapt_best_text_match(&s(&["bread", "sandwich"]), Some("food"), false, &lx).unwrap(),
            "Is this a bread or sandwich?"
        );
        assert_eq!(
            adapt_best_text_match(&s(&["red", "blue"]), Some("flower"), false, &lx).unwrap(),
            "Is this flower red or blue?"
        );
        assert_eq!(
            adapt_best_text_match(&s(&["apple", "orange"]), Some("fruits"), true, &lx).unwrap(),
            "Are these apple or orange?"
        );
        assert_eq!(
            adapt_best_text_match(&s(&["red", "blue"]), Some("flowers"), true, &lx).unwrap(),
            "Are these flowers red or blue?"
        );
        assert_eq!(
            adapt_best_text_match(&s(&["apple", "pear", "fig"]), None, false, &lx).unwrap(),
            "Is this an apple or pear or fig?"
        );
    }

    #[test]
    fn choice_errors() {
        let lx = lex();
        assert_eq!(
            adapt_best_text_match(&s(&["red"]), None, false, &lx),
            Err(AdapterError::TooFewOptions(1))
        );
        assert!(matches!(
            adapt_best_text_match(&s(&["red", "bread"]), None, false, &lx),
            Err(AdapterError::MixedOptions(_))
        ));
    }

    #[test]
    fn simple_query_punctuation() {
        assert_eq!(
            adapt_simple_query("What color is this table"),
            "What color is this table?"
        );
        assert_eq!(adapt_simple_query("What is this?"), "What is this?");
        assert_eq!(adapt_simple_query("What is this ??"), "What is this?");
        assert_eq!(adapt_simple_query(""), "");
    }
}
