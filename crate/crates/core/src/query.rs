//! Structured sub-task queries: parsing question text into a structured form
//! and answering it exactly over a set of visible scene objects.
//!
//! The same answering routine serves the ground-truth oracle (identity
//! perception) and the corrupted students (permuted perception), so the two
//! can only differ through the labels they perceive.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::lexicon::Lexicon;
use crate::scene::{SceneGraph, SceneObject, ScenePatch};

pub const YES: &str = "yes";
pub const NO: &str = "no";
pub const UNKNOWN: &str = "unknown";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum StructuredQuery {
    VerifyAttribute {
        name: Option<String>,
        attribute: String,
    },
    /// Options are kept sorted so that option order never changes the answer.
    ChooseOption {
        options: Vec<String>,
        center: Option<String>,
    },
    AskAttributeFamily {
        family: String,
        center: Option<String>,
    },
    AskName {
        center: Option<String>,
    },
    Exists {
        name: String,
    },
    Unrecognized {
        text: String,
    },
}

impl StructuredQuery {
    pub fn choose(options: impl IntoIterator<Item = impl Into<String>>, center: Option<&str>) -> Self {
        let mut options: Vec<String> = options.into_iter().map(Into::into).collect();
        options.sort();
        options.dedup();
        StructuredQuery::ChooseOption {
            options,
            center: center.map(str::to_string),
        }
    }

    /// Canonical "template id + slot tokens" form.
    pub fn canonical(&self) -> String {
        let opt = |o: &Option<String>| o.clone().unwrap_or_else(|| "-".into());
        match self {
            Self::VerifyAttribute { name, attribute } => format!("verify|{}|{attribute}", opt(name)),
            Self::ChooseOption { options, center } => {
                format!("choose|{}|{}", opt(center), options.join(","))
            }
            Self::AskAttributeFamily { family, center } => format!("family|{family}|{}", opt(center)),
            Self::AskName { center } => format!("name|{}", opt(center)),
            Self::Exists { name } => format!("exists|{name}"),
            Self::Unrecognized { text } => format!("text|{text}"),
        }
    }

    /// The closed set of answers a smoothed student spreads probability over.
    pub fn candidates(&self, lex: &Lexicon) -> Vec<String> {
        match self {
            Self::VerifyAttribute { .. } | Self::Exists { .. } => vec![NO.into(), YES.into()],
            Self::ChooseOption { options, .. } => options.clone(),
            Self::AskAttributeFamily { family, .. } => {
                let mut v = lex.family_values(family).to_vec();
                v.sort();
                v
            }
            Self::AskName { center } => lex.nouns_for(center.as_deref()),
            Self::Unrecognized { .. } => vec![UNKNOWN.into()],
        }
    }
}

impl fmt::Display for StructuredQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

fn is_be(w: &str) -> bool {
    matches!(w, "is" | "are")
}

fn is_det(w: &str) -> bool {
    matches!(w, "this" | "these" | "the" | "that" | "those" | "it")
}

fn is_article(w: &str) -> bool {
    matches!(w, "a" | "an" | "any" | "some")
}

fn strip_leading_article<'a>(t: &'a [&'a str]) -> &'a [&'a str] {
    match t.first() {
        Some(w) if is_article(w) => &t[1..],
        _ => t,
    }
}

fn strip_trailing_article<'a>(t: &'a [&'a str]) -> &'a [&'a str] {
    match t.last() {
        Some(w) if is_article(w) => &t[..t.len() - 1],
        _ => t,
    }
}

fn strip_location<'a>(t: &'a [&'a str]) -> &'a [&'a str] {
    for tail in [
        &["in", "the", "image"][..],
        &["in", "this", "image"],
        &["in", "the", "picture"],
        &["in", "this", "picture"],
    ] {
        if t.ends_with(tail) {
            return &t[..t.len() - tail.len()];
        }
    }
    t
}

fn join(t: &[&str]) -> Option<String> {
    (!t.is_empty()).then(|| t.join(" "))
}

/// Longest suffix (up to three words) accepted by `known`.
fn known_suffix(t: &[&str], known: impl Fn(&str) -> bool) -> Option<usize> {
    (1..=t.len().min(3)).rev().find(|&n| known(&t[t.len() - n..].join(" ")))
}

/// Normalizes question text: lowercase, punctuation stripped.
pub fn normalize_question(text: &str) -> String {
    text.to_lowercase()
        .chars()
        .map(|c| if c == '?' || c == ',' || c == '.' { ' ' } else { c })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parses question text into a structured query. Text outside the recognized
/// forms becomes [`StructuredQuery::Unrecognized`].
pub fn parse_question(text: &str, lex: &Lexicon) -> StructuredQuery {
    let norm = normalize_question(text);
    let t: Vec<&str> = norm.split(' ').filter(|w| !w.is_empty()).collect();
    parse_tokens(&t, lex).unwrap_or(StructuredQuery::Unrecognized { text: norm.clone() })
}

fn parse_tokens(t: &[&str], lex: &Lexicon) -> Option<StructuredQuery> {
    let known = |w: &str| {
        let s = lex.singular(w);
        lex.is_noun(&s) || lex.is_category(&s) || lex.is_attribute(w) || Lexicon::is_generic(&s)
    };
    match t {
        ["what", kind, "of", rest @ ..] if matches!(*kind, "kind" | "type") => {
            let be = rest.iter().position(|w| is_be(w))?;
            let center = join(&rest[..be])?;
            Some(StructuredQuery::AskName { center: Some(center) })
        }
        ["what", family, be, det, rest @ ..] if lex.is_family(family) && is_be(be) && is_det(det) => {
            Some(StructuredQuery::AskAttributeFamily {
                family: family.to_string(),
                center: join(rest),
            })
        }
        ["what", be, det, rest @ ..] if is_be(be) && is_det(det) => {
            if let Some(center) = rest.strip_suffix(&["made", "of"][..]) {
                return Some(StructuredQuery::AskAttributeFamily {
                    family: "material".into(),
                    center: join(center),
                });
            }
            let center = rest.strip_suffix(&["called"][..]).unwrap_or(rest);
            Some(StructuredQuery::AskName { center: join(center) })
        }
        [be, "there", rest @ ..] if is_be(be) => {
            let rest = strip_location(strip_leading_article(rest));
            if rest.is_empty() || rest.iter().any(|w| matches!(*w, "and" | "both" | "or")) {
                return None;
            }
            Some(StructuredQuery::Exists { name: rest.join(" ") })
        }
        [be, det, rest @ ..] if is_be(be) && is_det(det) && !rest.is_empty() => {
            if rest.contains(&"or") {
                return parse_choice(rest, lex, known);
            }
            if is_article(rest[0]) {
                let name = join(&rest[1..])?;
                return Some(StructuredQuery::Exists { name });
            }
            if let Some(n) = known_suffix(rest, |p| lex.is_attribute(p)) {
                let split = rest.len() - n;
                return Some(StructuredQuery::VerifyAttribute {
                    name: join(&rest[..split]),
                    attribute: rest[split..].join(" "),
                });
            }
            None
        }
        _ => None,
    }
}

fn parse_choice(rest: &[&str], _lex: &Lexicon, known: impl Fn(&str) -> bool) -> Option<StructuredQuery> {
    let segments: Vec<&[&str]> = rest.split(|w| *w == "or").collect();
    if segments.len() < 2 || segments.iter().any(|s| s.is_empty()) {
        return None;
    }
    let first = strip_leading_article(segments[0]);
    let n = known_suffix(first, &known).unwrap_or(1.min(first.len()));
    if n == 0 {
        return None;
    }
    let split = first.len() - n;
    let center = join(strip_trailing_article(&first[..split]));
    let mut options = vec![first[split..].join(" ")];
    for seg in &segments[1..] {
        options.push(join(strip_leading_article(seg))?);
    }
    Some(StructuredQuery::choose(options, center.as_deref()))
}

/// How a backend perceives object labels. The oracle perceives them as they
/// are; corrupted students see some labels permuted.
pub trait Perception {
    fn label<'a>(&'a self, token: &'a str) -> &'a str;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TruePerception;

impl Perception for TruePerception {
    fn label<'a>(&'a self, token: &'a str) -> &'a str {
        token
    }
}

/// Resolves the object a query is about. A reference word selects the
/// matching visible objects; without one every visible object is a
/// candidate. Ties go to the smallest object id.
pub fn resolve_target<'s>(view: &[&'s SceneObject], center: Option<&str>, lex: &Lexicon) -> Option<&'s SceneObject> {
    match center {
        Some(c) => view.iter().find(|o| lex.matches(&o.name, c)).copied(),
        None => view.first().copied(),
    }
}

fn option_matches(name: &str, attrs: &[&str], option: &str, lex: &Lexicon) -> bool {
    name == option || lex.singular(option) == name || attrs.contains(&option)
}

/// Answers a structured query over `view` (visible objects, id order) as
/// perceived through `perception`. Target resolution always uses true
/// geometry and names; only the labels read off the target are perceived.
pub fn answer_with(
    query: &StructuredQuery,
    view: &[&SceneObject],
    lex: &Lexicon,
    perception: &dyn Perception,
) -> String {
    let perceived_attrs =
        |o: &SceneObject| -> Vec<String> { o.attributes.iter().map(|a| perception.label(a).to_string()).collect() };
    let unknown = || UNKNOWN.to_string();
    let yes_no = |b: bool| if b { YES } else { NO }.to_string();
    match query {
        StructuredQuery::VerifyAttribute { name, attribute } => match resolve_target(view, name.as_deref(), lex) {
            Some(o) => yes_no(perceived_attrs(o).iter().any(|a| a == attribute)),
            None => unknown(),
        },
        StructuredQuery::ChooseOption { options, center } => {
            let target = match center {
                Some(c) => resolve_target(view, Some(c), lex),
                None => view
                    .iter()
                    .find(|o| {
                        let attrs: Vec<&str> = o.attributes.iter().map(String::as_str).collect();
                        options.iter().any(|opt| option_matches(&o.name, &attrs, opt, lex))
                    })
                    .or_else(|| view.first())
                    .copied(),
            };
            let Some(o) = target else {
                return unknown();
            };
            let name = perception.label(&o.name);
            let attrs = perceived_attrs(o);
            let attrs: Vec<&str> = attrs.iter().map(String::as_str).collect();
            options
                .iter()
                .find(|opt| option_matches(name, &attrs, opt, lex))
                .or_else(|| options.first())
                .cloned()
                .unwrap_or_else(unknown)
        }
        StructuredQuery::AskAttributeFamily { family, center } => match resolve_target(view, center.as_deref(), lex) {
            Some(o) => perceived_attrs(o)
                .into_iter()
                .find(|a| lex.family_of(a) == Some(family.as_str()))
                .unwrap_or_else(unknown),
            None => unknown(),
        },
        StructuredQuery::AskName { center } => match resolve_target(view, center.as_deref(), lex) {
            Some(o) => perception.label(&o.name).to_string(),
            None => unknown(),
        },
        StructuredQuery::Exists { name } => yes_no(view.iter().any(|o| lex.matches(perception.label(&o.name), name))),
        StructuredQuery::Unrecognized { .. } => unknown(),
    }
}

/// Ground-truth answer for a structured query on a patch.
pub fn oracle_answer(scene: &SceneGraph, patch: &ScenePatch, query: &StructuredQuery, lex: &Lexicon) -> String {
    answer_with(query, &patch.view(scene), lex, &TruePerception)
}
