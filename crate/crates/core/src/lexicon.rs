//! Vocabulary lookups derived from a [`WorldConfig`]: noun categories,
//! attribute families, and the small plural lexicon used by the adapter.

use std::collections::{BTreeMap, BTreeSet};

use crate::scene::WorldConfig;

/// Words that refer to any object.
const GENERIC: &[&str] = &["object", "objects", "thing", "things", "item", "items"];

/// Irregular plural -> singular.
const IRREGULAR_PLURALS: &[(&str, &str)] = &[
    ("people", "person"),
    ("children", "child"),
    ("men", "man"),
    ("women", "woman"),
    ("mice", "mouse"),
    ("geese", "goose"),
    ("feet", "foot"),
    ("teeth", "tooth"),
    ("knives", "knife"),
    ("leaves", "leaf"),
    ("shelves", "shelf"),
    ("sheep", "sheep"),
    ("fish", "fish"),
];

/// Singular words that end in `s` but are not plural.
const SINGULAR_WITH_S: &[&str] = &[
    "bus", "glass", "grass", "dress", "lens", "gas", "cactus", "canvas", "walrus", "octopus", "jeans", "pants",
    "shorts", "scissors", "glasses", "news",
];

#[derive(Debug, Clone)]
pub struct Lexicon {
    noun_category: BTreeMap<String, String>,
    category_nouns: BTreeMap<String, Vec<String>>,
    attribute_family: BTreeMap<String, String>,
    family_values: BTreeMap<String, Vec<String>>,
    all_nouns: Vec<String>,
}

impl Lexicon {
    pub fn new(config: &WorldConfig) -> Self {
        let mut noun_category = BTreeMap::new();
        let mut category_nouns = BTreeMap::new();
        let mut all_nouns = Vec::new();
        for c in &config.categories {
            for n in &c.nouns {
                noun_category.insert(n.clone(), c.category.clone());
                all_nouns.push(n.clone());
            }
            category_nouns.insert(c.category.clone(), c.nouns.clone());
        }
        let mut attribute_family = BTreeMap::new();
        let mut family_values = BTreeMap::new();
        for f in &config.attributes {
            for v in &f.values {
                attribute_family.insert(v.clone(), f.family.clone());
            }
            family_values.insert(f.family.clone(), f.values.clone());
        }
        all_nouns.sort();
        Self {
            noun_category,
            category_nouns,
            attribute_family,
            family_values,
            all_nouns,
        }
    }

    pub fn is_noun(&self, word: &str) -> bool {
        self.noun_category.contains_key(word)
    }

    pub fn is_category(&self, word: &str) -> bool {
        self.category_nouns.contains_key(word)
    }

    pub fn is_attribute(&self, word: &str) -> bool {
        self.attribute_family.contains_key(word)
    }

    pub fn is_family(&self, word: &str) -> bool {
        self.family_values.contains_key(word)
    }

    pub fn category_of(&self, noun: &str) -> Option<&str> {
        self.noun_category.get(noun).map(String::as_str)
    }

    pub fn family_of(&self, attribute: &str) -> Option<&str> {
        self.attribute_family.get(attribute).map(String::as_str)
    }

    pub fn family_values(&self, family: &str) -> &[String] {
        self.family_values.get(family).map_or(&[], Vec::as_slice)
    }

    pub fn families(&self) -> impl Iterator<Item = &str> {
        self.family_values.keys().map(String::as_str)
    }

    pub fn categories(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.category_nouns.iter().map(|(c, n)| (c.as_str(), n.as_slice()))
    }

    pub fn category_nouns(&self, category: &str) -> &[String] {
        self.category_nouns.get(category).map_or(&[], Vec::as_slice)
    }

    pub fn nouns(&self) -> &[String] {
        &self.all_nouns
    }

    pub fn is_generic(word: &str) -> bool {
        GENERIC.contains(&word)
    }

    /// Whether a word reads as plural: irregulars table first, then a
    /// trailing-`s` heuristic.
    pub fn is_plural(word: &str) -> bool {
        let w = word.trim().to_ascii_lowercase();
        let last = w.rsplit(' ').next().unwrap_or("");
        if IRREGULAR_PLURALS.iter().any(|(p, s)| *p == last && p != s) {
            return true;
        }
        if SINGULAR_WITH_S.contains(&last) {
            return false;
        }
        last.len() > 1 && last.ends_with('s') && !last.ends_with("ss")
    }

    /// Reduces a (possibly plural) word to a known noun, category or generic
    /// word. Unknown words are returned unchanged.
    pub fn singular(&self, word: &str) -> String {
        let w = word.trim().to_ascii_lowercase();
        if self.is_noun(&w) || self.is_category(&w) || Self::is_generic(&w) {
            return w;
        }
        if let Some((_, s)) = IRREGULAR_PLURALS.iter().find(|(p, _)| *p == w) {
            return s.to_string();
        }
        for suffix in ["es", "s"] {
            if let Some(stem) = w.strip_suffix(suffix) {
                if self.is_noun(stem) || self.is_category(stem) || Self::is_generic(stem) {
                    return stem.to_string();
                }
            }
        }
        w
    }

    /// Whether an object named `name` answers to the reference word `center`
    /// (a noun, a category, a plural of either, or a generic word).
    pub fn matches(&self, name: &str, center: &str) -> bool {
        let c = self.singular(center);
        if Self::is_generic(&c) {
            return true;
        }
        name == c || self.category_of(name) == Some(c.as_str())
    }

    /// Answer candidates for a reference word asked with "what kind of".
    pub fn nouns_for(&self, center: Option<&str>) -> Vec<String> {
        let Some(center) = center else {
            return self.all_nouns.clone();
        };
        let c = self.singular(center);
        if self.is_category(&c) {
            let mut v = self.category_nouns(&c).to_vec();
            v.sort();
            v
        } else if let Some(cat) = self.category_of(&c) {
            let mut v = self.category_nouns(cat).to_vec();
            v.sort();
            v
        } else {
            self.all_nouns.clone()
        }
    }

    /// Every multi-word vocabulary entry, used by the question parser to
    /// match phrases such as "turned on".
    pub fn known_phrases(&self) -> BTreeSet<&str> {
        self.noun_category
            .keys()
            .chain(self.category_nouns.keys())
            .chain(self.attribute_family.keys())
            .map(String::as_str)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plural_heuristic() {
        assert!(Lexicon::is_plural("fruits"));
        assert!(Lexicon::is_plural("people"));
        assert!(!Lexicon::is_plural("bus"));
        assert!(!Lexicon::is_plural("glass"));
        assert!(!Lexicon::is_plural("food"));
        assert!(Lexicon::is_plural("buses"));
    }

    #[test]
    fn singular_and_matching() {
        let lex = Lexicon::new(&WorldConfig::default());
        assert_eq!(lex.singular("flowers"), "flower");
        assert_eq!(lex.singular("buses"), "bus");
        assert_eq!(lex.singular("foods"), "food");
        assert!(lex.matches("bread", "food"));
        assert!(lex.matches("bread", "breads"));
        assert!(lex.matches("bread", "object"));
        assert!(!lex.matches("bread", "animal"));
    }
}
