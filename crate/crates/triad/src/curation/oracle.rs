//! Offline annotation oracle: counts distinct manipulation verbs from a
//! shipped lexicon, with a suffix-stripping lemmatizer, and extracts the
//! (subject, action, object) triple. Dependency-free and auditable; used
//! both as the `--offline` classifier and as the test oracle for captions.

use crate::encoders::tokenize;
use crate::error::{Error, Result};

use super::{Analysis, AnnotationClassifier};

/// Manipulation verbs recognized by the oracle (lemma forms). Disjoint from
/// the object lexicon so a token is never counted as both.
pub const VERB_LEXICON: &[&str] = &[
    "open", "close", "push", "pull", "lift", "lower", "rotate", "turn", "grasp", "grab", "pick",
    "place", "put", "pour", "press", "slide", "insert", "remove", "move", "hold", "release",
    "stack", "unstack", "flip", "shake", "wipe", "cut", "scoop", "stir", "fold", "unfold",
    "screw", "unscrew", "drop", "raise", "tilt", "twist", "drag", "squeeze", "carry", "pinch",
    "hang", "sweep", "scrub", "pluck", "toss", "catch", "spread", "dip", "peel", "crush",
    "swipe",
];

/// Objects recognized by the extractor (singular lemma forms, except
/// pluralia tantum like "scissors").
pub const OBJECT_LEXICON: &[&str] = &[
    "drawer", "cup", "plate", "door", "box", "bottle", "knob", "tape", "bowl", "pan", "pot",
    "lid", "cloth", "sponge", "spoon", "fork", "knife", "book", "block", "ball", "cabinet",
    "shelf", "stove", "switch", "handle", "tray", "mug", "jar", "towel", "toy", "phone",
    "scissors", "pen", "cap", "cheese", "bread", "apple", "banana", "table", "plug", "socket",
    "basket", "board", "brush", "button", "carrot", "dish", "egg", "glass", "hammer",
    "kettle", "mop", "napkin", "onion", "rack", "rag", "screwdriver", "tool", "wrench",
];

fn dedouble(s: &str) -> Option<String> {
    let b = s.as_bytes();
    if b.len() >= 2 && b[b.len() - 1] == b[b.len() - 2] {
        Some(s[..s.len() - 1].to_string())
    } else {
        None
    }
}

/// Suffix-stripping lemmatization against a lexicon: candidate transforms in
/// a fixed order, first lexicon hit wins.
pub fn lemmatize(word: &str, lexicon: &[&str]) -> Option<String> {
    let hit = |w: &str| lexicon.contains(&w).then(|| w.to_string());
    if let Some(w) = hit(word) {
        return Some(w);
    }
    let mut candidates: Vec<String> = Vec::new();
    if let Some(stem) = word.strip_suffix("ies") {
        candidates.push(format!("{stem}y"));
    }
    for suffix in ["s", "es", "d", "ed", "ing"] {
        if let Some(stem) = word.strip_suffix(suffix) {
            candidates.push(stem.to_string());
            if suffix == "ing" || suffix == "ed" {
                candidates.push(format!("{stem}e"));
                if let Some(shorter) = dedouble(stem) {
                    candidates.push(shorter);
                }
            }
        }
    }
    candidates.into_iter().find_map(|c| hit(&c))
}

const SUBJECT_ALIASES: &[(&str, &str)] = &[
    ("robot", "robot"),
    ("human", "human"),
    ("arm", "arm"),
    ("person", "human"),
    ("man", "human"),
    ("woman", "human"),
    ("gripper", "robot"),
    ("manipulator", "robot"),
];

/// Deterministic lexicon-based classifier.
pub struct OfflineOracle;

impl OfflineOracle {
    pub fn analyze(text: &str) -> Result<Analysis> {
        if text.trim().is_empty() {
            return Err(Error::InvalidAnnotation("empty annotation text".into()));
        }
        let tokens = tokenize(text);
        let mut verbs: Vec<String> = Vec::new();
        let mut objects: Vec<String> = Vec::new();
        let mut subject: Option<String> = None;
        for tok in &tokens {
            if subject.is_none() {
                if let Some((_, canon)) = SUBJECT_ALIASES.iter().find(|(a, _)| a == tok) {
                    subject = Some(canon.to_string());
                }
            }
            if let Some(v) = lemmatize(tok, VERB_LEXICON) {
                if !verbs.contains(&v) {
                    verbs.push(v);
                }
                continue;
            }
            if let Some(o) = lemmatize(tok, OBJECT_LEXICON) {
                if !objects.contains(&o) {
                    objects.push(o);
                }
            }
        }
        Ok(Analysis {
            action_count: verbs.len(),
            verbs,
            objects,
            subject: subject.unwrap_or_else(|| "robot".to_string()),
        })
    }
}

impl AnnotationClassifier for OfflineOracle {
    fn classify(&self, raw_text: &str) -> Result<Analysis> {
        Self::analyze(raw_text)
    }
}
