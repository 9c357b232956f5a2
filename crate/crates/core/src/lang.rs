//! Constrained scene-description language.
//!
//! Sentences have the shape `<subject class> <relation phrase> <object class>`,
//! e.g. `apple on notebook` or `notebook sitting under pliers`. The
//! [`Lexicon`] holds the class vocabulary and the phrase table; generation
//! renders a [`RelationTriple`] through a fixed template set and [`parse`]
//! maps typed text back to a triple.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{select_target, ObjectId, Predicate, Scene, SceneError, SceneGraph};

/// Default object vocabulary (31 household classes).
pub const DEFAULT_CLASSES: [&str; 31] = [
    "apple",
    "badminton",
    "banana",
    "bottle",
    "box",
    "cans",
    "card",
    "charger",
    "cup",
    "glasses",
    "headset",
    "knife",
    "mobile phone",
    "mouse",
    "notebook",
    "paper",
    "pen",
    "pliers",
    "remote controller",
    "scissors",
    "screwdriver",
    "shaver",
    "socks",
    "stapler",
    "tape",
    "toothbrush",
    "toothpaste",
    "towel",
    "umbrella",
    "wallet",
    "wrench",
];

const DEFAULT_PHRASES: &[(&str, Predicate)] = &[
    ("on", Predicate::On),
    ("above", Predicate::On),
    ("on top of", Predicate::On),
    ("placed on", Predicate::On),
    ("put above", Predicate::On),
    ("put on", Predicate::On),
    ("sitting on", Predicate::On),
    ("lying on", Predicate::On),
    ("stacked on", Predicate::On),
    ("under", Predicate::Under),
    ("below", Predicate::Under),
    ("beneath", Predicate::Under),
    ("underneath", Predicate::Under),
    ("placed under", Predicate::Under),
    ("sitting under", Predicate::Under),
    ("lying under", Predicate::Under),
    ("left", Predicate::Left),
    ("left of", Predicate::Left),
    ("on the left of", Predicate::Left),
    ("to the left of", Predicate::Left),
    ("right", Predicate::Right),
    ("right of", Predicate::Right),
    ("on the right of", Predicate::Right),
    ("to the right of", Predicate::Right),
];

const STOPWORDS: &[&str] = &["a", "an", "the", "is", "are", "of", "to", "and", "it", "there", "which", "that"];

/// Sentence templates per predicate; `{s}` is the subject class, `{o}` the object class.
pub fn templates(predicate: Predicate) -> &'static [&'static str] {
    match predicate {
        Predicate::On => &["{s} on {o}", "{s} put above {o}", "{s} placed on {o}"],
        Predicate::Under => &["{s} placed under {o}", "{s} sitting under {o}"],
        Predicate::Left => &["{s} on the left of {o}", "{s} left of {o}"],
        Predicate::Right => &["{s} on the right of {o}", "{s} right of {o}"],
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelationTriple {
    pub subject_class: String,
    pub predicate: Predicate,
    pub object_class: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_id: Option<ObjectId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_id: Option<ObjectId>,
}

impl RelationTriple {
    pub fn new(subject: &str, predicate: Predicate, object: &str) -> Self {
        Self {
            subject_class: subject.to_string(),
            predicate,
            object_class: object.to_string(),
            subject_id: None,
            object_id: None,
        }
    }

    pub fn with_ids(mut self, subject: ObjectId, object: ObjectId) -> Self {
        self.subject_id = Some(subject);
        self.object_id = Some(object);
        self
    }

    /// Classes and predicate agree (ids ignored).
    pub fn same_statement(&self, other: &RelationTriple) -> bool {
        self.subject_class == other.subject_class
            && self.predicate == other.predicate
            && self.object_class == other.object_class
    }
}

impl fmt::Display for RelationTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.subject_class, self.predicate, self.object_class)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Source {
    SelfExplanation,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Description {
    pub triple: RelationTriple,
    pub text: String,
    pub source: Source,
    /// Set by the noise model. Grounding and planning never read it;
    /// evaluation and the simulated human do.
    #[serde(default)]
    pub corrupted: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LangError {
    #[error("class {0:?} is not in the vocabulary")]
    UnknownClass(String),
    #[error("lexicon line {line}: {message}")]
    Lexicon { line: usize, message: String },
}

fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Class vocabulary, relation phrase table and stopwords.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    classes: Vec<(String, Vec<String>)>,
    phrases: Vec<(Vec<String>, Predicate)>,
    stopwords: BTreeSet<String>,
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::with_classes(DEFAULT_CLASSES)
    }
}

impl Lexicon {
    /// Default phrase table with a custom class vocabulary.
    pub fn with_classes<I, S>(classes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut lex = Self {
            classes: Vec::new(),
            phrases: DEFAULT_PHRASES
                .iter()
                .map(|(p, pred)| (tokenize(p), *pred))
                .collect(),
            stopwords: STOPWORDS.iter().map(|s| s.to_string()).collect(),
        };
        for c in classes {
            lex.add_class(c.as_ref());
        }
        lex
    }

    pub fn add_class(&mut self, name: &str) {
        let toks = tokenize(name);
        let canonical = toks.join(" ");
        if !toks.is_empty() && !self.classes.iter().any(|(c, _)| *c == canonical) {
            self.classes.push((canonical, toks));
        }
    }

    pub fn add_phrase(&mut self, phrase: &str, predicate: Predicate) {
        let toks = tokenize(phrase);
        if !toks.is_empty() && !self.phrases.iter().any(|(p, _)| *p == toks) {
            self.phrases.push((toks, predicate));
        }
    }

    /// Extends the lexicon from a line-oriented file body: `phrase<TAB>PREDICATE`
    /// or `class name<TAB>CLASS`. Blank lines and `#` comments are skipped.
    pub fn extend_from_str(&mut self, body: &str) -> Result<(), LangError> {
        for (i, raw) in body.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (phrase, kind) = line.split_once('\t').ok_or_else(|| LangError::Lexicon {
                line: i + 1,
                message: "expected `phrase<TAB>KIND`".into(),
            })?;
            if tokenize(phrase).is_empty() {
                return Err(LangError::Lexicon {
                    line: i + 1,
                    message: "empty phrase".into(),
                });
            }
            match kind.trim() {
                "CLASS" => self.add_class(phrase),
                other => match Predicate::parse(other) {
                    Some(p) => self.add_phrase(phrase, p),
                    None => {
                        return Err(LangError::Lexicon {
                            line: i + 1,
                            message: format!("unknown kind {other:?}"),
                        })
                    }
                },
            }
        }
        Ok(())
    }

    pub fn has_class(&self, name: &str) -> bool {
        let canonical = tokenize(name).join(" ");
        self.classes.iter().any(|(c, _)| *c == canonical)
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|(c, _)| c.as_str())
    }

    fn longest_class(&self, toks: &[String]) -> Option<(&str, usize)> {
        self.classes
            .iter()
            .filter(|(_, t)| toks.starts_with(t))
            .max_by_key(|(_, t)| t.len())
            .map(|(c, t)| (c.as_str(), t.len()))
    }

    fn longest_phrase(&self, toks: &[String]) -> Option<(Predicate, usize)> {
        self.phrases
            .iter()
            .filter(|(t, _)| toks.starts_with(t))
            .max_by_key(|(t, _)| t.len())
            .map(|(t, p)| (*p, t.len()))
    }
}

/// Renders a triple with the template picked by `template_seed`.
pub fn generate(lex: &Lexicon, triple: &RelationTriple, template_seed: u64) -> Result<Description, LangError> {
    for c in [&triple.subject_class, &triple.object_class] {
        if !lex.has_class(c) {
            return Err(LangError::UnknownClass(c.clone()));
        }
    }
    let set = templates(triple.predicate);
    let template = set[(template_seed % set.len() as u64) as usize];
    let text = template
        .replace("{s}", &triple.subject_class)
        .replace("{o}", &triple.object_class);
    Ok(Description {
        triple: triple.clone(),
        text,
        source: Source::SelfExplanation,
        corrupted: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum TokenKind {
    Class(String),
    Relation(Predicate),
    Stopword,
    Unknown,
}

/// One recognised span of the input, for diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTag {
    pub text: String,
    pub position: usize,
    #[serde(flatten)]
    pub kind: TokenKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parsed {
    pub triple: RelationTriple,
    pub tokens: Vec<TokenTag>,
    /// Words outside the lexicon; skipped.
    pub unknown: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseErrorKind {
    Empty,
    NoPredicate,
    Arity,
    ConflictingPredicates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Error)]
#[error("{message}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub message: String,
    pub tokens: Vec<TokenTag>,
}

/// Parses a typed description into a triple.
///
/// Class names and relation phrases are matched longest-first at each token,
/// so `mobile phone` wins over `phone` and `on the left of` over `on`.
pub fn parse(lex: &Lexicon, text: &str) -> Result<Parsed, ParseError> {
    let toks = tokenize(text);
    if toks.is_empty() {
        return Err(ParseError {
            kind: ParseErrorKind::Empty,
            message: "empty description".into(),
            tokens: Vec::new(),
        });
    }
    let mut tags = Vec::new();
    let mut i = 0;
    while i < toks.len() {
        let rest = &toks[i..];
        let class = lex.longest_class(rest);
        let phrase = lex.longest_phrase(rest);
        let (kind, len) = match (class, phrase) {
            (Some((c, cl)), Some((_, pl))) if cl >= pl => (TokenKind::Class(c.to_string()), cl),
            (_, Some((p, pl))) => (TokenKind::Relation(p), pl),
            (Some((c, cl)), None) => (TokenKind::Class(c.to_string()), cl),
            (None, None) if lex.stopwords.contains(&toks[i]) => (TokenKind::Stopword, 1),
            (None, None) => (TokenKind::Unknown, 1),
        };
        tags.push(TokenTag {
            text: toks[i..i + len].join(" "),
            position: i,
            kind,
        });
        i += len;
    }

    let classes: Vec<&str> = tags
        .iter()
        .filter_map(|t| match &t.kind {
            TokenKind::Class(c) => Some(c.as_str()),
            _ => None,
        })
        .collect();
    let preds: BTreeSet<Predicate> = tags
        .iter()
        .filter_map(|t| match t.kind {
            TokenKind::Relation(p) => Some(p),
            _ => None,
        })
        .collect();
    let unknown: Vec<String> = tags
        .iter()
        .filter(|t| t.kind == TokenKind::Unknown)
        .map(|t| t.text.clone())
        .collect();

    let fail = |kind, message: String| ParseError {
        kind,
        message,
        tokens: tags.clone(),
    };
    if preds.is_empty() {
        return Err(fail(
            ParseErrorKind::NoPredicate,
            format!("no relation phrase found in {text:?}"),
        ));
    }
    if preds.len() > 1 {
        return Err(fail(
            ParseErrorKind::ConflictingPredicates,
            format!("conflicting relations {preds:?}"),
        ));
    }
    if classes.len() != 2 {
        return Err(fail(
            ParseErrorKind::Arity,
            format!("expected two object classes, found {}", classes.len()),
        ));
    }
    if !unknown.is_empty() {
        log::debug!("ignoring unknown words {unknown:?} in {text:?}");
    }
    let predicate = *preds.iter().next().expect("one predicate");
    Ok(Parsed {
        triple: RelationTriple::new(classes[0], predicate, classes[1]),
        tokens: tags,
        unknown,
    })
}

fn class_of(scene: &Scene, id: ObjectId) -> String {
    scene
        .object(id)
        .map(|o| o.class_name.clone())
        .unwrap_or_default()
}

/// Samples labelled object pairs, stacking pairs first.
pub fn sample_pairs(scene: &Scene, seed: u64, count: usize) -> Result<Vec<RelationTriple>, SceneError> {
    let graph = scene.graph()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stacking: Vec<_> = graph.stacking().copied().collect();
    let mut horizontal: Vec<_> = graph.horizontal().copied().collect();
    stacking.shuffle(&mut rng);
    horizontal.shuffle(&mut rng);
    let mut out = Vec::new();
    for r in stacking.into_iter().chain(horizontal).take(count) {
        let (s, p, o) = if rng.random_bool(0.5) {
            (r.subject, r.predicate, r.object)
        } else {
            (r.object, r.predicate.inverse(), r.subject)
        };
        out.push(RelationTriple::new(&class_of(scene, s), p, &class_of(scene, o)).with_ids(s, o));
    }
    Ok(out)
}

/// The triple an error-free describer produces: it names the object to grasp
/// (see [`select_target`]) together with the object it rests on, or its
/// nearest horizontal neighbour. `None` when the scene has no describable pair.
pub fn target_triple(scene: &Scene, graph: &SceneGraph) -> Option<RelationTriple> {
    let target = select_target(&scene.objects, graph)?;
    let below = scene
        .tree
        .edges
        .iter()
        .filter(|e| e.child == target)
        .map(|e| e.parent)
        .min()
        .or_else(|| {
            graph
                .stacking()
                .filter(|r| r.subject == target)
                .map(|r| r.object)
                .min()
        });
    let (partner, predicate) = match below {
        Some(p) => (p, Predicate::On),
        None => {
            let tc = scene.object(target)?.bbox.center().x;
            let (_, p, pred) = scene
                .objects
                .iter()
                .filter(|o| o.id != target)
                .filter_map(|o| {
                    let pred = graph.relation_between(target, o.id)?;
                    let dist = (o.bbox.center().x - tc).abs();
                    Some((dist, o.id, pred))
                })
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))?;
            (p, pred)
        }
    };
    Some(
        RelationTriple::new(&class_of(scene, target), predicate, &class_of(scene, partner))
            .with_ids(target, partner),
    )
}

/// Error-free self-explanation for `scene`.
pub fn describe_target(
    lex: &Lexicon,
    scene: &Scene,
    graph: &SceneGraph,
    template_seed: u64,
) -> Result<Option<Description>, LangError> {
    target_triple(scene, graph)
        .map(|t| generate(lex, &t, template_seed))
        .transpose()
}
