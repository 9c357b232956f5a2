//! Error injection for self-explanations and grounding, and the simulated
//! human who corrects erroneous descriptions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lang::{generate, templates, Description, LangError, Lexicon, RelationTriple, Source};
use crate::scene::{Predicate, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Probability a self-explanation is wrong.
    pub describe_error_rate: f64,
    /// Probability grounding returns the wrong object.
    pub ground_error_rate: f64,
    /// Probability a proposal's surface score is flipped.
    pub surface_flip_rate: f64,
    /// Probability a proposal's orientation bin is replaced.
    pub angle_noise_rate: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            describe_error_rate: 0.0,
            ground_error_rate: 0.0,
            surface_flip_rate: 0.0,
            angle_noise_rate: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{name} = {value} is outside [0, 1]")]
pub struct RateError {
    pub name: &'static str,
    pub value: f64,
}

pub(crate) fn check_rate(name: &'static str, value: f64) -> Result<(), RateError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(RateError { name, value })
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), RateError> {
        check_rate("describe_error_rate", self.describe_error_rate)?;
        check_rate("ground_error_rate", self.ground_error_rate)?;
        check_rate("surface_flip_rate", self.surface_flip_rate)?;
        check_rate("angle_noise_rate", self.angle_noise_rate)
    }
}

/// How a self-explanation goes wrong.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    /// Subject and object trade places.
    Swap,
    /// The relation is replaced by a different one.
    ReplacePredicate,
    /// The subject is replaced by another class present in the scene.
    ReplaceSubject,
}

impl CorruptionMode {
    pub const ALL: [CorruptionMode; 3] = [
        CorruptionMode::Swap,
        CorruptionMode::ReplacePredicate,
        CorruptionMode::ReplaceSubject,
    ];
}

fn template_index(desc: &Description) -> u64 {
    let t = &desc.triple;
    templates(t.predicate)
        .iter()
        .position(|tpl| {
            tpl.replace("{s}", &t.subject_class)
                .replace("{o}", &t.object_class)
                == desc.text
        })
        .unwrap_or(0) as u64
}

/// Applies one specific corruption. The result keeps the original phrasing
/// where the predicate allows it.
pub fn corrupt_with_mode<R: Rng>(
    lex: &Lexicon,
    desc: &Description,
    scene: &Scene,
    mode: CorruptionMode,
    rng: &mut R,
) -> Result<Description, LangError> {
    let t = &desc.triple;
    let other_classes: Vec<&str> = {
        let mut v: Vec<&str> = scene
            .objects
            .iter()
            .map(|o| o.class_name.as_str())
            .filter(|c| *c != t.subject_class && *c != t.object_class)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let mode = if mode == CorruptionMode::ReplaceSubject && other_classes.is_empty() {
        CorruptionMode::Swap
    } else {
        mode
    };
    let triple = match mode {
        CorruptionMode::Swap => RelationTriple {
            subject_class: t.object_class.clone(),
            predicate: t.predicate,
            object_class: t.subject_class.clone(),
            subject_id: t.object_id,
            object_id: t.subject_id,
        },
        CorruptionMode::ReplacePredicate => {
            let others: Vec<Predicate> = Predicate::ALL
                .into_iter()
                .filter(|p| *p != t.predicate)
                .collect();
            let p = others[rng.random_range(0..others.len())];
            RelationTriple::new(&t.subject_class, p, &t.object_class)
        }
        CorruptionMode::ReplaceSubject => {
            let c = other_classes[rng.random_range(0..other_classes.len())];
            RelationTriple::new(c, t.predicate, &t.object_class)
        }
    };
    let mut out = generate(lex, &triple, template_index(desc))?;
    out.source = desc.source;
    out.corrupted = true;
    Ok(out)
}

/// With probability `eps` applies a uniformly chosen corruption mode.
pub fn corrupt_description_rng<R: Rng>(
    lex: &Lexicon,
    desc: &Description,
    scene: &Scene,
    eps: f64,
    rng: &mut R,
) -> Result<Description, LangError> {
    let hit = rng.random::<f64>() < eps;
    let mode = CorruptionMode::ALL[rng.random_range(0..CorruptionMode::ALL.len())];
    if hit {
        corrupt_with_mode(lex, desc, scene, mode, rng)
    } else {
        Ok(desc.clone())
    }
}

pub fn corrupt_description(
    lex: &Lexicon,
    desc: &Description,
    scene: &Scene,
    eps: f64,
    seed: u64,
) -> Result<Description, LangError> {
    corrupt_description_rng(lex, desc, scene, eps, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Simulated operator: replaces an erroneous description by the oracle one
/// with probability `rho`. Correct descriptions are never touched.
pub fn intervene_rng<R: Rng>(desc: &Description, oracle: &Description, rho: f64, rng: &mut R) -> Description {
    if !desc.corrupted {
        return desc.clone();
    }
    if rng.random::<f64>() < rho {
        human_correction(oracle)
    } else {
        desc.clone()
    }
}

pub fn intervene(desc: &Description, oracle: &Description, rho: f64, seed: u64) -> Description {
    intervene_rng(desc, oracle, rho, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// The oracle description as typed by a human.
pub fn human_correction(oracle: &Description) -> Description {
    Description {
        source: Source::Human,
        corrupted: false,
        ..oracle.clone()
    }
}
