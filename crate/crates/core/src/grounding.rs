//! Relational stand-in for the visual-language grounding model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::AxisRect;
use crate::lang::RelationTriple;
use crate::scene::{ObjectId, Scene, SceneError, SceneGraph};

/// The region a description refers to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedObject {
    pub object_id: ObjectId,
    pub region: AxisRect,
    pub confidence: f64,
    /// More than one instance satisfied the description.
    pub ambiguous: bool,
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
pub enum GroundingError {
    #[error("no {subject} stands in relation {predicate} to a {object} in this scene")]
    NoCandidate {
        subject: String,
        predicate: String,
        object: String,
    },
    #[error("scene graph unavailable: {0}")]
    Scene(String),
}

impl From<SceneError> for GroundingError {
    fn from(e: SceneError) -> Self {
        GroundingError::Scene(e.to_string())
    }
}

/// Candidate subjects for `triple`, in ascending id order.
pub fn candidates(scene: &Scene, graph: &SceneGraph, triple: &RelationTriple) -> Vec<ObjectId> {
    let mut out: Vec<ObjectId> = scene
        .objects
        .iter()
        .filter(|s| s.class_name == triple.subject_class)
        .filter(|s| {
            scene.objects.iter().any(|o| {
                o.id != s.id
                    && o.class_name == triple.object_class
                    && graph.holds(s.id, triple.predicate, o.id)
            })
        })
        .map(|s| s.id)
        .collect();
    out.sort_unstable();
    out
}

/// Resolves a triple to the object it describes. `UNDER` is answered through
/// the stacking closure, so `a under b` grounds `a` exactly when `b on a`.
pub fn ground_with(
    scene: &Scene,
    graph: &SceneGraph,
    triple: &RelationTriple,
) -> Result<GroundedObject, GroundingError> {
    let found = candidates(scene, graph, triple);
    let Some(&first) = found.first() else {
        return Err(GroundingError::NoCandidate {
            subject: triple.subject_class.clone(),
            predicate: triple.predicate.to_string(),
            object: triple.object_class.clone(),
        });
    };
    let obj = scene.object(first).expect("candidate exists");
    Ok(GroundedObject {
        object_id: first,
        region: obj.bbox,
        confidence: 1.0 / found.len() as f64,
        ambiguous: found.len() > 1,
    })
}

pub fn ground(scene: &Scene, triple: &RelationTriple) -> Result<GroundedObject, GroundingError> {
    let graph = scene.graph()?;
    ground_with(scene, &graph, triple)
}

/// Like [`ground_with`], but with probability `delta` returns a uniformly
/// chosen wrong object. One Bernoulli draw is always consumed first, so
/// `delta` changes outcomes without shifting the stream.
pub fn noisy_ground_rng<R: Rng>(
    scene: &Scene,
    graph: &SceneGraph,
    triple: &RelationTriple,
    delta: f64,
    rng: &mut R,
) -> Result<GroundedObject, GroundingError> {
    let oracle = ground_with(scene, graph, triple)?;
    let flip = rng.random::<f64>() < delta;
    let pick = rng.random::<f64>();
    if !flip {
        return Ok(oracle);
    }
    let wrong: Vec<_> = scene
        .objects
        .iter()
        .filter(|o| o.id != oracle.object_id)
        .collect();
    if wrong.is_empty() {
        return Ok(oracle);
    }
    let idx = ((pick * wrong.len() as f64) as usize).min(wrong.len() - 1);
    Ok(GroundedObject {
        object_id: wrong[idx].id,
        region: wrong[idx].bbox,
        confidence: oracle.confidence,
        ambiguous: oracle.ambiguous,
    })
}

pub fn noisy_ground(
    scene: &Scene,
    triple: &RelationTriple,
    delta: f64,
    seed: u64,
) -> Result<GroundedObject, GroundingError> {
    let graph = scene.graph()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    noisy_ground_rng(scene, &graph, triple, delta, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::{parse, Lexicon};
    use crate::scene::fixtures::*;
    use crate::scene::Predicate;

    fn triple(text: &str) -> RelationTriple {
        parse(&Lexicon::default(), text).unwrap().triple
    }

    #[test]
    fn grounds_desk_descriptions() {
        let s = desk_scene();
        let g = ground(&s, &triple("apple on notebook")).unwrap();
        assert_eq!(g.object_id, 2);
        assert_eq!(g.region, s.object(2).unwrap().bbox);
        assert_eq!(g.confidence, 1.0);
        let g = ground(&s, &triple("notebook placed under pliers")).unwrap();
        assert_eq!(g.object_id, 1);
        assert!(matches!(
            ground(&s, &triple("apple on box")),
            Err(GroundingError::NoCandidate { .. })
        ));
    }

    #[test]
    fn under_and_on_are_dual() {
        let s = desk_scene();
        let under = ground(&s, &triple("notebook under apple")).unwrap();
        let on = ground(&s, &triple("apple on notebook")).unwrap();
        assert_eq!(under.object_id, 1);
        assert_eq!(on.object_id, 2);
        let graph = s.graph().unwrap();
        assert!(graph.holds(on.object_id, Predicate::On, under.object_id));
    }

    #[test]
    fn duplicate_classes_tie_break_low_id() {
        let mut s = desk_scene();
        s.objects[2].class_name = "apple".into();
        let g = ground(&s, &triple("apple on notebook")).unwrap();
        assert_eq!(g.object_id, 2);
        assert!(g.ambiguous);
        assert_eq!(g.confidence, 0.5);
    }

    #[test]
    fn noisy_ground_rates() {
        let s = desk_scene();
        let t = triple("apple on notebook");
        assert_eq!(noisy_ground(&s, &t, 0.0, 5).unwrap(), ground(&s, &t).unwrap());
        for seed in 0..50 {
            assert_ne!(noisy_ground(&s, &t, 1.0, seed).unwrap().object_id, 2);
        }
        let trials = 10_000;
        let wrong = (0..trials)
            .filter(|&seed| noisy_ground(&s, &t, 0.2, seed).unwrap().object_id != 2)
            .count();
        let rate = wrong as f64 / trials as f64;
        assert!((rate - 0.2).abs() <= 0.02, "rate {rate}");
    }
}
