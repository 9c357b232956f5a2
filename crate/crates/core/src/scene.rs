//! World model: objects, the stacking tree, and its scene-graph closure.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{AxisRect, GraspRect};

pub type ObjectId = u32;

/// Pairs whose box centers are closer than this (px) get no horizontal relation.
pub const HORIZONTAL_TIE_PX: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Predicate {
    On,
    Under,
    Left,
    Right,
}

impl Predicate {
    pub const ALL: [Predicate; 4] = [Predicate::On, Predicate::Under, Predicate::Left, Predicate::Right];

    pub fn inverse(self) -> Predicate {
        match self {
            Predicate::On => Predicate::Under,
            Predicate::Under => Predicate::On,
            Predicate::Left => Predicate::Right,
            Predicate::Right => Predicate::Left,
        }
    }

    pub fn is_stacking(self) -> bool {
        matches!(self, Predicate::On | Predicate::Under)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Predicate::On => "ON",
            Predicate::Under => "UNDER",
            Predicate::Left => "LEFT",
            Predicate::Right => "RIGHT",
        }
    }

    pub fn parse(s: &str) -> Option<Predicate> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ON" => Some(Predicate::On),
            "UNDER" => Some(Predicate::Under),
            "LEFT" => Some(Predicate::Left),
            "RIGHT" => Some(Predicate::Right),
            _ => None,
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub id: ObjectId,
    pub class_name: String,
    pub bbox: AxisRect,
}

/// Direct stacking edge: `child` lies on `parent`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StackEdge {
    pub child: ObjectId,
    pub parent: ObjectId,
}

/// Stacking relations between directly adjacent objects only.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RelationshipTree {
    pub edges: Vec<StackEdge>,
}

impl RelationshipTree {
    pub fn new(edges: impl IntoIterator<Item = (ObjectId, ObjectId)>) -> Self {
        Self {
            edges: edges
                .into_iter()
                .map(|(child, parent)| StackEdge { child, parent })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspAnnotation {
    pub object_id: ObjectId,
    pub rect: GraspRect,
    pub surface: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub image_size: ImageSize,
    pub objects: Vec<ObjectInstance>,
    pub tree: RelationshipTree,
    pub grasps: Vec<GraspAnnotation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Relation {
    pub subject: ObjectId,
    pub predicate: Predicate,
    pub object: ObjectId,
}

/// Full pairwise relation set. Only canonical `ON` and `LEFT` relations are
/// stored; `UNDER` and `RIGHT` are answered through their inverses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub relations: BTreeSet<Relation>,
    /// Unordered pairs (low id first) with no usable relation.
    pub ambiguous: BTreeSet<(ObjectId, ObjectId)>,
}

impl SceneGraph {
    pub fn holds(&self, subject: ObjectId, predicate: Predicate, object: ObjectId) -> bool {
        let canonical = match predicate {
            Predicate::On | Predicate::Left => Relation { subject, predicate, object },
            Predicate::Under | Predicate::Right => Relation {
                subject: object,
                predicate: predicate.inverse(),
                object: subject,
            },
        };
        self.relations.contains(&canonical)
    }

    /// The relation `subject ? object`, expressed from the subject's side.
    pub fn relation_between(&self, subject: ObjectId, object: ObjectId) -> Option<Predicate> {
        Predicate::ALL
            .into_iter()
            .find(|&p| self.holds(subject, p, object))
    }

    pub fn stacking(&self) -> impl Iterator<Item = &Relation> {
        self.relations.iter().filter(|r| r.predicate == Predicate::On)
    }

    pub fn horizontal(&self) -> impl Iterator<Item = &Relation> {
        self.relations.iter().filter(|r| r.predicate == Predicate::Left)
    }

    /// Objects with nothing on top of them according to this graph.
    pub fn graspable<'a>(&self, ids: impl IntoIterator<Item = &'a ObjectId>) -> BTreeSet<ObjectId> {
        let covered: BTreeSet<ObjectId> = self.stacking().map(|r| r.object).collect();
        ids.into_iter().copied().filter(|id| !covered.contains(id)).collect()
    }

    /// Stacking relations viewed as a direct-edge tree (used for idempotence checks).
    pub fn as_tree(&self) -> RelationshipTree {
        RelationshipTree::new(self.stacking().map(|r| (r.subject, r.object)))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneError {
    #[error("stacking cycle through objects {0:?}")]
    Cycle(Vec<ObjectId>),
    #[error("unknown object id {0}")]
    NotFound(ObjectId),
    #[error("invalid scene: {0:?}")]
    Invalid(Vec<ValidationIssue>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValidationIssue {
    DuplicateId { id: ObjectId },
    DanglingTreeRef { child: ObjectId, parent: ObjectId, missing: ObjectId },
    SelfStack { id: ObjectId },
    DanglingGraspRef { grasp: usize, object_id: ObjectId },
    Cycle { ids: Vec<ObjectId> },
    InvalidGeometry { what: String, message: String },
    OutOfImage { id: ObjectId },
    StaleSurfaceFlag { grasp: usize, object_id: ObjectId, recorded: bool, expected: bool },
    EmptyImage,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationIssue::DuplicateId { id } => write!(f, "duplicate object id {id}"),
            ValidationIssue::DanglingTreeRef { child, parent, missing } => {
                write!(f, "tree edge {child} on {parent} references missing object {missing}")
            }
            ValidationIssue::SelfStack { id } => write!(f, "object {id} stacked on itself"),
            ValidationIssue::DanglingGraspRef { grasp, object_id } => {
                write!(f, "grasp #{grasp} references missing object {object_id}")
            }
            ValidationIssue::Cycle { ids } => write!(f, "stacking cycle through {ids:?}"),
            ValidationIssue::InvalidGeometry { what, message } => write!(f, "{what}: {message}"),
            ValidationIssue::OutOfImage { id } => write!(f, "object {id} box leaves the image"),
            ValidationIssue::StaleSurfaceFlag { grasp, object_id, recorded, expected } => write!(
                f,
                "grasp #{grasp} on object {object_id} has surface={recorded}, tree implies {expected}"
            ),
            ValidationIssue::EmptyImage => write!(f, "image size is zero"),
        }
    }
}

/// Depth-first search for a directed cycle in child -> parent edges.
fn find_cycle(adj: &BTreeMap<ObjectId, Vec<ObjectId>>) -> Option<Vec<ObjectId>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Open,
        Done,
    }
    fn visit(
        n: ObjectId,
        adj: &BTreeMap<ObjectId, Vec<ObjectId>>,
        marks: &mut BTreeMap<ObjectId, Mark>,
        path: &mut Vec<ObjectId>,
    ) -> Option<Vec<ObjectId>> {
        match marks.get(&n) {
            Some(Mark::Done) => return None,
            Some(Mark::Open) => {
                let start = path.iter().position(|&p| p == n).unwrap_or(0);
                return Some(path[start..].to_vec());
            }
            None => {}
        }
        marks.insert(n, Mark::Open);
        path.push(n);
        for &m in adj.get(&n).map(Vec::as_slice).unwrap_or(&[]) {
            if let Some(c) = visit(m, adj, marks, path) {
                return Some(c);
            }
        }
        path.pop();
        marks.insert(n, Mark::Done);
        None
    }
    let mut marks = BTreeMap::new();
    for &n in adj.keys() {
        let mut path = Vec::new();
        if let Some(c) = visit(n, adj, &mut marks, &mut path) {
            return Some(c);
        }
    }
    None
}

/// Builds the scene graph: transitive stacking closure plus left/right
/// relations for every pair not connected by stacking.
pub fn closure(tree: &RelationshipTree, objects: &[ObjectInstance]) -> Result<SceneGraph, SceneError> {
    let mut adj: BTreeMap<ObjectId, Vec<ObjectId>> = BTreeMap::new();
    for e in &tree.edges {
        if e.child == e.parent {
            return Err(SceneError::Cycle(vec![e.child]));
        }
        adj.entry(e.child).or_default().push(e.parent);
    }
    if let Some(c) = find_cycle(&adj) {
        return Err(SceneError::Cycle(c));
    }

    let mut graph = SceneGraph::default();
    for &start in adj.keys() {
        let mut stack = adj[&start].clone();
        let mut seen = BTreeSet::new();
        while let Some(n) = stack.pop() {
            if seen.insert(n) {
                graph.relations.insert(Relation {
                    subject: start,
                    predicate: Predicate::On,
                    object: n,
                });
                if let Some(next) = adj.get(&n) {
                    stack.extend(next.iter().copied());
                }
            }
        }
    }

    let stacked: BTreeSet<(ObjectId, ObjectId)> = graph
        .stacking()
        .map(|r| (r.subject.min(r.object), r.subject.max(r.object)))
        .collect();
    for (i, a) in objects.iter().enumerate() {
        for b in &objects[i + 1..] {
            let key = (a.id.min(b.id), a.id.max(b.id));
            if stacked.contains(&key) {
                continue;
            }
            let dx = a.bbox.center().x - b.bbox.center().x;
            if dx.abs() < HORIZONTAL_TIE_PX {
                graph.ambiguous.insert(key);
            } else {
                let (left, right) = if dx < 0.0 { (a.id, b.id) } else { (b.id, a.id) };
                graph.relations.insert(Relation {
                    subject: left,
                    predicate: Predicate::Left,
                    object: right,
                });
            }
        }
    }
    Ok(graph)
}

impl Scene {
    pub fn object(&self, id: ObjectId) -> Option<&ObjectInstance> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn object_ids(&self) -> Vec<ObjectId> {
        self.objects.iter().map(|o| o.id).collect()
    }

    pub fn graph(&self) -> Result<SceneGraph, SceneError> {
        closure(&self.tree, &self.objects)
    }

    pub fn image_rect(&self) -> Option<AxisRect> {
        AxisRect::new(
            0.0,
            0.0,
            self.image_size.width as f64,
            self.image_size.height as f64,
        )
        .ok()
    }

    /// Collects every structural problem instead of stopping at the first.
    pub fn validate(&self) -> Result<(), Vec<ValidationIssue>> {
        let mut issues = Vec::new();
        let mut ids = BTreeSet::new();
        for o in &self.objects {
            if !ids.insert(o.id) {
                issues.push(ValidationIssue::DuplicateId { id: o.id });
            }
            if let Err(e) = o.bbox.check() {
                issues.push(ValidationIssue::InvalidGeometry {
                    what: format!("object {}", o.id),
                    message: e.to_string(),
                });
            }
        }
        match self.image_rect() {
            None => issues.push(ValidationIssue::EmptyImage),
            Some(img) => {
                for o in &self.objects {
                    if o.bbox.check().is_ok() && !img.contains(&o.bbox) {
                        issues.push(ValidationIssue::OutOfImage { id: o.id });
                    }
                }
            }
        }
        let mut tree_ok = true;
        for e in &self.tree.edges {
            if e.child == e.parent {
                issues.push(ValidationIssue::SelfStack { id: e.child });
                tree_ok = false;
            }
            for id in [e.child, e.parent] {
                if !ids.contains(&id) {
                    issues.push(ValidationIssue::DanglingTreeRef {
                        child: e.child,
                        parent: e.parent,
                        missing: id,
                    });
                    tree_ok = false;
                }
            }
        }
        let graph = match closure(&self.tree, &self.objects) {
            Ok(g) => Some(g),
            Err(SceneError::Cycle(c)) => {
                if tree_ok {
                    issues.push(ValidationIssue::Cycle { ids: c });
                }
                None
            }
            Err(_) => None,
        };
        for (i, g) in self.grasps.iter().enumerate() {
            if !ids.contains(&g.object_id) {
                issues.push(ValidationIssue::DanglingGraspRef {
                    grasp: i,
                    object_id: g.object_id,
                });
                continue;
            }
            if let Err(e) = g.rect.check() {
                issues.push(ValidationIssue::InvalidGeometry {
                    what: format!("grasp #{i}"),
                    message: e.to_string(),
                });
            }
            if let (Some(graph), true) = (&graph, tree_ok) {
                let expected = !graph.stacking().any(|r| r.object == g.object_id);
                if expected != g.surface {
                    issues.push(ValidationIssue::StaleSurfaceFlag {
                        grasp: i,
                        object_id: g.object_id,
                        recorded: g.surface,
                        expected,
                    });
                }
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(issues)
        }
    }

    /// Recomputes every grasp's surface flag from the tree.
    pub fn with_derived_surface(mut self) -> Result<Self, SceneError> {
        let graph = self.graph()?;
        let covered: BTreeSet<ObjectId> = graph.stacking().map(|r| r.object).collect();
        for g in &mut self.grasps {
            g.surface = !covered.contains(&g.object_id);
        }
        Ok(self)
    }
}

/// Whether `object_id` has nothing stacked on it.
pub fn surface_label(scene: &Scene, object_id: ObjectId) -> Result<bool, SceneError> {
    if scene.object(object_id).is_none() {
        return Err(SceneError::NotFound(object_id));
    }
    let graph = scene.graph()?;
    let covered = graph.stacking().any(|r| r.object == object_id);
    Ok(!covered)
}

/// Objects that can be grasped without disturbing anything else.
pub fn collision_free_set(scene: &Scene) -> Result<BTreeSet<ObjectId>, SceneError> {
    let graph = scene.graph()?;
    Ok(graph.graspable(scene.objects.iter().map(|o| &o.id)))
}

/// Object a scene-level selector aims for, given some (possibly corrupted)
/// graph: the lowest-id graspable object that rests on something, otherwise
/// the lowest-id graspable object.
pub fn select_target(objects: &[ObjectInstance], graph: &SceneGraph) -> Option<ObjectId> {
    let free = graph.graspable(objects.iter().map(|o| &o.id));
    let on_something: BTreeSet<ObjectId> = graph.stacking().map(|r| r.subject).collect();
    free.iter()
        .copied()
        .find(|id| on_something.contains(id))
        .or_else(|| free.first().copied())
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn phone_box_notebook_closure() {
        let objects = vec![
            obj(1, "mobile phone", 10.0, 10.0, 20.0, 10.0),
            obj(2, "box", 5.0, 5.0, 40.0, 30.0),
            obj(3, "notebook", 0.0, 0.0, 60.0, 50.0),
        ];
        let g = closure(&RelationshipTree::new([(1, 2), (2, 3)]), &objects).unwrap();
        assert!(g.holds(1, Predicate::On, 3));
        assert!(g.holds(3, Predicate::Under, 1));
        assert_eq!(g.stacking().count(), 3);
        assert_eq!(g.horizontal().count(), 0);
    }

    #[test]
    fn horizontal_from_centers() {
        let objects = vec![obj(1, "a", 0.0, 0.0, 20.0, 20.0), obj(2, "b", 40.0, 0.0, 20.0, 20.0)];
        let g = closure(&RelationshipTree::default(), &objects).unwrap();
        assert!(g.holds(1, Predicate::Left, 2));
        assert!(g.holds(2, Predicate::Right, 1));
        assert_eq!(g.relation_between(2, 1), Some(Predicate::Right));
    }

    #[test]
    fn near_tie_is_ambiguous() {
        let objects = vec![obj(1, "a", 0.0, 0.0, 20.0, 20.0), obj(2, "b", 0.5, 40.0, 20.0, 20.0)];
        let g = closure(&RelationshipTree::default(), &objects).unwrap();
        assert!(g.relations.is_empty());
        assert!(g.ambiguous.contains(&(1, 2)));
    }

    #[test]
    fn cycle_rejected() {
        let objects = vec![obj(1, "a", 0.0, 0.0, 20.0, 20.0), obj(2, "b", 40.0, 0.0, 20.0, 20.0)];
        let err = closure(&RelationshipTree::new([(1, 2), (2, 1)]), &objects).unwrap_err();
        assert!(matches!(err, SceneError::Cycle(_)));
    }

    #[test]
    fn desk_surface_labels() {
        let s = desk_scene();
        assert!(!surface_label(&s, 1).unwrap());
        assert!(surface_label(&s, 4).unwrap());
        assert!(matches!(surface_label(&s, 99), Err(SceneError::NotFound(99))));
        assert_eq!(collision_free_set(&s).unwrap(), BTreeSet::from([2, 3, 4]));
        assert!(s.validate().is_ok());
        assert_eq!(select_target(&s.objects, &s.graph().unwrap()), Some(2));
    }

    #[test]
    fn tower_and_single() {
        let objects = vec![
            obj(1, "a", 0.0, 0.0, 30.0, 30.0),
            obj(2, "b", 5.0, 5.0, 20.0, 20.0),
            obj(3, "c", 8.0, 8.0, 10.0, 10.0),
        ];
        let scene = Scene {
            id: "t".into(),
            image_size: ImageSize { width: 100, height: 100 },
            objects: objects.clone(),
            tree: RelationshipTree::new([(2, 1), (3, 2)]),
            grasps: vec![],
        };
        assert_eq!(collision_free_set(&scene).unwrap(), BTreeSet::from([3]));
        let single = Scene {
            objects: objects[..1].to_vec(),
            tree: RelationshipTree::default(),
            ..scene
        };
        assert!(surface_label(&single, 1).unwrap());
    }

    #[test]
    fn validate_reports_everything() {
        let mut s = desk_scene();
        s.grasps.push(GraspAnnotation {
            object_id: 42,
            rect: GraspRect::new(1.0, 1.0, 0.0, 1.0, 1.0).unwrap(),
            surface: true,
        });
        s.grasps[0].surface = true;
        s.objects.push(obj(4, "dup", 0.0, 0.0, 10.0, 10.0));
        s.objects.push(obj(9, "far", 630.0, 0.0, 20.0, 10.0));
        let issues = s.validate().unwrap_err();
        assert!(issues.contains(&ValidationIssue::DanglingGraspRef { grasp: 4, object_id: 42 }));
        assert!(issues.contains(&ValidationIssue::DuplicateId { id: 4 }));
        assert!(issues.contains(&ValidationIssue::OutOfImage { id: 9 }));
        assert!(issues.iter().any(|i| matches!(i, ValidationIssue::StaleSurfaceFlag { grasp: 0, .. })));

        let mut c = desk_scene();
        c.tree = RelationshipTree::new([(1, 2), (2, 1)]);
        let issues = c.validate().unwrap_err();
        assert!(issues.iter().any(|i| matches!(i, ValidationIssue::Cycle { .. })));
    }

    fn random_dag() -> impl Strategy<Value = (usize, Vec<(ObjectId, ObjectId)>)> {
        (1usize..=6).prop_flat_map(|n| {
            let pairs: Vec<(ObjectId, ObjectId)> = (0..n as u32)
                .flat_map(|i| (0..i).map(move |j| (i, j)))
                .collect();
            let m = pairs.len();
            (Just(n), proptest::collection::vec(any::<bool>(), m))
                .prop_map(move |(n, mask)| {
                    let edges = pairs
                        .iter()
                        .zip(mask)
                        .filter(|(_, keep)| *keep)
                        .map(|(p, _)| *p)
                        .collect();
                    (n, edges)
                })
        })
    }

    fn line_objects(n: usize) -> Vec<ObjectInstance> {
        (0..n as u32)
            .map(|i| obj(i, "thing", 10.0 * i as f64, 0.0, 5.0, 5.0))
            .collect()
    }

    proptest! {
        #[test]
        fn closure_idempotent((n, edges) in random_dag()) {
            let objects = line_objects(n);
            let g = closure(&RelationshipTree::new(edges), &objects).unwrap();
            let again = closure(&g.as_tree(), &objects).unwrap();
            prop_assert_eq!(g, again);
        }

        #[test]
        fn exactly_one_relation_per_pair((n, edges) in random_dag()) {
            let objects = line_objects(n);
            let g = closure(&RelationshipTree::new(edges), &objects).unwrap();
            for a in 0..n as u32 {
                prop_assert!(!g.holds(a, Predicate::On, a));
                for b in (a + 1)..n as u32 {
                    let count = [(a, b), (b, a)]
                        .iter()
                        .flat_map(|&(s, o)| [g.holds(s, Predicate::On, o), g.holds(s, Predicate::Left, o)])
                        .filter(|x| *x)
                        .count();
                    prop_assert_eq!(count, 1);
                }
            }
            prop_assert!(!g.graspable(objects.iter().map(|o| &o.id)).is_empty());
        }
    }
}
