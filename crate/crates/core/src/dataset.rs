//! Corpus schema, persistence, validation and the synthetic scene generator.
//!
//! A corpus is one JSON document:
//!
//! ```text
//! { "schema": "lvmrd-sim/1", "records": [ SampleRecord, ... ] }
//! ```
//!
//! Each record carries the scene id, image metadata, objects, descriptions,
//! the relationship tree and grasp annotations with surface flags. Field
//! order in the file follows the struct declarations below, so serializing
//! the same corpus always yields the same bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{axis_envelope, tiou, AxisRect, GraspRect};
use crate::lang::{generate, parse, sample_pairs, Description, Lexicon, Source, DEFAULT_CLASSES};
use crate::scene::{
    GraspAnnotation, ImageSize, ObjectId, ObjectInstance, RelationshipTree, Scene, ValidationIssue,
};
use crate::seeding::stream;
use crate::session::{lexicon_for, EventPayload, SessionEvent};

pub const SCHEMA: &str = "lvmrd-sim/1";
pub const FINETUNE_SCHEMA: &str = "lvmrd-sim-finetune/1";
/// Train/val/test proportions of the reference split.
pub const DEFAULT_SPLIT: [usize; 3] = [3740, 468, 468];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub scene_id: String,
    pub image: ImageMeta,
    pub objects: Vec<ObjectInstance>,
    pub descriptions: Vec<Description>,
    pub tree: RelationshipTree,
    pub grasps: Vec<GraspAnnotation>,
}

impl SampleRecord {
    pub fn from_scene(scene: Scene, descriptions: Vec<Description>) -> Self {
        Self {
            scene_id: scene.id,
            image: ImageMeta {
                width: scene.image_size.width,
                height: scene.image_size.height,
                path: None,
            },
            objects: scene.objects,
            descriptions,
            tree: scene.tree,
            grasps: scene.grasps,
        }
    }

    pub fn scene(&self) -> Scene {
        Scene {
            id: self.scene_id.clone(),
            image_size: ImageSize {
                width: self.image.width,
                height: self.image.height,
            },
            objects: self.objects.clone(),
            tree: self.tree.clone(),
            grasps: self.grasps.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub schema: String,
    pub records: Vec<SampleRecord>,
}

impl Default for Corpus {
    fn default() -> Self {
        Self {
            schema: SCHEMA.to_string(),
            records: Vec::new(),
        }
    }
}

impl Corpus {
    pub fn new(records: Vec<SampleRecord>) -> Self {
        Self {
            schema: SCHEMA.to_string(),
            records,
        }
    }

    pub fn scenes(&self) -> Vec<Scene> {
        self.records.iter().map(SampleRecord::scene).collect()
    }

    pub fn get(&self, scene_id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.scene_id == scene_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordIssue {
    pub record: usize,
    pub scene_id: String,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported schema {0:?}")]
    Schema(String),
    #[error("{} invalid record(s); first: {}", .0.len(), .0.first().map(|i| i.message.as_str()).unwrap_or(""))]
    Invalid(Vec<RecordIssue>),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("{0}")]
    Config(String),
}

fn description_issue(scene: &Scene, lex: &Lexicon, d: &Description) -> Option<String> {
    let t = &d.triple;
    let graph = scene.graph().ok()?;
    let parsed = match parse(lex, &d.text) {
        Ok(p) => p.triple,
        Err(e) => return Some(format!("description {:?} does not parse: {}", d.text, e.message)),
    };
    if !parsed.same_statement(t) {
        return Some(format!("description {:?} does not read as {t}", d.text));
    }
    let holds = match (t.subject_id, t.object_id) {
        (Some(s), Some(o)) => {
            let classes_match = scene.object(s).is_some_and(|x| x.class_name == t.subject_class)
                && scene.object(o).is_some_and(|x| x.class_name == t.object_class);
            classes_match && graph.holds(s, t.predicate, o)
        }
        _ => scene.objects.iter().any(|s| {
            s.class_name == t.subject_class
                && scene
                    .objects
                    .iter()
                    .any(|o| o.class_name == t.object_class && graph.holds(s.id, t.predicate, o.id))
        }),
    };
    (!holds).then(|| format!("description {:?} does not hold in the scene", d.text))
}

/// Every problem with one record, as human-readable messages.
pub fn record_issues(record: &SampleRecord) -> Vec<String> {
    let scene = record.scene();
    let mut out: Vec<String> = match scene.validate() {
        Ok(()) => Vec::new(),
        Err(issues) => issues.iter().map(ValidationIssue::to_string).collect(),
    };
    if out.is_empty() {
        let lex = lexicon_for(&scene);
        out.extend(record.descriptions.iter().filter_map(|d| description_issue(&scene, &lex, d)));
    }
    out
}

pub fn validate_corpus(corpus: &Corpus) -> Result<(), Vec<RecordIssue>> {
    let mut issues = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, r) in corpus.records.iter().enumerate() {
        if !seen.insert(r.scene_id.as_str()) {
            issues.push(RecordIssue {
                record: i,
                scene_id: r.scene_id.clone(),
                message: format!("duplicate scene id {}", r.scene_id),
            });
        }
        for message in record_issues(r) {
            issues.push(RecordIssue {
                record: i,
                scene_id: r.scene_id.clone(),
                message,
            });
        }
    }
    if issues.is_empty() {
        Ok(())
    } else {
        Err(issues)
    }
}

/// Parses a corpus document without validating the records.
pub fn from_str(body: &str, path: &Path) -> Result<Corpus, DatasetError> {
    let corpus: Corpus = serde_json::from_str(body).map_err(|e| DatasetError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if corpus.schema != SCHEMA {
        return Err(DatasetError::Schema(corpus.schema));
    }
    Ok(corpus)
}

pub fn to_string(corpus: &Corpus) -> String {
    let mut s = serde_json::to_string_pretty(corpus).expect("corpus serializes");
    s.push('\n');
    s
}

/// Reads and validates a corpus; any invalid record fails the whole load.
pub fn load(path: impl AsRef<Path>) -> Result<Corpus, DatasetError> {
    let path = path.as_ref();
    let body = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let corpus = from_str(&body, path)?;
    validate_corpus(&corpus).map_err(DatasetError::Invalid)?;
    Ok(corpus)
}

/// Writes through a sibling temporary file so readers never see a partial corpus.
pub fn save(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let io = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, to_string(corpus)).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    pub width: u32,
    pub height: u32,
    /// Descriptions stored per record.
    pub descriptions: usize,
    /// Every scene with two or more objects gets at least one stacked pair.
    pub require_stack: bool,
    pub classes: Vec<String>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            min_objects: 2,
            max_objects: 6,
            width: 640,
            height: 480,
            descriptions: 3,
            require_stack: false,
            classes: DEFAULT_CLASSES.iter().map(|c| c.to_string()).collect(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::Config(m));
        if self.min_objects < 1 || self.min_objects > self.max_objects {
            return bad(format!(
                "object count range [{}, {}] is empty or starts below 1",
                self.min_objects, self.max_objects
            ));
        }
        let distinct: BTreeSet<&String> = self.classes.iter().collect();
        if distinct.len() < self.max_objects {
            return bad(format!(
                "{} distinct classes cannot fill scenes of {} objects",
                distinct.len(),
                self.max_objects
            ));
        }
        if self.width < 64 || self.height < 64 {
            return bad(format!("image {}x{} is too small", self.width, self.height));
        }
        Ok(())
    }
}

/// Nominal footprint (w, h) of a class in a 640x480 top-down view.
fn class_prior(class: &str) -> (f64, f64) {
    match class {
        "notebook" | "towel" | "paper" => (170.0, 130.0),
        "box" => (150.0, 120.0),
        "umbrella" => (200.0, 60.0),
        "wallet" | "socks" => (110.0, 80.0),
        "mobile phone" | "remote controller" | "headset" | "glasses" | "stapler" => (110.0, 60.0),
        "apple" | "cup" | "cans" | "tape" | "mouse" | "charger" => (70.0, 65.0),
        "bottle" | "banana" | "shaver" | "badminton" => (120.0, 50.0),
        "card" => (80.0, 50.0),
        "pen" | "knife" | "toothbrush" | "toothpaste" | "screwdriver" => (140.0, 30.0),
        "pliers" | "scissors" | "wrench" => (130.0, 55.0),
        _ => (100.0, 70.0),
    }
}

const GRASP_ATTEMPTS: usize = 200;
const SCENE_ATTEMPTS: usize = 50;
/// Largest fraction of a buried object's grasp that may lie under objects above it.
const MAX_BURIED_OVERLAP: f64 = 0.2;
const MIN_SIDE_PX: f64 = 12.0;

fn random_grasp<R: Rng>(rng: &mut R, bbox: &AxisRect, above: &[AxisRect]) -> Option<GraspRect> {
    for _ in 0..GRASP_ATTEMPTS {
        let m = bbox.w.min(bbox.h);
        let w = rng.random_range(0.3..=0.6) * m;
        let h = w * rng.random_range(0.25..=0.5);
        let theta: f64 = rng.random_range(-90.0..90.0);
        let probe = GraspRect::new(0.0, 0.0, theta, w, h).ok()?;
        let env = axis_envelope(&probe);
        let (ex, ey) = (env.w / 2.0, env.h / 2.0);
        if 2.0 * ex > bbox.w || 2.0 * ey > bbox.h {
            continue;
        }
        let cx = rng.random_range(bbox.x + ex..=bbox.right() - ex);
        let cy = rng.random_range(bbox.y + ey..=bbox.bottom() - ey);
        let g = GraspRect::new(cx, cy, theta, w, h).ok()?;
        let env = axis_envelope(&g);
        if above.iter().all(|a| tiou(&env, a) <= MAX_BURIED_OVERLAP) {
            return Some(g);
        }
    }
    None
}

fn try_scene<R: Rng>(rng: &mut R, cfg: &GenConfig, id: &str) -> Option<Scene> {
    let (iw, ih) = (cfg.width as f64, cfg.height as f64);
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut vocab: Vec<&String> = cfg.classes.iter().collect::<BTreeSet<_>>().into_iter().collect();
    vocab.shuffle(rng);
    let classes: Vec<&String> = vocab.into_iter().take(n).collect();

    // stacks bottom to top, holding object indices
    let mut stacks: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        if !stacks.is_empty() && rng.random_bool(0.5) {
            let s = rng.random_range(0..stacks.len());
            stacks[s].push(i);
        } else {
            stacks.push(vec![i]);
        }
    }
    if cfg.require_stack && n >= 2 && stacks.iter().all(|s| s.len() == 1) {
        let moved = stacks.pop().expect("n >= 2");
        stacks[0].extend(moved);
    }

    let slot = iw / stacks.len() as f64;
    let mut boxes: Vec<Option<AxisRect>> = vec![None; n];
    let mut edges = Vec::new();
    for (si, stack) in stacks.iter().enumerate() {
        for (level, &i) in stack.iter().enumerate() {
            let (pw, ph) = class_prior(classes[i]);
            let (pw, ph) = (pw * rng.random_range(0.8..=1.2), ph * rng.random_range(0.8..=1.2));
            let rect = if level == 0 {
                let w = pw.min(0.9 * slot);
                let h = ph.min(0.8 * ih);
                let x = si as f64 * slot + rng.random_range(0.0..=slot - w);
                let y = rng.random_range(0.0..=ih - h);
                AxisRect { x, y, w, h }
            } else {
                let below = boxes[stack[level - 1]].expect("placed bottom up");
                let w = pw.min(0.7 * below.w);
                let h = ph.min(0.7 * below.h);
                let x = below.x + rng.random_range(0.0..=below.w - w);
                let y = below.y + rng.random_range(0.0..=below.h - h);
                edges.push(((i + 1) as ObjectId, (stack[level - 1] + 1) as ObjectId));
                AxisRect { x, y, w, h }
            };
            if rect.w < MIN_SIDE_PX || rect.h < MIN_SIDE_PX {
                return None;
            }
            boxes[i] = Some(rect);
        }
    }
    let objects: Vec<ObjectInstance> = (0..n)
        .map(|i| ObjectInstance {
            id: (i + 1) as ObjectId,
            class_name: classes[i].clone(),
            bbox: boxes[i].expect("every object placed"),
        })
        .collect();

    let mut grasps = Vec::new();
    for stack in &stacks {
        for (level, &i) in stack.iter().enumerate() {
            let above: Vec<AxisRect> = stack[level + 1..].iter().map(|&j| objects[j].bbox).collect();
            for _ in 0..rng.random_range(1..=3) {
                let rect = random_grasp(rng, &objects[i].bbox, &above)?;
                grasps.push(GraspAnnotation {
                    object_id: objects[i].id,
                    rect,
                    surface: level + 1 == stack.len(),
                });
            }
        }
    }
    grasps.sort_by_key(|g| g.object_id);
    Some(Scene {
        id: id.to_string(),
        image_size: ImageSize {
            width: cfg.width,
            height: cfg.height,
        },
        objects,
        tree: RelationshipTree::new(edges),
        grasps,
    })
}

/// One synthetic scene; the same `(seed, id)` always yields the same record.
pub fn gen_record(cfg: &GenConfig, seed: u64, id: &str) -> Result<SampleRecord, DatasetError> {
    let mut rng = stream(seed, "scene", id);
    for _ in 0..SCENE_ATTEMPTS {
        let Some(scene) = try_scene(&mut rng, cfg, id) else {
            continue;
        };
        let pair_seed = rng.random();
        let lex = lexicon_for(&scene);
        let triples = sample_pairs(&scene, pair_seed, cfg.descriptions)
            .map_err(|e| DatasetError::Generation(e.to_string()))?;
        let descriptions = triples
            .iter()
            .map(|t| generate(&lex, t, rng.random()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| DatasetError::Generation(e.to_string()))?;
        return Ok(SampleRecord::from_scene(scene, descriptions));
    }
    Err(DatasetError::Generation(format!(
        "no feasible layout for scene {id} after {SCENE_ATTEMPTS} attempts"
    )))
}

pub fn gen_synthetic(n: usize, seed: u64, cfg: &GenConfig) -> Result<Corpus, DatasetError> {
    cfg.validate()?;
    let records = (0..n)
        .map(|i| gen_record(cfg, seed, &format!("sim-{i:05}")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Corpus::new(records))
}

/// Part sizes for `n` items split by `ratios`, using largest remainders so
/// the sizes sum to `n` and each is within one of its exact share.
pub fn split_sizes(n: usize, ratios: &[usize]) -> Vec<usize> {
    let total: usize = ratios.iter().sum();
    if total == 0 {
        return vec![0; ratios.len()];
    }
    let mut sizes: Vec<usize> = ratios.iter().map(|r| n * r / total).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(n * ratios[i] % total), i));
    let short = n - sizes.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        sizes[i] += 1;
    }
    sizes
}

/// Shuffles the records with `seed` and cuts them into parts sized by `ratios`.
pub fn split(corpus: &Corpus, ratios: &[usize], seed: u64) -> Vec<Corpus> {
    let mut records = corpus.records.clone();
    records.shuffle(&mut stream(seed, "split", ""));
    let mut rest = records.as_slice();
    split_sizes(rest.len(), ratios)
        .into_iter()
        .map(|k| {
            let (head, tail) = rest.split_at(k);
            rest = tail;
            Corpus::new(head.to_vec())
        })
        .collect()
}

/// One grounded HITL step, usable for fine-tuning the describer and grounder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneRecord {
    pub session_id: String,
    pub scene_id: String,
    pub image: ImageMeta,
    pub description: Description,
    pub object_id: ObjectId,
    pub grounded_box: AxisRect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneSet {
    pub schema: String,
    pub records: Vec<FineTuneRecord>,
}

impl FineTuneSet {
    pub fn count(&self, source: Source) -> usize {
        self.records.iter().filter(|r| r.description.source == source).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Export {
    pub set: FineTuneSet,
    pub warnings: Vec<String>,
}

/// Turns every successful grounding in a session log into a training
/// sample. Logs of several sessions may be concatenated.
pub fn export_session_samples(events: &[SessionEvent]) -> Export {
    let mut warnings = Vec::new();
    let mut records = Vec::new();
    let mut current: Option<(String, Scene)> = None;
    let mut per_session: BTreeMap<String, usize> = BTreeMap::new();
    for e in events {
        match &e.payload {
            EventPayload::Created { session_id, scene, .. } => {
                current = Some((session_id.clone(), scene.clone()));
            }
            EventPayload::Grounded { description, grounded } => {
                let Some((session_id, scene)) = &current else {
                    warnings.push(format!("event {}: grounding without a session header, skipped", e.seq));
                    continue;
                };
                let Some(description) = description else {
                    warnings.push(format!("event {}: grounding without a description, skipped", e.seq));
                    continue;
                };
                *per_session.entry(session_id.clone()).or_default() += 1;
                records.push(FineTuneRecord {
                    session_id: session_id.clone(),
                    scene_id: scene.id.clone(),
                    image: ImageMeta {
                        width: scene.image_size.width,
                        height: scene.image_size.height,
                        path: None,
                    },
                    description: description.clone(),
                    object_id: grounded.object_id,
                    grounded_box: grounded.region,
                });
            }
            _ => {}
        }
    }
    log::debug!("exported {} samples from {} sessions", records.len(), per_session.len());
    Export {
        set: FineTuneSet {
            schema: FINETUNE_SCHEMA.to_string(),
            records,
        },
        warnings,
    }
}
