//! Grasp correctness, top-k metrics and the experiment runners.
//!
//! F1 is reported as the harmonic mean of P@1 and R@1.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{angle_diff, GraspRect, JaccardMode};
use crate::grounding::{ground_with, noisy_ground_rng};
use crate::lang::{describe_target, parse, Description, Lexicon};
use crate::noise::{corrupt_with_mode, human_correction, CorruptionMode, NoiseConfig};
use crate::planner::{Planner, PlannerConfig, PlannerError, ScoredGrasp};
use crate::scene::{collision_free_set, select_target, ObjectId, Scene};
use crate::seeding::stream;
use crate::session::lexicon_for;

pub const JACCARD_THRESHOLD: f64 = 0.25;
pub const ANGLE_TOLERANCE_DEG: f64 = 30.0;
pub const DEFAULT_KS: [usize; 4] = [1, 3, 5, 10];
pub const DEFAULT_RHO_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
pub const F1_NOTE: &str = "F1 = harmonic mean of P@1 and R@1";

/// Whether `rect` matches some ground-truth grasp of `candidates` closely
/// enough: Jaccard above 0.25 and orientation within 30° of the same grasp.
pub fn rect_is_correct(rect: &GraspRect, scene: &Scene, candidates: &BTreeSet<ObjectId>, mode: JaccardMode) -> bool {
    scene
        .grasps
        .iter()
        .filter(|g| candidates.contains(&g.object_id))
        .any(|g| mode.jaccard(rect, &g.rect) > JACCARD_THRESHOLD && angle_diff(rect.theta, g.rect.theta) < ANGLE_TOLERANCE_DEG)
}

/// Correct iff the grasp matches an annotation of a collision-free object.
pub fn is_correct(pred: &ScoredGrasp, scene: &Scene, mode: JaccardMode) -> bool {
    match collision_free_set(scene) {
        Ok(free) => rect_is_correct(&pred.rect, scene, &free, mode),
        Err(_) => false,
    }
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
pub enum EvalError {
    #[error("metric undefined on an empty corpus")]
    Empty,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("length mismatch: {left} vs {right}")]
    Shape { left: usize, right: usize },
    #[error("rate {0} is outside [0, 1]")]
    Rate(f64),
    #[error("{0}")]
    Planner(String),
}

impl From<PlannerError> for EvalError {
    fn from(e: PlannerError) -> Self {
        EvalError::Planner(e.to_string())
    }
}

/// Fraction of scenes with at least one correct grasp among the top `k`.
/// `masks[i][j]` says whether the `j`-th ranked grasp of scene `i` is correct.
pub fn recall_at_k(masks: &[Vec<bool>], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if masks.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = masks.iter().filter(|m| m.iter().take(k).any(|&c| c)).count();
    Ok(hits as f64 / masks.len() as f64)
}

/// Correct grasps in the top `k`, over `min(k, ranked)` summed across scenes.
/// A scene with no ranked grasps adds nothing to either side.
pub fn precision_at_k(masks: &[Vec<bool>], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if masks.is_empty() {
        return Err(EvalError::Empty);
    }
    let correct: usize = masks.iter().map(|m| m.iter().take(k).filter(|&&c| c).count()).sum();
    let shown: usize = masks.iter().map(|m| m.len().min(k)).sum();
    Ok(if shown == 0 { 0.0 } else { correct as f64 / shown as f64 })
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Fraction of sentences whose parsed subject matches the expected class.
/// Sentences that fail to parse count as wrong.
pub fn subject_correct_rate(lex: &Lexicon, generated: &[Description], gt_subjects: &[String]) -> Result<f64, EvalError> {
    if generated.len() != gt_subjects.len() {
        return Err(EvalError::Shape {
            left: generated.len(),
            right: gt_subjects.len(),
        });
    }
    if generated.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = generated
        .iter()
        .zip(gt_subjects)
        .filter(|(d, s)| parse(lex, &d.text).is_ok_and(|p| &p.triple.subject_class == *s))
        .count();
    Ok(hits as f64 / generated.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    /// Object-agnostic grasp detection.
    End2End,
    /// Target chosen from a scene graph whose stacking edges flip with probability `flip`.
    SceneGraph { flip: f64 },
    /// Description-driven pipeline: `eps` of descriptions are wrong and `rho`
    /// of the wrong ones get corrected by a human.
    SceneText { eps: f64, rho: f64 },
}

impl Method {
    pub const ORACLE: Method = Method::SceneText { eps: 0.0, rho: 0.0 };

    pub fn label(&self) -> String {
        match self {
            Method::End2End => "End2End".to_string(),
            Method::SceneGraph { flip } => format!("SceneGraph(flip={flip:.2})"),
            Method::SceneText { eps, rho } if *eps == 0.0 => {
                let _ = rho;
                "SceneText(oracle)".to_string()
            }
            Method::SceneText { eps, rho } => format!("SceneText(eps={eps:.2},rho={rho:.2})"),
        }
    }

    fn check(&self) -> Result<(), EvalError> {
        let rates: &[f64] = match self {
            Method::End2End => &[],
            Method::SceneGraph { flip } => &[*flip],
            Method::SceneText { eps, rho } => &[*eps, *rho],
        };
        match rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            Some(&r) => Err(EvalError::Rate(r)),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    pub ks: Vec<usize>,
    pub planner: PlannerConfig,
    /// Grounding and scoring noise; the description error rate comes from the method.
    pub noise: NoiseConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ks: DEFAULT_KS.to_vec(),
            planner: PlannerConfig::default(),
            noise: NoiseConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneOutcome {
    pub scene_id: String,
    /// Correctness of the ranked grasps, truncated to the largest k.
    pub correct: Vec<bool>,
    /// Object the pipeline went for, if any.
    pub target: Option<ObjectId>,
    pub target_correct: bool,
    pub has_description: bool,
    pub corrupted: bool,
    pub corrected: bool,
    pub description_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub note: String,
    pub n_scenes: usize,
    pub recall: BTreeMap<usize, f64>,
    pub precision: BTreeMap<usize, f64>,
    pub f1: f64,
    /// Scenes whose chosen object overlaps the intended one with IoU above 0.5.
    pub accuracy: f64,
    /// Final descriptions that state the intended relation (description-driven runs).
    pub description_accuracy: Option<f64>,
    pub residual_error_rate: Option<f64>,
    /// Corrected descriptions over described scenes.
    pub intervention_rate: f64,
    pub config: ReportConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    #[serde(flatten)]
    pub method: Method,
    pub eval: EvalConfig,
}

/// Scene indices whose descriptions are corrupted, and which of those a
/// human corrects. Counts are exact at corpus level and nested: raising
/// `eps` or `rho` only adds scenes.
fn assign_errors(described: &[usize], eps: f64, rho: f64, seed: u64) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let mut order = described.to_vec();
    order.shuffle(&mut stream(seed, "corrupt-select", ""));
    let n_bad = (eps * order.len() as f64).round() as usize;
    let mut bad = order[..n_bad].to_vec();
    bad.shuffle(&mut stream(seed, "intervene-select", ""));
    let n_fix = (rho * bad.len() as f64).round() as usize;
    (
        bad.iter().copied().collect(),
        bad[..n_fix].iter().copied().collect(),
    )
}

struct Prepared {
    oracle: Option<Description>,
    oracle_target: Option<ObjectId>,
}

fn prepare(scene: &Scene, seed: u64) -> Result<Prepared, EvalError> {
    let graph = scene.graph().map_err(|e| EvalError::Planner(e.to_string()))?;
    let lex = lexicon_for(scene);
    let template_seed = stream(seed, "template", &scene.id).random();
    let oracle = describe_target(&lex, scene, &graph, template_seed).map_err(|e| EvalError::Planner(e.to_string()))?;
    Ok(Prepared {
        oracle,
        oracle_target: select_target(&scene.objects, &graph),
    })
}

fn run_scene(
    scene: &Scene,
    prep: &Prepared,
    method: &Method,
    cfg: &EvalConfig,
    corrupt: bool,
    correct: bool,
) -> Result<SceneOutcome, EvalError> {
    let planner = Planner::new(cfg.planner.clone(), cfg.noise);
    let seed = cfg.seed;
    let pool = planner.gen_proposals(scene, seed)?;
    let mut outcome = SceneOutcome {
        scene_id: scene.id.clone(),
        correct: Vec::new(),
        target: None,
        target_correct: false,
        has_description: prep.oracle.is_some(),
        corrupted: false,
        corrected: false,
        description_correct: false,
    };
    let ranked = match method {
        Method::End2End => {
            let r = planner.baseline_end2end(scene, &pool, seed);
            outcome.target = r.first().map(|g| g.object_id);
            r
        }
        Method::SceneGraph { flip } => {
            outcome.target = planner.scenegraph_target(scene, *flip, seed)?;
            planner.baseline_scenegraph(scene, &pool, *flip, seed)?
        }
        Method::SceneText { .. } => {
            let graph = scene.graph().map_err(|e| EvalError::Planner(e.to_string()))?;
            let grounded = match &prep.oracle {
                Some(oracle) => {
                    let mut desc = oracle.clone();
                    if corrupt {
                        let mut rng = stream(seed, "corrupt", &scene.id);
                        let mode = CorruptionMode::ALL[rng.random_range(0..CorruptionMode::ALL.len())];
                        desc = corrupt_with_mode(&lexicon_for(scene), oracle, scene, mode, &mut rng)
                            .map_err(|e| EvalError::Planner(e.to_string()))?;
                        outcome.corrupted = true;
                    }
                    if corrupt && correct {
                        desc = human_correction(oracle);
                        outcome.corrected = true;
                    }
                    outcome.description_correct = desc.triple.same_statement(&oracle.triple);
                    let mut rng = stream(seed, "ground", &scene.id);
                    let delta = cfg.noise.ground_error_rate;
                    if delta > 0.0 {
                        noisy_ground_rng(scene, &graph, &desc.triple, delta, &mut rng).ok()
                    } else {
                        ground_with(scene, &graph, &desc.triple).ok()
                    }
                }
                None if scene.objects.len() == 1 => Some(crate::grounding::GroundedObject {
                    object_id: scene.objects[0].id,
                    region: scene.objects[0].bbox,
                    confidence: 1.0,
                    ambiguous: false,
                }),
                None => None,
            };
            match grounded {
                Some(g) => {
                    outcome.target = Some(g.object_id);
                    planner.plan(scene, &pool, &g.region, seed)?
                }
                None => Vec::new(),
            }
        }
    };
    if let (Some(t), Some(o)) = (outcome.target, prep.oracle_target) {
        let (a, b) = (scene.object(t), scene.object(o));
        outcome.target_correct = matches!((a, b), (Some(a), Some(b)) if a.bbox.iou(&b.bbox) > 0.5);
    }
    let max_k = cfg.ks.iter().copied().max().unwrap_or(1);
    outcome.correct = ranked
        .iter()
        .take(max_k)
        .map(|g| is_correct(g, scene, cfg.planner.jaccard))
        .collect();
    Ok(outcome)
}

/// Per-scene outcomes, in corpus order.
pub fn evaluate_outcomes(scenes: &[Scene], method: &Method, cfg: &EvalConfig) -> Result<Vec<SceneOutcome>, EvalError> {
    method.check()?;
    let prepared: Vec<Prepared> = scenes
        .par_iter()
        .map(|s| prepare(s, cfg.seed))
        .collect::<Result<_, _>>()?;
    let described: Vec<usize> = (0..scenes.len()).filter(|&i| prepared[i].oracle.is_some()).collect();
    let (eps, rho) = match method {
        Method::SceneText { eps, rho } => (*eps, *rho),
        _ => (0.0, 0.0),
    };
    let (bad, fixed) = assign_errors(&described, eps, rho, cfg.seed);
    scenes
        .par_iter()
        .zip(prepared.par_iter())
        .enumerate()
        .map(|(i, (s, p))| run_scene(s, p, method, cfg, bad.contains(&i), fixed.contains(&i)))
        .collect()
}

pub fn report(outcomes: &[SceneOutcome], method: &Method, cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::Empty);
    }
    let masks: Vec<Vec<bool>> = outcomes.iter().map(|o| o.correct.clone()).collect();
    let mut recall = BTreeMap::new();
    let mut precision = BTreeMap::new();
    for &k in &cfg.ks {
        recall.insert(k, recall_at_k(&masks, k)?);
        precision.insert(k, precision_at_k(&masks, k)?);
    }
    let n = outcomes.len() as f64;
    let described: Vec<&SceneOutcome> = outcomes.iter().filter(|o| o.has_description).collect();
    let frac = |f: &dyn Fn(&SceneOutcome) -> bool| {
        if described.is_empty() {
            0.0
        } else {
            described.iter().filter(|o| f(o)).count() as f64 / described.len() as f64
        }
    };
    let text_run = matches!(method, Method::SceneText { .. });
    Ok(EvalReport {
        method: method.label(),
        note: F1_NOTE.to_string(),
        n_scenes: outcomes.len(),
        f1: f1(precision_at_k(&masks, 1)?, recall_at_k(&masks, 1)?),
        recall,
        precision,
        accuracy: outcomes.iter().filter(|o| o.target_correct).count() as f64 / n,
        description_accuracy: text_run.then(|| frac(&|o| o.description_correct)),
        residual_error_rate: text_run.then(|| frac(&|o| !o.description_correct)),
        intervention_rate: frac(&|o| o.corrected),
        config: ReportConfig {
            method: *method,
            eval: cfg.clone(),
        },
    })
}

pub fn evaluate(scenes: &[Scene], method: &Method, cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    let outcomes = evaluate_outcomes(scenes, method, cfg)?;
    report(&outcomes, method, cfg)
}

/// One report per intervention rate, in the order given.
pub fn sweep_intervention(scenes: &[Scene], eps: f64, rhos: &[f64], cfg: &EvalConfig) -> Result<Vec<EvalReport>, EvalError> {
    if let Some(&r) = rhos.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(EvalError::Rate(r));
    }
    rhos.iter()
        .map(|&rho| evaluate(scenes, &Method::SceneText { eps, rho }, cfg))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineGrid {
    pub flips: Vec<f64>,
    pub eps: Vec<f64>,
    pub rhos: Vec<f64>,
}

impl Default for BaselineGrid {
    fn default() -> Self {
        Self {
            flips: vec![0.0, 0.1, 0.2],
            eps: vec![0.2, 0.4],
            rhos: vec![0.0, 0.5, 1.0],
        }
    }
}

impl BaselineGrid {
    pub fn methods(&self) -> Vec<Method> {
        let mut out = vec![Method::End2End];
        out.extend(self.flips.iter().map(|&flip| Method::SceneGraph { flip }));
        out.push(Method::ORACLE);
        for &eps in &self.eps {
            out.extend(self.rhos.iter().map(|&rho| Method::SceneText { eps, rho }));
        }
        out
    }
}

pub fn compare_baselines(scenes: &[Scene], grid: &BaselineGrid, cfg: &EvalConfig) -> Result<Vec<EvalReport>, EvalError> {
    grid.methods().iter().map(|m| evaluate(scenes, m, cfg)).collect()
}

/// Plain-text table with one row per report: recall and precision columns
/// for every k, then F1.
pub fn render_table(reports: &[EvalReport]) -> String {
    let ks: Vec<usize> = reports
        .first()
        .map(|r| r.recall.keys().copied().collect())
        .unwrap_or_else(|| DEFAULT_KS.to_vec());
    let mut header = vec!["Method".to_string()];
    header.extend(ks.iter().map(|k| format!("R@{k}")));
    header.extend(ks.iter().map(|k| format!("P@{k}")));
    header.push("F1".to_string());
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![r.method.clone()];
        row.extend(ks.iter().map(|k| format!("{:.1}", 100.0 * r.recall.get(k).copied().unwrap_or(f64::NAN))));
        row.extend(ks.iter().map(|k| format!("{:.1}", 100.0 * r.precision.get(k).copied().unwrap_or(f64::NAN))));
        row.push(format!("{:.1}", 100.0 * r.f1));
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = format!("# {F1_NOTE}\n");
    for row in &rows {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| if c == 0 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}
